#pragma once

// Synthetic lane-graph maps, map-following agents and prediction scenes.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mapkd::world {

inline constexpr double kStepSeconds = 0.1;
inline constexpr int kDefaultObsSteps = 20;
inline constexpr int kDefaultPredSteps = 30;

class WorldError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator*(double s, Point2 a) { return {s * a.x, s * a.y}; }
double distance(Point2 a, Point2 b);

struct SegmentFlags {
  bool is_intersection = false;
  bool has_control = false;
  friend bool operator==(const SegmentFlags&, const SegmentFlags&) = default;
};

struct LaneSegment {
  int id = 0;
  std::vector<Point2> centerline;
  std::vector<int> successors;
  SegmentFlags flags;

  double length() const;
  // Point at arc length s, clamped to the polyline.
  Point2 point_at(double s) const;
  // Unit heading at arc length s.
  Point2 heading_at(double s) const;
  // Total signed heading change along the polyline, radians (left positive).
  double turn_angle() const;

  friend bool operator==(const LaneSegment&, const LaneSegment&) = default;
};

struct Bounds {
  double min_x = 0.0, min_y = 0.0, max_x = 0.0, max_y = 0.0;
  bool contains(Point2 p) const { return p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y; }
  friend bool operator==(const Bounds&, const Bounds&) = default;
};

struct VectorMap {
  std::vector<LaneSegment> segments;
  Bounds bounds;

  const LaneSegment& segment(int id) const;
  // Throws WorldError when an invariant is broken.
  void validate() const;

  friend bool operator==(const VectorMap&, const VectorMap&) = default;
};

enum class TurnKind { kLeft, kStraight, kRight };
TurnKind classify_turn(const LaneSegment& seg);

struct MapConfig {
  double extent_x = 320.0;
  double extent_y = 320.0;
  // Pitch between parallel roads, meters.
  double lane_spacing = 50.0;
  // Fractional jitter of each road position around the regular grid.
  double spacing_jitter = 0.15;
  // Probability that a road crossing is an at-grade intersection.
  double intersection_density = 0.5;
  // Intersection half-size range; turn connectors take their radius from it.
  double min_turn_radius = 7.0;
  double max_turn_radius = 12.0;
  // Distance from road centre to each directed lane.
  double lane_offset = 1.75;
  // Probability that an intersection has stop control on its approaches.
  double control_probability = 0.5;
  // Spacing of centerline samples on straight roads, meters.
  double sample_spacing = 5.0;
  // Roads bend sideways between crossings by an amplitude drawn from
  // [min_bend, max_bend] meters with random sign, capped so the bend radius
  // stays above min_bend_radius.
  double min_bend = 1.0;
  double max_bend = 6.0;
  double min_bend_radius = 15.0;
};

VectorMap generate_map(const MapConfig& config, std::uint64_t seed);

struct AgentTrack {
  int id = 0;
  std::vector<Point2> positions;
  std::vector<std::uint8_t> valid;

  std::size_t length() const { return positions.size(); }
  friend bool operator==(const AgentTrack&, const AgentTrack&) = default;
};

struct SimConfig {
  int agents = 8;
  int steps = kDefaultObsSteps + kDefaultPredSteps;
  double noise_std = 0.0;
  double min_speed = 7.0;
  double max_speed = 13.0;
  double accel = 2.0;
  double decel = 3.0;
  double lateral_accel = 2.5;
  // Probabilities of (left, straight, right) at intersections; renormalised
  // over the connectors actually available.
  std::array<double, 3> turn_probs{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  double min_wait = 0.5;
  double max_wait = 2.0;
  // Spawn lanes are drawn from segments within this radius of spawn_center.
  double spawn_radius = 60.0;
  std::optional<Point2> spawn_center;
};

// Full simulation output for one agent; tracks carry only what a sensor sees.
struct SimulatedAgent {
  AgentTrack track;
  std::vector<int> route;            // segment ids in travel order
  std::vector<int> segment_at_step;  // route segment occupied at each step
  std::vector<double> speed;         // m/s at each step
  std::vector<Point2> clean;         // noise-free positions
};

std::vector<SimulatedAgent> simulate_agents_detailed(const VectorMap& map, const SimConfig& config,
                                                     std::uint64_t seed);
std::vector<AgentTrack> simulate_agents(const VectorMap& map, const SimConfig& config, std::uint64_t seed);

enum class Behavior { kTurn, kStraight, kStop, kLaneKeep };
std::string_view behavior_name(Behavior b);
std::optional<Behavior> parse_behavior(std::string_view name);

// Behaviour of an agent over steps [from, to).
Behavior classify_behavior(const VectorMap& map, const SimulatedAgent& agent, int from, int to);

struct Scene {
  int version = 1;
  std::uint64_t seed = 0;
  int t_obs = kDefaultObsSteps;
  int t_pred = kDefaultPredSteps;
  int target_id = 0;
  // Observed steps only; every track has t_obs entries.
  std::vector<AgentTrack> tracks;
  std::optional<VectorMap> map;
  // Ground-truth futures (t_pred points). The target is always present.
  std::map<int, std::vector<Point2>> future;
  std::optional<Behavior> behavior;

  const AgentTrack& target() const;
  const std::vector<Point2>& target_future() const { return future.at(target_id); }

  friend bool operator==(const Scene&, const Scene&) = default;
};

// Splits full-length tracks at t_obs. Futures of non-target agents are kept
// in Scene::future and never reach the model-input view.
Scene make_scene(const std::optional<VectorMap>& map, const std::vector<AgentTrack>& tracks, int target_id,
                 bool include_map, int t_obs = kDefaultObsSteps, int t_pred = kDefaultPredSteps);

// Target-centred frame: origin at the last valid observed target position,
// +x along its last observed heading.
struct Frame {
  Point2 origin;
  double cos_h = 1.0;
  double sin_h = 0.0;

  static Frame for_scene(const Scene& scene);
  Point2 to_local(Point2 p) const;
  Point2 to_world(Point2 p) const;
};

// ---- dataset generation ------------------------------------------------

struct DatasetConfig {
  MapConfig map;
  SimConfig sim;
  int t_obs = kDefaultObsSteps;
  int t_pred = kDefaultPredSteps;
  // Relative weights of (turn, straight, stop, lane-keep) targets.
  std::array<double, 4> behavior_mix{1.0, 1.0, 1.0, 1.0};
  int max_target_attempts = 200;
  double context_radius = 45.0;
  bool include_map = true;
};

// Scene i draws only from its own stream derived from (seed, first_index + i).
std::vector<Scene> generate_scenes(const DatasetConfig& config, std::uint64_t seed, int count,
                                   int first_index = 0);
Scene generate_scene(const DatasetConfig& config, std::uint64_t seed, int index);

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

// ---- files -------------------------------------------------------------

std::string scene_to_line(const Scene& scene);
Scene scene_from_line(std::string_view line);
void write_scenes(const std::filesystem::path& path, const std::vector<Scene>& scenes);
std::vector<Scene> read_scenes(const std::filesystem::path& path);

// Argoverse-style CSV with TIMESTAMP, TRACK_ID, OBJECT_TYPE, X, Y columns.
// The row type AGENT marks the target.
std::vector<Scene> import_csv(const std::filesystem::path& path, int t_obs = kDefaultObsSteps,
                              int t_pred = kDefaultPredSteps);
std::vector<Scene> import_csv_text(std::string_view text, int t_obs = kDefaultObsSteps,
                                   int t_pred = kDefaultPredSteps);

}  // namespace mapkd::world
