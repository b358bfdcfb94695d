#include "mapkd/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mapkd::world {

using nlohmann::json;

double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

namespace {

Point2 rot90(Point2 d) { return {-d.y, d.x}; }
double norm(Point2 p) { return std::hypot(p.x, p.y); }

}  // namespace

// ---- lane segments -----------------------------------------------------

double LaneSegment::length() const {
  double len = 0.0;
  for (std::size_t i = 1; i < centerline.size(); ++i) len += distance(centerline[i - 1], centerline[i]);
  return len;
}

Point2 LaneSegment::point_at(double s) const {
  if (s <= 0.0) return centerline.front();
  for (std::size_t i = 1; i < centerline.size(); ++i) {
    const double d = distance(centerline[i - 1], centerline[i]);
    if (s <= d) return centerline[i - 1] + (s / d) * (centerline[i] - centerline[i - 1]);
    s -= d;
  }
  return centerline.back();
}

Point2 LaneSegment::heading_at(double s) const {
  std::size_t i = 1;
  for (; i + 1 < centerline.size(); ++i) {
    const double d = distance(centerline[i - 1], centerline[i]);
    if (s <= d) break;
    s -= d;
  }
  const Point2 d = centerline[i] - centerline[i - 1];
  return (1.0 / norm(d)) * d;
}

double LaneSegment::turn_angle() const {
  double total = 0.0;
  for (std::size_t i = 2; i < centerline.size(); ++i) {
    const Point2 a = centerline[i - 1] - centerline[i - 2];
    const Point2 b = centerline[i] - centerline[i - 1];
    total += std::atan2(a.x * b.y - a.y * b.x, a.x * b.x + a.y * b.y);
  }
  return total;
}

TurnKind classify_turn(const LaneSegment& seg) {
  const double a = seg.turn_angle();
  if (a > 0.5) return TurnKind::kLeft;
  if (a < -0.5) return TurnKind::kRight;
  return TurnKind::kStraight;
}

const LaneSegment& VectorMap::segment(int id) const {
  if (id >= 0 && id < static_cast<int>(segments.size()) && segments[id].id == id) return segments[id];
  auto it = std::find_if(segments.begin(), segments.end(), [id](const LaneSegment& s) { return s.id == id; });
  if (it == segments.end()) throw WorldError("unknown lane segment " + std::to_string(id));
  return *it;
}

void VectorMap::validate() const {
  std::set<int> ids;
  for (const auto& s : segments) {
    if (!ids.insert(s.id).second) throw WorldError("duplicate segment id " + std::to_string(s.id));
  }
  for (const auto& s : segments) {
    if (s.centerline.size() < 2) throw WorldError("segment " + std::to_string(s.id) + " has < 2 points");
    for (std::size_t i = 0; i < s.centerline.size(); ++i) {
      if (!bounds.contains(s.centerline[i])) {
        throw WorldError("segment " + std::to_string(s.id) + " leaves the map bounds");
      }
      if (i > 0 && s.centerline[i] == s.centerline[i - 1]) {
        throw WorldError("segment " + std::to_string(s.id) + " repeats a point");
      }
    }
    for (int succ : s.successors) {
      if (!ids.count(succ)) {
        throw WorldError("segment " + std::to_string(s.id) + " has dangling successor " + std::to_string(succ));
      }
    }
  }
}

// ---- map generation ----------------------------------------------------

namespace {

constexpr std::array<Point2, 4> kDirs{{{1, 0}, {0, 1}, {-1, 0}, {0, -1}}};  // E N W S

int dir_index(Point2 d) {
  for (int i = 0; i < 4; ++i)
    if (kDirs[i] == d) return i;
  return -1;
}

struct Crossing {
  Point2 center;
  bool intersection = false;
  bool control = false;
  double half = 0.0;
  int banned_turn = -1;  // TurnKind index, -1 none
  // Per travel direction: segment arriving at / leaving the crossing.
  std::array<int, 4> incoming{-1, -1, -1, -1};
  std::array<int, 4> outgoing{-1, -1, -1, -1};
};

std::vector<Point2> sample_line(Point2 a, Point2 b, double spacing) {
  const double len = distance(a, b);
  const int n = std::max(1, static_cast<int>(std::ceil(len / spacing)));
  std::vector<Point2> pts;
  pts.reserve(n + 1);
  for (int i = 0; i <= n; ++i) pts.push_back(a + (static_cast<double>(i) / n) * (b - a));
  return pts;
}

// Lane piece from a to b (road axis points) offset to the right of travel. The
// road bows by amp * sin^2(pi s) along `lateral`, flat at both ends.
std::vector<Point2> sample_piece(Point2 a, Point2 b, double amp, Point2 lateral, double lane_offset,
                                 double spacing) {
  const Point2 d = b - a;
  const double len = norm(d);
  const Point2 right_of_d = -lane_offset * rot90((1.0 / len) * d);
  if (amp == 0.0) return sample_line(a + right_of_d, b + right_of_d, spacing);
  const int n = std::max(8, static_cast<int>(std::ceil(2.0 * len / spacing)));
  std::vector<Point2> pts;
  pts.reserve(n + 1);
  pts.push_back(a + right_of_d);
  for (int i = 1; i < n; ++i) {
    const double s = static_cast<double>(i) / n;
    const double sn = std::sin(std::numbers::pi * s);
    const Point2 centre = a + s * d + (amp * sn * sn) * lateral;
    const Point2 tangent = d + (amp * std::numbers::pi * std::sin(2.0 * std::numbers::pi * s)) * lateral;
    pts.push_back(centre + -lane_offset * rot90((1.0 / norm(tangent)) * tangent));
  }
  pts.push_back(b + right_of_d);
  return pts;
}

}  // namespace

VectorMap generate_map(const MapConfig& c, std::uint64_t seed) {
  if (!(c.extent_x > 0.0) || !(c.extent_y > 0.0)) throw WorldError("map extent must be positive");
  if (!(c.lane_spacing > 0.0)) throw WorldError("lane spacing must be positive");
  if (c.intersection_density < 0.0 || c.intersection_density > 1.0) {
    throw WorldError("intersection density must lie in [0, 1]");
  }
  if (c.min_turn_radius <= c.lane_offset || c.max_turn_radius < c.min_turn_radius) {
    throw WorldError("turn radius range must exceed the lane offset");
  }
  const double min_gap = c.lane_spacing * (1.0 - 2.0 * c.spacing_jitter);
  if (min_gap <= 2.0 * c.max_turn_radius + 1.0) throw WorldError("lane spacing too small for the turn radius");
  if (c.min_bend < 0.0 || c.max_bend < c.min_bend || 2.0 * c.max_bend + 2.0 * c.lane_offset >= min_gap) {
    throw WorldError("bend amplitude range must be non-negative and narrower than the road gap");
  }
  if (!(c.min_bend_radius > c.lane_offset)) throw WorldError("minimum bend radius must exceed the lane offset");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto road_positions = [&](double extent) {
    std::vector<double> pos;
    const int n = static_cast<int>(std::floor(extent / c.lane_spacing));
    for (int i = 0; i < n; ++i) {
      pos.push_back((i + 0.5) * c.lane_spacing + c.spacing_jitter * c.lane_spacing * (2.0 * unit(rng) - 1.0));
    }
    return pos;
  };
  const std::vector<double> xs = road_positions(c.extent_x);  // vertical roads
  const std::vector<double> ys = road_positions(c.extent_y);  // horizontal roads
  if (xs.empty() || ys.empty()) throw WorldError("map extent smaller than one lane spacing");

  std::vector<Crossing> crossings(xs.size() * ys.size());
  auto crossing_at = [&](std::size_t i, std::size_t j) -> Crossing& { return crossings[j * xs.size() + i]; };
  for (std::size_t j = 0; j < ys.size(); ++j) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      Crossing& cr = crossing_at(i, j);
      cr.center = {xs[i], ys[j]};
      cr.intersection = unit(rng) < c.intersection_density;
      const double radius = c.min_turn_radius + (c.max_turn_radius - c.min_turn_radius) * unit(rng);
      const bool control = unit(rng) < c.control_probability;
      const double restrict = unit(rng);
      if (cr.intersection) {
        cr.half = radius;
        cr.control = control;
        // a quarter of intersections forbid one turn
        if (restrict < 0.25) cr.banned_turn = restrict < 0.125 ? 0 : 2;
      }
    }
  }

  // Bend amplitude of every gap between consecutive crossings (and the map
  // edges), per road in increasing coordinate order. Both directions of a
  // road share them.
  auto draw_bends = [&](const std::vector<double>& breaks, const std::vector<double>& halves, double extent) {
    std::vector<double> amps;
    for (std::size_t g = 0; g <= breaks.size(); ++g) {
      const double lo = g == 0 ? 0.0 : breaks[g - 1] + halves[g - 1];
      const double hi = g == breaks.size() ? extent : breaks[g] - halves[g];
      const double amp = c.min_bend + (c.max_bend - c.min_bend) * unit(rng);
      const double cap = (hi - lo) * (hi - lo) / (2.0 * std::numbers::pi * std::numbers::pi * c.min_bend_radius);
      amps.push_back((unit(rng) < 0.5 ? -1.0 : 1.0) * std::min(amp, cap));
    }
    return amps;
  };
  std::vector<std::vector<double>> bends_h(ys.size()), bends_v(xs.size());
  for (std::size_t j = 0; j < ys.size(); ++j) {
    std::vector<double> halves;
    for (std::size_t i = 0; i < xs.size(); ++i) halves.push_back(crossing_at(i, j).half);
    bends_h[j] = draw_bends(xs, halves, c.extent_x);
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::vector<double> halves;
    for (std::size_t j = 0; j < ys.size(); ++j) halves.push_back(crossing_at(i, j).half);
    bends_v[i] = draw_bends(ys, halves, c.extent_y);
  }

  VectorMap map;
  map.bounds = {0.0, 0.0, c.extent_x, c.extent_y};
  auto add_segment = [&](std::vector<Point2> pts, SegmentFlags flags) {
    LaneSegment s;
    s.id = static_cast<int>(map.segments.size());
    s.centerline = std::move(pts);
    s.flags = flags;
    map.segments.push_back(std::move(s));
    return map.segments.back().id;
  };

  // Directed lanes: one piece before each crossing plus a final piece, with
  // consecutive ids. Intersections cut a gap of +-half around the crossing
  // centre which connectors later bridge.
  auto build_lane = [&](int dir, const std::vector<Crossing*>& along, const std::vector<double>& bends) {
    const Point2 d = kDirs[dir];
    const bool horizontal = dir == 0 || dir == 2;
    const Point2 lateral = horizontal ? Point2{0.0, 1.0} : Point2{1.0, 0.0};
    const bool reversed = dir == 2 || dir == 3;
    auto bend = [&](std::size_t piece) { return bends[reversed ? bends.size() - 1 - piece : piece]; };
    const Point2 c0 = along.front()->center;
    Point2 start, end;
    if (dir == 0) start = {0.0, c0.y}, end = {c.extent_x, c0.y};
    if (dir == 2) start = {c.extent_x, c0.y}, end = {0.0, c0.y};
    if (dir == 1) start = {c0.x, 0.0}, end = {c0.x, c.extent_y};
    if (dir == 3) start = {c0.x, c.extent_y}, end = {c0.x, 0.0};
    Point2 piece_start = start;
    for (std::size_t k = 0; k < along.size(); ++k) {
      const Crossing* cr = along[k];
      const Point2 stop = cr->center - cr->half * d;
      add_segment(sample_piece(piece_start, stop, bend(k), lateral, c.lane_offset, c.sample_spacing),
                  {false, cr->intersection && cr->control});
      piece_start = cr->center + cr->half * d;
    }
    add_segment(sample_piece(piece_start, end, bend(along.size()), lateral, c.lane_offset, c.sample_spacing), {});
  };

  // Build lanes, then recover outgoing ids by walking each lane's pieces.
  for (int dir = 0; dir < 4; ++dir) {
    const bool horizontal = dir == 0 || dir == 2;
    const std::size_t roads = horizontal ? ys.size() : xs.size();
    const std::size_t cross = horizontal ? xs.size() : ys.size();
    for (std::size_t r = 0; r < roads; ++r) {
      std::vector<Crossing*> along;
      for (std::size_t k = 0; k < cross; ++k) {
        const std::size_t kk = (dir == 0 || dir == 1) ? k : cross - 1 - k;
        along.push_back(horizontal ? &crossing_at(kk, r) : &crossing_at(r, kk));
      }
      const int first_id = static_cast<int>(map.segments.size());
      build_lane(dir, along, horizontal ? bends_h[r] : bends_v[r]);
      // pieces are consecutive ids: piece k+1 leaves crossing k
      for (std::size_t k = 0; k < along.size(); ++k) {
        const int in = first_id + static_cast<int>(k);
        along[k]->incoming[dir] = in;
        along[k]->outgoing[dir] = in + 1;
        if (!along[k]->intersection) map.segments[in].successors.push_back(in + 1);
      }
    }
  }

  // Connectors inside intersections.
  for (Crossing& cr : crossings) {
    if (!cr.intersection) continue;
    for (int dir = 0; dir < 4; ++dir) {
      const int in = cr.incoming[dir];
      if (in < 0) continue;
      const Point2 d = kDirs[dir];
      const Point2 n = rot90(d);
      const Point2 p0 = cr.center - cr.half * d - c.lane_offset * n;
      for (int turn = 0; turn < 3; ++turn) {
        if (turn == cr.banned_turn) continue;
        const Point2 exit_dir = turn == 0 ? n : (turn == 1 ? d : -1.0 * n);
        const int out = cr.outgoing[dir_index(exit_dir)];
        if (out < 0) continue;
        std::vector<Point2> pts;
        if (turn == 1) {
          pts = sample_line(p0, cr.center + cr.half * d - c.lane_offset * n, c.sample_spacing);
        } else {
          const double radius = turn == 0 ? cr.half + c.lane_offset : cr.half - c.lane_offset;
          const Point2 centre = turn == 0 ? p0 + radius * n : p0 - radius * n;
          constexpr int kArcPoints = 9;
          for (int k = 0; k < kArcPoints; ++k) {
            const double phi = 0.5 * std::numbers::pi * k / (kArcPoints - 1);
            const Point2 radial = turn == 0 ? (std::sin(phi) * d) - (std::cos(phi) * n)
                                            : (std::sin(phi) * d) + (std::cos(phi) * n);
            pts.push_back(centre + radius * radial);
          }
        }
        // Snap the end exactly onto the outgoing lane start.
        pts.back() = map.segments[out].centerline.front();
        const int id = add_segment(std::move(pts), {true, false});
        map.segments[id].successors.push_back(out);
        map.segments[in].successors.push_back(id);
      }
    }
  }
  map.validate();
  return map;
}

// ---- simulation --------------------------------------------------------

namespace {

struct RouteCursor {
  std::size_t index = 0;
  double s = 0.0;
};

double curve_speed_limit(const LaneSegment& seg, double lateral_accel) {
  const double angle = std::fabs(seg.turn_angle());
  if (angle < 0.2) return std::numeric_limits<double>::infinity();
  const double radius = seg.length() / angle;
  return std::sqrt(lateral_accel * radius);
}

int pick_successor(const VectorMap& map, const LaneSegment& seg, const SimConfig& cfg, std::mt19937_64& rng) {
  if (seg.successors.empty()) return -1;
  if (seg.successors.size() == 1) return seg.successors.front();
  std::vector<double> w;
  for (int id : seg.successors) w.push_back(cfg.turn_probs[static_cast<int>(classify_turn(map.segment(id)))]);
  double total = 0.0;
  for (double v : w) total += v;
  if (!(total > 0.0)) w.assign(w.size(), 1.0);
  std::discrete_distribution<int> pick(w.begin(), w.end());
  return seg.successors[pick(rng)];
}

}  // namespace

std::vector<SimulatedAgent> simulate_agents_detailed(const VectorMap& map, const SimConfig& cfg,
                                                     std::uint64_t seed) {
  if (cfg.agents < 1) throw WorldError("agent count must be at least 1");
  if (cfg.noise_std < 0.0) throw WorldError("noise std must be non-negative");
  if (cfg.steps < 1) throw WorldError("step count must be positive");
  if (map.segments.empty()) throw WorldError("no reachable lane: map is empty");

  std::vector<int> candidates;
  for (const auto& seg : map.segments) {
    if (!cfg.spawn_center) {
      candidates.push_back(seg.id);
      continue;
    }
    for (const Point2& p : seg.centerline) {
      if (distance(p, *cfg.spawn_center) <= cfg.spawn_radius) {
        candidates.push_back(seg.id);
        break;
      }
    }
  }
  if (candidates.empty()) throw WorldError("no reachable lane within the spawn radius");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double dt = kStepSeconds;
  const double horizon = cfg.max_speed * cfg.steps * dt + 30.0;

  std::vector<SimulatedAgent> agents;
  for (int a = 0; a < cfg.agents; ++a) {
    SimulatedAgent agent;
    const int start = candidates[static_cast<std::size_t>(unit(rng) * candidates.size()) % candidates.size()];
    const LaneSegment& seg0 = map.segment(start);
    RouteCursor cur{0, unit(rng) * seg0.length()};
    agent.route.push_back(start);
    double ahead = seg0.length() - cur.s;
    while (ahead < horizon) {
      const int next = pick_successor(map, map.segment(agent.route.back()), cfg, rng);
      if (next < 0) break;
      agent.route.push_back(next);
      ahead += map.segment(next).length();
    }
    const double v_des = cfg.min_speed + (cfg.max_speed - cfg.min_speed) * unit(rng);
    const int wait_steps =
        static_cast<int>(std::lround((cfg.min_wait + (cfg.max_wait - cfg.min_wait) * unit(rng)) / dt));
    std::vector<char> served(agent.route.size(), 0);
    int waited = 0;

    const bool dead_end = map.segment(agent.route.back()).successors.empty();
    auto len_of = [&](std::size_t k) { return map.segment(agent.route[k]).length(); };

    // Speed allowed at the cursor given curves and stops ahead.
    auto allowed_speed = [&](const RouteCursor& c) {
      double best = v_des;
      double to_start = -c.s;  // distance to the start of route[k]
      for (std::size_t k = c.index; k < agent.route.size() && to_start < 120.0; ++k) {
        const LaneSegment& seg = map.segment(agent.route[k]);
        const double len = seg.length();
        const double vc = curve_speed_limit(seg, cfg.lateral_accel);
        if (std::isfinite(vc)) best = std::min(best, std::sqrt(vc * vc + 2.0 * cfg.decel * std::max(0.0, to_start)));
        const bool stop_here = (seg.flags.has_control && !served[k]) || (dead_end && k + 1 == agent.route.size());
        if (stop_here) best = std::min(best, std::sqrt(2.0 * cfg.decel * std::max(0.0, to_start + len)));
        to_start += len;
      }
      return best;
    };
    // Distance to the first pending stop ahead, or infinity.
    auto stop_distance = [&](const RouteCursor& c) {
      double to_end = -c.s;
      for (std::size_t k = c.index; k < agent.route.size(); ++k) {
        to_end += len_of(k);
        const LaneSegment& seg = map.segment(agent.route[k]);
        if ((seg.flags.has_control && !served[k]) || (dead_end && k + 1 == agent.route.size())) return to_end;
      }
      return std::numeric_limits<double>::infinity();
    };

    double v = std::min(v_des, allowed_speed(cur));
    for (int t = 0; t < cfg.steps; ++t) {
      const LaneSegment& seg = map.segment(agent.route[cur.index]);
      const Point2 p = seg.point_at(cur.s);
      agent.clean.push_back(p);
      agent.segment_at_step.push_back(agent.route[cur.index]);

      const double d_stop = stop_distance(cur);
      if (d_stop < 1e-6) {
        v = 0.0;
        agent.speed.push_back(0.0);
        const bool is_dead_end = dead_end && cur.index + 1 == agent.route.size();
        if (!is_dead_end && ++waited >= wait_steps) {
          served[cur.index] = 1;
          waited = 0;
        }
        continue;
      }
      agent.speed.push_back(v);
      v = std::max(0.0, std::min({v + cfg.accel * dt, allowed_speed(cur), v_des}));
      double ds = std::min(v * dt, d_stop);
      if (d_stop - ds < 0.05) ds = d_stop;
      // advance along the route
      cur.s += ds;
      while (cur.index + 1 < agent.route.size() && cur.s > len_of(cur.index)) {
        cur.s -= len_of(cur.index);
        ++cur.index;
      }
      if (cur.index + 1 == agent.route.size()) cur.s = std::min(cur.s, len_of(cur.index));
    }

    agent.track.id = a;
    agent.track.valid.assign(cfg.steps, 1);
    for (const Point2& p : agent.clean) {
      Point2 q = p;
      if (cfg.noise_std > 0.0) {
        q.x += cfg.noise_std * gauss(rng);
        q.y += cfg.noise_std * gauss(rng);
      }
      agent.track.positions.push_back(q);
    }
    agents.push_back(std::move(agent));
  }
  return agents;
}

std::vector<AgentTrack> simulate_agents(const VectorMap& map, const SimConfig& config, std::uint64_t seed) {
  std::vector<AgentTrack> tracks;
  for (auto& a : simulate_agents_detailed(map, config, seed)) tracks.push_back(std::move(a.track));
  return tracks;
}

std::string_view behavior_name(Behavior b) {
  switch (b) {
    case Behavior::kTurn: return "turn";
    case Behavior::kStraight: return "straight";
    case Behavior::kStop: return "stop";
    case Behavior::kLaneKeep: return "lane_keep";
  }
  return "unknown";
}

std::optional<Behavior> parse_behavior(std::string_view name) {
  for (Behavior b : {Behavior::kTurn, Behavior::kStraight, Behavior::kStop, Behavior::kLaneKeep}) {
    if (behavior_name(b) == name) return b;
  }
  return std::nullopt;
}

Behavior classify_behavior(const VectorMap& map, const SimulatedAgent& agent, int from, int to) {
  bool turned = false, crossed = false;
  for (int t = from; t < to && t < static_cast<int>(agent.speed.size()); ++t) {
    if (agent.speed[t] < 0.5) return Behavior::kStop;
    const LaneSegment& seg = map.segment(agent.segment_at_step[t]);
    if (seg.flags.is_intersection) {
      if (classify_turn(seg) == TurnKind::kStraight) crossed = true;
      else turned = true;
    }
  }
  if (turned) return Behavior::kTurn;
  if (crossed) return Behavior::kStraight;
  return Behavior::kLaneKeep;
}

// ---- scenes ------------------------------------------------------------

const AgentTrack& Scene::target() const {
  for (const auto& t : tracks)
    if (t.id == target_id) return t;
  throw WorldError("scene has no track for target " + std::to_string(target_id));
}

Scene make_scene(const std::optional<VectorMap>& map, const std::vector<AgentTrack>& tracks, int target_id,
                 bool include_map, int t_obs, int t_pred) {
  if (t_obs < 1 || t_pred < 1) throw WorldError("t_obs and t_pred must be positive");
  const std::size_t need = static_cast<std::size_t>(t_obs + t_pred);
  auto it = std::find_if(tracks.begin(), tracks.end(), [&](const AgentTrack& t) { return t.id == target_id; });
  if (it == tracks.end()) throw WorldError("unknown target id " + std::to_string(target_id));
  Scene scene;
  scene.t_obs = t_obs;
  scene.t_pred = t_pred;
  scene.target_id = target_id;
  for (const AgentTrack& tr : tracks) {
    if (tr.length() < need || tr.valid.size() != tr.positions.size()) {
      throw WorldError("track " + std::to_string(tr.id) + " shorter than t_obs + t_pred");
    }
    AgentTrack obs;
    obs.id = tr.id;
    obs.positions.assign(tr.positions.begin(), tr.positions.begin() + t_obs);
    obs.valid.assign(tr.valid.begin(), tr.valid.begin() + t_obs);
    const bool future_valid = std::all_of(tr.valid.begin() + t_obs, tr.valid.begin() + need,
                                          [](std::uint8_t v) { return v != 0; });
    if (tr.id == target_id) {
      if (std::none_of(obs.valid.begin(), obs.valid.end(), [](std::uint8_t v) { return v != 0; })) {
        throw WorldError("target has no valid observed step");
      }
      if (!future_valid) throw WorldError("target future is not fully valid");
    }
    if (future_valid) scene.future[tr.id].assign(tr.positions.begin() + t_obs, tr.positions.begin() + need);
    scene.tracks.push_back(std::move(obs));
  }
  if (include_map) {
    if (!map) throw WorldError("include_map requested without a map");
    scene.map = *map;
  }
  return scene;
}

Frame Frame::for_scene(const Scene& scene) {
  const AgentTrack& t = scene.target();
  Frame f;
  int last = -1;
  for (int i = static_cast<int>(t.positions.size()) - 1; i >= 0; --i) {
    if (t.valid[i]) {
      last = i;
      break;
    }
  }
  if (last < 0) throw WorldError("target has no valid observed step");
  f.origin = t.positions[last];
  for (int i = last - 1; i >= 0; --i) {
    if (!t.valid[i]) continue;
    const Point2 d = f.origin - t.positions[i];
    const double n = norm(d);
    if (n >= 1.0) {
      f.cos_h = d.x / n;
      f.sin_h = d.y / n;
      break;
    }
  }
  return f;
}

Point2 Frame::to_local(Point2 p) const {
  const Point2 d = p - origin;
  return {cos_h * d.x + sin_h * d.y, -sin_h * d.x + cos_h * d.y};
}

Point2 Frame::to_world(Point2 p) const {
  return origin + Point2{cos_h * p.x - sin_h * p.y, sin_h * p.x + cos_h * p.y};
}

// ---- dataset generation ------------------------------------------------

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  // splitmix64 over the pair
  std::uint64_t z = master * 0x9E3779B97F4A7C15ULL + stream + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

VectorMap crop_map(const VectorMap& map, Point2 centre, double radius) {
  std::vector<int> keep_old;
  std::vector<int> remap(map.segments.size(), -1);
  for (const auto& s : map.segments) {
    for (const Point2& p : s.centerline) {
      if (distance(p, centre) <= radius) {
        remap[s.id] = static_cast<int>(keep_old.size());
        keep_old.push_back(s.id);
        break;
      }
    }
  }
  VectorMap out;
  out.bounds = {std::max(map.bounds.min_x, centre.x - radius - 50.0), std::max(map.bounds.min_y, centre.y - radius - 50.0),
                std::min(map.bounds.max_x, centre.x + radius + 50.0), std::min(map.bounds.max_y, centre.y + radius + 50.0)};
  for (int old : keep_old) {
    LaneSegment s = map.segments[old];
    s.id = remap[old];
    std::vector<int> succ;
    for (int o : s.successors)
      if (remap[o] >= 0) succ.push_back(remap[o]);
    s.successors = std::move(succ);
    out.segments.push_back(std::move(s));
  }
  // bounds must enclose every kept point
  for (const auto& s : out.segments)
    for (const Point2& p : s.centerline) {
      out.bounds.min_x = std::min(out.bounds.min_x, p.x);
      out.bounds.min_y = std::min(out.bounds.min_y, p.y);
      out.bounds.max_x = std::max(out.bounds.max_x, p.x);
      out.bounds.max_y = std::max(out.bounds.max_y, p.y);
    }
  return out;
}

Behavior behavior_for_index(const std::array<double, 4>& mix, int index) {
  double total = 0.0;
  for (double w : mix) total += std::max(0.0, w);
  if (!(total > 0.0)) throw WorldError("behavior mix has no positive weight");
  // low-discrepancy sequence keeps the mix balanced for any count
  const double golden = 0.6180339887498949;
  double u = std::fmod(0.5 + index * golden, 1.0) * total;
  for (int k = 0; k < 4; ++k) {
    u -= std::max(0.0, mix[k]);
    if (u < 0.0) return static_cast<Behavior>(k);
  }
  return Behavior::kLaneKeep;
}

}  // namespace

Scene generate_scene(const DatasetConfig& config, std::uint64_t seed, int index) {
  const std::uint64_t stream = derive_seed(seed, static_cast<std::uint64_t>(index));
  std::mt19937_64 rng(stream);
  const VectorMap full = generate_map(config.map, rng());
  const Behavior wanted = behavior_for_index(config.behavior_mix, index);
  const int total_steps = config.t_obs + config.t_pred;

  SimConfig target_cfg = config.sim;
  target_cfg.agents = 1;
  target_cfg.steps = total_steps;
  target_cfg.spawn_center = Point2{config.map.extent_x / 2.0, config.map.extent_y / 2.0};
  target_cfg.spawn_radius = std::min(config.map.extent_x, config.map.extent_y) / 2.0 - 60.0;

  SimulatedAgent target;
  bool matched = false;
  for (int attempt = 0; attempt < config.max_target_attempts && !matched; ++attempt) {
    auto sim = simulate_agents_detailed(full, target_cfg, rng());
    target = std::move(sim.front());
    matched = classify_behavior(full, target, config.t_obs, total_steps) == wanted;
  }
  const Behavior got = classify_behavior(full, target, config.t_obs, total_steps);

  std::vector<AgentTrack> tracks;
  target.track.id = 0;
  tracks.push_back(target.track);
  if (config.sim.agents > 1) {
    SimConfig ctx_cfg = config.sim;
    ctx_cfg.agents = config.sim.agents - 1;
    ctx_cfg.steps = total_steps;
    ctx_cfg.spawn_center = target.clean[config.t_obs + config.t_pred / 2];
    ctx_cfg.spawn_radius = config.context_radius;
    auto ctx = simulate_agents_detailed(full, ctx_cfg, rng());
    for (std::size_t k = 0; k < ctx.size(); ++k) {
      ctx[k].track.id = static_cast<int>(k) + 1;
      tracks.push_back(std::move(ctx[k].track));
    }
  }
  const VectorMap local = crop_map(full, target.clean[config.t_obs - 1], 70.0);
  Scene scene = make_scene(local, tracks, 0, config.include_map, config.t_obs, config.t_pred);
  scene.seed = stream;
  scene.behavior = got;
  return scene;
}

std::vector<Scene> generate_scenes(const DatasetConfig& config, std::uint64_t seed, int count, int first_index) {
  std::vector<Scene> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(config, seed, first_index + i));
  return out;
}

// ---- scene files -------------------------------------------------------

namespace {

json points_json(const std::vector<Point2>& pts) {
  json a = json::array();
  for (const Point2& p : pts) {
    a.push_back(p.x);
    a.push_back(p.y);
  }
  return a;
}

std::vector<Point2> points_from(const json& a) {
  if (!a.is_array() || a.size() % 2 != 0) throw WorldError("point array must hold x,y pairs");
  std::vector<Point2> pts;
  for (std::size_t i = 0; i < a.size(); i += 2) pts.push_back({a[i].get<double>(), a[i + 1].get<double>()});
  return pts;
}

}  // namespace

std::string scene_to_line(const Scene& scene) {
  json j;
  j["version"] = scene.version;
  j["seed"] = scene.seed;
  j["t_obs"] = scene.t_obs;
  j["t_pred"] = scene.t_pred;
  j["target_id"] = scene.target_id;
  json tracks = json::array();
  for (const auto& t : scene.tracks) {
    json mask = json::array();
    for (auto v : t.valid) mask.push_back(static_cast<int>(v));
    tracks.push_back({{"id", t.id}, {"xy", points_json(t.positions)}, {"mask", mask}});
  }
  j["tracks"] = tracks;
  if (scene.map) {
    json segs = json::array();
    for (const auto& s : scene.map->segments) {
      segs.push_back({{"id", s.id},
                      {"pts", points_json(s.centerline)},
                      {"succ", s.successors},
                      {"flags", {{"is_intersection", s.flags.is_intersection}, {"has_control", s.flags.has_control}}}});
    }
    const Bounds& b = scene.map->bounds;
    j["map"] = {{"segments", segs}, {"bounds", {b.min_x, b.min_y, b.max_x, b.max_y}}};
  }
  json future = json::object();
  for (const auto& [id, pts] : scene.future) future[std::to_string(id)] = points_json(pts);
  j["future"] = future;
  if (scene.behavior) j["behavior"] = std::string(behavior_name(*scene.behavior));
  return j.dump();
}

Scene scene_from_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw WorldError(std::string("scene line is not valid: ") + e.what());
  }
  try {
    Scene s;
    s.version = j.at("version").get<int>();
    if (s.version != 1) throw WorldError("unsupported scene version " + std::to_string(s.version));
    s.seed = j.at("seed").get<std::uint64_t>();
    s.t_obs = j.at("t_obs").get<int>();
    s.t_pred = j.at("t_pred").get<int>();
    s.target_id = j.at("target_id").get<int>();
    for (const auto& t : j.at("tracks")) {
      AgentTrack tr;
      tr.id = t.at("id").get<int>();
      tr.positions = points_from(t.at("xy"));
      for (const auto& m : t.at("mask")) tr.valid.push_back(static_cast<std::uint8_t>(m.get<int>()));
      if (tr.valid.size() != tr.positions.size() || static_cast<int>(tr.positions.size()) != s.t_obs) {
        throw WorldError("track " + std::to_string(tr.id) + " length differs from t_obs");
      }
      s.tracks.push_back(std::move(tr));
    }
    if (j.contains("map")) {
      VectorMap m;
      const auto& b = j["map"].at("bounds");
      m.bounds = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
      for (const auto& sj : j["map"].at("segments")) {
        LaneSegment seg;
        seg.id = sj.at("id").get<int>();
        seg.centerline = points_from(sj.at("pts"));
        seg.successors = sj.at("succ").get<std::vector<int>>();
        seg.flags.is_intersection = sj.at("flags").at("is_intersection").get<bool>();
        seg.flags.has_control = sj.at("flags").at("has_control").get<bool>();
        m.segments.push_back(std::move(seg));
      }
      m.validate();
      s.map = std::move(m);
    }
    for (const auto& [key, pts] : j.at("future").items()) s.future[std::stoi(key)] = points_from(pts);
    if (j.contains("behavior")) s.behavior = parse_behavior(j["behavior"].get<std::string>());
    if (!s.future.count(s.target_id)) throw WorldError("scene has no target future");
    s.target();
    return s;
  } catch (const json::exception& e) {
    throw WorldError(std::string("malformed scene: ") + e.what());
  }
}

void write_scenes(const std::filesystem::path& path, const std::vector<Scene>& scenes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw WorldError("cannot write " + path.string());
  for (const Scene& s : scenes) out << scene_to_line(s) << '\n';
  if (!out) throw WorldError("write failed for " + path.string());
}

std::vector<Scene> read_scenes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WorldError("cannot read " + path.string());
  std::vector<Scene> scenes;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      scenes.push_back(scene_from_line(line));
    } catch (const WorldError& e) {
      throw WorldError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return scenes;
}

// ---- CSV import --------------------------------------------------------

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::vector<Scene> import_csv_text(std::string_view text, int t_obs, int t_pred) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw WorldError("csv: empty input");
  const auto header = split_csv(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw WorldError("csv: missing column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_ts = column("TIMESTAMP"), c_id = column("TRACK_ID"), c_type = column("OBJECT_TYPE"),
                    c_x = column("X"), c_y = column("Y");

  struct Row {
    int line;
    double ts;
    std::string track;
    bool target;
    Point2 p;
  };
  std::vector<Row> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    const std::size_t need = std::max({c_ts, c_id, c_type, c_x, c_y}) + 1;
    if (f.size() < need) throw WorldError("csv: row " + std::to_string(lineno) + " has too few fields");
    try {
      rows.push_back({lineno, std::stod(f[c_ts]), f[c_id], f[c_type] == "AGENT", {std::stod(f[c_x]), std::stod(f[c_y])}});
    } catch (const std::exception&) {
      throw WorldError("csv: row " + std::to_string(lineno) + " has a non-numeric field");
    }
  }
  const auto first_target = std::find_if(rows.begin(), rows.end(), [](const Row& r) { return r.target; });
  if (first_target == rows.end()) throw WorldError("csv: no target (AGENT) row");
  const std::string target_track = first_target->track;
  double t0 = std::numeric_limits<double>::infinity();
  std::set<long> target_bins;
  for (const Row& r : rows)
    if (r.track == target_track) t0 = std::min(t0, r.ts);
  const int total = t_obs + t_pred;

  std::vector<std::string> order;
  std::map<std::string, AgentTrack> tracks;
  for (const Row& r : rows) {
    const long bin = std::lround((r.ts - t0) / kStepSeconds);
    if (r.track == target_track) target_bins.insert(bin);
    if (bin < 0 || bin >= total) continue;
    auto [it, inserted] = tracks.try_emplace(r.track);
    if (inserted) {
      order.push_back(r.track);
      it->second.positions.assign(total, Point2{});
      it->second.valid.assign(total, 0);
    }
    if (it->second.valid[bin]) {
      throw WorldError("csv: duplicate timestamp for track " + r.track + " at row " + std::to_string(r.line));
    }
    it->second.valid[bin] = 1;
    it->second.positions[bin] = r.p;
  }
  if (static_cast<int>(target_bins.size()) < total) {
    throw WorldError("csv: target has " + std::to_string(target_bins.size()) + " distinct timestamps, need " +
                     std::to_string(total));
  }
  std::vector<AgentTrack> list;
  list.push_back(tracks.at(target_track));
  list.back().id = 0;
  int next_id = 1;
  for (const std::string& name : order) {
    if (name == target_track) continue;
    list.push_back(tracks.at(name));
    list.back().id = next_id++;
  }
  return {make_scene(std::nullopt, list, 0, false, t_obs, t_pred)};
}

std::vector<Scene> import_csv(const std::filesystem::path& path, int t_obs, int t_pred) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WorldError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return import_csv_text(ss.str(), t_obs, t_pred);
}

}  // namespace mapkd::world
