#pragma once

// Deterministic SVG rendering of a scene with predicted trajectories.

#include <filesystem>
#include <stdexcept>
#include <string>

#include "mapkd/metrics.hpp"
#include "mapkd/synthworld.hpp"

namespace mapkd::viz {

class VizError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Panel {
  const metrics::Prediction* prediction = nullptr;
  std::string title;
};

// One panel per prediction, laid out left to right on a fixed canvas. Lanes
// are drawn when the scene carries a map.
std::string render_svg(const world::Scene& scene, std::span<const Panel> panels);
std::string render_svg(const world::Scene& scene, const metrics::Prediction& prediction, const std::string& title);

void write_file(const std::filesystem::path& path, const std::string& content);

}  // namespace mapkd::viz
