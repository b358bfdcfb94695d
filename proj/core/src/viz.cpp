#include "mapkd/viz.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mapkd::viz {

namespace {

constexpr double kPanelSize = 480.0;
constexpr double kViewMeters = 90.0;
constexpr double kLegendHeight = 150.0;
constexpr std::array<const char*, 10> kPalette{"#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
                                               "#17becf", "#bcbd22", "#7f7f7f", "#1f77b4", "#2ca02c"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct View {
  world::Point2 center;
  double offset_x = 0.0;
  world::Point2 map(world::Point2 p) const {
    const double s = kPanelSize / kViewMeters;
    return {offset_x + kPanelSize / 2 + (p.x - center.x) * s, 30.0 + kPanelSize / 2 - (p.y - center.y) * s};
  }
};

void polyline(std::ostringstream& out, const View& v, std::span<const world::Point2> pts, const char* color,
              double width, const char* extra = "") {
  out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << num(width) << "\"" << extra
      << " points=\"";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto q = v.map(pts[i]);
    out << (i ? " " : "") << num(q.x) << ',' << num(q.y);
  }
  out << "\"/>\n";
}

}  // namespace

std::string render_svg(const world::Scene& scene, std::span<const Panel> panels) {
  if (panels.empty()) throw VizError("nothing to draw");
  const world::AgentTrack& target = scene.target();
  world::Point2 center;
  for (std::size_t t = 0; t < target.positions.size(); ++t)
    if (target.valid[t]) center = target.positions[t];

  const double width = kPanelSize * panels.size();
  const double height = kPanelSize + 30.0 + kLegendHeight;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
      << "\" viewBox=\"0 0 " << num(width) << ' ' << num(height) << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const metrics::Prediction* pred = panels[i].prediction;
    if (!pred || pred->modes.empty()) throw VizError("missing prediction for the target");
    View v{center, kPanelSize * i};
    out << "<g>\n<rect x=\"" << num(v.offset_x) << "\" y=\"30\" width=\"" << num(kPanelSize) << "\" height=\""
        << num(kPanelSize) << "\" fill=\"none\" stroke=\"#000000\"/>\n";
    out << "<text x=\"" << num(v.offset_x + 8) << "\" y=\"20\" font-family=\"monospace\" font-size=\"14\">"
        << panels[i].title << "</text>\n";
    if (scene.map) {
      for (const auto& seg : scene.map->segments) {
        polyline(out, v, seg.centerline, seg.flags.is_intersection ? "#c7c7c7" : "#a0a0a0", 1.0);
      }
    }
    for (const auto& tr : scene.tracks) {
      if (tr.id == scene.target_id) continue;
      std::vector<world::Point2> pts;
      for (std::size_t t = 0; t < tr.positions.size(); ++t)
        if (tr.valid[t]) pts.push_back(tr.positions[t]);
      polyline(out, v, pts, "#6b8fb3", 1.5);
    }
    std::vector<world::Point2> obs;
    for (std::size_t t = 0; t < target.positions.size(); ++t)
      if (target.valid[t]) obs.push_back(target.positions[t]);
    polyline(out, v, obs, "#1f3f9f", 3.0);
    polyline(out, v, scene.target_future(), "#2ca02c", 3.0);
    for (std::size_t k = 0; k < pred->modes.size(); ++k) {
      polyline(out, v, pred->modes[k], kPalette[k % kPalette.size()], 1.5, " stroke-opacity=\"0.85\"");
    }
    const std::size_t per_col = 10;
    for (std::size_t k = 0; k < pred->modes.size(); ++k) {
      const double x = v.offset_x + 8 + 150.0 * (k / per_col);
      const double y = kPanelSize + 50.0 + 13.0 * (k % per_col);
      out << "<rect x=\"" << num(x) << "\" y=\"" << num(y - 8) << "\" width=\"10\" height=\"3\" fill=\""
          << kPalette[k % kPalette.size()] << "\"/>";
      out << "<text x=\"" << num(x + 14) << "\" y=\"" << num(y) << "\" font-family=\"monospace\" font-size=\"11\">"
          << "mode " << k << " p=" << (k < pred->probs.size() ? num(pred->probs[k]) : std::string("-"))
          << "</text>\n";
    }
    out << "</g>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string render_svg(const world::Scene& scene, const metrics::Prediction& prediction, const std::string& title) {
  const Panel p{&prediction, title};
  return render_svg(scene, std::span<const Panel>(&p, 1));
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw VizError("cannot write " + path.string());
  out << content;
}

}  // namespace mapkd::viz
