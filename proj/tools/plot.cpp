#include "plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "flowdrive/error.hpp"

namespace flowdrive::plot {

namespace {

constexpr double kWidth = 800.0, kHeight = 600.0, kMargin = 50.0;
const char* const kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_number(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(fmt::format("plot: '{}' is not a number", s));
}

bool has(const Table& t, const std::string& name) {
  return std::find(t.header.begin(), t.header.end(), name) != t.header.end();
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

struct Svg {
  std::string body;

  std::string finish(const std::string& title) const {
    return fmt::format(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<!-- flowdrive-plot v1 -->\n"
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
        "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        "<text x=\"{2}\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\">{3}</text>\n{4}</svg>\n",
        kWidth, kHeight, kMargin, escape(title), body);
  }

  void text(double x, double y, const std::string& s, int size = 11, const char* anchor = "start") {
    body += fmt::format(
        "<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"{}\" text-anchor=\"{}\">{}</text>\n",
        x, y, size, anchor, escape(s));
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color,
                double width, double opacity = 1.0) {
    if (pts.empty()) return;
    std::string p;
    for (const auto& [x, y] : pts) p += fmt::format("{:.2f},{:.2f} ", x, y);
    body += fmt::format(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{:.2f}\" stroke-opacity=\"{:.2f}\" "
        "stroke-linejoin=\"round\"/>\n",
        p, color, width, opacity);
  }

  void circle(double x, double y, double r, const std::string& color) {
    body += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"{:.1f}\" fill=\"{}\"/>\n", x, y, r, color);
  }

  void rect(double x, double y, double w, double h, const std::string& color) {
    body += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"{}\"/>\n",
                        x, y, w, h, color);
  }
};

// Equal-aspect map from world meters to canvas pixels, y up.
struct Frame {
  double x0 = 0.0, y0 = 0.0, scale = 1.0;

  static Frame fit(const std::vector<Vec2>& pts) {
    double lx = std::numeric_limits<double>::infinity(), ly = lx, hx = -lx, hy = -lx;
    for (const Vec2& p : pts) {
      lx = std::min(lx, p.x);
      hx = std::max(hx, p.x);
      ly = std::min(ly, p.y);
      hy = std::max(hy, p.y);
    }
    if (pts.empty()) lx = ly = hx = hy = 0.0;
    const double span = std::max({hx - lx, hy - ly, 10.0}) * 1.1;
    Frame f;
    f.scale = std::min(kWidth, kHeight - kMargin) / span * 0.9;
    f.x0 = 0.5 * (lx + hx) - 0.5 * kWidth / f.scale;
    f.y0 = 0.5 * (ly + hy) - 0.5 * (kHeight + kMargin) / f.scale + kMargin / f.scale;
    return f;
  }

  std::pair<double, double> operator()(Vec2 p) const {
    return {(p.x - x0) * scale, kHeight - (p.y - y0) * scale};
  }
};

void draw_map(Svg& svg, const Frame& f, const world::World& w) {
  for (const world::Lane& lane : w.lanes) {
    std::vector<std::pair<double, double>> pts;
    for (const Vec2& p : lane.center.points()) pts.push_back(f(p));
    svg.polyline(pts, "#dddddd", lane.width * f.scale);
  }
  for (const OrientedBox& j : w.junctions) {
    std::vector<std::pair<double, double>> pts;
    for (const Vec2& c : j.corners()) pts.push_back(f(c));
    pts.push_back(pts.front());
    svg.polyline(pts, "#cccccc", 1.0);
  }
  for (const world::StaticObstacle& o : w.statics) {
    std::vector<std::pair<double, double>> pts;
    for (const Vec2& c : OrientedBox{o.pose.pos, o.pose.heading, o.length, o.width}.corners()) pts.push_back(f(c));
    pts.push_back(pts.front());
    svg.polyline(pts, "#444444", 1.5);
  }
}

std::string render_paths(const Table& t, const std::string& title, const world::World* map, bool samples) {
  const std::string key = samples ? "candidate" : "object";
  const std::size_t kc = t.column(key);
  std::map<std::string, std::vector<Vec2>> paths;
  std::vector<std::string> order;
  std::map<std::string, double> lat;
  const Pose origin = map ? map->ego_start.pose() : Pose{};
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string& id = t.rows[r][kc];
    Vec2 p{t.number(r, "x"), t.number(r, "y")};
    if (samples && map) p = to_world(origin, p);
    if (!paths.count(id)) {
      order.push_back(id);
      if (samples) paths[id].push_back(map ? origin.pos : Vec2{});
    }
    paths[id].push_back(p);
    if (samples) lat[id] = t.number(r, "lat");
  }
  std::vector<Vec2> all;
  for (const auto& [id, pts] : paths) all.insert(all.end(), pts.begin(), pts.end());
  const Frame f = Frame::fit(all);
  Svg svg;
  if (map) draw_map(svg, f, *map);
  double lo = 0.0, hi = 0.0;
  for (const auto& [id, v] : lat) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (const std::string& id : order) {
    std::vector<std::pair<double, double>> pts;
    for (const Vec2& p : paths[id]) pts.push_back(f(p));
    if (samples) {
      const double u = hi > lo ? (lat[id] - lo) / (hi - lo) : 0.5;
      const auto red = static_cast<int>(255 * u), blue = static_cast<int>(255 * (1 - u));
      svg.polyline(pts, fmt::format("#{:02x}40{:02x}", red, blue), 2.0, 0.9);
    } else if (id == "ego") {
      svg.polyline(pts, "#1f77b4", 3.0);
      svg.circle(pts.back().first, pts.back().second, 4.0, "#1f77b4");
    } else {
      svg.polyline(pts, "#888888", 1.5, 0.8);
      svg.circle(pts.back().first, pts.back().second, 3.0, "#888888");
    }
  }
  if (samples) {
    const auto o = f(map ? origin.pos : Vec2{});
    svg.circle(o.first, o.second, 4.0, "black");
    svg.text(kMargin, kHeight - 12, fmt::format("{} candidates, lateral offset {:.2f} (blue) to {:.2f} (red) m",
                                                order.size(), lo, hi));
  } else {
    svg.text(kMargin, kHeight - 12, "ego (blue), agents (gray); dots mark final positions");
  }
  return svg.finish(title);
}

void axes(Svg& svg, const std::string& xlabel, const std::string& ylabel, double ylo, double yhi) {
  svg.polyline({{kMargin, kMargin}, {kMargin, kHeight - kMargin}, {kWidth - kMargin, kHeight - kMargin}},
               "black", 1.0);
  svg.text(kWidth / 2, kHeight - 12, xlabel, 12, "middle");
  svg.text(8, kMargin - 8, ylabel, 12);
  svg.text(kMargin - 4, kHeight - kMargin, fmt::format("{:.3g}", ylo), 10, "end");
  svg.text(kMargin - 4, kMargin + 10, fmt::format("{:.3g}", yhi), 10, "end");
}

void bars(Svg& svg, const std::vector<std::string>& groups, const std::vector<std::string>& series,
          const std::vector<std::vector<double>>& values, const std::string& ylabel) {
  double hi = 0.0;
  for (const auto& g : values) {
    for (double v : g) hi = std::max(hi, v);
  }
  hi = hi > 0.0 ? hi * 1.05 : 1.0;
  axes(svg, "", ylabel, 0.0, hi);
  const double plot_w = kWidth - 2 * kMargin, plot_h = kHeight - 2 * kMargin;
  const double gw = plot_w / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const double bw = gw * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = kMargin + gw * static_cast<double>(g) + gw * 0.1;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double h = values[g][s] / hi * plot_h;
      svg.rect(gx + bw * static_cast<double>(s), kHeight - kMargin - h, bw * 0.95, h, kPalette[s % 8]);
    }
    svg.text(gx + gw * 0.4, kHeight - kMargin + 14, groups[g], 10, "middle");
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = kMargin + 14.0 * static_cast<double>(s);
    svg.rect(kWidth - kMargin - 150, y - 9, 10, 10, kPalette[s % 8]);
    svg.text(kWidth - kMargin - 135, y, series[s], 11);
  }
}

std::string render_clusters(const Table& t, const std::string& title) {
  const std::vector<std::string> series{"fraction", "share_none", "share_scenario", "share_cluster"};
  std::vector<std::string> groups;
  std::vector<std::vector<double>> values;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    groups.push_back(t.rows[r][t.column("cluster")]);
    std::vector<double> v;
    for (const auto& s : series) v.push_back(t.number(r, s));
    values.push_back(v);
  }
  Svg svg;
  bars(svg, groups, series, values, "share of samples");
  return svg.finish(title);
}

std::string render_report(const Table& t, const std::string& title) {
  std::map<std::string, std::map<std::string, std::pair<double, int>>> acc;
  std::vector<std::string> planners, modes;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string& p = t.rows[r][t.column("planner")];
    const std::string& m = t.rows[r][t.column("mode")];
    if (std::find(planners.begin(), planners.end(), p) == planners.end()) planners.push_back(p);
    if (std::find(modes.begin(), modes.end(), m) == modes.end()) modes.push_back(m);
    auto& cell = acc[p][m];
    cell.first += t.number(r, "total");
    cell.second += 1;
  }
  std::vector<std::vector<double>> values;
  for (const auto& p : planners) {
    std::vector<double> v;
    for (const auto& m : modes) {
      const auto& cell = acc[p][m];
      v.push_back(cell.second ? cell.first / cell.second : 0.0);
    }
    values.push_back(v);
  }
  Svg svg;
  bars(svg, planners, modes, values, "mean driving score");
  return svg.finish(title);
}

std::string render_loss(const Table& t, const std::string& title) {
  std::vector<std::pair<double, double>> pts;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, smax = 1.0;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const double l = std::log10(std::max(t.number(r, "loss"), 1e-12));
    lo = std::min(lo, l);
    hi = std::max(hi, l);
    smax = std::max(smax, t.number(r, "step"));
  }
  if (!(hi > lo)) hi = lo + 1.0;
  const double plot_w = kWidth - 2 * kMargin, plot_h = kHeight - 2 * kMargin;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const double l = std::log10(std::max(t.number(r, "loss"), 1e-12));
    pts.emplace_back(kMargin + t.number(r, "step") / smax * plot_w,
                     kHeight - kMargin - (l - lo) / (hi - lo) * plot_h);
  }
  Svg svg;
  axes(svg, "step", "loss (log scale)", std::pow(10.0, lo), std::pow(10.0, hi));
  svg.polyline(pts, "#1f77b4", 1.5);
  return svg.finish(title);
}

}  // namespace

std::size_t Table::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  FD_CHECK(it != header.end(), "plot: missing column '{}'", name);
  return static_cast<std::size_t>(it - header.begin());
}

double Table::number(std::size_t row, const std::string& name) const {
  return to_number(rows.at(row).at(column(name)));
}

Table parse_csv(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto cells = split(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    FD_CHECK(cells.size() == t.header.size(), "plot: row has {} cells, header has {}", cells.size(),
             t.header.size());
    t.rows.push_back(std::move(cells));
  }
  FD_CHECK(!t.header.empty(), "plot: input has no header");
  return t;
}

Kind detect(const Table& t) {
  if (has(t, "object") && has(t, "x") && has(t, "y")) return Kind::Trace;
  if (has(t, "candidate") && has(t, "x") && has(t, "y")) return Kind::Samples;
  if (has(t, "cluster") && has(t, "share_cluster")) return Kind::Clusters;
  if (has(t, "step") && has(t, "loss")) return Kind::Loss;
  if (has(t, "planner") && has(t, "total")) return Kind::Report;
  throw Error("plot: unrecognized input (expected a trace, samples, cluster report, loss log or eval report)");
}

std::string render(const Table& t, const std::string& title, const world::World* map) {
  switch (detect(t)) {
    case Kind::Trace: return render_paths(t, title, map, false);
    case Kind::Samples: return render_paths(t, title, map, true);
    case Kind::Clusters: return render_clusters(t, title);
    case Kind::Loss: return render_loss(t, title);
    case Kind::Report: return render_report(t, title);
  }
  return {};
}

}  // namespace flowdrive::plot
