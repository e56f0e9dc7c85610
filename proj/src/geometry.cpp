#include "flowdrive/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numbers>

#include "flowdrive/error.hpp"

namespace flowdrive {

double wrap_angle(double a) {
  constexpr double kPi = std::numbers::pi;
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a <= 0.0) a += 2.0 * kPi;
  return a - kPi;
}

Vec2 to_local(const Pose& frame, Vec2 p) { return rotate(p - frame.pos, -frame.heading); }
Vec2 to_world(const Pose& frame, Vec2 p) { return rotate(p, frame.heading) + frame.pos; }

Pose to_local(const Pose& frame, const Pose& p) {
  return {to_local(frame, p.pos), wrap_angle(p.heading - frame.heading)};
}

Pose to_world(const Pose& frame, const Pose& p) {
  return {to_world(frame, p.pos), wrap_angle(p.heading + frame.heading)};
}

Polyline::Polyline(std::vector<Vec2> points) : points_(std::move(points)) {
  FD_CHECK(points_.size() >= 2, "polyline needs at least two points, got {}", points_.size());
  arc_.resize(points_.size());
  arc_[0] = 0.0;
  for (std::size_t i = 1; i < points_.size(); ++i) {
    const double d = (points_[i] - points_[i - 1]).norm();
    FD_CHECK(d > 0.0, "polyline has a repeated point at index {}", i);
    arc_[i] = arc_[i - 1] + d;
  }
}

std::size_t Polyline::segment_at(double s) const {
  if (s <= 0.0) return 0;
  if (s >= length()) return points_.size() - 2;
  auto it = std::upper_bound(arc_.begin(), arc_.end(), s);
  return static_cast<std::size_t>(std::distance(arc_.begin(), it)) - 1;
}

Vec2 Polyline::point_at(double s) const {
  const std::size_t i = segment_at(s);
  const Vec2 a = points_[i], b = points_[i + 1];
  const double seg = arc_[i + 1] - arc_[i];
  return a + (b - a) * ((s - arc_[i]) / seg);
}

double Polyline::heading_at(double s) const {
  const std::size_t i = segment_at(s);
  const Vec2 d = points_[i + 1] - points_[i];
  return std::atan2(d.y, d.x);
}

double Polyline::curvature_at(double s, double window) const {
  const double h0 = heading_at(s - window);
  const double h1 = heading_at(s + window);
  return std::abs(wrap_angle(h1 - h0)) / (2.0 * window);
}

Projection Polyline::project(Vec2 p) const {
  Projection best;
  best.distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < points_.size(); ++i) {
    const Vec2 a = points_[i], b = points_[i + 1];
    const Vec2 ab = b - a;
    const double len2 = ab.dot(ab);
    double u = (p - a).dot(ab) / len2;
    // Extend the first and last segments so points beyond the ends project.
    if (i > 0) u = std::max(u, 0.0);
    if (i + 2 < points_.size()) u = std::min(u, 1.0);
    const Vec2 q = a + ab * u;
    const double d = (p - q).norm();
    if (d < best.distance) {
      best.distance = d;
      best.s = arc_[i] + u * std::sqrt(len2);
      best.lateral = ab.cross(p - a) / std::sqrt(len2);
    }
  }
  return best;
}

std::vector<Vec2> Polyline::sample(double s0, double s1, std::size_t n) const {
  std::vector<Vec2> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = n == 1 ? s0 : s0 + (s1 - s0) * static_cast<double>(i) / double(n - 1);
    out.push_back(point_at(s));
  }
  return out;
}

std::vector<Vec2> straight_points(Vec2 a, double heading, double length, double spacing) {
  const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(length / spacing)));
  std::vector<Vec2> pts;
  pts.reserve(n + 1);
  const Vec2 d = unit(heading);
  for (std::size_t i = 0; i <= n; ++i) pts.push_back(a + d * (length * double(i) / double(n)));
  return pts;
}

std::vector<Vec2> arc_points(Vec2 start, double heading, double radius, double sweep,
                             double spacing) {
  const double len = std::abs(sweep) * radius;
  const std::size_t n = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(len / spacing)));
  const double side = sweep >= 0.0 ? 1.0 : -1.0;
  const Vec2 center = start + unit(heading + side * std::numbers::pi / 2.0) * radius;
  std::vector<Vec2> pts;
  pts.reserve(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    const double a = heading - side * std::numbers::pi / 2.0 + sweep * double(i) / double(n);
    pts.push_back(center + unit(a) * radius);
  }
  return pts;
}

std::vector<Vec2> join_points(std::initializer_list<std::vector<Vec2>> parts) {
  std::vector<Vec2> out;
  for (const auto& part : parts) {
    for (const Vec2& p : part) {
      if (!out.empty() && (p - out.back()).norm() < 1e-6) continue;
      out.push_back(p);
    }
  }
  return out;
}

std::array<Vec2, 4> OrientedBox::corners() const {
  const Vec2 f = unit(heading) * (length / 2.0);
  const Vec2 l = unit(heading + std::numbers::pi / 2.0) * (width / 2.0);
  return {center + f + l, center + f - l, center - f - l, center - f + l};
}

bool overlaps(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const std::array<Vec2, 4> axes{unit(a.heading), unit(a.heading + std::numbers::pi / 2.0),
                                 unit(b.heading), unit(b.heading + std::numbers::pi / 2.0)};
  for (const Vec2& ax : axes) {
    double amin = std::numeric_limits<double>::infinity(), amax = -amin;
    double bmin = amin, bmax = -amin;
    for (const Vec2& c : ca) {
      amin = std::min(amin, c.dot(ax));
      amax = std::max(amax, c.dot(ax));
    }
    for (const Vec2& c : cb) {
      bmin = std::min(bmin, c.dot(ax));
      bmax = std::max(bmax, c.dot(ax));
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

}  // namespace flowdrive
