#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

namespace flowdrive {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double cross(Vec2 o) const { return x * o.y - y * o.x; }
  double norm() const { return std::hypot(x, y); }
  bool operator==(const Vec2&) const = default;
};

inline Vec2 unit(double heading) { return {std::cos(heading), std::sin(heading)}; }
inline Vec2 rotate(Vec2 v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

/// Wraps to (-pi, pi].
double wrap_angle(double a);

struct Pose {
  Vec2 pos;
  double heading = 0.0;
};

/// Expresses a world point in the frame of `frame` (origin at its position,
/// x-axis along its heading).
Vec2 to_local(const Pose& frame, Vec2 p);
Vec2 to_world(const Pose& frame, Vec2 p);
Pose to_local(const Pose& frame, const Pose& p);
Pose to_world(const Pose& frame, const Pose& p);

struct Projection {
  double s = 0.0;        ///< arc length of the closest point
  double lateral = 0.0;  ///< signed offset, positive to the left
  double distance = 0.0;
};

class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> points);

  const std::vector<Vec2>& points() const { return points_; }
  const std::vector<double>& arc() const { return arc_; }
  double length() const { return arc_.empty() ? 0.0 : arc_.back(); }
  bool empty() const { return points_.size() < 2; }

  /// Point at arc length s; extrapolates linearly past either end.
  Vec2 point_at(double s) const;
  double heading_at(double s) const;
  /// Unsigned curvature estimated over a window around s.
  double curvature_at(double s, double window = 2.0) const;
  Projection project(Vec2 p) const;
  /// Same path sampled at n equally spaced arc lengths in [s0, s1].
  std::vector<Vec2> sample(double s0, double s1, std::size_t n) const;

 private:
  std::size_t segment_at(double s) const;

  std::vector<Vec2> points_;
  std::vector<double> arc_;
};

/// Straight segment from a along heading for `length` meters.
std::vector<Vec2> straight_points(Vec2 a, double heading, double length, double spacing = 5.0);
/// Circular arc starting at `start` with `heading`, turning by `sweep`
/// radians (positive = left) at radius r.
std::vector<Vec2> arc_points(Vec2 start, double heading, double radius, double sweep,
                             double spacing = 1.0);
/// Concatenates point runs, dropping duplicated joints.
std::vector<Vec2> join_points(std::initializer_list<std::vector<Vec2>> parts);

struct OrientedBox {
  Vec2 center;
  double heading = 0.0;
  double length = 0.0;
  double width = 0.0;

  std::array<Vec2, 4> corners() const;
};

/// Separating-axis overlap test.
bool overlaps(const OrientedBox& a, const OrientedBox& b);

}  // namespace flowdrive
