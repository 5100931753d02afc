#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcd {

// Error hierarchy. Every failure surfaced by the library derives from Error so
// that the CLI can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kPi = 3.14159265358979323846;

struct Vec3 {
  double x = 0, y = 0, z = 0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double squared_distance(Vec3 a, Vec3 b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

struct Point {
  double x = 0, y = 0, z = 0;
  double r = 0;  // reflectance in [0, 1]

  Vec3 xyz() const { return {x, y, z}; }
  friend bool operator==(const Point&, const Point&) = default;
};

struct PointCloud {
  std::vector<Point> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  std::vector<Vec3> coordinates() const;
  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

/// Oriented box. `l` runs along the heading axis, `w` across it, `h` is vertical.
struct Box3D {
  double cx = 0, cy = 0, cz = 0;
  double w = 1, l = 1, h = 1;
  double yaw = 0;

  Vec3 center() const { return {cx, cy, cz}; }
  double volume() const { return w * l * h; }
  double diagonal() const;
  friend bool operator==(const Box3D&, const Box3D&) = default;
};

/// Throws Error if dims are not strictly positive or any field is non-finite.
void validate_box(const Box3D& box);

/// Inclusive containment test in the box frame, with `tolerance` meters of slack.
bool point_in_box(Vec3 p, const Box3D& box, double tolerance = 1e-6);

struct LabeledScene {
  PointCloud cloud;
  std::vector<Box3D> boxes;
  std::vector<int> classes;  // one class id per box

  void validate(int n_classes) const;
  friend bool operator==(const LabeledScene&, const LabeledScene&) = default;
};

/// Per-point index of the containing box, or -1 for background.
std::vector<int> assign_points_to_boxes(std::span<const Vec3> points, std::span<const Box3D> boxes);

/// Maps theta into (-pi, pi]. Throws NumericError on non-finite input.
double normalize_yaw(double theta);

/// Deterministic random stream. The engine is mt19937_64 and all distributions are
/// derived here from raw 64-bit draws, so streams are identical across platforms
/// and standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p) { return uniform() < p; }

  /// Child stream for worker `stream`; depends only on the parent seed.
  Rng fork(std::uint64_t stream) const;
  std::uint64_t seed() const { return seed_; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace pcd
