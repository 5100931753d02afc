#include "pcd/core.hpp"

#include <cmath>

namespace pcd {

std::vector<Vec3> PointCloud::coordinates() const {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(p.xyz());
  return out;
}

double Box3D::diagonal() const { return std::sqrt(w * w + l * l + h * h); }

void validate_box(const Box3D& b) {
  for (double v : {b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw}) {
    if (!std::isfinite(v)) throw Error("box has a non-finite field");
  }
  if (b.w <= 0 || b.l <= 0 || b.h <= 0) throw Error("box dimensions must be positive");
}

bool point_in_box(Vec3 p, const Box3D& b, double tolerance) {
  const double dx = p.x - b.cx, dy = p.y - b.cy;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  const double lz = p.z - b.cz;
  return std::abs(lx) <= b.l / 2 + tolerance && std::abs(ly) <= b.w / 2 + tolerance &&
         std::abs(lz) <= b.h / 2 + tolerance;
}

void LabeledScene::validate(int n_classes) const {
  if (boxes.size() != classes.size()) throw Error("scene has mismatched box and class counts");
  for (const auto& b : boxes) validate_box(b);
  for (int c : classes) {
    if (c < 0 || c >= n_classes) throw Error("scene class id out of range: " + std::to_string(c));
  }
}

std::vector<int> assign_points_to_boxes(std::span<const Vec3> points, std::span<const Box3D> boxes) {
  std::vector<int> out(points.size(), -1);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      if (point_in_box(points[i], boxes[b])) {
        out[i] = static_cast<int>(b);
        break;
      }
    }
  }
  return out;
}

double normalize_yaw(double theta) {
  if (!std::isfinite(theta)) throw NumericError("normalize_yaw: non-finite angle");
  double r = std::fmod(theta, 2 * kPi);  // (-2pi, 2pi)
  if (r > kPi) r -= 2 * kPi;
  if (r <= -kPi) r += 2 * kPi;
  return r;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error("Rng::below: empty range");
  // rejection sampling keeps the draw unbiased
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return v % n;
}

double Rng::normal(double mean, double stddev) {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2 * kPi * u2);
}

Rng Rng::fork(std::uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream + 1))); }

}  // namespace pcd
