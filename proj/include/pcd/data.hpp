#pragma once

#include <array>
#include <string>
#include <vector>

#include "pcd/config.hpp"
#include "pcd/core.hpp"

namespace pcd::data {

struct ClassSizes {
  std::string name;
  std::array<double, 2> w{0, 0}, l{0, 0}, h{0, 0};  // uniform ranges [lo, hi]
  friend bool operator==(const ClassSizes&, const ClassSizes&) = default;
};

/// Synthetic scene recipe. Every key is required when loading from text:
///   extent = X, Y, Z            scene spans [-X/2, X/2] x [-Y/2, Y/2] x [0, Z]
///   classes = car, cyclist
///   <class>.w / .l / .h = lo, hi
///   objects = min, max          objects per scene, uniform inclusive
///   surface_density             points per m^2 on visible box faces
///   clutter_density             ground points per m^2
///   noise_points                uniform points in the scene volume
///   dropout                     fraction of surface points removed
struct SceneGenConfig {
  std::array<double, 3> extent{40, 40, 4};
  std::vector<ClassSizes> classes{{"car", {1.6, 2.0}, {3.5, 4.5}, {1.4, 1.7}},
                                  {"cyclist", {0.5, 0.8}, {1.6, 2.0}, {1.6, 1.8}}};
  std::array<int, 2> objects{2, 6};
  double surface_density = 20.0;
  double clutter_density = 1.0;
  int noise_points = 50;
  double dropout = 0.1;

  void validate() const;
  std::string serialize() const;
  static SceneGenConfig from_kv(const KeyValueFile& kv);
  static SceneGenConfig load(const std::string& path) { return from_kv(KeyValueFile::load(path)); }
  friend bool operator==(const SceneGenConfig&, const SceneGenConfig&) = default;
};

/// Every box of a generated scene holds at least this many points.
inline constexpr int kMinPointsPerBox = 8;

/// Boxes rest on the ground with non-overlapping footprints. Points are sampled
/// on faces visible from the origin plus the top face, then ground clutter
/// outside every footprint, then uniform noise. Throws Error when a box cannot be
/// placed after 100 attempts.
LabeledScene generate_scene(const SceneGenConfig& cfg, std::uint64_t seed);

/// Mirror across the X axis: y -> -y, yaw -> -yaw.
LabeledScene flip_x(const LabeledScene& s);
/// Rotation about the vertical axis through the origin.
LabeledScene rotate_z(const LabeledScene& s, double angle);
/// Uniform scaling of coordinates and box dimensions.
LabeledScene scale_scene(const LabeledScene& s, double factor);

struct AugmentOptions {
  double flip_probability = 0.5;
  double max_rotation = kPi / 4;
  std::array<double, 2> scale{0.9, 1.1};
  bool object_noise = true;
  double object_translation_std = 0.1;
  double object_yaw_std = 0.05;
};

/// Random flip, rotation and scaling, then per-object rigid jitter of each box
/// with its member points. A jittered box that would overlap another box or
/// swallow a foreign point keeps its original pose, so point-in-box membership
/// is preserved.
LabeledScene augment(const LabeledScene& s, Rng& rng, const AugmentOptions& opt = {});

// Scene file: magic "PCS1", u64 point count, u64 box count, points as 4 x f64
// (x, y, z, r), boxes as 7 x f64 (cx, cy, cz, w, l, h, yaw) followed by a u32
// class id. Little-endian.
std::string encode_scene(const LabeledScene& s);
LabeledScene decode_scene(const std::string& bytes);
void save_scene(const std::string& path, const LabeledScene& s);
LabeledScene load_scene(const std::string& path);

/// Scene files of a dataset directory (`*.pcs`) in lexicographic order.
std::vector<std::string> list_scenes(const std::string& dir);
std::vector<LabeledScene> load_dataset(const std::string& dir);

}  // namespace pcd::data
