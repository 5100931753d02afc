#include "pcd/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "pcd/binio.hpp"
#include "pcd/boxes.hpp"
#include "pcd/checkpoint.hpp"

namespace pcd::data {

void SceneGenConfig::validate() const {
  for (double e : extent) {
    if (!(e > 0)) throw ConfigError("config key 'extent' must be positive");
  }
  if (classes.empty()) throw ConfigError("config key 'classes' must list at least one class");
  for (const auto& c : classes) {
    for (const auto* r : {&c.w, &c.l, &c.h}) {
      if (!((*r)[0] > 0) || (*r)[1] < (*r)[0]) {
        throw ConfigError("config key '" + c.name + ".w/.l/.h' needs 0 < lo <= hi");
      }
    }
    if (c.h[1] > extent[2]) throw ConfigError("config key '" + c.name + ".h' exceeds the scene height");
  }
  if (objects[0] < 0 || objects[1] < objects[0]) throw ConfigError("config key 'objects' needs 0 <= min <= max");
  if (!(surface_density > 0)) throw ConfigError("config key 'surface_density' must be positive");
  if (!(clutter_density >= 0)) throw ConfigError("config key 'clutter_density' must be non-negative");
  if (noise_points < 0) throw ConfigError("config key 'noise_points' must be non-negative");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("config key 'dropout' must lie in [0, 1)");
}

std::string SceneGenConfig::serialize() const {
  std::string out;
  auto line = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  line("extent", format_doubles({extent[0], extent[1], extent[2]}));
  std::vector<std::string> names;
  for (const auto& c : classes) names.push_back(c.name);
  line("classes", format_strings(names));
  for (const auto& c : classes) {
    line(c.name + ".w", format_doubles({c.w[0], c.w[1]}));
    line(c.name + ".l", format_doubles({c.l[0], c.l[1]}));
    line(c.name + ".h", format_doubles({c.h[0], c.h[1]}));
  }
  line("objects", format_ints({objects[0], objects[1]}));
  line("surface_density", format_double(surface_density));
  line("clutter_density", format_double(clutter_density));
  line("noise_points", std::to_string(noise_points));
  line("dropout", format_double(dropout));
  return out;
}

namespace {

template <std::size_t N>
std::array<double, N> fixed(const KeyValueFile& kv, const std::string& key) {
  const auto v = kv.get_doubles(key);
  if (v.size() != N) throw ConfigError("config key '" + key + "' needs " + std::to_string(N) + " values");
  std::array<double, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

}  // namespace

SceneGenConfig SceneGenConfig::from_kv(const KeyValueFile& kv) {
  SceneGenConfig c;
  std::vector<std::string> known{"extent", "classes", "objects", "surface_density", "clutter_density",
                                 "noise_points", "dropout"};
  c.extent = fixed<3>(kv, "extent");
  c.classes.clear();
  for (const auto& name : kv.get_strings("classes")) {
    ClassSizes s;
    s.name = name;
    s.w = fixed<2>(kv, name + ".w");
    s.l = fixed<2>(kv, name + ".l");
    s.h = fixed<2>(kv, name + ".h");
    c.classes.push_back(s);
    for (const char* d : {".w", ".l", ".h"}) known.push_back(name + d);
  }
  const auto obj = kv.get_ints("objects");
  if (obj.size() != 2) throw ConfigError("config key 'objects' needs 2 values");
  c.objects = {obj[0], obj[1]};
  c.surface_density = kv.get_double("surface_density");
  c.clutter_density = kv.get_double("clutter_density");
  c.noise_points = kv.get_int("noise_points");
  c.dropout = kv.get_double("dropout");
  for (const auto& [k, v] : kv.entries()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
  }
  c.validate();
  return c;
}

namespace {

bool inside_extent(const Box3D& b, const std::array<double, 3>& extent) {
  for (const auto& c : boxes::box_corners(b)) {
    if (std::abs(c.x) > extent[0] / 2 || std::abs(c.y) > extent[1] / 2 || c.z < 0 || c.z > extent[2]) return false;
  }
  return true;
}

Vec3 to_world(const Box3D& b, double lx, double ly, double lz) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  return {b.cx + c * lx - s * ly, b.cy + s * lx + c * ly, b.cz + lz};
}

int count_for_area(double area, double density, Rng& rng) {
  // Expected count area*density with stochastic rounding of the fraction.
  const double expected = area * density;
  const double whole = std::floor(expected);
  return static_cast<int>(whole) + (rng.bernoulli(expected - whole) ? 1 : 0);
}

// Points on the faces of `b` whose outward normal faces the origin, plus the top.
std::vector<Vec3> sample_surface(const Box3D& b, double density, double dropout, Rng& rng) {
  const double hl = b.l / 2, hw = b.w / 2, hh = b.h / 2;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  struct Face {
    double nx, ny;  // local outward normal in the ground plane
  };
  std::vector<Vec3> pts;
  const Face sides[4] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  for (const auto& f : sides) {
    const double wx = c * f.nx - s * f.ny, wy = s * f.nx + c * f.ny;
    const double fx = b.cx + wx * (f.nx != 0 ? hl : hw), fy = b.cy + wy * (f.nx != 0 ? hl : hw);
    if (wx * (0 - fx) + wy * (0 - fy) <= 0) continue;
    const double span = f.nx != 0 ? b.w : b.l;
    const int n = count_for_area(span * b.h, density, rng);
    for (int i = 0; i < n; ++i) {
      const double u = rng.uniform(-0.5, 0.5) * span, v = rng.uniform(-hh, hh);
      const double lx = f.nx != 0 ? f.nx * hl : u;
      const double ly = f.nx != 0 ? u : f.ny * hw;
      if (!rng.bernoulli(dropout)) pts.push_back(to_world(b, lx, ly, v));
    }
  }
  const int n_top = count_for_area(b.w * b.l, density, rng);
  for (int i = 0; i < n_top; ++i) {
    const Vec3 p = to_world(b, rng.uniform(-hl, hl), rng.uniform(-hw, hw), hh);
    if (!rng.bernoulli(dropout)) pts.push_back(p);
  }
  while (static_cast<int>(pts.size()) < kMinPointsPerBox) {
    pts.push_back(to_world(b, rng.uniform(-hl, hl), rng.uniform(-hw, hw), hh));
  }
  return pts;
}

}  // namespace

LabeledScene generate_scene(const SceneGenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  LabeledScene scene;
  const int n_obj = cfg.objects[0] + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.objects[1] - cfg.objects[0] + 1)));
  for (int o = 0; o < n_obj; ++o) {
    const int cls = static_cast<int>(rng.below(cfg.classes.size()));
    const auto& sz = cfg.classes[static_cast<std::size_t>(cls)];
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      Box3D b;
      b.w = rng.uniform(sz.w[0], sz.w[1]);
      b.l = rng.uniform(sz.l[0], sz.l[1]);
      b.h = rng.uniform(sz.h[0], sz.h[1]);
      b.yaw = normalize_yaw(rng.uniform(-kPi, kPi));
      b.cx = rng.uniform(-cfg.extent[0] / 2, cfg.extent[0] / 2);
      b.cy = rng.uniform(-cfg.extent[1] / 2, cfg.extent[1] / 2);
      b.cz = b.h / 2;
      if (!inside_extent(b, cfg.extent)) continue;
      bool overlap = false;
      for (const auto& other : scene.boxes) {
        if (boxes::bev_intersection(b, other) > 0) {
          overlap = true;
          break;
        }
      }
      if (overlap) continue;
      scene.boxes.push_back(b);
      scene.classes.push_back(cls);
      placed = true;
    }
    if (!placed) throw Error("generate_scene: could not place object " + std::to_string(o) + " after 100 retries");
  }

  std::vector<Vec3> pts;
  for (const auto& b : scene.boxes) {
    const auto s = sample_surface(b, cfg.surface_density, cfg.dropout, rng);
    pts.insert(pts.end(), s.begin(), s.end());
  }
  const int n_ground = count_for_area(cfg.extent[0] * cfg.extent[1], cfg.clutter_density, rng);
  for (int i = 0; i < n_ground; ++i) {
    const Vec3 p{rng.uniform(-cfg.extent[0] / 2, cfg.extent[0] / 2), rng.uniform(-cfg.extent[1] / 2, cfg.extent[1] / 2),
                 0.0};
    bool covered = false;
    for (const auto& b : scene.boxes) covered = covered || point_in_box(p, b);
    if (!covered) pts.push_back(p);
  }
  for (int i = 0; i < cfg.noise_points; ++i) {
    pts.push_back({rng.uniform(-cfg.extent[0] / 2, cfg.extent[0] / 2), rng.uniform(-cfg.extent[1] / 2, cfg.extent[1] / 2),
                   rng.uniform(0.0, cfg.extent[2])});
  }
  rng.shuffle(pts);
  scene.cloud.points.reserve(pts.size());
  for (const auto& p : pts) scene.cloud.points.push_back({p.x, p.y, p.z, rng.uniform()});
  return scene;
}

LabeledScene flip_x(const LabeledScene& s) {
  LabeledScene out = s;
  for (auto& p : out.cloud.points) p.y = -p.y;
  for (auto& b : out.boxes) {
    b.cy = -b.cy;
    b.yaw = normalize_yaw(-b.yaw);
  }
  return out;
}

LabeledScene rotate_z(const LabeledScene& s, double angle) {
  LabeledScene out = s;
  const double c = std::cos(angle), sn = std::sin(angle);
  auto rot = [&](double& x, double& y) {
    const double nx = c * x - sn * y, ny = sn * x + c * y;
    x = nx;
    y = ny;
  };
  for (auto& p : out.cloud.points) rot(p.x, p.y);
  for (auto& b : out.boxes) {
    rot(b.cx, b.cy);
    b.yaw = normalize_yaw(b.yaw + angle);
  }
  return out;
}

LabeledScene scale_scene(const LabeledScene& s, double factor) {
  if (!(factor > 0)) throw Error("scale factor must be positive");
  LabeledScene out = s;
  for (auto& p : out.cloud.points) {
    p.x *= factor;
    p.y *= factor;
    p.z *= factor;
  }
  for (auto& b : out.boxes) {
    b.cx *= factor;
    b.cy *= factor;
    b.cz *= factor;
    b.w *= factor;
    b.l *= factor;
    b.h *= factor;
  }
  return out;
}

namespace {

void jitter_objects(LabeledScene& s, Rng& rng, const AugmentOptions& opt) {
  const auto xyz = s.cloud.coordinates();
  const auto owner = assign_points_to_boxes(xyz, s.boxes);
  for (std::size_t bi = 0; bi < s.boxes.size(); ++bi) {
    const Box3D old = s.boxes[bi];
    const double dx = rng.normal(0, opt.object_translation_std), dy = rng.normal(0, opt.object_translation_std),
                 dz = rng.normal(0, opt.object_translation_std), dyaw = rng.normal(0, opt.object_yaw_std);
    Box3D moved = old;
    moved.cx += dx;
    moved.cy += dy;
    moved.cz += dz;
    moved.yaw = normalize_yaw(old.yaw + dyaw);
    bool ok = true;
    for (std::size_t o = 0; o < s.boxes.size() && ok; ++o) {
      if (o != bi && boxes::bev_intersection(moved, s.boxes[o]) > 0) ok = false;
    }
    const double c = std::cos(dyaw), sn = std::sin(dyaw);
    auto move_point = [&](const Point& p) {
      const double rx = p.x - old.cx, ry = p.y - old.cy;
      return Vec3{old.cx + dx + c * rx - sn * ry, old.cy + dy + sn * rx + c * ry, p.z + dz};
    };
    for (std::size_t i = 0; i < xyz.size() && ok; ++i) {
      if (owner[i] == static_cast<int>(bi)) {
        // a member must not end up inside a neighbor after the move
        const Vec3 q = move_point(s.cloud.points[i]);
        for (std::size_t o = 0; o < s.boxes.size(); ++o) {
          if (o != bi && point_in_box(q, s.boxes[o])) ok = false;
        }
      } else if (point_in_box(xyz[i], moved, 1e-3)) {
        ok = false;
      }
    }
    if (!ok) continue;
    for (std::size_t i = 0; i < xyz.size(); ++i) {
      if (owner[i] != static_cast<int>(bi)) continue;
      const Vec3 q = move_point(s.cloud.points[i]);
      s.cloud.points[i].x = q.x;
      s.cloud.points[i].y = q.y;
      s.cloud.points[i].z = q.z;
    }
    s.boxes[bi] = moved;
  }
}

}  // namespace

LabeledScene augment(const LabeledScene& s, Rng& rng, const AugmentOptions& opt) {
  LabeledScene out = s;
  if (opt.object_noise) jitter_objects(out, rng, opt);
  if (rng.bernoulli(opt.flip_probability)) out = flip_x(out);
  out = rotate_z(out, rng.uniform(-opt.max_rotation, opt.max_rotation));
  out = scale_scene(out, rng.uniform(opt.scale[0], opt.scale[1]));
  return out;
}

std::string encode_scene(const LabeledScene& s) {
  binio::Writer w;
  w.bytes("PCS1");
  w.put<std::uint64_t>(s.cloud.size());
  w.put<std::uint64_t>(s.boxes.size());
  for (const auto& p : s.cloud.points) {
    for (double v : {p.x, p.y, p.z, p.r}) w.put<double>(v);
  }
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    const auto& b = s.boxes[i];
    for (double v : {b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw}) w.put<double>(v);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.classes[i]));
  }
  return w.take();
}

LabeledScene decode_scene(const std::string& bytes) {
  binio::Reader r(bytes);
  r.expect_magic("PCS1");
  const auto n_points = r.get<std::uint64_t>("point count");
  const auto n_boxes = r.get<std::uint64_t>("box count");
  if (n_points > r.remaining() / 32 || n_boxes > r.remaining() / 60) {
    throw FormatError("declared counts exceed file size", r.offset());
  }
  LabeledScene s;
  s.cloud.points.resize(n_points);
  for (auto& p : s.cloud.points) {
    p.x = r.get<double>("point");
    p.y = r.get<double>("point");
    p.z = r.get<double>("point");
    p.r = r.get<double>("point");
  }
  s.boxes.resize(n_boxes);
  s.classes.resize(n_boxes);
  for (std::size_t i = 0; i < n_boxes; ++i) {
    auto& b = s.boxes[i];
    for (double* v : {&b.cx, &b.cy, &b.cz, &b.w, &b.l, &b.h, &b.yaw}) *v = r.get<double>("box");
    s.classes[i] = static_cast<int>(r.get<std::uint32_t>("box class"));
  }
  r.expect_end();
  return s;
}

void save_scene(const std::string& path, const LabeledScene& s) { write_file_atomic(path, encode_scene(s)); }

LabeledScene load_scene(const std::string& path) {
  return decode_scene(read_file(path));
}

std::vector<std::string> list_scenes(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error("dataset directory not found: " + dir);
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pcs") out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<LabeledScene> load_dataset(const std::string& dir) {
  std::vector<LabeledScene> out;
  for (const auto& p : list_scenes(dir)) out.push_back(load_scene(p));
  return out;
}

}  // namespace pcd::data
