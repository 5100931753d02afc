#include "pcd/repository.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace pcd::repo {

VoxelGrid::VoxelGrid(std::array<double, 3> s) : size(s) {
  for (double v : s) {
    if (!(v > 0)) throw Error("voxel size must be positive");
  }
}

VoxelKey VoxelGrid::key(Vec3 p) const {
  return {static_cast<int>(std::floor(p.x / size[0])), static_cast<int>(std::floor(p.y / size[1])),
          static_cast<int>(std::floor(p.z / size[2]))};
}

std::vector<Vec3> FeatureRepository::coordinate_points() const {
  std::vector<Vec3> out(keys.size());
  for (Eigen::Index i = 0; i < coords.rows(); ++i) out[static_cast<std::size_t>(i)] = {coords(i, 0), coords(i, 1), coords(i, 2)};
  return out;
}

namespace {

int find_row(std::span<const VoxelKey> keys, VoxelKey k) {
  const auto it = std::lower_bound(keys.begin(), keys.end(), k);
  if (it == keys.end() || *it != k) return -1;
  return static_cast<int>(it - keys.begin());
}

std::vector<VoxelKey> sorted_unique(std::vector<VoxelKey> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace

FeatureRepository voxelize_mean(ad::Graph& g, std::span<const Vec3> points, ad::Var features,
                                std::array<double, 3> voxel_size) {
  FeatureRepository r;
  r.grid = VoxelGrid(voxel_size);
  if (features.rows() != static_cast<Eigen::Index>(points.size())) {
    throw ShapeError("voxelize_mean: " + std::to_string(points.size()) + " points but features " +
                     ad::shape_str(features.value()));
  }
  std::vector<VoxelKey> pk(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) pk[i] = r.grid.key(points[i]);
  r.keys = sorted_unique(pk);
  const auto k = static_cast<Eigen::Index>(r.keys.size());
  r.point_voxel.resize(points.size());
  r.counts.assign(r.keys.size(), 0);
  r.coords = ad::Matrix::Zero(k, 3);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const int row = find_row(r.keys, pk[i]);
    r.point_voxel[i] = row;
    r.counts[static_cast<std::size_t>(row)] += 1;
    r.coords(row, 0) += points[i].x;
    r.coords(row, 1) += points[i].y;
    r.coords(row, 2) += points[i].z;
  }
  for (Eigen::Index i = 0; i < k; ++i) r.coords.row(i) /= static_cast<double>(r.counts[static_cast<std::size_t>(i)]);
  r.features = ad::segment_mean(features, r.point_voxel, k);
  r.confidence = g.constant(ad::Matrix::Zero(k, 1));
  return r;
}

ad::Matrix SparseKnowledge::read(VoxelKey key) const {
  const int row = row_of(key);
  if (row < 0 || !occupied[static_cast<std::size_t>(row)]) return ad::Matrix::Zero(1, features.cols());
  return features.value().row(row);
}

int SparseKnowledge::row_of(VoxelKey key) const { return find_row(keys, key); }

SparseKnowledge scatter_knowledge(ad::Graph&, std::span<const Vec3> points, ad::Var features,
                                  const VoxelGrid& grid, std::span<const VoxelKey> support) {
  if (features.rows() != static_cast<Eigen::Index>(points.size())) {
    throw ShapeError("scatter_knowledge: " + std::to_string(points.size()) + " points but features " +
                     ad::shape_str(features.value()));
  }
  SparseKnowledge k;
  k.grid = grid;
  std::vector<VoxelKey> pk(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) pk[i] = grid.key(points[i]);
  std::vector<VoxelKey> all(support.begin(), support.end());
  all.insert(all.end(), pk.begin(), pk.end());
  k.keys = sorted_unique(std::move(all));
  k.occupied.assign(k.keys.size(), 0);
  std::vector<int> seg(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    seg[i] = find_row(k.keys, pk[i]);
    k.occupied[static_cast<std::size_t>(seg[i])] = 1;
  }
  k.features = ad::segment_mean(features, seg, static_cast<Eigen::Index>(k.keys.size()));
  return k;
}

int offset_index(int dx, int dy, int dz) { return (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1); }

namespace {

void sort_pairs(ad::Rulebook& rb) {
  for (auto& v : rb.pairs) {
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second < b.second : a.first < b.first;
    });
  }
}

// Coarse coordinates q with p - 2q in {-1, 0, 1} along one axis.
void coarse_candidates(int p, int out[2], int& n) {
  const int lo = static_cast<int>(std::ceil((p - 1) / 2.0));
  const int hi = static_cast<int>(std::floor((p + 1) / 2.0));
  n = 0;
  for (int q = lo; q <= hi; ++q) out[n++] = q;
}

}  // namespace

ad::Rulebook submanifold_rules(std::span<const VoxelKey> keys) {
  ad::Rulebook rb;
  rb.n_out = static_cast<Eigen::Index>(keys.size());
  rb.pairs.resize(27);
  for (std::size_t o = 0; o < keys.size(); ++o) {
    for (int dx = -1; dx <= 1; ++dx) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dz = -1; dz <= 1; ++dz) {
          const int in = find_row(keys, {keys[o].x + dx, keys[o].y + dy, keys[o].z + dz});
          if (in >= 0) rb.pairs[static_cast<std::size_t>(offset_index(dx, dy, dz))].emplace_back(in, static_cast<int>(o));
        }
      }
    }
  }
  sort_pairs(rb);
  return rb;
}

ad::Rulebook downsample_rules(std::span<const VoxelKey> fine, std::vector<VoxelKey>& coarse_out) {
  std::vector<VoxelKey> coarse;
  for (const auto& p : fine) {
    int qx[2], qy[2], qz[2], nx, ny, nz;
    coarse_candidates(p.x, qx, nx);
    coarse_candidates(p.y, qy, ny);
    coarse_candidates(p.z, qz, nz);
    for (int a = 0; a < nx; ++a)
      for (int b = 0; b < ny; ++b)
        for (int c = 0; c < nz; ++c) coarse.push_back({qx[a], qy[b], qz[c]});
  }
  coarse_out = sorted_unique(std::move(coarse));
  ad::Rulebook rb;
  rb.n_out = static_cast<Eigen::Index>(coarse_out.size());
  rb.pairs.resize(27);
  for (std::size_t i = 0; i < fine.size(); ++i) {
    const auto& p = fine[i];
    int qx[2], qy[2], qz[2], nx, ny, nz;
    coarse_candidates(p.x, qx, nx);
    coarse_candidates(p.y, qy, ny);
    coarse_candidates(p.z, qz, nz);
    for (int a = 0; a < nx; ++a) {
      for (int b = 0; b < ny; ++b) {
        for (int c = 0; c < nz; ++c) {
          const VoxelKey q{qx[a], qy[b], qz[c]};
          const int o = find_row(coarse_out, q);
          const int k = offset_index(p.x - 2 * q.x, p.y - 2 * q.y, p.z - 2 * q.z);
          rb.pairs[static_cast<std::size_t>(k)].emplace_back(static_cast<int>(i), o);
        }
      }
    }
  }
  sort_pairs(rb);
  return rb;
}

ad::Rulebook upsample_rules(const ad::Rulebook& down, Eigen::Index n_fine) {
  ad::Rulebook rb;
  rb.n_out = n_fine;
  rb.pairs.resize(27);
  for (std::size_t k = 0; k < down.pairs.size(); ++k) {
    for (const auto& [fine, coarse] : down.pairs[k]) rb.pairs[k].emplace_back(coarse, fine);
  }
  sort_pairs(rb);
  return rb;
}

EncoderDecoder EncoderDecoder::create(ad::ParamStore& store, const std::string& name, int in,
                                      const std::vector<int>& channels, Rng& rng) {
  if (channels.size() != 5 || channels[1] != channels[3] || channels[0] != channels[4]) {
    throw ConfigError("encoder-decoder channels must be {c0, c1, c2, c1, c0}");
  }
  const char* stages[5] = {"stem", "down1", "down2", "up2", "up1"};
  int prev = in;
  for (int s = 0; s < 5; ++s) {
    auto& w = store.create(name + "." + stages[s] + ".w", 27 * prev, channels[static_cast<std::size_t>(s)]);
    nn::kaiming_init(w, 27 * prev, rng);
    store.create(name + "." + stages[s] + ".b", 1, channels[static_cast<std::size_t>(s)]);
    prev = channels[static_cast<std::size_t>(s)];
  }
  return EncoderDecoder{name, in, channels};
}

EncoderDecoder::Output EncoderDecoder::operator()(ad::Graph& g, ad::ParamStore& store,
                                                  const SparseKnowledge& k) const {
  if (k.features.cols() != in) {
    throw ShapeError("encoder-decoder '" + name + "': expected " + std::to_string(in) + " input channels, got " +
                     ad::shape_str(k.features.value()));
  }
  auto conv = [&](ad::Var x, const char* stage, const ad::Rulebook& rb) {
    const ad::Var w = g.param(store.get(name + "." + stage + ".w"), store);
    const ad::Var b = g.param(store.get(name + "." + stage + ".b"), store);
    return ad::add(ad::sparse_conv(x, w, rb), b);
  };
  Output out;
  out.level_keys[0] = k.keys;
  const auto stem_rules = submanifold_rules(out.level_keys[0]);
  const auto down1_rules = downsample_rules(out.level_keys[0], out.level_keys[1]);
  const auto down2_rules = downsample_rules(out.level_keys[1], out.level_keys[2]);
  const auto up2_rules = upsample_rules(down2_rules, static_cast<Eigen::Index>(out.level_keys[1].size()));
  const auto up1_rules = upsample_rules(down1_rules, static_cast<Eigen::Index>(out.level_keys[0].size()));

  const ad::Var x0 = ad::relu(conv(k.features, "stem", stem_rules));
  const ad::Var x1 = ad::relu(conv(x0, "down1", down1_rules));
  const ad::Var x2 = ad::relu(conv(x1, "down2", down2_rules));
  const ad::Var y1 = ad::relu(ad::add(conv(x2, "up2", up2_rules), x1));
  out.features = ad::relu(ad::add(conv(y1, "up1", up1_rules), x0));
  return out;
}

ad::Var align_rows(ad::Var features, std::span<const VoxelKey> from, std::span<const VoxelKey> to) {
  std::vector<int> idx(to.size());
  for (std::size_t i = 0; i < to.size(); ++i) idx[i] = find_row(from, to[i]);
  return ad::gather_rows(features, idx);
}

FeatureRepository fuse_repository(ad::Graph&, ad::ParamStore& store, const FeatureRepository& repo,
                                  ad::Var scene_features, ad::Var confidence, const nn::Mlp& mlp) {
  const auto k = static_cast<Eigen::Index>(repo.size());
  if (scene_features.rows() != k || confidence.rows() != k || confidence.cols() != 1) {
    throw ShapeError("fuse_repository: scene features " + ad::shape_str(scene_features.value()) +
                     " / confidence " + ad::shape_str(confidence.value()) + " not aligned to " +
                     std::to_string(k) + " voxels");
  }
  if (mlp.out_width() != scene_features.cols()) {
    throw ShapeError("fuse_repository: MLP width " + std::to_string(mlp.out_width()) +
                     " does not match scene feature width " + std::to_string(scene_features.cols()));
  }
  FeatureRepository out = repo;
  auto* g = repo.features.graph;
  out.features = ad::add(ad::mul(scene_features, confidence), mlp(*g, store, repo.features));
  out.confidence = confidence;
  return out;
}

}  // namespace pcd::repo
