#pragma once

#include <array>
#include <compare>
#include <span>
#include <string>
#include <vector>

#include "pcd/autodiff.hpp"
#include "pcd/core.hpp"
#include "pcd/nn.hpp"

namespace pcd::repo {

struct VoxelKey {
  int x = 0, y = 0, z = 0;
  auto operator<=>(const VoxelKey&) const = default;
};

struct VoxelGrid {
  std::array<double, 3> size{0.4, 0.4, 0.4};

  /// Throws Error unless every size component is positive.
  explicit VoxelGrid(std::array<double, 3> s);
  VoxelGrid() = default;
  VoxelKey key(Vec3 p) const;
};

/// Sparse voxel summary of a scene. Voxels are stored in ascending key order.
/// `features` and `confidence` are nodes of the graph the repository was built in.
struct FeatureRepository {
  VoxelGrid grid;
  std::vector<VoxelKey> keys;
  ad::Matrix coords;      // K x 3 mean member coordinate
  std::vector<int> counts;
  std::vector<int> point_voxel;  // voxel row of every input point
  ad::Var features;       // K x C
  ad::Var confidence;     // K x 1 foreground confidence S_R

  std::size_t size() const { return keys.size(); }
  std::vector<Vec3> coordinate_points() const;
};

/// Groups points by voxel and averages coordinates and features per voxel.
/// Confidence starts at zero.
FeatureRepository voxelize_mean(ad::Graph& g, std::span<const Vec3> points, ad::Var features,
                                std::array<double, 3> voxel_size);

/// Partial knowledge scattered onto the repository grid. Rows follow `keys`
/// (ascending); unoccupied rows are zero.
struct SparseKnowledge {
  VoxelGrid grid;
  std::vector<VoxelKey> keys;
  std::vector<char> occupied;
  ad::Var features;

  /// Feature vector at `key`; zeros for any position without knowledge.
  ad::Matrix read(VoxelKey key) const;
  int row_of(VoxelKey key) const;  // -1 when absent
};

/// Places each feature row in its point's voxel; collisions are averaged. The
/// support is the union of occupied voxels and `support` (typically the
/// repository's voxels, so the encoder-decoder sees the whole scene layout).
SparseKnowledge scatter_knowledge(ad::Graph& g, std::span<const Vec3> points, ad::Var features,
                                  const VoxelGrid& grid, std::span<const VoxelKey> support = {});

// Rulebook construction for 3x3x3 sparse convolutions. Offset index
// k = (dx+1)*9 + (dy+1)*3 + (dz+1).
int offset_index(int dx, int dy, int dz);
/// Stride 1, output support equals input support.
ad::Rulebook submanifold_rules(std::span<const VoxelKey> keys);
/// Stride 2: coarse voxel q reads fine voxels p with p - 2q in {-1,0,1}^3.
ad::Rulebook downsample_rules(std::span<const VoxelKey> fine, std::vector<VoxelKey>& coarse_out);
/// Transposed pairing of a downsample rulebook, mapping coarse back to fine.
ad::Rulebook upsample_rules(const ad::Rulebook& down, Eigen::Index n_fine);

/// Five-stage sparse encoder-decoder: stem (stride 1), two stride-2 downsamplings
/// to the bottleneck, two transposed upsamplings back, each up stage summed with
/// the encoder stage of equal resolution. channels = {c0, c1, c2, c3, c4} with
/// c1 == c3 and c0 == c4.
struct EncoderDecoder {
  std::string name;
  int in = 0;
  std::vector<int> channels;

  static EncoderDecoder create(ad::ParamStore& store, const std::string& name, int in,
                               const std::vector<int>& channels, Rng& rng);
  int out_width() const { return channels.back(); }

  struct Output {
    ad::Var features;  // rows follow the input keys
    std::array<std::vector<VoxelKey>, 3> level_keys;
  };
  Output operator()(ad::Graph& g, ad::ParamStore& store, const SparseKnowledge& k) const;
};

/// Rows of `features` laid out on `from` re-indexed onto `to`; keys absent from
/// `from` get zero rows.
ad::Var align_rows(ad::Var features, std::span<const VoxelKey> from, std::span<const VoxelKey> to);

/// Repository update: features <- confidence * scene_features + mlp(features).
/// `scene_features` must be aligned to the repository rows.
FeatureRepository fuse_repository(ad::Graph& g, ad::ParamStore& store, const FeatureRepository& repo,
                                  ad::Var scene_features, ad::Var confidence, const nn::Mlp& mlp);

}  // namespace pcd::repo
