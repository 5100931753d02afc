#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pcd/autodiff.hpp"
#include "pcd/core.hpp"
#include "pcd/nn.hpp"

namespace pcd::sampling {

/// Farthest point sampling. Greedy max-min selection starting at `start`;
/// distance ties go to the lowest index. Throws if m is outside [1, N].
std::vector<int> fps(std::span<const Vec3> points, int m, int start = 0);

/// Score-weighted FPS: picks argmax_i scores[i]^gamma * d_i where d_i is the
/// distance to the selected set. gamma = 0 reproduces fps exactly.
std::vector<int> sfps(std::span<const Vec3> points, std::span<const double> scores, int m, double gamma,
                      int start = 0);

/// One neighborhood. `members` always has exactly k entries: the points found
/// within the radius in ascending index order, then copies of the first member
/// when fewer than k were found. A group with no point in range holds k entries
/// of -1 (all padding).
struct NeighborGroup {
  int center = -1;  // index of the center in the searched cloud, or -1
  std::vector<int> members;
  int found = 0;
  bool padded() const { return found < static_cast<int>(members.size()); }
};

struct QueryCounter {
  std::uint64_t queries = 0;
};

/// Radius search around every center using a uniform hash grid. `center_index`
/// optionally gives each center's index in `cloud` (-1 when it is not a cloud
/// point). Adds centers.size() to the counter.
std::vector<NeighborGroup> ball_query(std::span<const Vec3> centers, std::span<const Vec3> cloud, double radius,
                                      int k, QueryCounter* counter = nullptr,
                                      std::span<const int> center_index = {});

/// O(N) per-center scan returning all indices within radius, ascending.
std::vector<int> brute_force_range(Vec3 center, std::span<const Vec3> cloud, double radius);

/// PointNet set aggregation over a batch of groups of equal size: a shared MLP on
/// [relative xyz / radius | member features] followed by a max over each group.
/// `centers` is (G x 3) and may be differentiable; `member_features` may be an
/// empty Var (id < 0) for coordinate-only input. Returns (G x mlp.out_width()).
ad::Var aggregate_groups(ad::Graph& g, ad::ParamStore& store, std::span<const NeighborGroup> groups,
                         ad::Var centers, const ad::Matrix& cloud_xyz, ad::Var member_features, double radius,
                         const nn::Mlp& mlp);

/// Single-group convenience form of aggregate_groups.
ad::Var aggregate_group(ad::Graph& g, ad::ParamStore& store, const NeighborGroup& group, Vec3 center,
                        const ad::Matrix& cloud_xyz, ad::Var member_features, double radius, const nn::Mlp& mlp);

/// Multi-scale grouping: one ball query and one aggregation per scale, outputs
/// concatenated along columns. Performs exactly radii.size() queries per center.
ad::Var aggregate_msg(ad::Graph& g, ad::ParamStore& store, ad::Var centers, std::span<const int> center_index,
                      const ad::Matrix& cloud_xyz, ad::Var member_features, std::span<const double> radii,
                      std::span<const int> ks, std::span<const nn::Mlp> mlps, QueryCounter* counter);

ad::Matrix to_matrix(std::span<const Vec3> points);
std::vector<Vec3> to_points(const ad::Matrix& m);

}  // namespace pcd::sampling
