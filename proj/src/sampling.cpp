#include "pcd/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace pcd::sampling {
namespace {

std::vector<int> weighted_fps(std::span<const Vec3> points, std::span<const double> weights, int m, int start) {
  const auto n = static_cast<int>(points.size());
  if (m < 1 || m > n) {
    throw Error("fps: requested " + std::to_string(m) + " samples from " + std::to_string(n) + " points");
  }
  if (start < 0 || start >= n) throw Error("fps: start index out of range");
  std::vector<double> min_d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<char> taken(static_cast<std::size_t>(n), 0);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(m));
  int cur = start;
  for (int it = 0; it < m; ++it) {
    out.push_back(cur);
    taken[static_cast<std::size_t>(cur)] = 1;
    if (it + 1 == m) break;
    const Vec3 c = points[static_cast<std::size_t>(cur)];
    int best = -1;
    double best_crit = -1.0;
    for (int i = 0; i < n; ++i) {
      auto& d = min_d2[static_cast<std::size_t>(i)];
      d = std::min(d, squared_distance(points[static_cast<std::size_t>(i)], c));
      if (taken[static_cast<std::size_t>(i)]) continue;
      const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(i)];
      const double crit = w * std::sqrt(d);
      if (crit > best_crit) {
        best_crit = crit;
        best = i;
      }
    }
    cur = best;
  }
  return out;
}

struct CellKey {
  long long x, y, z;
  bool operator==(const CellKey&) const = default;
};

struct CellHash {
  std::size_t operator()(const CellKey& k) const {
    return static_cast<std::size_t>(splitmix64(static_cast<std::uint64_t>(k.x) * 73856093ULL ^
                                               static_cast<std::uint64_t>(k.y) * 19349663ULL ^
                                               static_cast<std::uint64_t>(k.z) * 83492791ULL));
  }
};

CellKey cell_of(Vec3 p, double cell) {
  return {static_cast<long long>(std::floor(p.x / cell)), static_cast<long long>(std::floor(p.y / cell)),
          static_cast<long long>(std::floor(p.z / cell))};
}

}  // namespace

std::vector<int> fps(std::span<const Vec3> points, int m, int start) { return weighted_fps(points, {}, m, start); }

std::vector<int> sfps(std::span<const Vec3> points, std::span<const double> scores, int m, double gamma,
                      int start) {
  if (scores.size() != points.size()) throw Error("sfps: score count does not match point count");
  if (gamma < 0) throw Error("sfps: gamma must be >= 0");
  std::vector<double> w(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) w[i] = std::pow(scores[i], gamma);
  return weighted_fps(points, w, m, start);
}

std::vector<int> brute_force_range(Vec3 center, std::span<const Vec3> cloud, double radius) {
  std::vector<int> out;
  const double r2 = radius * radius;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (squared_distance(cloud[i], center) <= r2) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<NeighborGroup> ball_query(std::span<const Vec3> centers, std::span<const Vec3> cloud, double radius,
                                      int k, QueryCounter* counter, std::span<const int> center_index) {
  if (!(radius > 0)) throw Error("ball_query: radius must be positive");
  if (k < 1) throw Error("ball_query: k must be >= 1");
  if (!center_index.empty() && center_index.size() != centers.size()) {
    throw Error("ball_query: center_index length does not match centers");
  }
  std::unordered_map<CellKey, std::vector<int>, CellHash> grid;
  grid.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) grid[cell_of(cloud[i], radius)].push_back(static_cast<int>(i));

  const double r2 = radius * radius;
  std::vector<NeighborGroup> out(centers.size());
  std::vector<int> found;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    const Vec3 q = centers[c];
    const CellKey base = cell_of(q, radius);
    found.clear();
    for (long long dx = -1; dx <= 1; ++dx) {
      for (long long dy = -1; dy <= 1; ++dy) {
        for (long long dz = -1; dz <= 1; ++dz) {
          const auto it = grid.find({base.x + dx, base.y + dy, base.z + dz});
          if (it == grid.end()) continue;
          for (int i : it->second) {
            if (squared_distance(cloud[static_cast<std::size_t>(i)], q) <= r2) found.push_back(i);
          }
        }
      }
    }
    std::sort(found.begin(), found.end());
    auto& grp = out[c];
    grp.center = center_index.empty() ? -1 : center_index[c];
    grp.found = std::min(static_cast<int>(found.size()), k);
    grp.members.assign(found.begin(), found.begin() + grp.found);
    const int pad = grp.found > 0 ? grp.members.front() : -1;
    grp.members.resize(static_cast<std::size_t>(k), pad);
  }
  if (counter) counter->queries += centers.size();
  return out;
}

ad::Matrix to_matrix(std::span<const Vec3> points) {
  ad::Matrix m(static_cast<Eigen::Index>(points.size()), 3);
  for (std::size_t i = 0; i < points.size(); ++i) {
    m(static_cast<Eigen::Index>(i), 0) = points[i].x;
    m(static_cast<Eigen::Index>(i), 1) = points[i].y;
    m(static_cast<Eigen::Index>(i), 2) = points[i].z;
  }
  return m;
}

std::vector<Vec3> to_points(const ad::Matrix& m) {
  std::vector<Vec3> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = {m(i, 0), m(i, 1), m(i, 2)};
  return out;
}

ad::Var aggregate_groups(ad::Graph& g, ad::ParamStore& store, std::span<const NeighborGroup> groups,
                         ad::Var centers, const ad::Matrix& cloud_xyz, ad::Var member_features, double radius,
                         const nn::Mlp& mlp) {
  if (groups.empty()) throw ShapeError("aggregate_groups: no groups");
  const auto k = groups.front().members.size();
  if (centers.rows() != static_cast<Eigen::Index>(groups.size()) || centers.cols() != 3) {
    throw ShapeError("aggregate_groups: centers " + ad::shape_str(centers.value()) + " do not match " +
                     std::to_string(groups.size()) + " groups");
  }
  std::vector<int> idx;
  std::vector<int> gid;
  idx.reserve(groups.size() * k);
  gid.reserve(groups.size() * k);
  ad::Matrix mask(static_cast<Eigen::Index>(groups.size() * k), 1);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (groups[gi].members.size() != k) throw ShapeError("aggregate_groups: groups differ in size");
    for (int m : groups[gi].members) {
      mask(static_cast<Eigen::Index>(idx.size()), 0) = m >= 0 ? 1.0 / radius : 0.0;
      idx.push_back(m);
      gid.push_back(static_cast<int>(gi));
    }
  }
  const ad::Var cloud = g.constant(cloud_xyz);
  ad::Var rel = ad::sub(ad::gather_rows(cloud, idx), ad::gather_rows(centers, gid));
  rel = ad::mul(rel, g.constant(std::move(mask)));
  ad::Var input = rel;
  if (member_features.id >= 0) input = ad::concat({rel, ad::gather_rows(member_features, idx)});
  return ad::max_over_set(mlp(g, store, input), static_cast<Eigen::Index>(k));
}

ad::Var aggregate_group(ad::Graph& g, ad::ParamStore& store, const NeighborGroup& group, Vec3 center,
                        const ad::Matrix& cloud_xyz, ad::Var member_features, double radius, const nn::Mlp& mlp) {
  ad::Matrix c(1, 3);
  c << center.x, center.y, center.z;
  return aggregate_groups(g, store, std::span<const NeighborGroup>(&group, 1), g.constant(std::move(c)), cloud_xyz,
                          member_features, radius, mlp);
}

ad::Var aggregate_msg(ad::Graph& g, ad::ParamStore& store, ad::Var centers, std::span<const int> center_index,
                      const ad::Matrix& cloud_xyz, ad::Var member_features, std::span<const double> radii,
                      std::span<const int> ks, std::span<const nn::Mlp> mlps, QueryCounter* counter) {
  if (radii.size() != ks.size() || radii.size() != mlps.size() || radii.empty()) {
    throw ShapeError("aggregate_msg: radii, ks and mlps must have the same nonzero length");
  }
  const auto center_pts = to_points(centers.value());
  const auto cloud_pts = to_points(cloud_xyz);
  std::vector<ad::Var> parts;
  for (std::size_t s = 0; s < radii.size(); ++s) {
    const auto groups = ball_query(center_pts, cloud_pts, radii[s], ks[s], counter, center_index);
    parts.push_back(aggregate_groups(g, store, groups, centers, cloud_xyz, member_features, radii[s], mlps[s]));
  }
  return parts.size() == 1 ? parts.front() : ad::concat(std::span<const ad::Var>(parts));
}

}  // namespace pcd::sampling
