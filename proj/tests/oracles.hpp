#pragma once

// Independent reference implementations used as test oracles. They favour the
// most literal form of each definition over speed.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pcd/core.hpp"
#include "pcd/nn.hpp"

namespace oracle {

/// Greedy farthest-point selection recomputing every distance to the selected
/// set from scratch: O(N * M^2). Criterion weight_i * min_j |p_i - s_j|, ties to
/// the lowest index.
inline std::vector<int> greedy_fps(const std::vector<pcd::Vec3>& pts, const std::vector<double>& weight, int m,
                                   int start) {
  std::vector<int> sel{start};
  while (static_cast<int>(sel.size()) < m) {
    int best = -1;
    double best_v = -1;
    for (int i = 0; i < static_cast<int>(pts.size()); ++i) {
      if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (int s : sel) d = std::min(d, std::sqrt(pcd::squared_distance(pts[static_cast<std::size_t>(i)],
                                                                        pts[static_cast<std::size_t>(s)])));
      const double v = (weight.empty() ? 1.0 : weight[static_cast<std::size_t>(i)]) * d;
      if (v > best_v) {
        best_v = v;
        best = i;
      }
    }
    sel.push_back(best);
  }
  return sel;
}

/// Monte-Carlo 3D IoU of two oriented boxes: uniform samples in the union of
/// their axis-aligned bounds, containment by point_in_box.
inline double monte_carlo_iou(const pcd::Box3D& a, const pcd::Box3D& b, int samples, pcd::Rng& rng) {
  auto bounds = [](const pcd::Box3D& x, double lo[3], double hi[3]) {
    const double r = 0.5 * std::hypot(x.w, x.l);
    lo[0] = x.cx - r, hi[0] = x.cx + r;
    lo[1] = x.cy - r, hi[1] = x.cy + r;
    lo[2] = x.cz - x.h / 2, hi[2] = x.cz + x.h / 2;
  };
  double la[3], ha[3], lb[3], hb[3], lo[3], hi[3];
  bounds(a, la, ha);
  bounds(b, lb, hb);
  double vol = 1;
  for (int i = 0; i < 3; ++i) {
    lo[i] = std::min(la[i], lb[i]);
    hi[i] = std::max(ha[i], hb[i]);
    vol *= hi[i] - lo[i];
  }
  long long both = 0;
  for (int s = 0; s < samples; ++s) {
    const pcd::Vec3 p{rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), rng.uniform(lo[2], hi[2])};
    both += pcd::point_in_box(p, a, 0.0) && pcd::point_in_box(p, b, 0.0);
  }
  const double inter = vol * static_cast<double>(both) / samples;
  return inter / (a.volume() + b.volume() - inter);
}

// Scalar MLP: relu(x W + b) per layer, the last layer linear when final_relu is off.
inline std::vector<double> mlp_scalar(const pcd::ad::ParamStore& store, const pcd::nn::Mlp& mlp, std::vector<double> x) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& lin = mlp.layers[l];
    const auto& w = store.get(lin.name + ".w").value;
    const auto& b = store.get(lin.name + ".b").value;
    std::vector<double> y(static_cast<std::size_t>(lin.out));
    for (int o = 0; o < lin.out; ++o) {
      double s = b(0, o);
      for (int i = 0; i < lin.in; ++i) s += x[static_cast<std::size_t>(i)] * w(i, o);
      const bool act = mlp.final_relu || l + 1 < mlp.layers.size();
      y[static_cast<std::size_t>(o)] = act ? std::max(0.0, s) : s;
    }
    x = std::move(y);
  }
  return x;
}

}  // namespace oracle
