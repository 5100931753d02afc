#include "pcd/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pcd/dual.hpp"

namespace pcd::boxes {
namespace {

using std::cos;
using std::exp;
using std::sin;
using std::sqrt;

template <class T>
struct BoxT {
  T cx, cy, cz, w, l, h, yaw;
};

template <class T>
struct P2 {
  T x, y;
};

template <class T>
BoxT<T> lift(const Box3D& b) {
  return {T(b.cx), T(b.cy), T(b.cz), T(b.w), T(b.l), T(b.h), T(b.yaw)};
}

// Counter-clockwise footprint starting at the (+l/2, +w/2) corner.
template <class T>
std::array<P2<T>, 4> footprint(const BoxT<T>& b) {
  const T c = cos(b.yaw), s = sin(b.yaw);
  const T hl = b.l * T(0.5), hw = b.w * T(0.5);
  const std::array<std::array<double, 2>, 4> sign{{{1, 1}, {-1, 1}, {-1, -1}, {1, -1}}};
  std::array<P2<T>, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    const T lx = hl * T(sign[i][0]);
    const T ly = hw * T(sign[i][1]);
    out[i] = {b.cx + c * lx - s * ly, b.cy + s * lx + c * ly};
  }
  return out;
}

template <class T>
T cross(const P2<T>& o, const P2<T>& a, const P2<T>& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Sutherland-Hodgman clipping of `subject` by the convex CCW polygon `clip`.
template <class T>
std::vector<P2<T>> clip_polygon(std::vector<P2<T>> subject, const std::array<P2<T>, 4>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const P2<T>& a = clip[e];
    const P2<T>& b = clip[(e + 1) % clip.size()];
    std::vector<P2<T>> out;
    out.reserve(subject.size() + 2);
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const P2<T>& s = subject[i];
      const P2<T>& t = subject[(i + 1) % subject.size()];
      const T cs = cross(a, b, s);
      const T ct = cross(a, b, t);
      const bool s_in = value_of(cs) >= 0;
      const bool t_in = value_of(ct) >= 0;
      if (s_in) out.push_back(s);
      if (s_in != t_in) {
        const T r = cs / (cs - ct);
        out.push_back({s.x + r * (t.x - s.x), s.y + r * (t.y - s.y)});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

template <class T>
T polygon_area(const std::vector<P2<T>>& poly) {
  if (poly.size() < 3) return T(0.0);
  T twice(0.0);
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    twice += p.x * q.y - q.x * p.y;
  }
  const T area = twice * T(0.5);
  return value_of(area) < 0 ? T(0.0) - area : area;
}

template <class T>
T bev_intersection_t(const BoxT<T>& a, const BoxT<T>& b) {
  const auto fa = footprint(a);
  const auto fb = footprint(b);
  const T area = polygon_area(clip_polygon(std::vector<P2<T>>(fa.begin(), fa.end()), fb));
  return value_of(area) < kAreaEpsilon ? T(0.0) : area;
}

template <class T>
T tmin(const T& a, const T& b) { return value_of(a) <= value_of(b) ? a : b; }
template <class T>
T tmax(const T& a, const T& b) { return value_of(a) >= value_of(b) ? a : b; }

template <class T>
T iou3d_t(const BoxT<T>& a, const BoxT<T>& b) {
  const T inter_area = bev_intersection_t(a, b);
  if (value_of(inter_area) <= 0) return T(0.0);
  const T top = tmin(a.cz + a.h * T(0.5), b.cz + b.h * T(0.5));
  const T bottom = tmax(a.cz - a.h * T(0.5), b.cz - b.h * T(0.5));
  const T overlap = top - bottom;
  if (value_of(overlap) <= 0) return T(0.0);
  const T inter = inter_area * overlap;
  const T uni = a.w * a.l * a.h + b.w * b.l * b.h - inter;
  return inter / uni;
}

template <class T>
T center_weight_t(const BoxT<T>& pred, const BoxT<T>& target) {
  const T dx = pred.cx - target.cx, dy = pred.cy - target.cy, dz = pred.cz - target.cz;
  const T d2 = target.w * target.w + target.l * target.l + target.h * target.h;  // diagonal^2
  // exp(-|dc|^2 / (2 (d/2)^2)) = exp(-2 |dc|^2 / d^2)
  return exp(T(-2.0) * (dx * dx + dy * dy + dz * dz) / d2);
}

template <class T>
std::array<std::array<T, 3>, 8> corners_t(const BoxT<T>& b) {
  const auto f = footprint(b);
  std::array<std::array<T, 3>, 8> out;
  const T lo = b.cz - b.h * T(0.5), hi = b.cz + b.h * T(0.5);
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {f[i].x, f[i].y, lo};
    out[i + 4] = {f[i].x, f[i].y, hi};
  }
  return out;
}

template <class T>
T corner_term(const std::array<std::array<T, 3>, 8>& p, const std::array<std::array<T, 3>, 8>& q) {
  T total(0.0);
  for (std::size_t i = 0; i < 8; ++i) {
    const T dx = p[i][0] - q[i][0], dy = p[i][1] - q[i][1], dz = p[i][2] - q[i][2];
    const T d2 = dx * dx + dy * dy + dz * dz;
    // smooth-L1 of the Euclidean distance, beta = 1
    total += value_of(d2) < 1.0 ? T(0.5) * d2 : sqrt(d2) - T(0.5);
  }
  return total / T(8.0);
}

template <class T>
T corner_loss_t(const BoxT<T>& pred, const BoxT<T>& target) {
  const auto pc = corners_t(pred);
  BoxT<T> flipped = target;
  flipped.yaw = flipped.yaw + T(kPi);
  const T a = corner_term(pc, corners_t(target));
  const T b = corner_term(pc, corners_t(flipped));
  return tmin(a, b);
}

}  // namespace

CornerSet box_corners(const Box3D& b) {
  const auto c = corners_t(lift<double>(b));
  CornerSet out;
  for (std::size_t i = 0; i < 8; ++i) out[i] = {c[i][0], c[i][1], c[i][2]};
  return out;
}

double bev_intersection(const Box3D& a, const Box3D& b) {
  return bev_intersection_t(lift<double>(a), lift<double>(b));
}

double bev_iou(const Box3D& a, const Box3D& b) {
  const double inter = bev_intersection(a, b);
  const double uni = a.w * a.l + b.w * b.l - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double iou3d(const Box3D& a, const Box3D& b) { return iou3d_t(lift<double>(a), lift<double>(b)); }

double center_weight(const Box3D& pred, const Box3D& target) {
  return center_weight_t(lift<double>(pred), lift<double>(target));
}

double cwiou(const Box3D& pred, const Box3D& target) { return iou3d(pred, target) * center_weight(pred, target); }

double corner_loss(const Box3D& pred, const Box3D& target) {
  return corner_loss_t(lift<double>(pred), lift<double>(target));
}

ad::Matrix boxes_to_matrix(std::span<const Box3D> boxes) {
  ad::Matrix m(static_cast<Eigen::Index>(boxes.size()), 7);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    m.row(static_cast<Eigen::Index>(i)) << b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw;
  }
  return m;
}

Box3D box_from_row(const ad::Matrix& m, Eigen::Index r) {
  return {m(r, 0), m(r, 1), m(r, 2), m(r, 3), m(r, 4), m(r, 5), m(r, 6)};
}

ad::Var box_metric(ad::Var pred, std::span<const Box3D> targets, Metric metric) {
  const ad::Matrix& p = pred.value();
  if (p.cols() != 7 || p.rows() != static_cast<Eigen::Index>(targets.size())) {
    throw ShapeError("box_metric: predictions " + ad::shape_str(p) + " vs " + std::to_string(targets.size()) +
                     " targets");
  }
  using D = Dual<7>;
  ad::Matrix out(p.rows(), 1);
  ad::Matrix jac(p.rows(), 7);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const BoxT<D> pb{D::variable(p(r, 0), 0), D::variable(p(r, 1), 1), D::variable(p(r, 2), 2),
                     D::variable(p(r, 3), 3), D::variable(p(r, 4), 4), D::variable(p(r, 5), 5),
                     D::variable(p(r, 6), 6)};
    const auto tb = lift<D>(targets[static_cast<std::size_t>(r)]);
    D v;
    switch (metric) {
      case Metric::Iou: v = iou3d_t(pb, tb); break;
      case Metric::CwIou: v = iou3d_t(pb, tb) * center_weight_t(pb, tb); break;
      case Metric::Corner: v = corner_loss_t(pb, tb); break;
    }
    out(r, 0) = v.v;
    for (int i = 0; i < 7; ++i) jac(r, i) = v.d[static_cast<std::size_t>(i)];
  }
  const char* name = metric == Metric::Iou ? "box_iou" : metric == Metric::CwIou ? "box_cwiou" : "box_corner";
  return pred.graph->record(name, std::move(out), {pred.id}, [jac = std::move(jac)](ad::Graph& g, int self) {
    const int parent = g.parents(self)[0];
    const ad::Matrix& go = g.node_grad(self);
    g.accumulate(parent, (jac.array().colwise() * go.col(0).array()).matrix());
  });
}

std::vector<int> nms_bev(std::span<const ScoredBox> boxes, double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return boxes[static_cast<std::size_t>(a)].score > boxes[static_cast<std::size_t>(b)].score; });
  std::vector<int> kept;
  for (int i : order) {
    const auto& cand = boxes[static_cast<std::size_t>(i)];
    bool suppressed = false;
    for (int k : kept) {
      const auto& other = boxes[static_cast<std::size_t>(k)];
      if (other.scene == cand.scene && other.cls == cand.cls && bev_iou(other.box, cand.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

double interpolated_ap(std::span<const char> is_tp, int n_truths, int recall_positions) {
  if (recall_positions != 11 && recall_positions != 40) throw Error("recall positions must be 11 or 40");
  if (n_truths <= 0 || is_tp.empty()) return 0.0;
  std::vector<double> precision(is_tp.size()), recall(is_tp.size());
  int tp = 0;
  for (std::size_t i = 0; i < is_tp.size(); ++i) {
    tp += is_tp[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_truths);
  }
  // precision envelope: best precision at any recall >= r
  for (std::size_t i = precision.size() - 1; i-- > 0;) precision[i] = std::max(precision[i], precision[i + 1]);
  double total = 0;
  const int first = recall_positions == 11 ? 0 : 1;
  const double step = recall_positions == 11 ? 0.1 : 1.0 / 40.0;
  for (int k = first; k < first + recall_positions; ++k) {
    const double r = k * step;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / recall_positions;
}

std::vector<double> evaluate_ap(std::span<const ScoredBox> predictions, std::span<const GroundTruth> truths,
                                int n_classes, double iou_threshold, int recall_positions) {
  std::vector<double> ap(static_cast<std::size_t>(n_classes), 0.0);
  for (int c = 0; c < n_classes; ++c) {
    std::vector<int> gt_idx;
    for (std::size_t i = 0; i < truths.size(); ++i) {
      if (truths[i].cls == c) gt_idx.push_back(static_cast<int>(i));
    }
    std::vector<int> pred_idx;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      if (predictions[i].cls == c) pred_idx.push_back(static_cast<int>(i));
    }
    std::stable_sort(pred_idx.begin(), pred_idx.end(), [&](int a, int b) {
      return predictions[static_cast<std::size_t>(a)].score > predictions[static_cast<std::size_t>(b)].score;
    });
    std::vector<char> matched(gt_idx.size(), 0);
    std::vector<char> is_tp;
    is_tp.reserve(pred_idx.size());
    for (int pi : pred_idx) {
      const auto& p = predictions[static_cast<std::size_t>(pi)];
      int best = -1;
      double best_iou = iou_threshold;
      for (std::size_t j = 0; j < gt_idx.size(); ++j) {
        const auto& t = truths[static_cast<std::size_t>(gt_idx[j])];
        if (matched[j] || t.scene != p.scene) continue;
        const double iou = iou3d(p.box, t.box);
        if (iou >= best_iou) {
          best_iou = iou;
          best = static_cast<int>(j);
        }
      }
      if (best >= 0) matched[static_cast<std::size_t>(best)] = 1;
      is_tp.push_back(best >= 0 ? 1 : 0);
    }
    ap[static_cast<std::size_t>(c)] = interpolated_ap(is_tp, static_cast<int>(gt_idx.size()), recall_positions);
  }
  return ap;
}

}  // namespace pcd::boxes
