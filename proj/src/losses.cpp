#include "pcd/losses.hpp"

#include <algorithm>
#include <cmath>

namespace pcd::loss {

double temp_sigmoid(double c, double t) {
  if (!(t > 0)) throw Error("temperature must be positive");
  return 1.0 / (1.0 + std::exp(-c / t));
}

ad::Var temp_sigmoid(ad::Var c, double t) {
  if (!(t > 0)) throw Error("temperature must be positive");
  return ad::sigmoid(ad::scale(c, 1.0 / t));
}

double soft_focal(double c_soft, double c_pred, bool foreground, double alpha, double gamma) {
  c_soft = std::clamp(c_soft, kProbEpsilon, 1.0 - kProbEpsilon);
  c_pred = std::clamp(c_pred, kProbEpsilon, 1.0 - kProbEpsilon);
  const double pt = foreground ? c_pred : 1.0 - c_pred;
  return -alpha * std::pow(c_soft - pt, gamma) * std::log(pt);
}

namespace {

int integer_gamma(double gamma) {
  const double r = std::round(gamma);
  if (gamma < 0 || std::abs(r - gamma) > 1e-12) throw Error("focal gamma must be a non-negative integer");
  return static_cast<int>(r);
}

}  // namespace

ad::Var soft_focal(const ad::Matrix& c_soft, ad::Var c_pred, std::span<const int> labels, double alpha,
                   double gamma) {
  ad::Graph& g = *c_pred.graph;
  const ad::Matrix& p = c_pred.value();
  if (c_soft.rows() != p.rows() || c_soft.cols() != p.cols() || labels.size() != static_cast<std::size_t>(p.rows())) {
    throw ShapeError("soft_focal: soft " + ad::shape_str(c_soft) + " vs pred " + ad::shape_str(p) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  const int gi = integer_gamma(gamma);
  if (p.rows() == 0) return g.constant(0.0);
  // p_t = (1 - M) + (2M - 1) * c_pred with M the foreground mask.
  ad::Matrix sign(p.rows(), p.cols()), offset(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const bool fg = labels[static_cast<std::size_t>(r)] == static_cast<int>(c);
      sign(r, c) = fg ? 1.0 : -1.0;
      offset(r, c) = fg ? 0.0 : 1.0;
    }
  }
  const ad::Var pred = ad::clamp(c_pred, kProbEpsilon, 1.0 - kProbEpsilon);
  const ad::Var pt = ad::add(ad::mul(pred, g.constant(sign)), g.constant(offset));
  const ad::Matrix soft = c_soft.cwiseMax(kProbEpsilon).cwiseMin(1.0 - kProbEpsilon);
  const ad::Var diff = ad::sub(g.constant(soft), pt);
  const ad::Var mod = gi == 0 ? g.constant(ad::Matrix::Ones(p.rows(), p.cols())) : ad::pow_int(diff, gi);
  const ad::Var per = ad::mul(mod, ad::log(pt));
  return ad::scale(ad::sum(per), -alpha / static_cast<double>(p.rows()));
}

double smooth_l1(double x, double beta) {
  const double a = std::abs(x);
  return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

boxes::Metric parse_iou_metric(const std::string& name) {
  if (name == "iou") return boxes::Metric::Iou;
  if (name == "cwiou") return boxes::Metric::CwIou;
  throw ConfigError("unknown IoU metric '" + name + "' (expected iou or cwiou)");
}

LocTerms loc_loss(ad::Graph& g, ad::Var pred, std::span<const Box3D> targets, boxes::Metric metric,
                  double lambda_ind, double lambda_corner) {
  LocTerms t;
  const auto n = static_cast<Eigen::Index>(targets.size());
  if (pred.cols() != 7 || pred.rows() != n) {
    throw ShapeError("loc_loss: predictions " + ad::shape_str(pred.value()) + " vs " + std::to_string(n) +
                     " targets");
  }
  if (n == 0) {
    t.iou = g.constant(0.0);
    t.ind = g.constant(0.0);
    t.corner = g.constant(0.0);
    return t;
  }
  t.empty = false;
  const double inv_n = 1.0 / static_cast<double>(n);
  const ad::Matrix tm = boxes::boxes_to_matrix(targets);
  const ad::Var metric_v = boxes::box_metric(pred, targets, metric);
  t.iou = ad::scale(ad::sum(ad::add_scalar(ad::neg(metric_v), 1.0)), inv_n);

  const ad::Var lin = ad::smooth_l1(ad::sub(ad::slice_cols(pred, 0, 6), g.constant(tm.leftCols(6))));
  const ad::Var yaw = ad::smooth_l1(ad::sin(ad::sub(ad::slice_cols(pred, 6, 1), g.constant(tm.col(6)))));
  t.ind = ad::scale(ad::add(ad::sum(lin), ad::sum(yaw)), lambda_ind * inv_n);

  const ad::Var corner = boxes::box_metric(pred, targets, boxes::Metric::Corner);
  t.corner = ad::scale(ad::sum(corner), lambda_corner * inv_n);
  return t;
}

double loc_loss(const Box3D& pred, const Box3D& target, boxes::Metric metric, double lambda_ind,
                double lambda_corner) {
  const double m = metric == boxes::Metric::CwIou ? boxes::cwiou(pred, target) : boxes::iou3d(pred, target);
  const double ind = smooth_l1(pred.cx - target.cx) + smooth_l1(pred.cy - target.cy) +
                     smooth_l1(pred.cz - target.cz) + smooth_l1(pred.w - target.w) + smooth_l1(pred.l - target.l) +
                     smooth_l1(pred.h - target.h) + smooth_l1(std::sin(pred.yaw - target.yaw));
  return (1.0 - m) + lambda_ind * ind + lambda_corner * boxes::corner_loss(pred, target);
}

ad::Var cross_entropy_bg(ad::Var logits, std::span<const int> labels) {
  ad::Graph& g = *logits.graph;
  const auto n = logits.rows();
  if (labels.size() != static_cast<std::size_t>(n)) {
    throw ShapeError("cross_entropy_bg: " + std::to_string(labels.size()) + " labels for logits " +
                     ad::shape_str(logits.value()));
  }
  if (n == 0) return g.constant(0.0);
  std::vector<int> column(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < -1 || labels[i] >= logits.cols()) throw Error("cross_entropy_bg: label out of range");
    column[i] = labels[i] + 1;
  }
  const ad::Var full = ad::concat({g.constant(ad::Matrix::Zero(n, 1)), logits});
  return ad::scale(ad::sum(ad::pick(ad::log_softmax(full), column)), -1.0 / static_cast<double>(n));
}

ad::Var binary_cross_entropy(ad::Var prob, std::span<const char> labels) {
  ad::Graph& g = *prob.graph;
  const auto n = prob.rows();
  if (prob.cols() != 1 || labels.size() != static_cast<std::size_t>(n)) {
    throw ShapeError("binary_cross_entropy: probabilities " + ad::shape_str(prob.value()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  if (n == 0) return g.constant(0.0);
  ad::Matrix y(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) y(i, 0) = labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  const ad::Var p = ad::clamp(prob, kProbEpsilon, 1.0 - kProbEpsilon);
  const ad::Var pos = ad::mul(g.constant(y), ad::log(p));
  const ad::Var neg = ad::mul(g.constant(ad::Matrix::Ones(n, 1) - y), ad::log(ad::add_scalar(ad::neg(p), 1.0)));
  return ad::scale(ad::sum(ad::add(pos, neg)), -1.0 / static_cast<double>(n));
}

ad::Var vote_loss(ad::Var votes, const ad::Matrix& targets) {
  ad::Graph& g = *votes.graph;
  if (votes.rows() != targets.rows() || votes.cols() != 3 || targets.cols() != 3) {
    throw ShapeError("vote_loss: votes " + ad::shape_str(votes.value()) + " vs targets " + ad::shape_str(targets));
  }
  if (votes.rows() == 0) return g.constant(0.0);
  return ad::scale(ad::sum(ad::smooth_l1(ad::sub(votes, g.constant(targets)))),
                   1.0 / static_cast<double>(votes.rows()));
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  total += o.total;
  soft_cls += o.soft_cls;
  soft_loc_iou += o.soft_loc_iou;
  soft_loc_ind += o.soft_loc_ind;
  soft_loc_corner += o.soft_loc_corner;
  hard_cls += o.hard_cls;
  hard_loc_iou += o.hard_loc_iou;
  hard_loc_ind += o.hard_loc_ind;
  hard_loc_corner += o.hard_loc_corner;
  center_vote += o.center_vote;
  foreground += o.foreground;
  n_foreground += o.n_foreground;
  empty_foreground = empty_foreground || o.empty_foreground;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const {
  LossBreakdown b = *this;
  b.total *= s;
  b.soft_cls *= s;
  b.soft_loc_iou *= s;
  b.soft_loc_ind *= s;
  b.soft_loc_corner *= s;
  b.hard_cls *= s;
  b.hard_loc_iou *= s;
  b.hard_loc_ind *= s;
  b.hard_loc_corner *= s;
  b.center_vote *= s;
  b.foreground *= s;
  return b;
}

std::vector<std::string> LossBreakdown::field_names() {
  return {"total",        "soft_cls",     "soft_loc_iou",    "soft_loc_ind", "soft_loc_corner", "hard_cls",
          "hard_loc_iou", "hard_loc_ind", "hard_loc_corner", "center_vote",  "foreground"};
}

std::vector<double> LossBreakdown::field_values() const {
  return {total,        soft_cls,     soft_loc_iou,    soft_loc_ind, soft_loc_corner, hard_cls,
          hard_loc_iou, hard_loc_ind, hard_loc_corner, center_vote,  foreground};
}

double hybrid_loss(double soft, double hard, double lambda_soft, double lambda_hard) {
  if (lambda_soft < 0 || lambda_hard < 0) throw Error("loss weights must be non-negative");
  return lambda_soft * soft + lambda_hard * hard;
}

namespace {

double value_or_zero(ad::Var v) { return v.id < 0 ? 0.0 : v.scalar(); }

}  // namespace

HybridResult hybrid_loss(ad::Graph& g, const LossTerms& t, double lambda_soft, double lambda_hard) {
  if (lambda_soft < 0 || lambda_hard < 0) throw Error("loss weights must be non-negative");
  auto total_of = [&](std::initializer_list<ad::Var> parts) {
    ad::Var acc = g.constant(0.0);
    for (const ad::Var& v : parts) {
      if (v.id >= 0) acc = ad::add(acc, v);
    }
    return acc;
  };
  const ad::Var soft = total_of({t.soft_cls_det, t.soft_cls_aux, t.soft_loc_iou, t.soft_loc_ind, t.soft_loc_corner});
  const ad::Var hard = total_of({t.hard_cls_det, t.hard_cls_aux, t.hard_loc_iou, t.hard_loc_ind, t.hard_loc_corner,
                                 t.center_vote, t.foreground});
  HybridResult r;
  r.total = ad::add(ad::scale(soft, lambda_soft), ad::scale(hard, lambda_hard));
  auto& b = r.breakdown;
  b.soft_cls = value_or_zero(t.soft_cls_det) + value_or_zero(t.soft_cls_aux);
  b.soft_loc_iou = value_or_zero(t.soft_loc_iou);
  b.soft_loc_ind = value_or_zero(t.soft_loc_ind);
  b.soft_loc_corner = value_or_zero(t.soft_loc_corner);
  b.hard_cls = value_or_zero(t.hard_cls_det) + value_or_zero(t.hard_cls_aux);
  b.hard_loc_iou = value_or_zero(t.hard_loc_iou);
  b.hard_loc_ind = value_or_zero(t.hard_loc_ind);
  b.hard_loc_corner = value_or_zero(t.hard_loc_corner);
  b.center_vote = value_or_zero(t.center_vote);
  b.foreground = value_or_zero(t.foreground);
  b.n_foreground = t.n_foreground;
  b.empty_foreground = t.n_foreground == 0;
  b.total = r.total.scalar();
  return r;
}

}  // namespace pcd::loss
