#pragma once

#include <span>
#include <string>
#include <vector>

#include "pcd/autodiff.hpp"
#include "pcd/boxes.hpp"
#include "pcd/core.hpp"

namespace pcd::loss {

inline constexpr double kProbEpsilon = 1e-7;

/// 1 / (1 + exp(-c / t)). Throws Error for t <= 0.
double temp_sigmoid(double c, double t);
ad::Var temp_sigmoid(ad::Var c, double t);

/// Focal term for one class entry: -alpha (c_soft - p_t)^gamma log(p_t) with
/// p_t = c_pred when `foreground`, 1 - c_pred otherwise. Inputs are clamped to
/// [eps, 1 - eps].
double soft_focal(double c_soft, double c_pred, bool foreground, double alpha, double gamma);

/// Matrix form over N x C normalized confidences. Row r is foreground for class
/// c iff labels[r] == c (labels < 0 mark background). Sum over classes, mean
/// over rows. `gamma` must be a non-negative integer.
ad::Var soft_focal(const ad::Matrix& c_soft, ad::Var c_pred, std::span<const int> labels, double alpha,
                   double gamma);

double smooth_l1(double x, double beta = 1.0);

/// Localization sub-terms, each already multiplied by its weight and averaged
/// over rows. All three are zero constants when there are no rows.
struct LocTerms {
  ad::Var iou;     // 1 - metric
  ad::Var ind;     // lambda_ind * (sum of smooth-L1 on x,y,z,w,l,h + smooth-L1(sin dyaw))
  ad::Var corner;  // lambda_corner * corner_loss
  bool empty = true;
};

boxes::Metric parse_iou_metric(const std::string& name);

/// `pred` is n x 7; targets are constant boxes.
LocTerms loc_loss(ad::Graph& g, ad::Var pred, std::span<const Box3D> targets, boxes::Metric metric,
                  double lambda_ind, double lambda_corner);

/// Scalar reference for a single pair, same formula as loc_loss.
double loc_loss(const Box3D& pred, const Box3D& target, boxes::Metric metric, double lambda_ind,
                double lambda_corner);

/// Softmax cross-entropy over [background | classes]. The background logit is a
/// fixed zero; label -1 is background. Mean over rows.
ad::Var cross_entropy_bg(ad::Var logits, std::span<const int> labels);

/// Binary cross-entropy on probabilities (clamped to [eps, 1 - eps]), mean over rows.
ad::Var binary_cross_entropy(ad::Var prob, std::span<const char> labels);

/// Mean over rows of the summed smooth-L1 between votes and targets (n x 3).
ad::Var vote_loss(ad::Var votes, const ad::Matrix& targets);

/// Per-step report. Sub-terms carry their inner weights (lambda_ind,
/// lambda_corner) but not lambda_soft / lambda_hard.
struct LossBreakdown {
  double total = 0;
  double soft_cls = 0;
  double soft_loc_iou = 0;
  double soft_loc_ind = 0;
  double soft_loc_corner = 0;
  double hard_cls = 0;
  double hard_loc_iou = 0;
  double hard_loc_ind = 0;
  double hard_loc_corner = 0;
  double center_vote = 0;
  double foreground = 0;
  int n_foreground = 0;
  bool empty_foreground = false;

  double soft_sum() const { return soft_cls + soft_loc_iou + soft_loc_ind + soft_loc_corner; }
  double hard_sum() const {
    return hard_cls + hard_loc_iou + hard_loc_ind + hard_loc_corner + center_vote + foreground;
  }
  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;

  static std::vector<std::string> field_names();
  std::vector<double> field_values() const;
};

/// Graph-level terms of one scene. Unset Vars (id < 0) count as zero.
struct LossTerms {
  ad::Var soft_cls_det, soft_cls_aux;
  ad::Var soft_loc_iou, soft_loc_ind, soft_loc_corner;
  ad::Var hard_cls_det, hard_cls_aux;
  ad::Var hard_loc_iou, hard_loc_ind, hard_loc_corner;
  ad::Var center_vote, foreground;
  int n_foreground = 0;
};

double hybrid_loss(double soft, double hard, double lambda_soft, double lambda_hard);

struct HybridResult {
  ad::Var total;
  LossBreakdown breakdown;
};

/// total = lambda_soft * L_soft + lambda_hard * L_hard.
HybridResult hybrid_loss(ad::Graph& g, const LossTerms& terms, double lambda_soft, double lambda_hard);

}  // namespace pcd::loss
