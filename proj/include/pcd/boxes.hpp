#pragma once

#include <array>
#include <span>
#include <vector>

#include "pcd/autodiff.hpp"
#include "pcd/core.hpp"

namespace pcd::boxes {

/// Bottom face counter-clockwise starting at the (+l/2, +w/2) corner, then the
/// top face in the same order.
using CornerSet = std::array<Vec3, 8>;

CornerSet box_corners(const Box3D& b);

/// Area below which a clipped polygon counts as empty (m^2).
inline constexpr double kAreaEpsilon = 1e-12;

double bev_intersection(const Box3D& a, const Box3D& b);
double bev_iou(const Box3D& a, const Box3D& b);
/// Rotated 3D IoU: clipped BEV overlap times vertical overlap over the union volume.
double iou3d(const Box3D& a, const Box3D& b);
/// exp(-|c_pred - c_target|^2 / (2 (d/2)^2)) with d the target diagonal.
double center_weight(const Box3D& pred, const Box3D& target);
/// Center-weighted IoU: iou3d scaled by center_weight.
double cwiou(const Box3D& pred, const Box3D& target);
/// Mean smooth-L1 (beta = 1) of the eight corner distances, minimized over the
/// target heading and its pi flip.
double corner_loss(const Box3D& pred, const Box3D& target);

enum class Metric { Iou, CwIou, Corner };

/// Differentiable per-row metric between predicted boxes (n x 7 rows of
/// cx, cy, cz, w, l, h, yaw) and constant targets. Returns n x 1.
ad::Var box_metric(ad::Var pred, std::span<const Box3D> targets, Metric metric);

ad::Matrix boxes_to_matrix(std::span<const Box3D> boxes);
Box3D box_from_row(const ad::Matrix& m, Eigen::Index row);

struct ScoredBox {
  int scene = 0;
  int cls = 0;
  double score = 0;
  Box3D box;
};

struct GroundTruth {
  int scene = 0;
  int cls = 0;
  Box3D box;
};

/// Greedy bird's-eye-view NMS per class; returns kept indices in score order.
std::vector<int> nms_bev(std::span<const ScoredBox> boxes, double iou_threshold);

/// Interpolated average precision per class. Predictions are matched greedily in
/// descending score order to the best unmatched ground truth of the same scene
/// and class with iou3d >= iou_threshold. recall_positions is 11 (recalls
/// 0, 0.1, ..., 1) or 40 (recalls 1/40, ..., 1). Classes without ground truth
/// score 0.
std::vector<double> evaluate_ap(std::span<const ScoredBox> predictions, std::span<const GroundTruth> truths,
                                int n_classes, double iou_threshold, int recall_positions);

/// AP from an already-matched, score-sorted sequence of TP/FP flags.
double interpolated_ap(std::span<const char> is_tp, int n_truths, int recall_positions);

}  // namespace pcd::boxes
