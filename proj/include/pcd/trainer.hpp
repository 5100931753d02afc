#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcd/detector.hpp"
#include "pcd/losses.hpp"

namespace pcd::train {

struct StepOptions {
  ad::AdamOptions adam;
  bool augment = false;
};

/// One teacher update on `batch`: hard losses only, then the class-statistics
/// EMA with the teacher's object features.
loss::LossBreakdown teacher_step(det::DetectorModel& teacher, std::span<const LabeledScene> batch,
                                 const StepOptions& opt, Rng& rng);

/// One student update. The teacher must be frozen; if any gradient reaches a
/// teacher parameter the step throws Error. With lambda_soft = 0 the teacher is
/// not evaluated at all.
loss::LossBreakdown distill_step(det::DetectorModel& teacher, det::DetectorModel& student,
                                 std::span<const LabeledScene> batch, const StepOptions& opt, Rng& rng);

/// Student update with hard labels only (lambda_soft = 0).
loss::LossBreakdown student_step(det::DetectorModel& student, std::span<const LabeledScene> batch,
                                 const StepOptions& opt, Rng& rng);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  loss::LossBreakdown loss;          // mean per scene
  std::vector<double> val_ap11;      // empty when validation was skipped
};

struct TrainOptions {
  int epochs = 1;
  int batch_size = 1;
  double lr = 0.01;
  bool augment = false;
  std::uint64_t seed = 0;
  /// Validate every n epochs (and always after the last); 0 validates only at the end.
  int eval_every = 0;
  std::function<void(const EpochMetrics&, const det::DetectorModel&)> on_epoch;
};

TrainOptions options_from(const PipelineConfig& cfg);

std::vector<EpochMetrics> train_teacher(det::DetectorModel& teacher, std::span<const LabeledScene> train,
                                        std::span<const LabeledScene> val, const TrainOptions& opt);

/// Trains `student` against the frozen `teacher` with the student config's loss
/// weights (kd = false forces lambda_soft = 0). Class statistics and anchors are
/// copied from the teacher first.
std::vector<EpochMetrics> train_student(det::DetectorModel& student, det::DetectorModel& teacher,
                                        std::span<const LabeledScene> train, std::span<const LabeledScene> val,
                                        const TrainOptions& opt, bool kd);

/// Builds a student ready for distillation: fresh weights, teacher statistics
/// and anchors, checked for grid compatibility.
det::DetectorModel make_student(const det::DetectorModel& teacher, const PipelineConfig& cfg, std::uint64_t seed);

struct EvalResult {
  std::vector<double> ap;  // per class
  double mean_ap = 0;
  std::vector<boxes::ScoredBox> predictions;
};

/// Runs predict on every scene (in parallel up to worker_count()) and scores
/// AP at the given 3D IoU threshold and recall positions.
EvalResult evaluate(det::DetectorModel& m, std::span<const LabeledScene> scenes, double iou_threshold,
                    int recall_positions);

std::vector<boxes::GroundTruth> ground_truths(std::span<const LabeledScene> scenes);

/// PCD_THREADS when set and positive, else the hardware concurrency (at least 1).
int worker_count();

/// Metrics CSV: epoch, lr, the LossBreakdown fields, n_foreground, then
/// ap11_<class> per class (empty when validation was skipped that epoch).
std::string metrics_header(const std::vector<std::string>& classes);
std::string metrics_row(const EpochMetrics& m, int n_classes);

}  // namespace pcd::train
