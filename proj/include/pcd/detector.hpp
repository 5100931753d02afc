#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pcd/autodiff.hpp"
#include "pcd/boxes.hpp"
#include "pcd/checkpoint.hpp"
#include "pcd/config.hpp"
#include "pcd/core.hpp"
#include "pcd/losses.hpp"
#include "pcd/nn.hpp"
#include "pcd/repository.hpp"
#include "pcd/sampling.hpp"

namespace pcd::det {

enum class Role { Teacher, Student };
std::string role_name(Role r);
Role parse_role(const std::string& s);

/// Number of residual channels per class: dx, dy, dz, log(w/aw), log(l/al),
/// log(h/ah), sin(yaw), cos(yaw).
inline constexpr int kLocChannels = 8;

/// Teacher and student share one layout; they differ in the partial-knowledge
/// aggregator (one scale vs several), encoder-decoder widths, object-level k and
/// the localization head (the teacher's is modulated by class statistics).
struct DetectorModel {
  Role role = Role::Student;
  PipelineConfig cfg;
  ad::ParamStore store;
  ad::Matrix stats;    // N_cls x D class-aware statistics
  ad::Matrix anchors;  // N_cls x 3 mean (w, l, h) per class

  std::vector<nn::Mlp> repo_msg;
  nn::Linear repo_proj;
  nn::Mlp fg_head;
  std::vector<double> partial_radii;
  std::vector<int> partial_ks;
  std::vector<nn::Mlp> partial_mlps;
  nn::Linear aux_cls;
  repo::EncoderDecoder encoder_decoder;
  nn::Linear ed_proj;
  nn::Mlp repo_mlp;
  nn::Linear vote;
  std::vector<nn::Mlp> obj_mlps;
  nn::Linear obj_proj;
  nn::Mlp cls_mlp;
  nn::Mlp loc_mlp;        // student: D -> hidden -> 8 N_cls
  nn::Linear loc_hidden;  // teacher: D -> hidden
  nn::Linear loc_out;     // teacher: hidden -> 8

  static DetectorModel create(Role role, const PipelineConfig& cfg, std::uint64_t seed);

  int n_classes() const { return cfg.n_classes(); }
  int partial_width() const;
  int obj_k() const { return role == Role::Teacher ? cfg.obj_k_teacher : cfg.obj_k_student; }
  std::size_t parameter_count() const { return store.count(); }
  std::size_t loc_head_parameter_count() const { return store.count("loc."); }

  Checkpoint to_checkpoint() const;
  static DetectorModel from_checkpoint(const Checkpoint& ck);
  void save(const std::string& path) const { to_checkpoint().save(path); }
  static DetectorModel load(const std::string& path) { return from_checkpoint(Checkpoint::load(path)); }
};

struct RepoInit {
  std::vector<int> keypoint_index;  // into the cloud
  ad::Matrix keypoints;             // M x 3
  bool resampled = false;           // cloud had fewer than n_keypoints points
  repo::FeatureRepository repo;     // features M' x repo_init_dim, confidence S_R
  ad::Var fg_logits;                // M' x 1
};

/// FPS keypoints, multi-scale aggregation over the raw cloud, projection to
/// repo_init_dim, voxel means, then the foreground head fills the confidence.
RepoInit forward_repo_init(ad::Graph& g, DetectorModel& m, const PointCloud& cloud,
                           sampling::QueryCounter* counter = nullptr);

struct PartialKnowledge {
  std::vector<int> rows;  // repository rows chosen by S-FPS
  ad::Matrix xyz;         // P x 3
  ad::Var features;       // P x partial_width
  ad::Var aux_logits;     // P x N_cls
  std::uint64_t queries = 0;
};

/// S-FPS over repository voxels weighted by the (detached) confidence, then one
/// ball query per partial point (student) or one per teacher scale. `rows`
/// overrides the S-FPS choice.
PartialKnowledge forward_partial_knowledge(ad::Graph& g, DetectorModel& m, const repo::FeatureRepository& r,
                                           const std::vector<int>* rows = nullptr);

/// scatter -> encoder-decoder -> projection -> R' = S_R * proj + MLP(R).
repo::FeatureRepository update_repository(ad::Graph& g, DetectorModel& m, const repo::FeatureRepository& r,
                                          const PartialKnowledge& k);

/// partial coordinate + linear offset.
ad::Var vote_centers(ad::Graph& g, DetectorModel& m, const PartialKnowledge& k);

/// Multi-scale grouping in the fused repository around each vote, projected to
/// stats_dim with ReLU.
ad::Var aggregate_object(ad::Graph& g, DetectorModel& m, const repo::FeatureRepository& fused, ad::Var votes,
                         std::uint64_t* queries = nullptr);

/// EMA of foreground object features per class. Classes absent from `labels`
/// keep their row.
void teacher_stats_update(ad::Matrix& stats, const ad::Matrix& object_features, std::span<const int> labels,
                          double momentum);

/// score_c = shared_mlp(f * stats_c) for every class; returns P x N_cls raw
/// confidences. Throws ShapeError when widths disagree.
ad::Var classify_with_stats(ad::Graph& g, ad::ParamStore& store, const nn::Mlp& shared_mlp, ad::Var features,
                            const ad::Matrix& stats);

/// Per-class residuals, P x (8 N_cls).
ad::Var localize(ad::Graph& g, DetectorModel& m, ad::Var object_features);

/// Residual encoding against a center and an anchor (w, l, h).
std::array<double, kLocChannels> encode_box(const Box3D& b, Vec3 center, const std::array<double, 3>& anchor);
Box3D decode_box(const std::array<double, kLocChannels>& r, Vec3 center, const std::array<double, 3>& anchor);

/// Differentiable decode of the residual block of class cls[i] for each row.
ad::Var decode_boxes(ad::Var residuals, ad::Var centers, std::span<const int> cls, const ad::Matrix& anchors);

struct ForwardOutput {
  RepoInit init;
  PartialKnowledge partial;
  repo::FeatureRepository fused;
  ad::Var votes;
  ad::Var object_features;
  ad::Var cls_logits;  // P x N_cls
  ad::Var residuals;   // P x 8 N_cls
  std::uint64_t partial_queries = 0;
  std::uint64_t object_queries = 0;
};

ForwardOutput forward(ad::Graph& g, DetectorModel& m, const PointCloud& cloud,
                      const std::vector<int>* partial_rows = nullptr);

/// Hard targets of one scene aligned with a forward pass.
struct SceneTargets {
  std::vector<int> partial_class;   // class id or -1
  std::vector<int> partial_box;     // box index or -1
  std::vector<char> voxel_fg;       // per repository voxel
  std::vector<int> fg_rows;         // partial rows with a box
  std::vector<int> fg_class;
  std::vector<Box3D> fg_boxes;
  ad::Matrix fg_centers;            // |fg| x 3
};

SceneTargets make_targets(const LabeledScene& scene, const ForwardOutput& out);

/// Hard-label terms (classification with background, localization, vote,
/// foreground).
loss::LossTerms hard_terms(ad::Graph& g, const DetectorModel& m, const ForwardOutput& out, const SceneTargets& t);

/// Teacher quantities used as soft targets, detached from any graph.
struct SoftTargets {
  ad::Matrix det_logits;
  ad::Matrix aux_logits;
  ad::Matrix fg_boxes;  // |fg| x 7, teacher boxes for the hard class of each fg row
};

SoftTargets soft_targets_from(const ForwardOutput& teacher_out, const DetectorModel& teacher, const SceneTargets& t);

/// Adds the soft terms (focal on detection and aux confidences, localization
/// against teacher boxes) to `terms`.
void add_soft_terms(ad::Graph& g, const DetectorModel& student, const ForwardOutput& out, const SceneTargets& t,
                    const SoftTargets& soft, loss::LossTerms& terms);

struct Detection {
  Box3D box;
  int cls = 0;
  double score = 0;
  std::vector<double> class_scores;
  int partial_index = -1;
};

/// Softmax over [background | classes]; candidates whose best class score is at
/// least `score_threshold` go through per-class BEV NMS.
std::vector<Detection> predict(DetectorModel& m, const PointCloud& cloud, double score_threshold, double nms_iou);

/// Mean box dimensions per class over a labeled set; classes without boxes use
/// the overall mean (or unit dims when there are no boxes at all).
ad::Matrix class_mean_anchors(std::span<const LabeledScene> scenes, int n_classes);

/// Throws ConfigError when two configs disagree on anything that fixes the
/// shared repository grid or the class list.
void check_compatible(const PipelineConfig& teacher, const PipelineConfig& student);

}  // namespace pcd::det
