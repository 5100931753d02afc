#include "pcd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pcd::det {

std::string role_name(Role r) { return r == Role::Teacher ? "teacher" : "student"; }

Role parse_role(const std::string& s) {
  if (s == "teacher") return Role::Teacher;
  if (s == "student") return Role::Student;
  throw FormatError("unknown model role '" + s + "'", 0);
}

namespace {

int last_width_sum(const std::vector<std::vector<int>>& groups) {
  int n = 0;
  for (const auto& g : groups) n += g.back();
  return n;
}

// Regression outputs start near zero, with cos(yaw) biased to 1 so the
// decoded heading is well defined from the first step.
void init_regression_layer(ad::ParamStore& store, const nn::Linear& layer, int period) {
  store.get(layer.name + ".w").value *= 0.1;
  auto& b = store.get(layer.name + ".b").value;
  for (Eigen::Index c = 0; c < b.cols(); ++c) {
    if (c % period == kLocChannels - 1) b(0, c) = 1.0;
  }
}

}  // namespace

int DetectorModel::partial_width() const {
  int n = 0;
  for (const auto& m : partial_mlps) n += m.out_width();
  return n;
}

DetectorModel DetectorModel::create(Role role, const PipelineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DetectorModel m;
  m.role = role;
  m.cfg = cfg;
  Rng rng(seed);
  const int n_cls = cfg.n_classes();
  auto& s = m.store;

  for (std::size_t i = 0; i < cfg.repo_msg_radii.size(); ++i) {
    m.repo_msg.push_back(nn::Mlp::create(s, "repo.msg" + std::to_string(i), 4, cfg.repo_msg_channels[i], rng));
  }
  m.repo_proj = nn::Linear::create(s, "repo.proj", last_width_sum(cfg.repo_msg_channels), cfg.repo_init_dim, rng);
  m.fg_head = nn::Mlp::create(s, "repo.fg", cfg.repo_init_dim, {cfg.fg_hidden, 1}, rng, false);

  if (role == Role::Teacher) {
    m.partial_radii = cfg.teacher_partial_radii;
    m.partial_ks = cfg.teacher_partial_ks;
    for (std::size_t i = 0; i < cfg.teacher_partial_radii.size(); ++i) {
      m.partial_mlps.push_back(nn::Mlp::create(s, "partial.s" + std::to_string(i), 3 + cfg.repo_init_dim,
                                               cfg.teacher_partial_mlps[i], rng));
    }
  } else {
    m.partial_radii = {cfg.partial_radius};
    m.partial_ks = {cfg.partial_k};
    m.partial_mlps.push_back(nn::Mlp::create(s, "partial.s0", 3 + cfg.repo_init_dim, cfg.partial_mlp, rng));
  }
  const int pw = m.partial_width();
  m.aux_cls = nn::Linear::create(s, "partial.aux", pw, n_cls, rng);

  const auto& ed_channels = role == Role::Teacher ? cfg.teacher_ed_channels : cfg.student_ed_channels;
  m.encoder_decoder = repo::EncoderDecoder::create(s, "ed", pw, ed_channels, rng);
  m.ed_proj = nn::Linear::create(s, "ed.proj", m.encoder_decoder.out_width(), cfg.repo_feature_dim, rng);
  m.repo_mlp = nn::Mlp::create(s, "repo.update", cfg.repo_init_dim, {cfg.repo_feature_dim, cfg.repo_feature_dim},
                               rng, false);

  m.vote = nn::Linear::create_zero(s, "vote", pw, 3);
  for (std::size_t i = 0; i < cfg.obj_radii.size(); ++i) {
    m.obj_mlps.push_back(
        nn::Mlp::create(s, "obj.s" + std::to_string(i), 3 + cfg.repo_feature_dim, cfg.obj_mlps[i], rng));
  }
  m.obj_proj = nn::Linear::create(s, "obj.proj", last_width_sum(cfg.obj_mlps), cfg.stats_dim, rng);
  m.cls_mlp = nn::Mlp::create(s, "cls", cfg.stats_dim, {cfg.cls_hidden, 1}, rng, false);

  if (role == Role::Teacher) {
    m.loc_hidden = nn::Linear::create(s, "loc.hidden", cfg.stats_dim, cfg.loc_hidden, rng);
    s.create("loc.film.g", cfg.stats_dim, cfg.loc_hidden);
    s.create("loc.film.b", cfg.stats_dim, cfg.loc_hidden);
    m.loc_out = nn::Linear::create(s, "loc.out", cfg.loc_hidden, kLocChannels, rng);
    init_regression_layer(s, m.loc_out, kLocChannels);
  } else {
    m.loc_mlp = nn::Mlp::create(s, "loc.mlp", cfg.stats_dim, {cfg.loc_hidden, kLocChannels * n_cls}, rng, false);
    init_regression_layer(s, m.loc_mlp.layers.back(), kLocChannels);
  }

  m.stats = ad::Matrix::Ones(n_cls, cfg.stats_dim);
  m.anchors = ad::Matrix::Ones(n_cls, 3);
  return m;
}

Checkpoint DetectorModel::to_checkpoint() const {
  Checkpoint ck;
  for (const auto& [name, p] : store) ck.arrays["param/" + name] = p.value;
  ck.arrays["stats"] = stats;
  ck.arrays["anchors"] = anchors;
  ck.meta = "role = " + role_name(role) + "\n" + cfg.serialize();
  return ck;
}

DetectorModel DetectorModel::from_checkpoint(const Checkpoint& ck) {
  const auto eol = ck.meta.find('\n');
  const std::string first = ck.meta.substr(0, eol);
  const std::string prefix = "role = ";
  if (first.rfind(prefix, 0) != 0) throw FormatError("checkpoint meta lacks a role line", 0);
  const Role role = parse_role(first.substr(prefix.size()));
  const PipelineConfig cfg = PipelineConfig::parse(eol == std::string::npos ? "" : ck.meta.substr(eol + 1));
  DetectorModel m = create(role, cfg, 0);
  std::size_t seen = 0;
  for (auto& [name, p] : m.store) {
    const auto it = ck.arrays.find("param/" + name);
    if (it == ck.arrays.end()) throw FormatError("checkpoint lacks parameter '" + name + "'", 0);
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw FormatError("checkpoint parameter '" + name + "' has shape " + ad::shape_str(it->second) +
                            ", expected " + ad::shape_str(p.value),
                        0);
    }
    p.value = it->second;
    ++seen;
  }
  for (const char* key : {"stats", "anchors"}) {
    if (!ck.arrays.count(key)) throw FormatError(std::string("checkpoint lacks '") + key + "'", 0);
  }
  if (ck.arrays.size() != seen + 2) throw FormatError("checkpoint holds unexpected arrays", 0);
  m.stats = ck.arrays.at("stats");
  m.anchors = ck.arrays.at("anchors");
  if (m.stats.rows() != cfg.n_classes() || m.stats.cols() != cfg.stats_dim || m.anchors.rows() != cfg.n_classes() ||
      m.anchors.cols() != 3) {
    throw FormatError("checkpoint statistics or anchors have the wrong shape", 0);
  }
  return m;
}

RepoInit forward_repo_init(ad::Graph& g, DetectorModel& m, const PointCloud& cloud, sampling::QueryCounter* counter) {
  if (cloud.empty()) throw Error("forward_repo_init: empty point cloud");
  const auto xyz = cloud.coordinates();
  const int n = static_cast<int>(xyz.size());
  const int want = m.cfg.n_keypoints;
  RepoInit out;
  if (n >= want) {
    out.keypoint_index = sampling::fps(xyz, want);
  } else {
    // Too few points: take every point, then repeat them in order.
    out.resampled = true;
    out.keypoint_index.resize(static_cast<std::size_t>(want));
    for (int i = 0; i < want; ++i) out.keypoint_index[static_cast<std::size_t>(i)] = i % n;
  }
  std::vector<Vec3> kp(out.keypoint_index.size());
  for (std::size_t i = 0; i < kp.size(); ++i) kp[i] = xyz[static_cast<std::size_t>(out.keypoint_index[i])];
  out.keypoints = sampling::to_matrix(kp);

  ad::Matrix refl(n, 1);
  for (int i = 0; i < n; ++i) refl(i, 0) = cloud.points[static_cast<std::size_t>(i)].r;
  const ad::Matrix cloud_xyz = sampling::to_matrix(xyz);
  const ad::Var feats =
      sampling::aggregate_msg(g, m.store, g.constant(out.keypoints), out.keypoint_index, cloud_xyz,
                              g.constant(std::move(refl)), m.cfg.repo_msg_radii, m.cfg.repo_msg_ks, m.repo_msg, counter);
  const ad::Var proj = ad::relu(m.repo_proj(g, m.store, feats));
  out.repo = repo::voxelize_mean(g, kp, proj, m.cfg.voxel_size);
  out.fg_logits = m.fg_head(g, m.store, out.repo.features);
  out.repo.confidence = ad::sigmoid(out.fg_logits);
  return out;
}

PartialKnowledge forward_partial_knowledge(ad::Graph& g, DetectorModel& m, const repo::FeatureRepository& r,
                                           const std::vector<int>* rows) {
  PartialKnowledge k;
  const auto pts = r.coordinate_points();
  if (rows) {
    for (int row : *rows) {
      if (row < 0 || row >= static_cast<int>(pts.size())) throw ShapeError("partial row override out of range");
    }
    k.rows = *rows;
  } else {
    const ad::Matrix& conf = r.confidence.value();
    std::vector<double> scores(conf.data(), conf.data() + conf.size());
    const int count = std::min(m.cfg.n_partial, static_cast<int>(pts.size()));
    k.rows = sampling::sfps(pts, scores, count, m.cfg.sfps_gamma);
  }
  k.xyz = ad::Matrix(static_cast<Eigen::Index>(k.rows.size()), 3);
  for (std::size_t i = 0; i < k.rows.size(); ++i) k.xyz.row(static_cast<Eigen::Index>(i)) = r.coords.row(k.rows[i]);
  sampling::QueryCounter counter;
  k.features = sampling::aggregate_msg(g, m.store, g.constant(k.xyz), k.rows, r.coords, r.features, m.partial_radii,
                                       m.partial_ks, m.partial_mlps, &counter);
  k.queries = counter.queries;
  k.aux_logits = m.aux_cls(g, m.store, k.features);
  return k;
}

repo::FeatureRepository update_repository(ad::Graph& g, DetectorModel& m, const repo::FeatureRepository& r,
                                          const PartialKnowledge& k) {
  const auto pts = sampling::to_points(k.xyz);
  const auto knowledge = repo::scatter_knowledge(g, pts, k.features, r.grid, r.keys);
  const auto ed = m.encoder_decoder(g, m.store, knowledge);
  const ad::Var aligned = repo::align_rows(ed.features, knowledge.keys, r.keys);
  const ad::Var projected = m.ed_proj(g, m.store, aligned);
  return repo::fuse_repository(g, m.store, r, projected, r.confidence, m.repo_mlp);
}

ad::Var vote_centers(ad::Graph& g, DetectorModel& m, const PartialKnowledge& k) {
  return ad::add(g.constant(k.xyz), m.vote(g, m.store, k.features));
}

ad::Var aggregate_object(ad::Graph& g, DetectorModel& m, const repo::FeatureRepository& fused, ad::Var votes,
                         std::uint64_t* queries) {
  const std::vector<int> ks(m.cfg.obj_radii.size(), m.obj_k());
  sampling::QueryCounter counter;
  const ad::Var feats = sampling::aggregate_msg(g, m.store, votes, {}, fused.coords, fused.features, m.cfg.obj_radii,
                                                ks, m.obj_mlps, &counter);
  if (queries) *queries = counter.queries;
  return ad::relu(m.obj_proj(g, m.store, feats));
}

void teacher_stats_update(ad::Matrix& stats, const ad::Matrix& object_features, std::span<const int> labels,
                          double momentum) {
  if (object_features.rows() != static_cast<Eigen::Index>(labels.size()) || object_features.cols() != stats.cols()) {
    throw ShapeError("teacher_stats_update: features " + ad::shape_str(object_features) + " with " +
                     std::to_string(labels.size()) + " labels vs stats " + ad::shape_str(stats));
  }
  for (Eigen::Index c = 0; c < stats.rows(); ++c) {
    ad::Matrix sum = ad::Matrix::Zero(1, stats.cols());
    int count = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == static_cast<int>(c)) {
        sum += object_features.row(static_cast<Eigen::Index>(i));
        ++count;
      }
    }
    if (count == 0) continue;
    stats.row(c) = momentum * stats.row(c) + (1.0 - momentum) * (sum / count);
  }
}

ad::Var classify_with_stats(ad::Graph& g, ad::ParamStore& store, const nn::Mlp& shared_mlp, ad::Var features,
                            const ad::Matrix& stats) {
  if (features.cols() != stats.cols() || shared_mlp.layers.empty() || shared_mlp.layers.front().in != stats.cols()) {
    throw ShapeError("classify_with_stats: features " + ad::shape_str(features.value()) + " vs statistics " +
                     ad::shape_str(stats));
  }
  std::vector<ad::Var> scores;
  for (Eigen::Index c = 0; c < stats.rows(); ++c) {
    const ad::Var modulated = ad::mul(features, g.constant(ad::Matrix(stats.row(c))));
    scores.push_back(shared_mlp(g, store, modulated));
  }
  return scores.size() == 1 ? scores.front() : ad::concat(std::span<const ad::Var>(scores));
}

ad::Var localize(ad::Graph& g, DetectorModel& m, ad::Var object_features) {
  if (m.role == Role::Student) return m.loc_mlp(g, m.store, object_features);
  const ad::Var hidden = ad::relu(m.loc_hidden(g, m.store, object_features));
  const ad::Var film_g = g.param(m.store.get("loc.film.g"), m.store);
  const ad::Var film_b = g.param(m.store.get("loc.film.b"), m.store);
  std::vector<ad::Var> per_class;
  for (Eigen::Index c = 0; c < m.stats.rows(); ++c) {
    const ad::Var row = g.constant(ad::Matrix(m.stats.row(c)));
    const ad::Var gamma = ad::add_scalar(ad::matmul(row, film_g), 1.0);
    const ad::Var beta = ad::matmul(row, film_b);
    per_class.push_back(m.loc_out(g, m.store, ad::add(ad::mul(hidden, gamma), beta)));
  }
  return per_class.size() == 1 ? per_class.front() : ad::concat(std::span<const ad::Var>(per_class));
}

namespace {

// Residual log-dims are clamped before exp so a wild prediction cannot overflow.
constexpr double kLogDimLimit = 5.0;

}  // namespace

std::array<double, kLocChannels> encode_box(const Box3D& b, Vec3 center, const std::array<double, 3>& anchor) {
  return {b.cx - center.x,
          b.cy - center.y,
          b.cz - center.z,
          std::log(b.w / anchor[0]),
          std::log(b.l / anchor[1]),
          std::log(b.h / anchor[2]),
          std::sin(b.yaw),
          std::cos(b.yaw)};
}

Box3D decode_box(const std::array<double, kLocChannels>& r, Vec3 center, const std::array<double, 3>& anchor) {
  auto dim = [](double v) { return std::exp(std::clamp(v, -kLogDimLimit, kLogDimLimit)); };
  Box3D b;
  b.cx = center.x + r[0];
  b.cy = center.y + r[1];
  b.cz = center.z + r[2];
  b.w = anchor[0] * dim(r[3]);
  b.l = anchor[1] * dim(r[4]);
  b.h = anchor[2] * dim(r[5]);
  b.yaw = normalize_yaw(std::atan2(r[6], r[7]));
  return b;
}

ad::Var decode_boxes(ad::Var residuals, ad::Var centers, std::span<const int> cls, const ad::Matrix& anchors) {
  ad::Graph& g = *residuals.graph;
  const auto n = static_cast<Eigen::Index>(cls.size());
  if (residuals.rows() != n || centers.rows() != n || centers.cols() != 3) {
    throw ShapeError("decode_boxes: residuals " + ad::shape_str(residuals.value()) + ", centers " +
                     ad::shape_str(centers.value()) + ", " + std::to_string(n) + " classes");
  }
  const ad::Var block = ad::select_col_block(residuals, cls, kLocChannels);
  ad::Matrix anchor_rows(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) anchor_rows.row(i) = anchors.row(cls[static_cast<std::size_t>(i)]);
  const ad::Var center = ad::add(centers, ad::slice_cols(block, 0, 3));
  const ad::Var dims =
      ad::mul(ad::exp(ad::clamp(ad::slice_cols(block, 3, 3), -kLogDimLimit, kLogDimLimit)), g.constant(anchor_rows));
  const ad::Var yaw = ad::atan2(ad::slice_cols(block, 6, 1), ad::slice_cols(block, 7, 1));
  return ad::concat({center, dims, yaw});
}

ForwardOutput forward(ad::Graph& g, DetectorModel& m, const PointCloud& cloud, const std::vector<int>* partial_rows) {
  ForwardOutput out;
  out.init = forward_repo_init(g, m, cloud);
  out.partial = forward_partial_knowledge(g, m, out.init.repo, partial_rows);
  out.partial_queries = out.partial.queries;
  out.fused = update_repository(g, m, out.init.repo, out.partial);
  out.votes = vote_centers(g, m, out.partial);
  out.object_features = aggregate_object(g, m, out.fused, out.votes, &out.object_queries);
  out.cls_logits = classify_with_stats(g, m.store, m.cls_mlp, out.object_features, m.stats);
  out.residuals = localize(g, m, out.object_features);
  return out;
}

SceneTargets make_targets(const LabeledScene& scene, const ForwardOutput& out) {
  SceneTargets t;
  const auto partial_pts = sampling::to_points(out.partial.xyz);
  t.partial_box = assign_points_to_boxes(partial_pts, scene.boxes);
  t.partial_class.resize(t.partial_box.size());
  for (std::size_t i = 0; i < t.partial_box.size(); ++i) {
    const int b = t.partial_box[i];
    t.partial_class[i] = b < 0 ? -1 : scene.classes[static_cast<std::size_t>(b)];
    if (b >= 0) {
      t.fg_rows.push_back(static_cast<int>(i));
      t.fg_class.push_back(t.partial_class[i]);
      t.fg_boxes.push_back(scene.boxes[static_cast<std::size_t>(b)]);
    }
  }
  t.fg_centers = ad::Matrix(static_cast<Eigen::Index>(t.fg_boxes.size()), 3);
  for (std::size_t i = 0; i < t.fg_boxes.size(); ++i) {
    const auto& b = t.fg_boxes[i];
    t.fg_centers.row(static_cast<Eigen::Index>(i)) << b.cx, b.cy, b.cz;
  }

  // A voxel is foreground when most of its keypoints lie inside a box.
  const auto kp = sampling::to_points(out.init.keypoints);
  const auto kp_box = assign_points_to_boxes(kp, scene.boxes);
  const auto& repo = out.init.repo;
  std::vector<int> inside(repo.size(), 0);
  for (std::size_t i = 0; i < kp.size(); ++i) {
    if (kp_box[i] >= 0) inside[static_cast<std::size_t>(repo.point_voxel[i])] += 1;
  }
  t.voxel_fg.resize(repo.size());
  for (std::size_t v = 0; v < repo.size(); ++v) t.voxel_fg[v] = 2 * inside[v] > repo.counts[v] ? 1 : 0;
  return t;
}

namespace {

ad::Var fg_boxes_of(ad::Graph& g, const DetectorModel& m, const ForwardOutput& out, const SceneTargets& t) {
  (void)g;
  return decode_boxes(ad::gather_rows(out.residuals, t.fg_rows), ad::gather_rows(out.votes, t.fg_rows), t.fg_class,
                      m.anchors);
}

}  // namespace

loss::LossTerms hard_terms(ad::Graph& g, const DetectorModel& m, const ForwardOutput& out, const SceneTargets& t) {
  loss::LossTerms terms;
  terms.n_foreground = static_cast<int>(t.fg_rows.size());
  terms.hard_cls_det = loss::cross_entropy_bg(out.cls_logits, t.partial_class);
  terms.hard_cls_aux = loss::cross_entropy_bg(out.partial.aux_logits, t.partial_class);
  terms.foreground = loss::binary_cross_entropy(out.init.repo.confidence, t.voxel_fg);
  if (t.fg_rows.empty()) return terms;
  const ad::Var pred = fg_boxes_of(g, m, out, t);
  const auto loc = loss::loc_loss(g, pred, t.fg_boxes, loss::parse_iou_metric(m.cfg.hard_loc_iou), m.cfg.lambda_ind,
                                  m.cfg.lambda_corner);
  terms.hard_loc_iou = loc.iou;
  terms.hard_loc_ind = loc.ind;
  terms.hard_loc_corner = loc.corner;
  terms.center_vote = loss::vote_loss(ad::gather_rows(out.votes, t.fg_rows), t.fg_centers);
  return terms;
}

SoftTargets soft_targets_from(const ForwardOutput& teacher_out, const DetectorModel& teacher, const SceneTargets& t) {
  SoftTargets s;
  s.det_logits = teacher_out.cls_logits.value();
  s.aux_logits = teacher_out.partial.aux_logits.value();
  const ad::Matrix& res = teacher_out.residuals.value();
  const ad::Matrix& votes = teacher_out.votes.value();
  s.fg_boxes = ad::Matrix(static_cast<Eigen::Index>(t.fg_rows.size()), 7);
  for (std::size_t i = 0; i < t.fg_rows.size(); ++i) {
    const int r = t.fg_rows[i];
    const int c = t.fg_class[i];
    std::array<double, kLocChannels> block{};
    for (int j = 0; j < kLocChannels; ++j) block[static_cast<std::size_t>(j)] = res(r, c * kLocChannels + j);
    const Box3D b = decode_box(block, {votes(r, 0), votes(r, 1), votes(r, 2)},
                               {teacher.anchors(c, 0), teacher.anchors(c, 1), teacher.anchors(c, 2)});
    s.fg_boxes.row(static_cast<Eigen::Index>(i)) << b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw;
  }
  return s;
}

void add_soft_terms(ad::Graph& g, const DetectorModel& student, const ForwardOutput& out, const SceneTargets& t,
                    const SoftTargets& soft, loss::LossTerms& terms) {
  const auto& cfg = student.cfg;
  auto normalized = [&](const ad::Matrix& logits) {
    return ad::Matrix((1.0 + (-logits.array() / cfg.temperature).exp()).inverse());
  };
  terms.soft_cls_det = loss::soft_focal(normalized(soft.det_logits), loss::temp_sigmoid(out.cls_logits, cfg.temperature),
                                        t.partial_class, cfg.alpha_t, cfg.gamma);
  terms.soft_cls_aux = loss::soft_focal(normalized(soft.aux_logits),
                                        loss::temp_sigmoid(out.partial.aux_logits, cfg.temperature), t.partial_class,
                                        cfg.alpha_t, cfg.gamma);
  if (t.fg_rows.empty()) return;
  std::vector<Box3D> targets;
  for (Eigen::Index i = 0; i < soft.fg_boxes.rows(); ++i) targets.push_back(boxes::box_from_row(soft.fg_boxes, i));
  const auto loc = loss::loc_loss(g, fg_boxes_of(g, student, out, t), targets,
                                  loss::parse_iou_metric(cfg.soft_loc_iou), cfg.lambda_ind, cfg.lambda_corner);
  terms.soft_loc_iou = loc.iou;
  terms.soft_loc_ind = loc.ind;
  terms.soft_loc_corner = loc.corner;
}

std::vector<Detection> predict(DetectorModel& m, const PointCloud& cloud, double score_threshold, double nms_iou) {
  ad::Graph g;
  const auto out = forward(g, m, cloud);
  const ad::Matrix& logits = out.cls_logits.value();
  const ad::Matrix& res = out.residuals.value();
  const ad::Matrix& votes = out.votes.value();
  const int n_cls = m.n_classes();
  std::vector<Detection> cand;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    // softmax over [0 | logits]
    double mx = 0;
    for (int c = 0; c < n_cls; ++c) mx = std::max(mx, logits(r, c));
    double denom = std::exp(-mx);
    for (int c = 0; c < n_cls; ++c) denom += std::exp(logits(r, c) - mx);
    Detection d;
    d.partial_index = static_cast<int>(r);
    d.class_scores.resize(static_cast<std::size_t>(n_cls));
    for (int c = 0; c < n_cls; ++c) {
      d.class_scores[static_cast<std::size_t>(c)] = std::exp(logits(r, c) - mx) / denom;
      if (d.class_scores[static_cast<std::size_t>(c)] > d.score) {
        d.score = d.class_scores[static_cast<std::size_t>(c)];
        d.cls = c;
      }
    }
    if (d.score < score_threshold) continue;
    std::array<double, kLocChannels> block{};
    for (int j = 0; j < kLocChannels; ++j) block[static_cast<std::size_t>(j)] = res(r, d.cls * kLocChannels + j);
    d.box = decode_box(block, {votes(r, 0), votes(r, 1), votes(r, 2)},
                       {m.anchors(d.cls, 0), m.anchors(d.cls, 1), m.anchors(d.cls, 2)});
    cand.push_back(std::move(d));
  }
  std::vector<boxes::ScoredBox> scored;
  scored.reserve(cand.size());
  for (const auto& d : cand) scored.push_back({0, d.cls, d.score, d.box});
  std::vector<Detection> kept;
  for (int i : boxes::nms_bev(scored, nms_iou)) kept.push_back(cand[static_cast<std::size_t>(i)]);
  return kept;
}

ad::Matrix class_mean_anchors(std::span<const LabeledScene> scenes, int n_classes) {
  ad::Matrix sum = ad::Matrix::Zero(n_classes, 3);
  std::vector<int> count(static_cast<std::size_t>(n_classes), 0);
  ad::Matrix all = ad::Matrix::Zero(1, 3);
  int total = 0;
  for (const auto& s : scenes) {
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      const int c = s.classes[i];
      if (c < 0 || c >= n_classes) throw Error("class id out of range in labeled scene");
      ad::Matrix d(1, 3);
      d << s.boxes[i].w, s.boxes[i].l, s.boxes[i].h;
      sum.row(c) += d;
      all += d;
      count[static_cast<std::size_t>(c)] += 1;
      ++total;
    }
  }
  ad::Matrix out(n_classes, 3);
  for (int c = 0; c < n_classes; ++c) {
    if (count[static_cast<std::size_t>(c)] > 0) {
      out.row(c) = sum.row(c) / count[static_cast<std::size_t>(c)];
    } else if (total > 0) {
      out.row(c) = all / total;
    } else {
      out.row(c).setOnes();
    }
  }
  return out;
}

void check_compatible(const PipelineConfig& teacher, const PipelineConfig& student) {
  auto fail = [](const char* key) {
    throw ConfigError(std::string("teacher/student config mismatch on '") + key + "'");
  };
  if (teacher.n_keypoints != student.n_keypoints) fail("n_keypoints");
  if (teacher.voxel_size != student.voxel_size) fail("voxel_size");
  if (teacher.classes != student.classes) fail("classes");
  if (teacher.stats_dim != student.stats_dim) fail("stats_dim");
  if (teacher.n_partial != student.n_partial) fail("n_partial");
}

}  // namespace pcd::det
