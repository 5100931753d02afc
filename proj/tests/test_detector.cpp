#include <doctest.h>

#include <cmath>

#include "pcd/data.hpp"
#include "pcd/detector.hpp"
#include "pcd/gradcheck.hpp"

using namespace pcd;

namespace {

data::SceneGenConfig small_scenes() {
  data::SceneGenConfig c;
  c.extent = {14, 14, 3};
  c.objects = {2, 3};
  c.surface_density = 8;
  c.clutter_density = 0.3;
  c.noise_points = 10;
  return c;
}

LabeledScene scene_for(std::uint64_t seed) { return data::generate_scene(small_scenes(), seed); }

bool same(const ad::Matrix& a, const ad::Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace

TEST_CASE("box residual encoding round-trips") {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Box3D b{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 2), rng.uniform(0.5, 3),
                  rng.uniform(0.5, 5), rng.uniform(0.5, 2), normalize_yaw(rng.uniform(-4, 4))};
    const Vec3 c{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 2)};
    const std::array<double, 3> anchor{1.8, 4.0, 1.5};
    const Box3D d = det::decode_box(det::encode_box(b, c, anchor), c, anchor);
    CHECK(d.cx == doctest::Approx(b.cx).epsilon(1e-12));
    CHECK(d.w == doctest::Approx(b.w).epsilon(1e-12));
    CHECK(d.l == doctest::Approx(b.l).epsilon(1e-12));
    CHECK(d.h == doctest::Approx(b.h).epsilon(1e-12));
    CHECK(std::abs(normalize_yaw(d.yaw - b.yaw)) < 1e-12);
  }
}

TEST_CASE("decode clamps the log-dims") {
  std::array<double, det::kLocChannels> r{0, 0, 0, 50, -50, 0, 0, 1};
  const Box3D b = det::decode_box(r, {0, 0, 0}, {1, 1, 1});
  CHECK(b.w == doctest::Approx(std::exp(5.0)));
  CHECK(b.l == doctest::Approx(std::exp(-5.0)));
  CHECK(b.yaw == doctest::Approx(0.0));
}

TEST_CASE("graph decode agrees with scalar decode and picks the class block") {
  Rng rng(5);
  const int n = 6, n_cls = 2;
  ad::Matrix res(n, det::kLocChannels * n_cls), ctr(n, 3), anchors(n_cls, 3);
  for (Eigen::Index i = 0; i < res.size(); ++i) res.data()[i] = rng.uniform(-1, 1);
  for (Eigen::Index i = 0; i < ctr.size(); ++i) ctr.data()[i] = rng.uniform(-3, 3);
  anchors << 1.8, 4.0, 1.5, 0.6, 1.8, 1.7;
  const std::vector<int> cls{0, 1, 1, 0, 1, 0};
  ad::Graph g;
  const ad::Matrix out = det::decode_boxes(g.constant(res), g.constant(ctr), cls, anchors).value();
  for (int i = 0; i < n; ++i) {
    std::array<double, det::kLocChannels> block{};
    for (int j = 0; j < det::kLocChannels; ++j) block[j] = res(i, cls[i] * det::kLocChannels + j);
    const Box3D b = det::decode_box(block, {ctr(i, 0), ctr(i, 1), ctr(i, 2)},
                                    {anchors(cls[i], 0), anchors(cls[i], 1), anchors(cls[i], 2)});
    CHECK(out(i, 0) == doctest::Approx(b.cx));
    CHECK(out(i, 4) == doctest::Approx(b.l));
    CHECK(std::abs(normalize_yaw(out(i, 6) - b.yaw)) < 1e-12);
  }
}

TEST_CASE("teacher and student differ where intended") {
  const PipelineConfig cfg = gradcheck::toy_config();
  auto t = det::DetectorModel::create(det::Role::Teacher, cfg, 1);
  auto s = det::DetectorModel::create(det::Role::Student, cfg, 1);
  CHECK(s.parameter_count() < t.parameter_count());
  CHECK(t.partial_mlps.size() == cfg.teacher_partial_radii.size());
  CHECK(s.partial_mlps.size() == 1);
  CHECK(t.store.contains("loc.film.g"));
  CHECK_FALSE(s.store.contains("loc.film.g"));
  CHECK(t.obj_k() == cfg.obj_k_teacher);
  CHECK(s.obj_k() == cfg.obj_k_student);
  CHECK(det::parse_role("teacher") == det::Role::Teacher);
  CHECK_THROWS_AS(det::parse_role("tutor"), FormatError);
}

TEST_CASE("forward shapes and ball-query counts") {
  const PipelineConfig cfg = gradcheck::toy_config();
  const LabeledScene scene = scene_for(11);
  auto t = det::DetectorModel::create(det::Role::Teacher, cfg, 2);
  auto s = det::DetectorModel::create(det::Role::Student, cfg, 3);
  ad::Graph gt, gs;
  const auto ot = det::forward(gt, t, scene.cloud);
  const auto os = det::forward(gs, s, scene.cloud);
  const auto p = static_cast<Eigen::Index>(os.partial.rows.size());
  CHECK(p == std::min<Eigen::Index>(cfg.n_partial, os.init.repo.size()));
  CHECK(os.cls_logits.rows() == p);
  CHECK(os.cls_logits.cols() == cfg.n_classes());
  CHECK(os.residuals.cols() == det::kLocChannels * cfg.n_classes());
  CHECK(os.votes.cols() == 3);
  CHECK(os.object_features.cols() == cfg.stats_dim);
  CHECK(os.partial_queries == static_cast<std::uint64_t>(p));
  CHECK(ot.partial_queries == static_cast<std::uint64_t>(p) * cfg.teacher_partial_radii.size());
  for (Eigen::Index i = 0; i < os.init.repo.confidence.value().size(); ++i) {
    const double c = os.init.repo.confidence.value().data()[i];
    CHECK((c > 0 && c < 1));
  }
}

TEST_CASE("a cloud smaller than n_keypoints is resampled in order") {
  PipelineConfig cfg = gradcheck::toy_config();
  LabeledScene scene = scene_for(4);
  scene.cloud.points.resize(15);
  auto s = det::DetectorModel::create(det::Role::Student, cfg, 3);
  ad::Graph g;
  const auto init = det::forward_repo_init(g, s, scene.cloud);
  CHECK(init.resampled);
  REQUIRE(init.keypoint_index.size() == static_cast<std::size_t>(cfg.n_keypoints));
  for (int i = 0; i < cfg.n_keypoints; ++i) CHECK(init.keypoint_index[i] == i % 15);
  PointCloud empty;
  CHECK_THROWS_AS(det::forward_repo_init(g, s, empty), Error);
}

TEST_CASE("class statistics EMA") {
  ad::Matrix stats = ad::Matrix::Ones(3, 2);
  ad::Matrix f(4, 2);
  f << 1, 2, 3, 4, 10, 20, 5, 5;
  const std::vector<int> labels{0, 0, 1, -1};
  det::teacher_stats_update(stats, f, labels, 0.9);
  CHECK(stats(0, 0) == doctest::Approx(0.9 + 0.1 * 2));
  CHECK(stats(0, 1) == doctest::Approx(0.9 + 0.1 * 3));
  CHECK(stats(1, 0) == doctest::Approx(0.9 + 0.1 * 10));
  CHECK(stats(2, 0) == 1.0);  // absent class keeps its row
  CHECK(stats(2, 1) == 1.0);
  const std::vector<int> short_labels{0};
  CHECK_THROWS_AS(det::teacher_stats_update(stats, f, short_labels, 0.9), ShapeError);
}

TEST_CASE("classification modulates the shared MLP per class") {
  ad::ParamStore store;
  Rng rng(9);
  const auto mlp = nn::Mlp::create(store, "cls", 3, {4, 1}, rng, false);
  ad::Matrix f(2, 3), stats(2, 3);
  f << 0.5, -1, 2, 1, 1, 1;
  stats << 1, 2, 3, -1, 0.5, 0;
  ad::Graph g;
  const ad::Matrix out = det::classify_with_stats(g, store, mlp, g.constant(f), stats).value();
  REQUIRE(out.rows() == 2);
  REQUIRE(out.cols() == 2);
  for (int c = 0; c < 2; ++c) {
    ad::Graph h;
    const ad::Matrix mod = (f.array().rowwise() * stats.row(c).array()).matrix();
    const ad::Matrix ref = mlp(h, store, h.constant(mod)).value();
    for (int r = 0; r < 2; ++r) CHECK(out(r, c) == doctest::Approx(ref(r, 0)).epsilon(1e-14));
  }
  ad::Matrix bad(2, 4);
  bad.setOnes();
  CHECK_THROWS_AS(det::classify_with_stats(g, store, mlp, g.constant(f), bad), ShapeError);
}

TEST_CASE("targets follow point-in-box membership") {
  const PipelineConfig cfg = gradcheck::toy_config();
  const LabeledScene scene = scene_for(21);
  auto s = det::DetectorModel::create(det::Role::Student, cfg, 3);
  ad::Graph g;
  const auto out = det::forward(g, s, scene.cloud);
  const auto t = det::make_targets(scene, out);
  REQUIRE(t.partial_class.size() == out.partial.rows.size());
  std::size_t fg = 0;
  for (std::size_t i = 0; i < t.partial_box.size(); ++i) {
    const Vec3 p{out.partial.xyz(i, 0), out.partial.xyz(i, 1), out.partial.xyz(i, 2)};
    const int b = t.partial_box[i];
    if (b < 0) {
      CHECK(t.partial_class[i] == -1);
      for (const auto& box : scene.boxes) CHECK_FALSE(point_in_box(p, box));
    } else {
      CHECK(point_in_box(p, scene.boxes[b]));
      CHECK(t.partial_class[i] == scene.classes[b]);
      ++fg;
    }
  }
  CHECK(t.fg_rows.size() == fg);
  CHECK(t.fg_centers.rows() == static_cast<Eigen::Index>(fg));
  CHECK(t.voxel_fg.size() == out.init.repo.size());

  const auto terms = det::hard_terms(g, s, out, t);
  CHECK(terms.n_foreground == static_cast<int>(fg));
  CHECK(std::isfinite(terms.hard_cls_det.scalar()));
  CHECK(std::isfinite(terms.foreground.scalar()));
}

TEST_CASE("checkpoint round-trip preserves predictions") {
  const PipelineConfig cfg = gradcheck::toy_config();
  const LabeledScene scene = scene_for(31);
  auto t = det::DetectorModel::create(det::Role::Teacher, cfg, 5);
  t.stats.setConstant(0.7);
  t.anchors = det::class_mean_anchors(std::span<const LabeledScene>(&scene, 1), cfg.n_classes());
  const Checkpoint ck = t.to_checkpoint();
  auto back = det::DetectorModel::from_checkpoint(Checkpoint::decode(ck.encode()));
  CHECK(back.role == det::Role::Teacher);
  CHECK(back.cfg == cfg);
  CHECK(same(back.stats, t.stats));
  CHECK(same(back.anchors, t.anchors));
  for (const auto& [name, p] : t.store) CHECK(same(back.store.get(name).value, p.value));
  const auto a = det::predict(t, scene.cloud, 0.0, 0.5);
  const auto b = det::predict(back, scene.cloud, 0.0, 0.5);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].score == b[i].score);
    CHECK(a[i].box.cx == b[i].box.cx);
  }

  Checkpoint missing = ck;
  missing.arrays.erase(missing.arrays.begin());
  CHECK_THROWS_AS(det::DetectorModel::from_checkpoint(missing), FormatError);
  Checkpoint reshaped = ck;
  reshaped.arrays["param/cls.0.w"] = ad::Matrix::Zero(1, 1);
  CHECK_THROWS_AS(det::DetectorModel::from_checkpoint(reshaped), FormatError);
  Checkpoint extra = ck;
  extra.arrays["junk"] = ad::Matrix::Zero(1, 1);
  CHECK_THROWS_AS(det::DetectorModel::from_checkpoint(extra), FormatError);
  Checkpoint no_role = ck;
  no_role.meta = "seed = 1\n";
  CHECK_THROWS_AS(det::DetectorModel::from_checkpoint(no_role), FormatError);
}

TEST_CASE("predict scores are a softmax with background and survive NMS") {
  const PipelineConfig cfg = gradcheck::toy_config();
  const LabeledScene scene = scene_for(41);
  auto s = det::DetectorModel::create(det::Role::Student, cfg, 6);
  const auto dets = det::predict(s, scene.cloud, 0.0, 0.3);
  REQUIRE_FALSE(dets.empty());
  for (const auto& d : dets) {
    double sum = 0;
    for (double v : d.class_scores) {
      CHECK(v > 0);
      sum += v;
    }
    CHECK(sum < 1.0);
    CHECK(d.score == doctest::Approx(d.class_scores[d.cls]));
  }
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (dets[i].cls == dets[j].cls) CHECK(boxes::bev_iou(dets[i].box, dets[j].box) <= 0.3 + 1e-12);
    }
  }
  CHECK(det::predict(s, scene.cloud, 1.01, 0.3).empty());
}

TEST_CASE("class mean anchors") {
  LabeledScene a, b;
  a.boxes = {{0, 0, 0, 2, 4, 1.5, 0}, {5, 5, 0, 0.6, 1.8, 1.7, 0}};
  a.classes = {0, 1};
  b.boxes = {{0, 0, 0, 1.8, 4.2, 1.5, 0}};
  b.classes = {0};
  const std::vector<LabeledScene> set{a, b};
  const ad::Matrix m = det::class_mean_anchors(set, 3);
  CHECK(m(0, 0) == doctest::Approx(1.9));
  CHECK(m(0, 1) == doctest::Approx(4.1));
  CHECK(m(1, 2) == doctest::Approx(1.7));
  CHECK(m(2, 0) == doctest::Approx((2 + 0.6 + 1.8) / 3));  // overall mean
  const ad::Matrix none = det::class_mean_anchors({}, 2);
  CHECK(none(1, 1) == 1.0);
}

TEST_CASE("teacher/student compatibility") {
  const PipelineConfig cfg = gradcheck::toy_config();
  CHECK_NOTHROW(det::check_compatible(cfg, cfg));
  PipelineConfig other = cfg;
  other.n_keypoints += 1;
  CHECK_THROWS_AS(det::check_compatible(cfg, other), ConfigError);
  other = cfg;
  other.voxel_size = {1, 1, 1};
  CHECK_THROWS_AS(det::check_compatible(cfg, other), ConfigError);
  other = cfg;
  other.partial_k += 2;  // student-only width: allowed
  CHECK_NOTHROW(det::check_compatible(cfg, other));
}
