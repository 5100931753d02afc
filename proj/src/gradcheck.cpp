#include "pcd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "pcd/boxes.hpp"
#include "pcd/data.hpp"
#include "pcd/detector.hpp"
#include "pcd/losses.hpp"
#include "pcd/nn.hpp"
#include "pcd/repository.hpp"
#include "pcd/sampling.hpp"

namespace pcd::gradcheck {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

ad::Var corrupt_gradient(ad::Var v, double factor) {
  return v.graph->record("corrupt", v.value(), {v.id}, [factor](ad::Graph& g, int self) {
    g.accumulate(g.parents(self)[0], g.node_grad(self) * factor);
  });
}

namespace {

struct Probe {
  double value;
  std::uint64_t signature;
};

void record(CheckResult& r, const std::string& where, double analytic, const Probe& base, const Probe& plus,
            const Probe& minus, double h) {
  if (plus.signature != base.signature || minus.signature != base.signature) {
    ++r.skipped;
    return;
  }
  const double numeric = (plus.value - minus.value) / (2 * h);
  const double e = relative_error(analytic, numeric);
  if (e >= r.max_rel_error) {
    r.max_rel_error = e;
    r.worst = where;
    r.worst_analytic = analytic;
    r.worst_numeric = numeric;
  }
  ++r.entries;
}

void finish(CheckResult& r, const Options& opt) {
  r.passed = r.entries > 0 && r.max_rel_error < opt.tolerance && r.skipped * 5 <= r.entries + r.skipped;
}

}  // namespace

CheckResult check_inputs(const std::string& name, const Builder& f, const std::vector<ad::Matrix>& inputs,
                         const Options& opt) {
  auto evaluate = [&](const std::vector<ad::Matrix>& values, std::vector<ad::Matrix>* grads) {
    ad::Graph g;
    std::vector<ad::Var> leaves;
    for (const auto& v : values) leaves.push_back(g.leaf(v));
    ad::Var out = f(g, leaves);
    if (grads) {
      if (opt.fault == name) out = corrupt_gradient(out, 1.1);
      g.backward(out);
      for (const auto& l : leaves) grads->push_back(g.grad(l));
    }
    return Probe{out.scalar(), g.branch_signature()};
  };
  std::vector<ad::Matrix> analytic;
  const Probe base = evaluate(inputs, &analytic);
  CheckResult r;
  r.name = name;
  std::vector<ad::Matrix> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index j = 0; j < inputs[i].size(); ++j) {
      const double x = inputs[i].data()[j];
      probe[i].data()[j] = x + opt.h;
      const Probe fp = evaluate(probe, nullptr);
      probe[i].data()[j] = x - opt.h;
      const Probe fm = evaluate(probe, nullptr);
      probe[i].data()[j] = x;
      record(r, "input " + std::to_string(i) + "[" + std::to_string(j) + "]", analytic[i].data()[j], base, fp, fm,
             opt.h);
    }
  }
  finish(r, opt);
  return r;
}

CheckResult check_parameters(const std::string& name, ad::ParamStore& store,
                             const std::function<ad::Var(ad::Graph&)>& loss, int per_tensor, const Options& opt) {
  store.zero_grad();
  Probe base{};
  {
    ad::Graph g;
    ad::Var out = loss(g);
    base = {out.scalar(), g.branch_signature()};
    if (opt.fault == name) out = corrupt_gradient(out, 1.1);
    g.backward(out);
  }
  auto value = [&]() {
    ad::Graph g;
    const double v = loss(g).scalar();
    return Probe{v, g.branch_signature()};
  };
  CheckResult r;
  r.name = name;
  Rng rng(opt.seed);
  for (auto& [pname, p] : store) {
    const auto n = p.value.size();
    const int picks = static_cast<int>(std::min<Eigen::Index>(n, per_tensor));
    for (int k = 0; k < picks; ++k) {
      const auto j = picks == n ? static_cast<Eigen::Index>(k)
                                : static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
      const double x = p.value.data()[j];
      p.value.data()[j] = x + opt.h;
      const Probe fp = value();
      p.value.data()[j] = x - opt.h;
      const Probe fm = value();
      p.value.data()[j] = x;
      record(r, pname + "[" + std::to_string(j) + "]", p.grad.data()[j], base, fp, fm, opt.h);
    }
  }
  finish(r, opt);
  return r;
}

PipelineConfig toy_config() {
  PipelineConfig c;
  c.n_keypoints = 40;
  c.repo_msg_radii = {0.6, 1.2};
  c.repo_msg_ks = {4, 6};
  c.repo_msg_channels = {{4, 4}, {4, 6}};
  c.repo_init_dim = 6;
  c.voxel_size = {0.5, 0.5, 0.5};
  c.fg_hidden = 4;
  c.n_partial = 10;
  c.partial_radius = 1.6;
  c.partial_k = 6;
  c.partial_mlp = {8, 8};
  c.teacher_partial_radii = {0.8, 1.6};
  c.teacher_partial_ks = {4, 6};
  c.teacher_partial_mlps = {{6, 8}, {8, 8}};
  c.student_ed_channels = {4, 4, 6, 4, 4};
  c.teacher_ed_channels = {6, 6, 8, 6, 6};
  c.repo_feature_dim = 6;
  c.obj_radii = {1.0, 2.0};
  c.obj_k_student = 4;
  c.obj_k_teacher = 8;
  c.obj_mlps = {{6, 6}, {6, 6}};
  c.stats_dim = 8;
  c.cls_hidden = 6;
  c.loc_hidden = 6;
  return c;
}

namespace {

ad::Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  ad::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

// Values bounded away from zero so kinks at 0 stay out of the h-neighborhood.
ad::Matrix away_from_zero(Rng& rng, Eigen::Index r, Eigen::Index c) {
  ad::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 1.0);
  return m;
}

// Projects a non-scalar output onto a fixed random direction.
ad::Var project(ad::Graph& g, ad::Var v, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(v, g.constant(random_matrix(rng, v.rows(), v.cols()))));
}

struct Case {
  std::string name;
  Builder f;
  std::vector<ad::Matrix> inputs;
};

std::vector<Case> primitive_cases(Rng& rng) {
  std::vector<Case> cs;
  auto unary = [&](const std::string& name, std::function<ad::Var(ad::Var)> op, ad::Matrix x) {
    cs.push_back({name, [op](ad::Graph& g, std::span<const ad::Var> in) { return project(g, op(in[0]), 1); },
                  {std::move(x)}});
  };
  auto binary = [&](const std::string& name, std::function<ad::Var(ad::Var, ad::Var)> op, ad::Matrix a,
                    ad::Matrix b) {
    cs.push_back({name, [op](ad::Graph& g, std::span<const ad::Var> in) { return project(g, op(in[0], in[1]), 2); },
                  {std::move(a), std::move(b)}});
  };
  binary("add", ad::add, random_matrix(rng, 3, 4), random_matrix(rng, 3, 4));
  binary("add_row_broadcast", ad::add, random_matrix(rng, 3, 4), random_matrix(rng, 1, 4));
  binary("sub_col_broadcast", ad::sub, random_matrix(rng, 3, 4), random_matrix(rng, 3, 1));
  binary("mul", ad::mul, random_matrix(rng, 3, 4), random_matrix(rng, 3, 4));
  binary("mul_scalar_broadcast", ad::mul, random_matrix(rng, 3, 4), random_matrix(rng, 1, 1));
  binary("matmul", ad::matmul, random_matrix(rng, 3, 5), random_matrix(rng, 5, 2));
  binary("atan2", ad::atan2, away_from_zero(rng, 3, 2), away_from_zero(rng, 3, 2));
  unary("scale", [](ad::Var x) { return ad::scale(x, -1.7); }, random_matrix(rng, 2, 3));
  unary("add_scalar", [](ad::Var x) { return ad::add_scalar(x, 0.3); }, random_matrix(rng, 2, 3));
  unary("neg", ad::neg, random_matrix(rng, 2, 3));
  unary("relu", ad::relu, away_from_zero(rng, 3, 3));
  unary("sigmoid", ad::sigmoid, random_matrix(rng, 3, 3, -3, 3));
  unary("exp", ad::exp, random_matrix(rng, 3, 3));
  unary("log", ad::log, random_matrix(rng, 3, 3, 0.2, 2.0));
  unary("sin", ad::sin, random_matrix(rng, 3, 3, -3, 3));
  unary("cos", ad::cos, random_matrix(rng, 3, 3, -3, 3));
  unary("square", ad::square, random_matrix(rng, 3, 3));
  unary("pow_int", [](ad::Var x) { return ad::pow_int(x, 3); }, random_matrix(rng, 3, 3));
  unary("clamp", [](ad::Var x) { return ad::clamp(x, -0.5, 0.5); }, away_from_zero(rng, 3, 3) * 0.9);
  {
    // smooth-L1 in both regimes, away from |x| = beta
    ad::Matrix x(2, 3);
    x << 0.3, -0.6, 1.7, -2.2, 0.05, -1.3;
    unary("smooth_l1", [](ad::Var v) { return ad::smooth_l1(v, 1.0); }, x);
  }
  unary("max_over_set", [](ad::Var x) { return ad::max_over_set(x, 3); }, random_matrix(rng, 6, 4));
  unary("mean", ad::mean, random_matrix(rng, 3, 4));
  unary("sum", ad::sum, random_matrix(rng, 3, 4));
  unary("sum_rows", ad::sum_rows, random_matrix(rng, 3, 4));
  binary("concat", [](ad::Var a, ad::Var b) { return ad::concat({a, b}); }, random_matrix(rng, 3, 2),
         random_matrix(rng, 3, 3));
  unary("slice_cols", [](ad::Var x) { return ad::slice_cols(x, 1, 2); }, random_matrix(rng, 3, 4));
  unary("gather_rows", [](ad::Var x) {
    const std::vector<int> idx{2, 0, -1, 2};
    return ad::gather_rows(x, idx);
  }, random_matrix(rng, 3, 4));
  unary("segment_mean", [](ad::Var x) {
    const std::vector<int> seg{1, 0, 1, 3, 1};
    return ad::segment_mean(x, seg, 4);
  }, random_matrix(rng, 5, 2));
  unary("select_col_block", [](ad::Var x) {
    const std::vector<int> blocks{1, 0, 2};
    return ad::select_col_block(x, blocks, 2);
  }, random_matrix(rng, 3, 6));
  unary("log_softmax", ad::log_softmax, random_matrix(rng, 3, 4, -2, 2));
  unary("pick", [](ad::Var x) {
    const std::vector<int> col{3, 0, 1};
    return ad::pick(x, col);
  }, random_matrix(rng, 3, 4));
  {
    std::vector<repo::VoxelKey> keys{{0, 0, 0}, {0, 0, 1}, {1, 0, 0}, {1, 1, 1}, {2, 1, 1}, {3, 3, 3}};
    std::sort(keys.begin(), keys.end());
    const auto rules = repo::submanifold_rules(keys);
    std::vector<repo::VoxelKey> coarse;
    const auto down = repo::downsample_rules(keys, coarse);
    binary("sparse_conv_submanifold", [rules](ad::Var x, ad::Var w) { return ad::sparse_conv(x, w, rules); },
           random_matrix(rng, 6, 2), random_matrix(rng, 27 * 2, 3));
    binary("sparse_conv_downsample", [down](ad::Var x, ad::Var w) { return ad::sparse_conv(x, w, down); },
           random_matrix(rng, 6, 2), random_matrix(rng, 27 * 2, 3));
    const auto up = repo::upsample_rules(down, 6);
    binary("sparse_conv_upsample", [up](ad::Var x, ad::Var w) { return ad::sparse_conv(x, w, up); },
           random_matrix(rng, static_cast<Eigen::Index>(coarse.size()), 2), random_matrix(rng, 27 * 2, 3));
  }
  return cs;
}

std::vector<Box3D> overlapping_targets() {
  return {{0.1, -0.2, 0.05, 1.8, 4.0, 1.5, 0.3}, {5.0, 1.0, 0.9, 0.7, 1.8, 1.7, -1.2}, {-2.0, 3.0, 0.5, 1.0, 1.0, 1.0, 2.5}};
}

ad::Matrix perturbed_predictions(Rng& rng, std::span<const Box3D> targets) {
  ad::Matrix m(static_cast<Eigen::Index>(targets.size()), 7);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& t = targets[i];
    m.row(static_cast<Eigen::Index>(i)) << t.cx + rng.uniform(-0.3, 0.3), t.cy + rng.uniform(-0.3, 0.3),
        t.cz + rng.uniform(-0.2, 0.2), t.w * rng.uniform(0.8, 1.2), t.l * rng.uniform(0.8, 1.2),
        t.h * rng.uniform(0.8, 1.2), t.yaw + rng.uniform(-0.4, 0.4);
  }
  return m;
}

std::vector<Case> loss_cases(Rng& rng) {
  std::vector<Case> cs;
  const auto targets = overlapping_targets();
  for (auto [name, metric] : {std::pair{"box_iou", boxes::Metric::Iou}, std::pair{"box_cwiou", boxes::Metric::CwIou},
                              std::pair{"box_corner", boxes::Metric::Corner}}) {
    cs.push_back({name,
                  [targets, metric](ad::Graph& g, std::span<const ad::Var> in) {
                    return project(g, boxes::box_metric(in[0], targets, metric), 3);
                  },
                  {perturbed_predictions(rng, targets)}});
  }
  cs.push_back({"loc_loss",
                [targets](ad::Graph& g, std::span<const ad::Var> in) {
                  return ad::add(ad::add(loss::loc_loss(g, in[0], targets, boxes::Metric::CwIou, 1.0, 1.0).iou,
                                         loss::loc_loss(g, in[0], targets, boxes::Metric::CwIou, 1.0, 1.0).ind),
                                 loss::loc_loss(g, in[0], targets, boxes::Metric::CwIou, 1.0, 1.0).corner);
                },
                {perturbed_predictions(rng, targets)}});
  const std::vector<int> labels{0, -1, 1, 1, -1};
  const ad::Matrix soft = random_matrix(rng, 5, 2, 0.05, 0.95);
  cs.push_back({"temp_sigmoid",
                [](ad::Graph& g, std::span<const ad::Var> in) { return project(g, loss::temp_sigmoid(in[0], 3.0), 4); },
                {random_matrix(rng, 5, 2, -4, 4)}});
  cs.push_back({"soft_focal",
                [soft, labels](ad::Graph&, std::span<const ad::Var> in) {
                  return loss::soft_focal(soft, loss::temp_sigmoid(in[0], 3.0), labels, 0.25, 2.0);
                },
                {random_matrix(rng, 5, 2, -4, 4)}});
  cs.push_back({"cross_entropy_bg",
                [labels](ad::Graph&, std::span<const ad::Var> in) { return loss::cross_entropy_bg(in[0], labels); },
                {random_matrix(rng, 5, 2, -2, 2)}});
  const std::vector<char> fg{1, 0, 0, 1, 1};
  cs.push_back({"binary_cross_entropy",
                [fg](ad::Graph&, std::span<const ad::Var> in) {
                  return loss::binary_cross_entropy(ad::sigmoid(in[0]), fg);
                },
                {random_matrix(rng, 5, 1, -2, 2)}});
  const ad::Matrix vt = random_matrix(rng, 4, 3);
  ad::Matrix votes = vt;
  for (Eigen::Index i = 0; i < votes.size(); ++i) {
    votes.data()[i] += (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 2.0);
  }
  cs.push_back({"vote_loss",
                [vt](ad::Graph&, std::span<const ad::Var> in) { return loss::vote_loss(in[0], vt); }, {votes}});
  return cs;
}

std::vector<Case> layer_cases(Rng& rng) {
  std::vector<Case> cs;
  // Set aggregation: gradient w.r.t. member features and (differentiable) centers.
  {
    const ad::Matrix cloud = random_matrix(rng, 12, 3, -1, 1);
    const auto pts = sampling::to_points(cloud);
    const ad::Matrix centers = random_matrix(rng, 3, 3, -0.5, 0.5);
    const auto groups = sampling::ball_query(sampling::to_points(centers), pts, 1.0, 4);
    auto store = std::make_shared<ad::ParamStore>();
    Rng wr(11);
    auto mlp = std::make_shared<nn::Mlp>(nn::Mlp::create(*store, "agg", 5, {6, 4}, wr));
    cs.push_back({"aggregate_groups",
                  [=](ad::Graph& g, std::span<const ad::Var> in) {
                    return project(g, sampling::aggregate_groups(g, *store, groups, in[0], cloud, in[1], 1.0, *mlp), 5);
                  },
                  {centers, random_matrix(rng, 12, 2)}});
  }
  {
    auto store = std::make_shared<ad::ParamStore>();
    Rng wr(12);
    auto mlp = std::make_shared<nn::Mlp>(nn::Mlp::create(*store, "cls", 6, {5, 1}, wr, false));
    const ad::Matrix stats = random_matrix(rng, 3, 6, 0.2, 1.5);
    cs.push_back({"classify_with_stats",
                  [=](ad::Graph& g, std::span<const ad::Var> in) {
                    return project(g, det::classify_with_stats(g, *store, *mlp, in[0], stats), 6);
                  },
                  {random_matrix(rng, 4, 6)}});
  }
  {
    const ad::Matrix anchors = random_matrix(rng, 2, 3, 0.5, 4.0);
    const std::vector<int> cls{1, 0, 1};
    ad::Matrix res = random_matrix(rng, 3, 16, -0.5, 0.5);
    for (Eigen::Index r = 0; r < 3; ++r) {
      res(r, 7) = rng.uniform(0.5, 1.0);
      res(r, 15) = rng.uniform(0.5, 1.0);
    }
    cs.push_back({"decode_boxes",
                  [=](ad::Graph& g, std::span<const ad::Var> in) {
                    return project(g, det::decode_boxes(in[0], in[1], cls, anchors), 7);
                  },
                  {res, random_matrix(rng, 3, 3)}});
  }
  {
    // Repository update R' = S_R * F + MLP(R) w.r.t. R, F and S_R.
    auto store = std::make_shared<ad::ParamStore>();
    Rng wr(13);
    auto mlp = std::make_shared<nn::Mlp>(nn::Mlp::create(*store, "upd", 4, {5, 3}, wr, false));
    cs.push_back({"fuse_repository",
                  [=](ad::Graph& g, std::span<const ad::Var> in) {
                    repo::FeatureRepository r;
                    r.keys.resize(5);
                    r.features = in[0];
                    r.confidence = in[2];
                    return project(g, repo::fuse_repository(g, *store, r, in[1], in[2], *mlp).features, 8);
                  },
                  {random_matrix(rng, 5, 4), random_matrix(rng, 5, 3), random_matrix(rng, 5, 1, 0.05, 0.95)}});
  }
  {
    auto store = std::make_shared<ad::ParamStore>();
    Rng wr(14);
    auto ed = std::make_shared<repo::EncoderDecoder>(repo::EncoderDecoder::create(*store, "ed", 2, {3, 3, 4, 3, 3}, wr));
    std::vector<Vec3> pts;
    for (int i = 0; i < 9; ++i) pts.push_back({rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 1)});
    cs.push_back({"encoder_decoder",
                  [=](ad::Graph& g, std::span<const ad::Var> in) {
                    const auto k = repo::scatter_knowledge(g, pts, in[0], repo::VoxelGrid({0.5, 0.5, 0.5}));
                    return project(g, (*ed)(g, *store, k).features, 9);
                  },
                  {random_matrix(rng, 9, 2, 0.1, 1.0)}});
  }
  return cs;
}

data::SceneGenConfig toy_scene_config() {
  data::SceneGenConfig c;
  c.extent = {8, 8, 3};
  c.classes = {{"car", {1.6, 2.0}, {3.5, 4.5}, {1.4, 1.7}}, {"cyclist", {0.5, 0.8}, {1.6, 2.0}, {1.6, 1.8}}};
  c.objects = {2, 2};
  c.surface_density = 6;
  c.clutter_density = 0.5;
  c.noise_points = 5;
  c.dropout = 0.1;
  return c;
}

}  // namespace

std::vector<CheckResult> run_suite(const Options& opt) {
  Rng rng(opt.seed);
  std::vector<Case> cases = primitive_cases(rng);
  for (auto& c : loss_cases(rng)) cases.push_back(std::move(c));
  for (auto& c : layer_cases(rng)) cases.push_back(std::move(c));
  std::vector<CheckResult> results;
  for (const auto& c : cases) {
    if (!opt.filter.empty() && c.name.find(opt.filter) == std::string::npos) continue;
    results.push_back(check_inputs(c.name, c.f, c.inputs, opt));
  }

  // Full hybrid objective (soft + hard) of a toy student against a toy teacher.
  const std::string pipeline = "hybrid_pipeline";
  if (opt.filter.empty() || pipeline.find(opt.filter) != std::string::npos) {
    const PipelineConfig cfg = toy_config();
    const LabeledScene scene = data::generate_scene(toy_scene_config(), opt.seed);
    auto teacher = det::DetectorModel::create(det::Role::Teacher, cfg, opt.seed + 1);
    teacher.anchors = det::class_mean_anchors(std::span<const LabeledScene>(&scene, 1), cfg.n_classes());
    teacher.store.set_frozen(true);
    auto student = det::DetectorModel::create(det::Role::Student, cfg, opt.seed + 2);
    student.anchors = teacher.anchors;
    // Zero biases leave ReLUs exactly at the kink for all-zero input rows.
    Rng jitter(opt.seed + 3);
    for (auto& [pname, p] : student.store) {
      if (pname.ends_with(".b")) {
        for (Eigen::Index j = 0; j < p.value.size(); ++j) p.value.data()[j] += jitter.uniform(-0.05, 0.05);
      }
    }
    // Freeze the discrete choices (partial rows) from the unperturbed pass.
    std::vector<int> rows;
    {
      ad::Graph g;
      rows = det::forward(g, student, scene.cloud).partial.rows;
    }
    auto objective = [&](ad::Graph& g) {
      const auto out = det::forward(g, student, scene.cloud, &rows);
      const auto targets = det::make_targets(scene, out);
      auto terms = det::hard_terms(g, student, out, targets);
      ad::Graph tg;
      const auto tout = det::forward(tg, teacher, scene.cloud, &rows);
      det::add_soft_terms(g, student, out, targets, det::soft_targets_from(tout, teacher, targets), terms);
      return loss::hybrid_loss(g, terms, cfg.lambda_soft, cfg.lambda_hard).total;
    };
    results.push_back(check_parameters(pipeline, student.store, objective, 3, opt));
  }
  return results;
}

}  // namespace pcd::gradcheck
