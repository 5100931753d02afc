#include "pcd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "pcd/config.hpp"
#include "pcd/data.hpp"

namespace pcd::train {

namespace {

void check_finite(const loss::LossBreakdown& b) {
  if (!std::isfinite(b.total)) throw NumericError("non-finite training loss");
}

LabeledScene prepared(const LabeledScene& s, const StepOptions& opt, Rng& rng) {
  return opt.augment ? data::augment(s, rng) : s;
}

loss::LossBreakdown student_update(det::DetectorModel* teacher, det::DetectorModel& student,
                                   std::span<const LabeledScene> batch, const StepOptions& opt, Rng& rng,
                                   double lambda_soft) {
  if (batch.empty()) throw Error("empty training batch");
  const bool kd = lambda_soft > 0;
  if (kd) {
    if (!teacher) throw Error("distillation needs a teacher");
    if (!teacher->store.frozen()) throw Error("teacher parameters must be frozen during distillation");
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  student.store.zero_grad();
  // Leftovers from the teacher's own training would look like leaks.
  if (teacher) teacher->store.zero_grad();
  loss::LossBreakdown sum;
  for (const auto& raw : batch) {
    const LabeledScene s = prepared(raw, opt, rng);
    ad::Graph g;
    const auto out = det::forward(g, student, s.cloud);
    const auto targets = det::make_targets(s, out);
    auto terms = det::hard_terms(g, student, out, targets);
    if (kd) {
      ad::Graph tg;
      const auto tout = det::forward(tg, *teacher, s.cloud, &out.partial.rows);
      if (tout.init.repo.keys != out.init.repo.keys) {
        throw ConfigError("teacher/student repository grids differ");
      }
      det::add_soft_terms(g, student, out, targets, det::soft_targets_from(tout, *teacher, targets), terms);
    }
    const auto res = loss::hybrid_loss(g, terms, lambda_soft, student.cfg.lambda_hard);
    check_finite(res.breakdown);
    g.backward(ad::scale(res.total, inv_b));
    sum += res.breakdown;
  }
  if (teacher) {
    for (const auto& [name, p] : teacher->store) {
      if (p.grad.size() != 0 && !p.grad.isZero(0.0)) {
        throw Error("gradient reached teacher parameter '" + name + "'");
      }
    }
  }
  ad::adam_step(student.store, opt.adam);
  return sum.scaled(inv_b);
}

}  // namespace

loss::LossBreakdown teacher_step(det::DetectorModel& teacher, std::span<const LabeledScene> batch,
                                 const StepOptions& opt, Rng& rng) {
  if (batch.empty()) throw Error("empty training batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  teacher.store.zero_grad();
  loss::LossBreakdown sum;
  for (const auto& raw : batch) {
    const LabeledScene s = prepared(raw, opt, rng);
    ad::Graph g;
    const auto out = det::forward(g, teacher, s.cloud);
    const auto targets = det::make_targets(s, out);
    const auto terms = det::hard_terms(g, teacher, out, targets);
    const auto res = loss::hybrid_loss(g, terms, 0.0, 1.0);
    check_finite(res.breakdown);
    g.backward(ad::scale(res.total, inv_b));
    sum += res.breakdown;
    const ad::Matrix& feats = out.object_features.value();
    ad::Matrix fg(static_cast<Eigen::Index>(targets.fg_rows.size()), feats.cols());
    for (std::size_t i = 0; i < targets.fg_rows.size(); ++i) {
      fg.row(static_cast<Eigen::Index>(i)) = feats.row(targets.fg_rows[i]);
    }
    det::teacher_stats_update(teacher.stats, fg, targets.fg_class, teacher.cfg.stats_momentum);
  }
  ad::adam_step(teacher.store, opt.adam);
  return sum.scaled(inv_b);
}

loss::LossBreakdown distill_step(det::DetectorModel& teacher, det::DetectorModel& student,
                                 std::span<const LabeledScene> batch, const StepOptions& opt, Rng& rng) {
  return student_update(&teacher, student, batch, opt, rng, student.cfg.lambda_soft);
}

loss::LossBreakdown student_step(det::DetectorModel& student, std::span<const LabeledScene> batch,
                                 const StepOptions& opt, Rng& rng) {
  return student_update(nullptr, student, batch, opt, rng, 0.0);
}

TrainOptions options_from(const PipelineConfig& cfg) {
  TrainOptions o;
  o.epochs = cfg.epochs;
  o.batch_size = cfg.batch_size;
  o.lr = cfg.lr;
  o.augment = cfg.augment;
  o.seed = cfg.seed;
  return o;
}

namespace {

using StepFn = std::function<loss::LossBreakdown(std::span<const LabeledScene>, const StepOptions&, Rng&)>;

std::vector<EpochMetrics> run_epochs(det::DetectorModel& model, std::span<const LabeledScene> train,
                                     std::span<const LabeledScene> val, const TrainOptions& opt, const StepFn& step) {
  if (train.empty()) throw Error("training set is empty");
  if (opt.epochs < 1 || opt.batch_size < 1) throw ConfigError("config key 'epochs'/'batch_size' must be >= 1");
  const auto n = train.size();
  const auto bs = static_cast<std::size_t>(opt.batch_size);
  const long long steps_per_epoch = static_cast<long long>((n + bs - 1) / bs);
  const long long total_steps = steps_per_epoch * opt.epochs;
  Rng rng(opt.seed);
  long long step_index = 0;
  std::vector<EpochMetrics> history;
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    EpochMetrics em;
    em.epoch = epoch;
    for (std::size_t start = 0; start < n; start += bs) {
      std::vector<LabeledScene> batch;
      for (std::size_t i = start; i < std::min(n, start + bs); ++i) batch.push_back(train[order[i]]);
      StepOptions so;
      so.adam = {ad::one_cycle_lr(opt.lr, step_index, total_steps), model.cfg.adam_beta1, model.cfg.adam_beta2,
                 model.cfg.adam_eps};
      so.augment = opt.augment;
      em.lr = so.adam.lr;
      em.loss += step(batch, so, rng).scaled(static_cast<double>(batch.size()));
      ++step_index;
    }
    em.loss = em.loss.scaled(1.0 / static_cast<double>(n));
    const bool validate = !val.empty() && (epoch == opt.epochs || (opt.eval_every > 0 && epoch % opt.eval_every == 0));
    if (validate) em.val_ap11 = evaluate(model, val, model.cfg.eval_iou, 11).ap;
    if (opt.on_epoch) opt.on_epoch(em, model);
    history.push_back(std::move(em));
  }
  return history;
}

}  // namespace

std::vector<EpochMetrics> train_teacher(det::DetectorModel& teacher, std::span<const LabeledScene> train,
                                        std::span<const LabeledScene> val, const TrainOptions& opt) {
  if (teacher.role != det::Role::Teacher) throw Error("train_teacher needs a teacher model");
  teacher.store.set_frozen(false);
  teacher.anchors = det::class_mean_anchors(train, teacher.n_classes());
  return run_epochs(teacher, train, val, opt, [&](std::span<const LabeledScene> b, const StepOptions& so, Rng& rng) {
    return teacher_step(teacher, b, so, rng);
  });
}

det::DetectorModel make_student(const det::DetectorModel& teacher, const PipelineConfig& cfg, std::uint64_t seed) {
  det::check_compatible(teacher.cfg, cfg);
  auto student = det::DetectorModel::create(det::Role::Student, cfg, seed);
  student.stats = teacher.stats;
  student.anchors = teacher.anchors;
  return student;
}

std::vector<EpochMetrics> train_student(det::DetectorModel& student, det::DetectorModel& teacher,
                                        std::span<const LabeledScene> train, std::span<const LabeledScene> val,
                                        const TrainOptions& opt, bool kd) {
  if (student.role != det::Role::Student) throw Error("train_student needs a student model");
  det::check_compatible(teacher.cfg, student.cfg);
  student.stats = teacher.stats;
  student.anchors = teacher.anchors;
  if (!kd) student.cfg.lambda_soft = 0.0;
  teacher.store.set_frozen(true);
  return run_epochs(student, train, val, opt, [&](std::span<const LabeledScene> b, const StepOptions& so, Rng& rng) {
    return kd ? distill_step(teacher, student, b, so, rng) : student_step(student, b, so, rng);
  });
}

int worker_count() {
  if (const char* env = std::getenv("PCD_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<boxes::GroundTruth> ground_truths(std::span<const LabeledScene> scenes) {
  std::vector<boxes::GroundTruth> out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t i = 0; i < scenes[s].boxes.size(); ++i) {
      out.push_back({static_cast<int>(s), scenes[s].classes[i], scenes[s].boxes[i]});
    }
  }
  return out;
}

EvalResult evaluate(det::DetectorModel& m, std::span<const LabeledScene> scenes, double iou_threshold,
                    int recall_positions) {
  std::vector<std::vector<det::Detection>> per_scene(scenes.size());
  const int workers = std::min<int>(worker_count(), std::max<int>(1, static_cast<int>(scenes.size())));
  auto run = [&](int w) {
    for (std::size_t i = static_cast<std::size_t>(w); i < scenes.size(); i += static_cast<std::size_t>(workers)) {
      per_scene[i] = det::predict(m, scenes[i].cloud, m.cfg.score_threshold, m.cfg.nms_iou);
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  EvalResult r;
  for (std::size_t s = 0; s < per_scene.size(); ++s) {
    for (const auto& d : per_scene[s]) r.predictions.push_back({static_cast<int>(s), d.cls, d.score, d.box});
  }
  r.ap = boxes::evaluate_ap(r.predictions, ground_truths(scenes), m.n_classes(), iou_threshold, recall_positions);
  r.mean_ap = r.ap.empty() ? 0.0 : std::accumulate(r.ap.begin(), r.ap.end(), 0.0) / static_cast<double>(r.ap.size());
  return r;
}

std::string metrics_header(const std::vector<std::string>& classes) {
  std::string h = "epoch,lr";
  for (const auto& f : loss::LossBreakdown::field_names()) h += "," + f;
  h += ",n_foreground";
  for (const auto& c : classes) h += ",ap11_" + c;
  return h;
}

std::string metrics_row(const EpochMetrics& m, int n_classes) {
  std::string r = std::to_string(m.epoch) + "," + format_double(m.lr);
  for (double v : m.loss.field_values()) r += "," + format_double(v);
  r += "," + std::to_string(m.loss.n_foreground);
  for (int c = 0; c < n_classes; ++c) {
    r += ",";
    if (!m.val_ap11.empty()) r += format_double(m.val_ap11[static_cast<std::size_t>(c)]);
  }
  return r;
}

}  // namespace pcd::train
