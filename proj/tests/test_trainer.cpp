#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include "pcd/data.hpp"
#include "pcd/gradcheck.hpp"
#include "pcd/trainer.hpp"

using namespace pcd;

namespace {

std::vector<LabeledScene> scenes(int n, std::uint64_t seed0) {
  data::SceneGenConfig c;
  c.extent = {14, 14, 3};
  c.objects = {2, 3};
  c.surface_density = 8;
  c.clutter_density = 0.3;
  c.noise_points = 10;
  std::vector<LabeledScene> out;
  for (int i = 0; i < n; ++i) out.push_back(data::generate_scene(c, seed0 + static_cast<std::uint64_t>(i)));
  return out;
}

det::DetectorModel trained_teacher(const std::vector<LabeledScene>& train) {
  auto t = det::DetectorModel::create(det::Role::Teacher, gradcheck::toy_config(), 1);
  train::TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 2;
  opt.lr = 0.01;
  train::train_teacher(t, train, {}, opt);
  return t;
}

train::StepOptions step_options(double lr) {
  train::StepOptions o;
  o.adam.lr = lr;
  return o;
}

}  // namespace

TEST_CASE("repeated teacher steps on one batch reduce the hard loss") {
  const auto batch = scenes(2, 100);
  auto t = det::DetectorModel::create(det::Role::Teacher, gradcheck::toy_config(), 2);
  t.anchors = det::class_mean_anchors(batch, t.n_classes());
  Rng rng(0);
  const double first = train::teacher_step(t, batch, step_options(0.01), rng).total;
  double last = first;
  for (int i = 0; i < 40; ++i) last = train::teacher_step(t, batch, step_options(0.01), rng).total;
  CHECK(last < 0.7 * first);
  CHECK_FALSE(t.stats.isApprox(ad::Matrix::Ones(t.stats.rows(), t.stats.cols())));  // EMA moved
}

TEST_CASE("distillation never touches the frozen teacher") {
  const auto train_set = scenes(4, 200);
  auto teacher = trained_teacher(train_set);
  teacher.store.set_frozen(true);
  const std::string before = teacher.to_checkpoint().encode();
  auto student = train::make_student(teacher, teacher.cfg, 3);
  Rng rng(1);
  for (int i = 0; i < 3; ++i) {
    const auto b = train::distill_step(teacher, student, train_set, step_options(0.01), rng);
    CHECK(b.soft_sum() > 0);
  }
  CHECK(teacher.to_checkpoint().encode() == before);

  teacher.store.set_frozen(false);
  CHECK_THROWS_AS(train::distill_step(teacher, student, train_set, step_options(0.01), rng), Error);
}

TEST_CASE("hard-only student steps carry no soft terms") {
  const auto train_set = scenes(2, 300);
  auto teacher = det::DetectorModel::create(det::Role::Teacher, gradcheck::toy_config(), 1);
  auto student = train::make_student(teacher, teacher.cfg, 4);
  Rng rng(2);
  const auto b = train::student_step(student, train_set, step_options(0.01), rng);
  CHECK(b.soft_sum() == 0.0);
  CHECK(b.total == doctest::Approx(student.cfg.lambda_hard * b.hard_sum()));
  CHECK_THROWS_AS(train::student_step(student, {}, step_options(0.01), rng), Error);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto train_set = scenes(4, 400);
  const auto val_set = scenes(2, 500);
  auto teacher = trained_teacher(train_set);
  train::TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 2;
  opt.augment = true;
  opt.seed = 9;
  std::vector<std::string> encoded;
  std::vector<std::vector<double>> aps;
  for (int run = 0; run < 2; ++run) {
    auto s = train::make_student(teacher, teacher.cfg, 5);
    const auto hist = train::train_student(s, teacher, train_set, val_set, opt, true);
    encoded.push_back(s.to_checkpoint().encode());
    aps.push_back(hist.back().val_ap11);
  }
  CHECK(encoded[0] == encoded[1]);
  CHECK(aps[0] == aps[1]);
}

TEST_CASE("epoch loop schedules the rate and validation") {
  const auto train_set = scenes(4, 600);
  const auto val_set = scenes(1, 700);
  auto t = det::DetectorModel::create(det::Role::Teacher, gradcheck::toy_config(), 1);
  train::TrainOptions opt;
  opt.epochs = 3;
  opt.batch_size = 3;
  opt.lr = 0.02;
  opt.eval_every = 2;
  int calls = 0;
  opt.on_epoch = [&](const train::EpochMetrics& m, const det::DetectorModel&) { CHECK(m.epoch == ++calls); };
  const auto hist = train::train_teacher(t, train_set, val_set, opt);
  REQUIRE(hist.size() == 3);
  CHECK(calls == 3);
  CHECK(hist[0].val_ap11.empty());
  CHECK(hist[1].val_ap11.size() == 2);
  CHECK(hist[2].val_ap11.size() == 2);
  // 2 steps per epoch, 6 in total; the last step sits at the cosine floor.
  CHECK(hist[2].lr == doctest::Approx(0.01 * 0.02));
  CHECK(hist[0].lr > hist[2].lr);

  opt.epochs = 0;
  CHECK_THROWS_AS(train::train_teacher(t, train_set, val_set, opt), ConfigError);
  auto s = det::DetectorModel::create(det::Role::Student, gradcheck::toy_config(), 1);
  opt.epochs = 1;
  CHECK_THROWS_AS(train::train_teacher(s, train_set, val_set, opt), Error);
}

TEST_CASE("student and teacher grids must agree") {
  auto teacher = det::DetectorModel::create(det::Role::Teacher, gradcheck::toy_config(), 1);
  teacher.stats.setConstant(0.5);
  PipelineConfig cfg = teacher.cfg;
  const auto s = train::make_student(teacher, cfg, 2);
  CHECK(s.stats == teacher.stats);
  CHECK(s.anchors == teacher.anchors);
  cfg.voxel_size = {0.25, 0.25, 0.25};
  CHECK_THROWS_AS(train::make_student(teacher, cfg, 2), ConfigError);
}

TEST_CASE("evaluation scores ground truth of every scene") {
  const auto set = scenes(3, 800);
  const auto gts = train::ground_truths(set);
  std::size_t n = 0;
  for (const auto& s : set) n += s.boxes.size();
  CHECK(gts.size() == n);
  CHECK(gts.back().scene == 2);
  auto t = det::DetectorModel::create(det::Role::Teacher, gradcheck::toy_config(), 1);
  const auto r = train::evaluate(t, set, 0.5, 11);
  REQUIRE(r.ap.size() == 2);
  for (double ap : r.ap) CHECK((ap >= 0 && ap <= 1));
}

TEST_CASE("worker count honors PCD_THREADS") {
  const char* old = std::getenv("PCD_THREADS");
  const std::string saved = old ? old : "";
  setenv("PCD_THREADS", "3", 1);
  CHECK(train::worker_count() == 3);
  setenv("PCD_THREADS", "0", 1);
  CHECK(train::worker_count() >= 1);
  if (old) {
    setenv("PCD_THREADS", saved.c_str(), 1);
  } else {
    unsetenv("PCD_THREADS");
  }
}

TEST_CASE("metrics rows line up with the header") {
  train::EpochMetrics m;
  m.epoch = 4;
  m.lr = 0.5;
  m.loss.total = 1.25;
  m.loss.n_foreground = 7;
  const std::string header = train::metrics_header({"car", "cyclist"});
  CHECK(header.rfind("epoch,lr,total,", 0) == 0);
  CHECK(header.find(",n_foreground,ap11_car,ap11_cyclist") != std::string::npos);
  auto columns = [](const std::string& s) { return std::count(s.begin(), s.end(), ',') + 1; };
  const std::string empty_row = train::metrics_row(m, 2);
  CHECK(columns(empty_row) == columns(header));
  CHECK(empty_row.ends_with(",7,,"));
  m.val_ap11 = {0.5, 0.25};
  const std::string row = train::metrics_row(m, 2);
  CHECK(columns(row) == columns(header));
  CHECK(row.rfind("4,0.5,1.25,", 0) == 0);
  CHECK(row.ends_with(",7,0.5,0.25"));
}
