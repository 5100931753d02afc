#include <cmath>

#include "doctest.h"
#include "pcd/losses.hpp"

using namespace pcd;
using ad::Matrix;

namespace {

Matrix random_matrix(Rng& r, Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.uniform(lo, hi);
  return m;
}

}  // namespace

TEST_CASE("temperature sigmoid") {
  CHECK(loss::temp_sigmoid(0.0, 1.0) == 0.5);
  CHECK(loss::temp_sigmoid(0.0, 7.0) == 0.5);
  CHECK(std::abs(loss::temp_sigmoid(3.0, 3.0) - 1.0 / (1.0 + std::exp(-1.0))) < 1e-15);
  CHECK(std::abs(loss::temp_sigmoid(3.0, 3.0) - 0.731059) < 1e-6);
  CHECK(std::abs(loss::temp_sigmoid(10.0, 1e6) - 0.5) < 1e-5);
  CHECK_THROWS_AS(loss::temp_sigmoid(1.0, 0.0), Error);
  ad::Graph g;
  Matrix c(1, 3);
  c << -3, 0, 3;
  const auto v = loss::temp_sigmoid(g.constant(c), 3.0).value();
  for (int i = 0; i < 3; ++i) CHECK(v(0, i) == doctest::Approx(loss::temp_sigmoid(c(0, i), 3.0)).epsilon(1e-14));
}

TEST_CASE("soft focal worked examples") {
  CHECK(loss::soft_focal(0.7, 0.7, true, 0.25, 2) == doctest::Approx(0).epsilon(1e-15));
  CHECK(std::abs(loss::soft_focal(0.9, 0.5, true, 0.25, 2) - 0.25 * 0.16 * std::log(2.0)) < 1e-15);
  CHECK(std::abs(loss::soft_focal(0.9, 0.5, true, 0.25, 2) - 0.0277259) < 1e-6);
  CHECK(std::abs(loss::soft_focal(0.1, 0.1, false, 0.25, 2) - 0.25 * 0.64 * -std::log(0.9)) < 1e-15);
  CHECK(std::abs(loss::soft_focal(0.1, 0.1, false, 0.25, 2) - 0.0168577) < 1e-6);
  CHECK(loss::soft_focal(0.3, 0.6, false, 0.25, 2) >= 0);
}

TEST_CASE("soft focal matrix form equals the scalar loop") {
  Rng r(1);
  const Matrix soft = random_matrix(r, 6, 3, 0.01, 0.99);
  const Matrix pred = random_matrix(r, 6, 3, 0.01, 0.99);
  const std::vector<int> labels{0, -1, 2, 1, -1, 0};
  double expect = 0;
  for (int i = 0; i < 6; ++i) {
    for (int c = 0; c < 3; ++c) expect += loss::soft_focal(soft(i, c), pred(i, c), labels[static_cast<std::size_t>(i)] == c, 0.25, 2);
  }
  expect /= 6;
  ad::Graph g;
  CHECK(loss::soft_focal(soft, g.constant(pred), labels, 0.25, 2).scalar() == doctest::Approx(expect).epsilon(1e-13));
  CHECK_THROWS_AS(loss::soft_focal(soft, g.constant(pred), labels, 0.25, 1.5), Error);
  CHECK(loss::soft_focal(Matrix(0, 3), g.constant(Matrix(0, 3)), {}, 0.25, 2).scalar() == 0);
}

TEST_CASE("smooth L1") {
  CHECK(loss::smooth_l1(0.0) == 0);
  CHECK(loss::smooth_l1(0.5) == 0.125);
  CHECK(loss::smooth_l1(2.0) == 1.5);
  CHECK(loss::smooth_l1(-2.0) == 1.5);
}

TEST_CASE("localization loss") {
  const Box3D t{0, 0, 0, 2, 4, 1.5, 0.2};
  CHECK(loss::loc_loss(t, t, boxes::Metric::CwIou, 1, 1) == doctest::Approx(0).epsilon(1e-12));
  Box3D p = t;
  p.cx += 0.5;
  // Independent term reduces to smooth-L1(0.5) = 0.125.
  const double ind_only = loss::loc_loss(p, t, boxes::Metric::Iou, 1, 0) - loss::loc_loss(p, t, boxes::Metric::Iou, 0, 0);
  CHECK(ind_only == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(loss::loc_loss(p, t, boxes::Metric::Iou, 0, 0) > 0);
  CHECK(loss::loc_loss(p, t, boxes::Metric::Iou, 0, 1) - loss::loc_loss(p, t, boxes::Metric::Iou, 0, 0) ==
        doctest::Approx(0.125));  // every corner 0.5 m away

  ad::Graph g;
  const std::vector<Box3D> targets{t, t};
  const std::vector<Box3D> preds{t, p};
  const auto terms = loss::loc_loss(g, g.constant(boxes::boxes_to_matrix(preds)), targets, boxes::Metric::CwIou, 2.0, 3.0);
  CHECK(!terms.empty);
  const double total = terms.iou.scalar() + terms.ind.scalar() + terms.corner.scalar();
  const double expect = (loss::loc_loss(t, t, boxes::Metric::CwIou, 2, 3) + loss::loc_loss(p, t, boxes::Metric::CwIou, 2, 3)) / 2;
  CHECK(total == doctest::Approx(expect).epsilon(1e-12));
  CHECK(terms.ind.scalar() == doctest::Approx(2.0 * 0.125 / 2));

  const auto empty = loss::loc_loss(g, g.constant(Matrix(0, 7)), {}, boxes::Metric::Iou, 1, 1);
  CHECK(empty.empty);
  CHECK(empty.iou.scalar() == 0);
  CHECK(empty.ind.scalar() == 0);
  CHECK(empty.corner.scalar() == 0);
}

TEST_CASE("cross entropy with a background column") {
  ad::Graph g;
  // Uniform over C + 1 classes.
  CHECK(loss::cross_entropy_bg(g.constant(Matrix::Zero(4, 2)), std::vector<int>{0, 1, -1, 0}).scalar() ==
        doctest::Approx(std::log(3.0)));
  // Confident correct predictions.
  Matrix sure(2, 2);
  sure << 50, -50, -50, -50;
  CHECK(loss::cross_entropy_bg(g.constant(sure), std::vector<int>{0, -1}).scalar() < 1e-20);
  // Scalar loop oracle.
  Rng r(2);
  const Matrix z = random_matrix(r, 5, 3, -3, 3);
  const std::vector<int> labels{2, -1, 0, 1, -1};
  double expect = 0;
  for (int i = 0; i < 5; ++i) {
    double denom = 1.0;  // exp(0) for background
    for (int c = 0; c < 3; ++c) denom += std::exp(z(i, c));
    const int l = labels[static_cast<std::size_t>(i)];
    const double num = l < 0 ? 1.0 : std::exp(z(i, l));
    expect -= std::log(num / denom);
  }
  CHECK(loss::cross_entropy_bg(g.constant(z), labels).scalar() == doctest::Approx(expect / 5).epsilon(1e-13));
}

TEST_CASE("binary cross entropy and vote loss against scalar loops") {
  ad::Graph g;
  Matrix p(3, 1);
  p << 0.9, 0.2, 0.6;
  const std::vector<char> y{1, 0, 0};
  const double bce = -(std::log(0.9) + std::log(0.8) + std::log(0.4)) / 3;
  CHECK(loss::binary_cross_entropy(g.constant(p), y).scalar() == doctest::Approx(bce).epsilon(1e-14));

  Matrix v(2, 3), t(2, 3);
  v << 0, 0, 0, 1, 1, 1;
  t << 0.5, -2, 0, 1, 1, 1;
  CHECK(loss::vote_loss(g.constant(v), t).scalar() == doctest::Approx((0.125 + 1.5) / 2));
}

TEST_CASE("hybrid loss arithmetic") {
  CHECK(loss::hybrid_loss(1.0, 2.0, 0.7, 0.3) == doctest::Approx(1.3).epsilon(1e-15));
  CHECK(loss::hybrid_loss(1.0, 1.0, 0.5, 0.5) == 1.0);
  CHECK(loss::hybrid_loss(5.0, 2.0, 0.0, 1.0) == 2.0);
  CHECK_THROWS_AS(loss::hybrid_loss(1.0, 1.0, -0.1, 1.0), Error);
}

TEST_CASE("hybrid loss over graph terms") {
  ad::Graph g;
  loss::LossTerms t;
  t.soft_cls_det = g.constant(0.25);
  t.soft_cls_aux = g.constant(0.25);
  t.soft_loc_iou = g.constant(0.5);
  t.hard_cls_det = g.constant(1.0);
  t.center_vote = g.constant(0.5);
  t.foreground = g.constant(0.5);
  t.n_foreground = 3;
  const auto r = loss::hybrid_loss(g, t, 0.7, 0.3);
  CHECK(r.total.scalar() == doctest::Approx(0.7 * 1.0 + 0.3 * 2.0));
  CHECK(r.breakdown.soft_cls == 0.5);
  CHECK(r.breakdown.soft_sum() == 1.0);
  CHECK(r.breakdown.hard_sum() == 2.0);
  CHECK(r.breakdown.n_foreground == 3);
  CHECK(!r.breakdown.empty_foreground);
  const auto hard_only = loss::hybrid_loss(g, t, 0.0, 1.0);
  CHECK(hard_only.total.scalar() == doctest::Approx(2.0));
}

TEST_CASE("loss breakdown fields") {
  loss::LossBreakdown b;
  b.total = 2;
  b.hard_cls = 1;
  b.n_foreground = 4;
  auto s = b;
  s += b;
  CHECK(s.total == 4);
  CHECK(s.n_foreground == 8);
  CHECK(s.scaled(0.5).hard_cls == 1);
  CHECK(loss::LossBreakdown::field_names().size() == b.field_values().size());
  CHECK(loss::LossBreakdown::field_names().front() == "total");
}

TEST_CASE("metric names") {
  CHECK(loss::parse_iou_metric("iou") == boxes::Metric::Iou);
  CHECK(loss::parse_iou_metric("cwiou") == boxes::Metric::CwIou);
  CHECK_THROWS_AS(loss::parse_iou_metric("giou"), ConfigError);
}
