#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "pcd/boxes.hpp"

using namespace pcd;

namespace {

Box3D random_box(Rng& r, double spread) {
  return {r.uniform(-spread, spread), r.uniform(-spread, spread), r.uniform(-0.5, 0.5), r.uniform(0.5, 2.5),
          r.uniform(0.5, 4.5), r.uniform(0.5, 2.0), r.uniform(-kPi, kPi)};
}

// Octagon overlap of two unit squares with 45 degrees relative yaw.
const double kOctagonIou = 2 * (std::sqrt(2.0) - 1) / (2 - 2 * (std::sqrt(2.0) - 1));

}  // namespace

TEST_CASE("box corners") {
  const auto c = boxes::box_corners({0, 0, 0, 2, 2, 2, 0});
  for (const auto& p : c) {
    CHECK(std::abs(std::abs(p.x) - 1) < 1e-12);
    CHECK(std::abs(std::abs(p.y) - 1) < 1e-12);
    CHECK(std::abs(std::abs(p.z) - 1) < 1e-12);
  }
  // Bottom face first, counter-clockwise from (+l/2, +w/2).
  CHECK(c[0].x == doctest::Approx(1));
  CHECK(c[0].y == doctest::Approx(1));
  CHECK(c[0].z == doctest::Approx(-1));
  CHECK(c[1].x == doctest::Approx(-1));
  CHECK(c[4].z == doctest::Approx(1));

  // Quarter turn swaps the x/y extents of a (w=2, l=4) box.
  const auto q = boxes::box_corners({0, 0, 0, 2, 4, 2, kPi / 2});
  double mx = 0, my = 0;
  for (const auto& p : q) mx = std::max(mx, std::abs(p.x)), my = std::max(my, std::abs(p.y));
  CHECK(mx == doctest::Approx(1));
  CHECK(my == doctest::Approx(2));

  Rng r(1);
  for (int t = 0; t < 50; ++t) {
    const auto b = random_box(r, 5);
    Vec3 s{};
    for (const auto& p : boxes::box_corners(b)) s = s + p;
    CHECK(s.x / 8 == doctest::Approx(b.cx));
    CHECK(s.y / 8 == doctest::Approx(b.cy));
    CHECK(s.z / 8 == doctest::Approx(b.cz));
  }
}

TEST_CASE("iou3d simple cases") {
  const Box3D a{0, 0, 0, 1, 1, 1, 0};
  CHECK(boxes::iou3d(a, a) == doctest::Approx(1));
  CHECK(boxes::iou3d(a, {5, 0, 0, 1, 1, 1, 0}) == 0);
  CHECK(boxes::iou3d(a, {0, 0, 5, 1, 1, 1, 0}) == 0);
  CHECK(std::abs(boxes::iou3d(a, {0, 0, 0, 1, 1, 1, kPi / 4}) - kOctagonIou) < 1e-12);
  CHECK(std::abs(kOctagonIou - 0.70711) < 1e-5);
  // Half overlap along x: intersection 0.5, union 1.5.
  CHECK(boxes::iou3d(a, {0.5, 0, 0, 1, 1, 1, 0}) == doctest::Approx(1.0 / 3));
  // Touching edges count as empty.
  CHECK(boxes::bev_intersection(a, {1, 0, 0, 1, 1, 1, 0}) == 0);
}

TEST_CASE("iou3d is symmetric, bounded and agrees with Monte-Carlo") {
  Rng r(2), mc(99);
  for (int t = 0; t < 15; ++t) {
    const auto a = random_box(r, 1.5), b = random_box(r, 1.5);
    const double v = boxes::iou3d(a, b);
    CHECK(v >= 0);
    CHECK(v <= 1);
    CHECK(v == doctest::Approx(boxes::iou3d(b, a)).epsilon(1e-12));
    CHECK(std::abs(v - oracle::monte_carlo_iou(a, b, 200000, mc)) < 1e-2);
  }
}

TEST_CASE("iou3d is invariant to a shared rigid motion") {
  Rng r(3);
  for (int t = 0; t < 50; ++t) {
    auto a = random_box(r, 2), b = random_box(r, 2);
    const double base = boxes::iou3d(a, b);
    const double th = r.uniform(-kPi, kPi), tx = r.uniform(-10, 10), ty = r.uniform(-10, 10);
    for (Box3D* x : {&a, &b}) {
      const double nx = std::cos(th) * x->cx - std::sin(th) * x->cy + tx;
      const double ny = std::sin(th) * x->cx + std::cos(th) * x->cy + ty;
      x->cx = nx, x->cy = ny, x->yaw += th;
    }
    CHECK(boxes::iou3d(a, b) == doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("cwiou invariants") {
  Rng r(4);
  for (int t = 0; t < 50; ++t) {
    const auto a = random_box(r, 0);
    CHECK(boxes::cwiou(a, a) == doctest::Approx(1));
    auto b = random_box(r, 0);
    b.cx = a.cx, b.cy = a.cy, b.cz = a.cz;
    CHECK(boxes::cwiou(b, a) == boxes::iou3d(b, a));
    const auto c = random_box(r, 2);
    CHECK(boxes::cwiou(c, a) <= boxes::iou3d(c, a));
  }
  // Weight factor never increases with the offset.
  const Box3D target{0, 0, 0, 1.8, 4, 1.5, 0.3};
  double prev = 2;
  for (int i = 0; i <= 100; ++i) {
    Box3D p = target;
    p.cx += target.diagonal() * i / 100.0 * 0.6;
    p.cy += target.diagonal() * i / 100.0 * 0.8;
    const double w = boxes::center_weight(p, target);
    CHECK(w <= prev);
    prev = w;
  }
  // Closed form: exp(-|dc|^2 / (2 (d/2)^2)).
  Box3D p = target;
  p.cx += 1;
  const double d = target.diagonal();
  CHECK(boxes::center_weight(p, target) == doctest::Approx(std::exp(-1.0 / (2 * (d / 2) * (d / 2)))));
}

TEST_CASE("corner loss values") {
  const Box3D t{1, 2, 0.5, 2, 4, 1.5, 0.4};
  CHECK(boxes::corner_loss(t, t) == doctest::Approx(0).epsilon(1e-15));
  Box3D flipped = t;
  flipped.yaw += kPi;
  CHECK(boxes::corner_loss(flipped, t) < 1e-12);
  CHECK(boxes::corner_loss(t, flipped) < 1e-12);
  Box3D shifted = t;
  shifted.cx += 0.1;
  CHECK(boxes::corner_loss(shifted, t) == doctest::Approx(0.005).epsilon(1e-9));
  // Outside the quadratic zone every corner is 2 m away: 2 - 0.5.
  Box3D far = t;
  far.cy += 2;
  CHECK(boxes::corner_loss(far, t) == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("box_metric forward matches scalar functions") {
  Rng r(5);
  std::vector<Box3D> preds, targets;
  for (int i = 0; i < 6; ++i) {
    targets.push_back(random_box(r, 1));
    auto p = targets.back();
    p.cx += r.uniform(-0.3, 0.3), p.yaw += r.uniform(-0.3, 0.3), p.w *= 1.1;
    preds.push_back(p);
  }
  ad::Graph g;
  const auto pm = g.constant(boxes::boxes_to_matrix(preds));
  const auto iou = boxes::box_metric(pm, targets, boxes::Metric::Iou).value();
  const auto cw = boxes::box_metric(pm, targets, boxes::Metric::CwIou).value();
  const auto co = boxes::box_metric(pm, targets, boxes::Metric::Corner).value();
  for (int i = 0; i < 6; ++i) {
    CHECK(iou(i, 0) == doctest::Approx(boxes::iou3d(preds[static_cast<std::size_t>(i)], targets[static_cast<std::size_t>(i)])));
    CHECK(cw(i, 0) == doctest::Approx(boxes::cwiou(preds[static_cast<std::size_t>(i)], targets[static_cast<std::size_t>(i)])));
    CHECK(co(i, 0) ==
          doctest::Approx(boxes::corner_loss(preds[static_cast<std::size_t>(i)], targets[static_cast<std::size_t>(i)])));
  }
  CHECK(boxes::box_from_row(boxes::boxes_to_matrix(preds), 3) == preds[3]);
}

TEST_CASE("nms keeps one of two identical boxes") {
  const Box3D b{0, 0, 0, 1, 2, 1, 0};
  const std::vector<boxes::ScoredBox> in{{0, 0, 0.9, b}, {0, 0, 0.8, b}, {0, 1, 0.7, b}, {1, 0, 0.6, b}};
  // Different class and different scene survive.
  CHECK(boxes::nms_bev(in, 0.1) == std::vector<int>{0, 2, 3});
}

TEST_CASE("average precision: hand traces") {
  // 1 TP then 1 FP over one ground truth: envelope 1 at every recall.
  const std::vector<char> tp_fp{1, 0};
  CHECK(boxes::interpolated_ap(tp_fp, 1, 11) == doctest::Approx(1.0));
  CHECK(boxes::interpolated_ap(tp_fp, 1, 40) == doctest::Approx(1.0));
  // FP then TP over one truth: precision 0.5 at recall 1.
  const std::vector<char> fp_tp{0, 1};
  CHECK(boxes::interpolated_ap(fp_tp, 1, 11) == doctest::Approx(0.5));
  // Two truths, one TP: recall reaches 0.5. R11 samples 0..0.5 (6 of 11); R40
  // samples 1/40..0.5 (20 of 40).
  const std::vector<char> half{1};
  CHECK(boxes::interpolated_ap(half, 2, 11) == doctest::Approx(6.0 / 11));
  CHECK(boxes::interpolated_ap(half, 2, 40) == doctest::Approx(20.0 / 40));
  CHECK(boxes::interpolated_ap({}, 2, 11) == 0);
  CHECK_THROWS_AS(boxes::interpolated_ap(half, 2, 12), Error);
}

TEST_CASE("evaluate_ap end to end") {
  const std::vector<boxes::GroundTruth> gt{{0, 0, {0, 0, 0, 2, 4, 1.5, 0}}, {0, 1, {10, 0, 0, 0.6, 1.8, 1.7, 0}},
                                           {1, 0, {3, 3, 0, 2, 4, 1.5, 1}}};
  std::vector<boxes::ScoredBox> perfect;
  for (const auto& t : gt) perfect.push_back({t.scene, t.cls, 0.9, t.box});
  const auto ap = boxes::evaluate_ap(perfect, gt, 2, 0.5, 11);
  CHECK(ap[0] == doctest::Approx(1));
  CHECK(ap[1] == doctest::Approx(1));
  const auto none = boxes::evaluate_ap({}, gt, 2, 0.5, 40);
  CHECK(none[0] == 0);
  CHECK(none[1] == 0);
  // Right box, wrong scene: no match.
  std::vector<boxes::ScoredBox> wrong{{1, 1, 0.9, gt[1].box}};
  CHECK(boxes::evaluate_ap(wrong, gt, 2, 0.5, 11)[1] == 0);
  // A duplicate of a matched truth is a false positive. Scores give the class-0
  // sequence TP, FP, TP over two truths.
  auto dup = perfect;
  dup[2].score = 0.8;
  dup.push_back({0, 0, 0.92, gt[0].box});
  CHECK(boxes::evaluate_ap(dup, gt, 2, 0.5, 11)[0] == doctest::Approx((6 + 5 * 2.0 / 3) / 11));
  CHECK(boxes::evaluate_ap(dup, gt, 2, 0.5, 40)[0] == doctest::Approx((20 + 20 * 2.0 / 3) / 40));
}
