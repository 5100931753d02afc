#include <map>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "pcd/repository.hpp"

using namespace pcd;
using ad::Matrix;

namespace {

Matrix random_matrix(Rng& r, Eigen::Index rows, Eigen::Index cols, double lo = -1, double hi = 1) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.uniform(lo, hi);
  return m;
}

void randomize(ad::ParamStore& store, Rng& r) {
  for (auto& [n, p] : store) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = r.normal(0, 0.5);
  }
}

}  // namespace

TEST_CASE("voxelize_mean: two points in one voxel") {
  ad::Graph g;
  const std::vector<Vec3> pts{{0.1, 0.1, 0.1}, {0.3, 0.3, 0.3}};
  Matrix f(2, 2);
  f << 1, 3, 3, 5;
  const auto repo = repo::voxelize_mean(g, pts, g.constant(f), {0.4, 0.4, 0.4});
  REQUIRE(repo.size() == 1);
  CHECK(repo.features.value()(0, 0) == doctest::Approx(2));
  CHECK(repo.features.value()(0, 1) == doctest::Approx(4));
  CHECK(repo.coords(0, 0) == doctest::Approx(0.2));
  CHECK(repo.counts[0] == 2);
  CHECK(repo.confidence.value().isZero());
}

TEST_CASE("voxelize_mean: distinct voxels copy features") {
  ad::Graph g;
  const std::vector<Vec3> pts{{0.1, 0, 0}, {1.1, 0, 0}, {-0.5, 2, 0}};
  Matrix f(3, 1);
  f << 7, 8, 9;
  const auto repo = repo::voxelize_mean(g, pts, g.constant(f), {0.4, 0.4, 0.4});
  REQUIRE(repo.size() == 3);
  for (int i = 0; i < 3; ++i) {
    const int row = repo.point_voxel[static_cast<std::size_t>(i)];
    CHECK(repo.features.value()(row, 0) == f(i, 0));
  }
}

TEST_CASE("voxelize_mean equals a group-by oracle") {
  Rng r(3);
  const int n = 400;
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = {r.uniform(-2, 2), r.uniform(-2, 2), r.uniform(0, 1)};
  const Matrix f = random_matrix(r, n, 3);
  const std::array<double, 3> vs{0.5, 0.7, 0.3};
  std::map<std::array<int, 3>, std::pair<std::vector<double>, int>> groups;
  for (int i = 0; i < n; ++i) {
    const std::array<int, 3> key{static_cast<int>(std::floor(pts[i].x / vs[0])),
                                 static_cast<int>(std::floor(pts[i].y / vs[1])),
                                 static_cast<int>(std::floor(pts[i].z / vs[2]))};
    auto& [sum, count] = groups[key];
    sum.resize(6, 0.0);
    for (int c = 0; c < 3; ++c) sum[static_cast<std::size_t>(c)] += f(i, c);
    sum[3] += pts[i].x, sum[4] += pts[i].y, sum[5] += pts[i].z;
    ++count;
  }
  ad::Graph g;
  const auto repo = repo::voxelize_mean(g, pts, g.constant(f), vs);
  REQUIRE(repo.size() == groups.size());
  std::size_t row = 0;
  for (const auto& [key, acc] : groups) {  // std::map order == ascending key order
    const auto& k = repo.keys[row];
    CHECK(std::array<int, 3>{k.x, k.y, k.z} == key);
    for (int c = 0; c < 3; ++c) {
      CHECK(repo.features.value()(static_cast<Eigen::Index>(row), c) ==
            doctest::Approx(acc.first[static_cast<std::size_t>(c)] / acc.second).epsilon(1e-12));
      CHECK(repo.coords(static_cast<Eigen::Index>(row), c) ==
            doctest::Approx(acc.first[static_cast<std::size_t>(3 + c)] / acc.second).epsilon(1e-12));
    }
    ++row;
  }
}

TEST_CASE("scatter_knowledge placement, collisions and empty reads") {
  ad::Graph g;
  const repo::VoxelGrid grid({1, 1, 1});
  const std::vector<Vec3> one{{0.5, 0.5, 0.5}};
  Matrix f1(1, 2);
  f1 << 4, 5;
  const auto k1 = repo::scatter_knowledge(g, one, g.constant(f1), grid);
  CHECK(k1.keys.size() == 1);
  CHECK(k1.read({0, 0, 0}) == f1);
  CHECK(k1.read({3, 3, 3}).isZero());

  const std::vector<Vec3> two{{0.2, 0.2, 0.2}, {0.8, 0.8, 0.8}};
  Matrix f2(2, 2);
  f2 << 1, 2, 3, 6;
  const std::vector<repo::VoxelKey> support{{5, 5, 5}};
  const auto k2 = repo::scatter_knowledge(g, two, g.constant(f2), grid, support);
  CHECK(k2.keys.size() == 2);
  CHECK(k2.read({0, 0, 0})(0, 0) == doctest::Approx(2));
  CHECK(k2.read({0, 0, 0})(0, 1) == doctest::Approx(4));
  CHECK(k2.row_of({5, 5, 5}) >= 0);
  CHECK(k2.read({5, 5, 5}).isZero());
}

TEST_CASE("downsample support follows the stride-2 pairing rule") {
  // Oracle: q is a coarse voxel iff some fine p has p - 2q in {-1, 0, 1}^3.
  auto coarse_of = [](const std::vector<repo::VoxelKey>& fine) {
    std::set<repo::VoxelKey> out;
    for (const auto& p : fine) {
      for (int qx = p.x / 2 - 2; qx <= p.x / 2 + 2; ++qx)
        for (int qy = p.y / 2 - 2; qy <= p.y / 2 + 2; ++qy)
          for (int qz = p.z / 2 - 2; qz <= p.z / 2 + 2; ++qz)
            if (std::abs(p.x - 2 * qx) <= 1 && std::abs(p.y - 2 * qy) <= 1 && std::abs(p.z - 2 * qz) <= 1)
              out.insert({qx, qy, qz});
    }
    return std::vector<repo::VoxelKey>(out.begin(), out.end());
  };
  for (const auto& key : {repo::VoxelKey{0, 0, 0}, repo::VoxelKey{1, 1, 1}, repo::VoxelKey{-3, 2, 5}}) {
    std::vector<repo::VoxelKey> coarse;
    repo::downsample_rules(std::vector<repo::VoxelKey>{key}, coarse);
    CHECK(coarse == coarse_of({key}));
  }
  // Hand trace: (1,1,1) reaches {0,1}^3 at both coarser levels.
  std::vector<repo::VoxelKey> l1, l2;
  repo::downsample_rules(std::vector<repo::VoxelKey>{{1, 1, 1}}, l1);
  repo::downsample_rules(l1, l2);
  CHECK(l1.size() == 8);
  CHECK(l2.size() == 8);
}

TEST_CASE("submanifold rulebook pairs every voxel with its 26-neighbours") {
  const std::vector<repo::VoxelKey> keys{{0, 0, 0}, {1, 0, 0}, {3, 0, 0}};
  const auto rb = repo::submanifold_rules(keys);
  std::size_t pairs = 0;
  for (const auto& p : rb.pairs) pairs += p.size();
  CHECK(pairs == 5);  // three self pairs plus 0<->1
  CHECK(rb.pairs[static_cast<std::size_t>(repo::offset_index(0, 0, 0))].size() == 3);
  CHECK(rb.pairs[static_cast<std::size_t>(repo::offset_index(1, 0, 0))] == std::vector<std::pair<int, int>>{{1, 0}});
}

TEST_CASE("encoder-decoder: zero input and zero biases give zero output") {
  Rng r(5);
  ad::ParamStore store;
  const auto ed = repo::EncoderDecoder::create(store, "ed", 3, {4, 6, 8, 6, 4}, r);
  ad::Graph g;
  const std::vector<Vec3> pts{{0.1, 0.1, 0.1}, {1.2, 0.3, 0.1}, {2.5, 2.5, 0.4}};
  const auto k = repo::scatter_knowledge(g, pts, g.constant(Matrix::Zero(3, 3)), repo::VoxelGrid({0.5, 0.5, 0.5}));
  const auto out = ed(g, store, k);
  CHECK(out.features.cols() == 4);
  CHECK(out.features.rows() == 3);
  CHECK(out.features.value().isZero());
}

TEST_CASE("encoder-decoder rejects asymmetric channels") {
  Rng r(5);
  ad::ParamStore store;
  CHECK_THROWS_AS(repo::EncoderDecoder::create(store, "ed", 3, {4, 6, 8, 5, 4}, r), ConfigError);
}

TEST_CASE("align_rows re-indexes and zero-fills") {
  ad::Graph g;
  Matrix f(2, 1);
  f << 1, 2;
  const std::vector<repo::VoxelKey> from{{0, 0, 0}, {1, 0, 0}};
  const std::vector<repo::VoxelKey> to{{1, 0, 0}, {2, 0, 0}, {0, 0, 0}};
  const auto out = repo::align_rows(g.constant(f), from, to);
  CHECK(out.value()(0, 0) == 2);
  CHECK(out.value()(1, 0) == 0);
  CHECK(out.value()(2, 0) == 1);
}

TEST_CASE("fuse_repository equals a scalar loop") {
  Rng r(21);
  for (int trial = 0; trial < 20; ++trial) {
    ad::ParamStore store;
    const int c_in = 3, c = 4;
    const auto mlp = nn::Mlp::create(store, "upd", c_in, {5, c}, r, trial % 2 == 0);
    randomize(store, r);
    ad::Graph g;
    std::vector<Vec3> pts;
    for (int i = 0; i < 5; ++i) pts.push_back({static_cast<double>(i), 0, 0});
    const Matrix rf = random_matrix(r, 5, c_in);
    auto repo = repo::voxelize_mean(g, pts, g.constant(rf), {1, 1, 1});
    REQUIRE(repo.size() == 5);
    const Matrix scene = random_matrix(r, 5, c);
    const Matrix conf = random_matrix(r, 5, 1, 0, 1);
    const auto fused = repo::fuse_repository(g, store, repo, g.constant(scene), g.constant(conf), mlp);
    for (int v = 0; v < 5; ++v) {
      std::vector<double> x(rf.row(v).data(), rf.row(v).data() + c_in);
      const auto m = oracle::mlp_scalar(store, mlp, x);
      for (int j = 0; j < c; ++j) {
        const double expect = conf(v, 0) * scene(v, j) + m[static_cast<std::size_t>(j)];
        CHECK(std::abs(fused.features.value()(v, j) - expect) < 1e-12);
      }
    }
    // Zero confidence leaves only the MLP path.
    const auto only_mlp = repo::fuse_repository(g, store, repo, g.constant(scene), g.constant(Matrix::Zero(5, 1)), mlp);
    CHECK((only_mlp.features.value() - mlp(g, store, repo.features).value()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("fuse_repository pass-through with identity MLP") {
  ad::ParamStore store;
  Rng r(1);
  const auto mlp = nn::Mlp::create(store, "id", 2, {2}, r, false);
  store.get("id.0.w").value = Matrix::Identity(2, 2);
  ad::Graph g;
  const std::vector<Vec3> pts{{0, 0, 0}, {2, 0, 0}};
  Matrix f(2, 2);
  f << 1, -2, 3, 4;
  const auto repo = repo::voxelize_mean(g, pts, g.constant(f), {1, 1, 1});
  const auto fused =
      repo::fuse_repository(g, store, repo, g.constant(Matrix::Zero(2, 2)), g.constant(Matrix::Ones(2, 1)), mlp);
  CHECK(fused.features.value() == repo.features.value());
}

TEST_CASE("fuse_repository shape errors") {
  ad::ParamStore store;
  Rng r(1);
  const auto mlp = nn::Mlp::create(store, "m", 2, {3}, r);
  ad::Graph g;
  const std::vector<Vec3> pts{{0, 0, 0}};
  const auto repo = repo::voxelize_mean(g, pts, g.constant(Matrix::Ones(1, 2)), {1, 1, 1});
  CHECK_THROWS_AS(repo::fuse_repository(g, store, repo, g.constant(Matrix::Ones(1, 4)), g.constant(Matrix::Ones(1, 1)), mlp),
                  ShapeError);
}
