#include <doctest.h>

#include <cmath>

#include "dmad/metrics.hpp"
#include "metric_oracles.hpp"
#include "test_util.hpp"

using namespace dmad;

namespace {

using Scores = std::vector<double>;
using Labels = std::vector<std::uint8_t>;

void random_case(std::mt19937_64& rng, Scores& s, Labels& y, bool ties) {
  const auto n = std::uniform_int_distribution<std::size_t>(2, 64)(rng);
  s.resize(n);
  y.resize(n);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> coarse(0, 5);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = ties ? coarse(rng) * 0.25 : u(rng);
    y[i] = u(rng) < 0.4 ? 1 : 0;
  }
  y[0] = 1;
  y[1] = 0;
}

}  // namespace

TEST_CASE("auroc examples") {
  CHECK(auroc(Scores{0.1, 0.9}, Labels{0, 1}) == 1.0);
  CHECK(auroc(Scores{0.2, 0.4, 0.6, 0.8}, Labels{0, 1, 0, 1}) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(auroc(Scores{0.3, 0.3, 0.3, 0.3}, Labels{0, 1, 0, 1}) == 0.5);
  CHECK_THROWS_AS(auroc(Scores{0.1, 0.2}, Labels{1, 1}), ValidationError);
  CHECK_THROWS_AS(auroc(Scores{0.1, 0.2}, Labels{0, 0}), ValidationError);
  CHECK_THROWS_AS(auroc(Scores{0.1}, Labels{0, 1}), ValidationError);
}

TEST_CASE("average precision examples") {
  CHECK(average_precision(Scores{2, 1}, Labels{1, 0}) == 1.0);
  CHECK(average_precision(Scores{3, 2, 1}, Labels{1, 0, 1}) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(average_precision(Scores{2, 1}, Labels{0, 1}) == 0.5);
  CHECK_THROWS_AS(average_precision(Scores{2, 1}, Labels{0, 0}), ValidationError);
}

TEST_CASE("f1max examples") {
  CHECK(f1max(Scores{0.9, 0.1}, Labels{1, 0}) == 1.0);
  CHECK(f1max(Scores{0.9, 0.8, 0.1}, Labels{1, 0, 1}) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(f1max(Scores{0.5, 0.2, 0.7}, Labels{1, 1, 1}) == 1.0);
  CHECK_THROWS_AS(f1max(Scores{0.5, 0.2}, Labels{0, 0}), ValidationError);
}

TEST_CASE("ranking metrics match threshold-sweep oracles") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    Scores s;
    Labels y;
    random_case(rng, s, y, trial % 2 == 1);
    REQUIRE(std::abs(auroc(s, y) - oracle::auroc_pairs(s, y)) <= 1e-9);
    REQUIRE(std::abs(average_precision(s, y) - oracle::ap_sweep(s, y)) <= 1e-9);
    REQUIRE(std::abs(f1max(s, y) - oracle::f1_sweep(s, y)) <= 1e-9);
  }
}

TEST_CASE("ranking metrics are invariant to increasing transforms") {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 100; ++trial) {
    Scores s;
    Labels y;
    random_case(rng, s, y, trial % 3 == 0);
    Scores t(s.size()), neg(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      t[i] = std::exp(3.0 * s[i]) - 7.0;
      neg[i] = -s[i];
    }
    CHECK(auroc(t, y) == doctest::Approx(auroc(s, y)).epsilon(1e-12));
    CHECK(average_precision(t, y) == doctest::Approx(average_precision(s, y)).epsilon(1e-12));
    CHECK(f1max(t, y) == doctest::Approx(f1max(s, y)).epsilon(1e-12));
    if (trial % 3 != 0) CHECK(auroc(s, y) + auroc(neg, y) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("pro examples") {
  // One 3x3 region; every inside score beats every outside score.
  MatrixD sep(8, 8, 0.0);
  Matrix<std::uint8_t> one(8, 8, 0);
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : sep.data()) v = u(rng);
  for (int y = 2; y < 5; ++y) {
    for (int x = 3; x < 6; ++x) {
      one(y, x) = 1;
      sep(y, x) = 2.0 + u(rng);
    }
  }
  std::vector<MatrixD> maps{sep};
  std::vector<Matrix<std::uint8_t>> masks{one};
  CHECK(pro(maps, masks) == doctest::Approx(1.0).epsilon(1e-12));

  // Constant scores: one step from (0,0) to (1,1); the area up to 0.3 is
  // 0.3 * 0.3 / 2 = 0.045, normalized by 0.3 gives 0.15.
  maps = {MatrixD(8, 8, 0.5)};
  CHECK(pro(maps, masks) == doctest::Approx(0.15).epsilon(1e-12));

  // Two regions: A outscores everything, B scores below every normal pixel,
  // so the mean overlap is 1/2 over the whole integrated range.
  Matrix<std::uint8_t> two(8, 8, 0);
  MatrixD s2(8, 8, 0.0);
  for (auto& v : s2.data()) v = u(rng);
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 2; ++x) {
      two(y, x) = 1;
      s2(y, x) = 5.0;
      two(6 + y, 6 + x) = 1;
      s2(6 + y, 6 + x) = -1.0;
    }
  }
  maps = {s2};
  masks = {two};
  CHECK(pro(maps, masks) == doctest::Approx(0.5).epsilon(1e-12));

  masks = {Matrix<std::uint8_t>(8, 8, 0)};
  CHECK_THROWS_AS(pro(maps, masks), ValidationError);
  masks = {Matrix<std::uint8_t>(8, 8, 1)};
  CHECK_THROWS_AS(pro(maps, masks), ValidationError);
  masks = {Matrix<std::uint8_t>(4, 8, 1)};
  CHECK_THROWS_AS(pro(maps, masks), ValidationError);
}

TEST_CASE("pro matches a brute-force sweep") {
  std::mt19937_64 rng(20);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> coarse(0, 9);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<MatrixD> maps;
    std::vector<Matrix<std::uint8_t>> masks;
    const int images = 1 + trial % 3;
    for (int m = 0; m < images; ++m) {
      MatrixD s(10, 12);
      Matrix<std::uint8_t> g(10, 12, 0);
      for (std::size_t k = 0; k < s.size(); ++k) {
        s.data()[k] = trial % 2 ? coarse(rng) / 9.0 : u(rng);
        g.data()[k] = u(rng) < 0.15 ? 1 : 0;
      }
      g(0, 0) = 1;
      g(9, 11) = 0;
      maps.push_back(s);
      masks.push_back(g);
    }
    for (double limit : {0.3, 0.05, 1.0}) {
      REQUIRE(std::abs(pro(maps, masks, ProConfig{limit, 8}) - oracle::pro_sweep(maps, masks, limit)) <= 1e-9);
    }
  }
}
