#include <gtest/gtest.h>

#include <random>

#include "dsgp/kernels.hpp"
#include "oracles.hpp"

using namespace dsgp;

TEST(Kernels, SpatialIsUnitAtZeroLag) {
  SpatialParams p;
  EXPECT_DOUBLE_EQ(eval_spatial({10.0, 45.0}, {10.0, 45.0}, p), 1.0);
}

TEST(Kernels, ProductMatchesIndependentFormula) {
  SpatialParams sp{7.0, 3.0};
  TemporalParams tp{4.0, 1.7};
  oracle::Kernel ok{7.0, 3.0, 4.0, 1.7};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> lon(-180, 180), lat(-90, 90), t(-30, 0);
  for (int i = 0; i < 50; ++i) {
    oracle::Point a{lon(rng), lat(rng), t(rng)};
    oracle::Point b{a.lon + 0.1 * lon(rng) / 18, a.lat + lat(rng) / 30, t(rng)};
    const double got = eval_spatial({a.lon, a.lat}, {b.lon, b.lat}, sp) * eval_temporal(a.t - b.t, tp);
    EXPECT_NEAR(got, oracle::k(a, b, ok), 1e-13);
  }
}

TEST(Kernels, TemporalIsSymmetricInLag) {
  TemporalParams tp{3.0, 2.0};
  EXPECT_DOUBLE_EQ(eval_temporal(1.5, tp), eval_temporal(-1.5, tp));
  EXPECT_DOUBLE_EQ(eval_temporal(0.0, tp), 4.0);
}

TEST(Kernels, RejectsBadParameters) {
  EXPECT_THROW(SpatialParams({-1.0, 2.0}).validate(), InvalidInput);
  EXPECT_THROW(TemporalParams({0.0, 2.0}).validate(), InvalidInput);
  EXPECT_THROW(eval_spatial({0, 0}, {std::nan(""), 0}, SpatialParams{}), InvalidInput);
}

TEST(Kernels, GramIsPsdAndSymmetric) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-40, 40);
  std::vector<LonLat> x;
  for (int i = 0; i < 40; ++i) {
    x.push_back({u(rng), u(rng) / 2});
  }
  const Mat k = spatial_gram(x, x, SpatialParams{});
  EXPECT_LT((k - k.transpose()).norm(), 1e-14);
  Eigen::SelfAdjointEigenSolver<Mat> es(k);
  EXPECT_GT(es.eigenvalues().minCoeff(), -1e-10);
}

TEST(Kernels, JitterOnlyOnSelfGram) {
  std::vector<LonLat> x{{0, 0}, {1, 1}};
  std::vector<LonLat> y = x;
  const Mat self = spatial_gram(x, x, SpatialParams{}, 0.5);
  const Mat cross = spatial_gram(x, y, SpatialParams{}, 0.5);
  EXPECT_DOUBLE_EQ(self(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(cross(0, 0), 1.0);
}

TEST(Kernels, PartialsMatchFiniteDifferences) {
  SpatialParams p{5.0, 8.0};
  const LonLat a{3.0, -2.0}, b{7.5, 4.0};
  const auto d = spatial_partials(a, b, p);
  const double h = 1e-6;
  const auto f = [&](LonLat x, SpatialParams q) { return eval_spatial(x, b, q); };
  EXPECT_NEAR(d.d_lon1, (f({a.lon + h, a.lat}, p) - f({a.lon - h, a.lat}, p)) / (2 * h), 1e-8);
  EXPECT_NEAR(d.d_lat1, (f({a.lon, a.lat + h}, p) - f({a.lon, a.lat - h}, p)) / (2 * h), 1e-8);
  SpatialParams up = p, dn = p;
  up.ell_lon *= std::exp(h);
  dn.ell_lon *= std::exp(-h);
  EXPECT_NEAR(d.d_log_ell_lon, (f(a, up) - f(a, dn)) / (2 * h), 1e-8);
  up = p;
  dn = p;
  up.ell_lat *= std::exp(h);
  dn.ell_lat *= std::exp(-h);
  EXPECT_NEAR(d.d_log_ell_lat, (f(a, up) - f(a, dn)) / (2 * h), 1e-8);
}

TEST(Kernels, PartialsAtZeroDistanceAreZero) {
  const auto d = spatial_partials({1, 1}, {1, 1}, SpatialParams{});
  EXPECT_EQ(d.d_lon1, 0.0);
  EXPECT_EQ(d.d_log_ell_lat, 0.0);
}

TEST(Kernels, OuStateSpaceReproducesCovariance) {
  TemporalParams tp{2.5, 1.3};
  const OuStateSpace ou(tp);
  // Cov(s(t+dt), s(t)) = A P_inf
  for (double dt : {0.0, 0.1, 1.0, 7.0}) {
    EXPECT_NEAR((ou.transition(dt) * ou.stationary_cov())(0, 0), eval_temporal(dt, tp), 1e-14);
    // stationarity: A P A' + Q = P
    const Mat p = ou.transition(dt) * ou.stationary_cov() * ou.transition(dt).transpose() +
                  ou.process_noise(dt);
    EXPECT_NEAR(p(0, 0), ou.variance(), 1e-13);
  }
  EXPECT_THROW(ou.decay(-1.0), InvalidInput);
}
