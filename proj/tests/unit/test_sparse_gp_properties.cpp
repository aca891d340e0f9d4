#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dsgp/sparse_gp.hpp"
#include "oracles.hpp"

using namespace dsgp;

namespace {

Hyperparams small_hyper(std::mt19937_64 &rng, std::size_t ms, std::size_t mt) {
  std::uniform_real_distribution<double> lon(-15, 15), lat(-10, 10);
  Hyperparams h;
  h.spatial = {9.0, 6.0};
  h.temporal = {4.0, 1.3};
  h.noise_sigma = 0.6;
  h.jitter = 1e-8;
  for (std::size_t i = 0; i < ms; ++i) {
    h.inducing.spatial.push_back({lon(rng), lat(rng)});
  }
  for (std::size_t k = 0; k < mt; ++k) {
    h.inducing.times.push_back(-12.0 + 12.0 * static_cast<double>(k) / static_cast<double>(mt - 1));
  }
  h.inducing.bbox = {-15, 15, -10, 10};
  return h;
}

std::vector<ObservationRecord> random_batch(std::mt19937_64 &rng, std::size_t n) {
  std::uniform_real_distribution<double> lon(-15, 15), lat(-10, 10), t(-12, 0);
  std::normal_distribution<double> y(0.0, 1.5);
  std::vector<ObservationRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    ObservationRecord r;
    r.lon = lon(rng);
    r.lat = lat(rng);
    r.age_bp = -1000.0 * t(rng);
    r.value = r.value_centered = y(rng);
    r.source = "test";
    out.push_back(r);
  }
  return out;
}

} // namespace

TEST(ExpectedLogLik, ClosedFormExamples) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  EXPECT_NEAR(expected_log_lik(0.3, {0.3, 0.0, 1.0}, 1.0), -half_log_2pi, 1e-15);
  EXPECT_NEAR(expected_log_lik(0.3, {0.3, 1.0, 2.0}, 1.0), -half_log_2pi - 0.5, 1e-15);
  EXPECT_THROW(expected_log_lik(0.0, {0.0, 1.0, 2.0}, 0.0), InvalidInput);
  EXPECT_THROW(expected_log_lik(0.0, {0.0, -1.0, 2.0}, 1.0), InvalidInput);
}

TEST(ExpectedLogLik, MatchesMonteCarlo) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::uniform_real_distribution<double> pos(0.3, 2.0);
  for (int trial = 0; trial < 3; ++trial) {
    const double y = u(rng);
    const double mean = u(rng);
    const double var = pos(rng);
    const double sigma = pos(rng);
    std::normal_distribution<double> f(mean, std::sqrt(var));
    double acc = 0.0;
    double acc2 = 0.0;
    constexpr int kSamples = 1'000'000;
    for (int i = 0; i < kSamples; ++i) {
      const double r = y - f(rng);
      const double l =
          -0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma) - r * r / (2.0 * sigma * sigma);
      acc += l;
      acc2 += l * l;
    }
    const double mc = acc / kSamples;
    // five standard errors of the Monte Carlo mean
    const double se = std::sqrt((acc2 / kSamples - mc * mc) / kSamples);
    EXPECT_NEAR(expected_log_lik(y, {mean, var, var + sigma * sigma}, sigma), mc, 5.0 * se);
  }
}

TEST(PriorChain, SingleSiteIsScalarOu) {
  Hyperparams h;
  h.temporal = {5.0, 2.0};
  h.jitter = 1e-6;
  h.inducing.spatial = {{1.0, 2.0}};
  h.inducing.times = {-10.0, -7.0, -1.0};
  h.inducing.bbox = {0, 2, 0, 3};
  const auto chain = build_prior_chain(h);
  ASSERT_EQ(chain.state_dim(), 1);
  EXPECT_NEAR(chain.initial_cov()(0, 0), 4.0 * (1.0 + 1e-6), 1e-14);
  const double a = std::exp(-3.0 / 5.0);
  EXPECT_NEAR(chain.transition(0)(0, 0), a, 1e-15);
  EXPECT_NEAR(chain.noise(0)(0, 0), 4.0 * (1.0 + 1e-6) * (1.0 - a * a), 1e-13);
}

TEST(PriorChain, StationaryAtEveryGap) {
  std::mt19937_64 rng(3);
  const auto h = small_hyper(rng, 5, 4);
  const auto chain = build_prior_chain(h);
  for (std::size_t j = 0; j + 1 < chain.num_knots(); ++j) {
    const Mat &a = chain.transition(j);
    const Mat lhs = a * chain.initial_cov() * a.transpose() + chain.noise(j);
    EXPECT_LT((lhs - chain.initial_cov()).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(PriorChain, BlocksMatchDenseProductGram) {
  std::mt19937_64 rng(4);
  auto h = small_hyper(rng, 3, 2);
  h.jitter = 0.0;
  const auto chain = build_prior_chain(h);
  const oracle::Kernel k{h.spatial.ell_lon, h.spatial.ell_lat, h.temporal.ell_t,
                         h.temporal.sigma_f};
  std::vector<oracle::Point> p0;
  std::vector<oracle::Point> p1;
  for (const auto &z : h.inducing.spatial) {
    p0.push_back({z.lon, z.lat, h.inducing.times[0]});
    p1.push_back({z.lon, z.lat, h.inducing.times[1]});
  }
  const Mat k00 = oracle::gram(p0, p0, k);
  const Mat k10 = oracle::gram(p1, p0, k);
  const Mat k11 = oracle::gram(p1, p1, k);
  const Mat a = k10 * k00.inverse();
  const Mat q = k11 - a * k10.transpose();
  EXPECT_LT((chain.initial_cov() - k00).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((chain.transition(0) - a).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((chain.noise(0) - q).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Projection, OnSiteOnKnotIsExact) {
  std::mt19937_64 rng(5);
  const auto h = small_hyper(rng, 4, 3);
  const PriorStructure s(h);
  const auto p = project(h.inducing.spatial[2], h.inducing.times[1], s);
  EXPECT_EQ(p.bridge.lower, 1u);
  EXPECT_FALSE(p.bridge.upper.has_value());
  for (Eigen::Index i = 0; i < p.spatial_weights.size(); ++i) {
    EXPECT_NEAR(p.spatial_weights(i), i == 2 ? 1.0 : 0.0, 1e-6);
  }
  const double sf2 = h.temporal.sigma_f * h.temporal.sigma_f;
  EXPECT_LE(p.gamma, h.jitter * sf2 * 1.01);
}

TEST(VariationalState, CacheMatchesRecomputation) {
  std::mt19937_64 rng(6);
  const auto h = small_hyper(rng, 4, 4);
  const PriorStructure s(h);
  const auto batch = random_batch(rng, 30);
  const auto v = natgrad_step(batch, VariationalState::prior(s), s, 30.0, 0.7);
  const auto fresh = kalman_filter_smooth(s.chain(), v.sites);
  for (std::size_t j = 0; j < fresh.smoothed_means.size(); ++j) {
    EXPECT_LT((fresh.smoothed_means[j] - v.posterior.smoothed_means[j]).cwiseAbs().maxCoeff(),
              1e-9);
    EXPECT_LT((fresh.smoothed_covs[j] - v.posterior.smoothed_covs[j]).cwiseAbs().maxCoeff(), 1e-9);
  }
  for (std::size_t j = 0; j < fresh.pair_cross_covs.size(); ++j) {
    EXPECT_LT((fresh.pair_cross_covs[j] - v.posterior.pair_cross_covs[j]).cwiseAbs().maxCoeff(),
              1e-9);
  }
  EXPECT_NEAR(fresh.log_normalizer, v.posterior.log_normalizer,
              1e-9 * std::max(1.0, std::abs(fresh.log_normalizer)));
}

TEST(SparseGp, ZeroSitesElboIsScaledPriorExpectation) {
  std::mt19937_64 rng(7);
  const auto h = small_hyper(rng, 4, 3);
  const PriorStructure s(h);
  const auto v = VariationalState::prior(s);
  const auto batch = random_batch(rng, 20);
  double sum = 0.0;
  for (const auto &r : batch) {
    sum += expected_log_lik(r.value_centered, latent_marginal(r.coords(), r.time_ka(), v, s),
                            h.noise_sigma);
  }
  EXPECT_NEAR(elbo(batch, v, s, 50.0), 2.5 * sum, 1e-9 * std::abs(sum));
}

TEST(SparseGp, VariancesBoundedBelow) {
  std::mt19937_64 rng(8);
  const auto h = small_hyper(rng, 5, 4);
  const PriorStructure s(h);
  const auto batch = random_batch(rng, 40);
  const auto v = natgrad_step(batch, VariationalState::prior(s), s, 40.0, 1.0);
  for (const auto &r : random_batch(rng, 100)) {
    const auto m = latent_marginal(r.coords(), r.time_ka(), v, s);
    EXPECT_GE(m.var_latent, 0.0);
    EXPECT_GE(m.var_observation, h.noise_sigma * h.noise_sigma);
  }
}

TEST(SparseGp, SameQueryTwiceIsIdentical) {
  std::mt19937_64 rng(9);
  const auto h = small_hyper(rng, 5, 4);
  const PriorStructure s(h);
  const auto v = natgrad_step(random_batch(rng, 40), VariationalState::prior(s), s, 40.0, 1.0);
  const std::vector<std::pair<LonLat, double>> pts{{{1.0, 2.0}, -3.3}, {{1.0, 2.0}, -3.3}};
  const auto out = predict(pts, v, s, BaselineModel::constant(0.5));
  EXPECT_EQ(out[0].mean, out[1].mean);
  EXPECT_EQ(out[0].var_latent, out[1].var_latent);
}

TEST(SparseGp, ElboInvariantUnderBatchOrder) {
  std::mt19937_64 rng(10);
  const auto h = small_hyper(rng, 5, 4);
  const PriorStructure s(h);
  auto batch = random_batch(rng, 40);
  const auto v = natgrad_step(batch, VariationalState::prior(s), s, 80.0, 0.8);
  const double e0 = elbo(batch, v, s, 80.0);
  std::shuffle(batch.begin(), batch.end(), rng);
  EXPECT_NEAR(elbo(batch, v, s, 80.0), e0, 1e-10 * std::abs(e0));
}

TEST(SparseGp, ElboInvariantUnderInducingPermutation) {
  std::mt19937_64 rng(11);
  const auto h = small_hyper(rng, 5, 4);
  const PriorStructure s(h);
  const auto batch = random_batch(rng, 40);
  const auto v = natgrad_step(batch, VariationalState::prior(s), s, 40.0, 0.6);
  const double e0 = elbo(batch, v, s, 40.0);

  std::vector<int> perm(5);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> p(5);
  for (int i = 0; i < 5; ++i) {
    p.indices()(i) = perm[static_cast<std::size_t>(i)];
  }
  // new index perm[i] holds old point i
  Hyperparams hp = h;
  for (int i = 0; i < 5; ++i) {
    hp.inducing.spatial[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] =
        h.inducing.spatial[static_cast<std::size_t>(i)];
  }
  const PriorStructure sp(hp);
  VariationalState vp;
  vp.sites = v.sites;
  for (auto &site : vp.sites.knots) {
    site.lambda1 = p * site.lambda1;
    site.Lambda2 = p * site.Lambda2 * p.transpose();
  }
  for (auto &c : vp.sites.cross) {
    c = p * c * p.transpose();
  }
  vp.refresh(sp);
  EXPECT_NEAR(elbo(batch, vp, sp, 40.0), e0, 1e-9 * std::abs(e0));
}

TEST(SparseGp, FullBatchElboNonDecreasingAtHalfStep) {
  std::mt19937_64 rng(12);
  const auto h = small_hyper(rng, 6, 5);
  const PriorStructure s(h);
  const auto batch = random_batch(rng, 60);
  auto v = VariationalState::prior(s);
  double prev = elbo(batch, v, s, 60.0);
  for (int step = 0; step < 10; ++step) {
    v = natgrad_step(batch, v, s, 60.0, 0.5);
    const double e = elbo(batch, v, s, 60.0);
    EXPECT_GE(e, prev - 1e-9 * std::abs(prev)) << "step " << step;
    prev = e;
  }
}

TEST(HyperGradient, LengthScaleCoordinatesEqualUnderLonLatSymmetry) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-8, 8), t(-10, 0);
  std::normal_distribution<double> y(0.0, 1.0);
  Hyperparams h;
  h.spatial = {7.0, 7.0};
  h.temporal = {4.0, 1.2};
  h.noise_sigma = 0.5;
  h.jitter = 1e-8;
  for (int i = 0; i < 3; ++i) {
    const double a = u(rng);
    const double b = u(rng);
    h.inducing.spatial.push_back({a, b});
    h.inducing.spatial.push_back({b, a});
  }
  h.inducing.times = {-10.0, -5.0, 0.0};
  h.inducing.bbox = {-8, 8, -8, 8};
  std::vector<ObservationRecord> batch;
  for (int i = 0; i < 15; ++i) {
    const double a = u(rng);
    const double b = u(rng);
    const double age = -1000.0 * t(rng);
    const double v = y(rng);
    for (const auto &[lon, lat] : {std::pair{a, b}, std::pair{b, a}}) {
      ObservationRecord r;
      r.lon = lon;
      r.lat = lat;
      r.age_bp = age;
      r.value = r.value_centered = v;
      r.source = "test";
      batch.push_back(r);
    }
  }
  const PriorStructure s(h);
  const auto v = natgrad_step(batch, VariationalState::prior(s), s, 30.0, 1.0);
  const auto g = hyper_gradient(batch, v, s, 30.0);
  EXPECT_NEAR(g.grad(0), g.grad(1), 1e-8 * std::max(1.0, std::abs(g.grad(0))));
}

TEST(HyperGradient, LogSigmaStationaryAtScannedOptimum) {
  std::mt19937_64 rng(14);
  const auto base = small_hyper(rng, 5, 4);
  const auto batch = random_batch(rng, 50);
  const auto v0 = [&] {
    const PriorStructure s(base);
    return natgrad_step(batch, VariationalState::prior(s), s, 50.0, 1.0);
  }();
  // sites held fixed, as in the gradient
  auto value = [&](double log_sigma) {
    Hyperparams h = base;
    h.noise_sigma = std::exp(log_sigma);
    const PriorStructure s(h);
    VariationalState v;
    v.sites = v0.sites;
    v.refresh(s);
    return elbo(batch, v, s, 50.0);
  };
  // golden-section search for the maximizer over log sigma
  double lo = std::log(0.05);
  double hi = std::log(10.0);
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - g * (hi - lo);
  double x2 = lo + g * (hi - lo);
  double f1 = value(x1);
  double f2 = value(x2);
  while (hi - lo > 1e-9) {
    if (f1 < f2) {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + g * (hi - lo);
      f2 = value(x2);
    } else {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - g * (hi - lo);
      f1 = value(x1);
    }
  }
  Hyperparams h = base;
  h.noise_sigma = std::exp(0.5 * (lo + hi));
  const PriorStructure s(h);
  VariationalState v;
  v.sites = v0.sites;
  v.refresh(s);
  const auto grad = hyper_gradient(batch, v, s, 50.0);
  EXPECT_NEAR(grad.grad(Hyperparams::kLogSigma), 0.0, 1e-3);
}
