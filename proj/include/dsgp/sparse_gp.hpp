#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsgp/block_tridiag.hpp"
#include "dsgp/data_pipeline.hpp"
#include "dsgp/errors.hpp"
#include "dsgp/kernels.hpp"
#include "dsgp/linalg.hpp"
#include "dsgp/parallel.hpp"
#include "dsgp/state_space.hpp"

namespace dsgp {

struct BoundingBox {
  double lon_min = -180.0;
  double lon_max = 180.0;
  double lat_min = -90.0;
  double lat_max = 90.0;

  bool contains(const LonLat &x) const {
    return x.lon >= lon_min && x.lon <= lon_max && x.lat >= lat_min && x.lat <= lat_max;
  }

  LonLat clamp(const LonLat &x) const {
    return {std::clamp(x.lon, lon_min, lon_max), std::clamp(x.lat, lat_min, lat_max)};
  }

  static BoundingBox of(std::span<const LonLat> pts) {
    if (pts.empty()) {
      throw InvalidInput("bounding box of an empty point set");
    }
    BoundingBox b{pts[0].lon, pts[0].lon, pts[0].lat, pts[0].lat};
    for (const auto &p : pts) {
      b.lon_min = std::min(b.lon_min, p.lon);
      b.lon_max = std::max(b.lon_max, p.lon);
      b.lat_min = std::min(b.lat_min, p.lat);
      b.lat_max = std::max(b.lat_max, p.lat);
    }
    return b;
  }
};

/// Spatial inducing locations (trainable) and temporal knots (fixed, ka).
struct InducingStructure {
  std::vector<LonLat> spatial;
  std::vector<double> times;
  BoundingBox bbox;

  std::size_t num_spatial() const { return spatial.size(); }
  std::size_t num_temporal() const { return times.size(); }

  void validate() const {
    if (spatial.empty() || times.empty()) {
      throw InvalidInput("need at least one spatial and one temporal inducing point");
    }
    for (std::size_t j = 1; j < times.size(); ++j) {
      if (!(times[j] > times[j - 1])) {
        throw InvalidInput("temporal inducing knots must be strictly increasing");
      }
    }
    for (const auto &z : spatial) {
      if (!bbox.contains(z)) {
        throw InvalidInput("spatial inducing point outside the bounding box");
      }
    }
  }
};

struct Hyperparams {
  SpatialParams spatial;
  TemporalParams temporal;
  double noise_sigma = 1.6;
  InducingStructure inducing;
  double jitter = 1e-6;

  static constexpr std::size_t kNumScalars = 5;
  enum Index : std::size_t { kLogEllLon = 0, kLogEllLat, kLogEllT, kLogSigmaF, kLogSigma };

  void validate() const {
    spatial.validate();
    temporal.validate();
    if (!(noise_sigma > 0.0) || !std::isfinite(noise_sigma)) {
      throw InvalidInput("noise sigma must be positive and finite");
    }
    if (!(jitter >= 0.0)) {
      throw InvalidInput("jitter must be non-negative");
    }
    inducing.validate();
  }

  std::size_t num_unconstrained() const { return kNumScalars + 2 * inducing.num_spatial(); }

  /// [log ell_lon, log ell_lat, log ell_t, log sigma_f, log sigma, Z_0.lon,
  /// Z_0.lat, Z_1.lon, ...]
  Vec pack() const {
    Vec v(num_unconstrained());
    v(kLogEllLon) = std::log(spatial.ell_lon);
    v(kLogEllLat) = std::log(spatial.ell_lat);
    v(kLogEllT) = std::log(temporal.ell_t);
    v(kLogSigmaF) = std::log(temporal.sigma_f);
    v(kLogSigma) = std::log(noise_sigma);
    for (std::size_t i = 0; i < inducing.num_spatial(); ++i) {
      v(kNumScalars + 2 * i) = inducing.spatial[i].lon;
      v(kNumScalars + 2 * i + 1) = inducing.spatial[i].lat;
    }
    return v;
  }

  void unpack(const Vec &v) {
    if (static_cast<std::size_t>(v.size()) != num_unconstrained()) {
      throw InvalidInput("unconstrained parameter vector has the wrong length");
    }
    spatial.ell_lon = std::exp(v(kLogEllLon));
    spatial.ell_lat = std::exp(v(kLogEllLat));
    temporal.ell_t = std::exp(v(kLogEllT));
    temporal.sigma_f = std::exp(v(kLogSigmaF));
    noise_sigma = std::exp(v(kLogSigma));
    for (std::size_t i = 0; i < inducing.num_spatial(); ++i) {
      inducing.spatial[i] = {v(kNumScalars + 2 * i), v(kNumScalars + 2 * i + 1)};
    }
  }

  void clamp_inducing() {
    for (auto &z : inducing.spatial) {
      z = inducing.bbox.clamp(z);
    }
  }
};

/// Chain prior over inducing states: P0 = Kzz (x) P_inf, A_j = I (x) A_t,
/// Q_j = Kzz (x) Q_t.
inline LinearGaussianChain build_prior_chain(const Hyperparams &h) {
  h.validate();
  const auto &z = h.inducing.spatial;
  const Mat kzz = spatial_gram(z, z, h.spatial, h.jitter);
  const OuStateSpace ou(h.temporal);
  const Mat ks = ou.variance() * kzz;
  const auto n = ks.rows();
  ChainDynamics dyn{
      [ou, n](double dt) -> Mat { return ou.decay(dt) * Mat::Identity(n, n); },
      [ou, kzz](double dt) -> Mat { return ou.process_noise(dt)(0, 0) * kzz; }};
  return LinearGaussianChain::stationary(h.inducing.times, ks, std::move(dyn));
}

/// Normalized OU precision over the knots (tridiagonal) and its derivative
/// with respect to log(ell_t).
struct KnotPrecision {
  std::vector<double> diag, lower, d_diag, d_lower;
};

inline KnotPrecision ou_knot_precision(std::span<const double> knots, double ell_t) {
  const auto m = knots.size();
  KnotPrecision p;
  p.diag.assign(m, 0.0);
  p.d_diag.assign(m, 0.0);
  p.lower.assign(m > 0 ? m - 1 : 0, 0.0);
  p.d_lower.assign(p.lower.size(), 0.0);
  if (m == 1) {
    p.diag[0] = 1.0;
    return p;
  }
  p.diag[0] = 1.0; // P0^{-1}; the a^2/(1-a^2) term is added below
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const double gap = knots[j + 1] - knots[j];
    const double a = std::exp(-gap / ell_t);
    const double da = a * gap / ell_t;
    const double q = 1.0 - a * a;
    const double dq2 = 2.0 * a / (q * q); // d/da of 1/q and of a^2/q
    p.diag[j] += a * a / q;
    p.d_diag[j] += dq2 * da;
    p.diag[j + 1] += 1.0 / q;
    p.d_diag[j + 1] += dq2 * da;
    p.lower[j] = -a / q;
    p.d_lower[j] = -(1.0 + a * a) / (q * q) * da;
  }
  return p;
}

/// Everything derived from the hyperparameters that predictions and the
/// objective need: the jittered unit-variance inducing Gram, its factor and
/// inverse, the prior chain, and the chain's information form tau (x) Ks^{-1}.
class PriorStructure {
public:
  explicit PriorStructure(const Hyperparams &h)
      : hyper_(h), chain_(build_prior_chain(h)) {
    kzz_ = spatial_gram(h.inducing.spatial, h.inducing.spatial, h.spatial, h.jitter);
    kzz_llt_ = checked_llt(kzz_, "inducing Gram matrix");
    const auto n = kzz_.rows();
    kzz_inv_ = symmetrize(kzz_llt_.solve(Mat::Identity(n, n)));
    const Mat lk = kzz_llt_.matrixL();
    const double logdet_k = 2.0 * lk.diagonal().array().log().sum();

    const double sf2 = h.temporal.sigma_f * h.temporal.sigma_f;
    const auto &knots = h.inducing.times;
    const auto m = knots.size();
    const auto tau = ou_knot_precision(knots, h.temporal.ell_t);
    const Mat ks_inv = kzz_inv_ / sf2;
    auto &j = info_.precision;
    j.diag.resize(m);
    j.lower.resize(m - 1);
    info_.shift.assign(m, Vec::Zero(n));
    const double nd = static_cast<double>(n);
    double logdet_cov = logdet_k + nd * std::log(sf2);
    for (std::size_t k = 0; k < m; ++k) {
      j.diag[k] = tau.diag[k] * ks_inv;
      if (k + 1 < m) {
        j.lower[k] = tau.lower[k] * ks_inv;
        const double a = std::exp(-(knots[k + 1] - knots[k]) / h.temporal.ell_t);
        logdet_cov += logdet_k + nd * std::log(sf2 * (1.0 - a * a));
      }
    }
    info_.logdet = -logdet_cov;
  }

  const Hyperparams &hyper() const { return hyper_; }
  const LinearGaussianChain &chain() const { return chain_; }
  const Mat &kzz() const { return kzz_; }
  const Eigen::LLT<Mat> &kzz_llt() const { return kzz_llt_; }
  const Mat &kzz_inv() const { return kzz_inv_; }
  const ChainInformation &information() const { return info_; }
  Eigen::Index state_dim() const { return kzz_.rows(); }

private:
  Hyperparams hyper_;
  LinearGaussianChain chain_;
  Mat kzz_;
  Eigen::LLT<Mat> kzz_llt_;
  Mat kzz_inv_;
  ChainInformation info_;
};

/// Unit-variance OU bridge between the two knots around t (or the nearest
/// knot outside the range), with derivatives with respect to log(ell_t).
struct TemporalBridge {
  std::size_t lower = 0;
  std::optional<std::size_t> upper;
  double c_minus = 1.0;
  double c_plus = 0.0;
  double var = 0.0;
  double dc_minus = 0.0;
  double dc_plus = 0.0;
  double dvar = 0.0;
};

inline TemporalBridge ou_bridge(double t, std::span<const double> knots, double ell_t) {
  TemporalBridge br;
  const auto one_sided = [&](std::size_t k, double gap) {
    br.lower = k;
    const double a = std::exp(-gap / ell_t);
    const double da = a * gap / ell_t;
    br.c_minus = a;
    br.var = 1.0 - a * a;
    br.dc_minus = da;
    br.dvar = -2.0 * a * da;
  };
  if (t >= knots.back()) {
    one_sided(knots.size() - 1, t - knots.back());
    return br;
  }
  if (t < knots.front()) {
    one_sided(0, knots.front() - t);
    return br;
  }
  const auto j = static_cast<std::size_t>(std::upper_bound(knots.begin(), knots.end(), t) -
                                          knots.begin()) -
                 1;
  br.lower = j;
  if (t == knots[j]) {
    return br;
  }
  br.upper = j + 1;
  const double g1 = t - knots[j];
  const double g2 = knots[j + 1] - t;
  const double a = std::exp(-g1 / ell_t);
  const double b = std::exp(-g2 / ell_t);
  const double da = a * g1 / ell_t;
  const double db = b * g2 / ell_t;
  const double a2 = a * a;
  const double b2 = b * b;
  const double d = 1.0 - a2 * b2;
  const double d2 = d * d;
  br.c_minus = a * (1.0 - b2) / d;
  br.c_plus = b * (1.0 - a2) / d;
  br.var = (1.0 - a2) * (1.0 - b2) / d;
  const double dcm_da = (1.0 - b2) * (1.0 + a2 * b2) / d2;
  const double dcm_db = -2.0 * a * b * (1.0 - a2) / d2;
  const double dcp_db = (1.0 - a2) * (1.0 + a2 * b2) / d2;
  const double dcp_da = -2.0 * a * b * (1.0 - b2) / d2;
  const double dv_da = -2.0 * a * (1.0 - b2) * (1.0 - b2) / d2;
  const double dv_db = -2.0 * b * (1.0 - a2) * (1.0 - a2) / d2;
  br.dc_minus = dcm_da * da + dcm_db * db;
  br.dc_plus = dcp_da * da + dcp_db * db;
  br.dvar = dv_da * da + dv_db * db;
  return br;
}

/// f(x,t) | s(tau_lower), s(tau_upper) ~ N(W_- s_lower + W_+ s_upper, gamma)
/// with W_+- = c_+- b(x)'.
struct Projection {
  TemporalBridge bridge;
  Vec spatial_weights; // b(x) = Kzz^{-1} k(Z, x)
  double nystrom_quad = 0.0; // k(x,Z) Kzz^{-1} k(Z,x)
  double gamma = 0.0;

  Vec weights_minus() const { return bridge.c_minus * spatial_weights; }
  Vec weights_plus() const { return bridge.c_plus * spatial_weights; }
};

inline Projection project(const LonLat &x, double t, const PriorStructure &s) {
  const auto &h = s.hyper();
  Projection p;
  p.bridge = ou_bridge(t, h.inducing.times, h.temporal.ell_t);
  const Vec k = spatial_cross(x, h.inducing.spatial, h.spatial);
  p.spatial_weights = s.kzz_llt().solve(k);
  p.nystrom_quad = k.dot(p.spatial_weights);
  const double sf2 = h.temporal.sigma_f * h.temporal.sigma_f;
  // spatial Nystrom gap plus the temporal bridge gap seen through b(x)
  p.gamma = std::max(0.0, sf2 * (1.0 - (1.0 - p.bridge.var) * p.nystrom_quad));
  return p;
}

struct PredictiveMarginal {
  double mean = 0.0;
  double var_latent = 0.0;
  double var_observation = 0.0;
};

/// Site parameters and the chain posterior they induce with the prior.
struct VariationalState {
  ChainSites sites;
  ChainPosterior posterior;
  /// Factor of the posterior precision, shared by copies of the state.
  std::shared_ptr<const BlockTridiagFactor> factor;

  static VariationalState prior(const PriorStructure &s) {
    VariationalState v;
    v.sites = ChainSites::zero(s.chain().num_knots(), s.state_dim());
    v.refresh(s);
    return v;
  }

  void refresh(const PriorStructure &s) {
    auto r = smooth_information(s.information(), sites);
    posterior = std::move(r.posterior);
    factor = std::move(r.factor);
  }
};

namespace detail {

// Moments of f at one datum under q, plus the pieces the gradient reuses.
struct LatentMoments {
  double mean = 0.0;
  double var = 0.0;
  Vec mixed_mean;   // c_- mu_lower + c_+ mu_upper
  Vec psi_b;        // Psi b, Psi the projected pair covariance
  double b_mu_lower = 0.0;
  double b_mu_upper = 0.0;
  double b_s_lower = 0.0; // b' S_lower b
  double b_s_upper = 0.0;
  double b_c = 0.0; // b' Cov(s_lower, s_upper) b
};

inline LatentMoments latent_moments(const Projection &p, const ChainPosterior &q) {
  const auto &br = p.bridge;
  const Vec &b = p.spatial_weights;
  LatentMoments m;
  const Vec &mu_lo = q.smoothed_means[br.lower];
  const Mat &s_lo = q.smoothed_covs[br.lower];
  const Vec s_lo_b = s_lo * b;
  m.b_mu_lower = b.dot(mu_lo);
  m.b_s_lower = b.dot(s_lo_b);
  m.mixed_mean = br.c_minus * mu_lo;
  m.psi_b = br.c_minus * br.c_minus * s_lo_b;
  if (br.upper) {
    const auto u = *br.upper;
    const Vec &mu_hi = q.smoothed_means[u];
    const Vec s_hi_b = q.smoothed_covs[u] * b;
    const Mat &c = q.pair_cross_covs[br.lower];
    const Vec cb = c * b;
    const Vec ctb = c.transpose() * b;
    m.b_mu_upper = b.dot(mu_hi);
    m.b_s_upper = b.dot(s_hi_b);
    m.b_c = b.dot(cb);
    m.mixed_mean += br.c_plus * mu_hi;
    m.psi_b += br.c_plus * br.c_plus * s_hi_b + br.c_minus * br.c_plus * (cb + ctb);
  }
  m.mean = b.dot(m.mixed_mean);
  m.var = std::max(0.0, b.dot(m.psi_b)) + p.gamma;
  return m;
}

struct Datum {
  LonLat x;
  double t;
  double y;
};

inline void check_batch(std::span<const ObservationRecord> batch, double n_total) {
  if (batch.empty()) {
    throw InvalidInput("empty batch");
  }
  if (n_total < static_cast<double>(batch.size())) {
    throw InvalidInput("N_total smaller than the batch");
  }
  for (const auto &r : batch) {
    if (!std::isfinite(r.value_centered)) {
      throw InvalidInput("batch record is not centered");
    }
  }
}

// Accumulates a weighted b b' into the pair blocks touched by one datum.
inline void add_tilt(ChainSites &acc, const Projection &p, double lambda1_scalar,
                     double lambda2_scalar) {
  const auto &br = p.bridge;
  const Vec &b = p.spatial_weights;
  auto &lo = acc.knots[br.lower];
  lo.lambda1 += br.c_minus * lambda1_scalar * b;
  lo.Lambda2.selfadjointView<Eigen::Lower>().rankUpdate(b, br.c_minus * br.c_minus * lambda2_scalar);
  if (br.upper) {
    auto &hi = acc.knots[*br.upper];
    hi.lambda1 += br.c_plus * lambda1_scalar * b;
    hi.Lambda2.selfadjointView<Eigen::Lower>().rankUpdate(b, br.c_plus * br.c_plus * lambda2_scalar);
    acc.cross[br.lower].selfadjointView<Eigen::Lower>().rankUpdate(
        b, br.c_minus * br.c_plus * lambda2_scalar);
  }
}

inline void finish_lower(ChainSites &acc) {
  for (auto &k : acc.knots) {
    k.Lambda2.triangularView<Eigen::StrictlyUpper>() = k.Lambda2.transpose();
  }
  for (auto &c : acc.cross) {
    c.triangularView<Eigen::StrictlyUpper>() = c.transpose();
  }
}

inline void add_into(ChainSites &dst, const ChainSites &src) {
  for (std::size_t k = 0; k < dst.knots.size(); ++k) {
    dst.knots[k].lambda1 += src.knots[k].lambda1;
    dst.knots[k].Lambda2 += src.knots[k].Lambda2;
  }
  for (std::size_t k = 0; k < dst.cross.size(); ++k) {
    dst.cross[k] += src.cross[k];
  }
}

} // namespace detail

inline double expected_log_lik(double y, const PredictiveMarginal &marg, double sigma) {
  if (!(sigma > 0.0)) {
    throw InvalidInput("likelihood sigma must be positive");
  }
  if (marg.var_latent < 0.0) {
    throw InvalidInput("negative latent variance");
  }
  const double s2 = sigma * sigma;
  const double r = y - marg.mean;
  return -0.5 * std::log(2.0 * std::numbers::pi * s2) - (r * r + marg.var_latent) / (2.0 * s2);
}

/// Latent marginal q(f(x,t)) without the baseline shift.
inline PredictiveMarginal latent_marginal(const LonLat &x, double t, const VariationalState &v,
                                          const PriorStructure &s) {
  const auto p = project(x, t, s);
  const auto m = detail::latent_moments(p, v.posterior);
  const double s2 = s.hyper().noise_sigma * s.hyper().noise_sigma;
  return {m.mean, m.var, m.var + s2};
}

/// Minibatch estimate of the evidence lower bound (centered records).
inline double elbo(std::span<const ObservationRecord> batch, const VariationalState &v,
                   const PriorStructure &s, double n_total) {
  detail::check_batch(batch, n_total);
  const double scale = n_total / static_cast<double>(batch.size());
  const double sigma = s.hyper().noise_sigma;
  std::vector<double> partial(num_chunks(batch.size()), 0.0);
  for_each_chunk(batch.size(), [&](std::size_t c, std::size_t begin, std::size_t end) {
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto &r = batch[i];
      const auto marg = latent_marginal(r.coords(), r.time_ka(), v, s);
      acc += expected_log_lik(r.value_centered, marg, sigma);
    }
    partial[c] = acc;
  });
  double lik = 0.0;
  for (double p : partial) {
    lik += p;
  }
  return scale * lik - site_kl(v.posterior, v.sites);
}

/// Batch-scaled natural-parameter target of one CVI step (the rho = 1 sites).
inline ChainSites likelihood_sites(std::span<const ObservationRecord> batch,
                                   const VariationalState &v, const PriorStructure &s,
                                   double n_total) {
  detail::check_batch(batch, n_total);
  const double scale = n_total / static_cast<double>(batch.size());
  const double s2 = s.hyper().noise_sigma * s.hyper().noise_sigma;
  const auto m_t = s.chain().num_knots();
  const auto n = s.state_dim();
  std::vector<ChainSites> partial(num_chunks(batch.size()));
  for_each_chunk(batch.size(), [&](std::size_t c, std::size_t begin, std::size_t end) {
    ChainSites acc = ChainSites::zero(m_t, n);
    for (std::size_t i = begin; i < end; ++i) {
      const auto &r = batch[i];
      const auto p = project(r.coords(), r.time_ka(), s);
      const auto mom = detail::latent_moments(p, v.posterior);
      // tilt gradients of E[log N(y | f, s2)] with respect to mean and variance
      const double g1 = (r.value_centered - mom.mean) / s2;
      const double g2 = -0.5 / s2;
      detail::add_tilt(acc, p, scale * (g1 - 2.0 * g2 * mom.mean), scale * (-2.0 * g2));
    }
    partial[c] = std::move(acc);
  });
  ChainSites total = ChainSites::zero(m_t, n);
  for (const auto &p : partial) {
    detail::add_into(total, p);
  }
  detail::finish_lower(total);
  return total;
}

/// One CVI natural-gradient step: sites <- (1 - rho) sites + rho target.
inline VariationalState natgrad_step(std::span<const ObservationRecord> batch,
                                     const VariationalState &v, const PriorStructure &s,
                                     double n_total, double rho) {
  if (!(rho > 0.0 && rho <= 1.0) && rho != 0.0) {
    throw InvalidInput("natural-gradient step size must lie in (0, 1]");
  }
  if (rho == 0.0) {
    return v;
  }
  const auto target = likelihood_sites(batch, v, s, n_total);
  VariationalState out;
  out.sites = v.sites;
  if (out.sites.cross.empty()) {
    out.sites.cross.assign(target.cross.size(), Mat::Zero(s.state_dim(), s.state_dim()));
  }
  for (std::size_t k = 0; k < out.sites.knots.size(); ++k) {
    auto &site = out.sites.knots[k];
    site.lambda1 = (1.0 - rho) * site.lambda1 + rho * target.knots[k].lambda1;
    site.Lambda2 = (1.0 - rho) * site.Lambda2 + rho * target.knots[k].Lambda2;
    site.log_scale = (1.0 - rho) * site.log_scale;
  }
  for (std::size_t k = 0; k < out.sites.cross.size(); ++k) {
    out.sites.cross[k] = (1.0 - rho) * out.sites.cross[k] + rho * target.cross[k];
  }
  out.refresh(s);
  return out;
}

inline std::vector<PredictiveMarginal> predict(std::span<const std::pair<LonLat, double>> points,
                                               const VariationalState &v,
                                               const PriorStructure &s,
                                               const BaselineModel &baseline) {
  std::vector<PredictiveMarginal> out(points.size());
  for_each_chunk(points.size(), [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto &[x, t] = points[i];
      auto m = latent_marginal(x, t, v, s);
      m.mean += baseline(x);
      out[i] = m;
    }
  });
  return out;
}

struct HyperGradient {
  double elbo = 0.0;
  Vec grad; // ordered as Hyperparams::pack()
};

/// ELBO and its gradient with respect to the unconstrained hyperparameters,
/// with the sites held fixed (q moves with the prior through the sites).
///
/// Writing q = p t / Z with t the sites, the bound is E_q[F] + log Z with
/// F = E[log lik | u] - log t. Its derivative splits into the direct data
/// term E_q[dF], the score term Cov_q(F, d log p) and d log Z = E_q[d log p].
/// The last two only need the block-tridiagonal part of
///   M = Sigma_p - Sigma - mu mu' + Sigma D Sigma - mu v' - v mu',
/// where D = (target - site) precision and v = Sigma grad F(mu); the Sigma D
/// Sigma blocks come from one tangent sweep of the block LDL' factor.
inline HyperGradient hyper_gradient(std::span<const ObservationRecord> batch,
                                    const VariationalState &v, const PriorStructure &s,
                                    double n_total) {
  detail::check_batch(batch, n_total);
  const auto &h = s.hyper();
  const auto &z = h.inducing.spatial;
  const auto n = s.state_dim();
  const auto m_t = s.chain().num_knots();
  const double scale = n_total / static_cast<double>(batch.size());
  const double sf2 = h.temporal.sigma_f * h.temporal.sigma_f;
  const double s2 = h.noise_sigma * h.noise_sigma;
  const auto np = h.num_unconstrained();
  const auto &q = v.posterior;

  struct Partial {
    double lik = 0.0;
    Vec grad;
    Mat kbar;
    ChainSites target;
  };
  std::vector<Partial> partial(num_chunks(batch.size()));
  for_each_chunk(batch.size(), [&](std::size_t c, std::size_t begin, std::size_t end) {
    Partial acc{0.0, Vec::Zero(np), Mat::Zero(n, n), ChainSites::zero(m_t, n)};
    for (std::size_t i = begin; i < end; ++i) {
      const auto &r = batch[i];
      const auto x = r.coords();
      const double y = r.value_centered;
      const auto p = project(x, r.time_ka(), s);
      const auto mom = detail::latent_moments(p, q);
      const auto &br = p.bridge;
      const Vec &b = p.spatial_weights;
      const double resid = y - mom.mean;
      acc.lik += -0.5 * std::log(2.0 * std::numbers::pi * s2) - (resid * resid + mom.var) / (2.0 * s2);
      const double dm = resid / s2;
      const double dv = -0.5 / s2;

      acc.grad(Hyperparams::kLogSigma) += -1.0 + (resid * resid + mom.var) / s2;
      if (p.gamma > 0.0) {
        acc.grad(Hyperparams::kLogSigmaF) += dv * 2.0 * p.gamma;
      }
      const double d_cm = dm * mom.b_mu_lower +
                          dv * (2.0 * br.c_minus * mom.b_s_lower + 2.0 * br.c_plus * mom.b_c);
      const double d_cp = dm * mom.b_mu_upper +
                          dv * (2.0 * br.c_plus * mom.b_s_upper + 2.0 * br.c_minus * mom.b_c);
      const double d_var = dv * sf2 * p.nystrom_quad;
      acc.grad(Hyperparams::kLogEllT) += d_cm * br.dc_minus + d_cp * br.dc_plus + d_var * br.dvar;

      // b = K^{-1} k and nystrom_quad = k' K^{-1} k as functions of (k, K)
      const Vec b_bar = dm * mom.mixed_mean + dv * 2.0 * mom.psi_b;
      const double q_bar = dv * (-sf2 * (1.0 - br.var));
      const Vec alpha = s.kzz_llt().solve(b_bar);
      const Vec k_bar = alpha + 2.0 * q_bar * b;
      // lower triangle only; mirrored after the reduction
      acc.kbar.selfadjointView<Eigen::Lower>().rankUpdate(alpha, b, -0.5);
      acc.kbar.selfadjointView<Eigen::Lower>().rankUpdate(b, -q_bar);
      for (Eigen::Index k = 0; k < n; ++k) {
        const auto d = spatial_partials(z[static_cast<std::size_t>(k)], x, h.spatial);
        acc.grad(Hyperparams::kNumScalars + 2 * k) += k_bar(k) * d.d_lon1;
        acc.grad(Hyperparams::kNumScalars + 2 * k + 1) += k_bar(k) * d.d_lat1;
        acc.grad(Hyperparams::kLogEllLon) += k_bar(k) * d.d_log_ell_lon;
        acc.grad(Hyperparams::kLogEllLat) += k_bar(k) * d.d_log_ell_lat;
      }
      detail::add_tilt(acc.target, p, scale * y / s2, scale / s2);
    }
    partial[c] = std::move(acc);
  });

  double lik = 0.0;
  Vec grad = Vec::Zero(np);
  Mat kbar = Mat::Zero(n, n);
  ChainSites target = ChainSites::zero(m_t, n);
  for (auto &p : partial) {
    lik += p.lik;
    grad += p.grad;
    kbar += p.kbar;
    detail::add_into(target, p.target);
  }
  detail::finish_lower(target);
  kbar.triangularView<Eigen::StrictlyUpper>() = kbar.transpose();
  lik *= scale;
  grad *= scale;
  kbar *= scale;

  HyperGradient out;
  out.elbo = lik - site_kl(q, v.sites);

  // Prior-side contribution 1/2 tr(dJ_p M).
  const auto &sites = v.sites;
  const bool has_cross = !sites.cross.empty();
  BlockTridiag d_prec; // target - sites
  d_prec.diag.resize(m_t);
  d_prec.lower.resize(m_t - 1);
  std::vector<Vec> g(m_t);
  for (std::size_t k = 0; k < m_t; ++k) {
    d_prec.diag[k] = target.knots[k].Lambda2 - sites.knots[k].Lambda2;
    g[k] = target.knots[k].lambda1 - sites.knots[k].lambda1;
  }
  for (std::size_t k = 0; k + 1 < m_t; ++k) {
    d_prec.lower[k] = target.cross[k] - (has_cross ? sites.cross[k] : Mat::Zero(n, n));
  }
  const auto &mu = q.smoothed_means;
  for (std::size_t k = 0; k < m_t; ++k) {
    g[k] -= d_prec.diag[k] * mu[k];
    if (k > 0) {
      g[k] -= d_prec.lower[k - 1] * mu[k - 1];
    }
    if (k + 1 < m_t) {
      g[k] -= d_prec.lower[k].transpose() * mu[k + 1];
    }
  }
  if (!v.factor) {
    throw InvalidInput("hyper_gradient needs a refreshed variational state");
  }
  const auto &factor = *v.factor;
  const auto vv = factor.solve(g);
  BlockTridiag neg_d = d_prec;
  for (auto &m : neg_d.diag) {
    m = -m;
  }
  for (auto &m : neg_d.lower) {
    m = -m;
  }
  const auto sds = factor.selected_inverse_tangent(neg_d);

  const Mat ks = sf2 * s.kzz();
  std::vector<Mat> m_diag(m_t);
  std::vector<Mat> m_lower(m_t - 1);
  for (std::size_t k = 0; k < m_t; ++k) {
    m_diag[k] = ks - q.smoothed_covs[k] - mu[k] * mu[k].transpose() + sds.diag[k] -
                mu[k] * vv[k].transpose() - vv[k] * mu[k].transpose();
  }
  const auto &knots = h.inducing.times;
  for (std::size_t k = 0; k + 1 < m_t; ++k) {
    const double a = std::exp(-(knots[k + 1] - knots[k]) / h.temporal.ell_t);
    m_lower[k] = a * ks - q.pair_cross_covs[k].transpose() - mu[k + 1] * mu[k].transpose() +
                 sds.lower[k] - mu[k + 1] * vv[k].transpose() - vv[k + 1] * mu[k].transpose();
  }

  const Mat &kinv = s.kzz_inv();
  const Mat ks_inv = kinv / sf2;
  const auto tau = ou_knot_precision(knots, h.temporal.ell_t);
  double d_ell_t = 0.0;
  Mat r = Mat::Zero(n, n);
  for (std::size_t k = 0; k < m_t; ++k) {
    d_ell_t += 0.5 * tau.d_diag[k] * (ks_inv.cwiseProduct(m_diag[k])).sum();
    r += tau.diag[k] * m_diag[k];
  }
  for (std::size_t k = 0; k + 1 < m_t; ++k) {
    d_ell_t += tau.d_lower[k] * (ks_inv.cwiseProduct(m_lower[k])).sum();
    r += tau.lower[k] * (m_lower[k] + m_lower[k].transpose());
  }
  grad(Hyperparams::kLogEllT) += d_ell_t;
  grad(Hyperparams::kLogSigmaF) += -(ks_inv.cwiseProduct(r)).sum();
  kbar += symmetrize(-0.5 / sf2 * kinv * r * kinv);

  // Contract the Gram adjoint with dK/d(theta); diagonal entries are constant.
  for (std::size_t a = 0; a < z.size(); ++a) {
    for (std::size_t b = 0; b < a; ++b) {
      const auto d = spatial_partials(z[a], z[b], h.spatial);
      const double w = 2.0 * kbar(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      grad(Hyperparams::kLogEllLon) += w * d.d_log_ell_lon;
      grad(Hyperparams::kLogEllLat) += w * d.d_log_ell_lat;
      grad(Hyperparams::kNumScalars + 2 * a) += w * d.d_lon1;
      grad(Hyperparams::kNumScalars + 2 * a + 1) += w * d.d_lat1;
      grad(Hyperparams::kNumScalars + 2 * b) -= w * d.d_lon1;
      grad(Hyperparams::kNumScalars + 2 * b + 1) -= w * d.d_lat1;
    }
  }
  out.grad = std::move(grad);
  return out;
}

} // namespace dsgp
