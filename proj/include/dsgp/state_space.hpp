#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsgp/errors.hpp"
#include "dsgp/linalg.hpp"

namespace dsgp {

/// Continuous-time transition model of a stationary linear SDE, used to
/// discretize a chain at its knots and to bridge between knots.
struct ChainDynamics {
  std::function<Mat(double)> transition;
  std::function<Mat(double)> process_noise;
};

/// Markov prior over states s_0..s_{M-1} at strictly increasing knot times:
/// s_0 ~ N(m0, P0), s_{j+1} | s_j ~ N(A_j s_j, Q_j).
class LinearGaussianChain {
public:
  LinearGaussianChain(std::vector<double> times, std::vector<Mat> transitions,
                      std::vector<Mat> noises, Mat initial_cov,
                      std::optional<Vec> initial_mean = std::nullopt,
                      std::optional<ChainDynamics> dynamics = std::nullopt)
      : times_(std::move(times)), transitions_(std::move(transitions)),
        noises_(std::move(noises)), initial_cov_(std::move(initial_cov)),
        dynamics_(std::move(dynamics)) {
    if (times_.empty()) {
      throw InvalidInput("chain needs at least one knot");
    }
    for (std::size_t j = 1; j < times_.size(); ++j) {
      if (!(times_[j] > times_[j - 1])) {
        throw InvalidInput("chain knot times must be strictly increasing");
      }
    }
    const auto n = initial_cov_.rows();
    if (initial_cov_.cols() != n || n == 0) {
      throw InvalidInput("initial covariance must be square and nonempty");
    }
    if (transitions_.size() + 1 != times_.size() || noises_.size() + 1 != times_.size()) {
      throw InvalidInput("chain needs one transition and one noise per gap");
    }
    for (std::size_t j = 0; j < transitions_.size(); ++j) {
      if (transitions_[j].rows() != n || transitions_[j].cols() != n ||
          noises_[j].rows() != n || noises_[j].cols() != n) {
        throw InvalidInput("chain transition/noise dimension mismatch");
      }
    }
    initial_mean_ = initial_mean.value_or(Vec::Zero(n));
    if (initial_mean_.size() != n) {
      throw InvalidInput("initial mean dimension mismatch");
    }
  }

  /// Discretizes a stationary SDE at the given knots with P0 as the
  /// stationary covariance.
  static LinearGaussianChain stationary(std::vector<double> times, Mat stationary_cov,
                                        ChainDynamics dynamics) {
    std::vector<Mat> a;
    std::vector<Mat> q;
    for (std::size_t j = 1; j < times.size(); ++j) {
      const double dt = times[j] - times[j - 1];
      a.push_back(dynamics.transition(dt));
      q.push_back(dynamics.process_noise(dt));
    }
    return LinearGaussianChain(std::move(times), std::move(a), std::move(q),
                               std::move(stationary_cov), std::nullopt, std::move(dynamics));
  }

  std::size_t num_knots() const { return times_.size(); }
  Eigen::Index state_dim() const { return initial_cov_.rows(); }
  const std::vector<double> &times() const { return times_; }
  const Mat &transition(std::size_t j) const { return transitions_[j]; }
  const Mat &noise(std::size_t j) const { return noises_[j]; }
  const Mat &initial_cov() const { return initial_cov_; }
  const Vec &initial_mean() const { return initial_mean_; }
  const std::optional<ChainDynamics> &dynamics() const { return dynamics_; }

private:
  std::vector<double> times_;
  std::vector<Mat> transitions_;
  std::vector<Mat> noises_;
  Mat initial_cov_;
  Vec initial_mean_;
  std::optional<ChainDynamics> dynamics_;
};

/// Per-knot Gaussian factor exp(log_scale + lambda1' s - s' Lambda2 s / 2).
struct GaussianSite {
  Vec lambda1;
  Mat Lambda2;
  double log_scale = 0.0;

  static GaussianSite zero(Eigen::Index n) { return {Vec::Zero(n), Mat::Zero(n, n), 0.0}; }

  /// Normalized likelihood N(y; s, noise_var) of a scalar state.
  static GaussianSite from_observation(double y, double noise_var) {
    GaussianSite s{Vec::Constant(1, y / noise_var), Mat::Constant(1, 1, 1.0 / noise_var), 0.0};
    s.log_scale = -0.5 * y * y / noise_var - 0.5 * std::log(2.0 * std::numbers::pi * noise_var);
    return s;
  }
};

/// Site factors of a chain-structured Gaussian: one GaussianSite per knot plus
/// optional coupling blocks. cross[j] is the (j+1, j) precision block, so the
/// factor contributes exp(-s_{j+1}' cross[j] s_j).
struct ChainSites {
  std::vector<GaussianSite> knots;
  std::vector<Mat> cross;

  static ChainSites zero(std::size_t num_knots, Eigen::Index n) {
    ChainSites s;
    s.knots.assign(num_knots, GaussianSite::zero(n));
    s.cross.assign(num_knots > 0 ? num_knots - 1 : 0, Mat::Zero(n, n));
    return s;
  }
};

struct ChainPosterior {
  std::vector<Vec> smoothed_means;
  std::vector<Mat> smoothed_covs;
  /// Cov(s_j, s_{j+1}).
  std::vector<Mat> pair_cross_covs;
  double log_normalizer = 0.0;
};

namespace detail {

struct ConditionResult {
  Vec mean;
  Mat cov;
  double log_normalizer;
};

// Multiplies N(mean, L L') by exp(h'z - z'Lambda z/2) using the congruence
// form cov' = L (I + L' Lambda L)^{-1} L', which stays symmetric PSD.
inline ConditionResult condition_on_factor(const Vec &mean, const Mat &l, const Vec &h,
                                           const Mat &lambda, const std::string &where) {
  const auto dim = mean.size();
  const Mat b = Mat::Identity(dim, dim) + symmetrize(l.transpose() * lambda * l);
  const auto llt_b = checked_llt(b, "site update at " + where);
  const Mat lb = llt_b.matrixL();
  const Vec r = l.triangularView<Eigen::Lower>().solve(mean);
  const Vec eta = r + l.transpose() * h;
  const Vec x = lb.triangularView<Eigen::Lower>().solve(eta);
  // l * lb^{-T}
  const Mat f = lb.triangularView<Eigen::Lower>().solve(l.transpose()).transpose();
  ConditionResult out;
  out.mean = f * x;
  out.cov = symmetrize(f * f.transpose());
  out.log_normalizer =
      -lb.diagonal().array().log().sum() + 0.5 * x.squaredNorm() - 0.5 * r.squaredNorm();
  return out;
}

inline void check_sites(const LinearGaussianChain &chain, const ChainSites &sites) {
  const auto n = chain.state_dim();
  if (sites.knots.size() != chain.num_knots()) {
    throw InvalidInput("need exactly one site per chain knot");
  }
  if (!sites.cross.empty() && sites.cross.size() + 1 != chain.num_knots()) {
    throw InvalidInput("need one cross block per chain gap (or none)");
  }
  for (const auto &s : sites.knots) {
    if (s.lambda1.size() != n || s.Lambda2.rows() != n || s.Lambda2.cols() != n) {
      throw InvalidInput("site dimension mismatch");
    }
  }
  for (const auto &c : sites.cross) {
    if (c.rows() != n || c.cols() != n) {
      throw InvalidInput("cross block dimension mismatch");
    }
  }
}

} // namespace detail

/// Exact posterior of p(u) * prod(sites) by forward filtering over adjacent
/// knot pairs and Rauch-Tung-Striebel smoothing.
inline ChainPosterior kalman_filter_smooth(const LinearGaussianChain &chain,
                                           const ChainSites &sites) {
  detail::check_sites(chain, sites);
  const auto m = chain.num_knots();
  const auto n = chain.state_dim();

  // Joint of (s_j, s_{j+1}) after conditioning on everything up to j+1.
  struct PairJoint {
    Vec mean0, mean1;
    Mat cov00, cov01, cov11;
    Mat l11; // Cholesky of cov11, reused as the next step's factor
  };
  std::vector<PairJoint> pairs(m > 0 ? m - 1 : 0);

  double log_norm = 0.0;
  Vec filt_mean;
  Mat filt_l;
  {
    const Mat l0 = lower_factor(symmetrize(chain.initial_cov()), "prior covariance at knot 0");
    const auto &s0 = sites.knots[0];
    auto r = detail::condition_on_factor(chain.initial_mean(), l0, s0.lambda1, s0.Lambda2,
                                         "knot 0");
    log_norm += r.log_normalizer + s0.log_scale;
    filt_mean = std::move(r.mean);
    filt_l = lower_factor(r.cov, "filtered covariance at knot 0");
  }

  for (std::size_t j = 0; j + 1 < m; ++j) {
    const Mat &a = chain.transition(j);
    const Mat lq = lower_factor(symmetrize(chain.noise(j)),
                                "process noise between knots " + std::to_string(j) + " and " +
                                    std::to_string(j + 1));
    Mat l = Mat::Zero(2 * n, 2 * n);
    l.topLeftCorner(n, n) = filt_l;
    l.bottomLeftCorner(n, n) = a * filt_l;
    l.bottomRightCorner(n, n) = lq;
    Vec mean(2 * n);
    mean << filt_mean, a * filt_mean;

    const auto &site = sites.knots[j + 1];
    Vec h = Vec::Zero(2 * n);
    h.tail(n) = site.lambda1;
    Mat lambda = Mat::Zero(2 * n, 2 * n);
    lambda.bottomRightCorner(n, n) = site.Lambda2;
    if (!sites.cross.empty()) {
      lambda.bottomLeftCorner(n, n) = sites.cross[j];
      lambda.topRightCorner(n, n) = sites.cross[j].transpose();
    }
    auto r = detail::condition_on_factor(mean, l, h, lambda, "knot " + std::to_string(j + 1));
    log_norm += r.log_normalizer + site.log_scale;

    auto &p = pairs[j];
    p.mean0 = r.mean.head(n);
    p.mean1 = r.mean.tail(n);
    p.cov00 = r.cov.topLeftCorner(n, n);
    p.cov01 = r.cov.topRightCorner(n, n);
    p.cov11 = r.cov.bottomRightCorner(n, n);
    p.l11 = lower_factor(p.cov11, "filtered covariance at knot " + std::to_string(j + 1));
    filt_mean = p.mean1;
    filt_l = p.l11;
  }

  ChainPosterior post;
  post.log_normalizer = log_norm;
  post.smoothed_means.resize(m);
  post.smoothed_covs.resize(m);
  post.pair_cross_covs.resize(m > 0 ? m - 1 : 0);
  post.smoothed_means[m - 1] = filt_mean;
  post.smoothed_covs[m - 1] = symmetrize(filt_l * filt_l.transpose());

  for (std::size_t jj = m - 1; jj-- > 0;) {
    const auto &p = pairs[jj];
    // gain = cov01 * cov11^{-1}
    const Mat gain = p.l11.transpose()
                         .triangularView<Eigen::Upper>()
                         .solve(p.l11.triangularView<Eigen::Lower>().solve(p.cov01.transpose()))
                         .transpose();
    const Mat cond = p.cov00 - gain * p.cov01.transpose();
    const Mat &next_cov = post.smoothed_covs[jj + 1];
    post.smoothed_means[jj] = p.mean0 + gain * (post.smoothed_means[jj + 1] - p.mean1);
    post.smoothed_covs[jj] = symmetrize(cond + gain * next_cov * gain.transpose());
    post.pair_cross_covs[jj] = gain * next_cov;
    if ((post.smoothed_covs[jj].diagonal().array() < -1e-12).any() ||
        !post.smoothed_covs[jj].allFinite()) {
      throw NumericalFailure("smoothed covariance not PSD at knot " + std::to_string(jj));
    }
  }
  return post;
}

inline ChainPosterior kalman_filter_smooth(const LinearGaussianChain &chain,
                                           std::span<const GaussianSite> sites) {
  ChainSites s;
  s.knots.assign(sites.begin(), sites.end());
  return kalman_filter_smooth(chain, s);
}

/// KL(q || p) between a chain-structured posterior and a Markov prior chain,
/// summed from the first marginal and the expected per-gap conditional KLs.
inline double chain_kl(const ChainPosterior &q, const LinearGaussianChain &p) {
  const auto m = p.num_knots();
  const auto n = p.state_dim();
  if (q.smoothed_means.size() != m || q.smoothed_covs.size() != m ||
      q.pair_cross_covs.size() + 1 != m) {
    throw InvalidInput("chain_kl: posterior and prior have different knot counts");
  }
  for (std::size_t j = 0; j < m; ++j) {
    if (q.smoothed_means[j].size() != n || q.smoothed_covs[j].rows() != n) {
      throw InvalidInput("chain_kl: state dimension mismatch");
    }
  }

  const auto &s0 = q.smoothed_covs[0];
  const auto llt_p0 = checked_llt(symmetrize(p.initial_cov()), "chain_kl prior covariance");
  const Vec d0 = q.smoothed_means[0] - p.initial_mean();
  const Mat lp0 = llt_p0.matrixL();
  double kl = 0.5 * (llt_p0.solve(s0).trace() + d0.dot(llt_p0.solve(d0)) - static_cast<double>(n) +
                     2.0 * lp0.diagonal().array().log().sum() - spd_logdet(s0, "chain_kl q(s_0)"));

  for (std::size_t j = 0; j + 1 < m; ++j) {
    const Mat &a = p.transition(j);
    const Mat &sj = q.smoothed_covs[j];
    const Mat &sk = q.smoothed_covs[j + 1];
    const Mat &c = q.pair_cross_covs[j];
    const Vec resid = q.smoothed_means[j + 1] - a * q.smoothed_means[j];
    // E_q[(s_{j+1} - A s_j)(s_{j+1} - A s_j)']
    const Mat second = sk - c.transpose() * a.transpose() - a * c + a * sj * a.transpose() +
                       resid * resid.transpose();
    const auto llt_q = checked_llt(symmetrize(p.noise(j)), "chain_kl process noise " +
                                                                std::to_string(j));
    Mat joint(2 * n, 2 * n);
    joint << sj, c, c.transpose(), sk;
    const double logdet_cond =
        spd_logdet(symmetrize(joint), "chain_kl q pair " + std::to_string(j)) -
        spd_logdet(sj, "chain_kl q marginal " + std::to_string(j));
    const Mat lq = llt_q.matrixL();
    kl += 0.5 * (llt_q.solve(symmetrize(second)).trace() - static_cast<double>(n) +
                 2.0 * lq.diagonal().array().log().sum() - logdet_cond);
  }
  return kl;
}

/// KL(q || p) when q is exactly p * sites / Z: E_q[log sites] - log Z.
/// Costs O(M n^2) given the posterior moments.
inline double site_kl(const ChainPosterior &q, const ChainSites &sites) {
  double e = 0.0;
  for (std::size_t j = 0; j < sites.knots.size(); ++j) {
    const auto &s = sites.knots[j];
    const Vec &mu = q.smoothed_means[j];
    e += s.log_scale + s.lambda1.dot(mu) -
         0.5 * ((s.Lambda2.cwiseProduct(q.smoothed_covs[j])).sum() + mu.dot(s.Lambda2 * mu));
  }
  for (std::size_t j = 0; j < sites.cross.size(); ++j) {
    // E[s_{j+1}' C s_j] = tr(C Cov(s_j, s_{j+1})) + mu_{j+1}' C mu_j
    const Mat &c = sites.cross[j];
    e -= (c.cwiseProduct(q.pair_cross_covs[j].transpose())).sum() +
         q.smoothed_means[j + 1].dot(c * q.smoothed_means[j]);
  }
  return e - q.log_normalizer;
}

/// s(t) | s(tau_lower), s(tau_upper) ~ N(C_minus s_lower + C_plus s_upper, V).
/// Outside the knot range only the nearest knot is used and C_plus is empty.
struct BridgeConditional {
  std::size_t lower = 0;
  std::optional<std::size_t> upper;
  Mat c_minus;
  Mat c_plus;
  Mat gap_cov;
};

inline BridgeConditional bridge_conditional(double t, const LinearGaussianChain &chain) {
  if (!chain.dynamics()) {
    throw InvalidInput("bridge_conditional needs a chain with continuous-time dynamics");
  }
  if (!std::isfinite(t)) {
    throw InvalidInput("non-finite bridge time");
  }
  const auto &dyn = *chain.dynamics();
  const auto &times = chain.times();
  const auto n = chain.state_dim();
  const Mat &p0 = chain.initial_cov();
  const Mat eye = Mat::Identity(n, n);
  BridgeConditional out;

  if (t >= times.back()) {
    out.lower = times.size() - 1;
    const double dt = t - times.back();
    out.c_minus = dt == 0.0 ? eye : dyn.transition(dt);
    out.gap_cov = dt == 0.0 ? Mat::Zero(n, n) : dyn.process_noise(dt);
    return out;
  }
  if (t < times.front()) {
    // Stationary reversal: Cov(s(t), s(tau_0)) = P0 A(dt)'.
    out.lower = 0;
    const double dt = times.front() - t;
    const Mat cross = p0 * dyn.transition(dt).transpose();
    const auto llt = checked_llt(symmetrize(p0), "bridge stationary covariance");
    out.c_minus = llt.solve(cross.transpose()).transpose();
    out.gap_cov = symmetrize(p0 - out.c_minus * cross.transpose());
    return out;
  }

  const auto it = std::upper_bound(times.begin(), times.end(), t);
  const auto j = static_cast<std::size_t>(it - times.begin()) - 1;
  out.lower = j;
  out.upper = j + 1;
  if (t == times[j]) {
    out.c_minus = eye;
    out.c_plus = Mat::Zero(n, n);
    out.gap_cov = Mat::Zero(n, n);
    return out;
  }
  const Mat a1 = dyn.transition(t - times[j]);
  const Mat a2 = dyn.transition(times[j + 1] - t);
  Mat pair(2 * n, 2 * n);
  const Mat a12 = a2 * a1;
  pair << p0, p0 * a12.transpose(), a12 * p0, p0;
  Mat cross(n, 2 * n);
  cross << a1 * p0, p0 * a2.transpose();
  const auto llt = checked_llt(symmetrize(pair), "bridge knot pair covariance");
  const Mat c = llt.solve(cross.transpose()).transpose();
  out.c_minus = c.leftCols(n);
  out.c_plus = c.rightCols(n);
  out.gap_cov = symmetrize(p0 - c * cross.transpose());
  return out;
}

} // namespace dsgp
