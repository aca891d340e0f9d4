#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dsgp/linalg.hpp"
#include "dsgp/state_space.hpp"

namespace dsgp {

/// Symmetric block-tridiagonal matrix; lower[j] is block (j+1, j).
struct BlockTridiag {
  std::vector<Mat> diag;
  std::vector<Mat> lower;

  std::size_t size() const { return diag.size(); }
};

/// Diagonal and first sub-diagonal blocks of an inverse.
struct TridiagBlocks {
  std::vector<Mat> diag;
  std::vector<Mat> lower;
};

/// Information-form view of a Markov chain: the precision of its joint law.
inline BlockTridiag prior_precision(const LinearGaussianChain &chain) {
  const auto m = chain.num_knots();
  BlockTridiag j;
  j.diag.resize(m);
  j.lower.resize(m - 1);
  j.diag[0] = spd_inverse(symmetrize(chain.initial_cov()), "prior precision P0");
  for (std::size_t k = 0; k + 1 < m; ++k) {
    const Mat qinv = spd_inverse(symmetrize(chain.noise(k)), "prior precision Q");
    const Mat &a = chain.transition(k);
    j.diag[k] += a.transpose() * qinv * a;
    j.diag[k + 1] = qinv;
    j.lower[k] = -qinv * a;
  }
  return j;
}

/// Adds chain sites (per-knot precisions and coupling blocks) to a precision.
inline BlockTridiag add_sites(BlockTridiag j, const ChainSites &sites) {
  for (std::size_t k = 0; k < j.size(); ++k) {
    j.diag[k] += sites.knots[k].Lambda2;
  }
  for (std::size_t k = 0; k < sites.cross.size(); ++k) {
    j.lower[k] += sites.cross[k];
  }
  return j;
}

/// Block LDL' factorization of a symmetric positive definite block-tridiagonal
/// matrix. Gives linear solves, the tridiagonal part of the inverse, and the
/// directional derivative of that part.
class BlockTridiagFactor {
public:
  explicit BlockTridiagFactor(BlockTridiag j) : j_(std::move(j)) {
    const auto m = j_.size();
    schur_inv_.resize(m);
    gain_.resize(m > 0 ? m - 1 : 0);
    logdet_ = 0.0;
    Mat s = j_.diag[0];
    for (std::size_t k = 0; k < m; ++k) {
      const auto llt = checked_llt(symmetrize(s), "block-tridiagonal pivot " + std::to_string(k));
      const Mat l = llt.matrixL();
      logdet_ += 2.0 * l.diagonal().array().log().sum();
      schur_inv_[k] = symmetrize(llt.solve(Mat::Identity(s.rows(), s.cols())));
      if (k + 1 < m) {
        gain_[k] = j_.lower[k] * schur_inv_[k];
        s = j_.diag[k + 1] - gain_[k] * j_.lower[k].transpose();
      }
    }
  }

  double logdet() const { return logdet_; }

  std::vector<Vec> solve(const std::vector<Vec> &g) const {
    const auto m = j_.size();
    std::vector<Vec> z(g);
    for (std::size_t k = 0; k + 1 < m; ++k) {
      z[k + 1] -= gain_[k] * z[k];
    }
    std::vector<Vec> x(m);
    x[m - 1] = schur_inv_[m - 1] * z[m - 1];
    for (std::size_t k = m - 1; k-- > 0;) {
      x[k] = schur_inv_[k] * (z[k] - j_.lower[k].transpose() * x[k + 1]);
    }
    return x;
  }

  TridiagBlocks selected_inverse() const {
    const auto m = j_.size();
    TridiagBlocks out;
    out.diag.resize(m);
    out.lower.resize(m > 0 ? m - 1 : 0);
    out.diag[m - 1] = schur_inv_[m - 1];
    for (std::size_t k = m - 1; k-- > 0;) {
      out.lower[k] = -out.diag[k + 1] * gain_[k];
      out.diag[k] = symmetrize(schur_inv_[k] + gain_[k].transpose() * out.diag[k + 1] * gain_[k]);
    }
    return out;
  }

  /// d/de of the tridiagonal blocks of (J + e dJ)^{-1} at e = 0.
  TridiagBlocks selected_inverse_tangent(const BlockTridiag &dj) const {
    const auto m = j_.size();
    std::vector<Mat> d_inv(m);
    std::vector<Mat> d_gain(m > 0 ? m - 1 : 0);
    Mat ds = dj.diag[0];
    for (std::size_t k = 0; k < m; ++k) {
      d_inv[k] = -schur_inv_[k] * ds * schur_inv_[k];
      if (k + 1 < m) {
        d_gain[k] = dj.lower[k] * schur_inv_[k] + j_.lower[k] * d_inv[k];
        const Mat t = d_gain[k] * j_.lower[k].transpose();
        ds = dj.diag[k + 1] - t - gain_[k] * dj.lower[k].transpose();
      }
    }
    const auto sel = selected_inverse();
    TridiagBlocks out;
    out.diag.resize(m);
    out.lower.resize(m > 0 ? m - 1 : 0);
    out.diag[m - 1] = symmetrize(d_inv[m - 1]);
    for (std::size_t k = m - 1; k-- > 0;) {
      const Mat &sig = sel.diag[k + 1];
      const Mat &dsig = out.diag[k + 1];
      out.lower[k] = -dsig * gain_[k] - sig * d_gain[k];
      const Mat half = d_gain[k].transpose() * sig * gain_[k];
      out.diag[k] = symmetrize(d_inv[k] + half + half.transpose() +
                               gain_[k].transpose() * dsig * gain_[k]);
    }
    return out;
  }

private:
  BlockTridiag j_;
  std::vector<Mat> schur_inv_;
  std::vector<Mat> gain_;
  double logdet_ = 0.0;
};

/// A chain prior in information form: precision J_p, shift J_p mu_p,
/// log|J_p| and mu_p' J_p mu_p.
struct ChainInformation {
  BlockTridiag precision;
  std::vector<Vec> shift;
  double logdet = 0.0;
  double quad = 0.0;
};

inline ChainInformation prior_information(const LinearGaussianChain &chain) {
  ChainInformation info;
  info.precision = prior_precision(chain);
  const auto m = chain.num_knots();
  double logdet_cov = spd_logdet(symmetrize(chain.initial_cov()), "prior covariance P0");
  for (std::size_t k = 0; k + 1 < m; ++k) {
    logdet_cov += spd_logdet(symmetrize(chain.noise(k)), "prior noise Q");
  }
  info.logdet = -logdet_cov;
  std::vector<Vec> mu(m);
  mu[0] = chain.initial_mean();
  for (std::size_t k = 0; k + 1 < m; ++k) {
    mu[k + 1] = chain.transition(k) * mu[k];
  }
  const auto &j = info.precision;
  info.shift.resize(m);
  for (std::size_t k = 0; k < m; ++k) {
    info.shift[k] = j.diag[k] * mu[k];
    if (k > 0) {
      info.shift[k] += j.lower[k - 1] * mu[k - 1];
    }
    if (k + 1 < m) {
      info.shift[k] += j.lower[k].transpose() * mu[k + 1];
    }
    info.quad += mu[k].dot(info.shift[k]);
  }
  return info;
}

struct InformationPosterior {
  ChainPosterior posterior;
  std::shared_ptr<const BlockTridiagFactor> factor; // of J_p + site precision
};

/// Same posterior as kalman_filter_smooth, computed from one block LDL'
/// factorization of the posterior precision. Keeps the factor for reuse.
inline InformationPosterior smooth_information(const ChainInformation &prior,
                                               const ChainSites &sites) {
  const auto m = prior.precision.size();
  if (sites.knots.size() != m || (!sites.cross.empty() && sites.cross.size() + 1 != m)) {
    throw InvalidInput("sites do not match the chain");
  }
  InformationPosterior out;
  auto factor = std::make_shared<BlockTridiagFactor>(add_sites(prior.precision, sites));
  std::vector<Vec> eta(m);
  double log_scale = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    eta[k] = prior.shift[k] + sites.knots[k].lambda1;
    log_scale += sites.knots[k].log_scale;
  }
  auto &post = out.posterior;
  post.smoothed_means = factor->solve(eta);
  auto sel = factor->selected_inverse();
  post.smoothed_covs = std::move(sel.diag);
  post.pair_cross_covs.resize(sel.lower.size());
  for (std::size_t k = 0; k < sel.lower.size(); ++k) {
    post.pair_cross_covs[k] = sel.lower[k].transpose();
  }
  double quad = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    quad += eta[k].dot(post.smoothed_means[k]);
  }
  post.log_normalizer =
      log_scale + 0.5 * (quad - prior.quad) - 0.5 * factor->logdet() + 0.5 * prior.logdet;
  out.factor = std::move(factor);
  return out;
}

} // namespace dsgp
