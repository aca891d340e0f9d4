#pragma once

#include <cmath>
#include <span>

#include "dsgp/errors.hpp"
#include "dsgp/linalg.hpp"

namespace dsgp {

struct LonLat {
  double lon = 0.0;
  double lat = 0.0;
};

inline bool operator==(const LonLat &a, const LonLat &b) {
  return a.lon == b.lon && a.lat == b.lat;
}

/// Length scales (degrees) of the unit-variance Matérn-3/2 spatial factor.
struct SpatialParams {
  double ell_lon = 19.6;
  double ell_lat = 13.2;

  void validate() const {
    if (!(ell_lon > 0.0) || !(ell_lat > 0.0) || !std::isfinite(ell_lon) ||
        !std::isfinite(ell_lat)) {
      throw InvalidInput("spatial length scales must be positive and finite");
    }
  }
};

/// Ornstein-Uhlenbeck temporal factor. The kernel amplitude lives here, so
/// sigma_f is the marginal standard deviation of the full product kernel.
struct TemporalParams {
  double ell_t = 9.9; // ka
  double sigma_f = 2.9;

  void validate() const {
    if (!(ell_t > 0.0) || !(sigma_f > 0.0) || !std::isfinite(ell_t) ||
        !std::isfinite(sigma_f)) {
      throw InvalidInput("temporal length scale and sigma_f must be positive and finite");
    }
  }
};

namespace detail {

inline const double kSqrt3 = std::sqrt(3.0);

inline double matern32_of_r(double r) {
  return (1.0 + kSqrt3 * r) * std::exp(-kSqrt3 * r);
}

inline double scaled_radius(const LonLat &a, const LonLat &b, const SpatialParams &p) {
  const double u = (a.lon - b.lon) / p.ell_lon;
  const double v = (a.lat - b.lat) / p.ell_lat;
  return std::sqrt(u * u + v * v);
}

inline void require_finite(const LonLat &x) {
  if (!std::isfinite(x.lon) || !std::isfinite(x.lat)) {
    throw InvalidInput("non-finite spatial coordinate");
  }
}

} // namespace detail

inline double eval_spatial(const LonLat &x1, const LonLat &x2, const SpatialParams &p) {
  detail::require_finite(x1);
  detail::require_finite(x2);
  return detail::matern32_of_r(detail::scaled_radius(x1, x2, p));
}

/// Partial derivatives of eval_spatial. `d_lon1`/`d_lat1` are with respect to
/// the first argument's coordinates; the log-length-scale partials are with
/// respect to log(ell).
struct SpatialKernelPartials {
  double value;
  double d_lon1;
  double d_lat1;
  double d_log_ell_lon;
  double d_log_ell_lat;
};

inline SpatialKernelPartials spatial_partials(const LonLat &x1, const LonLat &x2,
                                              const SpatialParams &p) {
  const double u = (x1.lon - x2.lon) / p.ell_lon;
  const double v = (x1.lat - x2.lat) / p.ell_lat;
  const double r = std::sqrt(u * u + v * v);
  const double e = std::exp(-detail::kSqrt3 * r);
  // dk/dr = -3 r e, and the 1/r from dr/du cancels.
  return {(1.0 + detail::kSqrt3 * r) * e, -3.0 * e * u / p.ell_lon,
          -3.0 * e * v / p.ell_lat, 3.0 * e * u * u, 3.0 * e * v * v};
}

inline double eval_temporal(double dt, const TemporalParams &p) {
  if (!std::isfinite(dt)) {
    throw InvalidInput("non-finite time gap");
  }
  return p.sigma_f * p.sigma_f * std::exp(-std::abs(dt) / p.ell_t);
}

/// Gram matrix between two coordinate lists. `jitter` is added on the
/// diagonal only for self-grams (pass the same span twice).
inline Mat spatial_gram(std::span<const LonLat> x1, std::span<const LonLat> x2,
                        const SpatialParams &p, double jitter = 0.0) {
  if (x1.empty() || x2.empty()) {
    throw InvalidInput("spatial_gram needs nonempty coordinate lists");
  }
  const bool self = x1.data() == x2.data() && x1.size() == x2.size();
  Mat k(x1.size(), x2.size());
  for (std::size_t i = 0; i < x1.size(); ++i) {
    if (self) {
      k(i, i) = eval_spatial(x1[i], x1[i], p) + jitter;
      for (std::size_t j = 0; j < i; ++j) {
        k(i, j) = k(j, i) = eval_spatial(x1[i], x1[j], p);
      }
    } else {
      for (std::size_t j = 0; j < x2.size(); ++j) {
        k(i, j) = eval_spatial(x1[i], x2[j], p);
      }
    }
  }
  return k;
}

inline Vec spatial_cross(const LonLat &x, std::span<const LonLat> z, const SpatialParams &p) {
  Vec k(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    k(i) = eval_spatial(x, z[i], p);
  }
  return k;
}

/// Exact state-space form of the OU temporal kernel (state dimension 1).
class OuStateSpace {
public:
  explicit OuStateSpace(TemporalParams p) : p_(p) { p_.validate(); }

  static constexpr int state_dim = 1;

  Mat emission() const { return Mat::Ones(1, 1); }
  Mat stationary_cov() const { return Mat::Constant(1, 1, variance()); }

  Mat transition(double dt) const { return Mat::Constant(1, 1, decay(dt)); }

  Mat process_noise(double dt) const {
    const double a = decay(dt);
    return Mat::Constant(1, 1, variance() * (1.0 - a * a));
  }

  double decay(double dt) const {
    if (!(dt >= 0.0) || !std::isfinite(dt)) {
      throw InvalidInput("state-space time step must be finite and non-negative");
    }
    return std::exp(-dt / p_.ell_t);
  }

  double variance() const { return p_.sigma_f * p_.sigma_f; }
  const TemporalParams &params() const { return p_; }

private:
  TemporalParams p_;
};

inline OuStateSpace ou_state_space(const TemporalParams &p) { return OuStateSpace(p); }

} // namespace dsgp
