#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "dsgp/errors.hpp"

namespace dsgp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline Mat symmetrize(const Mat &m) { return 0.5 * (m + m.transpose()); }

// Cholesky that reports failure instead of silently producing NaNs.
inline Eigen::LLT<Mat> checked_llt(const Mat &m, const std::string &what) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) {
    throw NumericalFailure("Cholesky failed: " + what);
  }
  const auto diag = llt.matrixLLT().diagonal();
  for (Eigen::Index i = 0; i < diag.size(); ++i) {
    if (!(diag(i) > 0.0) || !std::isfinite(diag(i))) {
      throw NumericalFailure("Cholesky failed: " + what);
    }
  }
  return llt;
}

inline Mat lower_factor(const Mat &m, const std::string &what) {
  return checked_llt(m, what).matrixL();
}

inline Mat spd_inverse(const Mat &m, const std::string &what) {
  return checked_llt(m, what).solve(Mat::Identity(m.rows(), m.cols()));
}

inline double spd_logdet(const Mat &m, const std::string &what) {
  const auto llt = checked_llt(m, what);
  const Mat l = llt.matrixL();
  return 2.0 * l.diagonal().array().log().sum();
}

} // namespace dsgp
