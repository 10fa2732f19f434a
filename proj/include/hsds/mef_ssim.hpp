#pragma once

// Single-scale MEF-SSIM on one plane. For every window position the desired
// patch is built from the source patches: its contrast is the largest source
// contrast and its structure is the contrast-weighted mean of the source
// structures, with weight exponent p = tan(pi/2 * R) driven by the structural
// consistency R = |sum x_k| / sum |x_k|. Score = mean over windows of
// (2 cov(desired, y) + C2) / (var(desired) + var(y) + C2); luminance is ignored.

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace hsds {

inline constexpr Eigen::Index kMefSsimWindow = 8;

template <typename Scalar>
using RowPlane = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct MefDesired {
  Eigen::Index window = kMefSsimWindow;
  Eigen::Index rows = 0;  // window positions
  Eigen::Index cols = 0;
  /// One zero-mean desired patch (window*window, row-major) per position, position-major.
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> patches;
};

template <typename Scalar, typename PlaneA, typename PlaneB>
MefDesired<Scalar> mef_desired(const PlaneA& under, const PlaneB& over, Eigen::Index window = kMefSsimWindow) {
  const Eigen::Index h = under.rows(), w = under.cols();
  if (over.rows() != h || over.cols() != w) throw std::invalid_argument("mef_desired: source planes differ in size");
  if (h < window || w < window) throw std::invalid_argument("mef_desired: plane smaller than the window");
  MefDesired<Scalar> d;
  d.window = window;
  d.rows = h - window + 1;
  d.cols = w - window + 1;
  const Eigen::Index n = window * window;
  d.patches.resize(n, d.rows * d.cols);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> xu(n), xo(n), s(n);
  for (Eigen::Index i = 0; i < d.rows; ++i)
    for (Eigen::Index j = 0; j < d.cols; ++j) {
      for (Eigen::Index a = 0; a < window; ++a)
        for (Eigen::Index b = 0; b < window; ++b) {
          xu[a * window + b] = static_cast<Scalar>(under(i + a, j + b));
          xo[a * window + b] = static_cast<Scalar>(over(i + a, j + b));
        }
      xu.array() -= xu.mean();
      xo.array() -= xo.mean();
      const Scalar cu = xu.norm(), co = xo.norm();
      const Scalar c_hat = std::max(cu, co);
      auto col = d.patches.col(i * d.cols + j);
      if (c_hat <= Scalar(0)) {
        col.setZero();
        continue;
      }
      const Scalar r = (xu + xo).norm() / (cu + co);
      const Scalar p = std::tan(std::numbers::pi_v<Scalar> / 2 * std::min(r, Scalar(1)));
      // weights (c_k / c_hat)^p avoid overflow for large p
      const Scalar wu = cu > 0 ? std::pow(cu / c_hat, p) : Scalar(0);
      const Scalar wo = co > 0 ? std::pow(co / c_hat, p) : Scalar(0);
      s.setZero();
      if (cu > 0) s += wu * xu / cu;
      if (co > 0) s += wo * xo / co;
      s /= (wu + wo);
      const Scalar sn = s.norm();
      if (sn <= Scalar(0)) {
        col.setZero();
      } else {
        col = c_hat * s / sn;
      }
    }
  return d;
}

/// Mean structural score of plane y against the desired patches. When grad is non-null,
/// d(score)/dy is added into it (same extent as y).
template <typename Scalar, typename PlaneY>
Scalar mef_ssim_score(const MefDesired<Scalar>& d, const PlaneY& y, Scalar c2, RowPlane<Scalar>* grad = nullptr) {
  const Eigen::Index win = d.window, n = win * win;
  if (y.rows() != d.rows + win - 1 || y.cols() != d.cols + win - 1)
    throw std::invalid_argument("mef_ssim_score: plane does not match the desired patches");
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  const Scalar inv_p = Scalar(1) / static_cast<Scalar>(d.rows * d.cols);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> yp(n);
  Scalar total = 0;
  for (Eigen::Index i = 0; i < d.rows; ++i)
    for (Eigen::Index j = 0; j < d.cols; ++j) {
      for (Eigen::Index a = 0; a < win; ++a)
        for (Eigen::Index b = 0; b < win; ++b) yp[a * win + b] = static_cast<Scalar>(y(i + a, j + b));
      yp.array() -= yp.mean();
      const auto xh = d.patches.col(i * d.cols + j);
      const Scalar cov = xh.dot(yp) * inv_n;
      const Scalar vx = xh.squaredNorm() * inv_n;
      const Scalar vy = yp.squaredNorm() * inv_n;
      const Scalar num = 2 * cov + c2;
      const Scalar den = vx + vy + c2;
      total += num / den;
      if (grad) {
        // dS/dy_j = (2 xh_j D - 2 N yc_j) / (n D^2), the mean term cancels since sum(xh) = sum(yc) = 0
        const Scalar k = inv_p * inv_n * 2 / (den * den);
        for (Eigen::Index a = 0; a < win; ++a)
          for (Eigen::Index b = 0; b < win; ++b)
            (*grad)(i + a, j + b) += k * (xh[a * win + b] * den - num * yp[a * win + b]);
      }
    }
  return total * inv_p;
}

}  // namespace hsds
