#pragma once

// Hardened numeric primitives shared by the mixture models: Hermitian
// positive-definite matrices, log-domain accumulation and the von-Mises-Fisher
// normalizer via exponentially scaled modified Bessel functions.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <span>
#include <string>

#include "mixsep/error.hpp"

namespace mixsep {

using cdouble = std::complex<double>;

/// Default relative diagonal loading applied wherever a covariance is inverted.
inline constexpr double kDefaultLoading = 1e-10;

namespace detail {

inline bool all_finite(const Eigen::MatrixXcd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      if (!std::isfinite(m(i, j).real()) || !std::isfinite(m(i, j).imag())) return false;
  return true;
}

inline Eigen::MatrixXcd hermitian_part(const Eigen::MatrixXcd& m) {
  Eigen::MatrixXcd h = 0.5 * (m + m.adjoint());
  for (Eigen::Index i = 0; i < h.rows(); ++i) h(i, i) = cdouble(h(i, i).real(), 0.0);
  return h;
}

inline Eigen::MatrixXcd load_diagonal(const Eigen::MatrixXcd& h, double eps_rel) {
  const auto dim = h.rows();
  const double trace = h.diagonal().real().sum();
  const double amount = trace > 0.0 ? eps_rel * trace / static_cast<double>(dim) : eps_rel;
  Eigen::MatrixXcd out = h;
  out.diagonal().array() += cdouble(amount, 0.0);
  return out;
}

}  // namespace detail

/// Complex Hermitian positive-definite matrix.
///
/// Construction symmetrizes the input exactly and, if the Cholesky
/// factorization fails, applies escalating diagonal loading (relative to the
/// mean eigenvalue) until it succeeds. An instance therefore always admits a
/// Cholesky factor.
class HermitianPD {
 public:
  HermitianPD() : m_(Eigen::MatrixXcd::Identity(1, 1)) {}

  explicit HermitianPD(const Eigen::MatrixXcd& m) {
    if (m.rows() != m.cols() || m.rows() == 0)
      throw InvalidInput("HermitianPD: matrix must be square and non-empty");
    if (!detail::all_finite(m)) throw InvalidInput("HermitianPD: non-finite entries");
    Eigen::MatrixXcd h = detail::hermitian_part(m);
    Eigen::LLT<Eigen::MatrixXcd> llt(h);
    if (llt.info() == Eigen::Success && min_pivot_ok(llt)) {
      m_ = std::move(h);
      return;
    }
    for (double eps = kDefaultLoading; eps <= 1e-1; eps *= 100.0) {
      Eigen::MatrixXcd loaded = detail::load_diagonal(h, eps);
      Eigen::LLT<Eigen::MatrixXcd> l2(loaded);
      if (l2.info() == Eigen::Success && min_pivot_ok(l2)) {
        m_ = std::move(loaded);
        return;
      }
    }
    throw NumericalError("HermitianPD: factorization failed after maximum diagonal loading");
  }

  static HermitianPD identity(int dim) {
    return HermitianPD(Eigen::MatrixXcd::Identity(dim, dim));
  }

  int dim() const { return static_cast<int>(m_.rows()); }
  const Eigen::MatrixXcd& matrix() const { return m_; }
  cdouble operator()(int i, int j) const { return m_(i, j); }
  double trace() const { return m_.diagonal().real().sum(); }

  Eigen::LLT<Eigen::MatrixXcd> cholesky() const { return Eigen::LLT<Eigen::MatrixXcd>(m_); }

 private:
  static bool min_pivot_ok(const Eigen::LLT<Eigen::MatrixXcd>& llt) {
    const auto& l = llt.matrixLLT();
    for (Eigen::Index i = 0; i < l.rows(); ++i) {
      const double d = l(i, i).real();
      if (!(d > 0.0) || !std::isfinite(d)) return false;
    }
    return true;
  }

  Eigen::MatrixXcd m_;
};

struct LogdetQuad {
  double logdet;
  double quad;
};

/// log det(m) and Re(v^H m^{-1} v) from one Cholesky factorization.
inline LogdetQuad cholesky_logdet_solve(const HermitianPD& m, std::span<const cdouble> v) {
  if (static_cast<int>(v.size()) != m.dim())
    throw InvalidInput("cholesky_logdet_solve: dimension mismatch");
  for (const auto& x : v)
    if (!std::isfinite(x.real()) || !std::isfinite(x.imag()))
      throw InvalidInput("cholesky_logdet_solve: non-finite vector entry");
  const auto llt = m.cholesky();
  if (llt.info() != Eigen::Success) throw NumericalError("cholesky_logdet_solve: factorization failed");
  const auto& l = llt.matrixLLT();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) logdet += 2.0 * std::log(l(i, i).real());
  Eigen::Map<const Eigen::VectorXcd> vm(v.data(), static_cast<Eigen::Index>(v.size()));
  const Eigen::VectorXcd w = llt.matrixL().solve(vm);
  const double quad = w.squaredNorm();
  if (!std::isfinite(logdet) || !std::isfinite(quad))
    throw NumericalError("cholesky_logdet_solve: non-finite result");
  return {logdet, quad};
}

/// m + eps_rel * (trace(m)/C) * I; absolute loading eps_rel * I when trace <= 0.
inline HermitianPD diagonal_load(const Eigen::MatrixXcd& m, double eps_rel) {
  if (!(eps_rel > 0.0)) throw InvalidInput("diagonal_load: eps_rel must be positive");
  if (m.rows() != m.cols() || m.rows() == 0) throw InvalidInput("diagonal_load: bad shape");
  if (!detail::all_finite(m)) throw InvalidInput("diagonal_load: non-finite entries");
  return HermitianPD(detail::load_diagonal(detail::hermitian_part(m), eps_rel));
}

inline HermitianPD diagonal_load(const HermitianPD& m, double eps_rel) {
  return diagonal_load(m.matrix(), eps_rel);
}

/// ln sum exp(values), shifted by the maximum. All -inf gives -inf.
inline double logsumexp(std::span<const double> values) {
  if (values.empty()) throw InvalidInput("logsumexp: empty input");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : values) {
    if (std::isnan(v)) throw InvalidInput("logsumexp: NaN input");
    mx = std::max(mx, v);
  }
  if (std::isinf(mx)) return mx;
  double s = 0.0;
  for (double v : values) s += std::exp(v - mx);
  return mx + std::log(s);
}

namespace detail {

// Scaled power series: returns ln sum_m prod_{j<=m} (x^2/4) / (j (nu + j)).
inline double log_bessel_series_sum(double nu, double x) {
  const double q = 0.25 * x * x;
  double term = 1.0;
  double sum = 1.0;
  double log_scale = 0.0;
  constexpr double kBig = 1e250;
  const double peak = 0.5 * x;
  for (int m = 1; m < 1000000; ++m) {
    term *= q / (static_cast<double>(m) * (nu + m));
    sum += term;
    if (sum > kBig) {
      sum /= kBig;
      term /= kBig;
      log_scale += std::log(kBig);
    }
    if (m > peak && term < 1e-17 * sum) break;
  }
  return log_scale + std::log(sum);
}

// Debye uniform asymptotic expansion of ln I_nu(x) for nu > 0.
inline double log_bessel_debye(double nu, double x) {
  const double z = x / nu;
  const double s = std::sqrt(1.0 + z * z);
  const double p = 1.0 / s;
  const double eta = s + std::log(z / (1.0 + s));
  const double p2 = p * p;
  const double u1 = p * (3.0 - 5.0 * p2) / 24.0;
  const double u2 = p2 * (81.0 - 462.0 * p2 + 385.0 * p2 * p2) / 1152.0;
  const double u3 = p * p2 *
                    (30375.0 - 369603.0 * p2 + 765765.0 * p2 * p2 - 425425.0 * p2 * p2 * p2) /
                    414720.0;
  const double p4 = p2 * p2;
  const double u4 = p4 *
                    (4465125.0 - 94121676.0 * p2 + 349922430.0 * p4 - 446185740.0 * p4 * p2 +
                     185910725.0 * p4 * p4) /
                    39813120.0;
  const double series = 1.0 + u1 / nu + u2 / (nu * nu) + u3 / (nu * nu * nu) + u4 / (nu * nu * nu * nu);
  return nu * eta - 0.5 * std::log(2.0 * std::numbers::pi * nu) - 0.5 * std::log(s) + std::log(series);
}

// Hankel large-argument expansion; used for tiny orders where Debye is unsuited.
inline double log_bessel_hankel(double nu, double x) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k <= 8; ++k) {
    const double odd = 2.0 * k - 1.0;
    term *= -(mu - odd * odd) / (k * 8.0 * x);
    sum += term;
  }
  return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log(sum);
}

inline double series_limit(double nu) { return 50.0 * std::max(nu, 1.0); }

}  // namespace detail

/// ln I_nu(x) for nu >= 0, x >= 0; finite far beyond the overflow point of I_nu.
inline double log_bessel_i(double nu, double x) {
  if (nu < 0.0 || x < 0.0 || std::isnan(x)) throw InvalidInput("log_bessel_i: negative order or argument");
  if (x == 0.0) return nu == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  if (x <= detail::series_limit(nu))
    return nu * std::log(0.5 * x) - std::lgamma(nu + 1.0) + detail::log_bessel_series_sum(nu, x);
  if (nu < 0.25) return detail::log_bessel_hankel(nu, x);
  return detail::log_bessel_debye(nu, x);
}

/// ln c_E(kappa), the log normalizer of the von-Mises-Fisher density on S^{E-1},
/// using Bessel order E/2 - 1. kappa = 0 gives the uniform density.
inline double log_vmf_normalizer(int dim, double kappa) {
  if (dim < 2) throw InvalidInput("log_vmf_normalizer: dimension must be >= 2");
  if (!(kappa >= 0.0)) throw InvalidInput("log_vmf_normalizer: kappa must be >= 0");
  const double half = 0.5 * dim;
  const double nu = half - 1.0;
  if (kappa <= detail::series_limit(nu)) {
    // kappa^nu / I_nu(kappa) = 2^nu Gamma(nu+1) / S(kappa), continuous at 0.
    const double log_s = kappa == 0.0 ? 0.0 : detail::log_bessel_series_sum(nu, kappa);
    return nu * std::numbers::ln2 + std::lgamma(nu + 1.0) - half * std::log(2.0 * std::numbers::pi) - log_s;
  }
  return nu * std::log(kappa) - half * std::log(2.0 * std::numbers::pi) - log_bessel_i(nu, kappa);
}

/// Mean resultant length A_E(kappa) = I_{E/2}(kappa) / I_{E/2-1}(kappa).
inline double vmf_mean_resultant(int dim, double kappa) {
  if (kappa == 0.0) return 0.0;
  const double nu = 0.5 * dim - 1.0;
  return std::exp(log_bessel_i(nu + 1.0, kappa) - log_bessel_i(nu, kappa));
}

/// log of the uniform density on the real unit sphere S^{E-1}.
inline double log_uniform_sphere(int dim) { return log_vmf_normalizer(dim, 0.0); }

}  // namespace mixsep
