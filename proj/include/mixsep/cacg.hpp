#pragma once

// Complex Angular Central Gaussian distribution and the spatial mixture model
// (cACGMM) with frequency-tied, time-varying priors and Tyler-type updates.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mixsep/error.hpp"
#include "mixsep/numerics.hpp"

namespace mixsep {

/// Multichannel STFT observations y_{t,f}, stored bin-major: the C channel
/// values of one (t, f) are contiguous, frames of one bin are contiguous.
struct StftTensor {
  int channels = 0;
  int frames = 0;
  int bins = 0;
  std::vector<cdouble> data;
  double sample_rate = 16000.0;
  int fft_size = 0;
  int window_size = 0;
  int shift = 0;
  bool normalized = false;
  bool empty_flag = false;        // set when the signal was shorter than one window
  std::vector<std::uint8_t> zero_bins;  // T*F flags from normalize_observations, index f*T + t

  StftTensor() = default;
  StftTensor(int c, int t, int f)
      : channels(c), frames(t), bins(f), data(static_cast<std::size_t>(c) * t * f, cdouble(0.0, 0.0)) {}

  std::size_t offset(int t, int f) const {
    return (static_cast<std::size_t>(f) * frames + t) * channels;
  }
  cdouble& at(int c, int t, int f) { return data[offset(t, f) + c]; }
  cdouble at(int c, int t, int f) const { return data[offset(t, f) + c]; }
  std::span<const cdouble> bin(int t, int f) const {
    return {data.data() + offset(t, f), static_cast<std::size_t>(channels)};
  }
  std::span<cdouble> bin(int t, int f) {
    return {data.data() + offset(t, f), static_cast<std::size_t>(channels)};
  }
  double frame_rate() const { return shift > 0 ? sample_rate / shift : 0.0; }

  /// Throws unless C >= 2 and every entry is finite.
  void validate() const {
    if (channels < 2) throw InvalidInput("stft: at least two channels required");
    if (data.size() != static_cast<std::size_t>(channels) * frames * bins)
      throw InvalidInput("stft: data size does not match dimensions");
    for (const auto& v : data)
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
        throw InvalidInput("stft: non-finite observation");
  }

  /// Frames [begin, end) of every bin.
  StftTensor slice_frames(int begin, int end) const {
    StftTensor out(channels, end - begin, bins);
    out.sample_rate = sample_rate;
    out.fft_size = fft_size;
    out.window_size = window_size;
    out.shift = shift;
    out.normalized = normalized;
    for (int f = 0; f < bins; ++f)
      for (int t = begin; t < end; ++t) {
        const auto src = bin(t, f);
        std::copy(src.begin(), src.end(), out.bin(t - begin, f).begin());
      }
    if (!zero_bins.empty()) {
      out.zero_bins.resize(static_cast<std::size_t>(out.frames) * bins);
      for (int f = 0; f < bins; ++f)
        for (int t = begin; t < end; ++t)
          out.zero_bins[static_cast<std::size_t>(f) * out.frames + (t - begin)] =
              zero_bins[static_cast<std::size_t>(f) * frames + t];
    }
    return out;
  }
};

/// Class posteriors gamma_{k,t,f} and frequency-tied priors pi_{k,t}.
struct PosteriorTensor {
  int components = 0;
  int frames = 0;
  int bins = 0;
  std::vector<double> gamma;  // index (k*F + f)*T + t
  std::vector<double> pi;     // index k*T + t

  PosteriorTensor() = default;
  PosteriorTensor(int k, int t, int f)
      : components(k), frames(t), bins(f),
        gamma(static_cast<std::size_t>(k) * t * f, 0.0), pi(static_cast<std::size_t>(k) * t, 0.0) {}

  std::size_t index(int k, int t, int f) const {
    return (static_cast<std::size_t>(k) * bins + f) * frames + t;
  }
  double& g(int k, int t, int f) { return gamma[index(k, t, f)]; }
  double g(int k, int t, int f) const { return gamma[index(k, t, f)]; }
  double& prior(int k, int t) { return pi[static_cast<std::size_t>(k) * frames + t]; }
  double prior(int k, int t) const { return pi[static_cast<std::size_t>(k) * frames + t]; }
  const double* gamma_row(int k, int f) const { return gamma.data() + index(k, 0, f); }
  double* gamma_row(int k, int f) { return gamma.data() + index(k, 0, f); }

  /// Replicates a K x T frame posterior over F bins; pi is set to the same values.
  static PosteriorTensor replicate(const Eigen::MatrixXd& frame_posterior, int bins) {
    const int k_count = static_cast<int>(frame_posterior.rows());
    const int frames = static_cast<int>(frame_posterior.cols());
    PosteriorTensor p(k_count, frames, bins);
    for (int k = 0; k < k_count; ++k) {
      for (int t = 0; t < frames; ++t) p.prior(k, t) = frame_posterior(k, t);
      for (int f = 0; f < bins; ++f)
        for (int t = 0; t < frames; ++t) p.g(k, t, f) = frame_posterior(k, t);
    }
    return p;
  }

  /// Sum over frequency of gamma, K x T (the vMF M-step weights).
  Eigen::MatrixXd frequency_sum() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(components, frames);
    for (int k = 0; k < components; ++k)
      for (int f = 0; f < bins; ++f) {
        const double* row = gamma_row(k, f);
        for (int t = 0; t < frames; ++t) out(k, t) += row[t];
      }
    return out;
  }

  Eigen::MatrixXd prior_matrix() const {
    Eigen::MatrixXd out(components, frames);
    for (int k = 0; k < components; ++k)
      for (int t = 0; t < frames; ++t) out(k, t) = prior(k, t);
    return out;
  }
};

struct SpatialComponent {
  std::vector<HermitianPD> covariances;  // one per frequency bin
  std::vector<std::uint8_t> inactive;    // per-bin flag: no responsibility mass in the last M-step

  static SpatialComponent identity(int channels, int bins) {
    SpatialComponent s;
    s.covariances.assign(static_cast<std::size_t>(bins), HermitianPD::identity(channels));
    s.inactive.assign(static_cast<std::size_t>(bins), 0);
    return s;
  }
};

/// Scales every channel vector to unit norm. All-zero (or non-finite-norm)
/// vectors become e_1 and are flagged in `zero_bins`.
inline StftTensor normalize_observations(const StftTensor& x) {
  StftTensor out = x;
  out.zero_bins.assign(static_cast<std::size_t>(x.frames) * x.bins, 0);
  for (int f = 0; f < x.bins; ++f)
    for (int t = 0; t < x.frames; ++t) {
      auto v = out.bin(t, f);
      double n2 = 0.0;
      for (const auto& c : v) n2 += std::norm(c);
      const double n = std::sqrt(n2);
      if (n > 0.0 && std::isfinite(n)) {
        for (auto& c : v) c /= n;
      } else {
        for (auto& c : v) c = 0.0;
        v[0] = 1.0;
        out.zero_bins[static_cast<std::size_t>(f) * x.frames + t] = 1;
      }
    }
  out.normalized = true;
  return out;
}

namespace detail {

/// Inverse and log-determinant of one B_{k,f}, column-major C x C.
struct Precision {
  std::vector<cdouble> inv;
  double logdet = 0.0;
};

inline Precision make_precision(const HermitianPD& b) {
  const auto llt = b.cholesky();
  if (llt.info() != Eigen::Success) throw NumericalError("cACG: Cholesky failed");
  const auto& l = llt.matrixLLT();
  Precision p;
  for (Eigen::Index i = 0; i < l.rows(); ++i) p.logdet += 2.0 * std::log(l(i, i).real());
  const Eigen::MatrixXcd inv = llt.solve(Eigen::MatrixXcd::Identity(b.dim(), b.dim()));
  p.inv.assign(inv.data(), inv.data() + inv.size());
  return p;
}

/// Re(y^H A y) for Hermitian A stored column-major.
inline double hermitian_quad(const cdouble* a, const cdouble* y, int c) {
  double q = 0.0;
  for (int j = 0; j < c; ++j) {
    const cdouble* col = a + static_cast<std::size_t>(j) * c;
    q += col[j].real() * std::norm(y[j]);
    cdouble acc(0.0, 0.0);
    for (int i = 0; i < j; ++i) acc += std::conj(y[i]) * col[i];
    q += 2.0 * (acc * y[j]).real();
  }
  return q;
}

inline double cacg_log_constant(int c) {
  return std::lgamma(static_cast<double>(c)) - std::numbers::ln2 - c * std::log(std::numbers::pi);
}

}  // namespace detail

/// ln p_cACG(y; B) = ln (C-1)! - ln 2 - C ln pi - ln det B - C ln(y^H B^{-1} y).
inline double cacg_log_pdf(const HermitianPD& b, std::span<const cdouble> y) {
  const auto [logdet, quad] = cholesky_logdet_solve(b, y);
  if (!(quad > 0.0)) throw NumericalError("cacg_log_pdf: non-positive quadratic form");
  const int c = b.dim();
  return detail::cacg_log_constant(c) - logdet - c * std::log(quad);
}

/// Per-(k, f, t) quadratic forms y^H B_{k,f}^{-1} y of the last E-step; lets the
/// Tyler update reuse them instead of re-solving against the previous B.
struct QuadCache {
  int components = 0;
  int frames = 0;
  int bins = 0;
  std::vector<double> quad;  // index (k*F + f)*T + t

  void resize(int k, int t, int f) {
    components = k;
    frames = t;
    bins = f;
    quad.assign(static_cast<std::size_t>(k) * t * f, 0.0);
  }
  double* row(int k, int f) { return quad.data() + (static_cast<std::size_t>(k) * bins + f) * frames; }
  const double* row(int k, int f) const {
    return quad.data() + (static_cast<std::size_t>(k) * bins + f) * frames;
  }
};

namespace detail {

inline void check_shapes(const StftTensor& x, const PosteriorTensor& g) {
  if (g.frames != x.frames || g.bins != x.bins)
    throw InvalidInput("cACG: posterior shape does not match observations");
}

/// Tyler update of one component at one bin.
inline void tyler_update_bin(const StftTensor& x, const PosteriorTensor& gamma, int k, int f,
                             const HermitianPD& prev, const double* cached_quad, HermitianPD& out,
                             std::uint8_t& inactive) {
  const int c = x.channels;
  const double* g = gamma.gamma_row(k, f);
  const std::uint8_t* zero = x.zero_bins.empty() ? nullptr : x.zero_bins.data() + static_cast<std::size_t>(f) * x.frames;
  Precision prec;
  if (cached_quad == nullptr) prec = make_precision(prev);
  Eigen::MatrixXcd acc = Eigen::MatrixXcd::Zero(c, c);
  double mass = 0.0;
  for (int t = 0; t < x.frames; ++t) {
    const double w = g[t];
    if (w <= 0.0 || (zero != nullptr && zero[t])) continue;
    const cdouble* y = x.data.data() + x.offset(t, f);
    const double q = cached_quad != nullptr ? cached_quad[t] : hermitian_quad(prec.inv.data(), y, c);
    const double s = w / q;
    for (int j = 0; j < c; ++j) {
      const cdouble yj = s * y[j];
      for (int i = 0; i <= j; ++i) acc(i, j) += y[i] * std::conj(yj);
    }
    mass += w;
  }
  if (!(mass > 1e-10)) {
    out = prev;
    inactive = 1;
    return;
  }
  for (int j = 0; j < c; ++j)
    for (int i = j + 1; i < c; ++i) acc(i, j) = std::conj(acc(j, i));
  acc *= static_cast<double>(c) / mass;
  HermitianPD loaded = diagonal_load(acc, kDefaultLoading);
  out = HermitianPD(loaded.matrix() * (static_cast<double>(c) / loaded.trace()));
  inactive = 0;
}

}  // namespace detail

/// One Tyler fixed-point step per component and bin:
/// B = C * sum_t gamma y y^H / (y^H B_prev^{-1} y) / sum_t gamma, then
/// symmetrized, loaded and scaled to trace C. `cache` (optional) must hold
/// the quadratic forms of `x` against `prev`.
inline std::vector<SpatialComponent> cacg_m_step(const StftTensor& x, const PosteriorTensor& gamma,
                                                 const std::vector<SpatialComponent>& prev,
                                                 const QuadCache* cache = nullptr) {
  detail::check_shapes(x, gamma);
  if (static_cast<int>(prev.size()) != gamma.components)
    throw InvalidInput("cacg_m_step: component count mismatch");
  std::vector<SpatialComponent> out(prev.size());
  for (int k = 0; k < gamma.components; ++k) {
    if (static_cast<int>(prev[k].covariances.size()) != x.bins)
      throw InvalidInput("cacg_m_step: covariance count does not match bins");
    out[k].covariances.resize(static_cast<std::size_t>(x.bins));
    out[k].inactive.assign(static_cast<std::size_t>(x.bins), 0);
    for (int f = 0; f < x.bins; ++f)
      detail::tyler_update_bin(x, gamma, k, f, prev[k].covariances[f],
                               cache != nullptr ? cache->row(k, f) : nullptr, out[k].covariances[f],
                               out[k].inactive[f]);
  }
  return out;
}

/// pi_{k,t} = mean_f gamma_{k,t,f}, floored at 1e-10 and renormalized.
inline void update_priors(PosteriorTensor& p) {
  const double inv_f = 1.0 / p.bins;
  std::fill(p.pi.begin(), p.pi.end(), 0.0);
  for (int k = 0; k < p.components; ++k)
    for (int f = 0; f < p.bins; ++f) {
      const double* row = p.gamma_row(k, f);
      double* pr = p.pi.data() + static_cast<std::size_t>(k) * p.frames;
      for (int t = 0; t < p.frames; ++t) pr[t] += row[t];
    }
  for (int t = 0; t < p.frames; ++t) {
    double s = 0.0;
    for (int k = 0; k < p.components; ++k) {
      double& v = p.prior(k, t);
      v = std::max(v * inv_f, 1e-10);
      s += v;
    }
    for (int k = 0; k < p.components; ++k) p.prior(k, t) /= s;
  }
}

/// E-step gamma ∝ pi * p_cACG(y; B) * exp(extra) in the log domain.
///
/// `extra` is an optional K x T additive log term (the spectral model in the
/// joint case). Overwrites p.gamma, keeps p.pi, fills `cache` when given.
/// Returns the observed-data log-likelihood sum_{t,f} ln sum_k (...).
inline double mixture_e_step(const StftTensor& x, const std::vector<SpatialComponent>& comps,
                             PosteriorTensor& p, const Eigen::MatrixXd* extra, QuadCache* cache) {
  detail::check_shapes(x, p);
  const int k_count = p.components;
  const int c = x.channels;
  if (static_cast<int>(comps.size()) != k_count) throw InvalidInput("E-step: component count mismatch");
  if (extra != nullptr && (extra->rows() != k_count || extra->cols() != x.frames))
    throw InvalidInput("E-step: extra log-likelihood shape mismatch");
  if (cache != nullptr) cache->resize(k_count, x.frames, x.bins);
  const double log_const = detail::cacg_log_constant(c);

  Eigen::MatrixXd base(k_count, x.frames);  // ln pi + extra, shared across bins
  for (int k = 0; k < k_count; ++k)
    for (int t = 0; t < x.frames; ++t) {
      const double pr = p.prior(k, t);
      base(k, t) = (pr > 0.0 ? std::log(pr) : -std::numeric_limits<double>::infinity()) +
                   (extra != nullptr ? (*extra)(k, t) : 0.0);
    }

  double total = 0.0;
  std::vector<detail::Precision> prec(static_cast<std::size_t>(k_count));
  std::vector<double> ll(static_cast<std::size_t>(k_count));
  std::vector<double> quads(static_cast<std::size_t>(k_count));
  for (int f = 0; f < x.bins; ++f) {
    for (int k = 0; k < k_count; ++k) prec[k] = detail::make_precision(comps[k].covariances[f]);
    for (int t = 0; t < x.frames; ++t) {
      const cdouble* y = x.data.data() + x.offset(t, f);
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < k_count; ++k) {
        const double q = detail::hermitian_quad(prec[k].inv.data(), y, c);
        if (!(q > 0.0)) throw NumericalError("E-step: non-positive quadratic form");
        quads[k] = q;
        ll[k] = base(k, t) + log_const - prec[k].logdet - c * std::log(q);
        mx = std::max(mx, ll[k]);
      }
      double s = 0.0;
      for (int k = 0; k < k_count; ++k) s += std::exp(ll[k] - mx);
      const double lse = mx + std::log(s);
      total += lse;
      for (int k = 0; k < k_count; ++k) {
        p.g(k, t, f) = std::exp(ll[k] - lse);
        if (cache != nullptr) cache->row(k, f)[t] = quads[k];
      }
    }
  }
  return total;
}

struct CacgmmResult {
  std::vector<SpatialComponent> components;
  PosteriorTensor posterior;
  std::vector<double> loglik_trace;
};

/// cACGMM EM starting with an M-step on `init_gamma` (B_prev = I for the first
/// Tyler step). One Tyler step per iteration.
inline CacgmmResult cacgmm_em(const StftTensor& observations, const PosteriorTensor& init_gamma, int iterations) {
  if (iterations < 1) throw ConfigError("cacgmm_em: iterations must be >= 1");
  if (init_gamma.components < 1) throw ConfigError("cacgmm_em: need at least one component");
  const StftTensor normalized_copy = observations.normalized ? StftTensor{} : normalize_observations(observations);
  const StftTensor& x = observations.normalized ? observations : normalized_copy;
  x.validate();
  detail::check_shapes(x, init_gamma);

  CacgmmResult res;
  res.posterior = init_gamma;
  res.components.assign(static_cast<std::size_t>(init_gamma.components),
                        SpatialComponent::identity(x.channels, x.bins));
  QuadCache cache;
  bool have_cache = false;
  for (int it = 0; it < iterations; ++it) {
    update_priors(res.posterior);
    res.components = cacg_m_step(x, res.posterior, res.components, have_cache ? &cache : nullptr);
    res.loglik_trace.push_back(mixture_e_step(x, res.components, res.posterior, nullptr, &cache));
    have_cache = true;
  }
  return res;
}

}  // namespace mixsep
