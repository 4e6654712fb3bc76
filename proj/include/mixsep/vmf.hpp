#pragma once

// von-Mises-Fisher distribution and the spectral diarization mixture (VMFMM)
// over unit-norm frame-level speaker embeddings.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "mixsep/error.hpp"
#include "mixsep/numerics.hpp"

namespace mixsep {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct SpectralComponent {
  Eigen::VectorXd mu;   // unit prototype embedding
  double kappa = 0.0;   // concentration
  bool degenerate = false;  // set when the last M-step saw a zero resultant
};

/// T x E matrix of unit-norm embeddings, one row per STFT frame.
struct EmbeddingSequence {
  RowMatrixXd frames;
  double frame_rate = 62.5;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }

  /// Row-normalizes `raw`; rejects NaN/Inf and all-zero rows.
  static EmbeddingSequence from_raw(RowMatrixXd raw, double frame_rate) {
    if (!raw.allFinite()) throw InvalidInput("embeddings: non-finite entries");
    if (raw.cols() < 2) throw InvalidInput("embeddings: dimension must be >= 2");
    for (Eigen::Index t = 0; t < raw.rows(); ++t) {
      const double n = raw.row(t).norm();
      if (!(n > 0.0)) throw InvalidInput("embeddings: zero-norm row " + std::to_string(t));
      raw.row(t) /= n;
    }
    return EmbeddingSequence{std::move(raw), frame_rate};
  }

  EmbeddingSequence slice(int begin, int end) const {
    return EmbeddingSequence{frames.middleRows(begin, end - begin), frame_rate};
  }
};

/// Mixture of vMF components with global priors.
struct VmfMixture {
  std::vector<SpectralComponent> components;
  Eigen::VectorXd weights;
  double kappa_max = 35.0;

  int size() const { return static_cast<int>(components.size()); }
};

inline double vmf_log_pdf(const SpectralComponent& c, const Eigen::Ref<const Eigen::VectorXd>& e) {
  if (e.size() != c.mu.size()) throw InvalidInput("vmf_log_pdf: dimension mismatch");
  if (std::abs(e.norm() - 1.0) > 1e-3) throw InvalidInput("vmf_log_pdf: embedding is not unit-norm");
  return log_vmf_normalizer(static_cast<int>(e.size()), c.kappa) + c.kappa * c.mu.dot(e);
}

/// Banerjee et al. approximation of the concentration MLE, capped at kappa_max.
inline double banerjee_kappa(double rbar, int dim, double kappa_max) {
  if (rbar >= 1.0 - 1e-12) return kappa_max;
  if (rbar <= 0.0) return 0.0;
  const double k = (rbar * dim - rbar * rbar * rbar) / (1.0 - rbar * rbar);
  return std::clamp(k, 0.0, kappa_max);
}

/// Concentration MLE on [0, kappa_max]: the root of A_E(kappa) = rbar, found
/// by safeguarded Newton steps from the Banerjee value. The vMF log-likelihood
/// is concave in kappa, so the cap is the constrained maximizer whenever
/// A_E(kappa_max) <= rbar. Exactness keeps the EM objective monotone.
inline double vmf_kappa_mle(double rbar, int dim, double kappa_max) {
  if (rbar <= 0.0 || kappa_max <= 0.0) return 0.0;
  if (rbar >= 1.0 - 1e-12 || vmf_mean_resultant(dim, kappa_max) <= rbar) return kappa_max;
  double lo = 0.0, hi = kappa_max;
  double k = std::clamp((rbar * dim - rbar * rbar * rbar) / (1.0 - rbar * rbar), 1e-300, kappa_max);
  for (int it = 0; it < 100; ++it) {
    const double a = vmf_mean_resultant(dim, k);
    const double r = a - rbar;
    if (r > 0.0) hi = k; else lo = k;
    const double slope = 1.0 - a * a - (dim - 1) * a / k;  // A'(kappa) > 0
    double next = slope > 0.0 ? k - r / slope : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    const bool done = std::abs(next - k) <= 1e-13 * std::max(1.0, k);
    k = next;
    if (done) break;
  }
  return k;
}

inline Eigen::VectorXd random_unit_vector(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  Eigen::VectorXd v(dim);
  double norm = 0.0;
  do {
    for (int i = 0; i < dim; ++i) v(i) = n01(rng);
    norm = v.norm();
  } while (norm < 1e-12);
  return v / norm;
}

/// Weighted vMF M-step. `resp` is K x T with nonnegative weights; columns may
/// sum to more than one (frequency-summed responsibilities).
inline std::vector<SpectralComponent> vmf_m_step(const EmbeddingSequence& e,
                                                 const Eigen::Ref<const Eigen::MatrixXd>& resp,
                                                 double kappa_max, std::mt19937_64& rng) {
  if (resp.cols() != e.num_frames()) throw InvalidInput("vmf_m_step: responsibilities/frames mismatch");
  if ((resp.array() < 0.0).any() || !resp.allFinite())
    throw InvalidInput("vmf_m_step: responsibilities must be finite and nonnegative");
  const int dim = e.dim();
  const Eigen::MatrixXd resultants = resp * e.frames;  // K x E
  std::vector<SpectralComponent> out(static_cast<std::size_t>(resp.rows()));
  for (Eigen::Index k = 0; k < resp.rows(); ++k) {
    const double mass = resp.row(k).sum();
    const double rnorm = resultants.row(k).norm();
    auto& c = out[static_cast<std::size_t>(k)];
    if (!(mass > 0.0) || !(rnorm > 1e-12 * mass)) {
      c.mu = random_unit_vector(dim, rng);
      c.kappa = 0.0;
      c.degenerate = true;
      continue;
    }
    c.mu = resultants.row(k).transpose() / rnorm;
    c.kappa = vmf_kappa_mle(std::min(rnorm / mass, 1.0), dim, kappa_max);
  }
  return out;
}

inline std::vector<SpectralComponent> vmf_m_step(const EmbeddingSequence& e,
                                                 const Eigen::Ref<const Eigen::MatrixXd>& resp,
                                                 double kappa_max, std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  return vmf_m_step(e, resp, kappa_max, rng);
}

/// K x T matrix of ln c(kappa_k) + kappa_k mu_k^T e_t.
inline Eigen::MatrixXd vmf_log_likelihoods(const EmbeddingSequence& e,
                                           const std::vector<SpectralComponent>& comps) {
  const int k_count = static_cast<int>(comps.size());
  Eigen::MatrixXd mus(k_count, e.dim());
  Eigen::VectorXd kappa(k_count), log_norm(k_count);
  for (int k = 0; k < k_count; ++k) {
    if (comps[k].mu.size() != e.dim()) throw InvalidInput("vmf: prototype dimension mismatch");
    mus.row(k) = comps[k].mu.transpose();
    kappa(k) = comps[k].kappa;
    log_norm(k) = log_vmf_normalizer(e.dim(), comps[k].kappa);
  }
  Eigen::MatrixXd ll = mus * e.frames.transpose();
  for (int k = 0; k < k_count; ++k) ll.row(k) = (ll.row(k).array() * kappa(k) + log_norm(k)).matrix();
  return ll;
}

struct VmfEStep {
  Eigen::MatrixXd resp;  // K x T, columns sum to one
  double loglik = 0.0;
};

inline VmfEStep vmfmm_e_step(const EmbeddingSequence& e, const VmfMixture& mix) {
  const Eigen::MatrixXd ll = vmf_log_likelihoods(e, mix.components);
  const int k_count = mix.size();
  const int frames = e.num_frames();
  Eigen::VectorXd log_w(k_count);
  for (int k = 0; k < k_count; ++k)
    log_w(k) = mix.weights(k) > 0.0 ? std::log(mix.weights(k)) : -std::numeric_limits<double>::infinity();
  VmfEStep out{Eigen::MatrixXd(k_count, frames), 0.0};
  std::vector<double> col(static_cast<std::size_t>(k_count));
  for (int t = 0; t < frames; ++t) {
    for (int k = 0; k < k_count; ++k) col[k] = log_w(k) + ll(k, t);
    const double lse = logsumexp(col);
    out.loglik += lse;
    for (int k = 0; k < k_count; ++k) out.resp(k, t) = std::exp(col[k] - lse);
  }
  return out;
}

struct VmfmmResult {
  VmfMixture mixture;
  Eigen::MatrixXd resp;  // K x T
  std::vector<double> loglik_trace;
};

/// EM for the vMF mixture, starting with an M-step on `init_resp`.
inline VmfmmResult vmfmm_em(const EmbeddingSequence& e, const Eigen::MatrixXd& init_resp, int iterations,
                            double kappa_max, std::uint64_t seed = 0) {
  if (iterations < 1) throw ConfigError("vmfmm_em: iterations must be >= 1");
  const auto k_count = init_resp.rows();
  if (k_count < 1) throw ConfigError("vmfmm_em: need at least one component");
  if (k_count > e.num_frames()) throw ConfigError("vmfmm_em: more components than frames");
  if (init_resp.cols() != e.num_frames()) throw InvalidInput("vmfmm_em: init responsibilities/frames mismatch");
  std::mt19937_64 rng(seed);
  VmfmmResult res;
  res.mixture.kappa_max = kappa_max;
  Eigen::MatrixXd resp = init_resp;
  for (int it = 0; it < iterations; ++it) {
    res.mixture.components = vmf_m_step(e, resp, kappa_max, rng);
    Eigen::VectorXd w = resp.rowwise().sum();
    w /= w.sum();
    res.mixture.weights = w;
    VmfEStep es = vmfmm_e_step(e, res.mixture);
    resp = std::move(es.resp);
    res.loglik_trace.push_back(es.loglik);
  }
  res.resp = std::move(resp);
  return res;
}

/// Spherical k-means with k-means++ seeding under d(a, b) = 1 - a^T b.
///
/// Returns one cluster label per frame. Deterministic given `seed`; with
/// `restarts` > 1 the run with the smallest total distance is kept.
inline std::vector<int> spherical_kmeans_pp(const EmbeddingSequence& e, int clusters, std::uint64_t seed,
                                            int restarts = 1, int max_iterations = 100) {
  const int frames = e.num_frames();
  if (clusters < 1) throw ConfigError("spherical_kmeans_pp: K must be >= 1");
  if (clusters > frames) throw ConfigError("spherical_kmeans_pp: K exceeds number of frames");
  const auto& x = e.frames;
  std::vector<int> best;
  double best_cost = std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(seed);
  for (int run = 0; run < std::max(restarts, 1); ++run) {
    Eigen::MatrixXd centers(clusters, e.dim());
    std::vector<double> dmin(frames, std::numeric_limits<double>::infinity());
    std::uniform_int_distribution<int> pick(0, frames - 1);
    centers.row(0) = x.row(pick(rng));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int c = 1; c < clusters; ++c) {
      double total = 0.0;
      for (int t = 0; t < frames; ++t) {
        const double d = std::max(0.0, 1.0 - x.row(t).dot(centers.row(c - 1)));
        dmin[t] = std::min(dmin[t], d);
        total += dmin[t];
      }
      int chosen = 0;
      if (total > 0.0) {
        const double target = u01(rng) * total;
        double acc = 0.0;
        chosen = frames - 1;
        for (int t = 0; t < frames; ++t) {
          acc += dmin[t];
          if (acc >= target && dmin[t] > 0.0) {
            chosen = t;
            break;
          }
        }
      } else {
        chosen = pick(rng);
      }
      centers.row(c) = x.row(chosen);
    }

    std::vector<int> labels(frames, -1);
    for (int iter = 0; iter < max_iterations; ++iter) {
      const Eigen::MatrixXd sim = x * centers.transpose();  // T x K
      bool changed = false;
      for (int t = 0; t < frames; ++t) {
        int arg = 0;
        for (int c = 1; c < clusters; ++c)
          if (sim(t, c) > sim(t, arg)) arg = c;
        if (labels[t] != arg) {
          labels[t] = arg;
          changed = true;
        }
      }
      if (!changed && iter > 0) break;
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(clusters, e.dim());
      std::vector<int> counts(clusters, 0);
      for (int t = 0; t < frames; ++t) {
        sums.row(labels[t]) += x.row(t);
        ++counts[labels[t]];
      }
      for (int c = 0; c < clusters; ++c) {
        const double n = sums.row(c).norm();
        if (counts[c] > 0 && n > 1e-12) {
          centers.row(c) = sums.row(c) / n;
          continue;
        }
        // Empty or cancelling cluster: re-seed from the point farthest from its centroid.
        int far = 0;
        double far_d = -1.0;
        for (int t = 0; t < frames; ++t) {
          const double d = 1.0 - x.row(t).dot(centers.row(labels[t]));
          if (d > far_d) {
            far_d = d;
            far = t;
          }
        }
        centers.row(c) = x.row(far);
        labels[far] = c;
        changed = true;
      }
    }
    double cost = 0.0;
    for (int t = 0; t < frames; ++t) cost += 1.0 - x.row(t).dot(centers.row(labels[t]));
    if (cost < best_cost) {
      best_cost = cost;
      best = labels;
    }
  }
  return best;
}

/// One-hot responsibilities with `floor` mass spread over the other components.
inline Eigen::MatrixXd smoothed_one_hot(const std::vector<int>& labels, int clusters, double floor = 0.01) {
  Eigen::MatrixXd r(clusters, static_cast<Eigen::Index>(labels.size()));
  const double other = clusters > 1 ? floor / (clusters - 1) : 0.0;
  const double own = clusters > 1 ? 1.0 - floor : 1.0;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    r.col(static_cast<Eigen::Index>(t)).setConstant(other);
    r(labels[t], static_cast<Eigen::Index>(t)) = own;
  }
  return r;
}

}  // namespace mixsep
