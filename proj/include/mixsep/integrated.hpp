#pragma once

// Joint spatial/spectral mixture (VMFcACGMM): cACG components over normalized
// STFT bins and vMF components over frame embeddings share one latent class
// per time-frequency bin. The vMF factor is replicated along frequency.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mixsep/cacg.hpp"
#include "mixsep/error.hpp"
#include "mixsep/vmf.hpp"

namespace mixsep {

struct JointModel {
  std::vector<SpatialComponent> spatial;
  std::vector<SpectralComponent> spectral;
  std::optional<int> noise_index;  // exempt from fusion and counting; kappa pinned to 0

  int size() const { return static_cast<int>(spatial.size()); }
  int speaker_count() const { return size() - (noise_index ? 1 : 0); }
  bool is_noise(int k) const { return noise_index && *noise_index == k; }
};

struct FusionEvent {
  int kept = 0;
  int removed = 0;
  double similarity = 0.0;
  int iteration = 0;
};

enum class FusionStrategy { none, spectral, iou };

inline FusionStrategy parse_fusion_strategy(const std::string& s) {
  if (s == "none") return FusionStrategy::none;
  if (s == "spectral") return FusionStrategy::spectral;
  if (s == "iou") return FusionStrategy::iou;
  throw ConfigError("unknown fusion strategy '" + s + "'");
}

inline std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::none: return "none";
    case FusionStrategy::spectral: return "spectral";
    case FusionStrategy::iou: return "iou";
  }
  return "none";
}

/// Bounds applied by the fusion checks: fusion never leaves fewer than
/// `min_speakers` speaker components, nor fewer than `k_target` when set.
struct FusionLimits {
  int min_speakers = 1;
  std::optional<int> k_target;

  bool allows_fusion(const JointModel& m) const {
    const int floor = std::max(min_speakers, k_target.value_or(1));
    return m.speaker_count() > floor;
  }
};

struct JointConfig {
  int iterations = 100;
  FusionStrategy fusion = FusionStrategy::spectral;
  double tau_spectral = 0.7;
  double tau_iou = 0.85;
  double activity_threshold = 0.5;
  int fusion_start = 10;
  FusionLimits limits;
  double kappa_max = 35.0;
  bool freeze_spatial = false;  // keep B = I (diagnostic reduction to the spectral model)
  std::uint64_t seed = 0;
};

/// Spectral log-likelihood table K x T, noise component uses kappa = 0.
inline Eigen::MatrixXd joint_spectral_loglik(const EmbeddingSequence& e, const JointModel& model) {
  return vmf_log_likelihoods(e, model.spectral);
}

/// Joint E-step on normalized observations; writes gamma into `posterior`
/// (whose priors are the model priors) and returns the log-likelihood.
inline double joint_e_step(const StftTensor& x, const EmbeddingSequence& e, const JointModel& model,
                           PosteriorTensor& posterior, QuadCache* cache = nullptr) {
  if (x.frames != e.num_frames())
    throw InvalidInput("joint_e_step: STFT has " + std::to_string(x.frames) + " frames, embeddings have " +
                       std::to_string(e.num_frames()));
  if (static_cast<int>(model.spectral.size()) != model.size())
    throw InvalidInput("joint_e_step: spatial/spectral component count mismatch");
  const Eigen::MatrixXd spectral = joint_spectral_loglik(e, model);
  return mixture_e_step(x, model.spatial, posterior, &spectral, cache);
}

/// Decoupled M-step: priors from gamma, Tyler update for B with gamma, vMF
/// update with the frequency-summed gamma.
inline void joint_m_step(const StftTensor& x, const EmbeddingSequence& e, PosteriorTensor& posterior,
                         JointModel& model, const JointConfig& cfg, std::mt19937_64& rng,
                         const QuadCache* cache = nullptr) {
  if (posterior.components != model.size()) throw InvalidInput("joint_m_step: component count mismatch");
  update_priors(posterior);
  if (!cfg.freeze_spatial) model.spatial = cacg_m_step(x, posterior, model.spatial, cache);
  const Eigen::MatrixXd weights = posterior.frequency_sum();
  model.spectral = vmf_m_step(e, weights, cfg.kappa_max, rng);
  if (model.noise_index) model.spectral[*model.noise_index].kappa = 0.0;
}

/// Merges component j into i: gamma_i += gamma_j, B_i becomes the prior-mass
/// weighted average of B_i and B_j, and j is deleted.
inline void fuse_components(JointModel& model, PosteriorTensor& p, int i, int j) {
  if (i == j || i < 0 || j < 0 || i >= model.size() || j >= model.size())
    throw InvalidInput("fuse_components: bad component indices");
  const int frames = p.frames;
  double mass_i = 0.0, mass_j = 0.0;
  for (int t = 0; t < frames; ++t) {
    mass_i += p.prior(i, t);
    mass_j += p.prior(j, t);
  }
  const double total = mass_i + mass_j;
  const double wi = total > 0.0 ? mass_i / total : 0.5;
  const double wj = total > 0.0 ? mass_j / total : 0.5;
  auto& bi = model.spatial[i].covariances;
  const auto& bj = model.spatial[j].covariances;
  for (std::size_t f = 0; f < bi.size(); ++f)
    bi[f] = HermitianPD(bi[f].matrix() * wi + bj[f].matrix() * wj);

  for (int f = 0; f < p.bins; ++f) {
    double* gi = p.gamma_row(i, f);
    const double* gj = p.gamma_row(j, f);
    for (int t = 0; t < frames; ++t) gi[t] += gj[t];
  }
  for (int t = 0; t < frames; ++t) p.prior(i, t) += p.prior(j, t);

  // Drop row j from gamma and pi.
  PosteriorTensor q(p.components - 1, frames, p.bins);
  for (int k = 0, dst = 0; k < p.components; ++k) {
    if (k == j) continue;
    for (int f = 0; f < p.bins; ++f) std::copy_n(p.gamma_row(k, f), frames, q.gamma_row(dst, f));
    for (int t = 0; t < frames; ++t) q.prior(dst, t) = p.prior(k, t);
    ++dst;
  }
  p = std::move(q);
  model.spatial.erase(model.spatial.begin() + j);
  model.spectral.erase(model.spectral.begin() + j);
  if (model.noise_index && *model.noise_index > j) model.noise_index = *model.noise_index - 1;
}

namespace detail {

template <typename Score>
std::optional<FusionEvent> fuse_best_pair(JointModel& model, PosteriorTensor& p, double tau,
                                          const FusionLimits& limits, Score&& score) {
  if (!limits.allows_fusion(model)) return std::nullopt;
  double best = -std::numeric_limits<double>::infinity();
  int bi = -1, bj = -1;
  for (int i = 0; i < model.size(); ++i) {
    if (model.is_noise(i)) continue;
    for (int j = i + 1; j < model.size(); ++j) {
      if (model.is_noise(j)) continue;
      const double s = score(i, j);
      if (s > best) {
        best = s;
        bi = i;
        bj = j;
      }
    }
  }
  if (bi < 0 || !(best > tau)) return std::nullopt;
  fuse_components(model, p, bi, bj);
  return FusionEvent{bi, bj, best, 0};
}

}  // namespace detail

/// Fuses the pair of non-noise components whose prototypes have the largest
/// cosine similarity, if it exceeds tau. At most one fusion per call.
inline std::optional<FusionEvent> spectral_fusion_check(JointModel& model, PosteriorTensor& p, double tau,
                                                        const FusionLimits& limits = {}) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("spectral_fusion_check: tau must lie in (0, 1)");
  return detail::fuse_best_pair(model, p, tau, limits, [&](int i, int j) {
    return model.spectral[i].mu.dot(model.spectral[j].mu);
  });
}

/// Intersection-over-union of the binary activities pi_{k,t} > threshold.
inline double activity_iou(const PosteriorTensor& p, int i, int j, double activity_threshold) {
  int inter = 0, uni = 0;
  for (int t = 0; t < p.frames; ++t) {
    const bool a = p.prior(i, t) > activity_threshold;
    const bool b = p.prior(j, t) > activity_threshold;
    inter += (a && b) ? 1 : 0;
    uni += (a || b) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

/// IoU-based fusion baseline: same mechanics as the spectral check, with the
/// activity IoU as similarity.
inline std::optional<FusionEvent> iou_fusion_check(JointModel& model, PosteriorTensor& p, double tau,
                                                   double activity_threshold, const FusionLimits& limits = {}) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("iou_fusion_check: tau must lie in (0, 1)");
  return detail::fuse_best_pair(model, p, tau, limits,
                                [&](int i, int j) { return activity_iou(p, i, j, activity_threshold); });
}

inline int count_speakers(const JointModel& model) { return model.speaker_count(); }

struct JointResult {
  JointModel model;
  PosteriorTensor posterior;
  std::vector<FusionEvent> fusions;
  std::vector<double> loglik_trace;
  std::vector<int> k_trace;  // component count at each E-step
};

/// Recomputes the cached quadratic forms of one component (after fusion).
inline void refresh_quad_cache(const StftTensor& x, const SpatialComponent& comp, int k, QuadCache& cache) {
  for (int f = 0; f < x.bins; ++f) {
    const auto prec = detail::make_precision(comp.covariances[f]);
    double* row = cache.row(k, f);
    for (int t = 0; t < x.frames; ++t)
      row[t] = detail::hermitian_quad(prec.inv.data(), x.data.data() + x.offset(t, f), x.channels);
  }
}

inline void erase_cache_component(QuadCache& cache, int j) {
  const std::size_t block = static_cast<std::size_t>(cache.bins) * cache.frames;
  cache.quad.erase(cache.quad.begin() + static_cast<std::ptrdiff_t>(j * block),
                   cache.quad.begin() + static_cast<std::ptrdiff_t>((j + 1) * block));
  --cache.components;
}

/// Joint EM: M-step on `init`, then `iterations` x (E-step, optional fusion, M-step).
///
/// The returned posterior is the last E-step's gamma with the final priors.
/// `noise_index` marks the noise component of `init` (if any).
inline JointResult joint_em(const StftTensor& observations, const EmbeddingSequence& e, const PosteriorTensor& init,
                            const JointConfig& cfg, std::optional<int> noise_index = std::nullopt) {
  if (cfg.iterations < 1) throw ConfigError("joint_em: iterations must be >= 1");
  if (init.components < 1) throw ConfigError("joint_em: need at least one component");
  if (noise_index && (*noise_index < 0 || *noise_index >= init.components))
    throw ConfigError("joint_em: noise index out of range");
  const StftTensor normalized_copy = observations.normalized ? StftTensor{} : normalize_observations(observations);
  const StftTensor& x = observations.normalized ? observations : normalized_copy;
  x.validate();
  if (x.frames != e.num_frames()) throw InvalidInput("joint_em: frame count mismatch between STFT and embeddings");
  detail::check_shapes(x, init);

  std::mt19937_64 rng(cfg.seed);
  JointResult res;
  res.posterior = init;
  res.model.noise_index = noise_index;
  res.model.spatial.assign(static_cast<std::size_t>(init.components), SpatialComponent::identity(x.channels, x.bins));
  res.model.spectral.resize(static_cast<std::size_t>(init.components));

  QuadCache cache;
  bool have_cache = false;
  joint_m_step(x, e, res.posterior, res.model, cfg, rng, nullptr);
  for (int it = 0; it < cfg.iterations; ++it) {
    res.loglik_trace.push_back(joint_e_step(x, e, res.model, res.posterior, &cache));
    res.k_trace.push_back(res.model.size());
    have_cache = true;
    if (cfg.fusion != FusionStrategy::none && it >= cfg.fusion_start) {
      std::optional<FusionEvent> ev =
          cfg.fusion == FusionStrategy::spectral
              ? spectral_fusion_check(res.model, res.posterior, cfg.tau_spectral, cfg.limits)
              : iou_fusion_check(res.model, res.posterior, cfg.tau_iou, cfg.activity_threshold, cfg.limits);
      if (ev) {
        ev->iteration = it;
        res.fusions.push_back(*ev);
        erase_cache_component(cache, ev->removed);
        refresh_quad_cache(x, res.model.spatial[ev->kept], ev->kept, cache);
      }
    }
    joint_m_step(x, e, res.posterior, res.model, cfg, rng, have_cache && !cfg.freeze_spatial ? &cache : nullptr);
  }
  // Leave gamma from the last E-step (after any fusion); priors are already updated.
  return res;
}

}  // namespace mixsep
