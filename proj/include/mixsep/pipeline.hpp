#pragma once

// Orchestration: initialization chain, per-segment joint EM with fusion,
// prior smoothing into utterances, mask-based MVDR beamforming, cross-segment
// alignment on speaker prototypes, and serialization of results.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <bit>
#include <numeric>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mixsep/cacg.hpp"
#include "mixsep/error.hpp"
#include "mixsep/frontend.hpp"
#include "mixsep/hungarian.hpp"
#include "mixsep/integrated.hpp"
#include "mixsep/metrics.hpp"
#include "mixsep/numerics.hpp"
#include "mixsep/rttm.hpp"
#include "mixsep/vmf.hpp"

namespace mixsep {

enum class InitMode { global, per_segment };

inline InitMode parse_init_mode(const std::string& s) {
  if (s == "global") return InitMode::global;
  if (s == "per_segment") return InitMode::per_segment;
  throw ConfigError("unknown init mode '" + s + "'");
}

inline std::string to_string(InitMode m) { return m == InitMode::global ? "global" : "per_segment"; }

struct InitConfig {
  int k_init = 10;
  InitMode mode = InitMode::per_segment;
  int iterations = 30;
  double kappa_max = 35.0;
  int kmeans_restarts = 3;
  double noise_floor = 0.01;  // noise posterior on voiced frames
};

struct SmoothingConfig {
  int median_frames = 21;
  double on_thresh = 0.5;
  double min_dur_s = 0.5;
  double merge_gap_s = 0.2;
};

struct AlignmentConfig {
  int k_total = 0;           // 0: estimate from the prototypes
  double threshold = 0.5;    // cosine stop level for the estimate
  int restarts = 10;
};

struct PipelineConfig {
  StftConfig stft;
  VadConfig vad;
  SegmentationConfig segmentation;
  double segment_padding_s = 0.3;
  InitConfig init;
  JointConfig em;
  SmoothingConfig smoothing;
  AlignmentConfig alignment;
  int reference_channel = 0;
  int jobs = 1;
  std::uint64_t seed = 0;
};

struct InitResult {
  PosteriorTensor posterior;
  int noise_index = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<int> voiced_frames(const VadMask& vad) {
  std::vector<int> idx;
  for (int t = 0; t < vad.size(); ++t)
    if (vad.frames[t]) idx.push_back(t);
  return idx;
}

inline EmbeddingSequence gather_frames(const EmbeddingSequence& e, const std::vector<int>& idx) {
  RowMatrixXd m(static_cast<Eigen::Index>(idx.size()), e.dim());
  for (std::size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = e.frames.row(idx[i]);
  return EmbeddingSequence{std::move(m), e.frame_rate};
}

}  // namespace detail

/// Whole-meeting VMFMM on voiced frames, reused by the global init mode.
inline VmfMixture fit_global_init(const EmbeddingSequence& e, const VadMask& vad, const InitConfig& cfg,
                                  std::uint64_t seed) {
  const auto idx = detail::voiced_frames(vad);
  const int k = std::min<int>(cfg.k_init, static_cast<int>(idx.size()));
  if (k < 1) throw InvalidInput("global init: no voiced frames");
  const auto ev = detail::gather_frames(e, idx);
  const auto labels = spherical_kmeans_pp(ev, k, seed, cfg.kmeans_restarts);
  return vmfmm_em(ev, smoothed_one_hot(labels, k), cfg.iterations, cfg.kappa_max, seed).mixture;
}

/// Initial posteriors for one segment: k-means++ then a short VMFMM on the
/// voiced frames, silence frames on an added noise component (last index),
/// replicated over frequency.
inline InitResult initialize_segment(const StftTensor& x, const EmbeddingSequence& e, const VadMask& vad,
                                     const InitConfig& cfg, std::uint64_t seed,
                                     const VmfMixture* global = nullptr) {
  if (cfg.k_init < 1) throw ConfigError("initialize_segment: K_init must be >= 1");
  if (vad.size() != e.num_frames() || x.frames != e.num_frames())
    throw InvalidInput("initialize_segment: frame counts of STFT, embeddings and VAD differ");
  const int frames = e.num_frames();
  const auto idx = detail::voiced_frames(vad);
  InitResult out;
  Eigen::MatrixXd resp;  // K x |voiced|
  if (cfg.mode == InitMode::global) {
    if (!global) throw ConfigError("initialize_segment: global mode needs a meeting-level mixture");
    if (!idx.empty()) resp = vmfmm_e_step(detail::gather_frames(e, idx), *global).resp;
    else resp.resize(global->size(), 0);
  } else {
    int k = cfg.k_init;
    if (static_cast<int>(idx.size()) < k) {
      out.warnings.push_back("K_init lowered from " + std::to_string(k) + " to " + std::to_string(idx.size()) +
                             " (voiced frames)");
      k = static_cast<int>(idx.size());
    }
    if (k > 0) {
      const auto ev = detail::gather_frames(e, idx);
      const auto labels = spherical_kmeans_pp(ev, k, seed, cfg.kmeans_restarts);
      resp = vmfmm_em(ev, smoothed_one_hot(labels, k), cfg.iterations, cfg.kappa_max, seed).resp;
    } else {
      resp.resize(0, 0);
    }
  }
  const int k_speakers = static_cast<int>(resp.rows());
  Eigen::MatrixXd post = Eigen::MatrixXd::Zero(k_speakers + 1, frames);
  post.row(k_speakers).setOnes();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    post.col(idx[i]).head(k_speakers) = (1.0 - cfg.noise_floor) * resp.col(static_cast<Eigen::Index>(i));
    post(k_speakers, idx[i]) = cfg.noise_floor;
  }
  out.noise_index = k_speakers;
  out.posterior = PosteriorTensor::replicate(post, x.bins);
  return out;
}

/// Half-open frame interval [start, end).
struct ActivityInterval {
  int start = 0;
  int end = 0;
};

/// Median filter with edge replication; `width` odd.
inline Eigen::VectorXd median_filter(const Eigen::VectorXd& v, int width) {
  if (width < 1 || width % 2 == 0) throw ConfigError("median filter width must be odd and positive");
  const int n = static_cast<int>(v.size()), half = width / 2;
  Eigen::VectorXd out(n);
  std::vector<double> buf(static_cast<std::size_t>(width));
  for (int t = 0; t < n; ++t) {
    for (int u = -half; u <= half; ++u) buf[u + half] = v(std::clamp(t + u, 0, n - 1));
    std::nth_element(buf.begin(), buf.begin() + half, buf.end());
    out(t) = buf[half];
  }
  return out;
}

/// Per row of `pi`: median filter, threshold at on_thresh (strictly above),
/// drop intervals shorter than min_dur_s, then merge gaps shorter than merge_gap_s.
inline std::vector<std::vector<ActivityInterval>> smooth_and_segment(const Eigen::MatrixXd& pi, double frame_rate,
                                                                     const SmoothingConfig& cfg,
                                                                     Eigen::MatrixXd* smoothed = nullptr) {
  if (cfg.median_frames < 1 || cfg.median_frames % 2 == 0) throw ConfigError("smoothing: median_frames must be odd");
  const int k_count = static_cast<int>(pi.rows()), frames = static_cast<int>(pi.cols());
  if (smoothed) smoothed->resize(k_count, frames);
  std::vector<std::vector<ActivityInterval>> out(static_cast<std::size_t>(k_count));
  const int min_len = static_cast<int>(std::ceil(cfg.min_dur_s * frame_rate - 1e-9));
  const int max_gap = static_cast<int>(std::ceil(cfg.merge_gap_s * frame_rate - 1e-9));
  for (int k = 0; k < k_count; ++k) {
    const Eigen::VectorXd m = frames > 0 ? median_filter(pi.row(k).transpose(), cfg.median_frames) : Eigen::VectorXd();
    if (smoothed) smoothed->row(k) = m.transpose();
    std::vector<ActivityInterval> raw;
    for (int t = 0; t < frames;) {
      if (!(m(t) > cfg.on_thresh)) {
        ++t;
        continue;
      }
      int u = t;
      while (u < frames && m(u) > cfg.on_thresh) ++u;
      if (u - t >= min_len) raw.push_back({t, u});
      t = u;
    }
    for (const auto& r : raw) {
      if (!out[k].empty() && r.start - out[k].back().end < max_gap)
        out[k].back().end = r.end;
      else
        out[k].push_back(r);
    }
  }
  return out;
}

/// Mask-based MVDR: target and distortion covariances from the posteriors,
/// steering vector = principal eigenvector of the target covariance scaled
/// to unit response at the reference channel. Returns a 1-channel STFT.
inline StftTensor beamform(const StftTensor& x, const PosteriorTensor& gamma, int target_k, int reference_channel = 0,
                           std::vector<Eigen::VectorXcd>* weights = nullptr) {
  if (gamma.frames != x.frames || gamma.bins != x.bins) throw InvalidInput("beamform: shape mismatch");
  if (target_k < 0 || target_k >= gamma.components) throw InvalidInput("beamform: target component out of range");
  if (reference_channel < 0 || reference_channel >= x.channels) throw InvalidInput("beamform: bad reference channel");
  const int c = x.channels;
  StftTensor out(1, x.frames, x.bins);
  out.sample_rate = x.sample_rate;
  out.fft_size = x.fft_size;
  out.window_size = x.window_size;
  out.shift = x.shift;
  if (weights) weights->assign(static_cast<std::size_t>(x.bins), Eigen::VectorXcd());
  Eigen::MatrixXcd phi_t(c, c), phi_d(c, c);
  for (int f = 0; f < x.bins; ++f) {
    phi_t.setZero();
    phi_d.setZero();
    double mass_t = 0.0, mass_d = 0.0;
    const double* gt = gamma.gamma_row(target_k, f);
    for (int t = 0; t < x.frames; ++t) {
      const Eigen::Map<const Eigen::VectorXcd> y(x.data.data() + x.offset(t, f), c);
      const Eigen::MatrixXcd yy = y * y.adjoint();
      double other = 0.0;
      for (int k = 0; k < gamma.components; ++k)
        if (k != target_k) other += gamma.g(k, t, f);
      phi_t += gt[t] * yy;
      phi_d += other * yy;
      mass_t += gt[t];
      mass_d += other;
    }
    if (mass_t > 0.0) phi_t /= mass_t;
    if (mass_d > 0.0) phi_d /= mass_d;
    const HermitianPD target(phi_t);
    const HermitianPD distortion(phi_d);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(target.matrix());
    Eigen::VectorXcd v = es.eigenvectors().col(c - 1);
    const cdouble ref = v(reference_channel);
    v = std::abs(ref) > 1e-12 ? Eigen::VectorXcd(v / ref) : Eigen::VectorXcd(v / v.norm());
    const Eigen::VectorXcd num = distortion.cholesky().solve(v);
    const cdouble den = v.dot(num);  // v^H Phi_d^{-1} v
    if (!(std::abs(den) > 0.0) || !std::isfinite(std::abs(den))) throw NumericalError("beamform: singular MVDR denominator");
    const Eigen::VectorXcd w = num / den;
    if (weights) (*weights)[f] = w;
    for (int t = 0; t < x.frames; ++t) {
      const Eigen::Map<const Eigen::VectorXcd> y(x.data.data() + x.offset(t, f), c);
      out.at(0, t, f) = w.dot(y);  // w^H y
    }
  }
  return out;
}

struct SegmentResult {
  SegmentSpec segment;  // meeting frames, padded
  JointModel model;
  PosteriorTensor posteriors;
  std::vector<Eigen::VectorXd> prototypes;   // reported speakers only
  std::vector<int> speaker_components;       // model index of each reported speaker
  Eigen::MatrixXd local_activity;            // speakers x T smoothed priors
  std::vector<std::vector<ActivityInterval>> intervals;  // per prototype, local frames
  std::vector<FusionEvent> fusions;
  std::vector<double> loglik_trace;
  std::vector<int> k_trace;
  std::vector<std::string> warnings;
  std::vector<Eigen::VectorXd> separated;    // per prototype, beamformed segment audio (ungated)

  int speaker_count() const { return static_cast<int>(prototypes.size()); }
};

/// Joint EM plus post-processing on one segment.
///
/// Speakers are the non-noise components with at least one activity interval
/// after smoothing; components that never become active are left out.
///
/// `x` is the raw segment STFT (beamforming uses it unnormalized); the
/// returned segment spec is copied from `spec`.
inline SegmentResult process_segment(const StftTensor& x, const EmbeddingSequence& e, const VadMask& vad,
                                     const SegmentSpec& spec, const PipelineConfig& cfg, std::uint64_t seed,
                                     const VmfMixture* global = nullptr, bool beamform_outputs = true) {
  SegmentResult r;
  r.segment = spec;
  x.validate();
  InitResult init = initialize_segment(x, e, vad, cfg.init, seed, global);
  r.warnings = init.warnings;
  JointConfig jc = cfg.em;
  jc.seed = seed;
  JointResult jr = joint_em(x, e, init.posterior, jc, init.noise_index);
  r.model = std::move(jr.model);
  r.posteriors = std::move(jr.posterior);
  r.fusions = std::move(jr.fusions);
  r.loglik_trace = std::move(jr.loglik_trace);
  r.k_trace = std::move(jr.k_trace);
  std::vector<int> candidates;
  for (int k = 0; k < r.model.size(); ++k)
    if (!r.model.is_noise(k)) candidates.push_back(k);
  Eigen::MatrixXd pi(static_cast<Eigen::Index>(candidates.size()), x.frames);
  for (std::size_t i = 0; i < candidates.size(); ++i)
    for (int t = 0; t < x.frames; ++t) pi(static_cast<Eigen::Index>(i), t) = r.posteriors.prior(candidates[i], t);
  Eigen::MatrixXd smoothed;
  auto intervals = smooth_and_segment(pi, e.frame_rate, cfg.smoothing, &smoothed);
  // A component without any activity interval is not reported as a speaker.
  std::vector<Eigen::Index> kept_rows;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (intervals[i].empty()) {
      r.warnings.push_back("component " + std::to_string(candidates[i]) + " has no activity interval; not counted");
      continue;
    }
    kept_rows.push_back(static_cast<Eigen::Index>(i));
    r.speaker_components.push_back(candidates[i]);
    r.prototypes.push_back(r.model.spectral[candidates[i]].mu);
    r.intervals.push_back(std::move(intervals[i]));
  }
  r.local_activity.resize(static_cast<Eigen::Index>(kept_rows.size()), x.frames);
  for (std::size_t i = 0; i < kept_rows.size(); ++i) r.local_activity.row(static_cast<Eigen::Index>(i)) = smoothed.row(kept_rows[i]);
  if (beamform_outputs) {
    for (int k : r.speaker_components) {
      const StftTensor y = beamform(x, r.posteriors, k, cfg.reference_channel);
      r.separated.push_back(istft(y).samples.row(0).transpose());
    }
  }
  return r;
}

struct AlignmentResult {
  std::vector<std::vector<int>> labels;  // per segment, global id of each prototype
  int k_total = 0;
  bool estimated = false;
  std::vector<Eigen::VectorXd> centroids;
};

/// Number of speakers by average-linkage agglomeration of the prototypes,
/// never merging two prototypes of one segment, stopping when the best
/// cluster similarity falls to `threshold`.
inline int estimate_speaker_total(const std::vector<std::vector<Eigen::VectorXd>>& protos, double threshold) {
  struct Cluster {
    std::vector<std::pair<int, int>> members;  // (segment, index)
    std::vector<int> segments;
  };
  std::vector<Cluster> cl;
  std::vector<Eigen::VectorXd> flat;
  for (std::size_t s = 0; s < protos.size(); ++s)
    for (std::size_t i = 0; i < protos[s].size(); ++i) {
      cl.push_back({{{static_cast<int>(s), static_cast<int>(flat.size())}}, {static_cast<int>(s)}});
      flat.push_back(protos[s][i]);
    }
  for (;;) {
    double best = -2.0;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < cl.size(); ++i)
      for (std::size_t j = i + 1; j < cl.size(); ++j) {
        bool conflict = false;
        for (int s : cl[i].segments)
          if (std::find(cl[j].segments.begin(), cl[j].segments.end(), s) != cl[j].segments.end()) conflict = true;
        if (conflict) continue;
        double sim = 0.0;
        for (const auto& a : cl[i].members)
          for (const auto& b : cl[j].members) sim += flat[a.second].dot(flat[b.second]);
        sim /= static_cast<double>(cl[i].members.size() * cl[j].members.size());
        if (sim > best) {
          best = sim;
          bi = i;
          bj = j;
        }
      }
    if (best <= threshold) break;
    cl[bi].members.insert(cl[bi].members.end(), cl[bj].members.begin(), cl[bj].members.end());
    cl[bi].segments.insert(cl[bi].segments.end(), cl[bj].segments.begin(), cl[bj].segments.end());
    cl.erase(cl.begin() + static_cast<std::ptrdiff_t>(bj));
  }
  return static_cast<int>(cl.size());
}

/// Cross-segment alignment on the speaker prototypes: spherical k-means on
/// the pooled prototypes, then a Hungarian assignment of each segment's
/// prototypes to centroids. Global ids are renumbered by first appearance.
inline AlignmentResult align_prototypes(const std::vector<std::vector<Eigen::VectorXd>>& protos, int k_total,
                                        std::uint64_t seed, const AlignmentConfig& cfg = {}) {
  AlignmentResult out;
  out.labels.resize(protos.size());
  std::size_t max_count = 0, pooled = 0;
  int dim = 0;
  for (const auto& p : protos) {
    max_count = std::max(max_count, p.size());
    pooled += p.size();
    for (const auto& v : p) dim = static_cast<int>(v.size());
  }
  if (pooled == 0) return out;
  if (k_total <= 0) {
    k_total = std::max(static_cast<int>(max_count), estimate_speaker_total(protos, cfg.threshold));
    out.estimated = true;
  }
  if (static_cast<std::size_t>(k_total) < max_count)
    throw InvalidInput("align_segments: a segment has " + std::to_string(max_count) + " speakers but K_total is " +
                       std::to_string(k_total));
  out.k_total = k_total;
  // Canonical order within each segment so the pooled set does not depend on local labels.
  std::vector<std::vector<int>> order(protos.size());
  RowMatrixXd pool(static_cast<Eigen::Index>(pooled), dim);
  Eigen::Index row = 0;
  for (std::size_t s = 0; s < protos.size(); ++s) {
    order[s].resize(protos[s].size());
    std::iota(order[s].begin(), order[s].end(), 0);
    std::sort(order[s].begin(), order[s].end(), [&](int a, int b) {
      const auto& va = protos[s][a];
      const auto& vb = protos[s][b];
      return std::lexicographical_compare(va.data(), va.data() + va.size(), vb.data(), vb.data() + vb.size());
    });
    for (int i : order[s]) pool.row(row++) = protos[s][i].transpose() / protos[s][i].norm();
  }
  const int clusters = std::min<int>(k_total, static_cast<int>(pooled));
  const EmbeddingSequence ps{pool, 1.0};
  const auto labels = spherical_kmeans_pp(ps, clusters, seed, cfg.restarts);
  std::vector<Eigen::VectorXd> centroids(static_cast<std::size_t>(clusters), Eigen::VectorXd::Zero(dim));
  for (Eigen::Index i = 0; i < pool.rows(); ++i) centroids[labels[i]] += pool.row(i).transpose();
  for (auto& c : centroids)
    if (c.norm() > 0.0) c.normalize();
  std::vector<std::vector<int>> raw(protos.size());
  for (std::size_t s = 0; s < protos.size(); ++s) {
    raw[s].assign(protos[s].size(), -1);
    if (protos[s].empty()) continue;
    Eigen::MatrixXd score(static_cast<Eigen::Index>(protos[s].size()), clusters);
    for (std::size_t i = 0; i < protos[s].size(); ++i)
      for (int c = 0; c < clusters; ++c) score(static_cast<Eigen::Index>(i), c) = protos[s][i].normalized().dot(centroids[c]);
    const auto assign = max_score_assignment(score);
    for (std::size_t i = 0; i < protos[s].size(); ++i) raw[s][i] = assign[i];
  }
  // Renumber by first appearance in canonical order.
  std::vector<int> remap(static_cast<std::size_t>(clusters), -1);
  int next = 0;
  for (std::size_t s = 0; s < protos.size(); ++s)
    for (int i : order[s])
      if (remap[raw[s][i]] < 0) remap[raw[s][i]] = next++;
  for (int c = 0; c < clusters; ++c)
    if (remap[c] < 0) remap[c] = next++;
  out.centroids.resize(static_cast<std::size_t>(clusters));
  for (int c = 0; c < clusters; ++c) out.centroids[remap[c]] = centroids[c];
  for (std::size_t s = 0; s < protos.size(); ++s) {
    out.labels[s].resize(protos[s].size());
    for (std::size_t i = 0; i < protos[s].size(); ++i) out.labels[s][i] = remap[raw[s][i]];
  }
  return out;
}

inline std::string speaker_name(int global_id) { return "spk" + std::to_string(global_id); }

/// Globally labeled diarization from segment results; frame t of segment s
/// maps to seconds through `frame_to_s(meeting_frame)`.
inline Diarization align_segments(const std::vector<SegmentResult>& results, int k_total, std::uint64_t seed,
                                  const std::function<double(int)>& frame_to_s, AlignmentResult* alignment = nullptr,
                                  const AlignmentConfig& cfg = {}) {
  std::vector<std::vector<Eigen::VectorXd>> protos;
  for (const auto& r : results) protos.push_back(r.prototypes);
  AlignmentResult al = align_prototypes(protos, k_total, seed, cfg);
  Diarization d;
  for (std::size_t s = 0; s < results.size(); ++s) {
    const auto& r = results[s];
    for (std::size_t i = 0; i < r.intervals.size(); ++i)
      for (const auto& iv : r.intervals[i])
        d.entries.push_back({speaker_name(al.labels[s][i]), frame_to_s(r.segment.start_frame + iv.start),
                             frame_to_s(r.segment.start_frame + iv.end), r.segment.id});
  }
  d.sort();
  if (alignment) *alignment = std::move(al);
  return d;
}

// ---------------------------------------------------------------------------
// Mask files: "MSK1", u32 K, T, F, float32 payload in (k, t, f) row-major order.

inline void write_mask_file(const std::filesystem::path& path, const PosteriorTensor& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("cannot write '" + path.string() + "'");
  os.write("MSK1", 4);
  io::put_u32(os, static_cast<std::uint32_t>(p.components));
  io::put_u32(os, static_cast<std::uint32_t>(p.frames));
  io::put_u32(os, static_cast<std::uint32_t>(p.bins));
  for (int k = 0; k < p.components; ++k)
    for (int t = 0; t < p.frames; ++t)
      for (int f = 0; f < p.bins; ++f) io::put_f32(os, static_cast<float>(p.g(k, t, f)));
}

inline void write_mask_file(const std::filesystem::path& path, const TruthMasks& m) {
  PosteriorTensor p(m.components, m.frames, m.bins);
  for (std::size_t i = 0; i < m.mask.size(); ++i) p.gamma[i] = m.mask[i];
  write_mask_file(path, p);
}

/// Reads an MSK1 file into posterior layout (priors left at zero).
inline PosteriorTensor read_mask_file(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "MSK1", 4) != 0)
    throw InvalidInput("mask file '" + path.string() + "': bad magic");
  const std::uint32_t k = io::get_u32(bytes.data() + 4), t = io::get_u32(bytes.data() + 8),
                      f = io::get_u32(bytes.data() + 12);
  if (bytes.size() != 16 + static_cast<std::size_t>(k) * t * f * 4)
    throw InvalidInput("mask file '" + path.string() + "': payload size does not match header");
  PosteriorTensor p(static_cast<int>(k), static_cast<int>(t), static_cast<int>(f));
  const unsigned char* q = bytes.data() + 16;
  for (std::uint32_t a = 0; a < k; ++a)
    for (std::uint32_t b = 0; b < t; ++b)
      for (std::uint32_t c = 0; c < f; ++c, q += 4)
        p.g(static_cast<int>(a), static_cast<int>(b), static_cast<int>(c)) = std::bit_cast<float>(io::get_u32(q));
  return p;
}

inline TruthMasks masks_from_tensor(const PosteriorTensor& p) {
  TruthMasks m{p.components, p.frames, p.bins, std::vector<std::uint8_t>(p.gamma.size()),
               std::vector<std::uint8_t>(static_cast<std::size_t>(p.frames) * p.bins, 0)};
  for (std::size_t i = 0; i < p.gamma.size(); ++i) m.mask[i] = p.gamma[i] > 0.5 ? 1 : 0;
  for (int f = 0; f < p.bins; ++f)
    for (int t = 0; t < p.frames; ++t)
      for (int k = 0; k < p.components; ++k)
        if (m.at(k, t, f)) m.voiced[static_cast<std::size_t>(f) * p.frames + t] = 1;
  return m;
}

// ---------------------------------------------------------------------------

struct SegmentOutcome {
  SegmentSpec spec;
  bool ok = false;
  std::string error;
  double seconds = 0.0;
  SegmentResult result;
};

struct MeetingResult {
  Diarization diarization;
  std::vector<Eigen::VectorXd> speaker_audio;  // index = global id, meeting length
  double sample_rate = 0.0;
  std::vector<SegmentOutcome> segments;
  AlignmentResult alignment;
  VadMask vad;
  IngestedEmbeddings embeddings_info;
  int failed_segments() const {
    return static_cast<int>(std::count_if(segments.begin(), segments.end(), [](const auto& s) { return !s.ok; }));
  }
  nlohmann::json report;
};

/// Serialized appends to the meeting report.
class ReportCollector {
 public:
  void append(nlohmann::json entry) {
    std::lock_guard<std::mutex> lock(mu_);
    entries_.push_back(std::move(entry));
  }
  nlohmann::json sorted_entries() const {
    std::lock_guard<std::mutex> lock(mu_);
    auto e = entries_;
    std::sort(e.begin(), e.end(), [](const auto& a, const auto& b) { return a.at("index") < b.at("index"); });
    return nlohmann::json(e);
  }

 private:
  mutable std::mutex mu_;
  std::vector<nlohmann::json> entries_;
};

inline std::uint64_t segment_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Runs `work(i)` for i in [0, n) on `jobs` threads.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& work) {
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) work(i);
    });
  for (auto& t : pool) t.join();
}

namespace detail {

/// Segment extents padded by `pad` frames, clamped halfway to neighbors.
inline std::vector<SegmentSpec> pad_segments(std::vector<SegmentSpec> segs, int pad, int frames) {
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const int lo = i == 0 ? 0 : (segs[i - 1].end_frame + segs[i].start_frame + 1) / 2;
    const int hi = i + 1 == segs.size() ? frames : (segs[i].end_frame + segs[i + 1].start_frame) / 2;
    segs[i].start_frame = std::max(lo, segs[i].start_frame - pad);
    segs[i].end_frame = std::min(hi, segs[i].end_frame + pad);
  }
  return segs;
}

}  // namespace detail

/// Full pipeline on one recording. Segment failures are recorded in the
/// report and do not stop the meeting.
inline MeetingResult run_meeting(const AudioBuffer& audio, const RowMatrixXd& raw_embeddings,
                                 const PipelineConfig& cfg) {
  if (audio.channels() < 2) throw InvalidInput("run_meeting: at least two channels required");
  if (cfg.reference_channel < 0 || cfg.reference_channel >= audio.channels())
    throw ConfigError("run_meeting: reference channel out of range");
  MeetingResult res;
  res.sample_rate = audio.sample_rate;
  const StftGeometry geo = StftGeometry::from(cfg.stft, audio.sample_rate);
  const StftTensor x = stft(audio, cfg.stft);
  const double frame_rate = audio.sample_rate / geo.shift;
  res.vad = energy_vad(audio, cfg.stft, cfg.vad);
  const auto frame_to_s = [&](int t) { return geo.frame_start_s(t, audio.sample_rate); };

  std::vector<SegmentSpec> segs;
  EmbeddingSequence emb;
  if (x.frames > 0) {
    res.embeddings_info = align_embeddings(raw_embeddings, x.frames, 0, frame_rate);
    emb = res.embeddings_info.sequence;
    segs = split_segments(res.vad, frame_rate, cfg.segmentation);
    segs = detail::pad_segments(std::move(segs), static_cast<int>(std::lround(cfg.segment_padding_s * frame_rate)),
                                x.frames);
  }

  std::optional<VmfMixture> global;
  if (cfg.init.mode == InitMode::global && !segs.empty()) global = fit_global_init(emb, res.vad, cfg.init, cfg.seed);

  ReportCollector collector;
  res.segments.resize(segs.size());
  parallel_for(segs.size(), cfg.jobs, [&](std::size_t i) {
    auto& out = res.segments[i];
    out.spec = segs[i];
    const auto t0 = std::chrono::steady_clock::now();
    nlohmann::json entry{{"index", i},
                         {"id", segs[i].id},
                         {"start_frame", segs[i].start_frame},
                         {"end_frame", segs[i].end_frame},
                         {"start_s", frame_to_s(segs[i].start_frame)},
                         {"end_s", frame_to_s(segs[i].end_frame)}};
    try {
      const StftTensor xs = x.slice_frames(segs[i].start_frame, segs[i].end_frame);
      const EmbeddingSequence es = emb.slice(segs[i].start_frame, segs[i].end_frame);
      VadMask vs{std::vector<std::uint8_t>(res.vad.frames.begin() + segs[i].start_frame,
                                           res.vad.frames.begin() + segs[i].end_frame)};
      out.result = process_segment(xs, es, vs, segs[i], cfg, segment_seed(cfg.seed, i), global ? &*global : nullptr);
      out.ok = true;
      const auto& r = out.result;
      nlohmann::json fusions = nlohmann::json::array();
      for (const auto& f : r.fusions)
        fusions.push_back({{"kept", f.kept}, {"removed", f.removed}, {"similarity", f.similarity}, {"iteration", f.iteration}});
      entry["status"] = "ok";
      entry["speaker_count"] = r.speaker_count();
      entry["noise_index"] = r.model.noise_index ? *r.model.noise_index : -1;
      entry["fusions"] = fusions;
      entry["loglik_trace"] = r.loglik_trace;
      entry["k_trace"] = r.k_trace;
      entry["warnings"] = r.warnings;
    } catch (const std::exception& ex) {
      out.ok = false;
      out.error = ex.what();
      entry["status"] = "failed";
      entry["error"] = out.error;
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    collector.append(std::move(entry));
  });

  // Alignment over the successful segments (serial reduction).
  std::vector<SegmentResult> ok;
  std::vector<std::size_t> ok_index;
  for (std::size_t i = 0; i < res.segments.size(); ++i)
    if (res.segments[i].ok) {
      ok.push_back(res.segments[i].result);
      ok_index.push_back(i);
    }
  res.diarization = align_segments(ok, cfg.alignment.k_total, cfg.seed, frame_to_s, &res.alignment, cfg.alignment);

  // Per-speaker tracks: beamformed segment audio gated by the detected utterances.
  const long n = audio.length();
  res.speaker_audio.assign(static_cast<std::size_t>(res.alignment.k_total), Eigen::VectorXd::Zero(n));
  const long offset = (geo.window_size - geo.shift) / 2;
  for (std::size_t j = 0; j < ok.size(); ++j) {
    const auto& r = ok[j];
    const long seg_start = static_cast<long>(r.segment.start_frame) * geo.shift;
    for (std::size_t i = 0; i < r.intervals.size(); ++i) {
      auto& track = res.speaker_audio[res.alignment.labels[j][i]];
      for (const auto& iv : r.intervals[i]) {
        const long a = static_cast<long>(iv.start) * geo.shift + offset;
        const long b = std::min<long>(static_cast<long>(iv.end) * geo.shift + offset, r.separated[i].size());
        for (long u = a; u < b && seg_start + u < n; ++u) track(seg_start + u) += r.separated[i](u);
      }
    }
  }

  nlohmann::json segments_json = collector.sorted_entries();
  for (std::size_t j = 0; j < ok_index.size(); ++j) {
    auto& entry = segments_json[ok_index[j]];
    std::vector<std::string> names;
    for (int g : res.alignment.labels[j]) names.push_back(speaker_name(g));
    entry["global_speakers"] = names;
  }
  res.report = {{"num_segments", segs.size()},
                {"failed_segments", res.failed_segments()},
                {"segments", segments_json},
                {"speakers", res.alignment.k_total},
                {"speakers_estimated", res.alignment.estimated},
                {"frames", x.frames},
                {"frame_rate", frame_rate},
                {"voiced_frames", res.vad.voiced_count()},
                {"embedding_alignment",
                 {{"action", to_string(res.embeddings_info.action)}, {"source_frames", res.embeddings_info.source_frames}}},
                {"scoring_note", "DER uses a 0.25 s collar with overlapping speech scored; other scoring setups may differ"}};
  if (segs.empty()) res.report["note"] = "zero segments: no voiced activity detected";
  return res;
}

}  // namespace mixsep
