#pragma once

// Generative oracle: exact cACG and vMF samplers and a synthetic meeting
// builder with ground-truth masks, activities, counts and identities.

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <numeric>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixsep/cacg.hpp"
#include "mixsep/error.hpp"
#include "mixsep/frontend.hpp"
#include "mixsep/metrics.hpp"
#include "mixsep/numerics.hpp"
#include "mixsep/rttm.hpp"
#include "mixsep/vmf.hpp"

namespace mixsep {

/// n unit vectors z / |z| with z ~ CN(0, b); returned as C x n.
inline Eigen::MatrixXcd sample_cacg(const HermitianPD& b, int n, std::mt19937_64& rng) {
  const int c = b.dim();
  const Eigen::MatrixXcd l = b.cholesky().matrixL();
  std::normal_distribution<double> g(0.0, std::sqrt(0.5));
  Eigen::MatrixXcd out(c, n);
  Eigen::VectorXcd w(c);
  for (int i = 0; i < n; ++i) {
    double norm = 0.0;
    Eigen::VectorXcd z;
    do {
      for (int j = 0; j < c; ++j) w(j) = cdouble(g(rng), g(rng));
      z = l * w;
      norm = z.norm();
    } while (!(norm > 0.0));
    out.col(i) = z / norm;
  }
  return out;
}

inline Eigen::MatrixXcd sample_cacg(const HermitianPD& b, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_cacg(b, n, rng);
}

/// n draws from vMF(mu, kappa) by Wood's rejection method; returned n x E.
inline RowMatrixXd sample_vmf(const Eigen::VectorXd& mu, double kappa, int n, std::mt19937_64& rng) {
  if (!(kappa >= 0.0)) throw InvalidInput("sample_vmf: kappa must be >= 0");
  if (std::abs(mu.norm() - 1.0) > 1e-9) throw InvalidInput("sample_vmf: mu must be unit-norm");
  const int dim = static_cast<int>(mu.size());
  if (dim < 2) throw InvalidInput("sample_vmf: dimension must be >= 2");
  const double m1 = dim - 1.0;
  const double b = m1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + m1 * m1));
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + m1 * std::log(1.0 - x0 * x0);
  std::gamma_distribution<double> ga(0.5 * m1, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01;
  RowMatrixXd out(n, dim);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < n; ++i) {
    double w = 0.0;
    for (;;) {
      const double g1 = ga(rng), g2 = ga(rng);
      const double z = g1 / (g1 + g2);
      w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
      const double u = u01(rng);
      if (kappa * w + m1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
    }
    double vn = 0.0;
    do {
      for (int j = 0; j < dim; ++j) v(j) = n01(rng);
      v -= v.dot(mu) * mu;
      vn = v.norm();
    } while (vn < 1e-12);
    Eigen::VectorXd x = w * mu + std::sqrt(std::max(0.0, 1.0 - w * w)) * (v / vn);
    out.row(i) = (x / x.norm()).transpose();
  }
  return out;
}

inline RowMatrixXd sample_vmf(const Eigen::VectorXd& mu, double kappa, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_vmf(mu, kappa, n, rng);
}

/// a * A A^H + 0.1 I with A a standard complex Gaussian C x C matrix.
inline HermitianPD random_spatial_covariance(int channels, double anisotropy, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, std::sqrt(0.5));
  Eigen::MatrixXcd a(channels, channels);
  for (int i = 0; i < channels; ++i)
    for (int j = 0; j < channels; ++j) a(i, j) = cdouble(g(rng), g(rng));
  return HermitianPD(anisotropy * a * a.adjoint() + 0.1 * Eigen::MatrixXcd::Identity(channels, channels));
}

/// K unit prototypes with pairwise cosine exactly `cosine` (K <= E).
inline std::vector<Eigen::VectorXd> equicorrelated_prototypes(int k_count, int dim, double cosine, std::mt19937_64& rng) {
  if (k_count + 1 > dim && cosine != 0.0) throw ConfigError("prototypes: need E > K for nonzero cosine");
  if (k_count > dim) throw ConfigError("prototypes: need E >= K");
  // Random orthonormal basis via QR of a Gaussian matrix.
  std::normal_distribution<double> n01;
  Eigen::MatrixXd g(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) g(i, j) = n01(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  std::vector<Eigen::VectorXd> out;
  const Eigen::VectorXd common = q.col(dim - 1);
  const double a = std::sqrt(1.0 - cosine), b = std::sqrt(cosine);
  for (int k = 0; k < k_count; ++k) out.push_back(a * q.col(k) + b * common);
  return out;
}

struct SegmentPlan {
  double duration_s = 10.0;
  std::vector<int> active;
};

struct ScenarioConfig {
  int k_true = 3;
  int channels = 4;
  int embedding_dim = 16;
  int bins = 129;
  double frame_rate = 62.5;
  std::vector<SegmentPlan> segments;
  double overlap_ratio = 0.0;
  double kappa_true = 20.0;
  double anisotropy = 1.0;
  double prototype_cosine = 0.0;
  std::uint64_t seed = 0;
  bool render_audio = false;
  double sample_rate = 8000.0;  // audio rendering only
  double noise_db = -30.0;      // sensor noise relative to speech, audio rendering only
  double gap_s = 1.5;           // silence between segments
  double lead_silence_s = 0.3;  // silence at both ends of a segment
  double min_utterance_s = 1.0;
  double max_utterance_s = 2.5;
  std::vector<int> shared_covariance;  // speakers listed here share speaker 0-of-list's B (TF mode)

  void validate() const {
    if (k_true < 1 || channels < 2 || embedding_dim < 2) throw ConfigError("scenario: bad dimensions");
    if (!render_audio && (bins < 3 || ((bins - 1) & (bins - 2)) != 0))
      throw ConfigError("scenario: bins must be 2^m + 1");
    if (overlap_ratio < 0.0 || overlap_ratio > 0.4) throw ConfigError("scenario: overlap_ratio must lie in [0, 0.4]");
    if (kappa_true < 0.0) throw ConfigError("scenario: kappa_true must be >= 0");
    if (k_true > embedding_dim) throw ConfigError("scenario: k_true must not exceed embedding_dim");
    for (const auto& s : segments) {
      if (s.active.empty()) throw ConfigError("scenario: segment without active speakers");
      if (static_cast<int>(s.active.size()) > k_true)
        throw ConfigError("scenario: segment plan has more active speakers than k_true");
      for (int a : s.active)
        if (a < 0 || a >= k_true) throw ConfigError("scenario: active speaker id out of range");
      if (s.duration_s <= 2.0 * lead_silence_s) throw ConfigError("scenario: segment too short");
    }
  }

  StftConfig stft_config() const { return {}; }

  /// TF-mode waveform geometry: fft = 2 (F - 1), window and shift at the
  /// default 50/64 and 16/64 ratios, sample rate = frame_rate * shift.
  double tf_sample_rate() const { return frame_rate * (2.0 * (bins - 1)) / 4.0; }
};

namespace detail {

template <typename T>
T json_get(const nlohmann::json& j, const char* key, T def) {
  return j.contains(key) ? j.at(key).get<T>() : def;
}

}  // namespace detail

/// Parses a JSON scenario. Supports an explicit "segments" list and/or a
/// "random_plan" {count, min_active, max_active, duration_s} expanded with the seed.
inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "k_true", "channels", "embedding_dim", "bins", "frame_rate", "segments", "random_plan", "overlap_ratio",
      "kappa_true", "anisotropy", "prototype_cosine", "seed", "render_audio", "sample_rate", "noise_db", "gap_s",
      "lead_silence_s", "min_utterance_s", "max_utterance_s", "shared_covariance"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("scenario: unknown key '" + it.key() + "'");
  ScenarioConfig c;
  c.k_true = detail::json_get(j, "k_true", c.k_true);
  c.channels = detail::json_get(j, "channels", c.channels);
  c.embedding_dim = detail::json_get(j, "embedding_dim", c.embedding_dim);
  c.bins = detail::json_get(j, "bins", c.bins);
  c.frame_rate = detail::json_get(j, "frame_rate", c.frame_rate);
  c.overlap_ratio = detail::json_get(j, "overlap_ratio", c.overlap_ratio);
  c.kappa_true = detail::json_get(j, "kappa_true", c.kappa_true);
  c.anisotropy = detail::json_get(j, "anisotropy", c.anisotropy);
  c.prototype_cosine = detail::json_get(j, "prototype_cosine", c.prototype_cosine);
  c.seed = detail::json_get<std::uint64_t>(j, "seed", c.seed);
  c.render_audio = detail::json_get(j, "render_audio", c.render_audio);
  c.sample_rate = detail::json_get(j, "sample_rate", c.sample_rate);
  c.noise_db = detail::json_get(j, "noise_db", c.noise_db);
  c.gap_s = detail::json_get(j, "gap_s", c.gap_s);
  c.lead_silence_s = detail::json_get(j, "lead_silence_s", c.lead_silence_s);
  c.min_utterance_s = detail::json_get(j, "min_utterance_s", c.min_utterance_s);
  c.max_utterance_s = detail::json_get(j, "max_utterance_s", c.max_utterance_s);
  c.shared_covariance = detail::json_get(j, "shared_covariance", c.shared_covariance);
  if (j.contains("segments"))
    for (const auto& s : j.at("segments"))
      c.segments.push_back({s.at("duration_s").get<double>(), s.at("active").get<std::vector<int>>()});
  if (j.contains("random_plan")) {
    const auto& r = j.at("random_plan");
    const int count = r.at("count").get<int>();
    const int lo = detail::json_get(r, "min_active", 1), hi = detail::json_get(r, "max_active", c.k_true);
    const double dur = detail::json_get(r, "duration_s", 10.0);
    if (lo < 1 || hi < lo || hi > c.k_true) throw ConfigError("scenario: bad random_plan active range");
    std::mt19937_64 rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<int> n_active(lo, hi);
    std::vector<int> ids(static_cast<std::size_t>(c.k_true));
    for (int i = 0; i < count; ++i) {
      std::iota(ids.begin(), ids.end(), 0);
      std::shuffle(ids.begin(), ids.end(), rng);
      SegmentPlan p{dur, std::vector<int>(ids.begin(), ids.begin() + n_active(rng))};
      std::sort(p.active.begin(), p.active.end());
      c.segments.push_back(p);
    }
  }
  c.validate();
  return c;
}

inline nlohmann::json scenario_to_json(const ScenarioConfig& c) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : c.segments) segs.push_back({{"duration_s", s.duration_s}, {"active", s.active}});
  return {{"k_true", c.k_true},
          {"channels", c.channels},
          {"embedding_dim", c.embedding_dim},
          {"bins", c.bins},
          {"frame_rate", c.frame_rate},
          {"segments", segs},
          {"overlap_ratio", c.overlap_ratio},
          {"kappa_true", c.kappa_true},
          {"anisotropy", c.anisotropy},
          {"prototype_cosine", c.prototype_cosine},
          {"seed", c.seed},
          {"render_audio", c.render_audio},
          {"sample_rate", c.sample_rate},
          {"noise_db", c.noise_db},
          {"gap_s", c.gap_s},
          {"lead_silence_s", c.lead_silence_s},
          {"min_utterance_s", c.min_utterance_s},
          {"max_utterance_s", c.max_utterance_s},
          {"shared_covariance", c.shared_covariance}};
}

struct Utterance {
  int speaker = 0;
  int start_frame = 0;
  int end_frame = 0;  // exclusive
};

struct GroundTruth {
  TruthMasks masks;                          // dominance indicators on the returned STFT
  Eigen::MatrixXi activity;                  // K_true x T frame activity
  std::vector<Utterance> utterances;         // meeting-level frames
  Annotation annotation;                     // seconds, speakers "spk<k>"
  std::vector<SegmentSpec> segments;         // planned segment extents (frames)
  std::vector<std::vector<int>> segment_speakers;
  std::vector<int> segment_counts;
  std::vector<Eigen::VectorXd> prototypes;   // mu*_k
  std::vector<std::vector<HermitianPD>> covariances;  // B*_{k,f} (TF mode)
  Eigen::MatrixXd images;                    // K_true x N source images at channel 0 (audio mode)
  std::vector<std::uint8_t> dominant_frame;  // energy-dominant speaker per frame, 255 = silence
};

struct SyntheticMeeting {
  StftTensor stft;
  EmbeddingSequence embeddings;
  GroundTruth truth;
  AudioBuffer audio;
  ScenarioConfig config;
};

namespace detail {

/// Lays out utterances of the active speakers inside one segment. Every active
/// speaker speaks at least once; consecutive utterances overlap by
/// ratio/(1+ratio) of the later utterance's length (LibriCSS-style overlap).
inline std::vector<Utterance> plan_segment(const SegmentPlan& seg, int offset, const ScenarioConfig& cfg,
                                           std::mt19937_64& rng) {
  const double fr = cfg.frame_rate;
  const int seg_frames = static_cast<int>(std::lround(seg.duration_s * fr));
  const int lead = static_cast<int>(std::lround(cfg.lead_silence_s * fr));
  const int usable_end = seg_frames - lead;
  std::uniform_real_distribution<double> ulen(cfg.min_utterance_s, cfg.max_utterance_s);
  std::uniform_real_distribution<double> upause(0.1, 0.4);
  std::vector<int> order = seg.active;
  std::shuffle(order.begin(), order.end(), rng);
  // Shrink utterances when the segment cannot hold one turn per speaker.
  const double needed = static_cast<double>(order.size()) * cfg.max_utterance_s;
  const double scale = std::min(1.0, (usable_end - lead) / fr / std::max(needed, 1e-9));
  std::vector<Utterance> out;
  int cur = lead;
  std::size_t idx = 0;
  int last = -1;
  for (;;) {
    if (idx == order.size()) {
      idx = 0;
      std::shuffle(order.begin(), order.end(), rng);
      if (order.size() > 1 && order[0] == last) std::swap(order[0], order[1]);
    }
    const int spk = order[idx++];
    const int len = std::max(2, static_cast<int>(std::lround(ulen(rng) * scale * fr)));
    int start = cur;
    if (!out.empty()) {
      if (cfg.overlap_ratio > 0.0 && spk != last) {
        const int ov = static_cast<int>(std::lround(cfg.overlap_ratio / (1.0 + cfg.overlap_ratio) * len));
        start = std::max(out.back().start_frame + 1, cur - ov);
      } else {
        start = cur + static_cast<int>(std::lround(upause(rng) * fr));
      }
    }
    const bool first_round = out.size() < seg.active.size();
    if (start + len > usable_end && !first_round) break;
    const int end = std::min(start + len, usable_end);
    if (end <= start) break;
    out.push_back({spk, start, end});
    cur = end;
    last = spk;
  }
  // Merge back-to-back utterances of the same speaker (only possible with one active speaker).
  std::vector<Utterance> merged;
  for (const auto& u : out) {
    if (!merged.empty() && merged.back().speaker == u.speaker && u.start_frame <= merged.back().end_frame)
      merged.back().end_frame = std::max(merged.back().end_frame, u.end_frame);
    else
      merged.push_back(u);
  }
  for (auto& u : merged) {
    u.start_frame += offset;
    u.end_frame += offset;
  }
  return merged;
}

inline std::size_t next_fft_size(std::size_t n) { return std::bit_ceil(n); }

}  // namespace detail

/// Builds a synthetic meeting from a scenario.
///
/// Frames follow the STFT geometry; segments are separated by `gap_s` of
/// silence. In TF mode (render_audio = false) every voiced bin draws its
/// dominant speaker from the frame's random activity weights and a unit
/// observation from that speaker's cACG(B*_{k,f}); silent bins come from an
/// isotropic noise cACG. In audio mode, speakers are colored-noise sources
/// with syllabic modulation propagated through per-channel gain/delay
/// transfer functions plus white sensor noise, and masks are the dominance
/// of the source images at channel 0.
inline SyntheticMeeting build_meeting(const ScenarioConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  SyntheticMeeting m;
  m.config = cfg;
  auto& truth = m.truth;
  const int k_true = cfg.k_true;

  // Timeline.
  const double fr = cfg.frame_rate;
  const int gap = static_cast<int>(std::lround(cfg.gap_s * fr));
  int cursor = gap;
  for (std::size_t s = 0; s < cfg.segments.size(); ++s) {
    const int len = static_cast<int>(std::lround(cfg.segments[s].duration_s * fr));
    char id[32];
    std::snprintf(id, sizeof id, "seg%03zu", s);
    truth.segments.push_back({cursor, cursor + len, id});
    auto utts = detail::plan_segment(cfg.segments[s], cursor, cfg, rng);
    truth.utterances.insert(truth.utterances.end(), utts.begin(), utts.end());
    std::vector<int> spk = cfg.segments[s].active;
    std::sort(spk.begin(), spk.end());
    truth.segment_speakers.push_back(spk);
    truth.segment_counts.push_back(static_cast<int>(spk.size()));
    cursor += len + gap;
  }
  const int frames = cursor;
  truth.activity = Eigen::MatrixXi::Zero(k_true, frames);
  for (const auto& u : truth.utterances)
    for (int t = u.start_frame; t < u.end_frame; ++t) truth.activity(u.speaker, t) = 1;

  truth.prototypes = equicorrelated_prototypes(k_true, cfg.embedding_dim, cfg.prototype_cosine, rng);

  StftGeometry geo;
  if (cfg.render_audio) {
    geo = StftGeometry::from(StftConfig{}, cfg.sample_rate);
    if (std::abs(cfg.sample_rate / geo.shift - fr) > 1e-9)
      throw ConfigError("scenario: frame_rate must equal sample_rate / STFT shift in audio mode");
  } else {
    geo.fft_size = 2 * (cfg.bins - 1);
    geo.window_size = static_cast<int>(std::lround(geo.fft_size * 50.0 / 64.0));
    geo.shift = geo.fft_size / 4;
  }
  const int bins = geo.bins();
  truth.dominant_frame.assign(static_cast<std::size_t>(frames), 255);
  truth.masks = TruthMasks{k_true, frames, bins,
                           std::vector<std::uint8_t>(static_cast<std::size_t>(k_true) * frames * bins, 0),
                           std::vector<std::uint8_t>(static_cast<std::size_t>(frames) * bins, 0)};

  if (!cfg.render_audio) {
    const double sr = cfg.tf_sample_rate();
    // Spatial models.
    truth.covariances.resize(static_cast<std::size_t>(k_true));
    for (int k = 0; k < k_true; ++k)
      for (int f = 0; f < bins; ++f) truth.covariances[k].push_back(random_spatial_covariance(cfg.channels, cfg.anisotropy, rng));
    if (cfg.shared_covariance.size() > 1)
      for (std::size_t i = 1; i < cfg.shared_covariance.size(); ++i)
        truth.covariances[cfg.shared_covariance[i]] = truth.covariances[cfg.shared_covariance[0]];
    std::vector<Eigen::MatrixXcd> chol(static_cast<std::size_t>(k_true) * bins);
    for (int k = 0; k < k_true; ++k)
      for (int f = 0; f < bins; ++f) chol[k * bins + f] = truth.covariances[k][f].cholesky().matrixL();

    StftTensor x(cfg.channels, frames, bins);
    x.sample_rate = sr;
    x.fft_size = geo.fft_size;
    x.window_size = geo.window_size;
    x.shift = geo.shift;
    std::normal_distribution<double> g(0.0, std::sqrt(0.5));
    std::exponential_distribution<double> expo(1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    RowMatrixXd emb(frames, cfg.embedding_dim);
    Eigen::VectorXcd w(cfg.channels);
    std::vector<double> weights(static_cast<std::size_t>(k_true));
    for (int t = 0; t < frames; ++t) {
      double wsum = 0.0;
      int dom = -1;
      for (int k = 0; k < k_true; ++k) {
        weights[k] = truth.activity(k, t) ? expo(rng) + 0.2 : 0.0;
        wsum += weights[k];
        if (weights[k] > 0.0 && (dom < 0 || weights[k] > weights[dom])) dom = k;
      }
      for (int f = 0; f < bins; ++f) {
        for (int c = 0; c < cfg.channels; ++c) w(c) = cdouble(g(rng), g(rng));
        Eigen::VectorXcd z;
        double mag = 0.01;
        if (dom >= 0) {
          double r = u01(rng) * wsum;
          int k = 0;
          while (k < k_true - 1 && (weights[k] <= 0.0 || r > weights[k])) {
            r -= weights[k];
            ++k;
          }
          if (weights[k] <= 0.0) k = dom;
          z = chol[k * bins + f] * w;
          truth.masks.mask[truth.masks.index(k, t, f)] = 1;
          truth.masks.voiced[static_cast<std::size_t>(f) * frames + t] = 1;
          mag = expo(rng) + 0.05;
        } else {
          z = w;
        }
        z *= mag / z.norm();
        for (int c = 0; c < cfg.channels; ++c) x.at(c, t, f) = z(c);
      }
      if (dom >= 0) {
        truth.dominant_frame[t] = static_cast<std::uint8_t>(dom);
        emb.row(t) = sample_vmf(truth.prototypes[dom], cfg.kappa_true, 1, rng).row(0);
      } else {
        emb.row(t) = sample_vmf(truth.prototypes[0], 0.0, 1, rng).row(0);
      }
    }
    m.stft = std::move(x);
    m.embeddings = EmbeddingSequence{std::move(emb), fr};
    m.audio = istft(m.stft);
  } else {
    const double sr = cfg.sample_rate;
    const long n = static_cast<long>(frames - 1) * geo.shift + geo.window_size;
    const std::size_t nfft = detail::next_fft_size(static_cast<std::size_t>(n));
    Eigen::FFT<double> fft;
    std::normal_distribution<double> n01;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Eigen::MatrixXd mix = Eigen::MatrixXd::Zero(cfg.channels, n);
    truth.images = Eigen::MatrixXd::Zero(k_true, n);
    std::vector<Eigen::MatrixXd> images(static_cast<std::size_t>(k_true));
    const double frame_offset = 0.5 * (geo.window_size - geo.shift);
    for (int k = 0; k < k_true; ++k) {
      // Colored noise excitation: smooth random spectral envelope with a tilt.
      std::vector<cdouble> spec(nfft);
      std::vector<double> white(nfft);
      for (auto& v : white) v = n01(rng);
      fft.fwd(spec, white);
      const double f1 = 200.0 + 600.0 * u01(rng), f2 = 900.0 + 1800.0 * u01(rng);
      for (std::size_t i = 0; i < nfft; ++i) {
        const double hz = static_cast<double>(std::min(i, nfft - i)) * sr / nfft;
        const double env = 1.0 / (1.0 + hz / 1500.0) + 1.5 * std::exp(-0.5 * std::pow((hz - f1) / 150.0, 2)) +
                           std::exp(-0.5 * std::pow((hz - f2) / 300.0, 2));
        spec[i] *= env;
      }
      std::vector<double> colored;
      fft.inv(colored, spec);
      // Activity gate with 10 ms ramps and syllabic modulation.
      Eigen::VectorXd s = Eigen::VectorXd::Zero(n);
      const double rate = 3.0 + 2.0 * u01(rng), phase = 2.0 * std::numbers::pi * u01(rng);
      const long ramp = static_cast<long>(0.01 * sr);
      for (const auto& u : truth.utterances) {
        if (u.speaker != k) continue;
        const long a = static_cast<long>(u.start_frame * geo.shift + frame_offset);
        const long b = std::min<long>(n, static_cast<long>(u.end_frame * geo.shift + frame_offset));
        for (long i = a; i < b; ++i) {
          const double gate = std::min({1.0, static_cast<double>(i - a + 1) / ramp, static_cast<double>(b - i) / ramp});
          const double mod = 0.55 + 0.45 * std::sin(2.0 * std::numbers::pi * rate * i / sr + phase);
          s(i) = gate * mod * colored[static_cast<std::size_t>(i)];
        }
      }
      double active_pow = 0.0;
      long active_n = 0;
      for (long i = 0; i < n; ++i)
        if (s(i) != 0.0) {
          active_pow += s(i) * s(i);
          ++active_n;
        }
      if (active_n > 0) s *= 0.1 / std::sqrt(active_pow / active_n);
      // Per-channel gain and delay (rank-one transfer function per frequency).
      std::vector<double> padded(nfft, 0.0);
      for (long i = 0; i < n; ++i) padded[static_cast<std::size_t>(i)] = s(i);
      std::vector<cdouble> sspec;
      fft.fwd(sspec, padded);
      images[k] = Eigen::MatrixXd(cfg.channels, n);
      for (int c = 0; c < cfg.channels; ++c) {
        const double gain = c == 0 ? 1.0 : 0.6 + 0.5 * u01(rng);
        const double delay = c == 0 ? 0.0 : (u01(rng) - 0.5) * 1e-3 * sr;  // samples, |tau| <= 0.5 ms
        std::vector<cdouble> hspec(nfft);
        for (std::size_t i = 0; i < nfft; ++i) {
          const double ff = (i <= nfft / 2 ? static_cast<double>(i) : static_cast<double>(i) - nfft) / nfft;
          hspec[i] = sspec[i] * gain * std::polar(1.0, -2.0 * std::numbers::pi * ff * delay);
        }
        std::vector<double> out;
        fft.inv(out, hspec);
        for (long i = 0; i < n; ++i) images[k](c, i) = out[static_cast<std::size_t>(i)];
      }
      mix += images[k];
      truth.images.row(k) = images[k].row(0);
    }
    const double noise_sigma = 0.1 * std::pow(10.0, cfg.noise_db / 20.0);
    for (int c = 0; c < cfg.channels; ++c)
      for (long i = 0; i < n; ++i) mix(c, i) += noise_sigma * n01(rng);
    m.audio = AudioBuffer{std::move(mix), sr};
    m.stft = stft(m.audio);
    if (m.stft.frames != frames) throw ConfigError("scenario: frame bookkeeping mismatch");

    // Dominance masks from the source images at channel 0.
    const auto win = hann_window(geo.window_size);
    double win_energy = 0.0;
    for (double v : win) win_energy += v * v;
    const double noise_bin = noise_sigma * noise_sigma * win_energy;
    std::vector<Eigen::MatrixXd> power(static_cast<std::size_t>(k_true));
    for (int k = 0; k < k_true; ++k) {
      AudioBuffer img{truth.images.row(k), sr};
      const StftTensor xs = stft(img);
      power[k] = Eigen::MatrixXd(frames, bins);
      for (int t = 0; t < frames; ++t)
        for (int f = 0; f < bins; ++f) power[k](t, f) = std::norm(xs.at(0, t, f));
    }
    RowMatrixXd emb(frames, cfg.embedding_dim);
    for (int t = 0; t < frames; ++t) {
      int dom = -1;
      double best_energy = 0.0;
      for (int k = 0; k < k_true; ++k) {
        if (!truth.activity(k, t)) continue;
        const double e = power[k].row(t).sum();
        if (dom < 0 || e > best_energy) {
          dom = k;
          best_energy = e;
        }
      }
      if (dom >= 0) {
        for (int f = 0; f < bins; ++f) {
          int arg = -1;
          double mx = 0.0;
          for (int k = 0; k < k_true; ++k)
            if (truth.activity(k, t) && (arg < 0 || power[k](t, f) > mx)) {
              arg = k;
              mx = power[k](t, f);
            }
          truth.masks.mask[truth.masks.index(arg, t, f)] = 1;
          truth.masks.voiced[static_cast<std::size_t>(f) * frames + t] = mx > noise_bin ? 1 : 0;
        }
        truth.dominant_frame[t] = static_cast<std::uint8_t>(dom);
        emb.row(t) = sample_vmf(truth.prototypes[dom], cfg.kappa_true, 1, rng).row(0);
      } else {
        emb.row(t) = sample_vmf(truth.prototypes[0], 0.0, 1, rng).row(0);
      }
    }
    m.embeddings = EmbeddingSequence{std::move(emb), fr};
  }

  // Reference annotation in seconds (frame tiling convention of StftGeometry).
  const double sr = cfg.render_audio ? cfg.sample_rate : cfg.tf_sample_rate();
  for (const auto& u : truth.utterances) {
    truth.annotation.entries.push_back({"spk" + std::to_string(u.speaker), geo.frame_start_s(u.start_frame, sr),
                                        geo.frame_start_s(u.end_frame, sr), ""});
  }
  for (auto& e : truth.annotation.entries)
    for (const auto& s : truth.segments)
      if (geo.frame_start_s(s.start_frame, sr) <= e.start_s && e.start_s < geo.frame_start_s(s.end_frame, sr))
        e.segment_id = s.id;
  truth.annotation.sort();
  return m;
}

}  // namespace mixsep
