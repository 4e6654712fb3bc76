#pragma once

// Signal ingestion: WAV I/O, STFT/iSTFT, minimum-statistics energy VAD,
// pause-based segmentation, and the EMB1 embedding file format.

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "mixsep/cacg.hpp"
#include "mixsep/error.hpp"
#include "mixsep/vmf.hpp"

namespace mixsep {

/// C x N real samples.
struct AudioBuffer {
  Eigen::MatrixXd samples;
  double sample_rate = 16000.0;

  int channels() const { return static_cast<int>(samples.rows()); }
  long length() const { return static_cast<long>(samples.cols()); }
};

struct VadMask {
  std::vector<std::uint8_t> frames;
  int size() const { return static_cast<int>(frames.size()); }
  int voiced_count() const { return static_cast<int>(std::count(frames.begin(), frames.end(), 1)); }
};

struct SegmentSpec {
  int start_frame = 0;
  int end_frame = 0;  // exclusive
  std::string id;
  int length() const { return end_frame - start_frame; }
};

struct StftConfig {
  double stft_size_ms = 64.0;
  double window_ms = 50.0;
  double shift_ms = 16.0;
};

/// Sample counts for a config at a sample rate; the FFT length is the STFT
/// size rounded up to a power of two.
struct StftGeometry {
  int fft_size = 0;
  int window_size = 0;
  int shift = 0;
  int bins() const { return fft_size / 2 + 1; }

  static StftGeometry from(const StftConfig& cfg, double sample_rate) {
    auto samples = [&](double ms) { return ms * 1e-3 * sample_rate; };
    const double shift = samples(cfg.shift_ms);
    if (std::abs(shift - std::round(shift)) > 1e-6 || shift < 1.0)
      throw ConfigError("stft: shift does not map to an integer number of samples");
    if (cfg.window_ms > cfg.stft_size_ms) throw ConfigError("stft: window longer than STFT size");
    StftGeometry g;
    g.shift = static_cast<int>(std::lround(shift));
    g.window_size = static_cast<int>(std::lround(samples(cfg.window_ms)));
    g.fft_size = static_cast<int>(std::bit_ceil(static_cast<unsigned>(std::lround(samples(cfg.stft_size_ms)))));
    return g;
  }

  int frame_count(long n) const { return n < window_size ? 0 : static_cast<int>((n - window_size) / shift + 1); }

  /// Time in seconds at which frame t begins / ends when frames tile the timeline.
  double frame_start_s(int t, double sample_rate) const {
    return (static_cast<double>(t) * shift + 0.5 * (window_size - shift)) / sample_rate;
  }
};

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

/// Hann-windowed STFT, zero-padded to the FFT size. Frame t starts at sample t * shift.
inline StftTensor stft(const AudioBuffer& a, const StftConfig& cfg = {}) {
  const StftGeometry g = StftGeometry::from(cfg, a.sample_rate);
  const int frames = g.frame_count(a.length());
  StftTensor out(std::max(a.channels(), 0), frames, g.bins());
  out.sample_rate = a.sample_rate;
  out.fft_size = g.fft_size;
  out.window_size = g.window_size;
  out.shift = g.shift;
  out.empty_flag = frames == 0;
  if (frames == 0) return out;
  const auto win = hann_window(g.window_size);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> buf(static_cast<std::size_t>(g.fft_size));
  std::vector<cdouble> spec;
  for (int c = 0; c < a.channels(); ++c)
    for (int t = 0; t < frames; ++t) {
      std::fill(buf.begin(), buf.end(), 0.0);
      const long start = static_cast<long>(t) * g.shift;
      for (int i = 0; i < g.window_size; ++i) buf[i] = a.samples(c, start + i) * win[i];
      fft.fwd(spec, buf);
      for (int f = 0; f < g.bins(); ++f) out.at(c, t, f) = spec[f];
    }
  return out;
}

/// Least-squares overlap-add inverse of `stft`: each sample is divided by the
/// summed squared analysis window. Exact wherever that sum exceeds 1e-8;
/// the outermost few samples (window tails) are left tapered so that
/// modified spectra cannot blow up there.
inline AudioBuffer istft(const StftTensor& x, long length = -1) {
  if (x.fft_size <= 0 || x.shift <= 0 || x.window_size <= 0) throw InvalidInput("istft: missing STFT geometry");
  const long n = length >= 0 ? length
                             : (x.frames == 0 ? 0 : static_cast<long>(x.frames - 1) * x.shift + x.window_size);
  AudioBuffer out{Eigen::MatrixXd::Zero(x.channels, n), x.sample_rate};
  const auto win = hann_window(x.window_size);
  std::vector<double> norm(static_cast<std::size_t>(n), 0.0);
  for (int t = 0; t < x.frames; ++t) {
    const long start = static_cast<long>(t) * x.shift;
    for (int i = 0; i < x.window_size && start + i < n; ++i) norm[start + i] += win[i] * win[i];
  }
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<cdouble> spec(static_cast<std::size_t>(x.bins));
  std::vector<double> frame;
  for (int c = 0; c < x.channels; ++c)
    for (int t = 0; t < x.frames; ++t) {
      for (int f = 0; f < x.bins; ++f) spec[f] = x.at(c, t, f);
      fft.inv(frame, spec, x.fft_size);
      const long start = static_cast<long>(t) * x.shift;
      for (int i = 0; i < x.window_size && start + i < n; ++i) out.samples(c, start + i) += frame[i] * win[i];
    }
  for (long i = 0; i < n; ++i)
    if (norm[i] > 1e-8) out.samples.col(i) /= norm[i];
  return out;
}

struct VadConfig {
  double window_s = 1.5;
  double threshold_db = 10.0;
  double closing_s = 0.2;
  int smoothing_frames = 3;
};

/// Energy VAD with a minimum-statistics noise floor on channel 0.
///
/// Frame energies use the STFT framing, so the mask length equals the STFT
/// frame count. The floor is the minimum of the smoothed log energy over a
/// centered window; a frame is voiced when its energy exceeds the floor by
/// threshold_db. Gaps up to closing_s are closed.
inline VadMask energy_vad(const AudioBuffer& a, const StftConfig& stft_cfg = {}, const VadConfig& cfg = {}) {
  const StftGeometry g = StftGeometry::from(stft_cfg, a.sample_rate);
  const int frames = a.channels() > 0 ? g.frame_count(a.length()) : 0;
  VadMask mask{std::vector<std::uint8_t>(static_cast<std::size_t>(frames), 0)};
  if (frames == 0) return mask;
  constexpr double kFloorDb = -300.0;
  std::vector<double> db(static_cast<std::size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t) * g.shift;
    double e = 0.0;
    for (int i = 0; i < g.window_size; ++i) e += a.samples(0, start + i) * a.samples(0, start + i);
    e /= g.window_size;
    db[t] = e > 0.0 ? std::max(10.0 * std::log10(e), kFloorDb) : kFloorDb;  // NaN energy counts as silent
    if (std::isinf(e)) db[t] = std::numeric_limits<double>::infinity();
  }
  const int half_smooth = std::max(cfg.smoothing_frames, 1) / 2;
  std::vector<double> smooth(db.size());
  for (int t = 0; t < frames; ++t) {
    double s = 0.0;
    int n = 0;
    for (int u = std::max(0, t - half_smooth); u <= std::min(frames - 1, t + half_smooth); ++u) {
      s += db[u];
      ++n;
    }
    smooth[t] = s / n;
  }
  const double frame_rate = a.sample_rate / g.shift;
  const int half_win = std::max(1, static_cast<int>(std::lround(0.5 * cfg.window_s * frame_rate)));
  for (int t = 0; t < frames; ++t) {
    double floor = std::numeric_limits<double>::infinity();
    for (int u = std::max(0, t - half_win); u <= std::min(frames - 1, t + half_win); ++u)
      floor = std::min(floor, smooth[u]);
    const bool silent = db[t] <= kFloorDb;
    mask.frames[t] = (!silent && db[t] > floor + cfg.threshold_db) ? 1 : 0;
  }
  // Morphological closing: fill unvoiced gaps no longer than closing_s.
  const int max_gap = static_cast<int>(std::lround(cfg.closing_s * frame_rate));
  int last_voiced = -1;
  for (int t = 0; t < frames; ++t) {
    if (!mask.frames[t]) continue;
    if (last_voiced >= 0 && t - last_voiced - 1 <= max_gap)
      std::fill(mask.frames.begin() + last_voiced + 1, mask.frames.begin() + t, 1);
    last_voiced = t;
  }
  return mask;
}

struct SegmentationConfig {
  double max_pause_s = 1.0;
  double min_len_s = 2.0;
  double max_len_s = 60.0;
};

/// Splits voiced runs into segments: pauses longer than max_pause_s always
/// cut; runs separated by shorter pauses are accumulated greedily until the
/// next run would push the segment past max_len_s; segments shorter than
/// min_len_s are dropped.
inline std::vector<SegmentSpec> split_segments(const VadMask& vad, double frame_rate,
                                               const SegmentationConfig& cfg = {}) {
  struct Run {
    int begin, end;
  };
  std::vector<Run> runs;
  for (int t = 0; t < vad.size();) {
    if (!vad.frames[t]) {
      ++t;
      continue;
    }
    int u = t;
    while (u < vad.size() && vad.frames[u]) ++u;
    runs.push_back({t, u});
    t = u;
  }
  std::vector<SegmentSpec> out;
  auto emit = [&](int b, int e) {
    if ((e - b) / frame_rate + 1e-9 >= cfg.min_len_s) out.push_back({b, e, ""});
  };
  if (runs.empty()) return out;
  int seg_begin = runs[0].begin, seg_end = runs[0].end;
  for (std::size_t r = 1; r < runs.size(); ++r) {
    const double pause = (runs[r].begin - seg_end) / frame_rate;
    const double merged_len = (runs[r].end - seg_begin) / frame_rate;
    if (pause > cfg.max_pause_s || merged_len > cfg.max_len_s) {
      emit(seg_begin, seg_end);
      seg_begin = runs[r].begin;
    }
    seg_end = runs[r].end;
  }
  emit(seg_begin, seg_end);
  for (std::size_t i = 0; i < out.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "seg%03zu", i);
    out[i].id = buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary I/O helpers (little endian).

namespace io {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open '" + path.string() + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace io

/// Reads RIFF/WAVE PCM 16/24-bit or IEEE float 32-bit, any channel count.
/// Integer samples are scaled to [-1, 1).
inline AudioBuffer read_wav(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  auto fail = [&](const std::string& why) { throw InvalidInput("wav '" + path.string() + "': " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    fail("not a RIFF/WAVE file");
  std::size_t pos = 12;
  int format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* h = bytes.data() + pos;
    const std::uint32_t len = io::get_u32(h + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) {
      if (std::memcmp(h, "data", 4) == 0) {
        data = bytes.data() + body;
        data_len = bytes.size() - body;
        break;
      }
      fail("truncated chunk");
    }
    if (std::memcmp(h, "fmt ", 4) == 0) {
      if (len < 16) fail("short fmt chunk");
      format = io::get_u16(bytes.data() + body);
      channels = io::get_u16(bytes.data() + body + 2);
      rate = io::get_u32(bytes.data() + body + 4);
      bits = io::get_u16(bytes.data() + body + 14);
      if (format == 0xFFFE && len >= 26) format = io::get_u16(bytes.data() + body + 24);
    } else if (std::memcmp(h, "data", 4) == 0) {
      data = bytes.data() + body;
      data_len = len;
    }
    pos = body + len + (len & 1u);
  }
  if (channels <= 0 || rate == 0) fail("missing fmt chunk");
  if (data == nullptr) fail("missing data chunk");
  const bool pcm = format == 1 && (bits == 16 || bits == 24);
  const bool flt = format == 3 && bits == 32;
  if (!pcm && !flt) fail("unsupported sample format");
  const int bytes_per = bits / 8;
  const std::size_t frames = data_len / (static_cast<std::size_t>(bytes_per) * channels);
  AudioBuffer a{Eigen::MatrixXd(channels, static_cast<Eigen::Index>(frames)), static_cast<double>(rate)};
  const unsigned char* p = data;
  for (std::size_t n = 0; n < frames; ++n)
    for (int c = 0; c < channels; ++c, p += bytes_per) {
      double v = 0.0;
      if (flt) {
        v = std::bit_cast<float>(io::get_u32(p));
      } else if (bits == 16) {
        v = static_cast<std::int16_t>(io::get_u16(p)) / 32768.0;
      } else {
        std::int32_t s = static_cast<std::int32_t>(p[0] | (p[1] << 8) | (p[2] << 16));
        if (s & 0x800000) s -= 0x1000000;
        v = s / 8388608.0;
      }
      a.samples(c, static_cast<Eigen::Index>(n)) = v;
    }
  return a;
}

enum class WavFormat { pcm16, float32 };

inline void write_wav(const std::filesystem::path& path, const AudioBuffer& a, WavFormat fmt = WavFormat::float32) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("cannot write '" + path.string() + "'");
  const int bytes_per = fmt == WavFormat::pcm16 ? 2 : 4;
  const std::uint32_t data_len = static_cast<std::uint32_t>(a.length() * a.channels() * bytes_per);
  os.write("RIFF", 4);
  io::put_u32(os, 36 + data_len);
  os.write("WAVEfmt ", 8);
  io::put_u32(os, 16);
  io::put_u16(os, fmt == WavFormat::pcm16 ? 1 : 3);
  io::put_u16(os, static_cast<std::uint16_t>(a.channels()));
  io::put_u32(os, static_cast<std::uint32_t>(a.sample_rate));
  io::put_u32(os, static_cast<std::uint32_t>(a.sample_rate * a.channels() * bytes_per));
  io::put_u16(os, static_cast<std::uint16_t>(a.channels() * bytes_per));
  io::put_u16(os, static_cast<std::uint16_t>(bytes_per * 8));
  os.write("data", 4);
  io::put_u32(os, data_len);
  for (long n = 0; n < a.length(); ++n)
    for (int c = 0; c < a.channels(); ++c) {
      const double v = a.samples(c, n);
      if (fmt == WavFormat::float32) {
        io::put_f32(os, static_cast<float>(v));
      } else {
        const long s = std::lround(std::clamp(v, -1.0, 32767.0 / 32768.0) * 32768.0);
        io::put_u16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(s)));
      }
    }
}

/// Raw EMB1 content: T x E float matrix.
inline RowMatrixXd read_embedding_file(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "EMB1", 4) != 0)
    throw InvalidInput("embedding file '" + path.string() + "': bad magic");
  const std::uint32_t frames = io::get_u32(bytes.data() + 4);
  const std::uint32_t dim = io::get_u32(bytes.data() + 8);
  if (bytes.size() != 16 + static_cast<std::size_t>(frames) * dim * 4)
    throw InvalidInput("embedding file '" + path.string() + "': payload size does not match header");
  RowMatrixXd m(frames, dim);
  const unsigned char* p = bytes.data() + 16;
  for (std::uint32_t t = 0; t < frames; ++t)
    for (std::uint32_t e = 0; e < dim; ++e, p += 4) m(t, e) = std::bit_cast<float>(io::get_u32(p));
  return m;
}

inline void write_embedding_file(const std::filesystem::path& path, const RowMatrixXd& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("cannot write '" + path.string() + "'");
  os.write("EMB1", 4);
  io::put_u32(os, static_cast<std::uint32_t>(m.rows()));
  io::put_u32(os, static_cast<std::uint32_t>(m.cols()));
  io::put_u32(os, 0);
  for (Eigen::Index t = 0; t < m.rows(); ++t)
    for (Eigen::Index e = 0; e < m.cols(); ++e) io::put_f32(os, static_cast<float>(m(t, e)));
}

enum class AlignmentAction { identity, truncated, edge_padded, resampled };

inline std::string to_string(AlignmentAction a) {
  switch (a) {
    case AlignmentAction::identity: return "identity";
    case AlignmentAction::truncated: return "truncated";
    case AlignmentAction::edge_padded: return "edge_padded";
    case AlignmentAction::resampled: return "resampled";
  }
  return "identity";
}

struct IngestedEmbeddings {
  EmbeddingSequence sequence;
  AlignmentAction action = AlignmentAction::identity;
  int source_frames = 0;
};

/// Aligns raw embeddings to `expected_frames` and length-normalizes rows.
/// A difference of at most two frames is truncated / edge-padded; larger
/// differences are resampled to the nearest frame.
inline IngestedEmbeddings align_embeddings(const RowMatrixXd& raw, int expected_frames, int expected_dim,
                                           double frame_rate) {
  if (expected_dim > 0 && raw.cols() != expected_dim)
    throw InvalidInput("embeddings: dimension " + std::to_string(raw.cols()) + " does not match configured " +
                       std::to_string(expected_dim));
  for (Eigen::Index t = 0; t < raw.rows(); ++t)
    if (!raw.row(t).allFinite()) throw InvalidInput("embeddings: non-finite values in row " + std::to_string(t));
  const int src = static_cast<int>(raw.rows());
  if (src == 0 && expected_frames > 0) throw InvalidInput("embeddings: file has no frames");
  IngestedEmbeddings out;
  out.source_frames = src;
  RowMatrixXd aligned(expected_frames, raw.cols());
  if (src == expected_frames) {
    aligned = raw;
  } else if (std::abs(src - expected_frames) <= 2) {
    out.action = src > expected_frames ? AlignmentAction::truncated : AlignmentAction::edge_padded;
    for (int t = 0; t < expected_frames; ++t) aligned.row(t) = raw.row(std::min(t, src - 1));
  } else {
    out.action = AlignmentAction::resampled;
    for (int t = 0; t < expected_frames; ++t) {
      const double pos = (t + 0.5) * static_cast<double>(src) / expected_frames - 0.5;
      aligned.row(t) = raw.row(std::clamp(static_cast<int>(std::lround(pos)), 0, src - 1));
    }
  }
  out.sequence = EmbeddingSequence::from_raw(std::move(aligned), frame_rate);
  return out;
}

inline IngestedEmbeddings ingest_embeddings(const std::filesystem::path& path, int expected_frames,
                                            int expected_dim = 0, double frame_rate = 62.5) {
  if (!std::filesystem::exists(path)) throw InvalidInput("embedding file '" + path.string() + "' does not exist");
  return align_embeddings(read_embedding_file(path), expected_frames, expected_dim, frame_rate);
}

}  // namespace mixsep
