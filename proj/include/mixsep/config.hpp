#pragma once

// Run configuration: every tunable of the pipeline plus input/output paths,
// read from JSON with unknown keys rejected, and echoed back fully resolved.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixsep/error.hpp"
#include "mixsep/pipeline.hpp"

namespace mixsep {

struct RecordingInput {
  std::string id;
  std::filesystem::path audio;
  std::filesystem::path embeddings;
};

struct RunConfig {
  PipelineConfig pipeline;
  std::vector<RecordingInput> inputs;
  std::filesystem::path output_dir = "out";
  bool write_masks = true;
  WavFormat wav_format = WavFormat::float32;
};

namespace detail {

/// Reads keys of `obj` into fields; any key without a reader is an error.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <typename T>
  StrictObject& opt(const char* key, T& field) {
    seen_.push_back(key);
    if (j_.contains(key)) {
      try {
        field = j_.at(key).get<T>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: bad value for '" + path_ + "." + key + "': " + e.what());
      }
    }
    return *this;
  }

  template <typename F>
  StrictObject& sub(const char* key, F&& read) {
    seen_.push_back(key);
    if (j_.contains(key)) read(StrictObject(j_.at(key), path_ + "." + key));
    return *this;
  }

  bool has(const char* key) const { return j_.contains(key); }
  const nlohmann::json& raw(const char* key) {
    seen_.push_back(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        throw ConfigError("config: unknown key '" + path_ + "." + it.key() + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline void validate(const RunConfig& c) {
  const auto& p = c.pipeline;
  if (p.init.k_init < 1) throw ConfigError("config: init.k_init must be >= 1");
  if (p.init.iterations < 1) throw ConfigError("config: init.iterations must be >= 1");
  if (p.init.kappa_max <= 0.0 || p.em.kappa_max < 0.0) throw ConfigError("config: kappa_max must be positive");
  if (p.em.iterations < 1) throw ConfigError("config: em.iterations must be >= 1");
  if (!(p.em.tau_spectral > 0.0 && p.em.tau_spectral < 1.0)) throw ConfigError("config: em.tau_spectral must lie in (0, 1)");
  if (!(p.em.tau_iou > 0.0 && p.em.tau_iou < 1.0)) throw ConfigError("config: em.tau_iou must lie in (0, 1)");
  if (p.em.limits.min_speakers < 1) throw ConfigError("config: em.min_speakers must be >= 1");
  if (p.smoothing.median_frames < 1 || p.smoothing.median_frames % 2 == 0)
    throw ConfigError("config: smoothing.median_frames must be odd");
  if (p.jobs < 1) throw ConfigError("config: jobs must be >= 1");
  if (p.alignment.k_total < 0) throw ConfigError("config: alignment.k_total must be >= 0");
  if (p.segment_padding_s < 0.0) throw ConfigError("config: segment_padding_s must be >= 0");
  for (const auto& in : c.inputs)
    if (in.audio.empty() || in.embeddings.empty()) throw ConfigError("config: every input needs audio and embeddings");
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  RunConfig c;
  auto& p = c.pipeline;
  std::string init_mode = to_string(p.init.mode), fusion = to_string(p.em.fusion), wav = "float32", out_dir;
  int k_target = 0;
  detail::StrictObject root(j, "config");
  root.opt("jobs", p.jobs)
      .opt("seed", p.seed)
      .opt("segment_padding_s", p.segment_padding_s)
      .opt("reference_channel", p.reference_channel)
      .sub("stft", [&](detail::StrictObject o) {
        o.opt("stft_size_ms", p.stft.stft_size_ms).opt("window_ms", p.stft.window_ms).opt("shift_ms", p.stft.shift_ms).finish();
      })
      .sub("vad", [&](detail::StrictObject o) {
        o.opt("window_s", p.vad.window_s)
            .opt("threshold_db", p.vad.threshold_db)
            .opt("closing_s", p.vad.closing_s)
            .opt("smoothing_frames", p.vad.smoothing_frames)
            .finish();
      })
      .sub("segmentation", [&](detail::StrictObject o) {
        o.opt("max_pause_s", p.segmentation.max_pause_s)
            .opt("min_len_s", p.segmentation.min_len_s)
            .opt("max_len_s", p.segmentation.max_len_s)
            .finish();
      })
      .sub("init", [&](detail::StrictObject o) {
        o.opt("k_init", p.init.k_init)
            .opt("mode", init_mode)
            .opt("iterations", p.init.iterations)
            .opt("kappa_max", p.init.kappa_max)
            .opt("kmeans_restarts", p.init.kmeans_restarts)
            .opt("noise_floor", p.init.noise_floor)
            .finish();
      })
      .sub("em", [&](detail::StrictObject o) {
        o.opt("iterations", p.em.iterations)
            .opt("fusion", fusion)
            .opt("tau_spectral", p.em.tau_spectral)
            .opt("tau_iou", p.em.tau_iou)
            .opt("activity_threshold", p.em.activity_threshold)
            .opt("fusion_start", p.em.fusion_start)
            .opt("min_speakers", p.em.limits.min_speakers)
            .opt("k_target", k_target)
            .opt("kappa_max", p.em.kappa_max)
            .finish();
      })
      .sub("smoothing", [&](detail::StrictObject o) {
        o.opt("median_frames", p.smoothing.median_frames)
            .opt("on_thresh", p.smoothing.on_thresh)
            .opt("min_dur_s", p.smoothing.min_dur_s)
            .opt("merge_gap_s", p.smoothing.merge_gap_s)
            .finish();
      })
      .sub("alignment", [&](detail::StrictObject o) {
        o.opt("k_total", p.alignment.k_total)
            .opt("threshold", p.alignment.threshold)
            .opt("restarts", p.alignment.restarts)
            .finish();
      })
      .sub("output", [&](detail::StrictObject o) {
        o.opt("dir", out_dir).opt("write_masks", c.write_masks).opt("wav_format", wav).finish();
      });
  if (root.has("inputs")) {
    const auto& arr = root.raw("inputs");
    if (!arr.is_array()) throw ConfigError("config: 'inputs' must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      RecordingInput in;
      std::string audio, emb;
      detail::StrictObject(arr[i], "config.inputs[" + std::to_string(i) + "]")
          .opt("id", in.id)
          .opt("audio", audio)
          .opt("embeddings", emb)
          .finish();
      auto resolve = [&](const std::string& s) {
        std::filesystem::path q(s);
        return q.is_relative() && !base_dir.empty() && !s.empty() ? base_dir / q : q;
      };
      in.audio = resolve(audio);
      in.embeddings = resolve(emb);
      if (in.id.empty()) in.id = in.audio.stem().string();
      c.inputs.push_back(std::move(in));
    }
  }
  root.finish();
  p.init.mode = parse_init_mode(init_mode);
  p.em.fusion = parse_fusion_strategy(fusion);
  if (k_target > 0) p.em.limits.k_target = k_target;
  if (wav == "pcm16") c.wav_format = WavFormat::pcm16;
  else if (wav == "float32") c.wav_format = WavFormat::float32;
  else throw ConfigError("config: output.wav_format must be pcm16 or float32");
  if (!out_dir.empty()) {
    std::filesystem::path q(out_dir);
    c.output_dir = q.is_relative() && !base_dir.empty() ? base_dir / q : q;
  }
  validate(c);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

/// Fully resolved configuration (every default filled in).
inline nlohmann::json to_json(const RunConfig& c) {
  const auto& p = c.pipeline;
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& in : c.inputs)
    inputs.push_back({{"id", in.id}, {"audio", in.audio.string()}, {"embeddings", in.embeddings.string()}});
  return {{"jobs", p.jobs},
          {"seed", p.seed},
          {"segment_padding_s", p.segment_padding_s},
          {"reference_channel", p.reference_channel},
          {"stft", {{"stft_size_ms", p.stft.stft_size_ms}, {"window_ms", p.stft.window_ms}, {"shift_ms", p.stft.shift_ms}}},
          {"vad",
           {{"window_s", p.vad.window_s},
            {"threshold_db", p.vad.threshold_db},
            {"closing_s", p.vad.closing_s},
            {"smoothing_frames", p.vad.smoothing_frames}}},
          {"segmentation",
           {{"max_pause_s", p.segmentation.max_pause_s},
            {"min_len_s", p.segmentation.min_len_s},
            {"max_len_s", p.segmentation.max_len_s}}},
          {"init",
           {{"k_init", p.init.k_init},
            {"mode", to_string(p.init.mode)},
            {"iterations", p.init.iterations},
            {"kappa_max", p.init.kappa_max},
            {"kmeans_restarts", p.init.kmeans_restarts},
            {"noise_floor", p.init.noise_floor}}},
          {"em",
           {{"iterations", p.em.iterations},
            {"fusion", to_string(p.em.fusion)},
            {"tau_spectral", p.em.tau_spectral},
            {"tau_iou", p.em.tau_iou},
            {"activity_threshold", p.em.activity_threshold},
            {"fusion_start", p.em.fusion_start},
            {"min_speakers", p.em.limits.min_speakers},
            {"k_target", p.em.limits.k_target.value_or(0)},
            {"kappa_max", p.em.kappa_max}}},
          {"smoothing",
           {{"median_frames", p.smoothing.median_frames},
            {"on_thresh", p.smoothing.on_thresh},
            {"min_dur_s", p.smoothing.min_dur_s},
            {"merge_gap_s", p.smoothing.merge_gap_s}}},
          {"alignment",
           {{"k_total", p.alignment.k_total}, {"threshold", p.alignment.threshold}, {"restarts", p.alignment.restarts}}},
          {"output",
           {{"dir", c.output_dir.string()},
            {"write_masks", c.write_masks},
            {"wav_format", c.wav_format == WavFormat::pcm16 ? "pcm16" : "float32"}}},
          {"inputs", inputs}};
}

/// Writes <dir>/<id>.rttm, <id>_report.json, <id>_<spk>.wav and masks/<id>_<seg>.msk.
inline void write_meeting_outputs(const std::filesystem::path& dir, const std::string& id, const MeetingResult& m,
                                  const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  write_rttm(dir / (id + ".rttm"), m.diarization, id);
  for (std::size_t g = 0; g < m.speaker_audio.size(); ++g) {
    AudioBuffer a{m.speaker_audio[g].transpose(), m.sample_rate};
    write_wav(dir / (id + "_" + speaker_name(static_cast<int>(g)) + ".wav"), a, cfg.wav_format);
  }
  nlohmann::json report = m.report;
  if (cfg.write_masks) {
    std::filesystem::create_directories(dir / "masks");
    for (std::size_t i = 0; i < m.segments.size(); ++i) {
      const auto& s = m.segments[i];
      if (!s.ok) continue;
      const std::string name = id + "_" + s.spec.id + ".msk";
      write_mask_file(dir / "masks" / name, s.result.posteriors);
      report["segments"][i]["mask_file"] = "masks/" + name;
    }
  }
  report["recording"] = id;
  report["config"] = to_json(cfg);
  std::ofstream os(dir / (id + "_report.json"));
  if (!os) throw InvalidInput("cannot write report in '" + dir.string() + "'");
  os << report.dump(2) << "\n";
}

}  // namespace mixsep
