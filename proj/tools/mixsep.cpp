// Batch command line: run the pipeline, generate synthetic meetings, score results.

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "mixsep/mixsep.hpp"

namespace fs = std::filesystem;
using namespace mixsep;

namespace {

constexpr int kOk = 0;
constexpr int kFatal = 1;
constexpr int kPartial = 2;

void configure_logging() {
  spdlog::set_default_logger(spdlog::stderr_logger_st("mixsep"));
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("MIXSEP_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

int cmd_run(const fs::path& config_path, std::optional<int> jobs, std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_run_config(config_path);
  if (jobs) cfg.pipeline.jobs = *jobs;
  if (seed) cfg.pipeline.seed = *seed;
  validate(cfg);
  if (cfg.inputs.empty()) throw ConfigError("config: no inputs listed");
  for (const auto& in : cfg.inputs) {
    if (!fs::exists(in.audio)) throw InvalidInput("missing audio file '" + in.audio.string() + "'");
    if (!fs::exists(in.embeddings)) throw InvalidInput("missing embedding file '" + in.embeddings.string() + "'");
  }
  int failed = 0;
  for (const auto& in : cfg.inputs) {
    spdlog::info("recording {}: {}", in.id, in.audio.string());
    const AudioBuffer audio = read_wav(in.audio);
    const RowMatrixXd emb = read_embedding_file(in.embeddings);
    const MeetingResult m = run_meeting(audio, emb, cfg.pipeline);
    for (const auto& s : m.segments) {
      if (s.ok)
        spdlog::debug("{} {}: {} speakers, {} fusions, {:.2f} s", in.id, s.spec.id, s.result.speaker_count(),
                      s.result.fusions.size(), s.seconds);
      else
        spdlog::warn("{} {} failed: {}", in.id, s.spec.id, s.error);
    }
    write_meeting_outputs(cfg.output_dir, in.id, m, cfg);
    spdlog::info("recording {}: {} segments, {} failed, {} speakers", in.id, m.segments.size(), m.failed_segments(),
                 m.alignment.k_total);
    failed += m.failed_segments();
  }
  return failed > 0 ? kPartial : kOk;
}

int cmd_synth(const fs::path& scenario_path, const fs::path& out) {
  std::ifstream in(scenario_path);
  if (!in) throw ConfigError("cannot open scenario '" + scenario_path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("scenario '" + scenario_path.string() + "' is not valid JSON: " + e.what());
  }
  const ScenarioConfig sc = scenario_from_json(j);
  const SyntheticMeeting m = build_meeting(sc);
  fs::create_directories(out);
  write_wav(out / "audio.wav", m.audio, WavFormat::float32);
  write_embedding_file(out / "embeddings.emb", m.embeddings.frames);
  write_rttm(out / "reference.rttm", m.truth.annotation, "meeting");
  write_mask_file(out / "truth_masks.msk", m.truth.masks);
  nlohmann::json segs = nlohmann::json::array();
  for (std::size_t s = 0; s < m.truth.segments.size(); ++s)
    segs.push_back({{"id", m.truth.segments[s].id},
                    {"start_frame", m.truth.segments[s].start_frame},
                    {"end_frame", m.truth.segments[s].end_frame},
                    {"speakers", m.truth.segment_speakers[s]},
                    {"count", m.truth.segment_counts[s]}});
  nlohmann::json truth{{"scenario", scenario_to_json(sc)},
                       {"frames", m.stft.frames},
                       {"bins", m.stft.bins},
                       {"sample_rate", m.audio.sample_rate},
                       {"segments", segs}};
  std::ofstream(out / "truth.json") << truth.dump(2) << "\n";
  // Ready-to-run configuration consuming this bundle.
  RunConfig rc;
  rc.inputs.push_back({"meeting", "audio.wav", "embeddings.emb"});
  rc.output_dir = "out";
  rc.pipeline.seed = sc.seed;
  nlohmann::json rj = to_json(rc);
  std::ofstream(out / "run_config.json") << rj.dump(2) << "\n";
  spdlog::info("synthetic meeting: {} frames, {} segments, {} utterances -> {}", m.stft.frames, m.truth.segments.size(),
               m.truth.utterances.size(), out.string());
  return kOk;
}

/// Drops truth components without any positive label in the slice.
TruthMasks active_components(const TruthMasks& m) {
  std::vector<int> keep;
  for (int k = 0; k < m.components; ++k) {
    bool any = false;
    for (int f = 0; f < m.bins && !any; ++f)
      for (int t = 0; t < m.frames && !any; ++t) any = m.at(k, t, f) && m.voiced[static_cast<std::size_t>(f) * m.frames + t];
    if (any) keep.push_back(k);
  }
  TruthMasks out{static_cast<int>(keep.size()), m.frames, m.bins,
                 std::vector<std::uint8_t>(keep.size() * m.frames * m.bins), m.voiced};
  for (std::size_t i = 0; i < keep.size(); ++i)
    for (int f = 0; f < m.bins; ++f)
      for (int t = 0; t < m.frames; ++t) out.mask[out.index(static_cast<int>(i), t, f)] = m.at(keep[i], t, f);
  return out;
}

int cmd_score(const fs::path& ref_path, const fs::path& hyp_path, const std::optional<fs::path>& bundle,
              const std::optional<fs::path>& report_opt, double collar) {
  const Annotation ref = read_rttm(ref_path);
  const Diarization hyp = read_rttm(hyp_path);
  const DerResult d = der(ref, hyp, collar);
  nlohmann::json out{{"der",
                      {{"der", d.der},
                       {"miss_s", d.miss},
                       {"false_alarm_s", d.false_alarm},
                       {"confusion_s", d.confusion},
                       {"scored_speech_s", d.scored_speech},
                       {"collar_s", collar},
                       {"mapping", d.mapping}}}};

  fs::path report_path;
  if (report_opt) {
    report_path = *report_opt;
  } else {
    report_path = hyp_path;
    report_path.replace_filename(hyp_path.stem().string() + "_report.json");
  }
  if (fs::exists(report_path)) {
    std::ifstream rin(report_path);
    const nlohmann::json report = nlohmann::json::parse(rin);
    std::vector<int> truths, estimates;
    std::vector<TruthMasks> truth_slices;
    std::optional<TruthMasks> truth_all;
    if (bundle && fs::exists(*bundle / "truth_masks.msk")) truth_all = masks_from_tensor(read_mask_file(*bundle / "truth_masks.msk"));
    double auc_sum = 0.0;
    int auc_n = 0;
    for (const auto& seg : report.at("segments")) {
      if (seg.at("status") != "ok") continue;
      const double a = seg.at("start_s"), b = seg.at("end_s");
      std::map<std::string, double> talk;
      for (const auto& e : ref.entries) {
        const double o = std::min(b, e.end_s) - std::max(a, e.start_s);
        if (o > 0.0) talk[e.speaker] += o;
      }
      int truth = 0;
      for (const auto& [spk, dur] : talk)
        if (dur >= 0.5) ++truth;
      const int est = seg.at("speaker_count");
      if (truth >= 1 && truth <= CountingMatrix::kMax && est >= 1 && est <= CountingMatrix::kMax) {
        truths.push_back(truth);
        estimates.push_back(est);
      }
      if (truth_all && seg.contains("mask_file")) {
        const PosteriorTensor hyp_masks = read_mask_file(report_path.parent_path() / seg.at("mask_file").get<std::string>());
        const TruthMasks slice =
            active_components(truth_all->slice_frames(seg.at("start_frame").get<int>(), seg.at("end_frame").get<int>()));
        // Needs two active speakers: with one, every voiced bin is positive and the AUC is undefined.
        if (slice.components >= 2 && std::count(slice.voiced.begin(), slice.voiced.end(), 1) > 0) {
          auc_sum += mask_auc(hyp_masks, slice);
          ++auc_n;
        }
      }
    }
    const CountingMatrix cm = counting_matrix(truths, estimates);
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < CountingMatrix::kMax; ++r) {
      std::vector<long> row;
      for (int c = 0; c < CountingMatrix::kMax; ++c) row.push_back(cm.counts(r, c));
      rows.push_back(row);
    }
    out["counting"] = {{"rows_true_cols_estimated", rows},
                       {"correct", cm.correct()},
                       {"total", cm.total()},
                       {"accuracy", cm.accuracy()}};
    if (auc_n > 0) out["mask_auc"] = {{"mean", auc_sum / auc_n}, {"segments", auc_n}};
  } else if (bundle) {
    spdlog::warn("no report at '{}': counting and mask AUC skipped", report_path.string());
  }
  std::cout << out.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Joint diarization and separation of multichannel meetings"};
  app.require_subcommand(1);

  fs::path config_path;
  std::optional<int> jobs;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "Run the pipeline on the recordings of a config file");
  run->add_option("--config", config_path, "JSON run configuration")->required();
  run->add_option("--jobs", jobs, "Worker threads (overrides config)");
  run->add_option("--seed", seed, "Random seed (overrides config)");

  fs::path scenario, out_dir;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic meeting bundle");
  synth->add_option("--scenario", scenario, "JSON scenario")->required();
  synth->add_option("--out", out_dir, "Output directory")->required();

  fs::path ref, hyp;
  std::optional<fs::path> bundle, report;
  double collar = 0.25;
  auto* score = app.add_subcommand("score", "Score a hypothesis RTTM");
  score->add_option("--ref", ref, "Reference RTTM")->required();
  score->add_option("--hyp", hyp, "Hypothesis RTTM")->required();
  score->add_option("--bundle", bundle, "Synthetic bundle directory (enables mask AUC)");
  score->add_option("--report", report, "Run report (default: <hyp stem>_report.json)");
  score->add_option("--collar", collar, "Collar in seconds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kFatal;
  }
  try {
    if (*run) return cmd_run(config_path, jobs, seed);
    if (*synth) return cmd_synth(scenario, out_dir);
    if (*score) return cmd_score(ref, hyp, bundle, report, collar);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFatal;
  }
  return kFatal;
}
