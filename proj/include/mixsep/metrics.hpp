#pragma once

// Scoring: diarization error rate with optimal speaker mapping, the
// speaker-counting confusion matrix, and permutation-invariant mask AUC.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mixsep/cacg.hpp"
#include "mixsep/error.hpp"
#include "mixsep/hungarian.hpp"
#include "mixsep/rttm.hpp"

namespace mixsep {

struct DerResult {
  double der = 0.0;
  double miss = 0.0;         // seconds
  double false_alarm = 0.0;  // seconds
  double confusion = 0.0;    // seconds
  double scored_speech = 0.0;  // reference speaker time inside scored regions
  std::map<std::string, std::string> mapping;  // hyp speaker -> ref speaker
};

namespace detail {

struct Region {
  double begin, end;
};

inline std::vector<Region> merge_regions(std::vector<Region> r) {
  std::sort(r.begin(), r.end(), [](auto& a, auto& b) { return a.begin < b.begin; });
  std::vector<Region> out;
  for (const auto& x : r) {
    if (x.end <= x.begin) continue;
    if (!out.empty() && x.begin <= out.back().end)
      out.back().end = std::max(out.back().end, x.end);
    else
      out.push_back(x);
  }
  return out;
}

inline std::vector<std::string> speaker_names(const Diarization& d) {
  std::vector<std::string> s;
  for (const auto& e : d.entries) s.push_back(e.speaker);
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

}  // namespace detail

/// Diarization error rate. Overlapping speech is scored; a collar of
/// `collar_s` around every reference boundary is excluded. Hypothesis
/// speakers are mapped to reference speakers by the assignment maximizing
/// total overlap within the scored regions.
inline DerResult der(const Annotation& ref, const Diarization& hyp, double collar_s = 0.25) {
  if (ref.entries.empty()) throw InvalidInput("der: empty reference");
  const auto ref_names = detail::speaker_names(ref);
  const auto hyp_names = detail::speaker_names(hyp);
  auto index_of = [](const std::vector<std::string>& v, const std::string& s) {
    return static_cast<int>(std::lower_bound(v.begin(), v.end(), s) - v.begin());
  };

  std::vector<double> cuts;
  std::vector<detail::Region> excluded;
  for (const auto& e : ref.entries) {
    cuts.push_back(e.start_s);
    cuts.push_back(e.end_s);
    if (collar_s > 0.0) {
      excluded.push_back({e.start_s - collar_s, e.start_s + collar_s});
      excluded.push_back({e.end_s - collar_s, e.end_s + collar_s});
    }
  }
  for (const auto& e : hyp.entries) {
    cuts.push_back(e.start_s);
    cuts.push_back(e.end_s);
  }
  excluded = detail::merge_regions(std::move(excluded));
  for (const auto& x : excluded) {
    cuts.push_back(x.begin);
    cuts.push_back(x.end);
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  struct Piece {
    double dur;
    std::vector<int> r, h;
  };
  std::vector<Piece> pieces;
  std::size_t ex = 0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double a = cuts[i], b = cuts[i + 1], mid = 0.5 * (a + b);
    while (ex < excluded.size() && excluded[ex].end <= mid) ++ex;
    if (ex < excluded.size() && excluded[ex].begin <= mid && mid < excluded[ex].end) continue;
    Piece p{b - a, {}, {}};
    for (const auto& e : ref.entries)
      if (e.start_s <= mid && mid < e.end_s) p.r.push_back(index_of(ref_names, e.speaker));
    for (const auto& e : hyp.entries)
      if (e.start_s <= mid && mid < e.end_s) p.h.push_back(index_of(hyp_names, e.speaker));
    auto uniq = [](std::vector<int>& v) {
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    uniq(p.r);
    uniq(p.h);
    if (!p.r.empty() || !p.h.empty()) pieces.push_back(std::move(p));
  }

  Eigen::MatrixXd overlap = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ref_names.size()),
                                                  static_cast<Eigen::Index>(hyp_names.size()));
  for (const auto& p : pieces)
    for (int r : p.r)
      for (int h : p.h) overlap(r, h) += p.dur;
  std::vector<int> hyp_to_ref(hyp_names.size(), -1);
  if (!hyp_names.empty()) {
    const auto assign = max_score_assignment(overlap);
    for (std::size_t r = 0; r < assign.size(); ++r)
      if (assign[r] >= 0) hyp_to_ref[assign[r]] = static_cast<int>(r);
  }

  DerResult res;
  for (const auto& p : pieces) {
    const double nr = static_cast<double>(p.r.size()), nh = static_cast<double>(p.h.size());
    int correct = 0;
    for (int h : p.h)
      if (hyp_to_ref[h] >= 0 && std::binary_search(p.r.begin(), p.r.end(), hyp_to_ref[h])) ++correct;
    res.scored_speech += p.dur * nr;
    res.miss += p.dur * std::max(0.0, nr - nh);
    res.false_alarm += p.dur * std::max(0.0, nh - nr);
    res.confusion += p.dur * (std::min(nr, nh) - correct);
  }
  if (!(res.scored_speech > 0.0)) throw InvalidInput("der: no scored reference speech (collar covers everything)");
  res.der = (res.miss + res.false_alarm + res.confusion) / res.scored_speech;
  for (std::size_t h = 0; h < hyp_names.size(); ++h)
    if (hyp_to_ref[h] >= 0) res.mapping[hyp_names[h]] = ref_names[hyp_to_ref[h]];
  return res;
}

/// 8 x 8 tally of (true, estimated) active-speaker counts; row = true count.
struct CountingMatrix {
  static constexpr int kMax = 8;
  Eigen::Matrix<long, kMax, kMax> counts = Eigen::Matrix<long, kMax, kMax>::Zero();

  long total() const { return counts.sum(); }
  long correct() const { return counts.trace(); }
  double accuracy() const { return total() == 0 ? 0.0 : static_cast<double>(correct()) / total(); }
};

inline CountingMatrix counting_matrix(const std::vector<int>& truths, const std::vector<int>& estimates) {
  if (truths.size() != estimates.size()) throw InvalidInput("counting_matrix: length mismatch");
  CountingMatrix m;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const int a = truths[i], b = estimates[i];
    if (a < 1 || a > CountingMatrix::kMax || b < 1 || b > CountingMatrix::kMax)
      throw InvalidInput("counting_matrix: speaker count out of range 1..8 at index " + std::to_string(i));
    ++m.counts(a - 1, b - 1);
  }
  return m;
}

/// Area under the ROC curve of `scores` against binary `labels`, ties
/// averaged (Mann-Whitney). Degenerate label sets give 0.5.
inline double roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  long pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j + 1);  // 1-based ranks i+1..j
    for (std::size_t u = i; u < j; ++u)
      if (labels[order[u]]) {
        rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const long neg = static_cast<long>(n) - pos;
  if (pos == 0 || neg == 0) return 0.5;
  return (rank_sum - 0.5 * static_cast<double>(pos) * (pos + 1)) / (static_cast<double>(pos) * neg);
}

/// Scale-invariant SDR in dB of `est` against `ref` (both mean-removed).
inline double si_sdr(const Eigen::Ref<const Eigen::VectorXd>& est, const Eigen::Ref<const Eigen::VectorXd>& ref) {
  if (est.size() != ref.size() || ref.size() == 0) throw InvalidInput("si_sdr: length mismatch or empty signal");
  const Eigen::VectorXd r = ref.array() - ref.mean();
  const Eigen::VectorXd e = est.array() - est.mean();
  const double rr = r.squaredNorm();
  if (!(rr > 0.0)) throw InvalidInput("si_sdr: silent reference");
  const Eigen::VectorXd target = (e.dot(r) / rr) * r;
  const double noise = (e - target).squaredNorm();
  if (!(noise > 0.0)) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(target.squaredNorm() / noise);
}

/// Ground-truth dominance masks K x T x F (index (k*F + f)*T + t) and the
/// voiced-bin selection (index f*T + t).
struct TruthMasks {
  int components = 0;
  int frames = 0;
  int bins = 0;
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> voiced;

  std::size_t index(int k, int t, int f) const { return (static_cast<std::size_t>(k) * bins + f) * frames + t; }
  std::uint8_t at(int k, int t, int f) const { return mask[index(k, t, f)]; }

  TruthMasks slice_frames(int begin, int end) const {
    TruthMasks out{components, end - begin, bins, {}, {}};
    out.mask.resize(static_cast<std::size_t>(components) * out.frames * bins);
    out.voiced.resize(static_cast<std::size_t>(out.frames) * bins);
    for (int f = 0; f < bins; ++f)
      for (int t = begin; t < end; ++t) {
        out.voiced[static_cast<std::size_t>(f) * out.frames + t - begin] = voiced[static_cast<std::size_t>(f) * frames + t];
        for (int k = 0; k < components; ++k) out.mask[out.index(k, t - begin, f)] = at(k, t, f);
      }
    return out;
  }
};

/// Mean AUC of posterior masks against truth masks on voiced bins, under the
/// truth-to-hypothesis assignment maximizing total AUC when
/// `permutation_search` is set (identity pairing otherwise).
inline double mask_auc(const PosteriorTensor& gamma, const TruthMasks& truth, bool permutation_search = true) {
  if (gamma.frames != truth.frames || gamma.bins != truth.bins)
    throw InvalidInput("mask_auc: shape mismatch between posteriors and truth");
  std::vector<std::size_t> sel;
  for (int f = 0; f < truth.bins; ++f)
    for (int t = 0; t < truth.frames; ++t)
      if (truth.voiced[static_cast<std::size_t>(f) * truth.frames + t]) sel.push_back(static_cast<std::size_t>(f) * truth.frames + t);
  if (sel.empty()) throw InvalidInput("mask_auc: no voiced bins");
  Eigen::MatrixXd auc(truth.components, gamma.components);
  std::vector<double> scores(sel.size());
  std::vector<std::uint8_t> labels(sel.size());
  for (int k = 0; k < truth.components; ++k) {
    for (std::size_t i = 0; i < sel.size(); ++i) {
      const int f = static_cast<int>(sel[i] / truth.frames), t = static_cast<int>(sel[i] % truth.frames);
      labels[i] = truth.at(k, t, f);
    }
    for (int h = 0; h < gamma.components; ++h) {
      if (!permutation_search && h != k) {
        auc(k, h) = 0.0;
        continue;
      }
      for (std::size_t i = 0; i < sel.size(); ++i) {
        const int f = static_cast<int>(sel[i] / truth.frames), t = static_cast<int>(sel[i] % truth.frames);
        scores[i] = gamma.g(h, t, f);
      }
      auc(k, h) = roc_auc(scores, labels);
    }
  }
  std::vector<int> assign(truth.components, -1);
  if (permutation_search) {
    assign = max_score_assignment(auc);
  } else {
    for (int k = 0; k < truth.components; ++k) assign[k] = k < gamma.components ? k : -1;
  }
  double sum = 0.0;
  for (int k = 0; k < truth.components; ++k) sum += assign[k] >= 0 ? auc(k, assign[k]) : 0.5;
  return sum / truth.components;
}

}  // namespace mixsep
