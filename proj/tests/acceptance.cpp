// Acceptance run: one PASS/FAIL line per criterion, details indented below it.
//
// Exit status is nonzero when any criterion other than the published-tally
// arithmetic check fails; that one is known red (the printed tallies do not
// add up to the printed total) and is reported without failing the run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixsep/mixsep.hpp"

using namespace mixsep;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  int id = 0;
  std::string name;
  bool pass = false;
  std::vector<std::string> details;
};

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool non_decreasing(const std::vector<double>& trace, const std::set<int>& skip, double* worst) {
  bool ok = true;
  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (skip.count(static_cast<int>(i) - 1)) continue;
    const double drop = (trace[i - 1] - trace[i]) / std::max(1.0, std::abs(trace[i - 1]));
    *worst = std::max(*worst, drop);
    if (drop > 1e-6) ok = false;
  }
  return ok;
}

Eigen::MatrixXd random_resp(int k_count, int frames, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Eigen::MatrixXd r(k_count, frames);
  for (int t = 0; t < frames; ++t) {
    for (int k = 0; k < k_count; ++k) r(k, t) = u(rng);
    r.col(t) /= r.col(t).sum();
  }
  return r;
}

/// Frame-labelled joint data: frame t belongs to source label[t]; its
/// embedding is vMF(mu_k) and every bin is cACG(B_{k,f}).
struct JointData {
  StftTensor x;
  EmbeddingSequence e;
  std::vector<int> label;
};

JointData joint_data(int k_count, int channels, int frames, int bins, int dim, double kappa, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto mus = equicorrelated_prototypes(k_count, dim, 0.0, rng);
  std::vector<std::vector<HermitianPD>> b(k_count);
  for (int k = 0; k < k_count; ++k)
    for (int f = 0; f < bins; ++f) b[k].push_back(random_spatial_covariance(channels, 3.0, rng));
  JointData d;
  d.x = StftTensor(channels, frames, bins);
  d.e = EmbeddingSequence{RowMatrixXd(frames, dim), 62.5};
  const int block = std::max(1, frames / (3 * k_count));
  for (int t = 0; t < frames; ++t) {
    const int k = (t / block) % k_count;
    d.label.push_back(k);
    d.e.frames.row(t) = sample_vmf(mus[k], kappa, 1, rng).row(0);
    for (int f = 0; f < bins; ++f) {
      const Eigen::VectorXcd y = sample_cacg(b[k][f], 1, rng).col(0);
      for (int c = 0; c < channels; ++c) d.x.at(c, t, f) = y(c);
    }
  }
  d.x.normalized = true;
  return d;
}

// ---------------------------------------------------------------------------

Outcome em_monotonicity() {
  Outcome o{1, "EM monotonicity (VMFMM, cACGMM, VMFcACGMM between fusions; 20 seeds each)"};
  const auto t0 = Clock::now();
  int bad_vmf = 0, bad_cacg = 0, bad_joint = 0, fusions = 0;
  double worst_vmf = 0.0, worst_cacg = 0.0, worst_joint = 0.0;
  for (int s = 0; s < 20; ++s) {
    const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(s);
    std::mt19937_64 rng(seed);
    const auto mus = equicorrelated_prototypes(4, 16, 0.0, rng);
    RowMatrixXd frames(600, 16);
    for (int t = 0; t < 600; ++t) frames.row(t) = sample_vmf(mus[t % 4], 15.0, 1, rng).row(0);
    const EmbeddingSequence e{frames, 62.5};
    const auto vm = vmfmm_em(e, random_resp(4, 600, rng), 50, 35.0, seed);
    if (!non_decreasing(vm.loglik_trace, {}, &worst_vmf)) ++bad_vmf;

    const auto d = joint_data(3, 4, 200, 8, 16, 15.0, seed);
    const auto cg = cacgmm_em(d.x, PosteriorTensor::replicate(random_resp(3, 200, rng), 8), 40);
    if (!non_decreasing(cg.loglik_trace, {}, &worst_cacg)) ++bad_cacg;

    const auto dj = joint_data(3, 3, 300, 8, 16, 15.0, seed + 77);
    JointConfig cfg;
    cfg.iterations = 40;
    cfg.seed = seed;
    const auto jr = joint_em(dj.x, dj.e, PosteriorTensor::replicate(random_resp(6, 300, rng), 8), cfg);
    std::set<int> skip;
    for (const auto& ev : jr.fusions) skip.insert(ev.iteration);
    fusions += static_cast<int>(jr.fusions.size());
    if (!non_decreasing(jr.loglik_trace, skip, &worst_joint)) ++bad_joint;
  }
  const double secs = seconds_since(t0);
  o.details.push_back(fmt("VMFMM: %d/20 runs with a decrease, worst relative drop %.2e", bad_vmf, worst_vmf));
  o.details.push_back(fmt("cACGMM: %d/20 runs with a decrease, worst relative drop %.2e", bad_cacg, worst_cacg));
  o.details.push_back(fmt("VMFcACGMM: %d/20 runs with a decrease, worst relative drop %.2e (%d fusion events skipped)",
                          bad_joint, worst_joint, fusions));
  o.details.push_back(fmt("runtime %.1f s (limit 120 s)", secs));
  o.pass = bad_vmf == 0 && bad_cacg == 0 && bad_joint == 0 && secs < 120.0;
  return o;
}

// ---------------------------------------------------------------------------

double log_sphere_area(int n) {  // area of S^{n-1} in R^n
  return std::log(2.0) + 0.5 * n * std::log(M_PI) - std::lgamma(0.5 * n);
}

/// Importance-sampled integral of the vMF density over S^{E-1}: proposal is
/// an even mixture of the uniform law and a tangent-normal law whose cosine
/// t = mu^T x follows a moment-matched Beta on (t + 1) / 2.
std::pair<double, double> vmf_integral(int dim, double kappa, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Eigen::VectorXd mu = random_unit_vector(dim, rng);
  const SpectralComponent comp{mu, kappa, false};
  const double log_u = -log_sphere_area(dim);
  double a = 1.0, b = 1.0, log_beta = 0.0;
  const bool tangent = kappa > 0.0;
  if (tangent) {
    const double m1 = vmf_mean_resultant(dim, kappa);
    const double m2 = 1.0 - (dim - 1) * m1 / kappa;
    const double ms = 0.5 * (1.0 + m1), vs = 0.25 * (m2 - m1 * m1);
    const double common = ms * (1.0 - ms) / vs - 1.0;
    a = ms * common;
    b = (1.0 - ms) * common;
    log_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  }
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  std::bernoulli_distribution coin(0.5);
  const double log_tangent_sphere = log_sphere_area(dim - 1);
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x;
    if (!tangent || coin(rng)) {
      x = random_unit_vector(dim, rng);
    } else {
      const double xa = ga(rng), xb = gb(rng);
      const double t = 2.0 * xa / (xa + xb) - 1.0;
      Eigen::VectorXd v = random_unit_vector(dim, rng);
      v -= v.dot(mu) * mu;
      v.normalize();
      x = t * mu + std::sqrt(std::max(0.0, 1.0 - t * t)) * v;
    }
    double log_q = log_u;
    if (tangent) {
      const double t = std::clamp(x.dot(mu), -1.0 + 1e-15, 1.0 - 1e-15);
      const double s = 0.5 * (t + 1.0);
      const double log_g = (a - 1.0) * std::log(s) + (b - 1.0) * std::log1p(-s) - log_beta - std::log(2.0);
      const double log_tn = log_g - log_tangent_sphere - 0.5 * (dim - 3) * std::log1p(-t * t);
      const double mx = std::max(log_u, log_tn);
      log_q = mx + std::log(0.5 * std::exp(log_u - mx) + 0.5 * std::exp(log_tn - mx));
    }
    const double w = std::exp(vmf_log_pdf(comp, x) - log_q);
    sum += w;
    sum2 += w * w;
  }
  const double mean = sum / n;
  return {mean, std::sqrt(std::max(0.0, sum2 / n - mean * mean) / n)};
}

/// Plain Monte-Carlo integral of the cACG density over the complex unit sphere.
std::pair<double, double> cacg_integral(const HermitianPD& b, int n, std::uint64_t seed) {
  const int c = static_cast<int>(b.matrix().rows());
  const Eigen::MatrixXcd y = sample_cacg(HermitianPD::identity(c), n, seed);  // uniform on the sphere
  const double log_area = std::log(2.0) + c * std::log(M_PI) - std::lgamma(static_cast<double>(c));
  double sum = 0.0, sum2 = 0.0;
  std::vector<cdouble> v(static_cast<std::size_t>(c));
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < c; ++k) v[k] = y(k, i);
    const double w = std::exp(cacg_log_pdf(b, std::span<const cdouble>(v)) + log_area);
    sum += w;
    sum2 += w * w;
  }
  const double mean = sum / n;
  return {mean, std::sqrt(std::max(0.0, sum2 / n - mean * mean) / n)};
}

HermitianPD anisotropic(int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Eigen::MatrixXcd g(c, c);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) g(i, j) = cdouble(n01(rng), n01(rng));
  const Eigen::MatrixXcd u = Eigen::HouseholderQR<Eigen::MatrixXcd>(g).householderQ();
  Eigen::VectorXd lam(c);
  for (int i = 0; i < c; ++i) lam(i) = std::pow(2.0, 2 - i);  // 4, 2, 1, 0.5
  return HermitianPD(u * lam.cast<cdouble>().asDiagonal() * u.adjoint());
}

Outcome density_normalization() {
  Outcome o{2, "Density normalization (Monte-Carlo, 1e6 samples, within 1%)"};
  bool ok = true;
  const int n = 1000000;
  std::uint64_t seed = 11;
  for (int dim : {3, 8, 64})
    for (double kappa : {0.0, 5.0, 35.0}) {
      const auto [m, se] = vmf_integral(dim, kappa, n, seed++);
      const bool good = std::abs(m - 1.0) <= 0.01;
      ok = ok && good;
      o.details.push_back(fmt("vMF E=%d kappa=%g: %.5f (se %.1e)%s", dim, kappa, m, se, good ? "" : "  <-- off"));
    }
  for (int c : {2, 4})
    for (bool aniso : {false, true}) {
      const HermitianPD b = aniso ? anisotropic(c, 5 + c) : HermitianPD::identity(c);
      const auto [m, se] = cacg_integral(b, n, seed++);
      const bool good = std::abs(m - 1.0) <= 0.01;
      ok = ok && good;
      o.details.push_back(fmt("cACG C=%d %s B: %.5f (se %.1e)%s", c, aniso ? "anisotropic" : "isotropic", m, se,
                              good ? "" : "  <-- off"));
    }
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------

Outcome parameter_recovery() {
  Outcome o{3, "Parameter recovery (vMF mu/kappa on 5000 samples; Tyler B* at C=4)"};
  bool ok = true;
  std::uint64_t seed = 21;
  for (auto [dim, kappa] : std::vector<std::pair<int, double>>{{3, 5.0}, {8, 20.0}, {64, 35.0}}) {
    std::mt19937_64 rng(seed++);
    const Eigen::VectorXd mu = random_unit_vector(dim, rng);
    const EmbeddingSequence e{sample_vmf(mu, kappa, 5000, rng), 62.5};
    const auto fit = vmf_m_step(e, Eigen::MatrixXd::Ones(1, 5000), 1e4, seed);
    const double cosine = fit[0].mu.dot(mu);
    const double rel = std::abs(fit[0].kappa - kappa) / kappa;
    const bool good = cosine >= 0.999 && rel <= 0.10;
    ok = ok && good;
    o.details.push_back(fmt("vMF E=%d kappa=%g: cosine %.5f, kappa %.3f (rel err %.3f)%s", dim, kappa, cosine,
                            fit[0].kappa, rel, good ? "" : "  <-- off"));
  }
  for (int rep = 0; rep < 3; ++rep) {
    std::mt19937_64 rng(seed++);
    const int c = 4, n = 5000;
    const HermitianPD truth = random_spatial_covariance(c, 3.0, rng);
    const Eigen::MatrixXcd y = sample_cacg(truth, n, rng);
    StftTensor x(c, n, 1);
    for (int t = 0; t < n; ++t)
      for (int k = 0; k < c; ++k) x.at(k, t, 0) = y(k, t);
    x = normalize_observations(x);
    PosteriorTensor g(1, n, 1);
    std::fill(g.gamma.begin(), g.gamma.end(), 1.0);
    std::fill(g.pi.begin(), g.pi.end(), 1.0);
    std::vector<SpatialComponent> comps{SpatialComponent::identity(c, 1)};
    for (int it = 0; it < 100; ++it) comps = cacg_m_step(x, g, comps, nullptr);
    const Eigen::MatrixXcd est = comps[0].covariances[0].matrix();
    const Eigen::MatrixXcd ref = truth.matrix();
    const Eigen::MatrixXcd aligned = est * (ref.trace().real() / est.trace().real());
    const double err = (aligned - ref).norm() / ref.norm();
    const bool good = err <= 0.05;
    ok = ok && good;
    o.details.push_back(fmt("Tyler C=4 draw %d: relative Frobenius error %.4f%s", rep, err, good ? "" : "  <-- off"));
  }
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------

struct TimeVarying {
  Eigen::MatrixXd resp;
  std::vector<double> trace;
};

/// Concentration MLE by plain bisection on A_E(kappa) = rbar.
double bisect_kappa(double rbar, int dim, double kappa_max) {
  if (vmf_mean_resultant(dim, kappa_max) <= rbar) return kappa_max;
  double lo = 0.0, hi = kappa_max;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (vmf_mean_resultant(dim, mid) < rbar ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// Independent VMFMM with per-frame priors pi_{k,t} (the frozen-B reduction).
TimeVarying time_varying_vmfmm(const EmbeddingSequence& e, Eigen::MatrixXd resp, int iterations, double kappa_max) {
  TimeVarying out;
  const int k_count = static_cast<int>(resp.rows());
  const int frames = e.num_frames(), dim = e.dim();
  for (int it = 0; it <= iterations; ++it) {
    Eigen::MatrixXd prior = resp.cwiseMax(1e-10);
    for (int t = 0; t < frames; ++t) prior.col(t) /= prior.col(t).sum();
    std::vector<Eigen::VectorXd> mu(k_count);
    std::vector<double> kappa(k_count);
    for (int k = 0; k < k_count; ++k) {
      Eigen::VectorXd r = Eigen::VectorXd::Zero(dim);
      for (int t = 0; t < frames; ++t) r += resp(k, t) * e.frames.row(t).transpose();
      const double rbar = r.norm() / resp.row(k).sum();
      mu[k] = r.normalized();
      kappa[k] = bisect_kappa(rbar, dim, kappa_max);
    }
    if (it == iterations) break;
    double total = 0.0;
    for (int t = 0; t < frames; ++t) {
      Eigen::VectorXd l(k_count);
      for (int k = 0; k < k_count; ++k)
        l(k) = std::log(prior(k, t)) + log_vmf_normalizer(dim, kappa[k]) + kappa[k] * mu[k].dot(e.frames.row(t));
      const double mx = l.maxCoeff();
      const double lse = mx + std::log((l.array() - mx).exp().sum());
      total += lse;
      resp.col(t) = (l.array() - lse).exp().matrix();
    }
    out.trace.push_back(total);
  }
  out.resp = resp;
  return out;
}

Outcome reductions() {
  Outcome o{4, "Reduction equivalences (kappa = 0 -> cACGMM; frozen B = I -> tempered VMFMM), 1e-9"};
  double worst_kappa0 = 0.0, worst_frozen = 0.0;
  for (int s = 0; s < 5; ++s) {
    const std::uint64_t seed = 40 + static_cast<std::uint64_t>(s);
    std::mt19937_64 rng(seed);
    const int k = 3, c = 4, t = 150, f = 6;
    const auto d = joint_data(k, c, t, f, 8, 10.0, seed);
    const PosteriorTensor init = PosteriorTensor::replicate(random_resp(k, t, rng), f);

    JointConfig cfg;
    cfg.iterations = 15;
    cfg.fusion = FusionStrategy::none;
    cfg.kappa_max = 0.0;
    cfg.seed = seed;
    const auto joint = joint_em(d.x, d.e, init, cfg);
    const auto ref = cacgmm_em(d.x, init, 15);
    for (std::size_t i = 0; i < joint.posterior.gamma.size(); ++i)
      worst_kappa0 = std::max(worst_kappa0, std::abs(joint.posterior.gamma[i] - ref.posterior.gamma[i]));

    cfg.kappa_max = 35.0;
    cfg.freeze_spatial = true;
    const auto frozen = joint_em(d.x, d.e, init, cfg);
    const auto tv = time_varying_vmfmm(d.e, init.frequency_sum() / f, 15, cfg.kappa_max);
    for (int kk = 0; kk < k; ++kk)
      for (int tt = 0; tt < t; ++tt)
        for (int ff = 0; ff < f; ++ff)
          worst_frozen = std::max(worst_frozen, std::abs(frozen.posterior.g(kk, tt, ff) - tv.resp(kk, tt)));
  }
  o.details.push_back(fmt("kappa = 0 vs cACGMM: max |gamma difference| %.2e over 5 seeds", worst_kappa0));
  o.details.push_back(fmt("frozen B = I vs time-varying VMFMM: max |gamma difference| %.2e over 5 seeds", worst_frozen));
  o.pass = worst_kappa0 <= 1e-9 && worst_frozen <= 1e-9;
  return o;
}

// ---------------------------------------------------------------------------

VadMask truth_vad(const SyntheticMeeting& m, int begin, int end) {
  VadMask v;
  for (int t = begin; t < end; ++t) v.frames.push_back(m.truth.activity.col(t).sum() > 0 ? 1 : 0);
  return v;
}

struct MaskScores {
  double cacgmm = 0.0;           // spatial-only model, spatial-only initialization
  double joint = 0.0;            // VMFcACGMM from the embedding-based initialization
  double cacgmm_emb_init = 0.0;  // cACGMM started from the joint model's initialization (reported only)
};

/// cACGMM as a spatial-only baseline: seeded random posteriors, best final
/// log-likelihood of `restarts` runs.
CacgmmResult cacgmm_baseline(const StftTensor& x, int k_count, int iterations, int restarts, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  CacgmmResult best;
  for (int r = 0; r < restarts; ++r) {
    auto res = cacgmm_em(x, PosteriorTensor::replicate(random_resp(k_count, x.frames, rng), x.bins), iterations);
    if (r == 0 || res.loglik_trace.back() > best.loglik_trace.back()) best = std::move(res);
  }
  return best;
}

MaskScores mask_scores(const std::vector<int>& active, std::vector<int> shared, std::uint64_t seed) {
  ScenarioConfig sc;
  sc.k_true = static_cast<int>(active.size());
  sc.channels = 4;
  sc.bins = 129;
  sc.embedding_dim = 16;
  sc.segments = {{16.0, active}};
  sc.gap_s = 0.0;
  sc.overlap_ratio = 0.3;
  sc.anisotropy = 3.0;
  sc.shared_covariance = std::move(shared);
  sc.seed = seed;
  const auto m = build_meeting(sc);
  const int frames = std::min(1000, m.stft.frames);
  const StftTensor x = normalize_observations(m.stft.slice_frames(0, frames));
  const EmbeddingSequence e = m.embeddings.slice(0, frames);
  const TruthMasks truth = m.truth.masks.slice_frames(0, frames);
  InitConfig ic;
  ic.k_init = sc.k_true;
  const auto init = initialize_segment(x, e, truth_vad(m, 0, frames), ic, seed);
  JointConfig jc;
  jc.iterations = 60;
  jc.fusion = FusionStrategy::none;
  jc.seed = seed;
  const auto jr = joint_em(x, e, init.posterior, jc, init.noise_index);
  const auto cg = cacgmm_baseline(x, init.posterior.components, 60, 3, seed);
  const auto cg_emb = cacgmm_em(x, init.posterior, 60);
  return {mask_auc(cg.posterior, truth), mask_auc(jr.posterior, truth), mask_auc(cg_emb.posterior, truth)};
}

Outcome mask_recovery() {
  Outcome o{5, "Mask recovery (C=4, F=129, T=1000; AUC >= 0.95 for cACGMM, joint higher with shared B)"};
  const auto t0 = Clock::now();
  bool ok = true;
  for (const auto& active : std::vector<std::vector<int>>{{0, 1}, {0, 1, 2}}) {
    const auto a = mask_scores(active, {}, 50 + active.size());
    const bool good = a.cacgmm >= 0.95;
    ok = ok && good;
    o.details.push_back(fmt("%zu sources, distinct B: cACGMM AUC %.4f, VMFcACGMM AUC %.4f%s", active.size(), a.cacgmm,
                            a.joint, good ? "" : "  <-- off"));
    const auto d = mask_scores(active, {0, 1}, 60 + active.size());
    const bool better = d.joint > d.cacgmm;
    ok = ok && better;
    o.details.push_back(fmt("%zu sources, sources 0 and 1 share B: cACGMM AUC %.4f, VMFcACGMM AUC %.4f%s",
                            active.size(), d.cacgmm, d.joint, better ? "" : "  <-- off"));
    o.details.push_back(fmt("    (for reference, cACGMM from the embedding-based init: %.4f distinct B, %.4f shared B)",
                            a.cacgmm_emb_init, d.cacgmm_emb_init));
  }
  o.details.push_back("cACGMM: spatial-only, seeded random init, best of 3 restarts by final log-likelihood; overlap 0.3");
  const double secs = seconds_since(t0);
  o.details.push_back(fmt("runtime %.1f s (limit 300 s)", secs));
  o.pass = ok && secs < 300.0;
  return o;
}

// ---------------------------------------------------------------------------

Outcome speaker_counting() {
  Outcome o{6, "Speaker counting (200 segments, 1-5 active of 8, K_init = 8, spectral fusion tau = 0.7)"};
  ScenarioConfig sc;
  sc.k_true = 8;
  sc.channels = 4;
  sc.bins = 33;
  sc.embedding_dim = 16;
  sc.overlap_ratio = 0.1;
  sc.gap_s = 0.5;
  sc.seed = 606;
  std::mt19937_64 rng(sc.seed);
  std::uniform_int_distribution<int> n_active(1, 5);
  std::vector<int> ids(8);
  for (int i = 0; i < 200; ++i) {
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<int> act(ids.begin(), ids.begin() + n_active(rng));
    std::sort(act.begin(), act.end());
    sc.segments.push_back({10.0, act});
  }
  const auto m = build_meeting(sc);
  std::vector<int> truths, ests;
  int under_by_two = 0;
  for (std::size_t s = 0; s < m.truth.segments.size(); ++s) {
    const auto& spec = m.truth.segments[s];
    const StftTensor x = m.stft.slice_frames(spec.start_frame, spec.end_frame);
    const EmbeddingSequence e = m.embeddings.slice(spec.start_frame, spec.end_frame);
    InitConfig ic;
    ic.k_init = 8;
    const auto init = initialize_segment(x, e, truth_vad(m, spec.start_frame, spec.end_frame), ic, 700 + s);
    JointConfig jc;
    jc.seed = 700 + s;
    const auto jr = joint_em(x, e, init.posterior, jc, init.noise_index);
    truths.push_back(m.truth.segment_counts[s]);
    ests.push_back(count_speakers(jr.model));
    if (ests.back() < truths.back() - 1) ++under_by_two;
  }
  const auto cm = counting_matrix(truths, ests);
  o.details.push_back(fmt("accuracy %d/%d = %.1f%% (limit 90%%), underestimates by more than one: %d", cm.correct(),
                          cm.total(), 100.0 * cm.accuracy(), under_by_two));
  o.details.push_back("confusion matrix (rows: true count 1-8, columns: estimated count 1-8)");
  for (int r = 0; r < 8; ++r) {
    std::string line = fmt("  %d |", r + 1);
    for (int c = 0; c < 8; ++c) line += fmt(" %4d", cm.counts(r, c));
    o.details.push_back(line);
  }
  o.pass = cm.accuracy() >= 0.90 && under_by_two == 0;
  return o;
}

// ---------------------------------------------------------------------------

Outcome fusion_algebra() {
  Outcome o{7, "Fusion algebra (gamma sum, pi-mass weighted B average)"};
  double worst_gamma = 0.0, worst_b = 0.0, worst_other = 0.0;
  for (int s = 0; s < 10; ++s) {
    std::mt19937_64 rng(80 + static_cast<std::uint64_t>(s));
    const int k = 5, t = 40, f = 6, c = 3;
    JointModel model;
    for (int kk = 0; kk < k; ++kk) {
      SpatialComponent sp = SpatialComponent::identity(c, f);
      for (int ff = 0; ff < f; ++ff) sp.covariances[ff] = random_spatial_covariance(c, 2.0, rng);
      model.spatial.push_back(sp);
      model.spectral.push_back({random_unit_vector(8, rng), 10.0, false});
    }
    PosteriorTensor p(k, t, f);
    const Eigen::MatrixXd pri = random_resp(k, t, rng);
    for (int kk = 0; kk < k; ++kk)
      for (int tt = 0; tt < t; ++tt) p.prior(kk, tt) = pri(kk, tt);
    for (int ff = 0; ff < f; ++ff) {
      const Eigen::MatrixXd g = random_resp(k, t, rng);
      for (int kk = 0; kk < k; ++kk)
        for (int tt = 0; tt < t; ++tt) p.g(kk, tt, ff) = g(kk, tt);
    }
    std::uniform_int_distribution<int> pick(0, k - 1);
    const int i = pick(rng);
    int j = pick(rng);
    while (j == i) j = pick(rng);
    const JointModel before = model;
    const PosteriorTensor pb = p;
    fuse_components(model, p, i, j);
    const double mi = pri.row(i).sum(), mj = pri.row(j).sum();
    const int ni = i < j ? i : i - 1;
    for (int tt = 0; tt < t; ++tt)
      for (int ff = 0; ff < f; ++ff)
        worst_gamma = std::max(worst_gamma, std::abs(p.g(ni, tt, ff) - (pb.g(i, tt, ff) + pb.g(j, tt, ff))));
    for (int ff = 0; ff < f; ++ff) {
      const Eigen::MatrixXcd expect = (mi * before.spatial[i].covariances[ff].matrix() +
                                       mj * before.spatial[j].covariances[ff].matrix()) /
                                      (mi + mj);
      worst_b = std::max(worst_b, (model.spatial[ni].covariances[ff].matrix() - expect).norm() / expect.norm());
    }
    for (int kk = 0, nk = 0; kk < k; ++kk) {
      if (kk == j) continue;
      if (kk != i)
        for (int tt = 0; tt < t; ++tt)
          for (int ff = 0; ff < f; ++ff) worst_other = std::max(worst_other, std::abs(p.g(nk, tt, ff) - pb.g(kk, tt, ff)));
      ++nk;
    }
  }
  o.details.push_back(fmt("max |fused gamma - sum| %.2e", worst_gamma));
  o.details.push_back(fmt("max relative |fused B - weighted average| %.2e", worst_b));
  o.details.push_back(fmt("max change of untouched components %.2e", worst_other));
  o.pass = worst_gamma <= 1e-14 && worst_b <= 1e-13 && worst_other == 0.0;
  return o;
}

// ---------------------------------------------------------------------------

Outcome segment_alignment() {
  Outcome o{8, "Segment alignment (10 meetings x 4 segments, permuted local labels, prototype cosine 0.3)"};
  int recovered = 0;
  for (int mtg = 0; mtg < 10; ++mtg) {
    std::mt19937_64 rng(900 + static_cast<std::uint64_t>(mtg));
    const int k_total = 4, dim = 16;
    const auto protos = equicorrelated_prototypes(k_total, dim, 0.3, rng);
    std::uniform_int_distribution<int> n_active(2, k_total);
    std::vector<std::vector<Eigen::VectorXd>> local;
    std::vector<std::vector<int>> who;
    std::vector<int> ids(k_total);
    for (int s = 0; s < 4; ++s) {
      std::iota(ids.begin(), ids.end(), 0);
      std::shuffle(ids.begin(), ids.end(), rng);  // random subset in random local order
      std::vector<int> speakers(ids.begin(), ids.begin() + n_active(rng));
      std::vector<Eigen::VectorXd> seg;
      for (int g : speakers) {
        const RowMatrixXd draws = sample_vmf(protos[g], 20.0, 200, rng);
        seg.push_back(draws.colwise().sum().transpose().normalized());
      }
      local.push_back(seg);
      who.push_back(speakers);
    }
    const auto al = align_prototypes(local, k_total, mtg);
    std::map<int, int> to_truth;
    bool ok = true;
    for (std::size_t s = 0; s < local.size(); ++s)
      for (std::size_t i = 0; i < local[s].size(); ++i) {
        auto [it, fresh] = to_truth.emplace(al.labels[s][i], who[s][i]);
        if (!fresh && it->second != who[s][i]) ok = false;
      }
    std::set<int> images;
    for (const auto& [g, t] : to_truth) images.insert(t);
    if (images.size() != to_truth.size()) ok = false;
    recovered += ok ? 1 : 0;
  }
  o.details.push_back(fmt("meetings with every identity recovered: %d/10", recovered));
  o.pass = recovered == 10;
  return o;
}

// ---------------------------------------------------------------------------

Eigen::VectorXd gather_spans(const Eigen::VectorXd& sig, const std::vector<std::pair<long, long>>& spans) {
  long n = 0;
  for (const auto& [a, b] : spans) n += b - a;
  Eigen::VectorXd out(n);
  long pos = 0;
  for (const auto& [a, b] : spans) {
    out.segment(pos, b - a) = sig.segment(a, b - a);
    pos += b - a;
  }
  return out;
}

Outcome end_to_end(const std::string& scenario_path) {
  Outcome o{9, "End-to-end (3 speakers, overlap 0.2: DER < 10% at 0.25 s collar, beamformer SI-SDR gain > 5 dB, byte-identical rerun)"};
  const auto t0 = Clock::now();
  std::ifstream in(scenario_path);
  if (!in) {
    o.details.push_back("cannot open scenario " + scenario_path);
    return o;
  }
  const ScenarioConfig sc = scenario_from_json(nlohmann::json::parse(in));
  const auto m = build_meeting(sc);
  PipelineConfig cfg;
  cfg.seed = sc.seed;
  const auto r1 = run_meeting(m.audio, m.embeddings.frames, cfg);
  const auto r2 = run_meeting(m.audio, m.embeddings.frames, cfg);
  const std::string rttm1 = format_rttm(r1.diarization, "meeting");
  const std::string rttm2 = format_rttm(r2.diarization, "meeting");
  const auto d = der(m.truth.annotation, r1.diarization);
  const auto d0 = der(m.truth.annotation, r1.diarization, 0.0);
  o.details.push_back(fmt("DER %.2f%% (miss %.2f s, false alarm %.2f s, confusion %.2f s of %.2f s)", 100.0 * d.der,
                          d.miss, d.false_alarm, d.confusion, d.scored_speech));
  o.details.push_back(fmt("DER without collar %.2f%% (miss %.2f s, false alarm %.2f s)", 100.0 * d0.der, d0.miss,
                          d0.false_alarm));
  o.details.push_back(fmt("speakers found %d, failed segments %d", r1.alignment.k_total, r1.failed_segments()));
  bool ok = d.der < 0.10 && r1.failed_segments() == 0;

  std::map<std::string, int> ref_to_hyp;
  for (const auto& [hyp, ref] : d.mapping)
    if (hyp.rfind("spk", 0) == 0) ref_to_hyp[ref] = std::stoi(hyp.substr(3));
  const Eigen::VectorXd mix = m.audio.samples.row(0).transpose();
  const double sr = m.audio.sample_rate;
  // Beamformer output before activity gating, placed at each segment's start.
  const long shift = StftGeometry::from(cfg.stft, sr).shift;
  std::vector<Eigen::VectorXd> beamformed(r1.speaker_audio.size(), Eigen::VectorXd::Zero(mix.size()));
  std::size_t j = 0;
  for (const auto& seg : r1.segments) {
    if (!seg.ok) continue;
    const long start = static_cast<long>(seg.result.segment.start_frame) * shift;
    for (std::size_t i = 0; i < seg.result.separated.size(); ++i) {
      auto& track = beamformed[r1.alignment.labels[j][i]];
      const auto& sep = seg.result.separated[i];
      for (long u = 0; u < sep.size() && start + u < mix.size(); ++u) track(start + u) += sep(u);
    }
    ++j;
  }
  for (int k = 0; k < sc.k_true; ++k) {
    const std::string name = "spk" + std::to_string(k);
    std::vector<std::pair<long, long>> spans;
    for (const auto& e : m.truth.annotation.entries)
      if (e.speaker == name)
        spans.emplace_back(std::lround(e.start_s * sr), std::min<long>(std::lround(e.end_s * sr), mix.size()));
    const auto it = ref_to_hyp.find(name);
    if (it == ref_to_hyp.end() || it->second >= static_cast<int>(r1.speaker_audio.size())) {
      o.details.push_back(name + ": no hypothesis speaker mapped");
      ok = false;
      continue;
    }
    const Eigen::VectorXd ref = gather_spans(m.truth.images.row(k).transpose(), spans);
    const double base = si_sdr(gather_spans(mix, spans), ref);
    const double sep = si_sdr(gather_spans(beamformed[it->second], spans), ref);
    const double gated = si_sdr(gather_spans(r1.speaker_audio[it->second], spans), ref);
    const bool good = sep - base > 5.0;
    ok = ok && good;
    o.details.push_back(fmt("%s: SI-SDR mixture %.2f dB, beamformer %.2f dB, improvement %.2f dB%s", name.c_str(), base,
                            sep, sep - base, good ? "" : "  <-- off"));
    o.details.push_back(fmt("    (activity-gated output track: %.2f dB, improvement %.2f dB)", gated, gated - base));
  }
  const bool identical = rttm1 == rttm2 && !rttm1.empty();
  ok = ok && identical;
  o.details.push_back(std::string("rerun RTTM byte-identical: ") + (identical ? "yes" : "no"));
  const double secs = seconds_since(t0);
  o.details.push_back(fmt("runtime %.1f s for generation plus two runs (limit 600 s)", secs));
  o.pass = ok && secs < 600.0;
  return o;
}

// ---------------------------------------------------------------------------

Outcome counting_arithmetic() {
  Outcome o{10, "Counting-matrix arithmetic (published tallies give 596 of 725 = 84%)"};
  const int tallies[8][8] = {{8, 0, 0, 0, 0, 0, 0, 0},     {0, 34, 0, 0, 0, 0, 0, 0},
                             {1, 2, 77, 9, 0, 0, 0, 0},    {0, 1, 8, 151, 17, 0, 0, 0},
                             {0, 0, 2, 12, 153, 14, 0, 0}, {0, 0, 0, 2, 17, 109, 10, 0},
                             {0, 0, 0, 0, 1, 13, 52, 1},   {0, 0, 0, 0, 0, 0, 9, 12}};
  std::vector<int> truths, ests;
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      for (int n = 0; n < tallies[r][c]; ++n) {
        truths.push_back(r + 1);
        ests.push_back(c + 1);
      }
  const auto cm = counting_matrix(truths, ests);
  const int pct = static_cast<int>(std::lround(100.0 * cm.accuracy()));
  o.details.push_back(fmt("correct %d (expected 596), total %d (expected 725), accuracy %.2f%% -> %d%% (expected 84%%)",
                          cm.correct(), cm.total(), 100.0 * cm.accuracy(), pct));
  o.details.push_back("known discrepancy: the 64 printed cells sum to 715, so 596/715 = 83.4%; 596/725 would be 82.2%");
  o.pass = cm.correct() == 596 && cm.total() == 725 && pct == 84;
  return o;
}

}  // namespace

int main() {
  std::vector<Outcome (*)()> plain = {em_monotonicity,  density_normalization, parameter_recovery, reductions,
                                      mask_recovery,    speaker_counting,      fusion_algebra,     segment_alignment};
  std::vector<Outcome> results;
  auto report = [&](const Outcome& o) {
    std::printf("%s [%d] %s\n", o.pass ? "PASS" : "FAIL", o.id, o.name.c_str());
    for (const auto& d : o.details) std::printf("      %s\n", d.c_str());
    std::fflush(stdout);
    results.push_back(o);
  };
  for (auto fn : plain) report(fn());
  report(end_to_end(std::string(MIXSEP_SCENARIOS) + "/meeting3_overlap20.json"));
  report(counting_arithmetic());

  int failed = 0, blocking = 0;
  for (const auto& o : results) {
    if (o.pass) continue;
    ++failed;
    if (o.id != 10) ++blocking;
  }
  std::printf("%zu criteria, %d passed, %d failed (%d blocking)\n", results.size(), static_cast<int>(results.size()) - failed,
              failed, blocking);
  return blocking == 0 ? 0 : 1;
}
