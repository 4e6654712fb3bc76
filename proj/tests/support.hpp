#pragma once

// Shared synthetic fixtures for the unit suites.

#include <random>
#include <vector>

#include "mixsep/mixsep.hpp"

namespace testing_support {

using namespace mixsep;

/// Normalized TF observations from K cACG sources with hard dominance.
struct TfMixture {
  StftTensor x;
  std::vector<std::vector<HermitianPD>> b;  // [k][f]
  std::vector<int> label;                   // index f*T + t
};

inline TfMixture tf_mixture(int k_count, int channels, int frames, int bins, std::uint64_t seed,
                            double anisotropy = 3.0) {
  std::mt19937_64 rng(seed);
  TfMixture m;
  m.x = StftTensor(channels, frames, bins);
  m.b.resize(k_count);
  for (int k = 0; k < k_count; ++k)
    for (int f = 0; f < bins; ++f) m.b[k].push_back(random_spatial_covariance(channels, anisotropy, rng));
  std::uniform_int_distribution<int> pick(0, k_count - 1);
  m.label.resize(static_cast<std::size_t>(frames) * bins);
  for (int f = 0; f < bins; ++f)
    for (int t = 0; t < frames; ++t) {
      const int k = pick(rng);
      m.label[static_cast<std::size_t>(f) * frames + t] = k;
      const Eigen::VectorXcd y = sample_cacg(m.b[k][f], 1, rng).col(0);
      for (int c = 0; c < channels; ++c) m.x.at(c, t, f) = y(c);
    }
  m.x.normalized = true;
  return m;
}

/// Random K x T responsibilities with columns summing to one.
inline Eigen::MatrixXd random_resp(int k_count, int frames, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Eigen::MatrixXd r(k_count, frames);
  for (int t = 0; t < frames; ++t) {
    for (int k = 0; k < k_count; ++k) r(k, t) = u(rng);
    r.col(t) /= r.col(t).sum();
  }
  return r;
}

/// T frames from K vMF prototypes, frame t drawn from label t % K (blocks of `block`).
inline EmbeddingSequence vmf_frames(const std::vector<Eigen::VectorXd>& mus, double kappa, int frames, int block,
                                    std::mt19937_64& rng, std::vector<int>* labels = nullptr) {
  const int dim = static_cast<int>(mus[0].size());
  RowMatrixXd m(frames, dim);
  for (int t = 0; t < frames; ++t) {
    const int k = (t / block) % static_cast<int>(mus.size());
    if (labels) labels->push_back(k);
    m.row(t) = sample_vmf(mus[k], kappa, 1, rng).row(0);
  }
  return EmbeddingSequence{m, 62.5};
}

}  // namespace testing_support
