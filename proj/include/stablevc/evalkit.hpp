#pragma once

// Evaluation metrics: DTW alignment, pitch RMSE / Pearson correlation over
// the DTW path, and timbre similarity through the analytic timbre readout.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "stablevc/synth.hpp"

namespace stablevc::eval {

struct AlignedPair {
  std::vector<std::pair<int, int>> path;
  double cost = 0.0;
};

/// Classic DTW with |a_i - b_j| local cost and steps (1,0), (0,1), (1,1).
/// Backtracking prefers the diagonal, then (1,0), then (0,1) on ties.
inline AlignedPair dtw_align(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("dtw_align: empty sequence");
  const std::size_t n = a.size(), m = b.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> acc(n * m, inf);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return acc[i * m + j]; };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double local = std::abs(a[i] - b[j]);
      if (i == 0 && j == 0) {
        at(i, j) = local;
        continue;
      }
      double best = inf;
      if (i > 0 && j > 0) best = std::min(best, at(i - 1, j - 1));
      if (i > 0) best = std::min(best, at(i - 1, j));
      if (j > 0) best = std::min(best, at(i, j - 1));
      at(i, j) = local + best;
    }
  }
  AlignedPair out;
  out.cost = at(n - 1, m - 1);
  std::size_t i = n - 1, j = m - 1;
  out.path.emplace_back(int(i), int(j));
  while (i > 0 || j > 0) {
    const double diag = (i > 0 && j > 0) ? at(i - 1, j - 1) : inf;
    const double up = i > 0 ? at(i - 1, j) : inf;
    const double left = j > 0 ? at(i, j - 1) : inf;
    if (diag <= up && diag <= left) {
      --i;
      --j;
    } else if (up <= left) {
      --i;
    } else {
      --j;
    }
    out.path.emplace_back(int(i), int(j));
  }
  std::reverse(out.path.begin(), out.path.end());
  return out;
}

/// Pearson coefficient; nullopt when either side has zero variance.
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("pearson: length mismatch or empty");
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct PitchMetrics {
  double rmse = 0.0;                // Hz, over the DTW path
  std::optional<double> pearson;    // undefined for zero-variance input
};

/// Both contours must already have unvoiced frames removed.
inline PitchMetrics pitch_metrics(const std::vector<double>& pred_f0, const std::vector<double>& ref_f0) {
  const AlignedPair aligned = dtw_align(pred_f0, ref_f0);
  std::vector<double> xs, ys;
  xs.reserve(aligned.path.size());
  ys.reserve(aligned.path.size());
  double se = 0.0;
  for (const auto& [i, j] : aligned.path) {
    xs.push_back(pred_f0[std::size_t(i)]);
    ys.push_back(ref_f0[std::size_t(j)]);
    const double d = pred_f0[std::size_t(i)] - ref_f0[std::size_t(j)];
    se += d * d;
  }
  PitchMetrics out;
  out.rmse = std::sqrt(se / double(aligned.path.size()));
  out.pearson = pearson(xs, ys);
  return out;
}

/// Drops unvoiced frames from a readout.
inline std::vector<double> voiced(const std::vector<std::optional<double>>& contour) {
  std::vector<double> out;
  for (const auto& v : contour) {
    if (v) out.push_back(*v);
  }
  return out;
}

inline constexpr Eigen::Index kMinTimbreFrames = 50;

struct TimbreSimilarity {
  double cosine = 0.0;
  bool low_confidence = false;  // fewer than kMinTimbreFrames frames
};

template <class Derived>
TimbreSimilarity timbre_similarity(const Eigen::MatrixBase<Derived>& mel, const std::vector<double>& target_tau,
                                   const std::vector<double>& content_mean, const synth::CorpusConfig& cfg = {}) {
  TimbreSimilarity out;
  out.cosine = synth::cosine(synth::ground_truth_timbre(mel, content_mean, cfg), target_tau);
  out.low_confidence = mel.rows() < kMinTimbreFrames;
  return out;
}

template <class Derived>
TimbreSimilarity timbre_similarity(const Eigen::MatrixBase<Derived>& mel, const synth::SpeakerSpec& target,
                                   const std::vector<double>& content_mean, const synth::CorpusConfig& cfg = {}) {
  return timbre_similarity(mel, target.tau, content_mean, cfg);
}

}  // namespace stablevc::eval
