#pragma once

// Content tokens: K-means codebook over speaker-independent features,
// nearest-centroid encoding, run-length deduplication and embedding lookup.

#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "stablevc/autograd.hpp"

namespace stablevc::content {

/// Codebook size used for real speech features at full scale.
inline constexpr int kFullScaleCodebookSize = 1024;

struct Codebook {
  Matrix<float> centroids;  // k x D

  int k() const { return int(centroids.rows()); }
  int dim() const { return int(centroids.cols()); }
};

struct KMeansResult {
  Codebook codebook;
  std::vector<double> objective;  // Lloyd objective after each iteration
  int iterations = 0;
};

namespace detail {

inline int nearest(const Matrix<double>& centroids, const Matrix<double>& x, Eigen::Index row, double* best_dist) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d = (centroids.row(c) - x.row(row)).squaredNorm();
    if (d < best_d) {  // strict: ties keep the lower index
      best_d = d;
      best = int(c);
    }
  }
  if (best_dist != nullptr) *best_dist = best_d;
  return best;
}

}  // namespace detail

/// Lloyd's algorithm with seeded k-means++ initialization. Stops when the
/// assignment is stable or after max_iters iterations.
template <class Derived>
KMeansResult fit_kmeans_detailed(const Eigen::MatrixBase<Derived>& features, int k, std::uint64_t seed,
                                 int max_iters = 100) {
  const Eigen::Index n = features.rows();
  if (k < 1) throw std::invalid_argument("fit_kmeans: k must be positive");
  if (n < k) throw std::invalid_argument("fit_kmeans: fewer points than clusters");
  const Matrix<double> x = features.template cast<double>();
  if (!x.allFinite()) throw std::invalid_argument("fit_kmeans: non-finite features");

  std::mt19937_64 rng(seed);
  Matrix<double> centroids(k, x.cols());

  // k-means++ seeding
  {
    std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
    centroids.row(0) = x.row(first(rng));
    std::vector<double> d2(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) d2[std::size_t(i)] = (x.row(i) - centroids.row(0)).squaredNorm();
    for (int c = 1; c < k; ++c) {
      double total = 0.0;
      for (double v : d2) total += v;
      Eigen::Index chosen = 0;
      if (total > 0.0) {
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng);
        for (Eigen::Index i = 0; i < n; ++i) {
          r -= d2[std::size_t(i)];
          if (r <= 0.0) {
            chosen = i;
            break;
          }
          chosen = i;
        }
      } else {
        std::uniform_int_distribution<Eigen::Index> any(0, n - 1);
        chosen = any(rng);
      }
      centroids.row(c) = x.row(chosen);
      for (Eigen::Index i = 0; i < n; ++i) {
        d2[std::size_t(i)] = std::min(d2[std::size_t(i)], (x.row(i) - centroids.row(c)).squaredNorm());
      }
    }
  }

  KMeansResult result;
  std::vector<int> assign(std::size_t(n), -1);
  std::vector<double> dist(std::size_t(n), 0.0);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = detail::nearest(centroids, x, i, &dist[std::size_t(i)]);
      if (a != assign[std::size_t(i)]) {
        assign[std::size_t(i)] = a;
        changed = true;
      }
    }
    result.iterations = iter + 1;
    if (!changed && iter > 0) {
      double obj = 0.0;
      for (double d : dist) obj += d;
      result.objective.push_back(obj / double(n));
      break;
    }

    Matrix<double> sums = Matrix<double>::Zero(k, x.cols());
    std::vector<int> counts(std::size_t(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[std::size_t(i)]) += x.row(i);
      ++counts[std::size_t(assign[std::size_t(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[std::size_t(c)] > 0) centroids.row(c) = sums.row(c) / double(counts[std::size_t(c)]);
    }
    // Empty clusters take the point currently farthest from its centroid.
    for (int c = 0; c < k; ++c) {
      if (counts[std::size_t(c)] > 0) continue;
      Eigen::Index far = 0;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double d = (x.row(i) - centroids.row(assign[std::size_t(i)])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      --counts[std::size_t(assign[std::size_t(far)])];
      centroids.row(c) = x.row(far);
      assign[std::size_t(far)] = c;
      counts[std::size_t(c)] = 1;
      changed = true;
    }

    double obj = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) obj += (x.row(i) - centroids.row(assign[std::size_t(i)])).squaredNorm();
    result.objective.push_back(obj / double(n));
  }
  result.codebook.centroids = centroids.cast<float>();
  return result;
}

template <class Derived>
Codebook fit_kmeans(const Eigen::MatrixBase<Derived>& features, int k, std::uint64_t seed) {
  return fit_kmeans_detailed(features, k, seed).codebook;
}

/// Nearest centroid per frame by squared Euclidean distance, lowest index on ties.
template <class Derived>
std::vector<int> encode(const Eigen::MatrixBase<Derived>& features, const Codebook& codebook) {
  if (features.cols() != codebook.dim()) throw std::invalid_argument("encode: feature width does not match codebook");
  const Matrix<double> c = codebook.centroids.cast<double>();
  const Matrix<double> x = features.template cast<double>();
  std::vector<int> ids(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index t = 0; t < x.rows(); ++t) ids[std::size_t(t)] = detail::nearest(c, x, t, nullptr);
  return ids;
}

struct Deduplicated {
  std::vector<int> ids;
  std::vector<int> durations;
};

/// Run-length encoding of adjacent repeats.
inline Deduplicated dedup(const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("dedup: empty token sequence");
  Deduplicated out;
  for (int tok : tokens) {
    if (!out.ids.empty() && out.ids.back() == tok) {
      ++out.durations.back();
    } else {
      out.ids.push_back(tok);
      out.durations.push_back(1);
    }
  }
  return out;
}

inline std::vector<int> expand(const std::vector<int>& ids, const std::vector<int>& durations) {
  if (ids.size() != durations.size()) throw std::invalid_argument("expand: length mismatch");
  std::vector<int> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (durations[i] < 1) throw std::invalid_argument("expand: durations must be >= 1");
    out.insert(out.end(), std::size_t(durations[i]), ids[i]);
  }
  return out;
}

/// Centroid rows of the given ids.
inline Matrix<float> embed(const std::vector<int>& ids, const Codebook& codebook) {
  Matrix<float> out(Eigen::Index(ids.size()), codebook.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= codebook.k()) throw std::out_of_range("embed: token id outside codebook");
    out.row(Eigen::Index(i)) = codebook.centroids.row(ids[i]);
  }
  return out;
}

struct ContentSequence {
  std::vector<int> token_ids;
  std::vector<int> durations;
  Matrix<float> embeddings;
};

template <class Derived>
ContentSequence extract(const Eigen::MatrixBase<Derived>& ssl_features, const Codebook& codebook) {
  auto d = dedup(encode(ssl_features, codebook));
  ContentSequence seq;
  seq.embeddings = embed(d.ids, codebook);
  seq.token_ids = std::move(d.ids);
  seq.durations = std::move(d.durations);
  return seq;
}

}  // namespace stablevc::content
