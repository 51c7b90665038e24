#pragma once

// Token-level duration prediction in the log domain, conditioned on style
// and timbre summaries, plus the length regulator.

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stablevc/autograd.hpp"
#include "stablevc/config.hpp"
#include "stablevc/nn.hpp"

namespace stablevc::duration {

using ad::Tape;
using ad::Var;

template <class T>
struct DurationPredictor {
  nn::Linear<T> style_bias;   // width -> width
  nn::Linear<T> timbre_proj;  // n_mels -> width, applied to reference frames then averaged
  nn::Conv1d3<T> conv1;
  nn::LayerNorm<T> norm1;
  nn::Conv1d3<T> conv2;
  nn::LayerNorm<T> norm2;
  nn::Linear<T> out;  // width -> 1, zero init

  DurationPredictor() = default;
  DurationPredictor(const ModelConfig& cfg, std::mt19937_64& rng)
      : style_bias(cfg.width, cfg.width, rng),
        timbre_proj(cfg.n_mels, cfg.width, rng),
        conv1(cfg.width, cfg.width, rng),
        norm1(cfg.width),
        conv2(cfg.width, cfg.width, rng),
        norm2(cfg.width),
        out(cfg.width, 1, rng, true) {}

  /// Time-average of the reference frames' projections (1 x width).
  Var<T> timbre_summary(Tape<T>& tape, const Var<T>& ref_mel) { return ad::mean_rows(timbre_proj(tape, ref_mel)); }

  /// Log-durations (L x 1) for L content tokens.
  Var<T> operator()(Tape<T>& tape, const Var<T>& content_hidden, const Var<T>& style_summary,
                    const Var<T>& timbre_summary) {
    if (content_hidden.rows() < 1) throw std::invalid_argument("predict_durations: empty content");
    const Var<T> bias = ad::add(style_bias(tape, style_summary), timbre_summary);
    Var<T> x = ad::add_row(content_hidden, bias);
    x = norm1(tape, ad::gelu(conv1(tape, x)));
    x = norm2(tape, ad::gelu(conv2(tape, x)));
    return out(tape, x);
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
    style_bias.visit(prefix + ".style_bias", f);
    timbre_proj.visit(prefix + ".timbre_proj", f);
    conv1.visit(prefix + ".conv1", f);
    norm1.visit(prefix + ".norm1", f);
    conv2.visit(prefix + ".conv2", f);
    norm2.visit(prefix + ".norm2", f);
    out.visit(prefix + ".out", f);
  }
};

/// max(1, round(exp(log_d))) per token.
template <class Derived>
std::vector<int> round_durations(const Eigen::MatrixBase<Derived>& log_durations) {
  std::vector<int> out(static_cast<std::size_t>(log_durations.size()));
  for (Eigen::Index i = 0; i < log_durations.size(); ++i) {
    const double d = std::exp(double(log_durations.derived().data()[i]));
    out[std::size_t(i)] = std::max(1, int(std::lround(std::min(d, 1e6))));
  }
  return out;
}

/// Mean over tokens of (log_pred - log(true))^2.
template <class T>
Var<T> duration_loss(const Var<T>& log_pred, const std::vector<int>& true_durations) {
  if (log_pred.rows() * log_pred.cols() != Eigen::Index(true_durations.size())) {
    throw std::invalid_argument("duration_loss: length mismatch");
  }
  Matrix<T> target(log_pred.rows(), log_pred.cols());
  for (std::size_t i = 0; i < true_durations.size(); ++i) {
    if (true_durations[i] < 1) throw std::invalid_argument("duration_loss: durations must be >= 1");
    target.data()[i] = T(std::log(double(true_durations[i])));
  }
  return ad::mse(log_pred, target);
}

/// Repeats row i durations[i] times.
template <class T>
Var<T> regulate_length(const Var<T>& hidden, const std::vector<int>& durations) {
  return ad::repeat_rows(hidden, durations);
}

template <class T>
Matrix<T> regulate_length(const Matrix<T>& hidden, const std::vector<int>& durations) {
  Tape<T> tape(false);
  return ad::repeat_rows(tape.constant(hidden), durations).value();
}

}  // namespace stablevc::duration
