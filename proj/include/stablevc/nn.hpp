#pragma once

// Small neural-network building blocks on top of the autograd tape.

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "stablevc/autograd.hpp"

namespace stablevc::nn {

using ad::Parameter;
using ad::Tape;
using ad::Var;

/// Callback used to enumerate named parameters (checkpointing, optimizers).
template <class T>
using ParamVisitor = std::function<void(const std::string&, Parameter<T>&)>;

/// Uniform Xavier/Glorot initialization.
template <class T>
void xavier_init(Parameter<T>& p, std::mt19937_64& rng, T gain = T(1)) {
  const T limit = gain * std::sqrt(T(6) / T(p.value.rows() + p.value.cols()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = T(dist(rng));
  p.zero_grad();
}

template <class T>
struct Linear {
  Parameter<T> weight;  // in x out
  Parameter<T> bias;    // 1 x out

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng, bool zero = false)
      : weight(in, out), bias(1, out, false) {
    if (!zero) xavier_init(weight, rng);
  }

  Eigen::Index in_features() const { return weight.value.rows(); }
  Eigen::Index out_features() const { return weight.value.cols(); }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    return ad::add_row(ad::matmul(x, tape.param(weight)), tape.param(bias));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

/// Row-wise layer normalization with learned gain and shift.
template <class T>
struct LayerNorm {
  Parameter<T> gain;
  Parameter<T> shift;

  LayerNorm() = default;
  explicit LayerNorm(Eigen::Index width) : gain(1, width, false), shift(1, width, false) {
    gain.value.setOnes();
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), tape.param(gain)), tape.param(shift));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".gain", gain);
    f(prefix + ".shift", shift);
  }
};

/// 1-D convolution along time (rows), kernel 3, "same" zero padding.
template <class T>
struct Conv1d3 {
  Linear<T> proj;  // (3 * in) -> out

  Conv1d3() = default;
  Conv1d3(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng, bool zero = false)
      : proj(3 * in, out, rng, zero) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    auto stacked = ad::concat_cols<T>({ad::shift_rows(x, 1), x, ad::shift_rows(x, -1)});
    return proj(tape, stacked);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) { proj.visit(prefix, f); }
};

/// Two-layer perceptron with GELU.
template <class T>
struct FeedForward {
  Linear<T> up;
  Linear<T> down;

  FeedForward() = default;
  FeedForward(Eigen::Index width, Eigen::Index hidden, std::mt19937_64& rng)
      : up(width, hidden, rng), down(hidden, width, rng) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) { return down(tape, ad::gelu(up(tape, x))); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    up.visit(prefix + ".up", f);
    down.visit(prefix + ".down", f);
  }
};

/// Scalar parameter stored as a 1x1 matrix.
template <class T>
Parameter<T> scalar_parameter(T value) {
  Parameter<T> p(1, 1, false);
  p.value(0, 0) = value;
  return p;
}

/// Sinusoidal embedding of a scalar (diffusion timestep style).
template <class T>
Matrix<T> timestep_embedding(double t, Eigen::Index width, double scale = 1000.0) {
  Matrix<T> out(1, width);
  const Eigen::Index half = width / 2;
  for (Eigen::Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * double(i) / double(std::max<Eigen::Index>(half, 1)));
    out(0, i) = T(std::sin(scale * t * freq));
    out(0, half + i) = T(std::cos(scale * t * freq));
  }
  if (width % 2 == 1) out(0, width - 1) = T(0);
  return out;
}

/// Encodes the normalized position u = i / (n - 1) of every row of an
/// n-row sequence as [sin(pi k u), cos(pi k u)] for k = 1..n_freq.
template <class T>
Matrix<T> normalized_position_encoding(Eigen::Index n, Eigen::Index n_freq) {
  Matrix<T> out(n, 2 * n_freq);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = n > 1 ? double(i) / double(n - 1) : 0.0;
    for (Eigen::Index k = 0; k < n_freq; ++k) {
      const double arg = std::numbers::pi * double(k + 1) * u;
      out(i, 2 * k) = T(std::sin(arg));
      out(i, 2 * k + 1) = T(std::cos(arg));
    }
  }
  return out;
}

}  // namespace stablevc::nn
