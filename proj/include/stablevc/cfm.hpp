#pragma once

// Optimal-transport conditional flow matching.
//
//   x_t      = (1 - (1 - sigma_min) t) x0 + t x1
//   target_u = x1 - (1 - sigma_min) x0
//
// Sampling integrates dx/dt = v(x, t, h) from t = 0 with forward Euler on a
// uniform grid, optionally blending in the null-condition field.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <type_traits>

#include "stablevc/autograd.hpp"

namespace stablevc::cfm {

inline constexpr double kSigmaMin = 1e-4;
inline constexpr int kDefaultEulerSteps = 10;
inline constexpr double kDefaultGuidanceScale = 1.0;

template <class T>
Matrix<T> standard_normal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix<T> out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = T(gauss(rng));
  return out;
}

template <class T>
Matrix<T> sample_path(const Matrix<T>& x0, const Matrix<T>& x1, double t, double sigma_min = kSigmaMin) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) throw std::invalid_argument("sample_path: shape mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("sample_path: t must lie in [0, 1]");
  const T sigma_t = T(1.0 - (1.0 - sigma_min) * t);
  return sigma_t * x0 + T(t) * x1;
}

template <class T>
Matrix<T> cfm_target(const Matrix<T>& x0, const Matrix<T>& x1, double sigma_min = kSigmaMin) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) throw std::invalid_argument("cfm_target: shape mismatch");
  return x1 - T(1.0 - sigma_min) * x0;
}

template <class T, class Cond>
struct FlowBatch {
  Matrix<T> x0;
  Matrix<T> x1;
  double t = 0.0;
  Matrix<T> x_t;
  Matrix<T> target_u;
  const Cond* h = nullptr;
};

template <class T, class Cond>
FlowBatch<T, Cond> make_flow_batch(Matrix<T> x0, Matrix<T> x1, double t, const Cond* h,
                                   double sigma_min = kSigmaMin) {
  FlowBatch<T, Cond> b;
  b.x_t = sample_path(x0, x1, t, sigma_min);
  b.target_u = cfm_target(x0, x1, sigma_min);
  b.x0 = std::move(x0);
  b.x1 = std::move(x1);
  b.t = t;
  b.h = h;
  return b;
}

/// Mean squared error between field(x_t, t, h) and the regression target.
/// A field returning an ad::Var yields a differentiable loss on its tape;
/// a field returning a plain matrix yields the value.
template <class T, class Cond, class Field>
auto cfm_loss(Field&& field, const FlowBatch<T, Cond>& batch) {
  auto out = field(batch.x_t, batch.t, batch.h);
  using Out = std::decay_t<decltype(out)>;
  if constexpr (std::is_same_v<Out, ad::Var<T>>) {
    if (out.rows() != batch.target_u.rows() || out.cols() != batch.target_u.cols()) {
      throw std::invalid_argument("cfm_loss: field output shape mismatch");
    }
    return ad::mse(out, batch.target_u);
  } else {
    if (out.rows() != batch.target_u.rows() || out.cols() != batch.target_u.cols()) {
      throw std::invalid_argument("cfm_loss: field output shape mismatch");
    }
    return T((out - batch.target_u).squaredNorm() / T(out.size()));
  }
}

/// Forward-Euler integration from a given starting point. With
/// guidance_scale == 1 only the conditional field is evaluated; otherwise
/// v = v(x, t, null) + scale * (v(x, t, h) - v(x, t, null)) where the null
/// condition is signalled by passing nullptr.
template <class T, class Cond, class Field>
Matrix<T> euler_integrate(Field&& field, const Cond* h, Matrix<T> x, int n_steps,
                          double guidance_scale = kDefaultGuidanceScale) {
  if (n_steps < 1) throw std::invalid_argument("euler_sample: n_steps must be >= 1");
  const T dt = T(1) / T(n_steps);
  for (int k = 0; k < n_steps; ++k) {
    const double t = double(k) / double(n_steps);
    if (guidance_scale == 1.0) {
      Matrix<T> v = field(x, t, h);
      x += dt * v;
    } else {
      Matrix<T> v_cond = field(x, t, h);
      Matrix<T> v_null = field(x, t, static_cast<const Cond*>(nullptr));
      x += dt * (v_null + T(guidance_scale) * (v_cond - v_null));
    }
  }
  return x;
}

/// Draws x0 ~ N(0, I) from `seed` and integrates to t = 1.
template <class T, class Cond, class Field>
Matrix<T> euler_sample(Field&& field, const Cond* h, Eigen::Index rows, Eigen::Index cols, int n_steps,
                       double guidance_scale, std::uint64_t seed) {
  if (n_steps < 1) throw std::invalid_argument("euler_sample: n_steps must be >= 1");
  return euler_integrate<T>(std::forward<Field>(field), h, standard_normal<T>(rows, cols, seed), n_steps,
                            guidance_scale);
}

/// Exact marginal vector field of the OT path when the data distribution is
/// N(mean, var) per coordinate and x0 ~ N(0, 1):
///   v(x, t) = mean + (t var - (1 - s) sigma_t) / (sigma_t^2 + t^2 var) (x - t mean)
inline double gaussian_marginal_field(double x, double t, double mean, double var, double sigma_min = kSigmaMin) {
  const double sigma_t = 1.0 - (1.0 - sigma_min) * t;
  const double cov = t * var - (1.0 - sigma_min) * sigma_t;
  const double var_t = sigma_t * sigma_t + t * t * var;
  return mean + cov / var_t * (x - t * mean);
}

}  // namespace stablevc::cfm
