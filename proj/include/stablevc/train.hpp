#pragma once

// Seeded training loop: AdamW on the combined objective with teacher
// durations, condition dropout, gradient-norm clipping and periodic
// checkpoints. Deterministic for a fixed seed on a single thread.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stablevc/checkpoint.hpp"
#include "stablevc/model.hpp"

namespace stablevc {

inline constexpr double kDefaultLearningRate = 1e-4;

struct TrainConfig {
  double learning_rate = kDefaultLearningRate;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  int batch_size = 4;
  int iterations = 1000;
  int warmup = 0;  // linear learning-rate warmup steps
  double lambda_grl = kDefaultLambdaGrl;
  double sigma_min = cfm::kSigmaMin;
  int euler_steps = cfm::kDefaultEulerSteps;
  int max_refs = 3;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables
  std::filesystem::path checkpoint_path;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("learning rate must be positive");
    if (!(lambda_grl >= 0)) throw std::invalid_argument("lambda must be nonnegative");
    if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
    if (iterations < 0) throw std::invalid_argument("iterations must be nonnegative");
    if (max_refs < 1) throw std::invalid_argument("max_refs must be positive");
    if (!(sigma_min >= 0 && sigma_min < 1)) throw std::invalid_argument("sigma_min must lie in [0, 1)");
  }
};

/// Raised when a loss or gradient becomes non-finite.
class NumericalAbort : public std::runtime_error {
 public:
  NumericalAbort(const std::string& what, int iteration, LossComponents parts, std::filesystem::path snapshot)
      : std::runtime_error(what), iteration(iteration), parts(parts), snapshot(std::move(snapshot)) {}
  int iteration;
  LossComponents parts;
  std::filesystem::path snapshot;  // empty when no snapshot was written
};

template <class T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(const std::vector<Parameter<T>*>& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (Parameter<T>* p : params) {
      auto [it, fresh] = state_.try_emplace(p);
      if (fresh) {
        it->second.m = Matrix<T>::Zero(p->value.rows(), p->value.cols());
        it->second.v = Matrix<T>::Zero(p->value.rows(), p->value.cols());
      }
      Matrix<T>& m = it->second.m;
      Matrix<T>& v = it->second.v;
      m = T(cfg_.beta1) * m + T(1 - cfg_.beta1) * p->grad;
      v = T(cfg_.beta2) * v + T(1 - cfg_.beta2) * p->grad.cwiseAbs2();
      if (p->decay && cfg_.weight_decay > 0) p->value *= T(1 - lr * cfg_.weight_decay);
      p->value.array() -= T(lr / c1) * m.array() / ((v.array() / T(c2)).sqrt() + T(cfg_.adam_eps));
    }
  }

 private:
  struct Moments {
    Matrix<T> m, v;
  };
  TrainConfig cfg_;
  long t_ = 0;
  std::map<const Parameter<T>*, Moments> state_;
};

struct TrainResult {
  std::vector<LossComponents> history;  // one entry per iteration, batch means
};

/// Called after every iteration with (iteration, batch-mean losses).
using TrainCallback = std::function<void(int, const LossComponents&)>;

/// Smoothed series: mean over a trailing window.
inline std::vector<double> moving_average(const std::vector<double>& x, std::size_t window) {
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += x[i];
    if (i >= window) acc -= x[i - window];
    out.push_back(acc / double(std::min(i + 1, window)));
  }
  return out;
}

template <class T>
[[noreturn]] void abort_run(StableVcModel<T>& model, const TrainConfig& cfg, int iter, const LossComponents& parts,
                            const std::string& why) {
  std::filesystem::path snapshot;
  if (!cfg.checkpoint_path.empty()) {
    snapshot = cfg.checkpoint_path;
    snapshot += ".abort";
    checkpoint::save(model, snapshot);
  }
  std::ostringstream msg;
  msg << "training aborted at iteration " << iter << ": " << why << " (cfm=" << parts.cfm << ", dur=" << parts.duration
      << ", grl=" << parts.grl << ")";
  if (!snapshot.empty()) msg << "; snapshot written to " << snapshot.string();
  throw NumericalAbort(msg.str(), iter, parts, snapshot);
}

template <class T>
TrainResult train(StableVcModel<T>& model, const std::vector<const synth::Utterance*>& utterances,
                  const TrainConfig& cfg, const TrainCallback& callback = {}) {
  cfg.validate();
  if (utterances.empty()) throw std::invalid_argument("train: empty training set");
  std::vector<PreparedUtterance<T>> data;
  data.reserve(utterances.size());
  for (const auto* u : utterances) data.push_back(model.prepare(*u));
  std::map<int, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < data.size(); ++i) by_speaker[data[i].source->speaker_id].push_back(i);

  const auto params = model.parameters();
  AdamW<T> opt(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<int> n_refs(1, cfg.max_refs);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TrainResult result;

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    for (auto* p : params) p->zero_grad();
    LossComponents mean;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx = pick(rng);
      const PreparedUtterance<T>& utt = data[idx];
      std::vector<std::size_t> others;
      for (std::size_t j : by_speaker[utt.source->speaker_id]) {
        if (j != idx) others.push_back(j);
      }
      std::shuffle(others.begin(), others.end(), rng);
      const std::size_t k = std::min<std::size_t>(std::size_t(n_refs(rng)), others.size());
      std::vector<const PreparedUtterance<T>*> refs;
      for (std::size_t j = 0; j < k; ++j) refs.push_back(&data[others[j]]);
      if (refs.empty()) refs.push_back(&utt);

      typename StableVcModel<T>::LossOptions lo;
      lo.lambda_grl = cfg.lambda_grl;
      lo.sigma_min = cfg.sigma_min;
      lo.t = unit(rng);
      lo.null_condition = unit(rng) < model.config.null_condition_prob;
      lo.noise_seed = rng();

      Tape<T> tape;
      LossComponents parts;
      const Var<T> loss = model.total_loss(tape, utt, refs, lo, &parts);
      if (!std::isfinite(parts.total)) abort_run(model, cfg, iter, parts, "non-finite loss");
      tape.backward(ad::scale(loss, T(1.0 / cfg.batch_size)));
      mean.cfm += parts.cfm / cfg.batch_size;
      mean.duration += parts.duration / cfg.batch_size;
      mean.grl += parts.grl / cfg.batch_size;
      mean.total += parts.total / cfg.batch_size;
    }

    double norm2 = 0.0;
    for (auto* p : params) norm2 += double(p->grad.squaredNorm());
    if (!std::isfinite(norm2)) abort_run(model, cfg, iter, mean, "non-finite gradient");
    if (cfg.grad_clip > 0 && norm2 > cfg.grad_clip * cfg.grad_clip) {
      const T s = T(cfg.grad_clip / std::sqrt(norm2));
      for (auto* p : params) p->grad *= s;
    }
    const double lr = cfg.warmup > 0 ? cfg.learning_rate * std::min(1.0, double(iter + 1) / cfg.warmup)
                                     : cfg.learning_rate;
    opt.step(params, lr);

    result.history.push_back(mean);
    if (callback) callback(iter, mean);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && (iter + 1) % cfg.checkpoint_every == 0) {
      checkpoint::save(model, cfg.checkpoint_path);
    }
  }
  for (auto* p : params) p->zero_grad();
  return result;
}

}  // namespace stablevc
