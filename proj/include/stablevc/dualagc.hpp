#pragma once

// DiT blocks. The flow-matching block applies timestep FiLM, then dual
// attention: a timbre path over reference mel frames with the speaker prior
// prepended as slot 0, and a style path over the compressed style sequence
// that is added through a tanh(alpha) gate (alpha starts at exactly 0).
// Queries and keys are L2-normalized; logits are temperature * cos.

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stablevc/autograd.hpp"
#include "stablevc/config.hpp"
#include "stablevc/nn.hpp"

namespace stablevc::dit {

using ad::Parameter;
using ad::Tape;
using ad::Var;

/// Timbre condition: concatenated reference mel frames and the projected
/// speaker prior (1 x width).
template <class T>
struct TimbreReference {
  Var<T> ref_mel;
  Var<T> prior;
};

/// Optional capture of attention probabilities, one matrix per head.
template <class T>
struct AttentionTrace {
  std::vector<Matrix<T>> timbre;
  std::vector<Matrix<T>> style;
  std::vector<Matrix<T>> timbre_logits;
  std::vector<Matrix<T>> style_logits;
};

/// output = gamma (.) c + beta, gamma and beta broadcast over rows.
template <class T>
Var<T> film(const Var<T>& c, const Var<T>& gamma, const Var<T>& beta) {
  return ad::add_row(ad::mul_row(c, gamma), beta);
}

namespace detail {

template <class T>
Var<T> attend(Tape<T>& tape, const Var<T>& q_unit, const Var<T>& k, const Var<T>& v, const Var<T>& temperature,
              std::vector<Matrix<T>>* probs_out, std::vector<Matrix<T>>* logits_out) {
  const Var<T> logits = ad::scale_by(ad::matmul_nt(q_unit, ad::l2_normalize_rows(k)), temperature);
  const Var<T> probs = ad::softmax_rows(logits);
  if (probs_out != nullptr) probs_out->push_back(probs.value());
  if (logits_out != nullptr) logits_out->push_back(logits.value());
  (void)tape;
  return ad::matmul(probs, v);
}

}  // namespace detail

template <class T>
struct DualAttention {
  int heads = 4;
  nn::Linear<T> query;
  nn::Linear<T> timbre_key;    // n_mels -> width
  nn::Linear<T> timbre_value;  // n_mels -> width
  nn::Linear<T> prior_key;     // width -> width
  nn::Linear<T> prior_value;   // width -> width
  nn::Linear<T> style_key;
  nn::Linear<T> style_value;
  nn::Linear<T> output;
  Parameter<T> alpha = nn::scalar_parameter<T>(T(0));
  Parameter<T> timbre_temperature;
  Parameter<T> style_temperature;

  DualAttention() = default;
  DualAttention(const ModelConfig& cfg, std::mt19937_64& rng)
      : heads(cfg.heads),
        query(cfg.width, cfg.width, rng),
        timbre_key(cfg.n_mels, cfg.width, rng),
        timbre_value(cfg.n_mels, cfg.width, rng),
        prior_key(cfg.width, cfg.width, rng),
        prior_value(cfg.width, cfg.width, rng),
        style_key(cfg.width, cfg.width, rng),
        style_value(cfg.width, cfg.width, rng),
        output(cfg.width, cfg.width, rng),
        timbre_temperature(nn::scalar_parameter<T>(T(cfg.attention_temperature))),
        style_temperature(nn::scalar_parameter<T>(T(cfg.attention_temperature))) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& c, const Var<T>& style_seq, const TimbreReference<T>& ref,
                    AttentionTrace<T>* trace = nullptr) {
    if (ref.ref_mel.rows() < 1) throw std::invalid_argument("dual_attention: empty timbre reference");
    if (style_seq.rows() < 1) throw std::invalid_argument("dual_attention: empty style sequence");
    const Eigen::Index width = query.out_features();
    const Eigen::Index d = width / heads;

    const Var<T> q = query(tape, c);
    const Var<T> kt = ad::concat_rows(prior_key(tape, ref.prior), timbre_key(tape, ref.ref_mel));
    const Var<T> vt = ad::concat_rows(prior_value(tape, ref.prior), timbre_value(tape, ref.ref_mel));
    const Var<T> ks = style_key(tape, style_seq);
    const Var<T> vs = style_value(tape, style_seq);
    const Var<T> temp_t = tape.param(timbre_temperature);
    const Var<T> temp_s = tape.param(style_temperature);
    const Var<T> gate = ad::tanh(tape.param(alpha));

    std::vector<Var<T>> head_out;
    head_out.reserve(std::size_t(heads));
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index off = h * d;
      const Var<T> qh = ad::l2_normalize_rows(ad::slice_cols(q, off, d));
      const Var<T> timbre = detail::attend(tape, qh, ad::slice_cols(kt, off, d), ad::slice_cols(vt, off, d), temp_t,
                                           trace ? &trace->timbre : nullptr, trace ? &trace->timbre_logits : nullptr);
      const Var<T> styled = detail::attend(tape, qh, ad::slice_cols(ks, off, d), ad::slice_cols(vs, off, d), temp_s,
                                           trace ? &trace->style : nullptr, trace ? &trace->style_logits : nullptr);
      head_out.push_back(ad::add(timbre, ad::scale_by(styled, gate)));
    }
    return output(tape, ad::concat_cols(head_out));
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
    query.visit(prefix + ".query", f);
    timbre_key.visit(prefix + ".timbre_key", f);
    timbre_value.visit(prefix + ".timbre_value", f);
    prior_key.visit(prefix + ".prior_key", f);
    prior_value.visit(prefix + ".prior_value", f);
    style_key.visit(prefix + ".style_key", f);
    style_value.visit(prefix + ".style_value", f);
    output.visit(prefix + ".output", f);
    f(prefix + ".alpha", alpha);
    f(prefix + ".timbre_temperature", timbre_temperature);
    f(prefix + ".style_temperature", style_temperature);
  }
};

/// Flow-matching DiT block:
///   c' = film(c, t); h = c' + attn(norm(c')); out = h + ff(norm(h))
template <class T>
struct DitBlock {
  nn::Linear<T> film_net;  // width -> 2 * width, zero init so gamma = 1, beta = 0
  nn::LayerNorm<T> attn_norm;
  DualAttention<T> attention;
  nn::LayerNorm<T> ff_norm;
  nn::FeedForward<T> ff;

  DitBlock() = default;
  DitBlock(const ModelConfig& cfg, std::mt19937_64& rng)
      : film_net(cfg.width, 2 * cfg.width, rng, true),
        attn_norm(cfg.width),
        attention(cfg, rng),
        ff_norm(cfg.width),
        ff(cfg.width, cfg.ff_mult * cfg.width, rng) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& c, const Var<T>& t_embed, const Var<T>& style_seq,
                    const TimbreReference<T>& ref, AttentionTrace<T>* trace = nullptr) {
    const Eigen::Index width = c.cols();
    const Var<T> gb = film_net(tape, t_embed);
    const Var<T> gamma = ad::add(ad::slice_cols(gb, 0, width), tape.constant(Matrix<T>::Ones(1, width)));
    const Var<T> beta = ad::slice_cols(gb, width, width);
    const Var<T> modulated = film(c, gamma, beta);
    const Var<T> h = ad::add(modulated, attention(tape, attn_norm(tape, modulated), style_seq, ref, trace));
    return ad::add(h, ff(tape, ff_norm(tape, h)));
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
    film_net.visit(prefix + ".film", f);
    attn_norm.visit(prefix + ".attn_norm", f);
    attention.visit(prefix + ".attn", f);
    ff_norm.visit(prefix + ".ff_norm", f);
    ff.visit(prefix + ".ff", f);
  }
};

/// Content-module block: QK-normalized self-attention and feed-forward,
/// with no timestep, style or timbre input.
template <class T>
struct ContentBlock {
  int heads = 4;
  nn::LayerNorm<T> attn_norm;
  nn::Linear<T> query;
  nn::Linear<T> key;
  nn::Linear<T> value;
  nn::Linear<T> output;
  Parameter<T> temperature;
  nn::LayerNorm<T> ff_norm;
  nn::FeedForward<T> ff;

  ContentBlock() = default;
  ContentBlock(const ModelConfig& cfg, std::mt19937_64& rng)
      : heads(cfg.heads),
        attn_norm(cfg.width),
        query(cfg.width, cfg.width, rng),
        key(cfg.width, cfg.width, rng),
        value(cfg.width, cfg.width, rng),
        output(cfg.width, cfg.width, rng),
        temperature(nn::scalar_parameter<T>(T(cfg.attention_temperature))),
        ff_norm(cfg.width),
        ff(cfg.width, cfg.ff_mult * cfg.width, rng) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& c) {
    const Eigen::Index d = c.cols() / heads;
    const Var<T> x = attn_norm(tape, c);
    const Var<T> q = query(tape, x);
    const Var<T> k = key(tape, x);
    const Var<T> v = value(tape, x);
    const Var<T> temp = tape.param(temperature);
    std::vector<Var<T>> head_out;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index off = h * d;
      head_out.push_back(detail::attend(tape, ad::l2_normalize_rows(ad::slice_cols(q, off, d)),
                                        ad::slice_cols(k, off, d), ad::slice_cols(v, off, d), temp,
                                        static_cast<std::vector<Matrix<T>>*>(nullptr),
                                        static_cast<std::vector<Matrix<T>>*>(nullptr)));
    }
    const Var<T> h = ad::add(c, output(tape, ad::concat_cols(head_out)));
    return ad::add(h, ff(tape, ff_norm(tape, h)));
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
    attn_norm.visit(prefix + ".attn_norm", f);
    query.visit(prefix + ".query", f);
    key.visit(prefix + ".key", f);
    value.visit(prefix + ".value", f);
    output.visit(prefix + ".output", f);
    f(prefix + ".temperature", temperature);
    ff_norm.visit(prefix + ".ff_norm", f);
    ff.visit(prefix + ".ff", f);
  }
};

}  // namespace stablevc::dit
