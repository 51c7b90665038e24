#pragma once

// Style encoder (average pooling + residual conv blocks, 4x time
// compression) and the adversarial speaker classifier behind a gradient
// reversal layer.

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stablevc/autograd.hpp"
#include "stablevc/config.hpp"
#include "stablevc/nn.hpp"

namespace stablevc::style {

using ad::Tape;
using ad::Var;

template <class T>
struct StyleEncoder {
  struct Block {
    nn::LayerNorm<T> norm;
    nn::Conv1d3<T> conv;
  };

  Eigen::Index pool = 4;
  nn::Linear<T> input;
  std::vector<Block> blocks;
  nn::LayerNorm<T> out_norm;  // bounds the scale the reversed gradient can inflate

  StyleEncoder() = default;
  StyleEncoder(const ModelConfig& cfg, std::mt19937_64& rng) : pool(cfg.style_pool), input(cfg.style_dim, cfg.width, rng), out_norm(cfg.width) {
    for (int i = 0; i < cfg.style_conv_blocks; ++i) {
      blocks.push_back(Block{nn::LayerNorm<T>(cfg.width), nn::Conv1d3<T>(cfg.width, cfg.width, rng)});
    }
  }

  static Eigen::Index output_length(Eigen::Index frames, Eigen::Index pool = 4) { return (frames + pool - 1) / pool; }

  /// Time-pooled features before the conv stack.
  Var<T> pooled(Tape<T>& tape, const Matrix<T>& style_features) {
    if (style_features.rows() < 1) throw std::invalid_argument("encode_style: empty input");
    return ad::avg_pool_rows(tape.constant(style_features), pool);
  }

  Var<T> operator()(Tape<T>& tape, const Matrix<T>& style_features) {
    Var<T> x = input(tape, pooled(tape, style_features));
    for (Block& b : blocks) x = ad::add(x, b.conv(tape, ad::gelu(b.norm(tape, x))));
    return out_norm(tape, x);
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) {
    input.visit(prefix + ".input", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = prefix + ".block" + std::to_string(i);
      blocks[i].norm.visit(p + ".norm", f);
      blocks[i].conv.visit(p + ".conv", f);
    }
    out_norm.visit(prefix + ".out_norm", f);
  }
};

/// Speaker classifier fed through a gradient reversal layer.
template <class T>
struct GrlHead {
  nn::Linear<T> classifier;
  T reversal_scale = T(1);

  GrlHead() = default;
  GrlHead(const ModelConfig& cfg, std::mt19937_64& rng)
      : classifier(cfg.width, cfg.n_speakers, rng), reversal_scale(T(cfg.reversal_scale)) {
    if (!(reversal_scale > T(0))) throw std::invalid_argument("reversal_scale must be positive");
  }

  int n_speakers() const { return int(classifier.out_features()); }

  Var<T> logits(Tape<T>& tape, const Var<T>& global, bool reverse = true) {
    const Var<T> x = reverse ? ad::grad_reverse(global, reversal_scale) : global;
    return classifier(tape, x);
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& f) { classifier.visit(prefix + ".classifier", f); }
};

/// -log C(label | mean_t(style_seq)). Gradients reaching the style encoder
/// are reversed; the classifier sees the ordinary gradient.
template <class T>
Var<T> grl_loss(Tape<T>& tape, GrlHead<T>& head, const Var<T>& style_seq, int speaker_label, bool reverse = true) {
  if (speaker_label < 0 || speaker_label >= head.n_speakers()) throw std::out_of_range("grl_loss: invalid speaker label");
  const Var<T> global = ad::mean_rows(style_seq);
  return ad::nll_from_logits(head.logits(tape, global, reverse), speaker_label);
}

}  // namespace stablevc::style
