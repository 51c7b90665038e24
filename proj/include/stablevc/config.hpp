#pragma once

#include <cmath>
#include <stdexcept>

namespace stablevc {

/// Architecture sizes shared by every sub-module.
struct ModelConfig {
  int width = 64;
  int heads = 4;
  int ff_mult = 4;
  int n_mels = 40;
  int ssl_dim = 32;
  int style_dim = 8;
  int prior_dim = 8;  // length of the speaker embedding fed to the prior projection
  int content_blocks = 2;
  int flow_blocks = 4;
  int n_speakers = 32;
  int position_freqs = 8;
  int style_pool = 4;
  int style_conv_blocks = 2;
  double attention_temperature = 8.0;
  double reversal_scale = 1.0;
  double null_condition_prob = 0.1;

  int head_dim() const { return width / heads; }

  void validate() const {
    if (width < 1 || heads < 1 || width % heads != 0) throw std::invalid_argument("width must be a multiple of heads");
    if (n_speakers < 1) throw std::invalid_argument("n_speakers must be positive");
    if (!(reversal_scale > 0.0)) throw std::invalid_argument("reversal_scale must be positive");
    if (style_pool < 1) throw std::invalid_argument("style_pool must be positive");
  }
};

}  // namespace stablevc
