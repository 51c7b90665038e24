#pragma once

// Full voice-conversion model: content module, duration module and the
// flow-matching module with dual attention, plus the combined objective
//   L = L_cfm + L_dur + lambda * L_grl
// and the conversion procedure.

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stablevc/autograd.hpp"
#include "stablevc/cfm.hpp"
#include "stablevc/config.hpp"
#include "stablevc/contenttok.hpp"
#include "stablevc/dualagc.hpp"
#include "stablevc/durmod.hpp"
#include "stablevc/nn.hpp"
#include "stablevc/styleenc.hpp"
#include "stablevc/synth.hpp"

namespace stablevc {

using ad::Parameter;
using ad::Tape;
using ad::Var;

inline constexpr double kDefaultLambdaGrl = 0.1;

/// Style and timbre conditions for the flow field. A null pointer in place
/// of this bundle selects the learned null condition.
template <class T>
struct StyleTimbre {
  Var<T> style_seq;  // S x width, position-tagged
  dit::TimbreReference<T> timbre;
};

/// Utterance features cast to the model scalar, with content tokens.
template <class T>
struct PreparedUtterance {
  const synth::Utterance* source = nullptr;
  std::vector<int> token_ids;  // deduplicated
  std::vector<int> durations;  // teacher durations, sum = frames
  Matrix<T> content;           // L x ssl_dim codebook rows
  Matrix<T> mel;
  Matrix<T> style_features;
  Matrix<T> speaker_embedding;  // 1 x prior_dim
};

struct LossComponents {
  double cfm = 0.0;
  double duration = 0.0;
  double grl = 0.0;
  double total = 0.0;
};

/// The individual terms as tape nodes, for differentiating one at a time.
template <class T>
struct LossTerms {
  Var<T> cfm, duration, grl;
};

struct ConversionResult {
  Matrix<float> mel;
  std::vector<double> log_durations;
  std::vector<int> durations;
};

template <class T>
struct StableVcModel {
  ModelConfig config;
  content::Codebook codebook;
  nn::Linear<T> content_in;  // ssl_dim -> width
  std::vector<dit::ContentBlock<T>> content_stack;
  duration::DurationPredictor<T> duration;
  style::StyleEncoder<T> style_encoder;
  nn::Linear<T> style_position;  // position code -> width
  style::GrlHead<T> grl;
  nn::Linear<T> prior_proj;  // prior_dim -> width
  nn::Linear<T> time_fc1;
  nn::Linear<T> time_fc2;
  nn::Linear<T> flow_in;        // n_mels -> width
  nn::Linear<T> flow_position;  // position code -> width
  std::vector<dit::DitBlock<T>> flow_stack;
  nn::LayerNorm<T> out_norm;
  nn::Linear<T> out_proj;  // width -> n_mels
  Parameter<T> null_style;  // 1 x width
  Parameter<T> null_ref;    // 1 x n_mels
  Parameter<T> null_prior;  // 1 x width

  StableVcModel() = default;
  StableVcModel(const ModelConfig& cfg, content::Codebook cb, std::uint64_t seed) : config(cfg), codebook(std::move(cb)) {
    cfg.validate();
    if (codebook.k() < 1 || codebook.dim() != cfg.ssl_dim) throw std::invalid_argument("codebook does not match ssl_dim");
    std::mt19937_64 rng(seed);
    const Eigen::Index w = cfg.width, pos = 2 * cfg.position_freqs;
    content_in = nn::Linear<T>(cfg.ssl_dim, w, rng);
    for (int i = 0; i < cfg.content_blocks; ++i) content_stack.emplace_back(cfg, rng);
    duration = duration::DurationPredictor<T>(cfg, rng);
    style_encoder = style::StyleEncoder<T>(cfg, rng);
    style_position = nn::Linear<T>(pos, w, rng);
    grl = style::GrlHead<T>(cfg, rng);
    prior_proj = nn::Linear<T>(cfg.prior_dim, w, rng);
    time_fc1 = nn::Linear<T>(w, w, rng);
    time_fc2 = nn::Linear<T>(w, w, rng);
    flow_in = nn::Linear<T>(cfg.n_mels, w, rng);
    flow_position = nn::Linear<T>(pos, w, rng);
    for (int i = 0; i < cfg.flow_blocks; ++i) flow_stack.emplace_back(cfg, rng);
    out_norm = nn::LayerNorm<T>(w);
    out_proj = nn::Linear<T>(w, cfg.n_mels, rng);
    null_style = Parameter<T>(1, w);
    null_ref = Parameter<T>(1, cfg.n_mels);
    null_prior = Parameter<T>(1, w);
  }

  /// Every parameter in a fixed order. Names are stable checkpoint keys.
  void visit(const nn::ParamVisitor<T>& f) {
    content_in.visit("content_in", f);
    for (std::size_t i = 0; i < content_stack.size(); ++i) content_stack[i].visit("content." + std::to_string(i), f);
    duration.visit("duration", f);
    style_encoder.visit("style", f);
    style_position.visit("style_position", f);
    grl.visit("grl", f);
    prior_proj.visit("prior", f);
    time_fc1.visit("time.fc1", f);
    time_fc2.visit("time.fc2", f);
    flow_in.visit("flow_in", f);
    flow_position.visit("flow_position", f);
    for (std::size_t i = 0; i < flow_stack.size(); ++i) flow_stack[i].visit("flow." + std::to_string(i), f);
    out_norm.visit("out_norm", f);
    out_proj.visit("out_proj", f);
    f("null.style", null_style);
    f("null.ref", null_ref);
    f("null.prior", null_prior);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    visit([&](const std::string&, Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += std::size_t(p->value.size());
    return n;
  }

  PreparedUtterance<T> prepare(const synth::Utterance& u) const {
    if (u.ssl_features.cols() != config.ssl_dim || u.mel.cols() != config.n_mels ||
        u.style_features.cols() != config.style_dim) {
      throw std::invalid_argument("utterance " + u.utt_id + ": feature widths do not match the model");
    }
    if (Eigen::Index(u.speaker_embedding.size()) != config.prior_dim) {
      throw std::invalid_argument("utterance " + u.utt_id + ": speaker embedding length does not match prior_dim");
    }
    const auto seq = content::extract(u.ssl_features, codebook);
    PreparedUtterance<T> p;
    p.source = &u;
    p.token_ids = seq.token_ids;
    p.durations = seq.durations;
    p.content = seq.embeddings.template cast<T>();
    p.mel = u.mel.template cast<T>();
    p.style_features = u.style_features.template cast<T>();
    p.speaker_embedding.resize(1, config.prior_dim);
    for (int i = 0; i < config.prior_dim; ++i) p.speaker_embedding(0, i) = T(u.speaker_embedding[std::size_t(i)]);
    return p;
  }

  // -- sub-networks ---------------------------------------------------------

  /// Token-level content hidden states (L x width).
  Var<T> encode_content(Tape<T>& tape, const Matrix<T>& content) {
    Var<T> h = content_in(tape, tape.constant(content));
    for (auto& block : content_stack) h = block(tape, h);
    return h;
  }

  /// Raw style encoder output (S x width); used by the GRL head and for the
  /// duration module's style summary.
  Var<T> encode_style(Tape<T>& tape, const Matrix<T>& style_features) { return style_encoder(tape, style_features); }

  /// Style keys/values: encoder output tagged with normalized time.
  Var<T> style_condition(Tape<T>& tape, const Var<T>& style_seq) {
    const Matrix<T> pe = nn::normalized_position_encoding<T>(style_seq.rows(), config.position_freqs);
    return ad::add(style_seq, style_position(tape, tape.constant(pe)));
  }

  dit::TimbreReference<T> timbre_reference(Tape<T>& tape, const Matrix<T>& ref_mel, const Matrix<T>& speaker_embedding) {
    return {tape.constant(ref_mel), prior_proj(tape, tape.constant(speaker_embedding))};
  }

  Var<T> time_embedding(Tape<T>& tape, double t) {
    const Matrix<T> e = nn::timestep_embedding<T>(t, config.width);
    return time_fc2(tape, ad::silu(time_fc1(tape, tape.constant(e))));
  }

  /// Vector field v(x_t, t | content, style, timbre); `cond == nullptr`
  /// substitutes the null style and timbre.
  Var<T> field(Tape<T>& tape, const Var<T>& x_t, double t, const Var<T>& frame_content, const StyleTimbre<T>* cond) {
    if (x_t.rows() != frame_content.rows()) throw std::invalid_argument("field: content length differs from x_t");
    const Matrix<T> pe = nn::normalized_position_encoding<T>(x_t.rows(), config.position_freqs);
    Var<T> h = ad::add(ad::add(flow_in(tape, x_t), frame_content), flow_position(tape, tape.constant(pe)));
    const Var<T> te = time_embedding(tape, t);
    std::optional<StyleTimbre<T>> null_cond;
    if (cond == nullptr) {
      null_cond = StyleTimbre<T>{tape.param(null_style), {tape.param(null_ref), tape.param(null_prior)}};
      cond = &*null_cond;
    }
    for (auto& block : flow_stack) h = block(tape, h, te, cond->style_seq, cond->timbre);
    return out_proj(tape, out_norm(tape, h));
  }

  /// Predicted log-durations (L x 1).
  Var<T> predict_log_durations(Tape<T>& tape, const Var<T>& content_hidden, const Var<T>& style_seq,
                               const Var<T>& ref_mel) {
    return duration(tape, content_hidden, ad::mean_rows(style_seq), duration.timbre_summary(tape, ref_mel));
  }

  // -- training objective -----------------------------------------------------

  struct LossOptions {
    double lambda_grl = kDefaultLambdaGrl;
    double sigma_min = cfm::kSigmaMin;
    bool null_condition = false;
    double t = 0.5;
    std::uint64_t noise_seed = 0;
  };

  /// Builds the combined objective on `tape`. `refs` are same-speaker
  /// utterances whose mel frames form the timbre reference.
  Var<T> total_loss(Tape<T>& tape, const PreparedUtterance<T>& utt, const std::vector<const PreparedUtterance<T>*>& refs,
                    const LossOptions& opt, LossComponents* parts = nullptr, LossTerms<T>* terms = nullptr) {
    if (refs.empty()) throw std::invalid_argument("total_loss: at least one timbre reference is required");
    const int speaker = utt.source ? utt.source->speaker_id : -1;
    for (const auto* r : refs) {
      if (r->source && utt.source && r->source->speaker_id != speaker) {
        throw std::invalid_argument("total_loss: timbre reference from a different speaker");
      }
    }
    if (opt.lambda_grl < 0) throw std::invalid_argument("total_loss: lambda must be nonnegative");

    const Var<T> content_hidden = encode_content(tape, utt.content);
    const Var<T> style_seq = encode_style(tape, utt.style_features);
    const Matrix<T> ref_mel = concat_mels(refs);
    const dit::TimbreReference<T> timbre = timbre_reference(tape, ref_mel, refs.front()->speaker_embedding);

    // Flow matching with teacher durations.
    const Var<T> frame_content = duration::regulate_length(content_hidden, utt.durations);
    const Matrix<T> x0 = cfm::standard_normal<T>(utt.mel.rows(), utt.mel.cols(), opt.noise_seed);
    const StyleTimbre<T> cond{style_condition(tape, style_seq), timbre};
    const auto batch = cfm::make_flow_batch<T, StyleTimbre<T>>(x0, utt.mel, opt.t, opt.null_condition ? nullptr : &cond,
                                                               opt.sigma_min);
    const Var<T> l_cfm = cfm::cfm_loss(
        [&](const Matrix<T>& x, double t, const StyleTimbre<T>* h) {
          return field(tape, tape.constant(x), t, frame_content, h);
        },
        batch);

    const Var<T> log_d = predict_log_durations(tape, content_hidden, style_seq, timbre.ref_mel);
    const Var<T> l_dur = duration::duration_loss(log_d, utt.durations);

    Var<T> total = ad::add(l_cfm, l_dur);
    Var<T> l_grl = tape.constant(Matrix<T>::Zero(1, 1));
    if (speaker >= 0 && speaker < grl.n_speakers()) {
      l_grl = style::grl_loss(tape, grl, style_seq, speaker, true);
      total = ad::add(total, ad::scale(l_grl, T(opt.lambda_grl)));
    }
    if (terms != nullptr) *terms = {l_cfm, l_dur, l_grl};
    if (parts != nullptr) {
      parts->cfm = double(l_cfm.item());
      parts->duration = double(l_dur.item());
      parts->grl = double(l_grl.item());
      parts->total = double(total.item());
    }
    return total;
  }

  // -- inference --------------------------------------------------------------

  struct ConvertOptions {
    int n_steps = cfm::kDefaultEulerSteps;
    double guidance = cfm::kDefaultGuidanceScale;
    std::uint64_t seed = 0;
    /// Forces these frame durations instead of predicting them.
    std::optional<std::vector<int>> durations;
  };

  ConversionResult convert(const synth::Utterance& source, const std::vector<const synth::Utterance*>& timbre_refs,
                           const synth::Utterance& style_ref, const ConvertOptions& opt) {
    if (timbre_refs.empty()) throw std::invalid_argument("convert: empty timbre reference list");
    for (const auto* r : timbre_refs) {
      if (r->speaker_id != timbre_refs.front()->speaker_id) {
        throw std::invalid_argument("convert: timbre references must share one speaker");
      }
    }
    if (opt.n_steps < 1) throw std::invalid_argument("convert: n_steps must be >= 1");
    const PreparedUtterance<T> src = prepare(source);
    const PreparedUtterance<T> sty = prepare(style_ref);
    std::vector<PreparedUtterance<T>> refs;
    for (const auto* r : timbre_refs) refs.push_back(prepare(*r));
    std::vector<const PreparedUtterance<T>*> ref_ptrs;
    for (const auto& r : refs) ref_ptrs.push_back(&r);
    const Matrix<T> ref_mel = concat_mels(ref_ptrs);

    Tape<T> tape(false);
    const Var<T> content_hidden = encode_content(tape, src.content);
    const Var<T> style_seq = encode_style(tape, sty.style_features);
    const dit::TimbreReference<T> timbre = timbre_reference(tape, ref_mel, refs.front().speaker_embedding);

    ConversionResult result;
    const Matrix<T> log_d = predict_log_durations(tape, content_hidden, style_seq, timbre.ref_mel).value();
    for (Eigen::Index i = 0; i < log_d.size(); ++i) result.log_durations.push_back(double(log_d.data()[i]));
    if (opt.durations) {
      if (opt.durations->size() != src.token_ids.size()) throw std::invalid_argument("convert: forced durations length");
      result.durations = *opt.durations;
    } else {
      result.durations = duration::round_durations(log_d);
    }
    const Matrix<T> frame_content = duration::regulate_length(content_hidden.value(), result.durations);
    const Matrix<T> style_cond = style_condition(tape, style_seq).value();
    const Matrix<T> prior = timbre.prior.value();

    auto v = [&](const Matrix<T>& x, double t, const StyleTimbre<T>* which) -> Matrix<T> {
      Tape<T> step(false);
      std::optional<StyleTimbre<T>> local;
      if (which != nullptr) local = StyleTimbre<T>{step.constant(style_cond), {step.constant(ref_mel), step.constant(prior)}};
      return field(step, step.constant(x), t, step.constant(frame_content), which ? &*local : nullptr).value();
    };
    const StyleTimbre<T> marker{};
    const Matrix<T> mel = cfm::euler_sample<T, StyleTimbre<T>>(v, &marker, frame_content.rows(), config.n_mels,
                                                               opt.n_steps, opt.guidance, opt.seed);
    result.mel = mel.template cast<float>();
    return result;
  }

  static Matrix<T> concat_mels(const std::vector<const PreparedUtterance<T>*>& refs) {
    Eigen::Index rows = 0;
    for (const auto* r : refs) rows += r->mel.rows();
    if (rows < 1) throw std::invalid_argument("timbre reference has no frames");
    Matrix<T> out(rows, refs.front()->mel.cols());
    Eigen::Index at = 0;
    for (const auto* r : refs) {
      out.middleRows(at, r->mel.rows()) = r->mel;
      at += r->mel.rows();
    }
    return out;
  }
};

}  // namespace stablevc
