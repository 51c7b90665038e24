#pragma once

// Seeded synthetic corpus whose timbre, style and content factors can be
// recovered analytically from the rendered mel frames.
//
// Mel layout: bins [0, timbre_bins) hold envelope(tau) + unit pattern,
// bins [timbre_bins, n_mels) hold a Gaussian bump at the pitch position.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stablevc/autograd.hpp"

namespace stablevc::synth {

struct CorpusConfig {
  int n_timbre_params = 8;  // J
  int vocab_size = 64;      // V
  int timbre_bins = 32;
  int pitch_bins = 8;
  double bump_width = 0.8;
  double envelope_gain = 0.5;
  double mel_noise_std = 0.01;
  double ssl_noise_std = 0.05;
  int min_base_duration = 2;
  int max_base_duration = 6;

  int n_mels() const { return timbre_bins + pitch_bins; }
  int ssl_dim() const { return timbre_bins; }
  int style_dim() const { return pitch_bins; }
};

/// splitmix64 finalizer; derives independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// sin(pi (j+1) (m+0.5) / timbre_bins)
inline double timbre_basis(int j, int m, int timbre_bins) {
  return std::sin(std::numbers::pi * double(j + 1) * (double(m) + 0.5) / double(timbre_bins));
}

// ---------------------------------------------------------------------------
// Speakers

struct SpeakerSpec {
  int speaker_id = 0;
  std::vector<double> tau;
  std::vector<double> envelope;
};

inline std::vector<double> envelope_from_tau(const std::vector<double>& tau, const CorpusConfig& cfg = {}) {
  std::vector<double> env(static_cast<std::size_t>(cfg.timbre_bins), 0.0);
  for (int m = 0; m < cfg.timbre_bins; ++m) {
    double acc = 0.0;
    for (std::size_t j = 0; j < tau.size(); ++j) acc += tau[j] * timbre_basis(int(j), m, cfg.timbre_bins);
    env[std::size_t(m)] = cfg.envelope_gain * acc;
  }
  return env;
}

inline SpeakerSpec speaker_from_tau(int speaker_id, std::vector<double> tau, const CorpusConfig& cfg = {}) {
  if (static_cast<int>(tau.size()) != cfg.n_timbre_params) throw std::invalid_argument("tau has wrong length");
  SpeakerSpec s;
  s.speaker_id = speaker_id;
  s.envelope = envelope_from_tau(tau, cfg);
  s.tau = std::move(tau);
  return s;
}

inline SpeakerSpec make_speaker(std::uint64_t seed, int speaker_id = 0, const CorpusConfig& cfg = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> tau(static_cast<std::size_t>(cfg.n_timbre_params));
  for (auto& v : tau) v = dist(rng);
  return speaker_from_tau(speaker_id, std::move(tau), cfg);
}

// ---------------------------------------------------------------------------
// Styles

enum class StyleClass { rising, falling, flat, slow_osc, fast_osc };

inline constexpr std::array<StyleClass, 5> kAllStyles = {StyleClass::rising, StyleClass::falling, StyleClass::flat,
                                                         StyleClass::slow_osc, StyleClass::fast_osc};
inline constexpr std::array<double, 3> kRates = {0.8, 1.0, 1.25};

inline std::string_view to_string(StyleClass c) {
  switch (c) {
    case StyleClass::rising: return "rising";
    case StyleClass::falling: return "falling";
    case StyleClass::flat: return "flat";
    case StyleClass::slow_osc: return "slow_osc";
    case StyleClass::fast_osc: return "fast_osc";
  }
  throw std::invalid_argument("unknown style class");
}

inline StyleClass style_from_string(std::string_view name) {
  for (StyleClass c : kAllStyles) {
    if (to_string(c) == name) return c;
  }
  throw std::invalid_argument("unknown style class: " + std::string(name));
}

struct StyleSpec {
  StyleClass style_class = StyleClass::flat;
  double rate = 1.0;

  /// Pitch in Hz at normalized time u in [0, 1].
  double f0(double u) const {
    u = std::clamp(u, 0.0, 1.0);
    switch (style_class) {
      case StyleClass::rising: return 120.0 + 120.0 * u;
      case StyleClass::falling: return 240.0 - 120.0 * u;
      case StyleClass::flat: return 180.0;
      case StyleClass::slow_osc: return 180.0 + 60.0 * std::sin(2.0 * std::numbers::pi * u);
      case StyleClass::fast_osc: return 180.0 + 60.0 * std::sin(6.0 * std::numbers::pi * u);
    }
    throw std::invalid_argument("unknown style class");
  }
};

inline StyleSpec make_style(StyleClass style_class, double rate) {
  bool known = false;
  for (StyleClass c : kAllStyles) known = known || c == style_class;
  if (!known) throw std::invalid_argument("unknown style class");
  if (std::find(kRates.begin(), kRates.end(), rate) == kRates.end()) {
    throw std::invalid_argument("rate must be one of 0.8, 1.0, 1.25");
  }
  return StyleSpec{style_class, rate};
}

/// Pitch-band position of a frequency: 32 + 8 log2(f/100) / 2, clamped to the band.
inline double pitch_position(double f0_hz, const CorpusConfig& cfg = {}) {
  const double lo = double(cfg.timbre_bins);
  const double hi = double(cfg.n_mels() - 1);
  const double k = lo + double(cfg.pitch_bins) * std::log2(f0_hz / 100.0) / 2.0;
  return std::clamp(k, lo, hi);
}

/// Inverse of pitch_position (without the clamp).
inline double pitch_from_position(double position, const CorpusConfig& cfg = {}) {
  return 100.0 * std::exp2((position - double(cfg.timbre_bins)) * 2.0 / double(cfg.pitch_bins));
}

// ---------------------------------------------------------------------------
// Units and utterances

/// Per-vocabulary unit patterns B_v and intrinsic base durations.
struct UnitBank {
  Matrix<double> patterns;  // V x timbre_bins, uniform [-1, 1]
  std::vector<int> base_durations;
};

inline UnitBank make_unit_bank(std::uint64_t corpus_seed, const CorpusConfig& cfg = {}) {
  std::mt19937_64 rng(mix_seed(corpus_seed, 0xB0));
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::uniform_int_distribution<int> dur(cfg.min_base_duration, cfg.max_base_duration);
  UnitBank bank;
  bank.patterns.resize(cfg.vocab_size, cfg.timbre_bins);
  for (Eigen::Index i = 0; i < bank.patterns.size(); ++i) bank.patterns.data()[i] = dist(rng);
  bank.base_durations.resize(std::size_t(cfg.vocab_size));
  for (auto& d : bank.base_durations) d = dur(rng);
  return bank;
}

struct Unit {
  int unit_id = 0;
  int base_duration = 2;
};

/// Random unit sequence without adjacent repeats; durations come from the bank.
inline std::vector<Unit> random_units(const UnitBank& bank, int n_units, std::mt19937_64& rng) {
  const int vocab = int(bank.base_durations.size());
  std::uniform_int_distribution<int> pick(0, vocab - 1);
  std::vector<Unit> units;
  units.reserve(std::size_t(n_units));
  int prev = -1;
  for (int i = 0; i < n_units; ++i) {
    int id = pick(rng);
    while (id == prev && vocab > 1) id = pick(rng);
    units.push_back({id, bank.base_durations[std::size_t(id)]});
    prev = id;
  }
  return units;
}

struct Utterance {
  std::string utt_id;
  int speaker_id = 0;
  StyleClass style_class = StyleClass::flat;
  double rate = 1.0;
  Matrix<float> mel;             // T x n_mels
  Matrix<float> ssl_features;    // T x ssl_dim, speaker independent
  Matrix<float> style_features;  // T x pitch_bins, one-hot pitch band
  std::vector<int> token_ids;    // ground-truth unit id per frame
  std::vector<double> f0;        // Hz per frame
  std::vector<double> speaker_embedding;  // stand-in for a verification embedding (tau)

  Eigen::Index frames() const { return mel.rows(); }
};

struct RenderOptions {
  bool mel_noise = true;
  bool ssl_noise = true;
  std::uint64_t seed = 0;
};

inline int frames_for(int base_duration, double rate) {
  return std::max(1, static_cast<int>(std::lround(double(base_duration) / rate)));
}

inline Utterance render_utterance(const SpeakerSpec& speaker, const StyleSpec& style, const std::vector<Unit>& units,
                                  const UnitBank& bank, const RenderOptions& opts = {},
                                  const CorpusConfig& cfg = {}) {
  if (units.empty()) throw std::invalid_argument("render_utterance: empty unit sequence");
  if (!(style.rate > 0.0)) throw std::invalid_argument("render_utterance: rate must be positive");
  std::vector<int> frame_units;
  for (const Unit& u : units) {
    if (u.unit_id < 0 || u.unit_id >= bank.patterns.rows()) throw std::out_of_range("unit id outside vocabulary");
    const int d = frames_for(u.base_duration, style.rate);
    frame_units.insert(frame_units.end(), std::size_t(d), u.unit_id);
  }
  const Eigen::Index n_frames = Eigen::Index(frame_units.size());
  const int tb = cfg.timbre_bins;

  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Utterance out;
  out.speaker_id = speaker.speaker_id;
  out.style_class = style.style_class;
  out.rate = style.rate;
  out.speaker_embedding = speaker.tau;
  out.token_ids = frame_units;
  out.mel.resize(n_frames, cfg.n_mels());
  out.ssl_features.resize(n_frames, cfg.ssl_dim());
  out.style_features = Matrix<float>::Zero(n_frames, cfg.style_dim());
  out.f0.resize(std::size_t(n_frames));

  for (Eigen::Index t = 0; t < n_frames; ++t) {
    const int v = frame_units[std::size_t(t)];
    const double u = n_frames > 1 ? double(t) / double(n_frames - 1) : 0.0;
    const double f0 = style.f0(u);
    const double kappa = pitch_position(f0, cfg);
    out.f0[std::size_t(t)] = f0;
    for (int m = 0; m < tb; ++m) {
      double value = speaker.envelope[std::size_t(m)] + bank.patterns(v, m);
      if (opts.mel_noise) value += cfg.mel_noise_std * gauss(rng);
      out.mel(t, m) = float(value);
    }
    for (int m = tb; m < cfg.n_mels(); ++m) {
      const double dm = double(m) - kappa;
      double value = std::exp(-dm * dm / (2.0 * cfg.bump_width * cfg.bump_width));
      if (opts.mel_noise) value += cfg.mel_noise_std * gauss(rng);
      out.mel(t, m) = float(value);
    }
    for (int m = 0; m < cfg.ssl_dim(); ++m) {
      double value = bank.patterns(v, m);
      if (opts.ssl_noise) value += cfg.ssl_noise_std * gauss(rng);
      out.ssl_features(t, m) = float(value);
    }
    const int band = std::clamp(int(std::lround(kappa)) - tb, 0, cfg.style_dim() - 1);
    out.style_features(t, band) = 1.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analytic readouts

/// Per-frame pitch from the centroid of the pitch band; nullopt when the
/// band carries no positive mass.
template <class Derived>
std::vector<std::optional<double>> ground_truth_pitch(const Eigen::MatrixBase<Derived>& mel,
                                                      const CorpusConfig& cfg = {}) {
  std::vector<std::optional<double>> out(std::size_t(mel.rows()));
  for (Eigen::Index t = 0; t < mel.rows(); ++t) {
    double num = 0.0, den = 0.0;
    for (int m = cfg.timbre_bins; m < cfg.n_mels(); ++m) {
      const double w = std::max(double(mel(t, m)), 0.0);
      num += double(m) * w;
      den += w;
    }
    if (den > 0.0) out[std::size_t(t)] = pitch_from_position(num / den, cfg);
  }
  return out;
}

/// Projects the time-averaged timbre band (minus the corpus content mean)
/// onto the sinusoid basis.
template <class Derived>
std::vector<double> ground_truth_timbre(const Eigen::MatrixBase<Derived>& mel, const std::vector<double>& content_mean,
                                        const CorpusConfig& cfg = {}) {
  if (mel.rows() < 1) throw std::invalid_argument("ground_truth_timbre: empty mel");
  if (static_cast<int>(content_mean.size()) != cfg.timbre_bins) {
    throw std::invalid_argument("ground_truth_timbre: content mean has wrong length");
  }
  std::vector<double> r(std::size_t(cfg.timbre_bins), 0.0);
  for (int m = 0; m < cfg.timbre_bins; ++m) {
    double acc = 0.0;
    for (Eigen::Index t = 0; t < mel.rows(); ++t) acc += double(mel(t, m));
    r[std::size_t(m)] = acc / double(mel.rows()) - content_mean[std::size_t(m)];
  }
  const double norm = 2.0 / (double(cfg.timbre_bins) * cfg.envelope_gain);
  std::vector<double> tau(std::size_t(cfg.n_timbre_params), 0.0);
  for (int j = 0; j < cfg.n_timbre_params; ++j) {
    double acc = 0.0;
    for (int m = 0; m < cfg.timbre_bins; ++m) acc += r[std::size_t(m)] * timbre_basis(j, m, cfg.timbre_bins);
    tau[std::size_t(j)] = norm * acc;
  }
  return tau;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: length mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusSpec {
  int n_speakers = 32;
  int n_styles = 5;
  int per_cell = 4;
  int min_units = 16;
  int max_units = 24;
  std::uint64_t seed = 1;
  bool mel_noise = true;
};

struct Corpus {
  CorpusConfig config;
  CorpusSpec spec;
  UnitBank bank;
  std::vector<SpeakerSpec> speakers;  // indexed by speaker_id
  std::vector<Utterance> utterances;

  const SpeakerSpec& speaker(int id) const {
    if (id < 0 || id >= int(speakers.size())) throw std::out_of_range("unknown speaker id");
    return speakers[std::size_t(id)];
  }
};

inline std::string make_utt_id(int speaker, StyleClass style, int index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "spk%03d_%s_%02d", speaker, std::string(to_string(style)).c_str(), index);
  return buf;
}

/// Deterministic corpus: every speaker reads per_cell utterances in each of
/// the first n_styles contour classes. Each utterance draws its own rate.
inline Corpus generate_corpus(const CorpusSpec& spec, const CorpusConfig& cfg = {}) {
  if (spec.n_speakers < 1) throw std::invalid_argument("corpus needs at least one speaker");
  if (spec.n_styles < 1 || spec.n_styles > int(kAllStyles.size())) throw std::invalid_argument("n_styles out of range");
  if (spec.per_cell < 1) throw std::invalid_argument("per_cell must be positive");
  if (spec.min_units < 1 || spec.max_units < spec.min_units) throw std::invalid_argument("invalid unit count range");
  Corpus corpus;
  corpus.config = cfg;
  corpus.spec = spec;
  corpus.bank = make_unit_bank(spec.seed, cfg);
  for (int s = 0; s < spec.n_speakers; ++s) {
    corpus.speakers.push_back(make_speaker(mix_seed(spec.seed, 0x5000 + std::uint64_t(s)), s, cfg));
  }
  for (int s = 0; s < spec.n_speakers; ++s) {
    for (int c = 0; c < spec.n_styles; ++c) {
      for (int k = 0; k < spec.per_cell; ++k) {
        const std::uint64_t utt_seed = mix_seed(spec.seed, (std::uint64_t(s) << 32) | (std::uint64_t(c) << 16) | std::uint64_t(k));
        std::mt19937_64 rng(utt_seed);
        std::uniform_int_distribution<int> n_units(spec.min_units, spec.max_units);
        std::uniform_int_distribution<int> rate_pick(0, int(kRates.size()) - 1);
        const StyleClass style_class = kAllStyles[std::size_t(c)];
        const double rate = kRates[std::size_t(rate_pick(rng))];
        const auto units = random_units(corpus.bank, n_units(rng), rng);
        RenderOptions opts;
        opts.mel_noise = spec.mel_noise;
        opts.seed = mix_seed(utt_seed, 0xA11);
        Utterance u = render_utterance(corpus.speakers[std::size_t(s)], make_style(style_class, rate), units,
                                       corpus.bank, opts, cfg);
        u.utt_id = make_utt_id(s, style_class, k);
        corpus.utterances.push_back(std::move(u));
      }
    }
  }
  return corpus;
}

/// Mean of the timbre band after removing each utterance's speaker
/// envelope, over all frames of the given utterances.
inline std::vector<double> content_mean(const std::vector<const Utterance*>& utts, const CorpusConfig& cfg = {}) {
  std::vector<double> mean(std::size_t(cfg.timbre_bins), 0.0);
  double n = 0.0;
  for (const Utterance* u : utts) {
    const auto env = envelope_from_tau(u->speaker_embedding, cfg);
    for (Eigen::Index t = 0; t < u->frames(); ++t) {
      for (int m = 0; m < cfg.timbre_bins; ++m) mean[std::size_t(m)] += double(u->mel(t, m)) - env[std::size_t(m)];
    }
    n += double(u->frames());
  }
  if (n == 0.0) throw std::invalid_argument("content_mean: no frames");
  for (auto& v : mean) v /= n;
  return mean;
}

inline std::vector<double> content_mean(const Corpus& corpus) {
  std::vector<const Utterance*> all;
  for (const auto& u : corpus.utterances) all.push_back(&u);
  return content_mean(all, corpus.config);
}

}  // namespace stablevc::synth
