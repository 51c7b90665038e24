#pragma once

// Held-out conversion grid and sampler step benchmark on a trained model.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stablevc/evalkit.hpp"
#include "stablevc/model.hpp"
#include "stablevc/synth.hpp"

namespace stablevc::eval {

inline const std::vector<int> kBenchSteps{1, 2, 5, 10, 20};

/// One held-out conversion: content from `source`, timbre from `timbre_refs`
/// (one target speaker), style from `style_ref`; `alt_style_ref` is a second
/// style reference of a different contour class for the swap test.
struct ConversionTrial {
  const synth::Utterance* source = nullptr;
  std::vector<const synth::Utterance*> timbre_refs;
  const synth::Utterance* style_ref = nullptr;
  const synth::Utterance* alt_style_ref = nullptr;
  std::uint64_t seed = 0;
};

/// Samples `n` trials over the given speakers. Sources and targets are
/// distinct speakers; style references never use the flat contour, whose
/// pitch correlation is undefined.
inline std::vector<ConversionTrial> make_trials(const synth::Corpus& corpus, const std::vector<int>& speakers, int n,
                                                std::uint64_t seed, int n_timbre_refs = 2) {
  if (speakers.size() < 2) throw std::invalid_argument("make_trials: need at least two speakers");
  std::map<int, std::vector<const synth::Utterance*>> by_speaker;
  std::vector<const synth::Utterance*> styled;
  for (const auto& u : corpus.utterances) {
    if (std::find(speakers.begin(), speakers.end(), u.speaker_id) == speakers.end()) continue;
    by_speaker[u.speaker_id].push_back(&u);
    if (u.style_class != synth::StyleClass::flat) styled.push_back(&u);
  }
  if (styled.empty()) throw std::invalid_argument("make_trials: no non-flat style references");
  std::mt19937_64 rng(seed);
  auto any = [&](const std::vector<const synth::Utterance*>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  std::vector<ConversionTrial> trials;
  for (int i = 0; i < n; ++i) {
    ConversionTrial tr;
    const int src_spk = speakers[std::uniform_int_distribution<std::size_t>(0, speakers.size() - 1)(rng)];
    int tgt_spk = src_spk;
    while (tgt_spk == src_spk) tgt_spk = speakers[std::uniform_int_distribution<std::size_t>(0, speakers.size() - 1)(rng)];
    tr.source = any(by_speaker.at(src_spk));
    tr.style_ref = any(styled);
    do {
      tr.alt_style_ref = any(styled);
    } while (tr.alt_style_ref->style_class == tr.style_ref->style_class);
    std::vector<const synth::Utterance*> pool = by_speaker.at(tgt_spk);
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int k = 0; k < n_timbre_refs && k < int(pool.size()); ++k) tr.timbre_refs.push_back(pool[std::size_t(k)]);
    tr.seed = rng();
    trials.push_back(std::move(tr));
  }
  return trials;
}

inline std::optional<double> pitch_correlation(const Matrix<float>& mel, const synth::Utterance& ref) {
  const auto a = voiced(synth::ground_truth_pitch(mel));
  const auto b = voiced(synth::ground_truth_pitch(ref.mel));
  if (a.empty() || b.empty()) return std::nullopt;
  return pitch_metrics(a, b).pearson;
}

struct TrialResult {
  double cos_target = 0.0;
  double cos_source = 0.0;
  std::optional<double> corr_style;      // output vs style_ref
  double cos_target_swapped = 0.0;       // after swapping to alt_style_ref
  std::optional<double> corr_swap_new;   // swapped output vs alt_style_ref
  std::optional<double> corr_swap_old;   // swapped output vs style_ref
  double pitch_rmse = 0.0;
  Eigen::Index frames = 0;
};

struct GridSummary {
  std::vector<TrialResult> trials;
  double timbre_win_rate = 0.0;          // share with cos_target > cos_source
  double median_style_corr = 0.0;        // over trials where defined
  double swap_follow_rate = 0.0;         // share with corr_new > corr_old
  double mean_timbre_drop = 0.0;         // mean(cos_target - cos_target_swapped)
  double mean_cos_target = 0.0;
  double median_pitch_rmse = 0.0;

  nlohmann::json to_json() const {
    return nlohmann::json{{"trials", trials.size()},
                          {"timbre_win_rate", timbre_win_rate},
                          {"median_style_corr", median_style_corr},
                          {"swap_follow_rate", swap_follow_rate},
                          {"mean_timbre_drop", mean_timbre_drop},
                          {"mean_cos_target", mean_cos_target},
                          {"median_pitch_rmse_hz", median_pitch_rmse}};
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class T>
GridSummary evaluate_grid(StableVcModel<T>& model, const synth::Corpus& corpus, const std::vector<ConversionTrial>& trials,
                          int n_steps = cfm::kDefaultEulerSteps, double guidance = cfm::kDefaultGuidanceScale,
                          bool with_swap = true) {
  const auto mean = synth::content_mean(corpus);
  GridSummary s;
  std::vector<double> corrs, rmses;
  int wins = 0, follows = 0, swaps = 0;
  for (const auto& tr : trials) {
    typename StableVcModel<T>::ConvertOptions opt;
    opt.n_steps = n_steps;
    opt.guidance = guidance;
    opt.seed = tr.seed;
    const auto out = model.convert(*tr.source, tr.timbre_refs, *tr.style_ref, opt);
    TrialResult r;
    r.frames = out.mel.rows();
    const int target = tr.timbre_refs.front()->speaker_id;
    r.cos_target = timbre_similarity(out.mel, corpus.speaker(target), mean).cosine;
    r.cos_source = timbre_similarity(out.mel, corpus.speaker(tr.source->speaker_id), mean).cosine;
    wins += r.cos_target > r.cos_source;
    r.corr_style = pitch_correlation(out.mel, *tr.style_ref);
    if (r.corr_style) corrs.push_back(*r.corr_style);
    {
      const auto a = voiced(synth::ground_truth_pitch(out.mel));
      const auto b = voiced(synth::ground_truth_pitch(tr.style_ref->mel));
      if (!a.empty() && !b.empty()) rmses.push_back(r.pitch_rmse = pitch_metrics(a, b).rmse);
    }
    if (with_swap && tr.alt_style_ref != nullptr) {
      const auto swapped = model.convert(*tr.source, tr.timbre_refs, *tr.alt_style_ref, opt);
      r.cos_target_swapped = timbre_similarity(swapped.mel, corpus.speaker(target), mean).cosine;
      r.corr_swap_new = pitch_correlation(swapped.mel, *tr.alt_style_ref);
      r.corr_swap_old = pitch_correlation(swapped.mel, *tr.style_ref);
      ++swaps;
      follows += r.corr_swap_new && r.corr_swap_old && *r.corr_swap_new > *r.corr_swap_old;
      s.mean_timbre_drop += r.cos_target - r.cos_target_swapped;
    }
    s.mean_cos_target += r.cos_target;
    s.trials.push_back(r);
  }
  const double n = double(std::max<std::size_t>(trials.size(), 1));
  s.timbre_win_rate = wins / n;
  s.median_style_corr = median(corrs);
  s.median_pitch_rmse = median(rmses);
  s.mean_cos_target /= n;
  if (swaps > 0) {
    s.swap_follow_rate = double(follows) / swaps;
    s.mean_timbre_drop /= swaps;
  }
  return s;
}

/// Held-out reconstruction error: the utterance is regenerated from its own
/// content, style and speaker with teacher durations, and compared to its
/// mel frame by frame.
template <class T>
double proxy_loss(StableVcModel<T>& model, const synth::Utterance& utt, const std::vector<const synth::Utterance*>& refs,
                  int n_steps, std::uint64_t seed) {
  typename StableVcModel<T>::ConvertOptions opt;
  opt.n_steps = n_steps;
  opt.seed = seed;
  opt.durations = model.prepare(utt).durations;
  const auto out = model.convert(utt, refs, utt, opt);
  return double((out.mel - utt.mel).squaredNorm()) / double(utt.mel.size());
}

struct BenchRow {
  int steps = 0;
  double proxy_loss = 0.0;
  double timbre_cosine = 0.0;
  double seconds_per_frame = 0.0;
};

struct BenchTable {
  std::vector<BenchRow> rows;

  std::string to_text() const {
    std::string out = "steps\tproxy_loss\ttimbre_cosine\twall_s_per_frame\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%d\t%.6f\t%.6f\t%.6e\n", r.steps, r.proxy_loss, r.timbre_cosine,
                    r.seconds_per_frame);
      out += buf;
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) {
      rows_json.push_back({{"steps", r.steps},
                           {"proxy_loss", r.proxy_loss},
                           {"timbre_cosine", r.timbre_cosine},
                           {"wall_seconds_per_frame", r.seconds_per_frame}});
    }
    return nlohmann::json{{"rows", rows_json}};
  }
};

/// For each step count: mean proxy loss over the trial sources, mean timbre
/// cosine and mean wall time per generated frame over the conversions.
template <class T>
BenchTable bench_steps(StableVcModel<T>& model, const synth::Corpus& corpus, const std::vector<ConversionTrial>& trials,
                       const std::vector<int>& step_list = kBenchSteps) {
  const auto mean = synth::content_mean(corpus);
  std::map<int, std::vector<const synth::Utterance*>> by_speaker;
  for (const auto& u : corpus.utterances) by_speaker[u.speaker_id].push_back(&u);
  BenchTable table;
  for (int n : step_list) {
    if (n < 1) throw std::invalid_argument("bench_steps: step counts must be >= 1");
    BenchRow row;
    row.steps = n;
    double seconds = 0.0;
    Eigen::Index frames = 0;
    for (const auto& tr : trials) {
      typename StableVcModel<T>::ConvertOptions opt;
      opt.n_steps = n;
      opt.seed = tr.seed;
      const auto start = std::chrono::steady_clock::now();
      const auto out = model.convert(*tr.source, tr.timbre_refs, *tr.style_ref, opt);
      seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      frames += out.mel.rows();
      row.timbre_cosine += timbre_similarity(out.mel, corpus.speaker(tr.timbre_refs.front()->speaker_id), mean).cosine;

      std::vector<const synth::Utterance*> refs;
      for (const auto* u : by_speaker.at(tr.source->speaker_id)) {
        if (u != tr.source && refs.size() < 2) refs.push_back(u);
      }
      if (refs.empty()) refs.push_back(tr.source);
      row.proxy_loss += proxy_loss(model, *tr.source, refs, n, tr.seed);
    }
    const double k = double(std::max<std::size_t>(trials.size(), 1));
    row.timbre_cosine /= k;
    row.proxy_loss /= k;
    row.seconds_per_frame = frames > 0 ? seconds / double(frames) : 0.0;
    table.rows.push_back(row);
  }
  return table;
}

}  // namespace stablevc::eval
