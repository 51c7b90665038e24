#pragma once

// Command-line front end: synth | fit | train | convert | eval | bench.
//
// Settings come from flags, then from the `--config` file, then from
// defaults. The config file is `key = value` lines with `#` comments; keys
// of a subcommand live under a `[subcommand]` header, global keys (`seed`)
// above the first header. Unknown keys are rejected.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.

#include <CLI11.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stablevc/checkpoint.hpp"
#include "stablevc/contenttok.hpp"
#include "stablevc/evaluate.hpp"
#include "stablevc/io.hpp"
#include "stablevc/synth.hpp"
#include "stablevc/train.hpp"

namespace stablevc::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4 };

/// Invalid combination of otherwise well-formed settings.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or inconsistent input data (ids, files, corpora).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthOptions {
  fs::path out;
  int speakers = 32;
  int styles = 5;
  int per_cell = 4;
  int min_units = 16;
  int max_units = 24;
};

struct FitOptions {
  fs::path corpus;
  fs::path out;
  int k = 64;
  int train_speakers = 0;  // speakers [0, n) are used; 0 means all
};

struct TrainOptions {
  fs::path corpus;
  fs::path out;
  fs::path codebook;  // empty: fit one on the training speakers
  fs::path loss_csv;  // empty: <out>.loss.csv
  int k = 64;
  int train_speakers = 0;
  int iters = 1000;
  double lr = kDefaultLearningRate;
  double lambda_grl = kDefaultLambdaGrl;
  double sigma_min = cfm::kSigmaMin;
  int batch = 4;
  int warmup = 0;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int checkpoint_every = 0;
  int width = 64;
  int heads = 4;
  int content_blocks = 2;
  int flow_blocks = 4;
  int log_every = 100;
};

struct ConvertCliOptions {
  fs::path checkpoint;
  fs::path corpus;
  fs::path out;
  std::string source;
  int timbre_speaker = -1;
  std::string style_ref;
  int refs = 2;
  int steps = cfm::kDefaultEulerSteps;
  double guidance = cfm::kDefaultGuidanceScale;
};

struct EvalOptions {
  fs::path checkpoint;
  fs::path corpus;
  fs::path out;
  int held_out_from = -1;  // -1: the last eight speakers
  int trials = 100;
  int steps = cfm::kDefaultEulerSteps;
  double guidance = cfm::kDefaultGuidanceScale;
  std::vector<int> grid;  // empty: eval::kBenchSteps
};

// ---------------------------------------------------------------------------
// Helpers

inline synth::Corpus open_corpus(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.jsonl")) throw DataError("no corpus at " + dir.string());
  return io::load_corpus(dir);
}

inline std::vector<const synth::Utterance*> speakers_below(const synth::Corpus& corpus, int n) {
  std::vector<const synth::Utterance*> out;
  for (const auto& u : corpus.utterances) {
    if (n <= 0 || u.speaker_id < n) out.push_back(&u);
  }
  if (out.empty()) throw DataError("no utterances from the selected training speakers");
  return out;
}

inline content::Codebook fit_codebook(const std::vector<const synth::Utterance*>& utts, int k, std::uint64_t seed) {
  Eigen::Index total = 0;
  for (const auto* u : utts) total += u->frames();
  Matrix<float> feats(total, utts.front()->ssl_features.cols());
  Eigen::Index r = 0;
  for (const auto* u : utts) {
    feats.middleRows(r, u->frames()) = u->ssl_features;
    r += u->frames();
  }
  return content::fit_kmeans(feats, k, seed);
}

inline const synth::Utterance& find_utterance(const synth::Corpus& corpus, const std::string& id) {
  for (const auto& u : corpus.utterances) {
    if (u.utt_id == id) return u;
  }
  throw DataError("unknown utterance id " + id);
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  io::write_file(path, j.dump(2) + "\n");
}

inline std::vector<int> held_out_speakers(const synth::Corpus& corpus, int from) {
  const int n = int(corpus.speakers.size());
  if (from < 0) from = std::max(0, n - 8);
  std::vector<int> out;
  for (int s = from; s < n; ++s) out.push_back(s);
  if (out.size() < 2) throw DataError("need at least two held-out speakers");
  return out;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_synth(const SynthOptions& o, std::uint64_t seed, std::ostream& out) {
  if (o.min_units > o.max_units) throw UsageError("--min-units exceeds --max-units");
  synth::CorpusSpec spec;
  spec.n_speakers = o.speakers;
  spec.n_styles = o.styles;
  spec.per_cell = o.per_cell;
  spec.min_units = o.min_units;
  spec.max_units = o.max_units;
  spec.seed = seed;
  const synth::Corpus corpus = synth::generate_corpus(spec);
  io::save_corpus(corpus, o.out);
  Eigen::Index frames = 0;
  for (const auto& u : corpus.utterances) frames += u.frames();
  out << nlohmann::json{{"utterances", corpus.utterances.size()}, {"speakers", o.speakers}, {"styles", o.styles},
                        {"per_cell", o.per_cell}, {"frames", frames}, {"out", o.out.string()}}
             .dump()
      << "\n";
  return kOk;
}

inline int cmd_fit(const FitOptions& o, std::uint64_t seed, std::ostream& out) {
  const synth::Corpus corpus = open_corpus(o.corpus);
  const auto utts = speakers_below(corpus, o.train_speakers);
  const content::Codebook cb = fit_codebook(utts, o.k, seed);
  io::write_melb(o.out, cb.centroids);
  out << nlohmann::json{{"k", cb.k()}, {"dim", cb.dim()}, {"utterances", utts.size()}, {"out", o.out.string()}}.dump()
      << "\n";
  return kOk;
}

inline int cmd_train(const TrainOptions& o, std::uint64_t seed, std::ostream& out) {
  const synth::Corpus corpus = open_corpus(o.corpus);
  const auto utts = speakers_below(corpus, o.train_speakers);
  content::Codebook cb;
  if (o.codebook.empty()) {
    cb = fit_codebook(utts, o.k, seed);
  } else {
    cb.centroids = io::read_melb(o.codebook);
  }

  ModelConfig mc;
  mc.width = o.width;
  mc.heads = o.heads;
  mc.content_blocks = o.content_blocks;
  mc.flow_blocks = o.flow_blocks;
  int n_speakers = 0;
  for (const auto* u : utts) n_speakers = std::max(n_speakers, u->speaker_id + 1);
  mc.n_speakers = n_speakers;
  if (o.width % o.heads != 0) throw UsageError("--width must be a multiple of --heads");
  StableVcModel<float> model(mc, cb, seed);

  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.lambda_grl = o.lambda_grl;
  tc.sigma_min = o.sigma_min;
  tc.batch_size = o.batch;
  tc.iterations = o.iters;
  tc.warmup = o.warmup;
  tc.weight_decay = o.weight_decay;
  tc.grad_clip = o.grad_clip;
  tc.seed = seed;
  tc.checkpoint_every = o.checkpoint_every;
  tc.checkpoint_path = o.out;
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const fs::path csv_path = o.loss_csv.empty() ? fs::path(o.out.string() + ".loss.csv") : o.loss_csv;
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw DataError("cannot write " + csv_path.string());
  csv << "iteration,cfm,duration,grl,total\n";
  char line[160];
  const auto result = train(model, utts, tc, [&](int it, const LossComponents& l) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", it, l.cfm, l.duration, l.grl, l.total);
    csv << line;
    if (o.log_every > 0 && (it + 1) % o.log_every == 0) out << "iter " << it + 1 << " " << line + std::strcspn(line, ",") + 1;
  });
  csv.close();
  checkpoint::save(model, o.out);
  nlohmann::json summary{{"iterations", result.history.size()},
                         {"parameters", model.parameter_count()},
                         {"checkpoint", o.out.string()},
                         {"loss_csv", csv_path.string()}};
  if (!result.history.empty()) summary["final_total"] = result.history.back().total;
  out << summary.dump() << "\n";
  return kOk;
}

inline int cmd_convert(const ConvertCliOptions& o, std::uint64_t seed, std::ostream& out) {
  auto model = checkpoint::load(o.checkpoint);
  const synth::Corpus corpus = open_corpus(o.corpus);
  const synth::Utterance& source = find_utterance(corpus, o.source);
  const synth::Utterance& style = find_utterance(corpus, o.style_ref);
  if (o.timbre_speaker < 0 || o.timbre_speaker >= int(corpus.speakers.size())) {
    throw DataError("unknown speaker id " + std::to_string(o.timbre_speaker));
  }
  std::vector<const synth::Utterance*> refs;
  for (const auto& u : corpus.utterances) {
    if (u.speaker_id == o.timbre_speaker && &u != &source && int(refs.size()) < o.refs) refs.push_back(&u);
  }
  if (refs.empty()) throw DataError("speaker " + std::to_string(o.timbre_speaker) + " has no reference utterances");

  StableVcModel<float>::ConvertOptions co;
  co.n_steps = o.steps;
  co.guidance = o.guidance;
  co.seed = seed;
  const ConversionResult r = model.convert(source, refs, style, co);
  io::write_melb(o.out, r.mel);

  const auto mean = synth::content_mean(corpus);
  nlohmann::json readout{
      {"timbre_cosine_target", eval::timbre_similarity(r.mel, corpus.speaker(o.timbre_speaker), mean).cosine},
      {"timbre_cosine_source", eval::timbre_similarity(r.mel, corpus.speaker(source.speaker_id), mean).cosine}};
  const auto a = eval::voiced(synth::ground_truth_pitch(r.mel));
  const auto b = eval::voiced(synth::ground_truth_pitch(style.mel));
  if (!a.empty() && !b.empty()) {
    const auto pm = eval::pitch_metrics(a, b);
    readout["pitch_rmse_hz"] = pm.rmse;
    readout["pitch_corr"] = pm.pearson ? nlohmann::json(*pm.pearson) : nlohmann::json(nullptr);
  }
  std::vector<std::string> ref_ids;
  for (const auto* u : refs) ref_ids.push_back(u->utt_id);
  const nlohmann::json sidecar{{"source", o.source},       {"timbre_speaker", o.timbre_speaker},
                               {"timbre_refs", ref_ids},   {"style_ref", o.style_ref},
                               {"steps", o.steps},         {"guidance", o.guidance},
                               {"seed", seed},             {"frames", r.mel.rows()},
                               {"n_mels", r.mel.cols()},   {"durations", r.durations},
                               {"log_durations", r.log_durations}, {"readout", readout}};
  fs::path side = o.out;
  side.replace_extension(".json");
  write_json(side, sidecar);
  out << sidecar.dump() << "\n";
  return kOk;
}

inline int cmd_eval(const EvalOptions& o, std::uint64_t seed, std::ostream& out) {
  auto model = checkpoint::load(o.checkpoint);
  const synth::Corpus corpus = open_corpus(o.corpus);
  const auto trials = eval::make_trials(corpus, held_out_speakers(corpus, o.held_out_from), o.trials, seed);
  const auto summary = eval::evaluate_grid(model, corpus, trials, o.steps, o.guidance).to_json();
  if (!o.out.empty()) write_json(o.out, summary);
  out << summary.dump() << "\n";
  return kOk;
}

inline int cmd_bench(const EvalOptions& o, std::uint64_t seed, std::ostream& out) {
  auto model = checkpoint::load(o.checkpoint);
  const synth::Corpus corpus = open_corpus(o.corpus);
  const auto trials = eval::make_trials(corpus, held_out_speakers(corpus, o.held_out_from), o.trials, seed);
  const auto table = eval::bench_steps(model, corpus, trials, o.grid.empty() ? eval::kBenchSteps : o.grid);
  if (!o.out.empty()) write_json(o.out, table.to_json());
  out << table.to_text();
  return kOk;
}

// ---------------------------------------------------------------------------
// Parsing

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Voice conversion on a synthetic corpus: data, training, conversion and evaluation."};
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "Settings file: `key = value`, `#` comments, `[subcommand]` sections");
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Random seed")->capture_default_str();

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth->add_option("--out", so.out, "Output directory")->required();
  synth->add_option("--speakers", so.speakers, "Number of speakers")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--styles", so.styles, "Number of style classes")->check(CLI::Range(1, 5))->capture_default_str();
  synth->add_option("--per-cell", so.per_cell, "Utterances per speaker and style")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  synth->add_option("--min-units", so.min_units, "Fewest units per utterance")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--max-units", so.max_units, "Most units per utterance")->check(CLI::PositiveNumber)->capture_default_str();

  FitOptions fo;
  auto* fit = app.add_subcommand("fit", "Fit the content codebook");
  fit->add_option("--corpus", fo.corpus, "Corpus directory")->required();
  fit->add_option("--out", fo.out, "Codebook MELB file")->required();
  fit->add_option("--k", fo.k, "Codebook size")->check(CLI::PositiveNumber)->capture_default_str();
  fit->add_option("--train-speakers", fo.train_speakers, "Use speakers [0, n); 0 for all")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();

  TrainOptions to;
  auto* trn = app.add_subcommand("train", "Train a model and write a checkpoint");
  trn->add_option("--corpus", to.corpus, "Corpus directory")->required();
  trn->add_option("--out", to.out, "Checkpoint file")->required();
  trn->add_option("--codebook", to.codebook, "Codebook MELB file; fitted when absent");
  trn->add_option("--loss-csv", to.loss_csv, "Loss history CSV (default <out>.loss.csv)");
  trn->add_option("--k", to.k, "Codebook size when fitting")->check(CLI::PositiveNumber)->capture_default_str();
  trn->add_option("--train-speakers", to.train_speakers, "Use speakers [0, n); 0 for all")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  trn->add_option("--iters", to.iters, "Training iterations")->check(CLI::NonNegativeNumber)->capture_default_str();
  trn->add_option("--lr", to.lr, "Learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  trn->add_option("--lambda-grl", to.lambda_grl, "Adversarial loss weight")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  trn->add_option("--sigma-min", to.sigma_min, "Flow path end width")->check(CLI::Range(0.0, 0.999))->capture_default_str();
  trn->add_option("--batch", to.batch, "Utterances per step")->check(CLI::PositiveNumber)->capture_default_str();
  trn->add_option("--warmup", to.warmup, "Linear warmup steps")->check(CLI::NonNegativeNumber)->capture_default_str();
  trn->add_option("--weight-decay", to.weight_decay, "Decoupled weight decay")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  trn->add_option("--grad-clip", to.grad_clip, "Global gradient norm limit; 0 disables")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  trn->add_option("--checkpoint-every", to.checkpoint_every, "Periodic checkpoint interval; 0 disables")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  trn->add_option("--width", to.width, "Model width")->check(CLI::PositiveNumber)->capture_default_str();
  trn->add_option("--heads", to.heads, "Attention heads")->check(CLI::PositiveNumber)->capture_default_str();
  trn->add_option("--content-blocks", to.content_blocks, "Content encoder blocks")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  trn->add_option("--flow-blocks", to.flow_blocks, "Flow blocks")->check(CLI::PositiveNumber)->capture_default_str();
  trn->add_option("--log-every", to.log_every, "Progress line interval; 0 silences")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();

  ConvertCliOptions co;
  auto* conv = app.add_subcommand("convert", "Convert one utterance");
  conv->add_option("--checkpoint", co.checkpoint, "Checkpoint file")->required();
  conv->add_option("--corpus", co.corpus, "Corpus directory")->required();
  conv->add_option("--source", co.source, "Source utterance id")->required();
  conv->add_option("--timbre-speaker", co.timbre_speaker, "Target speaker id")->required();
  conv->add_option("--style-ref", co.style_ref, "Style reference utterance id")->required();
  conv->add_option("--out", co.out, "Output MELB file; a .json sidecar is written next to it")->required();
  conv->add_option("--refs", co.refs, "Timbre reference utterances")->check(CLI::PositiveNumber)->capture_default_str();
  conv->add_option("--steps", co.steps, "Euler steps")->check(CLI::PositiveNumber)->capture_default_str();
  conv->add_option("--guidance", co.guidance, "Guidance scale")->capture_default_str();

  EvalOptions eo, bo;
  bo.trials = 20;
  auto add_eval_options = [](CLI::App* sub, EvalOptions& o) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
    sub->add_option("--corpus", o.corpus, "Corpus directory")->required();
    sub->add_option("--out", o.out, "JSON output file");
    sub->add_option("--held-out-from", o.held_out_from, "First held-out speaker id (default: last eight)");
    sub->add_option("--trials", o.trials, "Conversion trials")->check(CLI::PositiveNumber)->capture_default_str();
  };
  auto* ev = app.add_subcommand("eval", "Held-out conversion grid");
  add_eval_options(ev, eo);
  ev->add_option("--steps", eo.steps, "Euler steps")->check(CLI::PositiveNumber)->capture_default_str();
  ev->add_option("--guidance", eo.guidance, "Guidance scale")->capture_default_str();
  auto* bench = app.add_subcommand("bench", "Sampler step ablation");
  add_eval_options(bench, bo);
  bench->add_option("--grid", bo.grid, "Comma-separated step counts (default 1,2,5,10,20)")
      ->delimiter(',')
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  try {
    if (synth->parsed()) return cmd_synth(so, seed, out);
    if (fit->parsed()) return cmd_fit(fo, seed, out);
    if (trn->parsed()) return cmd_train(to, seed, out);
    if (conv->parsed()) return cmd_convert(co, seed, out);
    if (ev->parsed()) return cmd_eval(eo, seed, out);
    if (bench->parsed()) return cmd_bench(bo, seed, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalAbort& e) {
    err << "numerical abort: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace stablevc::cli
