// Acceptance run: one PASS/FAIL line per criterion, each judged at its stated
// tolerance and wall-time budget. Exit status is nonzero when any fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "model_fixture.hpp"
#include "stablevc/cfm.hpp"
#include "stablevc/checkpoint.hpp"
#include "stablevc/contenttok.hpp"
#include "stablevc/dualagc.hpp"
#include "stablevc/durmod.hpp"
#include "stablevc/evaluate.hpp"
#include "stablevc/evalkit.hpp"
#include "stablevc/styleenc.hpp"
#include "stablevc/train.hpp"
#include "test_util.hpp"

namespace stablevc::acceptance {
namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

// ---------------------------------------------------------------------------
// 1. Flow-matching exactness

void flow_matching_exactness(Verdict& v) {
  std::mt19937_64 rng(1);
  const double s = cfm::kSigmaMin;
  v.require(s == 1e-4, "sigma_min is 1e-4");
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix<double> x0 = testing::random_matrix(9, 7, rng), x1 = testing::random_matrix(9, 7, rng, 2.0);
    v.require(cfm::sample_path(x0, x1, 0.0, s) == x0, "t=0 endpoint is x0 exactly");
    const Matrix<double> residual = cfm::sample_path(x0, x1, 1.0, s) - x1;
    worst = std::max(worst, std::abs(residual.norm() - s * x0.norm()));
    const Matrix<double> u = cfm::cfm_target(x0, x1, s);
    for (double t1 : {0.0, 0.2, 0.5}) {
      const double t2 = t1 + 0.37;
      const Matrix<double> fd = (cfm::sample_path(x0, x1, t2, s) - cfm::sample_path(x0, x1, t1, s)) / (t2 - t1);
      worst = std::max(worst, (fd - u).cwiseAbs().maxCoeff());
    }
    const auto batch = cfm::make_flow_batch<double, int>(x0, x1, 0.3, nullptr, s);
    const double cheat = cfm::cfm_loss([&](const Matrix<double>&, double, const int*) { return batch.target_u; }, batch);
    v.require(cheat == 0.0, "cheating field has zero loss");
    const Matrix<double> c = testing::random_matrix(9, 7, rng);
    for (int n : {1, 3, 10, 20}) {
      const Matrix<double> end =
          cfm::euler_integrate<double, int>([&](const Matrix<double>&, double, const int*) { return c; }, nullptr, x0, n);
      worst = std::max(worst, (end - (x0 + c)).cwiseAbs().maxCoeff());
    }
  }
  v.require(worst <= 1e-6, "all residuals <= 1e-6");
  v.detail << "max residual " << worst;
}

// ---------------------------------------------------------------------------
// 2. Gradient oracle

void gradient_oracle(Verdict& v) {
  const testing::SmallWorld world;
  const char* names[] = {"cfm", "duration", "grl"};
  int i = 0;
  for (auto term : {testing::LossTerm::cfm, testing::LossTerm::duration, testing::LossTerm::grl}) {
    const double err = testing::loss_term_gradcheck(world, term);
    v.require(err < 1e-4, std::string(names[i]) + " relative error < 1e-4");
    v.detail << names[i] << " " << err << "  ";
    ++i;
  }
}

// ---------------------------------------------------------------------------
// 3. Gaussian transport

struct ScalarField {
  nn::Linear<double> l1, l2, l3;

  explicit ScalarField(std::mt19937_64& rng) : l1(3, 64, rng), l2(64, 64, rng), l3(64, 1, rng) {}

  Var<double> operator()(Tape<double>& tape, const Matrix<double>& x, const Matrix<double>& t) {
    Matrix<double> in(x.rows(), 3);
    in.col(0) = x.col(0);
    in.col(1) = t.col(0);
    in.col(2) = (x.array() * t.array()).matrix().col(0);
    const Var<double> h1 = ad::silu(l1(tape, tape.constant(in)));
    return l3(tape, ad::silu(l2(tape, h1)));
  }

  std::vector<Parameter<double>*> parameters() {
    std::vector<Parameter<double>*> out;
    for (auto* l : {&l1, &l2, &l3}) {
      l->visit("", [&](const std::string&, Parameter<double>& p) { out.push_back(&p); });
    }
    return out;
  }
};

struct Moments {
  double mean = 0.0, var = 0.0;
};

Moments moments(const Matrix<double>& x) {
  Moments m;
  m.mean = x.mean();
  m.var = (x.array() - m.mean).square().mean();
  return m;
}

void gaussian_transport(Verdict& v) {
  constexpr double kMean = 3.0, kVar = 0.25, kSigma = cfm::kSigmaMin;
  std::mt19937_64 rng(5);
  ScalarField field(rng);
  TrainConfig tc;
  tc.weight_decay = 0.0;
  AdamW<double> opt(tc);
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unit;
  const int batch = 256, iters = 3000;
  for (int it = 0; it < iters; ++it) {
    Matrix<double> x0(batch, 1), x1(batch, 1), t(batch, 1);
    for (int i = 0; i < batch; ++i) {
      x0(i, 0) = gauss(rng);
      x1(i, 0) = kMean + std::sqrt(kVar) * gauss(rng);
      t(i, 0) = unit(rng);
    }
    const Matrix<double> xt = ((1.0 - (1.0 - kSigma) * t.array()) * x0.array() + t.array() * x1.array()).matrix();
    const Matrix<double> u = x1 - (1.0 - kSigma) * x0;
    for (auto* p : field.parameters()) p->zero_grad();
    Tape<double> tape;
    tape.backward(ad::mse(field(tape, xt, t), u));
    const double lr = it < 2000 ? 3e-3 : 1e-3;
    opt.step(field.parameters(), lr);
  }

  // Sample 10,000 points with 10 Euler steps through the learned field and
  // through the closed-form marginal field.
  const int n = 10000, steps = 10;
  Matrix<double> learned(n, 1), exact(n, 1);
  for (int i = 0; i < n; ++i) learned(i, 0) = exact(i, 0) = gauss(rng);
  double field_gap = 0.0;
  for (int k = 0; k < steps; ++k) {
    const double tk = double(k) / steps;
    Tape<double> tape(false);
    const Matrix<double> vl = field(tape, learned, Matrix<double>::Constant(n, 1, tk)).value();
    double gap = 0.0;
    for (int i = 0; i < n; ++i) {
      const double ve = cfm::gaussian_marginal_field(exact(i, 0), tk, kMean, kVar, kSigma);
      const double ve_here = cfm::gaussian_marginal_field(learned(i, 0), tk, kMean, kVar, kSigma);
      gap += (vl(i, 0) - ve_here) * (vl(i, 0) - ve_here);
      exact(i, 0) += ve / steps;
    }
    field_gap = std::max(field_gap, std::sqrt(gap / n));
    learned += vl / steps;
  }
  const Moments ml = moments(learned), me = moments(exact);
  v.require(std::abs(ml.mean - kMean) < 0.1, "|mean - 3| < 0.1");
  v.require(std::abs(ml.var - kVar) < 0.05, "|var - 0.25| < 0.05");
  // Diagnostics only: 10-step Euler through the exact marginal field also
  // contracts the variance (to about 0.186), so the sampler, not the fit,
  // sets the variance error.
  v.detail << "learned mean " << ml.mean << " var " << ml.var << "; closed-form mean " << me.mean << " var " << me.var
           << "; field RMS gap " << field_gap;
}

// ---------------------------------------------------------------------------
// 4. DualAGC properties

void dualagc_properties(Verdict& v) {
  const ModelConfig cfg;
  std::mt19937_64 rng(42);
  dit::DitBlock<float> block(cfg, rng);
  block.film_net.weight.value = testing::random_matrix(cfg.width, 2 * cfg.width, rng, 0.1).cast<float>();
  auto rnd = [&](Eigen::Index r, Eigen::Index c) { return Matrix<float>(testing::random_matrix(r, c, rng).cast<float>()); };
  const Matrix<float> c = rnd(17, cfg.width), te = rnd(1, cfg.width), style = rnd(5, cfg.width),
                      ref = rnd(31, cfg.n_mels), prior = rnd(1, cfg.width);
  auto run = [&](const Matrix<float>& s, const Matrix<float>& r, dit::AttentionTrace<float>* trace = nullptr) {
    Tape<float> tape(false);
    return Matrix<float>(block(tape, tape.constant(c), tape.constant(te), tape.constant(s),
                               dit::TimbreReference<float>{tape.constant(r), tape.constant(prior)}, trace)
                             .value());
  };

  const Matrix<float> base = run(style, ref);
  bool independent = true;
  for (int k = 0; k < 20; ++k) independent = independent && run(rnd(1 + k, cfg.width) * float(1 + k), ref) == base;
  v.require(independent, "gate-zero style independence is bit-exact");

  block.attention.alpha.value(0, 0) = 0.4f;
  const Matrix<float> gated = run(style, ref);
  double worst_perm = 0.0;
  std::vector<int> order(std::size_t(ref.rows()));
  for (int k = 0; k < 20; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Matrix<float> shuffled(ref.rows(), ref.cols());
    for (std::size_t i = 0; i < order.size(); ++i) shuffled.row(Eigen::Index(i)) = ref.row(order[i]);
    worst_perm = std::max(worst_perm, double((run(style, shuffled) - gated).norm() / gated.norm()));
  }
  v.require(worst_perm <= 1e-5, "timbre permutation invariance <= 1e-5 relative");

  dit::AttentionTrace<float> trace;
  run(style, ref, &trace);
  double worst_row = 0.0;
  for (const auto* group : {&trace.timbre, &trace.style}) {
    for (const auto& p : *group) {
      v.require(p.minCoeff() >= 0.0f, "attention weights nonnegative");
      worst_row = std::max(worst_row, double((p.rowwise().sum().array() - 1.0f).abs().maxCoeff()));
    }
  }
  v.require(worst_row <= 1e-6, "softmax rows sum to 1 within 1e-6");

  // Sign flip through the reversal layer, against central differences.
  ModelConfig small;
  small.width = 8;
  small.heads = 2;
  small.style_dim = 8;
  double worst_flip = 0.0;
  for (double scale : {1.0, 0.5, 2.0}) {
    small.reversal_scale = scale;
    std::mt19937_64 r2(11);
    style::StyleEncoder<double> enc(small, r2);
    style::GrlHead<double> head(small, r2);
    const Matrix<double> feats = testing::random_matrix(13, small.style_dim, r2);
    std::vector<Parameter<double>*> params;
    enc.visit("enc", [&](const std::string&, Parameter<double>& p) { params.push_back(&p); });
    auto loss = [&](bool with_grad) {
      Tape<double> tape(with_grad);
      auto l = style::grl_loss(tape, head, enc(tape, feats), 3, true);
      if (with_grad) tape.backward(l);
      return l.item();
    };
    worst_flip = std::max(worst_flip,
                          testing::gradcheck(params, loss, 1e-6, 1e-10, std::vector<double>(params.size(), -scale)));
  }
  v.require(worst_flip < 1e-4, "reversed gradient = -scale x finite differences (< 1e-4)");
  v.detail << "perm " << worst_perm << ", row sum " << worst_row << ", sign flip " << worst_flip;
}

// ---------------------------------------------------------------------------
// 5. Structure round-trips

void structure_round_trips(Verdict& v) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> len(1, 60), tok(0, 7);
  bool ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> seq(std::size_t(len(rng)));
    for (auto& t : seq) t = tok(rng);
    const auto d = content::dedup(seq);
    ok = ok && content::expand(d.ids, d.durations) == seq;
    for (std::size_t i = 1; i < d.ids.size(); ++i) ok = ok && d.ids[i] != d.ids[i - 1];
  }
  v.require(ok, "dedup/expand identity on 1000 sequences");

  bool conserved = true;
  for (int trial = 0; trial < 200; ++trial) {
    const int l = 1 + trial % 13;
    std::vector<int> dur(static_cast<std::size_t>(l));
    std::uniform_int_distribution<int> dd(1, 6);
    int total = 0;
    for (auto& x : dur) total += x = dd(rng);
    Tape<double> tape(false);
    const Matrix<double> h = testing::random_matrix(l, 5, rng);
    const Matrix<double> out = duration::regulate_length(tape.constant(h), dur).value();
    conserved = conserved && out.rows() == total;
    Eigen::Index r = 0;
    for (int i = 0; i < l; ++i) {
      for (int k = 0; k < dur[std::size_t(i)]; ++k) conserved = conserved && out.row(r++) == h.row(i);
    }
  }
  v.require(conserved, "length regulator conserves frames and rows");

  auto model = StableVcModel<float>(ModelConfig{}, content::Codebook{testing::random_matrix(64, 32, rng).cast<float>()}, 9);
  for (auto* p : model.parameters()) p->value += testing::random_matrix(p->value.rows(), p->value.cols(), rng, 0.01).cast<float>();
  const std::string bytes = checkpoint::serialize(model);
  auto loaded = checkpoint::deserialize<float>(bytes);
  bool same = checkpoint::serialize(loaded) == bytes && loaded.codebook.centroids == model.codebook.centroids;
  const auto a = model.parameters(), b = loaded.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i]->value == b[i]->value;
  v.require(same, "checkpoint save/load is bit-identical");
  v.detail << "1000 sequences, 200 regulations, " << bytes.size() << "-byte desk checkpoint";
}

// ---------------------------------------------------------------------------
// 6. DTW oracle

double brute_force_dtw(const std::vector<double>& a, const std::vector<double>& b) {
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
    acc += std::abs(a[i] - b[j]);
    if (i + 1 == a.size() && j + 1 == b.size()) {
      best = std::min(best, acc);
      return;
    }
    if (i + 1 < a.size() && j + 1 < b.size()) walk(i + 1, j + 1, acc);
    if (i + 1 < a.size()) walk(i + 1, j, acc);
    if (j + 1 < b.size()) walk(i, j + 1, acc);
  };
  walk(0, 0, 0.0);
  return best;
}

void dtw_oracle(Verdict& v) {
  std::mt19937_64 rng(20);
  std::normal_distribution<double> g(0.0, 3.0);
  int mismatches = 0, cases = 0;
  for (int n = 1; n <= 6; ++n) {
    for (int m = 1; m <= 6; ++m) {
      for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(m));
        for (auto& x : a) x = g(rng);
        for (auto& x : b) x = g(rng);
        mismatches += eval::dtw_align(a, b).cost != brute_force_dtw(a, b);
        ++cases;
      }
    }
  }
  v.require(mismatches == 0, "DP cost equals enumeration exactly");
  v.detail << cases << " pairs over all 36 grid shapes, " << mismatches << " mismatches";
}

// ---------------------------------------------------------------------------
// 7 and 8. Desk model

struct DeskRun {
  synth::Corpus corpus;
  std::optional<StableVcModel<float>> model;
  double train_seconds = 0.0;
  std::vector<eval::ConversionTrial> trials;
};

constexpr int kTrainSpeakers = 32;
constexpr int kHeldOutSpeakers = 8;

/// Desk training recipe: 40 speakers x 5 styles x 4 utterances, the first 32
/// speakers train, the rest are held out.
DeskRun train_desk_model(int iterations, const std::string& load_path, const std::string& save_path) {
  DeskRun run;
  synth::CorpusSpec spec;
  spec.n_speakers = kTrainSpeakers + kHeldOutSpeakers;
  spec.seed = 1;
  run.corpus = synth::generate_corpus(spec);
  const auto start = Clock::now();
  if (!load_path.empty()) {
    run.model.emplace(checkpoint::load(load_path));
  } else {
    std::vector<const synth::Utterance*> train_set;
    Eigen::Index frames = 0;
    for (const auto& u : run.corpus.utterances) {
      if (u.speaker_id < kTrainSpeakers) {
        train_set.push_back(&u);
        frames += u.frames();
      }
    }
    Matrix<float> feats(frames, run.corpus.utterances.front().ssl_features.cols());
    Eigen::Index r = 0;
    for (const auto* u : train_set) {
      feats.middleRows(r, u->frames()) = u->ssl_features;
      r += u->frames();
    }
    ModelConfig mc;
    mc.n_speakers = kTrainSpeakers;
    run.model.emplace(mc, content::fit_kmeans(feats, 64, 1), 3);
    TrainConfig tc;
    tc.iterations = iterations;
    tc.learning_rate = 1e-3;
    tc.warmup = 200;
    train(*run.model, train_set, tc);
    if (!save_path.empty()) checkpoint::save(*run.model, save_path);
  }
  run.train_seconds = seconds_since(start);
  std::vector<int> held;
  for (int s = kTrainSpeakers; s < kTrainSpeakers + kHeldOutSpeakers; ++s) held.push_back(s);
  run.trials = eval::make_trials(run.corpus, held, 100, 7);
  return run;
}

void desk_conversion(Verdict& v, DeskRun& run) {
  v.require(run.train_seconds < 30 * 60, "training within 30 minutes");
  const auto s = eval::evaluate_grid(*run.model, run.corpus, run.trials);
  v.require(s.timbre_win_rate >= 0.9, "(a) timbre win rate >= 0.9");
  v.require(s.median_style_corr > 0.6, "(b) median pitch correlation > 0.6");
  v.require(s.swap_follow_rate >= 0.8, "(c) swap follow rate >= 0.8");
  v.require(s.mean_timbre_drop < 0.1, "(c) timbre drop < 0.1");
  v.detail << "train " << int(run.train_seconds) << "s; " << s.to_json().dump();
}

void step_ablation(Verdict& v, DeskRun& run) {
  const std::vector<eval::ConversionTrial> sub(run.trials.begin(), run.trials.begin() + 20);
  const auto table = eval::bench_steps(*run.model, run.corpus, sub);
  const auto& rows = table.rows;
  const auto& n1 = rows.front();
  const auto& n10 = rows[3];
  v.require(n10.steps == 10 && n1.steps == 1, "grid is 1,2,5,10,20");
  v.require(n10.timbre_cosine >= n1.timbre_cosine, "timbre cosine at N=10 no worse than N=1");
  v.require(n10.proxy_loss <= n1.proxy_loss, "proxy loss at N=10 no worse than N=1");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    v.require(rows[i].seconds_per_frame > rows[i - 1].seconds_per_frame, "wall time per frame increases with N");
  }
  std::string text = table.to_text();
  for (auto& ch : text) ch = ch == '\n' ? ';' : ch == '\t' ? ' ' : ch;
  v.detail << text;
}

// ---------------------------------------------------------------------------
// 9. Scope statement

constexpr const char* kScopeStatement =
    "The published absolute results (nMOS 3.96, UTMOS 4.12, WER 2.03, SECS 0.67, RTF 0.146) rest on 20k hours of "
    "training speech and on pretrained ASR, MOS, speaker-verification and vocoder models. None of that exists at "
    "desk scale, so those numbers are not reproduced here; criteria 1 to 8 replace them with property and oracle "
    "checks.";

void scope_statement(Verdict& v) {
  v.require(std::string(kScopeStatement).find("not reproduced") != std::string::npos, "statement present");
  v.detail << kScopeStatement;
}

}  // namespace
}  // namespace stablevc::acceptance

int main(int argc, char** argv) {
  using namespace stablevc::acceptance;
  CLI::App app{"Acceptance criteria 1-9"};
  std::vector<int> only;
  int iterations = 20000;
  std::string load, save;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--iterations", iterations, "Desk training iterations (at most 20000)")
      ->check(CLI::Range(0, 20000))
      ->capture_default_str();
  app.add_option("--load-model", load, "Reuse a trained desk checkpoint for criteria 7 and 8");
  app.add_option("--save-model", save, "Write the trained desk checkpoint here");
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
  std::optional<DeskRun> desk;
  auto ensure_desk = [&]() -> DeskRun& {
    if (!desk) desk.emplace(train_desk_model(iterations, load, save));
    return *desk;
  };

  struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<void(Verdict&)> body;
  };
  const std::vector<Criterion> criteria{
      {1, "flow-matching exactness", 10, flow_matching_exactness},
      {2, "gradient oracle", 60, gradient_oracle},
      {3, "gaussian transport", 300, gaussian_transport},
      {4, "dualagc properties", 30, dualagc_properties},
      {5, "structure round-trips", 30, structure_round_trips},
      {6, "dtw oracle", 30, dtw_oracle},
      {7, "desk conversion", 45 * 60, [&](Verdict& v) { desk_conversion(v, ensure_desk()); }},
      {8, "step ablation trend", 10 * 60, [&](Verdict& v) { step_ablation(v, ensure_desk()); }},
      {9, "scope statement", 1, scope_statement},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!wanted(c.id)) continue;
    Verdict v;
    const auto start = Clock::now();
    try {
      c.body(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double secs = seconds_since(start);
    // Criterion 7 owns the training time; its own check bounds it at 30 min.
    if (secs > c.budget_seconds) v.require(false, "over time budget");
    failures += !v.pass;
    std::printf("criterion %d: %s  %s (%.1fs) %s\n", c.id, v.pass ? "PASS" : "FAIL", c.name, secs,
                v.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
