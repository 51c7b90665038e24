#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "stablevc/contenttok.hpp"
#include "stablevc/durmod.hpp"
#include "test_util.hpp"

namespace stablevc::duration {
namespace {

using testing::random_matrix;

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.n_mels = 6;
  return cfg;
}

TEST(DurationPredictor, OutputLengthMatchesTokens) {
  std::mt19937_64 rng(1);
  const ModelConfig cfg = small_config();
  DurationPredictor<double> pred(cfg, rng);
  pred.out = nn::Linear<double>(cfg.width, 1, rng);
  for (int len : {1, 2, 9, 40}) {
    Tape<double> tape(false);
    const auto ts = pred.timbre_summary(tape, tape.constant(random_matrix(12, cfg.n_mels, rng)));
    const auto y = pred(tape, tape.constant(random_matrix(len, cfg.width, rng)),
                        tape.constant(random_matrix(1, cfg.width, rng)), ts);
    EXPECT_EQ(y.rows(), len);
    EXPECT_EQ(y.cols(), 1);
  }
}

TEST(DurationPredictor, ZeroFinalLayerPredictsOneFrame) {
  std::mt19937_64 rng(2);
  const ModelConfig cfg = small_config();
  DurationPredictor<double> pred(cfg, rng);
  Tape<double> tape(false);
  const auto y = pred(tape, tape.constant(random_matrix(6, cfg.width, rng)),
                      tape.constant(random_matrix(1, cfg.width, rng)), tape.constant(random_matrix(1, cfg.width, rng)));
  EXPECT_EQ(y.value(), Matrix<double>(Matrix<double>::Zero(6, 1)));
  EXPECT_EQ(round_durations(y.value()), std::vector<int>(6, 1));
}

TEST(DurationPredictor, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(3);
  const ModelConfig cfg = small_config();
  DurationPredictor<double> pred(cfg, rng);
  pred.out = nn::Linear<double>(cfg.width, 1, rng);
  const Matrix<double> content = random_matrix(5, cfg.width, rng), style = random_matrix(1, cfg.width, rng),
                       ref = random_matrix(9, cfg.n_mels, rng);
  const std::vector<int> truth{2, 1, 4, 3, 6};
  std::vector<ad::Parameter<double>*> params;
  pred.visit("d", [&](const std::string&, ad::Parameter<double>& p) { params.push_back(&p); });
  auto loss = [&](bool with_grad) {
    Tape<double> tape;
    auto l = duration_loss(pred(tape, tape.constant(content), tape.constant(style),
                                pred.timbre_summary(tape, tape.constant(ref))),
                           truth);
    if (with_grad) tape.backward(l);
    return l.item();
  };
  EXPECT_LT(testing::gradcheck(params, loss), 1e-5);
}

TEST(RoundDurations, ClampsAndRounds) {
  Matrix<double> l(1, 5);
  l << -5.0, 0.0, std::log(2.4), std::log(2.6), std::log(7.0);
  EXPECT_EQ(round_durations(l), (std::vector<int>{1, 1, 2, 3, 7}));
}

TEST(DurationLoss, Examples) {
  Tape<double> tape(false);
  Matrix<double> exact(3, 1);
  exact << std::log(2.0), std::log(5.0), 0.0;
  EXPECT_NEAR(duration_loss(tape.constant(exact), {2, 5, 1}).item(), 0.0, 1e-15);
  EXPECT_EQ(duration_loss(tape.constant(Matrix<double>(Matrix<double>::Zero(2, 1))), {1, 1}).item(), 0.0);
  const double ln2 = std::log(2.0);
  EXPECT_NEAR(duration_loss(tape.constant(Matrix<double>(Matrix<double>::Zero(1, 1))), {2}).item(), ln2 * ln2, 1e-15);
  EXPECT_NEAR(ln2 * ln2, 0.4805, 5e-5);
}

TEST(DurationLoss, NonNegativeAndZeroOnlyOnMatch) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> dur(1, 8);
  Tape<double> tape(false);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> truth(6);
    for (auto& d : truth) d = dur(rng);
    const Matrix<double> pred = random_matrix(6, 1, rng);
    EXPECT_GT(duration_loss(tape.constant(pred), truth).item(), 0.0);
  }
}

TEST(DurationLoss, RejectsBadInput) {
  Tape<double> tape(false);
  const auto z = tape.constant(Matrix<double>(Matrix<double>::Zero(2, 1)));
  EXPECT_THROW(duration_loss(z, {1, 0}), std::invalid_argument);
  EXPECT_THROW(duration_loss(z, {1, -3}), std::invalid_argument);
  EXPECT_THROW(duration_loss(z, {1}), std::invalid_argument);
}

TEST(RegulateLength, Examples) {
  Matrix<double> h(2, 3);
  h << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(regulate_length(h, {1, 1}), h);
  const Matrix<double> r = regulate_length(h, {3, 1});
  ASSERT_EQ(r.rows(), 4);
  EXPECT_EQ(r.row(0), h.row(0));
  EXPECT_EQ(r.row(1), h.row(0));
  EXPECT_EQ(r.row(2), h.row(0));
  EXPECT_EQ(r.row(3), h.row(1));
  EXPECT_THROW(regulate_length(h, {0, 1}), std::invalid_argument);
  EXPECT_THROW(regulate_length(h, {1}), std::invalid_argument);
}

TEST(RegulateLength, ConservationProperty) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> len(1, 20), dur(1, 9);
  for (int trial = 0; trial < 200; ++trial) {
    const int l = len(rng);
    std::vector<int> d(static_cast<std::size_t>(l));
    int total = 0;
    for (auto& v : d) total += (v = dur(rng));
    EXPECT_EQ(regulate_length(random_matrix(l, 4, rng), d).rows(), total);
  }
}

TEST(RegulateLength, RoundTripWithContentTokens) {
  std::mt19937_64 rng(6);
  content::Codebook cb;
  cb.centroids = random_matrix(5, 3, rng).cast<float>();
  std::uniform_int_distribution<int> tok(0, 4), len(1, 50);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> ids(static_cast<std::size_t>(len(rng)));
    for (auto& v : ids) v = tok(rng);
    const auto d = content::dedup(ids);
    const Matrix<float> frames = regulate_length(content::embed(d.ids, cb), d.durations);
    EXPECT_EQ(frames, content::embed(ids, cb));
  }
}

}  // namespace
}  // namespace stablevc::duration
