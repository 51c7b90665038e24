#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "stablevc/synth.hpp"

namespace stablevc::synth {
namespace {

RenderOptions quiet(std::uint64_t seed = 0) {
  RenderOptions o;
  o.mel_noise = false;
  o.ssl_noise = false;
  o.seed = seed;
  return o;
}

std::vector<Unit> units_of(const UnitBank& bank, std::initializer_list<int> ids) {
  std::vector<Unit> out;
  for (int id : ids) out.push_back({id, bank.base_durations[std::size_t(id)]});
  return out;
}

TEST(MakeSpeaker, DeterministicForSeed) {
  const auto a = make_speaker(42);
  const auto b = make_speaker(42);
  EXPECT_EQ(a.tau, b.tau);
  EXPECT_EQ(a.envelope, b.envelope);
  EXPECT_NE(make_speaker(43).tau, a.tau);
}

TEST(MakeSpeaker, ZeroTauGivesZeroEnvelope) {
  const auto s = speaker_from_tau(0, std::vector<double>(8, 0.0));
  for (double v : s.envelope) EXPECT_EQ(v, 0.0);
}

TEST(MakeSpeaker, EnvelopeMatchesIndependentBasisSum) {
  const auto s = make_speaker(1);
  ASSERT_EQ(s.tau.size(), 8u);
  for (double t : s.tau) {
    EXPECT_GE(t, -1.0);
    EXPECT_LE(t, 1.0);
  }
  for (int m = 0; m < 32; ++m) {
    double expect = 0.0;
    for (int j = 0; j < 8; ++j) expect += s.tau[j] * std::sin(std::numbers::pi * (j + 1) * (m + 0.5) / 32.0);
    EXPECT_NEAR(s.envelope[m], 0.5 * expect, 1e-12);
  }
}

TEST(MakeStyle, ContourValues) {
  EXPECT_DOUBLE_EQ(make_style(StyleClass::flat, 1.0).f0(0.37), 180.0);
  EXPECT_DOUBLE_EQ(make_style(StyleClass::rising, 1.0).f0(1.0), 240.0);
  EXPECT_DOUBLE_EQ(make_style(StyleClass::rising, 1.0).f0(0.0), 120.0);
  EXPECT_DOUBLE_EQ(make_style(StyleClass::falling, 1.0).f0(1.0), 120.0);
  EXPECT_NEAR(make_style(StyleClass::slow_osc, 1.0).f0(0.25), 240.0, 1e-12);
  EXPECT_NEAR(make_style(StyleClass::fast_osc, 1.0).f0(1.0 / 12.0), 240.0, 1e-12);
}

TEST(MakeStyle, ContourStaysInRange) {
  for (StyleClass c : kAllStyles) {
    for (int i = 0; i <= 100; ++i) {
      const double f = make_style(c, 1.0).f0(i / 100.0);
      EXPECT_GE(f, 100.0);
      EXPECT_LE(f, 400.0);
    }
  }
}

TEST(MakeStyle, RejectsUnknownClassAndRate) {
  EXPECT_THROW(make_style(static_cast<StyleClass>(17), 1.0), std::invalid_argument);
  EXPECT_THROW(make_style(StyleClass::flat, 1.1), std::invalid_argument);
  EXPECT_THROW(style_from_string("whisper"), std::invalid_argument);
  EXPECT_EQ(style_from_string("slow_osc"), StyleClass::slow_osc);
}

TEST(Render, ZeroTimbreSingleUnitIsPattern) {
  const auto bank = make_unit_bank(3);
  const auto spk = speaker_from_tau(0, std::vector<double>(8, 0.0));
  const auto u = render_utterance(spk, make_style(StyleClass::flat, 1.0), units_of(bank, {5}), bank, quiet());
  ASSERT_EQ(u.frames(), bank.base_durations[5]);
  for (Eigen::Index t = 0; t < u.frames(); ++t) {
    for (int m = 0; m < 32; ++m) EXPECT_EQ(u.mel(t, m), float(bank.patterns(5, m)));
  }
}

TEST(Render, FlatStyleBumpCentre) {
  const double kappa = 32.0 + 8.0 * std::log2(1.8) / 2.0;
  EXPECT_NEAR(pitch_position(180.0), kappa, 1e-12);
  EXPECT_NEAR(kappa, 35.39, 0.005);
  const auto bank = make_unit_bank(3);
  const auto u = render_utterance(make_speaker(2), make_style(StyleClass::flat, 1.0), units_of(bank, {1, 2, 3}), bank,
                                  quiet());
  for (Eigen::Index t = 0; t < u.frames(); ++t) {
    Eigen::Index arg;
    u.mel.row(t).segment(32, 8).maxCoeff(&arg);
    EXPECT_EQ(arg + 32, 35);
    EXPECT_NEAR(u.mel(t, 35), std::exp(-(35 - kappa) * (35 - kappa) / (2 * 0.64)), 1e-6);
    EXPECT_EQ(u.style_features(t, 3), 1.0f);  // round(35.39) - 32
    EXPECT_EQ(u.style_features.row(t).sum(), 1.0f);
  }
}

TEST(Render, SlowerRateNeverShortens) {
  const auto bank = make_unit_bank(4);
  std::mt19937_64 rng(5);
  const auto units = random_units(bank, 20, rng);
  const auto spk = make_speaker(9);
  const auto slow = render_utterance(spk, make_style(StyleClass::rising, 0.8), units, bank, quiet());
  const auto normal = render_utterance(spk, make_style(StyleClass::rising, 1.0), units, bank, quiet());
  const auto fast = render_utterance(spk, make_style(StyleClass::rising, 1.25), units, bank, quiet());
  EXPECT_GE(slow.frames(), normal.frames());
  EXPECT_GE(normal.frames(), fast.frames());
}

TEST(Render, DurationLaw) {
  const auto bank = make_unit_bank(4);
  std::mt19937_64 rng(6);
  const auto units = random_units(bank, 30, rng);
  for (double rate : kRates) {
    Eigen::Index expect = 0;
    for (const auto& u : units) expect += std::max<long>(1, std::lround(u.base_duration / rate));
    const auto utt = render_utterance(make_speaker(1), make_style(StyleClass::flat, rate), units, bank, quiet());
    EXPECT_EQ(utt.frames(), expect);
    EXPECT_EQ(utt.ssl_features.rows(), expect);
    EXPECT_EQ(utt.style_features.rows(), expect);
    EXPECT_EQ(Eigen::Index(utt.token_ids.size()), expect);
    EXPECT_EQ(Eigen::Index(utt.f0.size()), expect);
  }
}

TEST(Render, RejectsEmptyUnits) {
  const auto bank = make_unit_bank(4);
  EXPECT_THROW(render_utterance(make_speaker(1), make_style(StyleClass::flat, 1.0), {}, bank), std::invalid_argument);
}

TEST(Render, BandSeparationWithoutNoise) {
  const auto bank = make_unit_bank(8);
  std::mt19937_64 rng(1);
  const auto units = random_units(bank, 12, rng);
  const auto a = render_utterance(make_speaker(1), make_style(StyleClass::fast_osc, 1.0), units, bank, quiet());
  const auto b = render_utterance(make_speaker(2), make_style(StyleClass::fast_osc, 1.0), units, bank, quiet());
  const auto c = render_utterance(make_speaker(1), make_style(StyleClass::falling, 1.0), units, bank, quiet());
  EXPECT_EQ(a.mel.rightCols(8), b.mel.rightCols(8));  // pitch band ignores the speaker
  EXPECT_EQ(a.mel.leftCols(32), c.mel.leftCols(32));  // timbre band ignores the contour
  EXPECT_NE(a.mel.leftCols(32), b.mel.leftCols(32));
}

TEST(GroundTruthPitch, FlatContourWithinTwoHertz) {
  const auto bank = make_unit_bank(3);
  std::mt19937_64 rng(2);
  const auto u = render_utterance(make_speaker(3), make_style(StyleClass::flat, 1.0), random_units(bank, 20, rng), bank,
                                  quiet());
  for (const auto& f : ground_truth_pitch(u.mel)) {
    ASSERT_TRUE(f.has_value());
    EXPECT_NEAR(*f, 180.0, 2.0);
  }
}

TEST(GroundTruthPitch, AllZeroBandIsUndefined) {
  Matrix<float> mel = Matrix<float>::Zero(3, 40);
  mel(1, 36) = 1.0f;
  const auto f = ground_truth_pitch(mel);
  EXPECT_FALSE(f[0].has_value());
  EXPECT_TRUE(f[1].has_value());
  EXPECT_FALSE(f[2].has_value());
}

TEST(GroundTruthPitch, RisingContourIsMonotone) {
  const auto bank = make_unit_bank(3);
  std::mt19937_64 rng(2);
  const auto u = render_utterance(make_speaker(3), make_style(StyleClass::rising, 1.0), random_units(bank, 20, rng),
                                  bank, quiet());
  const auto f = ground_truth_pitch(u.mel);
  for (std::size_t t = 1; t < f.size(); ++t) EXPECT_GE(*f[t], *f[t - 1] - 1e-3);
}

TEST(GroundTruthPitch, RecoversEveryContourWithinTwoHertz) {
  const auto bank = make_unit_bank(3);
  for (StyleClass c : kAllStyles) {
    for (double rate : kRates) {
      std::mt19937_64 rng(11);
      const auto u = render_utterance(make_speaker(5), make_style(c, rate), random_units(bank, 25, rng), bank, quiet());
      const auto f = ground_truth_pitch(u.mel);
      for (std::size_t t = 0; t < f.size(); ++t) EXPECT_NEAR(*f[t], u.f0[t], 2.0) << to_string(c);
    }
  }
}

TEST(GroundTruthTimbre, ZeroTauReadsZero) {
  const auto bank = make_unit_bank(3);
  std::mt19937_64 rng(4);
  const auto spk = speaker_from_tau(0, std::vector<double>(8, 0.0));
  auto opts = quiet();
  opts.mel_noise = true;
  opts.seed = 99;
  const auto u = render_utterance(spk, make_style(StyleClass::flat, 1.0), random_units(bank, 30, rng), bank, opts);
  // Content mean taken from the same unit sequence rendered without timbre or noise.
  const auto clean = render_utterance(spk, make_style(StyleClass::flat, 1.0), [&] {
    std::mt19937_64 r(4);
    return random_units(bank, 30, r);
  }(), bank, quiet());
  const auto mean = content_mean({&clean});
  for (double v : ground_truth_timbre(u.mel, mean)) EXPECT_NEAR(v, 0.0, 0.01);
}

TEST(GroundTruthTimbre, RecoversKnownTauOnLongUtterance) {
  const CorpusConfig cfg;
  const auto bank = make_unit_bank(21);
  // Corpus content mean over a separate long reference pass.
  std::mt19937_64 ref_rng(100);
  const auto ref = render_utterance(speaker_from_tau(0, std::vector<double>(8, 0.0)), make_style(StyleClass::flat, 1.0),
                                    random_units(bank, 2000, ref_rng), bank, quiet());
  const auto mean = content_mean({&ref});
  for (int trial = 0; trial < 10; ++trial) {
    const auto spk = make_speaker(1000 + trial);
    std::mt19937_64 rng(trial);
    const auto u = render_utterance(spk, make_style(StyleClass::rising, 1.0), random_units(bank, 200, rng), bank,
                                    quiet());
    ASSERT_GE(u.frames(), 100);
    EXPECT_GT(cosine(ground_truth_timbre(u.mel, mean, cfg), spk.tau), 0.95);
  }
}

TEST(GroundTruthTimbre, SameSpeakerCloserThanOtherSpeaker) {
  const auto bank = make_unit_bank(5);
  std::mt19937_64 ref_rng(100);
  const auto ref = render_utterance(speaker_from_tau(0, std::vector<double>(8, 0.0)), make_style(StyleClass::flat, 1.0),
                                    random_units(bank, 2000, ref_rng), bank, quiet());
  const auto mean = content_mean({&ref});
  int wins = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(7000 + trial);
    const auto a = make_speaker(2 * trial + 1);
    const auto b = make_speaker(2 * trial + 2);
    RenderOptions o;
    o.seed = trial;
    const auto a1 = render_utterance(a, make_style(StyleClass::rising, 1.0), random_units(bank, 20, rng), bank, o);
    o.seed += 1000;
    const auto a2 = render_utterance(a, make_style(StyleClass::fast_osc, 0.8), random_units(bank, 20, rng), bank, o);
    o.seed += 1000;
    const auto b1 = render_utterance(b, make_style(StyleClass::fast_osc, 0.8), random_units(bank, 20, rng), bank, o);
    const auto ta1 = ground_truth_timbre(a1.mel, mean);
    if (cosine(ta1, ground_truth_timbre(a2.mel, mean)) > cosine(ta1, ground_truth_timbre(b1.mel, mean))) ++wins;
  }
  EXPECT_GE(wins, 95);
}

TEST(Corpus, DeterministicAndComplete) {
  CorpusSpec spec;
  spec.n_speakers = 3;
  spec.n_styles = 5;
  spec.per_cell = 2;
  spec.seed = 77;
  const auto a = generate_corpus(spec);
  const auto b = generate_corpus(spec);
  ASSERT_EQ(a.utterances.size(), 30u);
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    EXPECT_EQ(a.utterances[i].utt_id, b.utterances[i].utt_id);
    EXPECT_EQ(a.utterances[i].mel, b.utterances[i].mel);
    EXPECT_EQ(a.utterances[i].ssl_features, b.utterances[i].ssl_features);
  }
  EXPECT_EQ(a.utterances[0].utt_id, "spk000_rising_00");
  EXPECT_THROW(generate_corpus(CorpusSpec{0}), std::invalid_argument);
}

TEST(Corpus, UnitsHaveNoAdjacentRepeats) {
  const auto bank = make_unit_bank(1);
  std::mt19937_64 rng(3);
  const auto units = random_units(bank, 500, rng);
  for (std::size_t i = 1; i < units.size(); ++i) EXPECT_NE(units[i].unit_id, units[i - 1].unit_id);
}

}  // namespace
}  // namespace stablevc::synth
