#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <caasr/audio.hpp>
#include <caasr/hash.hpp>
#include <caasr/textnorm.hpp>

#include "testutil.hpp"

#include <cmath>
#include <filesystem>
#include <set>

using namespace caasr;
namespace fs = std::filesystem;

namespace {

double cosine(const Matf& a, const Matf& b) {
  const double dot = (a.cast<double>().array() * b.cast<double>().array()).sum();
  return dot / (a.cast<double>().norm() * b.cast<double>().norm());
}

double measured_snr_db(const Matf& signal, const Matf& additive) {
  return 20.0 * std::log10(rms(signal) / rms(additive));
}

}  // namespace

TEST_CASE("speech synthesis is deterministic in all inputs") {
  const auto a = synthesize_speech_features("book a table", 1, 42);
  const auto b = synthesize_speech_features("book a table", 1, 42);
  CHECK(a.frames == b.frames);

  const auto c = synthesize_speech_features("book a table", 1, 43);
  CHECK(a.frames != c.frames);

  CHECK_THROWS_AS(synthesize_speech_features("", 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(synthesize_speech_features("...", 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(synthesize_speech_features("hi", 9, 1), std::invalid_argument);
}

TEST_CASE("frame count is the sum of per-word lengths") {
  const auto one = synthesize_speech_features("hello", 0, 7);
  const auto twice = synthesize_speech_features("hello hello", 0, 7);
  CHECK(twice.frame_count() == 2 * one.frame_count());
  CHECK(one.frame_count() >= 2);
  CHECK(one.frame_count() <= 6);

  const auto five = synthesize_speech_features("one two three four five", 2, 7);
  int expected = 0;
  for (const auto& w : {"one", "two", "three", "four", "five"}) {
    expected += synthesize_speech_features(w, 2, 7).frame_count();
  }
  CHECK(five.frame_count() == expected);
}

TEST_CASE("same voice renditions are closer than cross voice prototypes") {
  // within-voice: same word, different jitter seeds
  const auto v0a = synthesize_speech_features("hello", 0, 1);
  const auto v0b = synthesize_speech_features("hello", 0, 2);
  const double within = cosine(v0a.frames, v0b.frames);

  double max_cross = -1.0;
  for (int v1 = 0; v1 < kNumVoices; ++v1) {
    for (int v2 = v1 + 1; v2 < kNumVoices; ++v2) {
      const auto a = synthesize_speech_features("hello", v1, 1);
      const auto b = synthesize_speech_features("hello", v2, 1);
      max_cross = std::max(max_cross, cosine(a.frames, b.frames));
    }
  }
  INFO("within=", within, " max_cross=", max_cross);
  CHECK(within > 0.95);
  CHECK(max_cross < within);

  // different words under the same voice are near-orthogonal
  const auto other = synthesize_speech_features("goodbye", 0, 1);
  if (other.frame_count() == v0a.frame_count()) {
    CHECK(std::abs(cosine(v0a.frames, other.frames)) < 0.5);
  }
}

TEST_CASE("noise bank size, determinism, distinctness") {
  const auto bank = generate_noise_bank(50, 4);
  CHECK(bank.size() == 50);
  const auto bank2 = generate_noise_bank(50, 4);
  for (std::size_t i = 0; i < bank.size(); ++i) {
    CHECK(bank[i].frames == bank2[i].frames);
  }
  CHECK(bank[0].frames != bank[1].frames);
  CHECK_THROWS_AS(generate_noise_bank(0, 1), std::invalid_argument);
}

TEST_CASE("mix_noise hits the target snr") {
  const auto signal = synthesize_speech_features("testing noise mixing here", 0, 5);
  const auto bank = generate_noise_bank(20, 6);
  for (const double target : {20.0, 0.0, -5.0}) {
    for (int i = 0; i < 20; ++i) {
      const auto mixed = mix_noise(signal, bank[i], target, 1000 + i);
      const Matf additive = mixed.frames - signal.frames;
      CHECK(std::abs(measured_snr_db(signal.frames, additive) - target) < 0.1);
    }
  }
}

TEST_CASE("mix_noise at 0 dB equalizes power") {
  const auto signal = synthesize_speech_features("equal power check", 1, 9);
  const auto noise = make_noise_clip(77);
  const auto mixed = mix_noise(signal, noise, 0.0, 3);
  const Matf additive = mixed.frames - signal.frames;
  CHECK(rms(additive) == doctest::Approx(rms(signal.frames)).epsilon(1e-3));
}

TEST_CASE("mix_noise scale arithmetic") {
  // rms(signal)=0.1, rms(noise)=0.1 at 20 dB wants alpha = 0.01; verify via
  // the additive component since alpha itself is internal.
  FeatureSequence s, n;
  s.frames = Matf::Constant(40, 8, 0.1f);
  n.frames = Matf::Constant(40, 8, 0.1f);
  const auto mixed = mix_noise(s, n, 20.0, 1);
  const Matf additive = mixed.frames - s.frames;
  CHECK(rms(additive) == doctest::Approx(0.01).epsilon(1e-4));
}

TEST_CASE("mix_noise rejects zero-power input") {
  FeatureSequence zero;
  zero.frames = Matf::Zero(10, 4);
  FeatureSequence noise;
  noise.frames = Matf::Constant(10, 4, 0.5f);
  CHECK_THROWS_AS(mix_noise(zero, noise, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(mix_noise(noise, zero, 0.0, 1), std::invalid_argument);
}

TEST_CASE("mask_audio zeroes whole chunks") {
  FeatureSequence fs;
  fs.frame_rate_hz = 50.0f;
  fs.frames = Matf::Constant(500, 8, 1.0f);  // 10 seconds
  MaskConfig cfg;
  cfg.select_prob = 1.0;

  const auto [masked, report] = mask_audio(fs, cfg, 5);
  CHECK(report.selected);
  CHECK(report.total_chunks == 10);
  REQUIRE(report.masked_chunks.size() == 2);

  int zero_rows = 0;
  for (int f = 0; f < masked.frame_count(); ++f) {
    if (masked.frames.row(f).isZero(0.0f)) ++zero_rows;
  }
  CHECK(zero_rows == 100);

  std::set<int> masked_set(report.masked_chunks.begin(), report.masked_chunks.end());
  for (int f = 0; f < 500; ++f) {
    const bool in_masked = masked_set.count(f / 50) > 0;
    if (in_masked) {
      CHECK(masked.frames.row(f).isZero(0.0f));
    } else {
      CHECK(masked.frames.row(f) == fs.frames.row(f));
    }
  }
}

TEST_CASE("mask_audio short sample rounding") {
  FeatureSequence fs;
  fs.frame_rate_hz = 50.0f;
  fs.frames = Matf::Constant(150, 4, 1.0f);  // 3 seconds
  MaskConfig cfg;
  cfg.select_prob = 1.0;
  const auto [masked, report] = mask_audio(fs, cfg, 8);
  CHECK(report.total_chunks == 3);
  CHECK(report.masked_chunks.size() == 1);  // round(0.2 * 3) = 1
}

TEST_CASE("mask_audio identity when not selected") {
  FeatureSequence fs;
  fs.frames = Matf::Random(120, 6);
  MaskConfig cfg;
  cfg.select_prob = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto [masked, report] = mask_audio(fs, cfg, i);
    CHECK(!report.selected);
    CHECK(masked.frames == fs.frames);
  }
}

TEST_CASE("mask selection rate sits in the exact binomial interval") {
  FeatureSequence fs;
  fs.frame_rate_hz = 50.0f;
  fs.frames = Matf::Constant(500, 4, 1.0f);
  MaskConfig cfg;  // select_prob 0.10

  const int n = 4000;
  int selected = 0;
  for (int i = 0; i < n; ++i) {
    const auto [_, report] = mask_audio(fs, cfg, derive_seed(123, "trial", i));
    if (report.selected) {
      ++selected;
      CHECK(report.masked_chunks.size() == 2);
    }
  }
  const auto [lo, hi] = testutil::binomial_central_interval(n, 0.10, 0.99);
  INFO("selected=", selected, " interval=[", lo, ",", hi, "]");
  CHECK(selected >= lo);
  CHECK(selected <= hi);
}

TEST_CASE("feature file round trip") {
  const auto fs_seq = synthesize_speech_features("round trip check", 3, 21);
  const fs::path path = fs::temp_directory_path() / "caasr_feat_test.fbin";
  save_features(path, fs_seq);
  const auto back = load_features(path);
  CHECK(back.frame_rate_hz == fs_seq.frame_rate_hz);
  CHECK(back.frames == fs_seq.frames);
  fs::remove(path);
}
