#ifndef CAASR_AUDIO_HPP
#define CAASR_AUDIO_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "caasr/common.hpp"

namespace caasr {

/// Frames-by-dim feature matrix standing in for raw speech. One row per
/// frame; 50 frames make one second at the default rate.
struct FeatureSequence {
  Matf frames;
  float frame_rate_hz = 50.0f;

  int frame_count() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }
  double seconds() const {
    return frame_rate_hz > 0 ? frame_count() / static_cast<double>(frame_rate_hz) : 0.0;
  }
};

struct NoiseConfig {
  double snr_db = 0.0;
  std::uint64_t noise_bank_seed = 0;
  bool enabled = false;
};

struct MaskConfig {
  double select_prob = 0.10;    // fraction of samples masked at all
  double mask_fraction = 0.20;  // of a selected sample's duration
  double chunk_seconds = 1.0;
};

struct MaskReport {
  bool selected = false;
  int total_chunks = 0;
  std::vector<int> masked_chunks;
};

double rms(const Matf& frames);

/// Deterministic per-(word, voice) prototype features with seeded jitter.
/// A word contributes between two and six frames; prototypes share a base
/// component across the four voices so the same word sounds related but
/// distinguishable between voices.
FeatureSequence synthesize_speech_features(const std::string& text, int voice_id,
                                           std::uint64_t seed, int feature_dim = 32,
                                           float frame_rate_hz = 50.0f);

constexpr int kNumVoices = 4;

/// Reusable noise clips of varied spectral character: AR-coloured noise and
/// tone bursts over random channel subsets.
std::vector<FeatureSequence> generate_noise_bank(int n, std::uint64_t seed,
                                                 int feature_dim = 32,
                                                 float frame_rate_hz = 50.0f);

FeatureSequence make_noise_clip(std::uint64_t seed, int feature_dim = 32,
                                float frame_rate_hz = 50.0f);

/// signal + alpha * noise with alpha chosen so the additive component sits at
/// snr_db below the signal. Short clips tile with a seeded circular offset,
/// long clips crop at a seeded position. Throws when either side has zero
/// power.
FeatureSequence mix_noise(const FeatureSequence& signal,
                          const FeatureSequence& noise, double snr_db,
                          std::uint64_t seed);

/// Chunked masking: a sample selected with cfg.select_prob gets
/// max(1, round(mask_fraction * total_chunks)) distinct one-second chunks
/// zeroed. Unselected samples pass through untouched.
std::pair<FeatureSequence, MaskReport> mask_audio(const FeatureSequence& features,
                                                  const MaskConfig& cfg,
                                                  std::uint64_t seed);

// Little-endian binary feature file: magic "CAFB", u32 version, u32 frames,
// u32 dim, f32 frame_rate_hz, then frames*dim f32 row-major.
void save_features(const std::filesystem::path& path, const FeatureSequence& fs);
FeatureSequence load_features(const std::filesystem::path& path);

}  // namespace caasr

#endif  // CAASR_AUDIO_HPP
