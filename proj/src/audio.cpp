#include "caasr/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "caasr/hash.hpp"
#include "caasr/rng.hpp"
#include "caasr/textnorm.hpp"

namespace caasr {

double rms(const Matf& frames) {
  if (frames.size() == 0) return 0.0;
  double ss = frames.cast<double>().array().square().sum();
  return std::sqrt(ss / static_cast<double>(frames.size()));
}

namespace {

int word_frame_count(const std::string& word) {
  return 2 + static_cast<int>(fnv1a64(word) % 5);  // 2..6 frames
}

// Prototype = shared word base + smaller voice-specific component, so the
// same word under two voices stays closer than two different words but
// farther than two renditions by one voice.
Matf word_prototype(const std::string& word, int voice_id, int feature_dim) {
  const int frames = word_frame_count(word);
  Matf proto(frames, feature_dim);
  Rng base_rng(derive_seed(0x5eedba5e, "word-proto", fnv1a64(word)));
  Rng voice_rng(derive_seed(0x5eedba5e, "voice-proto", fnv1a64(word),
                            static_cast<std::uint64_t>(voice_id)));
  for (int f = 0; f < frames; ++f) {
    for (int d = 0; d < feature_dim; ++d) {
      proto(f, d) = static_cast<float>(base_rng.normal() + 0.5 * voice_rng.normal());
    }
  }
  return proto;
}

}  // namespace

FeatureSequence synthesize_speech_features(const std::string& text, int voice_id,
                                           std::uint64_t seed, int feature_dim,
                                           float frame_rate_hz) {
  const std::vector<std::string> words = split_words(normalize(text));
  if (words.empty()) {
    throw std::invalid_argument("synthesize_speech_features: empty text");
  }
  if (voice_id < 0 || voice_id >= kNumVoices) {
    throw std::invalid_argument("synthesize_speech_features: bad voice id");
  }

  int total = 0;
  for (const auto& w : words) total += word_frame_count(w);

  FeatureSequence fs;
  fs.frame_rate_hz = frame_rate_hz;
  fs.frames.resize(total, feature_dim);

  Rng jitter(derive_seed(seed, "speech-jitter", fnv1a64(text),
                         static_cast<std::uint64_t>(voice_id)));
  int row = 0;
  for (const auto& w : words) {
    Matf proto = word_prototype(w, voice_id, feature_dim);
    for (int f = 0; f < proto.rows(); ++f) {
      for (int d = 0; d < feature_dim; ++d) {
        fs.frames(row, d) = proto(f, d) + static_cast<float>(0.08 * jitter.normal());
      }
      ++row;
    }
  }
  return fs;
}

FeatureSequence make_noise_clip(std::uint64_t seed, int feature_dim,
                                float frame_rate_hz) {
  Rng rng(seed);
  const int frames = rng.uniform_int(60, 200);
  FeatureSequence fs;
  fs.frame_rate_hz = frame_rate_hz;
  fs.frames.setZero(frames, feature_dim);

  const bool tonal = rng.bernoulli(0.4);
  if (tonal) {
    // Tone bursts: sinusoids on a random subset of channels.
    const int n_tones = rng.uniform_int(1, 4);
    for (int t = 0; t < n_tones; ++t) {
      const int ch = rng.uniform_int(0, feature_dim - 1);
      const double omega = rng.uniform(0.05, 1.2);
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      const double amp = rng.uniform(0.5, 2.0);
      const int start = rng.uniform_int(0, frames / 2);
      const int len = rng.uniform_int(frames / 4, frames - start);
      for (int f = start; f < start + len; ++f) {
        fs.frames(f, ch) += static_cast<float>(amp * std::sin(omega * f + phase));
      }
    }
    // Plus a low floor so no clip is exactly silent anywhere.
    for (int f = 0; f < frames; ++f) {
      for (int d = 0; d < feature_dim; ++d) {
        fs.frames(f, d) += static_cast<float>(0.05 * rng.normal());
      }
    }
  } else {
    // AR(1)-coloured noise with a per-channel gain envelope.
    const double rho = rng.uniform(0.0, 0.95);
    std::vector<double> gain(feature_dim);
    for (int d = 0; d < feature_dim; ++d) gain[d] = rng.uniform(0.2, 1.5);
    std::vector<double> state(feature_dim, 0.0);
    for (int f = 0; f < frames; ++f) {
      for (int d = 0; d < feature_dim; ++d) {
        state[d] = rho * state[d] + rng.normal();
        fs.frames(f, d) = static_cast<float>(gain[d] * state[d]);
      }
    }
  }
  return fs;
}

std::vector<FeatureSequence> generate_noise_bank(int n, std::uint64_t seed,
                                                 int feature_dim,
                                                 float frame_rate_hz) {
  if (n < 1) throw std::invalid_argument("generate_noise_bank: n must be >= 1");
  std::vector<FeatureSequence> bank;
  bank.reserve(n);
  for (int i = 0; i < n; ++i) {
    bank.push_back(make_noise_clip(derive_seed(seed, "noise-clip", i),
                                   feature_dim, frame_rate_hz));
  }
  return bank;
}

FeatureSequence mix_noise(const FeatureSequence& signal,
                          const FeatureSequence& noise, double snr_db,
                          std::uint64_t seed) {
  if (noise.frame_count() < 1) {
    throw std::invalid_argument("mix_noise: empty noise clip");
  }
  if (signal.dim() != noise.dim()) {
    throw std::invalid_argument("mix_noise: feature dimension mismatch");
  }
  const int f_sig = signal.frame_count();
  const int f_noi = noise.frame_count();

  Rng rng(derive_seed(seed, "noise-fit"));
  Matf fitted(f_sig, signal.dim());
  if (f_noi >= f_sig) {
    const int start = (f_noi == f_sig) ? 0 : rng.uniform_int(0, f_noi - f_sig);
    fitted = noise.frames.middleRows(start, f_sig);
  } else {
    const int offset = rng.uniform_int(0, f_noi - 1);
    for (int f = 0; f < f_sig; ++f) {
      fitted.row(f) = noise.frames.row((f + offset) % f_noi);
    }
  }

  const double rms_sig = rms(signal.frames);
  const double rms_noi = rms(fitted);
  if (rms_sig <= 0.0) throw std::invalid_argument("mix_noise: zero-power signal");
  if (rms_noi <= 0.0) throw std::invalid_argument("mix_noise: zero-power noise");

  const double alpha = rms_sig / (rms_noi * std::pow(10.0, snr_db / 20.0));
  FeatureSequence out;
  out.frame_rate_hz = signal.frame_rate_hz;
  out.frames = signal.frames + static_cast<float>(alpha) * fitted;
  return out;
}

std::pair<FeatureSequence, MaskReport> mask_audio(const FeatureSequence& features,
                                                  const MaskConfig& cfg,
                                                  std::uint64_t seed) {
  if (cfg.select_prob < 0.0 || cfg.select_prob > 1.0 ||
      cfg.mask_fraction <= 0.0 || cfg.mask_fraction > 1.0) {
    throw std::invalid_argument("mask_audio: bad mask config");
  }
  MaskReport report;
  const int chunk_frames = std::max(
      1, static_cast<int>(std::lround(cfg.chunk_seconds * features.frame_rate_hz)));
  report.total_chunks =
      (features.frame_count() + chunk_frames - 1) / chunk_frames;

  Rng rng(derive_seed(seed, "audio-mask"));
  report.selected = rng.bernoulli(cfg.select_prob);
  if (!report.selected || features.frame_count() == 0) {
    return {features, report};
  }

  const int n_mask = std::min(
      report.total_chunks,
      std::max(1, static_cast<int>(std::lround(cfg.mask_fraction * report.total_chunks))));

  std::vector<int> order(report.total_chunks);
  for (int i = 0; i < report.total_chunks; ++i) order[i] = i;
  rng.shuffle(order);
  report.masked_chunks.assign(order.begin(), order.begin() + n_mask);
  std::sort(report.masked_chunks.begin(), report.masked_chunks.end());

  FeatureSequence out = features;
  for (int c : report.masked_chunks) {
    const int begin = c * chunk_frames;
    const int len = std::min(chunk_frames, features.frame_count() - begin);
    out.frames.middleRows(begin, len).setZero();
  }
  return {out, report};
}

void save_features(const std::filesystem::path& path, const FeatureSequence& fs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_features: cannot open " + path.string());
  const char magic[4] = {'C', 'A', 'F', 'B'};
  out.write(magic, 4);
  const std::uint32_t version = 1;
  const std::uint32_t frames = static_cast<std::uint32_t>(fs.frame_count());
  const std::uint32_t dim = static_cast<std::uint32_t>(fs.dim());
  const float rate = fs.frame_rate_hz;
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&frames), 4);
  out.write(reinterpret_cast<const char*>(&dim), 4);
  out.write(reinterpret_cast<const char*>(&rate), 4);
  for (int f = 0; f < fs.frame_count(); ++f) {
    for (int d = 0; d < fs.dim(); ++d) {
      float v = fs.frames(f, d);
      out.write(reinterpret_cast<const char*>(&v), 4);
    }
  }
  if (!out) throw std::runtime_error("save_features: write failed " + path.string());
}

FeatureSequence load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_features: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CAFB", 4) != 0) {
    throw std::runtime_error("load_features: bad magic in " + path.string());
  }
  std::uint32_t version = 0, frames = 0, dim = 0;
  float rate = 0.0f;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&frames), 4);
  in.read(reinterpret_cast<char*>(&dim), 4);
  in.read(reinterpret_cast<char*>(&rate), 4);
  if (!in || version != 1) {
    throw std::runtime_error("load_features: unsupported header in " + path.string());
  }
  FeatureSequence fs;
  fs.frame_rate_hz = rate;
  fs.frames.resize(frames, dim);
  for (std::uint32_t f = 0; f < frames; ++f) {
    for (std::uint32_t d = 0; d < dim; ++d) {
      float v = 0.0f;
      in.read(reinterpret_cast<char*>(&v), 4);
      fs.frames(f, d) = v;
    }
  }
  if (!in) throw std::runtime_error("load_features: truncated file " + path.string());
  return fs;
}

}  // namespace caasr
