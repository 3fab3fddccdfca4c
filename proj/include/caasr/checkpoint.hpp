#ifndef CAASR_CHECKPOINT_HPP
#define CAASR_CHECKPOINT_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "caasr/corpus.hpp"
#include "caasr/model.hpp"

namespace caasr {

/// A checkpoint is self-contained: model config, the vocabulary it was
/// trained with, the stage that produced it, and every parameter array as
/// 32-bit floats.
struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> vocab_words;
  std::string stage;
  ParamStore<float> params;

  CaAsrModel<float> to_model() const {
    return CaAsrModel<float>::from_params(config, params);
  }
  Tokenizer tokenizer() const { return Tokenizer(vocab_words); }

  static Checkpoint of(const CaAsrModel<float>& model, const Tokenizer& tok,
                       std::string stage_name) {
    return Checkpoint{model.config(), tok.words(), std::move(stage_name),
                      model.params()};
  }
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// SHA-256 of one parameter array's raw float bytes.
std::string param_array_hash(const MatX<float>& values);

/// name -> SHA-256 for every array; the stage-isolation contract compares
/// these across checkpoints.
std::vector<std::pair<std::string, std::string>> param_hashes(
    const ParamStore<float>& params);

std::string checkpoint_file_hash(const std::filesystem::path& path);

}  // namespace caasr

#endif  // CAASR_CHECKPOINT_HPP
