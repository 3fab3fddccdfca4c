#ifndef CAASR_RUNCONFIG_HPP
#define CAASR_RUNCONFIG_HPP

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caasr/audio.hpp"
#include "caasr/model.hpp"
#include "caasr/training.hpp"

namespace caasr {

/// One JSON document drives a whole run: corpus shape, model, the three
/// stage configurations, masking, noise conditions, and the CNRL recipe.
/// Unknown keys are rejected so typos cannot silently change a run.
struct RunConfig {
  std::uint64_t seed = 7;

  struct Paths {
    std::filesystem::path corpus = "runs/default/corpus";
    std::filesystem::path checkpoints = "runs/default/checkpoints";
    std::filesystem::path reports = "runs/default/reports";
  } paths;

  struct Data {
    int n_dialogues = 300;
    int turns_min = 3;
    int turns_max = 6;
    int n_dev_dialogues = 20;
    int n_test_dialogues = 30;
    int feature_dim = 32;
    double frame_rate_hz = 50.0;
    std::string external_pretrain_jsonl;  // optional extra text dialogues
  } data;

  ModelConfig model;

  StageConfig pretrain = StageConfig::pretrain_defaults();
  StageConfig finetune = StageConfig::finetune_defaults();
  StageConfig cnrl = StageConfig::cnrl_defaults();

  MaskConfig mask;

  struct Noise {
    std::vector<double> snr_levels_db = {20.0, 0.0};
    int bank_size = 2000;
  } noise;

  struct NoisyGen {
    int folds = 10;
    int fold_epochs = 3;
  } noisy_gen;

  struct CnrlData {
    std::string variant = "S4";
    double word_drop_p = 0.10;
    double target_wer = 0.065;
    double max_wer_filter = 0.20;
  } cnrl_data;

  struct Flags {
    bool use_ground_truth_context = false;
    std::string decoder_init = "pretrained";  // or "random"
  } flags;

  /// Desk-scale defaults: small transformer, from-scratch learning rates.
  static RunConfig desk_default();

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  /// SHA-256 of the canonical JSON form; recorded in every manifest.
  std::string config_hash() const;

  void validate() const;
  void apply_env_overrides();  // CAASR_{CORPUS,CHECKPOINTS,REPORTS}_DIR
};

}  // namespace caasr

#endif  // CAASR_RUNCONFIG_HPP
