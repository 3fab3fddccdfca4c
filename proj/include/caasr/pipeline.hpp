#ifndef CAASR_PIPELINE_HPP
#define CAASR_PIPELINE_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caasr/eval.hpp"
#include "caasr/runconfig.hpp"
#include "caasr/training.hpp"

namespace caasr {

/// Corpus on disk plus the split bookkeeping the stages share.
struct CorpusBundle {
  std::vector<Dialogue> train;
  std::vector<Dialogue> dev;
  std::vector<Dialogue> test;
  Tokenizer tok;
  std::string corpus_file_hash;
};

/// Generate the synthetic corpus, speech features, splits and vocabulary
/// under cfg.paths.corpus. Byte-identical for identical configs.
CorpusBundle cmd_gen_data(const RunConfig& cfg);

CorpusBundle load_corpus_bundle(const RunConfig& cfg);

/// Everything the end-to-end run produces, kept in memory for callers that
/// want to assert on it (the report on disk is the canonical artifact).
struct PipelineArtifacts {
  CorpusBundle corpus;
  TrainOutput pretrain;
  TrainOutput base;         // fine-tune from a random decoder
  TrainOutput ptr;          // fine-tune from the pretrained decoder
  TrainOutput speech_only;  // context encoder fed BOS only
  NoisyGenResult noisy;
  double filtered_fraction = 0.0;
  std::vector<NoisyContextPair> cnrl_train_pairs;
  std::vector<NoisyContextPair> cnrl_dev_pairs;
  std::vector<NoisyContextPair> held_out_pairs;  // from test dialogues
  TrainOutput cnrl_base;
  TrainOutput cnrl_ptr;
  CnrlDiagnostics diagnostics;
  // autoregressive grid: model name -> condition -> pooled WER
  std::map<std::string, std::map<std::string, double>> grid;
  std::map<std::string, double> ground_truth_wer;  // ptr under GT context
  nlohmann::json report;
  std::filesystem::path report_path;
};

/// gen-data -> pretrain -> fine-tunes -> 10-fold noisy generation ->
/// variant build -> CNRL -> evaluation grid. Writes stage manifests,
/// checkpoints, the final report, a per-turn CSV, a WER bar chart, and a
/// timing sidecar (timings are kept out of the deterministic artifacts).
PipelineArtifacts cmd_pipeline(const RunConfig& cfg, bool emit_plot = true);

/// Grouped bar chart of WER per condition and model, written as SVG.
void write_wer_bars_svg(
    const std::filesystem::path& path,
    const std::vector<std::string>& conditions,
    const std::vector<std::pair<std::string, std::map<std::string, double>>>& models);

nlohmann::json stage_manifest(const std::string& stage, const RunConfig& cfg,
                              const nlohmann::json& inputs,
                              const nlohmann::json& outputs,
                              const nlohmann::json& metrics);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

nlohmann::json curve_to_json(const std::vector<EpochMetric>& curve);

}  // namespace caasr

#endif  // CAASR_PIPELINE_HPP
