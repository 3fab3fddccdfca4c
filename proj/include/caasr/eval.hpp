#ifndef CAASR_EVAL_HPP
#define CAASR_EVAL_HPP

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caasr/audio.hpp"
#include "caasr/checkpoint.hpp"
#include "caasr/corpus.hpp"
#include "caasr/model.hpp"
#include "caasr/textnorm.hpp"
#include "caasr/training.hpp"

namespace caasr {

struct NoiseCondition {
  std::string name;  // "clean", "snr20", "snr0", ...
  NoiseConfig noise;

  static NoiseCondition clean() { return {"clean", NoiseConfig{}}; }
  static NoiseCondition snr(double db, std::uint64_t bank_seed) {
    NoiseCondition c;
    c.name = "snr" + std::to_string(static_cast<int>(db));
    c.noise.enabled = true;
    c.noise.snr_db = db;
    c.noise.noise_bank_seed = bank_seed;
    return c;
  }
};

struct TurnRecord {
  std::string dialogue_id;
  int turn_index = 0;
  std::string condition;
  std::string reference;
  std::string hypothesis;
  double wer_value = 0.0;
  int order = 0;  // global prediction sequence within the dialogue pass
};

struct CnrlDiagnostics {
  int n_pairs = 0;
  double mean_similarity_before = 0.0;
  double mean_similarity_after = 0.0;
  double delta = 0.0;
  std::vector<double> per_pair_before;
  std::vector<double> per_pair_after;

  nlohmann::json to_json() const;
};

struct MetricsReport {
  std::map<std::string, double> condition_wer;
  std::map<std::string, WerCounts> condition_counts;
  std::map<std::string, std::map<std::string, double>> per_dialogue_wer;
  std::vector<TurnRecord> per_turn;
  nlohmann::json metadata;  // checkpoint hashes, seeds, flags

  nlohmann::json to_json() const;
  std::string to_csv() const;  // per-turn dump
};

/// Per-utterance noise clip choice: a pure function of the bank seed and the
/// utterance identity, so every model under the same seed sees the same
/// corruption (paired evaluation).
int noise_clip_index(std::uint64_t bank_seed, const std::string& dialogue_id,
                     int turn_index, int bank_size);

/// Turn-by-turn transcription in strict order. With use_ground_truth_context
/// the history holds reference transcripts; otherwise each turn's context is
/// assembled from the model's own earlier predictions. Optionally records
/// an event trace ("predict d t" / "context d t") for ordering checks.
std::vector<std::string> transcribe_dialogue(
    const CaAsrModel<float>& model, const Tokenizer& tok, const Dialogue& dialogue,
    const NoiseCondition& condition, const std::vector<FeatureSequence>* noise_bank,
    bool use_ground_truth_context, std::vector<std::string>* event_log = nullptr,
    std::vector<ContextWindow>* contexts_out = nullptr);

/// Forced-prefix variant for injection tests: predictions for the listed
/// turns are replaced before later contexts are assembled.
std::vector<std::string> transcribe_dialogue_forced(
    const CaAsrModel<float>& model, const Tokenizer& tok, const Dialogue& dialogue,
    const NoiseCondition& condition, const std::vector<FeatureSequence>* noise_bank,
    const std::map<int, std::string>& forced_predictions,
    std::vector<ContextWindow>* contexts_out = nullptr);

/// Corpus evaluation across noise conditions over identical utterance sets.
MetricsReport evaluate(const CaAsrModel<float>& model, const Tokenizer& tok,
                       const std::vector<Dialogue>& test_dialogues,
                       const std::vector<NoiseCondition>& conditions,
                       const std::vector<FeatureSequence>* noise_bank,
                       bool use_ground_truth_context = false);

/// Mean cosine similarity between pooled noisy and clean context encodings
/// under two encoders; the direct measurement of what CNRL changes.
CnrlDiagnostics compare_encodings(const CaAsrModel<float>& before,
                                  const CaAsrModel<float>& after,
                                  const Tokenizer& tok,
                                  const std::vector<NoisyContextPair>& pairs);

}  // namespace caasr

#endif  // CAASR_EVAL_HPP
