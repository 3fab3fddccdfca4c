#ifndef CAASR_TRAINING_HPP
#define CAASR_TRAINING_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "caasr/audio.hpp"
#include "caasr/checkpoint.hpp"
#include "caasr/corpus.hpp"
#include "caasr/model.hpp"
#include "caasr/optimizer.hpp"

namespace caasr {

enum class Stage { kPretrain, kFinetune, kCnrl };
enum class SelectionMetric { kValLoss, kDevWer, kCnrlDevLoss };
enum class OptimizerKind { kAdam, kAdamW };

struct StageConfig {
  Stage stage = Stage::kFinetune;
  double lr = 2e-5;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double grad_clip = 1.0;
  int batch_size = 64;
  int max_epochs = 10;
  SelectionMetric selection_metric = SelectionMetric::kDevWer;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::uint64_t seed = 0;

  // Reference hyperparameters for the three stages.
  static StageConfig pretrain_defaults() {
    StageConfig c;
    c.stage = Stage::kPretrain;
    c.lr = 5e-5;
    c.weight_decay = 1e-5;
    c.optimizer = OptimizerKind::kAdamW;
    c.batch_size = 32;
    c.max_epochs = 10;
    c.selection_metric = SelectionMetric::kValLoss;
    return c;
  }
  static StageConfig finetune_defaults() {
    StageConfig c;
    c.stage = Stage::kFinetune;
    c.lr = 2e-5;
    c.batch_size = 64;
    c.max_epochs = 10;
    c.selection_metric = SelectionMetric::kDevWer;
    return c;
  }
  static StageConfig cnrl_defaults() {
    StageConfig c;
    c.stage = Stage::kCnrl;
    c.lr = 5e-4;
    c.batch_size = 128;
    c.max_epochs = 5;
    c.selection_metric = SelectionMetric::kCnrlDevLoss;
    return c;
  }

  OptimizerConfig optimizer_config() const {
    OptimizerConfig oc;
    oc.lr = lr;
    oc.beta1 = beta1;
    oc.beta2 = beta2;
    oc.weight_decay = weight_decay;
    oc.decoupled_weight_decay = optimizer == OptimizerKind::kAdamW;
    oc.grad_clip = grad_clip;
    return oc;
  }
};

struct EpochMetric {
  int epoch = 0;            // 1-based
  double train_loss = 0.0;
  double selection_value = 0.0;  // val loss, dev WER or dev cosine loss
};

struct TrainOutput {
  Checkpoint checkpoint;
  std::vector<EpochMetric> curve;
  int best_epoch = 0;
  double best_value = 0.0;
  double seconds_per_epoch = 0.0;
};

/// Noisy/clean context pair for one turn; the unit CNRL trains on.
struct NoisyContextPair {
  std::string dialogue_id;
  int turn_index = 0;
  std::vector<ContextEntry> noisy_entries;
  std::vector<ContextEntry> clean_entries;
  double measured_wer = 0.0;
};

/// Pooled WER of a pair's user entries (noisy hypotheses vs clean refs).
double context_pair_wer(const std::vector<ContextEntry>& noisy,
                        const std::vector<ContextEntry>& clean);

struct CnrlVariant {
  enum Tag { kS1, kS2, kS3, kS4 };
  Tag tag = kS4;
  double per_word_drop_p = 0.10;
  double target_wer = 0.065;

  static CnrlVariant parse(const std::string& name);
  std::string name() const;
};

// --- stage 1: decoder pre-training on dialogue text ------------------------

/// Trains context encoder + decoder to predict the next user utterance from
/// the history. Turn-1 examples participate with a BOS-only context.
/// Returns the epoch checkpoint with the lowest validation loss.
TrainOutput pretrain_decoder(const std::vector<Dialogue>& train_dialogues,
                             const std::vector<Dialogue>& dev_dialogues,
                             const Tokenizer& tok, const ModelConfig& model_cfg,
                             const StageConfig& cfg);

// --- stage 2: ASR fine-tuning with audio masking ---------------------------

enum class DecoderInit { kRandom, kPretrained };

struct FinetuneOptions {
  DecoderInit init = DecoderInit::kRandom;
  const Checkpoint* pretrained = nullptr;  // required for kPretrained
  MaskConfig mask;
  /// Feed the context encoder BOS only, in training and evaluation; the
  /// speech-only baseline configuration.
  bool context_ablation = false;
};

/// Joint training of the full network with teacher-forced cross entropy and
/// ground-truth contexts. Dev WER is measured each epoch on clean audio;
/// the best-dev-WER epoch's parameters are returned. Masking applies to
/// training batches only.
TrainOutput finetune_asr(const std::vector<Dialogue>& train_dialogues,
                         const std::vector<Dialogue>& dev_dialogues,
                         const Tokenizer& tok, const ModelConfig& model_cfg,
                         const FinetuneOptions& options, const StageConfig& cfg);

// --- noisy context generation ----------------------------------------------

struct NoisyGenConfig {
  int folds = 10;
  StageConfig fold_stage;  // typically fewer epochs than the main fine-tune
  FinetuneOptions fold_options;
  std::uint64_t seed = 0;
};

struct NoisyGenResult {
  std::vector<NoisyContextPair> pairs;
  double transcript_corpus_wer = 0.0;  // pooled over all held-out utterances
  FoldAssignment folds;
};

/// Rotating self-transcription: train on k-1 folds, transcribe the held-out
/// fold autoregressively, union over folds. Pairs are emitted for every
/// turn with a non-empty context.
NoisyGenResult generate_noisy_contexts(const std::vector<Dialogue>& train_dialogues,
                                       const std::vector<Dialogue>& dev_dialogues,
                                       const Tokenizer& tok,
                                       const ModelConfig& model_cfg,
                                       const NoisyGenConfig& cfg);

struct FilterResult {
  std::vector<NoisyContextPair> kept;
  int removed = 0;
  double removed_fraction = 0.0;
};

FilterResult filter_noisy(const std::vector<NoisyContextPair>& pairs,
                          double max_wer = 0.20);

// --- word drop and the S1-S4 recipes ---------------------------------------

/// Deletes user-entry words in rounds of independent per-word coin flips
/// until the context-level deletion WER reaches target_wer or round_cap
/// rounds have run. Scanning order is seeded; a deletion never empties an
/// utterance. Agent entries pass through untouched.
std::vector<ContextEntry> word_drop(const std::vector<ContextEntry>& clean_context,
                                    double per_word_p, double target_wer,
                                    std::uint64_t seed, int round_cap = 20);

/// Golden (noisy == clean) pairs for every turn with context; the S1 recipe
/// starts from these.
std::vector<NoisyContextPair> make_clean_pairs(const std::vector<Dialogue>& dialogues);

/// S1: word drop over golden contexts (applied once per dialogue on its full
/// context, per-turn pairs sliced from it). S2: ASR noise kept only in the
/// last user entry. S3: pairs as generated. S4: S3 plus word drop on any
/// user entry that came out error-free.
std::vector<NoisyContextPair> build_cnrl_set(const std::vector<NoisyContextPair>& pairs,
                                             const CnrlVariant& variant,
                                             std::uint64_t seed);

// --- stage 3: context noise representation learning -------------------------

/// Fine-tunes only the context encoder so noisy-context encodings match the
/// frozen pre-CNRL encodings of the clean contexts. Every other parameter
/// array is untouched, byte for byte.
TrainOutput train_cnrl(const std::vector<NoisyContextPair>& pairs,
                       const std::vector<NoisyContextPair>& dev_pairs,
                       const Checkpoint& base, const StageConfig& cfg);

/// Ablation baseline: ordinary ASR fine-tuning over all parameters with S4
/// contexts in place of the ground-truth ones.
TrainOutput full_finetune_with_noise(const std::vector<NoisyContextPair>& pairs,
                                     const std::vector<Dialogue>& corpus,
                                     const std::vector<Dialogue>& dev_dialogues,
                                     const Checkpoint& base, const MaskConfig& mask,
                                     const StageConfig& cfg);

// --- persistence -------------------------------------------------------------

void save_pairs_jsonl(const std::filesystem::path& path,
                      const std::vector<NoisyContextPair>& pairs);
std::vector<NoisyContextPair> load_pairs_jsonl(const std::filesystem::path& path);

}  // namespace caasr

#endif  // CAASR_TRAINING_HPP
