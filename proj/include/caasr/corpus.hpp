#ifndef CAASR_CORPUS_HPP
#define CAASR_CORPUS_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "caasr/audio.hpp"

namespace caasr {

struct Turn {
  int index = 0;  // 1-based
  std::string user_text;
  std::string agent_text;  // may be empty on the final turn
  FeatureSequence speech;  // empty until synthesized

  bool has_speech() const { return speech.frame_count() > 0; }
};

struct Dialogue {
  std::string id;
  std::vector<Turn> turns;
};

enum class Role { kUser, kAgent };

struct ContextEntry {
  Role role;
  std::string text;
};

/// Accumulated dialogue history before some turn: transcripts and agent
/// responses in strict user/agent alternation, starting with user.
struct ContextWindow {
  std::vector<ContextEntry> entries;
  std::vector<int> token_ids;  // filled by tokenize_window
};

struct FoldAssignment {
  int k = 0;
  std::map<std::string, int> membership;  // dialogue id -> fold in [0, k)

  std::vector<std::vector<std::string>> held_out_ids() const;
};

/// Slot/value grammar the synthetic generator draws from.
struct SlotSpec {
  std::string name;
  std::string question;         // agent prompt for this slot
  std::string answer_template;  // contains {v}
  std::vector<std::string> values;
};

struct DomainSpec {
  std::string name;
  std::string noun;  // "restaurant", "hotel", ...
  std::vector<SlotSpec> slots;
  std::string confirm_template;  // agent summary, {name} {count} {day} ...
  std::string final_template;    // user confirmation echoing the summary
};

struct GenerationConfig {
  int n_dialogues = 0;
  int turns_min = 3;
  int turns_max = 6;
  std::uint64_t seed = 0;
  /// Slot/value templates; empty means the built-in task-oriented grammar.
  std::vector<DomainSpec> vocabulary;
};

const std::vector<DomainSpec>& builtin_domains();

/// Deterministic synthetic task-oriented dialogues. Agent questions predict
/// the slot type of the following user answer, and the closing turn echoes
/// values mentioned earlier, so history genuinely informs transcription.
std::vector<Dialogue> generate_synthetic_dialogues(const GenerationConfig& cfg);

/// Fill Turn::speech for every user turn.
void synthesize_corpus_speech(std::vector<Dialogue>& dialogues,
                              std::uint64_t seed, int feature_dim = 32,
                              float frame_rate_hz = 50.0f);

/// History (u_1, r_1, ..., u_{t-1}, r_{t-1}) for the given turn. Transcripts
/// are supplied by the caller: ground truth during training, model output
/// during inference. Empty window for turn 1.
ContextWindow assemble_context(const Dialogue& dialogue, int turn_index,
                               const std::map<int, std::string>& user_transcripts);

std::map<int, std::string> ground_truth_transcripts(const Dialogue& dialogue,
                                                    int up_to_turn);

/// Keeps the last max_tokens ids, order preserved. Idempotent.
std::vector<int> truncate_context(std::vector<int> token_ids,
                                  int max_tokens = 1024);

/// Closed-vocabulary whitespace tokenizer over normalized text.
class Tokenizer {
 public:
  enum ReservedId {
    kPad = 0,
    kBos = 1,
    kEos = 2,
    kUnk = 3,
    kRoleUser = 4,
    kRoleAgent = 5,
    kMaskTok = 6,
    kNumReserved = 7,
  };

  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> words);

  static Tokenizer build(const std::vector<Dialogue>& training_corpus);

  /// Word ids for normalized text; unknown words map to kUnk. No BOS/EOS.
  std::vector<int> encode_text(const std::string& text) const;

  /// Inverse of encode_text on in-vocabulary input: lexical words joined by
  /// spaces. Structural ids are skipped; kUnk renders as "<unk>".
  std::string decode(const std::vector<int>& ids) const;

  /// BOS followed by a role marker and the words of each entry. An empty
  /// window encodes as the single BOS token.
  std::vector<int> encode_window(const std::vector<ContextEntry>& entries) const;

  int vocab_size() const { return kNumReserved + static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  std::string to_json() const;
  static Tokenizer from_json(const std::string& text);

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

/// Fills window.token_ids from its entries, truncated to max_tokens.
void tokenize_window(const Tokenizer& tok, ContextWindow& window,
                     int max_tokens = 1024);

FoldAssignment split_folds(const std::vector<Dialogue>& dialogues, int k,
                           std::uint64_t seed);

/// Dev sampling at dialogue granularity; n_dev counts dialogues.
std::pair<std::vector<Dialogue>, std::vector<Dialogue>> split_train_dev(
    const std::vector<Dialogue>& dialogues, int n_dev, std::uint64_t seed);

// --- persistence ---------------------------------------------------------

/// One JSON object per line: {"id", "turns": [{"index", "user_text",
/// "agent_text", "speech_ref"}]}. Feature binaries go under features_dir
/// when speech is present.
void save_dialogues_jsonl(const std::filesystem::path& jsonl_path,
                          const std::vector<Dialogue>& dialogues,
                          const std::filesystem::path& features_dir);

std::vector<Dialogue> load_dialogues_jsonl(const std::filesystem::path& jsonl_path,
                                           bool load_speech = true);

void save_fold_assignment(const std::filesystem::path& path,
                          const FoldAssignment& folds);
FoldAssignment load_fold_assignment(const std::filesystem::path& path);

}  // namespace caasr

#endif  // CAASR_CORPUS_HPP
