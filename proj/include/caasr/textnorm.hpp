#ifndef CAASR_TEXTNORM_HPP
#define CAASR_TEXTNORM_HPP

#include <string>
#include <utility>
#include <vector>

namespace caasr {

/// Transcription post-processing applied before any WER computation:
/// lowercase, expand a fixed contraction table ("i've" -> "i have"), strip
/// punctuation, spell out digit runs as cardinals ("2" -> "two"), collapse
/// whitespace. Idempotent.
std::string normalize(const std::string& text);

/// Cardinal spelling for a non-negative integer written in digits.
/// Values at or above 10^15 fall back to digit-by-digit reading.
std::string spell_number(const std::string& digits);

std::vector<std::string> split_words(const std::string& text);

enum class EditKind { kMatch, kSubstitute, kDelete, kInsert };

struct EditOp {
  EditKind kind;
  std::string ref_word;  // empty for insertions
  std::string hyp_word;  // empty for deletions
};

/// Minimal-cost word alignment (unit costs for substitute/delete/insert).
struct EditAlignment {
  std::vector<EditOp> ops;
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;
  int matches = 0;
  int ref_len = 0;

  int errors() const { return substitutions + deletions + insertions; }
};

EditAlignment align_words(const std::vector<std::string>& ref,
                          const std::vector<std::string>& hyp);

/// Word error rate (S+D+I)/N over normalized text. An empty reference with a
/// non-empty hypothesis counts each inserted word against max(1, N).
double wer(const std::string& ref, const std::string& hyp,
           EditAlignment* alignment = nullptr);

struct WerCounts {
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;
  long ref_words = 0;

  long errors() const { return substitutions + deletions + insertions; }
  double value() const {
    return static_cast<double>(errors()) /
           static_cast<double>(ref_words > 0 ? ref_words : 1);
  }
};

/// Pooled (micro-averaged) corpus WER: total errors over total reference
/// words, not a mean of per-utterance rates.
double corpus_wer(const std::vector<std::pair<std::string, std::string>>& pairs,
                  WerCounts* counts = nullptr);

}  // namespace caasr

#endif  // CAASR_TEXTNORM_HPP
