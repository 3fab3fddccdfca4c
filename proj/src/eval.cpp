#include "caasr/eval.hpp"

#include <algorithm>
#include <sstream>

#include "caasr/hash.hpp"
#include "caasr/parallel.hpp"

namespace caasr {

using nlohmann::json;

int noise_clip_index(std::uint64_t bank_seed, const std::string& dialogue_id,
                     int turn_index, int bank_size) {
  return static_cast<int>(derive_seed(bank_seed, "noise-assign",
                                      fnv1a64(dialogue_id), turn_index) %
                          static_cast<std::uint64_t>(bank_size));
}

namespace {

Matf condition_frames(const Turn& turn, const std::string& dialogue_id,
                      const NoiseCondition& condition,
                      const std::vector<FeatureSequence>* noise_bank) {
  if (!condition.noise.enabled) return turn.speech.frames;
  if (noise_bank == nullptr || noise_bank->empty()) {
    throw StageError("evaluate: noise condition without a noise bank");
  }
  const int clip = noise_clip_index(condition.noise.noise_bank_seed, dialogue_id,
                                    turn.index, static_cast<int>(noise_bank->size()));
  const auto mixed = mix_noise(
      turn.speech, (*noise_bank)[clip], condition.noise.snr_db,
      derive_seed(condition.noise.noise_bank_seed, "noise-fit-seed",
                  fnv1a64(dialogue_id), turn.index));
  return mixed.frames;
}

std::string predict_turn(const CaAsrModel<float>& model, const Tokenizer& tok,
                         const Dialogue& dialogue, const Turn& turn,
                         const std::map<int, std::string>& transcripts,
                         const NoiseCondition& condition,
                         const std::vector<FeatureSequence>* noise_bank,
                         std::vector<ContextWindow>* contexts_out) {
  if (!turn.has_speech()) {
    throw StageError("transcribe: turn without speech features in " + dialogue.id);
  }
  ContextWindow window;
  if (!model.config().context_ablation) {
    window = assemble_context(dialogue, turn.index, transcripts);
  }
  tokenize_window(tok, window, model.config().max_context_tokens);
  if (contexts_out != nullptr) contexts_out->push_back(window);

  ag::Tape<float> t(false);
  const int fused = model.fuse(
      t,
      model.encode_speech(t, condition_frames(turn, dialogue.id, condition, noise_bank)),
      model.encode_context(t, window.token_ids));
  const auto ids = model.generate(t.val(fused));
  return normalize(tok.decode(ids));
}

}  // namespace

std::vector<std::string> transcribe_dialogue(
    const CaAsrModel<float>& model, const Tokenizer& tok, const Dialogue& dialogue,
    const NoiseCondition& condition, const std::vector<FeatureSequence>* noise_bank,
    bool use_ground_truth_context, std::vector<std::string>* event_log,
    std::vector<ContextWindow>* contexts_out) {
  std::vector<std::string> predictions;
  std::map<int, std::string> transcripts;  // feeds later contexts
  for (const auto& turn : dialogue.turns) {
    if (event_log != nullptr) {
      event_log->push_back("context " + dialogue.id + " t" + std::to_string(turn.index));
    }
    const std::string pred = predict_turn(model, tok, dialogue, turn, transcripts,
                                          condition, noise_bank, contexts_out);
    if (event_log != nullptr) {
      event_log->push_back("predict " + dialogue.id + " t" + std::to_string(turn.index));
    }
    predictions.push_back(pred);
    transcripts[turn.index] =
        use_ground_truth_context ? normalize(turn.user_text) : pred;
  }
  return predictions;
}

std::vector<std::string> transcribe_dialogue_forced(
    const CaAsrModel<float>& model, const Tokenizer& tok, const Dialogue& dialogue,
    const NoiseCondition& condition, const std::vector<FeatureSequence>* noise_bank,
    const std::map<int, std::string>& forced_predictions,
    std::vector<ContextWindow>* contexts_out) {
  std::vector<std::string> predictions;
  std::map<int, std::string> transcripts;
  for (const auto& turn : dialogue.turns) {
    std::string pred = predict_turn(model, tok, dialogue, turn, transcripts,
                                    condition, noise_bank, contexts_out);
    auto it = forced_predictions.find(turn.index);
    if (it != forced_predictions.end()) pred = it->second;
    predictions.push_back(pred);
    transcripts[turn.index] = pred;
  }
  return predictions;
}

MetricsReport evaluate(const CaAsrModel<float>& model, const Tokenizer& tok,
                       const std::vector<Dialogue>& test_dialogues,
                       const std::vector<NoiseCondition>& conditions,
                       const std::vector<FeatureSequence>* noise_bank,
                       bool use_ground_truth_context) {
  if (test_dialogues.empty()) throw StageError("evaluate: empty test set");
  if (conditions.empty()) throw StageError("evaluate: no conditions");

  MetricsReport report;
  for (const auto& condition : conditions) {
    // Dialogues are independent; workers fill a slot per dialogue and the
    // reduction below walks slots in order.
    std::vector<std::vector<std::string>> predictions(test_dialogues.size());
    parallel_for_chunks(static_cast<int>(test_dialogues.size()), [&](int i) {
      predictions[i] = transcribe_dialogue(model, tok, test_dialogues[i], condition,
                                           noise_bank, use_ground_truth_context);
    });

    WerCounts pooled;
    auto& per_dialogue = report.per_dialogue_wer[condition.name];
    for (std::size_t i = 0; i < test_dialogues.size(); ++i) {
      const Dialogue& d = test_dialogues[i];
      WerCounts dialogue_counts;
      for (std::size_t k = 0; k < d.turns.size(); ++k) {
        const std::string ref = normalize(d.turns[k].user_text);
        const std::string& hyp = predictions[i][k];
        EditAlignment a;
        const double w = wer(ref, hyp, &a);
        pooled.substitutions += a.substitutions;
        pooled.deletions += a.deletions;
        pooled.insertions += a.insertions;
        pooled.ref_words += a.ref_len;
        dialogue_counts.substitutions += a.substitutions;
        dialogue_counts.deletions += a.deletions;
        dialogue_counts.insertions += a.insertions;
        dialogue_counts.ref_words += a.ref_len;
        report.per_turn.push_back(TurnRecord{d.id, d.turns[k].index, condition.name,
                                             ref, hyp, w,
                                             static_cast<int>(k)});
      }
      per_dialogue[d.id] = dialogue_counts.value();
    }
    report.condition_wer[condition.name] = pooled.value();
    report.condition_counts[condition.name] = pooled;
  }
  return report;
}

CnrlDiagnostics compare_encodings(const CaAsrModel<float>& before,
                                  const CaAsrModel<float>& after,
                                  const Tokenizer& tok,
                                  const std::vector<NoisyContextPair>& pairs) {
  if (pairs.empty()) throw StageError("compare_encodings: empty pair set");
  CnrlDiagnostics d;
  d.n_pairs = static_cast<int>(pairs.size());
  d.per_pair_before.resize(pairs.size());
  d.per_pair_after.resize(pairs.size());

  const int max_tokens = before.config().max_context_tokens;
  parallel_for_chunks(static_cast<int>(pairs.size()), [&](int i) {
    ContextWindow noisy, clean;
    noisy.entries = pairs[i].noisy_entries;
    clean.entries = pairs[i].clean_entries;
    tokenize_window(tok, noisy, max_tokens);
    tokenize_window(tok, clean, max_tokens);

    auto sim = [&](const CaAsrModel<float>& m) {
      const Vecf n = m.run_pool(m.run_encode_context(noisy.token_ids));
      const Vecf c = m.run_pool(m.run_encode_context(clean.token_ids));
      return 1.0 - cosine_embedding_loss<float>(n, c);
    };
    d.per_pair_before[i] = sim(before);
    d.per_pair_after[i] = sim(after);
  });

  for (std::size_t i = 0; i < pairs.size(); ++i) {
    d.mean_similarity_before += d.per_pair_before[i];
    d.mean_similarity_after += d.per_pair_after[i];
  }
  d.mean_similarity_before /= d.n_pairs;
  d.mean_similarity_after /= d.n_pairs;
  d.delta = d.mean_similarity_after - d.mean_similarity_before;
  return d;
}

json CnrlDiagnostics::to_json() const {
  return json{{"n_pairs", n_pairs},
              {"mean_similarity_before", mean_similarity_before},
              {"mean_similarity_after", mean_similarity_after},
              {"delta", delta}};
}

json MetricsReport::to_json() const {
  json j;
  j["condition_wer"] = condition_wer;
  json counts = json::object();
  for (const auto& [name, c] : condition_counts) {
    counts[name] = {{"substitutions", c.substitutions},
                    {"deletions", c.deletions},
                    {"insertions", c.insertions},
                    {"ref_words", c.ref_words}};
  }
  j["condition_counts"] = counts;
  j["per_dialogue_wer"] = per_dialogue_wer;
  if (!metadata.is_null()) j["metadata"] = metadata;
  return j;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out << "dialogue_id,turn_index,condition,wer,reference,hypothesis\n";
  for (const auto& r : per_turn) {
    out << r.dialogue_id << ',' << r.turn_index << ',' << r.condition << ','
        << r.wer_value << ",\"" << r.reference << "\",\"" << r.hypothesis << "\"\n";
  }
  return out.str();
}

}  // namespace caasr
