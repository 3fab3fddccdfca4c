#include "caasr/training.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "caasr/eval.hpp"
#include "caasr/hash.hpp"
#include "caasr/parallel.hpp"
#include "caasr/rng.hpp"
#include "caasr/textnorm.hpp"

namespace caasr {

using nlohmann::json;

double context_pair_wer(const std::vector<ContextEntry>& noisy,
                        const std::vector<ContextEntry>& clean) {
  if (noisy.size() != clean.size()) {
    throw std::invalid_argument("context_pair_wer: entry count mismatch");
  }
  std::vector<std::pair<std::string, std::string>> user_pairs;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean[i].role != noisy[i].role) {
      throw std::invalid_argument("context_pair_wer: role mismatch");
    }
    if (clean[i].role == Role::kUser) {
      user_pairs.emplace_back(clean[i].text, noisy[i].text);
    }
  }
  if (user_pairs.empty()) return 0.0;
  return corpus_wer(user_pairs);
}

CnrlVariant CnrlVariant::parse(const std::string& name) {
  CnrlVariant v;
  if (name == "S1") v.tag = kS1;
  else if (name == "S2") v.tag = kS2;
  else if (name == "S3") v.tag = kS3;
  else if (name == "S4") v.tag = kS4;
  else throw ConfigError("unknown CNRL variant: " + name);
  return v;
}

std::string CnrlVariant::name() const {
  switch (tag) {
    case kS1: return "S1";
    case kS2: return "S2";
    case kS3: return "S3";
    case kS4: return "S4";
  }
  return "?";
}

namespace {

constexpr int kGradChunks = 4;

// --- deterministic minibatch machinery -------------------------------------
//
// Samples are partitioned into a fixed number of chunks; each chunk
// accumulates its gradients locally in ascending sample order and the
// chunks are reduced in index order afterwards. The result is bit-identical
// for any worker count.
struct BatchRunner {
  explicit BatchRunner(const ParamStore<float>& params) {
    for (int c = 0; c < kGradChunks; ++c) chunk_grads.push_back(params.zero_grads());
    batch_grads = params.zero_grads();
  }

  /// Mean loss over the batch; gradients (scaled by 1/batch) land in
  /// batch_grads.
  double run(const std::vector<int>& batch,
             const std::function<int(ag::Tape<float>&, int)>& loss_builder) {
    const int n = static_cast<int>(batch.size());
    const int chunks = std::min(kGradChunks, n);
    std::vector<double> chunk_loss(chunks, 0.0);
    parallel_for_chunks(chunks, [&](int c) {
      auto& grads = chunk_grads[c];
      for (auto& g : grads) g.setZero();
      const int begin = static_cast<int>(static_cast<long>(n) * c / chunks);
      const int end = static_cast<int>(static_cast<long>(n) * (c + 1) / chunks);
      for (int i = begin; i < end; ++i) {
        ag::Tape<float> tape(true);
        const int loss = loss_builder(tape, batch[i]);
        chunk_loss[c] += tape.val(loss)(0, 0);
        tape.backward(loss, &grads);
      }
    });

    double total = 0.0;
    for (auto& g : batch_grads) g.setZero();
    for (int c = 0; c < chunks; ++c) {
      total += chunk_loss[c];
      for (std::size_t p = 0; p < batch_grads.size(); ++p) {
        batch_grads[p] += chunk_grads[c][p];
      }
    }
    const float inv = 1.0f / static_cast<float>(n);
    for (auto& g : batch_grads) g *= inv;
    return total / n;
  }

  std::vector<std::vector<Matf>> chunk_grads;
  std::vector<Matf> batch_grads;
};

std::vector<std::vector<int>> make_batches(int n, int batch_size, Rng& rng) {
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int at = 0; at < n; at += batch_size) {
    const int end = std::min(n, at + batch_size);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

// --- example construction ---------------------------------------------------

struct AsrExample {
  std::string dialogue_id;
  int turn_index = 0;
  Matf frames;
  std::vector<int> ctx_ids;
  std::vector<int> target_ids;
  std::string reference;  // normalized ground truth
};

std::vector<int> context_ids_for_turn(const Dialogue& d, int turn_index,
                                      const Tokenizer& tok, const ModelConfig& mc) {
  if (mc.context_ablation) return {Tokenizer::kBos};
  ContextWindow w =
      assemble_context(d, turn_index, ground_truth_transcripts(d, turn_index));
  tokenize_window(tok, w, mc.max_context_tokens);
  return w.token_ids;
}

std::vector<AsrExample> build_asr_examples(const std::vector<Dialogue>& dialogues,
                                           const Tokenizer& tok,
                                           const ModelConfig& mc) {
  std::vector<AsrExample> out;
  for (const auto& d : dialogues) {
    for (const auto& turn : d.turns) {
      if (!turn.has_speech()) {
        throw StageError("finetune: missing speech features for " + d.id + " turn " +
                         std::to_string(turn.index));
      }
      AsrExample ex;
      ex.dialogue_id = d.id;
      ex.turn_index = turn.index;
      ex.frames = turn.speech.frames;
      ex.ctx_ids = context_ids_for_turn(d, turn.index, tok, mc);
      ex.reference = normalize(turn.user_text);
      ex.target_ids = tok.encode_text(ex.reference);
      if (ex.target_ids.empty()) {
        throw StageError("finetune: empty target in " + d.id);
      }
      if (static_cast<int>(ex.target_ids.size()) > mc.max_decode_len) {
        throw StageError("finetune: utterance longer than max_decode_len in " + d.id +
                         " turn " + std::to_string(turn.index));
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

struct TextExample {
  std::vector<int> ctx_ids;
  std::vector<int> target_ids;
};

std::vector<TextExample> build_pretrain_examples(const std::vector<Dialogue>& dialogues,
                                                 const Tokenizer& tok,
                                                 const ModelConfig& mc,
                                                 int* skipped_overlong = nullptr) {
  std::vector<TextExample> out;
  bool any_context = false;
  for (const auto& d : dialogues) {
    if (d.turns.size() >= 2) any_context = true;
    for (const auto& turn : d.turns) {
      TextExample ex;
      ContextWindow w = assemble_context(d, turn.index,
                                         ground_truth_transcripts(d, turn.index));
      tokenize_window(tok, w, mc.max_context_tokens);
      ex.ctx_ids = w.token_ids;
      ex.target_ids = tok.encode_text(normalize(turn.user_text));
      if (ex.target_ids.empty()) continue;
      if (static_cast<int>(ex.target_ids.size()) > mc.max_decode_len) {
        // External dialogue text may exceed the decoder budget; skip it.
        if (skipped_overlong != nullptr) ++(*skipped_overlong);
        continue;
      }
      out.push_back(std::move(ex));
    }
  }
  if (out.empty() || !any_context) {
    throw StageError("pretrain: corpus yields no contextual examples");
  }
  return out;
}

std::vector<char> mask_union(const CaAsrModel<float>& model,
                             const std::vector<std::string>& prefixes) {
  std::vector<char> mask(model.params().values.size(), 0);
  for (const auto& prefix : prefixes) {
    for (int id : model.params().ids_with_prefix(prefix)) mask[id] = 1;
  }
  return mask;
}

// Mean teacher-forced loss without dropout or gradients, chunk-parallel.
double mean_eval_loss(const CaAsrModel<float>& model,
                      const std::function<int(ag::Tape<float>&, int)>& builder,
                      int n) {
  const int chunks = std::min(kGradChunks, std::max(1, n));
  std::vector<double> sums(chunks, 0.0);
  parallel_for_chunks(chunks, [&](int c) {
    const int begin = static_cast<int>(static_cast<long>(n) * c / chunks);
    const int end = static_cast<int>(static_cast<long>(n) * (c + 1) / chunks);
    for (int i = begin; i < end; ++i) {
      ag::Tape<float> t(false);
      sums[c] += t.val(builder(t, i))(0, 0);
    }
  });
  double total = 0.0;
  for (double s : sums) total += s;
  return total / n;
}

double dev_wer_of(const CaAsrModel<float>& model, const Tokenizer& tok,
                  const std::vector<AsrExample>& dev_examples) {
  std::vector<std::pair<std::string, std::string>> pairs(dev_examples.size());
  parallel_for_chunks(static_cast<int>(dev_examples.size()), [&](int i) {
    const AsrExample& ex = dev_examples[i];
    ag::Tape<float> t(false);
    const int fused = model.fuse(t, model.encode_speech(t, ex.frames),
                                 model.encode_context(t, ex.ctx_ids));
    pairs[i] = {ex.reference, tok.decode(model.generate(t.val(fused)))};
  });
  return corpus_wer(pairs);
}

Checkpoint snapshot(const CaAsrModel<float>& model, const Tokenizer& tok,
                    const std::string& stage) {
  return Checkpoint::of(model, tok, stage);
}

}  // namespace

// --- stage 1 -----------------------------------------------------------------

TrainOutput pretrain_decoder(const std::vector<Dialogue>& train_dialogues,
                             const std::vector<Dialogue>& dev_dialogues,
                             const Tokenizer& tok, const ModelConfig& model_cfg,
                             const StageConfig& cfg) {
  ModelConfig mc = model_cfg;
  mc.vocab_size = tok.vocab_size();
  CaAsrModel<float> model(mc, derive_seed(cfg.seed, "pretrain-init"));

  int skipped = 0;
  const auto train_examples = build_pretrain_examples(train_dialogues, tok, mc, &skipped);
  const auto dev_examples = build_pretrain_examples(dev_dialogues, tok, mc, &skipped);

  auto eval_builder = [&](ag::Tape<float>& t, int i) {
    const TextExample& ex = dev_examples[i];
    return model.decode_loss(t, model.encode_context(t, ex.ctx_ids), ex.target_ids);
  };

  const auto trainable = mask_union(model, {"ctx_enc.", "decoder."});
  AdamOptimizer<float> opt(model.params(), cfg.optimizer_config());
  BatchRunner runner(model.params());

  TrainOutput out;
  out.best_value = std::numeric_limits<double>::infinity();
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "pretrain-shuffle", epoch));
    double epoch_loss = 0.0;
    int batches = 0;
    for (const auto& batch :
         make_batches(static_cast<int>(train_examples.size()), cfg.batch_size,
                      shuffle_rng)) {
      epoch_loss += runner.run(batch, [&](ag::Tape<float>& t, int i) {
        const TextExample& ex = train_examples[i];
        Rng drop(derive_seed(cfg.seed, "pretrain-dropout", epoch, i));
        Rng* rng = mc.dropout > 0 ? &drop : nullptr;
        return model.decode_loss(t, model.encode_context(t, ex.ctx_ids, rng),
                                 ex.target_ids, rng);
      });
      opt.step(model.mutable_params(), runner.batch_grads, trainable);
      ++batches;
    }
    const double val_loss =
        mean_eval_loss(model, eval_builder, static_cast<int>(dev_examples.size()));
    out.curve.push_back({epoch, epoch_loss / std::max(1, batches), val_loss});
    if (val_loss < out.best_value) {
      out.best_value = val_loss;
      out.best_epoch = epoch;
      out.checkpoint = snapshot(model, tok, "pretrain");
    }
  }
  if (cfg.max_epochs == 0) out.checkpoint = snapshot(model, tok, "pretrain");
  const auto t1 = std::chrono::steady_clock::now();
  out.seconds_per_epoch = std::chrono::duration<double>(t1 - t0).count() /
                          std::max(1, cfg.max_epochs);
  return out;
}

// --- stage 2 -----------------------------------------------------------------

TrainOutput finetune_asr(const std::vector<Dialogue>& train_dialogues,
                         const std::vector<Dialogue>& dev_dialogues,
                         const Tokenizer& tok, const ModelConfig& model_cfg,
                         const FinetuneOptions& options, const StageConfig& cfg) {
  ModelConfig mc = model_cfg;
  mc.vocab_size = tok.vocab_size();
  mc.context_ablation = options.context_ablation;
  CaAsrModel<float> model(mc, derive_seed(cfg.seed, "finetune-init"));

  if (options.init == DecoderInit::kPretrained) {
    if (options.pretrained == nullptr) {
      throw StageError("finetune: pretrained init requested without a checkpoint");
    }
    // Context encoder and decoder come over byte-exactly from stage 1.
    const ParamStore<float>& src = options.pretrained->params;
    for (const std::string prefix : {"ctx_enc.", "decoder."}) {
      for (int id : model.params().ids_with_prefix(prefix)) {
        const std::string& name = model.params().names[id];
        model.mutable_params().values[id] = src.values[src.find(name)];
      }
    }
  }

  const auto train_examples = build_asr_examples(train_dialogues, tok, mc);
  const auto dev_examples = build_asr_examples(dev_dialogues, tok, mc);

  const auto trainable = model.trainable_mask("");
  AdamOptimizer<float> opt(model.params(), cfg.optimizer_config());
  BatchRunner runner(model.params());

  TrainOutput out;
  out.best_value = std::numeric_limits<double>::infinity();
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "finetune-shuffle", epoch));
    double epoch_loss = 0.0;
    int batches = 0;
    for (const auto& batch :
         make_batches(static_cast<int>(train_examples.size()), cfg.batch_size,
                      shuffle_rng)) {
      epoch_loss += runner.run(batch, [&](ag::Tape<float>& t, int i) {
        const AsrExample& ex = train_examples[i];
        FeatureSequence spoken;
        spoken.frames = ex.frames;
        const auto [masked, report] = mask_audio(
            spoken, options.mask, derive_seed(cfg.seed, "audio-mask", epoch, i));
        Rng drop(derive_seed(cfg.seed, "finetune-dropout", epoch, i));
        Rng* rng = mc.dropout > 0 ? &drop : nullptr;
        const int fused = model.fuse(t, model.encode_speech(t, masked.frames, rng),
                                     model.encode_context(t, ex.ctx_ids, rng), rng);
        return model.decode_loss(t, fused, ex.target_ids, rng);
      });
      opt.step(model.mutable_params(), runner.batch_grads, trainable);
      ++batches;
    }
    const double dev_wer = dev_wer_of(model, tok, dev_examples);
    out.curve.push_back({epoch, epoch_loss / std::max(1, batches), dev_wer});
    if (dev_wer < out.best_value) {
      out.best_value = dev_wer;
      out.best_epoch = epoch;
      out.checkpoint = snapshot(
          model, tok, options.context_ablation ? "finetune_speech_only" : "finetune");
    }
  }
  if (cfg.max_epochs == 0) {
    out.checkpoint = snapshot(
        model, tok, options.context_ablation ? "finetune_speech_only" : "finetune");
  }
  const auto t1 = std::chrono::steady_clock::now();
  out.seconds_per_epoch = std::chrono::duration<double>(t1 - t0).count() /
                          std::max(1, cfg.max_epochs);
  return out;
}

// --- noisy context generation -------------------------------------------------

NoisyGenResult generate_noisy_contexts(const std::vector<Dialogue>& train_dialogues,
                                       const std::vector<Dialogue>& dev_dialogues,
                                       const Tokenizer& tok,
                                       const ModelConfig& model_cfg,
                                       const NoisyGenConfig& cfg) {
  NoisyGenResult result;
  result.folds = split_folds(train_dialogues, cfg.folds, derive_seed(cfg.seed, "folds"));

  std::map<std::string, const Dialogue*> by_id;
  for (const auto& d : train_dialogues) by_id[d.id] = &d;

  const auto held_out = result.folds.held_out_ids();
  WerCounts transcript_counts;
  const NoiseCondition clean = NoiseCondition::clean();

  for (int f = 0; f < cfg.folds; ++f) {
    std::set<std::string> held(held_out[f].begin(), held_out[f].end());
    std::vector<Dialogue> in_fold_train;
    for (const auto& d : train_dialogues) {
      if (!held.count(d.id)) in_fold_train.push_back(d);
    }

    StageConfig fold_cfg = cfg.fold_stage;
    fold_cfg.seed = derive_seed(cfg.seed, "fold-train", f);
    const TrainOutput fold_out = finetune_asr(in_fold_train, dev_dialogues, tok,
                                              model_cfg, cfg.fold_options, fold_cfg);
    const CaAsrModel<float> fold_model = fold_out.checkpoint.to_model();

    // Transcribe held-out dialogues in parallel; slots keep fold order.
    std::vector<const Dialogue*> held_dialogues;
    for (const auto& id : held_out[f]) held_dialogues.push_back(by_id.at(id));
    std::vector<std::vector<std::string>> fold_preds(held_dialogues.size());
    parallel_for_chunks(static_cast<int>(held_dialogues.size()), [&](int i) {
      fold_preds[i] = transcribe_dialogue(fold_model, tok, *held_dialogues[i], clean,
                                          nullptr, /*use_ground_truth_context=*/false);
    });

    for (std::size_t i = 0; i < held_dialogues.size(); ++i) {
      const Dialogue& d = *held_dialogues[i];
      const auto& preds = fold_preds[i];
      for (std::size_t k = 0; k < d.turns.size(); ++k) {
        EditAlignment a;
        wer(d.turns[k].user_text, preds[k], &a);
        transcript_counts.substitutions += a.substitutions;
        transcript_counts.deletions += a.deletions;
        transcript_counts.insertions += a.insertions;
        transcript_counts.ref_words += a.ref_len;
      }
      for (int t = 2; t <= static_cast<int>(d.turns.size()); ++t) {
        NoisyContextPair pair;
        pair.dialogue_id = d.id;
        pair.turn_index = t;
        for (int k = 1; k < t; ++k) {
          pair.noisy_entries.push_back({Role::kUser, preds[k - 1]});
          pair.noisy_entries.push_back({Role::kAgent, d.turns[k - 1].agent_text});
          pair.clean_entries.push_back({Role::kUser, normalize(d.turns[k - 1].user_text)});
          pair.clean_entries.push_back({Role::kAgent, d.turns[k - 1].agent_text});
        }
        pair.measured_wer = context_pair_wer(pair.noisy_entries, pair.clean_entries);
        result.pairs.push_back(std::move(pair));
      }
    }
  }
  result.transcript_corpus_wer = transcript_counts.value();
  return result;
}

FilterResult filter_noisy(const std::vector<NoisyContextPair>& pairs, double max_wer) {
  FilterResult r;
  for (const auto& p : pairs) {
    if (p.measured_wer > max_wer) {
      ++r.removed;
    } else {
      r.kept.push_back(p);
    }
  }
  r.removed_fraction =
      pairs.empty() ? 0.0 : static_cast<double>(r.removed) / pairs.size();
  return r;
}

// --- word drop and CNRL data recipes -------------------------------------------

namespace {

struct DropState {
  // Per-entry alive word lists for the user entries; agent entries fixed.
  std::vector<std::vector<std::pair<std::string, bool>>> user_words;
  std::vector<int> alive_counts;
  int total_ref = 0;
  int deleted = 0;
};

DropState init_drop_state(const std::vector<ContextEntry>& entries) {
  DropState st;
  for (const auto& e : entries) {
    if (e.role != Role::kUser) continue;
    std::vector<std::pair<std::string, bool>> words;
    for (const auto& w : split_words(e.text)) words.emplace_back(w, true);
    st.total_ref += static_cast<int>(words.size());
    st.alive_counts.push_back(static_cast<int>(words.size()));
    st.user_words.push_back(std::move(words));
  }
  return st;
}

std::vector<ContextEntry> rebuild_entries(const std::vector<ContextEntry>& entries,
                                          const DropState& st) {
  std::vector<ContextEntry> out;
  std::size_t ui = 0;
  for (const auto& e : entries) {
    if (e.role != Role::kUser) {
      out.push_back(e);
      continue;
    }
    std::ostringstream text;
    bool first = true;
    for (const auto& [word, alive] : st.user_words[ui]) {
      if (!alive) continue;
      if (!first) text << ' ';
      text << word;
      first = false;
    }
    out.push_back({Role::kUser, text.str()});
    ++ui;
  }
  return out;
}

}  // namespace

std::vector<ContextEntry> word_drop(const std::vector<ContextEntry>& clean_context,
                                    double per_word_p, double target_wer,
                                    std::uint64_t seed, int round_cap) {
  DropState st = init_drop_state(clean_context);
  if (st.total_ref == 0) {
    throw std::invalid_argument("word_drop: context has no user words");
  }

  Rng rng(derive_seed(seed, "word-drop"));
  for (int round = 0; round < round_cap; ++round) {
    if (static_cast<double>(st.deleted) / st.total_ref >= target_wer) break;
    // Scan the currently alive words in a fresh random order each round so
    // deletions spread uniformly over the context.
    std::vector<std::pair<int, int>> slots;
    for (std::size_t e = 0; e < st.user_words.size(); ++e) {
      for (std::size_t w = 0; w < st.user_words[e].size(); ++w) {
        if (st.user_words[e][w].second) {
          slots.emplace_back(static_cast<int>(e), static_cast<int>(w));
        }
      }
    }
    rng.shuffle(slots);
    bool reached = false;
    for (const auto& [e, w] : slots) {
      if (!rng.bernoulli(per_word_p)) continue;
      if (st.alive_counts[e] <= 1) continue;  // never empty an utterance
      st.user_words[e][w].second = false;
      --st.alive_counts[e];
      ++st.deleted;
      if (static_cast<double>(st.deleted) / st.total_ref >= target_wer) {
        reached = true;
        break;
      }
    }
    if (reached) break;
  }
  return rebuild_entries(clean_context, st);
}

namespace {

// Drops at least one word from a single utterance when it has more than one,
// used by the S4 recipe on error-free entries.
std::string drop_from_entry(const std::string& text, double per_word_p,
                            std::uint64_t seed, int round_cap = 20) {
  const std::vector<ContextEntry> one = {{Role::kUser, text}};
  if (split_words(text).size() <= 1) return text;
  const auto dropped = word_drop(one, per_word_p, 1e-9, seed, round_cap);
  return dropped[0].text;
}

}  // namespace

std::vector<NoisyContextPair> make_clean_pairs(const std::vector<Dialogue>& dialogues) {
  std::vector<NoisyContextPair> pairs;
  for (const auto& d : dialogues) {
    for (int t = 2; t <= static_cast<int>(d.turns.size()); ++t) {
      NoisyContextPair p;
      p.dialogue_id = d.id;
      p.turn_index = t;
      for (int k = 1; k < t; ++k) {
        const std::string user = normalize(d.turns[k - 1].user_text);
        p.clean_entries.push_back({Role::kUser, user});
        p.clean_entries.push_back({Role::kAgent, d.turns[k - 1].agent_text});
      }
      p.noisy_entries = p.clean_entries;
      p.measured_wer = 0.0;
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

std::vector<NoisyContextPair> build_cnrl_set(const std::vector<NoisyContextPair>& pairs,
                                             const CnrlVariant& variant,
                                             std::uint64_t seed) {
  std::vector<NoisyContextPair> out = pairs;

  switch (variant.tag) {
    case CnrlVariant::kS1: {
      // One corruption per dialogue over its longest golden context; each
      // pair takes the prefix it covers, so drops stay consistent across
      // the dialogue's turns. The per-dialogue stopping target is aligned
      // to the nearest deletion granule round(t*W)/W, which keeps the
      // corpus average centred on the nominal target instead of above it.
      std::map<std::string, const NoisyContextPair*> longest;
      for (const auto& p : pairs) {
        auto& slot = longest[p.dialogue_id];
        if (slot == nullptr || p.turn_index > slot->turn_index) slot = &p;
      }
      std::map<std::string, std::vector<ContextEntry>> corrupted;
      for (const auto& [id, p] : longest) {
        int total_words = 0;
        for (const auto& e : p->clean_entries) {
          if (e.role == Role::kUser) {
            total_words += static_cast<int>(split_words(e.text).size());
          }
        }
        const int granule_deletions = std::max(
            1, static_cast<int>(std::lround(variant.target_wer * total_words)));
        const double dialogue_target =
            (granule_deletions - 0.5) / std::max(1, total_words);
        corrupted[id] =
            word_drop(p->clean_entries, variant.per_word_drop_p, dialogue_target,
                      derive_seed(seed, "s1", fnv1a64(id)));
      }
      for (auto& p : out) {
        const auto& full = corrupted.at(p.dialogue_id);
        p.noisy_entries.assign(full.begin(), full.begin() + p.clean_entries.size());
        p.measured_wer = context_pair_wer(p.noisy_entries, p.clean_entries);
      }
      break;
    }
    case CnrlVariant::kS2: {
      for (auto& p : out) {
        for (std::size_t i = 0; i + 2 < p.noisy_entries.size(); ++i) {
          // every user entry except the last reverts to ground truth
          if (p.noisy_entries[i].role == Role::kUser) {
            p.noisy_entries[i].text = p.clean_entries[i].text;
          }
        }
        p.measured_wer = context_pair_wer(p.noisy_entries, p.clean_entries);
      }
      break;
    }
    case CnrlVariant::kS3:
      break;  // pairs as generated
    case CnrlVariant::kS4: {
      for (auto& p : out) {
        for (std::size_t i = 0; i < p.noisy_entries.size(); ++i) {
          if (p.noisy_entries[i].role != Role::kUser) continue;
          if (p.noisy_entries[i].text != p.clean_entries[i].text) continue;
          p.noisy_entries[i].text = drop_from_entry(
              p.clean_entries[i].text, variant.per_word_drop_p,
              derive_seed(seed, "s4", fnv1a64(p.dialogue_id + ":" + p.clean_entries[i].text),
                          p.turn_index * 1000 + static_cast<int>(i)));
        }
        p.measured_wer = context_pair_wer(p.noisy_entries, p.clean_entries);
      }
      break;
    }
  }
  return out;
}

// --- stage 3 --------------------------------------------------------------------

TrainOutput train_cnrl(const std::vector<NoisyContextPair>& pairs,
                       const std::vector<NoisyContextPair>& dev_pairs,
                       const Checkpoint& base, const StageConfig& cfg) {
  if (pairs.empty()) throw StageError("cnrl: empty pair set");

  CaAsrModel<float> model = base.to_model();
  const CaAsrModel<float> frozen = base.to_model();
  const Tokenizer tok = base.tokenizer();
  const ModelConfig& mc = model.config();

  auto window_ids = [&](const std::vector<ContextEntry>& entries) {
    ContextWindow w;
    w.entries = entries;
    tokenize_window(tok, w, mc.max_context_tokens);
    return w.token_ids;
  };

  // Clean-side targets come from the frozen pre-CNRL encoder and never move.
  auto make_targets = [&](const std::vector<NoisyContextPair>& ps) {
    std::vector<Matf> targets(ps.size());
    std::vector<std::vector<int>> noisy_ids(ps.size());
    parallel_for_chunks(static_cast<int>(ps.size()), [&](int i) {
      targets[i] =
          frozen.run_pool(frozen.run_encode_context(window_ids(ps[i].clean_entries)))
              .transpose();
      noisy_ids[i] = window_ids(ps[i].noisy_entries);
    });
    return std::make_pair(std::move(targets), std::move(noisy_ids));
  };
  const auto [train_targets, train_noisy] = make_targets(pairs);
  const auto [dev_targets, dev_noisy] = make_targets(dev_pairs);

  auto dev_loss_builder = [&](ag::Tape<float>& t, int i) {
    const int pooled = model.pool(t, model.encode_context(t, dev_noisy[i]));
    const int sim = ag::cosine_similarity(t, pooled, t.add_input(dev_targets[i]));
    return ag::add_const(t, ag::scale(t, sim, -1.0f), Matf(Matf::Ones(1, 1)));
  };

  const auto trainable = model.trainable_mask("ctx_enc.");
  AdamOptimizer<float> opt(model.params(), cfg.optimizer_config());
  BatchRunner runner(model.params());

  TrainOutput out;
  out.best_value = std::numeric_limits<double>::infinity();
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "cnrl-shuffle", epoch));
    double epoch_loss = 0.0;
    int batches = 0;
    for (const auto& batch : make_batches(static_cast<int>(pairs.size()),
                                          cfg.batch_size, shuffle_rng)) {
      epoch_loss += runner.run(batch, [&](ag::Tape<float>& t, int i) {
        Rng drop(derive_seed(cfg.seed, "cnrl-dropout", epoch, i));
        Rng* rng = mc.dropout > 0 ? &drop : nullptr;
        const int pooled = model.pool(t, model.encode_context(t, train_noisy[i], rng));
        const int sim = ag::cosine_similarity(t, pooled, t.add_input(train_targets[i]));
        return ag::add_const(t, ag::scale(t, sim, -1.0f), Matf(Matf::Ones(1, 1)));
      });
      opt.step(model.mutable_params(), runner.batch_grads, trainable);
      ++batches;
    }
    const double dev_loss = dev_pairs.empty()
                                ? epoch_loss / std::max(1, batches)
                                : mean_eval_loss(model, dev_loss_builder,
                                                 static_cast<int>(dev_pairs.size()));
    out.curve.push_back({epoch, epoch_loss / std::max(1, batches), dev_loss});
    if (dev_loss < out.best_value) {
      out.best_value = dev_loss;
      out.best_epoch = epoch;
      out.checkpoint = snapshot(model, tok, "cnrl");
    }
  }
  if (cfg.max_epochs == 0) out.checkpoint = snapshot(model, tok, "cnrl");
  const auto t1 = std::chrono::steady_clock::now();
  out.seconds_per_epoch = std::chrono::duration<double>(t1 - t0).count() /
                          std::max(1, cfg.max_epochs);
  return out;
}

// --- full fine-tune ablation -------------------------------------------------------

TrainOutput full_finetune_with_noise(const std::vector<NoisyContextPair>& pairs,
                                     const std::vector<Dialogue>& corpus,
                                     const std::vector<Dialogue>& dev_dialogues,
                                     const Checkpoint& base, const MaskConfig& mask,
                                     const StageConfig& cfg) {
  if (pairs.empty()) throw StageError("full_finetune: empty pair set");

  CaAsrModel<float> model = base.to_model();
  const Tokenizer tok = base.tokenizer();
  const ModelConfig& mc = model.config();

  std::map<std::string, const Dialogue*> by_id;
  for (const auto& d : corpus) by_id[d.id] = &d;

  std::vector<AsrExample> examples;
  for (const auto& p : pairs) {
    auto it = by_id.find(p.dialogue_id);
    if (it == by_id.end()) {
      throw StageError("full_finetune: pair references unknown dialogue " +
                       p.dialogue_id);
    }
    const Dialogue& d = *it->second;
    const Turn& turn = d.turns.at(p.turn_index - 1);
    if (!turn.has_speech()) {
      throw StageError("full_finetune: missing speech for " + d.id);
    }
    AsrExample ex;
    ex.dialogue_id = d.id;
    ex.turn_index = p.turn_index;
    ex.frames = turn.speech.frames;
    ContextWindow w;
    w.entries = p.noisy_entries;
    tokenize_window(tok, w, mc.max_context_tokens);
    ex.ctx_ids = w.token_ids;
    ex.reference = normalize(turn.user_text);
    ex.target_ids = tok.encode_text(ex.reference);
    if (ex.target_ids.empty() ||
        static_cast<int>(ex.target_ids.size()) > mc.max_decode_len) {
      throw StageError("full_finetune: target outside decoder budget in " + d.id);
    }
    examples.push_back(std::move(ex));
  }

  const auto dev_examples = build_asr_examples(dev_dialogues, tok, mc);
  const auto trainable = model.trainable_mask("");
  AdamOptimizer<float> opt(model.params(), cfg.optimizer_config());
  BatchRunner runner(model.params());

  TrainOutput out;
  out.best_value = std::numeric_limits<double>::infinity();
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "fullft-shuffle", epoch));
    double epoch_loss = 0.0;
    int batches = 0;
    for (const auto& batch : make_batches(static_cast<int>(examples.size()),
                                          cfg.batch_size, shuffle_rng)) {
      epoch_loss += runner.run(batch, [&](ag::Tape<float>& t, int i) {
        const AsrExample& ex = examples[i];
        FeatureSequence spoken;
        spoken.frames = ex.frames;
        const auto [masked, report] =
            mask_audio(spoken, mask, derive_seed(cfg.seed, "fullft-mask", epoch, i));
        Rng drop(derive_seed(cfg.seed, "fullft-dropout", epoch, i));
        Rng* rng = mc.dropout > 0 ? &drop : nullptr;
        const int fused = model.fuse(t, model.encode_speech(t, masked.frames, rng),
                                     model.encode_context(t, ex.ctx_ids, rng), rng);
        return model.decode_loss(t, fused, ex.target_ids, rng);
      });
      opt.step(model.mutable_params(), runner.batch_grads, trainable);
      ++batches;
    }
    const double dev_wer = dev_wer_of(model, tok, dev_examples);
    out.curve.push_back({epoch, epoch_loss / std::max(1, batches), dev_wer});
    if (dev_wer < out.best_value) {
      out.best_value = dev_wer;
      out.best_epoch = epoch;
      out.checkpoint = snapshot(model, tok, "full_finetune_s4");
    }
  }
  if (cfg.max_epochs == 0) out.checkpoint = snapshot(model, tok, "full_finetune_s4");
  const auto t1 = std::chrono::steady_clock::now();
  out.seconds_per_epoch = std::chrono::duration<double>(t1 - t0).count() /
                          std::max(1, cfg.max_epochs);
  return out;
}

// --- persistence ---------------------------------------------------------------------

namespace {

json entries_to_json(const std::vector<ContextEntry>& entries) {
  json arr = json::array();
  for (const auto& e : entries) {
    arr.push_back({{"role", e.role == Role::kUser ? "user" : "agent"},
                   {"text", e.text}});
  }
  return arr;
}

std::vector<ContextEntry> entries_from_json(const json& arr) {
  std::vector<ContextEntry> out;
  for (const auto& e : arr) {
    const std::string role = e.at("role").get<std::string>();
    if (role != "user" && role != "agent") {
      throw std::runtime_error("pairs: bad role " + role);
    }
    out.push_back({role == "user" ? Role::kUser : Role::kAgent,
                   e.at("text").get<std::string>()});
  }
  return out;
}

}  // namespace

void save_pairs_jsonl(const std::filesystem::path& path,
                      const std::vector<NoisyContextPair>& pairs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_pairs_jsonl: cannot open " + path.string());
  for (const auto& p : pairs) {
    out << json{{"dialogue_id", p.dialogue_id},
                {"turn_index", p.turn_index},
                {"measured_wer", p.measured_wer},
                {"noisy", entries_to_json(p.noisy_entries)},
                {"clean", entries_to_json(p.clean_entries)}}
               .dump()
        << '\n';
  }
}

std::vector<NoisyContextPair> load_pairs_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_pairs_jsonl: cannot open " + path.string());
  std::vector<NoisyContextPair> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    NoisyContextPair p;
    p.dialogue_id = j.at("dialogue_id").get<std::string>();
    p.turn_index = j.at("turn_index").get<int>();
    p.measured_wer = j.at("measured_wer").get<double>();
    p.noisy_entries = entries_from_json(j.at("noisy"));
    p.clean_entries = entries_from_json(j.at("clean"));
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace caasr
