#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <caasr/eval.hpp>
#include <caasr/training.hpp>

#include <algorithm>

using namespace caasr;

namespace {

struct TrainedMini {
  std::vector<Dialogue> corpus;
  Tokenizer tok;
  Checkpoint ckpt;
};

// Overfits a small model on a handful of dialogues so clean evaluation has
// a known-good outcome.
TrainedMini make_trained(int n_dialogues = 4, int epochs = 40) {
  GenerationConfig gen;
  gen.n_dialogues = n_dialogues;
  gen.turns_min = 3;
  gen.turns_max = 3;
  gen.seed = 19;
  auto corpus = generate_synthetic_dialogues(gen);
  synthesize_corpus_speech(corpus, 77, 16);

  TrainedMini out;
  out.tok = Tokenizer::build(corpus);

  ModelConfig mc;
  mc.hidden_dim = 32;
  mc.heads = 4;
  mc.speech_layers = 1;
  mc.context_layers = 1;
  mc.decoder_layers = 1;
  mc.ffn_dim = 64;
  mc.feature_dim = 16;
  mc.max_decode_len = 16;
  mc.dropout = 0.0;
  mc.vocab_size = out.tok.vocab_size();

  StageConfig cfg;
  cfg.stage = Stage::kFinetune;
  cfg.lr = 5e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = epochs;
  cfg.seed = 3;
  FinetuneOptions opts;
  opts.mask.select_prob = 0.0;

  const TrainOutput t = finetune_asr(corpus, corpus, out.tok, mc, opts, cfg);
  out.ckpt = t.checkpoint;
  out.corpus = std::move(corpus);
  return out;
}

const TrainedMini& trained() {
  static const TrainedMini t = make_trained();
  return t;
}

}  // namespace

TEST_CASE("noise clip assignment is a pure function of seed and utterance") {
  const int a = noise_clip_index(5, "d0001", 2, 2000);
  CHECK(a == noise_clip_index(5, "d0001", 2, 2000));
  CHECK(a >= 0);
  CHECK(a < 2000);
  // different utterances get independent draws (almost surely different)
  int distinct = 0;
  for (int t = 1; t <= 10; ++t) {
    if (noise_clip_index(5, "d0001", t, 2000) != a) ++distinct;
  }
  CHECK(distinct >= 8);
}

TEST_CASE("forced predictions flow into later contexts verbatim") {
  const auto& world = trained();
  const auto model = world.ckpt.to_model();
  const NoiseCondition clean = NoiseCondition::clean();

  std::vector<ContextWindow> contexts;
  transcribe_dialogue_forced(model, world.tok, world.corpus[0], clean, nullptr,
                             {{1, "wrong words"}}, &contexts);
  REQUIRE(contexts.size() == world.corpus[0].turns.size());
  CHECK(contexts[0].entries.empty());  // turn 1 has no history
  CHECK(contexts[0].token_ids == std::vector<int>{Tokenizer::kBos});
  REQUIRE(!contexts[1].entries.empty());
  CHECK(contexts[1].entries[0].role == Role::kUser);
  CHECK(contexts[1].entries[0].text == "wrong words");
}

TEST_CASE("ground-truth mode feeds references, autoregressive mode feeds predictions") {
  const auto& world = trained();
  const auto model = world.ckpt.to_model();
  const NoiseCondition clean = NoiseCondition::clean();
  const Dialogue& d = world.corpus[0];

  std::vector<ContextWindow> gt_contexts;
  transcribe_dialogue(model, world.tok, d, clean, nullptr, true, nullptr, &gt_contexts);
  for (std::size_t t = 1; t < gt_contexts.size(); ++t) {
    CHECK(gt_contexts[t].entries[2 * (t - 1)].text ==
          normalize(d.turns[t - 1].user_text));
  }

  std::vector<ContextWindow> ar_contexts;
  const auto preds =
      transcribe_dialogue(model, world.tok, d, clean, nullptr, false, nullptr,
                          &ar_contexts);
  for (std::size_t t = 1; t < ar_contexts.size(); ++t) {
    CHECK(ar_contexts[t].entries[2 * (t - 1)].text == preds[t - 1]);
  }
}

TEST_CASE("event log shows strict turn ordering") {
  const auto& world = trained();
  const auto model = world.ckpt.to_model();
  std::vector<std::string> events;
  transcribe_dialogue(model, world.tok, world.corpus[0], NoiseCondition::clean(),
                      nullptr, false, &events);
  const int turns = static_cast<int>(world.corpus[0].turns.size());
  REQUIRE(static_cast<int>(events.size()) == 2 * turns);
  for (int t = 0; t < turns; ++t) {
    CHECK(events[2 * t].rfind("context", 0) == 0);
    CHECK(events[2 * t + 1].rfind("predict", 0) == 0);
    // prediction for turn t happens before the next turn's context
    CHECK(events[2 * t + 1].find("t" + std::to_string(t + 1)) != std::string::npos);
  }
}

TEST_CASE("memorized corpus evaluates to zero wer on clean audio") {
  const auto& world = trained();
  const auto model = world.ckpt.to_model();
  const MetricsReport report = evaluate(model, world.tok, world.corpus,
                                        {NoiseCondition::clean()}, nullptr);
  INFO("clean wer = ", report.condition_wer.at("clean"));
  CHECK(report.condition_wer.at("clean") == doctest::Approx(0.0));

  int total_turns = 0;
  for (const auto& d : world.corpus) total_turns += static_cast<int>(d.turns.size());
  CHECK(static_cast<int>(report.per_turn.size()) == total_turns);
  CHECK(report.per_dialogue_wer.at("clean").size() == world.corpus.size());
}

TEST_CASE("ground truth context never evaluates worse than autoregressive on clean") {
  const auto& world = trained();
  const auto model = world.ckpt.to_model();
  const auto auto_report = evaluate(model, world.tok, world.corpus,
                                    {NoiseCondition::clean()}, nullptr, false);
  const auto gt_report = evaluate(model, world.tok, world.corpus,
                                  {NoiseCondition::clean()}, nullptr, true);
  CHECK(gt_report.condition_wer.at("clean") <=
        auto_report.condition_wer.at("clean") + 1e-12);
}

TEST_CASE("evaluate validates inputs") {
  const auto& world = trained();
  const auto model = world.ckpt.to_model();
  CHECK_THROWS_AS(evaluate(model, world.tok, {}, {NoiseCondition::clean()}, nullptr),
                  StageError);
  CHECK_THROWS_AS(evaluate(model, world.tok, world.corpus, {}, nullptr), StageError);
  // noise condition without a bank
  CHECK_THROWS_AS(evaluate(model, world.tok, world.corpus,
                           {NoiseCondition::snr(0.0, 1)}, nullptr),
                  StageError);
}

TEST_CASE("noise conditions degrade a memorized model monotonically") {
  const auto& world = trained();
  const auto model = world.ckpt.to_model();
  const auto bank = generate_noise_bank(64, 11, 16);
  const std::vector<NoiseCondition> conditions = {
      NoiseCondition::clean(), NoiseCondition::snr(20.0, 11), NoiseCondition::snr(0.0, 11)};
  const auto report = evaluate(model, world.tok, world.corpus, conditions, &bank);
  const double clean = report.condition_wer.at("clean");
  const double snr20 = report.condition_wer.at("snr20");
  const double snr0 = report.condition_wer.at("snr0");
  INFO("clean=", clean, " snr20=", snr20, " snr0=", snr0);
  CHECK(clean <= snr20 + 1e-12);
  CHECK(snr20 <= snr0 + 1e-12);
}

TEST_CASE("reports serialize deterministically") {
  const auto& world = trained();
  const auto model = world.ckpt.to_model();
  const auto bank = generate_noise_bank(16, 13, 16);
  const std::vector<NoiseCondition> conditions = {NoiseCondition::clean(),
                                                  NoiseCondition::snr(20.0, 13)};
  const auto a = evaluate(model, world.tok, world.corpus, conditions, &bank);
  const auto b = evaluate(model, world.tok, world.corpus, conditions, &bank);
  CHECK(a.to_json().dump(2) == b.to_json().dump(2));
  CHECK(a.to_csv() == b.to_csv());
  CHECK(a.to_csv().find("dialogue_id") == 0);
}

TEST_CASE("compare_encodings measures similarity movement") {
  const auto& world = trained();
  const auto model = world.ckpt.to_model();

  auto pairs = make_clean_pairs(world.corpus);
  REQUIRE(!pairs.empty());

  // identical encoders, degenerate pairs: similarity 1, delta 0
  const auto same = compare_encodings(model, model, world.tok, pairs);
  CHECK(same.mean_similarity_before == doctest::Approx(1.0));
  CHECK(same.mean_similarity_after == doctest::Approx(1.0));
  CHECK(same.delta == doctest::Approx(0.0));

  // noisy pairs against a CNRL-updated encoder: delta reported symmetrically
  const auto s1 = build_cnrl_set(pairs, CnrlVariant::parse("S1"), 3);
  const auto diag = compare_encodings(model, model, world.tok, s1);
  CHECK(diag.delta == doctest::Approx(0.0));
  CHECK(diag.mean_similarity_before < 1.0);
  CHECK(diag.n_pairs == static_cast<int>(s1.size()));

  CHECK_THROWS_AS(compare_encodings(model, model, world.tok, {}), StageError);
}
