#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <caasr/checkpoint.hpp>
#include <caasr/corpus.hpp>
#include <caasr/model.hpp>
#include <caasr/optimizer.hpp>

#include <cmath>
#include <filesystem>
#include <set>

using namespace caasr;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(int vocab) {
  ModelConfig cfg;
  cfg.hidden_dim = 32;
  cfg.heads = 4;
  cfg.speech_layers = 1;
  cfg.context_layers = 1;
  cfg.decoder_layers = 1;
  cfg.ffn_dim = 64;
  cfg.vocab_size = vocab;
  cfg.feature_dim = 8;
  cfg.dropout = 0.0;
  return cfg;
}

/// Miniature for finite-difference checks; must stay under 1k parameters.
ModelConfig tiny_config(int vocab) {
  ModelConfig cfg;
  cfg.hidden_dim = 4;
  cfg.heads = 2;
  cfg.speech_layers = 1;
  cfg.context_layers = 1;
  cfg.decoder_layers = 1;
  cfg.ffn_dim = 4;
  cfg.vocab_size = vocab;
  cfg.feature_dim = 4;
  cfg.dropout = 0.0;
  return cfg;
}

Matd random_frames(Rng& rng, int f, int d) {
  Matd m(f, d);
  for (int r = 0; r < f; ++r) {
    for (int c = 0; c < d; ++c) m(r, c) = rng.normal();
  }
  return m;
}

}  // namespace

TEST_CASE("speech encoder stride arithmetic") {
  CHECK(CaAsrModel<float>::speech_positions(50) == 25);
  CHECK(CaAsrModel<float>::speech_positions(51) == 26);
  CHECK(CaAsrModel<float>::speech_positions(1) == 1);

  CaAsrModel<float> model(small_config(20), 1);
  Matf frames = Matf::Random(50, 8);
  const Matf h = model.run_encode_speech(frames);
  CHECK(h.rows() == 25);
  CHECK(h.cols() == 32);
  CHECK_THROWS_AS(model.run_encode_speech(Matf(0, 8)), std::invalid_argument);
}

TEST_CASE("encoders are deterministic in inference mode") {
  CaAsrModel<float> model(small_config(20), 2);
  const Matf frames = Matf::Random(30, 8);
  CHECK(model.run_encode_speech(frames) == model.run_encode_speech(frames));

  const std::vector<int> ids = {1, 4, 9, 12};
  CHECK(model.run_encode_context(ids) == model.run_encode_context(ids));
}

TEST_CASE("fully masked input stays finite") {
  CaAsrModel<float> model(small_config(20), 3);
  const Matf h = model.run_encode_speech(Matf::Zero(40, 8));
  CHECK(h.allFinite());
}

TEST_CASE("context encoder shapes and limits") {
  ModelConfig cfg = small_config(20);
  cfg.max_context_tokens = 1024;
  CaAsrModel<float> model(cfg, 4);

  const Matf bos_only = model.run_encode_context({Tokenizer::kBos});
  CHECK(bos_only.rows() == 1);
  CHECK(bos_only.cols() == 32);

  std::vector<int> full(1024, 8);
  CHECK(model.run_encode_context(full).rows() == 1024);

  std::vector<int> over(1025, 8);
  CHECK_THROWS_AS(model.run_encode_context(over), std::invalid_argument);
  CHECK_THROWS_AS(model.run_encode_context({}), std::invalid_argument);
}

TEST_CASE("permuting context entries changes the encoding") {
  CaAsrModel<float> model(small_config(20), 5);
  const std::vector<int> a = {1, 7, 8, 5, 9, 10};
  const std::vector<int> b = {1, 9, 10, 5, 7, 8};
  CHECK(model.run_encode_context(a) != model.run_encode_context(b));
}

TEST_CASE("fusion concatenates along the sequence axis") {
  CaAsrModel<float> model(small_config(20), 6);
  Matf frames = Matf::Random(50, 8);
  const Matf speech_h = model.run_encode_speech(frames);  // 25 x 32
  const Matf ctx40 = model.run_encode_context(std::vector<int>(40, 9));
  const Matf fused = model.run_fuse(speech_h, ctx40);
  CHECK(fused.rows() == 65);
  CHECK(fused.cols() == 32);
  CHECK(fused.minCoeff() >= 0.0f);  // post-ReLU

  const Matf bos_ctx = model.run_encode_context({Tokenizer::kBos});
  CHECK(model.run_fuse(speech_h, bos_ctx).rows() == 26);

  CHECK_THROWS_AS(model.run_fuse(speech_h, Matf::Random(4, 16)), std::invalid_argument);
}

TEST_CASE("decode_loss equals ln V under uniform logits") {
  ModelConfig cfg = small_config(23);
  CaAsrModel<float> model(cfg, 7);
  // zero the output projection: logits become exactly uniform
  model.mutable_params().values[model.params().find("decoder.out.w")].setZero();
  model.mutable_params().values[model.params().find("decoder.out.b")].setZero();

  ag::Tape<float> tape(false);
  const int memory = tape.add_input(Matf::Random(6, 32));
  const int loss = model.decode_loss(tape, memory, {8, 9, 10});
  CHECK(tape.val(loss)(0, 0) == doctest::Approx(std::log(23.0)).epsilon(1e-5));
}

TEST_CASE("decode_loss rejects empty and over-long targets") {
  ModelConfig cfg = small_config(23);
  cfg.max_decode_len = 4;
  CaAsrModel<float> model(cfg, 8);
  ag::Tape<float> tape(false);
  const int memory = tape.add_input(Matf::Random(5, 32));
  CHECK_THROWS_AS(model.decode_loss(tape, memory, {}), std::invalid_argument);
  CHECK_THROWS_AS(model.decode_loss(tape, memory, {1, 2, 3, 4, 5}), std::invalid_argument);
}

TEST_CASE("batch loss is near permutation invariant") {
  CaAsrModel<float> model(small_config(23), 9);
  const Matf memory = Matf::Random(6, 32);
  const std::vector<std::vector<int>> batch = {{7, 8}, {9, 10, 11}, {12}};
  auto batch_loss = [&](const std::vector<int>& order) {
    double total = 0.0;
    for (int i : order) {
      ag::Tape<float> t(false);
      total += t.val(model.decode_loss(t, t.add_input(memory), batch[i]))(0, 0);
    }
    return total / order.size();
  };
  CHECK(batch_loss({0, 1, 2}) == doctest::Approx(batch_loss({2, 0, 1})).epsilon(1e-5));
}

TEST_CASE("greedy generate determinism and length cap") {
  ModelConfig cfg = small_config(23);
  cfg.max_decode_len = 9;
  CaAsrModel<float> model(cfg, 10);
  const Matf memory = Matf::Random(8, 32);
  const auto a = model.generate(memory);
  const auto b = model.generate(memory);
  CHECK(a == b);
  CHECK(a.size() <= 9);
  for (int id : a) {
    CHECK(id != Tokenizer::kPad);
    CHECK(id != Tokenizer::kBos);
    CHECK(id != Tokenizer::kRoleUser);
    CHECK(id != Tokenizer::kRoleAgent);
    CHECK(id != Tokenizer::kMaskTok);
  }
}

TEST_CASE("pooling reductions") {
  CaAsrModel<float> model(small_config(20), 11);
  Matf h = Matf::Random(5, 32);

  const Vecf pooled = model.run_pool(h);
  Vecf brute = Vecf::Zero(32);
  for (int r = 0; r < 5; ++r) brute += h.row(r).transpose();
  brute /= 5.0f;
  CHECK((pooled - brute).norm() < 1e-6f);

  // single position pools to itself
  Matf single = Matf::Random(1, 32);
  CHECK((model.run_pool(single) - single.row(0).transpose()).norm() < 1e-7f);

  // duplicating every row leaves the mean unchanged
  Matf doubled(10, 32);
  doubled << h, h;
  CHECK((model.run_pool(doubled) - pooled).norm() < 1e-5f);
}

TEST_CASE("cosine embedding loss values and config") {
  Vecf x = Vecf::Random(16);
  CHECK(cosine_embedding_loss<float>(x, x) == doctest::Approx(0.0));
  Vecf y = Vecf::Zero(16);
  y(0) = x(1);
  y(1) = -x(0);  // orthogonal in the first two coords
  Vecf x2 = Vecf::Zero(16);
  x2(0) = x(0);
  x2(1) = x(1);
  CHECK(cosine_embedding_loss<float>(x2, y) == doctest::Approx(1.0));
  CHECK(cosine_embedding_loss<float>(x, (-x).eval()) == doctest::Approx(2.0));

  CosineLossConfig neg{-1, 0.25};
  CHECK(cosine_embedding_loss<float>(x, x, neg) == doctest::Approx(0.75));
  CHECK(cosine_embedding_loss<float>(x, (-x).eval(), neg) == doctest::Approx(0.0));

  CHECK_THROWS_AS(cosine_embedding_loss<float>(Vecf::Zero(4), Vecf::Ones(4)),
                  std::invalid_argument);
}

TEST_CASE("parameter groups partition the model") {
  CaAsrModel<float> model(small_config(20), 12);
  const auto ctx_ids = model.context_encoder_param_ids();
  CHECK(!ctx_ids.empty());
  std::set<int> ctx_set(ctx_ids.begin(), ctx_ids.end());

  const auto& names = model.params().names;
  int rest = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const bool is_ctx = ctx_set.count(static_cast<int>(i)) > 0;
    CHECK(is_ctx == (names[i].rfind("ctx_enc.", 0) == 0));
    if (!is_ctx) ++rest;
  }
  CHECK(rest > 0);
  CHECK(ctx_set.size() + rest == names.size());
}

TEST_CASE("checkpoint round trip preserves every byte") {
  GenerationConfig gen;
  gen.n_dialogues = 3;
  gen.seed = 5;
  const auto corpus = generate_synthetic_dialogues(gen);
  const Tokenizer tok = Tokenizer::build(corpus);

  ModelConfig cfg = small_config(tok.vocab_size());
  CaAsrModel<float> model(cfg, 13);
  const Checkpoint ckpt = Checkpoint::of(model, tok, "finetune");

  const fs::path path = fs::temp_directory_path() / "caasr_ckpt_test.ckpt";
  save_checkpoint(path, ckpt);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.stage == "finetune");
  CHECK(back.vocab_words == tok.words());
  REQUIRE(back.params.names == ckpt.params.names);
  for (std::size_t i = 0; i < back.params.values.size(); ++i) {
    CHECK(back.params.values[i] == ckpt.params.values[i]);
  }
  // model reconstruction accepts the loaded parameters
  const auto rebuilt = back.to_model();
  CHECK(rebuilt.params().values[0] == model.params().values[0]);
  fs::remove(path);
}

TEST_CASE("asr loss gradients match finite differences on a miniature") {
  const int vocab = 9;
  ModelConfig cfg = tiny_config(vocab);
  CaAsrModel<double> model(cfg, 14);
  REQUIRE(model.params().total_params() <= 1000);

  Rng rng(21);
  const Matd frames = random_frames(rng, 6, 4);
  const std::vector<int> ctx_ids = {Tokenizer::kBos, Tokenizer::kRoleUser, 7, 8};
  const std::vector<int> target = {7, 8};

  auto loss_value = [&]() {
    ag::Tape<double> t(false);
    const int fused = model.fuse(t, model.encode_speech(t, frames),
                                 model.encode_context(t, ctx_ids));
    return t.val(model.decode_loss(t, fused, target))(0, 0);
  };

  ag::Tape<double> tape(true);
  const int fused = model.fuse(tape, model.encode_speech(tape, frames),
                               model.encode_context(tape, ctx_ids));
  const int loss = model.decode_loss(tape, fused, target);
  auto grads = model.params().zero_grads();
  tape.backward(loss, &grads);

  const double eps = 1e-5;
  double worst = 0.0;
  auto& store = model.mutable_params();
  for (std::size_t pi = 0; pi < store.values.size(); ++pi) {
    for (int r = 0; r < store.values[pi].rows(); ++r) {
      for (int c = 0; c < store.values[pi].cols(); ++c) {
        const double keep = store.values[pi](r, c);
        store.values[pi](r, c) = keep + eps;
        const double up = loss_value();
        store.values[pi](r, c) = keep - eps;
        const double down = loss_value();
        store.values[pi](r, c) = keep;
        const double numeric = (up - down) / (2 * eps);
        const double analytic = grads[pi](r, c);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
      }
    }
  }
  INFO("worst relative error ", worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("cosine loss gradients through the context encoder match finite differences") {
  const int vocab = 9;
  ModelConfig cfg = tiny_config(vocab);
  CaAsrModel<double> model(cfg, 15);

  const std::vector<int> noisy_ids = {Tokenizer::kBos, Tokenizer::kRoleUser, 7};
  Matd target(1, 4);
  target << 0.3, -0.7, 0.2, 0.9;

  auto loss_value = [&]() {
    ag::Tape<double> t(false);
    const int pooled = model.pool(t, model.encode_context(t, noisy_ids));
    return 1.0 - t.val(ag::cosine_similarity(t, pooled, t.add_input(target)))(0, 0);
  };

  ag::Tape<double> tape(true);
  const int pooled = model.pool(tape, model.encode_context(tape, noisy_ids));
  const int sim = ag::cosine_similarity(tape, pooled, tape.add_input(target));
  const int loss = ag::add_const(
      tape, ag::scale(tape, sim, -1.0), Matd(Matd::Ones(1, 1)));
  auto grads = model.params().zero_grads();
  tape.backward(loss, &grads);

  const double eps = 1e-5;
  double worst = 0.0;
  auto& store = model.mutable_params();
  for (int pi : model.context_encoder_param_ids()) {
    auto& w = store.values[pi];
    for (int r = 0; r < w.rows(); ++r) {
      for (int c = 0; c < w.cols(); ++c) {
        const double keep = w(r, c);
        w(r, c) = keep + eps;
        const double up = loss_value();
        w(r, c) = keep - eps;
        const double down = loss_value();
        w(r, c) = keep;
        const double numeric = (up - down) / (2 * eps);
        const double analytic = grads[pi](r, c);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
      }
    }
  }
  INFO("worst relative error ", worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("single sample memorization smoke test") {
  GenerationConfig gen;
  gen.n_dialogues = 2;
  gen.seed = 31;
  auto corpus = generate_synthetic_dialogues(gen);
  const Tokenizer tok = Tokenizer::build(corpus);

  ModelConfig cfg = small_config(tok.vocab_size());
  cfg.max_decode_len = 16;
  CaAsrModel<float> model(cfg, 16);

  synthesize_corpus_speech(corpus, 7, cfg.feature_dim);
  const Turn& turn = corpus[0].turns[0];
  const Matf frames = turn.speech.frames;
  const std::vector<int> target = tok.encode_text(turn.user_text);
  REQUIRE(static_cast<int>(target.size()) <= cfg.max_decode_len);
  const std::vector<int> ctx_ids = {Tokenizer::kBos};

  AdamOptimizer<float> opt(model.params(), {.lr = 5e-3});
  const auto mask = model.trainable_mask("");
  for (int step = 0; step < 300; ++step) {
    ag::Tape<float> t(true);
    const int fused = model.fuse(t, model.encode_speech(t, frames),
                                 model.encode_context(t, ctx_ids));
    const int loss = model.decode_loss(t, fused, target);
    auto grads = model.params().zero_grads();
    t.backward(loss, &grads);
    opt.step(model.mutable_params(), grads, mask);
    if (step > 50 && t.val(loss)(0, 0) < 1e-3) break;
  }

  ag::Tape<float> t(false);
  const Matf memory = t.val(model.fuse(t, model.encode_speech(t, frames),
                                       model.encode_context(t, ctx_ids)));
  CHECK(model.generate(memory) == target);
}
