#ifndef CAASR_MODEL_HPP
#define CAASR_MODEL_HPP

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caasr/autograd.hpp"
#include "caasr/common.hpp"
#include "caasr/corpus.hpp"
#include "caasr/hash.hpp"
#include "caasr/rng.hpp"

namespace caasr {

struct ModelConfig {
  int hidden_dim = 128;
  int heads = 4;
  int speech_layers = 2;
  int context_layers = 2;
  int decoder_layers = 2;
  int ffn_dim = 512;
  int vocab_size = 0;
  int feature_dim = 32;
  int max_context_tokens = 1024;
  int max_decode_len = 24;
  double dropout = 0.1;
  std::string pooling = "mean";  // or "first"
  /// Speech-only ablation: the context encoder sees BOS only, in training
  /// and at inference, so checkpoints carry the regime they were trained in.
  bool context_ablation = false;

  int head_dim() const { return hidden_dim / heads; }

  void validate() const {
    if (hidden_dim <= 0 || heads <= 0 || hidden_dim % heads != 0) {
      throw ConfigError("ModelConfig: hidden_dim must be a positive multiple of heads");
    }
    if (vocab_size <= 0) throw ConfigError("ModelConfig: vocab_size not set");
    if (pooling != "mean" && pooling != "first") {
      throw ConfigError("ModelConfig: pooling must be mean or first");
    }
  }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Named dense parameters. Ids are stable array indices; ownership of the
/// values stays here while tapes reference them.
template <typename S>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<MatX<S>> values;
  std::map<std::string, int> index;

  int add(const std::string& name, int rows, int cols) {
    names.push_back(name);
    values.emplace_back(MatX<S>::Zero(rows, cols));
    index[name] = static_cast<int>(values.size()) - 1;
    return index[name];
  }

  int find(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("ParamStore: no param " + name);
    return it->second;
  }

  long total_params() const {
    long n = 0;
    for (const auto& v : values) n += static_cast<long>(v.size());
    return n;
  }

  std::vector<int> ids_with_prefix(const std::string& prefix) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i].rfind(prefix, 0) == 0) out.push_back(static_cast<int>(i));
    }
    return out;
  }

  std::vector<MatX<S>> zero_grads() const {
    std::vector<MatX<S>> g;
    g.reserve(values.size());
    for (const auto& v : values) g.emplace_back(MatX<S>::Zero(v.rows(), v.cols()));
    return g;
  }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    out.names = names;
    out.index = index;
    out.values.reserve(values.size());
    for (const auto& v : values) out.values.push_back(v.template cast<T>());
    return out;
  }
};

/// Sinusoidal position encodings, rows 0..len-1.
template <typename S>
MatX<S> positional_encoding(int len, int dim) {
  MatX<S> pe(len, dim);
  for (int pos = 0; pos < len; ++pos) {
    for (int i = 0; i < dim; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / dim);
      pe(pos, i) = static_cast<S>(std::sin(angle));
      if (i + 1 < dim) pe(pos, i + 1) = static_cast<S>(std::cos(angle));
    }
  }
  return pe;
}

/// Context-aware ASR network: strided speech encoder, token context encoder,
/// sequence-axis fusion with a ReLU affine map, and an autoregressive
/// transformer decoder over the fused memory.
template <typename S>
class CaAsrModel {
 public:
  using Tape = ag::Tape<S>;
  using Mat = MatX<S>;

  CaAsrModel() = default;

  CaAsrModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_params();
    init_params(init_seed);
  }

  static CaAsrModel from_params(ModelConfig cfg, ParamStore<S> params) {
    CaAsrModel m;
    m.cfg_ = std::move(cfg);
    m.cfg_.validate();
    m.build_params();
    if (m.params_.names != params.names) {
      throw std::runtime_error("CaAsrModel: parameter names do not match config");
    }
    for (std::size_t i = 0; i < params.values.size(); ++i) {
      if (m.params_.values[i].rows() != params.values[i].rows() ||
          m.params_.values[i].cols() != params.values[i].cols()) {
        throw std::runtime_error("CaAsrModel: parameter shape mismatch at " +
                                 m.params_.names[i]);
      }
    }
    m.params_.values = std::move(params.values);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamStore<S>& params() const { return params_; }
  ParamStore<S>& mutable_params() { return params_; }

  /// Number of encoder positions the strided front end yields for F frames.
  static int speech_positions(int frames) { return (frames + 1) / 2; }

  // --- graph builders -----------------------------------------------------

  int encode_speech(Tape& t, const Mat& frames, Rng* rng = nullptr) const {
    if (frames.rows() < 1) throw std::invalid_argument("encode_speech: empty input");
    if (frames.cols() != cfg_.feature_dim) {
      throw std::invalid_argument("encode_speech: feature dim mismatch");
    }
    int x = t.add_input(frames);
    x = ag::pair_downsample(t, x);
    x = ag::add_rowvec(t, ag::matmul(t, x, p(t, "speech_enc.front.w")),
                       p(t, "speech_enc.front.b"));
    x = ag::add_const(t, x, positional_encoding<S>(static_cast<int>(t.val(x).rows()),
                                                   cfg_.hidden_dim));
    for (int l = 0; l < cfg_.speech_layers; ++l) {
      x = encoder_layer(t, x, "speech_enc.l" + std::to_string(l), rng);
    }
    return final_norm(t, x, "speech_enc.final");
  }

  int encode_context(Tape& t, const std::vector<int>& token_ids,
                     Rng* rng = nullptr) const {
    if (token_ids.empty()) {
      throw std::invalid_argument("encode_context: empty token sequence");
    }
    if (static_cast<int>(token_ids.size()) > cfg_.max_context_tokens) {
      throw std::invalid_argument("encode_context: input exceeds max_context_tokens");
    }
    int x = ag::embedding(t, p(t, "ctx_enc.embed"), token_ids);
    x = ag::scale(t, x, static_cast<S>(std::sqrt(double(cfg_.hidden_dim))));
    x = ag::add_const(t, x, positional_encoding<S>(static_cast<int>(token_ids.size()),
                                                   cfg_.hidden_dim));
    for (int l = 0; l < cfg_.context_layers; ++l) {
      x = encoder_layer(t, x, "ctx_enc.l" + std::to_string(l), rng);
    }
    return final_norm(t, x, "ctx_enc.final");
  }

  /// Sequence-axis concatenation followed by a per-position affine map with
  /// ReLU. Output length is T_s + T_c.
  int fuse(Tape& t, int speech_h, int ctx_h, Rng* rng = nullptr) const {
    if (t.val(speech_h).cols() != t.val(ctx_h).cols()) {
      throw std::invalid_argument("fuse: hidden width mismatch");
    }
    int x = ag::vstack(t, {speech_h, ctx_h});
    x = ag::add_rowvec(t, ag::matmul(t, x, p(t, "fusion.w")), p(t, "fusion.b"));
    x = ag::relu(t, x);
    return ag::dropout(t, x, cfg_.dropout, rng);
  }

  /// Teacher-forced decoder logits for input ids (BOS-led) over memory.
  int decode_logits(Tape& t, int memory, const std::vector<int>& input_ids,
                    Rng* rng = nullptr) const {
    int x = ag::embedding(t, p(t, "decoder.embed"), input_ids);
    x = ag::scale(t, x, static_cast<S>(std::sqrt(double(cfg_.hidden_dim))));
    x = ag::add_const(t, x, positional_encoding<S>(static_cast<int>(input_ids.size()),
                                                   cfg_.hidden_dim));
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      const std::string base = "decoder.l" + std::to_string(l);
      int h = layer_norm(t, x, base + ".ln1");
      h = attention(t, h, h, base + ".self", /*causal=*/true);
      x = ag::add(t, x, ag::dropout(t, h, cfg_.dropout, rng));
      h = layer_norm(t, x, base + ".ln2");
      h = attention(t, h, memory, base + ".cross", /*causal=*/false);
      x = ag::add(t, x, ag::dropout(t, h, cfg_.dropout, rng));
      h = layer_norm(t, x, base + ".ln3");
      h = ffn(t, h, base + ".ffn");
      x = ag::add(t, x, ag::dropout(t, h, cfg_.dropout, rng));
    }
    x = final_norm(t, x, "decoder.final");
    return ag::add_rowvec(t, ag::matmul(t, x, p(t, "decoder.out.w")),
                          p(t, "decoder.out.b"));
  }

  /// Mean token cross entropy with teacher forcing; input is BOS + target,
  /// labels are target + EOS.
  int decode_loss(Tape& t, int memory, const std::vector<int>& target_ids,
                  Rng* rng = nullptr) const {
    if (target_ids.empty()) throw std::invalid_argument("decode_loss: empty target");
    if (static_cast<int>(target_ids.size()) > cfg_.max_decode_len) {
      throw std::invalid_argument("decode_loss: target longer than max_decode_len");
    }
    std::vector<int> input = {Tokenizer::kBos};
    input.insert(input.end(), target_ids.begin(), target_ids.end());
    std::vector<int> labels = target_ids;
    labels.push_back(Tokenizer::kEos);
    return ag::cross_entropy(t, decode_logits(t, memory, input, rng), labels);
  }

  /// Reduction of a hidden sequence to the vector compared by the cosine
  /// objective; mean over positions by default.
  int pool(Tape& t, int h) const {
    if (cfg_.pooling == "first") return ag::slice_rows(t, h, 0, 1);
    return ag::mean_rows(t, h);
  }

  // --- inference ----------------------------------------------------------

  Mat run_encode_speech(const Mat& frames) const {
    Tape t(false);
    return t.val(encode_speech(t, frames));
  }

  Mat run_encode_context(const std::vector<int>& token_ids) const {
    Tape t(false);
    return t.val(encode_context(t, token_ids));
  }

  Mat run_fuse(const Mat& speech_h, const Mat& ctx_h) const {
    Tape t(false);
    return t.val(fuse(t, t.add_input(speech_h), t.add_input(ctx_h)));
  }

  VecX<S> run_pool(const Mat& h) const {
    Tape t(false);
    return t.val(pool(t, t.add_input(h))).row(0).transpose();
  }

  /// Greedy decoding over a fused memory until EOS or the length cap.
  /// Structural ids never surface in the output.
  std::vector<int> generate(const Mat& memory, int max_decode_len = -1) const {
    if (max_decode_len < 0) max_decode_len = cfg_.max_decode_len;
    std::vector<int> out;
    std::vector<int> input = {Tokenizer::kBos};
    for (int step = 0; step < max_decode_len; ++step) {
      Tape t(false);
      const int logits = decode_logits(t, t.add_input(memory), input);
      VecX<S> last = t.val(logits).row(t.val(logits).rows() - 1).transpose();
      for (int banned : {int(Tokenizer::kPad), int(Tokenizer::kBos),
                         int(Tokenizer::kRoleUser), int(Tokenizer::kRoleAgent),
                         int(Tokenizer::kMaskTok)}) {
        last(banned) = -std::numeric_limits<S>::infinity();
      }
      int best = 0;
      last.maxCoeff(&best);
      if (best == Tokenizer::kEos) break;
      out.push_back(best);
      input.push_back(best);
    }
    return out;
  }

  // --- parameter groups ---------------------------------------------------

  std::vector<int> context_encoder_param_ids() const {
    return params_.ids_with_prefix("ctx_enc.");
  }

  std::vector<char> trainable_mask(const std::string& prefix) const {
    std::vector<char> mask(params_.values.size(), prefix.empty() ? 1 : 0);
    if (!prefix.empty()) {
      for (int id : params_.ids_with_prefix(prefix)) mask[id] = 1;
    }
    return mask;
  }

 private:
  int p(Tape& t, const std::string& name) const {
    const int idx = params_.find(name);
    return t.add_param(&params_.values[idx], idx);
  }

  int layer_norm(Tape& t, int x, const std::string& base) const {
    return ag::layer_norm_rows(t, x, p(t, base + ".gain"), p(t, base + ".bias"));
  }

  int final_norm(Tape& t, int x, const std::string& base) const {
    return ag::layer_norm_rows(t, x, p(t, base + ".gain"), p(t, base + ".bias"));
  }

  int attention(Tape& t, int q_in, int kv_in, const std::string& base,
                bool causal) const {
    const S inv_sqrt_dk = S(1) / static_cast<S>(std::sqrt(double(cfg_.head_dim())));
    std::vector<int> heads;
    heads.reserve(cfg_.heads);
    for (int h = 0; h < cfg_.heads; ++h) {
      const std::string hs = std::to_string(h);
      int q = ag::matmul(t, q_in, p(t, base + ".wq" + hs));
      int k = ag::matmul(t, kv_in, p(t, base + ".wk" + hs));
      int v = ag::matmul(t, kv_in, p(t, base + ".wv" + hs));
      int scores = ag::scale(t, ag::matmul(t, q, ag::transpose(t, k)), inv_sqrt_dk);
      int probs = causal ? ag::causal_softmax_rows(t, scores)
                         : ag::softmax_rows(t, scores);
      heads.push_back(ag::matmul(t, probs, v));
    }
    int ctx = ag::hstack(t, heads);
    return ag::add_rowvec(t, ag::matmul(t, ctx, p(t, base + ".wo")),
                          p(t, base + ".bo"));
  }

  int ffn(Tape& t, int x, const std::string& base) const {
    int h = ag::add_rowvec(t, ag::matmul(t, x, p(t, base + ".w1")), p(t, base + ".b1"));
    h = ag::relu(t, h);
    return ag::add_rowvec(t, ag::matmul(t, h, p(t, base + ".w2")), p(t, base + ".b2"));
  }

  int encoder_layer(Tape& t, int x, const std::string& base, Rng* rng) const {
    int h = layer_norm(t, x, base + ".ln1");
    h = attention(t, h, h, base + ".attn", /*causal=*/false);
    x = ag::add(t, x, ag::dropout(t, h, cfg_.dropout, rng));
    h = layer_norm(t, x, base + ".ln2");
    h = ffn(t, h, base + ".ffn");
    return ag::add(t, x, ag::dropout(t, h, cfg_.dropout, rng));
  }

  void add_norm_params(const std::string& base) {
    params_.add(base + ".gain", 1, cfg_.hidden_dim);
    params_.add(base + ".bias", 1, cfg_.hidden_dim);
  }

  void add_attention_params(const std::string& base) {
    for (int h = 0; h < cfg_.heads; ++h) {
      const std::string hs = std::to_string(h);
      params_.add(base + ".wq" + hs, cfg_.hidden_dim, cfg_.head_dim());
      params_.add(base + ".wk" + hs, cfg_.hidden_dim, cfg_.head_dim());
      params_.add(base + ".wv" + hs, cfg_.hidden_dim, cfg_.head_dim());
    }
    params_.add(base + ".wo", cfg_.hidden_dim, cfg_.hidden_dim);
    params_.add(base + ".bo", 1, cfg_.hidden_dim);
  }

  void add_ffn_params(const std::string& base) {
    params_.add(base + ".w1", cfg_.hidden_dim, cfg_.ffn_dim);
    params_.add(base + ".b1", 1, cfg_.ffn_dim);
    params_.add(base + ".w2", cfg_.ffn_dim, cfg_.hidden_dim);
    params_.add(base + ".b2", 1, cfg_.hidden_dim);
  }

  void add_encoder_layer_params(const std::string& base) {
    add_norm_params(base + ".ln1");
    add_attention_params(base + ".attn");
    add_norm_params(base + ".ln2");
    add_ffn_params(base + ".ffn");
  }

  void build_params() {
    params_ = ParamStore<S>();
    params_.add("speech_enc.front.w", 2 * cfg_.feature_dim, cfg_.hidden_dim);
    params_.add("speech_enc.front.b", 1, cfg_.hidden_dim);
    for (int l = 0; l < cfg_.speech_layers; ++l) {
      add_encoder_layer_params("speech_enc.l" + std::to_string(l));
    }
    add_norm_params("speech_enc.final");

    params_.add("ctx_enc.embed", cfg_.vocab_size, cfg_.hidden_dim);
    for (int l = 0; l < cfg_.context_layers; ++l) {
      add_encoder_layer_params("ctx_enc.l" + std::to_string(l));
    }
    add_norm_params("ctx_enc.final");

    params_.add("fusion.w", cfg_.hidden_dim, cfg_.hidden_dim);
    params_.add("fusion.b", 1, cfg_.hidden_dim);

    params_.add("decoder.embed", cfg_.vocab_size, cfg_.hidden_dim);
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      const std::string base = "decoder.l" + std::to_string(l);
      add_norm_params(base + ".ln1");
      add_attention_params(base + ".self");
      add_norm_params(base + ".ln2");
      add_attention_params(base + ".cross");
      add_norm_params(base + ".ln3");
      add_ffn_params(base + ".ffn");
    }
    add_norm_params("decoder.final");
    params_.add("decoder.out.w", cfg_.hidden_dim, cfg_.vocab_size);
    params_.add("decoder.out.b", 1, cfg_.vocab_size);
  }

  void init_params(std::uint64_t seed) {
    for (std::size_t i = 0; i < params_.values.size(); ++i) {
      const std::string& name = params_.names[i];
      MatX<S>& w = params_.values[i];
      Rng rng(derive_seed(seed, "param-init", fnv1a64(name)));
      if (name.ends_with(".gain")) {
        w.setOnes();
      } else if (name.ends_with(".bias") || name.ends_with(".b") ||
                 name.ends_with(".bo") || name.ends_with(".b1") ||
                 name.ends_with(".b2")) {
        w.setZero();
      } else if (name.ends_with(".embed")) {
        for (int r = 0; r < w.rows(); ++r) {
          for (int c = 0; c < w.cols(); ++c) {
            w(r, c) = static_cast<S>(0.05 * rng.normal());
          }
        }
      } else {
        const double limit = std::sqrt(6.0 / (w.rows() + w.cols()));
        for (int r = 0; r < w.rows(); ++r) {
          for (int c = 0; c < w.cols(); ++c) {
            w(r, c) = static_cast<S>(rng.uniform(-limit, limit));
          }
        }
      }
    }
  }

  ModelConfig cfg_;
  ParamStore<S> params_;
};

/// Eq.-style cosine embedding loss on plain vectors: 1 - cos for matched
/// pairs, max(0, cos - margin) for mismatched ones.
struct CosineLossConfig {
  int y = 1;  // 1 or -1
  double margin = 0.0;
};

template <typename S>
S cosine_embedding_loss(const VecX<S>& x1, const VecX<S>& x2,
                        const CosineLossConfig& cfg = {}) {
  const S n1 = x1.norm();
  const S n2 = x2.norm();
  if (n1 <= S(0) || n2 <= S(0)) {
    throw std::invalid_argument("cosine_embedding_loss: zero vector");
  }
  const S c = x1.dot(x2) / (n1 * n2);
  if (cfg.y == 1) return S(1) - c;
  if (cfg.y == -1) return std::max(S(0), c - static_cast<S>(cfg.margin));
  throw std::invalid_argument("cosine_embedding_loss: y must be 1 or -1");
}

}  // namespace caasr

#endif  // CAASR_MODEL_HPP
