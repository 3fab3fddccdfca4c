#include "caasr/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "caasr/hash.hpp"

namespace caasr {

using nlohmann::json;

nlohmann::json ModelConfig::to_json() const {
  return json{{"hidden_dim", hidden_dim},
              {"heads", heads},
              {"speech_layers", speech_layers},
              {"context_layers", context_layers},
              {"decoder_layers", decoder_layers},
              {"ffn_dim", ffn_dim},
              {"vocab_size", vocab_size},
              {"feature_dim", feature_dim},
              {"max_context_tokens", max_context_tokens},
              {"max_decode_len", max_decode_len},
              {"dropout", dropout},
              {"pooling", pooling},
              {"context_ablation", context_ablation}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.speech_layers = j.at("speech_layers").get<int>();
  c.context_layers = j.at("context_layers").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.max_context_tokens = j.at("max_context_tokens").get<int>();
  c.max_decode_len = j.at("max_decode_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.pooling = j.at("pooling").get<std::string>();
  c.context_ablation = j.value("context_ablation", false);
  return c;
}

namespace {
constexpr char kMagic[4] = {'C', 'A', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const std::uint32_t len = read_u32(in);
  std::string s(len, '\0');
  in.read(s.data(), len);
  return s;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out.write(kMagic, 4);
  write_u32(out, kVersion);

  json meta;
  meta["stage"] = ckpt.stage;
  meta["model"] = ckpt.config.to_json();
  meta["vocab"] = ckpt.vocab_words;
  write_string(out, meta.dump());

  write_u32(out, static_cast<std::uint32_t>(ckpt.params.values.size()));
  for (std::size_t i = 0; i < ckpt.params.values.size(); ++i) {
    write_string(out, ckpt.params.names[i]);
    const MatX<float>& w = ckpt.params.values[i];
    write_u32(out, static_cast<std::uint32_t>(w.rows()));
    write_u32(out, static_cast<std::uint32_t>(w.cols()));
    for (int r = 0; r < w.rows(); ++r) {
      for (int c = 0; c < w.cols(); ++c) {
        const float v = w(r, c);
        out.write(reinterpret_cast<const char*>(&v), 4);
      }
    }
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
  }
  if (read_u32(in) != kVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version in " + path.string());
  }
  json meta = json::parse(read_string(in));

  Checkpoint ckpt;
  ckpt.stage = meta.at("stage").get<std::string>();
  ckpt.config = ModelConfig::from_json(meta.at("model"));
  ckpt.vocab_words = meta.at("vocab").get<std::vector<std::string>>();

  const std::uint32_t n = read_u32(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = read_string(in);
    const std::uint32_t rows = read_u32(in);
    const std::uint32_t cols = read_u32(in);
    MatX<float> w(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) {
        float v = 0.0f;
        in.read(reinterpret_cast<char*>(&v), 4);
        w(r, c) = v;
      }
    }
    ckpt.params.names.push_back(name);
    ckpt.params.values.push_back(std::move(w));
    ckpt.params.index[name] = static_cast<int>(i);
  }
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path.string());
  return ckpt;
}

std::string param_array_hash(const MatX<float>& values) {
  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(values.size()) * 4);
  for (int r = 0; r < values.rows(); ++r) {
    for (int c = 0; c < values.cols(); ++c) {
      const float v = values(r, c);
      const char* p = reinterpret_cast<const char*>(&v);
      bytes.append(p, 4);
    }
  }
  return sha256_hex(bytes);
}

std::vector<std::pair<std::string, std::string>> param_hashes(
    const ParamStore<float>& params) {
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(params.values.size());
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    out.emplace_back(params.names[i], param_array_hash(params.values[i]));
  }
  return out;
}

std::string checkpoint_file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint_file_hash: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

}  // namespace caasr
