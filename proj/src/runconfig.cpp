#include "caasr/runconfig.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "caasr/hash.hpp"

namespace caasr {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) {
      throw ConfigError("unknown key \"" + key + "\" in " + where);
    }
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

SelectionMetric parse_metric(const std::string& name) {
  if (name == "val_loss") return SelectionMetric::kValLoss;
  if (name == "dev_wer") return SelectionMetric::kDevWer;
  if (name == "cnrl_dev_loss") return SelectionMetric::kCnrlDevLoss;
  throw ConfigError("unknown selection_metric: " + name);
}

std::string metric_name(SelectionMetric m) {
  switch (m) {
    case SelectionMetric::kValLoss: return "val_loss";
    case SelectionMetric::kDevWer: return "dev_wer";
    case SelectionMetric::kCnrlDevLoss: return "cnrl_dev_loss";
  }
  return "?";
}

StageConfig parse_stage(const json& j, StageConfig base, const std::string& where) {
  reject_unknown(j,
                 {"lr", "weight_decay", "beta1", "beta2", "grad_clip", "batch_size",
                  "max_epochs", "optimizer", "selection_metric"},
                 where);
  maybe(j, "lr", base.lr);
  maybe(j, "weight_decay", base.weight_decay);
  maybe(j, "beta1", base.beta1);
  maybe(j, "beta2", base.beta2);
  maybe(j, "grad_clip", base.grad_clip);
  maybe(j, "batch_size", base.batch_size);
  maybe(j, "max_epochs", base.max_epochs);
  if (j.contains("optimizer")) {
    const std::string name = j.at("optimizer").get<std::string>();
    if (name == "adam") base.optimizer = OptimizerKind::kAdam;
    else if (name == "adamw") base.optimizer = OptimizerKind::kAdamW;
    else throw ConfigError("unknown optimizer: " + name);
  }
  if (j.contains("selection_metric")) {
    base.selection_metric = parse_metric(j.at("selection_metric").get<std::string>());
  }
  return base;
}

json stage_to_json(const StageConfig& c) {
  return json{{"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"grad_clip", c.grad_clip},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"optimizer", c.optimizer == OptimizerKind::kAdamW ? "adamw" : "adam"},
              {"selection_metric", metric_name(c.selection_metric)}};
}

}  // namespace

RunConfig RunConfig::desk_default() {
  RunConfig c;
  // From-scratch desk training wants larger steps than the reference
  // fine-tuning recipe; relative ordering across stages is preserved.
  c.pretrain.lr = 3e-4;
  c.pretrain.max_epochs = 8;
  c.finetune.lr = 3e-4;
  c.finetune.batch_size = 32;
  c.finetune.max_epochs = 8;
  c.cnrl.lr = 2e-4;
  c.cnrl.batch_size = 64;
  c.cnrl.max_epochs = 5;
  return c;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c = desk_default();
  reject_unknown(j,
                 {"seed", "paths", "data", "model", "stages", "mask", "noise",
                  "noisy_gen", "cnrl_data", "flags"},
                 "run config");
  maybe(j, "seed", c.seed);

  if (j.contains("paths")) {
    const json& p = j.at("paths");
    reject_unknown(p, {"corpus", "checkpoints", "reports"}, "paths");
    if (p.contains("corpus")) c.paths.corpus = p.at("corpus").get<std::string>();
    if (p.contains("checkpoints"))
      c.paths.checkpoints = p.at("checkpoints").get<std::string>();
    if (p.contains("reports")) c.paths.reports = p.at("reports").get<std::string>();
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d,
                   {"n_dialogues", "turns_min", "turns_max", "n_dev_dialogues",
                    "n_test_dialogues", "feature_dim", "frame_rate_hz",
                    "external_pretrain_jsonl"},
                   "data");
    maybe(d, "n_dialogues", c.data.n_dialogues);
    maybe(d, "turns_min", c.data.turns_min);
    maybe(d, "turns_max", c.data.turns_max);
    maybe(d, "n_dev_dialogues", c.data.n_dev_dialogues);
    maybe(d, "n_test_dialogues", c.data.n_test_dialogues);
    maybe(d, "feature_dim", c.data.feature_dim);
    maybe(d, "frame_rate_hz", c.data.frame_rate_hz);
    maybe(d, "external_pretrain_jsonl", c.data.external_pretrain_jsonl);
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown(m,
                   {"hidden_dim", "heads", "speech_layers", "context_layers",
                    "decoder_layers", "ffn_dim", "dropout", "max_context_tokens",
                    "max_decode_len", "pooling"},
                   "model");
    maybe(m, "hidden_dim", c.model.hidden_dim);
    maybe(m, "heads", c.model.heads);
    maybe(m, "speech_layers", c.model.speech_layers);
    maybe(m, "context_layers", c.model.context_layers);
    maybe(m, "decoder_layers", c.model.decoder_layers);
    maybe(m, "ffn_dim", c.model.ffn_dim);
    maybe(m, "dropout", c.model.dropout);
    maybe(m, "max_context_tokens", c.model.max_context_tokens);
    maybe(m, "max_decode_len", c.model.max_decode_len);
    maybe(m, "pooling", c.model.pooling);
  }

  if (j.contains("stages")) {
    const json& s = j.at("stages");
    reject_unknown(s, {"pretrain", "finetune", "cnrl"}, "stages");
    if (s.contains("pretrain"))
      c.pretrain = parse_stage(s.at("pretrain"), c.pretrain, "stages.pretrain");
    if (s.contains("finetune"))
      c.finetune = parse_stage(s.at("finetune"), c.finetune, "stages.finetune");
    if (s.contains("cnrl")) c.cnrl = parse_stage(s.at("cnrl"), c.cnrl, "stages.cnrl");
  }

  if (j.contains("mask")) {
    const json& m = j.at("mask");
    reject_unknown(m, {"select_prob", "mask_fraction", "chunk_seconds"}, "mask");
    maybe(m, "select_prob", c.mask.select_prob);
    maybe(m, "mask_fraction", c.mask.mask_fraction);
    maybe(m, "chunk_seconds", c.mask.chunk_seconds);
  }

  if (j.contains("noise")) {
    const json& n = j.at("noise");
    reject_unknown(n, {"snr_levels_db", "bank_size"}, "noise");
    maybe(n, "snr_levels_db", c.noise.snr_levels_db);
    maybe(n, "bank_size", c.noise.bank_size);
  }

  if (j.contains("noisy_gen")) {
    const json& n = j.at("noisy_gen");
    reject_unknown(n, {"folds", "fold_epochs"}, "noisy_gen");
    maybe(n, "folds", c.noisy_gen.folds);
    maybe(n, "fold_epochs", c.noisy_gen.fold_epochs);
  }

  if (j.contains("cnrl_data")) {
    const json& n = j.at("cnrl_data");
    reject_unknown(n, {"variant", "word_drop_p", "target_wer", "max_wer_filter"},
                   "cnrl_data");
    maybe(n, "variant", c.cnrl_data.variant);
    maybe(n, "word_drop_p", c.cnrl_data.word_drop_p);
    maybe(n, "target_wer", c.cnrl_data.target_wer);
    maybe(n, "max_wer_filter", c.cnrl_data.max_wer_filter);
  }

  if (j.contains("flags")) {
    const json& f = j.at("flags");
    reject_unknown(f, {"use_ground_truth_context", "decoder_init"}, "flags");
    maybe(f, "use_ground_truth_context", c.flags.use_ground_truth_context);
    maybe(f, "decoder_init", c.flags.decoder_init);
  }

  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("run config parse error: " + std::string(e.what()));
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["paths"] = {{"corpus", paths.corpus.string()},
                {"checkpoints", paths.checkpoints.string()},
                {"reports", paths.reports.string()}};
  j["data"] = {{"n_dialogues", data.n_dialogues},
               {"turns_min", data.turns_min},
               {"turns_max", data.turns_max},
               {"n_dev_dialogues", data.n_dev_dialogues},
               {"n_test_dialogues", data.n_test_dialogues},
               {"feature_dim", data.feature_dim},
               {"frame_rate_hz", data.frame_rate_hz},
               {"external_pretrain_jsonl", data.external_pretrain_jsonl}};
  json m = model.to_json();
  m.erase("vocab_size");         // derived from the corpus
  m.erase("context_ablation");   // a per-checkpoint regime, not run input
  m.erase("feature_dim");        // lives under data
  j["model"] = m;
  j["stages"] = {{"pretrain", stage_to_json(pretrain)},
                 {"finetune", stage_to_json(finetune)},
                 {"cnrl", stage_to_json(cnrl)}};
  j["mask"] = {{"select_prob", mask.select_prob},
               {"mask_fraction", mask.mask_fraction},
               {"chunk_seconds", mask.chunk_seconds}};
  j["noise"] = {{"snr_levels_db", noise.snr_levels_db},
                {"bank_size", noise.bank_size}};
  j["noisy_gen"] = {{"folds", noisy_gen.folds}, {"fold_epochs", noisy_gen.fold_epochs}};
  j["cnrl_data"] = {{"variant", cnrl_data.variant},
                    {"word_drop_p", cnrl_data.word_drop_p},
                    {"target_wer", cnrl_data.target_wer},
                    {"max_wer_filter", cnrl_data.max_wer_filter}};
  j["flags"] = {{"use_ground_truth_context", flags.use_ground_truth_context},
                {"decoder_init", flags.decoder_init}};
  return j;
}

std::string RunConfig::config_hash() const { return sha256_hex(to_json().dump()); }

void RunConfig::validate() const {
  if (data.n_dialogues < 1) throw ConfigError("data.n_dialogues must be positive");
  if (data.turns_min < 2 || data.turns_max < data.turns_min) {
    throw ConfigError("data.turns_min/turns_max out of range");
  }
  if (data.n_dev_dialogues + data.n_test_dialogues >= data.n_dialogues) {
    throw ConfigError("dev+test splits leave no training dialogues");
  }
  if (noisy_gen.folds < 2) throw ConfigError("noisy_gen.folds must be >= 2");
  if (noise.bank_size < 1) throw ConfigError("noise.bank_size must be >= 1");
  if (flags.decoder_init != "pretrained" && flags.decoder_init != "random") {
    throw ConfigError("flags.decoder_init must be pretrained or random");
  }
  CnrlVariant::parse(cnrl_data.variant);  // throws on unknown tags
  if (mask.select_prob < 0 || mask.select_prob > 1 || mask.mask_fraction <= 0 ||
      mask.mask_fraction > 1) {
    throw ConfigError("mask configuration out of range");
  }
}

void RunConfig::apply_env_overrides() {
  if (const char* v = std::getenv("CAASR_CORPUS_DIR")) paths.corpus = v;
  if (const char* v = std::getenv("CAASR_CHECKPOINTS_DIR")) paths.checkpoints = v;
  if (const char* v = std::getenv("CAASR_REPORTS_DIR")) paths.reports = v;
}

}  // namespace caasr
