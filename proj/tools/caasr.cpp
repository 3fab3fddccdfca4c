#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "caasr/eval.hpp"
#include "caasr/hash.hpp"
#include "caasr/pipeline.hpp"
#include "caasr/runconfig.hpp"
#include "caasr/textnorm.hpp"
#include "caasr/training.hpp"

using namespace caasr;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunConfig load_config(const std::string& path) {
  RunConfig cfg = path.empty() ? RunConfig::desk_default() : RunConfig::load(path);
  cfg.apply_env_overrides();
  return cfg;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

ModelConfig model_config_of(const RunConfig& cfg) {
  ModelConfig mc = cfg.model;
  mc.feature_dim = cfg.data.feature_dim;
  return mc;
}

void save_and_manifest(const RunConfig& cfg, const std::string& stage,
                       const TrainOutput& out, const json& inputs) {
  fs::create_directories(cfg.paths.checkpoints);
  fs::create_directories(cfg.paths.reports);
  const fs::path path = cfg.paths.checkpoints / (stage + ".ckpt");
  save_checkpoint(path, out.checkpoint);
  const json manifest = stage_manifest(
      stage, cfg, inputs,
      json{{"checkpoint", {{"path", path.string()}, {"sha256", checkpoint_file_hash(path)}}}},
      json{{"curve", curve_to_json(out.curve)},
           {"best_epoch", out.best_epoch},
           {"best_value", out.best_value}});
  write_json(cfg.paths.reports / ("manifest_" + stage + ".json"), manifest);
  std::cout << manifest.dump(2) << std::endl;
}

Checkpoint require_checkpoint(const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) {
    throw ConfigError("missing checkpoint " + path.string() + "; run " + hint +
                      " first");
  }
  return load_checkpoint(path);
}

std::vector<NoisyContextPair> require_pairs(const fs::path& path,
                                            const std::string& hint) {
  if (!fs::exists(path)) {
    throw ConfigError("missing pairs file " + path.string() + "; run " + hint +
                      " first");
  }
  return load_pairs_jsonl(path);
}

// Standalone CNRL holds out a slice of pairs (by dialogue) for selection.
std::pair<std::vector<NoisyContextPair>, std::vector<NoisyContextPair>> split_pairs(
    const std::vector<NoisyContextPair>& pairs, std::uint64_t seed) {
  std::vector<NoisyContextPair> train, dev;
  for (const auto& p : pairs) {
    if (derive_seed(seed, "cnrl-dev-slice", fnv1a64(p.dialogue_id)) % 10 == 0) {
      dev.push_back(p);
    } else {
      train.push_back(p);
    }
  }
  if (train.empty()) train = pairs;
  return {train, dev};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"context-aware dialogue speech recognition workbench"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "run configuration JSON")
      ->envname("CAASR_CONFIG");

  // gen-data ------------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  gen->callback([&] {
    const RunConfig cfg = load_config(config_path);
    const CorpusBundle bundle = cmd_gen_data(cfg);
    std::cout << json{{"corpus", cfg.paths.corpus.string()},
                      {"train", bundle.train.size()},
                      {"dev", bundle.dev.size()},
                      {"test", bundle.test.size()},
                      {"vocab", bundle.tok.vocab_size()}}
                     .dump(2)
              << std::endl;
  });

  // pretrain -------------------------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "decoder pre-training on dialogue text");
  pre->callback([&] {
    const RunConfig cfg = load_config(config_path);
    const CorpusBundle bundle = load_corpus_bundle(cfg);
    std::vector<Dialogue> text = bundle.train;
    if (!cfg.data.external_pretrain_jsonl.empty()) {
      auto extra = load_dialogues_jsonl(cfg.data.external_pretrain_jsonl, false);
      for (auto& d : extra) d.id = "ext_" + d.id;
      text.insert(text.end(), extra.begin(), extra.end());
    }
    StageConfig sc = cfg.pretrain;
    sc.seed = derive_seed(cfg.seed, "pretrain");
    const TrainOutput out =
        pretrain_decoder(text, bundle.dev, bundle.tok, model_config_of(cfg), sc);
    save_and_manifest(cfg, "pretrain", out,
                      json{{"dialogues_jsonl_sha256", bundle.corpus_file_hash}});
  });

  // finetune -------------------------------------------------------------------
  auto* ft = app.add_subcommand("finetune", "ASR fine-tuning with audio masking");
  std::string ft_init = "pretrained";
  bool ft_speech_only = false;
  ft->add_option("--init", ft_init, "decoder init: pretrained|random")
      ->check(CLI::IsMember({"pretrained", "random"}));
  ft->add_flag("--speech-only", ft_speech_only,
               "train the context-free baseline (BOS-only context)");
  ft->callback([&] {
    const RunConfig cfg = load_config(config_path);
    const CorpusBundle bundle = load_corpus_bundle(cfg);
    FinetuneOptions opts;
    opts.mask = cfg.mask;
    opts.context_ablation = ft_speech_only;
    Checkpoint pretrained;
    json inputs = {{"dialogues_jsonl_sha256", bundle.corpus_file_hash}};
    std::string stage = ft_speech_only ? "finetune_speech_only" : "finetune_random";
    if (!ft_speech_only && ft_init == "pretrained") {
      pretrained = require_checkpoint(cfg.paths.checkpoints / "pretrain.ckpt",
                                      "pretrain");
      opts.init = DecoderInit::kPretrained;
      opts.pretrained = &pretrained;
      stage = "finetune_pretrained";
      inputs["pretrain_checkpoint_sha256"] =
          checkpoint_file_hash(cfg.paths.checkpoints / "pretrain.ckpt");
    }
    StageConfig sc = cfg.finetune;
    sc.seed = derive_seed(cfg.seed, ft_speech_only ? "finetune-speech-only"
                                                   : (ft_init == "pretrained"
                                                          ? "finetune-pretrained"
                                                          : "finetune-random"));
    const TrainOutput out = finetune_asr(bundle.train, bundle.dev, bundle.tok,
                                         model_config_of(cfg), opts, sc);
    save_and_manifest(cfg, stage, out, inputs);
  });

  // gen-noisy -------------------------------------------------------------------
  auto* gn = app.add_subcommand("gen-noisy", "10-fold noisy transcript generation");
  gn->callback([&] {
    const RunConfig cfg = load_config(config_path);
    const CorpusBundle bundle = load_corpus_bundle(cfg);
    NoisyGenConfig ng;
    ng.folds = cfg.noisy_gen.folds;
    ng.seed = derive_seed(cfg.seed, "noisy-gen");
    ng.fold_stage = cfg.finetune;
    ng.fold_stage.max_epochs = cfg.noisy_gen.fold_epochs;
    ng.fold_options.mask = cfg.mask;
    Checkpoint pretrained;
    if (cfg.flags.decoder_init == "pretrained") {
      pretrained = require_checkpoint(cfg.paths.checkpoints / "pretrain.ckpt",
                                      "pretrain");
      ng.fold_options.init = DecoderInit::kPretrained;
      ng.fold_options.pretrained = &pretrained;
    }
    const NoisyGenResult r = generate_noisy_contexts(bundle.train, bundle.dev,
                                                     bundle.tok, model_config_of(cfg),
                                                     ng);
    const fs::path pairs_path = cfg.paths.corpus / "noisy_pairs.jsonl";
    save_pairs_jsonl(pairs_path, r.pairs);
    save_fold_assignment(cfg.paths.corpus / "folds.json", r.folds);
    std::cout << json{{"pairs", r.pairs.size()},
                      {"transcript_corpus_wer", r.transcript_corpus_wer},
                      {"output", pairs_path.string()}}
                     .dump(2)
              << std::endl;
  });

  // build-cnrl ------------------------------------------------------------------
  auto* bc = app.add_subcommand("build-cnrl", "assemble a CNRL training set");
  std::string bc_variant = "S4";
  bc->add_option("--variant", bc_variant, "S1|S2|S3|S4")
      ->check(CLI::IsMember({"S1", "S2", "S3", "S4"}));
  bc->callback([&] {
    const RunConfig cfg = load_config(config_path);
    CnrlVariant variant = CnrlVariant::parse(bc_variant);
    variant.per_word_drop_p = cfg.cnrl_data.word_drop_p;
    variant.target_wer = cfg.cnrl_data.target_wer;

    std::vector<NoisyContextPair> source;
    if (variant.tag == CnrlVariant::kS1) {
      source = make_clean_pairs(load_corpus_bundle(cfg).train);
    } else {
      source = filter_noisy(require_pairs(cfg.paths.corpus / "noisy_pairs.jsonl",
                                          "gen-noisy"),
                            cfg.cnrl_data.max_wer_filter)
                   .kept;
    }
    auto built = build_cnrl_set(source, variant, derive_seed(cfg.seed, "cnrl-build"));
    const auto final_set = filter_noisy(built, cfg.cnrl_data.max_wer_filter);
    const fs::path out_path =
        cfg.paths.corpus / ("cnrl_pairs_" + variant.name() + ".jsonl");
    save_pairs_jsonl(out_path, final_set.kept);
    std::cout << json{{"variant", variant.name()},
                      {"pairs", final_set.kept.size()},
                      {"output", out_path.string()}}
                     .dump(2)
              << std::endl;
  });

  // cnrl ----------------------------------------------------------------------
  auto* cn = app.add_subcommand("cnrl", "context noise representation learning");
  std::string cn_base = "finetune_pretrained.ckpt";
  std::string cn_variant = "S4";
  cn->add_option("--base", cn_base, "base checkpoint file name");
  cn->add_option("--variant", cn_variant, "pairs variant to train on");
  cn->callback([&] {
    const RunConfig cfg = load_config(config_path);
    const auto pairs = require_pairs(
        cfg.paths.corpus / ("cnrl_pairs_" + cn_variant + ".jsonl"), "build-cnrl");
    const Checkpoint base =
        require_checkpoint(cfg.paths.checkpoints / cn_base, "finetune");
    StageConfig sc = cfg.cnrl;
    sc.seed = derive_seed(cfg.seed, "cnrl-cli");
    const auto [train, dev] = split_pairs(pairs, cfg.seed);
    const TrainOutput out = train_cnrl(train, dev, base, sc);
    save_and_manifest(cfg, "cnrl_" + cn_variant, out,
                      json{{"base_checkpoint_sha256",
                            checkpoint_file_hash(cfg.paths.checkpoints / cn_base)},
                           {"variant", cn_variant}});
  });

  // full-finetune-s4 -------------------------------------------------------------
  auto* ff = app.add_subcommand("full-finetune-s4",
                                "ablation: fine-tune all parameters on S4 contexts");
  std::string ff_base = "finetune_pretrained.ckpt";
  ff->add_option("--base", ff_base, "base checkpoint file name");
  ff->callback([&] {
    const RunConfig cfg = load_config(config_path);
    const CorpusBundle bundle = load_corpus_bundle(cfg);
    const auto pairs =
        require_pairs(cfg.paths.corpus / "cnrl_pairs_S4.jsonl", "build-cnrl");
    const Checkpoint base =
        require_checkpoint(cfg.paths.checkpoints / ff_base, "finetune");
    StageConfig sc = cfg.finetune;
    sc.seed = derive_seed(cfg.seed, "full-finetune-s4");
    const TrainOutput out = full_finetune_with_noise(pairs, bundle.train, bundle.dev,
                                                     base, cfg.mask, sc);
    save_and_manifest(cfg, "full_finetune_s4", out,
                      json{{"base_checkpoint_sha256",
                            checkpoint_file_hash(cfg.paths.checkpoints / ff_base)}});
  });

  // eval ----------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint across noise levels");
  std::string ev_ckpt = "finetune_pretrained.ckpt";
  std::vector<double> ev_snr;
  bool ev_gt = false, ev_plot = false, ev_csv = false;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file name");
  ev->add_option("--snr", ev_snr, "SNR levels in dB (clean always included)");
  ev->add_flag("--ground-truth-context", ev_gt, "upper-bound context regime");
  ev->add_flag("--plot", ev_plot, "emit a WER bar chart SVG");
  ev->add_flag("--csv", ev_csv, "emit the per-turn CSV");
  ev->callback([&] {
    const RunConfig cfg = load_config(config_path);
    const CorpusBundle bundle = load_corpus_bundle(cfg);
    const Checkpoint ckpt =
        require_checkpoint(cfg.paths.checkpoints / ev_ckpt, "finetune");
    const auto model = ckpt.to_model();

    std::vector<double> levels = ev_snr.empty() ? cfg.noise.snr_levels_db : ev_snr;
    const std::uint64_t bank_seed = derive_seed(cfg.seed, "noise-bank");
    std::vector<NoiseCondition> conditions = {NoiseCondition::clean()};
    for (double db : levels) conditions.push_back(NoiseCondition::snr(db, bank_seed));
    const auto bank =
        generate_noise_bank(cfg.noise.bank_size, bank_seed, cfg.data.feature_dim,
                            static_cast<float>(cfg.data.frame_rate_hz));

    MetricsReport r = evaluate(model, bundle.tok, bundle.test, conditions, &bank,
                               ev_gt || cfg.flags.use_ground_truth_context);
    r.metadata = {{"checkpoint", ev_ckpt},
                  {"checkpoint_sha256",
                   checkpoint_file_hash(cfg.paths.checkpoints / ev_ckpt)},
                  {"seed", cfg.seed},
                  {"ground_truth_context", ev_gt || cfg.flags.use_ground_truth_context}};
    fs::create_directories(cfg.paths.reports);
    const fs::path out_path = cfg.paths.reports / "eval.json";
    write_json(out_path, r.to_json());
    if (ev_csv) {
      std::ofstream out(cfg.paths.reports / "eval_per_turn.csv");
      out << r.to_csv();
    }
    if (ev_plot) {
      std::vector<std::string> names;
      for (const auto& c : conditions) names.push_back(c.name);
      write_wer_bars_svg(cfg.paths.reports / "eval_wer_bars.svg", names,
                         {{ev_ckpt, r.condition_wer}});
    }
    std::cout << r.to_json().dump(2) << std::endl;
  });

  // wer -----------------------------------------------------------------------
  auto* wr = app.add_subcommand("wer", "word error rate between two transcripts");
  std::string wer_ref, wer_hyp;
  wr->add_option("--ref", wer_ref, "reference file, one utterance per line")
      ->required();
  wr->add_option("--hyp", wer_hyp, "hypothesis file, one utterance per line")
      ->required();
  wr->callback([&] {
    const auto refs = read_lines(wer_ref);
    const auto hyps = read_lines(wer_hyp);
    if (refs.size() != hyps.size()) {
      throw ConfigError("ref and hyp line counts differ");
    }
    std::vector<std::pair<std::string, std::string>> pairs;
    for (std::size_t i = 0; i < refs.size(); ++i) pairs.emplace_back(refs[i], hyps[i]);
    WerCounts counts;
    const double value = corpus_wer(pairs, &counts);
    std::cout << json{{"wer", value},
                      {"S", counts.substitutions},
                      {"D", counts.deletions},
                      {"I", counts.insertions},
                      {"N", counts.ref_words}}
                     .dump(2)
              << std::endl;
  });

  // mix-noise -------------------------------------------------------------------
  auto* mx = app.add_subcommand("mix-noise", "add noise at a target SNR");
  std::string mx_in, mx_out, mx_noise;
  double mx_snr = 0.0;
  std::uint64_t mx_seed = 0;
  int mx_clip = 0, mx_bank = 2000;
  mx->add_option("--in", mx_in, "input feature file")->required();
  mx->add_option("--out", mx_out, "output feature file")->required();
  mx->add_option("--snr", mx_snr, "target SNR in dB")->required();
  mx->add_option("--noise", mx_noise, "noise feature file (default: synthetic bank)");
  mx->add_option("--seed", mx_seed, "bank seed");
  mx->add_option("--clip", mx_clip, "bank clip index");
  mx->add_option("--bank-size", mx_bank, "bank size");
  mx->callback([&] {
    const FeatureSequence signal = load_features(mx_in);
    FeatureSequence noise;
    if (!mx_noise.empty()) {
      noise = load_features(mx_noise);
    } else {
      if (mx_clip < 0 || mx_clip >= mx_bank) throw ConfigError("clip outside bank");
      noise = make_noise_clip(derive_seed(mx_seed, "noise-clip", mx_clip),
                              signal.dim(), signal.frame_rate_hz);
    }
    const FeatureSequence mixed =
        mix_noise(signal, noise, mx_snr, derive_seed(mx_seed, "mix"));
    save_features(mx_out, mixed);
    const Matf additive = mixed.frames - signal.frames;
    const double measured =
        20.0 * std::log10(rms(signal.frames) / rms(additive));
    std::cout << json{{"target_snr_db", mx_snr}, {"measured_snr_db", measured}}.dump(2)
              << std::endl;
  });

  // mask ------------------------------------------------------------------------
  auto* mk = app.add_subcommand("mask", "chunked audio masking");
  std::string mk_in, mk_out;
  double mk_p = 0.10, mk_frac = 0.20;
  std::uint64_t mk_seed = 0;
  mk->add_option("--in", mk_in)->required();
  mk->add_option("--out", mk_out)->required();
  mk->add_option("--p", mk_p, "selection probability");
  mk->add_option("--frac", mk_frac, "masked fraction of duration");
  mk->add_option("--seed", mk_seed);
  mk->callback([&] {
    const FeatureSequence in_seq = load_features(mk_in);
    MaskConfig mcfg;
    mcfg.select_prob = mk_p;
    mcfg.mask_fraction = mk_frac;
    const auto [masked, report] = mask_audio(in_seq, mcfg, mk_seed);
    save_features(mk_out, masked);
    std::cout << json{{"selected", report.selected},
                      {"total_chunks", report.total_chunks},
                      {"masked_chunks", report.masked_chunks}}
                     .dump(2)
              << std::endl;
  });

  // corrupt-text -----------------------------------------------------------------
  auto* ct = app.add_subcommand("corrupt-text", "WER-targeted word drop on user turns");
  std::string ct_in, ct_out;
  double ct_p = 0.10, ct_target = 0.065;
  std::uint64_t ct_seed = 0;
  ct->add_option("--in", ct_in, "dialogues JSONL")->required();
  ct->add_option("--out", ct_out, "corrupted dialogues JSONL")->required();
  ct->add_option("--p", ct_p, "per-word drop probability");
  ct->add_option("--target", ct_target, "target WER");
  ct->add_option("--seed", ct_seed);
  ct->callback([&] {
    auto dialogues = load_dialogues_jsonl(ct_in, false);
    WerCounts counts;
    for (auto& d : dialogues) {
      std::vector<ContextEntry> entries;
      for (const auto& t : d.turns) {
        entries.push_back({Role::kUser, normalize(t.user_text)});
        entries.push_back({Role::kAgent, t.agent_text});
      }
      const auto dropped =
          word_drop(entries, ct_p, ct_target, derive_seed(ct_seed, "corrupt",
                                                          fnv1a64(d.id)));
      for (std::size_t i = 0; i < d.turns.size(); ++i) {
        EditAlignment a;
        wer(entries[2 * i].text, dropped[2 * i].text, &a);
        counts.substitutions += a.substitutions;
        counts.deletions += a.deletions;
        counts.insertions += a.insertions;
        counts.ref_words += a.ref_len;
        d.turns[i].user_text = dropped[2 * i].text;
      }
    }
    save_dialogues_jsonl(ct_out, dialogues, fs::path(ct_out).parent_path() / "features");
    std::cout << json{{"achieved_corpus_wer", counts.value()},
                      {"output", ct_out}}
                     .dump(2)
              << std::endl;
  });

  // pipeline ----------------------------------------------------------------------
  auto* pl = app.add_subcommand("pipeline", "run every stage end to end");
  bool pl_no_plot = false;
  pl->add_flag("--no-plot", pl_no_plot, "skip the SVG chart");
  pl->callback([&] {
    const RunConfig cfg = load_config(config_path);
    const PipelineArtifacts art = cmd_pipeline(cfg, !pl_no_plot);
    std::cout << json{{"report", art.report_path.string()},
                      {"grid", art.grid},
                      {"ground_truth_context_wer", art.ground_truth_wer}}
                     .dump(2)
              << std::endl;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << std::endl;
    return kExitStageFailure;
  }
  return kExitOk;
}
