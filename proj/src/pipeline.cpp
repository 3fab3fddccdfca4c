#include "caasr/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "caasr/hash.hpp"

namespace caasr {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StageError("cannot hash missing file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

struct StageTimer {
  using Clock = std::chrono::steady_clock;
  json timings = json::object();
  Clock::time_point mark = Clock::now();

  void lap(const std::string& name) {
    const auto now = Clock::now();
    timings[name] = std::chrono::duration<double>(now - mark).count();
    mark = now;
  }
};

std::vector<Dialogue> select_by_ids(const std::vector<Dialogue>& all,
                                    const std::set<std::string>& ids) {
  std::vector<Dialogue> out;
  for (const auto& d : all) {
    if (ids.count(d.id)) out.push_back(d);
  }
  return out;
}

}  // namespace

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw StageError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json curve_to_json(const std::vector<EpochMetric>& curve) {
  json arr = json::array();
  for (const auto& m : curve) {
    arr.push_back({{"epoch", m.epoch},
                   {"train_loss", m.train_loss},
                   {"selection_value", m.selection_value}});
  }
  return arr;
}

json stage_manifest(const std::string& stage, const RunConfig& cfg,
                    const json& inputs, const json& outputs, const json& metrics) {
  return json{{"stage", stage},
              {"config_sha256", cfg.config_hash()},
              {"inputs", inputs},
              {"outputs", outputs},
              {"metrics", metrics}};
}

CorpusBundle cmd_gen_data(const RunConfig& cfg) {
  GenerationConfig gen;
  gen.n_dialogues = cfg.data.n_dialogues;
  gen.turns_min = cfg.data.turns_min;
  gen.turns_max = cfg.data.turns_max;
  gen.seed = derive_seed(cfg.seed, "gen-data");

  auto corpus = generate_synthetic_dialogues(gen);
  synthesize_corpus_speech(corpus, derive_seed(cfg.seed, "speech-synth"),
                           cfg.data.feature_dim,
                           static_cast<float>(cfg.data.frame_rate_hz));

  // Test dialogues come out first, then dev from the remainder.
  auto [rest, test] =
      split_train_dev(corpus, cfg.data.n_test_dialogues, derive_seed(cfg.seed, "test-split"));
  auto [train, dev] =
      split_train_dev(rest, cfg.data.n_dev_dialogues, derive_seed(cfg.seed, "dev-split"));

  CorpusBundle bundle;
  bundle.train = std::move(train);
  bundle.dev = std::move(dev);
  bundle.test = std::move(test);
  bundle.tok = Tokenizer::build(bundle.train);

  fs::create_directories(cfg.paths.corpus);
  const fs::path jsonl = cfg.paths.corpus / "dialogues.jsonl";
  save_dialogues_jsonl(jsonl, corpus, cfg.paths.corpus / "features");
  bundle.corpus_file_hash = file_hash(jsonl);

  {
    std::ofstream out(cfg.paths.corpus / "vocab.json");
    out << bundle.tok.to_json() << '\n';
  }

  json splits;
  auto ids_of = [](const std::vector<Dialogue>& ds) {
    std::vector<std::string> ids;
    for (const auto& d : ds) ids.push_back(d.id);
    return ids;
  };
  splits["train"] = ids_of(bundle.train);
  splits["dev"] = ids_of(bundle.dev);
  splits["test"] = ids_of(bundle.test);
  write_json(cfg.paths.corpus / "splits.json", splits);

  int total_turns = 0;
  for (const auto& d : corpus) total_turns += static_cast<int>(d.turns.size());
  write_json(cfg.paths.corpus / "manifest.json",
             stage_manifest("gen_data", cfg, json::object(),
                            json{{"dialogues_jsonl",
                                  {{"path", jsonl.string()},
                                   {"sha256", bundle.corpus_file_hash}}}},
                            json{{"n_dialogues", static_cast<int>(corpus.size())},
                                 {"n_turns", total_turns},
                                 {"n_train", static_cast<int>(bundle.train.size())},
                                 {"n_dev", static_cast<int>(bundle.dev.size())},
                                 {"n_test", static_cast<int>(bundle.test.size())},
                                 {"vocab_size", bundle.tok.vocab_size()}}));
  return bundle;
}

CorpusBundle load_corpus_bundle(const RunConfig& cfg) {
  const fs::path jsonl = cfg.paths.corpus / "dialogues.jsonl";
  const auto corpus = load_dialogues_jsonl(jsonl);

  std::ifstream vin(cfg.paths.corpus / "vocab.json");
  if (!vin) throw StageError("missing vocab.json; run gen-data first");
  std::ostringstream vss;
  vss << vin.rdbuf();

  std::ifstream sin(cfg.paths.corpus / "splits.json");
  if (!sin) throw StageError("missing splits.json; run gen-data first");
  const json splits = json::parse(sin);

  CorpusBundle bundle;
  bundle.tok = Tokenizer::from_json(vss.str());
  bundle.corpus_file_hash = file_hash(jsonl);
  auto ids = [&](const char* key) {
    const auto v = splits.at(key).get<std::vector<std::string>>();
    return std::set<std::string>(v.begin(), v.end());
  };
  bundle.train = select_by_ids(corpus, ids("train"));
  bundle.dev = select_by_ids(corpus, ids("dev"));
  bundle.test = select_by_ids(corpus, ids("test"));
  return bundle;
}

void write_wer_bars_svg(
    const fs::path& path, const std::vector<std::string>& conditions,
    const std::vector<std::pair<std::string, std::map<std::string, double>>>& models) {
  const int bar_w = 26;
  const int group_gap = 40;
  const int left = 70, bottom = 250, top = 30;
  const int group_w = static_cast<int>(models.size()) * (bar_w + 4) + group_gap;
  const int width = left + group_w * static_cast<int>(conditions.size()) + 220;
  const int height = bottom + 90;

  double max_wer = 0.05;
  for (const auto& [_, per_cond] : models) {
    for (const auto& [__, w] : per_cond) max_wer = std::max(max_wer, w);
  }
  const double scale = (bottom - top) / (max_wer * 1.15);

  static const char* kPalette[] = {"#4878d0", "#ee854a", "#6acc64",
                                   "#d65f5f", "#956cb4", "#8c613c"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"18\" font-size=\"14\" font-family=\"sans-serif\">"
      << "word error rate by noise condition</text>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << width - 20
      << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";

  for (int tick = 0; tick <= 4; ++tick) {
    const double v = max_wer * 1.15 * tick / 4.0;
    const int y = bottom - static_cast<int>(v * scale);
    svg << "<line x1=\"" << left - 4 << "\" y1=\"" << y << "\" x2=\"" << left
        << "\" y2=\"" << y << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << left - 8 << "\" y=\"" << y + 4
        << "\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"end\">"
        << std::fixed << std::setprecision(1) << 100.0 * v << "%</text>\n";
  }

  for (std::size_t c = 0; c < conditions.size(); ++c) {
    const int gx = left + static_cast<int>(c) * group_w + group_gap / 2;
    for (std::size_t m = 0; m < models.size(); ++m) {
      const auto it = models[m].second.find(conditions[c]);
      if (it == models[m].second.end()) continue;
      const int h = static_cast<int>(it->second * scale);
      const int x = gx + static_cast<int>(m) * (bar_w + 4);
      svg << "<rect x=\"" << x << "\" y=\"" << bottom - h << "\" width=\"" << bar_w
          << "\" height=\"" << h << "\" fill=\"" << kPalette[m % 6] << "\"/>\n";
    }
    svg << "<text x=\"" << gx + group_w / 2 - group_gap / 2 << "\" y=\"" << bottom + 18
        << "\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"middle\">"
        << conditions[c] << "</text>\n";
  }

  for (std::size_t m = 0; m < models.size(); ++m) {
    const int y = top + 18 * static_cast<int>(m);
    svg << "<rect x=\"" << width - 200 << "\" y=\"" << y << "\" width=\"12\" height=\"12\" fill=\""
        << kPalette[m % 6] << "\"/>\n";
    svg << "<text x=\"" << width - 182 << "\" y=\"" << y + 10
        << "\" font-size=\"11\" font-family=\"sans-serif\">" << models[m].first
        << "</text>\n";
  }
  svg << "</svg>\n";

  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw StageError("cannot write " + path.string());
  out << svg.str();
}

PipelineArtifacts cmd_pipeline(const RunConfig& cfg, bool emit_plot) {
  PipelineArtifacts art;
  StageTimer timer;
  std::vector<json> manifests;
  fs::create_directories(cfg.paths.checkpoints);
  fs::create_directories(cfg.paths.reports);

  auto run_stage = [&](const std::string& name, auto&& body) {
    try {
      body();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      json last = manifests.empty() ? json(nullptr) : manifests.back();
      throw StageError("pipeline stage \"" + name + "\" failed: " + e.what() +
                       (last.is_null() ? std::string()
                                       : "; last good artifact: " + last.dump()));
    }
    timer.lap(name);
  };

  // ---- data -----------------------------------------------------------------
  run_stage("gen_data", [&] {
    art.corpus = cmd_gen_data(cfg);
    std::ifstream in(cfg.paths.corpus / "manifest.json");
    manifests.push_back(json::parse(in));
  });
  const CorpusBundle& corpus = art.corpus;
  const json corpus_input = {{"dialogues_jsonl_sha256", corpus.corpus_file_hash}};

  auto save_stage_checkpoint = [&](const std::string& name, const TrainOutput& out,
                                   const json& extra_inputs) {
    const fs::path path = cfg.paths.checkpoints / (name + ".ckpt");
    save_checkpoint(path, out.checkpoint);
    json inputs = corpus_input;
    for (const auto& [k, v] : extra_inputs.items()) inputs[k] = v;
    json manifest = stage_manifest(
        name, cfg, inputs,
        json{{"checkpoint", {{"path", path.string()}, {"sha256", file_hash(path)}}}},
        json{{"curve", curve_to_json(out.curve)},
             {"best_epoch", out.best_epoch},
             {"best_value", out.best_value}});
    write_json(cfg.paths.reports / ("manifest_" + name + ".json"), manifest);
    manifests.push_back(manifest);
  };

  // ---- stage 1: decoder pre-training -----------------------------------------
  run_stage("pretrain", [&] {
    std::vector<Dialogue> text_corpus = corpus.train;
    if (!cfg.data.external_pretrain_jsonl.empty()) {
      auto extra = load_dialogues_jsonl(cfg.data.external_pretrain_jsonl,
                                        /*load_speech=*/false);
      for (auto& d : extra) d.id = "ext_" + d.id;
      text_corpus.insert(text_corpus.end(), extra.begin(), extra.end());
    }
    StageConfig sc = cfg.pretrain;
    sc.seed = derive_seed(cfg.seed, "pretrain");
    ModelConfig mc = cfg.model;
    mc.feature_dim = cfg.data.feature_dim;
    art.pretrain = pretrain_decoder(text_corpus, corpus.dev, corpus.tok, mc, sc);
    save_stage_checkpoint("pretrain", art.pretrain, json::object());
  });

  // ---- stage 2: ASR fine-tuning ------------------------------------------------
  ModelConfig mc = cfg.model;
  mc.feature_dim = cfg.data.feature_dim;

  const std::string pretrain_hash =
      file_hash(cfg.paths.checkpoints / "pretrain.ckpt");

  run_stage("finetune_random", [&] {
    StageConfig sc = cfg.finetune;
    sc.seed = derive_seed(cfg.seed, "finetune-random");
    FinetuneOptions opts;
    opts.init = DecoderInit::kRandom;
    opts.mask = cfg.mask;
    art.base = finetune_asr(corpus.train, corpus.dev, corpus.tok, mc, opts, sc);
    save_stage_checkpoint("finetune_random", art.base, json::object());
  });

  run_stage("finetune_pretrained", [&] {
    StageConfig sc = cfg.finetune;
    sc.seed = derive_seed(cfg.seed, "finetune-pretrained");
    FinetuneOptions opts;
    opts.init = DecoderInit::kPretrained;
    opts.pretrained = &art.pretrain.checkpoint;
    opts.mask = cfg.mask;
    art.ptr = finetune_asr(corpus.train, corpus.dev, corpus.tok, mc, opts, sc);
    save_stage_checkpoint("finetune_pretrained", art.ptr,
                          json{{"pretrain_checkpoint_sha256", pretrain_hash}});
  });

  run_stage("finetune_speech_only", [&] {
    StageConfig sc = cfg.finetune;
    sc.seed = derive_seed(cfg.seed, "finetune-speech-only");
    FinetuneOptions opts;
    opts.init = DecoderInit::kRandom;
    opts.mask = cfg.mask;
    opts.context_ablation = true;
    art.speech_only =
        finetune_asr(corpus.train, corpus.dev, corpus.tok, mc, opts, sc);
    save_stage_checkpoint("finetune_speech_only", art.speech_only, json::object());
  });

  // ---- 10-fold noisy context generation ------------------------------------------
  const bool use_pretrained = cfg.flags.decoder_init == "pretrained";
  run_stage("gen_noisy", [&] {
    NoisyGenConfig ng;
    ng.folds = cfg.noisy_gen.folds;
    ng.seed = derive_seed(cfg.seed, "noisy-gen");
    ng.fold_stage = cfg.finetune;
    ng.fold_stage.max_epochs = cfg.noisy_gen.fold_epochs;
    ng.fold_options.mask = cfg.mask;
    if (use_pretrained) {
      ng.fold_options.init = DecoderInit::kPretrained;
      ng.fold_options.pretrained = &art.pretrain.checkpoint;
    }
    art.noisy = generate_noisy_contexts(corpus.train, corpus.dev, corpus.tok, mc, ng);

    const fs::path pairs_path = cfg.paths.corpus / "noisy_pairs.jsonl";
    save_pairs_jsonl(pairs_path, art.noisy.pairs);
    save_fold_assignment(cfg.paths.corpus / "folds.json", art.noisy.folds);
    json manifest = stage_manifest(
        "gen_noisy", cfg,
        json{{"dialogues_jsonl_sha256", corpus.corpus_file_hash},
             {"pretrain_checkpoint_sha256", use_pretrained ? pretrain_hash : ""}},
        json{{"pairs", {{"path", pairs_path.string()}, {"sha256", file_hash(pairs_path)}}}},
        json{{"n_pairs", static_cast<int>(art.noisy.pairs.size())},
             {"transcript_corpus_wer", art.noisy.transcript_corpus_wer}});
    write_json(cfg.paths.reports / "manifest_gen_noisy.json", manifest);
    manifests.push_back(manifest);
  });

  // ---- CNRL training set ------------------------------------------------------------
  const CnrlVariant variant = [&] {
    CnrlVariant v = CnrlVariant::parse(cfg.cnrl_data.variant);
    v.per_word_drop_p = cfg.cnrl_data.word_drop_p;
    v.target_wer = cfg.cnrl_data.target_wer;
    return v;
  }();

  double variant_corpus_wer = 0.0;
  run_stage("build_cnrl", [&] {
    std::vector<NoisyContextPair> source;
    if (variant.tag == CnrlVariant::kS1) {
      source = make_clean_pairs(corpus.train);
    } else {
      source = filter_noisy(art.noisy.pairs, cfg.cnrl_data.max_wer_filter).kept;
    }
    const FilterResult pre_filter =
        filter_noisy(art.noisy.pairs, cfg.cnrl_data.max_wer_filter);
    art.filtered_fraction = pre_filter.removed_fraction;

    auto built = build_cnrl_set(source, variant, derive_seed(cfg.seed, "cnrl-build"));
    {
      std::vector<std::pair<std::string, std::string>> user_pairs;
      for (const auto& p : built) {
        for (std::size_t i = 0; i < p.clean_entries.size(); ++i) {
          if (p.clean_entries[i].role == Role::kUser) {
            user_pairs.emplace_back(p.clean_entries[i].text, p.noisy_entries[i].text);
          }
        }
      }
      if (!user_pairs.empty()) variant_corpus_wer = corpus_wer(user_pairs);
    }
    art.cnrl_train_pairs =
        filter_noisy(built, cfg.cnrl_data.max_wer_filter).kept;

    // Dev pairs: the fine-tuned model transcribes the dev split, and the
    // same recipe is applied.
    const CaAsrModel<float> dev_model =
        (use_pretrained ? art.ptr : art.base).checkpoint.to_model();
    std::vector<NoisyContextPair> dev_pairs;
    const NoiseCondition clean = NoiseCondition::clean();
    for (const auto& d : corpus.dev) {
      const auto preds =
          transcribe_dialogue(dev_model, corpus.tok, d, clean, nullptr, false);
      for (int t = 2; t <= static_cast<int>(d.turns.size()); ++t) {
        NoisyContextPair pair;
        pair.dialogue_id = d.id;
        pair.turn_index = t;
        for (int k = 1; k < t; ++k) {
          pair.noisy_entries.push_back({Role::kUser, preds[k - 1]});
          pair.noisy_entries.push_back({Role::kAgent, d.turns[k - 1].agent_text});
          pair.clean_entries.push_back(
              {Role::kUser, normalize(d.turns[k - 1].user_text)});
          pair.clean_entries.push_back({Role::kAgent, d.turns[k - 1].agent_text});
        }
        pair.measured_wer = context_pair_wer(pair.noisy_entries, pair.clean_entries);
        dev_pairs.push_back(std::move(pair));
      }
    }
    if (variant.tag != CnrlVariant::kS1) {
      dev_pairs = filter_noisy(dev_pairs, cfg.cnrl_data.max_wer_filter).kept;
    } else {
      dev_pairs = make_clean_pairs(corpus.dev);
    }
    art.cnrl_dev_pairs = filter_noisy(
        build_cnrl_set(dev_pairs, variant, derive_seed(cfg.seed, "cnrl-build-dev")),
        cfg.cnrl_data.max_wer_filter).kept;

    const fs::path path = cfg.paths.corpus / ("cnrl_pairs_" + variant.name() + ".jsonl");
    save_pairs_jsonl(path, art.cnrl_train_pairs);
    json manifest = stage_manifest(
        "build_cnrl", cfg, json{{"variant", variant.name()}},
        json{{"pairs", {{"path", path.string()}, {"sha256", file_hash(path)}}}},
        json{{"n_pairs", static_cast<int>(art.cnrl_train_pairs.size())},
             {"n_dev_pairs", static_cast<int>(art.cnrl_dev_pairs.size())},
             {"filtered_fraction", art.filtered_fraction},
             {"variant_corpus_wer", variant_corpus_wer}});
    write_json(cfg.paths.reports / "manifest_build_cnrl.json", manifest);
    manifests.push_back(manifest);
  });

  // ---- stage 3: CNRL on both fine-tuned models ---------------------------------------
  run_stage("cnrl_base", [&] {
    StageConfig sc = cfg.cnrl;
    sc.seed = derive_seed(cfg.seed, "cnrl-base");
    art.cnrl_base = train_cnrl(art.cnrl_train_pairs, art.cnrl_dev_pairs,
                               art.base.checkpoint, sc);
    save_stage_checkpoint(
        "cnrl_base", art.cnrl_base,
        json{{"base_checkpoint_sha256",
              file_hash(cfg.paths.checkpoints / "finetune_random.ckpt")}});
  });

  run_stage("cnrl_pretrained", [&] {
    StageConfig sc = cfg.cnrl;
    sc.seed = derive_seed(cfg.seed, "cnrl-pretrained");
    art.cnrl_ptr = train_cnrl(art.cnrl_train_pairs, art.cnrl_dev_pairs,
                              art.ptr.checkpoint, sc);
    save_stage_checkpoint(
        "cnrl_pretrained", art.cnrl_ptr,
        json{{"base_checkpoint_sha256",
              file_hash(cfg.paths.checkpoints / "finetune_pretrained.ckpt")}});
  });

  // ---- evaluation grid -----------------------------------------------------------------
  run_stage("eval", [&] {
    std::vector<NoiseCondition> conditions = {NoiseCondition::clean()};
    const std::uint64_t bank_seed = derive_seed(cfg.seed, "noise-bank");
    for (double db : cfg.noise.snr_levels_db) {
      conditions.push_back(NoiseCondition::snr(db, bank_seed));
    }
    const auto bank = generate_noise_bank(cfg.noise.bank_size, bank_seed,
                                          cfg.data.feature_dim,
                                          static_cast<float>(cfg.data.frame_rate_hz));

    const std::vector<std::pair<std::string, const Checkpoint*>> models = {
        {"speech_only", &art.speech_only.checkpoint},
        {"ca_asr", &art.base.checkpoint},
        {"ca_asr_cnrl", &art.cnrl_base.checkpoint},
        {"ca_asr_ptr", &art.ptr.checkpoint},
        {"ca_asr_ptr_cnrl", &art.cnrl_ptr.checkpoint},
    };

    json eval_block = json::object();
    std::ostringstream csv;
    csv << "model,dialogue_id,turn_index,condition,wer,reference,hypothesis\n";
    for (const auto& [name, ckpt] : models) {
      const auto model = ckpt->to_model();
      MetricsReport r =
          evaluate(model, corpus.tok, corpus.test, conditions, &bank,
                   cfg.flags.use_ground_truth_context);
      art.grid[name] = r.condition_wer;
      eval_block[name] = r.to_json();
      for (const auto& row : r.per_turn) {
        csv << name << ',' << row.dialogue_id << ',' << row.turn_index << ','
            << row.condition << ',' << row.wer_value << ",\"" << row.reference
            << "\",\"" << row.hypothesis << "\"\n";
      }
    }

    // Ground-truth-context reference for the pretrained fine-tune.
    {
      const auto model = art.ptr.checkpoint.to_model();
      MetricsReport r = evaluate(model, corpus.tok, corpus.test, conditions, &bank,
                                 /*use_ground_truth_context=*/true);
      art.ground_truth_wer = r.condition_wer;
      eval_block["ca_asr_ptr_ground_truth_context"] = r.to_json();
    }

    // Held-out pairs from the test split, transcribed by the pre-CNRL model,
    // measure the encoding movement.
    {
      const auto model = art.ptr.checkpoint.to_model();
      const NoiseCondition clean = NoiseCondition::clean();
      for (const auto& d : corpus.test) {
        const auto preds =
            transcribe_dialogue(model, corpus.tok, d, clean, nullptr, false);
        for (int t = 2; t <= static_cast<int>(d.turns.size()); ++t) {
          NoisyContextPair pair;
          pair.dialogue_id = d.id;
          pair.turn_index = t;
          for (int k = 1; k < t; ++k) {
            pair.noisy_entries.push_back({Role::kUser, preds[k - 1]});
            pair.noisy_entries.push_back({Role::kAgent, d.turns[k - 1].agent_text});
            pair.clean_entries.push_back(
                {Role::kUser, normalize(d.turns[k - 1].user_text)});
            pair.clean_entries.push_back({Role::kAgent, d.turns[k - 1].agent_text});
          }
          pair.measured_wer = context_pair_wer(pair.noisy_entries, pair.clean_entries);
          art.held_out_pairs.push_back(std::move(pair));
        }
      }
      art.diagnostics =
          compare_encodings(art.ptr.checkpoint.to_model(),
                            art.cnrl_ptr.checkpoint.to_model(), corpus.tok,
                            art.held_out_pairs);
    }

    json report;
    report["config"] = cfg.to_json();
    report["config_sha256"] = cfg.config_hash();
    report["grid_autoregressive_wer"] = art.grid;
    report["ground_truth_context_wer"] = art.ground_truth_wer;
    report["noisy_generation"] = {
        {"transcript_corpus_wer", art.noisy.transcript_corpus_wer},
        {"n_pairs", static_cast<int>(art.noisy.pairs.size())},
        {"filtered_fraction", art.filtered_fraction},
        {"variant", variant.name()},
        {"variant_corpus_wer", variant_corpus_wer}};
    report["cnrl_diagnostics"] = art.diagnostics.to_json();
    report["curves"] = {
        {"pretrain", curve_to_json(art.pretrain.curve)},
        {"finetune_random", curve_to_json(art.base.curve)},
        {"finetune_pretrained", curve_to_json(art.ptr.curve)},
        {"finetune_speech_only", curve_to_json(art.speech_only.curve)},
        {"cnrl_base", curve_to_json(art.cnrl_base.curve)},
        {"cnrl_pretrained", curve_to_json(art.cnrl_ptr.curve)}};
    report["evaluations"] = eval_block;
    report["manifests"] = manifests;

    art.report = report;
    art.report_path = cfg.paths.reports / "report.json";
    write_json(art.report_path, report);

    {
      std::ofstream out(cfg.paths.reports / "per_turn.csv");
      out << csv.str();
    }
    if (emit_plot) {
      std::vector<std::string> condition_names;
      for (const auto& c : conditions) condition_names.push_back(c.name);
      std::vector<std::pair<std::string, std::map<std::string, double>>> bars(
          art.grid.begin(), art.grid.end());
      write_wer_bars_svg(cfg.paths.reports / "wer_bars.svg", condition_names, bars);
    }
  });

  write_json(cfg.paths.reports / "timings.json", timer.timings);
  return art;
}

}  // namespace caasr
