#include "caasr/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "caasr/hash.hpp"
#include "caasr/rng.hpp"
#include "caasr/textnorm.hpp"

namespace caasr {

using nlohmann::json;

std::vector<std::vector<std::string>> FoldAssignment::held_out_ids() const {
  std::vector<std::vector<std::string>> folds(k);
  for (const auto& [id, fold] : membership) folds.at(fold).push_back(id);
  return folds;
}

namespace {

const std::vector<std::string> kAreas = {"north", "south", "east", "west", "centre"};
const std::vector<std::string> kFoods = {"italian", "chinese", "indian", "british",
                                         "thai",    "french",  "turkish", "korean"};
const std::vector<std::string> kPrices = {"cheap", "moderate", "expensive"};
const std::vector<std::string> kDays = {"monday", "tuesday", "wednesday", "thursday",
                                        "friday", "saturday", "sunday"};
const std::vector<std::string> kCounts = {"two", "three", "four", "five",
                                          "six", "seven", "eight"};
const std::vector<std::string> kStations = {"london", "cambridge", "oxford",
                                            "norwich", "leeds", "bristol"};
const std::vector<std::string> kAttractions = {"museum", "park", "theatre",
                                               "cinema", "gallery"};
const std::vector<std::string> kStars = {"two", "three", "four", "five"};
const std::vector<std::string> kHours = {"five", "six", "seven", "eight",
                                         "nine", "ten", "eleven"};
const std::vector<std::string> kMinutes = {"oclock", "fifteen", "thirty"};
const std::vector<std::string> kNameFirst = {"golden", "royal", "river", "garden",
                                             "city",   "old",   "grand", "silver"};
const std::vector<std::string> kNameSecond = {"house", "palace", "lodge", "corner",
                                              "kitchen", "arms", "view", "inn"};

std::vector<std::string> time_values() {
  std::vector<std::string> out;
  for (const auto& h : kHours) {
    for (const auto& m : kMinutes) out.push_back(h + " " + m);
  }
  return out;
}

std::string fill(std::string tpl, const std::string& key, const std::string& value) {
  const std::string tag = "{" + key + "}";
  for (std::size_t pos = tpl.find(tag); pos != std::string::npos;
       pos = tpl.find(tag)) {
    tpl.replace(pos, tag.size(), value);
  }
  return tpl;
}

std::vector<DomainSpec> make_builtin_domains() {
  const auto times = time_values();
  std::vector<DomainSpec> domains;

  domains.push_back(DomainSpec{
      "restaurant",
      "restaurant",
      {
          {"food", "what type of food would you like",
           "i think i would like to eat {v} food", kFoods},
          {"area", "which area should the restaurant be in",
           "somewhere in the {v} of town would suit us", kAreas},
          {"price", "what price range do you want",
           "we are hoping for the {v} price range", kPrices},
          {"time", "what time should i book the table",
           "please book the table for {v} tonight", times},
      },
      "shall i book a table at the {name} for {count} people on {day}",
      "yes please book a table at the {name} for {count} people on {day}",
  });

  domains.push_back(DomainSpec{
      "hotel",
      "hotel",
      {
          {"area", "which area of town do you prefer",
           "we prefer to stay in the {v} part of town", kAreas},
          {"stars", "how many stars should the hotel have",
           "something with {v} stars would be really good", kStars},
          {"nights", "how many nights will you stay",
           "we are planning to stay for {v} nights", kCounts},
          {"day", "what day do you arrive",
           "we will be arriving on {v} next week", kDays},
      },
      "shall i book the {name} hotel for {count} people starting {day}",
      "yes please book the {name} hotel for {count} people starting {day}",
  });

  domains.push_back(DomainSpec{
      "taxi",
      "taxi",
      {
          {"departure", "where are you leaving from",
           "we are leaving from {v} later today", kStations},
          {"destination", "where are you going",
           "we need to get to {v} by car", kStations},
          {"time", "what time do you want to leave",
           "the taxi should pick us up at {v}", times},
          {"passengers", "how many passengers will there be",
           "there will be {v} passengers in the group", kCounts},
      },
      "shall i order the taxi for {count} passengers on {day}",
      "yes please order the taxi for {count} passengers on {day}",
  });

  domains.push_back(DomainSpec{
      "train",
      "train",
      {
          {"departure", "where does the train depart from",
           "the train should depart from {v} station", kStations},
          {"destination", "what is the destination",
           "we are travelling all the way to {v}", kStations},
          {"day", "which day are you travelling",
           "the journey will be on {v} this week", kDays},
          {"tickets", "how many tickets do you need",
           "could you get me {v} tickets for that", kCounts},
      },
      "shall i book {count} tickets for {day} at the {name} office",
      "yes please book {count} tickets for {day} at the {name} office",
  });

  domains.push_back(DomainSpec{
      "attraction",
      "attraction",
      {
          {"type", "what type of attraction interests you",
           "maybe a {v} would be nice to visit", kAttractions},
          {"area", "which part of town should it be",
           "somewhere in the {v} of town please", kAreas},
          {"day", "what day will you visit",
           "we are planning to visit on {v}", kDays},
          {"group", "how many people are going",
           "there will be {v} of us going along", kCounts},
      },
      "shall i reserve the {name} for {count} visitors on {day}",
      "yes please reserve the {name} for {count} visitors on {day}",
  });

  return domains;
}

const std::vector<std::string> kOpeners = {
    "hello i am looking for a {noun} somewhere in town",
    "hi there i need to find a good {noun}",
    "i would like some help finding a {noun} please",
};

Dialogue generate_one(const GenerationConfig& cfg, int index) {
  Rng rng(derive_seed(cfg.seed, "dialogue", index));
  const auto& domains = cfg.vocabulary;
  const DomainSpec& domain = domains[rng.uniform_int(0, static_cast<int>(domains.size()) - 1)];

  const int n_turns = rng.uniform_int(cfg.turns_min, cfg.turns_max);

  // Values are drawn once per dialogue so the closing turn can echo them.
  const std::string name = kNameFirst[rng.uniform_int(0, 7)] + " " +
                           kNameSecond[rng.uniform_int(0, 7)];
  const std::string count = kCounts[rng.uniform_int(0, static_cast<int>(kCounts.size()) - 1)];
  const std::string day = kDays[rng.uniform_int(0, static_cast<int>(kDays.size()) - 1)];

  std::vector<int> slot_order(domain.slots.size());
  for (std::size_t i = 0; i < slot_order.size(); ++i) slot_order[i] = static_cast<int>(i);
  rng.shuffle(slot_order);

  auto confirm_fill = [&](std::string tpl) {
    tpl = fill(tpl, "name", name);
    tpl = fill(tpl, "count", count);
    tpl = fill(tpl, "day", day);
    return tpl;
  };

  Dialogue d;
  {
    std::ostringstream id;
    id << "d" << std::setfill('0') << std::setw(5) << index;
    d.id = id.str();
  }

  const int n_slots = std::max(0, n_turns - 2);
  for (int t = 1; t <= n_turns; ++t) {
    Turn turn;
    turn.index = t;
    if (t == 1) {
      turn.user_text = fill(kOpeners[rng.uniform_int(0, 2)], "noun", domain.noun);
    } else if (t < n_turns) {
      const SlotSpec& slot = domain.slots[slot_order[(t - 2) % slot_order.size()]];
      const std::string& value = slot.values[rng.uniform_int(
          0, static_cast<int>(slot.values.size()) - 1)];
      turn.user_text = fill(slot.answer_template, "v", value);
    } else {
      turn.user_text = n_turns == 2 ? confirm_fill(domain.final_template)
                                    : confirm_fill(domain.final_template);
    }

    if (t < n_turns) {
      if (t <= n_slots) {
        const SlotSpec& next_slot = domain.slots[slot_order[(t - 1) % slot_order.size()]];
        turn.agent_text = next_slot.question;
      } else {
        turn.agent_text = confirm_fill(domain.confirm_template);
      }
    } else {
      // Closing agent line; occasionally empty, which a final turn permits.
      turn.agent_text = rng.bernoulli(0.9) ? "thank you goodbye" : "";
    }
    d.turns.push_back(std::move(turn));
  }
  return d;
}

}  // namespace

const std::vector<DomainSpec>& builtin_domains() {
  static const std::vector<DomainSpec> domains = make_builtin_domains();
  return domains;
}

std::vector<Dialogue> generate_synthetic_dialogues(const GenerationConfig& cfg_in) {
  GenerationConfig cfg = cfg_in;
  if (cfg.vocabulary.empty()) cfg.vocabulary = builtin_domains();
  if (cfg.n_dialogues < 0) {
    throw ConfigError("generate_synthetic_dialogues: negative dialogue count");
  }
  if (cfg.turns_min < 2 || cfg.turns_max < cfg.turns_min) {
    throw ConfigError("generate_synthetic_dialogues: bad turn range");
  }
  for (const auto& domain : cfg.vocabulary) {
    if (domain.slots.empty()) {
      throw ConfigError("generate_synthetic_dialogues: domain without slots: " +
                        domain.name);
    }
    for (const auto& slot : domain.slots) {
      if (slot.values.empty()) {
        throw ConfigError("generate_synthetic_dialogues: empty value pool: " +
                          slot.name);
      }
    }
  }

  std::vector<Dialogue> out;
  out.reserve(cfg.n_dialogues);
  for (int i = 0; i < cfg.n_dialogues; ++i) out.push_back(generate_one(cfg, i));
  return out;
}

void synthesize_corpus_speech(std::vector<Dialogue>& dialogues, std::uint64_t seed,
                              int feature_dim, float frame_rate_hz) {
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    for (auto& turn : dialogues[i].turns) {
      const int voice = static_cast<int>(
          derive_seed(seed, "voice", fnv1a64(dialogues[i].id), turn.index) % kNumVoices);
      turn.speech = synthesize_speech_features(
          turn.user_text, voice,
          derive_seed(seed, "speech", fnv1a64(dialogues[i].id), turn.index),
          feature_dim, frame_rate_hz);
    }
  }
}

ContextWindow assemble_context(const Dialogue& dialogue, int turn_index,
                               const std::map<int, std::string>& user_transcripts) {
  if (turn_index < 1 || turn_index > static_cast<int>(dialogue.turns.size())) {
    throw std::invalid_argument("assemble_context: turn index out of range");
  }
  ContextWindow window;
  for (int t = 1; t < turn_index; ++t) {
    auto it = user_transcripts.find(t);
    if (it == user_transcripts.end()) {
      throw std::invalid_argument("assemble_context: missing transcript for turn " +
                                  std::to_string(t));
    }
    window.entries.push_back({Role::kUser, it->second});
    window.entries.push_back({Role::kAgent, dialogue.turns[t - 1].agent_text});
  }
  return window;
}

std::map<int, std::string> ground_truth_transcripts(const Dialogue& dialogue,
                                                    int up_to_turn) {
  std::map<int, std::string> out;
  for (const auto& turn : dialogue.turns) {
    if (turn.index >= up_to_turn) break;
    out[turn.index] = normalize(turn.user_text);
  }
  return out;
}

std::vector<int> truncate_context(std::vector<int> token_ids, int max_tokens) {
  if (max_tokens < 0) throw std::invalid_argument("truncate_context: negative limit");
  const int len = static_cast<int>(token_ids.size());
  if (len <= max_tokens) return token_ids;
  return std::vector<int>(token_ids.end() - max_tokens, token_ids.end());
}

Tokenizer::Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    index_[words_[i]] = kNumReserved + static_cast<int>(i);
  }
}

Tokenizer Tokenizer::build(const std::vector<Dialogue>& training_corpus) {
  std::set<std::string> vocab;
  for (const auto& d : training_corpus) {
    for (const auto& t : d.turns) {
      for (const auto& w : split_words(normalize(t.user_text))) vocab.insert(w);
      for (const auto& w : split_words(normalize(t.agent_text))) vocab.insert(w);
    }
  }
  return Tokenizer(std::vector<std::string>(vocab.begin(), vocab.end()));
}

std::vector<int> Tokenizer::encode_text(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(normalize(text))) {
    auto it = index_.find(w);
    ids.push_back(it == index_.end() ? kUnk : it->second);
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::ostringstream out;
  bool first = true;
  for (int id : ids) {
    std::string word;
    if (id == kUnk) {
      word = "<unk>";
    } else if (id >= kNumReserved && id < vocab_size()) {
      word = words_[id - kNumReserved];
    } else {
      continue;  // structural ids carry no text
    }
    if (!first) out << ' ';
    out << word;
    first = false;
  }
  return out.str();
}

std::vector<int> Tokenizer::encode_window(const std::vector<ContextEntry>& entries) const {
  std::vector<int> ids = {kBos};
  for (const auto& entry : entries) {
    ids.push_back(entry.role == Role::kUser ? kRoleUser : kRoleAgent);
    for (int id : encode_text(entry.text)) ids.push_back(id);
  }
  return ids;
}

std::string Tokenizer::to_json() const {
  json j;
  j["version"] = 1;
  j["words"] = words_;
  return j.dump(2);
}

Tokenizer Tokenizer::from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.at("version").get<int>() != 1) {
    throw std::runtime_error("Tokenizer::from_json: unsupported version");
  }
  return Tokenizer(j.at("words").get<std::vector<std::string>>());
}

void tokenize_window(const Tokenizer& tok, ContextWindow& window, int max_tokens) {
  window.token_ids = truncate_context(tok.encode_window(window.entries), max_tokens);
}

FoldAssignment split_folds(const std::vector<Dialogue>& dialogues, int k,
                           std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("split_folds: k must be >= 2");
  if (static_cast<int>(dialogues.size()) < k) {
    throw std::invalid_argument("split_folds: fewer dialogues than folds");
  }
  std::vector<std::string> ids;
  ids.reserve(dialogues.size());
  for (const auto& d : dialogues) ids.push_back(d.id);
  Rng rng(derive_seed(seed, "fold-split"));
  rng.shuffle(ids);

  FoldAssignment fa;
  fa.k = k;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    fa.membership[ids[i]] = static_cast<int>(i % k);
  }
  return fa;
}

std::pair<std::vector<Dialogue>, std::vector<Dialogue>> split_train_dev(
    const std::vector<Dialogue>& dialogues, int n_dev, std::uint64_t seed) {
  if (n_dev < 0 || n_dev >= static_cast<int>(dialogues.size())) {
    throw std::invalid_argument("split_train_dev: n_dev out of range");
  }
  std::vector<int> order(dialogues.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, "dev-split"));
  rng.shuffle(order);

  std::set<int> dev_idx(order.begin(), order.begin() + n_dev);
  std::vector<Dialogue> train, dev;
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    (dev_idx.count(static_cast<int>(i)) ? dev : train).push_back(dialogues[i]);
  }
  return {train, dev};
}

void save_dialogues_jsonl(const std::filesystem::path& jsonl_path,
                          const std::vector<Dialogue>& dialogues,
                          const std::filesystem::path& features_dir) {
  namespace fs = std::filesystem;
  bool any_speech = false;
  for (const auto& d : dialogues) {
    for (const auto& t : d.turns) any_speech |= t.has_speech();
  }
  if (any_speech) fs::create_directories(features_dir);

  std::ofstream out(jsonl_path);
  if (!out) {
    throw std::runtime_error("save_dialogues_jsonl: cannot open " + jsonl_path.string());
  }
  for (const auto& d : dialogues) {
    json turns = json::array();
    for (const auto& t : d.turns) {
      std::string ref;
      if (t.has_speech()) {
        ref = d.id + "_t" + std::to_string(t.index) + ".fbin";
        save_features(features_dir / ref, t.speech);
      }
      turns.push_back({{"index", t.index},
                       {"user_text", t.user_text},
                       {"agent_text", t.agent_text},
                       {"speech_ref", ref}});
    }
    out << json{{"id", d.id}, {"turns", turns}}.dump() << '\n';
  }
}

std::vector<Dialogue> load_dialogues_jsonl(const std::filesystem::path& jsonl_path,
                                           bool load_speech) {
  std::ifstream in(jsonl_path);
  if (!in) {
    throw std::runtime_error("load_dialogues_jsonl: cannot open " + jsonl_path.string());
  }
  const auto features_dir = jsonl_path.parent_path() / "features";
  std::vector<Dialogue> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line);
    Dialogue d;
    d.id = j.at("id").get<std::string>();
    int expected_index = 1;
    for (const auto& jt : j.at("turns")) {
      Turn t;
      t.index = jt.at("index").get<int>();
      t.user_text = jt.at("user_text").get<std::string>();
      t.agent_text = jt.at("agent_text").get<std::string>();
      if (t.index != expected_index++) {
        throw std::runtime_error("load_dialogues_jsonl: non-contiguous turn index in " +
                                 d.id + " (line " + std::to_string(line_no) + ")");
      }
      if (normalize(t.user_text).empty()) {
        throw std::runtime_error("load_dialogues_jsonl: empty user text in " + d.id);
      }
      const std::string ref = jt.at("speech_ref").get<std::string>();
      if (load_speech && !ref.empty()) {
        t.speech = load_features(features_dir / ref);
      }
      d.turns.push_back(std::move(t));
    }
    out.push_back(std::move(d));
  }
  return out;
}

void save_fold_assignment(const std::filesystem::path& path,
                          const FoldAssignment& folds) {
  json j;
  j["k"] = folds.k;
  j["membership"] = folds.membership;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_fold_assignment: cannot open " + path.string());
  out << j.dump(2) << '\n';
}

FoldAssignment load_fold_assignment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_fold_assignment: cannot open " + path.string());
  json j = json::parse(in);
  FoldAssignment fa;
  fa.k = j.at("k").get<int>();
  fa.membership = j.at("membership").get<std::map<std::string, int>>();
  return fa;
}

}  // namespace caasr
