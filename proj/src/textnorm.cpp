#include "caasr/textnorm.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace caasr {

namespace {

// Version 1 of the normalization tables. Whole-word expansions first, then
// suffix rules for the regular contraction families.
const std::unordered_map<std::string, std::string>& contraction_table() {
  static const std::unordered_map<std::string, std::string> table = {
      {"can't", "cannot"},       {"won't", "will not"},
      {"shan't", "shall not"},   {"it's", "it is"},
      {"that's", "that is"},     {"what's", "what is"},
      {"there's", "there is"},   {"here's", "here is"},
      {"let's", "let us"},       {"he's", "he is"},
      {"she's", "she is"},       {"who's", "who is"},
      {"how's", "how is"},       {"where's", "where is"},
      {"when's", "when is"},     {"ain't", "is not"},
      {"y'all", "you all"},      {"o'clock", "oclock"},
  };
  return table;
}

struct SuffixRule {
  const char* suffix;
  const char* replacement;
};

constexpr std::array<SuffixRule, 6> kSuffixRules = {{
    {"n't", " not"},
    {"'ve", " have"},
    {"'re", " are"},
    {"'ll", " will"},
    {"'m", " am"},
    {"'d", " would"},
}};

bool is_punct(char c) {
  return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

std::string expand_contractions(const std::string& token) {
  auto it = contraction_table().find(token);
  if (it != contraction_table().end()) return it->second;
  for (const auto& rule : kSuffixRules) {
    std::string suffix = rule.suffix;
    if (token.size() > suffix.size() &&
        token.compare(token.size() - suffix.size(), suffix.size(), suffix) == 0) {
      return token.substr(0, token.size() - suffix.size()) + rule.replacement;
    }
  }
  return token;
}

const char* kOnes[] = {"zero", "one", "two",   "three", "four",
                       "five", "six", "seven", "eight", "nine"};
const char* kTeens[] = {"ten",      "eleven",  "twelve",  "thirteen",
                        "fourteen", "fifteen", "sixteen", "seventeen",
                        "eighteen", "nineteen"};
const char* kTens[] = {"",      "",      "twenty",  "thirty", "forty",
                       "fifty", "sixty", "seventy", "eighty", "ninety"};

void spell_below_1000(std::uint64_t n, std::ostringstream& out, bool& first) {
  auto emit = [&](const char* w) {
    if (!first) out << ' ';
    out << w;
    first = false;
  };
  if (n >= 100) {
    emit(kOnes[n / 100]);
    emit("hundred");
    n %= 100;
  }
  if (n >= 20) {
    emit(kTens[n / 10]);
    n %= 10;
    if (n > 0) emit(kOnes[n]);
  } else if (n >= 10) {
    emit(kTeens[n - 10]);
  } else if (n > 0) {
    emit(kOnes[n]);
  }
}

}  // namespace

std::string spell_number(const std::string& digits) {
  if (digits.empty()) return "";
  if (digits.size() > 15) {
    // Too long for a cardinal reading; read digit by digit.
    std::ostringstream out;
    for (std::size_t i = 0; i < digits.size(); ++i) {
      if (i) out << ' ';
      out << kOnes[digits[i] - '0'];
    }
    return out.str();
  }
  std::uint64_t n = 0;
  for (char c : digits) n = n * 10 + static_cast<std::uint64_t>(c - '0');
  if (n == 0) return "zero";

  static const char* kScales[] = {"", "thousand", "million", "billion",
                                  "trillion"};
  std::array<std::uint64_t, 5> groups{};
  int ngroups = 0;
  while (n > 0) {
    groups[ngroups++] = n % 1000;
    n /= 1000;
  }
  std::ostringstream out;
  bool first = true;
  for (int g = ngroups - 1; g >= 0; --g) {
    if (groups[g] == 0) continue;
    spell_below_1000(groups[g], out, first);
    if (g > 0) {
      out << ' ' << kScales[g];
    }
  }
  return out.str();
}

std::string normalize(const std::string& text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (char c : text) {
    char lc = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    // Every punctuation mark except the apostrophe becomes a separator; the
    // apostrophe survives until contraction expansion.
    if (is_punct(lc) && lc != '\'') lc = ' ';
    lowered.push_back(lc);
  }

  std::istringstream in(lowered);
  std::ostringstream out;
  std::string token;
  bool first = true;
  auto emit_word = [&](const std::string& w) {
    if (w.empty()) return;
    if (!first) out << ' ';
    out << w;
    first = false;
  };

  while (in >> token) {
    // Trim stray apostrophes from quoting before table lookup.
    std::size_t b = token.find_first_not_of('\'');
    if (b == std::string::npos) continue;
    std::size_t e = token.find_last_not_of('\'');
    token = token.substr(b, e - b + 1);

    std::istringstream expanded(expand_contractions(token));
    std::string word;
    while (expanded >> word) {
      // Possessives and any other leftover apostrophes are dropped.
      word.erase(std::remove(word.begin(), word.end(), '\''), word.end());
      if (word.empty()) continue;

      // Split digit runs out of the word and spell them.
      std::string run;
      std::string letters;
      auto flush_letters = [&] {
        emit_word(letters);
        letters.clear();
      };
      auto flush_digits = [&] {
        if (!run.empty()) emit_word(spell_number(run));
        run.clear();
      };
      for (char c : word) {
        if (std::isdigit(static_cast<unsigned char>(c))) {
          flush_letters();
          run.push_back(c);
        } else {
          flush_digits();
          letters.push_back(c);
        }
      }
      flush_letters();
      flush_digits();
    }
  }
  return out.str();
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

EditAlignment align_words(const std::vector<std::string>& ref,
                          const std::vector<std::string>& hyp) {
  const int m = static_cast<int>(ref.size());
  const int n = static_cast<int>(hyp.size());
  // cost[i][j]: minimal edits aligning ref[0..i) with hyp[0..j)
  std::vector<std::vector<int>> cost(m + 1, std::vector<int>(n + 1, 0));
  for (int i = 0; i <= m; ++i) cost[i][0] = i;
  for (int j = 0; j <= n; ++j) cost[0][j] = j;
  for (int i = 1; i <= m; ++i) {
    for (int j = 1; j <= n; ++j) {
      int diag = cost[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      int del = cost[i - 1][j] + 1;
      int ins = cost[i][j - 1] + 1;
      cost[i][j] = std::min({diag, del, ins});
    }
  }

  EditAlignment a;
  a.ref_len = m;
  int i = m, j = n;
  std::vector<EditOp> rev;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] == hyp[j - 1]) {
        rev.push_back({EditKind::kMatch, ref[i - 1], hyp[j - 1]});
      } else {
        rev.push_back({EditKind::kSubstitute, ref[i - 1], hyp[j - 1]});
      }
      --i;
      --j;
    } else if (i > 0 && cost[i][j] == cost[i - 1][j] + 1) {
      rev.push_back({EditKind::kDelete, ref[i - 1], ""});
      --i;
    } else {
      rev.push_back({EditKind::kInsert, "", hyp[j - 1]});
      --j;
    }
  }
  a.ops.assign(rev.rbegin(), rev.rend());
  for (const auto& op : a.ops) {
    switch (op.kind) {
      case EditKind::kMatch: ++a.matches; break;
      case EditKind::kSubstitute: ++a.substitutions; break;
      case EditKind::kDelete: ++a.deletions; break;
      case EditKind::kInsert: ++a.insertions; break;
    }
  }
  return a;
}

double wer(const std::string& ref, const std::string& hyp,
           EditAlignment* alignment) {
  EditAlignment a = align_words(split_words(normalize(ref)),
                                split_words(normalize(hyp)));
  double value = static_cast<double>(a.errors()) /
                 static_cast<double>(a.ref_len > 0 ? a.ref_len : 1);
  if (alignment != nullptr) *alignment = std::move(a);
  return value;
}

double corpus_wer(const std::vector<std::pair<std::string, std::string>>& pairs,
                  WerCounts* counts) {
  if (pairs.empty()) {
    throw std::invalid_argument("corpus_wer: empty pair list");
  }
  WerCounts c;
  for (const auto& [ref, hyp] : pairs) {
    EditAlignment a;
    wer(ref, hyp, &a);
    c.substitutions += a.substitutions;
    c.deletions += a.deletions;
    c.insertions += a.insertions;
    c.ref_words += a.ref_len;
  }
  if (counts != nullptr) *counts = c;
  return c.value();
}

}  // namespace caasr
