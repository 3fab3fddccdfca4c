#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <caasr/rng.hpp>
#include <caasr/textnorm.hpp>

#include <algorithm>
#include <string>
#include <vector>

using namespace caasr;

namespace {

// Exhaustive alignment oracle: tries every edit path with plain recursion,
// no memoization, so it shares nothing with the DP implementation.
int brute_force_distance(const std::vector<std::string>& ref,
                         const std::vector<std::string>& hyp, std::size_t i = 0,
                         std::size_t j = 0) {
  if (i == ref.size()) return static_cast<int>(hyp.size() - j);
  if (j == hyp.size()) return static_cast<int>(ref.size() - i);
  int best = (ref[i] == hyp[j] ? 0 : 1) + brute_force_distance(ref, hyp, i + 1, j + 1);
  best = std::min(best, 1 + brute_force_distance(ref, hyp, i + 1, j));
  best = std::min(best, 1 + brute_force_distance(ref, hyp, i, j + 1));
  return best;
}

std::vector<std::string> random_words(Rng& rng, int max_len, int alphabet) {
  const int len = rng.uniform_int(0, max_len);
  std::vector<std::string> out;
  for (int i = 0; i < len; ++i) {
    out.push_back(std::string(1, static_cast<char>('a' + rng.uniform_int(0, alphabet - 1))));
  }
  return out;
}

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s += ' ';
    s += words[i];
  }
  return s;
}

}  // namespace

TEST_CASE("normalize expands contractions and strips punctuation") {
  CHECK(normalize("I've booked it.") == "i have booked it");
  CHECK(normalize("") == "");
  CHECK(normalize("Table for 2!") == "table for two");
  CHECK(normalize("Don't worry, it's fine!") == "do not worry it is fine");
  CHECK(normalize("john's house") == "johns house");
  CHECK(normalize("We'll meet at 7:30.") == "we will meet at seven thirty");
}

TEST_CASE("normalize digit handling") {
  CHECK(normalize("42") == "forty two");
  CHECK(normalize("100") == "one hundred");
  CHECK(normalize("1234") == "one thousand two hundred thirty four");
  CHECK(normalize("0") == "zero");
  CHECK(normalize("room 2b") == "room two b");
}

TEST_CASE("normalize is idempotent") {
  Rng rng(99);
  const std::vector<std::string> fixtures = {
      "I've booked it.", "Table for 2!", "What's up; 12 o'clock??",
      "A-B-C 007 we're THERE", "it's  spaced\tout", ""};
  for (const auto& s : fixtures) {
    const std::string once = normalize(s);
    CHECK(normalize(once) == once);
  }
  for (int i = 0; i < 200; ++i) {
    std::string s;
    const int len = rng.uniform_int(0, 24);
    const std::string chars = "abcXYZ0123'!?,. -";
    for (int k = 0; k < len; ++k) {
      s += chars[rng.uniform_int(0, static_cast<int>(chars.size()) - 1)];
    }
    const std::string once = normalize(s);
    CHECK(normalize(once) == once);
  }
}

TEST_CASE("wer on worked examples") {
  CHECK(wer("book a table for two", "book a table for two") == doctest::Approx(0.0));
  // one deletion against a four word reference
  CHECK(wer("i have a reservation", "i have reservation") == doctest::Approx(0.25));
  // one substitution plus one insertion against a single word
  CHECK(wer("a", "b c") == doctest::Approx(2.0));
}

TEST_CASE("wer identity and degenerate references") {
  CHECK(wer("", "") == doctest::Approx(0.0));
  CHECK(wer("", "one two three") == doctest::Approx(3.0));
  CHECK(wer("hello there", "") == doctest::Approx(1.0));
}

TEST_CASE("alignment counts are consistent") {
  EditAlignment a;
  wer("the cat sat on the mat", "the cat sit on mat", &a);
  CHECK(a.ref_len == 6);
  CHECK(a.matches + a.substitutions + a.deletions == a.ref_len);
  CHECK(a.errors() == a.substitutions + a.deletions + a.insertions);
  CHECK(a.substitutions == 1);
  CHECK(a.deletions == 1);
  CHECK(a.insertions == 0);
}

TEST_CASE("wer equals the brute-force oracle on random short pairs") {
  Rng rng(1234);
  for (int trial = 0; trial < 400; ++trial) {
    const auto ref = random_words(rng, 6, 3);
    const auto hyp = random_words(rng, 6, 3);
    EditAlignment a = align_words(ref, hyp);
    CHECK(a.errors() == brute_force_distance(ref, hyp));
  }
}

TEST_CASE("wer triangle-style bound") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const auto ref = random_words(rng, 6, 4);
    if (ref.empty()) continue;
    const auto hyp = random_words(rng, 6, 4);
    const double bound =
        static_cast<double>(ref.size() + hyp.size()) / static_cast<double>(ref.size());
    CHECK(wer(join(ref), join(hyp)) <= bound + 1e-12);
  }
}

TEST_CASE("corpus_wer pools counts") {
  CHECK(corpus_wer({{"a b", "a b"}, {"c", "c"}}) == doctest::Approx(0.0));
  // errors (1 of 4) and (0 of 6) pool to 1/10
  CHECK(corpus_wer({{"a b c d", "a b c x"}, {"e f g h i j", "e f g h i j"}}) ==
        doctest::Approx(0.10));
  const double single = wer("a b c", "a x c");
  CHECK(corpus_wer({{"a b c", "a x c"}}) == doctest::Approx(single));
  CHECK_THROWS_AS(corpus_wer({}), std::invalid_argument);
}

TEST_CASE("corpus_wer micro average differs from mean of rates") {
  WerCounts counts;
  const double pooled = corpus_wer({{"a", "b"}, {"c d e f g h i j k l", "c d e f g h i j k l"}},
                                   &counts);
  CHECK(pooled == doctest::Approx(1.0 / 11.0));
  CHECK(counts.ref_words == 11);
}
