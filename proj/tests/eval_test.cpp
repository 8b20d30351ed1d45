#include <doctest.h>

#include <cmath>
#include <map>

#include "fsdial/eval.hpp"
#include "fsdial/rng.hpp"

using namespace fsdial;

namespace {

std::vector<std::string> toks(const std::string& text) {
  std::vector<std::string> out;
  std::string w;
  for (char c : text + " ") {
    if (c == ' ') {
      if (!w.empty()) out.push_back(w);
      w.clear();
    } else {
      w.push_back(c);
    }
  }
  return out;
}

// Brute-force clipped n-gram precision: nested subvector comparisons, no maps.
std::pair<long, long> brute_ngram(const std::vector<std::string>& hyp,
                                  const std::vector<std::string>& ref, int n) {
  const int H = static_cast<int>(hyp.size());
  const int R = static_cast<int>(ref.size());
  long total = std::max(0, H - n + 1);
  long matched = 0;
  std::vector<bool> seen(std::max(0, H - n + 1), false);
  for (int i = 0; i + n <= H; ++i) {
    if (seen[i]) continue;
    // Count this n-gram's occurrences in hyp and ref.
    long hyp_count = 0, ref_count = 0;
    for (int j = 0; j + n <= H; ++j) {
      bool eq = true;
      for (int k = 0; k < n; ++k) eq = eq && hyp[i + k] == hyp[j + k];
      if (eq) {
        hyp_count++;
        seen[j] = true;
      }
    }
    for (int j = 0; j + n <= R; ++j) {
      bool eq = true;
      for (int k = 0; k < n; ++k) eq = eq && hyp[i + k] == ref[j + k];
      if (eq) ref_count++;
    }
    matched += std::min(hyp_count, ref_count);
  }
  return {matched, total};
}

double brute_bleu(const std::vector<std::string>& hyp, const std::vector<std::string>& ref, int n,
                  bool smooth) {
  if (hyp.empty()) return 0.0;
  double log_sum = 0;
  for (int k = 1; k <= n; ++k) {
    auto [m, t] = brute_ngram(hyp, ref, k);
    double mm = m, tt = t;
    if (smooth && k > 1) {
      mm += 1;
      tt += 1;
    }
    if (mm <= 0 || tt <= 0) return 0.0;
    log_sum += std::log(mm / tt);
  }
  double bp = hyp.size() >= ref.size()
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref.size()) / hyp.size());
  return bp * std::exp(log_sum / n);
}

// Exhaustive LCS: enumerate all subsequences of hyp (<= 8 tokens) and find
// the longest that is also a subsequence of ref.
int brute_lcs(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  const int n = static_cast<int>(hyp.size());
  int best = 0;
  for (int mask = 0; mask < (1 << n); ++mask) {
    std::vector<std::string> sub;
    for (int i = 0; i < n; ++i) {
      if (mask & (1 << i)) sub.push_back(hyp[i]);
    }
    size_t pos = 0;
    bool ok = true;
    for (const auto& w : sub) {
      while (pos < ref.size() && ref[pos] != w) ++pos;
      if (pos == ref.size()) {
        ok = false;
        break;
      }
      ++pos;
    }
    if (ok) best = std::max<int>(best, static_cast<int>(sub.size()));
  }
  return best;
}

std::vector<std::string> random_sentence(int len, int alphabet, DetRng& rng) {
  std::vector<std::string> s;
  for (int i = 0; i < len; ++i) s.push_back("w" + std::to_string(rng.uniform_int(alphabet)));
  return s;
}

}  // namespace

TEST_CASE("bleu: identity scores 1.0 at every order") {
  auto s = toks("a small example sentence");
  for (int n = 1; n <= 3; ++n) {
    CHECK(bleu_n(s, s, n) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bleu_from_stats(bleu_stats(s, s), n, false) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(bleu_n(s, s, 4), std::invalid_argument);
  CHECK_THROWS_AS(bleu_n(s, {}, 1), std::invalid_argument);
}

TEST_CASE("bleu: clipping example — 'the the the the' vs 'the cat' is exactly 0.25") {
  auto hyp = toks("the the the the");
  auto ref = toks("the cat");
  // "the" is clipped to the reference count 1; the hypothesis is longer than
  // the reference so the brevity penalty is 1.
  CHECK(bleu_n(hyp, ref, 1) == doctest::Approx(0.25).epsilon(1e-12));
  BleuStats st = bleu_stats(hyp, ref);
  CHECK(st.matches[0] == 1);
  CHECK(st.totals[0] == 4);
}

TEST_CASE("bleu: brevity penalty fires for short hypotheses") {
  auto hyp = toks("the cat");
  auto ref = toks("the cat sat");
  // p1 = 1, bp = exp(1 - 3/2).
  CHECK(bleu_n(hyp, ref, 1) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
}

TEST_CASE("bleu: 200 random pairs match the brute-force counting oracle") {
  DetRng rng(71);
  for (int iter = 0; iter < 200; ++iter) {
    auto hyp = random_sentence(1 + static_cast<int>(rng.uniform_int(12)), 6, rng);
    auto ref = random_sentence(1 + static_cast<int>(rng.uniform_int(12)), 6, rng);
    for (int n = 1; n <= 3; ++n) {
      CHECK(bleu_n(hyp, ref, n, true) ==
            doctest::Approx(brute_bleu(hyp, ref, n, true)).epsilon(1e-9));
      CHECK(bleu_from_stats(bleu_stats(hyp, ref), n, false) ==
            doctest::Approx(brute_bleu(hyp, ref, n, false)).epsilon(1e-9));
    }
  }
}

TEST_CASE("bleu: order monotonicity on shared-prefix pairs (corpus mode, no smoothing)") {
  DetRng rng(73);
  for (int iter = 0; iter < 100; ++iter) {
    // Reference of distinct tokens; hypothesis shares a prefix and ends with
    // tokens disjoint from the reference, so matches come only from the prefix.
    int ref_len = 3 + static_cast<int>(rng.uniform_int(6));
    std::vector<std::string> ref;
    for (int i = 0; i < ref_len; ++i) ref.push_back("r" + std::to_string(i));
    int prefix = 3 + static_cast<int>(rng.uniform_int(ref_len - 2));
    prefix = std::min(prefix, ref_len);
    std::vector<std::string> hyp(ref.begin(), ref.begin() + prefix);
    int tail = static_cast<int>(rng.uniform_int(4));
    for (int i = 0; i < tail; ++i) hyp.push_back("x" + std::to_string(i));

    BleuStats st = bleu_stats(hyp, ref);
    double b1 = bleu_from_stats(st, 1, false);
    double b2 = bleu_from_stats(st, 2, false);
    double b3 = bleu_from_stats(st, 3, false);
    if (st.matches[0] > 0 && st.matches[1] > 0 && st.matches[2] > 0) {
      CHECK(b1 >= b2 - 1e-12);
      CHECK(b2 >= b3 - 1e-12);
    }
  }
}

TEST_CASE("rouge_l: identity, the worked LCS example, empty input") {
  auto s = toks("same tokens here");
  CHECK(rouge_l(s, s) == doctest::Approx(1.0).epsilon(1e-12));

  // LCS("a b c d", "a c d e") = "a c d" (3); P = R = 0.75 so F = 0.75.
  CHECK(rouge_l(toks("a b c d"), toks("a c d e")) == doctest::Approx(0.75).epsilon(1e-12));

  CHECK_THROWS_AS(rouge_l({}, s), std::invalid_argument);
  CHECK_THROWS_AS(rouge_l(s, {}), std::invalid_argument);

  // Zero LCS scores zero.
  CHECK(rouge_l(toks("x y"), toks("a b")) == 0.0);
}

TEST_CASE("rouge_l: 500 fuzz cases against the exhaustive subsequence oracle") {
  DetRng rng(79);
  const double beta = 1.2;
  for (int iter = 0; iter < 500; ++iter) {
    auto hyp = random_sentence(1 + static_cast<int>(rng.uniform_int(8)), 4, rng);
    auto ref = random_sentence(1 + static_cast<int>(rng.uniform_int(8)), 4, rng);
    int lcs = brute_lcs(hyp, ref);
    double expected = 0.0;
    if (lcs > 0) {
      double p = static_cast<double>(lcs) / hyp.size();
      double r = static_cast<double>(lcs) / ref.size();
      expected = (1 + beta * beta) * p * r / (r + beta * beta * p);
    }
    CHECK(rouge_l(hyp, ref, beta) == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("evaluate_run: perfect predictions, zero-score empties, aggregation oracle") {
  std::map<std::string, Turn> gold;
  std::vector<Prediction> preds;
  DetRng rng(83);
  for (int i = 0; i < 12; ++i) {
    std::string id = "inst" + std::to_string(i);
    auto sentence = random_sentence(3 + static_cast<int>(rng.uniform_int(5)), 5, rng);
    std::string text;
    for (size_t j = 0; j < sentence.size(); ++j) {
      if (j) text += ' ';
      text += sentence[j];
    }
    gold[id] = Turn{Speaker::User, text};
    Prediction p;
    p.instance_id = id;
    p.domain = i % 2 ? "dom0" : "dom1";
    p.mode = InstanceMode::PureTask;
    p.final_text = text;
    preds.push_back(p);
  }

  EvalReport perfect = evaluate_run(preds, gold, "test");
  for (const EvalRow& row : perfect.rows) {
    CHECK(row.bleu1 == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(row.bleu3 == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(row.rouge_l == doctest::Approx(1.0).epsilon(1e-9));
  }

  // Perturb some, empty one, and verify the aggregate equals the mean of
  // per-instance sentence scores recomputed here.
  preds[0].final_text = "";
  preds[1].final_text = "w0 w1 mismatch";
  EvalReport mixed = evaluate_run(preds, gold, "test");
  double sum_b1 = 0;
  for (const auto& p : preds) {
    auto hyp = toks(p.final_text);
    if (hyp.empty()) continue;  // contributes 0
    sum_b1 += bleu_n(hyp, toks(gold[p.instance_id].text), 1);
  }
  const EvalRow* overall = nullptr;
  for (const auto& row : mixed.rows) {
    if (row.domain == "overall") overall = &row;
  }
  REQUIRE(overall != nullptr);
  CHECK(overall->count == 12);
  CHECK(overall->bleu1 == doctest::Approx(sum_b1 / 12).epsilon(1e-9));

  // Errors: unknown and duplicate ids.
  Prediction stray;
  stray.instance_id = "unknown";
  stray.final_text = "hello";
  std::vector<Prediction> with_stray = preds;
  with_stray.push_back(stray);
  CHECK_THROWS_WITH_AS(evaluate_run(with_stray, gold, "test"),
                       doctest::Contains("no gold instance"), std::runtime_error);

  std::vector<Prediction> dup = preds;
  dup.push_back(preds[0]);
  CHECK_THROWS_WITH_AS(evaluate_run(dup, gold, "test"), doctest::Contains("duplicate"),
                       std::runtime_error);
}

TEST_CASE("evaluate_run: tokenization is whitespace-run invariant") {
  std::map<std::string, Turn> gold{{"a", Turn{Speaker::User, "hello there friend"}}};
  Prediction p;
  p.instance_id = "a";
  p.domain = "d";
  p.final_text = "hello   there \t friend";
  EvalReport r = evaluate_run({&p, 1}, gold, "test");
  CHECK(r.rows[0].bleu1 == doctest::Approx(1.0).epsilon(1e-9));
}
