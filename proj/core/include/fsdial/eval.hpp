#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fsdial/corpus.hpp"
#include "fsdial/hybrid.hpp"

namespace fsdial {

// Clipped n-gram match counts for orders 1..3 plus lengths; addable across
// sentences for corpus-level BLEU.
struct BleuStats {
  std::array<long, 3> matches{};
  std::array<long, 3> totals{};
  long hyp_len = 0;
  long ref_len = 0;

  BleuStats& operator+=(const BleuStats& o);
};

BleuStats bleu_stats(std::span<const std::string> hyp, std::span<const std::string> ref);

// Geometric mean of modified n-gram precisions over orders 1..n with the
// standard brevity penalty. With smooth=true, +1 is added to numerator and
// denominator of orders > 1 (sentence-level smoothing for short responses).
double bleu_from_stats(const BleuStats& stats, int n, bool smooth);

// Single-reference sentence BLEU; smoothing on by default.
double bleu_n(std::span<const std::string> hyp, std::span<const std::string> ref, int n,
              bool smooth = true);

// LCS-based F-measure: P = LCS/|hyp|, R = LCS/|ref|,
// F = (1 + beta^2) P R / (R + beta^2 P); 0 when the LCS is empty.
double rouge_l(std::span<const std::string> hyp, std::span<const std::string> ref,
               double beta = 1.2);

struct EvalRow {
  std::string system;
  std::string mode;
  std::string domain;  // "overall" for the aggregate row
  double bleu1 = 0.0;
  double bleu2 = 0.0;
  double bleu3 = 0.0;
  double rouge_l = 0.0;
  int count = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string to_text() const;
};

// Scores predictions against gold responses matched by instance id.
// Sentence mode (default) averages smoothed per-instance scores; corpus
// mode pools n-gram statistics before the geometric mean (unsmoothed).
// Throws on unknown or duplicate prediction ids.
EvalReport evaluate_run(std::span<const Prediction> predictions,
                        const std::map<std::string, Turn>& gold_by_id, const std::string& system,
                        bool corpus_mode = false);

}  // namespace fsdial
