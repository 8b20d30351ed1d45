#include "fsdial/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>

#include "fsdial/tokenizer.hpp"

namespace fsdial {

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (int k = 0; k < 3; ++k) {
    matches[k] += o.matches[k];
    totals[k] += o.totals[k];
  }
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

namespace {

std::unordered_map<std::string, long> ngram_counts(std::span<const std::string> tokens, int n) {
  std::unordered_map<std::string, long> counts;
  const int len = static_cast<int>(tokens.size());
  for (int i = 0; i + n <= len; ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += tokens[i + j];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace

BleuStats bleu_stats(std::span<const std::string> hyp, std::span<const std::string> ref) {
  if (ref.empty()) throw std::invalid_argument("bleu: reference is empty");
  BleuStats st;
  st.hyp_len = static_cast<long>(hyp.size());
  st.ref_len = static_cast<long>(ref.size());
  for (int n = 1; n <= 3; ++n) {
    auto hc = ngram_counts(hyp, n);
    auto rc = ngram_counts(ref, n);
    long total = 0, matched = 0;
    for (const auto& [gram, cnt] : hc) {
      total += cnt;
      auto it = rc.find(gram);
      if (it != rc.end()) matched += std::min(cnt, it->second);
    }
    st.matches[n - 1] = matched;
    st.totals[n - 1] = total;
  }
  return st;
}

double bleu_from_stats(const BleuStats& stats, int n, bool smooth) {
  if (n < 1 || n > 3) throw std::invalid_argument("bleu: order must be in 1..3");
  if (stats.hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    double m = static_cast<double>(stats.matches[k - 1]);
    double t = static_cast<double>(stats.totals[k - 1]);
    if (smooth && k > 1) {
      m += 1.0;
      t += 1.0;
    }
    if (m <= 0.0 || t <= 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double bp = stats.hyp_len >= stats.ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(stats.ref_len) / stats.hyp_len);
  return bp * std::exp(log_sum / n);
}

double bleu_n(std::span<const std::string> hyp, std::span<const std::string> ref, int n,
              bool smooth) {
  if (n < 1 || n > 3) throw std::invalid_argument("bleu: order must be in 1..3");
  return bleu_from_stats(bleu_stats(hyp, ref), n, smooth);
}

double rouge_l(std::span<const std::string> hyp, std::span<const std::string> ref, double beta) {
  if (hyp.empty() || ref.empty()) throw std::invalid_argument("rouge_l: empty input");
  const int n = static_cast<int>(hyp.size());
  const int m = static_cast<int>(ref.size());
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      cur[j] = hyp[i - 1] == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const int lcs = prev[m];
  if (lcs == 0) return 0.0;
  const double p = static_cast<double>(lcs) / n;
  const double r = static_cast<double>(lcs) / m;
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

EvalReport evaluate_run(std::span<const Prediction> predictions,
                        const std::map<std::string, Turn>& gold_by_id, const std::string& system,
                        bool corpus_mode) {
  struct Group {
    double bleu[3] = {0, 0, 0};
    double rouge = 0.0;
    BleuStats stats;
    int count = 0;
  };
  std::map<std::pair<std::string, std::string>, Group> groups;  // (mode, domain)
  std::set<std::string> seen;

  for (const Prediction& pred : predictions) {
    if (!seen.insert(pred.instance_id).second) {
      throw std::runtime_error("evaluate_run: duplicate prediction id '" + pred.instance_id + "'");
    }
    auto it = gold_by_id.find(pred.instance_id);
    if (it == gold_by_id.end()) {
      throw std::runtime_error("evaluate_run: prediction id '" + pred.instance_id +
                               "' has no gold instance");
    }
    std::vector<std::string> hyp = tokenize(pred.final_text);
    std::vector<std::string> ref = tokenize(it->second.text);

    Group& g = groups[{instance_mode_name(pred.mode), pred.domain}];
    ++g.count;
    if (hyp.empty()) continue;  // scores 0 for this instance
    for (int n = 1; n <= 3; ++n) g.bleu[n - 1] += bleu_n(hyp, ref, n);
    g.rouge += rouge_l(hyp, ref);
    g.stats += bleu_stats(hyp, ref);
  }

  EvalReport report;
  Group overall;
  std::string overall_mode;
  for (const auto& [key, g] : groups) {
    EvalRow row;
    row.system = system;
    row.mode = key.first;
    row.domain = key.second;
    row.count = g.count;
    if (corpus_mode) {
      row.bleu1 = bleu_from_stats(g.stats, 1, false);
      row.bleu2 = bleu_from_stats(g.stats, 2, false);
      row.bleu3 = bleu_from_stats(g.stats, 3, false);
    } else {
      row.bleu1 = g.bleu[0] / g.count;
      row.bleu2 = g.bleu[1] / g.count;
      row.bleu3 = g.bleu[2] / g.count;
    }
    row.rouge_l = g.rouge / g.count;
    report.rows.push_back(row);

    for (int k = 0; k < 3; ++k) overall.bleu[k] += g.bleu[k];
    overall.rouge += g.rouge;
    overall.stats += g.stats;
    overall.count += g.count;
    overall_mode = key.first;
  }
  if (overall.count > 0) {
    EvalRow row;
    row.system = system;
    row.mode = groups.size() == 1 ? overall_mode : "all";
    row.domain = "overall";
    row.count = overall.count;
    if (corpus_mode) {
      row.bleu1 = bleu_from_stats(overall.stats, 1, false);
      row.bleu2 = bleu_from_stats(overall.stats, 2, false);
      row.bleu3 = bleu_from_stats(overall.stats, 3, false);
    } else {
      row.bleu1 = overall.bleu[0] / overall.count;
      row.bleu2 = overall.bleu[1] / overall.count;
      row.bleu3 = overall.bleu[2] / overall.count;
    }
    row.rouge_l = overall.rouge / overall.count;
    report.rows.push_back(row);
  }
  return report;
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  size_t sw = 6, dw = 7;
  for (const auto& r : rows) {
    sw = std::max(sw, r.system.size());
    dw = std::max(dw, r.domain.size());
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s  %-5s  %-*s  %7s  %7s  %7s  %7s  %5s\n", static_cast<int>(sw),
                "system", "mode", static_cast<int>(dw), "domain", "bleu1", "bleu2", "bleu3",
                "rougeL", "count");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %-5s  %-*s  %7.4f  %7.4f  %7.4f  %7.4f  %5d\n",
                  static_cast<int>(sw), r.system.c_str(), r.mode.c_str(), static_cast<int>(dw),
                  r.domain.c_str(), r.bleu1, r.bleu2, r.bleu3, r.rouge_l, r.count);
    out << buf;
  }
  return out.str();
}

}  // namespace fsdial
