#include "fsdial/hybrid.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace fsdial {

const char* provenance_name(Provenance p) {
  return p == Provenance::Generated ? "generated" : "retrieved";
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

ContextEmbedding embed_context(const ModelState<float>& state, std::span<const Turn> context,
                               const Vocab& vocab, const EncodeLimits& limits) {
  ContextEmbedding emb;
  emb.vec = embed_context_vec(state, context, vocab, limits);
  emb.context_len = static_cast<int>(context.size());
  return emb;
}

std::optional<RetrievedCandidate> retrieve_candidate(const ModelState<float>& state,
                                                     std::span<const Turn> target_context,
                                                     std::span<const Dialogue> support,
                                                     const Vocab& vocab,
                                                     const EncodeLimits& limits) {
  if (support.empty()) throw std::invalid_argument("retrieve_candidate: empty support list");
  if (target_context.empty()) {
    throw std::invalid_argument("retrieve_candidate: empty target context");
  }
  const int ctx_len = static_cast<int>(target_context.size());  // t - 1

  std::vector<float> target_emb = embed_context_vec(state, target_context, vocab, limits);

  // Ascending id order makes the strict > below a deterministic tie-break.
  std::vector<const Dialogue*> ordered;
  for (const Dialogue& d : support) ordered.push_back(&d);
  std::sort(ordered.begin(), ordered.end(),
            [](const Dialogue* a, const Dialogue* b) { return a->id < b->id; });

  std::optional<RetrievedCandidate> best;
  for (const Dialogue* d : ordered) {
    if (static_cast<int>(d->turns.size()) < ctx_len + 1) continue;  // needs >= t turns
    std::span<const Turn> sctx(d->turns.data(), ctx_len);
    std::vector<float> emb = embed_context_vec(state, sctx, vocab, limits);
    const double sim = cosine_similarity(target_emb, emb);
    if (!best || sim > best->similarity) {
      best = RetrievedCandidate{d->turns[ctx_len], d->id, sim};
    }
  }
  return best;
}

Prediction rank_candidates(const ModelState<float>& state, std::span<const Turn> context,
                           const Turn& generated, const std::optional<RetrievedCandidate>& retrieved,
                           const Vocab& vocab, const EncodeLimits& limits) {
  Prediction pred;
  pred.generated_candidate = generated.text;
  auto score = [&](const Turn& cand) {
    auto logits = nsp_logits(state, context, cand, vocab, limits);
    return static_cast<double>(softmax2(logits)[1]);
  };
  pred.nsp_score_generated = score(generated);

  if (retrieved) {
    pred.retrieved_candidate = retrieved->response.text;
    pred.retrieved_source_id = retrieved->source_dialogue_id;
    pred.nsp_score_retrieved = score(retrieved->response);
  }

  if (retrieved && *pred.nsp_score_retrieved > pred.nsp_score_generated) {
    pred.provenance = Provenance::Retrieved;
    pred.final_text = retrieved->response.text;
  } else {
    pred.provenance = Provenance::Generated;
    pred.final_text = generated.text;
  }
  return pred;
}

Prediction predict_instance(const Checkpoint& prior, const AdaptationInstance& inst,
                            const Vocab& vocab, const TrainConfig& tc, const DecodeConfig& dc,
                            const PredictOptions& opts) {
  const uint64_t id_hash = fnv1a64(inst.id);
  const EncodeLimits limits = prior.config.limits(tc.context_window);

  ModelState<float> model = [&] {
    if (opts.use_support && !inst.support.empty()) {
      TrainConfig ft = tc;
      ft.seed = mix_seed(tc.seed, id_hash, 0xf17eULL);
      return finetune_support(prior, inst.support, vocab, ft);
    }
    return restore(prior, vocab);
  }();

  DecodeConfig dci = dc;
  dci.rng_seed = mix_seed(dc.rng_seed, id_hash, 0xdecdULL);
  Turn generated = generate_response(model, inst.target_context, vocab, dci, limits);

  std::optional<RetrievedCandidate> retrieved;
  if (opts.use_retrieval && !inst.support.empty()) {
    retrieved = retrieve_candidate(model, inst.target_context, inst.support, vocab, limits);
  }

  Prediction pred = rank_candidates(model, inst.target_context, generated, retrieved, vocab, limits);
  pred.instance_id = inst.id;
  pred.domain = inst.domain;
  pred.task = inst.task;
  pred.mode = inst.mode;
  return pred;
}

double GenRetRow::generated_pct() const {
  const int n = generated + retrieved;
  return n == 0 ? 0.0 : 100.0 * generated / n;
}

double GenRetRow::retrieved_pct() const {
  const int n = generated + retrieved;
  return n == 0 ? 0.0 : 100.0 * retrieved / n;
}

GenRetStats gen_ret_stats(std::span<const Prediction> predictions) {
  if (predictions.empty()) throw std::invalid_argument("gen_ret_stats: no predictions");
  std::map<std::string, GenRetRow> by_domain;
  GenRetRow overall;
  overall.domain = "overall";
  for (const Prediction& p : predictions) {
    GenRetRow& row = by_domain[p.domain];
    row.domain = p.domain;
    if (p.provenance == Provenance::Generated) {
      ++row.generated;
      ++overall.generated;
    } else {
      ++row.retrieved;
      ++overall.retrieved;
    }
  }
  GenRetStats stats;
  for (auto& [name, row] : by_domain) stats.rows.push_back(row);
  stats.rows.push_back(overall);
  return stats;
}

std::string GenRetStats::to_text() const {
  std::ostringstream out;
  size_t width = 8;
  for (const auto& r : rows) width = std::max(width, r.domain.size());
  out << std::left;
  char buf[64];
  out.width(static_cast<std::streamsize>(width));
  out << "domain";
  out << "  generated_pct  retrieved_pct  count\n";
  for (const auto& r : rows) {
    out.width(static_cast<std::streamsize>(width));
    out << r.domain;
    std::snprintf(buf, sizeof buf, "  %13.1f  %13.1f  %5d\n", r.generated_pct(), r.retrieved_pct(),
                  r.generated + r.retrieved);
    out << buf;
  }
  return out.str();
}

}  // namespace fsdial
