#include "fsdial/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "fsdial/rng.hpp"

namespace fsdial {

namespace {

// Unit vector derived from the token string alone: splitmix64 stream of
// uniforms in [-1, 1], normalized. Bit-stable across platforms.
std::vector<float> token_vector(const std::string& token, int dim) {
  std::vector<float> v(dim);
  uint64_t state = fnv1a64(token);
  double sq = 0.0;
  for (int i = 0; i < dim; ++i) {
    state = splitmix64(state);
    const double u = static_cast<double>(state >> 11) * 0x1.0p-53;  // [0, 1)
    v[i] = static_cast<float>(2.0 * u - 1.0);
    sq += static_cast<double>(v[i]) * v[i];
  }
  const float inv = static_cast<float>(1.0 / std::sqrt(sq));
  for (float& x : v) x *= inv;
  return v;
}

}  // namespace

ContextEncoder bag_embed_encoder(const Vocab& vocab, int dim) {
  if (dim < 8) throw std::invalid_argument("bag_embed_encoder: dim must be >= 8");
  ContextEncoder enc;
  enc.name = "bag-embed";
  enc.dim = dim;
  enc.encode = [vocab, dim](std::span<const Turn> context) {
    std::vector<float> sum(dim, 0.0f);
    int count = 0;
    for (const Turn& turn : context) {
      for (const std::string& tok : tokenize(turn.text)) {
        if (!vocab.contains(tok)) continue;  // out-of-vocab tokens are dropped
        std::vector<float> v = token_vector(tok, dim);
        for (int i = 0; i < dim; ++i) sum[i] += v[i];
        ++count;
      }
    }
    if (count > 0) {
      for (float& x : sum) x /= static_cast<float>(count);
    }
    return sum;
  };
  return enc;
}

RetrievedCandidate baseline_retrieve(const ContextEncoder& encoder,
                                     std::span<const Turn> target_context,
                                     std::span<const Dialogue> support, int context_window) {
  if (support.empty()) throw std::invalid_argument("baseline_retrieve: empty support list");
  if (target_context.empty()) {
    throw std::invalid_argument("baseline_retrieve: empty target context");
  }
  const int ctx_len = static_cast<int>(target_context.size());  // t - 1

  auto windowed = [&](std::span<const Turn> turns) {
    if (static_cast<int>(turns.size()) > context_window) {
      return turns.subspan(turns.size() - context_window);
    }
    return turns;
  };
  std::vector<float> target_emb = encoder.encode(windowed(target_context));

  std::vector<const Dialogue*> ordered;
  for (const Dialogue& d : support) ordered.push_back(&d);
  std::sort(ordered.begin(), ordered.end(),
            [](const Dialogue* a, const Dialogue* b) { return a->id < b->id; });

  const RetrievedCandidate* found = nullptr;
  RetrievedCandidate best;
  for (const Dialogue* d : ordered) {
    if (static_cast<int>(d->turns.size()) < ctx_len + 1) continue;
    std::span<const Turn> sctx(d->turns.data(), ctx_len);
    std::vector<float> emb = encoder.encode(windowed(sctx));
    const double sim = cosine_similarity(target_emb, emb);
    if (found == nullptr || sim > best.similarity) {
      best = RetrievedCandidate{d->turns[ctx_len], d->id, sim};
      found = &best;
    }
  }
  if (found == nullptr) {
    throw std::runtime_error("baseline_retrieve: no support dialogue has enough turns");
  }
  return best;
}

}  // namespace fsdial
