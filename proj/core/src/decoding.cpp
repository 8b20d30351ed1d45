#include "fsdial/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fsdial/rng.hpp"

namespace fsdial {

TokenDistribution nucleus_filter(const TokenDistribution& dist, double p) {
  if (p <= 0.0 || p > 1.0) throw std::invalid_argument("nucleus_filter: p must be in (0, 1]");
  double total = 0.0;
  for (double v : dist.probs) {
    if (v < 0.0) throw std::invalid_argument("nucleus_filter: negative probability");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("nucleus_filter: input does not sum to 1");
  }
  if (p == 1.0) return dist;  // the whole vocabulary is retained

  const int n = static_cast<int>(dist.probs.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (dist.probs[a] != dist.probs[b]) return dist.probs[a] > dist.probs[b];
    return a < b;
  });

  TokenDistribution out;
  out.probs.assign(n, 0.0);
  double mass = 0.0;
  int taken = 0;
  while (taken < n && mass < p) {
    mass += dist.probs[order[taken]];
    ++taken;
  }
  for (int k = 0; k < taken; ++k) {
    out.probs[order[k]] = dist.probs[order[k]] / mass;
  }
  return out;
}

namespace {

int sample_from(const TokenDistribution& dist, DetRng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  int last_nonzero = -1;
  for (int i = 0; i < static_cast<int>(dist.probs.size()); ++i) {
    if (dist.probs[i] <= 0.0) continue;
    cum += dist.probs[i];
    last_nonzero = i;
    if (u < cum) return i;
  }
  return last_nonzero;  // guards against rounding at cum ~ 1
}

}  // namespace

Turn generate_response(const ModelState<float>& state, std::span<const Turn> context,
                       const Vocab& vocab, const DecodeConfig& dc, const EncodeLimits& limits,
                       std::vector<DecodeStep>* trace) {
  dc.validate();
  if (context.empty()) throw std::invalid_argument("generate_response: empty context");
  if (context.back().speaker != Speaker::Wizard) {
    throw std::invalid_argument("generate_response: last context turn must be the wizard's");
  }
  std::span<const Turn> ctx = context;
  if (static_cast<int>(ctx.size()) > limits.context_window) {
    ctx = ctx.subspan(ctx.size() - limits.context_window);
  }

  EncodedSequence seq = encode_dialogue(ctx, vocab, nullptr, limits.max_seq, limits.max_turns);
  if (seq.length() + 1 > limits.max_seq) {
    throw std::runtime_error("generate_response: context leaves no room for a response token");
  }
  const int response_turn = seq.turn_ids.back() + 1;
  const int response_turn_id = std::min(response_turn, limits.max_turns - 1);

  DetRng rng(mix_seed(dc.rng_seed, 0x67656eULL));
  std::vector<int> sampled;
  for (int step = 0; step < dc.max_response_tokens && seq.length() < limits.max_seq; ++step) {
    ForwardOut<float> out = forward(state, seq);
    const float* row = out.lm_logits.row(seq.length() - 1);
    const int V = state.config.vocab_size;

    // Softmax in double, masking specials that may never appear in a
    // response; EOS stays available except at the first step.
    std::vector<double> logits(V);
    for (int j = 0; j < V; ++j) logits[j] = row[j];
    auto masked = [&](int j) {
      if (j == Vocab::kPad || j == Vocab::kBos || j == Vocab::kSep || j == Vocab::kUnk) return true;
      return j == Vocab::kEos && step == 0;
    };
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < V; ++j) {
      if (!masked(j)) mx = std::max(mx, logits[j]);
    }
    TokenDistribution dist;
    dist.probs.assign(V, 0.0);
    double denom = 0.0;
    for (int j = 0; j < V; ++j) {
      if (masked(j)) continue;
      dist.probs[j] = std::exp(logits[j] - mx);
      denom += dist.probs[j];
    }
    for (double& v : dist.probs) v /= denom;

    TokenDistribution filtered = nucleus_filter(dist, dc.top_p);
    const int chosen = sample_from(filtered, rng);
    if (trace) trace->push_back({std::move(dist), chosen});
    if (chosen == Vocab::kEos) break;

    sampled.push_back(chosen);
    seq.token_ids.push_back(chosen);
    seq.speaker_ids.push_back(static_cast<int>(Speaker::User));
    seq.turn_ids.push_back(response_turn_id);
    seq.position_ids.push_back(seq.position_ids.back() + 1);
  }

  return Turn{Speaker::User, decode(sampled, vocab)};
}

}  // namespace fsdial
