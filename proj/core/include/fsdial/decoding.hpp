#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fsdial/corpus.hpp"
#include "fsdial/nnet.hpp"
#include "fsdial/tokenizer.hpp"

namespace fsdial {

struct DecodeConfig {
  double top_p = 0.9;
  int max_response_tokens = 24;
  uint64_t rng_seed = 1;

  void validate() const {
    if (top_p <= 0.0 || top_p > 1.0) throw std::invalid_argument("top_p must be in (0, 1]");
    if (max_response_tokens < 1) {
      throw std::invalid_argument("max_response_tokens must be positive");
    }
  }
};

// A probability vector over the vocabulary: non-negative, sums to 1.
struct TokenDistribution {
  std::vector<double> probs;
};

// Keeps the smallest set of highest-probability tokens (ties by ascending
// token id) whose cumulative mass first reaches p, renormalized by that
// mass; everything else becomes exactly 0. p = 1 returns the input
// unchanged. Input must sum to 1 within 1e-6.
TokenDistribution nucleus_filter(const TokenDistribution& dist, double p);

// Per-step record for auditing generation: the distribution the sampler saw
// (after special-token masking, before the nucleus cut) and its choice.
struct DecodeStep {
  TokenDistribution dist;
  int chosen = -1;
};

// Autoregressive nucleus sampling from the window-truncated context until
// EOS or max_response_tokens. Non-EOS specials are masked from sampling,
// and EOS is masked at the first step so the response is never empty.
// Deterministic given dc.rng_seed.
Turn generate_response(const ModelState<float>& state, std::span<const Turn> context,
                       const Vocab& vocab, const DecodeConfig& dc, const EncodeLimits& limits,
                       std::vector<DecodeStep>* trace = nullptr);

}  // namespace fsdial
