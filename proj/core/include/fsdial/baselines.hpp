#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fsdial/corpus.hpp"
#include "fsdial/hybrid.hpp"
#include "fsdial/tokenizer.hpp"

namespace fsdial {

// Training-free context encoder: deterministic, fixed output dimension.
struct ContextEncoder {
  std::string name;
  int dim = 0;
  std::function<std::vector<float>(std::span<const Turn>)> encode;
};

// Averages deterministic pseudo-random unit vectors, one per in-vocab
// token (each seeded by the token string). Contexts left empty after
// dropping out-of-vocab tokens embed as the zero vector.
ContextEncoder bag_embed_encoder(const Vocab& vocab, int dim);

// Same selection semantics as hybrid retrieval (eligibility, cosine, tie by
// ascending id, window truncation) but with the baseline encoder and no
// model state anywhere. Throws when no support dialogue is long enough.
RetrievedCandidate baseline_retrieve(const ContextEncoder& encoder,
                                     std::span<const Turn> target_context,
                                     std::span<const Dialogue> support, int context_window = 5);

}  // namespace fsdial
