#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsdial/corpus.hpp"
#include "fsdial/decoding.hpp"
#include "fsdial/nnet.hpp"
#include "fsdial/tokenizer.hpp"
#include "fsdial/training.hpp"

namespace fsdial {

// Last-layer hidden state at the final encoded position of a context.
struct ContextEmbedding {
  std::vector<float> vec;
  std::string source_dialogue_id;
  int context_len = 0;
};

enum class Provenance { Generated, Retrieved };

const char* provenance_name(Provenance p);

struct Prediction {
  std::string instance_id;
  std::string domain;
  std::string task;
  InstanceMode mode = InstanceMode::PureTask;
  std::string final_text;
  Provenance provenance = Provenance::Generated;
  std::string generated_candidate;
  std::optional<std::string> retrieved_candidate;
  std::optional<std::string> retrieved_source_id;
  double nsp_score_generated = 0.0;
  std::optional<double> nsp_score_retrieved;
};

struct RetrievedCandidate {
  Turn response;
  std::string source_dialogue_id;
  double similarity = 0.0;
};

// Cosine of the angle between a and b, accumulated in double. Returns 0
// when either vector has zero norm.
double cosine_similarity(std::span<const float> a, std::span<const float> b);

// Encodes the window-truncated context (no response region) in eval mode
// and returns the last-layer hidden vector at the final position.
template <typename T>
std::vector<T> embed_context_vec(const ModelState<T>& state, std::span<const Turn> context,
                                 const Vocab& vocab, const EncodeLimits& limits) {
  if (context.empty()) throw std::invalid_argument("embed_context: empty context");
  std::span<const Turn> ctx = context;
  if (static_cast<int>(ctx.size()) > limits.context_window) {
    ctx = ctx.subspan(ctx.size() - limits.context_window);
  }
  EncodedSequence seq = encode_dialogue(ctx, vocab, nullptr, limits.max_seq, limits.max_turns);
  ForwardOut<T> out = forward(state, seq);
  const T* row = out.hidden.row(seq.length() - 1);
  return std::vector<T>(row, row + state.config.d_model);
}

ContextEmbedding embed_context(const ModelState<float>& state, std::span<const Turn> context,
                               const Vocab& vocab, const EncodeLimits& limits);

// When predicting turn t of the target (t - 1 = context length), embeds
// every support dialogue's first t - 1 turns and returns the t-th turn of
// the most cosine-similar one (ties by ascending dialogue id). Support
// dialogues with fewer than t turns are excluded; returns nullopt when none
// qualify.
std::optional<RetrievedCandidate> retrieve_candidate(const ModelState<float>& state,
                                                     std::span<const Turn> target_context,
                                                     std::span<const Dialogue> support,
                                                     const Vocab& vocab,
                                                     const EncodeLimits& limits);

// Scores both candidates with P_NSP(follows | context, candidate) and keeps
// the higher one; ties and absent retrieval go to the generated candidate.
// Instance metadata fields are left for the caller.
Prediction rank_candidates(const ModelState<float>& state, std::span<const Turn> context,
                           const Turn& generated, const std::optional<RetrievedCandidate>& retrieved,
                           const Vocab& vocab, const EncodeLimits& limits);

struct PredictOptions {
  bool use_support = true;    // off: skip support fine-tuning
  bool use_retrieval = true;  // off: generated candidate stands alone
};

// Per-instance stream seeds used by predict_instance, exposed so external
// harnesses can reproduce a single instance bit-exactly.
uint64_t instance_finetune_seed(uint64_t train_seed, const std::string& instance_id);
uint64_t instance_decode_seed(uint64_t decode_seed, const std::string& instance_id);

// The full per-instance cycle: restore the prior, fine-tune on the support
// set, generate, retrieve, rank, then discard the adapted weights. The
// prior is never mutated, and results depend only on (tc.seed, dc.rng_seed,
// instance id), never on instance order.
Prediction predict_instance(const Checkpoint& prior, const AdaptationInstance& inst,
                            const Vocab& vocab, const TrainConfig& tc, const DecodeConfig& dc,
                            const PredictOptions& opts = {});

struct GenRetRow {
  std::string domain;
  int generated = 0;
  int retrieved = 0;
  double generated_pct() const;
  double retrieved_pct() const;
};

struct GenRetStats {
  std::vector<GenRetRow> rows;  // per domain, then an "overall" row
  std::string to_text() const;
};

GenRetStats gen_ret_stats(std::span<const Prediction> predictions);

}  // namespace fsdial
