#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fsdial/corpus.hpp"
#include "fsdial/nnet.hpp"
#include "fsdial/rng.hpp"
#include "fsdial/tokenizer.hpp"

namespace fsdial {

// One binary next-sentence example: label 1 iff candidate is the true next
// turn of context.
struct NspExample {
  std::vector<Turn> context;
  Turn candidate;
  int label = 0;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 8;
  int max_epochs = 5;
  int patience = 1;
  int finetune_epochs = 1;
  double grad_clip_norm = 1.0;
  uint64_t seed = 1;
  int context_window = 5;
  double val_fraction = 0.1;

  void validate() const {
    if (learning_rate <= 0 || batch_size < 1 || max_epochs < 1 || patience < 1 ||
        finetune_epochs < 1 || grad_clip_norm <= 0 || context_window < 1) {
      throw std::invalid_argument("train config: all fields must be positive");
    }
    if (val_fraction <= 0.0 || val_fraction >= 1.0) {
      throw std::invalid_argument("train config: val_fraction must be in (0, 1)");
    }
  }
};

struct LmLossResult {
  double loss_sum = 0.0;  // summed NLL over the response region including EOS
  int token_count = 0;
};

// Negative log-likelihood of response tokens: position i - 1 predicts token
// i for every i in the response region (EOS included). Context positions
// contribute nothing. Returns the sum, not the mean, so callers control
// normalization.
template <typename T>
LmLossResult lm_loss(const Matrix<T>& lm_logits, const EncodedSequence& seq) {
  if (!seq.has_response()) throw std::invalid_argument("lm_loss: sequence has no response region");
  if (seq.response_start >= seq.length()) throw std::invalid_argument("lm_loss: empty response region");
  LmLossResult res;
  const int V = lm_logits.cols;
  for (int i = seq.response_start; i < seq.length(); ++i) {
    const T* row = lm_logits.row(i - 1);
    T mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T lse{};
    for (int j = 0; j < V; ++j) lse += std::exp(row[j] - mx);
    res.loss_sum += static_cast<double>(mx) + std::log(static_cast<double>(lse)) -
                    static_cast<double>(row[seq.token_ids[i]]);
    ++res.token_count;
  }
  return res;
}

// Same loss, also accumulating scale * d(loss_sum)/d(logits) into d_logits.
template <typename T>
LmLossResult lm_loss_backward(const Matrix<T>& lm_logits, const EncodedSequence& seq, T scale,
                              Matrix<T>& d_logits) {
  LmLossResult res = lm_loss(lm_logits, seq);
  const int V = lm_logits.cols;
  if (d_logits.rows != lm_logits.rows || d_logits.cols != V) {
    d_logits = Matrix<T>(lm_logits.rows, V);
  }
  for (int i = seq.response_start; i < seq.length(); ++i) {
    const T* row = lm_logits.row(i - 1);
    T* drow = d_logits.row(i - 1);
    T mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T denom{};
    for (int j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
    for (int j = 0; j < V; ++j) drow[j] += scale * std::exp(row[j] - mx) / denom;
    drow[seq.token_ids[i]] -= scale;
  }
  return res;
}

// Binary cross-entropy over the 2-way NSP logits: -log softmax(logits)[label].
template <typename T>
double nsp_loss(const std::array<T, 2>& logits, int label) {
  if (label != 0 && label != 1) throw std::invalid_argument("nsp_loss: label must be 0 or 1");
  const T mx = std::max(logits[0], logits[1]);
  const double lse = static_cast<double>(mx) +
                     std::log(std::exp(static_cast<double>(logits[0] - mx)) +
                              std::exp(static_cast<double>(logits[1] - mx)));
  return lse - static_cast<double>(logits[label]);
}

template <typename T>
double nsp_loss_backward(const std::array<T, 2>& logits, int label, T scale,
                         std::array<T, 2>& d_logits) {
  double loss = nsp_loss(logits, label);
  auto probs = softmax2(logits);
  d_logits[0] += scale * (probs[0] - (label == 0 ? T(1) : T(0)));
  d_logits[1] += scale * (probs[1] - (label == 1 ? T(1) : T(0)));
  return loss;
}

// Uniform draw from the pool excluding turns text-identical to gold.
Turn sample_distractor(std::span<const Turn> pool, const Turn& gold, DetRng& rng);

// Held-out early stopping: stop after `patience` consecutive epochs without
// strict improvement; the best epoch is the one to restore.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  // Returns true when training should stop after this observation.
  bool observe(int epoch, double val_loss) {
    if (best_epoch_ < 0 || val_loss < best_) {
      best_ = val_loss;
      best_epoch_ = epoch;
      bad_epochs_ = 0;
      return false;
    }
    return ++bad_epochs_ >= patience_;
  }

  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }

 private:
  int patience_;
  double best_ = 0.0;
  int best_epoch_ = -1;
  int bad_epochs_ = 0;
};

struct StepStats {
  double lm_sum = 0.0;
  int lm_tokens = 0;
  double nsp_sum = 0.0;
  int nsp_count = 0;
  int nsp_correct = 0;

  void operator+=(const StepStats& o) {
    lm_sum += o.lm_sum;
    lm_tokens += o.lm_tokens;
    nsp_sum += o.nsp_sum;
    nsp_count += o.nsp_count;
    nsp_correct += o.nsp_correct;
  }
};

// A (context, response) training pair: one user turn and its window of
// preceding turns.
struct TrainPair {
  std::vector<Turn> context;
  Turn response;
};

// Forward/backward for one pair and its distractor under the joint
// objective: LM loss over the gold response plus NSP on (context, gold) as
// label 1 and (context, distractor) as label 0. The LM gradient is scaled
// by lm_scale and each NSP example by nsp_scale, which is how the batch
// loop implements mean-normalized L_LM + L_NSP.
template <typename T>
StepStats joint_pair_backward(const ModelState<T>& model, const TrainPair& pair,
                              const Turn& distractor, const Vocab& vocab,
                              const EncodeLimits& limits, T lm_scale, T nsp_scale,
                              bool train_mode, uint64_t dropout_seed, Params<T>& grads) {
  StepStats st;

  EncodedSequence pos =
      encode_dialogue(pair.context, vocab, &pair.response, limits.max_seq, limits.max_turns);
  ForwardCache<T> cache;
  ForwardOut<T> out = forward(model, pos, train_mode, dropout_seed, &cache);

  Matrix<T> d_logits(out.lm_logits.rows, out.lm_logits.cols);
  LmLossResult lm = lm_loss_backward(out.lm_logits, pos, lm_scale, d_logits);
  st.lm_sum += lm.loss_sum;
  st.lm_tokens += lm.token_count;

  const int D = model.config.d_model;
  auto nsp_example = [&](const EncodedSequence& seq, const ForwardOut<T>& fwd,
                         const ForwardCache<T>& fc, int label, const Matrix<T>& d_lm) {
    const int last = seq.length() - 1;
    auto logits = nsp_head(model.params, fwd.hidden.row(last));
    std::array<T, 2> d_nsp{T(0), T(0)};
    st.nsp_sum += nsp_loss_backward(logits, label, nsp_scale, d_nsp);
    st.nsp_count += 1;
    st.nsp_correct += ((logits[1] > logits[0]) == (label == 1)) ? 1 : 0;

    Matrix<T> d_hidden(seq.length(), D);
    const T* h = fwd.hidden.row(last);
    for (int j = 0; j < D; ++j) {
      grads.w_nsp(j, 0) += h[j] * d_nsp[0];
      grads.w_nsp(j, 1) += h[j] * d_nsp[1];
      d_hidden(last, j) = model.params.w_nsp(j, 0) * d_nsp[0] + model.params.w_nsp(j, 1) * d_nsp[1];
    }
    grads.b_nsp.data[0] += d_nsp[0];
    grads.b_nsp.data[1] += d_nsp[1];
    backward(model, fc, d_lm, d_hidden, grads);
  };
  nsp_example(pos, out, cache, 1, d_logits);

  Turn neg{Speaker::User, distractor.text};
  EncodedSequence negseq =
      encode_dialogue(pair.context, vocab, &neg, limits.max_seq, limits.max_turns);
  ForwardCache<T> neg_cache;
  ForwardOut<T> neg_out =
      forward(model, negseq, train_mode, mix_seed(dropout_seed, 0x6e6567ULL), &neg_cache);
  nsp_example(negseq, neg_out, neg_cache, 0, Matrix<T>{});
  return st;
}

struct EpochMetrics {
  int epoch = 0;
  std::string split;  // "train" or "val"
  double lm_loss = 0.0;       // per-token mean
  double nsp_loss = 0.0;      // per-example mean
  double nsp_accuracy = 0.0;  // over positive + distractor examples
  double joint() const { return lm_loss + nsp_loss; }
};

struct TrainResult {
  Checkpoint best;  // the "dialogue prior": best held-out joint loss
  int best_epoch = 0;
  std::vector<EpochMetrics> metrics;
};

std::vector<TrainPair> build_pairs(std::span<const Dialogue> dialogues, int context_window);

// Deterministic dialogue-level split; train_base holds out the val part.
struct CorpusSplit {
  std::vector<Dialogue> train;
  std::vector<Dialogue> val;
};
CorpusSplit split_dialogues(const Corpus& corpus, double val_fraction, uint64_t seed);

// Scales gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_norm(Params<float>& grads, double max_norm);

// Salt for the held-out evaluation's distractor stream; fixed so the
// reported validation numbers can be recomputed from the same batches.
inline constexpr uint64_t kValEvalSalt = 0x7630ULL;

// Eval-mode losses over pairs; distractors are drawn with distractor_seed so
// repeated calls see the same negatives.
EpochMetrics evaluate_pairs(const ModelState<float>& model, std::span<const TrainPair> pairs,
                            std::span<const Turn> distractor_pool, const Vocab& vocab,
                            const EncodeLimits& limits, uint64_t distractor_seed);

// Stage 1: joint LM+NSP training on the source corpus with a dialogue-level
// held-out split, early stopping on held-out joint loss, and the best
// checkpoint returned. Deterministic for a fixed config.
TrainResult train_base(const Corpus& corpus, ModelState<float>& model, const Vocab& vocab,
                       const TrainConfig& tc);

// Stage 2: restores the prior and runs exactly finetune_epochs epochs of the
// joint objective over support-derived pairs; the distractor pool is the
// support turns only. The prior itself is never mutated.
ModelState<float> finetune_support(const Checkpoint& prior, std::span<const Dialogue> support,
                                   const Vocab& vocab, const TrainConfig& tc);

}  // namespace fsdial
