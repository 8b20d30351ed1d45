#include "fsdial/training.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

namespace fsdial {

Turn sample_distractor(std::span<const Turn> pool, const Turn& gold, DetRng& rng) {
  std::vector<int> eligible;
  eligible.reserve(pool.size());
  for (int i = 0; i < static_cast<int>(pool.size()); ++i) {
    if (pool[i].text != gold.text) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw std::runtime_error("sample_distractor: pool contains only the gold text");
  }
  return pool[eligible[rng.uniform_int(eligible.size())]];
}

std::vector<TrainPair> build_pairs(std::span<const Dialogue> dialogues, int context_window) {
  std::vector<TrainPair> pairs;
  for (const Dialogue& d : dialogues) {
    for (int t = 1; t < static_cast<int>(d.turns.size()); ++t) {
      if (d.turns[t].speaker != Speaker::User) continue;
      TrainPair p;
      int begin = std::max(0, t - context_window);
      p.context.assign(d.turns.begin() + begin, d.turns.begin() + t);
      p.response = d.turns[t];
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

CorpusSplit split_dialogues(const Corpus& corpus, double val_fraction, uint64_t seed) {
  std::vector<int> order(corpus.dialogues.size());
  std::iota(order.begin(), order.end(), 0);
  DetRng rng(mix_seed(seed, 0x73706c69ULL));
  rng.shuffle(order);
  const int n_val = std::max(1, static_cast<int>(std::ceil(val_fraction * corpus.dialogues.size())));
  CorpusSplit split;
  for (int i = 0; i < static_cast<int>(order.size()); ++i) {
    (i < n_val ? split.val : split.train).push_back(corpus.dialogues[order[i]]);
  }
  return split;
}

double clip_global_norm(Params<float>& grads, double max_norm) {
  double sq = 0.0;
  grads.for_each_tensor([&](const char*, const Matrix<float>& t) {
    for (float v : t.data) sq += static_cast<double>(v) * v;
  });
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float scale = static_cast<float>(max_norm / norm);
    grads.for_each_tensor([&](const char*, Matrix<float>& t) {
      for (float& v : t.data) v *= scale;
    });
  }
  return norm;
}

namespace {

// Adam with bias correction; state tensors mirror the parameter layout.
struct AdamState {
  Params<float> m;
  Params<float> v;
  long t = 0;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit AdamState(const ModelConfig& c)
      : m(make_zero_params<float>(c)), v(make_zero_params<float>(c)) {}

  void step(Params<float>& params, const Params<float>& grads, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(kBeta1, t);
    const double bc2 = 1.0 - std::pow(kBeta2, t);
    // Walk the four mirrored structures in lockstep.
    std::vector<Matrix<float>*> pts, mts, vts;
    std::vector<const Matrix<float>*> gts;
    params.for_each_tensor([&](const char*, Matrix<float>& x) { pts.push_back(&x); });
    m.for_each_tensor([&](const char*, Matrix<float>& x) { mts.push_back(&x); });
    v.for_each_tensor([&](const char*, Matrix<float>& x) { vts.push_back(&x); });
    grads.for_each_tensor([&](const char*, const Matrix<float>& x) { gts.push_back(&x); });
    for (size_t k = 0; k < pts.size(); ++k) {
      auto& pd = pts[k]->data;
      auto& md = mts[k]->data;
      auto& vd = vts[k]->data;
      const auto& gd = gts[k]->data;
      for (size_t i = 0; i < pd.size(); ++i) {
        const float g = gd[i];
        md[i] = static_cast<float>(kBeta1 * md[i] + (1.0 - kBeta1) * g);
        vd[i] = static_cast<float>(kBeta2 * vd[i] + (1.0 - kBeta2) * g * g);
        const double mhat = md[i] / bc1;
        const double vhat = vd[i] / bc2;
        pd[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + kEps));
      }
    }
  }
};

// One epoch of joint training over `order`-permuted pairs.
EpochMetrics run_train_epoch(ModelState<float>& model, std::span<const TrainPair> pairs,
                             std::span<const Turn> pool, const Vocab& vocab,
                             const EncodeLimits& limits, const TrainConfig& tc, int epoch,
                             uint64_t epoch_seed, AdamState& adam) {
  std::vector<int> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  DetRng shuffle_rng(mix_seed(epoch_seed, 0x73687566ULL));
  shuffle_rng.shuffle(order);
  DetRng distractor_rng(mix_seed(epoch_seed, 0x64697374ULL));

  StepStats epoch_stats;
  Params<float> grads = make_zero_params<float>(model.config);
  const int n = static_cast<int>(pairs.size());
  for (int batch_start = 0, step = 0; batch_start < n; batch_start += tc.batch_size, ++step) {
    const int batch_end = std::min(n, batch_start + tc.batch_size);
    const int batch_pairs = batch_end - batch_start;

    // Pre-draw distractors (one per pair per epoch) and count response
    // tokens, so gradient scales are known before backprop.
    std::vector<Turn> distractors;
    int batch_tokens = 0;
    for (int k = batch_start; k < batch_end; ++k) {
      const TrainPair& pr = pairs[order[k]];
      distractors.push_back(sample_distractor(pool, pr.response, distractor_rng));
      EncodedSequence enc =
          encode_dialogue(pr.context, vocab, &pr.response, limits.max_seq, limits.max_turns);
      batch_tokens += enc.length() - enc.response_start;
    }
    const float lm_scale = 1.0f / static_cast<float>(batch_tokens);
    const float nsp_scale = 1.0f / static_cast<float>(2 * batch_pairs);

    grads.set_zero();
    StepStats batch_stats;
    for (int k = batch_start; k < batch_end; ++k) {
      const TrainPair& pr = pairs[order[k]];
      uint64_t dseed = mix_seed(epoch_seed, 0xd0d0ULL, static_cast<uint64_t>(order[k]));
      batch_stats += joint_pair_backward(model, pr, distractors[k - batch_start], vocab, limits,
                                         lm_scale, nsp_scale, /*train_mode=*/true, dseed, grads);
    }

    const double batch_loss =
        batch_stats.lm_sum / batch_stats.lm_tokens + batch_stats.nsp_sum / batch_stats.nsp_count;
    if (!std::isfinite(batch_loss)) {
      std::ostringstream msg;
      msg << "non-finite loss at epoch " << epoch << " step " << step << " (lm_sum "
          << batch_stats.lm_sum << ", nsp_sum " << batch_stats.nsp_sum << ")";
      throw std::runtime_error(msg.str());
    }

    clip_global_norm(grads, tc.grad_clip_norm);
    adam.step(model.params, grads, tc.learning_rate);
    if (!model.params.all_finite()) {
      throw std::runtime_error("non-finite parameter after update at epoch " +
                               std::to_string(epoch) + " step " + std::to_string(step));
    }

    epoch_stats += batch_stats;
  }

  EpochMetrics m;
  m.epoch = epoch;
  m.split = "train";
  m.lm_loss = epoch_stats.lm_sum / std::max(1, epoch_stats.lm_tokens);
  m.nsp_loss = epoch_stats.nsp_sum / std::max(1, epoch_stats.nsp_count);
  m.nsp_accuracy = static_cast<double>(epoch_stats.nsp_correct) / std::max(1, epoch_stats.nsp_count);
  return m;
}

}  // namespace

EpochMetrics evaluate_pairs(const ModelState<float>& model, std::span<const TrainPair> pairs,
                            std::span<const Turn> distractor_pool, const Vocab& vocab,
                            const EncodeLimits& limits, uint64_t distractor_seed) {
  DetRng rng(mix_seed(distractor_seed, 0x6576616cULL));
  StepStats st;
  for (const TrainPair& pr : pairs) {
    EncodedSequence pos =
        encode_dialogue(pr.context, vocab, &pr.response, limits.max_seq, limits.max_turns);
    ForwardOut<float> out = forward(model, pos);
    LmLossResult lm = lm_loss(out.lm_logits, pos);
    st.lm_sum += lm.loss_sum;
    st.lm_tokens += lm.token_count;

    auto logits = nsp_head(model.params, out.hidden.row(pos.length() - 1));
    st.nsp_sum += nsp_loss(logits, 1);
    st.nsp_correct += (logits[1] > logits[0]) ? 1 : 0;

    Turn neg{Speaker::User, sample_distractor(distractor_pool, pr.response, rng).text};
    EncodedSequence negseq =
        encode_dialogue(pr.context, vocab, &neg, limits.max_seq, limits.max_turns);
    ForwardOut<float> nout = forward(model, negseq);
    auto nlogits = nsp_head(model.params, nout.hidden.row(negseq.length() - 1));
    st.nsp_sum += nsp_loss(nlogits, 0);
    st.nsp_correct += (nlogits[0] > nlogits[1]) ? 1 : 0;
    st.nsp_count += 2;
  }
  EpochMetrics m;
  m.split = "val";
  m.lm_loss = st.lm_sum / std::max(1, st.lm_tokens);
  m.nsp_loss = st.nsp_sum / std::max(1, st.nsp_count);
  m.nsp_accuracy = static_cast<double>(st.nsp_correct) / std::max(1, st.nsp_count);
  return m;
}

TrainResult train_base(const Corpus& corpus, ModelState<float>& model, const Vocab& vocab,
                       const TrainConfig& tc) {
  tc.validate();
  if (model.config.vocab_size != vocab.size()) {
    throw std::invalid_argument("train_base: model vocab_size does not match vocab");
  }
  const EncodeLimits limits = model.config.limits(tc.context_window);

  CorpusSplit split = split_dialogues(corpus, tc.val_fraction, tc.seed);
  if (split.train.empty()) {
    throw std::runtime_error("train_base: corpus too small to hold out a validation split");
  }

  std::vector<TrainPair> train_pairs = build_pairs(split.train, tc.context_window);
  std::vector<TrainPair> val_pairs = build_pairs(split.val, tc.context_window);
  if (train_pairs.empty()) throw std::runtime_error("train_base: empty train split");

  auto collect_turns = [](std::span<const Dialogue> dlgs) {
    std::vector<Turn> pool;
    for (const Dialogue& d : dlgs) pool.insert(pool.end(), d.turns.begin(), d.turns.end());
    return pool;
  };
  std::vector<Turn> train_pool = collect_turns(split.train);
  std::vector<Turn> val_pool = collect_turns(split.val);
  // A degenerate validation pool cannot supply distractors.
  {
    std::set<std::string> distinct;
    for (const Turn& t : val_pool) distinct.insert(t.text);
    if (distinct.size() < 2) val_pool = train_pool;
  }

  TrainResult result;
  EpochMetrics val0 = evaluate_pairs(model, val_pairs, val_pool, vocab, limits,
                                     mix_seed(tc.seed, kValEvalSalt));
  val0.epoch = 0;
  result.metrics.push_back(val0);

  AdamState adam(model.config);
  result.best = snapshot(model, vocab.fingerprint());
  result.best_epoch = 0;
  EarlyStopper stopper(tc.patience);
  stopper.observe(0, val0.joint());

  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    uint64_t epoch_seed = mix_seed(tc.seed, 0x65706fULL, static_cast<uint64_t>(epoch));
    EpochMetrics train_m =
        run_train_epoch(model, train_pairs, train_pool, vocab, limits, tc, epoch, epoch_seed, adam);
    result.metrics.push_back(train_m);

    EpochMetrics val_m = evaluate_pairs(model, val_pairs, val_pool, vocab, limits,
                                        mix_seed(tc.seed, kValEvalSalt));
    val_m.epoch = epoch;
    result.metrics.push_back(val_m);

    const bool stop = stopper.observe(epoch, val_m.joint());
    if (stopper.best_epoch() == epoch) {
      result.best = snapshot(model, vocab.fingerprint());
      result.best_epoch = epoch;
    }
    if (stop) break;
  }
  return result;
}

ModelState<float> finetune_support(const Checkpoint& prior, std::span<const Dialogue> support,
                                   const Vocab& vocab, const TrainConfig& tc) {
  tc.validate();
  if (support.empty()) throw std::invalid_argument("finetune_support: support set is empty");

  std::vector<TrainPair> pairs = build_pairs(support, tc.context_window);
  if (pairs.empty()) {
    throw std::runtime_error("finetune_support: support encodes into zero training pairs");
  }
  std::vector<Turn> pool;
  for (const Dialogue& d : support) pool.insert(pool.end(), d.turns.begin(), d.turns.end());

  ModelState<float> model = restore(prior, vocab);
  const EncodeLimits limits = model.config.limits(tc.context_window);
  AdamState adam(model.config);
  for (int epoch = 1; epoch <= tc.finetune_epochs; ++epoch) {
    uint64_t epoch_seed = mix_seed(tc.seed, 0x66746570ULL, static_cast<uint64_t>(epoch));
    run_train_epoch(model, pairs, pool, vocab, limits, tc, epoch, epoch_seed, adam);
  }
  return model;
}

}  // namespace fsdial
