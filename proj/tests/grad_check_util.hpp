#pragma once

// Central finite-difference gradient oracle, run in double precision so the
// differencing itself contributes ~1e-9 absolute error at step 1e-4.

#include <functional>
#include <string>
#include <vector>

#include "fsdial/nnet.hpp"
#include "fsdial/training.hpp"

namespace fsdial::test {

struct GradCheckResult {
  double max_rel_err = 0.0;
  size_t checked = 0;
  std::string worst_tensor;
  bool ok = true;
};

// Joint-objective batch used by both the analytic and the FD side.
struct JointBatch {
  std::vector<TrainPair> pairs;
  std::vector<Turn> distractors;
};

inline double joint_batch_loss(const ModelState<double>& m, const JointBatch& batch,
                               const Vocab& vocab, const EncodeLimits& limits) {
  double lm_sum = 0.0, nsp_sum = 0.0;
  int lm_tokens = 0, nsp_count = 0;
  for (size_t i = 0; i < batch.pairs.size(); ++i) {
    const TrainPair& pr = batch.pairs[i];
    EncodedSequence pos =
        encode_dialogue(pr.context, vocab, &pr.response, limits.max_seq, limits.max_turns);
    ForwardOut<double> out = forward(m, pos);
    LmLossResult lm = lm_loss(out.lm_logits, pos);
    lm_sum += lm.loss_sum;
    lm_tokens += lm.token_count;
    nsp_sum += nsp_loss(nsp_head(m.params, out.hidden.row(pos.length() - 1)), 1);

    Turn neg{Speaker::User, batch.distractors[i].text};
    EncodedSequence negseq =
        encode_dialogue(pr.context, vocab, &neg, limits.max_seq, limits.max_turns);
    ForwardOut<double> nout = forward(m, negseq);
    nsp_sum += nsp_loss(nsp_head(m.params, nout.hidden.row(negseq.length() - 1)), 0);
    nsp_count += 2;
  }
  return lm_sum / lm_tokens + nsp_sum / nsp_count;
}

// Analytic gradient of the same joint loss via the production glue.
inline Params<double> joint_batch_grads(const ModelState<double>& m, const JointBatch& batch,
                                        const Vocab& vocab, const EncodeLimits& limits) {
  int lm_tokens = 0;
  for (const TrainPair& pr : batch.pairs) {
    EncodedSequence pos =
        encode_dialogue(pr.context, vocab, &pr.response, limits.max_seq, limits.max_turns);
    lm_tokens += pos.length() - pos.response_start;
  }
  const double lm_scale = 1.0 / lm_tokens;
  const double nsp_scale = 1.0 / (2.0 * batch.pairs.size());
  Params<double> grads = make_zero_params<double>(m.config);
  for (size_t i = 0; i < batch.pairs.size(); ++i) {
    joint_pair_backward(m, batch.pairs[i], batch.distractors[i], vocab, limits, lm_scale,
                        nsp_scale, /*train_mode=*/false, 0, grads);
  }
  return grads;
}

// Compares every parameter's analytic gradient against central differences.
// A parameter passes when |a - n| <= tol * max(|a|, |n|) or both sides are
// below an absolute floor (unused parameters are exactly zero on both).
inline GradCheckResult finite_diff_check(ModelState<double>& m, const Params<double>& analytic,
                                         const std::function<double()>& loss_fn,
                                         double step = 1e-4, double tol = 1e-4,
                                         double abs_floor = 1e-8) {
  GradCheckResult res;
  std::vector<Matrix<double>*> tensors;
  std::vector<std::string> names;
  m.params.for_each_tensor([&](const char* name, Matrix<double>& t) {
    tensors.push_back(&t);
    names.push_back(name);
  });
  std::vector<const Matrix<double>*> grads;
  analytic.for_each_tensor([&](const char*, const Matrix<double>& t) { grads.push_back(&t); });

  for (size_t k = 0; k < tensors.size(); ++k) {
    for (size_t i = 0; i < tensors[k]->data.size(); ++i) {
      double& theta = tensors[k]->data[i];
      const double saved = theta;
      theta = saved + step;
      const double up = loss_fn();
      theta = saved - step;
      const double down = loss_fn();
      theta = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = grads[k]->data[i];

      const double diff = std::abs(a - numeric);
      const double denom = std::max(std::abs(a), std::abs(numeric));
      const double rel = denom > 0 ? diff / denom : 0.0;
      ++res.checked;
      if (diff > abs_floor && rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_tensor = names[k];
      }
      if (diff > abs_floor && rel > tol) res.ok = false;
    }
  }
  return res;
}

}  // namespace fsdial::test
