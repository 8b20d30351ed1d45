#include <doctest.h>

#include <cmath>

#include "fsdial/corpus.hpp"
#include "fsdial/hybrid.hpp"
#include "fsdial/rng.hpp"
#include "reference_forward.hpp"

using namespace fsdial;

namespace {

struct Fixture {
  Corpus corpus = gen_synthetic_corpus({2, 2, 8, 8, 14}, 19);
  Vocab vocab;
  ModelConfig config;
  ModelState<float> model{};
  Checkpoint prior;

  Fixture() {
    vocab = build_vocab(corpus, 150);
    config.n_layers = 1;
    config.n_heads = 2;
    config.d_model = 16;
    config.d_ff = 32;
    config.vocab_size = vocab.size();
    config.max_seq = 64;
    config.max_turns = 8;
    config.init_seed = 7;
    model = init_model<float>(config);
    prior = snapshot(model, vocab.fingerprint());
  }

  EncodeLimits limits() const { return config.limits(); }
};

}  // namespace

TEST_CASE("cosine_similarity: symmetry, scale invariance, self-similarity, zero vectors") {
  std::vector<float> a{1.0f, 2.0f, -3.0f, 0.5f};
  std::vector<float> b{-2.0f, 0.25f, 1.0f, 4.0f};
  CHECK(cosine_similarity(a, b) == doctest::Approx(cosine_similarity(b, a)).epsilon(1e-12));

  std::vector<float> a3;
  for (float v : a) a3.push_back(3.0f * v);
  CHECK(cosine_similarity(a, a3) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-6));

  std::vector<float> zero(4, 0.0f);
  CHECK(cosine_similarity(a, zero) == 0.0);
  CHECK_THROWS_AS(cosine_similarity(a, std::vector<float>{1.0f}), std::invalid_argument);
}

TEST_CASE("embed_context: deterministic, matches the forward oracle, sensitive to the last turn") {
  Fixture fx;
  std::vector<Turn> ctx(fx.corpus.dialogues[0].turns.begin(),
                        fx.corpus.dialogues[0].turns.begin() + 3);

  ContextEmbedding e1 = embed_context(fx.model, ctx, fx.vocab, fx.limits());
  ContextEmbedding e2 = embed_context(fx.model, ctx, fx.vocab, fx.limits());
  CHECK(e1.vec == e2.vec);
  for (float v : e1.vec) CHECK(std::isfinite(v));

  // Oracle row: last position of the reference forward's hidden matrix
  // (double model, single head).
  ModelConfig dc = fx.config;
  dc.n_heads = 1;
  ModelState<double> dm = init_model<double>(dc);
  std::vector<double> emb = embed_context_vec(dm, ctx, fx.vocab, fx.limits());
  EncodedSequence seq = encode_dialogue(ctx, fx.vocab, nullptr, dc.max_seq, dc.max_turns);
  test::RefOut ref = test::reference_forward(dm, seq);
  for (int j = 0; j < dc.d_model; ++j) {
    CHECK(emb[j] == doctest::Approx(ref.hidden.back()[j]).epsilon(1e-12));
  }

  // Different final token gives a different vector on a random model.
  std::vector<Turn> ctx2 = ctx;
  ctx2.back().text += " extra";
  ContextEmbedding e3 = embed_context(fx.model, ctx2, fx.vocab, fx.limits());
  CHECK(e1.vec != e3.vec);
}

TEST_CASE("retrieve_candidate: forced single support, self-similar context, exclusions") {
  Fixture fx;
  const Dialogue& target = fx.corpus.dialogues[0];
  std::vector<Turn> ctx(target.turns.begin(), target.turns.begin() + 3);

  // One eligible support: its turn at index 3 is returned regardless.
  std::vector<Dialogue> one{fx.corpus.dialogues[1]};
  auto got = retrieve_candidate(fx.model, ctx, one, fx.vocab, fx.limits());
  REQUIRE(got.has_value());
  CHECK(got->source_dialogue_id == one[0].id);
  CHECK(got->response.text == one[0].turns[3].text);

  // A support with textually identical first turns wins with similarity ~1.
  Dialogue twin = fx.corpus.dialogues[2];
  twin.id = "twin";
  for (int i = 0; i < 3; ++i) twin.turns[i] = target.turns[i];
  std::vector<Dialogue> support{fx.corpus.dialogues[1], twin, fx.corpus.dialogues[3]};
  got = retrieve_candidate(fx.model, ctx, support, fx.vocab, fx.limits());
  REQUIRE(got.has_value());
  CHECK(got->source_dialogue_id == "twin");
  CHECK(got->similarity == doctest::Approx(1.0).epsilon(1e-6));

  // Supports shorter than t turns are excluded; none left -> nullopt.
  Dialogue stub = fx.corpus.dialogues[1];
  stub.turns.resize(2);
  std::vector<Dialogue> short_only{stub};
  CHECK_FALSE(retrieve_candidate(fx.model, ctx, short_only, fx.vocab, fx.limits()).has_value());

  CHECK_THROWS_AS(retrieve_candidate(fx.model, ctx, {}, fx.vocab, fx.limits()),
                  std::invalid_argument);
}

TEST_CASE("retrieve_candidate agrees with a brute-force cosine oracle") {
  Fixture fx;
  DetRng rng(55);
  int checked = 0;
  for (int iter = 0; iter < 20; ++iter) {
    const Dialogue& target = fx.corpus.dialogues[rng.uniform_int(fx.corpus.dialogues.size())];
    int t = 2 + static_cast<int>(rng.uniform_int(4));  // context length 2..5
    std::vector<Turn> ctx(target.turns.begin(), target.turns.begin() + t);

    std::vector<Dialogue> support;
    for (int k = 0; k < 8; ++k) {
      const Dialogue& d = fx.corpus.dialogues[rng.uniform_int(fx.corpus.dialogues.size())];
      if (d.id != target.id) support.push_back(d);
    }
    if (support.empty()) continue;

    auto got = retrieve_candidate(fx.model, ctx, support, fx.vocab, fx.limits());

    // Brute force: embed everything, compute cosines with its own kernel,
    // scan supports sorted by id with a strict > comparison.
    std::vector<float> target_emb = embed_context_vec(fx.model, ctx, fx.vocab, fx.limits());
    std::sort(support.begin(), support.end(),
              [](const Dialogue& a, const Dialogue& b) { return a.id < b.id; });
    std::string best_id;
    double best_sim = -2.0;
    std::string best_text;
    for (const Dialogue& d : support) {
      if (static_cast<int>(d.turns.size()) < t + 1) continue;
      std::vector<Turn> sctx(d.turns.begin(), d.turns.begin() + t);
      std::vector<float> emb = embed_context_vec(fx.model, sctx, fx.vocab, fx.limits());
      double dot = 0, na = 0, nb = 0;
      for (size_t j = 0; j < emb.size(); ++j) {
        dot += static_cast<double>(target_emb[j]) * emb[j];
        na += static_cast<double>(target_emb[j]) * target_emb[j];
        nb += static_cast<double>(emb[j]) * emb[j];
      }
      double sim = dot / (std::sqrt(na) * std::sqrt(nb));
      if (best_id.empty() || sim > best_sim) {
        best_sim = sim;
        best_id = d.id;
        best_text = d.turns[t].text;
      }
    }
    if (best_id.empty()) {
      CHECK_FALSE(got.has_value());
      continue;
    }
    REQUIRE(got.has_value());
    CHECK(got->source_dialogue_id == best_id);
    CHECK(got->response.text == best_text);
    ++checked;
  }
  CHECK(checked >= 15);
}

TEST_CASE("rank_candidates: fallback, tie rule, score consistency") {
  Fixture fx;
  std::vector<Turn> ctx(fx.corpus.dialogues[0].turns.begin(),
                        fx.corpus.dialogues[0].turns.begin() + 3);
  Turn generated{Speaker::User, "i would like dom0w3 please"};

  Prediction no_ret = rank_candidates(fx.model, ctx, generated, std::nullopt, fx.vocab, fx.limits());
  CHECK(no_ret.provenance == Provenance::Generated);
  CHECK(no_ret.final_text == generated.text);
  CHECK_FALSE(no_ret.nsp_score_retrieved.has_value());
  CHECK_FALSE(no_ret.retrieved_candidate.has_value());

  // Identical texts: identical scores, tie resolves to Generated.
  RetrievedCandidate same{generated, "src", 1.0};
  Prediction tie = rank_candidates(fx.model, ctx, generated, same, fx.vocab, fx.limits());
  REQUIRE(tie.nsp_score_retrieved.has_value());
  CHECK(*tie.nsp_score_retrieved == doctest::Approx(tie.nsp_score_generated).epsilon(1e-9));
  CHECK(tie.provenance == Provenance::Generated);

  // Selection consistency invariant.
  RetrievedCandidate other{{Speaker::User, "thanks that is all goodbye"}, "src2", 0.5};
  Prediction pick = rank_candidates(fx.model, ctx, generated, other, fx.vocab, fx.limits());
  REQUIRE(pick.nsp_score_retrieved.has_value());
  if (pick.provenance == Provenance::Retrieved) {
    CHECK(*pick.nsp_score_retrieved > pick.nsp_score_generated);
    CHECK(pick.final_text == other.response.text);
  } else {
    CHECK(*pick.nsp_score_retrieved <= pick.nsp_score_generated);
    CHECK(pick.final_text == generated.text);
  }
}

TEST_CASE("predict_instance: order independence, prior immutability, fallback path") {
  Fixture fx;
  InstanceBuild build = make_instances(fx.corpus, InstanceMode::PureTask, 3, 5, 23);
  REQUIRE(build.instances.size() >= 2);
  AdaptationInstance a = build.instances[0];
  AdaptationInstance b = build.instances[1];

  TrainConfig tc;
  tc.seed = 3;
  tc.finetune_epochs = 1;
  DecodeConfig dc;
  dc.rng_seed = 9;
  dc.max_response_tokens = 8;

  const uint64_t prior_hash = fx.prior.content_hash();
  Prediction a1 = predict_instance(fx.prior, a, fx.vocab, tc, dc);
  Prediction b1 = predict_instance(fx.prior, b, fx.vocab, tc, dc);
  Prediction b2 = predict_instance(fx.prior, b, fx.vocab, tc, dc);
  Prediction a2 = predict_instance(fx.prior, a, fx.vocab, tc, dc);
  CHECK(fx.prior.content_hash() == prior_hash);

  CHECK(a1.final_text == a2.final_text);
  CHECK(a1.provenance == a2.provenance);
  CHECK(a1.nsp_score_generated == a2.nsp_score_generated);
  CHECK(b1.final_text == b2.final_text);
  CHECK(b1.generated_candidate == b2.generated_candidate);

  // All supports shorter than the context: retrieval is absent, generation stands.
  AdaptationInstance crippled = a;
  for (Dialogue& d : crippled.support) d.turns.resize(2);
  REQUIRE(crippled.target_context.size() >= 3);
  Prediction fallback = predict_instance(fx.prior, crippled, fx.vocab, tc, dc);
  CHECK(fallback.provenance == Provenance::Generated);
  CHECK_FALSE(fallback.retrieved_candidate.has_value());
  CHECK_FALSE(fallback.nsp_score_retrieved.has_value());

  // Ablations: --no-support must not fine-tune, so its generated candidate
  // differs from the default only through the adapted weights.
  PredictOptions no_sup;
  no_sup.use_support = false;
  Prediction ns1 = predict_instance(fx.prior, a, fx.vocab, tc, dc, no_sup);
  Prediction ns2 = predict_instance(fx.prior, a, fx.vocab, tc, dc, no_sup);
  CHECK(ns1.final_text == ns2.final_text);

  PredictOptions no_ret;
  no_ret.use_retrieval = false;
  Prediction nr = predict_instance(fx.prior, a, fx.vocab, tc, dc, no_ret);
  CHECK(nr.provenance == Provenance::Generated);
  CHECK_FALSE(nr.retrieved_candidate.has_value());
}

TEST_CASE("gen_ret_stats: percentages, tally oracle, errors") {
  std::vector<Prediction> preds;
  auto add = [&](const std::string& domain, Provenance prov) {
    Prediction p;
    p.instance_id = "i" + std::to_string(preds.size());
    p.domain = domain;
    p.provenance = prov;
    preds.push_back(p);
  };
  for (int i = 0; i < 3; ++i) add("travel", Provenance::Generated);
  add("travel", Provenance::Retrieved);
  for (int i = 0; i < 2; ++i) add("food", Provenance::Generated);

  GenRetStats stats = gen_ret_stats(preds);
  REQUIRE(stats.rows.size() == 3);  // travel, food (sorted), overall

  // Independent tally.
  int travel_gen = 0, travel_ret = 0;
  for (const auto& p : preds) {
    if (p.domain == "travel") ((p.provenance == Provenance::Generated) ? travel_gen : travel_ret)++;
  }
  const GenRetRow* travel = nullptr;
  const GenRetRow* overall = nullptr;
  for (const auto& r : stats.rows) {
    if (r.domain == "travel") travel = &r;
    if (r.domain == "overall") overall = &r;
  }
  REQUIRE(travel != nullptr);
  REQUIRE(overall != nullptr);
  CHECK(travel->generated == travel_gen);
  CHECK(travel->retrieved == travel_ret);
  CHECK(travel->generated_pct() == doctest::Approx(75.0));
  CHECK(overall->generated + overall->retrieved == 6);
  for (const auto& r : stats.rows) {
    CHECK(r.generated_pct() + r.retrieved_pct() == doctest::Approx(100.0).epsilon(0.0001));
  }

  // All generated -> 100 / 0.
  std::vector<Prediction> all_gen(preds.begin(), preds.begin() + 3);
  GenRetStats g = gen_ret_stats(all_gen);
  CHECK(g.rows.back().generated_pct() == doctest::Approx(100.0));
  CHECK(g.rows.back().retrieved_pct() == doctest::Approx(0.0));

  CHECK_THROWS_AS(gen_ret_stats({}), std::invalid_argument);
}
