// fsdial: batch pipeline for few-shot dialogue response prediction.
//
// Subcommands: gen-corpus, pretrain, adapt-predict, evaluate, stats.
// Exit codes: 0 success, 1 runtime error, 2 argument error.
// Every output file opens with a header carrying the tool version, the full
// effective configuration and all seeds.

#include <atomic>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "fsdial/baselines.hpp"
#include "fsdial/corpus.hpp"
#include "fsdial/decoding.hpp"
#include "fsdial/eval.hpp"
#include "fsdial/hybrid.hpp"
#include "fsdial/io_util.hpp"
#include "fsdial/nnet.hpp"
#include "fsdial/tokenizer.hpp"
#include "fsdial/training.hpp"

namespace {

using namespace fsdial;
using ordered_json = nlohmann::ordered_json;

constexpr const char* kToolVersion = "0.1.0";

std::string header_line(const std::string& command, const ordered_json& config) {
  ordered_json h;
  h["header"]["format"] = "fsdial-" + command;
  h["header"]["version"] = kToolVersion;
  h["header"]["config"] = config;
  return h.dump();
}

// Text reports get the same header as '#' comment lines.
std::string text_header(const std::string& command, const ordered_json& config) {
  std::string out = "# fsdial " + command + " v" + kToolVersion + "\n";
  out += "# config " + config.dump() + "\n";
  return out;
}

struct ModelFlags {
  ModelConfig config;
  void attach(CLI::App* cmd) {
    cmd->add_option("--layers", config.n_layers, "Transformer layers")->check(CLI::PositiveNumber);
    cmd->add_option("--heads", config.n_heads, "Attention heads")->check(CLI::PositiveNumber);
    cmd->add_option("--d-model", config.d_model, "Model width")->check(CLI::PositiveNumber);
    cmd->add_option("--d-ff", config.d_ff, "Feed-forward width")->check(CLI::PositiveNumber);
    cmd->add_option("--max-seq", config.max_seq, "Maximum sequence length")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--max-turns", config.max_turns, "Turn embedding table size")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--dropout", config.dropout_rate, "Dropout rate")
        ->check(CLI::Range(0.0, 0.999));
    cmd->add_option("--init-seed", config.init_seed, "Weight init seed");
  }
};

struct TrainFlags {
  TrainConfig config;
  void attach(CLI::App* cmd) {
    cmd->add_option("--lr", config.learning_rate, "Learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--batch-size", config.batch_size, "Pairs per optimizer step")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--max-epochs", config.max_epochs, "Stage-1 epoch cap")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--patience", config.patience, "Early-stopping patience")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--finetune-epochs", config.finetune_epochs, "Support fine-tune epochs")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--grad-clip", config.grad_clip_norm, "Global gradient-norm clip")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--train-seed", config.seed, "Training seed");
    cmd->add_option("--context-window", config.context_window, "Context turns fed to the model")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--val-fraction", config.val_fraction, "Held-out dialogue fraction")
        ->check(CLI::Range(0.01, 0.99));
  }
  ordered_json to_json() const {
    return ordered_json{{"lr", config.learning_rate},
                        {"batch_size", config.batch_size},
                        {"max_epochs", config.max_epochs},
                        {"patience", config.patience},
                        {"finetune_epochs", config.finetune_epochs},
                        {"grad_clip", config.grad_clip_norm},
                        {"train_seed", config.seed},
                        {"context_window", config.context_window},
                        {"val_fraction", config.val_fraction}};
  }
};

ordered_json model_config_json(const ModelConfig& c) {
  return ordered_json{{"layers", c.n_layers},     {"heads", c.n_heads},
                      {"d_model", c.d_model},     {"d_ff", c.d_ff},
                      {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
                      {"max_turns", c.max_turns}, {"dropout", c.dropout_rate},
                      {"init_seed", c.init_seed}};
}

// ---------------------------------------------------------------------------
// gen-corpus

int cmd_gen_corpus(const SyntheticSpec& spec, uint64_t seed, const std::string& out) {
  Corpus corpus = gen_synthetic_corpus(spec, seed);
  ordered_json cfg{{"seed", seed},
                   {"domains", spec.n_domains},
                   {"tasks_per_domain", spec.tasks_per_domain},
                   {"dialogues_per_task", spec.dialogues_per_task},
                   {"turns_per_dialogue", spec.turns_per_dialogue},
                   {"vocab_per_domain", spec.vocab_per_domain}};
  save_corpus(corpus, out, {{"generator", cfg.dump()}, {"version", kToolVersion}});
  std::cout << "wrote " << corpus.dialogues.size() << " dialogues to " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain

int cmd_pretrain(const std::string& corpus_path, const std::string& out_ckpt,
                 const std::string& out_vocab, const std::string& out_metrics, int max_vocab,
                 ModelConfig mc, const TrainFlags& tf) {
  Corpus corpus = load_corpus(corpus_path);
  Vocab vocab = build_vocab(corpus, max_vocab);
  mc.vocab_size = vocab.size();
  mc.validate();

  ModelState<float> model = init_model<float>(mc);
  TrainResult result = train_base(corpus, model, vocab, tf.config);

  ordered_json cfg;
  cfg["corpus"] = corpus_path;
  cfg["max_vocab"] = max_vocab;
  cfg["model"] = model_config_json(mc);
  cfg["train"] = tf.to_json();

  save_vocab(vocab, out_vocab);
  ordered_json meta;
  meta["command"] = "pretrain";
  meta["version"] = kToolVersion;
  meta["config"] = cfg;
  meta["best_epoch"] = result.best_epoch;
  save_checkpoint(result.best, out_ckpt, meta.dump());

  std::string metrics_out = header_line("metrics", cfg) + "\n";
  for (const EpochMetrics& m : result.metrics) {
    ordered_json rec{{"epoch", m.epoch},
                     {"split", m.split},
                     {"lm_loss", m.lm_loss},
                     {"nsp_loss", m.nsp_loss},
                     {"nsp_accuracy", m.nsp_accuracy}};
    metrics_out += rec.dump() + "\n";
  }
  atomic_write_file(out_metrics, metrics_out);

  std::cout << "best epoch " << result.best_epoch << "; checkpoint " << out_ckpt << "\n";
  for (const EpochMetrics& m : result.metrics) {
    std::cout << "epoch " << m.epoch << " " << m.split << " lm " << m.lm_loss << " nsp "
              << m.nsp_loss << " acc " << m.nsp_accuracy << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// adapt-predict

ordered_json prediction_record(const Prediction& p) {
  ordered_json rec;
  rec["id"] = p.instance_id;
  rec["domain"] = p.domain;
  rec["task"] = p.task;
  rec["mode"] = instance_mode_name(p.mode);
  rec["final_text"] = p.final_text;
  rec["provenance"] = provenance_name(p.provenance);
  rec["generated"] = p.generated_candidate;
  rec["retrieved"] = p.retrieved_candidate ? ordered_json(*p.retrieved_candidate) : nullptr;
  rec["retrieved_source"] = p.retrieved_source_id ? ordered_json(*p.retrieved_source_id) : nullptr;
  rec["nsp_generated"] = p.nsp_score_generated;
  rec["nsp_retrieved"] = p.nsp_score_retrieved ? ordered_json(*p.nsp_score_retrieved) : nullptr;
  return rec;
}

int cmd_adapt_predict(const std::string& ckpt_path, const std::string& vocab_path,
                      const std::string& corpus_path, InstanceMode mode, int support_size,
                      uint64_t instance_seed, const std::string& out, const TrainFlags& tf,
                      const DecodeConfig& dc, bool no_support, bool no_retrieval, bool baseline,
                      int workers, int limit, int baseline_dim) {
  Corpus corpus = load_corpus(corpus_path);
  Vocab vocab = load_vocab(vocab_path);
  InstanceBuild build =
      make_instances(corpus, mode, support_size, tf.config.context_window, instance_seed);
  std::vector<AdaptationInstance>& instances = build.instances;
  if (limit > 0 && static_cast<int>(instances.size()) > limit) instances.resize(limit);

  std::string system = baseline ? "baseline-retrieval" : "hybrid";
  if (!baseline && no_retrieval && no_support) system = "generative-nosupport";
  else if (!baseline && no_retrieval) system = "generative";
  else if (!baseline && no_support) system = "hybrid-nosupport";

  std::optional<Checkpoint> prior;
  if (!baseline) prior = load_checkpoint(ckpt_path);

  PredictOptions opts;
  opts.use_support = !no_support;
  opts.use_retrieval = !no_retrieval;

  ContextEncoder encoder;
  if (baseline) encoder = bag_embed_encoder(vocab, baseline_dim);

  std::vector<std::optional<Prediction>> results(instances.size());
  std::vector<std::string> failures(instances.size());
  std::atomic<size_t> next{0};

  auto worker_fn = [&] {
    for (size_t i = next.fetch_add(1); i < instances.size(); i = next.fetch_add(1)) {
      const AdaptationInstance& inst = instances[i];
      try {
        if (baseline) {
          RetrievedCandidate got = baseline_retrieve(encoder, inst.target_context, inst.support,
                                                     tf.config.context_window);
          Prediction pred;
          pred.instance_id = inst.id;
          pred.domain = inst.domain;
          pred.task = inst.task;
          pred.mode = inst.mode;
          pred.final_text = got.response.text;
          pred.provenance = Provenance::Retrieved;
          pred.retrieved_candidate = got.response.text;
          pred.retrieved_source_id = got.source_dialogue_id;
          results[i] = pred;
        } else {
          results[i] = predict_instance(*prior, inst, vocab, tf.config, dc, opts);
        }
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };

  const int n_workers = std::max(1, workers);
  if (n_workers == 1) {
    worker_fn();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker_fn);
    for (auto& th : pool) th.join();
  }

  ordered_json cfg;
  cfg["checkpoint"] = baseline ? "" : ckpt_path;
  cfg["vocab"] = vocab_path;
  cfg["corpus"] = corpus_path;
  cfg["system"] = system;
  cfg["mode"] = instance_mode_name(mode);
  cfg["support_size"] = support_size;
  cfg["instance_seed"] = instance_seed;
  cfg["train"] = tf.to_json();
  cfg["decode"] = ordered_json{{"top_p", dc.top_p},
                               {"max_response_tokens", dc.max_response_tokens},
                               {"decode_seed", dc.rng_seed}};
  cfg["no_support"] = no_support;
  cfg["no_retrieval"] = no_retrieval;
  cfg["workers"] = n_workers;

  std::string out_text = header_line("predictions", cfg) + "\n";
  int n_failed = 0;
  for (size_t i = 0; i < instances.size(); ++i) {
    if (results[i]) {
      out_text += prediction_record(*results[i]).dump() + "\n";
    } else {
      ++n_failed;
      std::cerr << "instance " << instances[i].id << " failed: " << failures[i] << "\n";
    }
  }
  atomic_write_file(out, out_text);
  std::cout << "predicted " << (instances.size() - n_failed) << "/" << instances.size()
            << " instances (" << system << ") -> " << out << "\n";
  std::cerr << build.summary.to_text();
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate / stats

struct PredictionFile {
  std::string system;
  std::vector<Prediction> predictions;
};

PredictionFile load_predictions(const std::string& path) {
  PredictionFile pf;
  pf.system = "unknown";
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json rec = ordered_json::parse(line);
    if (rec.contains("header")) {
      if (rec["header"].contains("config") && rec["header"]["config"].contains("system")) {
        pf.system = rec["header"]["config"]["system"].get<std::string>();
      }
      continue;
    }
    Prediction p;
    p.instance_id = rec.at("id").get<std::string>();
    p.domain = rec.at("domain").get<std::string>();
    p.task = rec.at("task").get<std::string>();
    p.mode = instance_mode_from_name(rec.at("mode").get<std::string>())
                 .value_or(InstanceMode::PureTask);
    p.final_text = rec.at("final_text").get<std::string>();
    p.provenance = rec.at("provenance").get<std::string>() == "retrieved" ? Provenance::Retrieved
                                                                          : Provenance::Generated;
    p.generated_candidate = rec.value("generated", "");
    if (rec.contains("retrieved") && !rec["retrieved"].is_null()) {
      p.retrieved_candidate = rec["retrieved"].get<std::string>();
    }
    if (rec.contains("retrieved_source") && !rec["retrieved_source"].is_null()) {
      p.retrieved_source_id = rec["retrieved_source"].get<std::string>();
    }
    p.nsp_score_generated = rec.value("nsp_generated", 0.0);
    if (rec.contains("nsp_retrieved") && !rec["nsp_retrieved"].is_null()) {
      p.nsp_score_retrieved = rec["nsp_retrieved"].get<double>();
    }
    pf.predictions.push_back(std::move(p));
  }
  return pf;
}

int cmd_evaluate(const std::vector<std::string>& prediction_paths, const std::string& corpus_path,
                 InstanceMode mode, int support_size, int context_window, uint64_t instance_seed,
                 const std::string& out, const std::string& records_out, bool corpus_bleu) {
  Corpus corpus = load_corpus(corpus_path);
  InstanceBuild build = make_instances(corpus, mode, support_size, context_window, instance_seed);
  std::map<std::string, Turn> gold;
  for (const auto& inst : build.instances) gold[inst.id] = inst.gold_response;

  ordered_json cfg;
  cfg["predictions"] = prediction_paths;
  cfg["corpus"] = corpus_path;
  cfg["mode"] = instance_mode_name(mode);
  cfg["support_size"] = support_size;
  cfg["context_window"] = context_window;
  cfg["instance_seed"] = instance_seed;
  cfg["corpus_bleu"] = corpus_bleu;

  std::string text = text_header("evaluate", cfg);
  std::string records = header_line("eval-records", cfg) + "\n";
  for (const std::string& path : prediction_paths) {
    PredictionFile pf = load_predictions(path);
    EvalReport report = evaluate_run(pf.predictions, gold, pf.system, corpus_bleu);
    text += report.to_text();
    for (const EvalRow& r : report.rows) {
      ordered_json rec{{"system", r.system}, {"mode", r.mode},     {"domain", r.domain},
                       {"bleu1", r.bleu1},   {"bleu2", r.bleu2},   {"bleu3", r.bleu3},
                       {"rouge_l", r.rouge_l}, {"count", r.count}};
      records += rec.dump() + "\n";
    }
  }
  atomic_write_file(out, text);
  if (!records_out.empty()) atomic_write_file(records_out, records);
  std::cout << text;
  return 0;
}

int cmd_stats(const std::string& predictions_path, const std::string& out,
              const std::string& records_out) {
  PredictionFile pf = load_predictions(predictions_path);
  GenRetStats stats = gen_ret_stats(pf.predictions);

  ordered_json cfg;
  cfg["predictions"] = predictions_path;
  cfg["system"] = pf.system;

  std::string text = text_header("stats", cfg) + stats.to_text();
  atomic_write_file(out, text);
  if (!records_out.empty()) {
    std::string records = header_line("stats-records", cfg) + "\n";
    for (const GenRetRow& r : stats.rows) {
      ordered_json rec{{"domain", r.domain},
                       {"generated_pct", r.generated_pct()},
                       {"retrieved_pct", r.retrieved_pct()},
                       {"count", r.generated + r.retrieved}};
      records += rec.dump() + "\n";
    }
    atomic_write_file(records_out, records);
  }
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot dialogue response prediction pipeline"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from a key=value file (flags override)");

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "Generate a deterministic synthetic corpus");
  SyntheticSpec spec;
  uint64_t gen_seed = 1;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Corpus file to write")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--domains", spec.n_domains)->check(CLI::PositiveNumber);
  gen->add_option("--tasks-per-domain", spec.tasks_per_domain)->check(CLI::PositiveNumber);
  gen->add_option("--dialogues-per-task", spec.dialogues_per_task)->check(CLI::PositiveNumber);
  gen->add_option("--turns-per-dialogue", spec.turns_per_dialogue)->check(CLI::PositiveNumber);
  gen->add_option("--vocab-per-domain", spec.vocab_per_domain)->check(CLI::PositiveNumber);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Train the base model (the dialogue prior)");
  std::string pre_corpus, pre_ckpt, pre_vocab, pre_metrics = "metrics.jsonl";
  int max_vocab = 2000;
  ModelFlags pre_model;
  TrainFlags pre_train;
  pre->add_option("--corpus", pre_corpus, "Training corpus")->required();
  pre->add_option("--out-checkpoint", pre_ckpt, "Checkpoint file to write")->required();
  pre->add_option("--out-vocab", pre_vocab, "Vocab file to write")->required();
  pre->add_option("--metrics", pre_metrics, "Per-epoch metrics file");
  pre->add_option("--max-vocab", max_vocab, "Vocabulary cap including specials")
      ->check(CLI::Range(6, 1000000));
  pre_model.attach(pre);
  pre_train.attach(pre);

  // adapt-predict
  auto* ap = app.add_subcommand("adapt-predict",
                                "Per-instance support fine-tuning and hybrid prediction");
  std::string ap_ckpt, ap_vocab, ap_corpus, ap_out, ap_mode = "pure";
  int ap_support = 3, ap_workers = 1, ap_limit = 0, ap_baseline_dim = 64;
  uint64_t ap_instance_seed = 1;
  bool no_support = false, no_retrieval = false, baseline = false;
  TrainFlags ap_train;
  DecodeConfig ap_decode;
  ap->add_option("--checkpoint", ap_ckpt, "Dialogue prior checkpoint");
  ap->add_option("--vocab", ap_vocab, "Vocab file")->required();
  ap->add_option("--corpus", ap_corpus, "Corpus with target dialogues")->required();
  ap->add_option("--out", ap_out, "Predictions file to write")->required();
  ap->add_option("--mode", ap_mode, "pure or cross")
      ->check(CLI::IsMember({"pure", "cross"}));
  ap->add_option("--support-size", ap_support, "Support dialogues per instance")
      ->check(CLI::PositiveNumber);
  ap->add_option("--instance-seed", ap_instance_seed, "Instance construction seed");
  ap->add_option("--top-p", ap_decode.top_p, "Nucleus sampling mass")
      ->check(CLI::Range(0.000001, 1.0));
  ap->add_option("--max-response-tokens", ap_decode.max_response_tokens)
      ->check(CLI::PositiveNumber);
  ap->add_option("--decode-seed", ap_decode.rng_seed, "Sampling seed");
  ap->add_flag("--no-support", no_support, "Skip support fine-tuning");
  ap->add_flag("--no-retrieval", no_retrieval, "Skip the retrieval candidate");
  ap->add_flag("--baseline", baseline, "Training-free bag-embedding retrieval baseline");
  ap->add_option("--baseline-dim", ap_baseline_dim, "Baseline encoder dimension")
      ->check(CLI::Range(8, 4096));
  ap->add_option("--workers", ap_workers, "Parallel instance workers")->check(CLI::PositiveNumber);
  ap->add_option("--limit", ap_limit, "Use only the first N instances (0 = all)");
  ap_train.attach(ap);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Word-overlap metrics against gold responses");
  std::vector<std::string> ev_preds;
  std::string ev_corpus, ev_out, ev_records, ev_mode = "pure";
  int ev_support = 3, ev_window = 5;
  uint64_t ev_seed = 1;
  bool ev_corpus_bleu = false;
  ev->add_option("--predictions", ev_preds, "Prediction files (repeatable)")->required();
  ev->add_option("--corpus", ev_corpus, "Corpus the instances came from")->required();
  ev->add_option("--out", ev_out, "Report file to write")->required();
  ev->add_option("--records", ev_records, "Machine-readable records file");
  ev->add_option("--mode", ev_mode, "pure or cross")->check(CLI::IsMember({"pure", "cross"}));
  ev->add_option("--support-size", ev_support)->check(CLI::PositiveNumber);
  ev->add_option("--context-window", ev_window)->check(CLI::PositiveNumber);
  ev->add_option("--instance-seed", ev_seed, "Must match the prediction run");
  ev->add_flag("--corpus-bleu", ev_corpus_bleu, "Pooled n-gram statistics, no smoothing");

  // stats
  auto* st = app.add_subcommand("stats", "Generate/retrieve provenance ratios per domain");
  std::string st_preds, st_out, st_records;
  st->add_option("--predictions", st_preds, "Predictions file")->required();
  st->add_option("--out", st_out, "Report file to write")->required();
  st->add_option("--records", st_records, "Machine-readable records file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(spec, gen_seed, gen_out);
    if (pre->parsed()) {
      return cmd_pretrain(pre_corpus, pre_ckpt, pre_vocab, pre_metrics, max_vocab,
                          pre_model.config, pre_train);
    }
    if (ap->parsed()) {
      if (!baseline && ap_ckpt.empty()) {
        std::cerr << "--checkpoint is required unless --baseline is set\n";
        return 2;
      }
      InstanceMode mode = *instance_mode_from_name(ap_mode);
      return cmd_adapt_predict(ap_ckpt, ap_vocab, ap_corpus, mode, ap_support, ap_instance_seed,
                               ap_out, ap_train, ap_decode, no_support, no_retrieval, baseline,
                               ap_workers, ap_limit, ap_baseline_dim);
    }
    if (ev->parsed()) {
      InstanceMode mode = *instance_mode_from_name(ev_mode);
      return cmd_evaluate(ev_preds, ev_corpus, mode, ev_support, ev_window, ev_seed, ev_out,
                          ev_records, ev_corpus_bleu);
    }
    if (st->parsed()) return cmd_stats(st_preds, st_out, st_records);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
