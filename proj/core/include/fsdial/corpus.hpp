#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fsdial {

enum class Speaker { User = 0, Wizard = 1 };

const char* speaker_name(Speaker s);
std::optional<Speaker> speaker_from_name(std::string_view name);

// Collapses whitespace runs to single spaces and trims both ends. No case
// folding: casing carries signal for the tokenizer.
std::string normalize_whitespace(std::string_view text);

struct Turn {
  Speaker speaker = Speaker::User;
  std::string text;

  bool operator==(const Turn&) const = default;
};

// A goal-oriented conversation. Turns open with the Wizard and strictly
// alternate Wizard/User.
struct Dialogue {
  std::string id;
  std::string domain;
  std::string task;
  std::vector<Turn> turns;

  bool operator==(const Dialogue&) const = default;
};

struct Corpus {
  std::vector<Dialogue> dialogues;
  // (domain, task) -> indices into dialogues, in file order.
  std::map<std::pair<std::string, std::string>, std::vector<int>> index;

  void rebuild_index();
  bool operator==(const Corpus&) const = default;
};

enum class InstanceMode { PureTask, CrossTask };

const char* instance_mode_name(InstanceMode m);
std::optional<InstanceMode> instance_mode_from_name(std::string_view name);

// One adaptation problem: predict the next user turn of the target dialogue
// given its context and a small support set from the same domain.
struct AdaptationInstance {
  std::string id;  // "<dialogue id>#<turn index>"
  std::string target_dialogue_id;
  std::string domain;
  std::string task;
  int response_turn_index = 0;
  std::vector<Turn> target_context;  // ends with a Wizard turn
  Turn gold_response;                // speaker == User
  std::vector<Dialogue> support;     // never contains the target dialogue
  InstanceMode mode = InstanceMode::PureTask;
};

struct InstanceSummary {
  struct Counts {
    int produced = 0;
    int skipped = 0;
  };
  InstanceMode mode = InstanceMode::PureTask;
  std::map<std::pair<std::string, std::string>, Counts> per_pool;

  int total_produced() const;
  int total_skipped() const;
  std::string to_text() const;
};

struct InstanceBuild {
  std::vector<AdaptationInstance> instances;
  InstanceSummary summary;
};

struct SyntheticSpec {
  int n_domains = 2;
  int tasks_per_domain = 2;
  int dialogues_per_task = 10;
  int turns_per_dialogue = 8;  // even, >= 4
  int vocab_per_domain = 30;
};

// Newline-delimited self-describing records; see save_corpus for the exact
// shape. Rejects any record violating the Dialogue invariants with a
// diagnostic naming the line, dialogue id and invariant.
Corpus load_corpus(const std::filesystem::path& path);

// Inverse of load_corpus with stable key ordering; load(save(c)) == c and
// repeated saves are byte-identical. header_meta lands in a leading header
// record together with the format version.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 const std::map<std::string, std::string>& header_meta = {});

// One instance per (dialogue, user-turn) pair whose support pool is large
// enough; pools too small for support_size are skipped and counted.
// Deterministic for a fixed seed: support is drawn without replacement with
// a per-instance seed derived from (seed, target id, turn index).
InstanceBuild make_instances(const Corpus& corpus, InstanceMode mode, int support_size,
                             int context_window, uint64_t seed);

// Deterministic template-based corpus. Dialogues of one task draw from the
// same slice of a domain-specific token pool, so same-task dialogues are
// lexically closer than cross-task ones and much closer than cross-domain
// ones; retrieval over this corpus is therefore non-trivial.
Corpus gen_synthetic_corpus(const SyntheticSpec& spec, uint64_t seed);

}  // namespace fsdial
