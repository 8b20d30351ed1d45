#include "fsdial/corpus.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fsdial/io_util.hpp"
#include "fsdial/rng.hpp"

namespace fsdial {

using ordered_json = nlohmann::ordered_json;

const char* speaker_name(Speaker s) { return s == Speaker::User ? "user" : "wizard"; }

std::optional<Speaker> speaker_from_name(std::string_view name) {
  if (name == "user") return Speaker::User;
  if (name == "wizard") return Speaker::Wizard;
  return std::nullopt;
}

const char* instance_mode_name(InstanceMode m) {
  return m == InstanceMode::PureTask ? "pure" : "cross";
}

std::optional<InstanceMode> instance_mode_from_name(std::string_view name) {
  if (name == "pure") return InstanceMode::PureTask;
  if (name == "cross") return InstanceMode::CrossTask;
  return std::nullopt;
}

std::string normalize_whitespace(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool in_space = false;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      in_space = true;
      continue;
    }
    if (in_space && !out.empty()) out.push_back(' ');
    in_space = false;
    out.push_back(c);
  }
  return out;
}

void Corpus::rebuild_index() {
  index.clear();
  for (int i = 0; i < static_cast<int>(dialogues.size()); ++i) {
    index[{dialogues[i].domain, dialogues[i].task}].push_back(i);
  }
}

namespace {

// Returns an empty string when valid, else the violated invariant.
std::string check_dialogue(const Dialogue& d) {
  if (d.id.empty()) return "id is empty";
  if (d.domain.empty()) return "domain is empty";
  if (d.task.empty()) return "task is empty";
  if (d.turns.empty()) return "turns are empty";
  if (d.turns.front().speaker != Speaker::Wizard) return "first turn speaker is not wizard";
  for (size_t i = 0; i < d.turns.size(); ++i) {
    if (d.turns[i].text.empty()) {
      return "turn " + std::to_string(i) + " text is empty after normalization";
    }
    if (i > 0 && d.turns[i].speaker == d.turns[i - 1].speaker) {
      return "speakers do not alternate at turn " + std::to_string(i);
    }
  }
  return {};
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& path) {
  std::string content = read_file(path);
  Corpus corpus;
  std::vector<std::string> diagnostics;
  std::set<std::string> seen_ids;

  std::istringstream in(content);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json rec = ordered_json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.is_object()) {
      diagnostics.push_back("line " + std::to_string(line_no) + ": not a valid record");
      continue;
    }
    if (rec.contains("header")) continue;

    Dialogue d;
    bool shape_ok = true;
    for (const char* key : {"id", "domain", "task"}) {
      if (!rec.contains(key) || !rec[key].is_string()) {
        diagnostics.push_back("line " + std::to_string(line_no) + ": missing or non-string field '" +
                              key + "'");
        shape_ok = false;
      }
    }
    if (!rec.contains("turns") || !rec["turns"].is_array()) {
      diagnostics.push_back("line " + std::to_string(line_no) + ": missing or non-array field 'turns'");
      shape_ok = false;
    }
    if (!shape_ok) continue;

    d.id = rec["id"].get<std::string>();
    d.domain = rec["domain"].get<std::string>();
    d.task = rec["task"].get<std::string>();
    for (const auto& t : rec["turns"]) {
      if (!t.is_array() || t.size() != 2 || !t[0].is_string() || !t[1].is_string()) {
        diagnostics.push_back("line " + std::to_string(line_no) + ": dialogue '" + d.id +
                              "': each turn must be a [speaker, text] pair");
        shape_ok = false;
        break;
      }
      auto sp = speaker_from_name(t[0].get<std::string>());
      if (!sp) {
        diagnostics.push_back("line " + std::to_string(line_no) + ": dialogue '" + d.id +
                              "': unknown speaker '" + t[0].get<std::string>() + "'");
        shape_ok = false;
        break;
      }
      d.turns.push_back({*sp, normalize_whitespace(t[1].get<std::string>())});
    }
    if (!shape_ok) continue;

    if (std::string bad = check_dialogue(d); !bad.empty()) {
      diagnostics.push_back("line " + std::to_string(line_no) + ": dialogue '" + d.id + "': " + bad);
      continue;
    }
    if (!seen_ids.insert(d.id).second) {
      diagnostics.push_back("line " + std::to_string(line_no) + ": duplicate dialogue id '" + d.id + "'");
      continue;
    }
    corpus.dialogues.push_back(std::move(d));
  }

  if (!diagnostics.empty()) {
    std::string msg = "corpus file " + path.string() + " has invalid records:";
    for (const auto& diag : diagnostics) msg += "\n  " + diag;
    throw std::runtime_error(msg);
  }
  if (corpus.dialogues.empty()) {
    throw std::runtime_error("corpus file " + path.string() + " contains no dialogues");
  }
  corpus.rebuild_index();
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 const std::map<std::string, std::string>& header_meta) {
  std::string out;
  ordered_json header;
  header["header"]["format"] = "fsdial-corpus";
  header["header"]["version"] = 1;
  for (const auto& [k, v] : header_meta) header["header"][k] = v;
  out += header.dump();
  out += '\n';

  for (const Dialogue& d : corpus.dialogues) {
    ordered_json rec;
    rec["id"] = d.id;
    rec["domain"] = d.domain;
    rec["task"] = d.task;
    rec["turns"] = ordered_json::array();
    for (const Turn& t : d.turns) {
      rec["turns"].push_back({speaker_name(t.speaker), t.text});
    }
    out += rec.dump();
    out += '\n';
  }
  atomic_write_file(path, out);
}

InstanceBuild make_instances(const Corpus& corpus, InstanceMode mode, int support_size,
                             int context_window, uint64_t seed) {
  if (support_size < 1) throw std::invalid_argument("support_size must be positive");
  if (context_window < 1) throw std::invalid_argument("context_window must be positive");

  InstanceBuild build;
  build.summary.mode = mode;

  for (const Dialogue& target : corpus.dialogues) {
    // Candidate support pool, sorted by id for deterministic sampling.
    std::vector<int> pool;
    if (mode == InstanceMode::PureTask) {
      auto it = corpus.index.find({target.domain, target.task});
      if (it != corpus.index.end()) {
        for (int idx : it->second) {
          if (corpus.dialogues[idx].id != target.id) pool.push_back(idx);
        }
      }
    } else {
      for (const auto& [key, ids] : corpus.index) {
        if (key.first != target.domain || key.second == target.task) continue;
        for (int idx : ids) pool.push_back(idx);
      }
    }
    std::sort(pool.begin(), pool.end(), [&](int a, int b) {
      return corpus.dialogues[a].id < corpus.dialogues[b].id;
    });

    auto& counts = build.summary.per_pool[{target.domain, target.task}];
    for (int t = 1; t < static_cast<int>(target.turns.size()); ++t) {
      if (target.turns[t].speaker != Speaker::User) continue;
      if (static_cast<int>(pool.size()) < support_size) {
        ++counts.skipped;
        continue;
      }

      AdaptationInstance inst;
      inst.id = target.id + "#" + std::to_string(t);
      inst.target_dialogue_id = target.id;
      inst.domain = target.domain;
      inst.task = target.task;
      inst.response_turn_index = t;
      inst.mode = mode;
      int ctx_begin = std::max(0, t - context_window);
      inst.target_context.assign(target.turns.begin() + ctx_begin, target.turns.begin() + t);
      inst.gold_response = target.turns[t];

      // Partial Fisher-Yates over the sorted pool, seeded per instance.
      DetRng rng(mix_seed(seed, fnv1a64(target.id), static_cast<uint64_t>(t)));
      std::vector<int> picks = pool;
      for (int k = 0; k < support_size; ++k) {
        size_t j = k + static_cast<size_t>(rng.uniform_int(picks.size() - k));
        std::swap(picks[k], picks[j]);
        inst.support.push_back(corpus.dialogues[picks[k]]);
      }
      build.instances.push_back(std::move(inst));
      ++counts.produced;
    }
  }

  if (build.instances.empty()) {
    throw std::runtime_error("no eligible targets: every pool is smaller than support_size + 1");
  }
  return build;
}

int InstanceSummary::total_produced() const {
  int n = 0;
  for (const auto& [k, c] : per_pool) n += c.produced;
  return n;
}

int InstanceSummary::total_skipped() const {
  int n = 0;
  for (const auto& [k, c] : per_pool) n += c.skipped;
  return n;
}

std::string InstanceSummary::to_text() const {
  std::ostringstream out;
  out << "domain\ttask\tmode\tproduced\tskipped\n";
  for (const auto& [key, c] : per_pool) {
    out << key.first << '\t' << key.second << '\t' << instance_mode_name(mode) << '\t' << c.produced
        << '\t' << c.skipped << '\n';
  }
  out << "total\t-\t" << instance_mode_name(mode) << '\t' << total_produced() << '\t'
      << total_skipped() << '\n';
  return out.str();
}

namespace {

std::string domain_word(int d, int j) { return "dom" + std::to_string(d) + "w" + std::to_string(j); }

// Task k uses a contiguous slice of the domain pool. Slices of neighboring
// tasks overlap by about a third, so same-domain cross-task dialogues share
// some content words while cross-domain dialogues share only the scaffold.
std::pair<int, int> task_slice(const SyntheticSpec& spec, int k) {
  int s = std::max(3, (2 * spec.vocab_per_domain) / 3);
  s = std::min(s, spec.vocab_per_domain);
  int span = spec.vocab_per_domain - s;
  int start = spec.tasks_per_domain > 1 ? (k * span) / (spec.tasks_per_domain - 1) : 0;
  return {start, s};
}

}  // namespace

Corpus gen_synthetic_corpus(const SyntheticSpec& spec, uint64_t seed) {
  if (spec.n_domains < 1 || spec.tasks_per_domain < 1 || spec.dialogues_per_task < 1 ||
      spec.vocab_per_domain < 1) {
    throw std::invalid_argument("synthetic spec counts must be >= 1");
  }
  if (spec.turns_per_dialogue < 4 || spec.turns_per_dialogue % 2 != 0) {
    throw std::invalid_argument("turns_per_dialogue must be even and >= 4");
  }

  Corpus corpus;
  for (int d = 0; d < spec.n_domains; ++d) {
    for (int k = 0; k < spec.tasks_per_domain; ++k) {
      const std::string anchor = "dom" + std::to_string(d) + "topic" + std::to_string(k);
      auto [slice_start, slice_len] = task_slice(spec, k);
      for (int i = 0; i < spec.dialogues_per_task; ++i) {
        DetRng rng(mix_seed(seed, (static_cast<uint64_t>(d) << 32) | static_cast<uint64_t>(k),
                            static_cast<uint64_t>(i)));
        auto word = [&] {
          int j = slice_start + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(slice_len)));
          return domain_word(d, j);
        };

        Dialogue dlg;
        dlg.domain = "dom" + std::to_string(d);
        dlg.task = "task" + std::to_string(k);
        char idbuf[64];
        std::snprintf(idbuf, sizeof idbuf, "dom%d-task%d-%03d", d, k, i);
        dlg.id = idbuf;

        const int T = spec.turns_per_dialogue;
        for (int t = 0; t < T; ++t) {
          Turn turn;
          turn.speaker = (t % 2 == 0) ? Speaker::Wizard : Speaker::User;
          if (t == 0) {
            turn.text = "hello how may i help you with " + anchor + " today";
          } else if (t == T - 1) {
            turn.text = "thanks that is all goodbye";
          } else if (turn.speaker == Speaker::User) {
            switch (rng.uniform_int(3)) {
              case 0: turn.text = "i am looking for " + word() + " " + anchor; break;
              case 1: turn.text = "i would like " + word() + " and " + word() + " please"; break;
              default: turn.text = "can you get me " + word() + " for my " + anchor; break;
            }
          } else {
            switch (rng.uniform_int(3)) {
              case 0: turn.text = "we have " + word() + " and " + word() + " available"; break;
              case 1: turn.text = "sure i can offer " + word() + " for " + anchor; break;
              default: turn.text = "would " + word() + " work for you"; break;
            }
          }
          dlg.turns.push_back(std::move(turn));
        }
        corpus.dialogues.push_back(std::move(dlg));
      }
    }
  }
  corpus.rebuild_index();
  return corpus;
}

}  // namespace fsdial
