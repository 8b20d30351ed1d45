#include "fsdial/tokenizer.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

#include "fsdial/io_util.hpp"
#include "fsdial/rng.hpp"

namespace fsdial {

namespace {
const char* kSpecialNames[Vocab::kNumSpecials] = {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>"};
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string norm = normalize_whitespace(text);
  size_t start = 0;
  while (start < norm.size()) {
    size_t end = norm.find(' ', start);
    if (end == std::string::npos) end = norm.size();
    out.emplace_back(norm.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

uint64_t Vocab::fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& tok : id_to_token) {
    h = fnv1a64(tok, h);
    h = fnv1a64("\n", h);
  }
  return h;
}

Vocab build_vocab(const Corpus& corpus, int max_size) {
  if (max_size < Vocab::kNumSpecials + 1) {
    throw std::invalid_argument("vocab max_size must be at least 6");
  }
  if (corpus.dialogues.empty()) throw std::invalid_argument("cannot build vocab from empty corpus");

  std::map<std::string, long> counts;
  for (const Dialogue& d : corpus.dialogues) {
    for (const Turn& t : d.turns) {
      for (auto& tok : tokenize(t.text)) ++counts[tok];
    }
  }
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab vocab;
  for (const char* s : kSpecialNames) vocab.id_to_token.emplace_back(s);
  int budget = max_size - Vocab::kNumSpecials;
  for (int i = 0; i < budget && i < static_cast<int>(ranked.size()); ++i) {
    vocab.id_to_token.push_back(ranked[i].first);
  }
  for (int i = 0; i < vocab.size(); ++i) vocab.token_to_id[vocab.id_to_token[i]] = i;
  return vocab;
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::string out;
  for (const auto& tok : vocab.id_to_token) {
    out += tok;
    out += '\n';
  }
  atomic_write_file(path, out);
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  Vocab vocab;
  std::string line;
  while (std::getline(in, line)) vocab.id_to_token.push_back(line);
  if (vocab.size() < Vocab::kNumSpecials) {
    throw std::runtime_error("vocab file " + path.string() + " is too short");
  }
  for (int i = 0; i < Vocab::kNumSpecials; ++i) {
    if (vocab.id_to_token[i] != kSpecialNames[i]) {
      throw std::runtime_error("vocab file " + path.string() + " has wrong special token at id " +
                               std::to_string(i));
    }
  }
  for (int i = 0; i < vocab.size(); ++i) vocab.token_to_id[vocab.id_to_token[i]] = i;
  return vocab;
}

EncodedSequence encode_dialogue(std::span<const Turn> turns, const Vocab& vocab,
                                const Turn* response, int max_seq, int max_turns) {
  if (turns.empty()) throw std::invalid_argument("encode_dialogue: turns are empty");
  if (max_turns < 2) throw std::invalid_argument("encode_dialogue: max_turns must be >= 2");

  std::vector<std::vector<int>> turn_tokens;
  turn_tokens.reserve(turns.size());
  for (const Turn& t : turns) {
    std::vector<int> ids;
    for (auto& tok : tokenize(t.text)) ids.push_back(vocab.id_or_unk(tok));
    turn_tokens.push_back(std::move(ids));
  }
  std::vector<int> resp_tokens;
  if (response != nullptr) {
    for (auto& tok : tokenize(response->text)) resp_tokens.push_back(vocab.id_or_unk(tok));
    if (static_cast<int>(resp_tokens.size()) + 2 > max_seq) {
      throw std::runtime_error("encode_dialogue: response alone exceeds max_seq - 2 tokens");
    }
  }

  const int n = static_cast<int>(turns.size());
  const int tail = response ? static_cast<int>(resp_tokens.size()) + 1 : 0;  // tokens + EOS
  int start = 0;
  auto total_len = [&](int s) {
    int len = 1 + tail;  // BOS
    for (int i = s; i < n; ++i) len += static_cast<int>(turn_tokens[i].size()) + 1;  // tokens + SEP
    return len;
  };
  while (start < n && total_len(start) > max_seq) ++start;
  if (start == n) {
    if (response == nullptr) {
      throw std::runtime_error("encode_dialogue: no context turn fits within max_seq");
    }
    // Response-only sequence: all context turns dropped.
  }

  EncodedSequence seq;
  auto push = [&](int token, int speaker, int turn) {
    seq.token_ids.push_back(token);
    seq.speaker_ids.push_back(speaker);
    seq.turn_ids.push_back(std::min(turn, max_turns - 1));
    seq.position_ids.push_back(static_cast<int>(seq.position_ids.size()));
  };

  const int first = std::min(start, n - 1);
  const int bos_speaker =
      start < n ? static_cast<int>(turns[first].speaker) : static_cast<int>(response->speaker);
  push(Vocab::kBos, bos_speaker, 0);
  for (int i = start; i < n; ++i) {
    const int spk = static_cast<int>(turns[i].speaker);
    for (int tok : turn_tokens[i]) push(tok, spk, i - start);
    push(Vocab::kSep, spk, i - start);
  }
  if (response != nullptr) {
    seq.response_start = seq.length();
    const int spk = static_cast<int>(response->speaker);
    const int turn = n - start;
    for (int tok : resp_tokens) push(tok, spk, turn);
    push(Vocab::kEos, spk, turn);
  }
  return seq;
}

std::string decode(std::span<const int> token_ids, const Vocab& vocab) {
  std::string out;
  for (int id : token_ids) {
    if (id < 0 || id >= vocab.size()) {
      throw std::out_of_range("decode: token id " + std::to_string(id) + " outside vocab");
    }
    if (id < Vocab::kNumSpecials) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.id_to_token[id];
  }
  return out;
}

}  // namespace fsdial
