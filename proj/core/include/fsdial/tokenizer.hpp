#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fsdial/corpus.hpp"

namespace fsdial {

// Whitespace word tokenizer over normalized text.
std::vector<std::string> tokenize(std::string_view text);

// Word vocabulary; ids 0..4 are the special tokens below, in this order.
struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSep = 4;
  static constexpr int kNumSpecials = 5;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  int size() const { return static_cast<int>(id_to_token.size()); }
  bool contains(const std::string& token) const { return token_to_id.count(token) != 0; }
  int id_or_unk(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }
  // Stable content hash; checkpoints refuse to load under a different vocab.
  uint64_t fingerprint() const;

  bool operator==(const Vocab& o) const { return id_to_token == o.id_to_token; }
};

// The (max_size - 5) most frequent whitespace tokens, ties broken
// lexicographically, plus the specials. max_size must be >= 6.
Vocab build_vocab(const Corpus& corpus, int max_size);

// One token per line in id order, specials first; byte-exact round trip.
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

// Parallel streams feeding the model's summed input embedding.
// Layout: BOS, then per context turn its tokens followed by SEP, then (when
// a response is present) the response tokens followed by EOS. Every token
// of an utterance carries that utterance's speaker and turn id; BOS carries
// the first encoded turn's. Turn ids count from 0 within the encoded
// window and clip at max_turns - 1.
struct EncodedSequence {
  std::vector<int> token_ids;
  std::vector<int> speaker_ids;   // 0 = User, 1 = Wizard
  std::vector<int> turn_ids;
  std::vector<int> position_ids;  // absolute within the encoded sequence
  int response_start = -1;        // -1 for context-only sequences

  int length() const { return static_cast<int>(token_ids.size()); }
  bool has_response() const { return response_start >= 0; }
};

// Encoding bounds; context_window is the turn-level truncation applied by
// the pipeline ops (training pairs, generation, retrieval).
struct EncodeLimits {
  int max_seq = 64;
  int max_turns = 16;
  int context_window = 5;
};

// When the sequence would exceed max_seq, whole oldest context turns are
// dropped (never the response) and turn ids restart at 0 at the new window.
// Throws when the response alone cannot fit (max_seq - 2 tokens) or when no
// context turn fits a context-only sequence.
EncodedSequence encode_dialogue(std::span<const Turn> turns, const Vocab& vocab,
                                const Turn* response, int max_seq, int max_turns);

// Specials stripped, tokens joined with single spaces.
std::string decode(std::span<const int> token_ids, const Vocab& vocab);

}  // namespace fsdial
