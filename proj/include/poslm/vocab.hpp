#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace poslm {

using TokenId = int;

// A token sequence over the generalized vocabulary (text + position + special
// tokens). Position tokens denote quantized box coordinates and appear in
// groups of four wrapped by OPEN/CLOSE.
using TokenStream = std::vector<TokenId>;

// Id layout of the generalized vocabulary:
//   [0, text_size)                     text tokens
//   [text_size, text_size + bins)      position tokens (bin = id - text_size)
//   then OPEN, CLOSE, MASK, CLS        special tokens, in that order
struct VocabSpec {
  int text_size = 0;
  int position_bins = 0;  // M

  VocabSpec() = default;
  VocabSpec(int text, int bins) : text_size(text), position_bins(bins) {
    if (text <= 0 || bins < 2) throw std::invalid_argument("VocabSpec: text_size must be > 0 and bins >= 2");
  }

  int total_size() const { return text_size + position_bins + kNumSpecials; }
  TokenId open_id() const { return text_size + position_bins; }
  TokenId close_id() const { return text_size + position_bins + 1; }
  TokenId mask_id() const { return text_size + position_bins + 2; }
  TokenId cls_id() const { return text_size + position_bins + 3; }

  bool is_text(TokenId id) const { return id >= 0 && id < text_size; }
  bool is_position(TokenId id) const { return id >= text_size && id < text_size + position_bins; }
  bool is_special(TokenId id) const { return id >= text_size + position_bins && id < total_size(); }

  int bin_of(TokenId id) const {
    if (!is_position(id)) throw std::invalid_argument("VocabSpec::bin_of: not a position token");
    return id - text_size;
  }
  TokenId position_id(int bin) const {
    if (bin < 0 || bin >= position_bins) throw std::invalid_argument("VocabSpec::position_id: bin out of range");
    return text_size + bin;
  }

  static constexpr int kNumSpecials = 4;
};

// Word-level text vocabulary for the synthetic corpus. Ids are indices into
// `words`, i.e. they coincide with the text range of VocabSpec.
class WordVocab {
 public:
  WordVocab() = default;
  explicit WordVocab(std::vector<std::string> words) : words_(std::move(words)) {
    for (int i = 0; i < static_cast<int>(words_.size()); ++i) {
      if (!index_.emplace(words_[i], i).second)
        throw std::invalid_argument("WordVocab: duplicate word '" + words_[i] + "'");
    }
  }

  int size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  TokenId id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw std::invalid_argument("WordVocab: unknown word '" + w + "'");
    return it->second;
  }

  const std::string& word(TokenId id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("WordVocab: id out of range");
    return words_[static_cast<size_t>(id)];
  }

  std::vector<TokenId> encode(const std::vector<std::string>& ws) const {
    std::vector<TokenId> out;
    out.reserve(ws.size());
    for (const auto& w : ws) out.push_back(id(w));
    return out;
  }

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace poslm
