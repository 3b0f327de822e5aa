#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace speechchain {

// Invalid configuration (bad vocabulary, malformed run settings).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Character vocabulary with three reserved control tokens up front:
// start-of-sequence, end-of-sequence, and end-of-block (the incremental
// decoders' "this segment is finished" symbol). Content characters follow
// in the order given.
class Vocab {
 public:
  static constexpr std::size_t kBos = 0;
  static constexpr std::size_t kEos = 1;
  static constexpr std::size_t kEob = 2;
  static constexpr std::size_t kNumSpecial = 3;

  explicit Vocab(const std::string& chars) : chars_(chars) {
    if (chars.empty()) throw ConfigError("vocabulary is empty");
    ids_.assign(256, kInvalid);
    for (std::size_t i = 0; i < chars.size(); ++i) {
      const unsigned char c = static_cast<unsigned char>(chars[i]);
      if (ids_[c] != kInvalid)
        throw ConfigError(std::string("duplicate vocabulary character '") +
                          chars[i] + "'");
      ids_[c] = kNumSpecial + i;
    }
  }

  std::size_t size() const { return kNumSpecial + chars_.size(); }
  const std::string& characters() const { return chars_; }

  static bool is_special(std::size_t id) { return id < kNumSpecial; }

  bool contains(char c) const {
    return ids_[static_cast<unsigned char>(c)] != kInvalid;
  }

  std::size_t id_of(char c) const {
    const std::size_t id = ids_[static_cast<unsigned char>(c)];
    if (id == kInvalid)
      throw ConfigError(std::string("character '") + c +
                        "' not in vocabulary");
    return id;
  }

  char char_of(std::size_t id) const {
    if (id < kNumSpecial || id >= size())
      throw ConfigError("token id " + std::to_string(id) +
                        " is not a content character");
    return chars_[id - kNumSpecial];
  }

  std::vector<std::size_t> encode(const std::string& text) const {
    std::vector<std::size_t> out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      const std::size_t id = ids_[static_cast<unsigned char>(text[i])];
      if (id == kInvalid)
        throw ConfigError(std::string("character '") + text[i] +
                          "' at position " + std::to_string(i) +
                          " not in vocabulary");
      out.push_back(id);
    }
    return out;
  }

  // Control tokens are dropped; content ids map back to characters.
  std::string decode(const std::vector<std::size_t>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (std::size_t id : ids)
      if (!is_special(id)) out.push_back(char_of(id));
    return out;
  }

 private:
  static constexpr std::size_t kInvalid = static_cast<std::size_t>(-1);
  std::string chars_;
  std::vector<std::size_t> ids_;
};

}  // namespace speechchain
