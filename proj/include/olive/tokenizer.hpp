#pragma once

#include <cctype>
#include <cstdio>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "olive/error.hpp"

namespace olive {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kObj = 3;
inline constexpr int kFirstByte = 4;
inline constexpr int kFirstWord = kFirstByte + 256;

inline constexpr std::string_view kObjLiteral = "[obj]";
inline constexpr std::string_view kPunctuation = ".,?!:;()";

inline bool is_closing_punct(std::string_view s) { return s.size() == 1 && s != "(" && kPunctuation.find(s[0]) != std::string_view::npos; }

/// Word-level vocabulary. Ids 0-3 are PAD, BOS, EOS and OBJ, then one token
/// per byte value for fallback, then punctuation, then words.
class Vocabulary {
 public:
  Vocabulary() {
    for (auto s : {"<pad>", "<bos>", "<eos>", "[obj]"}) tokens_.emplace_back(s);
    for (int b = 0; b < 256; ++b) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "<0x%02X>", b);
      tokens_.emplace_back(buf);
    }
    for (char c : kPunctuation) add(std::string(1, c));
  }

  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
  }

  /// Adds a word if absent; returns its id.
  int add(const std::string& word) {
    require(!word.empty(), ErrorCode::Config, "vocabulary words must be non-empty");
    require(word != kObjLiteral, ErrorCode::Config, "\"[obj]\" is reserved");
    for (char c : word) {
      require(!std::isspace(static_cast<unsigned char>(c)), ErrorCode::Config,
              "vocabulary word \"" + word + "\" contains whitespace");
    }
    if (auto it = word_ids_.find(word); it != word_ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(word);
    word_ids_.emplace(word, id);
    return id;
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(int id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorCode::Dimension,
            "token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }
  /// Word id, or -1 when the word is not in the vocabulary.
  int find(std::string_view word) const {
    const auto it = word_ids_.find(std::string(word));
    return it == word_ids_.end() ? -1 : it->second;
  }
  int id_of(std::string_view word) const {
    const int id = find(word);
    require(id >= 0, ErrorCode::NotFound, "\"" + std::string(word) + "\" is not in the vocabulary");
    return id;
  }
  static bool is_byte(int id) noexcept { return id >= kFirstByte && id < kFirstWord; }

  /// Words in id order (excludes the fixed prefix and punctuation).
  std::vector<std::string> words() const {
    return {tokens_.begin() + kFirstWord + static_cast<std::ptrdiff_t>(kPunctuation.size()), tokens_.end()};
  }

  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(const std::vector<int>& ids) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> word_ids_;
};

namespace detail {

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
inline bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Appends the text of token `id` to `out` following the spacing rules:
// no space before closing punctuation, after "(" or between two byte tokens.
inline void append_piece(const Vocabulary& v, std::string& out, int prev, int id) {
  if (id == kPad || id == kBos || id == kEos) return;
  std::string piece = Vocabulary::is_byte(id) ? std::string(1, static_cast<char>(id - kFirstByte)) : v.token(id);
  const bool glue = prev < 0 || is_closing_punct(v.token(id)) || (prev >= 0 && v.token(prev) == "(") ||
                    (Vocabulary::is_byte(prev) && Vocabulary::is_byte(id));
  if (!glue) out += ' ';
  out += piece;
}

inline void byte_tokens(std::string_view s, std::vector<int>& out) {
  for (unsigned char c : s) out.push_back(kFirstByte + c);
}

// Word/punctuation split of a whitespace-free chunk. A "." or "," between
// two digits stays inside the word so decimals survive.
inline std::vector<int> split_chunk(const Vocabulary& v, std::string_view chunk) {
  std::vector<int> out;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    const int id = v.find(word);
    if (id >= 0) out.push_back(id);
    else byte_tokens(word, out);
    word.clear();
  };
  for (std::size_t i = 0; i < chunk.size(); ++i) {
    const char c = chunk[i];
    const bool punct = kPunctuation.find(c) != std::string_view::npos;
    const bool numeric_sep = (c == '.' || c == ',') && i > 0 && i + 1 < chunk.size() && is_digit(chunk[i - 1]) &&
                             is_digit(chunk[i + 1]);
    if (punct && !numeric_sep) {
      flush();
      out.push_back(v.id_of(std::string(1, c)));
    } else {
      word += c;
    }
  }
  flush();
  return out;
}

}  // namespace detail

/// Whitespace-and-punctuation word tokenizer with byte fallback. The literal
/// "[obj]" becomes the OBJ token. Decoding reproduces the input up to
/// whitespace normalization: a chunk whose word split would not decode back
/// to itself is emitted as raw bytes instead.
inline std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::vector<int> ids;
  std::string rendered;
  std::size_t i = 0;
  while (i < text.size()) {
    if (detail::is_space(text[i])) {
      ++i;
      continue;
    }
    std::string_view chunk;
    if (text.substr(i, kObjLiteral.size()) == kObjLiteral) {
      chunk = kObjLiteral;
    } else {
      std::size_t j = i;
      while (j < text.size() && !detail::is_space(text[j]) && text.substr(j, kObjLiteral.size()) != kObjLiteral) ++j;
      chunk = text.substr(i, j - i);
    }
    i += chunk.size();

    const std::string expected = rendered.empty() ? std::string(chunk) : rendered + " " + std::string(chunk);
    std::vector<int> pieces = chunk == kObjLiteral ? std::vector<int>{kObj} : detail::split_chunk(*this, chunk);
    std::string attempt = rendered;
    int prev = ids.empty() ? -1 : ids.back();
    for (int id : pieces) {
      detail::append_piece(*this, attempt, prev, id);
      prev = id;
    }
    if (attempt != expected) {
      pieces.clear();
      const int last = ids.empty() ? -1 : ids.back();
      if (last >= 0 && (is_byte(last) || token(last) == "(")) pieces.push_back(kFirstByte + ' ');
      detail::byte_tokens(chunk, pieces);
      attempt = rendered;
      prev = last;
      for (int id : pieces) {
        detail::append_piece(*this, attempt, prev, id);
        prev = id;
      }
    }
    ids.insert(ids.end(), pieces.begin(), pieces.end());
    rendered = std::move(attempt);
  }
  return ids;
}

/// Inverse of tokenize(); PAD, BOS and EOS are dropped.
inline std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  int prev = -1;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    detail::append_piece(*this, out, prev, id);
    prev = id;
  }
  return out;
}

inline nlohmann::json vocabulary_to_json(const Vocabulary& v) { return v.words(); }

inline Vocabulary vocabulary_from_json(const nlohmann::json& j) {
  return Vocabulary(j.get<std::vector<std::string>>());
}

}  // namespace olive
