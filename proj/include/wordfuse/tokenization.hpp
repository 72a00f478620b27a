#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "wordfuse/errors.hpp"
#include "wordfuse/unicode.hpp"

namespace wordfuse {

using TokenId = std::int32_t;

inline constexpr std::string_view kDefaultMarker = "_";
inline constexpr std::string_view kEosText = "<eos>";

struct Token {
  TokenId id = 0;
  std::string text;

  friend bool operator==(const Token&, const Token&) = default;
};

inline std::vector<TokenId> ids_of(std::span<const Token> tokens) {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(t.id);
  return ids;
}

/// Segmentation rules for one model. Implementations are immutable after
/// construction, so a tokenizer may be shared between threads.
///
/// The surface convention is whitespace-delimited words: a token that starts a
/// word (other than the first word of a sentence) carries the boundary marker.
/// `starts_new_word` is the only place the engine looks at that convention.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual std::vector<Token> tokenize(std::string_view text) const = 0;

  /// Inverse of tokenize. A trailing eos is dropped from the surface.
  virtual std::string detokenize(std::span<const Token> tokens) const = 0;

  /// True iff the token opens a new whitespace-delimited word, or is eos.
  virtual bool starts_new_word(const Token& token) const = 0;

  virtual const Token& eos() const = 0;
  virtual std::size_t vocab_size() const = 0;

  /// Prefix that marks word-initial tokens.
  virtual std::string_view marker() const = 0;

  bool is_eos(const Token& token) const { return token.id == eos().id; }
};

struct WordSplit {
  std::vector<Token> previous_tokens;
  std::vector<Token> last_word_tokens;
  std::size_t previous_len = 0;
};

/// Index at which the trailing word of `tokens` begins. Position 0 always
/// begins a word, even when its token carries no marker.
inline std::size_t last_word_start(std::span<const Token> tokens,
                                   const Tokenizer& tokenizer) {
  for (std::size_t i = tokens.size(); i-- > 1;) {
    if (tokenizer.starts_new_word(tokens[i])) return i;
  }
  return 0;
}

inline WordSplit split_candidate(std::span<const Token> tokens,
                                 const Tokenizer& tokenizer) {
  const std::size_t start = last_word_start(tokens, tokenizer);
  WordSplit split;
  split.previous_tokens.assign(tokens.begin(), tokens.begin() + start);
  split.last_word_tokens.assign(tokens.begin() + start, tokens.end());
  split.previous_len = start;
  return split;
}

/// Groups tokens into words at starts_new_word boundaries; eos is skipped.
inline std::vector<std::vector<Token>> group_words(std::span<const Token> tokens,
                                                   const Tokenizer& tokenizer) {
  std::vector<std::vector<Token>> words;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokenizer.is_eos(tokens[i])) continue;
    if (words.empty() || tokenizer.starts_new_word(tokens[i])) words.emplace_back();
    words.back().push_back(tokens[i]);
  }
  return words;
}

/// Greedy longest-match tokenizer over an explicit vocabulary.
///
/// Vocabulary file: UTF-8, one token per line, line index is the token id,
/// line 0 is "<eos>". Word-initial tokens are written with a literal "_"
/// prefix. Tokens never contain whitespace and the marker may only appear as
/// a prefix, which is what keeps segmentation from crossing word boundaries.
class VocabTokenizer final : public Tokenizer {
 public:
  explicit VocabTokenizer(std::vector<std::string> texts,
                          std::string marker = std::string(kDefaultMarker))
      : marker_(std::move(marker)) {
    if (marker_.empty()) throw InvalidVocabulary("boundary marker must be non-empty");
    if (texts.empty() || texts.front() != kEosText) {
      throw InvalidVocabulary("first vocabulary entry must be <eos>");
    }
    vocab_.reserve(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
      auto& text = texts[i];
      const auto id = static_cast<TokenId>(i);
      if (i > 0) validate_entry(text, i);
      if (!by_text_.emplace(text, id).second) {
        throw InvalidVocabulary("duplicate token '" + text + "' at line " + std::to_string(i + 1));
      }
      if (i > 0) {
        if (is_marked(text)) {
          auto body = text.substr(marker_.size());
          max_marked_ = std::max(max_marked_, body.size());
          marked_.emplace(std::move(body), id);
        } else {
          max_plain_ = std::max(max_plain_, text.size());
          plain_.emplace(text, id);
        }
      }
      vocab_.push_back(Token{id, std::move(text)});
    }
  }

  static VocabTokenizer from_stream(std::istream& in,
                                    std::string marker = std::string(kDefaultMarker)) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(std::move(line));
    }
    // A single trailing newline does not add an entry.
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return VocabTokenizer(std::move(lines), std::move(marker));
  }

  static VocabTokenizer from_file(const std::filesystem::path& path,
                                  std::string marker = std::string(kDefaultMarker)) {
    std::ifstream in(path);
    if (!in) throw InvalidVocabulary("cannot open vocabulary file " + path.string());
    return from_stream(in, std::move(marker));
  }

  std::vector<Token> tokenize(std::string_view text) const override {
    const std::string normalized = unicode::nfc(text);
    const std::string_view view(normalized);
    std::vector<Token> out;
    bool first_word = true;
    for (const auto& word : unicode::word_spans(view)) {
      std::size_t pos = 0;
      if (!first_word) {
        const auto id = longest_match(marked_, max_marked_, word.text, 0);
        if (!id) throw uncoverable(view, word.offset);
        out.push_back(vocab_[*id]);
        pos = vocab_[*id].text.size() - marker_.size();
      }
      while (pos < word.text.size()) {
        const auto id = longest_match(plain_, max_plain_, word.text, pos);
        if (!id) throw uncoverable(view, word.offset + pos);
        out.push_back(vocab_[*id]);
        pos += vocab_[*id].text.size();
      }
      first_word = false;
    }
    return out;
  }

  std::string detokenize(std::span<const Token> tokens) const override {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const Token& t = token(tokens[i].id);
      if (t.id == eos().id) {
        if (i + 1 != tokens.size()) throw ForeignToken("<eos> must be the final token");
        break;
      }
      if (is_marked(t.text)) {
        if (!out.empty()) out.push_back(' ');
        out.append(t.text, marker_.size());
      } else {
        out.append(t.text);
      }
    }
    return out;
  }

  bool starts_new_word(const Token& token) const override {
    return token.id == eos().id || is_marked(token.text);
  }

  const Token& eos() const override { return vocab_.front(); }
  std::size_t vocab_size() const override { return vocab_.size(); }

  const Token& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
      throw ForeignToken("token id " + std::to_string(id) + " is not in the vocabulary");
    }
    return vocab_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find(std::string_view text) const {
    const auto it = by_text_.find(std::string(text));
    if (it == by_text_.end()) return std::nullopt;
    return it->second;
  }

  std::span<const Token> vocabulary() const { return vocab_; }
  std::string_view marker() const override { return marker_; }

 private:
  bool is_marked(std::string_view text) const { return text.starts_with(marker_); }

  void validate_entry(const std::string& text, std::size_t index) const {
    const auto where = " (line " + std::to_string(index + 1) + ")";
    if (text.empty()) throw InvalidVocabulary("empty token" + where);
    if (text == kEosText) throw InvalidVocabulary("<eos> may only appear on line 1" + where);
    if (!unicode::valid_utf8(text)) throw InvalidVocabulary("token is not valid UTF-8" + where);
    if (unicode::contains_whitespace(text)) {
      throw InvalidVocabulary("token '" + text + "' contains whitespace" + where);
    }
    if (unicode::nfc(text) != text) {
      throw InvalidVocabulary("token '" + text + "' is not NFC-normalized" + where);
    }
    const std::size_t body = is_marked(text) ? marker_.size() : 0;
    if (body == text.size()) throw InvalidVocabulary("bare boundary marker" + where);
    if (text.find(marker_, body) != std::string::npos) {
      throw InvalidVocabulary("token '" + text + "' spans a word boundary" + where);
    }
  }

  static std::optional<TokenId> longest_match(
      const std::unordered_map<std::string, TokenId>& table, std::size_t max_len,
      std::string_view word, std::size_t pos) {
    const std::size_t limit = std::min(max_len, word.size() - pos);
    std::string probe;
    for (std::size_t len = limit; len > 0; --len) {
      probe.assign(word.substr(pos, len));
      if (const auto it = table.find(probe); it != table.end()) return it->second;
    }
    return std::nullopt;
  }

  static UncoverableCharacter uncoverable(std::string_view text, std::size_t offset) {
    const auto len = unicode::code_point_length(text, offset);
    return UncoverableCharacter(std::string(text.substr(offset, len)), offset);
  }

  std::string marker_;
  std::vector<Token> vocab_;
  std::unordered_map<std::string, TokenId> by_text_;
  std::unordered_map<std::string, TokenId> marked_;  // keyed without the marker
  std::unordered_map<std::string, TokenId> plain_;
  std::size_t max_marked_ = 0;
  std::size_t max_plain_ = 0;
};

struct ValidationIssue {
  std::string sample;
  std::string problem;
};

/// Round-trip and word-boundary checks over sample strings. Samples are
/// compared after whitespace normalization.
inline std::vector<ValidationIssue> validate_samples(const Tokenizer& tokenizer,
                                                     std::span<const std::string> samples) {
  std::vector<ValidationIssue> issues;
  for (const auto& sample : samples) {
    std::string normalized;
    for (const auto& w : unicode::split_words(unicode::nfc(sample))) {
      if (!normalized.empty()) normalized.push_back(' ');
      normalized += w;
    }
    std::vector<Token> tokens;
    try {
      tokens = tokenizer.tokenize(sample);
    } catch (const UncoverableCharacter& e) {
      issues.push_back({sample, e.what()});
      continue;
    }
    if (const auto back = tokenizer.detokenize(tokens); back != normalized) {
      issues.push_back({sample, "round trip produced '" + back + "'"});
      continue;
    }
    const auto words = unicode::split_words(normalized);
    const auto groups = group_words(tokens, tokenizer);
    bool ok = groups.size() == words.size();
    for (std::size_t i = 0; ok && i < groups.size(); ++i) {
      ok = tokenizer.detokenize(groups[i]) == words[i];
    }
    if (!ok) issues.push_back({sample, "tokens cross a word boundary"});
  }
  return issues;
}

/// "w1 w2" for every ordered pair of vocabulary words (markers stripped),
/// capped at `limit` samples.
inline std::vector<std::string> vocabulary_pair_samples(const VocabTokenizer& tokenizer,
                                                        std::size_t limit = 1'000'000) {
  std::vector<std::string> words;
  for (const auto& t : tokenizer.vocabulary().subspan(1)) {
    const auto& m = tokenizer.marker();
    words.push_back(t.text.starts_with(m) ? t.text.substr(m.size()) : t.text);
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  std::vector<std::string> samples;
  for (const auto& a : words) {
    for (const auto& b : words) {
      if (samples.size() >= limit) return samples;
      samples.push_back(a + " " + b);
    }
  }
  return samples;
}

}  // namespace wordfuse
