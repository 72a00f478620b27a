#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wordfuse/scoring.hpp"

namespace wordfuse {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::vector<double> log_normalize(const std::vector<double>& logits) {
  double hi = kNegInf;
  for (double v : logits) hi = std::max(hi, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - hi);
  const double lse = hi + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

}  // namespace detail

/// Explicit conditional probability table.
///
/// Rows are keyed by (context, prefix ids). A query uses the row for the
/// longest suffix of its prefix that has one, so a row for the empty prefix
/// acts as the unigram fallback and a row for [a] serves any prefix ending in
/// a. At each suffix length a row for the exact payload wins over one for the
/// wildcard context "*". With no matching row the distribution is uniform.
///
/// File format, one row per line, fields separated by tabs:
///
///     <context>  <prefix ids, space separated, or ->  <id>:<prob> <id>:<prob> ...
///
/// Blank lines and lines starting with '#' are ignored. Unlisted ids have
/// probability zero; each row must sum to 1 within 1e-9.
class TableModel final : public FullDistributionModel {
 public:
  static constexpr std::string_view kAnyContext = "*";

  TableModel(std::shared_ptr<const VocabTokenizer> tokenizer, std::string identity)
      : tokenizer_(std::move(tokenizer)), identity_(std::move(identity)) {}

  static std::unique_ptr<TableModel> from_file(std::shared_ptr<const VocabTokenizer> tokenizer,
                                               const std::filesystem::path& path,
                                               std::string identity = {}) {
    std::ifstream in(path);
    if (!in) throw InvalidModel("cannot open table file " + path.string());
    if (identity.empty()) identity = "table:" + path.filename().string();
    auto model = std::make_unique<TableModel>(std::move(tokenizer), std::move(identity));
    model->load(in, path.string());
    return model;
  }

  void load(std::istream& in, const std::string& source = "<table>") {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.front() == '#') continue;
      const auto where = source + ":" + std::to_string(line_no);
      std::vector<std::string> fields;
      std::stringstream ss(line);
      for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
      if (fields.size() != 3) throw InvalidModel(where + ": expected 3 tab-separated fields");

      std::vector<TokenId> prefix;
      if (fields[1] != "-") {
        std::stringstream ps(fields[1]);
        for (long id; ps >> id;) prefix.push_back(static_cast<TokenId>(id));
        if (!ps.eof()) throw InvalidModel(where + ": bad prefix '" + fields[1] + "'");
      }
      std::vector<std::pair<TokenId, double>> row;
      std::stringstream rs(fields[2]);
      for (std::string cell; rs >> cell;) {
        const auto colon = cell.find(':');
        if (colon == std::string::npos) throw InvalidModel(where + ": bad cell '" + cell + "'");
        try {
          row.emplace_back(static_cast<TokenId>(std::stol(cell.substr(0, colon))),
                           std::stod(cell.substr(colon + 1)));
        } catch (const std::exception&) {
          throw InvalidModel(where + ": bad cell '" + cell + "'");
        }
      }
      try {
        add_row(fields[0], prefix, row);
      } catch (const InvalidModel& e) {
        throw InvalidModel(where + ": " + e.what());
      }
    }
  }

  void add_row(const std::string& context, std::vector<TokenId> prefix,
               const std::vector<std::pair<TokenId, double>>& probs) {
    const auto v = tokenizer_->vocab_size();
    for (TokenId id : prefix) {
      if (id < 0 || static_cast<std::size_t>(id) >= v) {
        throw InvalidModel("prefix id " + std::to_string(id) + " outside vocabulary");
      }
    }
    std::vector<double> logprobs(v, kNegInf);
    std::vector<bool> seen(v, false);
    double total = 0.0;
    for (const auto& [id, p] : probs) {
      if (id < 0 || static_cast<std::size_t>(id) >= v) {
        throw InvalidModel("row id " + std::to_string(id) + " outside vocabulary");
      }
      if (seen[static_cast<std::size_t>(id)]) {
        throw InvalidModel("duplicate id " + std::to_string(id) + " in row");
      }
      if (!(p >= 0.0 && p <= 1.0)) throw InvalidModel("probability out of [0, 1]");
      seen[static_cast<std::size_t>(id)] = true;
      logprobs[static_cast<std::size_t>(id)] = std::log(p);
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw InvalidModel("row probabilities sum to " + std::to_string(total));
    }
    if (!rows_[context].emplace(std::move(prefix), std::move(logprobs)).second) {
      throw InvalidModel("duplicate row for context '" + context + "'");
    }
  }

  std::string identity() const override { return identity_; }
  const Tokenizer& tokenizer() const override { return *tokenizer_; }

  std::vector<double> log_distribution(const ModelInput& input,
                                       std::span<const TokenId> prefix) const override {
    const auto exact = rows_.find(input.payload);
    const auto any = rows_.find(std::string(kAnyContext));
    for (std::size_t len = prefix.size() + 1; len-- > 0;) {
      const std::vector<TokenId> suffix(prefix.end() - static_cast<std::ptrdiff_t>(len), prefix.end());
      for (const auto& ctx : {exact, any}) {
        if (ctx == rows_.end()) continue;
        if (const auto row = ctx->second.find(suffix); row != ctx->second.end()) return row->second;
      }
    }
    const double uniform = -std::log(static_cast<double>(tokenizer_->vocab_size()));
    return std::vector<double>(tokenizer_->vocab_size(), uniform);
  }

 protected:
  const Token& token_at(TokenId id) const override { return tokenizer_->token(id); }

 private:
  std::shared_ptr<const VocabTokenizer> tokenizer_;
  std::string identity_;
  std::map<std::string, std::map<std::vector<TokenId>, std::vector<double>>> rows_;
};

/// Interpolated n-gram over the model's own subword tokens, estimated from a
/// toy corpus. Each order mixes its maximum-likelihood estimate with the next
/// lower order (weight `lambda`); histories never seen fall through unchanged,
/// and the chain bottoms out at the uniform distribution, so every row sums to
/// one and no token has probability zero.
///
/// Corpus lines may carry a context key as "key<TAB>sentence". A payload equal
/// to a key is scored with that key's counts; any other payload uses counts
/// pooled over the whole corpus.
class NgramModel final : public FullDistributionModel {
 public:
  NgramModel(std::shared_ptr<const VocabTokenizer> tokenizer, std::span<const std::string> corpus,
             std::size_t order, double lambda = 0.7, std::string identity = "ngram")
      : tokenizer_(std::move(tokenizer)), order_(order), lambda_(lambda),
        identity_(std::move(identity)) {
    if (order_ == 0) throw InvalidModel("n-gram order must be at least 1");
    if (!(lambda_ > 0.0 && lambda_ < 1.0)) throw InvalidModel("lambda must lie in (0, 1)");
    for (const auto& line : corpus) {
      if (line.empty()) continue;
      std::string key;
      std::string_view text = line;
      if (const auto tab = line.find('\t'); tab != std::string::npos) {
        key = line.substr(0, tab);
        text = std::string_view(line).substr(tab + 1);
      }
      auto tokens = ids_of(tokenizer_->tokenize(text));
      tokens.push_back(tokenizer_->eos().id);
      count(pooled_, tokens);
      if (!key.empty()) count(keyed_[key], tokens);
    }
  }

  static std::unique_ptr<NgramModel> from_file(std::shared_ptr<const VocabTokenizer> tokenizer,
                                               const std::filesystem::path& path, std::size_t order,
                                               double lambda = 0.7, std::string identity = {}) {
    std::ifstream in(path);
    if (!in) throw InvalidModel("cannot open corpus file " + path.string());
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(std::move(line));
    }
    if (identity.empty()) identity = "ngram" + std::to_string(order) + ":" + path.filename().string();
    return std::make_unique<NgramModel>(std::move(tokenizer), lines, order, lambda, std::move(identity));
  }

  std::string identity() const override { return identity_; }
  const Tokenizer& tokenizer() const override { return *tokenizer_; }

  std::vector<double> log_distribution(const ModelInput& input,
                                       std::span<const TokenId> prefix) const override {
    const auto keyed = keyed_.find(input.payload);
    const Counts& counts = keyed != keyed_.end() ? keyed->second : pooled_;
    const auto v = tokenizer_->vocab_size();
    std::vector<double> probs(v, 1.0 / static_cast<double>(v));

    std::vector<TokenId> padded(order_ - 1, kBos);
    padded.insert(padded.end(), prefix.begin(), prefix.end());
    for (std::size_t o = 1; o <= order_ && o <= counts.size(); ++o) {
      const std::vector<TokenId> history(padded.end() - static_cast<std::ptrdiff_t>(o - 1), padded.end());
      const auto it = counts[o - 1].find(history);
      if (it == counts[o - 1].end()) continue;
      const auto& [total, next] = it->second;
      for (auto& p : probs) p *= (1.0 - lambda_);
      for (const auto& [id, c] : next) {
        probs[static_cast<std::size_t>(id)] += lambda_ * static_cast<double>(c) / static_cast<double>(total);
      }
    }
    std::vector<double> out(v);
    for (std::size_t i = 0; i < v; ++i) out[i] = std::log(probs[i]);
    return out;
  }

 protected:
  const Token& token_at(TokenId id) const override { return tokenizer_->token(id); }

 private:
  static constexpr TokenId kBos = -1;
  struct Row {
    std::uint64_t total = 0;
    std::map<TokenId, std::uint64_t> next;
  };
  using Counts = std::vector<std::map<std::vector<TokenId>, Row>>;

  void count(Counts& counts, const std::vector<TokenId>& tokens) const {
    counts.resize(order_);
    std::vector<TokenId> padded(order_ - 1, kBos);
    padded.insert(padded.end(), tokens.begin(), tokens.end());
    for (std::size_t p = order_ - 1; p < padded.size(); ++p) {
      for (std::size_t o = 1; o <= order_; ++o) {
        std::vector<TokenId> history(padded.begin() + static_cast<std::ptrdiff_t>(p - (o - 1)),
                                     padded.begin() + static_cast<std::ptrdiff_t>(p));
        auto& row = counts[o - 1][std::move(history)];
        ++row.total;
        ++row.next[padded[p]];
      }
    }
  }

  std::shared_ptr<const VocabTokenizer> tokenizer_;
  std::size_t order_;
  double lambda_;
  std::string identity_;
  Counts pooled_;
  std::map<std::string, Counts> keyed_;
};

/// Pseudo-random model: the logits for each (payload, prefix) are drawn from
/// a hash of the seed, payload and prefix, so distributions are reproducible
/// across runs and platforms. `scale` sets the spread of the logits and
/// `eos_bias` is added to the eos logit.
class RandomModel final : public FullDistributionModel {
 public:
  RandomModel(std::shared_ptr<const VocabTokenizer> tokenizer, std::uint64_t seed,
              double scale = 3.0, double eos_bias = 0.0, std::string identity = {})
      : tokenizer_(std::move(tokenizer)), seed_(seed), scale_(scale), eos_bias_(eos_bias),
        identity_(identity.empty() ? "random:" + std::to_string(seed) : std::move(identity)) {}

  std::string identity() const override { return identity_; }
  const Tokenizer& tokenizer() const override { return *tokenizer_; }

  std::vector<double> log_distribution(const ModelInput& input,
                                       std::span<const TokenId> prefix) const override {
    std::uint64_t h = detail::splitmix64(seed_ ^ detail::fnv1a(input.payload));
    for (TokenId id : prefix) h = detail::splitmix64(h ^ static_cast<std::uint64_t>(id + 1));
    std::vector<double> logits(tokenizer_->vocab_size());
    for (auto& logit : logits) {
      h = detail::splitmix64(h);
      const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
      logit = scale_ * u;
    }
    logits[static_cast<std::size_t>(tokenizer_->eos().id)] += eos_bias_;
    return detail::log_normalize(logits);
  }

 protected:
  const Token& token_at(TokenId id) const override { return tokenizer_->token(id); }

 private:
  std::shared_ptr<const VocabTokenizer> tokenizer_;
  std::uint64_t seed_;
  double scale_;
  double eos_bias_;
  std::string identity_;
};

}  // namespace wordfuse
