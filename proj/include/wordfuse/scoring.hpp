#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wordfuse/tokenization.hpp"

namespace wordfuse {

enum class Role { generator, ranker };

struct ModelInput {
  std::string payload;
  Role role = Role::generator;
};

struct ScoredEntry {
  Token token;
  double logprob = 0.0;  // natural log
};

/// Top-k next-token log-probabilities, sorted by logprob descending with ties
/// broken by token id ascending.
struct ScoredDistribution {
  std::vector<ScoredEntry> entries;
  std::size_t truncated_to = 0;

  const ScoredEntry& top() const { return entries.front(); }
  bool empty() const { return entries.empty(); }
};

/// One forward evaluation: per-token logprobs of a sequence plus the
/// distribution over the token that would follow it.
struct Evaluation {
  std::vector<double> logprobs;
  ScoredDistribution next;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Left-to-right sum. Every score in the engine is accumulated through this
/// so that equal token sequences produce bit-identical totals.
inline double sum_logprobs(std::span<const double> logprobs) {
  double total = 0.0;
  for (double lp : logprobs) total += lp;
  return total;
}

inline double mean_logprob(std::span<const double> logprobs) {
  if (logprobs.empty()) return 0.0;
  return sum_logprobs(logprobs) / static_cast<double>(logprobs.size());
}

inline bool distribution_order(const ScoredEntry& a, const ScoredEntry& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return a.token.id < b.token.id;
}

/// The model abstraction both ensemble members implement. Scoring must be
/// deterministic given (payload, prefix).
class Scorer {
 public:
  virtual ~Scorer() = default;

  virtual std::string identity() const = 0;
  virtual const Tokenizer& tokenizer() const = 0;

  virtual ScoredDistribution next_distribution(const ModelInput& input,
                                               std::span<const Token> prefix,
                                               std::size_t k) const = 0;

  /// Element i is log P(token_i | token_0..i-1, input).
  virtual std::vector<double> score_prefix(const ModelInput& input,
                                           std::span<const Token> tokens) const = 0;

  /// Scores `tokens` and predicts what follows them in one evaluation.
  /// Models with incremental state should override this.
  virtual Evaluation advance(const ModelInput& input, std::span<const Token> tokens,
                             std::size_t k) const {
    return {score_prefix(input, tokens), next_distribution(input, tokens, k)};
  }

  /// False if calls must be serialized by the caller.
  virtual bool concurrent_safe() const { return true; }
};

/// Base for built-in models that can produce the full next-token
/// distribution. Everything else is derived from `log_distribution`, which
/// keeps score_prefix consistent with stepwise next_distribution picks.
class FullDistributionModel : public Scorer {
 public:
  /// Log-probabilities over the whole vocabulary, indexed by token id.
  virtual std::vector<double> log_distribution(const ModelInput& input,
                                               std::span<const TokenId> prefix) const = 0;

  ScoredDistribution next_distribution(const ModelInput& input,
                                       std::span<const Token> prefix,
                                       std::size_t k) const override {
    const auto ids = ids_of(prefix);
    return top_k(log_distribution(input, ids), k);
  }

  std::vector<double> score_prefix(const ModelInput& input,
                                   std::span<const Token> tokens) const override {
    std::vector<double> out;
    out.reserve(tokens.size());
    std::vector<TokenId> prefix;
    prefix.reserve(tokens.size());
    for (const auto& t : tokens) {
      const auto dist = log_distribution(input, prefix);
      if (t.id < 0 || static_cast<std::size_t>(t.id) >= dist.size()) {
        throw ForeignToken("token id " + std::to_string(t.id) + " outside model vocabulary");
      }
      out.push_back(dist[static_cast<std::size_t>(t.id)]);
      prefix.push_back(t.id);
    }
    return out;
  }

  Evaluation advance(const ModelInput& input, std::span<const Token> tokens,
                     std::size_t k) const override {
    Evaluation ev;
    ev.logprobs.reserve(tokens.size());
    std::vector<TokenId> prefix;
    prefix.reserve(tokens.size());
    for (const auto& t : tokens) {
      const auto dist = log_distribution(input, prefix);
      if (t.id < 0 || static_cast<std::size_t>(t.id) >= dist.size()) {
        throw ForeignToken("token id " + std::to_string(t.id) + " outside model vocabulary");
      }
      ev.logprobs.push_back(dist[static_cast<std::size_t>(t.id)]);
      prefix.push_back(t.id);
    }
    ev.next = top_k(log_distribution(input, prefix), k);
    return ev;
  }

 protected:
  virtual const Token& token_at(TokenId id) const = 0;

  // Zero-probability tokens are never proposed.
  ScoredDistribution top_k(const std::vector<double>& logprobs, std::size_t k) const {
    ScoredDistribution out;
    out.truncated_to = k;
    out.entries.reserve(logprobs.size());
    for (std::size_t id = 0; id < logprobs.size(); ++id) {
      if (logprobs[id] == kNegInf) continue;
      out.entries.push_back({token_at(static_cast<TokenId>(id)), logprobs[id]});
    }
    const auto keep = std::min(k, out.entries.size());
    std::partial_sort(out.entries.begin(), out.entries.begin() + static_cast<std::ptrdiff_t>(keep),
                      out.entries.end(), distribution_order);
    out.entries.resize(keep);
    return out;
  }
};

}  // namespace wordfuse
