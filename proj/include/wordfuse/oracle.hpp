#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wordfuse/merge.hpp"
#include "wordfuse/nbest.hpp"
#include "wordfuse/search.hpp"

// Reference implementations used to check the engine. The enumeration oracle
// recomputes every score from score_prefix and tokenize alone; it shares no
// code with the merge or search modules.

namespace wordfuse::oracle {

inline constexpr std::uint64_t kMaxEnumeration = 10'000'000;

struct OracleBest {
  std::string surface;
  std::vector<Token> tokens;  // generator tokens, ending in eos
  double score = kNegInf;
  double gen_score = kNegInf;
  double ranker_score = kNegInf;
  std::size_t sequences = 0;  // terminated sequences with non-zero probability
};

namespace detail {

inline void check_space(std::size_t vocab, std::size_t max_len) {
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < max_len; ++i) {
    total *= vocab;
    if (total > kMaxEnumeration) {
      throw SearchSpaceTooLarge("enumeration of " + std::to_string(vocab) + "^" +
                                std::to_string(max_len) + " sequences exceeds the oracle limit");
    }
  }
}

// Calls `visit(tokens)` for every sequence of non-eos tokens of length
// 0..max_len-1 followed by eos.
template <class Visit>
void for_each_terminated(const VocabTokenizer& tok, std::size_t max_len, Visit&& visit) {
  std::vector<Token> body;
  const auto recurse = [&](auto&& self) -> void {
    auto seq = body;
    seq.push_back(tok.eos());
    visit(seq);
    if (body.size() + 1 >= max_len) return;
    for (const auto& t : tok.vocabulary()) {
      if (t.id == tok.eos().id) continue;
      body.push_back(t);
      self(self);
      body.pop_back();
    }
  };
  recurse(recurse);
}

inline bool lexicographically_less(const std::vector<Token>& a, const std::vector<Token>& b) {
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    if (a[i].id != b[i].id) return a[i].id < b[i].id;
  }
  return a.size() < b.size();
}

inline double average(const std::vector<double>& xs) {
  double total = 0.0;
  for (double x : xs) total += x;
  return total / static_cast<double>(xs.size());
}

}  // namespace detail

/// Every terminated generator sequence within `max_len` with its
/// length-normalized generator score. Zero-probability sequences are skipped.
inline std::vector<NBestEntry> enumerate_terminated(const Scorer& generator,
                                                    const VocabTokenizer& generator_vocab,
                                                    const ModelInput& input, std::size_t max_len) {
  detail::check_space(generator_vocab.vocab_size(), max_len);
  std::vector<NBestEntry> out;
  detail::for_each_terminated(generator_vocab, max_len, [&](const std::vector<Token>& seq) {
    const auto lps = generator.score_prefix(input, seq);
    for (double lp : lps) {
      if (lp == kNegInf) return;
    }
    NBestEntry e;
    e.surface = generator_vocab.detokenize(seq);
    e.tokens = seq;
    e.gen_score = detail::average(lps);
    e.merged = e.gen_score;
    e.origin = generator.identity();
    out.push_back(std::move(e));
  });
  return out;
}

/// Exhaustive argmax of the complete-candidate objective
/// alpha * avg_G + (1 - alpha) * avg_R over all terminated generator
/// sequences. Ties go to the lexicographically smallest token sequence.
/// `ranker` may be null when alpha == 1.
inline OracleBest enumerate_best(const Scorer& generator, const VocabTokenizer& generator_vocab,
                                 const Scorer* ranker,
                                 const std::pair<ModelInput, ModelInput>& inputs, double alpha,
                                 std::size_t max_len) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw AlphaOutOfRange(alpha);
  if (!ranker && alpha != 1.0) throw Error("enumerate_best needs a ranker unless alpha == 1");
  OracleBest best;
  for (auto& e : enumerate_terminated(generator, generator_vocab, inputs.first, max_len)) {
    ++best.sequences;
    double r = 0.0;
    double score = e.gen_score;
    if (alpha != 1.0) {
      auto rt = ranker->tokenizer().tokenize(e.surface);
      rt.push_back(ranker->tokenizer().eos());
      r = detail::average(ranker->score_prefix(inputs.second, rt));
      score = alpha == 0.0 ? r : alpha * e.gen_score + (1.0 - alpha) * r;
    }
    const bool better =
        score > best.score ||
        (score == best.score && detail::lexicographically_less(e.tokens, best.tokens));
    if (best.tokens.empty() || better) {
      best.surface = e.surface;
      best.tokens = e.tokens;
      best.score = score;
      best.gen_score = e.gen_score;
      best.ranker_score = r;
    }
  }
  return best;
}

/// Shallow-fusion-style scoring without word gating: the ranker scores its
/// own tokenization of the partial surface at every step, which is exactly
/// where mismatched vocabularies go wrong. Negative baseline only.
class NaiveFusionPolicy {
 public:
  NaiveFusionPolicy(const Scorer& ranker, ModelInput ranker_input, double alpha)
      : ranker_(ranker), input_(std::move(ranker_input)), alpha_(alpha) {
    check_alpha(alpha);
  }

  void score(Hypothesis& h) {
    auto rt = ranker_.tokenizer().tokenize(h.surface);
    if (h.finished) rt.push_back(ranker_.tokenizer().eos());
    ++ranker_calls_;
    const auto rlp = ranker_.score_prefix(input_, rt);
    h.merged = merge_finished(h.gen_logprobs, rlp, alpha_);
    h.score = h.merged.merged;
  }

  std::size_t ranker_calls() const { return ranker_calls_; }
  std::size_t extra_generator_calls() const { return 0; }

 private:
  const Scorer& ranker_;
  ModelInput input_;
  double alpha_;
  std::size_t ranker_calls_ = 0;
};

inline DecodeResult naive_token_fusion(const Scorer& generator, const Scorer& ranker,
                                       const std::pair<ModelInput, ModelInput>& inputs,
                                       double alpha, const EnsembleConfig& cfg) {
  NaiveFusionPolicy policy(ranker, inputs.second, alpha);
  return beam_search(generator, inputs.first, cfg, policy);
}

/// Word-end detection by decoding one extra generator step: the word is
/// complete when the generator's next argmax opens a new word.
inline bool lookahead_word_end(const Scorer& generator, const ModelInput& input,
                               std::span<const Token> prefix) {
  const auto next = generator.next_distribution(input, prefix, 1);
  return !next.empty() && generator.tokenizer().starts_new_word(next.top().token);
}

/// Merged scoring with the look-ahead detector in place of the ranker's own
/// prediction. Costs one extra generator evaluation per incomplete candidate.
class LookaheadPolicy {
 public:
  LookaheadPolicy(const Scorer& generator, const Scorer& ranker,
                  std::pair<ModelInput, ModelInput> inputs, double alpha)
      : generator_(generator), ranker_(ranker), inputs_(std::move(inputs)), alpha_(alpha) {
    check_alpha(alpha);
  }

  void score(Hypothesis& h) {
    auto rt = ranker_.tokenizer().tokenize(h.surface);
    bool closed = h.finished;
    if (h.finished) {
      rt.push_back(ranker_.tokenizer().eos());
    } else {
      closed = lookahead_word_end(generator_, inputs_.first, h.gen_tokens);
      ++lookahead_calls_;
    }
    ++ranker_calls_;
    const auto rlp = ranker_.score_prefix(inputs_.second, rt);
    if (closed) {
      h.merged = merge_finished(h.gen_logprobs, rlp, alpha_);
    } else {
      h.merged = merge_unfinished(h.gen_logprobs, last_word_start(h.gen_tokens, generator_.tokenizer()),
                                  rlp, last_word_start(rt, ranker_.tokenizer()), alpha_);
    }
    h.score = h.merged.merged;
  }

  std::size_t ranker_calls() const { return ranker_calls_; }
  std::size_t extra_generator_calls() const { return lookahead_calls_; }

 private:
  const Scorer& generator_;
  const Scorer& ranker_;
  std::pair<ModelInput, ModelInput> inputs_;
  double alpha_;
  std::size_t ranker_calls_ = 0;
  std::size_t lookahead_calls_ = 0;
};

inline DecodeResult decode_lookahead(const Scorer& generator, const Scorer& ranker,
                                     const std::pair<ModelInput, ModelInput>& inputs,
                                     const EnsembleConfig& cfg) {
  LookaheadPolicy policy(generator, ranker, inputs, cfg.alpha);
  return beam_search(generator, inputs.first, cfg, policy);
}

struct WordEndAgreement {
  std::size_t agree = 0;
  std::size_t disagree = 0;
};

/// Online scoring that also asks the look-ahead detector about every
/// incomplete candidate and tallies agreement with the ranker's prediction.
class AgreementPolicy {
 public:
  AgreementPolicy(const Scorer& generator, const Scorer& ranker,
                  std::pair<ModelInput, ModelInput> inputs, double alpha)
      : online_(generator, ranker, inputs.second, alpha), generator_(generator), ranker_(ranker),
        inputs_(std::move(inputs)) {}

  void score(Hypothesis& h) {
    online_.score(h);
    if (h.finished) return;
    const auto rt = ranker_.tokenizer().tokenize(h.surface);
    const bool by_ranker = is_word_finished(ranker_, inputs_.second, rt);
    const bool by_lookahead = lookahead_word_end(generator_, inputs_.first, h.gen_tokens);
    ++(by_ranker == by_lookahead ? tally_.agree : tally_.disagree);
  }

  std::size_t ranker_calls() const { return online_.ranker_calls(); }
  std::size_t extra_generator_calls() const { return 0; }
  const WordEndAgreement& tally() const { return tally_; }

 private:
  OnlinePolicy online_;
  const Scorer& generator_;
  const Scorer& ranker_;
  std::pair<ModelInput, ModelInput> inputs_;
  WordEndAgreement tally_;
};

inline WordEndAgreement word_end_agreement(const Scorer& generator, const Scorer& ranker,
                                           const std::pair<ModelInput, ModelInput>& inputs,
                                           const EnsembleConfig& cfg) {
  AgreementPolicy policy(generator, ranker, inputs, cfg.alpha);
  beam_search(generator, inputs.first, cfg, policy);
  return policy.tally();
}

}  // namespace wordfuse::oracle
