#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "wordfuse/scoring.hpp"

namespace wordfuse {

enum class Branch { finished, unfinished };

inline std::string_view to_string(Branch b) {
  return b == Branch::finished ? "finished" : "unfinished";
}

/// Every intermediate of one merged-score computation. Fields that the branch
/// does not compute are NaN.
struct MergeBreakdown {
  static constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();

  Branch branch = Branch::finished;
  double alpha = kUnset;
  std::size_t n = 0;  // generator tokens
  std::size_t m = 0;  // ranker tokens
  std::size_t j = 0;  // generator tokens before the last word
  std::size_t k = 0;  // ranker tokens before the last word
  double full_g = kUnset;
  double full_r = kUnset;
  double prev_g = kUnset;
  double prev_r = kUnset;
  double prev_gr = kUnset;
  double last_g = kUnset;
  double merged = kUnset;
};

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw AlphaOutOfRange(alpha);
}

/// alpha * g + (1 - alpha) * r. A model with zero weight contributes nothing,
/// not even a -inf.
inline double mix(double alpha, double g, double r) {
  if (alpha == 1.0) return g;
  if (alpha == 0.0) return r;
  return alpha * g + (1.0 - alpha) * r;
}

/// The whole candidate is scored by both models and the length-normalized
/// scores are mixed.
inline MergeBreakdown merge_finished(std::span<const double> gen_logprobs,
                                     std::span<const double> ranker_logprobs, double alpha) {
  check_alpha(alpha);
  MergeBreakdown b;
  b.branch = Branch::finished;
  b.alpha = alpha;
  b.n = gen_logprobs.size();
  b.m = ranker_logprobs.size();
  b.full_g = mean_logprob(gen_logprobs);
  b.full_r = mean_logprob(ranker_logprobs);
  b.merged = mix(alpha, b.full_g, b.full_r);
  return b;
}

/// The last word is still open: only the completed words are mixed, the last
/// word keeps the generator's score, and the result is re-normalized by the
/// generator length: (prev_gr * j + last_g) / n. With j == 0 there are no
/// completed words and the score is last_g / n.
inline MergeBreakdown merge_unfinished(std::span<const double> gen_logprobs, std::size_t j,
                                       std::span<const double> ranker_logprobs, std::size_t k,
                                       double alpha) {
  check_alpha(alpha);
  if (j > gen_logprobs.size() || k > ranker_logprobs.size()) {
    throw Error("word split lies outside the token sequence");
  }
  if ((j == 0) != (k == 0)) {
    throw TokenizationDisagreement("generator and ranker disagree on the completed words (j=" +
                                   std::to_string(j) + ", k=" + std::to_string(k) + ")");
  }
  MergeBreakdown b;
  b.branch = Branch::unfinished;
  b.alpha = alpha;
  b.n = gen_logprobs.size();
  b.m = ranker_logprobs.size();
  b.j = j;
  b.k = k;
  b.last_g = sum_logprobs(gen_logprobs.subspan(j));
  const double total_g = sum_logprobs(gen_logprobs);
  const double n = static_cast<double>(b.n);
  if (j == 0) {
    b.merged = total_g / n;
    return b;
  }
  const double prev_sum_g = sum_logprobs(gen_logprobs.first(j));
  b.prev_g = prev_sum_g / static_cast<double>(j);
  b.prev_r = mean_logprob(ranker_logprobs.first(k));
  b.prev_gr = mix(alpha, b.prev_g, b.prev_r);
  // Same value as (prev_gr * j + last_g) / n, accumulated from the full
  // generator sum so that alpha == 1 reproduces total_g / n exactly.
  const double shift =
      alpha == 1.0 ? 0.0 : (1.0 - alpha) * (b.prev_r * static_cast<double>(j) - prev_sum_g);
  b.merged = (total_g + shift) / n;
  return b;
}

/// Word-end detection: the ranker predicts the token after its own
/// tokenization of the candidate; a word-initial token or eos closes the word.
/// Argmax ties resolve to the lowest token id.
inline bool is_word_finished(const Scorer& ranker, const ModelInput& input,
                             std::span<const Token> ranker_tokens) {
  const auto next = ranker.next_distribution(input, ranker_tokens, 1);
  return !next.empty() && ranker.tokenizer().starts_new_word(next.top().token);
}

/// The ranker's view of one candidate surface.
struct RankerView {
  std::vector<Token> tokens;  // includes a trailing eos when scored as complete
  std::vector<double> logprobs;
  std::optional<Token> next_top;  // argmax continuation, unset for complete views
};

/// Scores candidates of one decode. Ranker evaluations are cached by surface
/// for the lifetime of the session; the payload is fixed per session.
class MergeSession {
 public:
  using Observer = std::function<void(std::string_view surface, const MergeBreakdown&)>;

  MergeSession(const Scorer& generator, const Scorer& ranker, ModelInput ranker_input,
               double alpha)
      : generator_(generator), ranker_(ranker), input_(std::move(ranker_input)), alpha_(alpha) {
    check_alpha(alpha);
  }

  void set_observer(Observer observer) { observer_ = std::move(observer); }

  /// `gen_tokens` is the candidate as generated (possibly ending in eos) and
  /// `surface` its detokenization.
  MergeBreakdown score(std::span<const Token> gen_tokens, std::span<const double> gen_logprobs,
                       const std::string& surface) {
    if (gen_tokens.empty() || gen_tokens.size() != gen_logprobs.size()) {
      throw Error("candidate needs one logprob per generator token");
    }
    const bool complete = generator_.tokenizer().is_eos(gen_tokens.back());
    const RankerView& view = ranker_view(surface, complete);

    MergeBreakdown b;
    if (complete || word_closed(view)) {
      b = merge_finished(gen_logprobs, view.logprobs, alpha_);
    } else {
      const auto j = last_word_start(gen_tokens, generator_.tokenizer());
      const auto k = last_word_start(view.tokens, ranker_.tokenizer());
      b = merge_unfinished(gen_logprobs, j, view.logprobs, k, alpha_);
    }
    if (observer_) observer_(surface, b);
    return b;
  }

  /// Ranker tokens and logprobs for `surface`, with an eos appended when
  /// `complete`. Incomplete views also carry the ranker's argmax
  /// continuation, obtained in the same evaluation.
  const RankerView& ranker_view(const std::string& surface, bool complete) {
    auto key = complete ? surface + std::string(kCompleteSuffix) : surface;
    if (const auto it = cache_.find(key); it != cache_.end()) {
      ++cache_hits_;
      return it->second;
    }
    RankerView view;
    view.tokens = ranker_.tokenizer().tokenize(surface);
    if (const auto back = ranker_.tokenizer().detokenize(view.tokens); back != surface) {
      throw TokenizationDisagreement("ranker reads '" + back + "' for candidate '" + surface + "'");
    }
    ++ranker_calls_;
    if (complete) {
      view.tokens.push_back(ranker_.tokenizer().eos());
      view.logprobs = ranker_.score_prefix(input_, view.tokens);
    } else {
      if (view.tokens.empty()) throw Error("cannot score an empty incomplete candidate");
      auto ev = ranker_.advance(input_, view.tokens, 1);
      view.logprobs = std::move(ev.logprobs);
      if (!ev.next.empty()) view.next_top = ev.next.top().token;
    }
    return cache_.emplace(std::move(key), std::move(view)).first->second;
  }

  double alpha() const { return alpha_; }
  std::size_t ranker_calls() const { return ranker_calls_; }
  std::size_t cache_hits() const { return cache_hits_; }

 private:
  static constexpr std::string_view kCompleteSuffix = "\n<eos>";

  bool word_closed(const RankerView& view) const {
    return view.next_top && ranker_.tokenizer().starts_new_word(*view.next_top);
  }

  const Scorer& generator_;
  const Scorer& ranker_;
  ModelInput input_;
  double alpha_;
  Observer observer_;
  std::unordered_map<std::string, RankerView> cache_;
  std::size_t ranker_calls_ = 0;
  std::size_t cache_hits_ = 0;
};

/// Merged score of a surface string, tokenized by each model. With
/// `complete` the generator's eos is appended and the finished branch applies.
inline MergeBreakdown merge_score(const std::string& candidate_surface, const Scorer& generator,
                                  const Scorer& ranker,
                                  const std::pair<ModelInput, ModelInput>& inputs, double alpha,
                                  bool complete = false) {
  check_alpha(alpha);
  auto gen_tokens = generator.tokenizer().tokenize(candidate_surface);
  if (complete) gen_tokens.push_back(generator.tokenizer().eos());
  if (gen_tokens.empty()) throw Error("merge_score needs a non-empty candidate");
  const auto gen_logprobs = generator.score_prefix(inputs.first, gen_tokens);
  const auto surface = generator.tokenizer().detokenize(gen_tokens);
  MergeSession session(generator, ranker, inputs.second, alpha);
  return session.score(gen_tokens, gen_logprobs, surface);
}

}  // namespace wordfuse
