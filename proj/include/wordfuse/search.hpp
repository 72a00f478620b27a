#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wordfuse/merge.hpp"
#include "wordfuse/nbest.hpp"
#include "wordfuse/scoring.hpp"

namespace wordfuse {

enum class Mode { online, offline, generator_only, joint };

inline std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::online: return "online";
    case Mode::offline: return "offline";
    case Mode::generator_only: return "generator_only";
    case Mode::joint: return "joint";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "online") return Mode::online;
  if (s == "offline") return Mode::offline;
  if (s == "generator_only") return Mode::generator_only;
  if (s == "joint") return Mode::joint;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

/// How extensions outside each beam's topk are handled. `mask` scores them
/// -inf and lets them compete; `discard` never materializes them. Both must
/// select the same beams.
enum class Pruning { discard, mask };

struct EnsembleConfig {
  double alpha = 0.5;
  std::size_t topk = 5;
  std::size_t beams = 5;
  std::size_t max_len = 256;
  Mode mode = Mode::online;
  Pruning pruning = Pruning::discard;
  bool trace = false;

  void validate(std::size_t generator_vocab) const {
    check_alpha(alpha);
    if (beams == 0) throw ConfigError("beams must be at least 1");
    if (topk == 0) throw ConfigError("topk must be at least 1");
    if (topk > generator_vocab) {
      throw ConfigError("topk " + std::to_string(topk) + " exceeds the generator vocabulary (" +
                        std::to_string(generator_vocab) + ")");
    }
    if (max_len == 0) throw ConfigError("max_len must be at least 1");
  }
};

struct Hypothesis {
  std::string surface;
  std::vector<Token> gen_tokens;
  std::vector<double> gen_logprobs;
  double gen_sum = 0.0;  // accumulated left to right
  MergeBreakdown merged;
  double score = 0.0;
  bool finished = false;  // ends in generator eos

  double gen_score() const {
    return gen_tokens.empty() ? 0.0 : gen_sum / static_cast<double>(gen_tokens.size());
  }
};

/// Model evaluations of one decode. `beam_steps` counts (step, live beam)
/// pairs; each costs exactly one generator evaluation in every mode except
/// look-ahead, which adds one per scored candidate.
struct CallCounts {
  std::size_t generator = 0;
  std::size_t ranker = 0;
  std::size_t steps = 0;
  std::size_t beam_steps = 0;
  std::size_t candidates = 0;  // extensions that were scored
  std::size_t masked = 0;      // extensions scored -inf without evaluation
};

struct TraceEvent {
  std::size_t step = 0;
  std::size_t beam = 0;
  Token token;
  double gen_logprob = 0.0;
  std::string surface;
  std::optional<MergeBreakdown> breakdown;
  double score = 0.0;
  bool masked = false;
  bool selected = false;
  bool finished = false;
};

struct DecodeResult {
  /// Completed hypotheses by score, or the best live beams when no
  /// hypothesis completed within max_len (then `complete` is false).
  std::vector<Hypothesis> hypotheses;
  bool complete = true;
  CallCounts calls;
  std::vector<TraceEvent> trace;
  std::string origin;

  std::vector<NBestEntry> nbest() const {
    std::vector<NBestEntry> out;
    out.reserve(hypotheses.size());
    for (const auto& h : hypotheses) {
      NBestEntry e;
      e.surface = h.surface;
      e.tokens = h.gen_tokens;
      e.gen_score = h.gen_score();
      if (!std::isnan(h.merged.full_r)) e.ranker_score = h.merged.full_r;
      e.merged = h.score;
      e.origin = origin;
      out.push_back(std::move(e));
    }
    return out;
  }
};

/// Final ranking: score descending, then generator token ids ascending.
inline bool hypothesis_order(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::lexicographical_compare(
      a.gen_tokens.begin(), a.gen_tokens.end(), b.gen_tokens.begin(), b.gen_tokens.end(),
      [](const Token& x, const Token& y) { return x.id < y.id; });
}

/// Candidate scoring for the beam engine. A policy sets `score` (and
/// optionally `merged`) on each extension and reports how many ranker
/// evaluations it spent.
template <class P>
concept SearchPolicy = requires(P p, Hypothesis& h) {
  p.score(h);
  { p.ranker_calls() } -> std::convertible_to<std::size_t>;
  { p.extra_generator_calls() } -> std::convertible_to<std::size_t>;
};

/// Length-normalized beam search over generator extensions.
///
/// Each step the generator proposes the top `topk` extensions of every live
/// beam. Extensions are ranked by policy score, ties broken by token id and
/// then by beam index, and the best `beams` survive. Survivors ending in eos
/// move to the completed pool; the search stops once the pool holds `beams`
/// hypotheses, no beam is live, or beams reach `max_len` tokens.
template <SearchPolicy Policy>
DecodeResult beam_search(const Scorer& generator, const ModelInput& input,
                         const EnsembleConfig& cfg, Policy& policy) {
  const Tokenizer& tok = generator.tokenizer();
  cfg.validate(tok.vocab_size());

  struct Candidate {
    Hypothesis hyp;
    std::size_t beam;
    bool masked;
  };

  DecodeResult result;
  result.origin = generator.identity();
  std::vector<Hypothesis> live(1);
  std::vector<Hypothesis> pool;
  const std::size_t request = cfg.pruning == Pruning::mask ? tok.vocab_size() : cfg.topk;

  for (std::size_t step = 0; step < cfg.max_len && !live.empty(); ++step) {
    ++result.calls.steps;
    std::vector<Candidate> candidates;
    for (std::size_t bi = 0; bi < live.size(); ++bi) {
      const Hypothesis& beam = live[bi];
      const auto dist = generator.next_distribution(input, beam.gen_tokens, request);
      ++result.calls.generator;
      ++result.calls.beam_steps;
      for (std::size_t rank = 0; rank < dist.entries.size(); ++rank) {
        const auto& [token, logprob] = dist.entries[rank];
        Candidate c{beam, bi, rank >= cfg.topk};
        Hypothesis& h = c.hyp;
        h.gen_tokens.push_back(token);
        h.gen_logprobs.push_back(logprob);
        h.gen_sum += logprob;
        h.finished = tok.is_eos(token);
        h.merged = MergeBreakdown{};
        if (c.masked) {
          h.score = kNegInf;
          ++result.calls.masked;
        } else {
          h.surface = tok.detokenize(h.gen_tokens);
          policy.score(h);
          ++result.calls.candidates;
        }
        candidates.push_back(std::move(c));
      }
    }

    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) {
                       if (a.hyp.score != b.hyp.score) return a.hyp.score > b.hyp.score;
                       if (a.hyp.gen_tokens.back().id != b.hyp.gen_tokens.back().id) {
                         return a.hyp.gen_tokens.back().id < b.hyp.gen_tokens.back().id;
                       }
                       return a.beam < b.beam;
                     });

    // -inf (masked or impossible) extensions never survive.
    std::size_t survivors = 0;
    while (survivors < candidates.size() && survivors < cfg.beams &&
           std::isfinite(candidates[survivors].hyp.score)) {
      ++survivors;
    }

    if (cfg.trace) {
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& c = candidates[i];
        TraceEvent ev;
        ev.step = step;
        ev.beam = c.beam;
        ev.token = c.hyp.gen_tokens.back();
        ev.gen_logprob = c.hyp.gen_logprobs.back();
        ev.surface = c.hyp.surface;
        if (!std::isnan(c.hyp.merged.merged)) ev.breakdown = c.hyp.merged;
        ev.score = c.hyp.score;
        ev.masked = c.masked;
        ev.selected = i < survivors;
        ev.finished = c.hyp.finished;
        result.trace.push_back(std::move(ev));
      }
    }

    live.clear();
    for (std::size_t i = 0; i < survivors; ++i) {
      auto& h = candidates[i].hyp;
      (h.finished ? pool : live).push_back(std::move(h));
    }
    if (pool.size() >= cfg.beams) break;
  }

  result.calls.ranker = policy.ranker_calls();
  result.calls.generator += policy.extra_generator_calls();
  if (pool.empty()) {
    result.complete = false;
    pool = std::move(live);
  }
  std::sort(pool.begin(), pool.end(), hypothesis_order);
  if (pool.size() > cfg.beams) pool.resize(cfg.beams);
  result.hypotheses = std::move(pool);
  return result;
}

/// Generator score alone: length-normalized log-probability.
class GeneratorOnlyPolicy {
 public:
  void score(Hypothesis& h) const { h.score = h.gen_score(); }
  std::size_t ranker_calls() const { return 0; }
  std::size_t extra_generator_calls() const { return 0; }
};

/// Word-level online re-ranking: every admitted extension is merge-scored.
class OnlinePolicy {
 public:
  OnlinePolicy(const Scorer& generator, const Scorer& ranker, const ModelInput& ranker_input,
               double alpha)
      : session_(generator, ranker, ranker_input, alpha) {}

  void score(Hypothesis& h) {
    h.merged = session_.score(h.gen_tokens, h.gen_logprobs, h.surface);
    h.score = h.merged.merged;
  }
  std::size_t ranker_calls() const { return session_.ranker_calls(); }
  std::size_t extra_generator_calls() const { return 0; }
  MergeSession& session() { return session_; }

 private:
  MergeSession session_;
};

inline DecodeResult decode_generator_only(const Scorer& generator, const ModelInput& input,
                                          const EnsembleConfig& cfg) {
  GeneratorOnlyPolicy policy;
  return beam_search(generator, input, cfg, policy);
}

inline DecodeResult decode_online(const Scorer& generator, const Scorer& ranker,
                                  const std::pair<ModelInput, ModelInput>& inputs,
                                  const EnsembleConfig& cfg) {
  OnlinePolicy policy(generator, ranker, inputs.second, cfg.alpha);
  return beam_search(generator, inputs.first, cfg, policy);
}

}  // namespace wordfuse
