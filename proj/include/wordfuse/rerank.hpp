#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "wordfuse/merge.hpp"
#include "wordfuse/nbest.hpp"
#include "wordfuse/scoring.hpp"

namespace wordfuse {

/// Length-normalized log-probability of a complete sentence under `model`,
/// using the model's own tokenization followed by its eos.
inline double sequence_score(const Scorer& model, const ModelInput& input,
                             const std::string& surface) {
  auto tokens = model.tokenizer().tokenize(surface);
  tokens.push_back(model.tokenizer().eos());
  return mean_logprob(model.score_prefix(input, tokens));
}

namespace detail {

inline void sort_entries(std::vector<NBestEntry>& entries) {
  // Unscored entries sink to the bottom; the rest keep their relative order
  // on equal merged scores.
  std::stable_sort(entries.begin(), entries.end(), [](const NBestEntry& a, const NBestEntry& b) {
    if (a.scored != b.scored) return a.scored;
    return a.merged > b.merged;
  });
}

}  // namespace detail

/// Offline N-best re-ranking: each entry gains a ranker score and the list is
/// re-sorted by alpha * gen_score + (1 - alpha) * ranker_score. Entries the
/// ranker fails on are marked unscored and moved to the bottom.
inline std::vector<NBestEntry> rerank_nbest(std::vector<NBestEntry> entries, const Scorer& ranker,
                                            const ModelInput& input, double alpha) {
  check_alpha(alpha);
  for (auto& e : entries) {
    try {
      e.ranker_score = sequence_score(ranker, input, e.surface);
      e.merged = mix(alpha, e.gen_score, *e.ranker_score);
      e.scored = true;
    } catch (const Error&) {
      e.ranker_score.reset();
      e.merged = kNegInf;
      e.scored = false;
    }
  }
  detail::sort_entries(entries);
  return entries;
}

/// Joint re-ranking of N-best lists from several generators. Every entry is
/// scored by every model: the model named by the entry's origin contributes
/// the entry's own gen_score, the others score the surface from scratch.
/// Model 0 is weighted by alpha, the others share 1 - alpha equally, so
/// gen_score holds model 0's score and ranker_score the mean of the rest.
/// Duplicate surfaces keep their best-scored instance.
inline std::vector<NBestEntry> joint_rerank(const std::vector<std::vector<NBestEntry>>& lists,
                                            std::span<const Scorer* const> models,
                                            std::span<const ModelInput> inputs, double alpha) {
  check_alpha(alpha);
  if (lists.size() < 2) throw Error("joint re-ranking needs at least two lists");
  if (models.size() < 2 || inputs.size() != models.size()) {
    throw Error("joint re-ranking needs one input per model and at least two models");
  }

  std::vector<NBestEntry> merged;
  for (const auto& list : lists) {
    for (NBestEntry e : list) {
      std::vector<double> scores(models.size());
      try {
        for (std::size_t i = 0; i < models.size(); ++i) {
          scores[i] = models[i]->identity() == e.origin
                          ? e.gen_score
                          : sequence_score(*models[i], inputs[i], e.surface);
        }
        double rest = 0.0;
        for (std::size_t i = 1; i < scores.size(); ++i) rest += scores[i];
        rest /= static_cast<double>(scores.size() - 1);
        e.gen_score = scores[0];
        e.ranker_score = rest;
        e.merged = mix(alpha, scores[0], rest);
        e.scored = true;
      } catch (const Error&) {
        e.ranker_score.reset();
        e.merged = kNegInf;
        e.scored = false;
      }
      merged.push_back(std::move(e));
    }
  }

  detail::sort_entries(merged);
  std::vector<NBestEntry> unique;
  std::unordered_map<std::string, bool> seen;
  for (auto& e : merged) {
    if (seen.emplace(e.surface, true).second) unique.push_back(std::move(e));
  }
  return unique;
}

/// Best-of-N scorer, e.g. a quality-estimation model. Higher is better.
class Selector {
 public:
  virtual ~Selector() = default;
  virtual std::string identity() const = 0;
  virtual std::vector<double> select(const std::string& payload,
                                     std::span<const std::string> surfaces) const = 0;
};

/// Length-normalized sentence score under a model.
class ScorerSelector final : public Selector {
 public:
  explicit ScorerSelector(const Scorer& model) : model_(model) {}

  std::string identity() const override { return "score:" + model_.identity(); }

  std::vector<double> select(const std::string& payload,
                             std::span<const std::string> surfaces) const override {
    const ModelInput input{payload, Role::ranker};
    std::vector<double> out;
    out.reserve(surfaces.size());
    for (const auto& s : surfaces) out.push_back(sequence_score(model_, input, s));
    return out;
  }

 private:
  const Scorer& model_;
};

/// Rewards hypotheses that contain a given word.
class MarkerWordSelector final : public Selector {
 public:
  explicit MarkerWordSelector(std::string word, double bonus = 1.0)
      : word_(std::move(word)), bonus_(bonus) {}

  std::string identity() const override { return "marker:" + word_; }

  std::vector<double> select(const std::string&,
                             std::span<const std::string> surfaces) const override {
    std::vector<double> out;
    out.reserve(surfaces.size());
    for (const auto& s : surfaces) {
      const auto words = unicode::split_words(s);
      const bool hit = std::find(words.begin(), words.end(), word_) != words.end();
      out.push_back(hit ? bonus_ : 0.0);
    }
    return out;
  }

 private:
  std::string word_;
  double bonus_;
};

struct Selection {
  std::vector<NBestEntry> entries;  // input order, annotated with selector scores
  std::size_t best = 0;
  bool fallback = false;  // selector unavailable, best is the merged-score argmax
  std::string warning;
};

/// Picks the entry with the highest selector score (first on ties). Without
/// a working selector the merged-score argmax is returned, flagged.
inline Selection select_best(std::vector<NBestEntry> entries, const Selector* selector,
                             const std::string& payload) {
  if (entries.empty()) throw Error("select_best needs at least one entry");
  Selection out;
  const auto argmax = [&](auto key) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < entries.size(); ++i) {
      if (key(entries[i]) > key(entries[best])) best = i;
    }
    return best;
  };
  try {
    if (!selector) throw SelectorUnavailable("no selector configured");
    std::vector<std::string> surfaces;
    for (const auto& e : entries) surfaces.push_back(e.surface);
    const auto scores = selector->select(payload, surfaces);
    if (scores.size() != entries.size()) {
      throw SelectorUnavailable("selector returned " + std::to_string(scores.size()) +
                                " scores for " + std::to_string(entries.size()) + " entries");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].selector_score = scores[i];
    out.best = argmax([](const NBestEntry& e) { return *e.selector_score; });
  } catch (const Error& e) {
    out.fallback = true;
    out.warning = e.what();
    for (auto& entry : entries) entry.selector_score.reset();
    out.best = argmax([](const NBestEntry& e) { return e.merged; });
  }
  out.entries = std::move(entries);
  return out;
}

}  // namespace wordfuse
