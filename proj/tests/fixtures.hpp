#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "wordfuse/models.hpp"
#include "wordfuse/search.hpp"

namespace fixtures {

using namespace wordfuse;

inline std::filesystem::path data_path(const std::string& rel) {
  return std::filesystem::path(WORDFUSE_SOURCE_DIR) / "data" / rel;
}

inline std::filesystem::path source_path(const std::string& rel) {
  return std::filesystem::path(WORDFUSE_SOURCE_DIR) / rel;
}

inline std::shared_ptr<const VocabTokenizer> vocab(std::vector<std::string> texts) {
  return std::make_shared<const VocabTokenizer>(std::move(texts));
}

inline std::vector<Token> tokens(const VocabTokenizer& tok, const std::vector<std::string>& texts) {
  std::vector<Token> out;
  for (const auto& t : texts) out.push_back(tok.token(*tok.find(t)));
  return out;
}

/// The two-tokenizer "Decoding is awesome" fixture from data/awesome.
struct Awesome {
  std::shared_ptr<const VocabTokenizer> gen_vocab;
  std::shared_ptr<const VocabTokenizer> rank_vocab;
  std::shared_ptr<TableModel> generator;
  std::shared_ptr<TableModel> ranker;
  ModelInput gen_in{"sentence", Role::generator};
  ModelInput rank_in{"sentence", Role::ranker};

  Awesome() {
    gen_vocab = std::make_shared<const VocabTokenizer>(
        VocabTokenizer::from_file(data_path("awesome/generator.vocab")));
    rank_vocab = std::make_shared<const VocabTokenizer>(
        VocabTokenizer::from_file(data_path("awesome/ranker.vocab")));
    generator = TableModel::from_file(gen_vocab, data_path("awesome/generator.tsv"), "awesome-generator");
    ranker = TableModel::from_file(rank_vocab, data_path("awesome/ranker.tsv"), "awesome-ranker");
  }

  std::pair<ModelInput, ModelInput> inputs() const { return {gen_in, rank_in}; }
};

/// Both models give probability p to every token of "Decoding is awesome"
/// under their own tokenization; the rest of each row goes to a filler token.
struct UniformP {
  std::shared_ptr<const VocabTokenizer> gen_vocab;
  std::shared_ptr<const VocabTokenizer> rank_vocab;
  std::shared_ptr<TableModel> generator;
  std::shared_ptr<TableModel> ranker;

  explicit UniformP(double p) {
    gen_vocab = vocab({"<eos>", "Dec", "od", "ing", "_is", "_awe", "some", "_x", "x", "_a", "a", "w",
                       "e", "s", "o", "m"});
    rank_vocab = vocab({"<eos>", "Dec", "od", "ing", "_is", "_awes", "ome", "_x", "x", "_a", "a", "w",
                        "e", "s", "o", "m"});
    generator = build(gen_vocab, {"Dec", "od", "ing", "_is", "_awe", "some", "<eos>"}, p, "p-generator");
    ranker = build(rank_vocab, {"Dec", "od", "ing", "_is", "_awes", "ome", "<eos>"}, p, "p-ranker");
  }

 private:
  static std::shared_ptr<TableModel> build(std::shared_ptr<const VocabTokenizer> v,
                                           const std::vector<std::string>& path, double p,
                                           std::string id) {
    auto model = std::make_shared<TableModel>(v, std::move(id));
    const TokenId filler = *v->find("_x");
    std::vector<TokenId> prefix;
    for (const auto& text : path) {
      const TokenId next = *v->find(text);
      model->add_row("*", prefix, {{next, p}, {filler, 1.0 - p}});
      prefix.push_back(next);
    }
    return model;
  }
};

/// A random toy instance whose generator support is a sparse prefix tree:
/// at most `beams` terminated sequences and at most `topk` continuations per
/// node, so beam search with these settings never prunes a live prefix.
struct SparseInstance {
  std::shared_ptr<const VocabTokenizer> gen_vocab;
  std::shared_ptr<const VocabTokenizer> rank_vocab;
  std::shared_ptr<TableModel> generator;
  std::shared_ptr<Scorer> ranker;
  EnsembleConfig cfg;
  std::size_t leaves = 0;
  ModelInput gen_in{"x", Role::generator};
  ModelInput rank_in{"x", Role::ranker};

  std::pair<ModelInput, ModelInput> inputs() const { return {gen_in, rank_in}; }
};

inline std::vector<std::string> sample_tokens(std::mt19937_64& rng, std::vector<std::string> pool,
                                              std::size_t count) {
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  return pool;
}

inline SparseInstance make_sparse_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  SparseInstance inst;
  const bool two_letters = pick(0, 1) == 1;
  const std::size_t vg = pick(3, 5);
  std::vector<std::string> gen_texts{"<eos>"};
  std::vector<std::string> rank_texts{"<eos>"};
  if (two_letters) {
    for (auto& t : sample_tokens(rng, {"a", "b", "_a", "_b", "ab", "ba", "_ab", "aa", "_ba"}, vg - 1)) {
      gen_texts.push_back(t);
    }
    rank_texts.insert(rank_texts.end(), {"a", "b", "_a", "_b"});
  } else {
    for (auto& t : sample_tokens(rng, {"a", "_a", "aa", "_aa", "aaa"}, vg - 1)) gen_texts.push_back(t);
    rank_texts.insert(rank_texts.end(), {"a", "_a"});
    for (auto& t : sample_tokens(rng, {"aa", "_aa", "aaa", "_aaa"}, pick(0, 2))) rank_texts.push_back(t);
  }
  inst.gen_vocab = vocab(gen_texts);
  inst.rank_vocab = vocab(rank_texts);

  const std::size_t max_len = pick(2, 6);
  inst.cfg.topk = pick(2, vg);
  inst.cfg.beams = inst.cfg.topk * vg;  // b = V * topk
  inst.cfg.max_len = max_len;
  inst.cfg.alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (pick(0, 9) == 0) inst.cfg.alpha = pick(0, 1);

  // Terminated sequences as token-id paths; eos is appended implicitly.
  std::map<std::vector<TokenId>, std::set<TokenId>> children;
  const auto fits = [&](const std::vector<TokenId>& body) {
    std::vector<TokenId> prefix;
    for (std::size_t i = 0; i <= body.size(); ++i) {
      const TokenId next = i < body.size() ? body[i] : 0;
      std::set<TokenId> kids;
      if (const auto it = children.find(prefix); it != children.end()) kids = it->second;
      kids.insert(next);
      if (kids.size() > inst.cfg.topk) return false;
      if (i < body.size()) prefix.push_back(body[i]);
    }
    return true;
  };
  const std::size_t target = pick(1, inst.cfg.beams);
  for (std::size_t attempt = 0; attempt < 200 && inst.leaves < target; ++attempt) {
    std::vector<TokenId> body(pick(0, max_len - 1));
    for (auto& id : body) id = static_cast<TokenId>(pick(1, vg - 1));
    if (const auto it = children.find(body); it != children.end() && it->second.count(0)) continue;
    if (!fits(body)) continue;
    std::vector<TokenId> prefix;
    for (std::size_t i = 0; i <= body.size(); ++i) {
      children[prefix].insert(i < body.size() ? body[i] : 0);
      if (i < body.size()) prefix.push_back(body[i]);
    }
    ++inst.leaves;
  }

  inst.generator = std::make_shared<TableModel>(inst.gen_vocab, "sparse-" + std::to_string(seed));
  for (const auto& [prefix, kids] : children) {
    std::vector<std::pair<TokenId, double>> row;
    double rest = 1.0;
    std::size_t i = 0;
    for (TokenId id : kids) {
      double p = rest;
      if (++i < kids.size()) {
        p = rest * std::uniform_real_distribution<double>(0.2, 0.8)(rng);
        rest -= p;
      }
      row.emplace_back(id, p);
    }
    inst.generator->add_row("*", prefix, row);
  }
  inst.ranker = std::make_shared<RandomModel>(inst.rank_vocab, seed * 7919 + 1,
                                              std::uniform_real_distribution<double>(1.0, 4.0)(rng));
  return inst;
}

/// A dense random pair with different vocabularies over the same alphabet.
struct DensePair {
  std::shared_ptr<const VocabTokenizer> gen_vocab;
  std::shared_ptr<const VocabTokenizer> rank_vocab;
  std::shared_ptr<Scorer> generator;
  std::shared_ptr<Scorer> ranker;
};

inline DensePair make_dense_pair(std::uint64_t seed, double eos_bias = 0.0) {
  DensePair p;
  p.gen_vocab = vocab({"<eos>", "a", "b", "c", "_a", "_b", "_c", "ab", "_ca", "bc"});
  p.rank_vocab = vocab({"<eos>", "a", "b", "c", "_a", "_b", "_c", "ca", "_ab", "cb", "_bc"});
  p.generator = std::make_shared<RandomModel>(p.gen_vocab, seed, 3.0, eos_bias, "dense-g");
  p.ranker = std::make_shared<RandomModel>(p.rank_vocab, seed + 1000, 3.0, eos_bias, "dense-r");
  return p;
}

/// Field-by-field bitwise comparison of two decodes.
inline bool same_hypotheses(const DecodeResult& a, const DecodeResult& b, std::string* why = nullptr) {
  auto fail = [&](std::string msg) {
    if (why) *why = std::move(msg);
    return false;
  };
  if (a.complete != b.complete) return fail("complete flag differs");
  if (a.hypotheses.size() != b.hypotheses.size()) return fail("different hypothesis counts");
  for (std::size_t i = 0; i < a.hypotheses.size(); ++i) {
    const auto& x = a.hypotheses[i];
    const auto& y = b.hypotheses[i];
    if (x.surface != y.surface) return fail("surface " + x.surface + " vs " + y.surface);
    if (ids_of(x.gen_tokens) != ids_of(y.gen_tokens)) return fail("tokens differ at rank " + std::to_string(i));
    if (x.gen_logprobs != y.gen_logprobs) return fail("logprobs differ at rank " + std::to_string(i));
    if (x.score != y.score) return fail("score differs at rank " + std::to_string(i));
    if (x.finished != y.finished) return fail("finished flag differs");
  }
  return true;
}

}  // namespace fixtures
