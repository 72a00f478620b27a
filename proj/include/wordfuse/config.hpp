#pragma once

// Run configuration: a JSON document naming the models and search settings.
//
//   {
//     "preset": "presets/unimodal.json",          optional, merged underneath
//     "generator": {"type": "table", "vocab": "g.vocab", "table": "g.tsv"},
//     "ranker":    {"type": "ngram", "vocab": "r.vocab", "corpus": "r.txt", "order": 3},
//     "selector":  {"type": "marker", "word": "awesome"},
//     "search": {"mode": "online", "alpha": 0.5, "topk": 5, "beams": 5,
//                "max_len": 256, "nbest": 5, "pruning": "discard"},
//     "trace": false,
//     "workers": 1
//   }
//
// Model types: table (vocab, table), ngram (vocab, corpus, order, lambda),
// random (vocab, seed, scale, eos_bias) and remote (endpoint, timeout_ms).
// Selector types: marker (word, bonus), scorer (model: generator|ranker) and
// remote (endpoint). Relative paths resolve against the file that names them.
// WORDFUSE_GENERATOR, WORDFUSE_RANKER and WORDFUSE_SELECTOR replace the
// corresponding section with {"type": "remote", "endpoint": <value>}.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>

#include "wordfuse/json_util.hpp"
#include "wordfuse/models.hpp"
#include "wordfuse/protocol.hpp"
#include "wordfuse/rerank.hpp"
#include "wordfuse/search.hpp"

namespace wordfuse {

struct RunConfig {
  json generator;
  json ranker;
  json selector;
  EnsembleConfig search;
  std::size_t nbest = 5;
  std::size_t workers = 1;
  std::filesystem::path base_dir = ".";
};

namespace detail {

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
}

// Rewrites relative file paths in a model section so they no longer depend
// on where the section came from.
inline void anchor_paths(json& section, const std::filesystem::path& dir) {
  if (!section.is_object()) return;
  for (const char* key : {"vocab", "table", "corpus"}) {
    if (section.contains(key) && section[key].is_string()) {
      std::filesystem::path p = section[key].get<std::string>();
      if (p.is_relative()) section[key] = (dir / p).lexically_normal().string();
    }
  }
}

inline json load_layered(const std::filesystem::path& path, int depth = 0) {
  if (depth > 8) throw ConfigError("preset chain too deep at " + path.string());
  json doc = read_json_file(path);
  if (!doc.is_object()) throw ConfigError(path.string() + " must contain a JSON object");
  const auto dir = path.parent_path();
  for (const char* section : {"generator", "ranker", "selector"}) {
    if (doc.contains(section)) anchor_paths(doc[section], dir);
  }
  if (doc.contains("preset")) {
    std::filesystem::path preset = doc["preset"].get<std::string>();
    if (preset.is_relative()) preset = dir / preset;
    json base = load_layered(preset, depth + 1);
    doc.erase("preset");
    base.merge_patch(doc);
    return base;
  }
  return doc;
}

template <class T>
T field(const json& section, const char* key, T fallback, const char* where) {
  if (!section.contains(key)) return fallback;
  try {
    return section[key].get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(where) + "." + key + " has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_config(const json& doc, const std::filesystem::path& base_dir = ".") {
  RunConfig cfg;
  cfg.base_dir = base_dir;
  cfg.generator = doc.value("generator", json());
  cfg.ranker = doc.value("ranker", json());
  cfg.selector = doc.value("selector", json());
  const json search = doc.value("search", json::object());
  if (!search.is_object()) throw ConfigError("search must be an object");
  auto& s = cfg.search;
  s.alpha = detail::field(search, "alpha", s.alpha, "search");
  s.topk = detail::field(search, "topk", s.topk, "search");
  s.beams = detail::field(search, "beams", s.beams, "search");
  s.max_len = detail::field(search, "max_len", s.max_len, "search");
  s.mode = parse_mode(detail::field(search, "mode", std::string(to_string(s.mode)), "search"));
  const auto pruning = detail::field(search, "pruning", std::string("discard"), "search");
  if (pruning == "discard") {
    s.pruning = Pruning::discard;
  } else if (pruning == "mask") {
    s.pruning = Pruning::mask;
  } else {
    throw ConfigError("search.pruning must be 'discard' or 'mask'");
  }
  s.trace = detail::field(doc, "trace", false, "config");
  cfg.nbest = detail::field(search, "nbest", s.beams, "search");
  cfg.workers = detail::field(doc, "workers", std::size_t{1}, "config");
  if (!(s.alpha >= 0.0 && s.alpha <= 1.0)) throw ConfigError("search.alpha must lie in [0, 1]");
  if (s.beams == 0 || s.topk == 0 || s.max_len == 0 || cfg.nbest == 0) {
    throw ConfigError("beams, topk, max_len and nbest must be positive");
  }
  if (cfg.workers == 0) cfg.workers = 1;

  for (auto [name, var] : {std::pair{"generator", "WORDFUSE_GENERATOR"},
                           std::pair{"ranker", "WORDFUSE_RANKER"},
                           std::pair{"selector", "WORDFUSE_SELECTOR"}}) {
    if (const char* endpoint = std::getenv(var); endpoint && *endpoint) {
      json remote = {{"type", "remote"}, {"endpoint", endpoint}};
      (std::string(name) == "generator" ? cfg.generator
       : std::string(name) == "ranker"  ? cfg.ranker
                                        : cfg.selector) = remote;
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  const auto doc = detail::load_layered(path);
  return parse_config(doc, path.parent_path());
}

/// Keeps a built model and whatever it depends on alive together.
struct LoadedModel {
  std::shared_ptr<const Scorer> scorer;
  std::shared_ptr<const VocabTokenizer> vocab;  // null for remote models
};

inline LoadedModel load_model(const json& section, const std::string& name) {
  if (!section.is_object()) throw ConfigError("no " + name + " model configured");
  const auto type = detail::field(section, "type", std::string(), name.c_str());
  const auto identity = detail::field(section, "identity", std::string(), name.c_str());
  const auto path_of = [&](const char* key) {
    if (!section.contains(key)) throw ConfigError(name + "." + key + " is required");
    return std::filesystem::path(section[key].get<std::string>());
  };

  LoadedModel out;
  try {
    if (type == "remote") {
      auto endpoint = protocol::Endpoint::parse(
          detail::field(section, "endpoint", std::string(), name.c_str()));
      endpoint.timeout = std::chrono::milliseconds(
          detail::field(section, "timeout_ms", std::int64_t{protocol::kDefaultTimeout.count()},
                        name.c_str()));
      out.scorer = std::make_shared<protocol::RemoteScorer>(protocol::connect(endpoint));
      return out;
    }
    out.vocab = std::make_shared<const VocabTokenizer>(VocabTokenizer::from_file(
        path_of("vocab"), detail::field(section, "marker", std::string(kDefaultMarker), name.c_str())));
    if (type == "table") {
      out.scorer = TableModel::from_file(out.vocab, path_of("table"), identity);
    } else if (type == "ngram") {
      out.scorer = NgramModel::from_file(out.vocab, path_of("corpus"),
                                         detail::field(section, "order", std::size_t{3}, name.c_str()),
                                         detail::field(section, "lambda", 0.7, name.c_str()), identity);
    } else if (type == "random") {
      out.scorer = std::make_shared<RandomModel>(
          out.vocab, detail::field(section, "seed", std::uint64_t{0}, name.c_str()),
          detail::field(section, "scale", 3.0, name.c_str()),
          detail::field(section, "eos_bias", 0.0, name.c_str()), identity);
    } else {
      throw ConfigError(name + ".type '" + type + "' is not one of table, ngram, random, remote");
    }
  } catch (const InvalidVocabulary& e) {
    throw ConfigError(name + ": " + e.what());
  } catch (const InvalidModel& e) {
    throw ConfigError(name + ": " + e.what());
  }
  return out;
}

/// Null when no selector is configured. `generator` and `ranker` back the
/// "scorer" selector type and must outlive the result.
inline std::shared_ptr<const Selector> load_selector(const json& section, const Scorer* generator,
                                                     const Scorer* ranker) {
  if (section.is_null()) return nullptr;
  if (!section.is_object()) throw ConfigError("selector must be an object");
  const auto type = detail::field(section, "type", std::string(), "selector");
  if (type == "marker") {
    return std::make_shared<MarkerWordSelector>(
        detail::field(section, "word", std::string(), "selector"),
        detail::field(section, "bonus", 1.0, "selector"));
  }
  if (type == "scorer") {
    const auto which = detail::field(section, "model", std::string("ranker"), "selector");
    const Scorer* model = which == "generator" ? generator : which == "ranker" ? ranker : nullptr;
    if (!model) throw ConfigError("selector.model must name a configured generator or ranker");
    return std::make_shared<ScorerSelector>(*model);
  }
  if (type == "remote") {
    auto endpoint =
        protocol::Endpoint::parse(detail::field(section, "endpoint", std::string(), "selector"));
    try {
      return std::make_shared<protocol::RemoteSelector>(protocol::connect(endpoint));
    } catch (const Error&) {
      return nullptr;
    }
  }
  throw ConfigError("selector.type '" + type + "' is not one of marker, scorer, remote");
}

}  // namespace wordfuse
