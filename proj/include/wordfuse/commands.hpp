#pragma once

// Operator commands shared by the wordfuse tool and the tests.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "wordfuse/config.hpp"
#include "wordfuse/oracle.hpp"

namespace wordfuse {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int validation_failed = 1;
inline constexpr int config_error = 2;
inline constexpr int scorer_failure = 3;
inline constexpr int empty_output = 4;
}  // namespace exit_code

/// Models named by a RunConfig. The ranker is only loaded when the mode
/// needs it, so generator_only never contacts a ranker endpoint.
struct Models {
  LoadedModel generator;
  LoadedModel ranker;
  std::shared_ptr<const Selector> selector;

  static Models load(const RunConfig& cfg, bool need_ranker) {
    Models m;
    m.generator = load_model(cfg.generator, "generator");
    if (need_ranker) m.ranker = load_model(cfg.ranker, "ranker");
    m.selector = load_selector(cfg.selector, m.generator.scorer.get(), m.ranker.scorer.get());
    return m;
  }

  static bool needs_ranker(Mode mode) { return mode != Mode::generator_only; }
};

inline json to_json(const MergeBreakdown& b) {
  json j = json::object();
  j["branch"] = std::string(to_string(b.branch));
  j["alpha"] = encode_real(b.alpha);
  j["n"] = b.n;
  j["m"] = b.m;
  j["j"] = b.j;
  j["k"] = b.k;
  for (auto [key, value] : {std::pair{"full_g", b.full_g}, std::pair{"full_r", b.full_r},
                            std::pair{"prev_g", b.prev_g}, std::pair{"prev_r", b.prev_r},
                            std::pair{"prev_gr", b.prev_gr}, std::pair{"last_g", b.last_g}}) {
    if (!std::isnan(value)) j[key] = encode_real(value);
  }
  j["merged"] = encode_real(b.merged);
  return j;
}

inline json to_json(const CallCounts& c) {
  return {{"generator", c.generator}, {"ranker", c.ranker},         {"steps", c.steps},
          {"beam_steps", c.beam_steps}, {"candidates", c.candidates}, {"masked", c.masked}};
}

inline json to_json(const TraceEvent& e) {
  json j = json::object();
  j["step"] = e.step;
  j["beam"] = e.beam;
  j["token"] = {{"id", e.token.id}, {"text", e.token.text}};
  j["gen_logprob"] = encode_real(e.gen_logprob);
  j["surface"] = e.surface;
  if (e.breakdown) j["breakdown"] = to_json(*e.breakdown);
  j["score"] = encode_real(e.score);
  j["masked"] = e.masked;
  j["selected"] = e.selected;
  j["finished"] = e.finished;
  return j;
}

struct DecodeOutput {
  std::vector<NBestEntry> nbest;
  CallCounts calls;
  bool complete = true;
  std::vector<TraceEvent> trace;
};

/// One input through the configured mode. The generator and ranker see the
/// same payload.
inline DecodeOutput decode_one(const Scorer& generator, const Scorer* ranker,
                               const EnsembleConfig& search, std::size_t nbest,
                               const std::string& payload) {
  const ModelInput gen_in{payload, Role::generator};
  const ModelInput rank_in{payload, Role::ranker};
  const auto need_ranker = [&] {
    if (!ranker) throw ConfigError("mode " + std::string(to_string(search.mode)) + " needs a ranker");
    return ranker;
  };
  EnsembleConfig list_cfg = search;
  list_cfg.beams = std::max(search.beams, nbest);

  DecodeOutput out;
  switch (search.mode) {
    case Mode::generator_only: {
      auto r = decode_generator_only(generator, gen_in, search);
      out.nbest = r.nbest();
      out.calls = r.calls;
      out.complete = r.complete;
      out.trace = std::move(r.trace);
      break;
    }
    case Mode::online: {
      auto r = decode_online(generator, *need_ranker(), {gen_in, rank_in}, search);
      out.nbest = r.nbest();
      out.calls = r.calls;
      out.complete = r.complete;
      out.trace = std::move(r.trace);
      break;
    }
    case Mode::offline: {
      auto r = decode_generator_only(generator, gen_in, list_cfg);
      out.calls = r.calls;
      out.complete = r.complete;
      out.nbest = rerank_nbest(r.nbest(), *need_ranker(), rank_in, search.alpha);
      out.calls.ranker += out.nbest.size();
      break;
    }
    case Mode::joint: {
      const Scorer& rk = *need_ranker();
      auto a = decode_generator_only(generator, gen_in, list_cfg);
      auto b = decode_generator_only(rk, rank_in, list_cfg);
      const std::vector<std::vector<NBestEntry>> lists{a.nbest(), b.nbest()};
      const std::vector<const Scorer*> models{&generator, &rk};
      const std::vector<ModelInput> inputs{gen_in, rank_in};
      out.nbest = joint_rerank(lists, models, inputs, search.alpha);
      out.calls = a.calls;
      out.calls.ranker = b.calls.generator + lists[0].size();
      out.calls.generator += lists[1].size();
      out.complete = a.complete && b.complete;
      break;
    }
  }
  if (out.nbest.size() > nbest) out.nbest.resize(nbest);
  return out;
}

struct DecodeOptions {
  bool timing = true;
};

/// Reads one payload per line from `in` and writes one JSONL record per
/// payload to `out`, in input order. Record fields:
///   index, input, mode, status (ok | incomplete | empty | error), nbest,
///   calls, wall_ms, and when applicable error, selected_rank, selector_fallback,
///   selector_warning.
/// Returns an exit code.
inline int run_decode(const RunConfig& cfg, const Models& models, std::istream& in,
                      std::ostream& out, DecodeOptions opts = {}) {
  std::vector<std::string> inputs;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    inputs.push_back(std::move(line));
  }

  const Scorer& generator = *models.generator.scorer;
  const Scorer* ranker = models.ranker.scorer.get();
  std::vector<json> records(inputs.size());
  std::vector<int> codes(inputs.size(), exit_code::ok);

  const auto work = [&](std::size_t i) {
    json rec = json::object();
    rec["index"] = i;
    rec["input"] = inputs[i];
    rec["mode"] = std::string(to_string(cfg.search.mode));
    const auto start = std::chrono::steady_clock::now();
    try {
      auto result = decode_one(generator, ranker, cfg.search, cfg.nbest, inputs[i]);
      json entries = json::array();
      if (models.selector && !result.nbest.empty()) {
        auto sel = select_best(result.nbest, models.selector.get(), inputs[i]);
        result.nbest = std::move(sel.entries);
        rec["selected_rank"] = sel.best + 1;
        rec["selector_fallback"] = sel.fallback;
        if (sel.fallback) rec["selector_warning"] = sel.warning;
      }
      for (std::size_t r = 0; r < result.nbest.size(); ++r) {
        entries.push_back(to_json(result.nbest[r], r + 1));
      }
      rec["nbest"] = std::move(entries);
      rec["calls"] = to_json(result.calls);
      if (result.nbest.empty()) {
        rec["status"] = "empty";
        codes[i] = exit_code::empty_output;
      } else {
        rec["status"] = result.complete ? "ok" : "incomplete";
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      rec["status"] = "error";
      rec["error"] = e.what();
      rec["nbest"] = json::array();
      codes[i] = exit_code::scorer_failure;
    }
    if (opts.timing) {
      rec["wall_ms"] = std::chrono::duration<double, std::milli>(
                           std::chrono::steady_clock::now() - start).count();
    }
    records[i] = std::move(rec);
  };

  const bool parallel_ok = generator.concurrent_safe() && (!ranker || ranker->concurrent_safe());
  const std::size_t workers =
      parallel_ok ? std::min<std::size_t>(cfg.workers, std::max<std::size_t>(inputs.size(), 1)) : 1;
  if (workers <= 1) {
    for (std::size_t i = 0; i < inputs.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> failures(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i; (i = next.fetch_add(1)) < inputs.size();) work(i);
        } catch (...) {
          failures[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }
  }

  int code = exit_code::ok;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out << records[i].dump() << '\n';
    if (codes[i] == exit_code::scorer_failure) code = exit_code::scorer_failure;
    if (codes[i] == exit_code::empty_output && code == exit_code::ok) code = exit_code::empty_output;
  }
  return code;
}

// Surface metrics -------------------------------------------------------------

inline double exact_match(const std::string& hypothesis, const std::string& reference) {
  return unicode::split_words(hypothesis) == unicode::split_words(reference) ? 1.0 : 0.0;
}

/// Word-level F1 with multiset overlap.
inline double token_f1(const std::string& hypothesis, const std::string& reference) {
  const auto h = unicode::split_words(hypothesis);
  const auto r = unicode::split_words(reference);
  if (h.empty() && r.empty()) return 1.0;
  if (h.empty() || r.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& w : r) ++counts[w];
  double overlap = 0;
  for (const auto& w : h) {
    if (auto it = counts.find(w); it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = overlap / static_cast<double>(h.size());
  const double rc = overlap / static_cast<double>(r.size());
  return 2 * p * rc / (p + rc);
}

inline double surface_metric(const std::string& name, const std::string& hyp,
                             const std::string& ref) {
  if (name == "exact_match") return exact_match(hyp, ref);
  if (name == "token_f1") return token_f1(hyp, ref);
  throw ConfigError("unknown metric '" + name + "' (exact_match, token_f1)");
}

struct GridPoint {
  double alpha = 0.0;
  double score = 0.0;
};

struct GridReport {
  std::string metric;
  std::vector<GridPoint> points;
  double best_alpha = 0.0;
  double best_score = 0.0;
  std::size_t examples = 0;

  json to_json() const {
    json pts = json::array();
    for (const auto& p : points) pts.push_back({{"alpha", p.alpha}, {"score", p.score}});
    return {{"metric", metric}, {"points", pts},           {"best_alpha", best_alpha},
            {"best_score", best_score}, {"examples", examples}};
  }
};

struct DevExample {
  std::string payload;
  std::string reference;
};

inline std::vector<DevExample> read_dev(std::istream& in) {
  std::vector<DevExample> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ConfigError("dev line lacks a tab: '" + line + "'");
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

/// Fixed generator N-best lists (nbest entries each) re-ranked offline at
/// every alpha; each point is the mean metric of the top entry against the
/// reference. The first maximum wins ties.
inline GridReport grid_search(const Scorer& generator, const Scorer& ranker,
                              const EnsembleConfig& search, std::size_t nbest,
                              const std::vector<DevExample>& dev, std::span<const double> alphas,
                              const std::string& metric) {
  if (alphas.empty()) throw ConfigError("grid search needs at least one alpha");
  if (dev.empty()) throw ConfigError("grid search needs at least one dev example");
  for (double a : alphas) check_alpha(a);
  EnsembleConfig list_cfg = search;
  list_cfg.mode = Mode::generator_only;
  list_cfg.beams = std::max(search.beams, nbest);

  std::vector<std::vector<NBestEntry>> lists;
  for (const auto& ex : dev) {
    auto r = decode_generator_only(generator, {ex.payload, Role::generator}, list_cfg);
    auto entries = r.nbest();
    if (entries.size() > nbest) entries.resize(nbest);
    lists.push_back(std::move(entries));
  }

  GridReport report;
  report.metric = metric;
  report.examples = dev.size();
  for (double alpha : alphas) {
    double total = 0.0;
    for (std::size_t i = 0; i < dev.size(); ++i) {
      const auto ranked = rerank_nbest(lists[i], ranker, {dev[i].payload, Role::ranker}, alpha);
      total += ranked.empty() ? 0.0 : surface_metric(metric, ranked.front().surface, dev[i].reference);
    }
    report.points.push_back({alpha, total / static_cast<double>(dev.size())});
  }
  report.best_alpha = report.points.front().alpha;
  report.best_score = report.points.front().score;
  for (const auto& p : report.points) {
    if (p.score > report.best_score) {
      report.best_alpha = p.alpha;
      report.best_score = p.score;
    }
  }
  return report;
}

/// {start, start + step, ..., stop}, snapped to one decimal place per step.
inline std::vector<double> alpha_grid(double start, double stop, double step) {
  if (!(step > 0.0)) throw ConfigError("grid step must be positive");
  std::vector<double> out;
  const auto count = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(std::round((start + static_cast<double>(i) * step) * 1e9) / 1e9);
  }
  return out;
}

// Explain ---------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "-";
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string describe(const MergeBreakdown& b) {
  std::ostringstream os;
  os << std::string(to_string(b.branch)) << " n=" << b.n << " m=" << b.m;
  if (b.branch == Branch::unfinished) {
    os << " j=" << b.j << " k=" << b.k << " prev_g=" << fmt(b.prev_g) << " prev_r=" << fmt(b.prev_r)
       << " prev_gr=" << fmt(b.prev_gr) << " last_g=" << fmt(b.last_g);
  } else {
    os << " full_g=" << fmt(b.full_g) << " full_r=" << fmt(b.full_r);
  }
  os << " merged=" << fmt(b.merged);
  return os.str();
}

}  // namespace detail

/// Merge trace of a fixed target sentence: every generator prefix of the
/// target (and the target plus eos) is scored as the engine would score it.
/// Returns one breakdown per prefix.
inline std::vector<std::pair<std::string, MergeBreakdown>> explain_target(
    const Scorer& generator, const Scorer& ranker, const std::string& payload,
    const std::string& target, double alpha) {
  auto tokens = generator.tokenizer().tokenize(target);
  tokens.push_back(generator.tokenizer().eos());
  const auto lps = generator.score_prefix({payload, Role::generator}, tokens);
  MergeSession session(generator, ranker, {payload, Role::ranker}, alpha);
  std::vector<std::pair<std::string, MergeBreakdown>> out;
  for (std::size_t n = 1; n <= tokens.size(); ++n) {
    const std::span<const Token> prefix(tokens.data(), n);
    const auto surface = generator.tokenizer().detokenize(prefix);
    out.emplace_back(tokens[n - 1].text, session.score(prefix, std::span(lps).first(n), surface));
  }
  return out;
}

struct ExplainOptions {
  std::optional<std::string> target;  // explain this sentence instead of decoding
  bool as_json = false;
};

inline int run_explain(const RunConfig& cfg, const Models& models, const std::string& payload,
                       std::ostream& out, const ExplainOptions& opts = {}) {
  const Scorer& generator = *models.generator.scorer;
  if (!models.ranker.scorer) throw ConfigError("explain needs a ranker");
  const Scorer& ranker = *models.ranker.scorer;

  if (opts.target) {
    const auto rows = explain_target(generator, ranker, payload, *opts.target, cfg.search.alpha);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& [token, b] = rows[i];
      if (opts.as_json) {
        out << json{{"position", i + 1}, {"token", token}, {"breakdown", to_json(b)}}.dump() << '\n';
      } else {
        out << std::setw(3) << i + 1 << "  " << std::left << std::setw(10) << token << std::right
            << "  " << detail::describe(b) << '\n';
      }
    }
    return exit_code::ok;
  }

  EnsembleConfig search = cfg.search;
  search.trace = true;
  const auto r = decode_online(generator, ranker, {{payload, Role::generator}, {payload, Role::ranker}},
                               search);
  for (const auto& ev : r.trace) {
    if (opts.as_json) {
      out << to_json(ev).dump() << '\n';
      continue;
    }
    out << "step " << ev.step << " beam " << ev.beam << (ev.selected ? " * " : "   ") << std::left
        << std::setw(10) << ev.token.text << std::right << " \"" << ev.surface << "\"  ";
    if (ev.breakdown) {
      out << detail::describe(*ev.breakdown);
    } else {
      out << (ev.masked ? "masked" : "score=" + detail::fmt(ev.score));
    }
    out << '\n';
  }
  if (!opts.as_json) {
    out << "result" << (r.complete ? "" : " (incomplete)") << ":\n";
    for (const auto& h : r.hypotheses) out << "  " << detail::fmt(h.score) << "  " << h.surface << '\n';
    out << "calls: generator=" << r.calls.generator << " ranker=" << r.calls.ranker
        << " steps=" << r.calls.steps << '\n';
  }
  return r.hypotheses.empty() ? exit_code::empty_output : exit_code::ok;
}

// Vocabulary validation -------------------------------------------------------

/// Checks the vocabulary's own word pairs plus any extra samples. Prints one
/// line per issue and returns validation_failed when there are any.
inline int run_validate_vocab(const VocabTokenizer& vocab, std::span<const std::string> samples,
                              std::size_t pair_limit, std::ostream& out) {
  auto all = vocabulary_pair_samples(vocab, pair_limit);
  all.insert(all.end(), samples.begin(), samples.end());
  const auto issues = validate_samples(vocab, all);
  for (const auto& issue : issues) out << "FAIL\t" << issue.sample << "\t" << issue.problem << '\n';
  out << all.size() << " samples, " << issues.size() << " issues\n";
  return issues.empty() ? exit_code::ok : exit_code::validation_failed;
}

}  // namespace wordfuse
