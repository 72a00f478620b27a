#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wordfuse/commands.hpp"

namespace {

using namespace wordfuse;

// Applies command-line overrides on top of the config file.
struct SearchOverrides {
  std::optional<std::string> mode;
  std::optional<double> alpha;
  std::optional<std::size_t> topk;
  std::optional<std::size_t> beams;
  std::optional<std::size_t> max_len;
  std::optional<std::size_t> nbest;
  std::optional<std::size_t> workers;

  void attach(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "online | offline | generator_only | joint");
    cmd->add_option("--alpha", alpha, "Generator weight in [0, 1]");
    cmd->add_option("--topk", topk, "Extensions proposed per beam");
    cmd->add_option("--beams", beams, "Beam size");
    cmd->add_option("--max-len", max_len, "Length limit in generator tokens");
    cmd->add_option("--nbest", nbest, "Entries reported per input");
    cmd->add_option("--workers", workers, "Inputs decoded in parallel");
  }

  void apply(RunConfig& cfg) const {
    if (mode) cfg.search.mode = parse_mode(*mode);
    if (alpha) {
      if (!(*alpha >= 0.0 && *alpha <= 1.0)) throw ConfigError("--alpha must lie in [0, 1]");
      cfg.search.alpha = *alpha;
    }
    if (topk) cfg.search.topk = *topk;
    if (beams) cfg.search.beams = *beams;
    if (max_len) cfg.search.max_len = *max_len;
    if (nbest) cfg.nbest = *nbest;
    if (workers) cfg.workers = std::max<std::size_t>(*workers, 1);
  }
};

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  return in;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_code::config_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code::scorer_failure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Word-level ensemble decoding for models with different tokenizers"};
  app.require_subcommand(1);

  std::string config_path;
  std::string input_path;
  std::string output_path;
  bool no_timing = false;
  SearchOverrides overrides;

  auto* decode = app.add_subcommand("decode", "Decode one payload per input line, write JSONL");
  decode->add_option("-c,--config", config_path, "Config file")->required();
  decode->add_option("-i,--input", input_path, "Input file (default stdin)");
  decode->add_option("-o,--output", output_path, "Output file (default stdout)");
  decode->add_flag("--no-timing", no_timing, "Omit wall_ms so runs are byte-identical");
  overrides.attach(decode);

  std::string dev_path;
  std::string metric = "exact_match";
  std::vector<double> alphas;
  auto* grid = app.add_subcommand("grid-search", "Re-rank fixed N-best lists over an alpha grid");
  grid->add_option("-c,--config", config_path, "Config file")->required();
  grid->add_option("-d,--dev", dev_path, "Dev file: payload<TAB>reference per line")->required();
  grid->add_option("--metric", metric, "exact_match | token_f1");
  grid->add_option("--alphas", alphas, "Alpha values (default 0.0, 0.1, ..., 1.0)")->delimiter(',');
  overrides.attach(grid);

  std::string payload;
  std::optional<std::string> target;
  bool as_json = false;
  auto* explain = app.add_subcommand("explain", "Show the merge trace for one input");
  explain->add_option("-c,--config", config_path, "Config file")->required();
  explain->add_option("payload", payload, "Model input")->required();
  explain->add_option("--target", target, "Trace this sentence instead of decoding");
  explain->add_flag("--json", as_json, "One JSON record per line");
  overrides.attach(explain);

  std::string vocab_path;
  std::string marker = std::string(kDefaultMarker);
  std::string samples_path;
  std::size_t pair_limit = 100000;
  auto* validate = app.add_subcommand("validate-vocab", "Check round trips and word boundaries");
  validate->add_option("vocab", vocab_path, "Vocabulary file")->required();
  validate->add_option("--marker", marker, "Boundary marker");
  validate->add_option("--samples", samples_path, "Extra sample sentences, one per line");
  validate->add_option("--pair-limit", pair_limit, "Cap on generated word-pair samples");

  std::string role = "generator";
  int port = -1;
  auto* serve = app.add_subcommand("serve", "Serve a configured model over the JSON-lines protocol");
  serve->add_option("-c,--config", config_path, "Config file")->required();
  serve->add_option("--role", role, "generator | ranker | selector");
  serve->add_option("--port", port, "Listen on 127.0.0.1:PORT instead of stdio (0 picks one)");

  CLI11_PARSE(app, argc, argv);

  if (*decode) {
    return guarded([&] {
      auto cfg = load_config(config_path);
      overrides.apply(cfg);
      const auto models = Models::load(cfg, Models::needs_ranker(cfg.search.mode));
      std::ifstream file_in;
      if (!input_path.empty()) file_in = open_input(input_path);
      std::istream& in = input_path.empty() ? std::cin : file_in;
      std::ofstream file_out;
      if (!output_path.empty()) {
        file_out.open(output_path);
        if (!file_out) throw ConfigError("cannot write " + output_path);
      }
      std::ostream& out = output_path.empty() ? std::cout : file_out;
      return run_decode(cfg, models, in, out, {.timing = !no_timing});
    });
  }

  if (*grid) {
    return guarded([&] {
      auto cfg = load_config(config_path);
      overrides.apply(cfg);
      const auto models = Models::load(cfg, true);
      auto in = open_input(dev_path);
      const auto dev = read_dev(in);
      if (alphas.empty()) alphas = alpha_grid(0.0, 1.0, 0.1);
      const auto report = grid_search(*models.generator.scorer, *models.ranker.scorer, cfg.search,
                                      cfg.nbest, dev, alphas, metric);
      std::cout << report.to_json().dump() << '\n';
      return exit_code::ok;
    });
  }

  if (*explain) {
    return guarded([&] {
      auto cfg = load_config(config_path);
      overrides.apply(cfg);
      const auto models = Models::load(cfg, true);
      return run_explain(cfg, models, payload, std::cout, {.target = target, .as_json = as_json});
    });
  }

  if (*validate) {
    return guarded([&] {
      VocabTokenizer vocab = [&] {
        try {
          return VocabTokenizer::from_file(vocab_path, marker);
        } catch (const InvalidVocabulary& e) {
          throw ConfigError(e.what());
        }
      }();
      std::vector<std::string> samples;
      if (!samples_path.empty()) {
        auto in = open_input(samples_path);
        for (std::string line; std::getline(in, line);) {
          if (!line.empty()) samples.push_back(line);
        }
      }
      return run_validate_vocab(vocab, samples, pair_limit, std::cout);
    });
  }

  if (*serve) {
    return guarded([&] {
      const auto cfg = load_config(config_path);
      Models models;
      const Scorer* scorer = nullptr;
      if (role == "generator") {
        models.generator = load_model(cfg.generator, "generator");
        scorer = models.generator.scorer.get();
      } else if (role == "ranker") {
        models.ranker = load_model(cfg.ranker, "ranker");
        scorer = models.ranker.scorer.get();
      } else if (role == "selector") {
        models.selector = load_selector(cfg.selector, nullptr, nullptr);
        if (!models.selector) throw ConfigError("no selector configured");
      } else {
        throw ConfigError("--role must be generator, ranker or selector");
      }
      const protocol::Server server(scorer, models.selector.get());
      if (port >= 0) {
        server.serve_socket(port, [](int bound) {
          std::cerr << "listening on 127.0.0.1:" << bound << std::endl;
        });
      } else {
        server.serve(std::cin, std::cout);
      }
      return exit_code::ok;
    });
  }
  return exit_code::ok;
}
