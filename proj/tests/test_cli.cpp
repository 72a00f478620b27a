#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "wordfuse/commands.hpp"

using namespace wordfuse;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("wordfuse_test_" + name);
  std::filesystem::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(WORDFUSE_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, PresetLayering) {
  const auto cfg = load_config(fixtures::data_path("awesome/narrow.json"));
  EXPECT_EQ(cfg.search.mode, Mode::online);
  EXPECT_EQ(cfg.search.alpha, 0.5);
  EXPECT_EQ(cfg.search.topk, 2u);
  EXPECT_EQ(cfg.search.beams, 1u);
  EXPECT_EQ(cfg.nbest, 1u);
  // Paths stay anchored to the file that named them.
  EXPECT_TRUE(std::filesystem::exists(cfg.generator["vocab"].get<std::string>()));
}

TEST(Config, ShippedPresets) {
  const auto speech = load_config(fixtures::source_path("configs/presets/speech.json"));
  EXPECT_EQ(speech.search.mode, Mode::offline);
  EXPECT_EQ(speech.search.alpha, 0.8);
  const auto image = load_config(fixtures::source_path("configs/presets/image.json"));
  EXPECT_EQ(image.search.alpha, 0.9);
  EXPECT_EQ(image.search.beams, 3u);
}

TEST(Config, Rejections) {
  EXPECT_THROW(parse_config(json{{"search", {{"alpha", 1.2}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"search", {{"beams", 0}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"search", {{"mode", "both"}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"search", {{"topk", "five"}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"search", {{"pruning", "sometimes"}}}}), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/wordfuse.json"), ConfigError);
  EXPECT_THROW(load_model(json{{"type", "magic"}, {"vocab", fixtures::data_path("awesome/generator.vocab")}},
                          "generator"),
               ConfigError);
}

TEST(Config, EnvironmentSelectsRemoteRanker) {
  ::setenv("WORDFUSE_RANKER", "tcp://127.0.0.1:9", 1);
  const auto cfg = parse_config(json::object());
  ::unsetenv("WORDFUSE_RANKER");
  EXPECT_EQ(cfg.ranker["type"], "remote");
  EXPECT_EQ(cfg.ranker["endpoint"], "tcp://127.0.0.1:9");
  EXPECT_TRUE(cfg.generator.is_null());
}

TEST(Decode, MatchesGoldenRecord) {
  const auto cfg = load_config(fixtures::data_path("awesome/config.json"));
  const auto models = Models::load(cfg, true);
  std::istringstream in("sentence\n");
  std::ostringstream out;
  EXPECT_EQ(run_decode(cfg, models, in, out, {.timing = false}), exit_code::ok);
  EXPECT_EQ(out.str(), slurp(fixtures::source_path("tests/golden/awesome_decode.jsonl")));

  const auto rec = json::parse(out.str());
  EXPECT_EQ(rec["nbest"][0]["surface"], "Decoding is awesome");
  EXPECT_EQ(rec["nbest"][0]["rank"], 1);
  EXPECT_NEAR(decode_real(rec["nbest"][0]["merged"]),
              0.5 * std::log(0.45) / 7.0 + 0.5 * std::log(0.89) / 7.0, 1e-12);
}

TEST(Decode, WorkersPreserveOrderAndResults) {
  auto cfg = load_config(fixtures::data_path("random/config.json"));
  const auto models = Models::load(cfg, true);
  std::string payloads;
  for (int i = 0; i < 16; ++i) payloads += "p" + std::to_string(i) + "\n";
  std::istringstream in1(payloads);
  std::ostringstream serial;
  run_decode(cfg, models, in1, serial, {.timing = false});
  cfg.workers = 4;
  std::istringstream in2(payloads);
  std::ostringstream parallel;
  run_decode(cfg, models, in2, parallel, {.timing = false});
  EXPECT_EQ(serial.str(), parallel.str());
}

TEST(Decode, GeneratorOnlyNeverLoadsRanker) {
  auto cfg = load_config(fixtures::data_path("awesome/config.json"));
  cfg.ranker = {{"type", "remote"}, {"endpoint", "tcp://127.0.0.1:1"}};
  cfg.search.mode = Mode::generator_only;
  const auto models = Models::load(cfg, Models::needs_ranker(cfg.search.mode));
  EXPECT_FALSE(models.ranker.scorer);
  std::istringstream in("sentence\n");
  std::ostringstream out;
  EXPECT_EQ(run_decode(cfg, models, in, out, {.timing = false}), exit_code::ok);
  EXPECT_EQ(json::parse(out.str())["nbest"][0]["surface"], "Decoding is bad");
}

TEST(Decode, AllModesProduceRankedLists) {
  auto cfg = load_config(fixtures::data_path("awesome/config.json"));
  for (Mode mode : {Mode::generator_only, Mode::online, Mode::offline, Mode::joint}) {
    cfg.search.mode = mode;
    const auto models = Models::load(cfg, Models::needs_ranker(mode));
    std::istringstream in("sentence\n");
    std::ostringstream out;
    ASSERT_EQ(run_decode(cfg, models, in, out, {.timing = false}), exit_code::ok) << to_string(mode);
    const auto rec = json::parse(out.str());
    EXPECT_EQ(rec["mode"], std::string(to_string(mode)));
    const std::string expected = mode == Mode::generator_only ? "Decoding is bad" : "Decoding is awesome";
    EXPECT_EQ(rec["nbest"][0]["surface"], expected) << to_string(mode);
  }
}

TEST(Decode, SelectorPicksMarkedEntry) {
  auto cfg = load_config(fixtures::data_path("awesome/config.json"));
  cfg.search.mode = Mode::generator_only;
  cfg.selector = {{"type", "marker"}, {"word", "awesome"}};
  const auto models = Models::load(cfg, false);
  std::istringstream in("sentence\n");
  std::ostringstream out;
  run_decode(cfg, models, in, out, {.timing = false});
  const auto rec = json::parse(out.str());
  EXPECT_EQ(rec["selected_rank"], 2);
  EXPECT_EQ(rec["selector_fallback"], false);
}

TEST(Decode, UnreachableRemoteSelectorFallsBack) {
  auto cfg = load_config(fixtures::data_path("awesome/config.json"));
  cfg.selector = {{"type", "remote"}, {"endpoint", "tcp://127.0.0.1:1"}};
  const auto models = Models::load(cfg, true);
  EXPECT_FALSE(models.selector);
}

TEST(Decode, OnlineWithoutRankerIsConfigError) {
  auto cfg = load_config(fixtures::data_path("awesome/config.json"));
  cfg.search.mode = Mode::online;
  Models models = Models::load(cfg, false);
  std::istringstream in("sentence\n");
  std::ostringstream out;
  EXPECT_THROW(run_decode(cfg, models, in, out, {.timing = false}), ConfigError);
}

TEST(Metrics, ExactMatchAndF1) {
  EXPECT_EQ(exact_match("a  b", "a b"), 1.0);
  EXPECT_EQ(exact_match("a b", "a c"), 0.0);
  EXPECT_NEAR(token_f1("a b c", "a b d e"), 2 * (2.0 / 3) * 0.5 / (2.0 / 3 + 0.5), 1e-15);
  EXPECT_EQ(token_f1("", ""), 1.0);
  EXPECT_THROW(surface_metric("bleu", "a", "a"), ConfigError);
}

TEST(GridSearch, AwesomeFixture) {
  fixtures::Awesome fx;
  const std::vector<DevExample> dev{{"sentence", "Decoding is awesome"}};
  const std::vector<double> alphas{0.0, 0.5, 1.0};
  EnsembleConfig search{.alpha = 0.5, .topk = 5, .beams = 5, .max_len = 16};
  const auto report = grid_search(*fx.generator, *fx.ranker, search, 5, dev, alphas, "exact_match");
  ASSERT_EQ(report.points.size(), 3u);
  EXPECT_EQ(report.points[0].score, 1.0);
  EXPECT_EQ(report.points[1].score, 1.0);
  EXPECT_EQ(report.points[2].score, 0.0);
  EXPECT_EQ(report.best_alpha, 0.0);
  const auto plain = decode_generator_only(*fx.generator, fx.gen_in, search);
  EXPECT_EQ(report.points[2].score, exact_match(plain.hypotheses.at(0).surface, "Decoding is awesome"));
}

TEST(GridSearch, AlphaGridAndDevParsing) {
  const auto g = alpha_grid(0.0, 1.0, 0.1);
  ASSERT_EQ(g.size(), 11u);
  EXPECT_EQ(g[3], 0.3);
  EXPECT_EQ(g.back(), 1.0);
  std::istringstream in("a\tb c\n\nx\ty\n");
  const auto dev = read_dev(in);
  ASSERT_EQ(dev.size(), 2u);
  EXPECT_EQ(dev[0].reference, "b c");
  std::istringstream bad("no tab here\n");
  EXPECT_THROW(read_dev(bad), ConfigError);
}

TEST(Explain, TargetTraceShowsBranches) {
  fixtures::Awesome fx;
  const auto rows = explain_target(*fx.generator, *fx.ranker, "sentence", "Decoding is awesome", 0.5);
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0].first, "Dec");
  EXPECT_EQ(rows[0].second.branch, Branch::unfinished);
  EXPECT_EQ(rows[0].second.j, 0u);
  EXPECT_EQ(rows[4].first, "_awe");
  EXPECT_EQ(rows[4].second.branch, Branch::unfinished);
  EXPECT_EQ(rows[5].second.branch, Branch::finished);
  EXPECT_EQ(rows[6].first, "<eos>");
}

TEST(Explain, RunExplainFormats) {
  const auto cfg = load_config(fixtures::data_path("awesome/config.json"));
  const auto models = Models::load(cfg, true);
  std::ostringstream text;
  EXPECT_EQ(run_explain(cfg, models, "sentence", text), exit_code::ok);
  EXPECT_NE(text.str().find("Decoding is awesome"), std::string::npos);
  std::ostringstream js;
  run_explain(cfg, models, "sentence", js, {.target = "Decoding is awesome", .as_json = true});
  std::istringstream lines(js.str());
  std::size_t count = 0;
  for (std::string line; std::getline(lines, line); ++count) {
    EXPECT_TRUE(json::parse(line).contains("breakdown"));
  }
  EXPECT_EQ(count, 7u);
}

TEST(ValidateVocab, ShippedAndBroken) {
  const auto v = VocabTokenizer::from_file(fixtures::data_path("awesome/generator.vocab"));
  std::ostringstream out;
  EXPECT_EQ(run_validate_vocab(v, {}, 200, out), exit_code::ok);
  const std::vector<std::string> samples{"Decoding 7"};
  std::ostringstream bad;
  EXPECT_EQ(run_validate_vocab(v, samples, 0, bad), exit_code::validation_failed);
  EXPECT_NE(bad.str().find("FAIL"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir("cli");
  const auto config = fixtures::data_path("awesome/config.json").string();
  const auto input = fixtures::data_path("awesome/input.txt").string();
  const auto out = (dir / "out.jsonl").string();
  EXPECT_EQ(run_cli("decode -c " + config + " -i " + input + " -o " + out + " --no-timing"), 0);
  EXPECT_EQ(slurp(out), slurp(fixtures::source_path("tests/golden/awesome_decode.jsonl")));
  EXPECT_EQ(run_cli("decode -c /nonexistent.json -i " + input), 2);
  EXPECT_EQ(run_cli("decode -c " + config + " -i " + input + " --alpha 3"), 2);
  EXPECT_EQ(run_cli("decode -c " + config + " -i " + input + " --mode sideways"), 2);
  ::setenv("WORDFUSE_GENERATOR", "tcp://127.0.0.1:1", 1);
  EXPECT_EQ(run_cli("decode -c " + config + " -i " + input), 3);
  ::unsetenv("WORDFUSE_GENERATOR");
  EXPECT_EQ(run_cli("validate-vocab " + fixtures::data_path("awesome/ranker.vocab").string()), 0);
}

TEST(Cli, DecodeIsDeterministicAcrossRuns) {
  const auto dir = scratch_dir("determinism");
  const auto config = fixtures::data_path("random/config.json").string();
  const auto input = fixtures::data_path("random/input.txt").string();
  const auto a = (dir / "a.jsonl").string();
  const auto b = (dir / "b.jsonl").string();
  ASSERT_EQ(run_cli("decode -c " + config + " -i " + input + " -o " + a + " --no-timing"), 0);
  ASSERT_EQ(run_cli("decode -c " + config + " -i " + input + " -o " + b + " --no-timing --workers 3"), 0);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_FALSE(slurp(a).empty());
}
