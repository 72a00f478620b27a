#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "wordfuse/rerank.hpp"
#include "wordfuse/search.hpp"

using namespace wordfuse;

namespace {

NBestEntry entry(std::string surface, double gen, std::string origin = "g") {
  NBestEntry e;
  e.surface = std::move(surface);
  e.gen_score = gen;
  e.merged = gen;
  e.origin = std::move(origin);
  return e;
}

class ThrowingSelector final : public Selector {
 public:
  std::string identity() const override { return "broken"; }
  std::vector<double> select(const std::string&, std::span<const std::string>) const override {
    throw SelectorUnavailable("endpoint down");
  }
};

}  // namespace

TEST(RerankNbest, ReordersByMergedScore) {
  fixtures::Awesome fx;
  std::vector<NBestEntry> list{entry("Decoding is bad", -0.0996), entry("Decoding is awesome", -0.114)};
  const auto out = rerank_nbest(list, *fx.ranker, fx.rank_in, 0.5);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].surface, "Decoding is awesome");
  for (const auto& e : out) {
    ASSERT_TRUE(e.ranker_score);
    EXPECT_NEAR(e.merged, 0.5 * e.gen_score + 0.5 * *e.ranker_score, 1e-15);
  }
  EXPECT_NEAR(*out[0].ranker_score, std::log(0.89) / 7.0, 1e-12);
}

TEST(RerankNbest, AlphaOneKeepsGeneratorOrder) {
  fixtures::Awesome fx;
  std::vector<NBestEntry> list{entry("Decoding is bad", -0.0996), entry("Decoding is awesome", -0.114)};
  const auto out = rerank_nbest(list, *fx.ranker, fx.rank_in, 1.0);
  EXPECT_EQ(out[0].surface, "Decoding is bad");
  EXPECT_EQ(out[0].merged, -0.0996);
}

TEST(RerankNbest, UnscorableEntriesSink) {
  fixtures::Awesome fx;
  std::vector<NBestEntry> list{entry("Decoding is 7", 0.0), entry("Decoding is bad", -0.5)};
  const auto out = rerank_nbest(list, *fx.ranker, fx.rank_in, 0.5);
  EXPECT_EQ(out[0].surface, "Decoding is bad");
  EXPECT_FALSE(out[1].scored);
  EXPECT_FALSE(out[1].ranker_score);
}

TEST(JointRerank, DeduplicatesAndReusesOriginScores) {
  fixtures::Awesome fx;
  const std::vector<const Scorer*> models{fx.generator.get(), fx.ranker.get()};
  const std::vector<ModelInput> inputs{fx.gen_in, fx.rank_in};
  auto a = decode_generator_only(*fx.generator, fx.gen_in, {.alpha = 1.0, .topk = 2, .beams = 2, .max_len = 10});
  auto b = decode_generator_only(*fx.ranker, fx.rank_in, {.alpha = 1.0, .topk = 2, .beams = 2, .max_len = 10});
  const std::vector<std::vector<NBestEntry>> lists{a.nbest(), b.nbest()};
  const auto out = joint_rerank(lists, models, inputs, 0.5);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].surface, "Decoding is awesome");
  for (const auto& e : out) {
    EXPECT_NEAR(e.gen_score, sequence_score(*fx.generator, fx.gen_in, e.surface), 1e-15);
    EXPECT_NEAR(*e.ranker_score, sequence_score(*fx.ranker, fx.rank_in, e.surface), 1e-15);
  }
}

TEST(JointRerank, NeedsTwoLists) {
  fixtures::Awesome fx;
  const std::vector<const Scorer*> models{fx.generator.get(), fx.ranker.get()};
  const std::vector<ModelInput> inputs{fx.gen_in, fx.rank_in};
  EXPECT_THROW(joint_rerank({{}}, models, inputs, 0.5), Error);
}

TEST(SelectBest, MarkerSelectorPicksHit) {
  std::vector<NBestEntry> list{entry("Decoding is bad", -0.1), entry("Decoding is awesome", -0.2)};
  const MarkerWordSelector sel("awesome");
  const auto s = select_best(list, &sel, "");
  EXPECT_EQ(s.best, 1u);
  EXPECT_FALSE(s.fallback);
  EXPECT_EQ(*s.entries[1].selector_score, 1.0);
}

TEST(SelectBest, ScorerSelectorUsesModelScore) {
  fixtures::Awesome fx;
  std::vector<NBestEntry> list{entry("Decoding is bad", -0.1), entry("Decoding is awesome", -0.2)};
  const ScorerSelector sel(*fx.ranker);
  EXPECT_EQ(select_best(list, &sel, "sentence").best, 1u);
}

TEST(SelectBest, FallsBackWhenSelectorUnavailable) {
  std::vector<NBestEntry> list{entry("x", -0.5), entry("y", -0.1)};
  const ThrowingSelector sel;
  const auto s = select_best(list, &sel, "");
  EXPECT_TRUE(s.fallback);
  EXPECT_EQ(s.best, 1u);
  EXPECT_NE(s.warning.find("endpoint down"), std::string::npos);
  EXPECT_EQ(select_best(list, nullptr, "").fallback, true);
}

TEST(NbestFile, RoundTripIsBitExact) {
  std::vector<NBestEntry> list{entry("a b", -0.1234567890123456789), entry("c", kNegInf)};
  list[0].ranker_score = -1.0 / 3.0;
  list[0].merged = -0.2;
  list[1].selector_score = 0.75;
  std::stringstream io;
  write_nbest(io, list);
  const auto back = read_nbest(io);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].gen_score, list[0].gen_score);
  EXPECT_EQ(*back[0].ranker_score, *list[0].ranker_score);
  EXPECT_EQ(back[1].gen_score, kNegInf);
  EXPECT_FALSE(back[1].ranker_score);
  EXPECT_EQ(*back[1].selector_score, 0.75);
}
