#include <gtest/gtest.h>

#include "cpembed/probe.hpp"
#include "cpembed/steering.hpp"
#include "test_support.hpp"

using namespace cpembed;
namespace ts = testing_support;

namespace {

Vector toy_embedding(const std::string& text) {
  SteeringConfig c;
  c.layer = 2;
  c.strategy = Strategy::norm_scaling;
  c.alpha = 2.0;
  c.output_layer = 4;
  return cp_embed(ts::toy_model(), text, templates::prompt_eol(), templates::irrelevant(), c).first;
}

}  // namespace

TEST(Probe, FullVocabularySumsToOne) {
  const Model& m = ts::toy_model();
  const auto r = top_k_tokens(m, toy_embedding("probe"), 260);
  double sum = 0.0;
  for (const auto& t : r.tokens) sum += t.probability;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_EQ(r.tokens.size(), 260u);
}

TEST(Probe, DescendingWithIdTieBreak) {
  const Model& m = ts::toy_model();
  const auto r = top_k_tokens(m, toy_embedding("order"), 50);
  for (std::size_t i = 1; i < r.tokens.size(); ++i) {
    const auto& a = r.tokens[i - 1];
    const auto& b = r.tokens[i];
    EXPECT_TRUE(a.probability > b.probability ||
                (a.probability == b.probability && a.id < b.id));
  }
}

TEST(Probe, ZeroEmbeddingIsUniform) {
  const Model& m = ts::toy_model();
  const auto r = top_k_tokens(m, Vector(32, 0.0), 3);
  EXPECT_DOUBLE_EQ(r.tokens[0].probability, 1.0 / 260);
  EXPECT_EQ(r.tokens[0].id, 0);
  EXPECT_EQ(r.tokens[1].id, 1);
  EXPECT_EQ(r.tokens[1].text, "<bos>");
}

TEST(ProbeProperty, TopKIsPrefixOfTopKPlusOne) {
  const Model& m = ts::toy_model();
  Xorshift64Star rng(53);
  for (int trial = 0; trial < 10; ++trial) {
    const Vector e = toy_embedding(ts::random_sentence(rng));
    for (std::size_t k = 1; k <= 8; ++k) {
      const auto a = top_k_tokens(m, e, k);
      const auto b = top_k_tokens(m, e, k + 1);
      for (std::size_t i = 0; i < k; ++i) ASSERT_EQ(a.tokens[i].id, b.tokens[i].id);
    }
  }
}

TEST(Probe, RejectsBadK) {
  const Model& m = ts::toy_model();
  EXPECT_THROW(top_k_tokens(m, Vector(32, 0.0), 0), ConfigError);
  EXPECT_THROW(top_k_tokens(m, Vector(32, 0.0), 261), ConfigError);
  EXPECT_THROW(top_k_tokens(m, Vector(8, 0.0), 1), ShapeError);
}

TEST(Probe, JsonShape) {
  const Model& m = ts::toy_model();
  const auto j = top_k_tokens(m, toy_embedding("json"), 8).to_json();
  EXPECT_EQ(j["k"], 8);
  ASSERT_EQ(j["tokens"].size(), 8u);
  EXPECT_TRUE(j["tokens"][0][0].is_string());
  EXPECT_TRUE(j["tokens"][0][1].is_number());
}
