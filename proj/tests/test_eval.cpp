#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "cpembed/eval.hpp"
#include "test_support.hpp"

using namespace cpembed;
namespace ts = testing_support;

namespace {

// Spearman oracle: O(n^2) counting ranks and a two-pass Pearson.
double oracle_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (double w : v) {
        less += w < v[i];
        equal += w == v[i];
      }
      r[i] = less + (equal + 1) / 2;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i] / rx.size();
    my += ry[i] / ry.size();
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// Looks sentences up in a fixed table.
class TableEmbedder : public Embedder {
 public:
  explicit TableEmbedder(std::map<std::string, Vector> table, std::string key = "table")
      : table_(std::move(table)), key_(std::move(key)) {}
  Vector embed(const std::string& s) const override {
    ++calls;
    return table_.at(s);
  }
  std::string cache_key() const override { return key_; }
  mutable std::atomic<int> calls{0};

 private:
  std::map<std::string, Vector> table_;
  std::string key_;
};

Vector at_angle(double theta) { return Vector{std::cos(theta), std::sin(theta)}; }

// Records "a<i>" vs "b<i>" with distinct gold scores.
std::vector<STSRecord> synthetic_records(std::size_t n) {
  std::vector<STSRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"a" + std::to_string(i), "b" + std::to_string(i), 5.0 * double(i) / double(n)});
  }
  return out;
}

// cos(pair i) increases with gold when `aligned`; otherwise scrambled.
std::map<std::string, Vector> synthetic_table(std::size_t n, bool aligned, std::uint64_t seed) {
  std::map<std::string, Vector> t;
  Xorshift64Star rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = aligned ? double(i) / double(n) : rng.uniform01();
    t["a" + std::to_string(i)] = Vector{1.0, 0.0};
    t["b" + std::to_string(i)] = at_angle((1.0 - frac) * std::numbers::pi / 2);
  }
  return t;
}

std::vector<STSRecord> toy_records() { return load_sts(std::string(CPEMBED_TEST_DATA) + "/sts_toy.tsv"); }

SteeringConfig toy_cfg(Strategy s = Strategy::norm_scaling) {
  SteeringConfig c;
  c.layer = 2;
  c.strategy = s;
  c.alpha = 2.0;
  c.output_layer = 4;
  return c;
}

}  // namespace

TEST(LoadSts, ParsesRowsAndSkipsHeader) {
  std::istringstream in("s1\ts2\tscore\nA cat.\tA dog.\t1.5\n\nOne.\tTwo.\t4\n");
  const auto rs = parse_sts(in);
  ASSERT_EQ(rs.size(), 2u);
  EXPECT_EQ(rs[0].sentence_a, "A cat.");
  EXPECT_EQ(rs[1].gold_score, 4.0);
  EXPECT_EQ(toy_records().size(), 20u);
}

TEST(LoadSts, NonNumericScoreNamesLine) {
  std::istringstream in("a\tb\t1\nc\td\t2\ne\tf\t3\ng\th\t4\ni\tj\tabc\n");
  try {
    parse_sts(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 5u);
    EXPECT_NE(std::string(e.what()).find("line 5"), std::string::npos);
  }
}

TEST(LoadSts, OutOfRangeScore) {
  std::istringstream in("a\tb\t7.2\n");
  EXPECT_THROW(parse_sts(in), RangeError);
  std::istringstream neg("a\tb\t1\nc\td\t-0.5\n");
  EXPECT_THROW(parse_sts(neg), RangeError);
}

TEST(LoadSts, WrongColumnCount) {
  std::istringstream in("a\tb\n");
  EXPECT_THROW(parse_sts(in), ParseError);
  EXPECT_THROW(load_sts("/nonexistent/file.tsv"), DataError);
}

TEST(Spearman, ExactForMonotone) {
  EXPECT_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
}

TEST(Spearman, TiedExample) {
  EXPECT_NEAR(spearman({1, 2, 2, 3}, {1, 3, 2, 4}), 0.9486832980505137996, 1e-15);
}

TEST(Spearman, AverageRanks) {
  EXPECT_EQ(average_ranks({10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(Spearman, DegenerateInputs) {
  EXPECT_THROW(spearman({1}, {2}), DegenerateError);
  EXPECT_THROW(spearman({1, 1, 1}, {1, 2, 3}), DegenerateError);
  EXPECT_THROW(spearman({1, 2}, {1, 2, 3}), ShapeError);
}

TEST(SpearmanProperty, MatchesOracle) {
  Xorshift64Star rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    const bool tied = trial % 2 == 0;
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = tied ? double(rng.below(5)) : rng.uniform(-1, 1);
      y[i] = tied ? double(rng.below(5)) : rng.uniform(-1, 1);
    }
    x[0] = 0.0, x[1] = 10.0;  // keep variance nonzero
    y[0] = 0.0, y[1] = 10.0;
    ASSERT_NEAR(spearman(x, y), oracle_spearman(x, y), 1e-12);
  }
}

TEST(SpearmanProperty, InvariantUnderMonotoneTransform) {
  Xorshift64Star rng(43);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.below(40);
    std::vector<double> x(n), y(n), fx(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.uniform(-2, 2);
      y[i] = rng.uniform(-2, 2);
      fx[i] = std::exp(3 * x[i]) + 7;
    }
    EXPECT_EQ(spearman(x, y), spearman(fx, y));
  }
}

TEST(EvaluateSts, IdenticalSentencesAreDegenerate) {
  std::vector<STSRecord> rs{{"x", "x", 1.0}, {"x", "x", 4.0}, {"x", "x", 2.0}};
  const TableEmbedder e({{"x", Vector{1, 2}}});
  const auto r = evaluate_sts(e, rs, "same");
  EXPECT_FALSE(r.spearman_rho.has_value());
  EXPECT_FALSE(r.diagnostic.empty());
}

TEST(EvaluateSts, AlignedStubGivesPerfectRho) {
  const auto rs = synthetic_records(30);
  const TableEmbedder e(synthetic_table(30, true, 0));
  const auto r = evaluate_sts(e, rs, "stub");
  ASSERT_TRUE(r.spearman_rho);
  EXPECT_EQ(*r.spearman_rho, 1.0);
  EXPECT_EQ(r.n_pairs, 30u);
}

TEST(EvaluateSts, ZeroEmbeddingNamesPair) {
  std::vector<STSRecord> rs{{"a", "b", 1.0}, {"a", "z", 2.0}};
  const TableEmbedder e({{"a", Vector{1, 0}}, {"b", Vector{0, 1}}, {"z", Vector{0, 0}}});
  try {
    evaluate_sts(e, rs, "zero");
    FAIL() << "expected DegenerateError";
  } catch (const DegenerateError& err) {
    EXPECT_NE(std::string(err.what()).find("pair 1"), std::string::npos) << err.what();
  }
}

TEST(EvaluateSts, ToyModelMatchesReference) {
  const Model& m = ts::toy_model();
  const auto& r = ts::toy_reference();
  const auto rs = toy_records();
  const auto cfg = toy_cfg();
  const CpEmbedder e(m, {templates::prompt_eol()}, templates::irrelevant(), {cfg});
  const auto report = evaluate_sts(e, rs, "toy");
  ref::CpSpec spec;
  spec.layer = 2, spec.site = ref::kAttn, spec.strategy = ref::kNS, spec.alpha = 2.0;
  spec.output_layer = 4;
  std::vector<double> cos, gold;
  for (const auto& rec : rs) {
    const auto a = ref::cp_embedding(r, rec.sentence_a, templates::prompt_eol().text(),
                                     templates::irrelevant().text(), spec);
    const auto b = ref::cp_embedding(r, rec.sentence_b, templates::prompt_eol().text(),
                                     templates::irrelevant().text(), spec);
    cos.push_back(ref::cosine(a, b));
    gold.push_back(rec.gold_score);
  }
  for (std::size_t i = 0; i < rs.size(); ++i) EXPECT_NEAR(report.per_pair[i].first, cos[i], 1e-9);
  ASSERT_TRUE(report.spearman_rho);
  EXPECT_NEAR(*report.spearman_rho, oracle_spearman(cos, gold), 1e-9);
}

TEST(EvaluateSts, DeterministicAcrossJobsAndCache) {
  const Model& m = ts::toy_model();
  const auto rs = toy_records();
  const CpEmbedder e(m, {templates::prompt_eol()}, templates::irrelevant(), {toy_cfg()});
  const auto serial = evaluate_sts(e, rs, "toy").to_json().dump();
  EmbeddingCache cache;
  const auto threaded = evaluate_sts(e, rs, "toy", {4, &cache}).to_json().dump();
  EXPECT_EQ(serial, threaded);
  const auto cached = evaluate_sts(e, rs, "toy", {4, &cache}).to_json().dump();
  EXPECT_EQ(serial, cached);
  EXPECT_EQ(cache.size(), 40u);
}

TEST(EvaluateSts, CacheAvoidsRecomputation) {
  const auto rs = synthetic_records(10);
  const TableEmbedder e(synthetic_table(10, true, 0));
  EmbeddingCache cache;
  evaluate_sts(e, rs, "stub", {1, &cache});
  EXPECT_EQ(e.calls.load(), 20);
  evaluate_sts(e, rs, "stub", {1, &cache});
  EXPECT_EQ(e.calls.load(), 20);
  evaluate_sts(e, rs, "stub", {1, nullptr});
  EXPECT_EQ(e.calls.load(), 40);
}

TEST(EvaluateSts, ReportRoundTripsThroughJson) {
  const auto rs = synthetic_records(5);
  const TableEmbedder e(synthetic_table(5, false, 9));
  const auto r = evaluate_sts(e, rs, "stub");
  const auto back = EvalReport::from_json(r.to_json());
  EXPECT_EQ(back.to_json().dump(), r.to_json().dump());
}

TEST(GridSearch, SingleCell) {
  const auto rs = synthetic_records(12);
  const auto g = grid_search(
      [&](int, double) { return std::make_unique<TableEmbedder>(synthetic_table(12, true, 0)); },
      rs, {3}, {1.0});
  ASSERT_TRUE(g.best);
  EXPECT_EQ(g.cells.size(), 1u);
  EXPECT_EQ(*g.cells[*g.best].rho, 1.0);
}

TEST(GridSearch, FindsPlantedOptimum) {
  const auto rs = synthetic_records(25);
  const auto g = grid_search(
      [&](int l, double a) {
        return std::make_unique<TableEmbedder>(
            synthetic_table(25, l == 4 && a == 3.0, std::uint64_t(l * 10 + a)));
      },
      rs, {3, 4, 5}, {1.0, 2.0, 3.0});
  ASSERT_TRUE(g.best);
  EXPECT_EQ(g.cells[*g.best].layer, 4);
  EXPECT_EQ(g.cells[*g.best].alpha, 3.0);
  EXPECT_EQ(g.cells.size(), 9u);
  EXPECT_NE(g.to_tsv().find('*'), std::string::npos);
}

TEST(GridSearch, TiesPreferSmallerLayerThenAlpha) {
  const auto rs = synthetic_records(10);
  const auto g = grid_search(
      [&](int l, double) {
        return std::make_unique<TableEmbedder>(synthetic_table(10, l >= 5, 1));
      },
      rs, {6, 5, 4}, {3.0, 1.0});
  ASSERT_TRUE(g.best);
  EXPECT_EQ(g.cells[*g.best].layer, 5);
  EXPECT_EQ(g.cells[*g.best].alpha, 1.0);
}

TEST(GridSearch, FailedCellsAreRecorded) {
  const Model& m = ts::toy_model();
  const auto rs = toy_records();
  const std::vector<STSRecord> dev(rs.begin(), rs.begin() + 6);
  const auto g = grid_search(m, templates::prompt_eol(), templates::irrelevant(), dev, {1, 9},
                             {2.0}, toy_cfg());
  ASSERT_EQ(g.cells.size(), 2u);
  EXPECT_TRUE(g.cells[0].rho.has_value());
  EXPECT_FALSE(g.cells[1].rho.has_value());
  EXPECT_FALSE(g.cells[1].error.empty());
  EXPECT_EQ(*g.best, 0u);
}

TEST(OutputLayerSweep, SingleLayerRange) {
  const Model& m = ts::toy_model();
  const auto rs = toy_records();
  const auto out = output_layer_sweep(m, templates::prompt_eol(), templates::irrelevant(),
                                      toy_cfg(), rs, 4, 4);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].layer, 4);
}

TEST(OutputLayerSweep, MatchesPerLayerEvaluation) {
  const Model& m = ts::toy_model();
  const auto rs = toy_records();
  const auto cfg = toy_cfg();
  const auto sweep = output_layer_sweep(m, templates::prompt_eol(), templates::irrelevant(), cfg,
                                        rs, 1, 4);
  ASSERT_EQ(sweep.size(), 4u);
  for (const auto& s : sweep) {
    auto c = cfg;
    c.output_layer = s.layer;
    if (s.layer < cfg.layer) {
      c.strategy = Strategy::none;
      c.layer = 1;
    }
    const CpEmbedder e(m, {templates::prompt_eol()}, templates::irrelevant(), {c});
    const auto r = evaluate_sts(e, rs, "toy");
    ASSERT_TRUE(s.rho && r.spearman_rho) << s.layer;
    EXPECT_EQ(*s.rho, *r.spearman_rho) << s.layer;
  }
  EXPECT_THROW(output_layer_sweep(m, templates::prompt_eol(), templates::irrelevant(), cfg, rs, 0,
                                  4),
               ConfigError);
}

TEST(Diff, SelfDiffIsZero) {
  EvalRun run;
  EvalReport r;
  r.dataset = "a";
  r.spearman_rho = 0.5;
  run.reports = {r};
  const auto rows = diff_reports(run, run);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].delta, 0.0);
  EXPECT_NE(render_diff(rows).find("\t="), std::string::npos);
}

TEST(Diff, ArithmeticAndIncompatibility) {
  EvalRun a, b, c;
  EvalReport r1, r2;
  r1.dataset = "x";
  r1.spearman_rho = 0.70;
  r2.dataset = "y";
  r2.spearman_rho = 0.40;
  a.reports = {r1, r2};
  r1.spearman_rho = 0.75;
  r2.spearman_rho = 0.30;
  b.reports = {r1, r2};
  const auto rows = diff_reports(a, b);
  EXPECT_NEAR(rows[0].delta, 0.05, 1e-15);
  EXPECT_NEAR(rows[1].delta, -0.10, 1e-15);
  const auto text = render_diff(rows);
  EXPECT_NE(text.find("x\t70.0000\t75.0000\t+5.0000\tup"), std::string::npos) << text;
  EXPECT_NE(text.find("y\t40.0000\t30.0000\t-10.0000\tdown"), std::string::npos) << text;
  c.reports = {r1};
  EXPECT_THROW(diff_reports(a, c), DataError);
  EXPECT_THROW(diff_reports(c, a), DataError);
}

TEST(EvalRun, JsonRoundTrip) {
  EvalRun run;
  EvalReport r;
  r.dataset = "a";
  r.n_pairs = 2;
  r.spearman_rho = 0.25;
  r.per_pair = {{0.1, 1.0}, {0.2, 2.0}};
  run.reports = {r};
  run.normal_layers = 10;
  run.auxiliary_layers = 4;
  const auto j = run.to_json();
  EXPECT_EQ(j["forward_layers"]["total"], 14);
  EXPECT_EQ(EvalRun::from_json(j).to_json().dump(), j.dump());
  EXPECT_THROW(EvalRun::from_json(nlohmann::json{{"reports", {{{"n", 1}}}}}), DataError);
}
