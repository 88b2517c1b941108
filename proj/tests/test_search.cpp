#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "pnas/search.hpp"

using namespace pnas;

namespace {

// Average ranks by counting, independent of the sort-based implementation.
std::vector<double> counted_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double x : v) {
      less += x < v[i];
      equal += x == v[i];
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

SearchConfig small_search(int blocks, int beam, std::uint64_t seed = 0) {
  SearchConfig c;
  c.max_blocks = blocks;
  c.beam = beam;
  c.seed = seed;
  c.predictor = "mlp";
  c.predictor_config.embed_dim = 16;
  c.predictor_config.hidden = 16;
  return c;
}

std::vector<nlohmann::json> parse_trace(const std::string& text) {
  std::vector<nlohmann::json> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

std::string run_traced(const SearchConfig& cfg, Evaluator& ev, const std::optional<SyntheticOracleConfig>& oracle) {
  std::ostringstream out;
  TraceWriter w(out);
  auto s = make_surrogate(cfg.predictor, cfg.predictor_config, derive_seed(cfg.seed, "predictor"), oracle);
  pnas_search(cfg, ev, *s, &w);
  return out.str();
}

EvalRecord record(const std::string& key, double accuracy) {
  EvalRecord r;
  r.cell_key = key;
  r.accuracy = accuracy;
  return r;
}

class FailingEvaluator : public Evaluator {
 public:
  explicit FailingEvaluator(int fail_on_call) : inner_(default_oracle_config()), fail_on_call_(fail_on_call) {}
  std::vector<EvalRecord> evaluate(const EvalRequest& r) override {
    auto recs = inner_.evaluate(r);
    if (++calls_ == fail_on_call_) recs.back().error = "out of memory";
    return recs;
  }
  std::string tag() const override { return "failing"; }

 private:
  SyntheticEvaluator inner_;
  int fail_on_call_;
  int calls_ = 0;
};

}  // namespace

// ---- spearman ----------------------------------------------------------------------

TEST(Spearman, IdenticalAndReversed) {
  EXPECT_NEAR(spearman({1, 2, 3}, {1, 2, 3}), 1.0, 1e-12);
  EXPECT_NEAR(spearman({1, 2, 3}, {3, 2, 1}), -1.0, 1e-12);
}

TEST(Spearman, HandComputedFourPoints) { EXPECT_NEAR(spearman({1, 2, 3, 4}, {1, 3, 2, 4}), 0.8, 1e-12); }

TEST(Spearman, AverageRanksForTies) {
  EXPECT_EQ(average_ranks({10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(Spearman, TiesMatchBruteForceOverAllPermutations) {
  const std::vector<double> base{1, 2, 2, 3, 4};
  std::vector<int> perm{0, 1, 2, 3, 4};
  const std::vector<double> y{0.3, 0.1, 0.4, 0.9, 0.2};
  int checked = 0;
  do {
    std::vector<double> x;
    for (int i : perm) x.push_back(base[static_cast<std::size_t>(i)]);
    EXPECT_EQ(average_ranks(x), counted_ranks(x));
    EXPECT_NEAR(spearman(x, y), pearson(counted_ranks(x), counted_ranks(y)), 1e-12);
    ++checked;
  } while (std::next_permutation(perm.begin(), perm.end()));
  EXPECT_EQ(checked, 120);
}

TEST(Spearman, Errors) {
  EXPECT_THROW(spearman({1, 2}, {1, 2, 3}), ValidationError);
  EXPECT_THROW(spearman({1}, {1}), ValidationError);
  EXPECT_THROW(spearman({1, 1, 1}, {1, 2, 3}), UndefinedCorrelationError);
  EXPECT_THROW(spearman({1, 2, 3}, {4, 4, 4}), UndefinedCorrelationError);
}

// ---- pnas_search ---------------------------------------------------------------------

TEST(PnasSearch, OneLevelIsExhaustive) {
  SyntheticEvaluator ev(default_oracle_config());
  auto s = make_surrogate("mlp", {}, 1);
  const auto t = pnas_search(small_search(1, 4), ev, *s);
  ASSERT_EQ(t.records.size(), 136u);
  EXPECT_EQ(t.m1, 136);
  const auto best = std::max_element(t.records.begin(), t.records.end(),
                                     [](const auto& a, const auto& b) { return a.accuracy < b.accuracy; });
  EXPECT_EQ(t.best_key, best->cell_key);
  EXPECT_EQ(t.best_accuracy, best->accuracy);
}

TEST(PnasSearch, BudgetIdentity) {
  const auto oracle = default_oracle_config();
  SyntheticEvaluator ev(oracle);
  auto s = make_surrogate("perfect", {}, 0, oracle);
  SearchConfig cfg = small_search(5, 256);
  const auto t = pnas_search(cfg, ev, *s);
  EXPECT_EQ(t.records.size(), 1160u);
  EXPECT_EQ(t.m1, 1160);
  EXPECT_EQ(t.m2, 0);
  EXPECT_EQ(t.e2, 0);
  ASSERT_EQ(t.levels.size(), 5u);
  EXPECT_EQ(t.levels[0].cells.size(), 136u);
  for (std::size_t b = 1; b < 5; ++b) EXPECT_EQ(t.levels[b].cells.size(), 256u);
  EXPECT_EQ(t.levels[1].raw_candidates, 136 * 576);
  EXPECT_EQ(t.levels[1].unique_candidates, 136 * 300);
  EXPECT_EQ(compute_cost(t, 900'000, 5, 5), BigInt(1'044'000'000));
}

TEST(PnasSearch, PerfectPredictorFindsBeamTreeArgmax) {
  const auto oracle = default_oracle_config(0.0);
  SyntheticEvaluator ev(oracle);
  auto s = make_surrogate("perfect", {}, 0, oracle);
  const auto t = pnas_search(small_search(3, 8), ev, *s);

  // Independent beam over the oracle: keep the 8 best (ties by key) per level.
  auto score = [&](const CellSpec& c) { return oracle_noise_free(oracle, c); };
  auto keep_top = [&](std::vector<CellSpec> cells, std::size_t k) {
    std::sort(cells.begin(), cells.end(), [&](const CellSpec& a, const CellSpec& b) {
      return score(a) != score(b) ? score(a) > score(b) : cell_key(a) < cell_key(b);
    });
    if (cells.size() > k) cells.resize(k);
    return cells;
  };
  std::vector<CellSpec> beam = unique_one_block_cells();
  for (int b = 2; b <= 3; ++b) {
    std::map<std::string, CellSpec> children;
    for (const auto& p : beam) {
      for (const auto& c : expand_cell(p)) children.emplace(cell_key(c), c);
    }
    std::vector<CellSpec> all;
    for (auto& [k, c] : children) all.push_back(c);
    beam = keep_top(all, 8);
  }
  EXPECT_EQ(t.best_key, cell_key(keep_top(beam, 1).front()));
}

TEST(PnasSearch, SelectionTakesTopPredictionsWithKeyTieBreak) {
  SyntheticEvaluator ev(default_oracle_config());
  SearchConfig cfg = small_search(3, 10);
  cfg.trace_all_predictions = true;
  const auto events = parse_trace(run_traced(cfg, ev, std::nullopt));
  for (int level = 2; level <= 3; ++level) {
    std::vector<std::pair<double, std::string>> predicted;
    std::vector<std::string> selected;
    for (const auto& e : events) {
      if (e["level"] != level) continue;
      if (e["event"] == "predict") predicted.emplace_back(e["value"].get<double>(), e["cell_key"].get<std::string>());
      if (e["event"] == "select") selected.push_back(e["cell_key"].get<std::string>());
    }
    std::sort(predicted.begin(), predicted.end(),
              [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    ASSERT_EQ(selected.size(), 10u);
    for (std::size_t r = 0; r < 10; ++r) EXPECT_EQ(selected[r], predicted[r].second) << "level " << level;
    std::set<std::string> unique;
    for (const auto& p : predicted) unique.insert(p.second);
    EXPECT_EQ(unique.size(), predicted.size());
  }
}

TEST(PnasSearch, TraceEventOrder) {
  SyntheticEvaluator ev(default_oracle_config());
  const auto events = parse_trace(run_traced(small_search(3, 5), ev, std::nullopt));
  std::vector<std::string> shape;
  for (const auto& e : events) {
    const std::string tag = e["event"].get<std::string>() + std::to_string(e["level"].get<int>());
    if (shape.empty() || shape.back() != tag) shape.push_back(tag);
    EXPECT_EQ(e.size(), 5u);
  }
  EXPECT_EQ(shape, (std::vector<std::string>{"eval1", "fit1", "predict2", "select2", "eval2", "fit2", "predict3",
                                             "select3", "eval3"}));
  std::string prev;
  for (const auto& e : events) {
    if (e["event"] != "eval" || e["level"] != 1) continue;
    EXPECT_LT(prev, e["cell_key"].get<std::string>());
    prev = e["cell_key"];
  }
}

TEST(PnasSearch, ReproducibleTraces) {
  SyntheticEvaluator a(default_oracle_config(0.01, 3));
  SyntheticEvaluator b(default_oracle_config(0.01, 3));
  EXPECT_EQ(run_traced(small_search(3, 8, 5), a, std::nullopt), run_traced(small_search(3, 8, 5), b, std::nullopt));
  EXPECT_NE(run_traced(small_search(3, 8, 5), a, std::nullopt), run_traced(small_search(3, 8, 6), a, std::nullopt));
}

TEST(PnasSearch, TabularDumpReproducesSyntheticTrace) {
  const auto oracle = default_oracle_config(0.01, 8);
  SyntheticEvaluator synth(oracle);
  const SearchConfig cfg = small_search(3, 8, 2);
  auto s = make_surrogate(cfg.predictor, cfg.predictor_config, derive_seed(cfg.seed, "predictor"));
  std::ostringstream first;
  TraceWriter w(first);
  const auto trace = pnas_search(cfg, synth, *s, &w);
  std::stringstream table_text;
  AccuracyTable::write(table_text, trace.records);
  TabularEvaluator tab(AccuracyTable::parse(table_text));
  EXPECT_EQ(run_traced(cfg, tab, std::nullopt), first.str());
}

TEST(PnasSearch, EvaluatorFailureKeepsPartialTrace) {
  FailingEvaluator ev(2);
  std::ostringstream out;
  TraceWriter w(out);
  auto s = make_surrogate("mlp", small_search(3, 4).predictor_config, 1);
  EXPECT_THROW(pnas_search(small_search(3, 4), ev, *s, &w), EvaluatorError);
  const auto events = parse_trace(out.str());
  const auto evals1 = std::count_if(events.begin(), events.end(),
                                    [](const auto& e) { return e["event"] == "eval" && e["level"] == 1; });
  EXPECT_EQ(evals1, 136);
  EXPECT_TRUE(std::any_of(events.begin(), events.end(), [](const auto& e) { return e["event"] == "fit"; }));
  EXPECT_TRUE(std::any_of(events.begin(), events.end(),
                          [](const auto& e) { return e["event"] == "eval" && e["level"] == 2; }));
}

TEST(PnasSearch, ConfigValidation) {
  SearchConfig c;
  c.beam = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SearchConfig{};
  c.max_blocks = 11;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SearchConfig{};
  EXPECT_EQ(c.beam, 256);
  EXPECT_EQ(c.max_blocks, 5);
  EXPECT_EQ(c.filters, 24);
  EXPECT_EQ(c.repeats, 2);
  EXPECT_EQ(c.epochs, 20);
  EXPECT_THROW(make_surrogate("perfect", {}, 0), ConfigError);
  EXPECT_THROW(make_surrogate("svm", {}, 0), ConfigError);
  EXPECT_EQ(make_surrogate("rnn-ens", {}, 0)->name(), "rnn-ens");
}

// ---- random search -----------------------------------------------------------------

TEST(RandomSearch, CountsAndSamplingOrder) {
  SyntheticEvaluator ev(default_oracle_config());
  std::ostringstream out;
  TraceWriter w(out);
  const auto t = random_search(6000, 5, ev, 1, &w);
  EXPECT_EQ(t.records.size(), 6000u);
  EXPECT_EQ(t.m1, 6000);
  Rng rng(derive_seed(1, "random-search"));
  const auto events = parse_trace(out.str());
  ASSERT_EQ(events.size(), 6000u);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(events[i]["cell_key"], cell_key(random_cell(5, rng)));
}

TEST(RandomSearch, SingleSample) {
  SyntheticEvaluator ev(default_oracle_config());
  const auto t = random_search(1, 5, ev, 2);
  ASSERT_EQ(t.records.size(), 1u);
  EXPECT_EQ(t.best_accuracy, t.records[0].accuracy);
  EXPECT_EQ(top_m_curve({t}, {1}).front().mean, t.records[0].accuracy);
  EXPECT_THROW(random_search(0, 5, ev, 2), ConfigError);
}

TEST(RandomSearch, EqualSeedsGiveIdenticalTraces) {
  SyntheticEvaluator ev(default_oracle_config());
  std::ostringstream a, b;
  TraceWriter wa(a), wb(b);
  random_search(300, 4, ev, 9, &wa);
  random_search(300, 4, ev, 9, &wb);
  EXPECT_EQ(a.str(), b.str());
}

// ---- top-M curves ---------------------------------------------------------------

TEST(TopM, RunningMeanOfBestM) {
  EXPECT_EQ(running_top_m({0.5, 0.7, 0.6, 0.9}, 1), (std::vector<double>{0.5, 0.7, 0.7, 0.9}));
  const auto two = running_top_m({0.5, 0.7, 0.6, 0.9}, 2);
  ASSERT_EQ(two.size(), 4u);
  EXPECT_NEAR(two[1], 0.6, 1e-15);
  EXPECT_NEAR(two[2], 0.65, 1e-15);
  EXPECT_NEAR(two[3], 0.8, 1e-15);
}

TEST(TopM, PointsBeforeMModelsAreOmitted) {
  SearchTrace t;
  for (double a : {0.1, 0.2, 0.3}) t.records.push_back(record("k", a));
  const auto pts = top_m_curve({t}, {1, 5});
  std::size_t m5 = 0;
  for (const auto& p : pts) m5 += p.m == 5;
  EXPECT_EQ(m5, 0u);
  EXPECT_EQ(pts.size(), 3u);
  EXPECT_THROW(top_m_curve({}, {1}), ValidationError);
}

TEST(TopM, MeanAndStandardErrorAcrossTrials) {
  SearchTrace a, b;
  a.records = {record("x", 0.2), record("y", 0.6)};
  b.records = {record("x", 0.4), record("y", 0.3)};
  const auto pts = top_m_curve({a, b}, {1});
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_NEAR(pts[0].mean, 0.3, 1e-15);
  EXPECT_NEAR(pts[0].stderr_, 0.1, 1e-15);
  EXPECT_NEAR(pts[1].mean, 0.5, 1e-15);
  EXPECT_EQ(pts[1].trials, 2);
}

TEST(TopM, CurvesAreNondecreasing) {
  SyntheticEvaluator ev(default_oracle_config());
  std::vector<SearchTrace> trials;
  for (std::uint64_t s = 0; s < 3; ++s) trials.push_back(random_search(200, 3, ev, s));
  const auto pts = top_m_curve(trials, {1, 5, 25});
  std::map<int, double> last;
  for (const auto& p : pts) {
    if (last.count(p.m)) {
      EXPECT_GE(p.mean, last[p.m]);
    }
    last[p.m] = p.mean;
  }
  EXPECT_EQ(last.size(), 3u);
}

// ---- cost ------------------------------------------------------------------------

TEST(ComputeCost, ReferenceCounters) {
  EXPECT_EQ(compute_cost(1160, 900'000, 0, 0), BigInt(1'044'000'000));
  EXPECT_EQ(compute_cost(20000, 900'000, 250, 13'500'000), BigInt(21'375'000'000LL));
  EXPECT_EQ(compute_cost(250, 13'500'000, 0, 0), BigInt(3'375'000'000LL));
  EXPECT_EQ(compute_cost(7, 11, 0, 0), BigInt(77));
  EXPECT_EQ(compute_cost(std::numeric_limits<std::int64_t>::max(), 4, 0, 0),
            BigInt(std::numeric_limits<std::int64_t>::max()) * 4);
}

TEST(ComputeCost, RandomTracesKeepRerankingTerms) {
  SearchTrace t;
  t.kind = SearchKind::random;
  t.m1 = 10;
  EXPECT_EQ(compute_cost(t, 100, 2, 1000), BigInt(3000));
}

// ---- harness ----------------------------------------------------------------------

TEST(Harness, PerfectPredictorCorrelatesPerfectly) {
  const auto oracle = default_oracle_config(0.0);
  SyntheticEvaluator ev(oracle);
  HarnessConfig h;
  h.trials = 2;
  h.sample_size = 32;
  h.pool_size = 100;
  h.max_blocks = 4;
  h.predictors = {"perfect"};
  const auto rep = predictor_harness(h, ev, oracle);
  ASSERT_EQ(rep.rows.size(), 1u);
  ASSERT_EQ(rep.rows[0].levels.size(), 3u);
  for (const auto& l : rep.rows[0].levels) {
    EXPECT_NEAR(l.rho_within, 1.0, 1e-12);
    EXPECT_NEAR(l.rho_next, 1.0, 1e-12);
  }
  std::ostringstream csv;
  write_correlation_csv(csv, rep);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')),
            "predictor,rho_hat_1,rho_tilde_2,rho_hat_2,rho_tilde_3,rho_hat_3,rho_tilde_4");
}

TEST(Harness, PoolsUseAllOneBlockCellsThenDistinctRandomCells) {
  HarnessConfig h;
  h.pool_size = 50;
  h.max_blocks = 3;
  const auto pools = harness_pools(h);
  EXPECT_EQ(pools[1].size(), 136u);
  for (int b = 2; b <= 3; ++b) {
    std::set<std::string> keys;
    for (const auto& c : pools[static_cast<std::size_t>(b)]) {
      EXPECT_EQ(c.num_blocks(), b);
      keys.insert(cell_key(c));
    }
    EXPECT_EQ(keys.size(), 50u);
  }
}

TEST(Harness, ConfigErrors) {
  HarnessConfig h;
  h.sample_size = 100;
  h.pool_size = 50;
  EXPECT_THROW(h.validate(), ConfigError);
  h = HarnessConfig{};
  h.predictors.clear();
  EXPECT_THROW(h.validate(), ConfigError);
  h = HarnessConfig{};
  EXPECT_EQ(h.trials, 20);
  EXPECT_EQ(h.sample_size, 256);
  EXPECT_EQ(h.pool_size, 10000);
}
