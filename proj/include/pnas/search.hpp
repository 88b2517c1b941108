#pragma once

// Progressive search loop, random-search baseline, predictor evaluation
// harness, rank correlation, top-M curves and search-cost accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <queue>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include "pnas/cell_space.hpp"
#include "pnas/error.hpp"
#include "pnas/evaluation.hpp"
#include "pnas/net_builder.hpp"
#include "pnas/rng.hpp"
#include "pnas/surrogate.hpp"

namespace pnas {

// ---- rank correlation --------------------------------------------------

/// Ranks starting at 1; tied values share the mean of their ranks.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation: Pearson correlation of average ranks.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw ValidationError("spearman: length mismatch (" + std::to_string(x.size()) + " vs " +
                          std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw ValidationError("spearman: need at least 2 points");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x[i]) || std::isnan(y[i])) throw ValidationError("spearman: NaN input");
  }
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mean = 0.5 * (static_cast<double>(x.size()) + 1.0);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelationError("spearman: zero rank variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---- surrogates --------------------------------------------------------

/// Scores cells with the noise-free synthetic oracle; ignores training data.
class OracleSurrogate : public Surrogate {
 public:
  explicit OracleSurrogate(SyntheticOracleConfig cfg) : cfg_(cfg) {}
  void fit(const std::vector<TrainingExample>&, int) override {}
  std::vector<double> predict(const std::vector<CellSpec>& cells) const override {
    std::vector<double> out;
    out.reserve(cells.size());
    for (const auto& c : cells) out.push_back(oracle_noise_free(cfg_, c));
    return out;
  }
  std::string name() const override { return "perfect"; }

 private:
  SyntheticOracleConfig cfg_;
};

/// Predictor names: mlp, rnn, mlp-ens, rnn-ens, perfect. `perfect` needs the
/// synthetic oracle configuration.
inline std::unique_ptr<Surrogate> make_surrogate(std::string_view name, PredictorConfig base, std::uint64_t seed,
                                                 const std::optional<SyntheticOracleConfig>& oracle = std::nullopt,
                                                 int parallelism = 1) {
  if (name == "perfect") {
    if (!oracle) throw ConfigError("the perfect predictor needs the synthetic evaluator");
    return std::make_unique<OracleSurrogate>(*oracle);
  }
  const bool ensemble = name.size() > 4 && name.substr(name.size() - 4) == "-ens";
  base.kind = parse_predictor_kind(ensemble ? name.substr(0, name.size() - 4) : name);
  base.seed = seed;
  return std::make_unique<Ensemble>(base, ensemble ? Ensemble::kDefaultSize : 1, parallelism);
}

// ---- traces ------------------------------------------------------------

/// One trace line: {event, level, cell_key, value, seed}.
struct TraceEvent {
  std::string event;  ///< eval | predict | select | fit
  int level = 0;
  std::string cell_key;
  double value = 0.0;
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const {
    return nlohmann::ordered_json{
        {"event", event}, {"level", level}, {"cell_key", cell_key}, {"value", value}, {"seed", seed}};
  }
};

/// Append-only JSON-lines writer; flushes after every batch so a failed run
/// leaves the trace up to the last completed step on disk.
class TraceWriter {
 public:
  TraceWriter() = default;
  explicit TraceWriter(std::ostream& out) : out_(&out) {}
  explicit TraceWriter(const std::string& path) : file_(std::make_unique<std::ofstream>(path)), out_(file_.get()) {
    if (!*file_) throw Error("cannot write trace '" + path + "'");
  }

  void write(const std::vector<TraceEvent>& events) {
    if (!out_) return;
    for (const auto& e : events) *out_ << e.to_json().dump() << '\n';
    out_->flush();
  }

 private:
  std::unique_ptr<std::ofstream> file_;
  std::ostream* out_ = nullptr;
};

struct LevelResult {
  int level = 0;
  std::vector<CellSpec> cells;  ///< S_b in evaluation order (cell_key order)
  std::vector<std::string> keys;
  std::vector<double> predicted;  ///< empty at level 1
  std::vector<double> measured;
  std::int64_t raw_candidates = 0;  ///< children before any deduplication
  std::int64_t unique_candidates = 0;  ///< after canonical deduplication across parents
  std::string best_key;
  double best_accuracy = 0.0;
};

enum class SearchKind { pnas, random };

struct SearchTrace {
  SearchKind kind = SearchKind::pnas;
  std::vector<LevelResult> levels;
  std::vector<EvalRecord> records;  ///< evaluation sequence
  std::int64_t m1 = 0;
  std::int64_t e1 = 0;
  std::int64_t m2 = 0;
  std::int64_t e2 = 0;
  std::string best_key;
  double best_accuracy = 0.0;
};

struct SearchConfig {
  int max_blocks = 5;  ///< B
  int epochs = 20;  ///< E
  int filters = 24;  ///< F
  int beam = 256;  ///< K
  int repeats = 2;  ///< N
  std::string predictor = "mlp-ens";
  std::uint64_t seed = 0;
  int trials = 1;
  int parallelism = 1;
  std::int64_t examples_per_epoch = 45000;
  bool trace_all_predictions = false;
  PredictorConfig predictor_config;

  StackPlan plan() const { return StackPlan::cifar(repeats, filters); }
  std::int64_t examples_per_model() const { return static_cast<std::int64_t>(epochs) * examples_per_epoch; }

  void validate() const {
    if (beam < 1) throw ConfigError("beam size K must be >= 1");
    if (max_blocks < 1 || max_blocks > kMaxBlocks) {
      throw ConfigError("B must be in [1, " + std::to_string(kMaxBlocks) + "]");
    }
    if (epochs < 1) throw ConfigError("E must be >= 1");
    if (filters < 1 || repeats < 1) throw ConfigError("F and N must be >= 1");
    if (trials < 1) throw ConfigError("trials must be >= 1");
    if (examples_per_epoch < 1) throw ConfigError("examples per epoch must be >= 1");
    predictor_config.validate();
  }
};

/// Evaluation seed of a run.
inline std::uint64_t eval_seed(std::uint64_t master) { return derive_seed(master, "evaluator") % 1000003ULL; }

namespace detail {

inline std::vector<EvalRecord> checked_evaluate(Evaluator& evaluator, const EvalRequest& req, int level,
                                                TraceWriter* writer) {
  auto records = evaluator.evaluate(req);
  if (records.size() != req.cells.size()) {
    throw ContractError("evaluator returned " + std::to_string(records.size()) + " records for " +
                        std::to_string(req.cells.size()) + " cells");
  }
  std::vector<TraceEvent> events;
  std::string failures;
  for (const auto& r : records) {
    if (r.ok()) {
      events.push_back({"eval", level, r.cell_key, r.accuracy, r.seed});
    } else {
      failures += (failures.empty() ? "" : "; ") + r.cell_key + ": " + *r.error;
    }
  }
  if (writer) writer->write(events);
  if (!failures.empty()) throw EvaluatorError("evaluation failed at level " + std::to_string(level) + ": " + failures);
  return records;
}

inline void set_best(LevelResult& lr) {
  for (std::size_t i = 0; i < lr.measured.size(); ++i) {
    if (lr.best_key.empty() || lr.measured[i] > lr.best_accuracy ||
        (lr.measured[i] == lr.best_accuracy && lr.keys[i] < lr.best_key)) {
      lr.best_key = lr.keys[i];
      lr.best_accuracy = lr.measured[i];
    }
  }
}

inline void sort_by_key(std::vector<CellSpec>& cells) {
  std::vector<std::pair<std::string, CellSpec>> keyed;
  for (auto& c : cells) keyed.emplace_back(cell_key(c), std::move(c));
  std::sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  cells.clear();
  for (auto& [k, c] : keyed) cells.push_back(std::move(c));
}

}  // namespace detail

/// Indices of the `k` largest scores; equal scores are ordered by key.
inline std::vector<std::size_t> top_k(const std::vector<double>& scores, const std::vector<std::string>& keys,
                                      std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return keys[a] < keys[b];
  };
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  return idx;
}

/// The progressive search. Level 1 evaluates every unique 1-block cell; each
/// later level expands the current beam by one block, deduplicates the
/// children across parents, keeps the K best by predicted accuracy, trains
/// them and refits the predictor on everything evaluated so far.
inline SearchTrace pnas_search(const SearchConfig& cfg, Evaluator& evaluator, Surrogate& surrogate,
                               TraceWriter* writer = nullptr) {
  cfg.validate();
  SearchTrace trace;
  trace.kind = SearchKind::pnas;
  trace.e1 = cfg.examples_per_model();
  const std::uint64_t seed = eval_seed(cfg.seed);
  std::vector<TrainingExample> data;

  auto run_level = [&](LevelResult& lr) {
    EvalRequest req{lr.cells, cfg.epochs, cfg.plan(), seed};
    auto records = detail::checked_evaluate(evaluator, req, lr.level, writer);
    for (std::size_t i = 0; i < records.size(); ++i) {
      lr.keys.push_back(records[i].cell_key);
      lr.measured.push_back(records[i].accuracy);
      data.push_back({lr.cells[i], records[i].accuracy});
      trace.records.push_back(std::move(records[i]));
    }
    detail::set_best(lr);
    trace.m1 += static_cast<std::int64_t>(lr.cells.size());
    if (lr.level < cfg.max_blocks) {
      surrogate.fit(data, lr.level);
      if (writer) writer->write({{"fit", lr.level, "", static_cast<double>(data.size()), cfg.seed}});
    }
  };

  LevelResult first;
  first.level = 1;
  first.cells = unique_one_block_cells();
  first.raw_candidates = raw_children_count(1);
  first.unique_candidates = static_cast<std::int64_t>(first.cells.size());
  detail::sort_by_key(first.cells);
  run_level(first);
  trace.levels.push_back(std::move(first));

  for (int b = 2; b <= cfg.max_blocks; ++b) {
    LevelResult lr;
    lr.level = b;
    std::vector<CellSpec> candidates;
    std::vector<std::string> keys;
    std::unordered_set<std::string> seen;
    for (const auto& parent : trace.levels.back().cells) {
      lr.raw_candidates += raw_children_count(b);
      for (auto& child : expand_cell(parent, cfg.max_blocks)) {
        std::string key = cell_key(child);
        if (seen.insert(key).second) {
          keys.push_back(std::move(key));
          candidates.push_back(std::move(child));
        }
      }
    }
    lr.unique_candidates = static_cast<std::int64_t>(candidates.size());
    const auto predicted = surrogate.predict(candidates);
    const auto chosen = top_k(predicted, keys, static_cast<std::size_t>(cfg.beam));

    std::vector<TraceEvent> events;
    if (cfg.trace_all_predictions) {
      std::vector<std::size_t> all(candidates.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      std::sort(all.begin(), all.end(), [&](std::size_t a, std::size_t c) { return keys[a] < keys[c]; });
      for (std::size_t i : all) events.push_back({"predict", b, keys[i], predicted[i], cfg.seed});
    } else {
      std::vector<std::size_t> sel = chosen;
      std::sort(sel.begin(), sel.end(), [&](std::size_t a, std::size_t c) { return keys[a] < keys[c]; });
      for (std::size_t i : sel) events.push_back({"predict", b, keys[i], predicted[i], cfg.seed});
    }
    for (std::size_t r = 0; r < chosen.size(); ++r) {
      events.push_back({"select", b, keys[chosen[r]], static_cast<double>(r), cfg.seed});
    }
    if (writer) writer->write(events);

    std::vector<std::size_t> order = chosen;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return keys[a] < keys[c]; });
    for (std::size_t i : order) {
      lr.cells.push_back(candidates[i]);
      lr.predicted.push_back(predicted[i]);
    }
    run_level(lr);
    trace.levels.push_back(std::move(lr));
  }
  const auto& last = trace.levels.back();
  trace.best_key = last.best_key;
  trace.best_accuracy = last.best_accuracy;
  return trace;
}

/// Uniformly samples `count` cells of exactly `blocks` blocks (uniform
/// per-block choice, then canonicalization) and evaluates them. The trace
/// keeps sampling order, which is the evaluation sequence.
inline SearchTrace random_search(int count, int blocks, Evaluator& evaluator, std::uint64_t seed,
                                 TraceWriter* writer = nullptr, int epochs = 20, StackPlan plan = StackPlan::cifar(2, 24),
                                 std::int64_t examples_per_epoch = 45000) {
  if (count < 1) throw ConfigError("random search count must be >= 1");
  check_position(blocks, "block count");
  Rng rng(derive_seed(seed, "random-search"));
  LevelResult lr;
  lr.level = blocks;
  for (int i = 0; i < count; ++i) lr.cells.push_back(random_cell(blocks, rng));
  SearchTrace trace;
  trace.kind = SearchKind::random;
  trace.e1 = static_cast<std::int64_t>(epochs) * examples_per_epoch;
  EvalRequest req{lr.cells, epochs, plan, eval_seed(seed)};
  auto records = detail::checked_evaluate(evaluator, req, blocks, writer);
  for (auto& r : records) {
    lr.keys.push_back(r.cell_key);
    lr.measured.push_back(r.accuracy);
    trace.records.push_back(std::move(r));
  }
  detail::set_best(lr);
  trace.m1 = count;
  trace.best_key = lr.best_key;
  trace.best_accuracy = lr.best_accuracy;
  trace.levels.push_back(std::move(lr));
  return trace;
}

// ---- top-M curves -------------------------------------------------------

struct TopMPoint {
  std::int64_t models = 0;  ///< number of models evaluated so far
  int m = 0;
  double mean = 0.0;  ///< mean over trials of the mean accuracy of the best m models
  double stderr_ = 0.0;  ///< standard error of that mean across trials
  int trials = 0;
};

/// Running mean accuracy of the best m models in one evaluation sequence;
/// entry n-1 is for the first n models (NaN while fewer than m are seen).
inline std::vector<double> running_top_m(const std::vector<double>& accuracies, int m) {
  std::vector<double> out;
  std::priority_queue<double, std::vector<double>, std::greater<>> best;
  double sum = 0.0;
  for (double a : accuracies) {
    if (static_cast<int>(best.size()) < m) {
      best.push(a);
      sum += a;
    } else if (a > best.top()) {
      sum += a - best.top();
      best.pop();
      best.push(a);
    }
    out.push_back(static_cast<int>(best.size()) == m ? sum / m : std::nan(""));
  }
  return out;
}

/// Points exist for every prefix length all trials reach and where at least
/// m models have been seen.
inline std::vector<TopMPoint> top_m_curve(const std::vector<SearchTrace>& trials, const std::vector<int>& ms) {
  if (trials.empty()) throw ValidationError("top_m_curve needs at least one trace");
  std::vector<std::vector<double>> seqs;
  std::size_t len = std::numeric_limits<std::size_t>::max();
  for (const auto& t : trials) {
    std::vector<double> acc;
    for (const auto& r : t.records) {
      if (r.ok()) acc.push_back(r.accuracy);
    }
    if (acc.empty()) throw ValidationError("top_m_curve: trace has no evaluations");
    len = std::min(len, acc.size());
    seqs.push_back(std::move(acc));
  }
  std::vector<TopMPoint> out;
  for (int m : ms) {
    if (m < 1) throw ValidationError("top_m_curve: M must be >= 1");
    std::vector<std::vector<double>> curves;
    for (const auto& s : seqs) curves.push_back(running_top_m(s, m));
    for (std::size_t n = static_cast<std::size_t>(m); n <= len; ++n) {
      TopMPoint p;
      p.models = static_cast<std::int64_t>(n);
      p.m = m;
      p.trials = static_cast<int>(curves.size());
      double sum = 0.0;
      for (const auto& c : curves) sum += c[n - 1];
      p.mean = sum / p.trials;
      if (p.trials > 1) {
        double ss = 0.0;
        for (const auto& c : curves) ss += (c[n - 1] - p.mean) * (c[n - 1] - p.mean);
        p.stderr_ = std::sqrt(ss / (p.trials - 1)) / std::sqrt(static_cast<double>(p.trials));
      }
      out.push_back(p);
    }
  }
  return out;
}

inline void write_top_m_csv(std::ostream& out, const std::vector<TopMPoint>& points) {
  out << "models,m,mean,stderr,trials\n";
  for (const auto& p : points) {
    out << p.models << ',' << p.m << ',' << detail::format_double(p.mean) << ','
        << detail::format_double(p.stderr_) << ',' << p.trials << '\n';
  }
}

// ---- cost accounting ------------------------------------------------------

using BigInt = boost::multiprecision::cpp_int;

/// Examples processed through SGD: M1*E1 + M2*E2.
inline BigInt compute_cost(std::int64_t m1, std::int64_t e1, std::int64_t m2, std::int64_t e2) {
  return BigInt(m1) * e1 + BigInt(m2) * e2;
}

/// Cost of a search trace; PNAS has no reranking stage, so its M2 and E2
/// are taken as zero whatever is passed.
inline BigInt compute_cost(const SearchTrace& trace, std::int64_t e1, std::int64_t m2, std::int64_t e2) {
  if (trace.kind == SearchKind::pnas) m2 = e2 = 0;
  return compute_cost(trace.m1, e1, m2, e2);
}

// ---- predictor harness -----------------------------------------------------

struct HarnessConfig {
  int trials = 20;  ///< T
  int sample_size = 256;  ///< K
  int pool_size = 10000;  ///< R
  int max_blocks = 5;
  std::vector<std::string> predictors = {"mlp", "rnn", "mlp-ens", "rnn-ens"};
  std::uint64_t seed = 0;
  int epochs = 20;
  int parallelism = 1;
  PredictorConfig predictor_config;

  void validate() const {
    if (trials < 1) throw ConfigError("harness T must be >= 1");
    if (sample_size < 2) throw ConfigError("harness K must be >= 2");
    if (pool_size < 2) throw ConfigError("harness R must be >= 2");
    if (sample_size > pool_size) {
      throw ConfigError("harness K (" + std::to_string(sample_size) + ") exceeds pool size R (" +
                        std::to_string(pool_size) + ")");
    }
    if (max_blocks < 2 || max_blocks > kMaxBlocks) throw ConfigError("harness B must be in [2, 10]");
    if (predictors.empty()) throw ConfigError("harness needs at least one predictor");
  }
};

struct LevelCorrelation {
  int level = 0;  ///< b: trained on size-b cells, extrapolating to b+1
  double rho_within = 0.0;  ///< mean over trials of the within-level correlation
  double rho_next = 0.0;  ///< mean over trials of the next-level correlation
  std::vector<double> within_trials;
  std::vector<double> next_trials;
};

struct PredictorCorrelation {
  std::string predictor;
  std::vector<LevelCorrelation> levels;
};

struct CorrelationReport {
  std::vector<PredictorCorrelation> rows;
  int max_blocks = 0;
};

/// Random pools: level 1 is every unique 1-block cell, level b >= 2 is
/// `pool_size` distinct random b-block cells.
inline std::vector<std::vector<CellSpec>> harness_pools(const HarnessConfig& cfg) {
  std::vector<std::vector<CellSpec>> pools(static_cast<std::size_t>(cfg.max_blocks) + 1);
  pools[1] = unique_one_block_cells();
  for (int b = 2; b <= cfg.max_blocks; ++b) {
    Rng rng(derive_seed(derive_seed(cfg.seed, "harness-pool"), static_cast<std::uint64_t>(b)));
    std::unordered_set<std::string> seen;
    auto& pool = pools[static_cast<std::size_t>(b)];
    while (static_cast<int>(pool.size()) < cfg.pool_size) {
      CellSpec c = random_cell(b, rng);
      if (seen.insert(cell_key(c)).second) pool.push_back(std::move(c));
    }
  }
  return pools;
}

/// For each predictor, level b = 1..B-1 and trial t: fit on a random sample
/// of K size-b cells, correlate predictions with the truth on that sample
/// and on the whole size-(b+1) pool.
inline CorrelationReport predictor_harness(const HarnessConfig& cfg, Evaluator& evaluator,
                                           const std::optional<SyntheticOracleConfig>& oracle = std::nullopt) {
  cfg.validate();
  const auto pools = harness_pools(cfg);
  std::vector<std::vector<double>> truth(pools.size());
  const std::uint64_t seed = eval_seed(cfg.seed);
  for (int b = 1; b <= cfg.max_blocks; ++b) {
    EvalRequest req{pools[static_cast<std::size_t>(b)], cfg.epochs, StackPlan::cifar(2, 24), seed};
    for (const auto& r : detail::checked_evaluate(evaluator, req, b, nullptr)) {
      truth[static_cast<std::size_t>(b)].push_back(r.accuracy);
    }
  }
  CorrelationReport report;
  report.max_blocks = cfg.max_blocks;
  for (const auto& name : cfg.predictors) {
    PredictorCorrelation row;
    row.predictor = name;
    for (int b = 1; b < cfg.max_blocks; ++b) {
      LevelCorrelation lc;
      lc.level = b;
      const auto& pool = pools[static_cast<std::size_t>(b)];
      const auto& next_pool = pools[static_cast<std::size_t>(b) + 1];
      const auto& next_truth = truth[static_cast<std::size_t>(b) + 1];
      for (int t = 0; t < cfg.trials; ++t) {
        const std::uint64_t trial_seed =
            derive_seed(derive_seed(cfg.seed, "harness-trial"), static_cast<std::uint64_t>(b * 1000 + t));
        Rng rng(trial_seed);
        std::vector<std::size_t> idx(pool.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        rng.shuffle(idx);
        idx.resize(std::min(idx.size(), static_cast<std::size_t>(cfg.sample_size)));
        std::vector<TrainingExample> sample;
        std::vector<CellSpec> cells;
        std::vector<double> actual;
        for (std::size_t i : idx) {
          sample.push_back({pool[i], truth[static_cast<std::size_t>(b)][i]});
          cells.push_back(pool[i]);
          actual.push_back(truth[static_cast<std::size_t>(b)][i]);
        }
        auto surrogate = make_surrogate(name, cfg.predictor_config, trial_seed, oracle, cfg.parallelism);
        surrogate->fit(sample, b);
        lc.within_trials.push_back(spearman(surrogate->predict(cells), actual));
        lc.next_trials.push_back(spearman(surrogate->predict(next_pool), next_truth));
      }
      lc.rho_within = std::accumulate(lc.within_trials.begin(), lc.within_trials.end(), 0.0) / cfg.trials;
      lc.rho_next = std::accumulate(lc.next_trials.begin(), lc.next_trials.end(), 0.0) / cfg.trials;
      row.levels.push_back(std::move(lc));
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

/// One row per predictor: rho_hat_1, rho_tilde_2, rho_hat_2, rho_tilde_3, ...
inline void write_correlation_csv(std::ostream& out, const CorrelationReport& report) {
  out << "predictor";
  for (int b = 1; b < report.max_blocks; ++b) out << ",rho_hat_" << b << ",rho_tilde_" << b + 1;
  out << '\n';
  for (const auto& row : report.rows) {
    out << row.predictor;
    for (const auto& lc : row.levels) {
      out << ',' << detail::format_double(lc.rho_within) << ',' << detail::format_double(lc.rho_next);
    }
    out << '\n';
  }
}

}  // namespace pnas
