// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "pnas/net_builder.hpp"
#include "pnas/search.hpp"

using namespace pnas;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// ---- 1: combinatorics -------------------------------------------------------

Outcome combinatorics() {
  Outcome o;
  o.check(enumerate_blocks(1).size() == 256, "|blocks(1)| != 256");
  o.check(enumerate_blocks(2).size() == 576, "|blocks(2)| != 576");
  o.check(unique_one_block_cells().size() == 136, "unique 1-block cells != 136");
  BigInt product = 1;
  for (int b = 1; b <= 5; ++b) product *= BigInt((b + 1) * (b + 1) * 64);
  const SpaceSize s = count_space(5);
  o.check(s.raw == product, "raw B=5 size != product");
  o.check(s.raw == BigInt(556627761561600LL), "raw B=5 size != 556627761561600");
  const auto raw_level2 = static_cast<std::int64_t>(enumerate_blocks(1).size() * enumerate_blocks(2).size());
  o.check(raw_level2 == 147456, "depth-2 raw candidates != 147456");
  o.note("raw B=5 = " + s.raw.str());
  return o;
}

// ---- 2: budget identity -------------------------------------------------------

Outcome budget() {
  Outcome o;
  const auto oracle = default_oracle_config();
  SyntheticEvaluator ev(oracle);
  OracleSurrogate perfect(oracle);
  SearchConfig cfg;
  cfg.max_blocks = 5;
  cfg.beam = 256;
  const auto t = pnas_search(cfg, ev, perfect);
  o.check(t.m1 == 1160 && t.records.size() == 1160, "PNAS evaluated " + std::to_string(t.m1) + " models");
  const BigInt pnas_cost = compute_cost(t, 900'000, 0, 0);
  o.check(pnas_cost == BigInt(1'044'000'000), "PNAS cost " + pnas_cost.str());
  const BigInt nas_cost = compute_cost(20000, 900'000, 250, 13'500'000);
  o.check(nas_cost == BigInt(21'375'000'000LL), "NASNet cost " + nas_cost.str());
  o.check(compute_cost(250, 13'500'000, 0, 0) == BigInt(3'375'000'000LL), "rerank term");
  o.note("PNAS " + pnas_cost.str() + ", NASNet " + nas_cost.str());
  return o;
}

// ---- 3: search efficiency, and traces for 9 ---------------------------------

constexpr int kEfficiencyTrials = 5;

struct EfficiencyRun {
  std::string pnas_trace;
  std::string random_trace;
  SearchTrace pnas;
  SearchTrace random;
};

EfficiencyRun efficiency_trial(int t) {
  EfficiencyRun r;
  SearchConfig cfg;
  cfg.max_blocks = 5;
  cfg.beam = 64;
  cfg.seed = static_cast<std::uint64_t>(t);
  cfg.predictor = "mlp-ens";
  SyntheticEvaluator ev(default_oracle_config(0.01, 0));
  auto s = make_surrogate(cfg.predictor, cfg.predictor_config, derive_seed(cfg.seed, "predictor"));
  std::ostringstream pt, rt;
  TraceWriter pw(pt), rw(rt);
  r.pnas = pnas_search(cfg, ev, *s, &pw);
  r.random = random_search(static_cast<int>(r.pnas.m1), 5, ev, cfg.seed, &rw);
  r.pnas_trace = pt.str();
  r.random_trace = rt.str();
  return r;
}

double best_of(const SearchTrace& t) {
  double best = 0.0;
  for (const auto& r : t.records) best = std::max(best, r.accuracy);
  return best;
}

bool curves_nondecreasing(const std::vector<TopMPoint>& pts) {
  std::map<int, double> last;
  for (const auto& p : pts) {
    if (last.count(p.m) && p.mean < last[p.m]) return false;
    last[p.m] = p.mean;
  }
  return last.size() == 3;
}

Outcome efficiency(std::vector<EfficiencyRun>& runs) {
  Outcome o;
  const auto t0 = Clock::now();
  int wins = 0;
  std::vector<SearchTrace> pnas_traces, random_traces;
  std::string per_trial;
  for (int t = 0; t < kEfficiencyTrials; ++t) {
    runs.push_back(efficiency_trial(t));
    const double p = best_of(runs.back().pnas);
    const double r = best_of(runs.back().random);
    wins += p > r;
    per_trial += (t ? " " : "") + fmt(p) + "/" + fmt(r);
    pnas_traces.push_back(runs.back().pnas);
    random_traces.push_back(runs.back().random);
  }
  const double elapsed = seconds_since(t0);
  o.check(wins >= 4, "PNAS won only " + std::to_string(wins) + " of 5");
  o.check(curves_nondecreasing(top_m_curve(pnas_traces, {1, 5, 25})), "PNAS top-M curve decreases");
  o.check(curves_nondecreasing(top_m_curve(random_traces, {1, 5, 25})), "random top-M curve decreases");
  o.check(elapsed < 300.0, "took " + fmt(elapsed, 1) + " s");
  o.note("wins " + std::to_string(wins) + "/5, pnas/random " + per_trial + ", M1 " +
         std::to_string(pnas_traces.front().m1) + ", " + fmt(elapsed, 1) + " s");
  return o;
}

// ---- 4: harness pattern ---------------------------------------------------------

Outcome harness_pattern() {
  Outcome o;
  const auto t0 = Clock::now();
  HarnessConfig h;
  h.trials = 5;
  h.sample_size = 64;
  h.pool_size = 1000;
  h.max_blocks = 5;
  SyntheticEvaluator ev(default_oracle_config());
  const auto rep = predictor_harness(h, ev);
  for (const auto& row : rep.rows) {
    std::string line = row.predictor + ":";
    for (const auto& l : row.levels) {
      o.check(l.rho_within > l.rho_next, row.predictor + " b=" + std::to_string(l.level) + " rho_hat " +
                                             fmt(l.rho_within) + " <= rho_tilde " + fmt(l.rho_next));
      line += " " + fmt(l.rho_within, 2) + ">" + fmt(l.rho_next, 2);
    }
    o.check(!row.levels.empty() && row.levels.front().rho_within >= 0.8,
            row.predictor + " rho_hat_1 " + fmt(row.levels.front().rho_within));
    o.note(line);
  }
  o.check(rep.rows.size() == 4, "expected 4 predictor rows");
  const double elapsed = seconds_since(t0);
  o.check(elapsed < 600.0, "took " + fmt(elapsed, 1) + " s");
  o.note(fmt(elapsed, 1) + " s");
  return o;
}

// ---- 5: gradients ----------------------------------------------------------------

Outcome gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  for (auto kind : {PredictorKind::mlp, PredictorKind::rnn}) {
    double worst = 0.0;
    int checked = 0;
    for (int draw = 0; checked < 20 && draw < 40; ++draw) {
      PredictorConfig c;
      c.kind = kind;
      c.seed = static_cast<std::uint64_t>(draw);
      Predictor p(c);
      Rng rng(static_cast<std::uint64_t>(draw) + 100);
      for (auto& g : p.mutable_params()) detail::fill_uniform(g.value, 0.5, rng);
      const CellSpec cell = random_cell(1 + static_cast<int>(rng.below(5)), rng);
      const auto r = p.gradient_check({cell, rng.uniform()}, static_cast<std::uint64_t>(draw));
      if (r.excluded) continue;
      ++checked;
      worst = std::max(worst, r.max_relative_error);
    }
    o.check(checked == 20, std::string(predictor_kind_name(kind)) + " only " + std::to_string(checked) + " draws");
    o.check(worst < 1e-4, std::string(predictor_kind_name(kind)) + " max rel err " + std::to_string(worst));
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", worst);
    o.note(std::string(predictor_kind_name(kind)) + " max rel err " + buf);
  }
  const double elapsed = seconds_since(t0);
  o.check(elapsed < 60.0, "took " + fmt(elapsed, 1) + " s");
  return o;
}

// ---- 6: ensemble variance ---------------------------------------------------------

double mean_prediction_variance(const std::string& name, const std::vector<TrainingExample>& data,
                                const std::vector<CellSpec>& held_out, int refits, int parallelism) {
  std::vector<std::vector<double>> preds;
  for (int s = 0; s < refits; ++s) {
    auto sur = make_surrogate(name, {}, 1000 + static_cast<std::uint64_t>(s), std::nullopt, parallelism);
    sur->fit(data, 1);
    preds.push_back(sur->predict(held_out));
  }
  double total = 0.0;
  for (std::size_t j = 0; j < held_out.size(); ++j) {
    double mean = 0.0;
    for (const auto& p : preds) mean += p[j];
    mean /= refits;
    double ss = 0.0;
    for (const auto& p : preds) ss += (p[j] - mean) * (p[j] - mean);
    total += ss / (refits - 1);
  }
  return total / static_cast<double>(held_out.size());
}

Outcome ensemble_variance() {
  Outcome o;
  const auto t0 = Clock::now();
  SyntheticEvaluator ev(default_oracle_config(0.01, 0));
  // Train on a 64-cell sample of level 1, as the harness does; hold out the
  // other one-block cells and 200 random two-block cells.
  auto cells = unique_one_block_cells();
  Rng rng(77);
  rng.shuffle(cells);
  const std::vector<CellSpec> train(cells.begin(), cells.begin() + 64);
  const auto recs = ev.evaluate(EvalRequest{train, 20, StackPlan::cifar(2, 24), 0});
  std::vector<TrainingExample> data;
  for (std::size_t i = 0; i < train.size(); ++i) data.push_back({train[i], recs[i].accuracy});
  std::vector<CellSpec> held_out(cells.begin() + 64, cells.end());
  for (int i = 0; i < 200; ++i) held_out.push_back(random_cell(2, rng));
  const int threads = static_cast<int>(std::clamp(std::thread::hardware_concurrency(), 1u, 5u));
  for (const std::string kind : {"mlp", "rnn"}) {
    const double single = mean_prediction_variance(kind, data, held_out, 20, 1);
    const double ens = mean_prediction_variance(kind + "-ens", data, held_out, 20, threads);
    o.check(ens <= single, kind + " ensemble variance " + std::to_string(ens) + " > single " + std::to_string(single));
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s var single %.3e ens %.3e", kind.c_str(), single, ens);
    o.note(buf);
  }
  const double elapsed = seconds_since(t0);
  o.check(elapsed < 300.0, "took " + fmt(elapsed, 1) + " s");
  o.note(fmt(elapsed, 1) + " s");
  return o;
}

// ---- 7: spearman -------------------------------------------------------------------

Outcome spearman_oracle() {
  Outcome o;
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
  o.check(close(spearman({1, 2, 3, 4, 5}, {1, 2, 3, 4, 5}), 1.0), "identical");
  o.check(close(spearman({1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}), -1.0), "reversed");
  o.check(close(spearman({1, 2, 3, 4}, {1, 3, 2, 4}), 0.8), "4-point case");
  // Brute force: average ranks by counting, then Pearson on the ranks.
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r;
    for (double x : v) {
      double less = 0, eq = 0;
      for (double y : v) less += y < x, eq += y == x;
      r.push_back(less + (eq + 1) / 2);
    }
    return r;
  };
  auto pearson = [](const std::vector<double>& a, const std::vector<double>& b) {
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
  };
  const std::vector<double> base{1, 2, 2, 3, 4};
  const std::vector<double> ref{1, 2, 3, 4, 5};
  std::vector<int> perm{0, 1, 2, 3, 4};
  int bad = 0, total = 0;
  do {
    std::vector<double> x;
    for (int i : perm) x.push_back(base[static_cast<std::size_t>(i)]);
    bad += !close(spearman(x, ref), pearson(ranks(x), ranks(ref)));
    bad += average_ranks(x) != ranks(x);
    ++total;
  } while (std::next_permutation(perm.begin(), perm.end()));
  o.check(bad == 0, std::to_string(bad) + " tie mismatches");
  o.note(std::to_string(total) + " permutations checked");
  return o;
}

// ---- 8: cost model -------------------------------------------------------------------

Outcome cost_model() {
  Outcome o;
  const auto pn = count_costs(build_network(pnasnet5_cell(), StackPlan::cifar(3, 48)));
  o.check(pn.params >= 2'560'000 && pn.params <= 3'840'000, "PNASNet-5 params " + std::to_string(pn.params));
  const CellSpec identity({BlockSpec{InputIndex{0}, InputIndex{1}, Operator::identity, Operator::identity}});
  const auto g = build_network(identity, StackPlan::cifar(1, 8));
  for (const auto& n : g.nodes) {
    if (n.kind == NodeKind::identity) o.check(node_cost(n, g) == CostReport{0, 0}, "identity node has cost");
  }
  detail::GraphBuilder b;
  const int in = b.add(NodeKind::input, {}, Shape{32, 32, 24});
  b.separable(in, 3, 1, 24);
  std::int64_t ma = 0;
  for (const auto& n : b.graph.nodes) ma += node_cost(n, b.graph).mult_adds;
  o.check(ma == 1'622'016, "separable 3x3 mult-adds " + std::to_string(ma));
  o.note("PNASNet-5 params " + std::to_string(pn.params) + ", mult-adds " + std::to_string(pn.mult_adds));
  return o;
}

// ---- 9: reproducibility ------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PNAS_CLI) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Outcome reproducibility(const std::vector<EfficiencyRun>& first) {
  Outcome o;
  if (!first.empty()) {
    const auto again = efficiency_trial(0);
    o.check(again.pnas_trace == first.front().pnas_trace, "PNAS trace differs on rerun");
    o.check(again.random_trace == first.front().random_trace, "random trace differs on rerun");
  } else {
    o.check(false, "no efficiency run to compare");
  }
  const fs::path dir = fs::temp_directory_path() / ("pnas_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const std::string a = (dir / "a").string(), b = (dir / "b").string();
  const std::string ra = (dir / "ra").string(), rb = (dir / "rb").string();
  o.check(run_cli("search -B 3 -K 8 --predictor rnn-ens --seed 7 --out " + a) == 0, "CLI search failed");
  o.check(run_cli("search --from-manifest " + a + "/manifest.json --out " + b) == 0, "CLI replay failed");
  o.check(run_cli("search --strategy random -B 5 --count 500 --seed 7 --out " + ra) == 0, "CLI random failed");
  o.check(run_cli("search --from-manifest " + ra + "/manifest.json --out " + rb) == 0, "CLI random replay failed");
  const std::string ta = slurp(a + "/trace.jsonl");
  o.check(!ta.empty() && ta == slurp(b + "/trace.jsonl"), "CLI PNAS traces differ");
  const std::string tra = slurp(ra + "/trace.jsonl");
  o.check(!tra.empty() && tra == slurp(rb + "/trace.jsonl"), "CLI random traces differ");
  fs::remove_all(dir);
  o.note("library and CLI traces byte-identical");
  return o;
}

// ---- 10: ten blocks ---------------------------------------------------------------

Outcome ten_blocks() {
  Outcome o;
  const auto t0 = Clock::now();
  SearchConfig cfg;
  cfg.max_blocks = 10;
  cfg.beam = 16;
  cfg.predictor = "mlp-ens";
  SyntheticEvaluator ev(default_oracle_config(0.01, 0));
  auto s = make_surrogate(cfg.predictor, cfg.predictor_config, derive_seed(cfg.seed, "predictor"));
  const auto t = pnas_search(cfg, ev, *s);
  const double elapsed = seconds_since(t0);
  o.check(t.levels.size() == 10, "expected 10 levels");
  std::string bests;
  for (const auto& l : t.levels) {
    o.check(!l.best_key.empty() && parse_cell_key(l.best_key).num_blocks() == l.level,
            "level " + std::to_string(l.level) + " has no best cell");
    bests += (bests.empty() ? "" : " ") + fmt(l.best_accuracy);
  }
  o.check(elapsed < 300.0, "took " + fmt(elapsed, 1) + " s");
  o.note("best per level " + bests + ", " + fmt(elapsed, 1) + " s");
  return o;
}

}  // namespace

int main() {
  std::vector<EfficiencyRun> runs;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"combinatorics", combinatorics},
      {"budget identity", budget},
      {"search efficiency", [&] { return efficiency(runs); }},
      {"predictor harness pattern", harness_pattern},
      {"gradient correctness", gradients},
      {"ensemble variance", ensemble_variance},
      {"spearman oracle", spearman_oracle},
      {"cost model", cost_model},
      {"reproducibility", [&] { return reproducibility(runs); }},
      {"ten-block search", ten_blocks},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << i + 1 << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
