// pnas: command-line driver for search, predictor harness, space counting
// and network building. See README.md for the run-directory layout.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pnas/cell_space.hpp"
#include "pnas/evaluation.hpp"
#include "pnas/net_builder.hpp"
#include "pnas/run.hpp"
#include "pnas/search.hpp"

namespace fs = std::filesystem;
using namespace pnas;

namespace {

// Options not recorded in the manifest snapshot.
bool is_meta_option(const CLI::Option* o) {
  const std::string n = o->get_name(false, false);
  return n == "--help" || n == "--config" || n == "--from-manifest";
}

std::string option_key(const CLI::Option* o) {
  const auto& lnames = o->get_lnames();
  if (lnames.empty()) throw ContractError("option without a long name: " + o->get_name());
  return lnames.front();
}

std::map<std::string, std::string> snapshot(const CLI::App& sub) {
  std::map<std::string, std::string> out;
  for (const CLI::Option* o : sub.get_options()) {
    if (is_meta_option(o)) continue;
    std::string value;
    if (o->count() > 0) {
      const auto& res = o->results();
      for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
    } else {
      value = o->get_default_str();
    }
    if (o->get_expected_max() == 0 && value.empty()) value = "false";
    out[option_key(o)] = value;
  }
  return out;
}

// Fills options the user did not pass on the command line.
void apply_items(CLI::App& sub, const std::vector<std::pair<std::string, std::vector<std::string>>>& items,
                 const std::string& source) {
  for (const auto& [name, values] : items) {
    CLI::Option* o = sub.get_option_no_throw("--" + name);
    if (!o || is_meta_option(o)) throw ConfigError(source + ": unknown key '" + name + "'");
    if (o->count() > 0) continue;
    try {
      for (const auto& v : values) o->add_result(v);
      o->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError(source + ": bad value for '" + name + "': " + e.what());
    }
  }
}

void apply_config_file(CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::vector<std::pair<std::string, std::vector<std::string>>> items;
  try {
    for (const auto& it : CLI::ConfigINI().from_config(in)) {
      if (it.name == "++" || it.name == "--") continue;  // section markers
      items.emplace_back(it.name, it.inputs);
    }
  } catch (const CLI::Error& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  apply_items(sub, items, "config file '" + path + "'");
}

void apply_manifest(CLI::App& sub, const std::string& path) {
  const RunManifest m = RunManifest::read(path);
  if (m.command != sub.get_name()) {
    throw ConfigError("manifest '" + path + "' records command '" + m.command + "', not '" + sub.get_name() + "'");
  }
  std::vector<std::pair<std::string, std::vector<std::string>>> items;
  for (const auto& [k, v] : m.config) {
    CLI::Option* o = sub.get_option_no_throw("--" + k);
    std::vector<std::string> values;
    if (o && o->get_items_expected_max() > 1 && !v.empty()) {
      std::stringstream ss(v);
      for (std::string part; std::getline(ss, part, ',');) values.push_back(part);
    } else {
      values.push_back(v);
    }
    items.emplace_back(k, values);
  }
  apply_items(sub, items, "manifest '" + path + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

// ---- evaluator options shared by search and harness ------------------------

struct EvaluatorOptions {
  std::string backend = "synthetic";
  double noise = 0.01;
  bool monotone = false;
  std::string table;
  std::string worker;
  int worker_retries = 2;
  int workers = 1;
  double worker_timeout = 0.0;

  void add_to(CLI::App& sub) {
    sub.add_option("--evaluator", backend, "synthetic | tabular | external")
        ->check(CLI::IsMember({"synthetic", "tabular", "external"}));
    sub.add_option("--noise", noise, "synthetic oracle noise stddev")->check(CLI::NonNegativeNumber);
    sub.add_flag("--monotone", monotone, "synthetic oracle with raw counts and nonnegative weights");
    sub.add_option("--table", table, "accuracy table CSV for --evaluator tabular");
    sub.add_option("--worker", worker, "worker command for --evaluator external");
    sub.add_option("--worker-retries", worker_retries, "extra attempts after a worker crash")
        ->check(CLI::NonNegativeNumber);
    sub.add_option("--workers", workers, "worker processes per batch")->check(CLI::PositiveNumber);
    sub.add_option("--worker-timeout", worker_timeout, "seconds per attempt, 0 disables")
        ->check(CLI::NonNegativeNumber);
  }

  std::optional<SyntheticOracleConfig> oracle(const RunSeeds& seeds) const {
    if (backend != "synthetic") return std::nullopt;
    SyntheticOracleConfig c = default_oracle_config(noise, seeds.oracle);
    if (monotone) {
      c = c.monotone();
      c.noise_stddev = noise;
    }
    return c;
  }

  std::unique_ptr<Evaluator> make(const RunSeeds& seeds) const {
    if (backend == "synthetic") return std::make_unique<SyntheticEvaluator>(*oracle(seeds));
    if (backend == "tabular") {
      if (table.empty()) throw ConfigError("--evaluator tabular needs --table");
      return std::make_unique<TabularEvaluator>(TabularEvaluator::from_file(table));
    }
    if (worker.empty()) throw ConfigError("--evaluator external needs --worker");
    return std::make_unique<ExternalEvaluator>(ExternalConfig{worker, worker_retries, workers, worker_timeout});
  }
};

// ---- search -----------------------------------------------------------------

struct SearchOptions {
  std::string strategy = "pnas";
  SearchConfig cfg;
  int count = 0;  ///< random search budget; 0 means the PNAS budget for (B, K)
  std::string out = "pnas-run";
  std::string dump_table;
  std::uint64_t seed = 0;
  EvaluatorOptions eval;
};

std::int64_t pnas_budget(const SearchConfig& c) {
  std::int64_t m = 136;
  std::int64_t prev = 136;
  for (int b = 2; b <= c.max_blocks; ++b) {
    const std::int64_t avail = prev * unique_children_count(b);
    prev = std::min<std::int64_t>(c.beam, avail);
    m += prev;
  }
  return m;
}

int run_search(CLI::App& sub, SearchOptions& o) {
  SearchConfig cfg = o.cfg;
  cfg.seed = o.seed;
  cfg.validate();
  if (o.strategy == "random" && o.count < 0) throw ConfigError("--count must be >= 0");
  const int count = o.count > 0 ? o.count : static_cast<int>(pnas_budget(cfg));
  if (o.strategy == "pnas" && o.count > 0) throw ConfigError("--count applies to --strategy random only");

  const fs::path dir = o.out;
  RunLock lock(dir);
  fs::create_directories(dir / "graphs");

  RunManifest manifest;
  manifest.command = "search";
  manifest.config = snapshot(sub);
  manifest.seeds = RunSeeds::from_master(o.seed);
  manifest.outputs = {{"trace", "trace.jsonl"}, {"summary", "summary.csv"}, {"levels", "levels.csv"},
                      {"graphs", "graphs/"}};
  if (!o.dump_table.empty()) manifest.outputs["table"] = o.dump_table;
  manifest.started_at = utc_timestamp();
  manifest.write(dir / "manifest.json");

  std::vector<SearchTrace> traces;
  try {
    auto evaluator = o.eval.make(manifest.seeds);
    TraceWriter writer((dir / "trace.jsonl").string());
    for (int t = 0; t < cfg.trials; ++t) {
      const std::uint64_t trial_seed = o.seed + static_cast<std::uint64_t>(t);
      const RunSeeds seeds = RunSeeds::from_master(trial_seed);
      if (o.strategy == "pnas") {
        SearchConfig c = cfg;
        c.seed = trial_seed;
        auto surrogate = make_surrogate(c.predictor, c.predictor_config, seeds.predictor,
                                        o.eval.oracle(manifest.seeds), c.parallelism);
        traces.push_back(pnas_search(c, *evaluator, *surrogate, &writer));
      } else {
        traces.push_back(random_search(count, cfg.max_blocks, *evaluator, trial_seed, &writer, cfg.epochs,
                                       cfg.plan(), cfg.examples_per_epoch));
      }
    }
  } catch (const std::exception& e) {
    manifest.status = "failed";
    manifest.result = {{"error", e.what()}};
    manifest.finished_at = utc_timestamp();
    manifest.write(dir / "manifest.json");
    throw;
  }

  {
    std::ofstream f(dir / "summary.csv");
    write_top_m_csv(f, top_m_curve(traces, {1, 5, 25}));
    std::ofstream l(dir / "levels.csv");
    write_levels_csv(l, traces);
  }
  for (std::size_t t = 0; t < traces.size(); ++t) {
    const std::string prefix = traces.size() > 1 ? "trial" + std::to_string(t) + "_" : "";
    for (const auto& lv : traces[t].levels) {
      const CellSpec cell = parse_cell_key(lv.best_key);
      const auto graph = build_network(cell, cfg.plan());
      write_json_file(dir / "graphs" / (prefix + "level" + std::to_string(lv.level) + ".json"),
                      export_graph(graph, cell, cfg.plan()));
    }
  }
  if (!o.dump_table.empty()) {
    std::vector<EvalRecord> all;
    for (const auto& tr : traces) all.insert(all.end(), tr.records.begin(), tr.records.end());
    AccuracyTable::write(o.dump_table, all);
  }

  const SearchTrace& first = traces.front();
  const BigInt cost = compute_cost(first, first.e1, 0, 0);
  manifest.status = "ok";
  manifest.finished_at = utc_timestamp();
  manifest.result = {{"best_cell_key", first.best_key},
                     {"best_accuracy", first.best_accuracy},
                     {"models_evaluated", first.m1},
                     {"examples_per_model", first.e1},
                     {"cost", cost.str()}};
  manifest.write(dir / "manifest.json");

  std::cout << "best_cell_key " << first.best_key << '\n'
            << "best_accuracy " << detail::format_double(first.best_accuracy) << '\n'
            << "models_evaluated " << first.m1 << '\n'
            << "cost " << cost.str() << '\n';
  return kExitOk;
}

// ---- harness ----------------------------------------------------------------

struct HarnessOptions {
  HarnessConfig cfg;
  std::string predictors = "mlp,rnn,mlp-ens,rnn-ens";
  bool perfect = false;
  std::string out = "pnas-harness";
  std::uint64_t seed = 0;
  EvaluatorOptions eval;
};

int run_harness(CLI::App& sub, HarnessOptions& o) {
  HarnessConfig cfg = o.cfg;
  cfg.seed = o.seed;
  cfg.predictors = split_list(o.predictors);
  if (o.perfect) {
    // The perfect predictor ranks the noise-free oracle, so it defaults to
    // a noise-free evaluator and to being the only predictor.
    if (sub.get_option("--noise")->count() == 0) o.eval.noise = 0.0;
    if (sub.get_option("--predictors")->count() == 0) cfg.predictors = {"perfect"};
    else if (std::find(cfg.predictors.begin(), cfg.predictors.end(), "perfect") == cfg.predictors.end())
      cfg.predictors.push_back("perfect");
  }
  for (const auto& p : cfg.predictors) {
    if (p != "perfect" && p != "mlp" && p != "rnn" && p != "mlp-ens" && p != "rnn-ens") {
      throw ConfigError("unknown predictor '" + p + "'");
    }
  }
  cfg.validate();

  const fs::path dir = o.out;
  RunLock lock(dir);
  RunManifest manifest;
  manifest.command = "harness";
  manifest.config = snapshot(sub);
  manifest.seeds = RunSeeds::from_master(o.seed);
  manifest.outputs = {{"summary", "summary.csv"}};
  manifest.started_at = utc_timestamp();
  manifest.write(dir / "manifest.json");

  CorrelationReport report;
  try {
    auto evaluator = o.eval.make(manifest.seeds);
    report = predictor_harness(cfg, *evaluator, o.eval.oracle(manifest.seeds));
  } catch (const std::exception& e) {
    manifest.status = "failed";
    manifest.result = {{"error", e.what()}};
    manifest.finished_at = utc_timestamp();
    manifest.write(dir / "manifest.json");
    throw;
  }
  {
    std::ofstream f(dir / "summary.csv");
    write_correlation_csv(f, report);
  }
  write_correlation_csv(std::cout, report);
  manifest.status = "ok";
  manifest.finished_at = utc_timestamp();
  manifest.write(dir / "manifest.json");
  return kExitOk;
}

// ---- count / build -------------------------------------------------------------

int run_count(int blocks) {
  const SpaceSize s = count_space(blocks);
  std::cout << "B " << blocks << '\n' << "raw " << s.raw.str() << '\n' << "unique " << s.unique.str() << '\n';
  return kExitOk;
}

struct BuildOptions {
  std::string cell;
  int n = 3;
  int f = 48;
  bool imagenet = false;
  int hw = 224;
  std::string out;
};

int run_build(const BuildOptions& o) {
  const CellSpec cell = canonicalize(parse_cell_key(o.cell));
  const StackPlan plan = o.imagenet ? StackPlan::imagenet(o.n, o.f, o.hw) : StackPlan::cifar(o.n, o.f);
  const auto graph = build_network(cell, plan);
  const auto j = export_graph(graph, cell, plan);
  const CostReport cost = count_costs(graph);
  if (o.out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    const fs::path p = o.out;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_json_file(p, j);
    std::cout << "graph " << o.out << '\n';
  }
  std::cerr << "params " << cost.params << '\n' << "mult_adds " << cost.mult_adds << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Progressive cell search: search, harness, count, build"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", kVersion);

  // search
  SearchOptions so;
  std::string search_config, search_manifest;
  CLI::App* search = app.add_subcommand("search", "Run PNAS or random search");
  search->add_option("--strategy", so.strategy, "pnas | random")->check(CLI::IsMember({"pnas", "random"}));
  search->add_option("-B,--blocks", so.cfg.max_blocks, "max blocks per cell");
  search->add_option("-K,--beam", so.cfg.beam, "beam size");
  search->add_option("-E,--epochs", so.cfg.epochs, "proxy training epochs");
  search->add_option("-F,--filters", so.cfg.filters, "first-stage filters");
  search->add_option("-N,--repeats", so.cfg.repeats, "cell repeats per stage");
  search->add_option("--count", so.count, "random-search budget (default: the PNAS budget)");
  search->add_option("--predictor", so.cfg.predictor, "mlp | rnn | mlp-ens | rnn-ens | perfect");
  search->add_option("--seed", so.seed, "master seed");
  search->add_option("--trials", so.cfg.trials, "independent repetitions (seed, seed+1, ...)");
  search->add_option("-j,--parallelism", so.cfg.parallelism, "threads for ensemble fitting");
  search->add_option("--examples-per-epoch", so.cfg.examples_per_epoch, "for cost accounting");
  search->add_flag("--trace-all-predictions", so.cfg.trace_all_predictions, "log every candidate's prediction");
  search->add_option("--out", so.out, "run directory");
  search->add_option("--dump-table", so.dump_table, "also write evaluations as an accuracy table");
  so.eval.add_to(*search);
  search->add_option("--config", search_config, "key=value config file");
  search->add_option("--from-manifest", search_manifest, "replay the config of an earlier run");

  // harness
  HarnessOptions ho;
  std::string harness_config, harness_manifest;
  CLI::App* harness = app.add_subcommand("harness", "Rank-correlation harness for predictors");
  harness->add_option("--predictors", ho.predictors, "comma-separated predictor kinds");
  harness->add_flag("--perfect", ho.perfect, "add the oracle-passthrough predictor (noise 0 unless --noise)");
  harness->add_option("-T,--trials", ho.cfg.trials, "trials per level");
  harness->add_option("-K,--sample", ho.cfg.sample_size, "training sample size");
  harness->add_option("-R,--pool", ho.cfg.pool_size, "pool size per level b >= 2");
  harness->add_option("-B,--blocks", ho.cfg.max_blocks, "largest level");
  harness->add_option("-E,--epochs", ho.cfg.epochs, "proxy training epochs");
  harness->add_option("--seed", ho.seed, "master seed");
  harness->add_option("-j,--parallelism", ho.cfg.parallelism, "threads for ensemble fitting");
  harness->add_option("--out", ho.out, "run directory");
  ho.eval.add_to(*harness);
  harness->add_option("--config", harness_config, "key=value config file");
  harness->add_option("--from-manifest", harness_manifest, "replay the config of an earlier run");

  // count
  int count_blocks = 5;
  CLI::App* count = app.add_subcommand("count", "Print raw and unique search-space sizes");
  count->add_option("-B,--blocks", count_blocks, "max blocks")->check(CLI::Range(1, kMaxBlocks));

  // build
  BuildOptions bo;
  CLI::App* build = app.add_subcommand("build", "Build the network for a cell and count its cost");
  build->add_option("--cell", bo.cell, "cell key, e.g. '1|0,4,1,4'")->required();
  build->add_option("-N,--repeats", bo.n, "cell repeats per stage");
  build->add_option("-F,--filters", bo.f, "first-stage filters");
  build->add_flag("--imagenet", bo.imagenet, "224x224 input with a stride-2 stem and 1000 classes");
  build->add_option("--hw", bo.hw, "input height/width with --imagenet");
  build->add_option("--out", bo.out, "graph JSON path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (search->parsed()) {
      if (!search_config.empty()) apply_config_file(*search, search_config);
      if (!search_manifest.empty()) apply_manifest(*search, search_manifest);
      return run_search(*search, so);
    }
    if (harness->parsed()) {
      if (!harness_config.empty()) apply_config_file(*harness, harness_config);
      if (!harness_manifest.empty()) apply_manifest(*harness, harness_manifest);
      return run_harness(*harness, ho);
    }
    if (count->parsed()) return run_count(count_blocks);
    if (build->parsed()) return run_build(bo);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitContract;
}
