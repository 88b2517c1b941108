#pragma once

// Pluggable "train and evaluate" step. Three backends share one contract:
// a deterministic synthetic oracle, a tabular benchmark file, and an
// external worker process speaking line-delimited JSON.

#include <algorithm>
#include <array>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "pnas/cell_space.hpp"
#include "pnas/error.hpp"
#include "pnas/net_builder.hpp"
#include "pnas/rng.hpp"

namespace pnas {

struct EvalRequest {
  std::vector<CellSpec> cells;
  int epochs = 20;
  StackPlan plan;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs <= 0) throw ValidationError("evaluation epochs must be > 0");
    for (const auto& c : cells) {
      if (!c.is_valid() || !c.is_canonical()) {
        throw ValidationError("evaluation request holds a non-canonical or invalid cell '" + cell_key(c) + "'");
      }
    }
  }
};

struct EvalRecord {
  std::string cell_key;
  double accuracy = 0.0;
  std::uint64_t seed = 0;
  int epochs = 0;
  std::string backend;
  double wall_time = 0.0;  ///< seconds; never written to traces
  std::optional<std::string> error;

  bool ok() const { return !error.has_value(); }
};

class Evaluator {
 public:
  virtual ~Evaluator() = default;
  /// One record per requested cell, in request order.
  virtual std::vector<EvalRecord> evaluate(const EvalRequest& request) = 0;
  virtual std::string tag() const = 0;
};

// ---- synthetic oracle ------------------------------------------------------

struct OracleFeatures {
  std::array<int, kNumOperators> op_counts{};
  int depth = 0;
  int distinct_inputs = 0;
  int pool_count = 0;
};

inline OracleFeatures oracle_features(const CellSpec& cell) {
  OracleFeatures f;
  std::set<int> inputs;
  for (const auto& b : cell.blocks()) {
    for (Operator op : {b.o1, b.o2}) {
      ++f.op_counts[static_cast<std::size_t>(op_id(op))];
      if (is_pooling(op)) ++f.pool_count;
    }
    inputs.insert(b.i1.value);
    inputs.insert(b.i2.value);
  }
  f.depth = cell_depth(cell);
  f.distinct_inputs = static_cast<int>(inputs.size());
  return f;
}

/// accuracy = clamp(sigmoid(z) + noise_stddev * N(0, 1), 0, 1), with the
/// normal draw seeded by (cell_key, request seed, master seed) and
///
///   z = bias + sum_k op_utility[k] * count_k / s + pool_weight * pools / s
///            + depth_weight * depth + diversity_weight * distinct_inputs
///
/// where s = 2b (operator fractions) when `normalize_ops` is set and s = 2
/// otherwise. Both agree on 1-block cells. With raw counts and nonnegative
/// weights, appending a block never lowers z.
struct SyntheticOracleConfig {
  std::array<double, kNumOperators> op_utility = {1.40, 1.60, 1.20, 0.50, 0.00, -0.20, 0.70, 0.30};
  double depth_weight = 0.08;
  double diversity_weight = 0.05;
  double pool_weight = -0.10;
  bool normalize_ops = true;
  double bias = 0.0;
  double noise_stddev = 0.01;
  std::uint64_t master_seed = 0;

  /// Sets `bias` so that the mean noise-free logit over the 136 unique
  /// 1-block cells equals logit(target).
  SyntheticOracleConfig& center_on(double target);

  /// Raw operator counts and all weights clamped to >= 0.
  SyntheticOracleConfig monotone() const {
    SyntheticOracleConfig c = *this;
    for (double& u : c.op_utility) u = std::max(0.0, u);
    c.depth_weight = std::max(0.0, c.depth_weight);
    c.diversity_weight = std::max(0.0, c.diversity_weight);
    c.pool_weight = std::max(0.0, c.pool_weight);
    c.normalize_ops = false;
    return c.center_on(0.86);
  }
};

inline double oracle_logit(const SyntheticOracleConfig& cfg, const CellSpec& cell) {
  const OracleFeatures f = oracle_features(cell);
  const double slots = cfg.normalize_ops ? 2.0 * cell.num_blocks() : 2.0;
  double ops = 0.0;
  for (std::size_t k = 0; k < f.op_counts.size(); ++k) ops += cfg.op_utility[k] * f.op_counts[k];
  return cfg.bias + (ops + cfg.pool_weight * f.pool_count) / slots + cfg.depth_weight * f.depth +
         cfg.diversity_weight * f.distinct_inputs;
}

inline double oracle_noise_free(const SyntheticOracleConfig& cfg, const CellSpec& cell) {
  return 1.0 / (1.0 + std::exp(-oracle_logit(cfg, cell)));
}

inline double oracle_noise(const SyntheticOracleConfig& cfg, std::string_view key, std::uint64_t seed) {
  if (cfg.noise_stddev == 0.0) return 0.0;
  Rng rng(splitmix64(fnv1a(key) ^ derive_seed(cfg.master_seed, seed)));
  return cfg.noise_stddev * rng.normal();
}

inline SyntheticOracleConfig& SyntheticOracleConfig::center_on(double target) {
  bias = 0.0;
  double mean = 0.0;
  const auto cells = unique_one_block_cells();
  for (const auto& c : cells) mean += oracle_logit(*this, c);
  mean /= static_cast<double>(cells.size());
  bias = std::log(target / (1.0 - target)) - mean;
  return *this;
}

inline SyntheticOracleConfig default_oracle_config(double noise_stddev = 0.01, std::uint64_t master_seed = 0) {
  SyntheticOracleConfig c;
  c.noise_stddev = noise_stddev;
  c.master_seed = master_seed;
  return c.center_on(0.86);
}

inline std::vector<EvalRecord> synthetic_evaluate(const EvalRequest& req, const SyntheticOracleConfig& cfg) {
  req.validate();
  std::vector<EvalRecord> out;
  out.reserve(req.cells.size());
  for (const auto& cell : req.cells) {
    const auto t0 = std::chrono::steady_clock::now();
    EvalRecord r;
    r.cell_key = cell_key(cell);
    r.accuracy = std::clamp(oracle_noise_free(cfg, cell) + oracle_noise(cfg, r.cell_key, req.seed), 0.0, 1.0);
    r.seed = req.seed;
    r.epochs = req.epochs;
    r.backend = "synthetic";
    r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

class SyntheticEvaluator : public Evaluator {
 public:
  explicit SyntheticEvaluator(SyntheticOracleConfig cfg) : cfg_(cfg) {}
  std::vector<EvalRecord> evaluate(const EvalRequest& request) override { return synthetic_evaluate(request, cfg_); }
  std::string tag() const override { return "synthetic"; }
  const SyntheticOracleConfig& config() const { return cfg_; }

 private:
  SyntheticOracleConfig cfg_;
};

// ---- tabular benchmark -----------------------------------------------------

namespace detail {

/// Splits one CSV line; double quotes protect commas, "" escapes a quote.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      if (!cur.empty() || was_quoted) throw ParseError("unexpected quote", line_no);
      quoted = was_quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
      was_quoted = false;
    } else if (c != '\r') {
      if (was_quoted) throw ParseError("text after closing quote", line_no);
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quote", line_no);
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// CSV with header `cell_key,seed,accuracy`. cell_key fields contain commas
/// and are double-quoted on write.
class AccuracyTable {
 public:
  static AccuracyTable parse(std::istream& in) {
    AccuracyTable t;
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw ParseError("empty table file", 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "cell_key,seed,accuracy") throw ParseError("expected header 'cell_key,seed,accuracy'", line_no);
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line == "\r") continue;
      const auto f = detail::split_csv_line(line, line_no);
      if (f.size() != 3) throw ParseError("expected 3 fields, found " + std::to_string(f.size()), line_no);
      CellSpec cell;
      try {
        cell = parse_cell_key(f[0]);
      } catch (const ParseError& e) {
        throw ParseError(e.what(), line_no);
      }
      std::uint64_t seed = 0;
      double acc = 0.0;
      try {
        std::size_t pos = 0;
        if (f[1].empty() || f[1][0] == '-') throw std::invalid_argument("seed");
        seed = std::stoull(f[1], &pos);
        if (pos != f[1].size()) throw std::invalid_argument("seed");
        acc = std::stod(f[2], &pos);
        if (pos != f[2].size()) throw std::invalid_argument("accuracy");
      } catch (const std::exception&) {
        throw ParseError("malformed seed or accuracy", line_no);
      }
      if (!(acc >= 0.0 && acc <= 1.0)) throw ParseError("accuracy outside [0, 1]", line_no);
      t.rows_[cell_key(canonicalize(cell))][seed] = acc;
    }
    return t;
  }

  static AccuracyTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open table '" + path + "'");
    return parse(in);
  }

  static void write(std::ostream& out, const std::vector<EvalRecord>& records) {
    out << "cell_key,seed,accuracy\n";
    for (const auto& r : records) {
      if (!r.ok()) continue;
      out << '"' << r.cell_key << "\"," << r.seed << ',' << detail::format_double(r.accuracy) << '\n';
    }
  }

  static void write(const std::string& path, const std::vector<EvalRecord>& records) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write table '" + path + "'");
    write(out, records);
  }

  bool contains(const std::string& key) const { return rows_.count(key) > 0; }
  std::size_t size() const { return rows_.size(); }

  /// Stored accuracy for (key, seed mod number-of-stored-seeds), seeds in
  /// ascending order.
  double lookup(const std::string& key, std::uint64_t seed) const {
    const auto it = rows_.find(key);
    if (it == rows_.end()) throw LookupError("cell_key '" + key + "' not found in table");
    auto s = it->second.begin();
    std::advance(s, static_cast<std::ptrdiff_t>(seed % it->second.size()));
    return s->second;
  }

 private:
  std::map<std::string, std::map<std::uint64_t, double>> rows_;
};

inline std::vector<EvalRecord> tabular_evaluate(const EvalRequest& req, const AccuracyTable& table) {
  req.validate();
  std::vector<std::string> keys;
  for (const auto& c : req.cells) {
    keys.push_back(cell_key(c));
    if (!table.contains(keys.back())) throw LookupError("cell_key '" + keys.back() + "' not found in table");
  }
  std::vector<EvalRecord> out;
  for (auto& key : keys) {
    EvalRecord r;
    r.accuracy = table.lookup(key, req.seed);
    r.cell_key = std::move(key);
    r.seed = req.seed;
    r.epochs = req.epochs;
    r.backend = "tabular";
    out.push_back(std::move(r));
  }
  return out;
}

class TabularEvaluator : public Evaluator {
 public:
  explicit TabularEvaluator(AccuracyTable table) : table_(std::move(table)) {}
  static TabularEvaluator from_file(const std::string& path) { return TabularEvaluator(AccuracyTable::load(path)); }
  std::vector<EvalRecord> evaluate(const EvalRequest& request) override { return tabular_evaluate(request, table_); }
  std::string tag() const override { return "tabular"; }

 private:
  AccuracyTable table_;
};

// ---- external worker -------------------------------------------------------

struct ExternalConfig {
  std::string command;  ///< run through /bin/sh -c
  int retries = 2;  ///< extra attempts for cells left unanswered by a crashed worker
  int workers = 1;  ///< worker processes a batch is split across
  double timeout_seconds = 0.0;  ///< per attempt; 0 disables
};

namespace detail {

struct WorkerResult {
  std::map<std::size_t, EvalRecord> records;
  bool clean_exit = false;
  std::string failure;
};

inline void write_all_nonblocking(int fd, std::string& pending) {
  while (!pending.empty()) {
    const ssize_t n = ::write(fd, pending.data(), pending.size());
    if (n > 0) {
      pending.erase(0, static_cast<std::size_t>(n));
    } else if (n < 0 && errno == EINTR) {
      continue;
    } else {
      return;  // EAGAIN or error: caller polls again or gives up
    }
  }
}

/// Runs one worker process over `ids` (indices into `req.cells`).
inline WorkerResult run_worker(const ExternalConfig& cfg, const EvalRequest& req, const std::vector<std::size_t>& ids) {
  WorkerResult result;
  int to_child[2];
  int from_child[2];
  if (::pipe(to_child) != 0) throw TransportError(std::string("pipe: ") + std::strerror(errno));
  if (::pipe(from_child) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw TransportError(std::string("pipe: ") + std::strerror(errno));
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw TransportError(std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::close(to_child[0]);
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::close(from_child[1]);
    ::execl("/bin/sh", "sh", "-c", cfg.command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  int in_fd = to_child[1];
  const int out_fd = from_child[0];
  ::fcntl(in_fd, F_SETFL, ::fcntl(in_fd, F_GETFL) | O_NONBLOCK);
  ::signal(SIGPIPE, SIG_IGN);

  std::string pending;
  for (std::size_t id : ids) {
    nlohmann::json line{{"id", id},
                        {"cell", cell_key(req.cells[id])},
                        {"epochs", req.epochs},
                        {"n", req.plan.n},
                        {"f", req.plan.f},
                        {"seed", req.seed}};
    pending += line.dump() + '\n';
  }
  pending += "{\"done\":true}\n";
  const std::set<std::size_t> expected(ids.begin(), ids.end());

  std::string buffer;
  const auto start = std::chrono::steady_clock::now();
  bool timed_out = false;
  std::optional<ProtocolError> protocol_error;
  auto handle_line = [&](const std::string& line) {
    if (line.empty() || protocol_error) return;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      protocol_error = ProtocolError("unparseable worker line: " + line);
      return;
    }
    if (!j.is_object()) {
      protocol_error = ProtocolError("worker line is not an object: " + line);
      return;
    }
    if (j.contains("done")) return;
    if (!j.contains("id") || !j["id"].is_number_unsigned()) {
      protocol_error = ProtocolError("worker line without a valid id: " + line);
      return;
    }
    const auto id = j["id"].get<std::size_t>();
    if (!expected.count(id) || result.records.count(id)) {
      protocol_error = ProtocolError("worker answered unknown or duplicate id: " + line);
      return;
    }
    EvalRecord r;
    r.cell_key = cell_key(req.cells[id]);
    r.seed = req.seed;
    r.epochs = req.epochs;
    r.backend = "external";
    r.accuracy = std::numeric_limits<double>::quiet_NaN();
    r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (j.contains("error") && j["error"].is_string()) {
      r.error = j["error"].get<std::string>();
    } else if (j.contains("accuracy") && j["accuracy"].is_number()) {
      const double acc = j["accuracy"].get<double>();
      if (acc >= 0.0 && acc <= 1.0) {
        r.accuracy = acc;
      } else {
        r.error = "validation error: accuracy " + format_double(acc) + " outside [0, 1]";
      }
    } else {
      protocol_error = ProtocolError("worker line has neither accuracy nor error: " + line);
      return;
    }
    result.records.emplace(id, std::move(r));
  };

  char chunk[4096];
  bool out_open = true;
  while (out_open) {
    pollfd fds[2];
    nfds_t nfds = 0;
    fds[nfds++] = pollfd{out_fd, POLLIN, 0};
    if (in_fd >= 0) fds[nfds++] = pollfd{in_fd, POLLOUT, 0};
    int wait_ms = -1;
    if (cfg.timeout_seconds > 0) {
      const double left =
          cfg.timeout_seconds - std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (left <= 0) {
        timed_out = true;
        break;
      }
      wait_ms = static_cast<int>(left * 1000.0) + 1;
    }
    const int rc = ::poll(fds, nfds, wait_ms);
    if (rc < 0) {
      if (errno == EINTR) continue;
      break;
    }
    if (rc == 0) continue;
    if (nfds == 2 && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
      if (fds[1].revents & POLLOUT) write_all_nonblocking(in_fd, pending);
      if (pending.empty() || (fds[1].revents & (POLLERR | POLLHUP))) {
        ::close(in_fd);
        in_fd = -1;
      }
    }
    if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
      const ssize_t n = ::read(out_fd, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        out_open = false;
      } else {
        buffer.append(chunk, static_cast<std::size_t>(n));
        std::size_t nl;
        while ((nl = buffer.find('\n')) != std::string::npos) {
          handle_line(buffer.substr(0, nl));
          buffer.erase(0, nl + 1);
        }
      }
    }
  }
  if (!buffer.empty()) handle_line(buffer);
  if (in_fd >= 0) ::close(in_fd);
  ::close(out_fd);
  if (timed_out || protocol_error) ::kill(pid, SIGKILL);
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  if (protocol_error) throw *protocol_error;
  result.clean_exit = !timed_out && WIFEXITED(status) && WEXITSTATUS(status) == 0;
  if (timed_out) {
    result.failure = "worker timed out";
  } else if (!result.clean_exit) {
    result.failure = WIFEXITED(status) ? "worker exited with status " + std::to_string(WEXITSTATUS(status))
                                       : "worker killed by signal";
  }
  return result;
}

}  // namespace detail

/// Sends the batch to one or more worker processes and re-associates
/// answers by request id. Cells left unanswered by a failed worker are
/// retried up to `retries` times before a TransportError.
inline std::vector<EvalRecord> external_evaluate(const EvalRequest& req, const ExternalConfig& cfg) {
  req.validate();
  if (cfg.command.empty()) throw ConfigError("external evaluator needs a worker command");
  std::map<std::size_t, EvalRecord> done;
  std::vector<std::size_t> missing(req.cells.size());
  for (std::size_t i = 0; i < missing.size(); ++i) missing[i] = i;
  std::string last_failure;
  for (int attempt = 0; attempt <= cfg.retries && !missing.empty(); ++attempt) {
    const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1, cfg.workers)), 1,
                                                        missing.size());
    std::vector<std::vector<std::size_t>> shards(workers);
    for (std::size_t k = 0; k < missing.size(); ++k) shards[k % workers].push_back(missing[k]);
    std::vector<detail::WorkerResult> results;
    if (workers == 1) {
      results.push_back(detail::run_worker(cfg, req, shards[0]));
    } else {
      std::vector<std::future<detail::WorkerResult>> jobs;
      for (const auto& shard : shards) {
        jobs.push_back(std::async(std::launch::async, [&, shard] { return detail::run_worker(cfg, req, shard); }));
      }
      for (auto& j : jobs) results.push_back(j.get());
    }
    for (auto& r : results) {
      if (!r.failure.empty()) last_failure = r.failure;
      for (auto& [id, rec] : r.records) done.emplace(id, std::move(rec));
    }
    std::vector<std::size_t> still;
    for (std::size_t id : missing) {
      if (!done.count(id)) still.push_back(id);
    }
    if (!still.empty() && last_failure.empty()) last_failure = "worker ended without answering every request";
    missing = std::move(still);
  }
  if (!missing.empty()) {
    throw TransportError(last_failure + " (" + std::to_string(missing.size()) + " cells unanswered after " +
                         std::to_string(cfg.retries) + " retries)");
  }
  std::vector<EvalRecord> out;
  out.reserve(done.size());
  for (auto& [id, rec] : done) out.push_back(std::move(rec));
  return out;
}

class ExternalEvaluator : public Evaluator {
 public:
  explicit ExternalEvaluator(ExternalConfig cfg) : cfg_(std::move(cfg)) {}
  std::vector<EvalRecord> evaluate(const EvalRequest& request) override { return external_evaluate(request, cfg_); }
  std::string tag() const override { return "external"; }

 private:
  ExternalConfig cfg_;
};

}  // namespace pnas
