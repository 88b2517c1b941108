#pragma once

// Run-directory plumbing shared by the command-line tool and its tests:
// exclusive locking, the manifest, seed derivation and exit-code mapping.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <json.hpp>

#include "pnas/error.hpp"
#include "pnas/evaluation.hpp"
#include "pnas/net_builder.hpp"
#include "pnas/rng.hpp"
#include "pnas/search.hpp"

namespace pnas {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kManifestSchemaVersion = 1;
inline constexpr int kTraceSchemaVersion = 1;

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitEvaluator = 2, kExitContract = 3 };

/// Maps a thrown error onto the documented process exit code.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const EvaluatorError*>(&e) || dynamic_cast<const LookupError*>(&e)) return kExitEvaluator;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const ParseError*>(&e)) {
    return kExitConfig;
  }
  return kExitContract;
}

/// Every subsystem seed is derived from the master seed by name.
struct RunSeeds {
  std::uint64_t master = 0;
  std::uint64_t evaluator = 0;
  std::uint64_t predictor = 0;
  std::uint64_t oracle = 0;
  std::uint64_t random_search = 0;

  static RunSeeds from_master(std::uint64_t master) {
    return {master, eval_seed(master), derive_seed(master, "predictor"), derive_seed(master, "oracle"),
            derive_seed(master, "random-search")};
  }

  nlohmann::ordered_json to_json() const {
    return {{"master", master},
            {"evaluator", evaluator},
            {"predictor", predictor},
            {"oracle", oracle},
            {"random_search", random_search},
            {"derivation", "subsystem = splitmix64(master ^ fnv1a(name)); evaluator seed reduced mod 1000003"}};
  }
};

/// Exclusive advisory lock on <dir>/.lock, released when the object dies or
/// the process exits.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    path_ = dir / ".lock";
    fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw ConfigError("cannot open lockfile '" + path_.string() + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw ConfigError("run directory '" + dir.string() + "' is in use by another run");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::ftruncate(fd_, 0) == 0) (void)!::write(fd_, pid.data(), pid.size());
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    if (fd_ >= 0) {
      std::error_code ec;
      std::filesystem::remove(path_, ec);
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  ::gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Snapshot of a run. `config` holds every resolved option as a string so
/// that `--from-manifest` can replay it verbatim.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;
  RunSeeds seeds;
  std::map<std::string, std::string> outputs;
  std::string started_at;
  std::string finished_at;
  std::string status = "running";
  nlohmann::ordered_json result = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config) cfg[k] = v;
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const auto& [k, v] : outputs) out[k] = v;
    return {{"schema_version", kManifestSchemaVersion},
            {"command", command},
            {"config", cfg},
            {"seeds", seeds.to_json()},
            {"versions",
             {{"pnas", kVersion},
              {"manifest_schema", kManifestSchemaVersion},
              {"trace_schema", kTraceSchemaVersion},
              {"graph_schema", kGraphSchemaVersion}}},
            {"outputs", out},
            {"started_at", started_at},
            {"finished_at", finished_at},
            {"status", status},
            {"result", result}};
  }

  void write(const std::filesystem::path& path) const {
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream f(tmp);
      if (!f) throw Error("cannot write manifest '" + path.string() + "'");
      f << to_json().dump(2) << '\n';
    }
    std::filesystem::rename(tmp, path);
  }

  /// Reads the command and config snapshot of an earlier manifest.
  static RunManifest read(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open manifest '" + path.string() + "'");
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed manifest '" + path.string() + "': " + e.what());
    }
    if (!j.is_object() || !j.contains("config") || !j["config"].is_object()) {
      throw ConfigError("manifest '" + path.string() + "' has no config object");
    }
    RunManifest m;
    m.command = j.value("command", "");
    for (const auto& [k, v] : j["config"].items()) {
      if (!v.is_string()) throw ConfigError("manifest config value for '" + k + "' is not a string");
      m.config[k] = v.get<std::string>();
    }
    return m;
  }
};

/// Per-level best cells, one row per (trial, level).
inline void write_levels_csv(std::ostream& out, const std::vector<SearchTrace>& traces) {
  out << "trial,level,best_cell_key,best_accuracy,evaluated,raw_candidates,unique_candidates\n";
  for (std::size_t t = 0; t < traces.size(); ++t) {
    for (const auto& l : traces[t].levels) {
      out << t << ',' << l.level << ",\"" << l.best_key << "\"," << detail::format_double(l.best_accuracy) << ','
          << l.cells.size() << ',' << l.raw_candidates << ',' << l.unique_candidates << '\n';
    }
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  f << j.dump(2) << '\n';
}

}  // namespace pnas
