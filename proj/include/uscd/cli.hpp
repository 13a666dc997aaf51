#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uscd/backends.hpp"
#include "uscd/decoder.hpp"

namespace uscd {

inline constexpr const char* kToolVersion = "0.1.0";

/// Exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitFatal = 1, kExitPartial = 2 };

/// Everything needed to reproduce a run. Written as manifest.json next to
/// the outputs; `--config` accepts one back.
struct RunManifest {
  std::string command;
  DecodeMode mode = DecodeMode::kUscd;
  DecodeConfig config;
  std::string backend;  // scripted:PATH | ngram:PATH:ORDER:K | remote:ADDR
  std::string vocab;
  std::string tasks;
  std::string out;
  std::size_t samples = 15;
  std::vector<int> ks{1, 3, 5, 8, 10, 12, 15};
  TraceLevel trace = TraceLevel::kOff;
  bool paired = false;
  std::size_t jobs = 1;
  std::vector<std::string> sweeps;  // ablate only
  std::string tool_version = kToolVersion;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);

  bool operator==(const RunManifest&) const = default;
};

/// Builds the backend described by `spec` over `vocab`.
std::unique_ptr<Backend> make_backend(const std::string& spec, std::shared_ptr<const Vocab> vocab);

/// One axis of an ablation sweep, parsed from "name=v1,v2" or
/// "name=start:stop:step". Names: rho, theta, eta, estimator,
/// always_apply_cd, and theta@ESTIMATOR for an estimator-specific grid.
struct SweepAxis {
  std::string name;
  std::vector<std::string> values;
};
SweepAxis parse_sweep(const std::string& spec);

/// Entry point of the `uscd` tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace uscd
