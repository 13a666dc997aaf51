#include "uscd/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <unistd.h>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "uscd/error.hpp"
#include "uscd/eval.hpp"
#include "uscd/prompt_transform.hpp"
#include "uscd/remote.hpp"
#include "uscd/trace_io.hpp"

namespace uscd {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest

json RunManifest::to_json() const {
  return {{"command", command},
          {"mode", std::string(to_string(mode))},
          {"config", config_to_json(config)},
          {"backend", backend},
          {"vocab", vocab},
          {"tasks", tasks},
          {"out", out},
          {"samples", samples},
          {"ks", ks},
          {"trace", std::string(to_string(trace))},
          {"paired", paired},
          {"jobs", jobs},
          {"sweeps", sweeps},
          {"tool_version", tool_version}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  try {
    m.command = j.value("command", m.command);
    if (j.contains("mode")) m.mode = parse_mode(j.at("mode").get<std::string>());
    if (j.contains("config")) m.config = config_from_json(j.at("config"), m.config);
    m.backend = j.value("backend", m.backend);
    m.vocab = j.value("vocab", m.vocab);
    m.tasks = j.value("tasks", m.tasks);
    m.out = j.value("out", m.out);
    m.samples = j.value("samples", m.samples);
    if (j.contains("ks")) m.ks = j.at("ks").get<std::vector<int>>();
    if (j.contains("trace")) m.trace = parse_trace_level(j.at("trace").get<std::string>());
    m.paired = j.value("paired", m.paired);
    m.jobs = j.value("jobs", m.jobs);
    if (j.contains("sweeps")) m.sweeps = j.at("sweeps").get<std::vector<std::string>>();
    m.tool_version = j.value("tool_version", m.tool_version);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Backends and sweeps

std::unique_ptr<Backend> make_backend(const std::string& spec, std::shared_ptr<const Vocab> vocab) {
  if (spec.rfind("scripted:", 0) == 0) {
    return std::make_unique<ScriptedModel>(ScriptedModel::load(spec.substr(9), std::move(vocab)));
  }
  if (spec.rfind("ngram:", 0) == 0) {
    std::string rest = spec.substr(6);
    auto k_sep = rest.rfind(':');
    auto order_sep = k_sep == std::string::npos ? std::string::npos : rest.rfind(':', k_sep - 1);
    if (k_sep == std::string::npos || order_sep == std::string::npos || order_sep == 0) {
      throw ConfigError("n-gram backend must be ngram:PATH:ORDER:K, got '" + spec + "'");
    }
    int order = 0;
    double k = 0.0;
    try {
      order = std::stoi(rest.substr(order_sep + 1, k_sep - order_sep - 1));
      k = std::stod(rest.substr(k_sep + 1));
    } catch (const std::exception&) {
      throw ConfigError("n-gram order and k must be numbers in '" + spec + "'");
    }
    return std::make_unique<NGramModel>(
        NGramModel::train_file(std::move(vocab), rest.substr(0, order_sep), order, k));
  }
  if (spec.rfind("remote:", 0) == 0) {
    return std::make_unique<RemoteBackend>(RemoteEndpoint::parse(spec.substr(7)), std::move(vocab));
  }
  throw ConfigError("backend must be scripted:PATH, ngram:PATH:ORDER:K or remote:ADDR, got '" +
                    spec + "'");
}

namespace {

std::string trim(std::string s) {
  auto first = s.find_first_not_of(" \t");
  auto last = s.find_last_not_of(" \t");
  return first == std::string::npos ? std::string() : s.substr(first, last - first + 1);
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + s + "' is not a number in " + what);
  }
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "on") return true;
  if (s == "false" || s == "0" || s == "off") return false;
  throw ConfigError("'" + s + "' is not a boolean");
}

bool known_sweep_name(const std::string& name) {
  static const char* kNames[] = {"rho", "theta", "eta", "estimator", "always_apply_cd"};
  for (const char* n : kNames) {
    if (name == n) return true;
  }
  if (name.rfind("theta@", 0) == 0) {
    parse_estimator(name.substr(6));
    return true;
  }
  return false;
}

}  // namespace

SweepAxis parse_sweep(const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("sweep must look like name=values, got '" + spec + "'");
  SweepAxis axis{trim(spec.substr(0, eq)), {}};
  if (!known_sweep_name(axis.name)) throw ConfigError("unknown sweep parameter '" + axis.name + "'");
  std::string grid = trim(spec.substr(eq + 1));

  auto colon = grid.find(':');
  if (colon != std::string::npos && axis.name != "estimator") {
    auto second = grid.find(':', colon + 1);
    if (second == std::string::npos) throw ConfigError("range must be start:stop:step in '" + spec + "'");
    double start = parse_double(grid.substr(0, colon), spec);
    double stop = parse_double(grid.substr(colon + 1, second - colon - 1), spec);
    double step = parse_double(grid.substr(second + 1), spec);
    if (!(step > 0.0) || stop < start) throw ConfigError("empty or invalid range in '" + spec + "'");
    auto count = static_cast<long>(std::floor((stop - start) / step + 1e-9)) + 1;
    for (long i = 0; i < count; ++i) {
      double v = std::round((start + static_cast<double>(i) * step) * 1e12) / 1e12;
      axis.values.push_back(format_number(v));
    }
  } else {
    std::stringstream ss(grid);
    for (std::string item; std::getline(ss, item, ',');) {
      item = trim(item);
      if (!item.empty()) axis.values.push_back(item);
    }
  }
  if (axis.values.empty()) throw ConfigError("sweep '" + axis.name + "' has an empty grid");
  for (const std::string& v : axis.values) {
    if (axis.name == "estimator") {
      parse_estimator(v);
    } else if (axis.name == "always_apply_cd") {
      parse_bool(v);
    } else {
      parse_double(v, spec);
    }
  }
  return axis;
}

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing

std::atomic<bool> g_stop{false};

extern "C" void handle_stop_signal(int) { g_stop.store(true); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path prepare_out_dir(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir + "': " + ec.message());
  return fs::path(dir);
}

std::shared_ptr<const Vocab> load_vocab(const std::string& path) {
  if (path.empty()) throw ConfigError("--vocab is required");
  if (!fs::exists(path)) throw ConfigError("vocabulary file '" + path + "' does not exist");
  return std::make_shared<const Vocab>(Vocab::load(path));
}

void warn_theta(const RunManifest& m, const Vocab& vocab, std::ostream& err) {
  if (m.config.estimator != Estimator::kStdDev || m.config.always_apply_cd) return;
  double ceiling = max_std_dev(vocab.size());
  if (m.config.theta > ceiling) {
    err << fmt::format(
        "warning: theta={} exceeds the largest possible standard deviation {} for a "
        "{}-token vocabulary; every step will be repaired\n",
        format_number(m.config.theta), format_number(ceiling), vocab.size());
  }
}

json record_to_json(const GenerationRecord& r, DecodeMode mode) {
  json j = {{"task_id", r.task_id},
            {"sample", r.sample_index},
            {"seed", r.config.seed},
            {"mode", std::string(to_string(mode))},
            {"completion", r.completion},
            {"finish_reason", std::string(to_string(r.finish))},
            {"tokens", r.generated},
            {"repaired_steps", r.repaired_steps},
            {"steps", r.generated.size()},
            {"config", config_to_json(r.config)}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

// Completions written by `decode`, regrouped by the task order.
std::vector<TaskGenerations> load_completions(const std::string& path,
                                              const std::vector<BenchmarkTask>& tasks) {
  std::map<std::string, TaskGenerations> by_task;
  std::istringstream lines(read_text(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      GenerationRecord r;
      r.task_id = j.at("task_id").get<std::string>();
      r.sample_index = j.at("sample").get<std::size_t>();
      r.completion = j.at("completion").get<std::string>();
      r.generated = j.value("tokens", std::vector<TokenId>{});
      r.repaired_steps = j.value("repaired_steps", std::size_t{0});
      std::string finish = j.value("finish_reason", std::string("max_tokens"));
      r.finish = finish == "error" ? FinishReason::kError
                 : finish == "eos" ? FinishReason::kEos
                 : finish == "stop_sequence" ? FinishReason::kStopSequence
                                             : FinishReason::kMaxTokens;
      r.error = j.value("error", std::string());
      TaskGenerations& g = by_task[r.task_id];
      g.task_id = r.task_id;
      if (r.finish == FinishReason::kError && g.error.empty()) {
        g.error = fmt::format("sample {} failed: {}", r.sample_index, r.error);
      }
      g.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ConfigError(fmt::format("completions line {}: {}", lineno, e.what()));
    }
  }
  std::vector<TaskGenerations> out;
  for (const BenchmarkTask& t : tasks) {
    auto it = by_task.find(t.task_id);
    if (it == by_task.end()) {
      out.push_back({t.task_id, {}, "no completions for this task"});
    } else {
      out.push_back(std::move(it->second));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flag handling

struct Flags {
  std::string config_path;
  std::string mode = "uscd";
  double rho = 0.0, theta = 0.0, eta = 0.0, temperature = 0.0, top_p = 0.0;
  std::string estimator;
  bool always_apply_cd = false;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::vector<int> ks;
  std::string backend, vocab, tasks, out, trace = "off";
  bool paired = false;
  std::size_t jobs = 1;
  int max_new_tokens = 0;
  std::vector<std::string> stops;
  std::vector<std::string> sweeps;
  bool trace_f32 = false;
  std::string completions;
  std::map<std::string, CLI::Option*> opt;

  bool given(const std::string& name) const {
    auto it = opt.find(name);
    return it != opt.end() && it->second->count() > 0;
  }
};

void add_run_flags(CLI::App* cmd, Flags& f) {
  f.opt["config"] = cmd->add_option("--config", f.config_path,
                                    "Manifest or config JSON; flags given here take precedence");
  f.opt["mode"] = cmd->add_option("--mode", f.mode, "Decoding mode: standard or uscd")
                      ->check(CLI::IsMember({"standard", "uscd"}));
  f.opt["rho"] = cmd->add_option("--rho", f.rho, "Contrast strength (default 0.3)");
  f.opt["theta"] = cmd->add_option("--theta", f.theta, "Uncertainty threshold (default 0.005)");
  f.opt["eta"] = cmd->add_option("--eta", f.eta, "Plausibility coefficient (default 0.1)");
  f.opt["estimator"] = cmd->add_option("--estimator", f.estimator,
                                       "Uncertainty estimator: stddev, entropy or quartiles")
                           ->check(CLI::IsMember({"stddev", "entropy", "quartiles"}));
  f.opt["always_apply_cd"] =
      cmd->add_flag("--always-apply-cd", f.always_apply_cd, "Repair every step regardless of theta");
  f.opt["temperature"] = cmd->add_option("--temperature", f.temperature,
                                         "Sampling temperature; 0 means greedy (default 0.8)");
  f.opt["top_p"] = cmd->add_option("--top-p", f.top_p, "Nucleus mass (default 0.95)");
  f.opt["seed"] = cmd->add_option("--seed", f.seed, "Base seed; falls back to $USCD_SEED");
  f.opt["n"] = cmd->add_option("--n", f.n, "Samples per task (default 15)");
  f.opt["k"] = cmd->add_option("--k", f.ks, "Comma-separated k values (default 1,3,5,8,10,12,15)")
                   ->delimiter(',');
  f.opt["backend"] = cmd->add_option("--backend", f.backend,
                                     "scripted:PATH | ngram:PATH:ORDER:K | remote:ADDR");
  f.opt["vocab"] = cmd->add_option("--vocab", f.vocab, "Vocabulary file, one token per line");
  f.opt["tasks"] = cmd->add_option("--tasks", f.tasks, "Task JSONL file");
  f.opt["out"] = cmd->add_option("--out", f.out, "Output directory");
  f.opt["trace"] = cmd->add_option("--trace", f.trace, "Step traces: off, verdicts or full")
                       ->check(CLI::IsMember({"off", "verdicts", "full"}));
  f.opt["paired"] = cmd->add_flag("--paired", f.paired,
                                  "Run Standard and USCD on identical seeds and report deltas");
  f.opt["jobs"] = cmd->add_option("--jobs", f.jobs, "Worker threads (default 1)");
  f.opt["max_new_tokens"] =
      cmd->add_option("--max-new-tokens", f.max_new_tokens, "Generation budget (default 128)");
  f.opt["stop"] = cmd->add_option("--stop", f.stops, "Stop sequence (repeatable)");
  f.opt["trace_f32"] =
      cmd->add_flag("--trace-f32", f.trace_f32, "Quantize traced distributions to float32");
}

RunManifest resolve(const Flags& f, const std::string& command) {
  RunManifest m;
  bool seed_set = false;
  if (f.given("config")) {
    json j;
    try {
      j = json::parse(read_text(f.config_path));
    } catch (const json::exception& e) {
      throw ConfigError("config file '" + f.config_path + "' is not JSON: " + e.what());
    }
    m = RunManifest::from_json(j);
    seed_set = j.contains("config") && j.at("config").contains("seed");
  }
  m.command = command;
  m.tool_version = kToolVersion;
  if (f.given("mode")) m.mode = parse_mode(f.mode);
  if (f.given("rho")) m.config.rho = f.rho;
  if (f.given("theta")) m.config.theta = f.theta;
  if (f.given("eta")) m.config.eta = f.eta;
  if (f.given("estimator")) m.config.estimator = parse_estimator(f.estimator);
  if (f.given("always_apply_cd")) m.config.always_apply_cd = f.always_apply_cd;
  if (f.given("temperature")) m.config.temperature = f.temperature;
  if (f.given("top_p")) m.config.top_p = f.top_p;
  if (f.given("max_new_tokens")) m.config.max_new_tokens = f.max_new_tokens;
  if (f.given("stop")) m.config.stop_sequences = f.stops;
  if (f.given("seed")) {
    m.config.seed = f.seed;
  } else if (!seed_set) {
    if (const char* env = std::getenv("USCD_SEED"); env != nullptr && *env != '\0') {
      try {
        m.config.seed = std::stoull(env);
      } catch (const std::exception&) {
        throw ConfigError(std::string("USCD_SEED is not an integer: ") + env);
      }
    }
  }
  if (f.given("n")) m.samples = f.n;
  if (f.given("k")) m.ks = f.ks;
  if (f.given("backend")) m.backend = f.backend;
  if (f.given("vocab")) m.vocab = f.vocab;
  if (f.given("tasks")) m.tasks = f.tasks;
  if (f.given("out")) m.out = f.out;
  if (f.given("trace")) m.trace = parse_trace_level(f.trace);
  if (f.given("paired")) m.paired = f.paired;
  if (f.given("jobs")) m.jobs = f.jobs;
  if (f.given("sweep")) m.sweeps = f.sweeps;
  m.config.validate();
  if (m.samples == 0) throw ConfigError("--n must be >= 1");
  if (m.jobs == 0) throw ConfigError("--jobs must be >= 1");
  if (m.backend.empty()) throw ConfigError("--backend is required");
  return m;
}

struct Session {
  RunManifest manifest;
  std::shared_ptr<const Vocab> vocab;
  std::unique_ptr<Backend> backend;
  std::vector<BenchmarkTask> tasks;
  fs::path out_dir;
};

Session open_session(const Flags& f, const std::string& command, std::ostream& err) {
  Session s;
  s.manifest = resolve(f, command);
  s.vocab = load_vocab(s.manifest.vocab);
  if (s.manifest.tasks.empty()) throw ConfigError("--tasks is required");
  s.tasks = load_tasks(s.manifest.tasks);
  s.out_dir = prepare_out_dir(s.manifest.out);
  s.backend = make_backend(s.manifest.backend, s.vocab);
  warn_theta(s.manifest, *s.vocab, err);
  return s;
}

void write_manifest(const Session& s) {
  write_text(s.out_dir / "manifest.json", s.manifest.to_json().dump(2) + "\n");
}

int report_invalid(const std::vector<TaskGenerations>& gens, std::ostream& err) {
  int bad = 0;
  for (const TaskGenerations& g : gens) {
    if (!g.valid()) {
      err << "task " << g.task_id << ": " << g.error << "\n";
      ++bad;
    }
  }
  if (bad > 0) err << "warning: " << bad << " task(s) failed and were excluded\n";
  return bad > 0 ? kExitPartial : kExitOk;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_decode(const Flags& f, std::ostream& out, std::ostream& err) {
  Session s = open_session(f, "decode", err);
  RunOptions opts{s.manifest.mode, s.manifest.samples, s.manifest.jobs, s.manifest.trace};
  auto gens = decode_tasks(s.tasks, *s.backend, s.manifest.config, opts);

  std::string lines;
  std::vector<GenerationRecord> traced;
  for (const TaskGenerations& g : gens) {
    for (const GenerationRecord& r : g.records) {
      lines += record_to_json(r, s.manifest.mode).dump() + "\n";
      if (!r.trace.empty()) traced.push_back(r);
    }
  }
  write_text(s.out_dir / "completions.jsonl", lines);
  if (s.manifest.trace != TraceLevel::kOff) {
    std::ostringstream trace;
    write_trace_jsonl(trace, traced, f.trace_f32);
    write_text(s.out_dir / "trace.jsonl", trace.str());
  }
  write_manifest(s);
  out << "wrote " << (s.out_dir / "completions.jsonl").string() << "\n";
  return report_invalid(gens, err);
}

int cmd_evaluate(const Flags& f, std::ostream& out, std::ostream& err) {
  Session s = open_session(f, "evaluate", err);
  const RunManifest& m = s.manifest;
  RunOptions opts{m.mode, m.samples, m.jobs, TraceLevel::kOff};
  for (int k : m.ks) {
    if (k < 1 || static_cast<std::size_t>(k) > m.samples) {
      throw OutOfRange(fmt::format("k={} exceeds n={}", k, m.samples));
    }
  }

  int status = kExitOk;
  if (m.paired) {
    PairedReport report = run_paired(s.tasks, *s.backend, m.config, m.ks, opts);
    write_text(s.out_dir / "report.json", paired_to_json(report).dump(2) + "\n");
    write_text(s.out_dir / "standard.csv", report_csv(report.standard));
    write_text(s.out_dir / "uscd.csv", report_csv(report.uscd));
    write_text(s.out_dir / "delta.csv", delta_csv(report));
    status = report.standard.invalid_tasks + report.uscd.invalid_tasks > 0 ? kExitPartial : kExitOk;
    for (std::size_t j = 0; j < m.ks.size(); ++j) {
      out << fmt::format("pass@{}: standard {} uscd {} delta {}\n", m.ks[j],
                         format_number(report.standard.mean_pass_at[j]),
                         format_number(report.uscd.mean_pass_at[j]), format_number(report.delta[j]));
    }
  } else {
    std::vector<TaskGenerations> gens =
        f.completions.empty() ? decode_tasks(s.tasks, *s.backend, m.config, opts)
                              : load_completions(f.completions, s.tasks);
    PassAtKReport report = score_generations(gens, s.tasks, m.ks, m.config, m.mode);
    write_text(s.out_dir / "report.json", report_to_json(report).dump(2) + "\n");
    write_text(s.out_dir / "report.csv", report_csv(report));
    status = report_invalid(gens, err);
    for (std::size_t j = 0; j < m.ks.size(); ++j) {
      out << fmt::format("pass@{}: {}\n", m.ks[j], format_number(report.mean_pass_at[j]));
    }
  }
  write_manifest(s);
  return status;
}

int cmd_ablate(const Flags& f, std::ostream& out, std::ostream& err) {
  Session s = open_session(f, "ablate", err);
  const RunManifest& m = s.manifest;
  if (m.sweeps.empty()) throw ConfigError("ablate needs at least one --sweep");

  std::map<std::string, std::vector<std::string>> grid;
  for (const std::string& spec : m.sweeps) {
    SweepAxis axis = parse_sweep(spec);
    auto& values = grid[axis.name];
    values.insert(values.end(), axis.values.begin(), axis.values.end());
  }
  auto axis = [&](const std::string& name, std::string fallback) {
    auto it = grid.find(name);
    return it != grid.end() ? it->second : std::vector<std::string>{std::move(fallback)};
  };

  const auto estimators = axis("estimator", std::string(to_string(m.config.estimator)));
  const auto applies = axis("always_apply_cd", m.config.always_apply_cd ? "true" : "false");
  const auto rhos = axis("rho", format_number(m.config.rho));
  const auto etas = axis("eta", format_number(m.config.eta));

  RunOptions opts{DecodeMode::kUscd, m.samples, m.jobs, TraceLevel::kOff};
  std::string csv =
      "estimator,always_apply_cd,rho,theta,eta,pass@1,repaired_step_fraction,invalid_tasks\n";
  std::size_t invalid = 0;
  std::size_t cells = 0;
  for (const std::string& est : estimators) {
    const auto thetas = grid.count("theta@" + est) ? grid.at("theta@" + est)
                                                   : axis("theta", format_number(m.config.theta));
    for (const std::string& apply : applies) {
      for (const std::string& rho : rhos) {
        for (const std::string& theta : thetas) {
          for (const std::string& eta : etas) {
            DecodeConfig cfg = m.config;
            cfg.estimator = parse_estimator(est);
            cfg.always_apply_cd = parse_bool(apply);
            cfg.rho = parse_double(rho, "rho");
            cfg.theta = parse_double(theta, "theta");
            cfg.eta = parse_double(eta, "eta");
            PassAtKReport report = run_benchmark(s.tasks, *s.backend, cfg, {1}, opts);
            invalid += report.invalid_tasks;
            ++cells;
            csv += fmt::format("{},{},{},{},{},{},{},{}\n", est, cfg.always_apply_cd ? "true" : "false",
                               format_number(cfg.rho), format_number(cfg.theta),
                               format_number(cfg.eta), format_number(report.mean_pass_at[0]),
                               format_number(report.mean_repaired_step_fraction),
                               report.invalid_tasks);
          }
        }
      }
    }
  }
  write_text(s.out_dir / "ablation.csv", csv);
  write_manifest(s);
  out << "wrote " << cells << " sweep cells to " << (s.out_dir / "ablation.csv").string() << "\n";
  if (invalid > 0) err << "warning: " << invalid << " task run(s) failed across the sweep\n";
  return invalid > 0 ? kExitPartial : kExitOk;
}

int cmd_strip(const std::string& in_path, const std::string& out_path,
              const std::optional<std::size_t>& keep, std::ostream& out, std::ostream& err) {
  std::istringstream lines(read_text(in_path));
  std::string result;
  std::string line;
  std::size_t lineno = 0;
  int failures = 0;
  std::size_t written = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError(fmt::format("{} line {}: {}", in_path, lineno, e.what()));
    }
    std::string id = j.value("task_id", std::string());
    try {
      StandardPrompt parsed = parse_prompt(j.at("prompt").get<std::string>(),
                                           parse_language(j.value("language", std::string("python"))));
      json removed = json::array();
      if (keep) {
        StandardPrompt kept = strip_partial(parsed, *keep);
        j["prompt"] = kept.raw_text;
      } else {
        LamePrompt lame = strip_examples(parsed, id);
        j["prompt"] = lame.raw_text;
        static const char* kKinds[] = {"doctest_call", "doctest_output", "appended_assert"};
        for (const ExampleSpan& s : lame.removed) {
          removed.push_back({{"begin", s.bytes.begin},
                             {"end", s.bytes.end},
                             {"kind", kKinds[static_cast<int>(s.kind)]}});
        }
        j["removed_spans"] = std::move(removed);
      }
    } catch (const ParseError& e) {
      err << "task " << id << ": " << e.what() << "\n";
      ++failures;
      continue;
    } catch (const OutOfRange& e) {
      // Prompts with fewer examples than --keep are passed through unchanged.
      err << "task " << id << ": " << e.what() << "; left unchanged\n";
    } catch (const json::exception& e) {
      err << "task " << id << ": " << e.what() << "\n";
      ++failures;
      continue;
    }
    result += j.dump() + "\n";
    ++written;
  }
  write_text(out_path, result);
  out << "wrote " << written << " prompt(s) to " << out_path << "\n";
  return failures > 0 ? kExitPartial : kExitOk;
}

int cmd_serve(const std::string& backend_spec, const std::string& vocab_path,
              const std::string& listen, bool stdio, std::ostream& out) {
  auto vocab = load_vocab(vocab_path);
  auto backend = make_backend(backend_spec, vocab);
  if (stdio) {
    LineChannel channel(STDIN_FILENO, STDOUT_FILENO);
    serve_connection(*backend, channel);
    return kExitOk;
  }
  auto colon = listen.rfind(':');
  if (colon == std::string::npos) throw ConfigError("--listen must be HOST:PORT");
  int port = 0;
  try {
    port = std::stoi(listen.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("--listen port is not a number");
  }
  if (port < 0 || port > 65535) throw ConfigError("--listen port out of range");
  TcpListener listener(listen.substr(0, colon), static_cast<std::uint16_t>(port));
  out << "listening on " << listen.substr(0, colon) << ":" << listener.port() << std::endl;
  g_stop.store(false);
  std::signal(SIGINT, handle_stop_signal);
  std::signal(SIGTERM, handle_stop_signal);
  serve_tcp(*backend, listener, g_stop);
  return kExitOk;
}

int cmd_js_report(const std::string& trace_path, std::size_t window, const std::string& out_dir,
                  std::ostream& out) {
  std::ifstream in(trace_path, std::ios::binary);
  if (!in) throw ConfigError("cannot open trace file '" + trace_path + "'");
  auto traces = read_trace_jsonl(in);
  fs::path dir = prepare_out_dir(out_dir);
  std::string rows = "task_id,sample," + std::string("step,js_std,js_fused,js_fused_pre,repaired\n");
  std::string windows =
      "task_id,sample,first_step,last_step,mean_js_std,mean_js_fused,mean_js_fused_pre,repaired\n";
  for (const TaggedTrace& t : traces) {
    JsDiagnostics diag = js_trace_report(t.steps, window);
    std::string prefix = fmt::format("{},{},", t.task_id, t.sample_index);
    std::istringstream r(js_rows_csv(diag));
    std::string line;
    std::getline(r, line);
    while (std::getline(r, line)) rows += prefix + line + "\n";
    std::istringstream w(js_windows_csv(diag));
    std::getline(w, line);
    while (std::getline(w, line)) windows += prefix + line + "\n";
  }
  write_text(dir / "js_steps.csv", rows);
  write_text(dir / "js_windows.csv", windows);
  out << "wrote diagnostics for " << traces.size() << " trace(s) to " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Uncertainty-aware selective contrastive decoding toolkit", "uscd"};
  app.require_subcommand(1);
  app.footer(
      "Run `uscd <command> --help` for the flags of each command.\n"
      "Exit codes: 0 success, 1 fatal configuration error, 2 some tasks failed.");

  Flags decode_flags, eval_flags, ablate_flags;
  auto* decode = app.add_subcommand("decode", "Generate completions for every task");
  add_run_flags(decode, decode_flags);

  auto* evaluate = app.add_subcommand("evaluate", "Estimate pass@k for a task set");
  add_run_flags(evaluate, eval_flags);
  evaluate->add_option("--completions", eval_flags.completions,
                       "Score an existing completions.jsonl instead of decoding");

  auto* ablate = app.add_subcommand("ablate", "Sweep rho / theta / eta / estimator");
  add_run_flags(ablate, ablate_flags);
  ablate_flags.opt["sweep"] =
      ablate->add_option("--sweep", ablate_flags.sweeps,
                         "Axis as name=v1,v2 or name=start:stop:step (repeatable); names: rho, "
                         "theta, eta, estimator, always_apply_cd, theta@ESTIMATOR");

  std::string strip_in, strip_out;
  std::size_t keep = 0;
  auto* strip = app.add_subcommand("strip-examples", "Derive lame prompts from a task file");
  strip->add_option("--in", strip_in, "Input JSONL {task_id, prompt, language}")->required();
  strip->add_option("--out", strip_out, "Output JSONL")->required();
  auto* keep_opt = strip->add_option("--keep", keep, "Keep the first N examples instead of none");

  std::string serve_backend, serve_vocab, listen = "127.0.0.1:0";
  bool serve_stdio = false;
  auto* serve = app.add_subcommand("serve", "Reference logits server for the remote backend");
  serve->add_option("--backend", serve_backend, "scripted:PATH | ngram:PATH:ORDER:K")->required();
  serve->add_option("--vocab", serve_vocab, "Vocabulary file")->required();
  serve->add_option("--listen", listen, "HOST:PORT to listen on (port 0 picks one)");
  serve->add_flag("--stdio", serve_stdio, "Speak the protocol on stdin/stdout instead");

  std::string trace_path, js_out;
  std::size_t window = 100;
  auto* js = app.add_subcommand("js-report", "JS-divergence diagnostics from a full trace");
  js->add_option("--trace-file", trace_path, "trace.jsonl written by decode --trace full")
      ->required();
  js->add_option("--window", window, "Steps per averaging window (default 100)");
  js->add_option("--out", js_out, "Output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitFatal;
  }

  try {
    if (decode->parsed()) return cmd_decode(decode_flags, out, err);
    if (evaluate->parsed()) return cmd_evaluate(eval_flags, out, err);
    if (ablate->parsed()) return cmd_ablate(ablate_flags, out, err);
    if (strip->parsed()) {
      std::optional<std::size_t> k;
      if (keep_opt->count() > 0) k = keep;
      return cmd_strip(strip_in, strip_out, k, out, err);
    }
    if (serve->parsed()) return cmd_serve(serve_backend, serve_vocab, listen, serve_stdio, out);
    if (js->parsed()) return cmd_js_report(trace_path, window, js_out, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFatal;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFatal;
  }
  return kExitFatal;
}

}  // namespace uscd
