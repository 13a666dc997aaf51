#include "uscd/eval.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "uscd/error.hpp"
#include "uscd/trace_io.hpp"

namespace uscd {

using nlohmann::json;

double pass_at_k(int n, int c, int k) {
  if (n < 1 || c < 0 || c > n || k < 1 || k > n) {
    throw OutOfRange(fmt::format("pass@k needs 0 <= c <= n and 1 <= k <= n (n={}, c={}, k={})",
                                 n, c, k));
  }
  if (c == 0) return 0.0;
  if (n - c < k) return 1.0;
  long double miss = 1.0L;
  for (int i = n - c + 1; i <= n; ++i) miss *= 1.0L - static_cast<long double>(k) / i;
  return static_cast<double>(1.0L - miss);
}

Checker Checker::exact_match(std::string expected) {
  Checker c;
  c.kind_ = Kind::kExactMatch;
  c.text_ = std::move(expected);
  return c;
}

Checker Checker::regex(std::string pattern) {
  Checker c;
  c.kind_ = Kind::kRegex;
  try {
    c.compiled_ = std::make_shared<const std::regex>(pattern, std::regex::ECMAScript);
  } catch (const std::regex_error& e) {
    throw CheckerConfigError("regex '" + pattern + "' does not compile: " + e.what());
  }
  c.text_ = std::move(pattern);
  return c;
}

Checker Checker::token_set(std::vector<std::string> required) {
  Checker c;
  c.kind_ = Kind::kTokenSet;
  c.required_ = std::move(required);
  return c;
}

Checker Checker::from_json(const json& spec) {
  try {
    const std::string kind = spec.at("kind").get<std::string>();
    if (kind == "exact_match") return exact_match(spec.at("expected").get<std::string>());
    if (kind == "regex") return regex(spec.at("pattern").get<std::string>());
    if (kind == "token_set") return token_set(spec.at("required").get<std::vector<std::string>>());
    throw CheckerConfigError("unknown checker kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw CheckerConfigError(std::string("malformed checker: ") + e.what());
  }
}

json Checker::to_json() const {
  switch (kind_) {
    case Kind::kExactMatch:
      return {{"kind", "exact_match"}, {"expected", text_}};
    case Kind::kRegex:
      return {{"kind", "regex"}, {"pattern", text_}};
    case Kind::kTokenSet:
      return {{"kind", "token_set"}, {"required", required_}};
  }
  return {};
}

bool Checker::operator()(std::string_view completion) const {
  switch (kind_) {
    case Kind::kExactMatch:
      return completion == text_;
    case Kind::kRegex:
      return std::regex_search(completion.begin(), completion.end(), *compiled_);
    case Kind::kTokenSet: {
      std::vector<std::string> pieces;
      std::istringstream words{std::string(completion)};
      for (std::string w; words >> w;) pieces.push_back(std::move(w));
      return std::all_of(required_.begin(), required_.end(), [&](const std::string& r) {
        return std::find(pieces.begin(), pieces.end(), r) != pieces.end();
      });
    }
  }
  return false;
}

bool check(std::string_view completion, const Checker& checker) { return checker(completion); }

std::vector<BenchmarkTask> parse_tasks(std::string_view jsonl) {
  std::vector<BenchmarkTask> tasks;
  std::istringstream lines{std::string(jsonl)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j = json::parse(line);
      BenchmarkTask t;
      t.task_id = j.at("task_id").get<std::string>();
      t.prompt = j.at("prompt").get<std::string>();
      t.language = parse_language(j.value("language", std::string("python")));
      t.checker = j.contains("checker") ? Checker::from_json(j.at("checker"))
                                        : Checker::regex(".*");
      tasks.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw ConfigError("task line " + std::to_string(lineno) + ": " + e.what());
    } catch (const CheckerConfigError& e) {
      throw CheckerConfigError("task line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return tasks;
}

std::vector<BenchmarkTask> load_tasks(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open task file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_tasks(buf.str());
}

PromptPair prepare_prompts(const BenchmarkTask& task, const Vocab& vocab) {
  StandardPrompt parsed = parse_prompt(task.prompt, task.language);
  LamePrompt lame = strip_examples(parsed, task.task_id);
  return {vocab.tokenize(parsed.raw_text), vocab.tokenize(lame.raw_text)};
}

std::vector<TaskGenerations> decode_tasks(const std::vector<BenchmarkTask>& tasks,
                                          Backend& backend, const DecodeConfig& cfg,
                                          const RunOptions& opts) {
  cfg.validate();
  if (opts.samples == 0) throw ConfigError("sample count must be >= 1");
  std::vector<TaskGenerations> results(tasks.size());
  std::atomic<std::size_t> next{0};

  auto work = [&](Backend& model) {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      TaskGenerations& out = results[i];
      out.task_id = tasks[i].task_id;
      try {
        PromptPair pair = prepare_prompts(tasks[i], model.vocab());
        GenerateOptions gen{tasks[i].task_id, opts.trace};
        out.records = sample_n(pair, model, cfg, opts.samples, opts.mode, gen);
        for (const GenerationRecord& r : out.records) {
          if (r.finish == FinishReason::kError) {
            out.error = fmt::format("sample {} failed: {}", r.sample_index, r.error);
            break;
          }
        }
      } catch (const std::exception& e) {
        out.error = e.what();
      }
    }
  };

  std::size_t workers = std::clamp<std::size_t>(opts.jobs, 1, std::max<std::size_t>(tasks.size(), 1));
  if (workers == 1) {
    work(backend);
    return results;
  }
  std::vector<std::unique_ptr<Backend>> clones;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    std::unique_ptr<Backend> own = backend.shareable() ? nullptr : backend.clone();
    Backend* model = own ? own.get() : &backend;
    clones.push_back(std::move(own));
    pool.emplace_back([&work, model] { work(*model); });
  }
  for (auto& t : pool) t.join();
  return results;
}

double TaskResult::repaired_step_fraction() const {
  return total_steps == 0 ? 0.0 : static_cast<double>(repaired_steps) / total_steps;
}

PassAtKReport score_generations(const std::vector<TaskGenerations>& generations,
                                const std::vector<BenchmarkTask>& tasks, std::vector<int> ks,
                                const DecodeConfig& cfg, DecodeMode mode) {
  PassAtKReport report;
  report.method = std::string(to_string(mode));
  report.ks = std::move(ks);
  report.config = cfg;
  report.mean_pass_at.assign(report.ks.size(), 0.0);

  std::size_t valid = 0;
  for (std::size_t i = 0; i < generations.size(); ++i) {
    const TaskGenerations& g = generations[i];
    TaskResult r;
    r.task_id = g.task_id;
    r.valid = g.valid();
    r.error = g.error;
    if (r.valid) {
      for (const GenerationRecord& rec : g.records) {
        bool ok = tasks[i].checker(rec.completion);
        r.passed.push_back(ok);
        r.c += ok ? 1 : 0;
        r.repaired_steps += rec.repaired_steps;
        r.total_steps += rec.generated.size();
      }
      r.n = static_cast<int>(g.records.size());
      for (int k : report.ks) r.pass_at.push_back(pass_at_k(r.n, r.c, k));
      for (std::size_t j = 0; j < report.ks.size(); ++j) report.mean_pass_at[j] += r.pass_at[j];
      report.mean_repaired_step_fraction += r.repaired_step_fraction();
      ++valid;
    } else {
      ++report.invalid_tasks;
    }
    report.tasks.push_back(std::move(r));
  }
  if (valid > 0) {
    for (double& m : report.mean_pass_at) m /= static_cast<double>(valid);
    report.mean_repaired_step_fraction /= static_cast<double>(valid);
  }
  return report;
}

namespace {

void check_ks(const std::vector<int>& ks, std::size_t samples) {
  if (ks.empty()) throw ConfigError("at least one k is required");
  for (int k : ks) {
    if (k < 1 || static_cast<std::size_t>(k) > samples) {
      throw OutOfRange(fmt::format("k={} is outside [1, n={}]", k, samples));
    }
  }
}

}  // namespace

PassAtKReport run_benchmark(const std::vector<BenchmarkTask>& tasks, Backend& backend,
                            const DecodeConfig& cfg, const std::vector<int>& ks,
                            const RunOptions& opts) {
  check_ks(ks, opts.samples);
  auto generations = decode_tasks(tasks, backend, cfg, opts);
  return score_generations(generations, tasks, ks, cfg, opts.mode);
}

PairedReport run_paired(const std::vector<BenchmarkTask>& tasks, Backend& backend,
                        const DecodeConfig& cfg, const std::vector<int>& ks,
                        const RunOptions& opts) {
  RunOptions standard_opts = opts;
  standard_opts.mode = DecodeMode::kStandard;
  RunOptions uscd_opts = opts;
  uscd_opts.mode = DecodeMode::kUscd;

  PairedReport out;
  out.standard = run_benchmark(tasks, backend, cfg, ks, standard_opts);
  out.uscd = run_benchmark(tasks, backend, cfg, ks, uscd_opts);
  for (std::size_t j = 0; j < ks.size(); ++j) {
    out.delta.push_back(out.uscd.mean_pass_at[j] - out.standard.mean_pass_at[j]);
  }
  return out;
}

json report_to_json(const PassAtKReport& report) {
  json tasks = json::array();
  for (const TaskResult& r : report.tasks) {
    json t = {{"task_id", r.task_id}, {"valid", r.valid}};
    if (r.valid) {
      t["n"] = r.n;
      t["c"] = r.c;
      t["passed"] = r.passed;
      json pass = json::object();
      for (std::size_t j = 0; j < report.ks.size(); ++j) {
        pass["pass@" + std::to_string(report.ks[j])] = r.pass_at[j];
      }
      t["pass_at_k"] = std::move(pass);
      t["repaired_step_fraction"] = r.repaired_step_fraction();
    } else {
      t["error"] = r.error;
    }
    tasks.push_back(std::move(t));
  }
  json means = json::object();
  for (std::size_t j = 0; j < report.ks.size(); ++j) {
    means["pass@" + std::to_string(report.ks[j])] = report.mean_pass_at[j];
  }
  return {{"method", report.method},
          {"ks", report.ks},
          {"config", config_to_json(report.config)},
          {"mean_pass_at_k", std::move(means)},
          {"mean_repaired_step_fraction", report.mean_repaired_step_fraction},
          {"invalid_tasks", report.invalid_tasks},
          {"tasks", std::move(tasks)}};
}

json paired_to_json(const PairedReport& report) {
  json delta = json::object();
  for (std::size_t j = 0; j < report.uscd.ks.size(); ++j) {
    delta["pass@" + std::to_string(report.uscd.ks[j])] = report.delta[j];
  }
  return {{"standard", report_to_json(report.standard)},
          {"uscd", report_to_json(report.uscd)},
          {"delta", std::move(delta)}};
}

std::string format_number(double value) { return fmt::format("{}", value); }

std::string report_csv(const PassAtKReport& report) {
  std::string out = "task_id,n,c";
  for (int k : report.ks) out += fmt::format(",pass@{}", k);
  out += ",repaired_step_fraction\n";
  for (const TaskResult& r : report.tasks) {
    if (!r.valid) continue;
    out += fmt::format("{},{},{}", r.task_id, r.n, r.c);
    for (double p : r.pass_at) out += "," + format_number(p);
    out += "," + format_number(r.repaired_step_fraction()) + "\n";
  }
  return out;
}

std::string delta_csv(const PairedReport& report) {
  std::string out = "task_id";
  for (int k : report.uscd.ks) out += fmt::format(",delta_pass@{}", k);
  out += "\n";
  for (std::size_t i = 0; i < report.uscd.tasks.size(); ++i) {
    const TaskResult& u = report.uscd.tasks[i];
    const TaskResult& s = report.standard.tasks[i];
    if (!u.valid || !s.valid) continue;
    out += u.task_id;
    for (std::size_t j = 0; j < report.uscd.ks.size(); ++j) {
      out += "," + format_number(u.pass_at[j] - s.pass_at[j]);
    }
    out += "\n";
  }
  out += "mean";
  for (double d : report.delta) out += "," + format_number(d);
  out += "\n";
  return out;
}

JsDiagnostics js_trace_report(const std::vector<StepTrace>& trace, std::size_t window) {
  if (window == 0) throw ConfigError("diagnostics window must be >= 1");
  JsDiagnostics diag;
  for (const StepTrace& t : trace) {
    if (!t.std_dist || !t.lame_dist || !t.sampled_from || !t.verdict) {
      throw TraceIncomplete(fmt::format(
          "step {} lacks distributions; record traces with --trace full in uscd mode", t.step));
    }
    JsRow row;
    row.step = t.step;
    row.js_std = js_divergence(*t.lame_dist, *t.std_dist);
    row.js_fused = js_divergence(*t.lame_dist, *t.sampled_from);
    row.js_fused_pre = js_divergence(*t.lame_dist, apply_temperature(t.verdict->fused, 1.0));
    row.repaired = t.verdict->repaired;
    diag.rows.push_back(row);
  }
  for (std::size_t begin = 0; begin < diag.rows.size(); begin += window) {
    std::size_t end = std::min(diag.rows.size(), begin + window);
    JsWindow w;
    w.first_step = diag.rows[begin].step;
    w.last_step = diag.rows[end - 1].step;
    for (std::size_t i = begin; i < end; ++i) {
      w.mean_js_std += diag.rows[i].js_std;
      w.mean_js_fused += diag.rows[i].js_fused;
      w.mean_js_fused_pre += diag.rows[i].js_fused_pre;
      w.repaired += diag.rows[i].repaired ? 1 : 0;
    }
    const double count = static_cast<double>(end - begin);
    w.mean_js_std /= count;
    w.mean_js_fused /= count;
    w.mean_js_fused_pre /= count;
    diag.windows.push_back(w);
  }
  return diag;
}

std::string js_rows_csv(const JsDiagnostics& diag) {
  std::string out = "step,js_std,js_fused,js_fused_pre,repaired\n";
  for (const JsRow& r : diag.rows) {
    out += fmt::format("{},{},{},{},{}\n", r.step, format_number(r.js_std),
                       format_number(r.js_fused), format_number(r.js_fused_pre),
                       r.repaired ? 1 : 0);
  }
  return out;
}

std::string js_windows_csv(const JsDiagnostics& diag) {
  std::string out = "first_step,last_step,mean_js_std,mean_js_fused,mean_js_fused_pre,repaired\n";
  for (const JsWindow& w : diag.windows) {
    out += fmt::format("{},{},{},{},{},{}\n", w.first_step, w.last_step,
                       format_number(w.mean_js_std), format_number(w.mean_js_fused),
                       format_number(w.mean_js_fused_pre), w.repaired);
  }
  return out;
}

}  // namespace uscd
