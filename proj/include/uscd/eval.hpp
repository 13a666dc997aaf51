#pragma once

#include <cstddef>
#include <memory>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "uscd/decoder.hpp"
#include "uscd/prompt_transform.hpp"

namespace uscd {

/// Unbiased pass@k, 1 - C(n-c, k) / C(n, k), evaluated as the product
/// 1 - prod_{i=n-c+1}^{n} (1 - k / i). Throws OutOfRange unless
/// 0 <= c <= n and 1 <= k <= n.
double pass_at_k(int n, int c, int k);

/// Pure pass/fail predicate on completion text.
class Checker {
 public:
  enum class Kind { kExactMatch, kRegex, kTokenSet };

  static Checker exact_match(std::string expected);
  /// ECMAScript syntax, searched anywhere in the completion. Throws
  /// CheckerConfigError when the pattern does not compile.
  static Checker regex(std::string pattern);
  /// Every required piece must appear among the whitespace-split tokens.
  static Checker token_set(std::vector<std::string> required);

  /// {"kind": "exact_match", "expected": ...} | {"kind": "regex",
  /// "pattern": ...} | {"kind": "token_set", "required": [...]}
  static Checker from_json(const nlohmann::json& spec);
  nlohmann::json to_json() const;

  Kind kind() const { return kind_; }
  bool operator()(std::string_view completion) const;

 private:
  Kind kind_ = Kind::kExactMatch;
  std::string text_;
  std::vector<std::string> required_;
  std::shared_ptr<const std::regex> compiled_;
};

bool check(std::string_view completion, const Checker& checker);

/// One line of a task file.
struct BenchmarkTask {
  std::string task_id;
  std::string prompt;
  Language language = Language::kPython;
  Checker checker;
};

/// Task JSONL: {"task_id", "prompt", "language", "checker": {...}}.
/// Throws ConfigError (or CheckerConfigError) naming the offending line.
std::vector<BenchmarkTask> load_tasks(const std::string& path);
std::vector<BenchmarkTask> parse_tasks(std::string_view jsonl);

/// Tokenized standard and lame prompts of a task.
PromptPair prepare_prompts(const BenchmarkTask& task, const Vocab& vocab);

/// Generations of one task, or the reason the task could not be run.
struct TaskGenerations {
  std::string task_id;
  std::vector<GenerationRecord> records;
  std::string error;  // non-empty marks the task invalid

  bool valid() const { return error.empty(); }
};

struct RunOptions {
  DecodeMode mode = DecodeMode::kUscd;
  std::size_t samples = 15;
  std::size_t jobs = 1;
  TraceLevel trace = TraceLevel::kOff;
};

/// sample_n over every task on a worker pool. Output order follows the
/// task order; every value depends only on the inputs and the seed.
std::vector<TaskGenerations> decode_tasks(const std::vector<BenchmarkTask>& tasks,
                                          Backend& backend, const DecodeConfig& cfg,
                                          const RunOptions& opts);

struct TaskResult {
  std::string task_id;
  int n = 0;
  int c = 0;
  std::vector<bool> passed;
  std::size_t repaired_steps = 0;
  std::size_t total_steps = 0;
  bool valid = true;
  std::string error;
  std::vector<double> pass_at;  // one per requested k

  double repaired_step_fraction() const;
};

struct PassAtKReport {
  std::string method;  // "standard" or "uscd"
  std::vector<int> ks;
  std::vector<TaskResult> tasks;
  std::vector<double> mean_pass_at;  // over valid tasks, one per k
  double mean_repaired_step_fraction = 0.0;
  std::size_t invalid_tasks = 0;
  DecodeConfig config;
};

/// Checks every generation and scores each task. Failed samples make the
/// task invalid; invalid tasks are excluded from the means.
PassAtKReport score_generations(const std::vector<TaskGenerations>& generations,
                                const std::vector<BenchmarkTask>& tasks, std::vector<int> ks,
                                const DecodeConfig& cfg, DecodeMode mode);

/// decode_tasks + score_generations. Throws OutOfRange when some k exceeds
/// the sample count.
PassAtKReport run_benchmark(const std::vector<BenchmarkTask>& tasks, Backend& backend,
                            const DecodeConfig& cfg, const std::vector<int>& ks,
                            const RunOptions& opts);

/// Standard and USCD on identical seeds, with USCD minus Standard deltas.
struct PairedReport {
  PassAtKReport standard;
  PassAtKReport uscd;
  std::vector<double> delta;  // mean pass@k difference per k
};

PairedReport run_paired(const std::vector<BenchmarkTask>& tasks, Backend& backend,
                        const DecodeConfig& cfg, const std::vector<int>& ks,
                        const RunOptions& opts);

nlohmann::json report_to_json(const PassAtKReport& report);
nlohmann::json paired_to_json(const PairedReport& report);

/// task_id,n,c,pass@k...,repaired_step_fraction; invalid tasks are omitted.
std::string report_csv(const PassAtKReport& report);
/// task_id followed by one USCD-minus-Standard column per k.
std::string delta_csv(const PairedReport& report);

/// Per-step divergences from the lame distribution.
struct JsRow {
  std::size_t step = 0;
  double js_std = 0.0;       // JS(lame, standard)
  double js_fused = 0.0;     // JS(lame, distribution the token was drawn from)
  double js_fused_pre = 0.0; // JS(lame, softmax(fused)) before temperature and top-p
  bool repaired = false;
};

struct JsWindow {
  std::size_t first_step = 0;
  std::size_t last_step = 0;  // inclusive
  double mean_js_std = 0.0;
  double mean_js_fused = 0.0;
  double mean_js_fused_pre = 0.0;
  std::size_t repaired = 0;
};

struct JsDiagnostics {
  std::vector<JsRow> rows;
  std::vector<JsWindow> windows;
};

/// Throws TraceIncomplete when a step lacks a distribution or verdict
/// (verdict-only or single-context traces).
JsDiagnostics js_trace_report(const std::vector<StepTrace>& trace, std::size_t window = 100);

/// step,js_std,js_fused,js_fused_pre,repaired
std::string js_rows_csv(const JsDiagnostics& diag);
/// first_step,last_step,mean_js_std,mean_js_fused,mean_js_fused_pre,repaired
std::string js_windows_csv(const JsDiagnostics& diag);

/// Shortest round-trip decimal form, used for every number in CSV output.
std::string format_number(double value);

}  // namespace uscd
