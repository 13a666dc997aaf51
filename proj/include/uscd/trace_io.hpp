#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uscd/decoder.hpp"

namespace uscd {

/// One JSONL line of a trace dump. -inf fused scores are written as null.
/// With `as_float32` the distributions are rounded to float precision and
/// renormalized when read back.
nlohmann::json step_trace_to_json(const StepTrace& trace, bool as_float32 = false);
StepTrace step_trace_from_json(const nlohmann::json& line);

/// Traces of every record, one step per line, tagged with task id and
/// sample index.
void write_trace_jsonl(std::ostream& out, const std::vector<GenerationRecord>& records,
                       bool as_float32 = false);

struct TaggedTrace {
  std::string task_id;
  std::size_t sample_index = 0;
  std::vector<StepTrace> steps;
};

/// Groups the lines of a trace dump by (task id, sample) in file order.
std::vector<TaggedTrace> read_trace_jsonl(std::istream& in);

nlohmann::json config_to_json(const DecodeConfig& cfg);
DecodeConfig config_from_json(const nlohmann::json& node, DecodeConfig base = {});

}  // namespace uscd
