#pragma once

// Flat "key = value" run configuration. Blank lines and lines starting with
// '#' are ignored. Unknown keys and malformed values are usage errors.

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mitr/model.hpp"
#include "mitr/training.hpp"

namespace mitr {

struct RunConfig {
  ModelConfig model;  // vocab_size and d_visual come from the data
  TrainConfig train;
  LossWeights weights;
  std::vector<std::string> tasks{"trace", "caption", "joint"};
  std::size_t beam = 5;
  std::size_t val_records = 0;  // held out from the end of the data for validation
};

// Key/value pairs in file order; later duplicates win.
std::map<std::string, std::string> parse_key_values(std::string_view text);

// Applies every pair onto `config`.
void apply_settings(RunConfig& config, const std::map<std::string, std::string>& settings);
RunConfig load_run_config(const std::string& path);

// Comma-separated subset of trace, caption, joint, cycle_b, cycle_s; at
// most one cycle mode. Replaces the task list and sets the cycle mode.
void apply_tasks(RunConfig& config, std::string_view tasks);

// The configured weights with every term whose task is not listed set to 0.
LossWeights effective_weights(const RunConfig& config);
std::vector<std::string> split_list(std::string_view text);

// Flat rendering that parses back to the same configuration.
std::string render_config(const RunConfig& config);

}  // namespace mitr
