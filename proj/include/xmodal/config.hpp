#pragma once

// Run configuration as a key-value text file:
//
//   # comment
//   [train]
//   lr2 = 1e-3          # same as train.lr2 = 1e-3 at top level
//   model.embed_dim = 32
//
// A `[section]` header prefixes the keys that follow it; a key that already
// contains a dot is taken as written. Unknown keys are errors.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "xmodal/data.hpp"
#include "xmodal/eval.hpp"
#include "xmodal/gradcheck.hpp"
#include "xmodal/trainer.hpp"

namespace xmodal {

struct RunConfig {
    SyntheticSpec data;
    TrainConfig train;
    ProbeConfig probe;
    GradcheckOptions gradcheck;
    Split eval_split = Split::Test;
};

/// Sets one dotted key; throws ConfigError for unknown keys or bad values.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);
/// "key=value" form used by command-line overrides.
void apply_override(RunConfig& cfg, std::string_view assignment);
std::string get_setting(const RunConfig& cfg, std::string_view key);

/// Every recognised key in dump order.
std::vector<std::string> config_keys();

void parse_config_text(RunConfig& cfg, std::string_view text, std::string_view origin = "<text>");
void load_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// All keys with their current values; parse_config_text of the result
/// reproduces `cfg`.
std::string dump_config(const RunConfig& cfg);

}  // namespace xmodal
