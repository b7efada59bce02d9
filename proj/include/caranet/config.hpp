#pragma once

#include "caranet/data_io.hpp"
#include "caranet/model.hpp"
#include "caranet/training.hpp"

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace caranet {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct EvalConfig {
    double threshold = 0.5;
    std::string split = "test";
    Index intervals = 50;
    double cutoff = 0.05;
    Index window = 5;
    double tolerance = 0.05;
};

/// Everything a command can be configured with. Keys are `section.field`.
struct RunConfig {
    CaraNetConfig model;
    TrainConfig train;
    SyntheticSpec data;
    std::string manifest;  // data.manifest
    EvalConfig eval;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Flat `key = value` lines; `#` starts a comment; blank lines ignored.
/// Throws ConfigError with the line number on malformed input.
KeyValues parse_key_values(std::string_view text);

/// Unknown keys and unparsable values throw ConfigError.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
void apply_key_values(RunConfig& cfg, const KeyValues& kv);

/// Every key of every section, one per line, in a fixed order. Feeding the
/// text back through parse_key_values/apply_key_values reproduces cfg.
std::string format_run_config(const RunConfig& cfg);

/// Only the model section; used as checkpoint metadata.
std::string format_model_config(const CaraNetConfig& cfg);
CaraNetConfig parse_model_config(std::string_view text);

/// Shortest decimal that reads back to the same double.
std::string format_double(double x);

}  // namespace caranet
