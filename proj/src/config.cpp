#include "caranet/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>

namespace caranet {

std::string format_double(double x)
{
    char buf[40];
    for (int precision = 1; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, x);
        if (std::strtod(buf, nullptr) == x) break;
    }
    return buf;
}

namespace {

std::string_view trim(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected)
{
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

std::int64_t to_int(const std::string& key, const std::string& value)
{
    std::int64_t out = 0;
    const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc{} || end != value.data() + value.size()) bad_value(key, value, "an integer");
    return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& value)
{
    std::uint64_t out = 0;
    const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc{} || end != value.data() + value.size()) bad_value(key, value, "a non-negative integer");
    return out;
}

double to_real(const std::string& key, const std::string& value)
{
    if (value.empty()) bad_value(key, value, "a number");
    char* end = nullptr;
    const double out = std::strtod(value.c_str(), &end);
    if (*end != '\0') bad_value(key, value, "a number");
    return out;
}

bool to_bool(const std::string& key, const std::string& value)
{
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(key, value, "a boolean");
}

std::vector<double> to_real_list(const std::string& key, const std::string& value)
{
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= value.size()) {
        const std::size_t comma = value.find(',', start);
        const std::string item(trim(std::string_view(value).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
        out.push_back(to_real(key, item));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string real_list(const std::vector<double>& v)
{
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
    return out;
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

// Ordered table of every configurable key.
const std::vector<std::pair<std::string, Field>>& fields()
{
#define INT_FIELD(key, member)                                                                            \
    {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = static_cast<decltype(c.member)>(to_int(k, v)); }, \
           [](const RunConfig& c) { return std::to_string(c.member); }}}
#define UINT_FIELD(key, member)                                                                           \
    {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_uint(k, v); },   \
           [](const RunConfig& c) { return std::to_string(c.member); }}}
#define REAL_FIELD(key, member)                                                                           \
    {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_real(k, v); },   \
           [](const RunConfig& c) { return format_double(c.member); }}}
#define BOOL_FIELD(key, member)                                                                           \
    {key, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_bool(k, v); },   \
           [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}}
#define STRING_FIELD(key, member)                                                                         \
    {key, {[](RunConfig& c, const std::string&, const std::string& v) { c.member = v; },                 \
           [](const RunConfig& c) { return c.member; }}}

    static const std::vector<std::pair<std::string, Field>> table{
        INT_FIELD("model.input_h", model.input_h),
        INT_FIELD("model.input_w", model.input_w),
        INT_FIELD("model.base_channels", model.base_channels),
        INT_FIELD("model.decoder_channels", model.decoder_channels),
        INT_FIELD("model.cfp_channels", model.cfp_channels),
        INT_FIELD("model.cfp_rate", model.cfp_rate),
        INT_FIELD("model.res2net_scale", model.res2net_scale),
        BOOL_FIELD("model.use_cfp", model.use_cfp),
        BOOL_FIELD("model.use_ara", model.use_ara),
        UINT_FIELD("model.seed", model.seed),
        REAL_FIELD("train.learning_rate", train.learning_rate),
        REAL_FIELD("train.adam_beta1", train.adam_beta1),
        REAL_FIELD("train.adam_beta2", train.adam_beta2),
        REAL_FIELD("train.adam_eps", train.adam_eps),
        INT_FIELD("train.epochs", train.epochs),
        INT_FIELD("train.batch_size", train.batch_size),
        {"train.scales",
         {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.scales = to_real_list(k, v); },
          [](const RunConfig& c) { return real_list(c.train.scales); }}},
        UINT_FIELD("train.seed", train.seed),
        INT_FIELD("train.checkpoint_every", train.checkpoint_every),
        STRING_FIELD("data.manifest", manifest),
        INT_FIELD("data.n_samples", data.n_samples),
        INT_FIELD("data.height", data.height),
        INT_FIELD("data.width", data.width),
        REAL_FIELD("data.ratio_lo", data.ratio_lo),
        REAL_FIELD("data.ratio_hi", data.ratio_hi),
        INT_FIELD("data.blobs_min", data.blobs_min),
        INT_FIELD("data.blobs_max", data.blobs_max),
        REAL_FIELD("data.contrast", data.contrast),
        REAL_FIELD("data.texture", data.texture),
        REAL_FIELD("data.noise", data.noise),
        REAL_FIELD("data.train_fraction", data.train_fraction),
        UINT_FIELD("data.seed", data.seed),
        REAL_FIELD("eval.threshold", eval.threshold),
        STRING_FIELD("eval.split", eval.split),
        INT_FIELD("eval.intervals", eval.intervals),
        REAL_FIELD("eval.cutoff", eval.cutoff),
        INT_FIELD("eval.window", eval.window),
        REAL_FIELD("eval.tolerance", eval.tolerance),
    };
#undef INT_FIELD
#undef UINT_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD
#undef STRING_FIELD
    return table;
}

const Field* find_field(const std::string& key)
{
    for (const auto& [name, field] : fields())
        if (name == key) return &field;
    return nullptr;
}

}  // namespace

KeyValues parse_key_values(std::string_view text)
{
    KeyValues out;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const std::size_t eol = text.find('\n');
        std::string_view line = text.substr(0, eol);
        text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
        ++line_no;
        if (const std::size_t hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        const std::string key(trim(line.substr(0, eq)));
        const std::string value(trim(line.substr(eq + 1)));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        out.emplace_back(key, value);
    }
    return out;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value)
{
    const Field* field = find_field(key);
    if (!field) throw ConfigError("unknown config key '" + key + "'");
    field->set(cfg, key, value);
}

void apply_key_values(RunConfig& cfg, const KeyValues& kv)
{
    for (const auto& [key, value] : kv) set_config_value(cfg, key, value);
}

std::string format_run_config(const RunConfig& cfg)
{
    std::string out;
    for (const auto& [name, field] : fields()) out += name + " = " + field.get(cfg) + "\n";
    return out;
}

std::string format_model_config(const CaraNetConfig& model)
{
    RunConfig cfg;
    cfg.model = model;
    std::string out;
    for (const auto& [name, field] : fields())
        if (name.rfind("model.", 0) == 0) out += name + " = " + field.get(cfg) + "\n";
    return out;
}

CaraNetConfig parse_model_config(std::string_view text)
{
    RunConfig cfg;
    for (const auto& [key, value] : parse_key_values(text)) {
        if (key.rfind("model.", 0) != 0) throw ConfigError("unexpected key '" + key + "' in model metadata");
        set_config_value(cfg, key, value);
    }
    cfg.model.validate();
    return cfg.model;
}

}  // namespace caranet
