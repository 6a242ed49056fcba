// Run configuration: one flat namespace of `key = value` settings shared
// by every subcommand, loadable from a text file, overridable from flags,
// and echoed back as resolved_config.txt so any run can be reproduced.
#pragma once

#include <sstream>

#include "emseg/training.hpp"

namespace emseg {

struct RunConfig {
    std::string model = "solarnet";  // solarnet | unet
    std::string preset = "desk";

    // Optimization.
    double learning_rate = 1e-3;
    int max_iterations = 2000;
    double lambda = 0.5;
    int batch_size = 4;
    double alpha = 0.9;
    uint64_t seed = 0;
    int checkpoint_every = 0;
    int eval_every = 0;
    int log_every = 10;
    bool augment = true;
    std::string class_weights = "none";  // "none" or "w0,w1"

    // Attention module.
    int bases = 64;
    int em_iterations = 3;
    bool normalize_bases = true;

    // Encoder / baseline.
    std::vector<int> encoder_channels = {16, 32};
    std::vector<int> encoder_strides = {2, 2};
    int unet_base_channels = 8;

    // Data handling.
    double test_fraction = 0.2;
    int tile = 64;
    int stride = 64;

    void apply_preset(const std::string& name);
    void set(const std::string& key, const std::string& value);
    std::string resolved_text() const;

    TrainConfig train_config() const;
    typename SolarNet<float>::Config solarnet_config() const;
    typename UNet<float>::Config unet_config() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline int parse_int(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        int v = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects an integer, got '" + value + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects a number, got '" + value + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: " + key + " expects true or false, got '" + value + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
    if (out.empty()) throw ConfigError("config: " + key + " expects a comma-separated list");
    return out;
}

inline std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace detail

inline void RunConfig::apply_preset(const std::string& name) {
    if (name == "desk") {
        *this = RunConfig{};
    } else if (name == "paper") {
        *this = RunConfig{};
        learning_rate = 1e-3;
        max_iterations = 20000;
        bases = 1024;
        em_iterations = 10;
        encoder_channels = {64, 128, 256};
        encoder_strides = {2, 2, 2};
        unet_base_channels = 64;
        tile = 512;
        stride = 256;
    } else {
        throw ConfigError("config: unknown preset '" + name + "' (expected desk or paper)");
    }
    preset = name;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "model") {
        if (value != "solarnet" && value != "unet")
            throw ConfigError("config: model must be solarnet or unet, got '" + value + "'");
        model = value;
    } else if (key == "preset") {
        apply_preset(value);
    } else if (key == "learning_rate") {
        learning_rate = parse_double(key, value);
    } else if (key == "max_iterations") {
        max_iterations = parse_int(key, value);
    } else if (key == "lambda") {
        lambda = parse_double(key, value);
    } else if (key == "batch_size") {
        batch_size = parse_int(key, value);
    } else if (key == "alpha") {
        alpha = parse_double(key, value);
    } else if (key == "seed") {
        seed = static_cast<uint64_t>(std::max(0, parse_int(key, value)));
    } else if (key == "checkpoint_every") {
        checkpoint_every = parse_int(key, value);
    } else if (key == "eval_every") {
        eval_every = parse_int(key, value);
    } else if (key == "log_every") {
        log_every = parse_int(key, value);
    } else if (key == "augment") {
        augment = parse_bool(key, value);
    } else if (key == "class_weights") {
        class_weights = value;
    } else if (key == "bases") {
        bases = parse_int(key, value);
    } else if (key == "em_iterations") {
        em_iterations = parse_int(key, value);
    } else if (key == "normalize_bases") {
        normalize_bases = parse_bool(key, value);
    } else if (key == "encoder_channels") {
        encoder_channels = parse_int_list(key, value);
    } else if (key == "encoder_strides") {
        encoder_strides = parse_int_list(key, value);
    } else if (key == "unet_base_channels") {
        unet_base_channels = parse_int(key, value);
    } else if (key == "test_fraction") {
        test_fraction = parse_double(key, value);
    } else if (key == "tile") {
        tile = parse_int(key, value);
    } else if (key == "stride") {
        stride = parse_int(key, value);
    } else {
        throw ConfigError("config: unknown key '" + key + "'");
    }
}

inline std::string RunConfig::resolved_text() const {
    using namespace detail;
    std::string out;
    auto line = [&out](const std::string& k, const std::string& v) {
        out += k + " = " + v + "\n";
    };
    line("model", model);
    line("preset", preset);
    line("learning_rate", format_double(learning_rate));
    line("max_iterations", std::to_string(max_iterations));
    line("lambda", format_double(lambda));
    line("batch_size", std::to_string(batch_size));
    line("alpha", format_double(alpha));
    line("seed", std::to_string(seed));
    line("checkpoint_every", std::to_string(checkpoint_every));
    line("eval_every", std::to_string(eval_every));
    line("log_every", std::to_string(log_every));
    line("augment", augment ? "true" : "false");
    line("class_weights", class_weights);
    line("bases", std::to_string(bases));
    line("em_iterations", std::to_string(em_iterations));
    line("normalize_bases", normalize_bases ? "true" : "false");
    line("encoder_channels", join_ints(encoder_channels));
    line("encoder_strides", join_ints(encoder_strides));
    line("unet_base_channels", std::to_string(unet_base_channels));
    line("test_fraction", format_double(test_fraction));
    line("tile", std::to_string(tile));
    line("stride", std::to_string(stride));
    return out;
}

// Parses a flat `key = value` file. Blank lines and lines starting with #
// are skipped; unknown keys are rejected.
inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                              ": expected 'key = value', got '" + s + "'");
        cfg.set(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    }
}

inline std::vector<double> parse_class_weights(const std::string& spec) {
    if (spec == "none" || spec.empty()) return {};
    std::stringstream ss(spec);
    std::string item;
    std::vector<double> out;
    while (std::getline(ss, item, ','))
        out.push_back(detail::parse_double("class_weights", detail::trim(item)));
    if (out.size() != 2)
        throw ConfigError("config: class_weights expects 'none' or two comma-separated numbers");
    return out;
}

inline TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.learning_rate = learning_rate;
    t.max_iterations = max_iterations;
    t.lambda = lambda;
    t.batch_size = batch_size;
    t.alpha = alpha;
    t.seed = seed;
    t.checkpoint_every = checkpoint_every;
    t.eval_every = eval_every;
    t.log_every = log_every;
    t.augment = augment;
    t.class_weights = parse_class_weights(class_weights);
    return t;
}

inline typename SolarNet<float>::Config RunConfig::solarnet_config() const {
    typename SolarNet<float>::Config c;
    c.encoder.channels = encoder_channels;
    c.encoder.strides = encoder_strides;
    c.emau.bases = bases;
    c.emau.iterations = em_iterations;
    c.emau.alpha = alpha;
    c.emau.normalize_bases = normalize_bases;
    c.emau.seed = seed + 1;
    c.seed = seed;
    return c;
}

inline typename UNet<float>::Config RunConfig::unet_config() const {
    typename UNet<float>::Config c;
    c.base_channels = unet_base_channels;
    c.seed = seed;
    return c;
}

}  // namespace emseg
