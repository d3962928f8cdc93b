#include "ctseg/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace ctseg::cfg {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

long long parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return i;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::array<double, 3> parse_triple(const std::string& key, const std::string& v) {
    std::array<double, 3> out{};
    std::stringstream ss(v);
    std::string cell;
    int i = 0;
    while (std::getline(ss, cell, ',')) {
        if (i >= 3) throw ConfigError("config key '" + key + "': expected three values");
        out[size_t(i++)] = parse_double(key, trim(cell));
    }
    if (i != 3) throw ConfigError("config key '" + key + "': expected three values");
    return out;
}

// Sizes are written H,W,D in configs (matching the usual in-plane-first
// convention for CT blocks); internal layout is (D,H,W).
vol::Shape3 parse_hwd(const std::string& key, const std::string& v) {
    const auto t = parse_triple(key, v);
    for (double d : t)
        if (d < 1 || d != double(int(d)))
            throw ConfigError("config key '" + key + "': dims must be positive integers");
    return vol::Shape3{int(t[2]), int(t[0]), int(t[1])};
}

}  // namespace

void apply_kv(RunConfig& cfg, const std::string& raw_key, const std::string& raw_value) {
    const std::string key = trim(raw_key);
    const std::string v = trim(raw_value);
    using Setter = std::function<void(RunConfig&, const std::string&)>;
    static const std::map<std::string, Setter> setters = {
        {"data_dir", [](RunConfig& c, const std::string& s) { c.data_dir = s; }},
        {"out_dir", [](RunConfig& c, const std::string& s) { c.out_dir = s; }},
        {"window_lo",
         [](RunConfig& c, const std::string& s) { c.window_lo = parse_double("window_lo", s); }},
        {"window_hi",
         [](RunConfig& c, const std::string& s) { c.window_hi = parse_double("window_hi", s); }},
        {"base_channels",
         [](RunConfig& c, const std::string& s) {
             c.base_channels = int(parse_int("base_channels", s));
         }},
        {"aux_factor_j",
         [](RunConfig& c, const std::string& s) {
             c.aux_factor_j = int(parse_int("aux_factor_j", s));
         }},
        {"aux_factor_k",
         [](RunConfig& c, const std::string& s) {
             c.aux_factor_k = int(parse_int("aux_factor_k", s));
         }},
        {"patch", [](RunConfig& c, const std::string& s) { c.patch = parse_hwd("patch", s); }},
        {"lr", [](RunConfig& c, const std::string& s) { c.lr = parse_double("lr", s); }},
        {"iters", [](RunConfig& c, const std::string& s) { c.iters = parse_int("iters", s); }},
        {"batch_labeled",
         [](RunConfig& c, const std::string& s) {
             c.batch_labeled = int(parse_int("batch_labeled", s));
         }},
        {"batch_unlabeled",
         [](RunConfig& c, const std::string& s) {
             c.batch_unlabeled = int(parse_int("batch_unlabeled", s));
         }},
        {"ema_beta",
         [](RunConfig& c, const std::string& s) { c.ema_beta = parse_double("ema_beta", s); }},
        {"lambda_max",
         [](RunConfig& c, const std::string& s) { c.lambda_max = parse_double("lambda_max", s); }},
        {"sigma_noise",
         [](RunConfig& c, const std::string& s) {
             c.sigma_noise = parse_double("sigma_noise", s);
         }},
        {"fg_bias",
         [](RunConfig& c, const std::string& s) { c.fg_bias = parse_double("fg_bias", s); }},
        {"seed",
         [](RunConfig& c, const std::string& s) {
             c.seed = uint64_t(parse_int("seed", s));
         }},
        {"checkpoint_every",
         [](RunConfig& c, const std::string& s) {
             c.checkpoint_every = parse_int("checkpoint_every", s);
         }},
        {"val_every",
         [](RunConfig& c, const std::string& s) { c.val_every = parse_int("val_every", s); }},
        {"perturb_consistency",
         [](RunConfig& c, const std::string& s) {
             c.perturb_consistency = parse_bool("perturb_consistency", s);
         }},
        {"supervised_only",
         [](RunConfig& c, const std::string& s) {
             c.supervised_only = parse_bool("supervised_only", s);
         }},
        {"threshold",
         [](RunConfig& c, const std::string& s) { c.threshold = parse_double("threshold", s); }},
        {"tau_mm", [](RunConfig& c, const std::string& s) { c.tau_mm = parse_double("tau_mm", s); }},
        {"teacher_infer",
         [](RunConfig& c, const std::string& s) {
             c.teacher_infer = parse_bool("teacher_infer", s);
         }},
        {"save_probability",
         [](RunConfig& c, const std::string& s) {
             c.save_probability = parse_bool("save_probability", s);
         }},
        {"n_labeled",
         [](RunConfig& c, const std::string& s) { c.n_labeled = int(parse_int("n_labeled", s)); }},
        {"n_unlabeled",
         [](RunConfig& c, const std::string& s) {
             c.n_unlabeled = int(parse_int("n_unlabeled", s));
         }},
        {"n_val", [](RunConfig& c, const std::string& s) { c.n_val = int(parse_int("n_val", s)); }},
        {"synth_dims",
         [](RunConfig& c, const std::string& s) { c.synth_dims = parse_hwd("synth_dims", s); }},
        {"synth_spacing",
         [](RunConfig& c, const std::string& s) {
             const auto t = parse_triple("synth_spacing", s);
             c.synth_spacing = vol::Spacing3{t[0], t[1], t[2]};
         }},
        {"n_blobs",
         [](RunConfig& c, const std::string& s) { c.n_blobs = int(parse_int("n_blobs", s)); }},
        {"synth_noise",
         [](RunConfig& c, const std::string& s) {
             c.synth_noise = parse_double("synth_noise", s);
         }},
    };

    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(cfg, v);
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path.string());
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                              ": expected 'key = value'");
        try {
            apply_kv(base, line.substr(0, eq), line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return base;
}

}  // namespace ctseg::cfg
