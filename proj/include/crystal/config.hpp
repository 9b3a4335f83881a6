#pragma once

// Experiment configuration: defaults per experiment, loading from INI/TOML
// or JSON (including a previous run's manifest), validation and echo.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crystal/errors.hpp"
#include "crystal/pde.hpp"
#include "crystal/profiles.hpp"

namespace crystal {

using json = nlohmann::ordered_json;

enum class Experiment { kmc, pde, mm, compare, rates, wetting, selfsim, decay, gibbs_table };

inline const char* to_string(Experiment e) {
    switch (e) {
        case Experiment::kmc: return "kmc";
        case Experiment::pde: return "pde";
        case Experiment::mm: return "mm";
        case Experiment::compare: return "compare";
        case Experiment::rates: return "rates";
        case Experiment::wetting: return "wetting";
        case Experiment::selfsim: return "selfsim";
        case Experiment::decay: return "decay";
        case Experiment::gibbs_table: return "gibbs-table";
    }
    return "?";
}

inline Experiment parse_experiment(const std::string& s) {
    for (auto e : {Experiment::kmc, Experiment::pde, Experiment::mm, Experiment::compare, Experiment::rates,
                   Experiment::wetting, Experiment::selfsim, Experiment::decay, Experiment::gibbs_table}) {
        if (s == to_string(e)) return e;
    }
    throw ConfigError("unknown experiment '" + s + "'");
}

struct ExperimentConfig {
    Experiment experiment = Experiment::pde;
    double beta = 1.0;
    bool allow_high_beta = false;
    std::vector<std::size_t> n{50};
    std::size_t grid = 128;
    double length = 1.0;
    double t_final = 1e-4;
    std::vector<double> times;  // report times; empty means {t_final}
    std::uint64_t seed = 1;
    std::size_t replicas = 8;
    unsigned threads = 0;
    std::uint64_t max_events = 100'000'000ULL;

    InitialProfile profile{};

    pde::Form form = pde::Form::height;
    bool prefactor = false;
    double abs_tol = 1e-10;
    double rel_tol = 1e-8;
    double dt_max = INFINITY;

    double rate_center = 0.0;  // 0 means t_final / 2
    double rate_window = 0.0;  // 0 means t_final / 4

    std::size_t steps = 64;
    double interval = 5e-4;
    double tol = 1e-3;
    std::size_t max_iter = 200;
    double threshold = 1e-6;
    std::size_t snapshots = 50;

    std::vector<double> betas{0.01, 0.1, 0.25, 0.5, 1.0};
    std::vector<double> lambdas{-2.0, -1.0, 0.0, 1.0, 2.0};
    std::vector<std::int64_t> moments{-3, -2, -1, 0, 1, 2, 3};

    std::string out = "out";
    bool gnuplot = false;

    /// Report times with the default filled in.
    std::vector<double> report_times() const { return times.empty() ? std::vector<double>{t_final} : times; }
    double resolved_rate_center() const { return rate_center > 0.0 ? rate_center : 0.5 * t_final; }
    double resolved_rate_window() const { return rate_window > 0.0 ? rate_window : 0.25 * t_final; }

    pde::SolverConfig solver() const {
        pde::SolverConfig c;
        c.beta = beta;
        c.abs_tol = abs_tol;
        c.rel_tol = rel_tol;
        c.dt_max = dt_max;
        c.form = form;
        c.gibbs_prefactor = prefactor;
        return c;
    }
};

/// Defaults for each experiment, chosen at desk scale.
inline ExperimentConfig defaults_for(Experiment e) {
    ExperimentConfig c;
    c.experiment = e;
    switch (e) {
        case Experiment::kmc:
            c.beta = 0.01;
            c.n = {50};
            c.t_final = 1e-5;
            c.replicas = 8;
            break;
        case Experiment::pde:
            c.beta = 1.0;
            c.grid = 128;
            c.t_final = 1e-4;
            break;
        case Experiment::mm:
            c.form = pde::Form::slope;
            c.grid = 64;
            c.profile.amplitude = 0.01;
            c.t_final = 3e-5;
            c.steps = 64;
            break;
        case Experiment::compare:
            c.beta = 0.01;
            c.n = {50, 100, 200};
            c.grid = 200;
            c.t_final = 1.5e-4;
            c.replicas = 32;
            break;
        case Experiment::rates:
            c.beta = 0.25;
            c.n = {50, 100, 200};
            c.grid = 200;
            c.t_final = 1e-6;
            c.replicas = 32;
            break;
        case Experiment::wetting:
            c.beta = 0.05;
            c.grid = 64;
            c.profile.kind = ProfileKind::compact_bump;
            c.profile.amplitude = 1.0;
            c.t_final = 5e-10;
            c.snapshots = 50;
            break;
        case Experiment::selfsim:
            c.beta = 0.25;
            c.grid = 128;
            c.profile.amplitude = 1.0;
            c.interval = 5e-4;
            c.tol = 1e-3;
            c.max_iter = 200;
            break;
        case Experiment::decay:
            c.form = pde::Form::slope;
            c.grid = 64;
            c.profile.amplitude = 1e-4;
            c.t_final = 2e-3;
            c.snapshots = 200;
            break;
        case Experiment::gibbs_table:
            break;
    }
    return c;
}

namespace config_detail {

inline double to_double(const json& v, const std::string& key) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        if (s == "inf" || s == "infinity") return INFINITY;
        try {
            std::size_t used = 0;
            const double d = std::stod(s, &used);
            if (used == s.size()) return d;
        } catch (const std::exception&) {
        }
    }
    throw ConfigError("key '" + key + "' expects a number");
}

inline std::uint64_t to_count(const json& v, const std::string& key) {
    const double d = to_double(v, key);
    if (!(d >= 0.0) || d != std::floor(d) || d > 1.8e19) throw ConfigError("key '" + key + "' expects a nonnegative integer");
    return static_cast<std::uint64_t>(d);
}

inline std::int64_t to_int(const json& v, const std::string& key) {
    const double d = to_double(v, key);
    if (d != std::floor(d) || std::abs(d) > 9e18) throw ConfigError("key '" + key + "' expects an integer");
    return static_cast<std::int64_t>(d);
}

inline bool to_bool(const json& v, const std::string& key) {
    if (v.is_boolean()) return v.get<bool>();
    if (v.is_number_integer()) return v.get<long long>() != 0;
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
        if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    }
    throw ConfigError("key '" + key + "' expects a boolean");
}

inline std::string to_str(const json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    throw ConfigError("key '" + key + "' expects a string");
}

/// Arrays, or comma-separated strings, or a single scalar.
inline std::vector<json> to_list(const json& v) {
    if (v.is_array()) return std::vector<json>(v.begin(), v.end());
    if (v.is_string()) {
        std::vector<json> out;
        std::string s = v.get<std::string>();
        if (!s.empty() && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto b = item.find_first_not_of(" \t");
            const auto e = item.find_last_not_of(" \t");
            if (b != std::string::npos) out.emplace_back(item.substr(b, e - b + 1));
        }
        return out;
    }
    return {v};
}

}  // namespace config_detail

/// Sets one key; unknown keys and ill-typed values are configuration errors.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const json& v) {
    using namespace config_detail;
    if (key == "experiment") {
        if (parse_experiment(to_str(v, key)) != c.experiment) throw ConfigError("config is for a different experiment");
    } else if (key == "beta") c.beta = to_double(v, key);
    else if (key == "allow_high_beta") c.allow_high_beta = to_bool(v, key);
    else if (key == "n") {
        c.n.clear();
        for (const auto& x : to_list(v)) c.n.push_back(static_cast<std::size_t>(to_count(x, key)));
    } else if (key == "grid") c.grid = static_cast<std::size_t>(to_count(v, key));
    else if (key == "length") c.length = to_double(v, key);
    else if (key == "t_final") c.t_final = to_double(v, key);
    else if (key == "times") {
        c.times.clear();
        for (const auto& x : to_list(v)) c.times.push_back(to_double(x, key));
    } else if (key == "seed") c.seed = to_count(v, key);
    else if (key == "replicas") c.replicas = static_cast<std::size_t>(to_count(v, key));
    else if (key == "threads") c.threads = static_cast<unsigned>(to_count(v, key));
    else if (key == "max_events") c.max_events = to_count(v, key);
    else if (key == "profile") c.profile.kind = parse_profile_kind(to_str(v, key));
    else if (key == "amplitude") c.profile.amplitude = to_double(v, key);
    else if (key == "shift") c.profile.shift = to_double(v, key);
    else if (key == "profile_table") c.profile.table = to_str(v, key);
    else if (key == "form") {
        const std::string f = to_str(v, key);
        if (f == "height") c.form = pde::Form::height;
        else if (f == "slope") c.form = pde::Form::slope;
        else throw ConfigError("form must be height or slope");
    } else if (key == "prefactor") c.prefactor = to_bool(v, key);
    else if (key == "abs_tol") c.abs_tol = to_double(v, key);
    else if (key == "rel_tol") c.rel_tol = to_double(v, key);
    else if (key == "dt_max") c.dt_max = v.is_null() ? INFINITY : to_double(v, key);
    else if (key == "rate_center") c.rate_center = to_double(v, key);
    else if (key == "rate_window") c.rate_window = to_double(v, key);
    else if (key == "steps") c.steps = static_cast<std::size_t>(to_count(v, key));
    else if (key == "interval") c.interval = to_double(v, key);
    else if (key == "tol") c.tol = to_double(v, key);
    else if (key == "max_iter") c.max_iter = static_cast<std::size_t>(to_count(v, key));
    else if (key == "threshold") c.threshold = to_double(v, key);
    else if (key == "snapshots") c.snapshots = static_cast<std::size_t>(to_count(v, key));
    else if (key == "betas") {
        c.betas.clear();
        for (const auto& x : to_list(v)) c.betas.push_back(to_double(x, key));
    } else if (key == "lambdas") {
        c.lambdas.clear();
        for (const auto& x : to_list(v)) c.lambdas.push_back(to_double(x, key));
    } else if (key == "moments") {
        c.moments.clear();
        for (const auto& x : to_list(v)) c.moments.push_back(to_int(x, key));
    } else if (key == "out") c.out = to_str(v, key);
    else if (key == "gnuplot") c.gnuplot = to_bool(v, key);
    else throw ConfigError("unknown configuration key '" + key + "'");
}

/// Checks every invariant before any run starts; loads custom tables.
inline void validate(ExperimentConfig& c) {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (!(c.beta > 0.0) || !std::isfinite(c.beta)) fail("beta must be positive");
    if (c.beta > 1.0 && !c.allow_high_beta) fail("beta > 1 requires allow_high_beta = true");
    if (!(c.length > 0.0)) fail("length must be positive");
    if (!(c.t_final >= 0.0) || !std::isfinite(c.t_final)) fail("t_final must be nonnegative");
    for (double t : c.times) {
        if (!(t >= 0.0 && t <= c.t_final)) fail("report times must lie in [0, t_final]");
    }
    if (!(c.abs_tol > 0.0) || !(c.rel_tol > 0.0)) fail("solver tolerances must be positive");
    if (!(c.dt_max > 0.0)) fail("dt_max must be positive");
    if (!std::isfinite(c.profile.amplitude) || !std::isfinite(c.profile.shift)) fail("profile parameters must be finite");
    if (c.profile.kind == ProfileKind::custom) {
        if (c.profile.table.empty()) fail("custom profile needs profile_table");
        c.profile.tabulated = TabulatedProfile::load_csv(c.profile.table, 1.0);
    }
    const bool micro = c.experiment == Experiment::kmc || c.experiment == Experiment::compare ||
                       c.experiment == Experiment::rates;
    if (micro) {
        if (c.n.empty()) fail("n must list at least one lattice size");
        for (auto nn : c.n) {
            if (nn < 4) fail("lattice sizes must be at least 4");
        }
        if (c.replicas < 1) fail("replicas must be at least 1");
        if (c.max_events < 1) fail("max_events must be positive");
    }
    if (c.experiment == Experiment::compare && c.n.size() < 3) fail("compare needs at least three values of n");
    if (c.experiment == Experiment::compare || c.experiment == Experiment::rates) {
        const double tc = c.resolved_rate_center(), d = c.resolved_rate_window();
        if (!(d > 0.0) || tc - d < 0.0 || tc + d > c.t_final * (1.0 + 1e-12)) {
            fail("rate window [rate_center - rate_window, rate_center + rate_window] must lie in [0, t_final]");
        }
    }
    const bool macro = c.experiment != Experiment::gibbs_table && !micro;
    if (macro && c.grid < 5) fail("grid must have at least 5 points");
    if (c.experiment == Experiment::compare && c.grid < 5) fail("grid must have at least 5 points");
    if (c.experiment == Experiment::mm && c.steps < 1) fail("steps must be positive");
    if (c.experiment == Experiment::selfsim) {
        if (!(c.interval > 0.0)) fail("interval must be positive");
        if (!(c.tol > 0.0)) fail("tol must be positive");
        if (c.max_iter < 2) fail("max_iter must be at least 2");
    }
    if (c.experiment == Experiment::wetting && !(c.threshold > 0.0)) fail("threshold must be positive");
    if ((c.experiment == Experiment::wetting || c.experiment == Experiment::decay) && c.snapshots < 2) {
        fail("snapshots must be at least 2");
    }
    if ((c.experiment == Experiment::mm || c.experiment == Experiment::decay) && c.form != pde::Form::slope) {
        fail("this experiment runs the slope form");
    }
    if ((c.experiment == Experiment::mm || c.experiment == Experiment::decay) && c.beta != 1.0) {
        fail("the slope-form functional is defined at beta = 1");
    }
    if (c.experiment == Experiment::gibbs_table) {
        if (c.betas.empty() || c.lambdas.empty() || c.moments.empty()) fail("gibbs-table needs betas, lambdas, moments");
        for (double b : c.betas) {
            if (!(b > 0.0)) fail("table betas must be positive");
        }
    }
}

/// Resolved configuration as written to the manifest; reading it back reproduces the run.
inline json to_json(const ExperimentConfig& c) {
    json j;
    j["experiment"] = to_string(c.experiment);
    j["beta"] = c.beta;
    j["allow_high_beta"] = c.allow_high_beta;
    j["n"] = c.n;
    j["grid"] = c.grid;
    j["length"] = c.length;
    j["t_final"] = c.t_final;
    j["times"] = c.report_times();
    j["seed"] = c.seed;
    j["replicas"] = c.replicas;
    j["max_events"] = c.max_events;
    j["profile"] = to_string(c.profile.kind);
    j["amplitude"] = c.profile.amplitude;
    j["shift"] = c.profile.shift;
    if (!c.profile.table.empty()) j["profile_table"] = c.profile.table;
    j["form"] = pde::to_string(c.form);
    j["prefactor"] = c.prefactor;
    j["abs_tol"] = c.abs_tol;
    j["rel_tol"] = c.rel_tol;
    j["dt_max"] = std::isfinite(c.dt_max) ? json(c.dt_max) : json("inf");
    j["rate_center"] = c.resolved_rate_center();
    j["rate_window"] = c.resolved_rate_window();
    j["steps"] = c.steps;
    j["interval"] = c.interval;
    j["tol"] = c.tol;
    j["max_iter"] = c.max_iter;
    j["threshold"] = c.threshold;
    j["snapshots"] = c.snapshots;
    j["betas"] = c.betas;
    j["lambdas"] = c.lambdas;
    j["moments"] = c.moments;
    j["out"] = c.out;
    j["gnuplot"] = c.gnuplot;
    return j;
}

/// Section name -> key -> value, from an INI/TOML or JSON document.
using ConfigSections = std::map<std::string, std::map<std::string, json>>;

inline ConfigSections read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    ConfigSections out;
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        json doc;
        try {
            doc = json::parse(text);
        } catch (const std::exception& e) {
            throw ConfigError(path + ": invalid JSON: " + e.what());
        }
        // a manifest carries the resolved settings under "config"
        if (doc.contains("config") && doc["config"].is_object()) {
            const json& cfg = doc["config"];
            for (auto it = cfg.begin(); it != cfg.end(); ++it) out["common"][it.key()] = it.value();
            return out;
        }
        for (auto it = doc.begin(); it != doc.end(); ++it) {
            if (it.value().is_object()) {
                for (auto kv = it.value().begin(); kv != it.value().end(); ++kv) out[it.key()][kv.key()] = kv.value();
            } else {
                out["common"][it.key()] = it.value();
            }
        }
        return out;
    }
    std::istringstream is(text);
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_config(is);
    } catch (const CLI::Error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") continue;  // section markers
        std::string section = "common";
        if (!item.parents.empty()) {
            section = item.parents.front();
            for (std::size_t k = 1; k < item.parents.size(); ++k) section += "." + item.parents[k];
        }
        json value;
        if (item.inputs.size() == 1) value = item.inputs.front();
        else {
            value = json::array();
            for (const auto& s : item.inputs) value.push_back(s);
        }
        out[section][item.name] = value;
    }
    return out;
}

/// Defaults, then [common], then the experiment's own section.
inline ExperimentConfig resolve_config(Experiment e, const ConfigSections& sections) {
    ExperimentConfig c = defaults_for(e);
    static const std::set<std::string> known{"common", "kmc", "pde", "mm", "compare", "rates",
                                             "wetting", "selfsim", "decay", "gibbs-table"};
    for (const auto& [name, _] : sections) {
        if (!known.count(name)) throw ConfigError("unknown config section [" + name + "]");
    }
    if (auto it = sections.find("common"); it != sections.end()) {
        for (const auto& [k, v] : it->second) apply_setting(c, k, v);
    }
    if (auto it = sections.find(to_string(e)); it != sections.end()) {
        for (const auto& [k, v] : it->second) apply_setting(c, k, v);
    }
    return c;
}

}  // namespace crystal
