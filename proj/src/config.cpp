#include "ion/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "ion/errors.hpp"

namespace ion::config {

namespace {

using nlohmann::json;
using ordered = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& origin, const std::string& what) {
    throw ConfigError(fmt::format("{}: {}", origin, what));
}

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& origin, const std::string& path) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            fail(origin, fmt::format("unknown field '{}{}'", path, it.key()));
}

double get_num(const json& obj, const char* key, double dflt,
               const std::string& origin, const std::string& path) {
    if (!obj.contains(key)) return dflt;
    if (!obj.at(key).is_number())
        fail(origin, fmt::format("field '{}{}' must be a number", path, key));
    return obj.at(key).get<double>();
}

int get_int(const json& obj, const char* key, int dflt,
            const std::string& origin, const std::string& path) {
    if (!obj.contains(key)) return dflt;
    if (!obj.at(key).is_number_integer())
        fail(origin, fmt::format("field '{}{}' must be an integer", path, key));
    return obj.at(key).get<int>();
}

// A grid is either an explicit array or {"from", "to", "step"}.
std::vector<double> parse_grid(const json& g, const std::string& origin,
                               const std::string& path) {
    std::vector<double> out;
    if (g.is_array()) {
        for (const auto& v : g) {
            if (!v.is_number())
                fail(origin, fmt::format("grid '{}' must hold numbers", path));
            out.push_back(v.get<double>());
        }
    } else if (g.is_object()) {
        check_keys(g, {"from", "to", "step"}, origin, path + ".");
        for (const char* k : {"from", "to", "step"})
            if (!g.contains(k))
                fail(origin, fmt::format("grid '{}' needs '{}'", path, k));
        const double from = g.at("from").get<double>();
        const double to = g.at("to").get<double>();
        const double step = g.at("step").get<double>();
        if (!(step > 0.0))
            fail(origin, fmt::format("grid '{}' step must be positive", path));
        for (double v = from; v <= to + 1e-12 * step; v += step)
            out.push_back(v);
    } else {
        fail(origin, fmt::format("grid '{}' must be an array or a range object",
                                 path));
    }
    if (out.empty())
        fail(origin, fmt::format("grid '{}' is empty", path));
    for (std::size_t i = 1; i < out.size(); ++i)
        if (!(out[i] > out[i - 1]))
            fail(origin,
                 fmt::format("grid '{}' must be strictly increasing", path));
    return out;
}

ModelParams parse_model(const json& m, bool scan_axes, const std::string& origin) {
    std::set<std::string> allowed = {"n_sites", "j",           "b_field",
                                     "omega_z", "temperature", "hopping_range"};
    if (!scan_axes) {
        allowed.insert("f_z");
        allowed.insert("xi");
    }
    check_keys(m, allowed, origin, "model.");
    if (!m.contains("n_sites"))
        fail(origin, "model.n_sites is required");
    ModelParams p;
    p.n_sites = get_int(m, "n_sites", 0, origin, "model.");
    if (p.n_sites < 1) fail(origin, "model.n_sites must be positive");
    p.j = get_num(m, "j", 1.0, origin, "model.");
    p.b_field = get_num(m, "b_field", 0.0, origin, "model.");
    p.omega_z = get_num(m, "omega_z", 1.0, origin, "model.");
    p.temperature = get_num(m, "temperature", 0.0, origin, "model.");
    p.hopping_range = get_int(m, "hopping_range", 0, origin, "model.");
    if (!scan_axes) {
        p.f_z = get_num(m, "f_z", 0.0, origin, "model.");
        p.xi = get_num(m, "xi", 0.0, origin, "model.");
    }
    return p;
}

ngs::FlowOptions parse_solver(const json& root, const std::string& origin) {
    ngs::FlowOptions o;  // ngs defaults
    if (!root.contains("solver")) return o;
    const json& s = root.at("solver");
    check_keys(s,
               {"restarts", "max_steps", "dt_init", "dt_max", "convergence_tol",
                "quiet_window", "momentum", "rate_clip"},
               origin, "solver.");
    o.restarts = get_int(s, "restarts", o.restarts, origin, "solver.");
    o.max_steps = get_int(s, "max_steps", o.max_steps, origin, "solver.");
    o.dt_init = get_num(s, "dt_init", o.dt_init, origin, "solver.");
    o.dt_max = get_num(s, "dt_max", o.dt_max, origin, "solver.");
    o.convergence_tol =
        get_num(s, "convergence_tol", o.convergence_tol, origin, "solver.");
    o.quiet_window = get_int(s, "quiet_window", o.quiet_window, origin, "solver.");
    o.momentum = get_num(s, "momentum", o.momentum, origin, "solver.");
    o.rate_clip = get_num(s, "rate_clip", o.rate_clip, origin, "solver.");
    if (o.restarts < 1) fail(origin, "solver.restarts must be at least 1");
    if (o.max_steps < 1) fail(origin, "solver.max_steps must be at least 1");
    if (o.momentum < 0.0 || o.momentum >= 1.0)
        fail(origin, "solver.momentum must be in [0, 1)");
    if (o.rate_clip < 0.0) fail(origin, "solver.rate_clip must be >= 0");
    return o;
}

ordered emit_solver(const ngs::FlowOptions& o) {
    ordered s;
    s["restarts"] = o.restarts;
    s["max_steps"] = o.max_steps;
    s["dt_init"] = o.dt_init;
    s["dt_max"] = o.dt_max;
    s["convergence_tol"] = o.convergence_tol;
    s["quiet_window"] = o.quiet_window;
    s["momentum"] = o.momentum;
    s["rate_clip"] = o.rate_clip;
    return s;
}

ordered emit_model(const ModelParams& p, bool scan_axes) {
    ordered m;
    m["n_sites"] = p.n_sites;
    m["j"] = p.j;
    m["b_field"] = p.b_field;
    if (!scan_axes) {
        m["f_z"] = p.f_z;
        m["xi"] = p.xi;
    }
    m["omega_z"] = p.omega_z;
    m["temperature"] = p.temperature;
    m["hopping_range"] = p.hopping_range;
    return m;
}

} // namespace

ParsedConfig parse_config_text(const std::string& text, const std::string& origin) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        fail(origin, fmt::format("JSON syntax error: {}", e.what()));
    }
    if (!root.is_object()) fail(origin, "top level must be an object");
    if (!root.contains("schema") || root.at("schema") != "ion-config-v1")
        fail(origin, "missing or unsupported 'schema' (expected ion-config-v1)");
    if (!root.contains("task") || !root.at("task").is_string())
        fail(origin, "missing 'task' (\"scan\" or \"solve\")");
    const std::string task = root.at("task").get<std::string>();

    ParsedConfig out;
    out.task = task;
    if (task == "scan") {
        check_keys(root,
                   {"schema", "task", "model", "nu", "fixed_b", "fz_grid",
                    "xi_grid", "refinement", "workers", "seed", "output_dir",
                    "solver"},
                   origin, "");
        if (!root.contains("model")) fail(origin, "'model' is required");
        ScanSpec s;
        s.base = parse_model(root.at("model"), /*scan_axes=*/true, origin);
        s.fixed_b = root.value("fixed_b", false);
        s.nu = get_num(root, "nu", 0.5, origin, "");
        if (!s.fixed_b && !(s.nu > 0.0 && s.nu < 1.0))
            fail(origin, "'nu' must lie strictly inside (0, 1)");
        if (!root.contains("fz_grid") || !root.contains("xi_grid"))
            fail(origin, "'fz_grid' and 'xi_grid' are required");
        s.fz_grid = parse_grid(root.at("fz_grid"), origin, "fz_grid");
        s.xi_grid = parse_grid(root.at("xi_grid"), origin, "xi_grid");
        s.refinement = get_int(root, "refinement", 0, origin, "");
        if (s.refinement < 0) fail(origin, "'refinement' must be >= 0");
        s.workers = get_int(root, "workers", 1, origin, "");
        if (s.workers < 1) fail(origin, "'workers' must be >= 1");
        s.seed = static_cast<std::uint64_t>(
            get_num(root, "seed", 1.0, origin, ""));
        s.output_dir = root.value("output_dir", std::string("scan-out"));
        s.solver = parse_solver(root, origin);
        out.scan = std::move(s);
    } else if (task == "solve") {
        check_keys(root, {"schema", "task", "model", "nu", "seed", "solver"},
                   origin, "");
        if (!root.contains("model")) fail(origin, "'model' is required");
        SolveSpec s;
        s.model = parse_model(root.at("model"), /*scan_axes=*/false, origin);
        if (root.contains("nu")) {
            const double nu = get_num(root, "nu", 0.5, origin, "");
            if (!(nu > 0.0 && nu < 1.0))
                fail(origin, "'nu' must lie strictly inside (0, 1)");
            s.nu = nu;
        }
        s.seed = static_cast<std::uint64_t>(
            get_num(root, "seed", 1.0, origin, ""));
        s.solver = parse_solver(root, origin);
        out.solve = std::move(s);
    } else {
        fail(origin, fmt::format("unknown task '{}'", task));
    }
    return out;
}

ParsedConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in.good())
        throw ConfigError(fmt::format("cannot open config file '{}'", path));
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string emit_config(const ParsedConfig& c) {
    ordered root;
    root["schema"] = "ion-config-v1";
    root["task"] = c.task;
    if (c.task == "scan") {
        if (!c.scan) throw ConfigError("emit_config: scan spec missing");
        const ScanSpec& s = *c.scan;
        root["model"] = emit_model(s.base, true);
        root["nu"] = s.nu;
        root["fixed_b"] = s.fixed_b;
        root["fz_grid"] = s.fz_grid;
        root["xi_grid"] = s.xi_grid;
        root["refinement"] = s.refinement;
        root["workers"] = s.workers;
        root["seed"] = static_cast<double>(s.seed);
        root["output_dir"] = s.output_dir;
        root["solver"] = emit_solver(s.solver);
    } else if (c.task == "solve") {
        if (!c.solve) throw ConfigError("emit_config: solve spec missing");
        const SolveSpec& s = *c.solve;
        root["model"] = emit_model(s.model, false);
        if (s.nu) root["nu"] = *s.nu;
        root["seed"] = static_cast<double>(s.seed);
        root["solver"] = emit_solver(s.solver);
    } else {
        throw ConfigError(fmt::format("emit_config: unknown task '{}'", c.task));
    }
    return root.dump(2) + "\n";
}

} // namespace ion::config
