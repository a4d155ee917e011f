// ionsolve: command-line front end for the trapped-ion spin-Holstein solvers.
//
//   modes   normal-mode table of the longitudinal elastic matrix
//   solve   one variational ground / thermal state from a config file
//   scan    resumable (F_z, xi) phase-diagram scan from a config file
//   ed      exact-diagonalization reference point (small chains)
//   export  phase-diagram / correlator tables from a scan store
//
// Environment: ION_WORKERS overrides the scan worker count (flag wins),
// ION_OUT_ROOT prefixes relative output directories.  Everything else comes
// from flags or the config file.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "ion/config.hpp"
#include "ion/errors.hpp"
#include "ion/json_util.hpp"
#include "ion/model.hpp"
#include "ion/ngs.hpp"
#include "ion/observables.hpp"
#include "ion/oracle.hpp"
#include "ion/scan.hpp"
#include "ion/store.hpp"

namespace {

using nlohmann::json;
using ordered = nlohmann::ordered_json;

void write_output(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(out_path, std::ios::trunc);
    if (!out.good())
        throw ion::StoreError(fmt::format("cannot write '{}'", out_path));
    out << text;
}

std::string resolve_out_dir(std::string dir) {
    const char* root = std::getenv("ION_OUT_ROOT");
    if (root != nullptr && *root != '\0' &&
        std::filesystem::path(dir).is_relative())
        return (std::filesystem::path(root) / dir).string();
    return dir;
}

ordered model_json(const ion::ModelParams& p) {
    return ordered{{"n_sites", p.n_sites},       {"j", p.j},
                   {"b_field", p.b_field},       {"f_z", p.f_z},
                   {"omega_z", p.omega_z},       {"xi", p.xi},
                   {"temperature", p.temperature},
                   {"hopping_range", p.hopping_range}};
}

// ---- modes --------------------------------------------------------------------

struct ModesArgs {
    int n = 0;
    double xi = 0.0, omega_z = 1.0;
    bool as_json = false;
    std::string out;
};

int run_modes(const ModesArgs& a) {
    ion::ModelParams p;
    p.n_sites = a.n;
    p.xi = a.xi;
    p.omega_z = a.omega_z;
    const ion::Model model(p);
    const ion::Vec& w = model.mode_frequencies();
    const ion::Mat& m = model.mode_vectors();

    if (a.as_json) {
        ordered out;
        out["schema"] = "ion-modes-v1";
        out["n_sites"] = a.n;
        out["xi"] = a.xi;
        out["omega_z"] = a.omega_z;
        out["omega"] = ion::jsonu::from_vec(w);
        out["modes"] = ion::jsonu::from_mat(m);
        write_output(out.dump(2) + "\n", a.out);
        return 0;
    }
    std::string text = fmt::format(
        "# longitudinal normal modes: n = {}, xi = {:g}, omega_z = {:g}\n"
        "# k  Omega_k    mode vector (site amplitudes)\n",
        a.n, a.xi, a.omega_z);
    for (int k = 0; k < a.n; ++k) {
        text += fmt::format("{:3d}  {:.9f} ", k, w(k));
        for (int i = 0; i < a.n; ++i) text += fmt::format(" {:+.6f}", m(i, k));
        text += "\n";
    }
    write_output(text, a.out);
    return 0;
}

// ---- solve --------------------------------------------------------------------

struct SolveArgs {
    std::string config_path;
    std::string out;
    std::optional<std::uint64_t> seed;
};

int run_solve(const SolveArgs& a) {
    const ion::config::ParsedConfig cfg = ion::config::parse_config(a.config_path);
    if (cfg.task != "solve")
        throw ion::ConfigError(fmt::format(
            "'{}' is a {} config; the solve command needs task = \"solve\"",
            a.config_path, cfg.task));
    ion::config::SolveSpec spec = *cfg.solve;
    if (a.seed.has_value()) spec.seed = *a.seed;

    ion::ngs::FlowOptions opts = spec.solver;
    opts.seed = spec.seed;
    ion::ModelParams p = spec.model;
    if (spec.nu.has_value()) {
        opts.filling = *spec.nu;
        p.b_field = ion::ngs::tune_filling(ion::Model(p), opts, *spec.nu);
    }
    const ion::Model model(p);
    const bool thermal = p.temperature > 0.0;
    const ion::ngs::SolveResult res = thermal
                                          ? ion::ngs::solve_thermal_state(model, opts)
                                          : ion::ngs::solve_ground_state(model, opts);
    ion::PhaseScores scores;
    bool ambiguous = false;
    const std::string label =
        ion::scan::classify_point(res.record, scores, ambiguous);

    ordered out;
    out["schema"] = "ion-solve-v1";
    out["model"] = model_json(p);
    out["seed"] = static_cast<double>(spec.seed);
    out["label"] = label;
    out["ambiguous"] = ambiguous;
    out["scores"] = {{"ps", scores.ps},
                     {"pcdw", scores.pcdw},
                     {"cdw", scores.cdw},
                     {"sc", scores.sc}};
    out["diag"] = {{"accepted_steps", res.diag.accepted_steps},
                   {"total_steps", res.diag.total_steps},
                   {"restarts_used", res.diag.restarts_used},
                   {"converged", res.diag.converged}};
    out["record"] = json::parse(res.record.to_json());
    write_output(out.dump(2) + "\n", a.out);
    return 0;
}

// ---- scan ---------------------------------------------------------------------

struct ScanArgs {
    std::string config_path;
    std::string out_dir;  // overrides spec.output_dir
    bool resume = false;
    std::optional<int> workers;
    std::optional<std::uint64_t> seed;
};

int run_scan_cmd(const ScanArgs& a) {
    const ion::config::ParsedConfig cfg = ion::config::parse_config(a.config_path);
    if (cfg.task != "scan")
        throw ion::ConfigError(fmt::format(
            "'{}' is a {} config; the scan command needs task = \"scan\"",
            a.config_path, cfg.task));
    ion::config::ScanSpec spec = *cfg.scan;
    if (a.seed.has_value()) spec.seed = *a.seed;
    if (!a.out_dir.empty()) spec.output_dir = a.out_dir;
    spec.output_dir = resolve_out_dir(spec.output_dir);
    if (a.workers.has_value()) {
        spec.workers = *a.workers;
    } else if (const char* env = std::getenv("ION_WORKERS");
               env != nullptr && *env != '\0') {
        try {
            spec.workers = std::stoi(env);
        } catch (const std::exception&) {
            throw ion::ConfigError(
                fmt::format("ION_WORKERS='{}' is not an integer", env));
        }
    }
    if (spec.workers < 1)
        throw ion::ConfigError("worker count must be >= 1");

    ion::store::ResultStore st = ion::store::ResultStore::open(spec.output_dir);
    if (!a.resume && !st.entries().empty())
        std::cerr << fmt::format(
            "note: store '{}' already holds {} points; finished work is kept "
            "(pass --resume to silence this note)\n",
            spec.output_dir, st.entries().size());

    const ion::scan::ScanSummary sum = ion::scan::run_scan(spec, st);
    for (const auto& o : sum.outcomes) {
        std::cout << fmt::format(
            "F_z={:<8.5g} xi={:<8.5g} {}{}{}\n", o.f_z, o.xi,
            o.failed ? "FAILED" : o.label, o.ambiguous ? " (ambiguous)" : "",
            o.skipped ? " [cached]" : "");
    }
    std::cout << fmt::format(
        "scan: {} solved, {} cached, {} failed, {} refinement points; store: {}\n",
        sum.solved, sum.skipped, sum.failed, sum.refined_added, spec.output_dir);
    return sum.failed > 0 ? 1 : 0;
}

// ---- ed -----------------------------------------------------------------------

struct EdArgs {
    int n = 0;
    double xi = 0.0, fz = 0.0, b = 0.0, j = 1.0, omega_z = 1.0;
    int range = 0;
    int nmax = 8;
    int sector = -1;
    double nu_d = -1.0;
    std::string frame = "displaced";
    std::string basis = "normal";
    int pairs = 4;
    double tol = 1e-10;
    bool convergence = false;
    bool jw = false;
    std::string out;
};

int run_ed(const EdArgs& a) {
    ion::ModelParams p;
    p.n_sites = a.n;
    p.j = a.j;
    p.b_field = a.b;
    p.f_z = a.fz;
    p.omega_z = a.omega_z;
    p.xi = a.xi;
    p.hopping_range = a.range;
    const ion::Model model(p);

    ion::oracle::EDConfig cfg;
    cfg.n_max = a.nmax;
    cfg.filling_sector = a.sector;
    cfg.displaced_density = a.nu_d;
    cfg.n_eigenpairs = a.pairs;
    cfg.tol = a.tol;
    cfg.estimate_convergence = a.convergence;
    if (a.frame == "bare")
        cfg.frame = ion::oracle::EDFrame::Bare;
    else if (a.frame == "displaced")
        cfg.frame = ion::oracle::EDFrame::Displaced;
    else
        throw ion::ConfigError(
            fmt::format("unknown frame '{}' (bare or displaced)", a.frame));
    if (a.basis == "local")
        cfg.basis = ion::oracle::EDBasis::LocalModes;
    else if (a.basis == "normal")
        cfg.basis = ion::oracle::EDBasis::NormalModes;
    else
        throw ion::ConfigError(
            fmt::format("unknown basis '{}' (local or normal)", a.basis));

    bool jw_checked = false;
    if (a.jw) {
        ion::oracle::jw_crosscheck(model, cfg);  // throws MismatchError on failure
        jw_checked = true;
    }
    const ion::oracle::EDResult res = ion::oracle::ed_ground_state(model, cfg);

    ordered out;
    out["schema"] = "ion-ed-v1";
    out["model"] = model_json(p);
    out["config"] = ordered{{"n_max", cfg.n_max},
                            {"frame", a.frame},
                            {"basis", a.basis},
                            {"filling_sector", cfg.filling_sector},
                            {"displaced_density", cfg.displaced_density},
                            {"n_eigenpairs", cfg.n_eigenpairs},
                            {"tol", cfg.tol}};
    out["e0"] = res.e0;
    out["spectrum"] = res.spectrum;
    out["ground_multiplicity"] = res.ground_multiplicity;
    out["convergence_estimate"] = res.convergence_estimate;
    out["jw_checked"] = jw_checked;
    out["sc_four_point"] = res.sc_four_point;
    out["sc_two_point"] = res.sc_two_point;
    out["record"] = json::parse(res.record.to_json());
    write_output(out.dump(2) + "\n", a.out);
    return 0;
}

// ---- export -------------------------------------------------------------------

struct ExportArgs {
    std::string store_dir;
    std::string out_dir;
    std::string format = "csv";
};

int run_export(const ExportArgs& a) {
    const ion::store::ResultStore st =
        ion::store::ResultStore::open(resolve_out_dir(a.store_dir));
    const std::vector<std::string> files =
        ion::scan::export_store(st, resolve_out_dir(a.out_dir), a.format);
    for (const auto& f : files) std::cout << f << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ionsolve: variational and exact solvers for a trapped-ion "
                 "spin-Holstein chain"};
    app.require_subcommand(1);
    int rc = 0;

    ModesArgs ma;
    CLI::App* modes = app.add_subcommand(
        "modes", "Longitudinal normal-mode frequencies and vectors");
    modes->add_option("--n", ma.n, "chain length")->required();
    modes->add_option("--xi", ma.xi, "log stiffness ratio (beta = exp(xi))");
    modes->add_option("--omega-z", ma.omega_z, "trap frequency");
    modes->add_flag("--json", ma.as_json, "emit JSON instead of a table");
    modes->add_option("--out", ma.out, "write to file instead of stdout");
    modes->callback([&]() { rc = run_modes(ma); });

    SolveArgs sa;
    CLI::App* solve = app.add_subcommand(
        "solve", "Variational ground / thermal state from a config file");
    solve->add_option("--config", sa.config_path, "config file (task = solve)")
        ->required();
    auto* solve_seed = solve->add_option("--seed", "override the config seed");
    solve->add_option("--out", sa.out, "write the result JSON to a file");
    solve->callback([&]() {
        if (solve_seed->count() > 0)
            sa.seed = solve_seed->as<std::uint64_t>();
        rc = run_solve(sa);
    });

    ScanArgs ca;
    CLI::App* scan = app.add_subcommand(
        "scan", "Resumable (F_z, xi) phase-diagram scan from a config file");
    scan->add_option("--config", ca.config_path, "config file (task = scan)")
        ->required();
    scan->add_flag("--resume", ca.resume,
                   "continue into an existing store without the reuse note");
    auto* scan_workers =
        scan->add_option("--workers", "row-level worker threads");
    auto* scan_seed = scan->add_option("--seed", "override the config seed");
    scan->add_option("--out", ca.out_dir, "override the store directory");
    scan->callback([&]() {
        if (scan_workers->count() > 0) ca.workers = scan_workers->as<int>();
        if (scan_seed->count() > 0) ca.seed = scan_seed->as<std::uint64_t>();
        rc = run_scan_cmd(ca);
    });

    EdArgs ea;
    CLI::App* ed = app.add_subcommand(
        "ed", "Exact-diagonalization reference point (n <= 6)");
    ed->add_option("--n", ea.n, "chain length")->required();
    ed->add_option("--xi", ea.xi, "log stiffness ratio");
    ed->add_option("--fz", ea.fz, "spin-displacement coupling F_z");
    ed->add_option("--b", ea.b, "field B");
    ed->add_option("--j", ea.j, "hopping prefactor J");
    ed->add_option("--omega-z", ea.omega_z, "trap frequency");
    ed->add_option("--range", ea.range, "hopping range (0: full 1/r^3 tail)");
    ed->add_option("--nmax", ea.nmax, "phonon Fock cutoff per oscillator");
    ed->add_option("--sector", ea.sector, "spin-excitation sector (-1: full)");
    ed->add_option("--nu-d", ea.nu_d, "displacement filling (-1: match sector)");
    ed->add_option("--frame", ea.frame, "bare|displaced");
    ed->add_option("--basis", ea.basis, "local|normal");
    ed->add_option("--pairs", ea.pairs, "number of low eigenvalues");
    ed->add_option("--tol", ea.tol, "eigensolver residual tolerance");
    ed->add_flag("--convergence", ea.convergence,
                 "also report |E0(n_max) - E0(n_max + 2)|");
    ed->add_flag("--jw", ea.jw,
                 "cross-check the spectrum against the fermionized build");
    ed->add_option("--out", ea.out, "write the result JSON to a file");
    ed->callback([&]() { rc = run_ed(ea); });

    ExportArgs xa;
    CLI::App* exp = app.add_subcommand(
        "export", "Write phase-diagram and correlator tables from a scan store");
    exp->add_option("--store", xa.store_dir, "scan store directory")->required();
    exp->add_option("--out", xa.out_dir, "export directory")->required();
    exp->add_option("--format", xa.format, "csv|json (default csv)");
    exp->callback([&]() { rc = run_export(xa); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const ion::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
    return rc;
}
