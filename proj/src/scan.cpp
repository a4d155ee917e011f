#include "ion/scan.hpp"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

#include <fmt/format.h>
#include <json.hpp>

#include "ion/errors.hpp"
#include "ion/json_util.hpp"
#include "ion/ngs.hpp"
#include "ion/observables.hpp"

namespace ion::scan {

namespace {

using nlohmann::json;
using ordered = nlohmann::ordered_json;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Per-point solver seed: a pure function of (scan seed, point key), so it is
// independent of sweep order, worker count, and resume history.
std::uint64_t point_seed(std::uint64_t scan_seed, const std::string& key) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : key) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(scan_seed ^ h);
}

Model model_at(const config::ScanSpec& spec, double xi, double fz, double b) {
    ModelParams p = spec.base;
    p.xi = xi;
    p.f_z = fz;
    p.b_field = b;
    return Model(p);
}

struct RowPoint {
    double fz = 0.0;
    std::string key;
    bool done = false, failed = false, skipped = false, ambiguous = false;
    bool inserted = false;  // added by adaptive refinement
    std::string label;
    double free_energy = std::numeric_limits<double>::quiet_NaN();
    double b_tuned = 0.0;
    std::optional<ngs::NGSState> state;  // warm-start source (in-process only)
};

struct RowContext {
    const config::ScanSpec* spec;
    store::ResultStore* store;
    std::mutex* store_mutex;
    double xi;

    bool has_done(const std::string& key) const {
        std::lock_guard<std::mutex> lock(*store_mutex);
        return store->has(key);
    }
};

std::string key_of(const config::ScanSpec& spec, double xi, double fz) {
    ModelParams p = spec.base;
    p.xi = xi;
    p.f_z = fz;
    // The tuned field is an output, not an input: the key carries the target
    // filling instead (or the fixed field when no tuning happens).
    if (!spec.fixed_b) p.b_field = 0.0;
    ngs::FlowOptions opts = spec.solver;
    opts.seed = spec.seed;  // scans under different seeds never share points
    return store::point_key(p, opts, spec.fixed_b ? -1.0 : spec.nu);
}

} // namespace

std::string classify_point(const ObservableRecord& rec, PhaseScores& scores,
                           bool& ambiguous) {
    ambiguous = false;
    try {
        return to_string(observables::classify_phase(rec, &scores));
    } catch (const AmbiguousPhaseError&) {
        ambiguous = true;
        PhaseLabel best = PhaseLabel::Normal;
        double top = -1.0;
        const std::pair<PhaseLabel, double> all[] = {
            {PhaseLabel::PS, scores.ps},
            {PhaseLabel::PCDW, scores.pcdw},
            {PhaseLabel::CDW, scores.cdw},
            {PhaseLabel::SC, scores.sc}};
        for (const auto& [lab, sc] : all)
            if (sc > top) {
                top = sc;
                best = lab;
            }
        return to_string(best);
    }
}

namespace {

ordered payload_of(const RowPoint& pt, const RowContext& rc,
                   const ObservableRecord& rec, const PhaseScores& scores,
                   const ngs::SolveDiagnostics& diag, std::uint64_t seed) {
    ordered out;
    out["schema"] = "ion-point-v1";
    out["key"] = pt.key;
    out["xi"] = rc.xi;
    out["f_z"] = pt.fz;
    out["nu"] = rc.spec->fixed_b ? -1.0 : rc.spec->nu;
    out["b_field"] = pt.b_tuned;
    out["seed"] = static_cast<double>(seed);
    out["label"] = pt.label;
    out["ambiguous"] = pt.ambiguous;
    out["scores"] = {{"ps", scores.ps},
                     {"pcdw", scores.pcdw},
                     {"cdw", scores.cdw},
                     {"sc", scores.sc}};
    out["diag"] = {{"accepted_steps", diag.accepted_steps},
                   {"total_steps", diag.total_steps},
                   {"restarts_used", diag.restarts_used},
                   {"converged", diag.converged}};
    out["record"] = json::parse(rec.to_json());
    return out;
}

// Solves one point (filling tune + cold restarts + optional warm candidate),
// classifies it, and persists the payload.  Throws ion::Error subclasses on
// solver failure; the caller records those in the manifest.
void solve_point(const RowContext& rc, RowPoint& pt, const ngs::NGSState* warm,
                 double b_guess) {
    const config::ScanSpec& spec = *rc.spec;
    ngs::FlowOptions opts = spec.solver;
    opts.filling = spec.fixed_b ? 0.5 : spec.nu;
    opts.seed = point_seed(spec.seed, pt.key);

    double b = spec.fixed_b ? spec.base.b_field : b_guess;
    if (!spec.fixed_b) {
        const Model m_guess = model_at(spec, rc.xi, pt.fz, b);
        b = ngs::tune_filling(m_guess, opts, spec.nu);
    }
    const Model m = model_at(spec, rc.xi, pt.fz, b);

    const bool thermal = spec.base.temperature > 0.0;
    ngs::SolveResult best = thermal ? ngs::solve_thermal_state(m, opts)
                                    : ngs::solve_ground_state(m, opts);
    if (warm != nullptr) {
        ngs::NGSState s0 = ngs::init_state(m, ngs::InitStrategy::WarmStart,
                                           opts.seed, opts.filling, warm);
        ngs::FlowResult wf = ngs::run_flow(m, std::move(s0), opts);
        if (wf.f < best.record.free_energy) {
            best.state = std::move(wf.state);
            best.diag = wf.diag;
            best.record = observables::record(m, best.state);
        }
    }

    PhaseScores scores;
    pt.b_tuned = b;
    pt.label = classify_point(best.record, scores, pt.ambiguous);
    pt.free_energy = best.record.free_energy;
    pt.state = std::move(best.state);
    pt.done = true;
    const ordered payload =
        payload_of(pt, rc, best.record, scores, best.diag, opts.seed);
    std::lock_guard<std::mutex> lock(*rc.store_mutex);
    rc.store->save_point(pt.key, payload, pt.label);
}

// Re-solves an already-done point from a warm state only (backward sweep);
// replaces the stored result when the free energy strictly improves.
void improve_point(const RowContext& rc, RowPoint& pt,
                   const ngs::NGSState& warm) {
    const config::ScanSpec& spec = *rc.spec;
    ngs::FlowOptions opts = spec.solver;
    opts.filling = spec.fixed_b ? 0.5 : spec.nu;
    opts.seed = point_seed(spec.seed, pt.key);

    const Model m = model_at(spec, rc.xi, pt.fz, pt.b_tuned);
    ngs::NGSState s0 = ngs::init_state(m, ngs::InitStrategy::WarmStart,
                                       opts.seed, opts.filling, &warm);
    ngs::FlowResult wf = ngs::run_flow(m, std::move(s0), opts);
    if (!(wf.f < pt.free_energy - 1e-12 * std::max(1.0, std::abs(pt.free_energy))))
        return;
    const ObservableRecord rec = observables::record(m, wf.state);
    PhaseScores scores;
    pt.label = classify_point(rec, scores, pt.ambiguous);
    pt.free_energy = rec.free_energy;
    pt.state = std::move(wf.state);
    const ordered payload = payload_of(pt, rc, rec, scores, wf.diag, opts.seed);
    std::lock_guard<std::mutex> lock(*rc.store_mutex);
    rc.store->save_point(pt.key, payload, pt.label);
}

// Attempts a point, downgrading solver errors to a manifest "failed" entry.
void try_point(const RowContext& rc, RowPoint& pt, const ngs::NGSState* warm,
               double b_guess) {
    try {
        solve_point(rc, pt, warm, b_guess);
    } catch (const Error& e) {
        pt.failed = true;
        pt.done = false;
        std::lock_guard<std::mutex> lock(*rc.store_mutex);
        rc.store->mark_failed(pt.key, e.what());
    }
}

// Loads what the sweep needs from an already-stored point.
void load_done(const RowContext& rc, RowPoint& pt) {
    json payload;
    {
        std::lock_guard<std::mutex> lock(*rc.store_mutex);
        payload = rc.store->load_point(pt.key);
    }
    pt.done = true;
    pt.skipped = true;
    pt.label = payload.value("label", "");
    pt.ambiguous = payload.value("ambiguous", false);
    pt.b_tuned = payload.value("b_field", rc.spec->base.b_field);
    pt.free_energy = payload.at("record").value("free_energy", 0.0);
}

void process_row(const RowContext& rc, std::map<double, RowPoint>& row) {
    const config::ScanSpec& spec = *rc.spec;

    // Forward sweep: warm-start each point from its left neighbor.
    const ngs::NGSState* chain = nullptr;
    double b_guess = spec.base.b_field;
    for (auto& [fz, pt] : row) {
        if (rc.has_done(pt.key)) {
            load_done(rc, pt);
            chain = nullptr;  // no in-process state to chain from
            b_guess = pt.b_tuned;
            continue;
        }
        try_point(rc, pt, chain, b_guess);
        if (pt.done) {
            chain = &*pt.state;
            b_guess = pt.b_tuned;
        } else {
            chain = nullptr;
        }
    }

    // Backward sweep: offer every solved point the right neighbor's state;
    // keep whichever free energy is lower (hysteresis near first-order lines).
    chain = nullptr;
    for (auto it = row.rbegin(); it != row.rend(); ++it) {
        RowPoint& pt = it->second;
        if (!pt.done || !pt.state.has_value()) {
            if (!pt.done) chain = nullptr;
            continue;
        }
        if (chain != nullptr) improve_point(rc, pt, *chain);
        chain = &*pt.state;
    }
}

int refine_row(const RowContext& rc, std::map<double, RowPoint>& row,
               int max_depth) {
    int added_total = 0;
    for (int depth = 0; depth < max_depth; ++depth) {
        // Midpoints between differently-labeled (or ambiguous) neighbors.
        std::vector<double> inserts;
        const RowPoint* prev = nullptr;
        for (const auto& [fz, pt] : row) {
            if (prev != nullptr && prev->done && pt.done) {
                const bool boundary = prev->label != pt.label ||
                                      prev->ambiguous || pt.ambiguous;
                const double gap = pt.fz - prev->fz;
                if (boundary && gap > 1e-6) inserts.push_back(prev->fz + 0.5 * gap);
            }
            prev = &pt;
        }
        if (inserts.empty()) break;
        for (double fz : inserts) {
            if (row.count(fz)) continue;
            RowPoint pt;
            pt.fz = fz;
            pt.key = key_of(*rc.spec, rc.xi, fz);
            pt.inserted = true;
            auto it = row.emplace(fz, std::move(pt)).first;
            RowPoint& ref = it->second;
            if (rc.has_done(ref.key)) {
                load_done(rc, ref);
            } else {
                // Warm from the left neighbor when its state is in memory.
                auto left = it;
                const ngs::NGSState* warm = nullptr;
                double b_guess = rc.spec->base.b_field;
                if (left != row.begin()) {
                    --left;
                    if (left->second.state.has_value()) warm = &*left->second.state;
                    if (left->second.done) b_guess = left->second.b_tuned;
                }
                try_point(rc, ref, warm, b_guess);
            }
            ++added_total;
        }
    }
    return added_total;
}

} // namespace

ScanSummary run_scan(const config::ScanSpec& spec, store::ResultStore& st) {
    if (spec.fz_grid.empty() || spec.xi_grid.empty())
        throw ConfigError("scan grids must be non-empty");

    std::mutex store_mutex;
    const int n_rows = static_cast<int>(spec.xi_grid.size());
    std::vector<std::map<double, RowPoint>> rows(
        static_cast<std::size_t>(n_rows));
    std::vector<int> row_added(static_cast<std::size_t>(n_rows), 0);

    for (int r = 0; r < n_rows; ++r) {
        for (double fz : spec.fz_grid) {
            RowPoint pt;
            pt.fz = fz;
            pt.key = key_of(spec, spec.xi_grid[static_cast<std::size_t>(r)], fz);
            rows[static_cast<std::size_t>(r)].emplace(fz, std::move(pt));
        }
    }

    auto run_row = [&](int r) {
        RowContext rc{&spec, &st, &store_mutex,
                      spec.xi_grid[static_cast<std::size_t>(r)]};
        process_row(rc, rows[static_cast<std::size_t>(r)]);
        row_added[static_cast<std::size_t>(r)] =
            refine_row(rc, rows[static_cast<std::size_t>(r)], spec.refinement);
    };

    const int workers = std::max(1, std::min(spec.workers, n_rows));
    if (workers == 1) {
        for (int r = 0; r < n_rows; ++r) run_row(r);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&]() {
                for (int r = next.fetch_add(1); r < n_rows;
                     r = next.fetch_add(1))
                    run_row(r);
            });
        for (auto& th : pool) th.join();
    }

    ScanSummary sum;
    for (int r = 0; r < n_rows; ++r) {
        sum.refined_added += row_added[static_cast<std::size_t>(r)];
        for (const auto& [fz, pt] : rows[static_cast<std::size_t>(r)]) {
            PointOutcome o;
            o.f_z = pt.fz;
            o.xi = spec.xi_grid[static_cast<std::size_t>(r)];
            o.key = pt.key;
            o.label = pt.label;
            o.ambiguous = pt.ambiguous;
            o.failed = pt.failed;
            o.skipped = pt.skipped;
            o.free_energy = pt.free_energy;
            sum.outcomes.push_back(std::move(o));
            if (pt.failed)
                ++sum.failed;
            else if (pt.skipped)
                ++sum.skipped;
            else if (pt.done)
                ++sum.solved;
        }
    }
    return sum;
}

ScanSummary run_scan(const config::ScanSpec& spec) {
    store::ResultStore st = store::ResultStore::open(spec.output_dir);
    return run_scan(spec, st);
}

// ---- export -------------------------------------------------------------------

namespace {

namespace fs = std::filesystem;

std::string g17(double v) { return fmt::format("{:.17g}", v); }

struct LoadedPoint {
    double xi = 0.0, fz = 0.0, nu = 0.0, b = 0.0;
    std::string label;
    bool ambiguous = false;
    PhaseScores scores;
    ObservableRecord rec;
};

} // namespace

std::vector<std::string> export_store(const store::ResultStore& st,
                                      const std::string& out_dir,
                                      const std::string& format) {
    if (format != "csv" && format != "json")
        throw ConfigError(
            fmt::format("unknown export format '{}' (csv or json)", format));
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec)
        throw StoreError(fmt::format("cannot create export dir '{}': {}",
                                     out_dir, ec.message()));

    std::vector<LoadedPoint> pts;
    for (const auto& [key, entry] : st.entries()) {
        if (entry.status != "done") continue;
        const json p = st.load_point(key);
        LoadedPoint lp;
        lp.xi = p.value("xi", 0.0);
        lp.fz = p.value("f_z", 0.0);
        lp.nu = p.value("nu", 0.0);
        lp.b = p.value("b_field", 0.0);
        lp.label = p.value("label", "");
        lp.ambiguous = p.value("ambiguous", false);
        if (p.contains("scores")) {
            lp.scores.ps = p.at("scores").value("ps", 0.0);
            lp.scores.pcdw = p.at("scores").value("pcdw", 0.0);
            lp.scores.cdw = p.at("scores").value("cdw", 0.0);
            lp.scores.sc = p.at("scores").value("sc", 0.0);
        }
        lp.rec = ObservableRecord::from_json(p.at("record").dump());
        pts.push_back(std::move(lp));
    }
    std::sort(pts.begin(), pts.end(), [](const LoadedPoint& a, const LoadedPoint& b) {
        if (a.xi != b.xi) return a.xi < b.xi;
        return a.fz < b.fz;
    });

    std::vector<std::string> written;
    auto open_out = [&](const std::string& name) {
        const std::string path = (fs::path(out_dir) / name).string();
        std::ofstream out(path, std::ios::trunc);
        if (!out.good())
            throw StoreError(fmt::format("cannot write '{}'", path));
        written.push_back(path);
        return out;
    };

    {
        auto out = open_out("phase_diagram.csv");
        out << "f_z,xi,nu,b_field,label,ambiguous,score_ps,score_pcdw,"
               "score_cdw,score_sc,energy,free_energy,filling,o_cdw,alpha,"
               "alpha_r2,n_c,n_s,m_ph,w_z\n";
        for (const auto& p : pts) {
            out << g17(p.fz) << ',' << g17(p.xi) << ',' << g17(p.nu) << ','
                << g17(p.b) << ',' << p.label << ','
                << (p.ambiguous ? 1 : 0) << ',' << g17(p.scores.ps) << ','
                << g17(p.scores.pcdw) << ',' << g17(p.scores.cdw) << ','
                << g17(p.scores.sc) << ',' << g17(p.rec.energy) << ','
                << g17(p.rec.free_energy) << ',' << g17(p.rec.filling) << ','
                << g17(p.rec.o_cdw) << ',' << g17(p.rec.alpha) << ','
                << g17(p.rec.alpha_r2) << ',' << g17(p.rec.n_c) << ','
                << g17(p.rec.n_s) << ',' << g17(p.rec.m_ph) << ','
                << g17(p.rec.w_z) << '\n';
        }
    }
    {
        auto out = open_out("pi_long.csv");
        out << "f_z,xi,i,j,pi\n";
        for (const auto& p : pts)
            for (Eigen::Index i = 0; i < p.rec.pi.rows(); ++i)
                for (Eigen::Index j = 0; j < p.rec.pi.cols(); ++j)
                    out << g17(p.fz) << ',' << g17(p.xi) << ',' << i << ','
                        << j << ',' << g17(p.rec.pi(i, j)) << '\n';
    }
    {
        auto out = open_out("profiles_long.csv");
        out << "f_z,xi,site,sz,rbar\n";
        for (const auto& p : pts)
            for (Eigen::Index i = 0; i < p.rec.spin_profile.size(); ++i)
                out << g17(p.fz) << ',' << g17(p.xi) << ',' << i << ','
                    << g17(p.rec.spin_profile(i)) << ','
                    << g17(p.rec.displacement(i)) << '\n';
    }
    if (format == "json") {
        auto out = open_out("phase_diagram.json");
        ordered arr = ordered::array();
        for (const auto& [key, entry] : st.entries()) {
            if (entry.status != "done") continue;
            arr.push_back(ordered::parse(st.load_point(key).dump()));
        }
        out << arr.dump(2) << "\n";
    }
    return written;
}

} // namespace ion::scan
