#pragma once

#include <string>
#include <vector>

#include "ion/config.hpp"
#include "ion/record.hpp"
#include "ion/store.hpp"

// Phase-diagram scan driver: solves every (F_z, xi) grid point at fixed
// filling, sweeping each xi row along F_z in both directions with warm starts
// (hysteresis detection near first-order boundaries, keeping the lower free
// energy), classifies each point, adaptively subdivides between
// differently-labeled neighbors, and persists every result incrementally so
// an interrupted scan resumes without recomputation.
namespace ion::scan {

struct PointOutcome {
    double f_z = 0.0;
    double xi = 0.0;
    std::string key;
    std::string label;       // phase label string ("PS", "SC", ...)
    bool ambiguous = false;  // classifier margin too small; flagged for refinement
    bool failed = false;
    bool skipped = false;    // already present in the store
    double free_energy = 0.0;
};

struct ScanSummary {
    int solved = 0;
    int skipped = 0;
    int failed = 0;
    int refined_added = 0;  // points inserted by adaptive refinement
    std::vector<PointOutcome> outcomes;  // sorted by (xi, f_z)
};

// Classifies a record, resolving an ambiguous margin to the top-scoring
// label with the ambiguous flag set (the scan refines such points instead of
// failing on them).
std::string classify_point(const ObservableRecord& rec, PhaseScores& scores,
                           bool& ambiguous);

// Workers parallelize across xi rows; each row is sequential so warm-start
// chains (and therefore results) do not depend on the worker count.
ScanSummary run_scan(const config::ScanSpec& spec, store::ResultStore& st);
ScanSummary run_scan(const config::ScanSpec& spec);  // opens spec.output_dir

// Publication-style exports: phase_diagram.csv (point summary incl. scores
// and W_z), pi_long.csv (spin-displacement correlator heatmap rows),
// profiles_long.csv (per-site sigma^z and displacement), and with
// format == "json" additionally phase_diagram.json.  Values are printed with
// 17 significant digits, so identical stores export identical bytes.
// Returns the list of files written.
std::vector<std::string> export_store(const store::ResultStore& st,
                                      const std::string& out_dir,
                                      const std::string& format);

} // namespace ion::scan
