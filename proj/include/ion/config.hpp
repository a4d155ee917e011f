#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ion/model.hpp"
#include "ion/ngs.hpp"

// Structured-text (JSON) configuration for the CLI: a single file describes
// either one solve or a full (F_z, xi) phase-diagram scan.  Parsing is
// strict -- unknown fields are rejected with a field-path diagnostic -- and
// parse -> emit -> parse is the identity on the canonical form.
namespace ion::config {

struct ScanSpec {
    // b_field of `base` is the starting guess for the per-point filling tune
    // (or the fixed field when fixed_b is set); f_z and xi come from the grid.
    ModelParams base;
    double nu = 0.5;             // target filling per point
    bool fixed_b = false;        // scan at fixed base.b_field instead of fixed nu
    std::vector<double> fz_grid; // strictly increasing, non-empty
    std::vector<double> xi_grid; // strictly increasing, non-empty
    int refinement = 0;          // adaptive subdivision depth near label changes
    int workers = 1;             // row-level worker threads
    std::uint64_t seed = 1;
    std::string output_dir = "scan-out";
    ngs::FlowOptions solver;
};

struct SolveSpec {
    ModelParams model;
    std::optional<double> nu;    // when set, tune b_field to this filling first
    std::uint64_t seed = 1;
    ngs::FlowOptions solver;
};

struct ParsedConfig {
    std::string task;            // "scan" or "solve"
    std::optional<ScanSpec> scan;
    std::optional<SolveSpec> solve;
};

// Throws ConfigError with file/field diagnostics on syntax or schema errors.
ParsedConfig parse_config(const std::string& path);
ParsedConfig parse_config_text(const std::string& text,
                               const std::string& origin = "<config>");

// Canonical emission; parse_config_text(emit_config(c)) == c field by field.
std::string emit_config(const ParsedConfig& c);

} // namespace ion::config
