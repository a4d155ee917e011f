#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <json.hpp>

#include "ion/model.hpp"
#include "ion/ngs.hpp"

// Resumable on-disk result store: one JSON file per solved grid point, keyed
// by a content hash of (model, solver options, target filling), plus a
// schema-versioned manifest with the completed-point index.  Writes are
// idempotent and carry no timestamps, so identical runs produce bit-identical
// manifests.
namespace ion::store {

// FNV-1a 64-bit of the byte string, as 16 lowercase hex digits.
std::string fnv1a64_hex(const std::string& bytes);

// Content key of one grid point.  nu < 0 means "fixed field" (no tuning).
std::string point_key(const ModelParams& p, const ngs::FlowOptions& opts,
                      double nu);

struct PointEntry {
    std::string status;  // "done" or "failed"
    std::string label;   // phase label (done points)
    std::string file;    // points/<key>.json, relative to the root
    std::string error;   // failure reason (failed points)
};

class ResultStore {
public:
    // Creates <root>/points/ if needed and loads an existing manifest.
    // Throws StoreError on IO failure or a manifest schema mismatch.
    static ResultStore open(const std::string& root);

    const std::string& root() const { return root_; }
    bool has(const std::string& key) const;            // status == done
    bool failed(const std::string& key) const;
    const std::map<std::string, PointEntry>& entries() const { return entries_; }
    int n_done() const;
    int n_failed() const;

    // Persists the point payload and updates the manifest on disk.
    // Saving an already-done key with identical content is a no-op.
    void save_point(const std::string& key, const nlohmann::json& point,
                    const std::string& label);
    void mark_failed(const std::string& key, const std::string& reason);
    nlohmann::json load_point(const std::string& key) const;

private:
    void write_manifest() const;

    std::string root_;
    std::map<std::string, PointEntry> entries_;  // ordered -> stable manifest
};

} // namespace ion::store
