#include "ion/store.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "ion/errors.hpp"

namespace ion::store {

namespace fs = std::filesystem;
using nlohmann::json;
using ordered = nlohmann::ordered_json;

namespace {

constexpr const char* kManifestSchema = "ion-store-v1";

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in.good())
        throw StoreError(fmt::format("cannot read '{}'", p.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Write-then-rename so a killed process never leaves a torn manifest.
void write_file_atomic(const fs::path& p, const std::string& text) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out.good())
            throw StoreError(fmt::format("cannot write '{}'", tmp.string()));
        out << text;
        if (!out.good())
            throw StoreError(fmt::format("short write to '{}'", tmp.string()));
    }
    std::error_code ec;
    fs::rename(tmp, p, ec);
    if (ec)
        throw StoreError(
            fmt::format("cannot move '{}' into place: {}", tmp.string(),
                        ec.message()));
}

} // namespace

std::string fnv1a64_hex(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= static_cast<std::uint64_t>(c);
        h *= 0x100000001b3ULL;
    }
    return fmt::format("{:016x}", h);
}

std::string point_key(const ModelParams& p, const ngs::FlowOptions& opts,
                      double nu) {
    // Canonical parameter string; any change that alters the computation
    // changes the key, so resumed stores never serve stale results.
    const std::string canon = fmt::format(
        "v1|n={} j={:.17g} b={:.17g} fz={:.17g} wz={:.17g} xi={:.17g} T={:.17g} "
        "range={}|nu={:.17g}|restarts={} max_steps={} dt0={:.17g} dtmax={:.17g} "
        "tol={:.17g} quiet={} mom={:.17g} clip={:.17g} seed={}",
        p.n_sites, p.j, p.b_field, p.f_z, p.omega_z, p.xi, p.temperature,
        p.hopping_range, nu, opts.restarts, opts.max_steps, opts.dt_init,
        opts.dt_max, opts.convergence_tol, opts.quiet_window, opts.momentum,
        opts.rate_clip, opts.seed);
    return fnv1a64_hex(canon);
}

ResultStore ResultStore::open(const std::string& root) {
    ResultStore st;
    st.root_ = root;
    std::error_code ec;
    fs::create_directories(fs::path(root) / "points", ec);
    if (ec)
        throw StoreError(fmt::format("cannot create store at '{}': {}", root,
                                     ec.message()));
    const fs::path man = fs::path(root) / "manifest.json";
    if (fs::exists(man)) {
        json m;
        try {
            m = json::parse(read_file(man));
        } catch (const json::parse_error& e) {
            throw StoreError(
                fmt::format("corrupt manifest '{}': {}", man.string(), e.what()));
        }
        if (!m.contains("schema") || m.at("schema") != kManifestSchema)
            throw StoreError(fmt::format(
                "manifest '{}' has an unsupported schema", man.string()));
        for (auto it = m.at("points").begin(); it != m.at("points").end(); ++it) {
            PointEntry e;
            e.status = it.value().value("status", "");
            e.label = it.value().value("label", "");
            e.file = it.value().value("file", "");
            e.error = it.value().value("error", "");
            st.entries_[it.key()] = std::move(e);
        }
    }
    return st;
}

bool ResultStore::has(const std::string& key) const {
    auto it = entries_.find(key);
    return it != entries_.end() && it->second.status == "done";
}

bool ResultStore::failed(const std::string& key) const {
    auto it = entries_.find(key);
    return it != entries_.end() && it->second.status == "failed";
}

int ResultStore::n_done() const {
    int n = 0;
    for (const auto& [k, e] : entries_)
        if (e.status == "done") ++n;
    return n;
}

int ResultStore::n_failed() const {
    int n = 0;
    for (const auto& [k, e] : entries_)
        if (e.status == "failed") ++n;
    return n;
}

void ResultStore::save_point(const std::string& key, const json& point,
                             const std::string& label) {
    const std::string rel = "points/" + key + ".json";
    const fs::path file = fs::path(root_) / rel;
    const std::string text = point.dump(2) + "\n";
    if (has(key) && fs::exists(file) && read_file(file) == text &&
        entries_.at(key).label == label)
        return;  // idempotent rewrite
    write_file_atomic(file, text);
    PointEntry e;
    e.status = "done";
    e.label = label;
    e.file = rel;
    entries_[key] = std::move(e);
    write_manifest();
}

void ResultStore::mark_failed(const std::string& key, const std::string& reason) {
    if (has(key)) return;  // a completed point is never demoted
    PointEntry e;
    e.status = "failed";
    e.error = reason;
    entries_[key] = std::move(e);
    write_manifest();
}

json ResultStore::load_point(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end() || it->second.status != "done")
        throw StoreError(fmt::format("no completed point under key '{}'", key));
    try {
        return json::parse(read_file(fs::path(root_) / it->second.file));
    } catch (const json::parse_error& e) {
        throw StoreError(
            fmt::format("corrupt point file for key '{}': {}", key, e.what()));
    }
}

void ResultStore::write_manifest() const {
    ordered m;
    m["schema"] = kManifestSchema;
    ordered pts = ordered::object();
    for (const auto& [key, e] : entries_) {
        ordered entry;
        entry["status"] = e.status;
        if (e.status == "done") {
            entry["label"] = e.label;
            entry["file"] = e.file;
        } else {
            entry["error"] = e.error;
        }
        pts[key] = std::move(entry);
    }
    m["points"] = std::move(pts);
    write_file_atomic(fs::path(root_) / "manifest.json", m.dump(2) + "\n");
}

} // namespace ion::store
