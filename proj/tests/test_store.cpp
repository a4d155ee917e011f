// Config parsing/emission and the resumable result store.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "ion/config.hpp"
#include "ion/errors.hpp"
#include "ion/store.hpp"

using namespace ion;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ion_store_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc);
    REQUIRE(out.good());
    out << text;
}

const char* kScanConfig = R"({
  "schema": "ion-config-v1",
  "task": "scan",
  "model": {"n_sites": 8, "j": 1.0, "b_field": 0.2, "temperature": 0.0},
  "nu": 0.5,
  "fz_grid": {"from": 0.5, "to": 1.5, "step": 0.5},
  "xi_grid": [-1.0, 0.0, 2.5],
  "refinement": 2,
  "workers": 3,
  "seed": 7,
  "output_dir": "out/my-scan",
  "solver": {"restarts": 2, "max_steps": 500, "convergence_tol": 1e-7}
})";

const char* kSolveConfig = R"({
  "schema": "ion-config-v1",
  "task": "solve",
  "model": {"n_sites": 6, "f_z": 1.2, "xi": 0.3, "b_field": -0.4},
  "nu": 0.25,
  "seed": 11
})";

ngs::FlowOptions cheap_opts() {
    ngs::FlowOptions o;
    o.restarts = 1;
    o.max_steps = 100;
    return o;
}

} // namespace

TEST_CASE("scan config parses with range grids, defaults, and overrides") {
    const config::ParsedConfig c = config::parse_config_text(kScanConfig);
    REQUIRE(c.task == "scan");
    REQUIRE(c.scan.has_value());
    const config::ScanSpec& s = *c.scan;
    CHECK(s.base.n_sites == 8);
    CHECK(s.base.j == 1.0);
    CHECK(s.base.b_field == 0.2);
    CHECK(s.base.omega_z == 1.0);    // default
    CHECK(s.base.hopping_range == 0);
    CHECK(s.nu == 0.5);
    CHECK_FALSE(s.fixed_b);
    REQUIRE(s.fz_grid.size() == 3);
    CHECK(s.fz_grid[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.fz_grid[2] == doctest::Approx(1.5).epsilon(1e-15));
    REQUIRE(s.xi_grid.size() == 3);
    CHECK(s.xi_grid[1] == 0.0);
    CHECK(s.refinement == 2);
    CHECK(s.workers == 3);
    CHECK(s.seed == 7);
    CHECK(s.output_dir == "out/my-scan");
    CHECK(s.solver.restarts == 2);
    CHECK(s.solver.max_steps == 500);
    CHECK(s.solver.convergence_tol == 1e-7);
    CHECK(s.solver.dt_init == ngs::FlowOptions{}.dt_init);  // untouched default
}

TEST_CASE("solve config parses; nu is optional") {
    const config::ParsedConfig c = config::parse_config_text(kSolveConfig);
    REQUIRE(c.task == "solve");
    REQUIRE(c.solve.has_value());
    CHECK(c.solve->model.n_sites == 6);
    CHECK(c.solve->model.f_z == 1.2);
    CHECK(c.solve->model.xi == 0.3);
    REQUIRE(c.solve->nu.has_value());
    CHECK(*c.solve->nu == 0.25);
    CHECK(c.solve->seed == 11);
    CHECK(c.solve->solver.restarts == ngs::FlowOptions{}.restarts);

    const config::ParsedConfig c2 = config::parse_config_text(R"({
      "schema": "ion-config-v1", "task": "solve",
      "model": {"n_sites": 4}
    })");
    CHECK_FALSE(c2.solve->nu.has_value());
    CHECK(c2.solve->seed == 1);
}

TEST_CASE("parse -> emit -> parse is the identity") {
    for (const char* text : {kScanConfig, kSolveConfig}) {
        const config::ParsedConfig a = config::parse_config_text(text);
        const std::string emitted = config::emit_config(a);
        const config::ParsedConfig b = config::parse_config_text(emitted);
        CHECK(config::emit_config(b) == emitted);  // canonical fixed point
        REQUIRE(b.task == a.task);
        if (a.scan) {
            CHECK(b.scan->base.n_sites == a.scan->base.n_sites);
            CHECK(b.scan->base.b_field == a.scan->base.b_field);
            CHECK(b.scan->nu == a.scan->nu);
            CHECK(b.scan->fz_grid == a.scan->fz_grid);
            CHECK(b.scan->xi_grid == a.scan->xi_grid);
            CHECK(b.scan->refinement == a.scan->refinement);
            CHECK(b.scan->workers == a.scan->workers);
            CHECK(b.scan->seed == a.scan->seed);
            CHECK(b.scan->output_dir == a.scan->output_dir);
            CHECK(b.scan->solver.max_steps == a.scan->solver.max_steps);
            CHECK(b.scan->solver.convergence_tol == a.scan->solver.convergence_tol);
        } else {
            CHECK(b.solve->model.f_z == a.solve->model.f_z);
            CHECK(b.solve->nu == a.solve->nu);
            CHECK(b.solve->seed == a.solve->seed);
        }
    }
}

TEST_CASE("unknown fields are rejected with a field path") {
    auto expect_reject = [](const std::string& text, const std::string& needle) {
        try {
            config::parse_config_text(text, "cfg.json");
            FAIL_CHECK("expected ConfigError for: " << needle);
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("cfg.json") != std::string::npos);
            CHECK(msg.find(needle) != std::string::npos);
        }
    };
    expect_reject(R"({"schema":"ion-config-v1","task":"solve",
                      "model":{"n_sites":4},"bogus":1})",
                  "bogus");
    expect_reject(R"({"schema":"ion-config-v1","task":"solve",
                      "model":{"n_sites":4,"nsites":4}})",
                  "model.nsites");
    expect_reject(R"({"schema":"ion-config-v1","task":"solve",
                      "model":{"n_sites":4},"solver":{"dt":0.1}})",
                  "solver.dt");
    // Scan grids own f_z and xi; a scan model must not pin them.
    expect_reject(R"({"schema":"ion-config-v1","task":"scan",
                      "model":{"n_sites":4,"f_z":1.0},
                      "fz_grid":[0.0],"xi_grid":[0.0]})",
                  "model.f_z");
}

TEST_CASE("schema, task, grid, and range validation") {
    auto bad = [](const std::string& text) {
        CHECK_THROWS_AS(config::parse_config_text(text), ConfigError);
    };
    bad(R"(not json)");
    bad(R"({"task":"solve","model":{"n_sites":4}})");                  // no schema
    bad(R"({"schema":"ion-config-v2","task":"solve","model":{"n_sites":4}})");
    bad(R"({"schema":"ion-config-v1","model":{"n_sites":4}})");        // no task
    bad(R"({"schema":"ion-config-v1","task":"files","model":{"n_sites":4}})");
    bad(R"({"schema":"ion-config-v1","task":"solve"})");               // no model
    bad(R"({"schema":"ion-config-v1","task":"solve","model":{"j":1.0}})");
    bad(R"({"schema":"ion-config-v1","task":"solve","model":{"n_sites":0}})");
    bad(R"({"schema":"ion-config-v1","task":"solve","model":{"n_sites":4},"nu":1.5})");
    const std::string head =
        R"({"schema":"ion-config-v1","task":"scan","model":{"n_sites":4},)";
    bad(head + R"("fz_grid":[],"xi_grid":[0.0]})");                    // empty
    bad(head + R"("fz_grid":[1.0,1.0],"xi_grid":[0.0]})");             // not increasing
    bad(head + R"("fz_grid":[2.0,1.0],"xi_grid":[0.0]})");
    bad(head + R"("fz_grid":{"from":0,"to":1},"xi_grid":[0.0]})");     // no step
    bad(head + R"("fz_grid":{"from":0,"to":1,"step":-0.5},"xi_grid":[0.0]})");
    bad(head + R"("fz_grid":{"from":0,"to":1,"step":0.5,"n":3},"xi_grid":[0.0]})");
    bad(head + R"("fz_grid":"dense","xi_grid":[0.0]})");
    bad(head + R"("fz_grid":[0.0],"xi_grid":[0.0],"workers":0})");
    bad(head + R"("fz_grid":[0.0],"xi_grid":[0.0],"refinement":-1})");
    bad(head + R"("fz_grid":[0.0],"xi_grid":[0.0],"nu":0.0})");
    CHECK_THROWS_AS(config::parse_config("/nonexistent/agenda.json"), ConfigError);
}

TEST_CASE("range grids hit the endpoint despite rounding") {
    const config::ParsedConfig c = config::parse_config_text(R"({
      "schema":"ion-config-v1","task":"scan","model":{"n_sites":4},
      "fz_grid":{"from":0.0,"to":1.0,"step":0.1},"xi_grid":[0.0]})");
    REQUIRE(c.scan->fz_grid.size() == 11);
    CHECK(c.scan->fz_grid.back() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fnv1a64 matches the reference vectors") {
    // Standard FNV-1a 64-bit test vectors.
    CHECK(store::fnv1a64_hex("") == "cbf29ce484222325");
    CHECK(store::fnv1a64_hex("a") == "af63dc4c8601ec8c");
    CHECK(store::fnv1a64_hex("foobar") == "85944171f73967e8");
}

TEST_CASE("point keys separate every input that changes the computation") {
    ModelParams p;
    p.n_sites = 8;
    p.f_z = 1.0;
    p.xi = 0.5;
    const ngs::FlowOptions o = cheap_opts();
    const std::string base = store::point_key(p, o, 0.5);
    CHECK(base.size() == 16);
    CHECK(base.find_first_not_of("0123456789abcdef") == std::string::npos);
    CHECK(store::point_key(p, o, 0.5) == base);  // stable

    auto differs = [&](ModelParams q, ngs::FlowOptions oo, double nu) {
        CHECK(store::point_key(q, oo, nu) != base);
    };
    ModelParams q = p;
    q.f_z = 1.0000001;
    differs(q, o, 0.5);
    q = p;
    q.xi = 0.4999;
    differs(q, o, 0.5);
    q = p;
    q.n_sites = 10;
    differs(q, o, 0.5);
    q = p;
    q.temperature = 1.0;
    differs(q, o, 0.5);
    differs(p, o, 0.25);
    differs(p, o, -1.0);  // fixed-field marker
    ngs::FlowOptions oo = o;
    oo.max_steps += 1;
    differs(p, oo, 0.5);
    oo = o;
    oo.seed = 99;
    differs(p, oo, 0.5);
    oo = o;
    oo.convergence_tol *= 0.1;
    differs(p, oo, 0.5);
    oo = o;
    oo.momentum = 0.0;
    differs(p, oo, 0.5);
    oo = o;
    oo.rate_clip = 0.0;
    differs(p, oo, 0.5);
}

TEST_CASE("store round-trips points and survives reopen") {
    const fs::path root = fresh_dir("roundtrip");
    store::ResultStore st = store::ResultStore::open(root.string());
    CHECK(st.entries().empty());
    CHECK(st.n_done() == 0);

    json pt = {{"schema", "ion-point-v1"}, {"f_z", 1.5}, {"label", "SC"}};
    st.save_point("k1", pt, "SC");
    CHECK(st.has("k1"));
    CHECK_FALSE(st.failed("k1"));
    CHECK(st.n_done() == 1);
    CHECK(st.load_point("k1") == pt);
    CHECK_THROWS_AS(st.load_point("missing"), StoreError);

    st.mark_failed("k2", "solver stalled");
    CHECK(st.failed("k2"));
    CHECK(st.n_failed() == 1);

    // Reopen from disk: same view.
    store::ResultStore st2 = store::ResultStore::open(root.string());
    CHECK(st2.has("k1"));
    CHECK(st2.failed("k2"));
    CHECK(st2.entries().at("k2").error == "solver stalled");
    CHECK(st2.load_point("k1") == pt);
}

TEST_CASE("saves are idempotent and done entries are never demoted") {
    const fs::path root = fresh_dir("idempotent");
    store::ResultStore st = store::ResultStore::open(root.string());
    const json pt = {{"f_z", 0.5}, {"value", 1.0}};
    st.save_point("key", pt, "CDW");
    const std::string manifest1 = slurp(root / "manifest.json");
    const auto stamp1 = fs::last_write_time(root / "points" / "key.json");

    st.save_point("key", pt, "CDW");  // identical -> no rewrite
    CHECK(slurp(root / "manifest.json") == manifest1);
    CHECK(fs::last_write_time(root / "points" / "key.json") == stamp1);

    st.mark_failed("key", "late failure");  // never demotes a done point
    CHECK(st.has("key"));
    CHECK_FALSE(st.failed("key"));
    CHECK(slurp(root / "manifest.json") == manifest1);

    // A failed point may be retried and completed.
    st.mark_failed("other", "first try");
    CHECK(st.failed("other"));
    st.save_point("other", pt, "PS");
    CHECK(st.has("other"));
    CHECK_FALSE(st.failed("other"));
}

TEST_CASE("manifest bytes do not depend on insertion order") {
    const fs::path a = fresh_dir("order_a");
    const fs::path b = fresh_dir("order_b");
    store::ResultStore sa = store::ResultStore::open(a.string());
    store::ResultStore sb = store::ResultStore::open(b.string());
    const json p1 = {{"x", 1}};
    const json p2 = {{"x", 2}};
    sa.save_point("aaa", p1, "SC");
    sa.save_point("zzz", p2, "PS");
    sb.save_point("zzz", p2, "PS");
    sb.save_point("aaa", p1, "SC");
    CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
}

TEST_CASE("corrupt or foreign manifests are refused") {
    const fs::path root = fresh_dir("corrupt");
    fs::create_directories(root / "points");
    spit(root / "manifest.json", "{ broken");
    CHECK_THROWS_AS(store::ResultStore::open(root.string()), StoreError);
    spit(root / "manifest.json",
         R"({"schema":"other-tool-v3","points":{}})");
    CHECK_THROWS_AS(store::ResultStore::open(root.string()), StoreError);
    spit(root / "manifest.json", R"({"schema":"ion-store-v1","points":{}})");
    CHECK_NOTHROW(store::ResultStore::open(root.string()));
}
