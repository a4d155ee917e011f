#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>
#include <string>

#include "ion/errors.hpp"
#include "ion/gaussian.hpp"
#include "ion/model.hpp"
#include "ion/ngs.hpp"
#include "ion/observables.hpp"

using namespace ion;
using namespace ion::ngs;

namespace {

Model make_model(int n, double xi, double f_z, double b, double temperature = 0.0,
                 double j = 1.0, int hopping_range = 0) {
    ModelParams p;
    p.n_sites = n;
    p.j = j;
    p.b_field = b;
    p.f_z = f_z;
    p.xi = xi;
    p.temperature = temperature;
    p.hopping_range = hopping_range;
    return Model(p);
}

Mat deterministic_psd(int n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Mat a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = nd(rng);
    return a * a.transpose() + 0.3 * Mat::Identity(n, n);
}

double max_abs_diff(const Mat& a, const Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

// Grand-canonical free-fermion ground energy of hopping matrix t with field b,
// plus the phonon zero-point energy: sum_{eps<0} eps(t + b I) + (1/2) sum Omega.
double free_fermion_ground(const Model& model) {
    const int n = model.n_sites();
    const Mat h = model.hopping() + model.params().b_field * Mat::Identity(n, n);
    Eigen::SelfAdjointEigenSolver<Mat> es(h);
    double e = 0.5 * model.mode_frequencies().sum();
    for (int k = 0; k < n; ++k)
        if (es.eigenvalues()(k) < 0.0) e += es.eigenvalues()(k);
    return e;
}

// Grand-canonical free-fermion + free-boson thermal free energy.
double free_fermion_thermal(const Model& model) {
    const int n = model.n_sites();
    const double t = model.params().temperature;
    const Mat h = model.hopping() + model.params().b_field * Mat::Identity(n, n);
    Eigen::SelfAdjointEigenSolver<Mat> es(h);
    double f = 0.0;
    for (int k = 0; k < n; ++k) f -= t * std::log1p(std::exp(-es.eigenvalues()(k) / t));
    for (int k = 0; k < n; ++k) {
        const double w = model.mode_frequencies()(k);
        f += 0.5 * w + t * std::log(1.0 - std::exp(-w / t));
    }
    return f;
}

} // namespace

TEST_CASE("symmetric square root and regularized inverse") {
    const Mat a = deterministic_psd(6, 11);
    const Mat r = sym_sqrt(a);
    CHECK(max_abs_diff(r, r.transpose()) < 1e-12);
    CHECK(max_abs_diff(r * r, a) < 1e-10);

    const Mat inv = reg_inv_psd(a, 0.0);
    CHECK(max_abs_diff(inv * a, Mat::Identity(6, 6)) < 1e-9);

    Mat d = Mat::Zero(2, 2);
    d(0, 0) = 4.0;
    d(1, 1) = 1e-12;
    const Mat rd = reg_inv_psd(d, 1e-6);
    CHECK(rd(0, 0) == doctest::Approx(4.0 / (16.0 + 1e-12)).epsilon(1e-12));
    // Tiny eigenvalue is floored instead of blowing up to 1e12.
    CHECK(rd(1, 1) == doctest::Approx(1e-12 / (1e-24 + 1e-12)).epsilon(1e-9));
    CHECK(rd(1, 1) < 2.0);
}

TEST_CASE("slater covariance is a pure state at the requested filling") {
    const int n = 4;
    Mat h = Mat::Zero(n, n);
    for (int i = 0; i + 1 < n; ++i) h(i, i + 1) = h(i + 1, i) = 1.0;
    const Mat gm = slater_gamma(2, h);

    CHECK(max_abs_diff(gm, -gm.transpose()) < 1e-14);
    // Upper-right block holds beta = 2Q - I with Q the filled-orbital projector.
    const Mat beta = gm.topRightCorner(n, n);
    const Mat q = 0.5 * (beta + Mat::Identity(n, n));
    CHECK(q.trace() == doctest::Approx(2.0).epsilon(1e-13));
    CHECK(max_abs_diff(q * q, q) < 1e-12);

    CMat ig = cplx(0, 1) * gm.cast<cplx>();
    Eigen::SelfAdjointEigenSolver<CMat> es(ig);
    for (int k = 0; k < 2 * n; ++k)
        CHECK(std::abs(std::abs(es.eigenvalues()(k)) - 1.0) < 1e-12);
}

TEST_CASE("fermion and boson entropies at known states") {
    const int n = 3;
    Mat h = Mat::Zero(n, n);
    h(0, 1) = h(1, 0) = 1.0;
    h(1, 2) = h(2, 1) = 1.0;
    CHECK(fermion_entropy(slater_gamma(1, h)) == doctest::Approx(0.0).epsilon(1e-10));
    // Fully mixed: gamma_m = 0 -> n log 2.
    CHECK(fermion_entropy(Mat::Zero(2 * n, 2 * n)) ==
          doctest::Approx(n * std::log(2.0)).epsilon(1e-13));

    CHECK(boson_entropy(Mat::Identity(2 * n, 2 * n)) == doctest::Approx(0.0).epsilon(1e-10));
    // gamma_b = 2 I has symplectic eigenvalue 2 on every mode.
    const double per_mode = 1.5 * std::log(1.5) - 0.5 * std::log(0.5);
    CHECK(boson_entropy(2.0 * Mat::Identity(2 * n, 2 * n)) ==
          doctest::Approx(n * per_mode).epsilon(1e-12));
}

TEST_CASE("williamson normal form reconstructs and anti-commutes with the symplectic form") {
    const int n = 3;
    const Mat gb = deterministic_psd(2 * n, 23);
    const WilliamsonForm wf = williamson(gb);

    REQUIRE(wf.s.size() == n);
    for (int k = 0; k + 1 < n; ++k) CHECK(wf.s(k) >= wf.s(k + 1));
    CHECK(wf.s.minCoeff() > 0.0);

    Vec d(2 * n);
    d << wf.s, wf.s;
    CHECK(max_abs_diff(wf.t * d.asDiagonal() * wf.t.transpose(), gb) < 1e-9);

    // This construction returns T with T^T Sigma T = -Sigma (swapped-quadrature
    // symplectic convention); the reconstruction above is what the flow needs.
    const Mat sig = gaussian::symplectic_form(n);
    CHECK(max_abs_diff(wf.t.transpose() * sig * wf.t, -sig) < 1e-9);

    // A physical covariance (here: oscillator ground state) has s = 1.
    const WilliamsonForm pure = williamson(Mat::Identity(2 * n, 2 * n));
    CHECK(max_abs_diff(Mat(pure.s.asDiagonal()), Mat::Identity(n, n)) < 1e-12);
}

TEST_CASE("boson covariance projection clips symplectic eigenvalues to one") {
    const int n = 2;
    const Mat ok = deterministic_psd(2 * n, 7) + 5.0 * Mat::Identity(2 * n, 2 * n);
    CHECK(max_abs_diff(project_boson_covariance(ok), 0.5 * (ok + ok.transpose())) < 1e-14);

    const Mat shrunk = 0.5 * Mat::Identity(2 * n, 2 * n);
    const Mat proj = project_boson_covariance(shrunk);
    const WilliamsonForm wf = williamson(proj);
    CHECK(wf.s.minCoeff() == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(max_abs_diff(proj, proj.transpose()) < 1e-13);
}

TEST_CASE("fermion covariance clip is the identity inside the physical set") {
    const int n = 3;
    Mat h = Mat::Zero(n, n);
    h(0, 1) = h(1, 0) = 0.7;
    const Mat pure = slater_gamma(1, h);
    const Mat inside = 0.9 * pure;
    const Mat out = clip_fermion_covariance(inside);
    CHECK(max_abs_diff(out, inside) == 0.0);  // bitwise unchanged

    const Mat outside = 1.3 * pure;
    const Mat clipped = clip_fermion_covariance(outside);
    CMat ig = cplx(0, 1) * clipped.cast<cplx>();
    Eigen::SelfAdjointEigenSolver<CMat> es(ig);
    CHECK(es.eigenvalues().cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
    CHECK(max_abs_diff(clipped, -clipped.transpose()) < 1e-12);
}

TEST_CASE("polaron-transformed initial guess") {
    const Model model = make_model(4, -0.5, 0.8, 0.3);
    const NGSState s = init_state(model, InitStrategy::LangFirsovGuess, 0, 0.5);
    const int n = 4;

    // lambda = -2 F_z K^{-1}
    const Mat lam_expect = -2.0 * 0.8 * model.elasticity().inverse();
    CHECK(max_abs_diff(s.lambda, lam_expect) < 1e-10);

    // Fermion part is a pure Slater state at round(nu N) = 2 particles.
    const Mat beta = s.fermions.gamma_m.topRightCorner(n, n);
    CHECK((0.5 * (beta + Mat::Identity(n, n))).trace() == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(fermion_entropy(s.fermions.gamma_m) < 1e-9);

    // Boson blocks: Gamma_xx = K^{-1/2}, Gamma_pp = K^{1/2}, no cross block.
    const Mat gxx = s.bosons.gamma_b.topLeftCorner(n, n);
    const Mat gpp = s.bosons.gamma_b.bottomRightCorner(n, n);
    CHECK(max_abs_diff(gxx * gxx, model.elasticity().inverse()) < 1e-9);
    CHECK(max_abs_diff(gpp * gpp, model.elasticity()) < 1e-9);
    CHECK(s.bosons.gamma_b.topRightCorner(n, n).cwiseAbs().maxCoeff() < 1e-12);

    // delta_r solves the displacement stationarity K dx = 2 G nbar at the guess.
    Vec nbar(n);
    for (int i = 0; i < n; ++i) nbar(i) = 0.5 * (beta(i, i) + 1.0);
    const Mat g = 2.0 * 0.8 * Mat::Identity(n, n) + model.elasticity() * s.lambda;
    const Vec dx_expect = 2.0 * model.elasticity().inverse() * g * nbar;
    CHECK(max_abs_diff(s.bosons.delta_r, dx_expect) < 1e-10);

    CHECK(s.b_field == 0.3);
    CHECK(s.tau == 0.0);
}

TEST_CASE("random init is seed-deterministic and warm start requires a source") {
    const Model model = make_model(4, 0.2, 0.5, -0.1);
    const NGSState a = init_state(model, InitStrategy::Random, 7, 0.5);
    const NGSState b = init_state(model, InitStrategy::Random, 7, 0.5);
    const NGSState c = init_state(model, InitStrategy::Random, 8, 0.5);
    CHECK(max_abs_diff(a.lambda, b.lambda) == 0.0);
    CHECK(max_abs_diff(a.fermions.gamma_m, b.fermions.gamma_m) == 0.0);
    CHECK(max_abs_diff(a.lambda, c.lambda) > 1e-6);

    CHECK_THROWS_AS(init_state(model, InitStrategy::WarmStart, 0, 0.5, nullptr), ConfigError);
    NGSState warm = a;
    warm.tau = 3.5;
    const NGSState w = init_state(model, InitStrategy::WarmStart, 0, 0.5, &warm);
    CHECK(w.tau == 0.0);
    CHECK(max_abs_diff(w.lambda, a.lambda) == 0.0);
}

TEST_CASE("effective fields agree with the free energy and are policy-independent") {
    const Model model = make_model(5, 0.4, 0.6, -0.2);
    const NGSState s = init_state(model, InitStrategy::Random, 3, 0.4);

    const double f_serial = free_energy(model, s, ExecPolicy::Serial);
    const double f_par = free_energy(model, s, ExecPolicy::Parallel);
    CHECK(f_serial == f_par);  // bitwise: fixed chunk order, serial reduction

    const EffectiveFields fs = effective_fields(model, s, ExecPolicy::Serial);
    const EffectiveFields fp = effective_fields(model, s, ExecPolicy::Parallel);
    CHECK(fs.f == fp.f);
    CHECK(max_abs_diff(fs.h_i, fp.h_i) == 0.0);
    CHECK(max_abs_diff(fs.omega_mf, fp.omega_mf) == 0.0);
    CHECK(max_abs_diff(fs.dfdlam, fp.dfdlam) == 0.0);
    CHECK(max_abs_diff(Mat(fs.dfddx), Mat(fp.dfddx)) == 0.0);

    CHECK(fs.f == doctest::Approx(f_serial).epsilon(1e-12));

    // Structural properties of the mean fields.
    CHECK(max_abs_diff(fs.h_i, -fs.h_i.transpose()) < 1e-12);
    const CMat w = fs.f_mf();
    CHECK((w - w.adjoint()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(max_abs_diff(fs.v, fs.v.transpose()) < 1e-12);
    CHECK(max_abs_diff(fs.d, fs.d.transpose()) < 1e-10);
}

TEST_CASE("finite differences validate every gradient block") {
    const Model model = make_model(4, -0.4, 0.7, 0.3);
    const NGSState s0 = init_state(model, InitStrategy::Random, 5, 0.5);
    const EffectiveFields fields = effective_fields(model, s0, ExecPolicy::Serial);
    const double eps = 1e-6;

    auto fd_check = [&](double slope_fd, double slope_an) {
        const double scale = std::max({std::abs(slope_fd), std::abs(slope_an), 1e-4});
        CHECK(std::abs(slope_fd - slope_an) / scale < 5e-5);
    };

    SUBCASE("lambda gradient") {
        const int picks[4][2] = {{0, 0}, {1, 2}, {3, 1}, {2, 3}};
        for (auto& p : picks) {
            NGSState sp = s0, sm = s0;
            sp.lambda(p[0], p[1]) += eps;
            sm.lambda(p[0], p[1]) -= eps;
            const double slope = (free_energy(model, sp) - free_energy(model, sm)) / (2 * eps);
            fd_check(slope, fields.dfdlam(p[0], p[1]));
        }
    }

    SUBCASE("displacement gradient") {
        for (int i = 0; i < 4; ++i) {
            NGSState sp = s0, sm = s0;
            sp.bosons.delta_r(i) += eps;
            sm.bosons.delta_r(i) -= eps;
            const double slope = (free_energy(model, sp) - free_energy(model, sm)) / (2 * eps);
            fd_check(slope, fields.dfddx(i));
        }
    }

    SUBCASE("fermion generator: slope over antisymmetric coordinates is h_i / 2") {
        const int picks[4][2] = {{0, 1}, {2, 5}, {4, 7}, {1, 6}};
        for (auto& p : picks) {
            NGSState sp = s0, sm = s0;
            sp.fermions.gamma_m(p[0], p[1]) += eps;
            sp.fermions.gamma_m(p[1], p[0]) -= eps;
            sm.fermions.gamma_m(p[0], p[1]) -= eps;
            sm.fermions.gamma_m(p[1], p[0]) += eps;
            const double slope = (free_energy(model, sp) - free_energy(model, sm)) / (2 * eps);
            fd_check(slope, 0.5 * fields.h_i(p[0], p[1]));
        }
    }

    SUBCASE("boson mean field: slope over symmetric coordinates is Omega / 4") {
        const int picks[5][2] = {{0, 0}, {1, 2}, {4, 4}, {5, 7}, {2, 6}};
        for (auto& p : picks) {
            NGSState sp = s0, sm = s0;
            if (p[0] == p[1]) {
                sp.bosons.gamma_b(p[0], p[0]) += eps;
                sm.bosons.gamma_b(p[0], p[0]) -= eps;
            } else {
                sp.bosons.gamma_b(p[0], p[1]) += eps;
                sp.bosons.gamma_b(p[1], p[0]) += eps;
                sm.bosons.gamma_b(p[0], p[1]) -= eps;
                sm.bosons.gamma_b(p[1], p[0]) -= eps;
            }
            const double slope = (free_energy(model, sp) - free_energy(model, sm)) / (2 * eps);
            const double expect = p[0] == p[1]
                                      ? 0.25 * fields.omega_mf(p[0], p[0])
                                      : 0.25 * (fields.omega_mf(p[0], p[1]) +
                                                fields.omega_mf(p[1], p[0]));
            fd_check(slope, expect);
        }
    }
}

TEST_CASE("nearest-neighbor-truncated chain reproduces the free-fermion references") {
    // beta = 0.7 stiff ratio, B = -0.9, hopping truncated to |i-j| = 1: strings
    // are trivial and the model is exactly free fermions + free phonons.
    const double kGround = -0.8477716472734409;
    const double kThermal = -0.99995108304547164;

    SUBCASE("ground state") {
        const Model model = make_model(4, std::log(0.7), 0.0, -0.9, 0.0, 1.0, 1);
        CHECK(free_fermion_ground(model) == doctest::Approx(kGround).epsilon(1e-13));

        FlowOptions opts;
        opts.filling = 0.75;  // three single-particle levels sit below -B
        opts.restarts = 2;
        opts.seed = 1;
        const SolveResult r = solve_ground_state(model, opts);
        CHECK(r.record.free_energy == doctest::Approx(kGround).epsilon(1e-9));
        CHECK(r.diag.converged);
    }

    SUBCASE("thermal state") {
        const Model model = make_model(4, std::log(0.7), 0.0, -0.9, 0.31, 1.0, 1);
        CHECK(free_fermion_thermal(model) == doctest::Approx(kThermal).epsilon(1e-13));

        FlowOptions opts;
        opts.filling = 0.75;
        opts.restarts = 2;
        opts.max_steps = 30000;
        const SolveResult r = solve_thermal_state(model, opts);
        std::fprintf(stderr, "[thermal nn] f = %.15g (exact %.15g)\n", r.record.free_energy,
                     kThermal);
        CHECK(r.record.free_energy >= kThermal - 1e-9);
        CHECK(r.record.free_energy == doctest::Approx(kThermal).epsilon(1e-5));
    }
}

TEST_CASE("decoupled-hopping limit: exact polaron binding at unit filling") {
    // J = 0, F_z = 0.9, B = -0.5: the energy is B sum(n) - 4 F_z^2 n^T K^{-1} n
    // + zero-point, minimized by the fully occupied pattern.
    const double kExact = -10.921876768927673;
    const Model model = make_model(4, std::log(1.1), 0.9, -0.5, 0.0, 0.0);

    Vec ones = Vec::Ones(4);
    const double binding =
        -4.0 * 0.9 * 0.9 * ones.dot(model.elasticity().ldlt().solve(ones));
    const double formula = -0.5 * 4.0 + binding + 0.5 * model.mode_frequencies().sum();
    CHECK(formula == doctest::Approx(kExact).epsilon(1e-13));

    FlowOptions opts;
    opts.filling = 1.0;
    opts.restarts = 1;
    const SolveResult r = solve_ground_state(model, opts);
    CHECK(r.record.free_energy == doctest::Approx(kExact).epsilon(1e-10));
}

TEST_CASE("single-particle sector is solved exactly at zero spin-phonon coupling") {
    const double kStiff = 1.8681473993223474;   // xi = -2, B = 1.0
    const double kSoft = 8.3729220158416844;    // xi = +2, B = 1.0
    for (int soft = 0; soft < 2; ++soft) {
        const double xi = soft ? 2.0 : -2.0;
        const double expect = soft ? kSoft : kStiff;
        const Model model = make_model(4, xi, 0.0, 1.0);

        // Independent check: lowest hopping orbital + field + zero point.
        Eigen::SelfAdjointEigenSolver<Mat> es(model.hopping());
        const double formula =
            es.eigenvalues()(0) + 1.0 + 0.5 * model.mode_frequencies().sum();
        CHECK(formula == doctest::Approx(expect).epsilon(1e-13));

        FlowOptions opts;
        opts.filling = 0.25;
        opts.restarts = 2;
        const SolveResult r = solve_ground_state(model, opts);
        CHECK(r.record.free_energy == doctest::Approx(expect).epsilon(1e-8));
        CHECK(r.record.filling == doctest::Approx(0.25).epsilon(1e-6));
    }
}

TEST_CASE("two-site thermal solve stays above the exact free energy") {
    const double kExact = -1.4640585034407103;  // dense thermal reference
    const Model model = make_model(2, 0.0, 0.5, -0.4, 0.6);
    FlowOptions opts;
    opts.filling = 0.5;
    opts.restarts = 2;
    opts.max_steps = 30000;
    const SolveResult r = solve_thermal_state(model, opts);
    std::fprintf(stderr, "[thermal 2-site] f = %.15g (exact %.15g)\n",
                 r.record.free_energy, kExact);
    CHECK(r.record.free_energy >= kExact - 1e-9);
    CHECK(r.record.free_energy <= kExact + 0.005);  // measured gap ~3.8e-3

    CHECK_THROWS_AS(solve_ground_state(model, opts), ConfigError);
    const Model cold = make_model(2, 0.0, 0.5, -0.4, 0.0);
    CHECK_THROWS_AS(solve_thermal_state(cold, opts), ConfigError);
}

TEST_CASE("flow steps decrease the free energy and reject uphill moves") {
    const Model model = make_model(3, 0.3, 0.5, 0.2);
    FlowOptions opts;

    SUBCASE("monotone descent from the initial guess") {
        NGSState s = init_state(model, InitStrategy::Random, 2, 0.5);
        EffectiveFields fields = effective_fields(model, s, opts.policy);
        const double f0 = fields.f;
        double dt = 0.01;
        int accepted = 0;
        for (int it = 0; it < 60 && accepted < 40; ++it) {
            try {
                s = flow_step(model, s, fields, dt, opts);  // throws if f rises
                fields = effective_fields(model, s, opts.policy);
                dt = std::min(1.2 * dt, 0.05);
                ++accepted;
            } catch (const StepRejectedError&) {
                dt *= 0.5;  // same backoff the driver uses
            }
        }
        CHECK(accepted >= 20);
        CHECK(fields.f < f0);
    }

    SUBCASE("a corrupted generator is rejected") {
        // Converge the decoupled-hopping model to its exact minimum, then force
        // a large fermion rotation: any move away must raise f.
        const Model j0 = make_model(4, std::log(1.1), 0.9, -0.5, 0.0, 0.0);
        FlowOptions qopts;
        qopts.filling = 1.0;
        qopts.restarts = 1;
        const SolveResult r = solve_ground_state(j0, qopts);
        EffectiveFields fields = effective_fields(j0, r.state, qopts.policy);
        Mat bad(8, 8);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) bad(i, j) = std::sin(1.0 + i + 2.0 * j);
        fields.h_i = 3.0 * (bad - bad.transpose());
        CHECK_THROWS_AS(flow_step(j0, r.state, fields, 0.2, qopts), StepRejectedError);
    }

    SUBCASE("no convergence within the step budget") {
        FlowOptions tiny;
        tiny.max_steps = 2;
        tiny.restarts = 2;
        CHECK_THROWS_AS(solve_ground_state(model, tiny), NoConvergenceError);
    }
}

TEST_CASE("periodic purification does not change the converged energy") {
    const Model model = make_model(4, -2.0, 0.0, 1.0);
    FlowOptions opts;
    opts.filling = 0.25;
    opts.restarts = 2;
    const double f_plain = solve_ground_state(model, opts).record.free_energy;
    opts.purify_every = 25;
    const double f_purified = solve_ground_state(model, opts).record.free_energy;
    CHECK(f_plain == doctest::Approx(f_purified).epsilon(1e-9));
}

TEST_CASE("field tuning hits the target filling inside the sector window") {
    const Model model = make_model(4, -2.0, 0.5, 1.7);
    FlowOptions opts;
    opts.restarts = 2;
    opts.max_steps = 12000;

    CHECK_THROWS_AS(tune_filling(model, opts, 0.0), ConfigError);
    CHECK_THROWS_AS(tune_filling(model, opts, 1.2), ConfigError);

    const double b_star = tune_filling(model, opts, 0.25);
    // Frozen single-occupation window for xi = -2, F_z = 0.5: (1.41931, 1.99258).
    CHECK(b_star > 1.41);
    CHECK(b_star < 2.0);

    Model tuned = make_model(4, -2.0, 0.5, b_star);
    FlowOptions sopts = opts;
    sopts.filling = 0.25;
    const SolveResult r = solve_ground_state(tuned, sopts);
    CHECK(std::abs(r.record.filling - 0.25) <= 2e-3);
}

TEST_CASE("checkpoint json round-trips the state exactly") {
    const Model model = make_model(3, 0.4, 0.6, -0.2);
    NGSState s = init_state(model, InitStrategy::Random, 17, 2.0 / 3.0);
    s.tau = 1.5;
    s.f = -2.25;

    const std::string text = checkpoint_to_json(s, model.content_hash());
    std::string hash;
    const NGSState t = checkpoint_from_json(text, &hash);
    CHECK(hash == model.content_hash());
    CHECK(max_abs_diff(t.lambda, s.lambda) == 0.0);
    CHECK(max_abs_diff(t.fermions.gamma_m, s.fermions.gamma_m) == 0.0);
    CHECK(max_abs_diff(t.bosons.gamma_b, s.bosons.gamma_b) == 0.0);
    CHECK(max_abs_diff(Mat(t.bosons.delta_r), Mat(s.bosons.delta_r)) == 0.0);
    CHECK(t.b_field == s.b_field);
    CHECK(t.tau == s.tau);
    CHECK(t.f == s.f);

    CHECK_THROWS_AS(checkpoint_from_json("{ not json"), StoreError);
    CHECK_THROWS_AS(checkpoint_from_json(R"({"schema":"bogus/9"})"), StoreError);
}

TEST_CASE("observable record basics at an exactly solved point") {
    const Model model = make_model(4, -2.0, 0.0, 1.0);
    FlowOptions opts;
    opts.filling = 0.25;
    opts.restarts = 2;
    const SolveResult r = solve_ground_state(model, opts);
    const ObservableRecord& rec = r.record;

    CHECK(rec.energy == doctest::Approx(rec.free_energy).epsilon(1e-12));  // T = 0
    CHECK(rec.filling == doctest::Approx(0.25).epsilon(1e-6));
    REQUIRE(rec.spin_profile.size() == 4);
    CHECK(rec.spin_profile.sum() == doctest::Approx(-2.0).epsilon(1e-6));
    REQUIRE(rec.s_q.size() == 4);
    // S(q) is symmetric under q -> 2 pi - q.
    CHECK(rec.s_q(1) == doctest::Approx(rec.s_q(3)).epsilon(1e-10));
    CHECK(rec.n_c >= -1e-12);
    CHECK(rec.n_s >= -1e-9);
}
