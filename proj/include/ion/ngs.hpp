#pragma once

#include <cstdint>
#include <string>

#include "ion/gaussian.hpp"
#include "ion/model.hpp"
#include "ion/record.hpp"
#include "ion/types.hpp"

namespace ion::ngs {

// Variational state |Psi> = U_S |Gaussian>, with U_S the generalized polaron
// transform parametrized by lambda (per-site displacement couplings) and the
// static displacement delta_r carried inside the boson covariance object.
struct NGSState {
    Mat lambda;                            // N x N, lambda(l, n)
    gaussian::BosonCovariance bosons;      // gamma_b (2N x 2N) + delta_r (N)
    gaussian::FermionCovariance fermions;  // gamma_m (2N x 2N Majorana)
    double b_field = 0.0;                  // number-constraint field B
    double tau = 0.0;                      // accumulated imaginary time
    double f = 0.0;                        // last evaluated free energy

    int n_sites() const { return static_cast<int>(lambda.rows()); }
};

enum class InitStrategy { LangFirsovGuess, Random, WarmStart };

struct FlowOptions {
    double dt_init = 0.02;
    double dt_min = 1e-7;
    double dt_max = 0.1;
    double convergence_tol = 1e-9;  // |df|/dtau < tol * max(1, |f|)
    double rise_tol = 1e-9;         // relative monotone-acceptance slack
    int quiet_window = 100;         // sustained accepted steps below tol
    int max_steps = 40000;
    int restarts = 4;               // 1 guess + (restarts-1) perturbed
    int purify_every = 0;           // 0: purify only at finish (T = 0)
    std::uint64_t seed = 1;
    double d_floor = 1e-8;          // D^-1 Tikhonov floor (lambda flow)
    double gp_floor = 1e-10;        // Gamma_{b,p}^-1 Tikhonov floor
    double filling = 0.5;           // target filling of the initial guess
    // Heavy-ball acceleration: fraction of the previous accepted step added
    // to the next trial (0 disables).  Rejected trials decay the velocity, so
    // accepted free energies stay monotone to rise_tol regardless.
    double momentum = 0.9;
    // Infinity-norm cap on the preconditioned lambda / displacement rates.
    // Near saturated occupations the natural-gradient metric D^-1 blows
    // these blocks up and throttles the whole step; a positive per-block
    // rescale keeps the flow a descent flow while restoring a usable step
    // size (0 disables).
    double rate_clip = 10.0;
    ExecPolicy policy = ExecPolicy::Parallel;
};

// Mean-field matrices and gradients of the free energy at one state.
struct EffectiveFields {
    double f = 0.0;  // free energy at the evaluated state
    Mat omega_mf;    // 2N x 2N symmetric bosonic mean-field matrix
    Mat h_i;         // 2N x 2N antisymmetric fermionic flow generator
    Mat v;           // V_nm = 2 (lambda^T K lambda)_nm + 4 F_z (lambda_nm + lambda_mn)
    Mat g;           // G_ln = 2 F_z delta_ln + (K lambda)_ln
    Mat d;           // D_nm = <c_n c_m^dag><c_n^dag c_m> + <c_n^dag c_m^dag><c_m c_n>
    Mat fc;          // Franck-Condon factors exp(-1/2 w^T Gamma_p w)
    Mat dfdlam;      // df/dlambda
    Vec dfddx;       // df/d delta_r
    Vec nbar;        // <c_n^dag c_n>
    Mat lambda;      // copy of the state's lambda (for the w accessors)

    CMat f_mf() const;              // Nambu-Hermitian form of h_i
    Vec w(int n, int m) const;      // lambda[:,n] - lambda[:,m]
    Vec w_bar(int n, int m) const;  // lambda[:,n] + lambda[:,m]
};

struct FlowRates {
    double f = 0.0;
    Mat d_gamma_m;
    Mat d_gamma_b;
    Mat d_lambda;
    Vec d_delta_x;
};

struct SolveDiagnostics {
    int accepted_steps = 0;
    int total_steps = 0;
    int restarts_used = 0;
    bool converged = false;
};

struct FlowResult {
    NGSState state;
    double f = 0.0;
    SolveDiagnostics diag;
};

struct SolveResult {
    NGSState state;
    ObservableRecord record;
    SolveDiagnostics diag;
};

// ---- construction -----------------------------------------------------------
NGSState init_state(const Model& model, InitStrategy strategy, std::uint64_t seed,
                    double filling, const NGSState* warm = nullptr);

// ---- energy and mean fields --------------------------------------------------
double free_energy(const Model& model, const NGSState& s,
                   ExecPolicy policy = ExecPolicy::Serial);
EffectiveFields effective_fields(const Model& model, const NGSState& s,
                                 ExecPolicy policy = ExecPolicy::Serial);
FlowRates flow_rates(const Model& model, const NGSState& s, const FlowOptions& opts);

// ---- flow --------------------------------------------------------------------
// One explicit Euler step from a fields evaluation, followed by projection onto
// the physical covariance set; throws StepRejectedError when the post-step free
// energy rises by more than rise_tol * max(1, |f|).
NGSState flow_step(const Model& model, const NGSState& s, const EffectiveFields& fields,
                   double dt, const FlowOptions& opts);

FlowResult run_flow(const Model& model, NGSState s, const FlowOptions& opts);

SolveResult solve_ground_state(const Model& model, const FlowOptions& opts);
SolveResult solve_thermal_state(const Model& model, const FlowOptions& opts);

// Secant/bisection on B so the converged mean filling hits nu within 1e-3.
double tune_filling(const Model& model, const FlowOptions& opts, double nu);

// ---- projection / purification ------------------------------------------------
NGSState project_state(NGSState s);
NGSState finish(const Model& model, NGSState s, const FlowOptions& opts);

// ---- helpers (unit-tested individually) ---------------------------------------
Mat slater_gamma(int n_filled, const Mat& single_particle_h);
double fermion_entropy(const Mat& gamma_m);
double boson_entropy(const Mat& gamma_b);
Mat sym_sqrt(const Mat& m);
Mat log_ratio_antisym(const CMat& h, double eps = 1e-12);
Mat log_ratio_thermal(const CMat& h, double eps = 1e-12);
Mat clip_fermion_covariance(const Mat& gamma_m, double eps = 1e-12);

struct WilliamsonForm {
    Vec s;  // symplectic eigenvalues, descending, s >= 1 for physical states
    Mat t;  // symplectic transform: gamma_b = t diag(s, s) t^T
};
WilliamsonForm williamson(const Mat& gamma_b);
Mat project_boson_covariance(const Mat& gamma_b, double eps = 0.0);
Mat reg_inv_psd(const Mat& m, double floor_val);

// ---- checkpoint (exact decimal round-trip) -------------------------------------
std::string checkpoint_to_json(const NGSState& s, const std::string& model_hash);
NGSState checkpoint_from_json(const std::string& text, std::string* model_hash = nullptr);

} // namespace ion::ngs
