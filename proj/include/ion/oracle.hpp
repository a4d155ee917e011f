#pragma once

#include <vector>

#include "ion/model.hpp"
#include "ion/record.hpp"
#include "ion/types.hpp"

// Exact-diagonalization oracle for small chains (n_sites <= 6): sparse
// Hamiltonian in a truncated phonon Fock space, deflated Lanczos ground
// states, and exact observables in the same conventions as the variational
// records, so oracle and solver can be compared field by field.
//
// Finite-temperature ED is deliberately out of scope; the oracle is a T = 0
// reference only.
namespace ion::oracle {

// Phonon frame.  Bare keeps the oscillators centered at rbar = 0; Displaced
// completes the square around d = 4 nu_d F_z K^{-1} 1 (uniform because
// K 1 = omega_z^2 1), which removes the mean force at filling nu_d and makes
// the cutoff converge orders of magnitude faster once F_z is sizable.  With
// nu_d matched to the filling sector the center-of-mass mode decouples
// exactly inside that sector.
enum class EDFrame { Bare, Displaced };

// Phonon basis.  NormalModes diagonalizes the elastic matrix first (one
// oscillator per collective mode, variational in the cutoff: lowering n_max
// can only raise the ground energy).  LocalModes keeps one truncated
// oscillator per site and squares the truncated position/momentum operators
// (P r P)^2 directly; it converges slower and is kept as an independent
// cross-check of the assembly.
enum class EDBasis { LocalModes, NormalModes };

struct EDConfig {
    int n_max = 8;                      // Fock levels 0..n_max per oscillator
    EDFrame frame = EDFrame::Displaced;
    EDBasis basis = EDBasis::NormalModes;
    // Restrict to a fixed total spin-excitation number (< 0: full space).
    int filling_sector = -1;
    // Displacement filling nu_d; < 0 selects filling_sector / n_sites when a
    // sector is set and 1/2 otherwise.  Ignored in the Bare frame.
    double displaced_density = -1.0;
    int n_eigenpairs = 4;               // low-lying spectrum slice to compute
    double tol = 1e-10;                 // Lanczos residual tolerance
    // Also diagonalize at n_max + 2 and report |E0(n_max) - E0(n_max + 2)|.
    bool estimate_convergence = false;
    ExecPolicy policy = ExecPolicy::Parallel;
};

// Compressed-sparse-row symmetric real Hamiltonian.  Assembly is row-parallel
// (two-pass: count, then fill) and bitwise deterministic: each row's entries
// are generated in a fixed order regardless of the policy.
struct SparseHamiltonian {
    std::int64_t dim = 0;
    std::vector<std::int64_t> row_ptr;  // size dim + 1
    std::vector<std::int64_t> col;
    std::vector<double> val;

    std::int64_t n_nonzeros() const { return static_cast<std::int64_t>(val.size()); }
    // y = H x.  Row-parallel; each row reduces serially, so Serial and
    // Parallel give bitwise-identical results.
    void apply(const Vec& x, Vec& y, ExecPolicy policy = ExecPolicy::Parallel) const;
    Mat dense() const;                  // small dims only (tests, dense path)
};

struct EDResult {
    double e0 = 0.0;
    std::vector<double> spectrum;       // ascending, n_eigenpairs entries
    int ground_multiplicity = 1;        // eigenvalues within 1e-8 of e0
    ObservableRecord record;            // exact observables of the ground state
    // Signed pair correlators from the reference site N/4 (delta = 1..N/2):
    // the four-point number-conserving form
    //   <s+_{i0} s+_{i0+1} s-_{i0+delta} s-_{i0+1+delta}>
    // (NaN where i0+1+delta falls off the chain) and the two-point anomalous
    // form <s-_{i0} s-_{i0+delta}>, which vanishes identically in any fixed
    // particle-number eigenstate -- the two forms are NOT interchangeable.
    // record.sc_profile stores |four-point|.
    std::vector<double> sc_four_point;
    std::vector<double> sc_two_point;
    // |E0(n_max) - E0(n_max + 2)| when estimate_convergence was set, else NaN.
    double convergence_estimate = 0.0;
};

// Decoded basis geometry shared by assembly and observable walkers.
struct EDSpace {
    int n_sites = 0;
    int n_max = 0;
    int levels = 0;                     // n_max + 1
    std::vector<std::uint32_t> spins;   // kept spin words, ascending
    std::vector<std::int32_t> spin_rank;// word -> position in spins, -1 if cut
    std::int64_t dim_b = 0;             // levels^n_sites
    std::int64_t dim = 0;               // spins.size() * dim_b
    std::vector<std::int64_t> stride;   // digit place value per mode/site

    // Site i occupation of spin word s (site 0 is the most significant bit).
    static bool occupied(std::uint32_t s, int n_sites, int i) {
        return (s >> (n_sites - 1 - i)) & 1u;
    }
};

// Validates the configuration and enumerates the basis.  Throws ConfigError
// (n_sites > 6, bad cutoff/sector) or DimensionBudgetError (dim > 5e6).
EDSpace make_space(const Model& model, const EDConfig& cfg);

// Assembles H over the kept basis.  set jw_strings to build the fermionized
// variant where hops carry both the anticommutation sign of the ordered Fock
// basis and the explicit (1 - 2 n_l) string factor; the two signs cancel
// exactly when the bookkeeping is right, which jw_crosscheck verifies.
SparseHamiltonian build_hamiltonian(const Model& model, const EDConfig& cfg,
                                    bool jw_strings = false);

// Ground state + low-lying slice + exact observables.  Throws
// EigenNoConvergenceError if the deflated Lanczos stalls.
EDResult ed_ground_state(const Model& model, const EDConfig& cfg);

// Lowest k eigenvalues of an assembled Hamiltonian (exposed for tests).
std::vector<double> lowest_eigenvalues(const SparseHamiltonian& h, int k,
                                       double tol = 1e-10,
                                       ExecPolicy policy = ExecPolicy::Parallel);

// Builds the spin-basis and fermionized Hamiltonians through the two sign
// paths and compares their low-lying spectra; MismatchError beyond 1e-9.
void jw_crosscheck(const Model& model, const EDConfig& cfg);

} // namespace ion::oracle
