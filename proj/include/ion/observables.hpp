#pragma once

#include "ion/model.hpp"
#include "ion/ngs.hpp"
#include "ion/record.hpp"
#include "ion/types.hpp"

namespace ion::observables {

// Classifier thresholds.  Defaults are tuned to reproduce the labeled
// reference points (Neel-like density -> CDW, half-polarized block plus
// block-local staggered order -> pCDW, power-law anomalous correlator with
// alpha ~ 2 -> SC); they are configuration, not physics.
struct PhaseThresholds {
    double block_residual = 0.05;   // PS: max RMS residual of the two-block fit
    double block_cdw_max = 0.1;     // PS: max per-block staggered order
    double block_contrast = 0.5;    // PS/pCDW: min |m_A - m_B| between blocks
    double polarized_min = 0.8;     // pCDW: min |mean sigma^z| of the polarized block
    double cdw_threshold = 0.25;    // CDW global / pCDW block-local staggered order
    double sc_alpha_max = 3.0;      // SC: max fitted decay exponent
    double sc_r2_min = 0.9;         // SC: min log-log fit quality
    double ambiguity_margin = 0.1;  // relative gap under which two labels tie
};

// Staggered density order (1/N) sum_n (-1)^n <c_n^dag c_n>.
double cdw_order(const ngs::NGSState& s);

// Dressed anomalous pair correlator between sites n and m:
//   O_SC(n, m) = exp(-1/2 wbar^T Gamma_p wbar) <P_nm c_m c_n> sgn(m - n),
// with wbar_l = lambda_{l,n} + lambda_{l,m} and P_nm the sign string strictly
// between the two sites.
cplx sc_correlator(const ngs::NGSState& s, int n, int m);

// |O_SC(delta)| for delta = 1 .. N/2 measured from the reference site N/4.
Vec sc_profile(const ngs::NGSState& s);

struct DecayFit {
    double alpha = 0.0;  // |O_SC| ~ delta^-alpha
    double r2 = 0.0;     // coefficient of determination of the log-log fit
};

// Least-squares fit of log|O_SC| vs log(delta) over delta in [2, N/4];
// entries below 1e-12 (or NaN) are excluded; fewer than two usable points
// raise FitDegenerateError.  The Vec overload fits a precomputed profile.
DecayFit sc_decay_fit(const Vec& profile);
DecayFit sc_decay_fit(const ngs::NGSState& s);
double sc_decay_exponent(const ngs::NGSState& s);

// Connected spin-displacement correlator Pi(i, j) = <sigma^z_i rbar_j>_c in
// the sigma^z / rbar normalization:  Pi = -4 D lambda^T with
// D_nm = <c_n^dag c_m><c_m^dag c_n>-type density covariance.  The
// density-normalized form <n_i rbar_j>_c is exactly Pi / 2 (sigma^z = 2n - 1).
Mat spin_phonon_correlator(const ngs::NGSState& s);

// Physical displacement <rbar_l> = Delta_{x,l} - 2 sum_n lambda_ln <n_n>.
Vec phonon_displacement(const ngs::NGSState& s);

struct PhononNumbers {
    double n_c = 0.0;  // coherent phonons per site
    double n_s = 0.0;  // squeezed/incoherent phonons per site
};

// Per-site coherent and squeezed phonon numbers in the free normal-mode
// basis; the squeezed part includes the polaron dressing 4 lambda D lambda^T
// of the position covariance.
PhononNumbers phonon_numbers(const Model& model, const ngs::NGSState& s);

// S(q_k) = (1/N) sum_ij <sigma^z_i sigma^z_j> cos(q_k |i-j|), q_k = 2 pi k/N.
Vec structure_factor(const ngs::NGSState& s);

// m_ph = (1/N) sum_n (-1)^n <b_n + b_n^dag>; with the local mode at the trap
// frequency (omega_z = 1) this is the staggered sum of <rbar_n>.
double staggered_phonon(const ngs::NGSState& s);

// W_z = sum_n (z_n - z_c)^2 (1 - |<sigma^z_n>|) / 2 with z_n = n (unit
// spacing) and z_c the linearly interpolated zero crossing of the profile.
// Requires a single-crossing (phase-separated) profile: NoDomainWallError
// otherwise.
double domain_wall_width(const Vec& spin_profile);
double domain_wall_width(const ngs::NGSState& s);

// Decision tree over the record: PS, then pCDW, then CDW, then SC, else
// NORMAL.  Each branch gets a margin score (>1 passes); if the two strongest
// passing branches lie within ambiguity_margin of each other the point is
// flagged for refinement via AmbiguousPhaseError.  Pure function of the
// record and thresholds.
PhaseLabel classify_phase(const ObservableRecord& rec, PhaseScores* scores = nullptr,
                          const PhaseThresholds& thresholds = PhaseThresholds{});

// Full observable set of a converged state.
ObservableRecord record(const Model& model, const ngs::NGSState& s);

} // namespace ion::observables
