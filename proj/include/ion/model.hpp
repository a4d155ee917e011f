#pragma once
#include <string>

#include "ion/types.hpp"

namespace ion {

// Dimensionless convention (energy unit = 4 J_dd, lengths in lattice
// spacings, m = 1/2 so [rbar_l, pbar_j] = 2i delta_lj):
//
//   H = sum_{i<j} J/|i-j|^3 (s+_i s-_j + h.c.) + B sum_i n_i
//     + (1/4)(sum_i pbar_i^2 + sum_ij K_ij rbar_i rbar_j)
//     - 2 F_z sum_i rbar_i n_i
//
// K is the longitudinal elasticity of the ion chain:
//   K_ii = omega_z^2 + sum_{l != i} omega_dd^2/|i-l|^3,
//   K_ij = -omega_dd^2/|i-j|^3  (i != j),   omega_dd^2 = 2 beta omega_z^2,
// with stiffness ratio beta = exp(xi).  K * 1 = omega_z^2 * 1 exactly
// (center-of-mass mode).
struct ModelParams {
    int n_sites = 0;
    double j = 1.0;          // dipolar XY / hopping prefactor
    double b_field = 0.0;    // chemical-potential-like field B
    double f_z = 0.0;        // spin-displacement coupling
    double omega_z = 1.0;    // trap frequency (unit scale)
    double xi = 0.0;         // log stiffness ratio, beta = exp(xi)
    double temperature = 0.0;
    int hopping_range = 0;   // 0: full 1/r^3 tail; r>0: keep |i-j| <= r only

    double beta() const;
};

class Model {
public:
    explicit Model(const ModelParams& p);

    const ModelParams& params() const { return p_; }
    int n_sites() const { return p_.n_sites; }

    // N x N longitudinal elasticity matrix.
    const Mat& elasticity() const { return k_; }
    // Mode frequencies Omega_k (ascending) and mode matrix M (columns are
    // modes, sign-fixed so the largest-|entry| component is positive).
    const Vec& mode_frequencies() const { return omega_; }
    const Mat& mode_vectors() const { return modes_; }
    // Spin-phonon vertex per (site i, mode n): g_in = M_in / sqrt(2 Omega_n).
    Mat couplings() const;
    // Hopping matrix t_nm = J/|n-m|^3 (zero diagonal).
    const Mat& hopping() const { return t_; }

    // Stable content hash of the parameters (hex string); used as part of
    // result-store keys and checkpoint validation.
    std::string content_hash() const;

    // Transverse-phonon sector: elasticity and the phonon-mediated Ising
    // exchange J_ij = -[K_t^{-1}]_ij normalized to 1 on the central
    // nearest-neighbor pair.  beta_t past the zigzag softening makes K_t
    // lose positivity -> NonPositiveModeError.
    static Mat transverse_elasticity(int n, double f_t, double beta_t);
    static Mat transverse_exchange(int n, double f_t, double beta_t);

private:
    ModelParams p_;
    Mat k_, modes_, t_;
    Vec omega_;
};

// Builders shared with tests.
Mat longitudinal_elasticity(int n, double omega_z, double beta);
// Omega (ascending) and sign-fixed mode matrix; throws NonPositiveModeError.
void normal_modes(const Mat& k, Vec& omega, Mat& m);

} // namespace ion
