#pragma once

#include <string>

#include "ion/types.hpp"

namespace ion {

// Phase assignment of a converged point, plus the raw classifier margins the
// decision was made from (scores are reproducible from the record alone).
enum class PhaseLabel { Normal, SC, CDW, PCDW, PS };

std::string to_string(PhaseLabel label);
PhaseLabel phase_label_from_string(const std::string& name);

struct PhaseScores {
    double ps = 0.0;    // two-block magnetization fit margin
    double pcdw = 0.0;  // polarized block + block-local CDW margin
    double cdw = 0.0;   // global CDW margin
    double sc = 0.0;    // power-law anomalous-correlator margin
};

// Every reported observable of one converged state.  Produced by the
// variational solver and by the exact-diagonalization oracle alike, so the
// two can be compared field by field.
struct ObservableRecord {
    double energy = 0.0;       // <H>
    double free_energy = 0.0;  // f = <H> - T S (equals energy at T = 0)
    double filling = 0.0;      // mean fermion density
    Vec spin_profile;          // <sigma^z_n>
    double o_cdw = 0.0;        // (1/N) sum (-1)^n <c_n^dag c_n>
    Vec sc_profile;            // |O_SC(delta)|, delta = 1 .. N/2
    double alpha = 0.0;        // fitted power-law decay exponent of O_SC
    double alpha_r2 = 0.0;     // goodness of the log-log fit
    Mat pi;                    // connected <sigma^z_i rbar_j>
    Vec displacement;          // physical <rbar_l>
    double n_c = 0.0;          // coherent phonons per site
    double n_s = 0.0;          // squeezed/incoherent phonons per site
    Vec s_q;                   // structure factor at q_k = 2 pi k / N
    double m_ph = 0.0;         // staggered displacement
    double w_z = 0.0;          // domain-wall width (NaN when none detected)
    bool has_domain_wall = false;

    std::string to_json() const;  // one versioned JSON object per grid point
    static ObservableRecord from_json(const std::string& text);
};

} // namespace ion
