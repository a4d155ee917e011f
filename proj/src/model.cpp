#include "ion/model.hpp"

#include <cmath>
#include <cstdint>

#include <fmt/format.h>

#include "ion/errors.hpp"

namespace ion {

double ModelParams::beta() const { return std::exp(xi); }

Mat longitudinal_elasticity(int n, double omega_z, double beta) {
    const double wdd2 = 2.0 * beta * omega_z * omega_z;
    Mat k = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        double diag = omega_z * omega_z;
        for (int l = 0; l < n; ++l) {
            if (l == i) continue;
            const double r3 = std::pow(std::abs(i - l), 3);
            diag += wdd2 / r3;
            k(i, l) = -wdd2 / r3;
        }
        k(i, i) = diag;
    }
    return k;
}

void normal_modes(const Mat& k, Vec& omega, Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(k);
    if (es.info() != Eigen::Success)
        throw NonPositiveModeError("mode eigensolve failed");
    Vec w2 = es.eigenvalues();
    if (w2.minCoeff() <= 0.0)
        throw NonPositiveModeError(
            fmt::format("non-positive squared mode frequency {:.6e}", w2.minCoeff()));
    omega = w2.cwiseSqrt();
    m = es.eigenvectors();
    for (int c = 0; c < m.cols(); ++c) {
        int imax = 0;
        m.col(c).cwiseAbs().maxCoeff(&imax);
        if (m(imax, c) < 0.0) m.col(c) = -m.col(c);
    }
}

Model::Model(const ModelParams& p) : p_(p) {
    if (p.n_sites < 1) throw Error("n_sites must be >= 1");
    k_ = longitudinal_elasticity(p.n_sites, p.omega_z, p.beta());
    normal_modes(k_, omega_, modes_);
    t_ = Mat::Zero(p.n_sites, p.n_sites);
    for (int n = 0; n < p.n_sites; ++n)
        for (int m = 0; m < p.n_sites; ++m) {
            if (n == m) continue;
            if (p.hopping_range > 0 && std::abs(n - m) > p.hopping_range) continue;
            t_(n, m) = p.j / std::pow(std::abs(n - m), 3);
        }
}

Mat Model::couplings() const {
    Mat g = modes_;
    for (int n = 0; n < g.cols(); ++n) g.col(n) /= std::sqrt(2.0 * omega_(n));
    return g;
}

std::string Model::content_hash() const {
    const std::string canon = fmt::format(
        "n={} j={:.17g} b={:.17g} fz={:.17g} wz={:.17g} xi={:.17g} T={:.17g} hr={}",
        p_.n_sites, p_.j, p_.b_field, p_.f_z, p_.omega_z, p_.xi, p_.temperature,
        p_.hopping_range);
    std::uint64_t h = 1469598103934665603ull; // FNV-1a 64
    for (unsigned char c : canon) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return fmt::format("{:016x}", h);
}

Mat Model::transverse_elasticity(int n, double f_t, double beta_t) {
    Mat k = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        double diag = 1.0;
        for (int l = 0; l < n; ++l) {
            if (l == i) continue;
            const double r3 = std::pow(std::abs(i - l), 3);
            diag -= beta_t / r3;
            k(i, l) = beta_t / r3;
        }
        k(i, i) = diag;
    }
    return f_t * f_t * k;
}

Mat Model::transverse_exchange(int n, double f_t, double beta_t) {
    Mat kt = transverse_elasticity(n, f_t, beta_t);
    Eigen::SelfAdjointEigenSolver<Mat> es(kt);
    if (es.eigenvalues().minCoeff() <= 0.0)
        throw NonPositiveModeError(fmt::format(
            "transverse elasticity not positive definite (min eig {:.6e}); "
            "beta_t = {:.6g} is past the zigzag softening",
            es.eigenvalues().minCoeff(), beta_t));
    Mat j = -kt.inverse();
    const int c = n / 2 - 1; // central nearest-neighbor pair (c, c+1)
    const double norm = j(c, c + 1);
    j /= norm;
    return j;
}

} // namespace ion
