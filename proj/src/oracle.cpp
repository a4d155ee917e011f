#include "ion/oracle.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "ion/errors.hpp"
#include "ion/observables.hpp"

namespace ion::oracle {

namespace {

constexpr double kDimBudget = 5e6;
constexpr double kDenseCutoff = 1500;          // dense eigensolver below this
constexpr double kDegeneracyWindow = 1e-8;     // multiplicity detection
const double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---- assembly context ------------------------------------------------------

// Everything the per-row entry walker needs, precomputed once.  Per-spin-word
// quantities are cached because all dim_b rows of a spin block share them.
struct AsmCtx {
    const EDSpace* sp = nullptr;
    EDBasis basis = EDBasis::NormalModes;
    double omega_z = 1.0;

    Vec d;        // frame displacement per site (zero in the Bare frame)
    double e_frame = 0.0;  // 1/4 d^T K d
    Vec omega;    // mode frequencies (NormalModes)
    Mat m;        // mode matrix
    Mat k;        // elasticity (LocalModes)

    Vec e_spin;                  // diagonal spin constant per kept word
    Mat gamma;                   // NormalModes: r~_k coefficient (k, spin_pos)
    Mat c_loc;                   // LocalModes: r_i coefficient (i, spin_pos)
    std::vector<std::vector<std::pair<std::int32_t, double>>> hops;  // per word
};

bool occ(std::uint32_t s, int n, int i) { return EDSpace::occupied(s, n, i); }

// Anticommutation sign of c^dag_i c_j acting on an ordered Fock word: count
// occupied sites left of j, then left of i after removing j.
double fermionic_sign(std::uint32_t s, int n, int i, int j) {
    int swaps = 0;
    for (int l = 0; l < j; ++l) swaps += occ(s, n, l) ? 1 : 0;
    std::uint32_t s1 = s & ~(1u << (n - 1 - j));
    for (int l = 0; l < i; ++l) swaps += occ(s1, n, l) ? 1 : 0;
    return (swaps % 2 == 0) ? 1.0 : -1.0;
}

// Explicit string factor prod_{l between i,j} (1 - 2 n_l) on the source word.
double string_factor(std::uint32_t s, int n, int i, int j) {
    const int lo = std::min(i, j), hi = std::max(i, j);
    double f = 1.0;
    for (int l = lo + 1; l < hi; ++l) f *= occ(s, n, l) ? -1.0 : 1.0;
    return f;
}

AsmCtx make_ctx(const Model& model, const EDConfig& cfg, const EDSpace& sp,
                bool jw_strings) {
    AsmCtx ctx;
    ctx.sp = &sp;
    ctx.basis = cfg.basis;
    const int n = sp.n_sites;
    const auto& p = model.params();
    ctx.omega_z = p.omega_z;
    ctx.omega = model.mode_frequencies();
    ctx.m = model.mode_vectors();
    ctx.k = model.elasticity();

    double nu_d = cfg.displaced_density;
    if (nu_d < 0.0)
        nu_d = cfg.filling_sector >= 0
                   ? static_cast<double>(cfg.filling_sector) / n
                   : 0.5;
    if (cfg.frame == EDFrame::Displaced) {
        ctx.d = ctx.k.ldlt().solve(Vec::Constant(n, 4.0 * nu_d * p.f_z));
    } else {
        ctx.d = Vec::Zero(n);
        nu_d = 0.0;
    }
    ctx.e_frame = 0.25 * ctx.d.dot(ctx.k * ctx.d);

    const auto n_words = static_cast<std::int64_t>(sp.spins.size());
    ctx.e_spin = Vec::Zero(n_words);
    const double half_mode_sum =
        cfg.basis == EDBasis::NormalModes ? 0.5 * ctx.omega.sum() : 0.0;
    for (std::int64_t w = 0; w < n_words; ++w) {
        const std::uint32_t s = sp.spins[static_cast<std::size_t>(w)];
        double e = ctx.e_frame + half_mode_sum;
        for (int i = 0; i < n; ++i)
            if (occ(s, n, i)) e += p.b_field - 2.0 * p.f_z * ctx.d(i);
        ctx.e_spin(w) = e;
    }

    if (cfg.basis == EDBasis::NormalModes) {
        // Coefficient of r~_k for spin word s:
        //   2 nu_d F_z colsum_k - 2 F_z sum_i occ_i M_ik
        // (the first piece is the completed square 1/2 (K d)^T r).
        const Vec colsum = ctx.m.colwise().sum().transpose();
        ctx.gamma = Mat::Zero(n, n_words);
        for (std::int64_t w = 0; w < n_words; ++w) {
            const std::uint32_t s = sp.spins[static_cast<std::size_t>(w)];
            for (int k = 0; k < n; ++k) {
                double g = 2.0 * nu_d * p.f_z * colsum(k);
                for (int i = 0; i < n; ++i)
                    if (occ(s, n, i)) g -= 2.0 * p.f_z * ctx.m(i, k);
                ctx.gamma(k, w) = g;
            }
        }
    } else {
        // Coefficient of the local r_i: 2 F_z (nu_d - occ_i).
        ctx.c_loc = Mat::Zero(n, n_words);
        for (std::int64_t w = 0; w < n_words; ++w) {
            const std::uint32_t s = sp.spins[static_cast<std::size_t>(w)];
            for (int i = 0; i < n; ++i)
                ctx.c_loc(i, w) =
                    2.0 * nu_d * p.f_z - (occ(s, n, i) ? 2.0 * p.f_z : 0.0);
        }
    }

    // XY hops: s+_i s-_j moves an excitation j -> i at amplitude t_ij; the
    // fermionized variant multiplies both the anticommutation sign and the
    // explicit string factor (they cancel when the bookkeeping is right).
    const Mat& t = model.hopping();
    ctx.hops.resize(static_cast<std::size_t>(n_words));
    for (std::int64_t w = 0; w < n_words; ++w) {
        const std::uint32_t s = sp.spins[static_cast<std::size_t>(w)];
        auto& list = ctx.hops[static_cast<std::size_t>(w)];
        for (int i = 0; i < n; ++i) {
            if (occ(s, n, i)) continue;
            for (int j = 0; j < n; ++j) {
                if (j == i || !occ(s, n, j) || t(i, j) == 0.0) continue;
                const std::uint32_t s2 =
                    (s & ~(1u << (n - 1 - j))) | (1u << (n - 1 - i));
                const std::int32_t rank = sp.spin_rank[s2];
                if (rank < 0) continue;
                double amp = t(i, j);
                if (jw_strings)
                    amp *= fermionic_sign(s, n, i, j) * string_factor(s, n, i, j);
                list.emplace_back(rank, amp);
            }
        }
    }
    return ctx;
}

// Truncated single-oscillator matrix elements (levels = n_max + 1): the
// quadratic operators are squares of the truncated r and p, so the top level
// loses the b b^dag piece ((P r P)^2 semantics, not P r^2 P).
double r2_diag(int m, int n_max, double w) {
    return (m < n_max ? 2.0 * m + 1.0 : static_cast<double>(m)) / w;
}
double p2_diag(int m, int n_max, double w) {
    return w * (m < n_max ? 2.0 * m + 1.0 : static_cast<double>(m));
}

// Emits every entry of one row in a fixed order: diagonal, hops, then boson
// terms mode by mode.  Used for both the counting and the filling pass, so
// Serial and Parallel assemblies are bitwise identical.
template <class F>
void walk_row(const AsmCtx& ctx, std::int64_t row, F&& out) {
    const EDSpace& sp = *ctx.sp;
    const int n = sp.n_sites;
    const std::int64_t w = row / sp.dim_b;
    const std::int64_t bidx = row % sp.dim_b;
    int m[32];
    for (int k = 0; k < n; ++k)
        m[k] = static_cast<int>((bidx / sp.stride[k]) % sp.levels);

    // diagonal
    double diag = ctx.e_spin(w);
    if (ctx.basis == EDBasis::NormalModes) {
        for (int k = 0; k < n; ++k) diag += ctx.omega(k) * m[k];
    } else {
        const double wz = ctx.omega_z;
        for (int i = 0; i < n; ++i)
            diag += 0.25 * (p2_diag(m[i], sp.n_max, wz) +
                            ctx.k(i, i) * r2_diag(m[i], sp.n_max, wz));
    }
    out(row, diag);

    // spin hops (same boson index)
    for (const auto& [rank, amp] : ctx.hops[static_cast<std::size_t>(w)])
        out(static_cast<std::int64_t>(rank) * sp.dim_b + bidx, amp);

    if (ctx.basis == EDBasis::NormalModes) {
        for (int k = 0; k < n; ++k) {
            const double g = ctx.gamma(k, w);
            if (g == 0.0) continue;
            const double sw = std::sqrt(ctx.omega(k));
            if (m[k] > 0)
                out(row - sp.stride[k], g * std::sqrt(double(m[k])) / sw);
            if (m[k] < sp.n_max)
                out(row + sp.stride[k], g * std::sqrt(double(m[k] + 1)) / sw);
        }
        return;
    }

    // LocalModes off-diagonal terms
    const double wz = ctx.omega_z;
    const double sw = std::sqrt(wz);
    for (int i = 0; i < n; ++i) {
        const double c = ctx.c_loc(i, w);
        if (c == 0.0) continue;
        if (m[i] > 0)
            out(row - sp.stride[i], c * std::sqrt(double(m[i])) / sw);
        if (m[i] < sp.n_max)
            out(row + sp.stride[i], c * std::sqrt(double(m[i] + 1)) / sw);
    }
    for (int i = 0; i < n; ++i) {
        const double q = 0.25 * (ctx.k(i, i) / wz - wz);
        if (q == 0.0) continue;
        if (m[i] >= 2)
            out(row - 2 * sp.stride[i],
                q * std::sqrt(double(m[i]) * double(m[i] - 1)));
        if (m[i] + 2 <= sp.n_max)
            out(row + 2 * sp.stride[i],
                q * std::sqrt(double(m[i] + 1) * double(m[i] + 2)));
    }
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (ctx.k(i, j) == 0.0) continue;
            const double q = 0.5 * ctx.k(i, j) / wz;  // 2 * 1/4 K_ij / omega
            const double up_i = std::sqrt(double(m[i] + 1));
            const double dn_i = std::sqrt(double(m[i]));
            const double up_j = std::sqrt(double(m[j] + 1));
            const double dn_j = std::sqrt(double(m[j]));
            if (m[i] < sp.n_max && m[j] < sp.n_max)
                out(row + sp.stride[i] + sp.stride[j], q * up_i * up_j);
            if (m[i] < sp.n_max && m[j] > 0)
                out(row + sp.stride[i] - sp.stride[j], q * up_i * dn_j);
            if (m[i] > 0 && m[j] < sp.n_max)
                out(row - sp.stride[i] + sp.stride[j], q * dn_i * up_j);
            if (m[i] > 0 && m[j] > 0)
                out(row - sp.stride[i] - sp.stride[j], q * dn_i * dn_j);
        }
    }
}

template <class F>
void for_rows(std::int64_t dim, ExecPolicy policy, F&& fn) {
    if (policy == ExecPolicy::Parallel) {
#pragma omp parallel for schedule(static)
        for (std::int64_t r = 0; r < dim; ++r) fn(r);
    } else {
        for (std::int64_t r = 0; r < dim; ++r) fn(r);
    }
}

// ---- deflated Lanczos ------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Vec random_vector(std::int64_t dim, std::uint64_t seed) {
    Vec v(dim);
    std::uint64_t st = seed;
    for (std::int64_t i = 0; i < dim; ++i)
        v(i) = static_cast<double>(splitmix64(st) >> 11) * 0x1.0p-53 - 0.5;
    return v;
}

void orthogonalize(Vec& w, const std::vector<Vec>& basis, int n_use) {
    for (int round = 0; round < 2; ++round)
        for (int i = 0; i < n_use; ++i) w -= basis[i].dot(w) * basis[i];
}

// Lowest k eigenpairs by explicitly restarted Lanczos with full
// reorthogonalization; converged vectors are deflated by keeping the working
// space orthogonal to them.
void deflated_lanczos(const SparseHamiltonian& h, int k, double tol,
                      ExecPolicy policy, std::vector<double>& evals,
                      std::vector<Vec>& evecs) {
    const std::int64_t dim = h.dim;
    const int m_max = static_cast<int>(std::min<std::int64_t>(dim, 200));
    const int max_restarts = 60;
    evals.clear();
    evecs.clear();

    std::vector<Vec> basis;
    basis.reserve(static_cast<std::size_t>(m_max));
    Vec w(dim), ritz(dim);

    for (int pair = 0; pair < k; ++pair) {
        Vec v0 = random_vector(dim, 0x9d2c5680'00000001ULL + 77ULL * pair);
        bool converged = false;
        for (int restart = 0; restart < max_restarts && !converged; ++restart) {
            orthogonalize(v0, evecs, static_cast<int>(evecs.size()));
            const double nv = v0.norm();
            if (nv < 1e-12) {
                v0 = random_vector(dim, 0x12345ULL + 131ULL * restart +
                                            7777ULL * pair);
                continue;
            }
            v0 /= nv;
            basis.clear();
            basis.push_back(v0);
            std::vector<double> alpha, beta;
            bool invariant = false;

            for (int j = 0; j < m_max; ++j) {
                h.apply(basis[static_cast<std::size_t>(j)], w, policy);
                if (j > 0) w -= beta[static_cast<std::size_t>(j - 1)] *
                                basis[static_cast<std::size_t>(j - 1)];
                const double a = basis[static_cast<std::size_t>(j)].dot(w);
                alpha.push_back(a);
                w -= a * basis[static_cast<std::size_t>(j)];
                orthogonalize(w, evecs, static_cast<int>(evecs.size()));
                orthogonalize(w, basis, static_cast<int>(basis.size()));
                const double b = w.norm();
                beta.push_back(b);

                const int mj = j + 1;
                const bool check = b < 1e-12 || mj == m_max ||
                                   (mj >= 10 && mj % 10 == 0);
                if (check) {
                    Mat t = Mat::Zero(mj, mj);
                    for (int i = 0; i < mj; ++i) {
                        t(i, i) = alpha[static_cast<std::size_t>(i)];
                        if (i + 1 < mj)
                            t(i, i + 1) = t(i + 1, i) =
                                beta[static_cast<std::size_t>(i)];
                    }
                    Eigen::SelfAdjointEigenSolver<Mat> es(t);
                    const double theta = es.eigenvalues()(0);
                    const Vec y = es.eigenvectors().col(0);
                    const double resid = std::abs(b * y(mj - 1));
                    if (resid <= tol * std::max(1.0, std::abs(theta)) ||
                        b < 1e-12) {
                        ritz.setZero();
                        for (int i = 0; i < mj; ++i)
                            ritz += y(i) * basis[static_cast<std::size_t>(i)];
                        orthogonalize(ritz, evecs,
                                      static_cast<int>(evecs.size()));
                        const double nr = ritz.norm();
                        if (nr < 1e-12) { invariant = true; break; }
                        ritz /= nr;
                        h.apply(ritz, w, policy);
                        const double theta_r = ritz.dot(w);
                        const double res_x = (w - theta_r * ritz).norm();
                        if (res_x <= 100.0 * tol *
                                         std::max(1.0, std::abs(theta_r)) ||
                            b < 1e-12) {
                            evals.push_back(theta_r);
                            evecs.push_back(ritz);
                            converged = true;
                        } else {
                            v0 = ritz;  // warm restart from the best Ritz pair
                        }
                        break;
                    }
                    if (b < 1e-12) { invariant = true; break; }
                    if (mj == m_max) {
                        ritz.setZero();
                        for (int i = 0; i < mj; ++i)
                            ritz += y(i) * basis[static_cast<std::size_t>(i)];
                        v0 = ritz;  // warm restart
                        break;
                    }
                }
                if (b < 1e-12) { invariant = true; break; }
                basis.push_back(w / b);
            }
            if (invariant) {
                // The deflated complement is exhausted (dim small): restart
                // from a fresh random direction.
                v0 = random_vector(dim, 0xabcdefULL + 997ULL * restart +
                                            31ULL * pair);
            }
        }
        if (!converged)
            throw EigenNoConvergenceError(fmt::format(
                "Lanczos failed to converge eigenpair {} of {} (dim {}, tol "
                "{:g})",
                pair, k, dim, tol));
    }
    // Deflation returns pairs lowest-first already; sort defensively.
    std::vector<int> order(evals.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return evals[static_cast<std::size_t>(a)] <
                                         evals[static_cast<std::size_t>(b)]; });
    std::vector<double> ev;
    std::vector<Vec> vv;
    for (int i : order) {
        ev.push_back(evals[static_cast<std::size_t>(i)]);
        vv.push_back(std::move(evecs[static_cast<std::size_t>(i)]));
    }
    evals = std::move(ev);
    evecs = std::move(vv);
}

void lowest_eigenpairs(const SparseHamiltonian& h, int k, double tol,
                       ExecPolicy policy, std::vector<double>& evals,
                       std::vector<Vec>& evecs) {
    k = static_cast<int>(std::min<std::int64_t>(k, h.dim));
    if (h.dim <= static_cast<std::int64_t>(kDenseCutoff)) {
        Eigen::SelfAdjointEigenSolver<Mat> es(h.dense());
        if (es.info() != Eigen::Success)
            throw EigenNoConvergenceError("dense eigensolver failed");
        evals.assign(es.eigenvalues().data(), es.eigenvalues().data() + k);
        evecs.clear();
        for (int i = 0; i < k; ++i) evecs.push_back(es.eigenvectors().col(i));
        return;
    }
    deflated_lanczos(h, k, tol, policy, evals, evecs);
}

// ---- exact observables -----------------------------------------------------

struct DigitOps {
    // dense (levels x levels) truncated operators, row-major in Eigen Mat
    Mat r1;  // (b + b^dag)/sqrt(w)
    Mat r2;  // r1 * r1 (truncated product)
    Mat p2;  // -w (b^dag - b)^2 (truncated product)
    Mat a1;  // (b^dag - b): p_i = i sqrt(w) a1
};

DigitOps digit_ops(int levels, double w) {
    Mat b = Mat::Zero(levels, levels);
    for (int m = 1; m < levels; ++m) b(m - 1, m) = std::sqrt(double(m));
    DigitOps d;
    d.r1 = (b + b.transpose()) / std::sqrt(w);
    d.r2 = d.r1 * d.r1;
    d.a1 = b.transpose() - b;
    d.p2 = -w * (d.a1 * d.a1);
    return d;
}

// <W A_k> where A acts on digit k and W is a per-spin-word weight.
double one_digit(const EDSpace& sp, const Vec& psi, const Mat& a, int k,
                 const Vec* word_weight) {
    const int levels = sp.levels;
    double acc = 0.0;
    for (std::int64_t x = 0; x < sp.dim; ++x) {
        const double px = psi(x);
        if (px == 0.0) continue;
        const std::int64_t w = x / sp.dim_b;
        const double wt = word_weight ? (*word_weight)(w) : 1.0;
        if (wt == 0.0) continue;
        const int m = static_cast<int>((x / sp.stride[k]) % levels);
        const std::int64_t base = x - static_cast<std::int64_t>(m) * sp.stride[k];
        double inner = 0.0;
        for (int mp = 0; mp < levels; ++mp) {
            const double amp = a(mp, m);
            if (amp != 0.0)
                inner += amp *
                         psi(base + static_cast<std::int64_t>(mp) * sp.stride[k]);
        }
        acc += px * wt * inner;
    }
    return acc;
}

// <A_i B_j> for digit operators on two distinct digits.
double two_digit(const EDSpace& sp, const Vec& psi, const Mat& a, int i,
                 const Mat& b, int j) {
    const int levels = sp.levels;
    double acc = 0.0;
    for (std::int64_t x = 0; x < sp.dim; ++x) {
        const double px = psi(x);
        if (px == 0.0) continue;
        const int mi = static_cast<int>((x / sp.stride[i]) % levels);
        const int mj = static_cast<int>((x / sp.stride[j]) % levels);
        const std::int64_t base = x -
                                  static_cast<std::int64_t>(mi) * sp.stride[i] -
                                  static_cast<std::int64_t>(mj) * sp.stride[j];
        double inner = 0.0;
        for (int mpi = 0; mpi < levels; ++mpi) {
            const double ai = a(mpi, mi);
            if (ai == 0.0) continue;
            for (int mpj = 0; mpj < levels; ++mpj) {
                const double bj = b(mpj, mj);
                if (bj != 0.0)
                    inner += ai * bj *
                             psi(base +
                                 static_cast<std::int64_t>(mpi) * sp.stride[i] +
                                 static_cast<std::int64_t>(mpj) * sp.stride[j]);
            }
        }
        acc += px * inner;
    }
    return acc;
}

// Overlap <psi| X_{s -> s'} |psi> of two spin words at equal boson index.
double word_overlap(const EDSpace& sp, const Vec& psi, std::int32_t from,
                    std::int32_t to) {
    const std::int64_t a = static_cast<std::int64_t>(from) * sp.dim_b;
    const std::int64_t b = static_cast<std::int64_t>(to) * sp.dim_b;
    double acc = 0.0;
    for (std::int64_t q = 0; q < sp.dim_b; ++q) acc += psi(b + q) * psi(a + q);
    return acc;
}

// Applies s-_j then s+_i style ladders; returns false if annihilated.
bool apply_lower(std::uint32_t& s, int n, int i) {
    const std::uint32_t mask = 1u << (n - 1 - i);
    if (!(s & mask)) return false;
    s &= ~mask;
    return true;
}
bool apply_raise(std::uint32_t& s, int n, int i) {
    const std::uint32_t mask = 1u << (n - 1 - i);
    if (s & mask) return false;
    s |= mask;
    return true;
}

ObservableRecord exact_observables(const Model& model, const EDConfig& cfg,
                                   const EDSpace& sp, const AsmCtx& ctx,
                                   const Vec& psi, double e0,
                                   std::vector<double>& four_point,
                                   std::vector<double>& two_point) {
    const int n = sp.n_sites;
    const auto n_words = static_cast<std::int64_t>(sp.spins.size());
    const Vec& omega = ctx.omega;
    const Mat& mmat = ctx.m;

    // Spin-diagonal statistics in one pass: P(word), then every <n_i>,
    // <sigma^z_i sigma^z_j> follows from word probabilities.
    Vec word_prob = Vec::Zero(n_words);
    for (std::int64_t x = 0; x < sp.dim; ++x)
        word_prob(x / sp.dim_b) += psi(x) * psi(x);

    Vec nbar = Vec::Zero(n), zbar = Vec::Zero(n);
    Mat zz = Mat::Zero(n, n);
    for (std::int64_t w = 0; w < n_words; ++w) {
        const std::uint32_t s = sp.spins[static_cast<std::size_t>(w)];
        const double p = word_prob(w);
        double z[32];
        for (int i = 0; i < n; ++i) z[i] = occ(s, n, i) ? 1.0 : -1.0;
        for (int i = 0; i < n; ++i) {
            nbar(i) += p * (occ(s, n, i) ? 1.0 : 0.0);
            zbar(i) += p * z[i];
            for (int j = 0; j < n; ++j) zz(i, j) += p * z[i] * z[j];
        }
    }

    // Per-spin-word sigma^z weights for the mixed spin-phonon correlators.
    std::vector<Vec> zw(static_cast<std::size_t>(n), Vec::Zero(n_words));
    for (std::int64_t w = 0; w < n_words; ++w) {
        const std::uint32_t s = sp.spins[static_cast<std::size_t>(w)];
        for (int i = 0; i < n; ++i)
            zw[static_cast<std::size_t>(i)](w) = occ(s, n, i) ? 1.0 : -1.0;
    }

    Vec rbar(n);
    Mat pi(n, n);
    double nc = 0.0, ntot = 0.0;

    if (cfg.basis == EDBasis::NormalModes) {
        std::vector<DigitOps> ops;
        for (int k = 0; k < n; ++k) ops.push_back(digit_ops(sp.levels, omega(k)));
        Vec rk(n), rk2(n), pk2(n);
        for (int k = 0; k < n; ++k) {
            rk(k) = one_digit(sp, psi, ops[static_cast<std::size_t>(k)].r1, k,
                              nullptr);
            rk2(k) = one_digit(sp, psi, ops[static_cast<std::size_t>(k)].r2, k,
                               nullptr);
            pk2(k) = one_digit(sp, psi, ops[static_cast<std::size_t>(k)].p2, k,
                               nullptr);
        }
        Mat zr(n, n);  // <sigma^z_i r~_k>
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k)
                zr(i, k) =
                    one_digit(sp, psi, ops[static_cast<std::size_t>(k)].r1, k,
                              &zw[static_cast<std::size_t>(i)]);
        rbar = mmat * rk + ctx.d;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int k = 0; k < n; ++k)
                    acc += mmat(j, k) * (zr(i, k) - zbar(i) * rk(k));
                pi(i, j) = acc;
            }
        // Mode occupations split into the coherent part (mean field of the
        // physical r~' = r~ + M^T d) and the rest; <p~_k> vanishes for the
        // real ground vector.
        const Vec ck = mmat.transpose() * ctx.d;
        for (int k = 0; k < n; ++k) {
            const double rmean = rk(k) + ck(k);
            const double r2mean = rk2(k) + 2.0 * ck(k) * rk(k) + ck(k) * ck(k);
            nc += 0.25 * omega(k) * rmean * rmean;
            ntot += 0.25 * (omega(k) * r2mean + pk2(k) / omega(k)) - 0.5;
        }
    } else {
        const DigitOps op = digit_ops(sp.levels, ctx.omega_z);
        Vec ri(n);
        Mat rr(n, n), pp(n, n), zr(n, n);
        for (int i = 0; i < n; ++i) {
            ri(i) = one_digit(sp, psi, op.r1, i, nullptr);
            rr(i, i) = one_digit(sp, psi, op.r2, i, nullptr);
            pp(i, i) = one_digit(sp, psi, op.p2, i, nullptr);
            for (int j = 0; j < n; ++j)
                zr(j, i) = one_digit(sp, psi, op.r1, i,
                                     &zw[static_cast<std::size_t>(j)]);
        }
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) {
                rr(i, j) = rr(j, i) = two_digit(sp, psi, op.r1, i, op.r1, j);
                // p_i p_j = -w a1_i a1_j for distinct sites
                pp(i, j) = pp(j, i) =
                    -ctx.omega_z * two_digit(sp, psi, op.a1, i, op.a1, j);
            }
        rbar = ri + ctx.d;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                pi(i, j) = zr(i, j) + zbar(i) * ctx.d(j) - zbar(i) * rbar(j);
        // Transform to the normal modes of K; the displacement rides along.
        for (int k = 0; k < n; ++k) {
            double rmean = 0.0, r2mean = 0.0, p2mean = 0.0;
            for (int i = 0; i < n; ++i) {
                rmean += mmat(i, k) * rbar(i);
                for (int j = 0; j < n; ++j)
                    r2mean += mmat(i, k) * mmat(j, k) *
                              (rr(i, j) + ctx.d(i) * ri(j) + ctx.d(j) * ri(i) +
                               ctx.d(i) * ctx.d(j));
                for (int j = 0; j < n; ++j)
                    p2mean += mmat(i, k) * mmat(j, k) * pp(i, j);
            }
            nc += 0.25 * omega(k) * rmean * rmean;
            ntot += 0.25 * (omega(k) * r2mean + p2mean / omega(k)) - 0.5;
        }
    }

    ObservableRecord rec;
    rec.energy = e0;
    rec.free_energy = e0;
    rec.filling = nbar.mean();
    rec.spin_profile = zbar;
    double cdw = 0.0;
    for (int i = 0; i < n; ++i) cdw += (i % 2 == 0 ? 1.0 : -1.0) * nbar(i);
    rec.o_cdw = cdw / n;
    rec.pi = pi;
    rec.displacement = rbar;
    rec.n_c = nc / n;
    rec.n_s = ntot / n - nc / n;

    rec.s_q = Vec::Zero(n);
    for (int l = 0; l < n; ++l) {
        const double q = 2.0 * M_PI * l / n;
        double acc = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) acc += zz(i, j) * std::cos(q * (i - j));
        rec.s_q(l) = acc / n;
    }

    double mph = 0.0;
    for (int i = 0; i < n; ++i)
        mph += (i % 2 == 0 ? 1.0 : -1.0) * std::sqrt(ctx.omega_z) * rbar(i);
    rec.m_ph = mph / n;

    try {
        rec.w_z = observables::domain_wall_width(rec.spin_profile);
        rec.has_domain_wall = true;
    } catch (const NoDomainWallError&) {
        rec.w_z = kNaN;
        rec.has_domain_wall = false;
    }

    // Pair correlators from the reference site N/4.
    const int i0 = n / 4;
    const int n_delta = n / 2;
    four_point.assign(static_cast<std::size_t>(n_delta), kNaN);
    two_point.assign(static_cast<std::size_t>(n_delta), kNaN);
    rec.sc_profile = Vec::Constant(n_delta, kNaN);
    for (int delta = 1; delta <= n_delta; ++delta) {
        // two-point <s-_{i0} s-_{i0+delta}> (drops two excitations)
        if (i0 + delta < n) {
            double acc2 = 0.0;
            for (std::int64_t w = 0; w < n_words; ++w) {
                std::uint32_t s = sp.spins[static_cast<std::size_t>(w)];
                std::uint32_t s2 = s;
                if (!apply_lower(s2, n, i0 + delta)) continue;
                if (!apply_lower(s2, n, i0)) continue;
                const std::int32_t rank = sp.spin_rank[s2];
                if (rank < 0) continue;
                acc2 += word_overlap(sp, psi, static_cast<std::int32_t>(w), rank);
            }
            two_point[static_cast<std::size_t>(delta - 1)] = acc2;
        }
        // four-point <s+_{i0} s+_{i0+1} s-_{i0+delta} s-_{i0+1+delta}>
        if (i0 + 1 + delta < n) {
            double acc4 = 0.0;
            for (std::int64_t w = 0; w < n_words; ++w) {
                std::uint32_t s = sp.spins[static_cast<std::size_t>(w)];
                std::uint32_t s2 = s;
                if (!apply_lower(s2, n, i0 + 1 + delta)) continue;
                if (!apply_lower(s2, n, i0 + delta)) continue;
                if (!apply_raise(s2, n, i0 + 1)) continue;
                if (!apply_raise(s2, n, i0)) continue;
                const std::int32_t rank = sp.spin_rank[s2];
                if (rank < 0) continue;
                acc4 += word_overlap(sp, psi, static_cast<std::int32_t>(w), rank);
            }
            four_point[static_cast<std::size_t>(delta - 1)] = acc4;
            rec.sc_profile(delta - 1) = std::abs(acc4);
        }
    }
    try {
        const auto fit = observables::sc_decay_fit(rec.sc_profile);
        rec.alpha = fit.alpha;
        rec.alpha_r2 = fit.r2;
    } catch (const FitDegenerateError&) {
        rec.alpha = kNaN;
        rec.alpha_r2 = kNaN;
    }
    return rec;
}

}  // namespace

// ---- public API -------------------------------------------------------------

EDSpace make_space(const Model& model, const EDConfig& cfg) {
    const int n = model.n_sites();
    if (n < 1 || n > 6)
        throw ConfigError(fmt::format(
            "exact diagonalization supports 1..6 sites, got {}", n));
    if (cfg.n_max < 0) throw ConfigError("n_max must be non-negative");
    if (cfg.filling_sector > n)
        throw ConfigError(fmt::format("filling sector {} exceeds {} sites",
                                      cfg.filling_sector, n));
    if (cfg.n_eigenpairs < 1)
        throw ConfigError("n_eigenpairs must be at least 1");
    if (model.params().temperature != 0.0)
        throw ConfigError(
            "the oracle is a T = 0 reference; finite-T ED is out of scope");

    EDSpace sp;
    sp.n_sites = n;
    sp.n_max = cfg.n_max;
    sp.levels = cfg.n_max + 1;
    const std::uint32_t n_spin = 1u << n;
    sp.spin_rank.assign(n_spin, -1);
    for (std::uint32_t s = 0; s < n_spin; ++s) {
        if (cfg.filling_sector >= 0 &&
            std::popcount(s) != cfg.filling_sector)
            continue;
        sp.spin_rank[s] = static_cast<std::int32_t>(sp.spins.size());
        sp.spins.push_back(s);
    }
    const double dim_est = static_cast<double>(sp.spins.size()) *
                           std::pow(static_cast<double>(sp.levels), n);
    if (dim_est > kDimBudget)
        throw DimensionBudgetError(fmt::format(
            "basis dimension {:.3g} exceeds the {:.0e} budget "
            "(n_sites {}, n_max {}, sector {})",
            dim_est, kDimBudget, n, cfg.n_max, cfg.filling_sector));
    sp.dim_b = 1;
    for (int i = 0; i < n; ++i) sp.dim_b *= sp.levels;
    sp.stride.assign(static_cast<std::size_t>(n), 1);
    for (int k = n - 2; k >= 0; --k)
        sp.stride[static_cast<std::size_t>(k)] =
            sp.stride[static_cast<std::size_t>(k + 1)] * sp.levels;
    sp.dim = static_cast<std::int64_t>(sp.spins.size()) * sp.dim_b;
    return sp;
}

void SparseHamiltonian::apply(const Vec& x, Vec& y, ExecPolicy policy) const {
    y.resize(dim);
    const auto* rp = row_ptr.data();
    const auto* cp = col.data();
    const auto* vp = val.data();
    auto row_dot = [&](std::int64_t r) {
        double acc = 0.0;
        for (std::int64_t p = rp[r]; p < rp[r + 1]; ++p)
            acc += vp[p] * x(cp[p]);
        y(r) = acc;
    };
    for_rows(dim, policy, row_dot);
}

Mat SparseHamiltonian::dense() const {
    Mat d = Mat::Zero(dim, dim);
    for (std::int64_t r = 0; r < dim; ++r)
        for (std::int64_t p = row_ptr[static_cast<std::size_t>(r)];
             p < row_ptr[static_cast<std::size_t>(r + 1)]; ++p)
            d(r, col[static_cast<std::size_t>(p)]) +=
                val[static_cast<std::size_t>(p)];
    return d;
}

SparseHamiltonian build_hamiltonian(const Model& model, const EDConfig& cfg,
                                    bool jw_strings) {
    const EDSpace sp = make_space(model, cfg);
    const AsmCtx ctx = make_ctx(model, cfg, sp, jw_strings);

    SparseHamiltonian h;
    h.dim = sp.dim;
    h.row_ptr.assign(static_cast<std::size_t>(sp.dim) + 1, 0);

    // Pass 1: count entries per row.
    for_rows(sp.dim, cfg.policy, [&](std::int64_t r) {
        std::int64_t cnt = 0;
        walk_row(ctx, r, [&](std::int64_t, double) { ++cnt; });
        h.row_ptr[static_cast<std::size_t>(r) + 1] = cnt;
    });
    for (std::int64_t r = 0; r < sp.dim; ++r)
        h.row_ptr[static_cast<std::size_t>(r) + 1] +=
            h.row_ptr[static_cast<std::size_t>(r)];

    // Pass 2: fill.
    h.col.resize(static_cast<std::size_t>(h.row_ptr.back()));
    h.val.resize(static_cast<std::size_t>(h.row_ptr.back()));
    for_rows(sp.dim, cfg.policy, [&](std::int64_t r) {
        std::int64_t at = h.row_ptr[static_cast<std::size_t>(r)];
        walk_row(ctx, r, [&](std::int64_t c, double v) {
            h.col[static_cast<std::size_t>(at)] = c;
            h.val[static_cast<std::size_t>(at)] = v;
            ++at;
        });
    });
    return h;
}

std::vector<double> lowest_eigenvalues(const SparseHamiltonian& h, int k,
                                       double tol, ExecPolicy policy) {
    std::vector<double> evals;
    std::vector<Vec> evecs;
    lowest_eigenpairs(h, k, tol, policy, evals, evecs);
    return evals;
}

EDResult ed_ground_state(const Model& model, const EDConfig& cfg) {
    const EDSpace sp = make_space(model, cfg);
    const AsmCtx ctx = make_ctx(model, cfg, sp, /*jw_strings=*/false);
    const SparseHamiltonian h = build_hamiltonian(model, cfg);

    const int k = static_cast<int>(
        std::min<std::int64_t>(std::max(cfg.n_eigenpairs, 2), sp.dim));
    std::vector<double> evals;
    std::vector<Vec> evecs;
    lowest_eigenpairs(h, k, cfg.tol, cfg.policy, evals, evecs);

    EDResult out;
    out.e0 = evals.front();
    out.spectrum = evals;
    out.ground_multiplicity = 0;
    for (double e : evals)
        if (e - out.e0 <= kDegeneracyWindow * std::max(1.0, std::abs(out.e0)))
            ++out.ground_multiplicity;

    out.record = exact_observables(model, cfg, sp, ctx, evecs.front(), out.e0,
                                   out.sc_four_point, out.sc_two_point);

    out.convergence_estimate = kNaN;
    if (cfg.estimate_convergence) {
        EDConfig refine = cfg;
        refine.n_max = cfg.n_max + 2;
        refine.estimate_convergence = false;
        refine.n_eigenpairs = 1;
        const SparseHamiltonian h2 = build_hamiltonian(model, refine);
        const auto ev2 = lowest_eigenvalues(h2, 1, cfg.tol, cfg.policy);
        out.convergence_estimate = std::abs(ev2.front() - out.e0);
    }
    return out;
}

void jw_crosscheck(const Model& model, const EDConfig& cfg) {
    const SparseHamiltonian h_spin = build_hamiltonian(model, cfg, false);
    const SparseHamiltonian h_ferm = build_hamiltonian(model, cfg, true);
    const int k = static_cast<int>(
        std::min<std::int64_t>(std::max(cfg.n_eigenpairs, 6), h_spin.dim));
    const auto a = lowest_eigenvalues(h_spin, k, cfg.tol, cfg.policy);
    const auto b = lowest_eigenvalues(h_ferm, k, cfg.tol, cfg.policy);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max(1.0, std::abs(a[i]));
        if (std::abs(a[i] - b[i]) > 1e-9 * scale)
            throw MismatchError(fmt::format(
                "spin/fermion spectra disagree at level {}: {:.12g} vs {:.12g}",
                i, a[i], b[i]));
    }
}

} // namespace ion::oracle
