#include "ion/ngs.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <json.hpp>

#include "ion/errors.hpp"
#include "ion/json_util.hpp"
#include "ion/observables.hpp"

namespace ion::ngs {

namespace {

constexpr int kPairChunks = 64;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Residual linear coupling G and induced density-density interaction V of the
// transformed frame.
void gv_matrices(const Mat& k_el, double f_z, const Mat& lambda, Mat& g, Mat& v) {
    const int n = static_cast<int>(lambda.rows());
    g = 2.0 * f_z * Mat::Identity(n, n) + k_el * lambda;
    v = 2.0 * (lambda.transpose() * k_el * lambda) +
        4.0 * f_z * (lambda + lambda.transpose());
}

// Franck-Condon overlap factors exp(-1/2 w^T Gamma_p w), w = lambda_n - lambda_m.
Mat fc_matrix(const Mat& lambda, const Mat& gamma_p) {
    const int n = static_cast<int>(lambda.rows());
    Mat fc = Mat::Ones(n, n);
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) {
            const Vec w = lambda.col(a) - lambda.col(b);
            fc(a, b) = fc(b, a) = std::exp(-0.5 * w.dot(gamma_p * w));
        }
    return fc;
}

std::vector<std::pair<int, int>> pair_list(const Mat& t) {
    std::vector<std::pair<int, int>> pairs;
    for (int n = 0; n < t.rows(); ++n)
        for (int m = 0; m < t.cols(); ++m)
            if (n != m && t(n, m) != 0.0) pairs.emplace_back(n, m);
    return pairs;
}

Mat antisym_jitter(int n2, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Mat j(n2, n2);
    for (int a = 0; a < n2; ++a)
        for (int b = 0; b < n2; ++b) j(a, b) = nd(rng);
    return scale * (j - j.transpose());
}

// One pair of the string sum, with the deterministic jitter-retry ladder used
// when the string linear system is singular (<P> ~ 0 crossings mid-flow).
gaussian::StringGradient
pair_gradient(const Mat& gamma_m, const gaussian::StringMask& mask, std::size_t pair_index) {
    for (int attempt = 0;; ++attempt) {
        try {
            if (attempt == 0) return gaussian::string_hopping_gradient(gamma_m, mask);
            const Mat jit = antisym_jitter(
                static_cast<int>(gamma_m.rows()),
                splitmix64(12345ull ^ splitmix64(pair_index * 2654435761ull + attempt)), 1e-11);
            return gaussian::string_hopping_gradient(gamma_m + jit, mask);
        } catch (const SingularStringError&) {
            if (attempt >= 2) throw;
        }
    }
}

struct PairChunk {
    double f_hop = 0.0;
    CMat g_string;
    Mat om_p;
    Mat dfdlam;
};

// Chunked deterministic reduction: pairs are split into a fixed number of
// contiguous chunks, each chunk is summed in pair order, and chunk partials
// are reduced in chunk order afterwards.  The result is bitwise identical
// between the serial and OpenMP paths for any thread count.
template <typename Body>
void run_chunked(std::size_t n_items, int n_chunks, ExecPolicy policy, Body&& body) {
    std::exception_ptr first_error = nullptr;
    auto one_chunk = [&](int c) {
        const std::size_t lo = n_items * static_cast<std::size_t>(c) / n_chunks;
        const std::size_t hi = n_items * static_cast<std::size_t>(c + 1) / n_chunks;
        try {
            for (std::size_t i = lo; i < hi; ++i) body(c, i);
        } catch (...) {
#pragma omp critical(ion_ngs_chunk_error)
            if (!first_error) first_error = std::current_exception();
        }
    };
    if (policy == ExecPolicy::Parallel) {
#pragma omp parallel for schedule(dynamic)
        for (int c = 0; c < n_chunks; ++c) one_chunk(c);
    } else {
        for (int c = 0; c < n_chunks; ++c) one_chunk(c);
    }
    if (first_error) std::rethrow_exception(first_error);
}

double entropy_terms(double temperature, const NGSState& s) {
    if (temperature <= 0.0) return 0.0;
    return temperature *
           (fermion_entropy(s.fermions.gamma_m) + boson_entropy(s.bosons.gamma_b));
}

// Fermion-quadratic free energy pieces shared by free_energy/effective_fields.
struct QuadTerms {
    Vec wvec;       // B + diag(V)/2 - G^T delta_r
    double f_quad;  // all non-string, non-phonon-vacuum terms
};

QuadTerms quad_terms(const Mat& v, const Mat& g, double b_field, const Vec& delta_r,
                     const Vec& nbar, const CMat& cdc, const CMat& cc, const CMat& cdcd) {
    const int n = static_cast<int>(nbar.size());
    QuadTerms out;
    out.wvec = Vec::Constant(n, b_field) + 0.5 * v.diagonal() - g.transpose() * delta_r;
    double f = out.wvec.dot(nbar);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
            if (a == b) continue;
            f += 0.5 * v(a, b) * nbar(a) * nbar(b);
            f -= 0.5 * std::real(v(a, b) * cdc(b, a) * cdc(a, b));
            f += 0.5 * std::real(v(a, b) * cdcd(b, a) * cc(a, b));
        }
    out.f_quad = f;
    return out;
}

} // namespace

// ---- helpers -----------------------------------------------------------------

Mat sym_sqrt(const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
    Vec w = es.eigenvalues().cwiseMax(1e-14);
    return es.eigenvectors() * w.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

double fermion_entropy(const Mat& gamma_m) {
    Eigen::SelfAdjointEigenSolver<CMat> es(cplx(0, 1) * gamma_m.cast<cplx>());
    double s = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double mu = es.eigenvalues()(i);
        const double x = std::clamp(0.5 * (1.0 + mu), 1e-300, 1.0);
        const double y = std::clamp(0.5 * (1.0 - mu), 1e-300, 1.0);
        s += -0.5 * (x * std::log(x) + y * std::log(y));
    }
    return s;
}

double boson_entropy(const Mat& gamma_b) {
    const int n = static_cast<int>(gamma_b.rows()) / 2;
    const Mat c = sym_sqrt(gamma_b);
    const Mat a = c * gaussian::symplectic_form(n) * c;
    Eigen::SelfAdjointEigenSolver<CMat> es(cplx(0, -1) * a.cast<cplx>());
    double out = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double s = std::max(std::abs(es.eigenvalues()(i)), 1.0);
        const double hi = 0.5 * (s + 1.0);
        const double lo = 0.5 * (s - 1.0);
        double h = hi * std::log(hi);
        if (lo > 0.0) h -= lo * std::log(std::max(lo, 1e-300));
        out += 0.5 * h;
    }
    return out;
}

Mat log_ratio_antisym(const CMat& h, double eps) {
    Eigen::SelfAdjointEigenSolver<CMat> es(h);
    Vec mu = es.eigenvalues().cwiseMin(1.0 - eps).cwiseMax(-1.0 + eps);
    Vec g(mu.size());
    for (Eigen::Index i = 0; i < mu.size(); ++i)
        g(i) = std::log((1.0 + mu(i)) / (1.0 - mu(i)));
    const CMat r = es.eigenvectors() * g.asDiagonal() * es.eigenvectors().adjoint();
    const Mat out = (cplx(0, -1) * r).real();
    return 0.5 * (out - out.transpose());
}

Mat log_ratio_thermal(const CMat& h, double eps) {
    Eigen::SelfAdjointEigenSolver<CMat> es(h);
    Vec s = es.eigenvalues();
    Vec g(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        double sc = s(i);
        if (std::abs(sc) < 1.0 + eps) sc = (sc >= 0.0 ? 1.0 + eps : -(1.0 + eps));
        g(i) = std::log((sc + 1.0) / (sc - 1.0));
    }
    const CMat r = es.eigenvectors() * g.asDiagonal() * es.eigenvectors().adjoint();
    const Mat out = (cplx(0, 1) * r).real();
    return 0.5 * (out - out.transpose());
}

Mat clip_fermion_covariance(const Mat& gamma_m, double eps) {
    Eigen::SelfAdjointEigenSolver<CMat> es(cplx(0, 1) * gamma_m.cast<cplx>());
    if (es.eigenvalues().cwiseAbs().maxCoeff() <= 1.0) return gamma_m;
    Vec mu = es.eigenvalues().cwiseMin(1.0 - eps).cwiseMax(-1.0 + eps);
    const CMat r = es.eigenvectors() * mu.asDiagonal() * es.eigenvectors().adjoint();
    const Mat out = (cplx(0, -1) * r).real();
    return 0.5 * (out - out.transpose());
}

WilliamsonForm williamson(const Mat& gamma_b) {
    const int n = static_cast<int>(gamma_b.rows()) / 2;
    const Mat c = sym_sqrt(gamma_b);
    const Mat a = c * gaussian::symplectic_form(n) * c;
    Eigen::SelfAdjointEigenSolver<CMat> es(cplx(0, -1) * a.cast<cplx>());
    // Eigenvalues come in +-s pairs sorted ascending; the top n, reversed,
    // are the positive symplectic spectrum in descending order.
    WilliamsonForm out;
    out.s = Vec(n);
    Mat x(2 * n, n), y(2 * n, n);
    for (int k = 0; k < n; ++k) {
        const int src = 2 * n - 1 - k;
        out.s(k) = es.eigenvalues()(src);
        x.col(k) = std::sqrt(2.0) * es.eigenvectors().col(src).real();
        y.col(k) = -std::sqrt(2.0) * es.eigenvectors().col(src).imag();
    }
    Mat o(2 * n, 2 * n);
    o << x, y;
    Vec d(2 * n);
    d << out.s, out.s;
    out.t = c * o * d.cwiseSqrt().cwiseInverse().asDiagonal();
    return out;
}

Mat project_boson_covariance(const Mat& gamma_b, double eps) {
    const auto w = williamson(gamma_b);
    if (w.s.minCoeff() >= 1.0 + eps) return 0.5 * (gamma_b + gamma_b.transpose());
    Vec sc = w.s.cwiseMax(1.0 + eps);
    Vec d(2 * sc.size());
    d << sc, sc;
    const Mat out = w.t * d.asDiagonal() * w.t.transpose();
    return 0.5 * (out + out.transpose());
}

Mat reg_inv_psd(const Mat& m, double floor_val) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
    Vec g(es.eigenvalues().size());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double w = es.eigenvalues()(i);
        g(i) = w / (w * w + floor_val * floor_val);
    }
    return es.eigenvectors() * g.asDiagonal() * es.eigenvectors().transpose();
}

Mat slater_gamma(int n_filled, const Mat& single_particle_h) {
    const int n = static_cast<int>(single_particle_h.rows());
    Eigen::SelfAdjointEigenSolver<Mat> es(single_particle_h);
    Mat q = Mat::Zero(n, n);
    for (int k = 0; k < n_filled; ++k)
        q += es.eigenvectors().col(k) * es.eigenvectors().col(k).transpose();
    const Mat be = 2.0 * q - Mat::Identity(n, n);
    Mat gm = Mat::Zero(2 * n, 2 * n);
    gm.topRightCorner(n, n) = be;
    gm.bottomLeftCorner(n, n) = -be.transpose();
    return gm;
}

// ---- energy ------------------------------------------------------------------

double free_energy(const Model& model, const NGSState& s, ExecPolicy policy) {
    const int n = s.n_sites();
    const Mat& k_el = model.elasticity();
    const Mat t = model.hopping();
    const Mat gx = s.bosons.gamma_b.topLeftCorner(n, n);
    const Mat gp = s.bosons.gamma_b.bottomRightCorner(n, n);
    Mat g, v;
    gv_matrices(k_el, model.params().f_z, s.lambda, g, v);
    const Mat fc = fc_matrix(s.lambda, gp);
    const auto tp = gaussian::two_point_functions(s.fermions.gamma_m);
    const Vec nbar = tp.cdc.diagonal().real();

    double f = 0.25 * ((k_el * gx).trace() + gp.trace()) +
               0.25 * s.bosons.delta_r.dot(k_el * s.bosons.delta_r);

    const auto pairs = pair_list(t);
    std::vector<double> hop_chunks(kPairChunks, 0.0);
    run_chunked(pairs.size(), kPairChunks, policy, [&](int c, std::size_t i) {
        const auto [a, b] = pairs[i];
        const auto mask = gaussian::StringMask::between(n, a, b);
        const cplx hop = gaussian::string_hopping_expectation(s.fermions.gamma_m, mask);
        hop_chunks[c] += std::real(t(a, b) * fc(a, b) * hop);
    });
    for (double h : hop_chunks) f += h;

    f += quad_terms(v, g, s.b_field, s.bosons.delta_r, nbar, tp.cdc, tp.cc, tp.cdcd).f_quad;
    f -= entropy_terms(model.params().temperature, s);
    return f;
}

// ---- mean fields ---------------------------------------------------------------

CMat EffectiveFields::f_mf() const {
    const int n2 = static_cast<int>(h_i.rows());
    const int n = n2 / 2;
    CMat w(n2, n2);
    w.topLeftCorner(n, n) = CMat::Identity(n, n);
    w.topRightCorner(n, n) = CMat::Identity(n, n);
    w.bottomLeftCorner(n, n) = cplx(0, -1) * CMat::Identity(n, n);
    w.bottomRightCorner(n, n) = cplx(0, 1) * CMat::Identity(n, n);
    return 0.25 * w.adjoint() * (cplx(0, 1) * h_i.cast<cplx>()) * w;
}

Vec EffectiveFields::w(int n, int m) const { return lambda.col(n) - lambda.col(m); }
Vec EffectiveFields::w_bar(int n, int m) const { return lambda.col(n) + lambda.col(m); }

EffectiveFields effective_fields(const Model& model, const NGSState& s, ExecPolicy policy) {
    const int n = s.n_sites();
    const int n2 = 2 * n;
    const Mat& k_el = model.elasticity();
    const Mat t = model.hopping();
    const double temperature = model.params().temperature;
    const Mat gx = s.bosons.gamma_b.topLeftCorner(n, n);
    const Mat gp = s.bosons.gamma_b.bottomRightCorner(n, n);

    EffectiveFields out;
    gv_matrices(k_el, model.params().f_z, s.lambda, out.g, out.v);
    out.fc = fc_matrix(s.lambda, gp);
    out.lambda = s.lambda;

    const auto tp = gaussian::two_point_functions(s.fermions.gamma_m);
    out.nbar = tp.cdc.diagonal().real();

    // --- string pair pass: hopping energy, Gamma_m gradient, Omega_p, lambda force
    const auto pairs = pair_list(t);
    std::vector<PairChunk> chunks(kPairChunks);
    for (auto& ch : chunks) {
        ch.g_string = CMat::Zero(n2, n2);
        ch.om_p = Mat::Zero(n, n);
        ch.dfdlam = Mat::Zero(n, n);
    }
    run_chunked(pairs.size(), kPairChunks, policy, [&](int c, std::size_t i) {
        const auto [a, b] = pairs[i];
        const auto mask = gaussian::StringMask::between(n, a, b);
        const auto sg = pair_gradient(s.fermions.gamma_m, mask, i);
        const double tfc = t(a, b) * out.fc(a, b);
        auto& ch = chunks[c];
        ch.f_hop += std::real(tfc * sg.hop);
        ch.g_string += tfc * sg.grad;
        const Vec wv = s.lambda.col(a) - s.lambda.col(b);
        ch.om_p -= 2.0 * tfc * std::real(sg.hop) * (wv * wv.transpose());
        ch.dfdlam.col(a) += -2.0 * tfc * std::real(sg.hop) * (gp * wv);
    });
    double f_hop = 0.0;
    CMat g_string = CMat::Zero(n2, n2);
    Mat om_p = Mat::Identity(n, n);
    out.dfdlam = Mat::Zero(n, n);
    for (const auto& ch : chunks) {
        f_hop += ch.f_hop;
        g_string += ch.g_string;
        om_p += ch.om_p;
        out.dfdlam += ch.dfdlam;
    }

    // --- fermion quadratic part: chain rule over the two-point blocks
    const auto qt = quad_terms(out.v, out.g, s.b_field, s.bosons.delta_r, out.nbar,
                               tp.cdc, tp.cc, tp.cdcd);
    Vec vvec = Vec::Zero(n);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            if (a != b) vvec(a) += out.v(a, b) * out.nbar(b);
    CMat dfd_q = (qt.wvec + vvec).cast<cplx>().asDiagonal();
    CMat dfd_r = CMat::Zero(n, n);
    CMat dfd_p2 = CMat::Zero(n, n);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
            if (a == b) continue;
            dfd_q(a, b) -= out.v(a, b) * tp.cdc(b, a);
            dfd_r(a, b) = 0.5 * out.v(a, b) * tp.cdcd(b, a);
            dfd_p2(a, b) = 0.5 * out.v(a, b) * tp.cc(b, a);
        }
    CMat g_quad = CMat::Zero(n2, n2);
    g_quad.topLeftCorner(n, n) = cplx(0, -0.25) * (dfd_q + dfd_r + dfd_p2);
    g_quad.bottomRightCorner(n, n) =
        cplx(0, -0.25) * dfd_q + cplx(0, 0.25) * (dfd_r + dfd_p2);
    g_quad.topRightCorner(n, n) =
        0.25 * (dfd_q + dfd_q.transpose()) + 0.25 * (dfd_r - dfd_r.transpose()) -
        0.25 * (dfd_p2 - dfd_p2.transpose());

    const CMat g_tot = g_string + g_quad;
    out.h_i = 2.0 * (g_tot - g_tot.transpose()).real();
    if (temperature > 0.0)
        out.h_i += temperature *
                   log_ratio_antisym(cplx(0, 1) * s.fermions.gamma_m.cast<cplx>());

    // --- boson mean field
    out.omega_mf = Mat::Zero(n2, n2);
    out.omega_mf.topLeftCorner(n, n) = k_el;
    out.omega_mf.bottomRightCorner(n, n) = 0.5 * (om_p + om_p.transpose());
    if (temperature > 0.0) {
        const Mat c = sym_sqrt(s.bosons.gamma_b);
        const Mat sg = gaussian::symplectic_form(n);
        const Mat a = c * sg * c;
        const Mat b2 = log_ratio_thermal(cplx(0, -1) * a.cast<cplx>());
        const Mat ci = Eigen::PartialPivLU<Mat>(c).inverse();
        out.omega_mf += temperature * (sg * c * b2 * ci);
    }

    // --- lambda and delta_r forces
    out.d = (tp.cdc.array() * tp.ccd.array() +
             tp.cdcd.array() * tp.cc.transpose().array()).real().matrix();
    out.dfdlam += 2.0 * (out.g * out.d) +
                  (2.0 * (out.g * out.nbar) - k_el * s.bosons.delta_r) * out.nbar.transpose();
    out.dfddx = 0.5 * (k_el * s.bosons.delta_r) - out.g * out.nbar;

    // --- free energy
    out.f = 0.25 * ((k_el * gx).trace() + gp.trace()) +
            0.25 * s.bosons.delta_r.dot(k_el * s.bosons.delta_r) + f_hop + qt.f_quad -
            entropy_terms(temperature, s);
    return out;
}

// ---- flow ----------------------------------------------------------------------

namespace {

FlowRates rates_from_fields(const Model& model, const NGSState& s,
                            const EffectiveFields& fields, const FlowOptions& opts) {
    const int n = s.n_sites();
    const Mat& k_el = model.elasticity();
    const Mat sg = gaussian::symplectic_form(n);
    FlowRates r;
    r.f = fields.f;
    r.d_gamma_m = -(fields.h_i + s.fermions.gamma_m * fields.h_i * s.fermions.gamma_m);
    r.d_gamma_b = sg * fields.omega_mf * sg.transpose() -
                  s.bosons.gamma_b * fields.omega_mf * s.bosons.gamma_b;
    const Mat gp = s.bosons.gamma_b.bottomRightCorner(n, n);
    r.d_lambda = -0.5 * (reg_inv_psd(gp, opts.gp_floor) * fields.dfdlam *
                         reg_inv_psd(fields.d, opts.d_floor));
    if (opts.rate_clip > 0.0) {
        const double norm = r.d_lambda.cwiseAbs().maxCoeff();
        if (norm > opts.rate_clip) r.d_lambda *= opts.rate_clip / norm;
    }
    // ((Gamma_b^-1)_xx)^-1 as the Schur complement of the momentum block.
    const Mat gxx = s.bosons.gamma_b.topLeftCorner(n, n);
    const Mat gxp = s.bosons.gamma_b.topRightCorner(n, n);
    const Mat mx = gxx - gxp * Eigen::PartialPivLU<Mat>(gp).solve(gxp.transpose());
    // Built from the clipped lambda rate so the compensation that keeps the
    // physical displacement continuous stays exact.
    r.d_delta_x = -mx * (k_el * s.bosons.delta_r - 2.0 * (fields.g * fields.nbar)) +
                  2.0 * (r.d_lambda * fields.nbar);
    if (opts.rate_clip > 0.0) {
        const double norm = r.d_delta_x.cwiseAbs().maxCoeff();
        if (norm > opts.rate_clip) r.d_delta_x *= opts.rate_clip / norm;
    }
    return r;
}

NGSState euler_step(const NGSState& s, const FlowRates& r, double dt) {
    NGSState out = s;
    out.lambda = s.lambda + dt * r.d_lambda;
    out.bosons.delta_r = s.bosons.delta_r + dt * r.d_delta_x;
    out.bosons.gamma_b = s.bosons.gamma_b + dt * r.d_gamma_b;
    out.fermions.gamma_m = s.fermions.gamma_m + dt * r.d_gamma_m;
    return project_state(std::move(out));
}

} // namespace

NGSState project_state(NGSState s) {
    // Validity only: |eig(i Gamma_m)| <= 1 and symplectic eigenvalues >= 1.
    // Rounding i*Gamma_m eigenvalues onto +-1 here would pin the fermion
    // parity sector and block occupation transfer between orbitals.
    const Mat gm = 0.5 * (s.fermions.gamma_m - s.fermions.gamma_m.transpose());
    s.fermions.gamma_m = clip_fermion_covariance(gm);
    const Mat gb = 0.5 * (s.bosons.gamma_b + s.bosons.gamma_b.transpose());
    s.bosons.gamma_b = project_boson_covariance(gb);
    return s;
}

FlowRates flow_rates(const Model& model, const NGSState& s, const FlowOptions& opts) {
    return rates_from_fields(model, s, effective_fields(model, s, opts.policy), opts);
}

NGSState flow_step(const Model& model, const NGSState& s, const EffectiveFields& fields,
                   double dt, const FlowOptions& opts) {
    // lambda rate is computed first and substituted into the delta_r rate
    // inside rates_from_fields.
    NGSState trial = euler_step(s, rates_from_fields(model, s, fields, opts), dt);
    trial.f = free_energy(model, trial, opts.policy);
    if (trial.f > fields.f + opts.rise_tol * std::max(1.0, std::abs(fields.f)))
        throw StepRejectedError("free energy rose at dt=" + std::to_string(dt));
    trial.tau = s.tau + dt;
    return trial;
}

NGSState finish(const Model& model, NGSState s, const FlowOptions& opts) {
    if (model.params().temperature == 0.0) {
        try {
            NGSState pure = s;
            pure.fermions.gamma_m = gaussian::purify(s.fermions.gamma_m);
            pure.f = free_energy(model, pure, opts.policy);
            if (pure.f <= s.f + opts.rise_tol * std::max(1.0, std::abs(s.f))) return pure;
        } catch (const TooMixedError&) {
            // keep the unpurified state
        }
    }
    return s;
}

FlowResult run_flow(const Model& model, NGSState s, const FlowOptions& opts) {
    FlowResult res;
    s = project_state(std::move(s));
    FlowRates rates = flow_rates(model, s, opts);
    s.f = rates.f;
    double f = rates.f;
    double dt = opts.dt_init;
    int quiet = 0;
    // Heavy-ball velocity: the previous accepted (post-projection) step.
    const int n2 = 2 * s.n_sites();
    Mat v_gm = Mat::Zero(n2, n2), v_gb = Mat::Zero(n2, n2);
    Mat v_lam = Mat::Zero(s.n_sites(), s.n_sites());
    Vec v_dx = Vec::Zero(s.n_sites());
    const double mu = std::max(0.0, opts.momentum);
    // f at the last quiet_window accepted steps (ring buffer).  Rough
    // landscapes pin dt at the projection-jitter scale, where the f rate per
    // unit tau never reaches the quiet threshold even though f itself has
    // gone stationary; the drift over this window decides convergence there.
    const int win = std::max(1, opts.quiet_window);
    std::vector<double> recent(static_cast<std::size_t>(win) + 1, f);
    auto window_stationary = [&]() {
        if (res.diag.accepted_steps < win) return false;
        const double past =
            recent[static_cast<std::size_t>((res.diag.accepted_steps - win) %
                                            (win + 1))];
        return past - f <
               opts.convergence_tol * std::max(1.0, std::abs(f)) * win;
    };
    for (int it = 0; it < opts.max_steps; ++it) {
        ++res.diag.total_steps;
        NGSState trial = s;
        trial.fermions.gamma_m += dt * rates.d_gamma_m + mu * v_gm;
        trial.bosons.gamma_b += dt * rates.d_gamma_b + mu * v_gb;
        trial.lambda += dt * rates.d_lambda + mu * v_lam;
        trial.bosons.delta_r += dt * rates.d_delta_x + mu * v_dx;
        trial = project_state(std::move(trial));
        FlowRates trial_rates = flow_rates(model, trial, opts);
        const double ft = trial_rates.f;
        if (ft <= f + opts.rise_tol * std::max(1.0, std::abs(f))) {
            v_gm = trial.fermions.gamma_m - s.fermions.gamma_m;
            v_gb = trial.bosons.gamma_b - s.bosons.gamma_b;
            v_lam = trial.lambda - s.lambda;
            v_dx = trial.bosons.delta_r - s.bosons.delta_r;
            trial.tau = s.tau + dt;
            trial.f = ft;
            const bool small = std::abs(f - ft) / dt <
                               opts.convergence_tol * std::max(1.0, std::abs(f));
            quiet = small ? quiet + 1 : 0;
            s = std::move(trial);
            rates = std::move(trial_rates);
            f = ft;
            ++res.diag.accepted_steps;
            if (opts.purify_every > 0 && model.params().temperature == 0.0 &&
                res.diag.accepted_steps % opts.purify_every == 0) {
                try {
                    s.fermions.gamma_m = gaussian::purify(s.fermions.gamma_m);
                    rates = flow_rates(model, s, opts);
                    f = rates.f;
                    s.f = f;
                } catch (const TooMixedError&) {
                }
            }
            recent[static_cast<std::size_t>(res.diag.accepted_steps %
                                            (win + 1))] = f;
            if (quiet >= opts.quiet_window || window_stationary()) {
                res.diag.converged = true;
                break;
            }
            dt = std::min(dt * 1.2, opts.dt_max);
        } else {
            // Rejected: shrink both the step and the stored velocity (the
            // momentum term does not scale with dt by itself).
            v_gm *= 0.25;
            v_gb *= 0.25;
            v_lam *= 0.25;
            v_dx *= 0.25;
            dt *= 0.5;
            if (dt < opts.dt_min) {
                // Stalled: no step size descends any further.  That is
                // stationarity, not failure, provided f had already stopped
                // moving over the last window.
                res.diag.converged = window_stationary();
                break;
            }
        }
    }
    if (!res.diag.converged && res.diag.total_steps >= opts.max_steps)
        res.diag.converged = window_stationary();
    s.f = f;
    res.state = finish(model, std::move(s), opts);
    res.f = res.state.f;
    return res;
}

// ---- initialization ------------------------------------------------------------

namespace {

NGSState lang_firsov_guess(const Model& model, double filling) {
    const int n = model.params().n_sites;
    const Mat& k_el = model.elasticity();
    NGSState s;
    s.lambda = -2.0 * model.params().f_z * Eigen::PartialPivLU<Mat>(k_el).inverse();
    const int n_filled = static_cast<int>(std::lround(filling * n));
    s.fermions.gamma_m = slater_gamma(n_filled, model.hopping());
    Eigen::SelfAdjointEigenSolver<Mat> es(k_el);
    const Vec w = es.eigenvalues();
    const Mat u = es.eigenvectors();
    s.bosons.gamma_b = Mat::Zero(2 * n, 2 * n);
    s.bosons.gamma_b.topLeftCorner(n, n) =
        u * w.array().pow(-0.5).matrix().asDiagonal() * u.transpose();
    s.bosons.gamma_b.bottomRightCorner(n, n) =
        u * w.array().pow(0.5).matrix().asDiagonal() * u.transpose();
    Mat g, v;
    gv_matrices(k_el, model.params().f_z, s.lambda, g, v);
    const Vec nbar = Vec::Constant(n, filling);
    s.bosons.delta_r = 2.0 * Eigen::PartialPivLU<Mat>(k_el).solve(g * nbar);
    s.b_field = model.params().b_field;
    return s;
}

// Orthogonal exp(A) for antisymmetric A via the Hermitian spectrum of iA.
Mat expm_antisym(const Mat& a) {
    Eigen::SelfAdjointEigenSolver<CMat> es(cplx(0, 1) * a.cast<cplx>());
    CVec ph(es.eigenvalues().size());
    for (Eigen::Index i = 0; i < ph.size(); ++i)
        ph(i) = std::exp(cplx(0, -1) * es.eigenvalues()(i));
    return (es.eigenvectors() * ph.asDiagonal() * es.eigenvectors().adjoint()).real();
}

// Restart perturbation: mixes and rotates the fermion covariance (a pure
// rotation preserves the parity sector; the shrink makes the state slightly
// mixed so occupation can migrate between sectors during the flow).
NGSState perturbed_guess(const Model& model, double filling, int trial,
                         std::mt19937_64& rng) {
    NGSState s = lang_firsov_guess(model, filling);
    if (trial <= 0) return s;
    const int n = model.params().n_sites;
    std::normal_distribution<double> nd;
    Mat a(2 * n, 2 * n);
    for (int i = 0; i < 2 * n; ++i)
        for (int j = 0; j < 2 * n; ++j) a(i, j) = nd(rng);
    const Mat o = expm_antisym(0.3 * trial * 0.5 * (a - a.transpose()));
    s.fermions.gamma_m =
        (1.0 - 0.05 * trial) * (o * s.fermions.gamma_m * o.transpose());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) s.lambda(i, j) += 0.2 * trial * nd(rng);
    return s;
}

} // namespace

NGSState init_state(const Model& model, InitStrategy strategy, std::uint64_t seed,
                    double filling, const NGSState* warm) {
    switch (strategy) {
        case InitStrategy::LangFirsovGuess:
            return lang_firsov_guess(model, filling);
        case InitStrategy::Random: {
            std::mt19937_64 rng(splitmix64(seed));
            return perturbed_guess(model, filling, 1, rng);
        }
        case InitStrategy::WarmStart: {
            if (warm == nullptr)
                throw ConfigError("warm start requested without a source state");
            NGSState s = *warm;
            s.tau = 0.0;
            return s;
        }
    }
    throw ConfigError("unknown init strategy");
}

// ---- drivers -------------------------------------------------------------------

namespace {

FlowResult best_of_restarts(const Model& model, const FlowOptions& opts) {
    std::mt19937_64 rng(splitmix64(opts.seed));
    FlowResult best;
    bool have = false;
    bool any_converged = false;
    for (int trial = 0; trial < std::max(1, opts.restarts); ++trial) {
        NGSState s0 = perturbed_guess(model, opts.filling, trial, rng);
        FlowResult res = run_flow(model, s0, opts);
        any_converged = any_converged || res.diag.converged;
        if (!have || res.f < best.f) {
            best = std::move(res);
            have = true;
        }
    }
    best.diag.restarts_used = std::max(1, opts.restarts);
    if (!any_converged)
        throw NoConvergenceError("no restart reached the convergence window");
    return best;
}

} // namespace

SolveResult solve_ground_state(const Model& model, const FlowOptions& opts) {
    if (model.params().temperature != 0.0)
        throw ConfigError("ground-state solve requires T = 0");
    FlowResult best = best_of_restarts(model, opts);
    SolveResult out;
    out.state = std::move(best.state);
    out.diag = best.diag;
    out.record = observables::record(model, out.state);
    return out;
}

SolveResult solve_thermal_state(const Model& model, const FlowOptions& opts) {
    if (model.params().temperature <= 0.0)
        throw ConfigError("thermal solve requires T > 0");
    FlowResult best = best_of_restarts(model, opts);
    SolveResult out;
    out.state = std::move(best.state);
    out.diag = best.diag;
    out.record = observables::record(model, out.state);
    return out;
}

double tune_filling(const Model& model, const FlowOptions& opts, double nu) {
    if (!(nu > 0.0 && nu < 1.0))
        throw ConfigError("target filling must lie strictly inside (0, 1)");
    const double tol = 1e-3;
    int evals = 0;
    NGSState warm;
    bool have_warm = false;

    // B enters the variational energy only through the state, so successive
    // solves reuse the model and override the state's field.
    auto filling_at = [&](double b) {
        if (++evals > 60)
            throw FillingUnreachableError("filling bracket not established in 60 solves");
        FlowOptions o = opts;
        o.filling = nu;
        FlowResult best;
        if (have_warm) {
            NGSState s0 = warm;
            s0.b_field = b;
            best = run_flow(model, s0, o);
        } else {
            std::mt19937_64 rng(splitmix64(o.seed));
            bool have = false;
            for (int trial = 0; trial < std::max(1, o.restarts); ++trial) {
                NGSState s0 = perturbed_guess(model, nu, trial, rng);
                s0.b_field = b;
                FlowResult r = run_flow(model, s0, o);
                if (!have || r.f < best.f) {
                    best = std::move(r);
                    have = true;
                }
            }
        }
        warm = best.state;
        have_warm = true;
        const auto tp = gaussian::two_point_functions(warm.fermions.gamma_m);
        return tp.cdc.diagonal().real().mean();
    };

    double b_lo = model.params().b_field;
    double f_lo = filling_at(b_lo);
    if (std::abs(f_lo - nu) <= tol) return b_lo;
    // filling decreases with B; expand toward the bracket
    double b_hi = b_lo;
    double f_hi = f_lo;
    double step = std::max(1.0, 0.5 * std::abs(b_lo));
    while ((f_lo - nu) * (f_hi - nu) > 0.0) {
        if (f_hi > nu) b_hi += step;
        else b_lo -= step;
        step *= 2.0;
        if (f_hi > nu) f_hi = filling_at(b_hi);
        else f_lo = filling_at(b_lo);
        if (std::abs(f_hi - nu) <= tol) return b_hi;
        if (std::abs(f_lo - nu) <= tol) return b_lo;
    }
    // bisect: f(b_lo) >= nu >= f(b_hi)
    if (f_lo < f_hi) {
        std::swap(b_lo, b_hi);
        std::swap(f_lo, f_hi);
    }
    for (;;) {
        const double b_mid = 0.5 * (b_lo + b_hi);
        const double f_mid = filling_at(b_mid);
        if (std::abs(f_mid - nu) <= tol) return b_mid;
        if (f_mid > nu) b_lo = b_mid;
        else b_hi = b_mid;
        if (std::abs(b_hi - b_lo) < 1e-12)
            throw FillingUnreachableError("filling target between discrete sectors");
    }
}

// ---- checkpoint -----------------------------------------------------------------

std::string checkpoint_to_json(const NGSState& s, const std::string& model_hash) {
    nlohmann::json j;
    j["schema"] = "ngs-checkpoint/1";
    j["model_hash"] = model_hash;
    j["b_field"] = s.b_field;
    j["tau"] = s.tau;
    j["f"] = s.f;
    j["lambda"] = jsonu::from_mat(s.lambda);
    j["delta_r"] = jsonu::from_vec(s.bosons.delta_r);
    j["gamma_b"] = jsonu::from_mat(s.bosons.gamma_b);
    // fermionic covariance stored in the Majorana representation
    j["gamma_f_majorana"] = jsonu::from_mat(s.fermions.gamma_m);
    return j.dump();
}

NGSState checkpoint_from_json(const std::string& text, std::string* model_hash) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw StoreError(std::string("checkpoint parse failure: ") + e.what());
    }
    if (!j.contains("schema") || j["schema"] != "ngs-checkpoint/1")
        throw StoreError("unknown checkpoint schema");
    NGSState s;
    s.b_field = j.at("b_field").get<double>();
    s.tau = j.at("tau").get<double>();
    s.f = j.at("f").get<double>();
    s.lambda = jsonu::to_mat(j.at("lambda"));
    s.bosons.delta_r = jsonu::to_vec(j.at("delta_r"));
    s.bosons.gamma_b = jsonu::to_mat(j.at("gamma_b"));
    s.fermions.gamma_m = jsonu::to_mat(j.at("gamma_f_majorana"));
    if (s.bosons.gamma_b.rows() != 2 * s.lambda.rows() ||
        s.fermions.gamma_m.rows() != 2 * s.lambda.rows())
        throw StoreError("checkpoint block sizes are inconsistent");
    if (model_hash != nullptr) *model_hash = j.at("model_hash").get<std::string>();
    return s;
}

} // namespace ion::ngs
