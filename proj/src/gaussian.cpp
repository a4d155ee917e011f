#include "ion/gaussian.hpp"

#include <cmath>

#include <fmt/format.h>

#include "ion/errors.hpp"

namespace ion::gaussian {

CMat FermionCovariance::gamma_f() const {
    const TwoPoint tp = two_point_functions(gamma_m);
    const int n = n_sites();
    CMat gf(2 * n, 2 * n);
    gf.topLeftCorner(n, n) = tp.ccd;
    gf.topRightCorner(n, n) = tp.cc;
    gf.bottomLeftCorner(n, n) = tp.cdcd;
    gf.bottomRightCorner(n, n) = tp.cdc;
    return gf;
}

bool FermionCovariance::is_pure(double tol) const {
    const Mat sq = gamma_m * gamma_m + Mat::Identity(gamma_m.rows(), gamma_m.cols());
    return sq.cwiseAbs().maxCoeff() < tol;
}

FermionCovariance FermionCovariance::vacuum(int n) {
    // All sites empty: <c^dag c> = 0 -> beta block = -I.
    Mat gm = Mat::Zero(2 * n, 2 * n);
    gm.topRightCorner(n, n) = -Mat::Identity(n, n);
    gm.bottomLeftCorner(n, n) = Mat::Identity(n, n);
    return {gm};
}

BosonCovariance BosonCovariance::vacuum(int n) {
    return {Mat::Identity(2 * n, 2 * n), Vec::Zero(2 * n)};
}

StringMask StringMask::between(int n_sites, int n, int m) {
    StringMask s;
    s.n = n;
    s.m = m;
    s.theta = Vec::Ones(n_sites);
    const int lo = std::min(n, m), hi = std::max(n, m);
    for (int l = lo + 1; l < hi; ++l) s.theta(l) = -1.0;
    return s;
}

double pfaffian(const Mat& a_in) {
    const Eigen::Index n = a_in.rows();
    if (a_in.cols() != n) throw NonAntisymmetricError("pfaffian: matrix not square");
    if (n % 2 == 1)
        throw OddDimensionError(fmt::format("pfaffian: odd dimension {}", n));
    if (n == 0) return 1.0;
    const double scale = std::max(1.0, a_in.cwiseAbs().maxCoeff());
    if ((a_in + a_in.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
        throw NonAntisymmetricError("pfaffian: input not antisymmetric within 1e-10");
    Mat a = 0.5 * (a_in - a_in.transpose());

    double val = 1.0;
    for (Eigen::Index k = 0; k + 1 < n; k += 2) {
        Eigen::Index kp = 0;
        a.col(k).segment(k + 1, n - k - 1).cwiseAbs().maxCoeff(&kp);
        kp += k + 1;
        if (kp != k + 1) {
            a.row(k + 1).swap(a.row(kp));
            a.col(k + 1).swap(a.col(kp));
            val = -val;
        }
        if (a(k + 1, k) == 0.0) return 0.0;
        val *= a(k, k + 1);
        if (k + 2 < n) {
            const Eigen::Index r = n - k - 2;
            const Vec tau = a.row(k).segment(k + 2, r) / a(k, k + 1);
            const Vec col = a.col(k + 1).segment(k + 2, r);
            a.bottomRightCorner(r, r) += tau * col.transpose() - col * tau.transpose();
        }
    }
    return val;
}

Mat symplectic_form(int n) {
    Mat s = Mat::Zero(2 * n, 2 * n);
    s.topRightCorner(n, n) = Mat::Identity(n, n);
    s.bottomLeftCorner(n, n) = -Mat::Identity(n, n);
    return s;
}

namespace detail {

static Vec doubled(const Vec& theta) {
    Vec th(2 * theta.size());
    th << theta, theta;
    return th;
}

StringCore string_core(const Mat& gamma_m, const Vec& theta) {
    const int n = static_cast<int>(theta.size());
    const Vec th = doubled(theta);
    const Vec sq = (1.0 - th.array()).sqrt().matrix(); // sqrt(2) on string, 0 off
    StringCore out;
    out.gamma_f_string =
        sq.asDiagonal() * gamma_m * sq.asDiagonal() -
        symplectic_form(n) * (1.0 + th.array()).matrix().asDiagonal();
    const double sf = (n % 2 == 0) ? ((n / 2) % 2 ? -1.0 : 1.0)
                                   : (((n - 1) / 2) % 2 ? -1.0 : 1.0);
    const double sign_n = (n % 2 ? -1.0 : 1.0);
    out.p = sign_n * sf * pfaffian(0.5 * out.gamma_f_string);
    return out;
}

void string_t_s(const Mat& gamma_m, const Vec& theta, Mat& t, Mat& s) {
    const int n2 = static_cast<int>(gamma_m.rows());
    const Vec th = doubled(theta);
    const Mat a = symplectic_form(n2 / 2) * gamma_m - Mat::Identity(n2, n2);
    Mat m = Mat::Identity(n2, n2);
    m += 0.5 * (1.0 - th.array()).matrix().asDiagonal() * a;
    Eigen::PartialPivLU<Mat> lu(m);
    const double rc = lu.rcond();
    if (!(rc > 1e-12))
        throw SingularStringError(
            fmt::format("string linear system condition > 1e12 (rcond {:.3e})", rc));
    t = lu.solve(Mat::Identity(n2, n2));
    s = a * t;
}

CMat combine(const Mat& x, int n, double s_left, double s_right) {
    const cplx i(0.0, 1.0);
    return x.topLeftCorner(n, n).cast<cplx>() +
           i * s_right * x.topRightCorner(n, n).cast<cplx>() +
           i * s_left * x.bottomLeftCorner(n, n).cast<cplx>() -
           s_left * s_right * x.bottomRightCorner(n, n).cast<cplx>();
}

} // namespace detail

double string_expectation(const Mat& gamma_m, const StringMask& s) {
    return detail::string_core(gamma_m, s.theta).p;
}

cplx string_hopping_expectation(const Mat& gamma_m, const StringMask& s) {
    const int n = static_cast<int>(s.theta.size());
    const auto core = detail::string_core(gamma_m, s.theta);
    Mat t, sm;
    detail::string_t_s(gamma_m, s.theta, t, sm);
    const Vec th = detail::doubled(s.theta);
    const CMat e = detail::combine(sm * th.asDiagonal(), n, +1.0, -1.0);
    return -0.25 * core.p * e(s.m, s.n);
}

cplx string_pairing_expectation(const Mat& gamma_m, const StringMask& s) {
    const int n = static_cast<int>(s.theta.size());
    const auto core = detail::string_core(gamma_m, s.theta);
    Mat t, sm;
    detail::string_t_s(gamma_m, s.theta, t, sm);
    const CMat e = detail::combine(sm, n, +1.0, +1.0);
    return -0.25 * core.p * e(s.n, s.m);
}

StringGradient string_hopping_gradient(const Mat& gamma_m, const StringMask& s) {
    const int n = static_cast<int>(s.theta.size());
    const int n2 = 2 * n;
    const auto core = detail::string_core(gamma_m, s.theta);
    Mat t, sm;
    detail::string_t_s(gamma_m, s.theta, t, sm);
    const Vec th = detail::doubled(s.theta);
    const CMat e = detail::combine(sm * th.asDiagonal(), n, +1.0, -1.0);

    StringGradient out;
    out.p = core.p;
    out.hop = -0.25 * core.p * e(s.m, s.n);

    const Vec sq = (1.0 - th.array()).sqrt().matrix();
    Eigen::PartialPivLU<Mat> lu(core.gamma_f_string);
    if (!(lu.rcond() > 1e-12))
        throw SingularStringError("string covariance singular in gradient");
    const Mat gfi = lu.solve(Mat::Identity(n2, n2));
    const Mat b = sq.asDiagonal() * gfi * sq.asDiagonal();

    CVec en = CVec::Zero(n2);
    en(s.n) = cplx(1.0, 0.0);
    en(n + s.n) = cplx(0.0, -1.0);
    const CVec u = t.cast<cplx>() * (th.cast<cplx>().asDiagonal() * en);
    const CVec v = t.col(s.m).cast<cplx>() + cplx(0.0, 1.0) * t.col(n + s.m).cast<cplx>();

    out.grad = -0.5 * out.hop * b.cast<cplx>() +
               cplx(0.0, 0.25) * core.p * (v * u.transpose());
    return out;
}

TwoPoint two_point_functions(const Mat& gamma_m) {
    const int n = static_cast<int>(gamma_m.rows()) / 2;
    const Mat al = gamma_m.topLeftCorner(n, n);
    const Mat be = gamma_m.topRightCorner(n, n);
    const Mat de = gamma_m.bottomRightCorner(n, n);
    const Mat bs = be + be.transpose();
    const Mat ba = be - be.transpose();
    const Mat apd = al + de;
    const Mat dma = de - al;
    const cplx i(0.0, 1.0);
    TwoPoint tp;
    tp.ccd = 0.25 * ((2.0 * Mat::Identity(n, n) - bs).cast<cplx>() - i * apd.cast<cplx>());
    tp.cdc = 0.25 * ((2.0 * Mat::Identity(n, n) + bs).cast<cplx>() - i * apd.cast<cplx>());
    tp.cc = 0.25 * (ba.cast<cplx>() + i * dma.cast<cplx>());
    tp.cdcd = 0.25 * ((-ba).cast<cplx>() + i * dma.cast<cplx>());
    return tp;
}

Mat purify(const Mat& gamma_m) {
    Eigen::SelfAdjointEigenSolver<CMat> es(cplx(0.0, 1.0) * gamma_m.cast<cplx>());
    const Vec mu = es.eigenvalues();
    const double dist = (mu.array().square() - 1.0).abs().maxCoeff();
    if (dist >= 0.1)
        throw TooMixedError(
            fmt::format("purify: covariance too mixed (max |mu^2 - 1| = {:.3e})", dist));
    Eigen::JacobiSVD<Mat> svd(gamma_m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Mat g = svd.matrixU() * svd.matrixV().transpose();
    return 0.5 * (g - g.transpose());
}

} // namespace ion::gaussian
