#pragma once
#include "ion/types.hpp"

namespace ion::gaussian {

// Majorana ordering A = (c_1+c_1^dag, ..., -i(c_1-c_1^dag), ...):
// x-block first, then p-block.  Gamma_m = i(<A A^T> - 1) is real
// antisymmetric, 2N x 2N; pure states satisfy Gamma_m^2 = -1.
struct FermionCovariance {
    Mat gamma_m;

    int n_sites() const { return static_cast<int>(gamma_m.rows()) / 2; }
    // Nambu covariance [[<c c^dag>, <c c>], [<c^dag c^dag>, <c^dag c>]].
    CMat gamma_f() const;
    bool is_pure(double tol = 1e-8) const;

    static FermionCovariance vacuum(int n);
};

// Quadrature covariance Gamma_b = <{R, R^T}>/2 - <R><R>^T with
// R = (rbar_1..N, pbar_1..N); vacuum = identity.  delta_r = <R>.
struct BosonCovariance {
    Mat gamma_b;
    Vec delta_r;

    int n_sites() const { return static_cast<int>(gamma_b.rows()) / 2; }
    static BosonCovariance vacuum(int n);
};

// Parity string P_nm = exp(i pi sum_{l strictly between n,m} n_l) as a
// +-1 site mask (+1 off the string, -1 on the interior).
struct StringMask {
    int n = 0, m = 0;
    Vec theta;

    static StringMask between(int n_sites, int n, int m);
};

// Pfaffian via Parlett-Reid tridiagonalization with partial pivoting.
// Requires even dimension (OddDimensionError) and antisymmetry within
// 1e-10 relative (NonAntisymmetricError); input is antisymmetrized before
// elimination.
double pfaffian(const Mat& a);

// Symplectic-form block matrix [[0, I], [-I, 0]] of size 2n.
Mat symplectic_form(int n);

// <P_nm> for the state Gamma_m.
double string_expectation(const Mat& gamma_m, const StringMask& s);
// <P_nm c_n^dag c_m>; SingularStringError when the string linear system has
// condition number > 1e12 (recoverable; callers retry/reject the step).
cplx string_hopping_expectation(const Mat& gamma_m, const StringMask& s);
// <P_nm c_m c_n>.
cplx string_pairing_expectation(const Mat& gamma_m, const StringMask& s);

struct StringGradient {
    double p = 0.0;          // <P_nm>
    cplx hop;                // <P_nm c_n^dag c_m>
    CMat grad;               // d hop / d Gamma_m as a free matrix
};
// Analytic gradient of the string hopping expectation with respect to
// Gamma_m (free-matrix convention: the flow derivative for the
// antisymmetric coordinate (k,l) is (grad - grad^T)(k,l)).
StringGradient string_hopping_gradient(const Mat& gamma_m, const StringMask& s);

struct TwoPoint {
    CMat ccd;   // <c_n c_m^dag>
    CMat cdc;   // <c_n^dag c_m>
    CMat cc;    // <c_n c_m>
    CMat cdcd;  // <c_n^dag c_m^dag>
};
TwoPoint two_point_functions(const Mat& gamma_m);

// Nearest antisymmetric orthogonal matrix (polar factor): projects a
// near-pure covariance back onto the pure manifold.  TooMixedError if
// max |eig(i Gamma_m)^2 - 1| >= 0.1.
Mat purify(const Mat& gamma_m);

// Internal building blocks, exposed for tests and the solver hot path.
namespace detail {
struct StringCore {
    Mat gamma_f_string;  // scaled covariance entering the pfaffian
    double p = 0.0;
};
StringCore string_core(const Mat& gamma_m, const Vec& theta);
// T = [1 + (1-Theta)/2 (Sigma Gamma_m - 1)]^{-1}, S = (Sigma Gamma_m - 1) T.
void string_t_s(const Mat& gamma_m, const Vec& theta, Mat& t, Mat& s);
// (1, sL*i) X (1, sR*i)^T contraction over x/p blocks -> N x N complex.
CMat combine(const Mat& x, int n, double s_left, double s_right);
} // namespace detail

} // namespace ion::gaussian
