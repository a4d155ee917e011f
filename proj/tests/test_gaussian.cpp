#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "ion/errors.hpp"
#include "ion/gaussian.hpp"

using namespace ion;
using namespace ion::gaussian;

namespace {

// ---- dense Fock-space oracle (JW convention: bit l occupied, sign from
// ---- bits below l), used to validate every string formula at N <= 5.
std::vector<CMat> fock_annihilators(int n) {
    const int dim = 1 << n;
    std::vector<CMat> cs;
    for (int l = 0; l < n; ++l) {
        CMat c = CMat::Zero(dim, dim);
        for (int s = 0; s < dim; ++s) {
            if ((s >> l) & 1) {
                const int low = s & ((1 << l) - 1);
                const double sgn = (std::popcount(static_cast<unsigned>(low)) % 2) ? -1.0 : 1.0;
                c(s ^ (1 << l), s) = sgn;
            }
        }
        cs.push_back(c);
    }
    return cs;
}

CMat fock_string_op(int n, int a, int b) {
    const int dim = 1 << n;
    const int lo = std::min(a, b), hi = std::max(a, b);
    CMat d = CMat::Zero(dim, dim);
    for (int s = 0; s < dim; ++s) {
        int cnt = 0;
        for (int l = lo + 1; l < hi; ++l) cnt += (s >> l) & 1;
        d(s, s) = (cnt % 2) ? -1.0 : 1.0;
    }
    return d;
}

std::vector<CMat> majorana_ops(const std::vector<CMat>& cs) {
    std::vector<CMat> a;
    for (const auto& c : cs) a.push_back(c + c.adjoint());
    for (const auto& c : cs) a.push_back(cplx(0, -1) * (c - c.adjoint()));
    return a;
}

Mat gamma_from_rho(const CMat& rho, const std::vector<CMat>& a) {
    const int n2 = static_cast<int>(a.size());
    Mat g(n2, n2);
    for (int i = 0; i < n2; ++i)
        for (int j = 0; j < n2; ++j) {
            const cplx v = cplx(0, 1) * ((rho * a[i] * a[j]).trace() - (i == j ? 1.0 : 0.0));
            REQUIRE(std::abs(v.imag()) < 1e-10);
            g(i, j) = v.real();
        }
    return g;
}

struct DenseState {
    CMat rho;
    std::vector<CMat> cs;
    Mat gm;
};

DenseState random_gaussian_state(int n, std::mt19937_64& rng, bool mixed) {
    auto cs = fock_annihilators(n);
    std::normal_distribution<double> nd;
    Mat h(n, n), d(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            h(i, j) = nd(rng);
            d(i, j) = nd(rng);
        }
    h = 0.5 * (h + h.transpose()).eval();
    d = 0.5 * (d - d.transpose()).eval();
    const int dim = 1 << n;
    CMat ham = CMat::Zero(dim, dim);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            ham += h(i, j) * (cs[i].adjoint() * cs[j]) +
                   0.5 * d(i, j) * (cs[i].adjoint() * cs[j].adjoint()) +
                   0.5 * d(i, j) * (cs[j] * cs[i]);
    Eigen::SelfAdjointEigenSolver<CMat> es(ham);
    CMat rho;
    if (mixed) {
        Vec w = (-(es.eigenvalues().array() - es.eigenvalues().minCoeff())).exp();
        rho = es.eigenvectors() * w.asDiagonal() * es.eigenvectors().adjoint() / w.sum();
    } else {
        CVec psi = es.eigenvectors().col(0);
        rho = psi * psi.adjoint();
    }
    DenseState st{rho, cs, gamma_from_rho(rho, majorana_ops(cs))};
    return st;
}

} // namespace

TEST_CASE("pfaffian reproduces the deterministic 6x6 golden value") {
    Mat a = Mat::Zero(6, 6);
    for (int i = 0; i < 6; ++i)
        for (int j = i + 1; j < 6; ++j) {
            a(i, j) = std::sin(i + 1.0) + std::cos(2.0 * (j + 1.0));
            a(j, i) = -a(i, j);
        }
    const double pf = pfaffian(a);
    CHECK(pf == doctest::Approx(-0.25189481040629741).epsilon(1e-13));
    CHECK(pf * pf == doctest::Approx(0.063450995509624561).epsilon(1e-12));
}

TEST_CASE("pfaffian rejects odd dimensions and non-antisymmetric input") {
    CHECK_THROWS_AS(pfaffian(Mat::Zero(5, 5)), OddDimensionError);
    Mat a = Mat::Zero(4, 4);
    a(0, 1) = 1.0;
    a(1, 0) = -1.0;
    a(2, 3) = 0.5;
    a(3, 2) = -0.5;
    CHECK_NOTHROW(pfaffian(a));
    Mat bad = a;
    bad(0, 1) += 1e-6;
    CHECK_THROWS_AS(pfaffian(bad), NonAntisymmetricError);
    Mat ok = a;
    ok(0, 1) += 1e-12; // within tolerance: symmetrized away
    CHECK_NOTHROW(pfaffian(ok));
}

TEST_CASE("pfaffian squared equals determinant up to 96x96") {
    std::mt19937_64 rng(20250815);
    std::normal_distribution<double> nd;
    for (int n = 2; n <= 96; n += 2) {
        Mat a(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) a(i, j) = nd(rng);
        a = 0.5 * (a - a.transpose()).eval();
        const double pf = pfaffian(a);
        const double det = a.determinant();
        CHECK(std::abs(pf * pf - det) <= 1e-8 * std::max(1.0, std::abs(det)));
    }
}

namespace {
// Deterministic 4-site reference state: ground/thermal covariances of the
// quadratic Hamiltonian h_ij = cos(1 + 0.3(i+j)), d_ij = 0.4 sin(i-j).
Mat reference_gm_pure() {
    const double be[4][4] = {
        {-0.70533990839643956, -0.30662178441544125, -0.23495824287890982,
         +0.5943679996840745},
        {+0.70549003968856727, -0.37000784733231729, -0.28046528700215018,
         +0.5354598207144301},
        {+0.044287387244765108, +0.86895318244548214, -0.3212575950729728,
         +0.37383492567820698},
        {+0.053085260238205048, +0.11831162644585579, +0.87345715664707124,
         +0.46931536273085256}};
    Mat gm = Mat::Zero(8, 8);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            gm(i, 4 + j) = be[i][j];
            gm(4 + j, i) = -be[i][j];
        }
    return gm;
}

Mat reference_gm_mixed() {
    const double be[4][4] = {
        {-0.31029114504645722, -0.31133046268480224, -0.13276655061610981,
         +0.23598828950498502},
        {+0.041502481759977949, +0.0015250676043082612, -0.032266295951168047,
         +0.13803872594205316},
        {+0.18342625998947382, +0.28557268259618585, +0.23041361842896912,
         +0.19798776667658291},
        {+0.12023816822577363, +0.37831967191066596, +0.49495571166378849,
         +0.43505857011007221}};
    Mat gm = Mat::Zero(8, 8);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            gm(i, 4 + j) = be[i][j];
            gm(4 + j, i) = -be[i][j];
        }
    return gm;
}
} // namespace

TEST_CASE("string expectations match reference values (pure state)") {
    const Mat gm = reference_gm_pure();
    auto s03 = StringMask::between(4, 0, 3);
    CHECK(string_expectation(gm, s03) == doctest::Approx(0.362579034898112).epsilon(1e-12));
    const cplx hop03 = string_hopping_expectation(gm, s03);
    CHECK(hop03.real() == doctest::Approx(0.16186331498056991).epsilon(1e-11));
    CHECK(std::abs(hop03.imag()) < 1e-12);
    const cplx pair03 = string_pairing_expectation(gm, s03);
    CHECK(pair03.real() == doctest::Approx(0.13532068486146734).epsilon(1e-11));

    auto s02 = StringMask::between(4, 0, 2);
    CHECK(string_expectation(gm, s02) == doctest::Approx(0.3700078473323174).epsilon(1e-12));
    CHECK(string_hopping_expectation(gm, s02).real() ==
          doctest::Approx(0.15712121727398934).epsilon(1e-11));
    CHECK(string_pairing_expectation(gm, s02).real() ==
          doctest::Approx(0.15759103072069988).epsilon(1e-11));

    auto s13 = StringMask::between(4, 1, 3);
    CHECK(string_expectation(gm, s13) == doctest::Approx(0.32125759507297286).epsilon(1e-12));
    CHECK(string_hopping_expectation(gm, s13).real() ==
          doctest::Approx(0.2160436747796449).epsilon(1e-11));
    CHECK(string_pairing_expectation(gm, s13).real() ==
          doctest::Approx(0.18245726751006625).epsilon(1e-11));

    // reversed pair: <P c^dag c> conjugates, <P c c> flips sign
    auto s30 = StringMask::between(4, 3, 0);
    CHECK(string_hopping_expectation(gm, s30).real() ==
          doctest::Approx(0.16186331498056988).epsilon(1e-11));
    CHECK(string_pairing_expectation(gm, s30).real() ==
          doctest::Approx(-0.13532068486146737).epsilon(1e-11));
}

TEST_CASE("string expectations match reference values (thermal state)") {
    const Mat gm = reference_gm_mixed();
    auto s03 = StringMask::between(4, 0, 3);
    CHECK(string_expectation(gm, s03) == doctest::Approx(0.00956576903727498).epsilon(1e-9));
    CHECK(string_hopping_expectation(gm, s03).real() ==
          doctest::Approx(0.00249398813482606).epsilon(1e-9));
    CHECK(string_pairing_expectation(gm, s03).real() ==
          doctest::Approx(-0.0019834559125723435).epsilon(1e-9));
    auto s02 = StringMask::between(4, 0, 2);
    CHECK(string_expectation(gm, s02) == doctest::Approx(-0.0015250676043082614).epsilon(1e-9));
    CHECK(string_hopping_expectation(gm, s02).real() ==
          doctest::Approx(0.0054550491041468769).epsilon(1e-9));
    auto s13 = StringMask::between(4, 1, 3);
    CHECK(string_expectation(gm, s13) == doctest::Approx(-0.23041361842896915).epsilon(1e-9));
    CHECK(string_hopping_expectation(gm, s13).real() ==
          doctest::Approx(0.0039953729041011651).epsilon(1e-9));
    CHECK(string_pairing_expectation(gm, s13).real() ==
          doctest::Approx(0.023092540005066518).epsilon(1e-9));
}

TEST_CASE("string expectations agree with the dense Fock oracle (N <= 5)") {
    std::mt19937_64 rng(7);
    for (int n : {2, 3, 4, 5}) {
        for (bool mixed : {false, true}) {
            auto st = random_gaussian_state(n, rng, mixed);
            for (int a = 0; a < n; ++a)
                for (int b = 0; b < n; ++b) {
                    if (a == b) continue;
                    auto mask = StringMask::between(n, a, b);
                    const CMat pop = fock_string_op(n, a, b);
                    const cplx p_dense = (st.rho * pop).trace();
                    const cplx hop_dense =
                        (st.rho * pop * st.cs[a].adjoint() * st.cs[b]).trace();
                    const cplx pair_dense = (st.rho * pop * st.cs[b] * st.cs[a]).trace();
                    CHECK(std::abs(string_expectation(st.gm, mask) - p_dense) < 1e-8);
                    CHECK(std::abs(string_hopping_expectation(st.gm, mask) - hop_dense) < 1e-8);
                    CHECK(std::abs(string_pairing_expectation(st.gm, mask) - pair_dense) < 1e-8);
                    CHECK(std::abs(string_expectation(st.gm, mask)) <= 1.0 + 1e-10);
                }
        }
    }
}

TEST_CASE("hopping expectation obeys the conjugation symmetry") {
    std::mt19937_64 rng(11);
    auto st = random_gaussian_state(4, rng, true);
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) {
            const cplx fwd = string_hopping_expectation(st.gm, StringMask::between(4, a, b));
            const cplx bwd = string_hopping_expectation(st.gm, StringMask::between(4, b, a));
            CHECK(std::abs(fwd - std::conj(bwd)) < 1e-12);
        }
}

TEST_CASE("two-point functions match the dense oracle") {
    std::mt19937_64 rng(13);
    for (bool mixed : {false, true}) {
        auto st = random_gaussian_state(4, rng, mixed);
        auto tp = two_point_functions(st.gm);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                const cplx cdc = (st.rho * st.cs[i].adjoint() * st.cs[j]).trace();
                const cplx ccd = (st.rho * st.cs[i] * st.cs[j].adjoint()).trace();
                const cplx cc = (st.rho * st.cs[i] * st.cs[j]).trace();
                const cplx cdcd = (st.rho * st.cs[i].adjoint() * st.cs[j].adjoint()).trace();
                CHECK(std::abs(tp.cdc(i, j) - cdc) < 1e-10);
                CHECK(std::abs(tp.ccd(i, j) - ccd) < 1e-10);
                CHECK(std::abs(tp.cc(i, j) - cc) < 1e-10);
                CHECK(std::abs(tp.cdcd(i, j) - cdcd) < 1e-10);
            }
    }
}

TEST_CASE("string hopping gradient matches finite differences") {
    const Mat gm0 = reference_gm_mixed();
    const auto mask = StringMask::between(4, 0, 3);
    const auto g = string_hopping_gradient(gm0, mask);
    CHECK(std::abs(g.hop - string_hopping_expectation(gm0, mask)) < 1e-14);

    const double eps = 1e-6;
    double max_rel = 0.0;
    for (int k = 0; k < 8; ++k)
        for (int l = k + 1; l < 8; ++l) {
            Mat gp = gm0, gmn = gm0;
            gp(k, l) += eps;
            gp(l, k) -= eps;
            gmn(k, l) -= eps;
            gmn(l, k) += eps;
            const cplx fd = (string_hopping_expectation(gp, mask) -
                             string_hopping_expectation(gmn, mask)) /
                            (2.0 * eps);
            const cplx an = (g.grad - g.grad.transpose()).eval()(k, l);
            max_rel = std::max(max_rel, std::abs(fd - an) / std::max(1.0, std::abs(fd)));
        }
    CHECK(max_rel < 1e-5);
}

TEST_CASE("purify restores a perturbed pure covariance") {
    const Mat gm = reference_gm_pure();
    Mat noisy = 0.995 * gm;
    const Mat restored = purify(noisy);
    const Mat sq = restored * restored + Mat::Identity(8, 8);
    CHECK(sq.cwiseAbs().maxCoeff() < 1e-13);
    // idempotent
    CHECK((purify(restored) - restored).cwiseAbs().maxCoeff() < 1e-13);
    // the reference pure state is its own purification
    CHECK((purify(gm) - gm).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("purify rejects heavily mixed covariances") {
    CHECK_THROWS_AS(purify(0.5 * reference_gm_pure()), TooMixedError);
    CHECK_THROWS_AS(purify(reference_gm_mixed()), TooMixedError);
}

TEST_CASE("vacuum covariance is pure with empty occupation") {
    auto f = FermionCovariance::vacuum(3);
    CHECK(f.is_pure());
    auto tp = two_point_functions(f.gamma_m);
    CHECK(tp.cdc.cwiseAbs().maxCoeff() < 1e-14);
    CHECK((tp.ccd - CMat::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-14);
    // Nambu covariance has unit trace blocks
    CMat gf = f.gamma_f();
    CHECK(gf.rows() == 6);
    CHECK(std::abs(gf(0, 0) - 1.0) < 1e-14);
}
