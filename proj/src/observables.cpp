#include "ion/observables.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <json.hpp>

#include "ion/errors.hpp"
#include "ion/gaussian.hpp"
#include "ion/json_util.hpp"

namespace ion {

std::string to_string(PhaseLabel label) {
    switch (label) {
        case PhaseLabel::Normal: return "NORMAL";
        case PhaseLabel::SC: return "SC";
        case PhaseLabel::CDW: return "CDW";
        case PhaseLabel::PCDW: return "pCDW";
        case PhaseLabel::PS: return "PS";
    }
    return "NORMAL";
}

PhaseLabel phase_label_from_string(const std::string& name) {
    if (name == "NORMAL") return PhaseLabel::Normal;
    if (name == "SC") return PhaseLabel::SC;
    if (name == "CDW") return PhaseLabel::CDW;
    if (name == "pCDW") return PhaseLabel::PCDW;
    if (name == "PS") return PhaseLabel::PS;
    throw ConfigError("unknown phase label: " + name);
}

std::string ObservableRecord::to_json() const {
    nlohmann::json j;
    j["schema"] = "observable-record/1";
    j["energy"] = energy;
    j["free_energy"] = free_energy;
    j["filling"] = filling;
    j["spin_profile"] = jsonu::from_vec(spin_profile);
    j["o_cdw"] = o_cdw;
    j["sc_profile"] = jsonu::from_vec(sc_profile);
    j["alpha"] = alpha;
    j["alpha_r2"] = alpha_r2;
    j["pi"] = jsonu::from_mat(pi);
    j["displacement"] = jsonu::from_vec(displacement);
    j["n_c"] = n_c;
    j["n_s"] = n_s;
    j["s_q"] = jsonu::from_vec(s_q);
    j["m_ph"] = m_ph;
    j["w_z"] = w_z;
    j["has_domain_wall"] = has_domain_wall;
    return j.dump();
}

ObservableRecord ObservableRecord::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw StoreError(std::string("record parse failure: ") + e.what());
    }
    if (!j.contains("schema") || j["schema"] != "observable-record/1")
        throw StoreError("unknown observable-record schema");
    ObservableRecord r;
    r.energy = jsonu::to_double_or_nan(j.at("energy"));
    r.free_energy = jsonu::to_double_or_nan(j.at("free_energy"));
    r.filling = jsonu::to_double_or_nan(j.at("filling"));
    r.spin_profile = jsonu::to_vec(j.at("spin_profile"));
    r.o_cdw = jsonu::to_double_or_nan(j.at("o_cdw"));
    r.sc_profile = jsonu::to_vec(j.at("sc_profile"));
    r.alpha = jsonu::to_double_or_nan(j.at("alpha"));
    r.alpha_r2 = jsonu::to_double_or_nan(j.at("alpha_r2"));
    r.pi = jsonu::to_mat(j.at("pi"));
    r.displacement = jsonu::to_vec(j.at("displacement"));
    r.n_c = jsonu::to_double_or_nan(j.at("n_c"));
    r.n_s = jsonu::to_double_or_nan(j.at("n_s"));
    r.s_q = jsonu::to_vec(j.at("s_q"));
    r.m_ph = jsonu::to_double_or_nan(j.at("m_ph"));
    r.w_z = jsonu::to_double_or_nan(j.at("w_z"));
    r.has_domain_wall = j.at("has_domain_wall").get<bool>();
    return r;
}

} // namespace ion

namespace ion::observables {

namespace {

constexpr double kFitFloor = 1e-12;

Vec site_density(const ngs::NGSState& s) {
    return gaussian::two_point_functions(s.fermions.gamma_m).cdc.diagonal().real();
}

// Density covariance D_nm = Re(<c_n^dag c_m><c_m^dag c_n> + pairing channel);
// same matrix that drives the lambda flow.
Mat density_covariance(const gaussian::TwoPoint& tp) {
    return (tp.cdc.array() * tp.ccd.array() +
            tp.cdcd.array() * tp.cc.transpose().array())
        .real()
        .matrix();
}

int reference_site(int n) { return n / 4; }

double block_mean(const Vec& v, int lo, int hi) {
    return v.segment(lo, hi - lo).mean();
}

// Staggered density order of profile[lo, hi) measured about the block mean
// (global sublattice phase; the mean subtraction removes the odd-length bias
// of a uniform block).
double block_cdw(const Vec& density, int lo, int hi) {
    const double mean = block_mean(density, lo, hi);
    double acc = 0.0;
    for (int n = lo; n < hi; ++n)
        acc += ((n % 2 == 0) ? 1.0 : -1.0) * (density(n) - mean);
    return std::abs(acc) / (hi - lo);
}

struct TwoBlockFit {
    int cut = 1;           // block A = [0, cut), block B = [cut, N)
    double residual = 0.0; // RMS of profile minus blockwise means
    double m_a = 0.0, m_b = 0.0;
};

TwoBlockFit two_block_fit(const Vec& profile) {
    const int n = static_cast<int>(profile.size());
    // PS / pCDW blocks are macroscopic (roughly half the chain each); keep
    // both blocks at least N/4 long so a degenerate one-site "block" cannot
    // masquerade as the polarized half of a staggered profile.
    int lo = std::max(1, n / 4);
    if (lo > n - lo) lo = 1;
    TwoBlockFit best;
    bool have = false;
    for (int c = lo; c <= n - lo; ++c) {
        const double ma = block_mean(profile, 0, c);
        const double mb = block_mean(profile, c, n);
        double ss = 0.0;
        for (int i = 0; i < n; ++i) {
            const double d = profile(i) - (i < c ? ma : mb);
            ss += d * d;
        }
        const double res = std::sqrt(ss / n);
        if (!have || res < best.residual) {
            best = {c, res, ma, mb};
            have = true;
        }
    }
    return best;
}

} // namespace

double cdw_order(const ngs::NGSState& s) {
    const Vec nbar = site_density(s);
    double acc = 0.0;
    for (int n = 0; n < nbar.size(); ++n)
        acc += ((n % 2 == 0) ? 1.0 : -1.0) * nbar(n);
    return acc / static_cast<double>(nbar.size());
}

cplx sc_correlator(const ngs::NGSState& s, int n, int m) {
    if (n == m) return 0.0;
    const int sites = s.n_sites();
    const Mat gp = s.bosons.gamma_b.bottomRightCorner(sites, sites);
    const Vec wbar = s.lambda.col(n) + s.lambda.col(m);
    const double dress = std::exp(-0.5 * wbar.dot(gp * wbar));
    const auto mask = gaussian::StringMask::between(sites, n, m);
    const cplx pair = gaussian::string_pairing_expectation(s.fermions.gamma_m, mask);
    return dress * pair * (m > n ? 1.0 : -1.0);
}

Vec sc_profile(const ngs::NGSState& s) {
    const int n = s.n_sites();
    const int i = reference_site(n);
    Vec prof = Vec::Zero(n / 2);
    for (int delta = 1; delta <= n / 2; ++delta) {
        const int j = i + delta;
        if (j >= n) {
            prof(delta - 1) = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        try {
            prof(delta - 1) = std::abs(sc_correlator(s, i, j));
        } catch (const SingularStringError&) {
            prof(delta - 1) = std::numeric_limits<double>::quiet_NaN();
        }
    }
    return prof;
}

DecayFit sc_decay_fit(const Vec& profile) {
    // profile(k) = |O_SC(k + 1)|; fit window delta in [2, N/4] with
    // N/2 = profile.size().
    const int n = 2 * static_cast<int>(profile.size());
    std::vector<double> xs, ys;
    for (int delta = 2; delta <= n / 4; ++delta) {
        const double v = profile(delta - 1);
        if (!(v >= kFitFloor)) continue;  // drops NaNs and dead entries
        xs.push_back(std::log(static_cast<double>(delta)));
        ys.push_back(std::log(v));
    }
    if (xs.size() < 2)
        throw FitDegenerateError(
            "anomalous correlator below 1e-12 across the fit window");
    const double np = static_cast<double>(xs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        sx += xs[k];
        sy += ys[k];
        sxx += xs[k] * xs[k];
        sxy += xs[k] * ys[k];
    }
    const double denom = np * sxx - sx * sx;
    if (denom <= 0.0)
        throw FitDegenerateError("fit window has no spread in log(delta)");
    const double slope = (np * sxy - sx * sy) / denom;
    const double intercept = (sy - slope * sx) / np;
    double ss_res = 0.0, ss_tot = 0.0;
    const double ymean = sy / np;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const double e = ys[k] - (intercept + slope * xs[k]);
        ss_res += e * e;
        const double d = ys[k] - ymean;
        ss_tot += d * d;
    }
    DecayFit fit;
    fit.alpha = -slope;
    fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
    return fit;
}

DecayFit sc_decay_fit(const ngs::NGSState& s) { return sc_decay_fit(sc_profile(s)); }

double sc_decay_exponent(const ngs::NGSState& s) { return sc_decay_fit(s).alpha; }

Mat spin_phonon_correlator(const ngs::NGSState& s) {
    const auto tp = gaussian::two_point_functions(s.fermions.gamma_m);
    return -4.0 * (density_covariance(tp) * s.lambda.transpose());
}

Vec phonon_displacement(const ngs::NGSState& s) {
    return s.bosons.delta_r - 2.0 * (s.lambda * site_density(s));
}

PhononNumbers phonon_numbers(const Model& model, const ngs::NGSState& s) {
    const int n = s.n_sites();
    const Vec& om = model.mode_frequencies();
    const Mat& mm = model.mode_vectors();
    const auto tp = gaussian::two_point_functions(s.fermions.gamma_m);
    const Mat d = density_covariance(tp);
    const Vec rbar = s.bosons.delta_r - 2.0 * (s.lambda * tp.cdc.diagonal().real());

    PhononNumbers out;
    const Vec rt = mm.transpose() * rbar;
    out.n_c = om.dot(rt.cwiseProduct(rt)) / (4.0 * n);

    const Mat gx_phys = s.bosons.gamma_b.topLeftCorner(n, n) +
                        4.0 * (s.lambda * d * s.lambda.transpose());
    const Mat gp = s.bosons.gamma_b.bottomRightCorner(n, n);
    out.n_s = ((om.asDiagonal() * (mm.transpose() * gx_phys * mm)).trace() +
               (om.cwiseInverse().asDiagonal() * (mm.transpose() * gp * mm)).trace()) /
                  (4.0 * n) -
              0.5;
    return out;
}

Vec structure_factor(const ngs::NGSState& s) {
    const int n = s.n_sites();
    const auto tp = gaussian::two_point_functions(s.fermions.gamma_m);
    const Mat d = density_covariance(tp);
    const Vec sz = 2.0 * tp.cdc.diagonal().real() - Vec::Ones(n);
    const Mat zz = 4.0 * d + sz * sz.transpose();
    Vec sq(n);
    for (int k = 0; k < n; ++k) {
        const double q = 2.0 * M_PI * k / n;
        double acc = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) acc += zz(i, j) * std::cos(q * std::abs(i - j));
        sq(k) = acc / n;
    }
    return sq;
}

double staggered_phonon(const ngs::NGSState& s) {
    const Vec rbar = phonon_displacement(s);
    double acc = 0.0;
    for (int n = 0; n < rbar.size(); ++n)
        acc += ((n % 2 == 0) ? 1.0 : -1.0) * rbar(n);
    return acc / static_cast<double>(rbar.size());
}

double domain_wall_width(const Vec& spin_profile) {
    const int n = static_cast<int>(spin_profile.size());
    // Locate the sign changes of the profile; a phase-separated profile has
    // exactly one.
    int crossings = 0;
    int cross_at = -1;
    int last_sign = 0;
    int last_idx = -1;
    for (int i = 0; i < n; ++i) {
        const double p = spin_profile(i);
        const int sgn = (p > 0.0) - (p < 0.0);
        if (sgn == 0) continue;
        if (last_sign != 0 && sgn != last_sign) {
            ++crossings;
            cross_at = last_idx;
        }
        last_sign = sgn;
        last_idx = i;
    }
    if (crossings != 1)
        throw NoDomainWallError(
            "profile has " + std::to_string(crossings) + " sign changes, need exactly 1");
    // Linear interpolation of the zero crossing between the bracketing
    // nonzero entries (sites with an exactly-zero profile sit inside the wall).
    int a = cross_at;
    int b = cross_at + 1;
    while (spin_profile(b) == 0.0) ++b;
    const double pa = spin_profile(a);
    const double pb = spin_profile(b);
    const double z_c = a + (b - a) * pa / (pa - pb);
    double w = 0.0;
    for (int i = 0; i < n; ++i) {
        const double weight = 1.0 - std::min(1.0, std::abs(spin_profile(i)));
        w += 0.5 * (i - z_c) * (i - z_c) * weight;
    }
    return w;
}

double domain_wall_width(const ngs::NGSState& s) {
    const Vec sz = 2.0 * site_density(s) - Vec::Ones(s.n_sites());
    return domain_wall_width(sz);
}

PhaseLabel classify_phase(const ObservableRecord& rec, PhaseScores* scores,
                          const PhaseThresholds& thr) {
    const Vec& profile = rec.spin_profile;
    const int n = static_cast<int>(profile.size());
    const Vec density = 0.5 * (profile + Vec::Ones(n));
    const auto fit = two_block_fit(profile);
    const double o_a = block_cdw(density, 0, fit.cut);
    const double o_b = block_cdw(density, fit.cut, n);
    const double contrast = std::abs(fit.m_a - fit.m_b);
    const double eps = 1e-12;

    PhaseScores sc;
    sc.ps = std::min({thr.block_residual / std::max(fit.residual, eps),
                      thr.block_cdw_max / std::max(std::max(o_a, o_b), eps),
                      contrast / thr.block_contrast});
    // pCDW: either block may be the polarized one.
    const double pcdw_ab = std::min({std::abs(fit.m_a) / thr.polarized_min,
                                     o_b / thr.cdw_threshold,
                                     contrast / thr.block_contrast});
    const double pcdw_ba = std::min({std::abs(fit.m_b) / thr.polarized_min,
                                     o_a / thr.cdw_threshold,
                                     contrast / thr.block_contrast});
    sc.pcdw = std::max(pcdw_ab, pcdw_ba);
    sc.cdw = std::abs(rec.o_cdw) / thr.cdw_threshold;
    if (std::isfinite(rec.alpha) && std::isfinite(rec.alpha_r2) && rec.alpha > 0.0)
        sc.sc = std::min(thr.sc_alpha_max / rec.alpha, rec.alpha_r2 / thr.sc_r2_min);
    else if (std::isfinite(rec.alpha_r2) && rec.alpha == 0.0)
        sc.sc = rec.alpha_r2 / thr.sc_r2_min;
    if (scores != nullptr) *scores = sc;

    // Decision-tree order; a branch passes with score > 1.
    const std::pair<double, PhaseLabel> branches[] = {
        {sc.ps, PhaseLabel::PS},
        {sc.pcdw, PhaseLabel::PCDW},
        {sc.cdw, PhaseLabel::CDW},
        {sc.sc, PhaseLabel::SC},
    };
    std::vector<std::pair<double, PhaseLabel>> passing;
    for (const auto& b : branches)
        if (b.first > 1.0) passing.push_back(b);
    if (passing.empty()) return PhaseLabel::Normal;
    if (passing.size() > 1) {
        auto sorted = passing;
        std::sort(sorted.begin(), sorted.end(),
                  [](const auto& a, const auto& b) { return a.first > b.first; });
        if (sorted[0].first - sorted[1].first <=
            thr.ambiguity_margin * sorted[0].first)
            throw AmbiguousPhaseError("labels " + to_string(sorted[0].second) + " and " +
                                      to_string(sorted[1].second) +
                                      " score within the ambiguity margin");
    }
    return passing.front().second;
}

ObservableRecord record(const Model& model, const ngs::NGSState& s) {
    const int n = s.n_sites();
    const double temperature = model.params().temperature;
    ObservableRecord rec;
    rec.free_energy = ngs::free_energy(model, s, ExecPolicy::Parallel);
    double entropy = 0.0;
    if (temperature > 0.0)
        entropy = ngs::fermion_entropy(s.fermions.gamma_m) +
                  ngs::boson_entropy(s.bosons.gamma_b);
    rec.energy = rec.free_energy + temperature * entropy;

    const Vec nbar = site_density(s);
    rec.filling = nbar.mean();
    rec.spin_profile = 2.0 * nbar - Vec::Ones(n);
    rec.o_cdw = cdw_order(s);
    rec.sc_profile = sc_profile(s);
    try {
        const DecayFit fit = sc_decay_fit(rec.sc_profile);
        rec.alpha = fit.alpha;
        rec.alpha_r2 = fit.r2;
    } catch (const FitDegenerateError&) {
        rec.alpha = std::numeric_limits<double>::quiet_NaN();
        rec.alpha_r2 = std::numeric_limits<double>::quiet_NaN();
    }
    rec.pi = spin_phonon_correlator(s);
    rec.displacement = phonon_displacement(s);
    const PhononNumbers ph = phonon_numbers(model, s);
    rec.n_c = ph.n_c;
    rec.n_s = ph.n_s;
    rec.s_q = structure_factor(s);
    rec.m_ph = staggered_phonon(s);
    try {
        rec.w_z = domain_wall_width(rec.spin_profile);
        rec.has_domain_wall = true;
    } catch (const NoDomainWallError&) {
        rec.w_z = std::numeric_limits<double>::quiet_NaN();
        rec.has_domain_wall = false;
    }
    return rec;
}

} // namespace ion::observables
