#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "sawkit/loss_models.hpp"
#include "sawkit/random.hpp"

#include "golden/reference_values.inc"

using namespace sawkit;
using loss::TlsLossParams;

namespace {

TlsLossParams reference_params() {
    TlsLossParams p;
    p.q_tls = 2.23e5;
    p.q_rl = 4.74e4;
    p.n_c = 5.0;
    p.beta = 1.0;
    p.f0 = 5.5976e9;
    p.mu = 0.0;
    return p;
}

}  // namespace

TEST_CASE("thermal tanh factor has the right limits") {
    const double f0 = 5.6e9;
    REQUIRE(loss::tls_tanh_factor(f0, 1e-3) == Catch::Approx(1.0).epsilon(1e-9));
    const double x = kConst.h * f0 / (2.0 * kConst.k_B * 1e3);
    const double series = x - x * x * x / 3.0;
    REQUIRE(loss::tls_tanh_factor(f0, 1e3) == Catch::Approx(series).epsilon(1e-9));
    REQUIRE_THROWS_AS(loss::tls_tanh_factor(f0, 0.0), DomainError);
}

TEST_CASE("power model saturates to the residual q at high phonon number") {
    const TlsLossParams p = reference_params();
    REQUIRE(loss::qi_power_model(1e30, 0.010, p) ==
            Catch::Approx(4.74e4).epsilon(1e-9));
}

TEST_CASE("power model matches the zero-phonon reference value") {
    const TlsLossParams p = reference_params();
    REQUIRE(loss::qi_power_model(0.0, 0.010, p) ==
            Catch::Approx(kQiZeroPhonon10mK).epsilon(1e-12));
}

TEST_CASE("tls loss drops by exactly sqrt(2) at the critical phonon number") {
    TlsLossParams p = reference_params();
    p.beta = 1.0;
    // Cold enough that the tanh factor is exactly 1 in double precision.
    const double qi = loss::qi_power_model(p.n_c, 1e-4, p);
    const double tls = 1.0 / qi - 1.0 / p.q_rl;
    REQUIRE(tls * p.q_tls * std::sqrt(2.0) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("power model is monotone in n and bounded by the residual q") {
    const TlsLossParams p = reference_params();
    double prev = 0.0;
    for (int k = 0; k <= 120; ++k) {
        const double n = std::pow(10.0, -2.0 + 0.1 * k);
        const double qi = loss::qi_power_model(n, 0.010, p);
        REQUIRE(qi >= prev);
        REQUIRE(qi < p.q_rl);
        prev = qi;
    }
}

TEST_CASE("critical phonon number follows the temperature power law") {
    TlsLossParams warm = reference_params();
    warm.mu = 1.5;
    TlsLossParams equivalent = reference_params();
    const double temperature = 0.080;
    equivalent.n_c = warm.n_c * std::pow(temperature / warm.t_ref, warm.mu);
    REQUIRE(loss::qi_power_model(3.0, temperature, warm) ==
            Catch::Approx(loss::qi_power_model(3.0, temperature, equivalent))
                .epsilon(1e-12));
}

TEST_CASE("power sweep fit recovers noiseless parameters to 1e-6") {
    const TlsLossParams truth = reference_params();
    std::vector<loss::PowerPoint> data;
    for (int k = 0; k < 20; ++k) {
        const double n = std::pow(10.0, -1.0 + 7.0 * k / 19.0);
        data.push_back({n, loss::qi_power_model(n, 0.010, truth)});
    }
    const loss::PowerSweepFit fit = loss::fit_power_sweep(data, 0.010, truth.f0);
    REQUIRE(fit.params.q_tls == Catch::Approx(truth.q_tls).epsilon(1e-6));
    REQUIRE(fit.params.q_rl == Catch::Approx(truth.q_rl).epsilon(1e-6));
    REQUIRE(fit.params.n_c == Catch::Approx(truth.n_c).epsilon(1e-6));
    REQUIRE(fit.params.beta == Catch::Approx(truth.beta).epsilon(1e-6));
    REQUIRE(fit.residual_rms < 1e-9);
}

TEST_CASE("power sweep fit holds five percent through 3 percent noise") {
    const TlsLossParams truth = reference_params();
    std::vector<double> err_qtls, err_qrl, err_nc, err_beta;
    for (std::uint64_t seed = 0; seed < 11; ++seed) {
        GaussianSampler noise(task_seed(40, seed));
        std::vector<loss::PowerPoint> data;
        // Density chosen so the knee parameters are resolvable at this noise:
        // the Cramer-Rao bound gives sigma(ln n_c) ~ 0.83 * sqrt(20 / N).
        const int points = 10000;
        for (int k = 0; k < points; ++k) {
            const double n = std::pow(10.0, -1.0 + 7.0 * k / (points - 1));
            const double qi = loss::qi_power_model(n, 0.010, truth) *
                              (1.0 + 0.03 * noise());
            data.push_back({n, qi});
        }
        const loss::PowerSweepFit fit = loss::fit_power_sweep(data, 0.010, truth.f0);
        err_qtls.push_back(std::abs(fit.params.q_tls / truth.q_tls - 1.0));
        err_qrl.push_back(std::abs(fit.params.q_rl / truth.q_rl - 1.0));
        err_nc.push_back(std::abs(fit.params.n_c / truth.n_c - 1.0));
        err_beta.push_back(std::abs(fit.params.beta / truth.beta - 1.0));
    }
    const auto median = [](std::vector<double>& v) {
        std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
        return v[v.size() / 2];
    };
    REQUIRE(median(err_qtls) < 0.05);
    REQUIRE(median(err_qrl) < 0.05);
    REQUIRE(median(err_nc) < 0.05);
    REQUIRE(median(err_beta) < 0.05);
}

TEST_CASE("power sweep fit at sparse sampling stays within the information limit") {
    // 20 points across 7 decades localize the knee to about one ln-unit at
    // 3% noise (Cramer-Rao); the loose knee tolerances reflect that limit,
    // not fit quality. The plateau parameters stay sharp regardless.
    const TlsLossParams truth = reference_params();
    std::vector<double> err_qtls, err_qrl, err_lnnc, err_beta;
    int failures = 0;
    for (std::uint64_t seed = 0; seed < 11; ++seed) {
        GaussianSampler noise(task_seed(40, seed));
        std::vector<loss::PowerPoint> data;
        for (int k = 0; k < 20; ++k) {
            const double n = std::pow(10.0, -1.0 + 7.0 * k / 19.0);
            const double qi = loss::qi_power_model(n, 0.010, truth) *
                              (1.0 + 0.03 * noise());
            data.push_back({n, qi});
        }
        try {
            const loss::PowerSweepFit fit =
                loss::fit_power_sweep(data, 0.010, truth.f0);
            err_qtls.push_back(std::abs(fit.params.q_tls / truth.q_tls - 1.0));
            err_qrl.push_back(std::abs(fit.params.q_rl / truth.q_rl - 1.0));
            err_lnnc.push_back(std::abs(std::log(fit.params.n_c / truth.n_c)));
            err_beta.push_back(std::abs(fit.params.beta - truth.beta));
        } catch (const IdentifiabilityError&) {
            ++failures;
        }
    }
    REQUIRE(failures <= 2);
    const auto median = [](std::vector<double>& v) {
        std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
        return v[v.size() / 2];
    };
    REQUIRE(median(err_qtls) < 0.30);
    REQUIRE(median(err_qrl) < 0.05);
    REQUIRE(median(err_lnnc) < 1.2);
    REQUIRE(median(err_beta) < 0.55);
}

TEST_CASE("power sweep fit flags data that never reach the saturation knee") {
    TlsLossParams truth = reference_params();
    truth.n_c = 50.0;
    std::vector<loss::PowerPoint> data;
    for (int k = 0; k < 16; ++k) {
        const double n = std::pow(10.0, -2.3 + 3.0 * k / 15.0);  // up to n_c/10
        data.push_back({n, loss::qi_power_model(n, 0.010, truth)});
    }
    bool flagged = false;
    try {
        const loss::PowerSweepFit fit = loss::fit_power_sweep(data, 0.010, truth.f0);
        flagged = !fit.warnings.empty() || fit.sigma_n_c > fit.params.n_c;
    } catch (const IdentifiabilityError&) {
        flagged = true;
    }
    REQUIRE(flagged);
}

TEST_CASE("power sweep fit validates its inputs") {
    std::vector<loss::PowerPoint> few = {{1.0, 4e4}, {10.0, 4.1e4}, {100.0, 4.2e4}};
    REQUIRE_THROWS_AS(loss::fit_power_sweep(few, 0.010, 5.6e9), DomainError);
    std::vector<loss::PowerPoint> narrow;
    for (int k = 0; k < 8; ++k) narrow.push_back({1.0 + k, 4e4});
    REQUIRE_THROWS_AS(loss::fit_power_sweep(narrow, 0.010, 5.6e9), DomainError);
}

TEST_CASE("frequency shift vanishes without tls and matches the golden value") {
    REQUIRE(std::abs(loss::freq_shift_temperature(0.2, 5.5976e9, 1e30)) < 1e-25);
    REQUIRE(loss::freq_shift_temperature(0.2, 5.5976e9, 2.23e5) ==
            Catch::Approx(kFreqShiftFrac200mK).epsilon(1e-12));
}

TEST_CASE("frequency shift is linear in the inverse tls q") {
    const double ref = loss::freq_shift_temperature(0.137, 5.6e9, 2.23e5) * 2.23e5;
    for (double q : {1e4, 7.7e5, 1e9})
        REQUIRE(loss::freq_shift_temperature(0.137, 5.6e9, q) * q ==
                Catch::Approx(ref).epsilon(1e-12));
}

TEST_CASE("frequency shift has exactly one interior extremum below 1 K") {
    const int n = 2400;
    std::vector<double> s(n);
    for (int i = 0; i < n; ++i) {
        const double t = 0.010 + (1.0 - 0.010) * i / (n - 1);
        s[i] = loss::freq_shift_temperature(t, 5.6e9, 2.23e5);
    }
    int sign_changes = 0;
    double prev_slope = s[1] - s[0];
    for (int i = 2; i < n; ++i) {
        const double slope = s[i] - s[i - 1];
        if (slope * prev_slope < 0.0) ++sign_changes;
        if (slope != 0.0) prev_slope = slope;
    }
    REQUIRE(sign_changes == 1);
}

namespace {

TlsLossParams temperature_truth() {
    TlsLossParams p = reference_params();
    p.mu = 1.5;
    return p;
}

std::vector<loss::QiTempPoint> make_qi_block(const TlsLossParams& truth) {
    // Power ceiling 1e6 keeps the saturation knee inside the sweep at every
    // temperature (the knee rides up as n_c * (T / 10 mK)^mu), and the span
    // down to 5 mK stretches the lever arm that pins mu.
    std::vector<loss::QiTempPoint> qi;
    for (int it = 0; it < 10; ++it) {
        const double t = 0.005 * std::pow(200.0, it / 9.0);  // 5 mK .. 1 K
        for (int in = 0; in < 12; ++in) {
            const double n = std::pow(10.0, -1.0 + 7.0 * in / 11.0);
            qi.push_back({t, n, loss::qi_power_model(n, t, truth)});
        }
    }
    return qi;
}

std::vector<loss::ShiftTempPoint> make_shift_block(const TlsLossParams& truth) {
    std::vector<loss::ShiftTempPoint> shift;
    for (int it = 0; it < 12; ++it) {
        const double t = 0.010 * std::pow(100.0, it / 11.0);
        shift.push_back(
            {t, truth.f0 * loss::freq_shift_temperature(t, truth.f0, truth.q_tls)});
    }
    return shift;
}

}  // namespace

TEST_CASE("temperature sweep joint fit recovers noiseless parameters") {
    const TlsLossParams truth = temperature_truth();
    const loss::TemperatureSweepFit fit = loss::fit_temperature_sweep(
        make_qi_block(truth), make_shift_block(truth), truth.f0);
    REQUIRE(fit.params.q_tls == Catch::Approx(truth.q_tls).epsilon(1e-5));
    REQUIRE(fit.params.q_rl == Catch::Approx(truth.q_rl).epsilon(1e-5));
    REQUIRE(fit.params.n_c == Catch::Approx(truth.n_c).epsilon(1e-5));
    REQUIRE(fit.params.beta == Catch::Approx(truth.beta).epsilon(1e-5));
    REQUIRE(fit.params.mu == Catch::Approx(truth.mu).epsilon(1e-5));
    REQUIRE(std::abs(fit.shift_offset_hz) < 1e-5 * std::abs(truth.f0 * kFreqShiftFrac200mK));
    REQUIRE(fit.warnings.empty());
}

TEST_CASE("temperature law produces the low-temperature dip only when mu > 0") {
    TlsLossParams dip = temperature_truth();  // mu = 1.5
    TlsLossParams flat = reference_params();  // mu = 0
    std::vector<double> qi_dip, qi_flat;
    for (int i = 0; i < 60; ++i) {
        const double t = 0.005 * std::pow(200.0, i / 59.0);  // 5 mK .. 1 K
        qi_dip.push_back(loss::qi_power_model(1.0, t, dip));
        qi_flat.push_back(loss::qi_power_model(1.0, t, flat));
    }
    const double interior_min = *std::min_element(qi_dip.begin() + 1, qi_dip.end() - 1);
    REQUIRE(interior_min < qi_dip.front());
    REQUIRE(interior_min < qi_dip.back());
    for (std::size_t i = 1; i < qi_flat.size(); ++i)
        REQUIRE(qi_flat[i] >= qi_flat[i - 1]);
}

TEST_CASE("temperature sweep fit recovers mu within 15 percent at 3 percent noise") {
    const TlsLossParams truth = temperature_truth();
    std::vector<double> mu_err;
    for (std::uint64_t seed = 0; seed < 7; ++seed) {
        GaussianSampler noise(task_seed(41, seed));
        std::vector<loss::QiTempPoint> qi = make_qi_block(truth);
        for (auto& d : qi) d.q_i *= 1.0 + 0.03 * noise();
        std::vector<loss::ShiftTempPoint> shift = make_shift_block(truth);
        double scale = 0.0;
        for (const auto& d : shift) scale = std::max(scale, std::abs(d.shift_hz));
        for (auto& d : shift) d.shift_hz += 0.03 * scale * noise();
        const loss::TemperatureSweepFit fit =
            loss::fit_temperature_sweep(qi, shift, truth.f0);
        mu_err.push_back(std::abs(fit.params.mu / truth.mu - 1.0));
    }
    std::nth_element(mu_err.begin(), mu_err.begin() + mu_err.size() / 2, mu_err.end());
    REQUIRE(mu_err[mu_err.size() / 2] < 0.15);
}

TEST_CASE("shift block alone pins the tls q within 5 percent at 3 percent noise") {
    const TlsLossParams truth = temperature_truth();
    std::vector<double> err;
    for (std::uint64_t seed = 0; seed < 7; ++seed) {
        GaussianSampler noise(task_seed(42, seed));
        std::vector<loss::ShiftTempPoint> shift = make_shift_block(truth);
        double scale = 0.0;
        for (const auto& d : shift) scale = std::max(scale, std::abs(d.shift_hz));
        for (auto& d : shift) d.shift_hz += 0.03 * scale * noise();
        const loss::TemperatureSweepFit fit =
            loss::fit_temperature_sweep(make_qi_block(truth), shift, truth.f0);
        err.push_back(std::abs(fit.q_tls_shift_only / truth.q_tls - 1.0));
    }
    std::nth_element(err.begin(), err.begin() + err.size() / 2, err.end());
    REQUIRE(err[err.size() / 2] < 0.05);
}

TEST_CASE("temperature sweep warns when the blocks disagree on the tls q") {
    TlsLossParams qi_truth = temperature_truth();
    TlsLossParams shift_truth = temperature_truth();
    shift_truth.q_tls = 5.0 * qi_truth.q_tls;
    const loss::TemperatureSweepFit fit = loss::fit_temperature_sweep(
        make_qi_block(qi_truth), make_shift_block(shift_truth), qi_truth.f0);
    REQUIRE_FALSE(fit.warnings.empty());
    REQUIRE(fit.q_tls_qi_only == Catch::Approx(qi_truth.q_tls).epsilon(0.02));
    REQUIRE(fit.q_tls_shift_only == Catch::Approx(shift_truth.q_tls).epsilon(0.02));
}

TEST_CASE("temperature sweep fit requires five distinct temperatures per block") {
    const TlsLossParams truth = temperature_truth();
    std::vector<loss::QiTempPoint> qi = make_qi_block(truth);
    std::vector<loss::ShiftTempPoint> shift = {
        {0.01, 0.0}, {0.02, -1.0}, {0.03, -2.0}, {0.04, -2.5}};
    REQUIRE_THROWS_AS(loss::fit_temperature_sweep(qi, shift, truth.f0), DomainError);
}

TEST_CASE("pump saturation has the definitional normalization") {
    const double omega0 = 40e3, t2 = 2.5e-6, t1 = 1.25e-6;
    const double nc_eff = loss::nc_effective(omega0, t2, t1);
    REQUIRE(nc_eff == Catch::Approx(kNcEffRef).epsilon(1e-12));
    REQUIRE(loss::pump_saturation(nc_eff, 0.0, omega0, t2, t1) ==
            Catch::Approx(1.0).epsilon(1e-12));
    // Even in detuning, halved at the Lorentzian half width.
    const double d = 31.0e3;
    REQUIRE(loss::pump_saturation(3.0, d, omega0, t2, t1) ==
            Catch::Approx(loss::pump_saturation(3.0, -d, omega0, t2, t1))
                .epsilon(1e-12));
    const double d_half = 1.0 / (loss::kTwoPi * t2);
    REQUIRE(loss::pump_saturation(3.0, d_half, omega0, t2, t1) ==
            Catch::Approx(0.5 * loss::pump_saturation(3.0, 0.0, omega0, t2, t1))
                .epsilon(1e-12));
    REQUIRE(loss::pump_saturation(3.0, 2e3, omega0, t2, t1) <
            loss::pump_saturation(3.0, 0.0, omega0, t2, t1));
}

TEST_CASE("pump saturation derivative matches central differences") {
    const double omega0 = 40e3, t2 = 2.5e-6, t1 = 1.25e-6, n = 7.0, d = 5e3;
    const double analytic =
        2.0 * loss::pump_saturation(n, d, omega0, t2, t1) / omega0;
    const double h = omega0 * 1e-6;
    const double fd = (loss::pump_saturation(n, d, omega0 + h, t2, t1) -
                       loss::pump_saturation(n, d, omega0 - h, t2, t1)) /
                      (2.0 * h);
    REQUIRE(fd == Catch::Approx(analytic).epsilon(1e-6));
}

TEST_CASE("two-tone forward model obeys the no-pump and saturation limits") {
    const TlsLossParams p = reference_params();
    const double omega0 = 40e3, t2 = 2.5e-6, t1 = 1.25e-6;
    const double f_pump = 5.63984e9, f_probe = f_pump - 9.15e6;
    const loss::TwoTonePrediction off =
        loss::twotone_forward(0.0, f_pump, f_probe, p, omega0, t2, t1);
    REQUIRE(off.q_i == Catch::Approx(loss::qi_power_model(0.0, p.t_ref, p))
                           .epsilon(1e-12));
    REQUIRE(off.shift_hz == 0.0);

    double prev = off.q_i;
    for (double n : {1.0, 1e2, 1e4, 1e6, 1e8}) {
        const double qi =
            loss::twotone_forward(n, f_pump, f_probe, p, omega0, t2, t1).q_i;
        REQUIRE(qi >= prev);
        prev = qi;
    }
    REQUIRE(loss::twotone_forward(1e12, f_pump, f_probe, p, omega0, t2, t1).q_i ==
            Catch::Approx(p.q_rl).epsilon(1e-3));
}

TEST_CASE("two-tone shift sign follows the pump side") {
    const TlsLossParams p = reference_params();
    const double omega0 = 40e3, t2 = 2.5e-6, t1 = 1.25e-6;
    const double f_probe = 5.63984e9;
    for (double n : {10.0, 1e3, 1e5}) {
        const double up = loss::twotone_forward(n, f_probe + 9.15e6, f_probe, p,
                                                omega0, t2, t1)
                              .shift_hz;
        const double down = loss::twotone_forward(n, f_probe - 9.15e6, f_probe, p,
                                                  omega0, t2, t1)
                                .shift_hz;
        REQUIRE(up > 0.0);
        REQUIRE(down < 0.0);
    }
}

TEST_CASE("two-tone shift is odd under reflecting the pump about the probe") {
    const TlsLossParams p = reference_params();
    const double omega0 = 40e3, t2 = 2.5e-6, t1 = 1.25e-6;
    const double f_probe = 5.63984e9;
    for (double detuning : {4.0e6, 18.3e6}) {
        const double plus = loss::twotone_forward(1e4, f_probe + detuning, f_probe,
                                                  p, omega0, t2, t1)
                                .shift_hz;
        const double minus = loss::twotone_forward(1e4, f_probe - detuning, f_probe,
                                                   p, omega0, t2, t1)
                                 .shift_hz;
        REQUIRE(plus == Catch::Approx(-minus).epsilon(1e-6));
    }
}

namespace {

std::vector<loss::TwoToneScan> make_twotone_scans(const TlsLossParams& p,
                                                  double f_pump, double omega0,
                                                  double t2, double ratio,
                                                  int points_per_scan,
                                                  const std::vector<double>& dets) {
    std::vector<loss::TwoToneScan> scans;
    for (double det : dets) {
        loss::TwoToneScan scan;
        scan.f_probe = f_pump + det;
        for (int k = 0; k < points_per_scan; ++k) {
            const double n = std::pow(10.0, 7.0 * k / (points_per_scan - 1));
            const loss::TwoTonePrediction pred = loss::twotone_forward(
                n, f_pump, scan.f_probe, p, omega0, t2, ratio * t2);
            scan.points.push_back({n, pred.q_i, pred.shift_hz});
        }
        scans.push_back(std::move(scan));
    }
    return scans;
}

}  // namespace

TEST_CASE("two-tone fit recovers noiseless rabi frequency and dephasing time") {
    const TlsLossParams p = reference_params();
    const double f_pump = 5.63984e9, omega0 = 40e3, t2 = 2.5e-6;
    const std::vector<loss::TwoToneScan> scans = make_twotone_scans(
        p, f_pump, omega0, t2, 0.5, 10, {-18.3e6, -9.15e6, 9.15e6, 18.3e6});
    const loss::TwoToneResult fit = loss::fit_twotone(scans, f_pump, p);
    REQUIRE(fit.omega0 == Catch::Approx(omega0).epsilon(1e-4));
    REQUIRE(fit.t2 == Catch::Approx(t2).epsilon(1e-4));
    REQUIRE(fit.kernel_amplitude == Catch::Approx(1.0).epsilon(1e-4));
    REQUIRE(fit.warnings.empty());
    REQUIRE(fit.per_probe.size() == 4);
    REQUIRE(fit.per_probe[0].qi_curve.size() == 10);
}

TEST_CASE("two-tone fit holds through 5 percent noise") {
    const TlsLossParams p = reference_params();
    const double f_pump = 5.63984e9, omega0 = 40e3, t2 = 2.5e-6;
    std::vector<double> err_omega0, err_t2;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        GaussianSampler noise(task_seed(43, seed));
        std::vector<loss::TwoToneScan> scans = make_twotone_scans(
            p, f_pump, omega0, t2, 0.5, 8, {-18.3e6, -9.15e6, 9.15e6, 18.3e6});
        for (auto& scan : scans)
            for (auto& pt : scan.points) {
                pt.q_i *= 1.0 + 0.05 * noise();
                pt.shift_hz *= 1.0 + 0.05 * noise();
            }
        const loss::TwoToneResult fit = loss::fit_twotone(scans, f_pump, p);
        err_omega0.push_back(std::abs(fit.omega0 / omega0 - 1.0));
        err_t2.push_back(std::abs(fit.t2 / t2 - 1.0));
    }
    const auto median = [](std::vector<double>& v) {
        std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
        return v[v.size() / 2];
    };
    REQUIRE(median(err_omega0) < 0.20);
    REQUIRE(median(err_t2) < 0.25);
}

TEST_CASE("two-tone fit stays inside the physical rabi frequency range") {
    const TlsLossParams p = reference_params();
    const double f_pump = 5.63984e9, t2 = 2.5e-6;
    for (double omega0 : {20e3, 38e3, 56e3}) {
        const std::vector<loss::TwoToneScan> scans =
            make_twotone_scans(p, f_pump, omega0, t2, 0.5, 8, {-9.15e6, 18.3e6});
        const loss::TwoToneResult fit = loss::fit_twotone(scans, f_pump, p);
        REQUIRE(fit.omega0 >= 20e3 * 0.999);
        REQUIRE(fit.omega0 <= 56e3 * 1.001);
    }
}

TEST_CASE("two-tone fit warns when every probe shares one detuning") {
    const TlsLossParams p = reference_params();
    const double f_pump = 5.63984e9, omega0 = 40e3, t2 = 2.5e-6;
    const std::vector<loss::TwoToneScan> scans =
        make_twotone_scans(p, f_pump, omega0, t2, 0.5, 8, {-9.15e6, 9.15e6});
    const loss::TwoToneResult fit = loss::fit_twotone(scans, f_pump, p);
    REQUIRE_FALSE(fit.warnings.empty());
    REQUIRE(fit.nc_eff > 0.0);
}

TEST_CASE("two-tone fit validates its inputs") {
    const TlsLossParams p = reference_params();
    REQUIRE_THROWS_AS(loss::fit_twotone({}, 5.6e9, p), DomainError);
    loss::TwoToneScan bad;
    bad.f_probe = 5.6e9;
    bad.points = {{1.0, 4e4, 0.0}, {10.0, 4.1e4, 1.0}};
    REQUIRE_THROWS_AS(loss::fit_twotone({bad}, 5.6e9, p), DomainError);
}
