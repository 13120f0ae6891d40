#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <numbers>

#include "sawkit/com_sim.hpp"
#include "sawkit/random.hpp"

#include "golden/reference_values.inc"

using namespace sawkit;

namespace {

DeviceGeometry nominal_geometry() {
    DeviceGeometry g;
    g.pitch_p = 500e-9;
    g.electrode_width_a = 250e-9;
    g.aperture_w = 150e-6;
    g.cavity_length_L = 1840.65e-6;
    g.mirror_periods_Ng = 500;
    g.saw_velocity_v = 5600.0;
    g.reflectivity_rs = 0.013;
    return g;
}

}  // namespace

TEST_CASE("resonance frequency is v over twice the pitch") {
    REQUIRE(com::resonance_frequency(nominal_geometry()) == 5.6e9);
    DeviceGeometry unit;
    unit.pitch_p = 1.0;
    unit.electrode_width_a = 0.25;
    unit.aperture_w = 1.0;
    unit.cavity_length_L = 1.0;
    unit.mirror_periods_Ng = 0;
    unit.saw_velocity_v = 2.0;
    unit.reflectivity_rs = 0.013;
    REQUIRE(com::resonance_frequency(unit) == 1.0);
    // Inverse use: a measured 5.66 GHz at p = 500 nm implies v = 5660 m/s.
    DeviceGeometry g = nominal_geometry();
    g.saw_velocity_v = 2.0 * g.pitch_p * 5.66e9;
    REQUIRE(g.saw_velocity_v == Catch::Approx(5660.0).epsilon(1e-12));
    REQUIRE(com::resonance_frequency(g) == Catch::Approx(5.66e9).epsilon(1e-12));
}

TEST_CASE("mirror reflectivity saturates towards unity") {
    REQUIRE(com::mirror_reflectivity(0.013, 0) == 0.0);
    REQUIRE(com::mirror_reflectivity(0.013, 450) ==
            Catch::Approx(kTanh585).epsilon(1e-15));
    REQUIRE(com::mirror_reflectivity(0.013, 450) >= 0.9999);
    REQUIRE(com::mirror_reflectivity(0.013, 500) ==
            Catch::Approx(kTanh65).epsilon(1e-15));
    // Monotone in both arguments, strictly below 1 even for huge mirrors.
    double prev = 0.0;
    for (int ng : {10, 100, 450, 1000, 100000}) {
        const double g = com::mirror_reflectivity(0.013, ng);
        REQUIRE(g > prev);
        REQUIRE(g < 1.0);
        prev = g;
    }
    REQUIRE(com::mirror_reflectivity(0.9, 1000000) < 1.0);
    REQUIRE(com::mirror_reflectivity(0.02, 450) > com::mirror_reflectivity(0.013, 450));
    REQUIRE_THROWS_AS(com::mirror_reflectivity(0.0, 100), DomainError);
    REQUIRE_THROWS_AS(com::mirror_reflectivity(1.0, 100), DomainError);
    REQUIRE_THROWS_AS(com::mirror_reflectivity(0.013, -1), DomainError);
}

TEST_CASE("free spectral range follows the inverse-length law") {
    DeviceGeometry g = nominal_geometry();
    const double f0 = 5.66e9;
    // Short-cavity limit: df/f0 -> rs.
    g.cavity_length_L = 1e-9;
    REQUIRE(com::free_spectral_range(g, f0) ==
            Catch::Approx(f0 * g.reflectivity_rs).epsilon(1e-4));
    // The frozen length references reproduce the target spacings.
    g.cavity_length_L = kCavityLengthAtFsr34p42MHz;
    REQUIRE(com::free_spectral_range(g, f0) == Catch::Approx(34.42e6).epsilon(1e-12));
    REQUIRE(g.cavity_length_L == Catch::Approx(44e-6).epsilon(0.02));
    g.cavity_length_L = kCavityLengthAtFsr3p03MHz;
    REQUIRE(com::free_spectral_range(g, f0) == Catch::Approx(3.03e6).epsilon(1e-12));
    REQUIRE(g.cavity_length_L == Catch::Approx(0.90e-3).epsilon(0.01));
    // Strictly decreasing in L.
    double prev = 1e300;
    for (double length : {50e-6, 200e-6, 800e-6, 3200e-6}) {
        g.cavity_length_L = length;
        const double fsr = com::free_spectral_range(g, f0);
        REQUIRE(fsr < prev);
        prev = fsr;
    }
}

TEST_CASE("rs recovery from noiseless fsr samples is exact") {
    const double rs_true = 0.013, f0 = 5.66e9, p = 500e-9;
    std::vector<com::FsrSample> samples;
    for (int i = 0; i < 8; ++i) {
        const double length = 40e-6 * std::pow(2e-3 / 40e-6, i / 7.0);
        samples.push_back({length, f0 / (length / p + 1.0 / rs_true)});
    }
    const com::RsEstimate est = com::fit_rs_from_fsr(samples, f0, p);
    REQUIRE(std::abs(est.rs - rs_true) < 1e-10 * rs_true);
}

TEST_CASE("rs recovery tolerates multiplicative fsr noise") {
    const double rs_true = 0.013, f0 = 5.66e9, p = 500e-9;
    GaussianSampler noise(314159);
    std::vector<com::FsrSample> samples;
    for (int i = 0; i < 8; ++i) {
        const double length = 40e-6 * std::pow(2e-3 / 40e-6, i / 7.0);
        const double fsr = f0 / (length / p + 1.0 / rs_true);
        samples.push_back({length, fsr * (1.0 + 0.02 * noise())});
    }
    const com::RsEstimate est = com::fit_rs_from_fsr(samples, f0, p);
    REQUIRE(est.rs == Catch::Approx(rs_true).epsilon(0.10));
    REQUIRE(est.sigma > 0.0);
}

TEST_CASE("rs fit rejects unidentifiable sample sets") {
    const double f0 = 5.66e9, p = 500e-9;
    REQUIRE_THROWS_AS(com::fit_rs_from_fsr({{1e-4, 3e6}}, f0, p),
                      IdentifiabilityError);
    REQUIRE_THROWS_AS(com::fit_rs_from_fsr({{1e-4, 3e6}, {1e-4, 3.1e6}}, f0, p),
                      IdentifiabilityError);
    REQUIRE_THROWS_AS(com::fit_rs_from_fsr({{1e-4, 3e6}, {2e-4, -1.0}}, f0, p),
                      DomainError);
}

TEST_CASE("diffraction q scales with the squared aperture-to-wavelength ratio") {
    DeviceGeometry g = nominal_geometry();
    g.aperture_w = 2.0 * g.pitch_p;  // w = lambda
    REQUIRE(com::diffraction_q(g, 1.0) == Catch::Approx(1.0).epsilon(1e-15));
    g.aperture_w = 4.0 * g.pitch_p;
    REQUIRE(com::diffraction_q(g, 1.0) == Catch::Approx(4.0).epsilon(1e-15));
    g = nominal_geometry();  // w = 150 um, lambda = 1 um
    REQUIRE(com::diffraction_q(g, 1.0) == Catch::Approx(2.25e4).epsilon(1e-12));
    REQUIRE(com::diffraction_q(g, 2.5) == Catch::Approx(2.5 * 2.25e4).epsilon(1e-12));
    REQUIRE_THROWS_AS(com::diffraction_q(g, 0.0), DomainError);
}

TEST_CASE("mirror leakage q matches the closed form and grows with Ng") {
    DeviceGeometry g = nominal_geometry();
    const double periods = g.cavity_length_L / g.pitch_p + 1.0 / g.reflectivity_rs;
    const double gamma = std::tanh(g.reflectivity_rs * g.mirror_periods_Ng);
    const double direct = std::numbers::pi * periods / (1.0 - gamma * gamma);
    REQUIRE(com::leakage_q(g) == Catch::Approx(direct).epsilon(1e-9));
    double prev = 0.0;
    for (int ng : {100, 200, 450, 500}) {
        g.mirror_periods_Ng = ng;
        const double q = com::leakage_q(g);
        REQUIRE(q > prev);
        prev = q;
    }
}

TEST_CASE("mode comb fills the stopband with evenly spaced modes") {
    DeviceGeometry g = nominal_geometry();
    g.saw_velocity_v = 5660.0;  // f0 = 5.66 GHz
    g.cavity_length_L = kCavityLengthAtFsr3p03MHz;
    const com::ModeComb comb = com::mode_comb(g, 4.4e4, 8.8e4);
    REQUIRE_NOTHROW(comb.validate());
    REQUIRE(comb.modes.size() == 15);
    REQUIRE(comb.stopband_center == Catch::Approx(5.66e9).epsilon(1e-12));
    REQUIRE(comb.stopband_halfwidth ==
            Catch::Approx(5.66e9 * 0.013 / std::numbers::pi).epsilon(1e-12));
    REQUIRE(comb.modes[7].frequency == Catch::Approx(5.66e9).epsilon(1e-12));
    for (std::size_t i = 1; i < comb.modes.size(); ++i)
        REQUIRE(comb.modes[i].frequency - comb.modes[i - 1].frequency ==
                Catch::Approx(comb.fsr).epsilon(1e-12));
    // Leakage folding trims the internal Q below the requested value.
    const double qi_expect = 1.0 / (1.0 / 4.4e4 + 1.0 / com::leakage_q(g));
    REQUIRE(comb.modes[0].q_i == Catch::Approx(qi_expect).epsilon(1e-12));
    REQUIRE(comb.modes[0].q_i < 4.4e4);
    REQUIRE(comb.modes[0].q_c == 8.8e4);
}

TEST_CASE("mode comb count matches brute-force stopband arithmetic") {
    DeviceGeometry g = nominal_geometry();
    for (double length : {50e-6, 300e-6, 900e-6, 1840.65e-6}) {
        for (int ng : {150, 450, 800}) {
            g.cavity_length_L = length;
            g.mirror_periods_Ng = ng;
            const com::ModeComb comb = com::mode_comb(g, 4e4, 4e4);
            const double hw = comb.stopband_halfwidth;
            int count = 0;
            for (int k = -10000; k <= 10000; ++k)
                if (std::abs(k * comb.fsr) <= hw * (1.0 + 1e-12)) ++count;
            REQUIRE(comb.modes.size() == std::size_t(count));
        }
    }
}

TEST_CASE("mode comb degenerate cases") {
    // FSR wider than the whole stopband leaves only the center mode.
    DeviceGeometry g = nominal_geometry();
    g.cavity_length_L = 1e-9;
    const com::ModeComb one = com::mode_comb(g, 4e4, 4e4);
    REQUIRE(one.modes.size() == 1);
    REQUIRE(one.modes[0].frequency == one.stopband_center);
    // No mirror periods means nothing is confined.
    g = nominal_geometry();
    g.mirror_periods_Ng = 0;
    REQUIRE(com::mode_comb(g, 4e4, 4e4).modes.empty());
    REQUIRE_THROWS_AS(com::mode_comb(nominal_geometry(), -1.0, 4e4), DomainError);
}

TEST_CASE("mode comb validation catches malformed combs") {
    com::ModeComb comb = com::mode_comb(nominal_geometry(), 4e4, 4e4);
    com::ModeComb bad = comb;
    bad.modes[3].frequency += 0.5 * bad.fsr;  // uneven spacing
    REQUIRE_THROWS_AS(bad.validate(), DomainError);
    bad = comb;
    bad.stopband_halfwidth /= 100.0;  // modes now outside the stopband
    REQUIRE_THROWS_AS(bad.validate(), DomainError);
    bad = comb;
    bad.modes[0].q_i = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), DomainError);
}

TEST_CASE("critical coupling traces a unit-diameter circle through the origin") {
    const double f0 = 5.6e9, qi = 4e4, qc = 4e4;
    com::SynthesisSpec spec;
    spec.mode_comb.stopband_center = f0;
    spec.mode_comb.stopband_halfwidth = f0 * 0.013 / std::numbers::pi;
    spec.mode_comb.fsr = 3e6;
    spec.mode_comb.modes = {{f0, qi, qc}};
    const double lw = f0 / spec.mode_comb.modes[0].q_l();
    spec.frequency_grid = {f0 - 10.0 * lw, f0 + 10.0 * lw, 1001};
    const ComplexTrace trace = com::synthesize_s11(spec, 1);
    REQUIRE(trace.size() == 1001);
    // Center point of the symmetric grid sits exactly on resonance.
    REQUIRE(trace.frequencies[500] == Catch::Approx(f0).epsilon(1e-12));
    REQUIRE(std::abs(trace.s11[500]) < 1e-9);
    // Every point lies on the circle centered at 1/2 with radius 1/2.
    for (const auto& s : trace.s11)
        REQUIRE(std::abs(s - std::complex<double>(0.5, 0.0)) ==
                Catch::Approx(0.5).margin(1e-9));
}

TEST_CASE("empty comb synthesizes the pure background") {
    com::SynthesisSpec spec;
    spec.mode_comb.stopband_center = 5.6e9;
    spec.mode_comb.stopband_halfwidth = 2e7;
    spec.mode_comb.fsr = 3e6;
    spec.frequency_grid = {5.59e9, 5.61e9, 11};
    SECTION("unit background gives s11 == 1") {
        const ComplexTrace trace = com::synthesize_s11(spec, 7);
        for (const auto& s : trace.s11) REQUIRE(s == std::complex<double>(1.0, 0.0));
    }
    SECTION("amplitude, phase, and cable delay are applied verbatim") {
        spec.background_amplitude = 0.8;
        spec.background_phase = 0.3;
        spec.cable_delay_tau = 50e-9;
        const ComplexTrace trace = com::synthesize_s11(spec, 7);
        for (std::size_t i = 0; i < trace.size(); ++i) {
            const double arg = 0.3 - 2.0 * std::numbers::pi * trace.frequencies[i] * 50e-9;
            const std::complex<double> want =
                0.8 * std::complex<double>(std::cos(arg), std::sin(arg));
            REQUIRE(std::abs(trace.s11[i] - want) < 1e-15);
        }
    }
}

TEST_CASE("synthesis is deterministic per seed and dips at every mode") {
    DeviceGeometry g = nominal_geometry();
    g.saw_velocity_v = 5660.0;
    g.cavity_length_L = kCavityLengthAtFsr3p03MHz;
    com::SynthesisSpec spec;
    spec.mode_comb = com::mode_comb(g, 4.4e4, 8.8e4);
    const double f0 = spec.mode_comb.stopband_center;
    const double hw = spec.mode_comb.stopband_halfwidth;
    spec.frequency_grid = {f0 - 1.1 * hw, f0 + 1.1 * hw, 4001};
    spec.noise_sigma = 0.001;
    const ComplexTrace a = com::synthesize_s11(spec, 42);
    const ComplexTrace b = com::synthesize_s11(spec, 42);
    REQUIRE(a.s11 == b.s11);
    REQUIRE(a.frequencies == b.frequencies);
    const ComplexTrace c = com::synthesize_s11(spec, 43);
    REQUIRE(a.s11 != c.s11);
    // |S11| near each mode drops well below the off-mode background.
    const double df = (a.frequencies.back() - a.frequencies.front()) / 4000.0;
    for (const com::Mode& m : spec.mode_comb.modes) {
        const auto idx = std::size_t((m.frequency - a.frequencies.front()) / df + 0.5);
        double local_min = 1.0;
        for (std::size_t i = idx > 5 ? idx - 5 : 0; i < std::min(idx + 6, a.size()); ++i)
            local_min = std::min(local_min, std::abs(a.s11[i]));
        REQUIRE(local_min < 0.75);
    }
}

TEST_CASE("synthesis spec validation") {
    com::SynthesisSpec spec;
    spec.mode_comb.stopband_center = 5.6e9;
    spec.mode_comb.stopband_halfwidth = 2e7;
    spec.mode_comb.fsr = 3e6;
    spec.frequency_grid = {5.59e9, 5.61e9, 11};
    REQUIRE_NOTHROW(spec.validate());
    com::SynthesisSpec bad = spec;
    bad.frequency_grid.points = 2;
    REQUIRE_THROWS_AS(bad.validate(), DomainError);
    bad = spec;
    bad.frequency_grid.stop = bad.frequency_grid.start;
    REQUIRE_THROWS_AS(bad.validate(), DomainError);
    bad = spec;
    bad.noise_sigma = -0.1;
    REQUIRE_THROWS_AS(bad.validate(), DomainError);
    bad = spec;
    bad.background_amplitude = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), DomainError);
}
