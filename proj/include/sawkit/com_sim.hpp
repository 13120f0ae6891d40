#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "sawkit/domain.hpp"
#include "sawkit/errors.hpp"
#include "sawkit/fit_engine.hpp"
#include "sawkit/random.hpp"

// Forward model of a mirror-confined SAW resonator: mode frequencies, mirror
// confinement, free spectral range, diffraction-limited Q, and synthesis of
// multi-mode complex reflection traces.

namespace sawkit::com {

/// Fundamental SAW resonance f = v / (2 p).
inline double resonance_frequency(const DeviceGeometry& g) {
    g.validate();
    return g.saw_velocity_v / (2.0 * g.pitch_p);
}

/// Total mirror reflectivity magnitude tanh(rs * Ng); strictly below 1.
/// tanh rounds to 1.0 in double for arguments above ~19, so the result is
/// clamped one ulp below to keep the strict bound.
inline double mirror_reflectivity(double rs, int ng) {
    if (!(rs > 0.0) || !(rs < 1.0))
        throw DomainError("mirror_reflectivity: rs must lie in (0, 1)");
    if (ng < 0) throw DomainError("mirror_reflectivity: Ng must be >= 0");
    return std::min(std::tanh(rs * double(ng)), std::nextafter(1.0, 0.0));
}

/// Mode spacing of the confined cavity: df = f0 / (L/p + 1/rs). The 1/rs
/// term is the effective penetration depth into each mirror in units of p.
inline double free_spectral_range(const DeviceGeometry& g, double f0) {
    g.validate();
    if (!(f0 > 0.0)) throw DomainError("free_spectral_range: f0 must be > 0");
    return f0 / (g.cavity_length_L / g.pitch_p + 1.0 / g.reflectivity_rs);
}

/// Diffraction-limited quality factor Q_d = c_d (w / lambda)^2, lambda = 2p.
/// c_d is a calibration constant, not a predicted absolute scale.
inline double diffraction_q(const DeviceGeometry& g, double c_d) {
    g.validate();
    if (!(c_d > 0.0)) throw DomainError("diffraction_q: c_d must be > 0");
    const double lambda = 2.0 * g.pitch_p;
    const double ratio = g.aperture_w / lambda;
    return c_d * ratio * ratio;
}

/// Energy leakage through the mirrors expressed as a quality factor:
/// Q_leak = pi (L/p + 1/rs) / (1 - |Gamma|^2). Written with sech^2 so the
/// near-unity-reflectivity regime does not cancel catastrophically.
inline double leakage_q(const DeviceGeometry& g) {
    g.validate();
    const double periods = g.cavity_length_L / g.pitch_p + 1.0 / g.reflectivity_rs;
    const double c = std::cosh(g.reflectivity_rs * double(g.mirror_periods_Ng));
    return std::numbers::pi * periods * c * c;  // cosh^2 = 1/(1 - tanh^2)
}

// ---------------------------------------------------------------------------
// Mode comb
// ---------------------------------------------------------------------------

struct Mode {
    double frequency = 0.0;  // Hz
    double q_i = 0.0;
    double q_c = 0.0;

    double q_l() const { return 1.0 / (1.0 / q_i + 1.0 / q_c); }
};

/// The set of evenly spaced confined modes inside the mirror stopband.
struct ModeComb {
    std::vector<Mode> modes;          // ascending frequency; empty if unconfined
    double stopband_center = 0.0;     // Hz
    double stopband_halfwidth = 0.0;  // Hz; modes lie in center +- halfwidth
    double fsr = 0.0;                 // Hz

    void validate() const {
        if (!(stopband_center > 0.0) || !(fsr > 0.0) || !(stopband_halfwidth > 0.0))
            throw DomainError("ModeComb: center, fsr, halfwidth must be > 0");
        for (std::size_t i = 0; i < modes.size(); ++i) {
            const Mode& m = modes[i];
            if (!(m.frequency > 0.0) || !(m.q_i > 0.0) || !(m.q_c > 0.0))
                throw DomainError("ModeComb: mode frequency and Q values must be > 0");
            if (std::abs(m.frequency - stopband_center) >
                stopband_halfwidth * (1.0 + 1e-9))
                throw DomainError("ModeComb: mode outside the mirror stopband");
            if (i > 0) {
                const double spacing = m.frequency - modes[i - 1].frequency;
                if (std::abs(spacing - fsr) > 1e-9 * fsr)
                    throw DomainError("ModeComb: modes not evenly spaced by fsr");
            }
        }
    }
};

/// Builds the comb of confined modes: stopband center f0 = v/2p, half-width
/// f0 rs / pi, modes at f0 + k fsr for every integer k that stays inside the
/// stopband. Mirror leakage is folded into each mode's internal Q. A device
/// with no mirror periods confines nothing and yields an empty comb.
inline ModeComb mode_comb(const DeviceGeometry& g, double per_mode_qi,
                          double per_mode_qc) {
    g.validate();
    if (!(per_mode_qi > 0.0) || !(per_mode_qc > 0.0))
        throw DomainError("mode_comb: Q values must be > 0");
    ModeComb comb;
    comb.stopband_center = resonance_frequency(g);
    comb.stopband_halfwidth = comb.stopband_center * g.reflectivity_rs / std::numbers::pi;
    comb.fsr = free_spectral_range(g, comb.stopband_center);
    if (g.mirror_periods_Ng == 0) return comb;

    const double qi_eff = 1.0 / (1.0 / per_mode_qi + 1.0 / leakage_q(g));
    // Tolerate one ulp of accumulated error at the stopband edge.
    const int k_max =
        int(std::floor(comb.stopband_halfwidth / comb.fsr * (1.0 + 1e-12)));
    for (int k = -k_max; k <= k_max; ++k)
        comb.modes.push_back({comb.stopband_center + k * comb.fsr, qi_eff, per_mode_qc});
    return comb;
}

// ---------------------------------------------------------------------------
// rs estimation from FSR-vs-length samples
// ---------------------------------------------------------------------------

struct FsrSample {
    double cavity_length_L = 0.0;  // m
    double fsr = 0.0;              // Hz
};

struct RsEstimate {
    double rs = 0.0;
    double sigma = 0.0;  // one standard error
};

/// Least-squares |rs| from (L, fsr) samples under fsr = f0/(L/p + 1/rs).
/// Residuals are relative, so multiplicative fsr noise is homoskedastic.
inline RsEstimate fit_rs_from_fsr(const std::vector<FsrSample>& samples, double f0,
                                  double p) {
    if (!(f0 > 0.0) || !(p > 0.0))
        throw DomainError("fit_rs_from_fsr: f0 and p must be > 0");
    if (samples.size() < 2)
        throw IdentifiabilityError("fit_rs_from_fsr: need at least 2 samples");
    bool distinct = false;
    for (const auto& s : samples) {
        if (!(s.cavity_length_L > 0.0) || !(s.fsr > 0.0) || !(s.fsr < f0))
            throw DomainError("fit_rs_from_fsr: samples need 0 < fsr < f0 and L > 0");
        distinct = distinct || s.cavity_length_L != samples.front().cavity_length_L;
    }
    if (!distinct)
        throw IdentifiabilityError("fit_rs_from_fsr: all cavity lengths equal; "
                                   "rs is not identifiable");

    fit::FitProblem prob;
    prob.residual_fn = [&](const fit::Vector& q) -> fit::Vector {
        const double rs = q[0];
        fit::Vector r(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const double model = f0 / (samples[i].cavity_length_L / p + 1.0 / rs);
            r[Eigen::Index(i)] = model / samples[i].fsr - 1.0;
        }
        return r;
    };
    // Invert the first sample for a starting point.
    const double denom = f0 / samples.front().fsr - samples.front().cavity_length_L / p;
    double rs0 = denom > 0.0 ? 1.0 / denom : 0.01;
    rs0 = std::min(std::max(rs0, 1e-6), 0.5);
    prob.initial_params = fit::Vector::Constant(1, rs0);
    prob.lower_bounds = fit::Vector::Constant(1, 1e-9);
    prob.upper_bounds = fit::Vector::Constant(1, 1.0 - 1e-9);
    prob.tolerance_gradient = 1e-14;
    const fit::FitResult res = fit::levenberg_marquardt(prob);
    return {res.params[0], res.std_errors()[0]};
}

// ---------------------------------------------------------------------------
// Trace synthesis
// ---------------------------------------------------------------------------

struct FrequencyGrid {
    double start = 0.0;  // Hz
    double stop = 0.0;   // Hz
    int points = 0;
};

struct SynthesisSpec {
    ModeComb mode_comb;
    FrequencyGrid frequency_grid;
    double noise_sigma = 0.0;          // per-quadrature additive Gaussian std
    double cable_delay_tau = 0.0;      // s
    double background_amplitude = 1.0;
    double background_phase = 0.0;     // rad

    void validate() const {
        mode_comb.validate();
        if (frequency_grid.points < 3)
            throw DomainError("SynthesisSpec: need at least 3 grid points");
        if (!(frequency_grid.start > 0.0) ||
            !(frequency_grid.start < frequency_grid.stop))
            throw DomainError("SynthesisSpec: need 0 < start < stop");
        if (!(noise_sigma >= 0.0))
            throw DomainError("SynthesisSpec: noise_sigma must be >= 0");
        if (!std::isfinite(cable_delay_tau))
            throw DomainError("SynthesisSpec: cable_delay_tau must be finite");
        if (!(background_amplitude > 0.0))
            throw DomainError("SynthesisSpec: background_amplitude must be > 0");
        if (!std::isfinite(background_phase))
            throw DomainError("SynthesisSpec: background_phase must be finite");
    }
};

/// One-port reflection of a single mode: S11 = 1 - (2Ql/Qc)/(1 + 2i Ql df/f0).
inline std::complex<double> one_port_s11(double f, double f0, double q_l, double q_c) {
    const std::complex<double> denom(1.0, 2.0 * q_l * (f - f0) / f0);
    return 1.0 - (2.0 * q_l / q_c) / denom;
}

/// Synthesizes a reflection trace: per-mode responses multiplied together,
/// scaled by amplitude * exp(i (phase - 2 pi f tau)), plus seeded complex
/// Gaussian noise. Noise draws are mt19937_64 + Box-Muller in grid order
/// (real part first), so a fixed seed reproduces the trace bit for bit.
inline ComplexTrace synthesize_s11(const SynthesisSpec& spec, std::uint64_t seed) {
    spec.validate();
    ComplexTrace trace;
    const int n = spec.frequency_grid.points;
    const double start = spec.frequency_grid.start;
    const double step = (spec.frequency_grid.stop - start) / double(n - 1);
    trace.frequencies.resize(n);
    trace.s11.resize(n);
    GaussianSampler noise(seed);
    for (int i = 0; i < n; ++i) {
        const double f = start + i * step;
        const double arg =
            spec.background_phase - 2.0 * std::numbers::pi * f * spec.cable_delay_tau;
        std::complex<double> s =
            spec.background_amplitude * std::complex<double>(std::cos(arg), std::sin(arg));
        for (const Mode& m : spec.mode_comb.modes)
            s *= one_port_s11(f, m.frequency, m.q_l(), m.q_c);
        if (spec.noise_sigma > 0.0) {
            const double re = noise();
            const double im = noise();
            s += spec.noise_sigma * std::complex<double>(re, im);
        }
        trace.frequencies[i] = f;
        trace.s11[i] = s;
    }
    trace.validate();
    return trace;
}

}  // namespace sawkit::com
