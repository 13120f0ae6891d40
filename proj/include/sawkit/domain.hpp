#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sawkit/errors.hpp"

// Shared physical types and unit conventions. Every public quantity is SI
// (m, s, Hz, K) except drive power, which is dBm at the device input.

namespace sawkit {

struct PhysicalConstants {
    double h = 6.62607015e-34;    // Planck constant, J s (exact SI)
    double k_B = 1.380649e-23;    // Boltzmann constant, J/K (exact SI)
    double hbar = 6.62607015e-34 / (2.0 * std::numbers::pi);
};

inline constexpr PhysicalConstants kConst{};

/// P[W] = 10^(dBm/10) mW. -inf dBm maps to zero watts.
inline double dbm_to_watts(double dbm) {
    if (std::isnan(dbm) || dbm == std::numeric_limits<double>::infinity())
        throw DomainError("power in dBm must be finite or -inf");
    return std::pow(10.0, dbm / 10.0) * 1e-3;
}

inline double watts_to_dbm(double watts) {
    if (!(watts >= 0.0)) throw DomainError("power in watts must be >= 0");
    return 10.0 * std::log10(watts / 1e-3);
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Physical layout of a one-port SAW resonator.
struct DeviceGeometry {
    double pitch_p = 0.0;            // electrode pitch, m
    double electrode_width_a = 0.0;  // electrode width, m
    double aperture_w = 0.0;         // finger overlap length, m
    double cavity_length_L = 0.0;    // mirror-to-mirror free path, m
    int mirror_periods_Ng = 0;       // periods per Bragg mirror
    double saw_velocity_v = 0.0;     // SAW phase velocity, m/s
    double reflectivity_rs = 0.0;    // per-electrode reflectivity magnitude

    void validate() const {
        auto require = [](bool ok, const char* msg) {
            if (!ok) throw DomainError(std::string("DeviceGeometry: ") + msg);
        };
        require(std::isfinite(pitch_p) && pitch_p > 0.0, "pitch_p must be > 0");
        require(std::isfinite(electrode_width_a) && electrode_width_a > 0.0,
                "electrode_width_a must be > 0");
        require(electrode_width_a < pitch_p,
                "electrode_width_a must be < pitch_p (metallization ratio in (0,1))");
        require(std::isfinite(aperture_w) && aperture_w > 0.0, "aperture_w must be > 0");
        require(std::isfinite(cavity_length_L) && cavity_length_L > 0.0,
                "cavity_length_L must be > 0");
        require(mirror_periods_Ng >= 0, "mirror_periods_Ng must be >= 0");
        require(std::isfinite(saw_velocity_v) && saw_velocity_v > 0.0,
                "saw_velocity_v must be > 0");
        require(std::isfinite(reflectivity_rs) && reflectivity_rs > 0.0 &&
                    reflectivity_rs < 1.0,
                "reflectivity_rs must lie in (0, 1)");
    }

    /// Stricter screen applied when reading geometry from user files: rejects
    /// values that are legal numbers but betray a wrong unit (nm or um typed
    /// where metres are expected, km/s where m/s are expected).
    void validate_si_plausible() const {
        validate();
        auto require = [](bool ok, const char* msg) {
            if (!ok) throw ValidationError(std::string("DeviceGeometry: ") + msg);
        };
        require(pitch_p > 1e-9 && pitch_p < 1e-3,
                "pitch_p outside (1 nm, 1 mm); expected metres");
        require(aperture_w < 0.1, "aperture_w >= 0.1 m; expected metres");
        require(cavity_length_L < 0.1, "cavity_length_L >= 0.1 m; expected metres");
        require(saw_velocity_v > 50.0 && saw_velocity_v < 1e5,
                "saw_velocity_v outside (50, 1e5) m/s; expected m/s");
    }
};

/// A frequency-swept complex reflection measurement.
struct ComplexTrace {
    std::vector<double> frequencies;          // Hz, strictly increasing
    std::vector<std::complex<double>> s11;    // same length
    std::optional<double> drive_power_dbm;    // at device input
    std::optional<double> temperature_K;
    std::string label;

    std::size_t size() const noexcept { return frequencies.size(); }
    double span() const {
        return frequencies.empty() ? 0.0 : frequencies.back() - frequencies.front();
    }

    void validate() const {
        if (frequencies.size() != s11.size())
            throw DomainError("ComplexTrace: frequency and s11 arrays differ in length");
        if (frequencies.size() < 3)
            throw DomainError("ComplexTrace: need at least 3 points");
        for (std::size_t i = 0; i < frequencies.size(); ++i) {
            if (!std::isfinite(frequencies[i]) || frequencies[i] <= 0.0)
                throw DomainError("ComplexTrace: frequencies must be finite and > 0");
            if (i > 0 && frequencies[i] <= frequencies[i - 1])
                throw DomainError("ComplexTrace: frequencies must be strictly increasing");
            if (!std::isfinite(s11[i].real()) || !std::isfinite(s11[i].imag()))
                throw DomainError("ComplexTrace: s11 must be finite");
        }
        if (temperature_K && !(*temperature_K > 0.0))
            throw DomainError("ComplexTrace: temperature_K must be > 0 when present");
        if (drive_power_dbm && std::isnan(*drive_power_dbm))
            throw DomainError("ComplexTrace: drive_power_dbm must not be NaN");
    }
};

/// Extracted resonance parameters for one mode.
struct ResonanceFit {
    double f0 = 0.0;   // Hz
    double q_l = 0.0;  // loaded
    double q_i = 0.0;  // internal
    double q_c = 0.0;  // coupling
    std::complex<double> circle_center;
    double circle_radius = 0.0;
    double residual_rms = 0.0;
    /// |(1 - 2 radius) - min|S11|| on the normalized trace; a large value
    /// means the dip depth and circle radius disagree (suspect background).
    double dip_consistency = 0.0;

    struct Uncertainties {
        double f0 = 0.0;
        double q_l = 0.0;
        double q_i = 0.0;
        double q_c = 0.0;
    } sigma;

    /// Checks positivity and the 1/Q_l = 1/Q_i + 1/Q_c identity; when a
    /// frequency span is supplied, also that f0 lies inside it.
    void validate(std::optional<std::pair<double, double>> span = std::nullopt) const {
        if (!(f0 > 0.0) || !(q_l > 0.0) || !(q_i > 0.0) || !(q_c > 0.0) ||
            !(circle_radius > 0.0))
            throw DomainError("ResonanceFit: f0, Q values, circle_radius must be > 0");
        double lhs = 1.0 / q_l;
        double rhs = 1.0 / q_i + 1.0 / q_c;
        if (std::abs(lhs - rhs) > 1e-9 * lhs)
            throw DomainError("ResonanceFit: 1/Q_l = 1/Q_i + 1/Q_c violated");
        if (span && (f0 < span->first || f0 > span->second))
            throw DomainError("ResonanceFit: f0 outside the trace frequency span");
    }
};

// ---------------------------------------------------------------------------
// Drive-power <-> phonon-number calibration
// ---------------------------------------------------------------------------

/// Mean intracavity phonon number of a one-port mode driven on resonance:
/// n = 4 P Q_l^2 / (hbar w0^2 Q_c), w0 = 2 pi f0.
inline double phonon_number(double p_in_dbm, double f0, double q_l, double q_c) {
    if (!(f0 > 0.0) || !(q_l > 0.0) || !(q_c > 0.0))
        throw DomainError("phonon_number: f0, Q_l, Q_c must be > 0");
    double p_w = dbm_to_watts(p_in_dbm);
    double w0 = 2.0 * std::numbers::pi * f0;
    return 4.0 * p_w * q_l * q_l / (kConst.hbar * w0 * w0 * q_c);
}

/// Input power in dBm at which the mode holds one phonon on average.
inline double single_phonon_power(double f0, double q_l, double q_c) {
    if (!(f0 > 0.0) || !(q_l > 0.0) || !(q_c > 0.0))
        throw DomainError("single_phonon_power: f0, Q_l, Q_c must be > 0");
    double w0 = 2.0 * std::numbers::pi * f0;
    double p_w = kConst.hbar * w0 * w0 * q_c / (4.0 * q_l * q_l);
    return watts_to_dbm(p_w);
}

/// Frequency-quality product f0 * Q_i, the thermal-isolation figure of merit.
inline double fq_product(double f0, double q_i) {
    if (!(f0 > 0.0) || !(q_i > 0.0))
        throw DomainError("fq_product: f0 and Q_i must be > 0");
    return f0 * q_i;
}

}  // namespace sawkit
