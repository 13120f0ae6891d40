#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "sawkit/domain.hpp"
#include "sawkit/errors.hpp"
#include "sawkit/fit_engine.hpp"

// Two-level-system (TLS) loss models: power- and temperature-dependent
// internal Q, the digamma-form fractional frequency shift, and a detuned-pump
// saturation model that extracts the ensemble Rabi frequency and dephasing
// time from two-tone scans.

namespace sawkit::loss {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// TLS loss model parameters. The critical phonon number follows
/// n_c(T) = n_c * (T / t_ref)^mu, so n_c is quoted at t_ref.
struct TlsLossParams {
    double q_tls = 0.0;   // TLS-limited internal Q
    double q_rl = 0.0;    // residual (TLS-independent) internal Q
    double n_c = 0.0;     // critical phonon number at t_ref
    double beta = 1.0;    // saturation exponent
    double f0 = 0.0;      // Hz
    double t_ref = 0.010;  // K, reference for the n_c temperature law
    double mu = 0.0;      // exponent of the n_c temperature law

    void validate() const {
        if (!(q_tls > 0.0) || !(q_rl > 0.0) || !(n_c > 0.0))
            throw DomainError("TlsLossParams: q_tls, q_rl, n_c must be > 0");
        if (!(beta > 0.0) || !(beta <= 2.0))
            throw DomainError("TlsLossParams: beta must lie in (0, 2]");
        if (!(mu >= 0.0)) throw DomainError("TlsLossParams: mu must be >= 0");
        if (!(f0 > 0.0) || !(t_ref > 0.0))
            throw DomainError("TlsLossParams: f0 and t_ref must be > 0");
    }
};

/// Thermal TLS population factor tanh(h f0 / 2 k_B T). Tends to 1 as T -> 0
/// and to h f0 / 2 k_B T as T -> infinity.
inline double tls_tanh_factor(double f0, double temperature_K) {
    if (!(f0 > 0.0) || !(temperature_K > 0.0))
        throw DomainError("tls_tanh_factor: f0 and T must be > 0");
    return std::tanh(kConst.h * f0 / (2.0 * kConst.k_B * temperature_K));
}

/// Power- and temperature-dependent internal Q:
/// 1/Q_i = (1/Q_TLS) tanh(h f0 / 2 k_B T) / sqrt(1 + (n/n_c(T))^beta) + 1/Q_rl.
inline double qi_power_model(double n, double temperature_K,
                             const TlsLossParams& p) {
    p.validate();
    if (!(n >= 0.0)) throw DomainError("qi_power_model: n must be >= 0");
    if (!(temperature_K > 0.0))
        throw DomainError("qi_power_model: temperature must be > 0");
    const double n_c_t =
        p.mu > 0.0 ? p.n_c * std::pow(temperature_K / p.t_ref, p.mu) : p.n_c;
    const double saturation = std::sqrt(1.0 + std::pow(n / n_c_t, p.beta));
    const double inv_qi =
        tls_tanh_factor(p.f0, temperature_K) / (p.q_tls * saturation) + 1.0 / p.q_rl;
    return 1.0 / inv_qi;
}

/// Fractional TLS frequency shift versus temperature:
/// df/f0 = (1/pi Q_TLS) { Re Psi(1/2 + h f0 / (2 pi i k_B T)) - ln(h f0 / (2 pi k_B T)) }.
inline double freq_shift_temperature(double temperature_K, double f0,
                                     double q_tls) {
    if (!(temperature_K > 0.0) || !(f0 > 0.0) || !(q_tls > 0.0))
        throw DomainError("freq_shift_temperature: T, f0, q_tls must be > 0");
    const double xi = kConst.h * f0 / (kTwoPi * kConst.k_B * temperature_K);
    const std::complex<double> psi =
        fit::digamma_complex(std::complex<double>(0.5, -xi));
    return (psi.real() - std::log(xi)) / (std::numbers::pi * q_tls);
}

// ---------------------------------------------------------------------------
// Power-sweep fit (Q_i versus phonon number at fixed temperature)
// ---------------------------------------------------------------------------

struct PowerPoint {
    double n = 0.0;    // phonon number
    double q_i = 0.0;
};

struct PowerSweepFit {
    TlsLossParams params;
    double sigma_q_tls = 0.0;
    double sigma_q_rl = 0.0;
    double sigma_n_c = 0.0;
    double sigma_beta = 0.0;
    double residual_rms = 0.0;  // relative Q_i residual
    std::vector<std::string> warnings;
};

namespace detail {

/// Relative-Q_i residual block shared by the power and temperature fits.
/// Parameters arrive as {log q_tls, log q_rl, log n_c, beta, mu}.
inline double qi_model_from_logs(const double* lp, double n, double temperature_K,
                                 double f0, double t_ref) {
    TlsLossParams p;
    p.q_tls = std::exp(lp[0]);
    p.q_rl = std::exp(lp[1]);
    p.n_c = std::exp(lp[2]);
    p.beta = lp[3];
    p.mu = lp[4];
    p.f0 = f0;
    p.t_ref = t_ref;
    return qi_power_model(n, temperature_K, p);
}

inline const char* kPowerParamNames[4] = {"q_tls", "q_rl", "n_c", "beta"};

}  // namespace detail

/// Least-squares fit of the power-dependence model at fixed temperature, with
/// mu held at zero. Residuals are relative Q_i errors; positivity is kept by
/// fitting the Q and n_c parameters in log space.
inline PowerSweepFit fit_power_sweep(const std::vector<PowerPoint>& data,
                                     double temperature_K, double f0) {
    if (data.size() < 5)
        throw DomainError("fit_power_sweep: need at least 5 points");
    double n_min = fit::kInf, n_max = 0.0, qi_max = 0.0;
    for (const auto& d : data) {
        if (!(d.n >= 0.0) || !std::isfinite(d.n) || !(d.q_i > 0.0) ||
            !std::isfinite(d.q_i))
            throw DomainError("fit_power_sweep: points need n >= 0 and q_i > 0");
        if (d.n > 0.0) n_min = std::min(n_min, d.n);
        n_max = std::max(n_max, d.n);
        qi_max = std::max(qi_max, d.q_i);
    }
    if (!(n_max / std::max(n_min, 1e-300) >= 100.0))
        throw DomainError(
            "fit_power_sweep: phonon numbers must span at least two decades");
    if (!(temperature_K > 0.0) || !(f0 > 0.0))
        throw DomainError("fit_power_sweep: temperature and f0 must be > 0");

    // Plateau-based initial guesses: the low-n plateau carries Q_TLS + Q_rl in
    // series, the high-n plateau is Q_rl alone.
    std::vector<PowerPoint> sorted = data;
    std::sort(sorted.begin(), sorted.end(),
              [](const PowerPoint& a, const PowerPoint& b) { return a.n < b.n; });
    const double tanh_term = tls_tanh_factor(f0, temperature_K);
    const double qi_low = sorted.front().q_i;
    const double q_rl0 = qi_max * 1.02;
    const double tls_loss0 = std::max(1.0 / qi_low - 1.0 / q_rl0, 1e-3 / qi_low);
    const double q_tls0 = tanh_term / tls_loss0;
    // n_c guess: first n where the TLS term has dropped to ~70% of its
    // low-power value, else the geometric middle of the span.
    double n_c0 = std::sqrt(std::max(n_min, 1e-3) * n_max);
    for (const auto& d : sorted) {
        if (d.n <= 0.0) continue;
        const double tls = 1.0 / d.q_i - 1.0 / q_rl0;
        if (tls < 0.70 * tls_loss0) {
            n_c0 = d.n;
            break;
        }
    }

    fit::FitProblem prob;
    const std::size_t m = data.size();
    prob.residual_fn = [&data, temperature_K, f0](const fit::Vector& q) -> fit::Vector {
        const double lp[5] = {q[0], q[1], q[2], q[3], 0.0};
        fit::Vector r(data.size());
        for (std::size_t i = 0; i < data.size(); ++i)
            r[Eigen::Index(i)] = detail::qi_model_from_logs(lp, data[i].n,
                                                            temperature_K, f0,
                                                            0.010) /
                                     data[i].q_i -
                                 1.0;
        return r;
    };
    prob.lower_bounds = fit::Vector(4);
    prob.lower_bounds << std::log(1.0), std::log(1.0), std::log(1e-6), 1e-3;
    prob.upper_bounds = fit::Vector(4);
    prob.upper_bounds << std::log(1e12), std::log(1e12), std::log(1e12), 2.0;
    prob.max_iterations = 400;
    const auto run_from = [&](double q_tls_i, double n_c_i,
                              double beta_i) -> fit::FitResult {
        prob.initial_params = fit::Vector(4);
        prob.initial_params << std::log(q_tls_i), std::log(q_rl0),
            std::log(n_c_i), beta_i;
        for (Eigen::Index j = 0; j < 4; ++j)
            prob.initial_params[j] = std::clamp(prob.initial_params[j],
                                                prob.lower_bounds[j],
                                                prob.upper_bounds[j]);
        return fit::levenberg_marquardt(prob);
    };
    const auto at_bound = [](const fit::FitResult& r) {
        return !r.active_lower.empty() || !r.active_upper.empty();
    };

    // Noise can park a single start on the n_c/beta ridge against a bound;
    // retry from spread-out knee guesses and keep the best interior minimum
    // before declaring the data non-identifiable.
    fit::FitResult res = run_from(q_tls0, n_c0, 1.0);
    if (at_bound(res)) {
        const double n_mid = std::sqrt(std::max(n_min, 1e-3) * n_max);
        for (const auto& [nc_alt, beta_alt] :
             {std::pair{n_mid, 0.7}, {n_c0, 1.3}, {n_mid * 30.0, 1.0}}) {
            const fit::FitResult alt = run_from(q_tls0, nc_alt, beta_alt);
            if (at_bound(alt)) continue;
            if (at_bound(res) || alt.cost < res.cost) res = alt;
        }
    }
    if (at_bound(res)) {
        std::string which;
        for (int j : res.active_lower)
            which += std::string(which.empty() ? "" : ", ") +
                     detail::kPowerParamNames[j] + " (lower)";
        for (int j : res.active_upper)
            which += std::string(which.empty() ? "" : ", ") +
                     detail::kPowerParamNames[j] + " (upper)";
        throw IdentifiabilityError(
            "fit_power_sweep: data do not constrain the model; parameter(s) at "
            "bound: " + which);
    }

    PowerSweepFit out;
    out.params.q_tls = std::exp(res.params[0]);
    out.params.q_rl = std::exp(res.params[1]);
    out.params.n_c = std::exp(res.params[2]);
    out.params.beta = res.params[3];
    out.params.f0 = f0;
    out.params.mu = 0.0;
    out.params.validate();
    const fit::Vector se = res.std_errors();
    out.sigma_q_tls = out.params.q_tls * se[0];  // log-space delta method
    out.sigma_q_rl = out.params.q_rl * se[1];
    out.sigma_n_c = out.params.n_c * se[2];
    out.sigma_beta = se[3];
    out.residual_rms = std::sqrt(2.0 * res.cost / double(m));
    if (out.sigma_n_c > out.params.n_c)
        out.warnings.push_back(
            "n_c uncertainty exceeds 100%: the sweep does not cross the "
            "saturation knee");
    // A fitted knee at or beyond the top of the sweep means n_c and beta are
    // extrapolations; sigma alone misses this for near-noiseless data.
    if (out.params.n_c >= 0.8 * n_max)
        out.warnings.push_back(
            "saturation knee lies at or beyond the highest measured power; "
            "n_c and beta are extrapolated");
    return out;
}

// ---------------------------------------------------------------------------
// Temperature-sweep fit (joint Q_i(T, n) and frequency-shift fit)
// ---------------------------------------------------------------------------

struct QiTempPoint {
    double temperature_K = 0.0;
    double n = 0.0;
    double q_i = 0.0;
};

struct ShiftTempPoint {
    double temperature_K = 0.0;
    double shift_hz = 0.0;  // f(T) - f(reference), absolute
};

struct TemperatureSweepFit {
    TlsLossParams params;  // includes mu
    double sigma_q_tls = 0.0;
    double sigma_q_rl = 0.0;
    double sigma_n_c = 0.0;
    double sigma_beta = 0.0;
    double sigma_mu = 0.0;
    double shift_offset_hz = 0.0;    // additive reference offset of the shift data
    double residual_rms_qi = 0.0;    // relative Q_i residual
    double residual_rms_shift = 0.0;  // shift residual / shift data scale
    double q_tls_qi_only = 0.0;      // Q_TLS from the Q_i block alone
    double q_tls_shift_only = 0.0;   // Q_TLS from the shift block alone
    std::vector<std::string> warnings;
};

namespace detail {

inline std::size_t distinct_temperatures(const std::vector<double>& temps) {
    std::vector<double> t = temps;
    std::sort(t.begin(), t.end());
    std::size_t count = t.empty() ? 0 : 1;
    for (std::size_t i = 1; i < t.size(); ++i)
        if (t[i] > t[i - 1] * (1.0 + 1e-9)) ++count;
    return count;
}

}  // namespace detail

/// Joint fit of the loss model (with the n_c temperature law) against
/// Q_i(T, n) data and of the digamma shift model against df(T) data, sharing
/// Q_TLS. Single-block Q_TLS estimates are always computed; if either block's
/// joint residual exceeds 3x its single-block value, a model-tension warning
/// is attached and both estimates stay available in the result.
inline TemperatureSweepFit fit_temperature_sweep(
    const std::vector<QiTempPoint>& qi_data,
    const std::vector<ShiftTempPoint>& shift_data, double f0) {
    std::vector<double> qi_temps, shift_temps;
    for (const auto& d : qi_data) {
        if (!(d.temperature_K > 0.0) || !(d.n >= 0.0) || !(d.q_i > 0.0))
            throw DomainError(
                "fit_temperature_sweep: qi points need T > 0, n >= 0, q_i > 0");
        qi_temps.push_back(d.temperature_K);
    }
    for (const auto& d : shift_data) {
        if (!(d.temperature_K > 0.0) || !std::isfinite(d.shift_hz))
            throw DomainError(
                "fit_temperature_sweep: shift points need T > 0 and finite shift");
        shift_temps.push_back(d.temperature_K);
    }
    if (detail::distinct_temperatures(qi_temps) < 5 ||
        detail::distinct_temperatures(shift_temps) < 5)
        throw DomainError(
            "fit_temperature_sweep: need >= 5 distinct temperatures in each block");
    if (!(f0 > 0.0)) throw DomainError("fit_temperature_sweep: f0 must be > 0");

    double shift_scale = 0.0;
    for (const auto& d : shift_data)
        shift_scale = std::max(shift_scale, std::abs(d.shift_hz));
    if (shift_scale <= 0.0) shift_scale = 1.0;

    // Shift-only fit: {log q_tls, offset / shift_scale}. The offset absorbs
    // the arbitrary reference frequency of the measured shifts.
    const auto shift_residual = [&shift_data, f0, shift_scale](
                                    double lq_tls, double offset_hz,
                                    Eigen::Index row, fit::Vector& r) {
        const double q_tls = std::exp(lq_tls);
        for (std::size_t i = 0; i < shift_data.size(); ++i) {
            const double model_hz =
                f0 * freq_shift_temperature(shift_data[i].temperature_K, f0, q_tls) +
                offset_hz;
            r[row + Eigen::Index(i)] =
                (model_hz - shift_data[i].shift_hz) / shift_scale;
        }
    };

    fit::FitProblem shift_prob;
    shift_prob.residual_fn = [&](const fit::Vector& q) -> fit::Vector {
        fit::Vector r(shift_data.size());
        shift_residual(q[0], q[1] * shift_scale, 0, r);
        return r;
    };
    shift_prob.initial_params = fit::Vector(2);
    shift_prob.initial_params << std::log(1e5), 0.0;
    shift_prob.lower_bounds = fit::Vector(2);
    shift_prob.lower_bounds << std::log(1.0), -fit::kInf;
    shift_prob.upper_bounds = fit::Vector(2);
    shift_prob.upper_bounds << std::log(1e12), fit::kInf;
    shift_prob.max_iterations = 400;
    const fit::FitResult shift_res = fit::levenberg_marquardt(shift_prob);
    const double q_tls_shift = std::exp(shift_res.params[0]);
    const double rms_shift_only =
        std::sqrt(2.0 * shift_res.cost / double(shift_data.size()));

    // Q_i-only fit: {log q_tls, log q_rl, log n_c, beta, mu}.
    double qi_max = 0.0, n_mid = 1.0;
    for (const auto& d : qi_data) qi_max = std::max(qi_max, d.q_i);
    {
        std::vector<double> ns;
        for (const auto& d : qi_data)
            if (d.n > 0.0) ns.push_back(d.n);
        if (!ns.empty()) {
            std::nth_element(ns.begin(), ns.begin() + ns.size() / 2, ns.end());
            n_mid = ns[ns.size() / 2];
        }
    }
    const auto qi_residual = [&qi_data, f0](const double* lp, Eigen::Index row,
                                            fit::Vector& r) {
        for (std::size_t i = 0; i < qi_data.size(); ++i)
            r[row + Eigen::Index(i)] =
                detail::qi_model_from_logs(lp, qi_data[i].n,
                                           qi_data[i].temperature_K, f0, 0.010) /
                    qi_data[i].q_i -
                1.0;
    };

    fit::FitProblem qi_prob;
    qi_prob.residual_fn = [&](const fit::Vector& q) -> fit::Vector {
        const double lp[5] = {q[0], q[1], q[2], q[3], q[4]};
        fit::Vector r(qi_data.size());
        qi_residual(lp, 0, r);
        return r;
    };
    qi_prob.initial_params = fit::Vector(5);
    qi_prob.initial_params << std::log(q_tls_shift), std::log(qi_max * 1.02),
        std::log(n_mid), 1.0, 0.5;
    qi_prob.lower_bounds = fit::Vector(5);
    qi_prob.lower_bounds << std::log(1.0), std::log(1.0), std::log(1e-6), 1e-3, 0.0;
    qi_prob.upper_bounds = fit::Vector(5);
    qi_prob.upper_bounds << std::log(1e12), std::log(1e12), std::log(1e12), 2.0, 4.0;
    qi_prob.max_iterations = 400;
    const fit::FitResult qi_res = fit::levenberg_marquardt(qi_prob);
    const double rms_qi_only = std::sqrt(2.0 * qi_res.cost / double(qi_data.size()));

    // Joint fit: {log q_tls, log q_rl, log n_c, beta, mu, offset/scale}.
    const std::size_t m_total = qi_data.size() + shift_data.size();
    fit::FitProblem joint;
    joint.residual_fn = [&](const fit::Vector& q) -> fit::Vector {
        const double lp[5] = {q[0], q[1], q[2], q[3], q[4]};
        fit::Vector r(m_total);
        qi_residual(lp, 0, r);
        shift_residual(q[0], q[5] * shift_scale, Eigen::Index(qi_data.size()), r);
        return r;
    };
    joint.initial_params = fit::Vector(6);
    joint.initial_params << qi_res.params[0], qi_res.params[1], qi_res.params[2],
        qi_res.params[3], qi_res.params[4], shift_res.params[1];
    joint.lower_bounds = fit::Vector(6);
    joint.lower_bounds << std::log(1.0), std::log(1.0), std::log(1e-6), 1e-3, 0.0,
        -fit::kInf;
    joint.upper_bounds = fit::Vector(6);
    joint.upper_bounds << std::log(1e12), std::log(1e12), std::log(1e12), 2.0, 4.0,
        fit::kInf;
    joint.max_iterations = 400;
    const fit::FitResult res = fit::levenberg_marquardt(joint);

    TemperatureSweepFit out;
    out.params.q_tls = std::exp(res.params[0]);
    out.params.q_rl = std::exp(res.params[1]);
    out.params.n_c = std::exp(res.params[2]);
    out.params.beta = res.params[3];
    out.params.mu = res.params[4];
    out.params.f0 = f0;
    out.params.validate();
    out.shift_offset_hz = res.params[5] * shift_scale;
    const fit::Vector se = res.std_errors();
    out.sigma_q_tls = out.params.q_tls * se[0];
    out.sigma_q_rl = out.params.q_rl * se[1];
    out.sigma_n_c = out.params.n_c * se[2];
    out.sigma_beta = se[3];
    out.sigma_mu = se[4];
    out.q_tls_qi_only = std::exp(qi_res.params[0]);
    out.q_tls_shift_only = q_tls_shift;

    const fit::Vector r_joint = joint.residual_fn(res.params);
    double ss_qi = 0.0, ss_shift = 0.0;
    for (std::size_t i = 0; i < qi_data.size(); ++i)
        ss_qi += r_joint[Eigen::Index(i)] * r_joint[Eigen::Index(i)];
    for (std::size_t i = 0; i < shift_data.size(); ++i) {
        const double v = r_joint[Eigen::Index(qi_data.size() + i)];
        ss_shift += v * v;
    }
    out.residual_rms_qi = std::sqrt(ss_qi / double(qi_data.size()));
    out.residual_rms_shift = std::sqrt(ss_shift / double(shift_data.size()));
    if (out.residual_rms_qi > 3.0 * std::max(rms_qi_only, 1e-12) ||
        out.residual_rms_shift > 3.0 * std::max(rms_shift_only, 1e-12))
        out.warnings.push_back(
            "model tension: the shared-Q_TLS joint fit degrades a block by more "
            "than 3x (Q_TLS from Q_i block " + std::to_string(out.q_tls_qi_only) +
            ", from shift block " + std::to_string(out.q_tls_shift_only) + ")");
    return out;
}

// ---------------------------------------------------------------------------
// Two-tone pump saturation
// ---------------------------------------------------------------------------

/// Saturation parameter of TLS at `detuning` from a pump populating n_pump
/// phonons: S = n_pump (2 pi omega0)^2 T1 T2 / (1 + (2 pi detuning)^2 T2^2).
inline double pump_saturation(double n_pump, double detuning_hz, double omega0,
                              double t2, double t1) {
    if (!(n_pump >= 0.0) || !(omega0 > 0.0) || !(t2 > 0.0) || !(t1 > 0.0))
        throw DomainError(
            "pump_saturation: need n_pump >= 0 and omega0, t2, t1 > 0");
    if (!std::isfinite(detuning_hz))
        throw DomainError("pump_saturation: detuning must be finite");
    const double rabi = kTwoPi * omega0;
    const double w = kTwoPi * detuning_hz * t2;
    return n_pump * rabi * rabi * t1 * t2 / (1.0 + w * w);
}

/// Effective critical pump phonon number at zero detuning.
inline double nc_effective(double omega0, double t2, double t1) {
    if (!(omega0 > 0.0) || !(t2 > 0.0) || !(t1 > 0.0))
        throw DomainError("nc_effective: omega0, t2, t1 must be > 0");
    const double rabi = kTwoPi * omega0;
    return 1.0 / (rabi * rabi * t1 * t2);
}

namespace detail {

/// Adaptive Simpson with the classic delta/15 error estimate. `floor_fn`
/// gives the evaluation-noise level of a piece; a piece whose estimate is
/// down at that floor counts as converged (subdividing further cannot beat
/// the integrand's own roundoff). Exhausting the depth budget with the bound
/// still above both limits is an error.
inline double adaptive_simpson(const std::function<double(double)>& f,
                               const std::function<double(double, double)>& floor_fn,
                               double a, double b, double fa, double fm, double fb,
                               double whole, double tol, int depth) {
    const double m = 0.5 * (a + b);
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const double flm = f(lm), frm = f(rm);
    const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    const double delta = left + right - whole;
    const double floor =
        std::max(32.0 * std::numeric_limits<double>::epsilon() *
                     (std::abs(left) + std::abs(right) + std::abs(whole)),
                 floor_fn(a, b));
    if (std::abs(delta) <= std::max(15.0 * tol, floor))
        return left + right + delta / 15.0;
    if (depth <= 0) {
        std::ostringstream msg;
        msg << std::scientific << std::setprecision(3)
            << "principal-value quadrature failed to converge on ["
            << a << ", " << b << "]: local error bound " << std::abs(delta) / 15.0
            << " exceeds tolerance " << tol;
        throw QuadratureError(msg.str());
    }
    return adaptive_simpson(f, floor_fn, a, m, fa, flm, fm, left, 0.5 * tol,
                            depth - 1) +
           adaptive_simpson(f, floor_fn, m, b, fm, frm, fb, right, 0.5 * tol,
                            depth - 1);
}

inline double integrate(const std::function<double(double)>& f,
                        const std::function<double(double, double)>& floor_fn,
                        double a, double b, double tol) {
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    // Depth 64 resolves features down to ~1e-17 of the span; the saturated
    // hole's central core can be that narrow at extreme pump strengths.
    return adaptive_simpson(f, floor_fn, a, b, fa, fm, fb, whole, tol, 64);
}

/// PV integral of g(nu) / (nu - pole) over [a, b] by pole subtraction: the
/// subtracted integrand is smooth and the subtracted pole integrates to a
/// log. Dividing (g - g0) by the pole distance amplifies the roundoff of g,
/// so the noise floor for a piece scales as g_scale / distance-to-pole.
inline double principal_value(const std::function<double(double)>& g, double a,
                              double b, double pole, double tol, double g_scale) {
    const auto noise_floor = [pole, g_scale](double lo, double hi) {
        double dist = 0.0;
        if (pole < lo) dist = lo - pole;
        if (pole > hi) dist = pole - hi;
        dist = std::max(dist, hi - lo);
        return 64.0 * std::numeric_limits<double>::epsilon() * g_scale *
               (hi - lo) / dist;
    };
    if (pole <= a || pole >= b) {
        return integrate([&](double nu) { return g(nu) / (nu - pole); },
                         noise_floor, a, b, tol);
    }
    const double g0 = g(pole);
    const double h = 1e-4 * (b - a);
    const double dg0 = (g(pole + h) - g(pole - h)) / (2.0 * h);
    const auto smooth = [&](double nu) {
        const double d = nu - pole;
        if (std::abs(d) < 1e-9 * (b - a)) return dg0;
        return (g(nu) - g0) / d;
    };
    return integrate(smooth, noise_floor, a, b, tol) +
           g0 * std::log((b - pole) / (pole - a));
}

}  // namespace detail

struct TwoTonePrediction {
    double q_i = 0.0;
    double shift_hz = 0.0;
};

/// Forward two-tone model. The probe's internal Q follows the loss model with
/// the TLS term saturated by the pump at the probe-pump detuning; the probe
/// frequency shift is a principal-value integral of the dispersive response
/// of the TLS bath with a saturation hole burned around the pump:
///   df/f0 = (A / pi Q_TLS) PV int dnu [1 - (1 + S(nu - f_pump))^(-1/2)]
///           / (2 pi (nu - f_probe))
/// over f_pump +- 50 power-broadened widths, uniform TLS density. The overall
/// scale A is calibration, not claimed physics; it defaults to 1 and is a free
/// parameter in fit_twotone. Thermal factors are evaluated at p.t_ref.
inline TwoTonePrediction twotone_forward(double n_pump, double f_pump,
                                         double f_probe, const TlsLossParams& p,
                                         double omega0, double t2, double t1,
                                         double kernel_amplitude = 1.0) {
    p.validate();
    if (!(n_pump >= 0.0)) throw DomainError("twotone_forward: n_pump must be >= 0");
    if (!(f_pump > 0.0) || !(f_probe > 0.0) || f_probe == f_pump)
        throw DomainError(
            "twotone_forward: pump and probe must be positive and distinct");
    if (!std::isfinite(kernel_amplitude))
        throw DomainError("twotone_forward: kernel amplitude must be finite");

    const double detuning = f_probe - f_pump;
    const double s_probe = pump_saturation(n_pump, detuning, omega0, t2, t1);
    const double inv_qi = tls_tanh_factor(p.f0, p.t_ref) /
                              (p.q_tls * std::sqrt(1.0 + s_probe)) +
                          1.0 / p.q_rl;

    TwoTonePrediction out;
    out.q_i = 1.0 / inv_qi;
    const double s0 = n_pump * kTwoPi * omega0 * kTwoPi * omega0 * t1 * t2;
    if (s0 <= 0.0) return out;  // no pump, no hole, no shift

    // Integrate in units of the power-broadened hole width so the quadrature
    // sees order-one coordinates regardless of the absolute frequencies.
    const double width = std::sqrt(1.0 + s0) / (kTwoPi * t2);
    const double u_probe = (f_probe - f_pump) / width;
    // hole = (1 - 1/sqrt(1+s)) / 2pi, written so it stays fully accurate for
    // small s (the naive difference loses ~2 eps / s relative precision).
    const auto hole = [s0](double u) {
        const double s = s0 / (1.0 + u * u * (1.0 + s0));
        const double rt = std::sqrt(1.0 + s);
        return s / (rt * (1.0 + rt) * kTwoPi);
    };
    const double scale = std::max(hole(0.0), 1e-30);
    const double integral =
        detail::principal_value(hole, -50.0, 50.0, u_probe, 1e-12 * scale, scale);
    out.shift_hz =
        p.f0 * kernel_amplitude * integral / (std::numbers::pi * p.q_tls);
    return out;
}

// ---------------------------------------------------------------------------
// Two-tone fit
// ---------------------------------------------------------------------------

struct TwoTonePoint {
    double n_pump = 0.0;
    double q_i = 0.0;
    double shift_hz = 0.0;
};

struct TwoToneScan {
    double f_probe = 0.0;  // Hz
    std::vector<TwoTonePoint> points;
};

struct TwoToneProbeCurve {
    double f_probe = 0.0;
    double detuning_hz = 0.0;
    std::vector<double> shift_curve_hz;  // model at the scan's n_pump values
    std::vector<double> qi_curve;
};

struct TwoToneResult {
    double omega0 = 0.0;           // Hz
    double t2 = 0.0;               // s
    double t1_closure_ratio = 0.5;  // T1 = ratio * T2
    double nc_eff = 0.0;
    double kernel_amplitude = 1.0;
    double sigma_omega0 = 0.0;
    double sigma_t2 = 0.0;
    double residual_rms = 0.0;
    std::vector<TwoToneProbeCurve> per_probe;
    std::vector<std::string> warnings;

    void validate() const {
        if (!(omega0 > 0.0) || !(t2 > 0.0))
            throw DomainError("TwoToneResult: omega0 and t2 must be > 0");
        const double closure = nc_effective(omega0, t2, t1_closure_ratio * t2);
        if (std::abs(nc_eff - closure) > 1e-9 * closure)
            throw DomainError(
                "TwoToneResult: nc_eff violates the omega0/t2 closure");
    }
};

/// Joint fit of (Q_i, df) versus pump power over all probe scans, extracting
/// the ensemble Rabi frequency omega0 and dephasing time t2 under the
/// T1 = t1_closure_ratio * T2 closure. Distinct detunings are what separate
/// omega0 from t2; with a single detuning the pair is degenerate and only the
/// effective saturation number survives (reported with a warning).
inline TwoToneResult fit_twotone(const std::vector<TwoToneScan>& scans,
                                 double f_pump, const TlsLossParams& p,
                                 double t1_closure_ratio = 0.5) {
    p.validate();
    if (scans.empty()) throw DomainError("fit_twotone: no scans given");
    if (!(f_pump > 0.0)) throw DomainError("fit_twotone: f_pump must be > 0");
    if (!(t1_closure_ratio > 0.0))
        throw DomainError("fit_twotone: t1_closure_ratio must be > 0");
    for (const auto& scan : scans) {
        if (!(scan.f_probe > 0.0) || scan.f_probe == f_pump)
            throw DomainError(
                "fit_twotone: probes must be positive and distinct from the pump");
        if (scan.points.size() < 3)
            throw DomainError("fit_twotone: each scan needs at least 3 points");
        for (const auto& pt : scan.points)
            if (!(pt.n_pump >= 0.0) || !(pt.q_i > 0.0) || !std::isfinite(pt.shift_hz))
                throw DomainError(
                    "fit_twotone: points need n_pump >= 0, q_i > 0, finite shift");
    }

    std::vector<double> abs_detunings;
    for (const auto& scan : scans)
        abs_detunings.push_back(std::abs(scan.f_probe - f_pump));
    const double d_min = *std::min_element(abs_detunings.begin(), abs_detunings.end());
    const double d_max = *std::max_element(abs_detunings.begin(), abs_detunings.end());
    const bool single_detuning = (d_max - d_min) <= 1e-9 * d_max;

    // Per-scan saturation rate c = 1/n at S = 1, from the Q_i curve and the
    // known unpumped loss split.
    const double tls0 = tls_tanh_factor(p.f0, p.t_ref) / p.q_tls;
    const auto saturation_rate = [&](const TwoToneScan& scan) {
        std::vector<double> cs;
        for (const auto& pt : scan.points) {
            if (pt.n_pump <= 0.0) continue;
            const double tls = 1.0 / pt.q_i - 1.0 / p.q_rl;
            if (tls <= 1e-3 * tls0 || tls >= tls0 * (1.0 - 1e-6)) continue;
            const double ratio = tls0 / tls;
            cs.push_back((ratio * ratio - 1.0) / pt.n_pump);
        }
        if (cs.empty()) return 0.0;
        std::nth_element(cs.begin(), cs.begin() + cs.size() / 2, cs.end());
        return cs[cs.size() / 2];
    };

    std::size_t i_min = 0;
    for (std::size_t i = 1; i < scans.size(); ++i)
        if (abs_detunings[i] < abs_detunings[i_min]) i_min = i;
    const double c_near = saturation_rate(scans[i_min]);
    const double w_near = kTwoPi * abs_detunings[i_min];

    double shift_scale = 0.0;
    std::size_t m_total = 0;
    for (const auto& scan : scans) {
        for (const auto& pt : scan.points)
            shift_scale = std::max(shift_scale, std::abs(pt.shift_hz));
        m_total += 2 * scan.points.size();
    }
    if (shift_scale <= 0.0) shift_scale = 1.0;
    // Shift rows are weighted per point so the small-shift knee region (which
    // carries the t2 information) is not drowned by the saturated tail; the
    // floor guards points whose measured shift is near zero.
    const auto shift_weight = [shift_scale](const TwoTonePoint& pt) {
        return std::max(std::abs(pt.shift_hz), 1e-3 * shift_scale);
    };

    // Residuals and the best-amplitude cost share one evaluation pass.
    const auto eval_rows =
        [&](double omega0, double t2, double amplitude, fit::Vector* rows,
            double* num, double* den) {
            const double t1 = t1_closure_ratio * t2;
            Eigen::Index row = 0;
            double cost_qi = 0.0;
            for (const auto& scan : scans) {
                for (const auto& pt : scan.points) {
                    const TwoTonePrediction pred =
                        twotone_forward(pt.n_pump, f_pump, scan.f_probe, p,
                                        omega0, t2, t1, amplitude);
                    const double rq = pred.q_i / pt.q_i - 1.0;
                    const double w = shift_weight(pt);
                    if (rows) {
                        (*rows)[row++] = rq;
                        (*rows)[row++] = (pred.shift_hz - pt.shift_hz) / w;
                    } else {
                        cost_qi += rq * rq;
                        *num += pred.shift_hz * pt.shift_hz / (w * w);
                        *den += pred.shift_hz * pred.shift_hz / (w * w);
                    }
                }
            }
            return cost_qi;
        };

    // The closed-form (c_near, c_far) inversion is ill-conditioned once
    // 2 pi D t2 >> 1 (t2 drops out of the saturation rate), so initialize by
    // scanning t2 candidates: each candidate fixes omega0 through the
    // near-detuning saturation rate, and the kernel amplitude is the linear
    // least-squares solution over the shift rows.
    double yy = 0.0;  // weighted shift-data norm, constant across candidates
    for (const auto& scan : scans)
        for (const auto& pt : scan.points) {
            const double w = shift_weight(pt);
            yy += pt.shift_hz * pt.shift_hz / (w * w);
        }
    double t2_init = 1.0 / (kTwoPi * std::max(d_min, 1.0));
    double omega0_init = 40e3;
    double a_init = 1.0;
    double best = fit::kInf;
    for (int k = 0; k <= 24; ++k) {
        const double t2_c = 1e-9 * std::pow(10.0, 6.0 * k / 24.0);
        double omega0_c = omega0_init;
        if (c_near > 0.0) {
            const double k_c = c_near * (1.0 + w_near * w_near * t2_c * t2_c);
            omega0_c = std::sqrt(k_c / t1_closure_ratio) / (kTwoPi * t2_c);
        }
        omega0_c = std::clamp(omega0_c, 1.0, 1e8);
        double num = 0.0, den = 0.0;
        const double cost_qi = eval_rows(omega0_c, t2_c, 1.0, nullptr, &num, &den);
        const double a_c = den > 0.0 ? num / den : 1.0;
        // Shift-row cost at the solved amplitude via the normal equations:
        // sum(((a*s - y)/w)^2) = yy - a^2 * den.
        const double cost = cost_qi + yy - a_c * a_c * den;
        if (cost < best) {
            best = cost;
            t2_init = t2_c;
            omega0_init = omega0_c;
            a_init = std::clamp(a_c, 1e-6, 1e6);
        }
    }

    fit::FitProblem prob;
    prob.residual_fn = [&](const fit::Vector& q) -> fit::Vector {
        fit::Vector r(m_total);
        eval_rows(std::exp(q[0]), std::exp(q[1]), q[2], &r, nullptr, nullptr);
        return r;
    };
    prob.initial_params = fit::Vector(3);
    prob.initial_params << std::log(std::clamp(omega0_init, 1.0, 1e8)),
        std::log(std::clamp(t2_init, 1e-11, 1.0)), a_init;
    prob.lower_bounds = fit::Vector(3);
    prob.lower_bounds << std::log(1.0), std::log(1e-12), 1e-6;
    prob.upper_bounds = fit::Vector(3);
    prob.upper_bounds << std::log(1e9), std::log(1.0), 1e6;
    prob.max_iterations = 300;

    const fit::FitResult res = fit::levenberg_marquardt(prob);

    TwoToneResult out;
    out.omega0 = std::exp(res.params[0]);
    out.t2 = std::exp(res.params[1]);
    out.kernel_amplitude = res.params[2];
    out.t1_closure_ratio = t1_closure_ratio;
    out.nc_eff = nc_effective(out.omega0, out.t2, t1_closure_ratio * out.t2);
    const fit::Vector se = res.std_errors();
    out.sigma_omega0 = out.omega0 * se[0];
    out.sigma_t2 = out.t2 * se[1];
    out.residual_rms = std::sqrt(2.0 * res.cost / double(m_total));
    if (single_detuning)
        out.warnings.push_back(
            "single detuning: omega0 and t2 are individually degenerate; only "
            "nc_eff and the saturation rate at this detuning are constrained");

    for (const auto& scan : scans) {
        TwoToneProbeCurve curve;
        curve.f_probe = scan.f_probe;
        curve.detuning_hz = scan.f_probe - f_pump;
        for (const auto& pt : scan.points) {
            const TwoTonePrediction pred = twotone_forward(
                pt.n_pump, f_pump, scan.f_probe, p, out.omega0, out.t2,
                t1_closure_ratio * out.t2, out.kernel_amplitude);
            curve.qi_curve.push_back(pred.q_i);
            curve.shift_curve_hz.push_back(pred.shift_hz);
        }
        out.per_probe.push_back(std::move(curve));
    }
    out.validate();
    return out;
}

}  // namespace sawkit::loss
