#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sawkit/domain.hpp"
#include "sawkit/errors.hpp"
#include "sawkit/fit_engine.hpp"

// Extraction of (f0, Q_l, Q_i, Q_c) from one-port complex reflection traces:
// background removal, algebraic circle fit, phase-versus-frequency fit, Q
// decomposition, and a final full-model polish for uncertainties.

namespace sawkit::extract {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct CircleParams {
    std::complex<double> center;
    double radius = 0.0;
    double taubin_residual = 0.0;  // RMS point-to-circle distance

    void validate() const {
        if (!(radius > 0.0) || !(taubin_residual >= 0.0))
            throw DomainError("CircleParams: radius must be > 0 and residual >= 0");
    }
};

/// Instrument response multiplying the resonator signal:
/// amplitude * exp(i (phase_offset - 2 pi f cable_delay_tau)).
struct BackgroundModel {
    double amplitude = 1.0;
    double phase_offset = 0.0;   // rad, extrapolated to f = 0
    double cable_delay_tau = 0.0;  // s

    void validate() const {
        if (!(amplitude > 0.0) || !std::isfinite(phase_offset) ||
            !std::isfinite(cable_delay_tau))
            throw DomainError("BackgroundModel: amplitude must be > 0 and fields finite");
    }
};

namespace detail {

inline std::vector<double> magnitudes(const ComplexTrace& t) {
    std::vector<double> m(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) m[i] = std::abs(t.s11[i]);
    return m;
}

/// 5-point running median; ends fall back to narrower windows.
inline std::vector<double> median5(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<double> out(n);
    std::vector<double> w;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= 2 ? i - 2 : 0;
        const std::size_t hi = std::min(i + 3, n);
        w.assign(v.begin() + lo, v.begin() + hi);
        std::nth_element(w.begin(), w.begin() + w.size() / 2, w.end());
        out[i] = w[w.size() / 2];
    }
    return out;
}

/// Sequential phase unwrap: removes 2 pi jumps between neighbours.
inline std::vector<double> unwrap(const std::vector<double>& angles) {
    std::vector<double> out(angles.size());
    if (angles.empty()) return out;
    out[0] = angles[0];
    for (std::size_t i = 1; i < angles.size(); ++i) {
        double d = angles[i] - angles[i - 1];
        d -= kTwoPi * std::round(d / kTwoPi);
        out[i] = out[i - 1] + d;
    }
    return out;
}

struct DipEstimate {
    bool found = false;
    std::size_t index = 0;      // grid index of the dip minimum
    double f0 = 0.0;            // Hz
    double linewidth = 0.0;     // Hz, half-depth width
    double depth = 0.0;         // baseline - minimum, magnitude units
    double baseline = 0.0;
};

/// Locates the deepest magnitude dip and measures its half-depth width.
inline DipEstimate estimate_dip(const std::vector<double>& freqs,
                                const std::vector<double>& mag) {
    DipEstimate dip;
    const std::size_t n = mag.size();
    if (n < 5) return dip;
    const std::vector<double> smooth = median5(mag);
    // Baseline from the outer fifth of the trace on each side.
    std::vector<double> outer;
    const std::size_t edge = std::max<std::size_t>(n / 10, 2);
    outer.insert(outer.end(), smooth.begin(), smooth.begin() + edge);
    outer.insert(outer.end(), smooth.end() - edge, smooth.end());
    std::nth_element(outer.begin(), outer.begin() + outer.size() / 2, outer.end());
    dip.baseline = outer[outer.size() / 2];

    std::size_t imin = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (smooth[i] < smooth[imin]) imin = i;
    dip.depth = dip.baseline - smooth[imin];
    if (!(dip.depth > 0.02 * std::max(dip.baseline, 1e-30))) return dip;  // no mode

    const double half_level = dip.baseline - 0.5 * dip.depth;
    double f_left = freqs.front(), f_right = freqs.back();
    bool left_found = false, right_found = false;
    for (std::size_t i = imin; i-- > 0;) {
        if (smooth[i] >= half_level) {
            const double t = (half_level - smooth[i]) / (smooth[i + 1] - smooth[i]);
            f_left = freqs[i] + t * (freqs[i + 1] - freqs[i]);
            left_found = true;
            break;
        }
    }
    for (std::size_t i = imin + 1; i < n; ++i) {
        if (smooth[i] >= half_level) {
            const double t = (half_level - smooth[i - 1]) / (smooth[i] - smooth[i - 1]);
            f_right = freqs[i - 1] + t * (freqs[i] - freqs[i - 1]);
            right_found = true;
            break;
        }
    }
    dip.found = true;
    dip.index = imin;
    dip.f0 = freqs[imin];
    if (left_found && right_found) {
        dip.linewidth = f_right - f_left;
    } else {
        // Dip truncated by the window: report a width that forces the
        // insufficient-span error upstream.
        dip.linewidth = freqs.back() - freqs.front();
    }
    return dip;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Circle fit (Taubin algebraic fit, SVD formulation)
// ---------------------------------------------------------------------------

inline CircleParams circle_fit(const std::vector<std::complex<double>>& points) {
    const std::size_t n = points.size();
    if (n < 3) throw DomainError("circle_fit: need at least 3 points");
    double mx = 0.0, my = 0.0;
    for (const auto& p : points) {
        mx += p.real();
        my += p.imag();
    }
    mx /= double(n);
    my /= double(n);

    double z_mean = 0.0;
    Eigen::MatrixXd m(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = points[i].real() - mx;
        const double v = points[i].imag() - my;
        const double z = u * u + v * v;
        m(Eigen::Index(i), 1) = u;
        m(Eigen::Index(i), 2) = v;
        m(Eigen::Index(i), 0) = z;
        z_mean += z;
    }
    z_mean /= double(n);
    if (!(z_mean > 0.0))
        throw DegenerateGeometryError("circle_fit: all points coincide");
    const double scale = 2.0 * std::sqrt(z_mean);
    for (std::size_t i = 0; i < n; ++i)
        m(Eigen::Index(i), 0) = (m(Eigen::Index(i), 0) - z_mean) / scale;

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinV);
    const Eigen::Vector3d v_min = svd.matrixV().col(2);
    const double a = v_min[0] / scale;
    const double b = v_min[1];
    const double c = v_min[2];
    const double d = -z_mean * a;

    const double spread = std::sqrt(z_mean);
    if (std::abs(a) * spread < 1e-9 * std::hypot(b, c))
        throw DegenerateGeometryError(
            "circle_fit: points are collinear (no finite circle)");

    CircleParams circle;
    circle.center = std::complex<double>(mx - b / (2.0 * a), my - c / (2.0 * a));
    circle.radius = std::sqrt(b * b + c * c - 4.0 * a * d) / (2.0 * std::abs(a));
    double ss = 0.0;
    for (const auto& p : points) {
        const double dev = std::abs(p - circle.center) - circle.radius;
        ss += dev * dev;
    }
    circle.taubin_residual = std::sqrt(ss / double(n));
    circle.validate();
    return circle;
}

// ---------------------------------------------------------------------------
// Phase-versus-frequency fit
// ---------------------------------------------------------------------------

struct PhaseFitResult {
    double f0 = 0.0;
    double q_l = 0.0;
    double theta0 = 0.0;  // phase of (S11 - center) at resonance
    double sigma_f0 = 0.0;
    double sigma_q_l = 0.0;
    double residual_rms = 0.0;  // rad
};

namespace detail {

/// Fits theta(f) = theta0 + 2 atan(2 Q_l (1 - f/f0)) to the unwrapped phase
/// of (S11 - center).
inline PhaseFitResult phase_fit_impl(const std::vector<double>& freqs,
                                     const std::vector<std::complex<double>>& s11,
                                     const CircleParams& circle,
                                     const DipEstimate& dip) {
    const std::size_t n = freqs.size();
    std::vector<double> raw(n);
    for (std::size_t i = 0; i < n; ++i) raw[i] = std::arg(s11[i] - circle.center);
    const std::vector<double> theta = unwrap(raw);

    const std::size_t i0 = dip.found ? dip.index : n / 2;
    const double f0_init = freqs[i0];
    const double lw = dip.found && dip.linewidth > 0.0
                          ? dip.linewidth
                          : (freqs.back() - freqs.front()) / 10.0;
    const double ql_init = std::max(f0_init / lw, 1.0);

    fit::FitProblem prob;
    prob.residual_fn = [&](const fit::Vector& p) -> fit::Vector {
        fit::Vector r(n);
        for (std::size_t i = 0; i < n; ++i)
            r[Eigen::Index(i)] =
                p[0] + 2.0 * std::atan(2.0 * p[2] * (1.0 - freqs[i] / p[1])) - theta[i];
        return r;
    };
    prob.jacobian_fn = [&](const fit::Vector& p) -> fit::Matrix {
        fit::Matrix jac(n, 3);
        for (std::size_t i = 0; i < n; ++i) {
            const double x = 1.0 - freqs[i] / p[1];
            const double u = 2.0 * p[2] * x;
            const double g = 2.0 / (1.0 + u * u);
            jac(Eigen::Index(i), 0) = 1.0;
            jac(Eigen::Index(i), 1) = g * 2.0 * p[2] * freqs[i] / (p[1] * p[1]);
            jac(Eigen::Index(i), 2) = g * 2.0 * x;
        }
        return jac;
    };
    prob.initial_params = fit::Vector(3);
    prob.initial_params << theta[i0], f0_init, ql_init;
    prob.lower_bounds = fit::Vector(3);
    prob.lower_bounds << -fit::kInf, freqs.front(), 0.1;
    prob.upper_bounds = fit::Vector(3);
    prob.upper_bounds << fit::kInf, freqs.back(), 1e12;
    prob.max_iterations = 300;

    const fit::FitResult res = fit::levenberg_marquardt(prob);
    if (res.convergence_reason == fit::ConvergenceReason::max_iter)
        throw ConvergenceError("phase_fit: optimizer hit the iteration limit",
                               std::sqrt(2.0 * res.cost / double(n)));
    PhaseFitResult out;
    out.theta0 = res.params[0];
    out.f0 = res.params[1];
    out.q_l = res.params[2];
    const fit::Vector se = res.std_errors();
    out.sigma_f0 = se[1];
    out.sigma_q_l = se[2];
    out.residual_rms = std::sqrt(2.0 * res.cost / double(n));
    return out;
}

}  // namespace detail

inline PhaseFitResult phase_fit(const ComplexTrace& trace, const CircleParams& circle) {
    trace.validate();
    circle.validate();
    const detail::DipEstimate dip =
        detail::estimate_dip(trace.frequencies, detail::magnitudes(trace));
    return detail::phase_fit_impl(trace.frequencies, trace.s11, circle, dip);
}

// ---------------------------------------------------------------------------
// Background removal
// ---------------------------------------------------------------------------

/// Divides out an explicitly supplied background model.
inline ComplexTrace remove_background(const ComplexTrace& trace,
                                      const BackgroundModel& model) {
    trace.validate();
    model.validate();
    ComplexTrace out = trace;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double arg = kTwoPi * out.frequencies[i] * model.cable_delay_tau -
                           model.phase_offset;
        out.s11[i] *= std::complex<double>(std::cos(arg), std::sin(arg)) /
                      model.amplitude;
    }
    return out;
}

/// Re-applies a background model (exact inverse of removal).
inline ComplexTrace apply_background(const ComplexTrace& trace,
                                     const BackgroundModel& model) {
    trace.validate();
    model.validate();
    ComplexTrace out = trace;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double arg = model.phase_offset -
                           kTwoPi * out.frequencies[i] * model.cable_delay_tau;
        out.s11[i] *= model.amplitude *
                      std::complex<double>(std::cos(arg), std::sin(arg));
    }
    return out;
}

namespace detail {

inline std::vector<std::complex<double>> dewarp(const std::vector<double>& freqs,
                                                const std::vector<std::complex<double>>& s,
                                                double tau) {
    std::vector<std::complex<double>> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double arg = kTwoPi * freqs[i] * tau;
        out[i] = s[i] * std::complex<double>(std::cos(arg), std::sin(arg));
    }
    return out;
}

/// Delay first guess: per-segment linear fits of unwrapped off-resonant
/// phase versus frequency, combined by inverse-variance weight. Segments are
/// the maximal contiguous masked runs, so unwrapping never crosses the dip.
inline double delay_linear_estimate(const std::vector<double>& freqs,
                                    const std::vector<std::complex<double>>& s,
                                    const std::vector<bool>& mask) {
    double weight_sum = 0.0, tau_sum = 0.0;
    std::size_t i = 0;
    const std::size_t n = freqs.size();
    while (i < n) {
        if (!mask[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < n && mask[j]) ++j;
        if (j - i >= 3) {
            std::vector<double> ph(j - i);
            for (std::size_t k = i; k < j; ++k) ph[k - i] = std::arg(s[k]);
            const std::vector<double> u = unwrap(ph);
            double fm = 0.0, pm = 0.0;
            for (std::size_t k = 0; k < u.size(); ++k) {
                fm += freqs[i + k];
                pm += u[k];
            }
            fm /= double(u.size());
            pm /= double(u.size());
            double sxx = 0.0, sxy = 0.0;
            for (std::size_t k = 0; k < u.size(); ++k) {
                const double dx = freqs[i + k] - fm;
                sxx += dx * dx;
                sxy += dx * (u[k] - pm);
            }
            if (sxx > 0.0) {
                tau_sum += -sxy / (kTwoPi * sxx) * sxx;  // weight = sxx
                weight_sum += sxx;
            }
        }
        i = j;
    }
    return weight_sum > 0.0 ? tau_sum / weight_sum : 0.0;
}

/// Circle-fit RMS residual of the trace dewarped by tau; the objective that
/// the delay refinement minimizes.
inline double dewarped_circle_residual(const std::vector<double>& freqs,
                                       const std::vector<std::complex<double>>& s,
                                       double tau) {
    try {
        return circle_fit(dewarp(freqs, s, tau)).taubin_residual;
    } catch (const Error&) {
        return std::numeric_limits<double>::max();
    }
}

/// Coarse scan plus golden-section refinement of the delay. The linear
/// estimate is biased by the resonance's own phase tail, so it only anchors
/// the search window.
inline double refine_delay(const std::vector<double>& freqs,
                           const std::vector<std::complex<double>>& s,
                           double tau_init) {
    const double span = freqs.back() - freqs.front();
    const double window = std::max(0.25 / span, std::abs(tau_init));
    double lo = tau_init - window, hi = tau_init + window;

    const int coarse = 33;
    double best = tau_init, best_val = std::numeric_limits<double>::max();
    for (int i = 0; i < coarse; ++i) {
        const double t = lo + (hi - lo) * i / (coarse - 1);
        const double v = dewarped_circle_residual(freqs, s, t);
        if (v < best_val) {
            best_val = v;
            best = t;
        }
    }
    const double seg = (hi - lo) / (coarse - 1);
    double a = best - seg, b = best + seg;
    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - gr * (b - a), d = a + gr * (b - a);
    double fc = dewarped_circle_residual(freqs, s, c);
    double fd = dewarped_circle_residual(freqs, s, d);
    for (int it = 0; it < 60 && (b - a) > 1e-18; ++it) {
        if (fc < fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = dewarped_circle_residual(freqs, s, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = dewarped_circle_residual(freqs, s, d);
        }
    }
    return 0.5 * (a + b);
}

/// Closed-form stage results that seed the full-model fit. Circle and phase
/// values are expressed in the normalized plane (trace divided by the staged
/// background), where an ideal trace sits at 1 + 0i off resonance.
struct StagedEstimate {
    BackgroundModel background;
    bool has_dip = false;
    CircleParams circle;
    PhaseFitResult phase;
    DipEstimate dip;
};

/// Stages: dip location, cable delay from the off-resonant phase slope
/// refined by minimizing the circle-fit residual, then amplitude and phase
/// from the circle's off-resonant point.
inline StagedEstimate stage_background(const ComplexTrace& trace) {
    if (trace.frequencies.size() != trace.s11.size())
        throw DomainError("remove_background: array length mismatch");
    if (trace.size() < 9)
        throw InsufficientSpanError(
            "remove_background: " + std::to_string(trace.size()) +
            " points are too few to separate background from resonance (need >= 9)");
    trace.validate();

    const std::vector<double>& freqs = trace.frequencies;
    const std::vector<double> mag = magnitudes(trace);
    StagedEstimate st;
    st.dip = estimate_dip(freqs, mag);

    std::vector<bool> mask(trace.size(), true);
    if (st.dip.found) {
        const double span = trace.span();
        const double required = 5.0 * st.dip.linewidth;
        if (span < required)
            throw InsufficientSpanError(
                "remove_background: trace spans " + std::to_string(span) +
                " Hz but background estimation needs >= " + std::to_string(required) +
                " Hz (5 estimated linewidths)");
        std::size_t masked = 0;
        for (std::size_t i = 0; i < trace.size(); ++i) {
            mask[i] = std::abs(freqs[i] - st.dip.f0) >= 2.5 * st.dip.linewidth;
            masked += mask[i];
        }
        if (masked < std::max<std::size_t>(6, trace.size() / 10)) {
            // Dip too wide relative to the window; fall back to the outer
            // quarter of points on each side.
            const std::size_t edge = std::max<std::size_t>(trace.size() / 4, 3);
            for (std::size_t i = 0; i < trace.size(); ++i)
                mask[i] = i < edge || i >= trace.size() - edge;
        }
    }

    const double tau_init = delay_linear_estimate(freqs, trace.s11, mask);
    BackgroundModel& model = st.background;
    if (st.dip.found) {
        model.cable_delay_tau = refine_delay(freqs, trace.s11, tau_init);
        const std::vector<std::complex<double>> flat =
            dewarp(freqs, trace.s11, model.cable_delay_tau);
        const CircleParams circle = circle_fit(flat);
        const PhaseFitResult ph = phase_fit_impl(freqs, flat, circle, st.dip);
        // Off-resonant point of the circle is the background phasor.
        const std::complex<double> p_off =
            circle.center - circle.radius * std::complex<double>(std::cos(ph.theta0),
                                                                 std::sin(ph.theta0));
        model.amplitude = std::abs(p_off);
        model.phase_offset = std::arg(p_off);
        if (!(model.amplitude > 0.0))
            throw UnphysicalFitError("remove_background: estimated amplitude is zero");
        // Map circle and phase into the normalized plane.
        const std::complex<double> rot =
            std::complex<double>(std::cos(model.phase_offset),
                                 -std::sin(model.phase_offset)) /
            model.amplitude;
        st.has_dip = true;
        st.circle = circle;
        st.circle.center *= rot;
        st.circle.radius /= model.amplitude;
        st.circle.taubin_residual /= model.amplitude;
        st.phase = ph;
        st.phase.theta0 -= model.phase_offset;
    } else {
        // No resonance visible: background is the trace itself.
        model.cable_delay_tau = tau_init;
        const std::vector<std::complex<double>> flat =
            dewarp(freqs, trace.s11, tau_init);
        std::complex<double> mean(0.0, 0.0);
        for (const auto& v : flat) mean += v;
        mean /= double(flat.size());
        model.amplitude = std::abs(mean);
        model.phase_offset = std::arg(mean);
        if (!(model.amplitude > 0.0))
            throw UnphysicalFitError("remove_background: estimated amplitude is zero");
    }
    return st;
}

/// Six-parameter one-port model with the background phase referenced to
/// f_center: p = {amplitude, phase at f_center, tau, f0, Q_l, Q_c}.
inline std::complex<double> model_s11(const double* p, double f, double f_center) {
    const double arg = p[1] - kTwoPi * (f - f_center) * p[2];
    const std::complex<double> bg =
        p[0] * std::complex<double>(std::cos(arg), std::sin(arg));
    const std::complex<double> den(1.0, 2.0 * p[4] * (f - p[3]) / p[3]);
    return bg * (1.0 - (2.0 * p[4] / p[5]) / den);
}

/// Full-model least-squares problem over stacked (Re, Im) residuals, with
/// analytic Jacobian. The data are copied in so the problem owns them.
inline fit::FitProblem build_polish_problem(std::vector<double> freqs,
                                            std::vector<std::complex<double>> s11,
                                            const BackgroundModel& bg, double f0,
                                            double q_l, double q_c,
                                            double f_center) {
    const std::size_t n = freqs.size();
    fit::FitProblem prob;
    prob.residual_fn = [freqs, s11, f_center, n](const fit::Vector& p) -> fit::Vector {
        fit::Vector r(2 * n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::complex<double> diff =
                model_s11(p.data(), freqs[i], f_center) - s11[i];
            r[Eigen::Index(2 * i)] = diff.real();
            r[Eigen::Index(2 * i + 1)] = diff.imag();
        }
        return r;
    };
    prob.jacobian_fn = [freqs, f_center, n](const fit::Vector& p) -> fit::Matrix {
        fit::Matrix jac(2 * n, 6);
        for (std::size_t i = 0; i < n; ++i) {
            const double f = freqs[i];
            const double arg = p[1] - kTwoPi * (f - f_center) * p[2];
            const std::complex<double> bg_val =
                p[0] * std::complex<double>(std::cos(arg), std::sin(arg));
            const std::complex<double> den(1.0, 2.0 * p[4] * (f - p[3]) / p[3]);
            const std::complex<double> den2 = den * den;
            const std::complex<double> lor = 1.0 - (2.0 * p[4] / p[5]) / den;
            const std::complex<double> m = bg_val * lor;
            const std::complex<double> im(0.0, 1.0);
            const std::complex<double> dm[6] = {
                m / p[0],
                im * m,
                -kTwoPi * (f - f_center) * im * m,
                bg_val * (2.0 * p[4] / p[5]) *
                    (im * -2.0 * p[4] * f / (p[3] * p[3])) / den2,
                bg_val * (-2.0 / p[5]) / den2,
                bg_val * (2.0 * p[4] / (p[5] * p[5])) / den,
            };
            for (int j = 0; j < 6; ++j) {
                jac(Eigen::Index(2 * i), j) = dm[j].real();
                jac(Eigen::Index(2 * i + 1), j) = dm[j].imag();
            }
        }
        return jac;
    };
    prob.initial_params = fit::Vector(6);
    prob.initial_params << bg.amplitude,
        std::remainder(bg.phase_offset - kTwoPi * f_center * bg.cable_delay_tau,
                       kTwoPi),
        bg.cable_delay_tau, f0, q_l, q_c;
    prob.lower_bounds = fit::Vector(6);
    prob.lower_bounds << 1e-12, -fit::kInf, -fit::kInf, freqs.front(), 0.1, 0.1;
    prob.upper_bounds = fit::Vector(6);
    prob.upper_bounds << fit::kInf, fit::kInf, fit::kInf, freqs.back(), 1e12, 1e12;
    prob.max_iterations = 200;
    return prob;
}

inline BackgroundModel background_from_params(const fit::Vector& p, double f_center) {
    BackgroundModel bg;
    bg.amplitude = p[0];
    bg.cable_delay_tau = p[2];
    bg.phase_offset = std::remainder(p[1] + kTwoPi * f_center * p[2], kTwoPi);
    return bg;
}

}  // namespace detail

/// Estimates and removes the instrument background. The closed-form stages
/// seed a full six-parameter model fit whose background component is what
/// gets returned; the staged estimate is kept if that fit does not converge.
inline std::pair<ComplexTrace, BackgroundModel> remove_background(
    const ComplexTrace& trace) {
    const detail::StagedEstimate st = detail::stage_background(trace);
    BackgroundModel model = st.background;
    if (st.has_dip) {
        const double f_center =
            0.5 * (trace.frequencies.front() + trace.frequencies.back());
        const double ratio = std::min(st.circle.radius, 0.999);
        const fit::FitProblem prob = detail::build_polish_problem(
            trace.frequencies, trace.s11, model, st.phase.f0, st.phase.q_l,
            st.phase.q_l / ratio, f_center);
        try {
            const fit::FitResult res = fit::levenberg_marquardt(prob);
            if (res.convergence_reason != fit::ConvergenceReason::max_iter)
                model = detail::background_from_params(res.params, f_center);
        } catch (const Error&) {
            // Keep the staged estimate.
        }
    }
    return {remove_background(trace, model), model};
}

// ---------------------------------------------------------------------------
// Q decomposition
// ---------------------------------------------------------------------------

/// Splits the loaded Q using the circle diameter: Q_c = Q_l * amplitude /
/// radius, 1/Q_i = 1/Q_l - 1/Q_c. The circle must come from a trace on the
/// same scale as the background amplitude.
inline std::pair<double, double> decompose_q(const CircleParams& circle, double q_l,
                                             const BackgroundModel& background) {
    circle.validate();
    background.validate();
    if (!(q_l > 0.0)) throw DomainError("decompose_q: Q_l must be > 0");
    const double ratio = circle.radius / background.amplitude;
    if (ratio >= 1.0)
        throw UnphysicalFitError(
            "decompose_q: circle radius " + std::to_string(circle.radius) +
            " >= background amplitude " + std::to_string(background.amplitude) +
            " (over-unity dip); re-estimate the background");
    const double q_c = q_l / ratio;
    const double q_i = q_l / (1.0 - ratio);
    return {q_i, q_c};
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

struct FitResonanceOptions {
    std::optional<BackgroundModel> background;  // skip estimation when given
    int bootstrap_resamples = 0;                // 0 = covariance only
    std::uint64_t seed = 0;                     // bootstrap seed
    bool polish = true;  // final full-model fit of all six parameters
};

/// Full extraction pipeline. Stages: background removal, Taubin circle fit,
/// phase fit, Q decomposition, then (by default) a polish fit of the complete
/// six-parameter complex model that also supplies the covariance-based
/// uncertainties. Optional residual bootstrap replaces those uncertainties.
inline ResonanceFit fit_resonance(const ComplexTrace& trace,
                                  const FitResonanceOptions& options = {}) {
    trace.validate();
    BackgroundModel bg;
    CircleParams circle;
    PhaseFitResult phase;
    bool have_stages = false;
    if (options.background) {
        bg = *options.background;
    } else {
        const detail::StagedEstimate st = detail::stage_background(trace);
        bg = st.background;
        if (st.has_dip) {
            circle = st.circle;
            phase = st.phase;
            have_stages = true;
        }
    }
    const ComplexTrace norm = remove_background(trace, bg);
    if (!have_stages) {
        circle = circle_fit(norm.s11);
        const detail::DipEstimate dip =
            detail::estimate_dip(norm.frequencies, detail::magnitudes(norm));
        phase = detail::phase_fit_impl(norm.frequencies, norm.s11, circle, dip);
    }
    const BackgroundModel unit_bg;  // normalized trace has unit background
    const auto [q_i0, q_c0] = decompose_q(circle, phase.q_l, unit_bg);

    ResonanceFit fit;
    fit.f0 = phase.f0;
    fit.q_l = phase.q_l;
    fit.q_i = q_i0;
    fit.q_c = q_c0;
    fit.circle_center = circle.center;
    fit.circle_radius = circle.radius;
    fit.sigma.f0 = phase.sigma_f0;
    fit.sigma.q_l = phase.sigma_q_l;

    const std::vector<double>& freqs = trace.frequencies;
    const std::size_t n = trace.size();
    const double f_center = 0.5 * (freqs.front() + freqs.back());

    if (options.polish) {
        const fit::FitProblem prob = detail::build_polish_problem(
            freqs, trace.s11, bg, phase.f0, phase.q_l, q_c0, f_center);
        fit::FitResult res = fit::levenberg_marquardt(prob);
        if (res.convergence_reason == fit::ConvergenceReason::max_iter)
            throw ConvergenceError("fit_resonance: polish stage hit iteration limit",
                                   std::sqrt(res.cost / double(n)));
        fit::Vector se = res.std_errors();
        if (options.bootstrap_resamples > 0) {
            const fit::BootstrapResult bs = fit::bootstrap_uncertainty(
                prob, res, options.bootstrap_resamples, options.seed);
            se = bs.std_errors;
        }
        const double q_l = res.params[4];
        const double q_c = res.params[5];
        if (!(q_c > q_l))
            throw UnphysicalFitError(
                "fit_resonance: polished fit implies negative internal loss "
                "(Q_c <= Q_l); re-estimate the background");
        fit.f0 = res.params[3];
        fit.q_l = q_l;
        fit.q_c = q_c;
        fit.q_i = 1.0 / (1.0 / q_l - 1.0 / q_c);
        fit.sigma.f0 = se[3];
        fit.sigma.q_l = se[4];
        // Delta method for Q_i = (1/Q_l - 1/Q_c)^-1 and sigma(Q_c).
        const double dqi_dql = fit.q_i * fit.q_i / (q_l * q_l);
        const double dqi_dqc = -fit.q_i * fit.q_i / (q_c * q_c);
        const double var_ql = res.covariance(4, 4);
        const double var_qc = res.covariance(5, 5);
        const double cov_lc = res.covariance(4, 5);
        double var_qi = dqi_dql * dqi_dql * var_ql + dqi_dqc * dqi_dqc * var_qc +
                        2.0 * dqi_dql * dqi_dqc * cov_lc;
        if (options.bootstrap_resamples > 0) {
            // Bootstrap gives marginal errors only; drop the covariance term.
            var_qi = dqi_dql * dqi_dql * se[4] * se[4] +
                     dqi_dqc * dqi_dqc * se[5] * se[5];
        }
        fit.sigma.q_i = std::sqrt(std::max(var_qi, 0.0));
        fit.sigma.q_c = se[5];
        fit.residual_rms = std::sqrt(res.cost / double(n));

        // Re-derive the normalized-plane circle from the polished background.
        const BackgroundModel polished_bg =
            detail::background_from_params(res.params, f_center);
        const ComplexTrace renorm = remove_background(trace, polished_bg);
        const CircleParams final_circle = circle_fit(renorm.s11);
        fit.circle_center = final_circle.center;
        fit.circle_radius = final_circle.radius;
        double min_mag = std::numeric_limits<double>::max();
        for (const auto& s : renorm.s11) min_mag = std::min(min_mag, std::abs(s));
        fit.dip_consistency =
            std::abs((1.0 - 2.0 * final_circle.radius) - min_mag);
    } else {
        // Propagate sigma(Q_l) through the decomposition at fixed radius.
        const double ratio = circle.radius;  // amplitude is 1 on the normalized trace
        fit.sigma.q_c = phase.sigma_q_l / ratio;
        fit.sigma.q_i = phase.sigma_q_l / (1.0 - ratio);
        double ss = 0.0;
        double min_mag = std::numeric_limits<double>::max();
        for (std::size_t i = 0; i < n; ++i) {
            const double dev = std::abs(norm.s11[i] - circle.center) - circle.radius;
            ss += dev * dev;
            min_mag = std::min(min_mag, std::abs(norm.s11[i]));
        }
        fit.residual_rms = std::sqrt(ss / double(n));
        fit.dip_consistency = std::abs((1.0 - 2.0 * circle.radius) - min_mag);
    }

    fit.validate(std::make_pair(freqs.front(), freqs.back()));
    return fit;
}

// ---------------------------------------------------------------------------
// Multi-mode extraction
// ---------------------------------------------------------------------------

namespace detail {

struct DetectedDip {
    std::size_t index;
    double f0;
    double linewidth;
};

/// Finds every local magnitude dip deeper than both a relative floor and a
/// noise-scaled threshold.
inline std::vector<DetectedDip> detect_dips(const std::vector<double>& freqs,
                                            const std::vector<double>& mag) {
    const std::size_t n = mag.size();
    const std::vector<double> smooth = median5(mag);
    std::vector<double> sorted = smooth;
    std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
    const double baseline = sorted[n / 2];
    std::vector<double> dev(n);
    for (std::size_t i = 0; i < n; ++i) dev[i] = std::abs(mag[i] - smooth[i]);
    std::nth_element(dev.begin(), dev.begin() + n / 2, dev.end());
    const double noise = 1.4826 * dev[n / 2];
    const double threshold = baseline - std::max(0.08 * baseline, 6.0 * noise);

    const std::size_t halo = std::max<std::size_t>(3, n / 400);
    std::vector<DetectedDip> dips;
    for (std::size_t i = 0; i < n; ++i) {
        if (smooth[i] >= threshold) continue;
        bool is_min = true;
        for (std::size_t j = i > halo ? i - halo : 0; j <= std::min(i + halo, n - 1);
             ++j)
            if (smooth[j] < smooth[i]) {
                is_min = false;
                break;
            }
        if (!is_min) continue;
        if (!dips.empty() && i - dips.back().index <= halo) continue;  // same dip
        // Half-depth width around this minimum.
        const double depth = baseline - smooth[i];
        const double half_level = baseline - 0.5 * depth;
        double f_left = freqs.front(), f_right = freqs.back();
        for (std::size_t j = i; j-- > 0;)
            if (smooth[j] >= half_level) {
                f_left = freqs[j];
                break;
            }
        for (std::size_t j = i + 1; j < n; ++j)
            if (smooth[j] >= half_level) {
                f_right = freqs[j];
                break;
            }
        dips.push_back({i, freqs[i], f_right - f_left});
    }
    return dips;
}

}  // namespace detail

/// Fits every resonance in a multi-mode trace. Each detected dip is fit in a
/// window of +-max(5 linewidths, FSR/3), clipped to half the detected mode
/// spacing so neighbouring dips stay out. A second pass then divides each
/// window by the other modes' fitted responses and refits, which demotes the
/// bias from neighbouring tails to second order.
inline std::vector<ResonanceFit> fit_all_resonances(
    const ComplexTrace& trace, const FitResonanceOptions& options = {}) {
    trace.validate();
    const std::vector<double>& freqs = trace.frequencies;
    const std::vector<detail::DetectedDip> dips =
        detail::detect_dips(freqs, detail::magnitudes(trace));
    if (dips.empty())
        throw InsufficientSpanError(
            "fit_all_resonances: no resonance dips detected in the trace");

    double fsr_est = std::numeric_limits<double>::infinity();
    if (dips.size() > 1) {
        std::vector<double> spacing;
        for (std::size_t i = 1; i < dips.size(); ++i)
            spacing.push_back(dips[i].f0 - dips[i - 1].f0);
        std::nth_element(spacing.begin(), spacing.begin() + spacing.size() / 2,
                         spacing.end());
        fsr_est = spacing[spacing.size() / 2];
    }

    std::vector<ComplexTrace> windows;
    std::vector<ResonanceFit> fits;
    for (const auto& dip : dips) {
        double half = std::max(5.0 * dip.linewidth,
                               std::isfinite(fsr_est) ? fsr_est / 3.0 : 0.0);
        if (std::isfinite(fsr_est)) half = std::min(half, 0.495 * fsr_est);
        const double lo = dip.f0 - half, hi = dip.f0 + half;
        ComplexTrace window;
        window.drive_power_dbm = trace.drive_power_dbm;
        window.temperature_K = trace.temperature_K;
        window.label = trace.label;
        for (std::size_t i = 0; i < trace.size(); ++i) {
            if (freqs[i] < lo || freqs[i] > hi) continue;
            window.frequencies.push_back(freqs[i]);
            window.s11.push_back(trace.s11[i]);
        }
        if (window.size() < 12) continue;  // not enough points to fit reliably
        fits.push_back(fit_resonance(window, options));
        windows.push_back(std::move(window));
    }
    if (fits.empty())
        throw InsufficientSpanError(
            "fit_all_resonances: no dip had a wide enough window to fit");

    for (std::size_t w = 0; w < windows.size() && fits.size() > 1; ++w) {
        ComplexTrace peeled = windows[w];
        for (std::size_t i = 0; i < peeled.size(); ++i) {
            const double f = peeled.frequencies[i];
            for (std::size_t k = 0; k < fits.size(); ++k) {
                if (k == w) continue;
                const std::complex<double> den(
                    1.0, 2.0 * fits[k].q_l * (f - fits[k].f0) / fits[k].f0);
                peeled.s11[i] /= 1.0 - (2.0 * fits[k].q_l / fits[k].q_c) / den;
            }
        }
        try {
            fits[w] = fit_resonance(peeled, options);
        } catch (const Error&) {
            // Keep the first-pass fit for this window.
        }
    }
    return fits;
}

}  // namespace sawkit::extract
