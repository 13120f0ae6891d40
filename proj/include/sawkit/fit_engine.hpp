#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sawkit/errors.hpp"

// Shared numerical machinery: bounded Levenberg-Marquardt least squares with
// covariance, complex digamma, finite-difference Jacobians, and residual
// bootstrap. All routines are pure given their inputs; randomized ones are
// bit-reproducible for a fixed seed.

namespace sawkit::fit {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using ResidualFn = std::function<Vector(const Vector&)>;
using JacobianFn = std::function<Matrix(const Vector&)>;

constexpr double kInf = std::numeric_limits<double>::infinity();

namespace detail {

inline std::string format_params(const Vector& p) {
    std::ostringstream os;
    os << "[";
    for (Eigen::Index i = 0; i < p.size(); ++i) os << (i ? ", " : "") << p[i];
    os << "]";
    return os.str();
}

inline Vector eval_checked(const ResidualFn& fn, const Vector& p) {
    Vector r = fn(p);
    if (!r.allFinite())
        throw EvaluationError("residual function returned a non-finite value at params " +
                              format_params(p));
    return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Finite-difference Jacobian
// ---------------------------------------------------------------------------

/// Central-difference Jacobian with per-parameter step scale*max(|p_j|, 1).
inline Matrix numerical_jacobian(const ResidualFn& fn, const Vector& params,
                                 double scale = 1e-6,
                                 const Vector* lower = nullptr,
                                 const Vector* upper = nullptr) {
    if (!(scale > 0.0)) throw DomainError("numerical_jacobian: scale must be > 0");
    Vector p = params;
    const Eigen::Index n = p.size();
    const Vector base = detail::eval_checked(fn, p);
    Matrix jac(base.size(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double step = scale * std::max(std::abs(p[j]), 1.0);
        const double save = p[j];
        // Probe points stay inside the box so residuals never see an
        // out-of-bounds parameter; the divisor follows the clipped span.
        double x_hi = save + step, x_lo = save - step;
        if (upper && x_hi > (*upper)[j]) x_hi = (*upper)[j];
        if (lower && x_lo < (*lower)[j]) x_lo = (*lower)[j];
        if (!(x_hi > x_lo)) {
            jac.col(j).setZero();
            continue;
        }
        p[j] = x_hi;
        Vector hi = detail::eval_checked(fn, p);
        p[j] = x_lo;
        Vector lo = detail::eval_checked(fn, p);
        p[j] = save;
        jac.col(j) = (hi - lo) / (x_hi - x_lo);
    }
    return jac;
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt
// ---------------------------------------------------------------------------

struct FitProblem {
    ResidualFn residual_fn;
    JacobianFn jacobian_fn;  // optional; finite differences when absent
    Vector initial_params;
    Vector lower_bounds;  // empty means unbounded
    Vector upper_bounds;
    int max_iterations = 200;
    // Gradient stop: |g_i| <= tol * ||J col i|| * ||r|| for every free
    // parameter (scale-invariant cosine test).
    double tolerance_gradient = 1e-10;
    // Step stop: |h_i| <= tol * (|x_i| + tol) for every parameter.
    double tolerance_step = 1e-12;
    double tolerance_cost = 0.0;  // 0 disables the cost-decrease stop
    double damping_init = 1e-3;   // initial mu multiplying diag(J^T J)
    double jacobian_step_scale = 1e-6;

    void validate() const {
        if (!residual_fn) throw DomainError("FitProblem: residual_fn not set");
        const Eigen::Index n = initial_params.size();
        if (n == 0) throw DomainError("FitProblem: empty initial_params");
        if (lower_bounds.size() != 0 && lower_bounds.size() != n)
            throw DomainError("FitProblem: lower_bounds size mismatch");
        if (upper_bounds.size() != 0 && upper_bounds.size() != n)
            throw DomainError("FitProblem: upper_bounds size mismatch");
        for (Eigen::Index i = 0; i < n; ++i) {
            const double lo = lower_bounds.size() ? lower_bounds[i] : -kInf;
            const double hi = upper_bounds.size() ? upper_bounds[i] : kInf;
            if (!(lo <= hi)) throw DomainError("FitProblem: bounds out of order");
            if (initial_params[i] < lo || initial_params[i] > hi)
                throw DomainError("FitProblem: initial params outside bounds");
        }
        if (!(tolerance_gradient > 0.0) || !(tolerance_step > 0.0) ||
            tolerance_cost < 0.0 || max_iterations <= 0)
            throw DomainError("FitProblem: tolerances must be positive");
    }
};

enum class ConvergenceReason { gradient, step, cost, max_iter };

inline const char* to_string(ConvergenceReason r) {
    switch (r) {
        case ConvergenceReason::gradient: return "gradient";
        case ConvergenceReason::step: return "step";
        case ConvergenceReason::cost: return "cost";
        case ConvergenceReason::max_iter: return "max_iter";
    }
    return "unknown";
}

struct FitResult {
    Vector params;
    Matrix covariance;  // sigma^2 (J^T J)^-1 with sigma^2 from residual variance
    double cost = 0.0;  // 0.5 * sum of squared residuals at params
    int iterations = 0;
    ConvergenceReason convergence_reason = ConvergenceReason::max_iter;
    double condition_number = 0.0;
    std::vector<double> cost_trace;       // initial cost plus each accepted cost
    std::vector<int> active_lower;        // parameter indices pinned at a bound
    std::vector<int> active_upper;

    Vector std_errors() const {
        Vector s(covariance.rows());
        for (Eigen::Index i = 0; i < s.size(); ++i)
            s[i] = std::sqrt(std::max(covariance(i, i), 0.0));
        return s;
    }
};

/// Damped least squares with Nielsen's adaptive damping update, Marquardt
/// diagonal scaling (so parameters of very different magnitudes coexist), and
/// bound handling by step projection. Covariance is sigma^2 (J^T J)^+ with
/// sigma^2 = 2 cost / max(m - n, 1) estimated from the final residuals.
inline FitResult levenberg_marquardt(const FitProblem& problem) {
    problem.validate();
    const Eigen::Index n = problem.initial_params.size();
    const Vector lb = problem.lower_bounds.size()
                          ? problem.lower_bounds
                          : Vector::Constant(n, -kInf);
    const Vector ub = problem.upper_bounds.size()
                          ? problem.upper_bounds
                          : Vector::Constant(n, kInf);
    auto clamp = [&](Vector v) {
        for (Eigen::Index i = 0; i < n; ++i) v[i] = std::min(std::max(v[i], lb[i]), ub[i]);
        return v;
    };
    auto jacobian = [&](const Vector& p) {
        return problem.jacobian_fn ? problem.jacobian_fn(p)
                                   : numerical_jacobian(problem.residual_fn, p,
                                                        problem.jacobian_step_scale,
                                                        &lb, &ub);
    };
    // Scale-invariant gradient test: the cosine of the angle between each
    // Jacobian column and the residual must fall below tolerance. Components
    // pointing out of an active bound cannot be followed and are skipped.
    auto gradient_converged = [&](const Vector& x, const Vector& g, const Matrix& jac_,
                                  const Vector& r_) {
        const double rn = r_.norm();
        if (rn == 0.0) return true;
        for (Eigen::Index i = 0; i < n; ++i) {
            double gi = g[i];
            if (x[i] <= lb[i] && gi > 0.0) gi = 0.0;
            if (x[i] >= ub[i] && gi < 0.0) gi = 0.0;
            const double cn = jac_.col(i).norm();
            if (cn > 0.0 && std::abs(gi) > problem.tolerance_gradient * cn * rn)
                return false;
        }
        return true;
    };
    auto step_converged = [&](const Vector& x, const Vector& h) {
        for (Eigen::Index i = 0; i < n; ++i)
            if (std::abs(h[i]) >
                problem.tolerance_step * (std::abs(x[i]) + problem.tolerance_step))
                return false;
        return true;
    };

    Vector x = clamp(problem.initial_params);
    Vector r = detail::eval_checked(problem.residual_fn, x);
    const Eigen::Index m = r.size();
    double cost = 0.5 * r.squaredNorm();

    Matrix jac = jacobian(x);
    Matrix normal = jac.transpose() * jac;
    Vector grad = jac.transpose() * r;

    FitResult result;
    result.cost_trace.push_back(cost);

    // Damping acts on diag(J^T J); zero columns get a floor so the damped
    // system stays positive definite.
    auto damping_diag = [&](const Matrix& a) {
        Vector d = a.diagonal();
        const double floor_value = std::max(d.maxCoeff(), 1.0) * 1e-12;
        for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = std::max(d[i], floor_value);
        return d;
    };

    double mu = problem.damping_init;
    double nu = 2.0;
    bool done = gradient_converged(x, grad, jac, r);
    if (done) result.convergence_reason = ConvergenceReason::gradient;

    int iter = 0;
    while (!done && iter < problem.max_iterations) {
        ++iter;
        const Vector damp = damping_diag(normal);
        Matrix damped = normal;
        damped.diagonal() += mu * damp;
        Vector step = damped.ldlt().solve(-grad);
        if (!step.allFinite()) {
            mu *= nu;
            nu *= 2.0;
            continue;
        }
        if (step_converged(x, step)) {
            result.convergence_reason = ConvergenceReason::step;
            done = true;
            break;
        }
        const Vector x_new = clamp(x + step);
        const Vector h = x_new - x;  // effective (projected) step
        Vector r_new = detail::eval_checked(problem.residual_fn, x_new);
        const double cost_new = 0.5 * r_new.squaredNorm();
        const double predicted = 0.5 * h.dot(mu * damp.asDiagonal() * h - grad);
        const double rho = predicted > 0.0 ? (cost - cost_new) / predicted : -1.0;

        if (rho > 0.0) {
            const double decrease = cost - cost_new;
            x = x_new;
            r = std::move(r_new);
            cost = cost_new;
            result.cost_trace.push_back(cost);
            jac = jacobian(x);
            normal = jac.transpose() * jac;
            grad = jac.transpose() * r;
            if (gradient_converged(x, grad, jac, r)) {
                result.convergence_reason = ConvergenceReason::gradient;
                done = true;
            } else if (problem.tolerance_cost > 0.0 &&
                       decrease <= problem.tolerance_cost * std::max(cost, 1e-300)) {
                result.convergence_reason = ConvergenceReason::cost;
                done = true;
            }
            mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3.0));
            nu = 2.0;
        } else {
            mu *= nu;
            nu *= 2.0;
            if (mu > 1e300) {
                result.convergence_reason = ConvergenceReason::step;
                done = true;
            }
        }
    }
    if (!done) result.convergence_reason = ConvergenceReason::max_iter;

    result.params = x;
    result.cost = cost;
    result.iterations = iter;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (x[i] <= lb[i] && std::isfinite(lb[i])) result.active_lower.push_back(int(i));
        if (x[i] >= ub[i] && std::isfinite(ub[i])) result.active_upper.push_back(int(i));
    }

    // Covariance and conditioning from the final Jacobian. The normal matrix
    // is diagonally rescaled first so the rank decision and the reported
    // condition number are invariant under per-parameter units; without this
    // a parameter measured in Hz next to one measured in seconds looks
    // rank-deficient purely through scale.
    Vector diag_abs = normal.diagonal().cwiseAbs();
    const double diag_floor = std::max(diag_abs.maxCoeff(), 1.0) * 1e-300;
    Vector scale(n);
    for (Eigen::Index i = 0; i < n; ++i)
        scale[i] = 1.0 / std::sqrt(std::max(diag_abs[i], diag_floor));
    const Matrix scaled = scale.asDiagonal() * normal * scale.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(scaled);
    const Vector& ev = eig.eigenvalues();
    const double ev_max = ev.maxCoeff();
    const double tol = ev_max * n * std::numeric_limits<double>::epsilon();
    const double dof = std::max<double>(double(m) - double(n), 1.0);
    const double sigma2 = 2.0 * cost / dof;
    Matrix inv = Matrix::Zero(n, n);
    double ev_min_pos = kInf;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (ev[i] > tol) {
            inv += eig.eigenvectors().col(i) * eig.eigenvectors().col(i).transpose() / ev[i];
            ev_min_pos = std::min(ev_min_pos, ev[i]);
        }
    }
    result.covariance = sigma2 * (scale.asDiagonal() * inv * scale.asDiagonal());
    result.condition_number =
        std::isfinite(ev_min_pos) && ev_min_pos > 0.0 ? ev_max / ev_min_pos : kInf;
    return result;
}

// ---------------------------------------------------------------------------
// Complex digamma
// ---------------------------------------------------------------------------

namespace detail {

inline std::complex<double> digamma_asymptotic(std::complex<double> z) {
    // psi(z) ~ ln z - 1/(2z) - sum B_2n / (2n z^2n), valid for |z| >= 10.
    const std::complex<double> u = 1.0 / (z * z);
    // Horner evaluation of the B_2n/(2n) coefficients.
    const std::complex<double> series =
        u * (1.0 / 12.0 +
             u * (-1.0 / 120.0 +
             u * (1.0 / 252.0 +
             u * (-1.0 / 240.0 +
             u * (1.0 / 132.0 +
             u * (-691.0 / 32760.0 +
             u * (1.0 / 12.0)))))));
    return std::log(z) - 0.5 / z - series;
}

inline std::complex<double> cot_pi(std::complex<double> z) {
    // cot(pi z) written to stay finite for large |Im z|.
    if (z.imag() > 0.0) {
        const std::complex<double> r =
            std::exp(std::complex<double>(0.0, 2.0 * M_PI) * z);
        return std::complex<double>(0.0, -1.0) * (1.0 + r) / (1.0 - r);
    }
    if (z.imag() < 0.0) return std::conj(cot_pi(std::conj(z)));
    return std::cos(M_PI * z.real()) / std::sin(M_PI * z.real());
}

}  // namespace detail

/// Digamma for complex arguments: reflection into Re z >= 1/2, upward
/// recurrence to |z| >= 10, then the Stirling-type asymptotic series.
/// Relative error is below 1e-12 away from the poles.
inline std::complex<double> digamma_complex(std::complex<double> z) {
    if (z.imag() == 0.0 && z.real() <= 0.0 && z.real() == std::floor(z.real()))
        throw PoleError("digamma_complex: pole at non-positive integer " +
                        std::to_string(z.real()));
    std::complex<double> reflection(0.0, 0.0);
    if (z.real() < 0.5) {
        // psi(z) = psi(1 - z) - pi cot(pi z)
        reflection = -M_PI * detail::cot_pi(z);
        z = 1.0 - z;
    }
    std::complex<double> acc(0.0, 0.0);
    while (std::abs(z) < 10.0) {
        acc -= 1.0 / z;
        z += 1.0;
    }
    return reflection + acc + detail::digamma_asymptotic(z);
}

// ---------------------------------------------------------------------------
// Residual bootstrap
// ---------------------------------------------------------------------------

struct BootstrapResult {
    Vector std_errors;          // per-parameter standard error
    Vector disagreement;        // bootstrap / covariance error ratio
    int failed_refits = 0;
};

/// Residual-resampling bootstrap around a converged fit. Resampled index
/// draws come straight from mt19937_64 (modulo the residual count), so the
/// result is bit-reproducible for a fixed (seed, resamples) pair.
inline BootstrapResult bootstrap_uncertainty(const FitProblem& problem,
                                             const FitResult& best, int resamples,
                                             std::uint64_t seed) {
    if (resamples < 50) throw DomainError("bootstrap_uncertainty: resamples must be >= 50");
    const Vector r_hat = detail::eval_checked(problem.residual_fn, best.params);
    const Eigen::Index m = r_hat.size();
    const Eigen::Index n = best.params.size();

    std::mt19937_64 engine(seed);
    Matrix samples(resamples, n);
    int ok = 0, failed = 0;
    for (int b = 0; b < resamples; ++b) {
        Vector r_star(m);
        for (Eigen::Index i = 0; i < m; ++i)
            r_star[i] = r_hat[engine() % std::uint64_t(m)];
        FitProblem sub = problem;
        sub.initial_params = best.params;
        sub.max_iterations = std::min(problem.max_iterations, 50);
        sub.residual_fn = [&](const Vector& p) -> Vector {
            return problem.residual_fn(p) - r_hat - r_star;
        };
        if (problem.jacobian_fn) sub.jacobian_fn = problem.jacobian_fn;
        try {
            FitResult fr = levenberg_marquardt(sub);
            samples.row(ok++) = fr.params.transpose();
        } catch (const Error&) {
            ++failed;
        }
    }
    if (failed > resamples / 5)
        throw BootstrapError("bootstrap_uncertainty: " + std::to_string(failed) + " of " +
                             std::to_string(resamples) + " resample refits failed");

    BootstrapResult out;
    out.failed_refits = failed;
    out.std_errors.resize(n);
    out.disagreement.resize(n);
    const Vector cov_err = best.std_errors();
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto col = samples.col(j).head(ok);
        const double mean = col.mean();
        double ss = 0.0;
        for (int i = 0; i < ok; ++i) ss += (col[i] - mean) * (col[i] - mean);
        out.std_errors[j] = std::sqrt(ss / std::max(ok - 1, 1));
        out.disagreement[j] = cov_err[j] > 0.0 ? out.std_errors[j] / cov_err[j]
                                               : (out.std_errors[j] > 0.0 ? kInf : 1.0);
    }
    return out;
}

}  // namespace sawkit::fit
