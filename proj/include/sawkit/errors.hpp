#pragma once

#include <stdexcept>
#include <string>

namespace sawkit {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid physical argument or violated type invariant.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Malformed input file. Carries the 1-based line (or row) that failed.
class ParseError : public Error {
public:
    ParseError(const std::string& what, long line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    explicit ParseError(const std::string& what) : Error(what), line_(-1) {}
    long line() const noexcept { return line_; }

private:
    long line_;
};

/// Trace too narrow to estimate a background model.
class InsufficientSpanError : public Error {
public:
    using Error::Error;
};

/// Point set unusable for a circle fit (collinear or near-collinear).
class DegenerateGeometryError : public Error {
public:
    using Error::Error;
};

/// Fit result outside the physically allowed region (e.g. over-unity dip).
class UnphysicalFitError : public Error {
public:
    using Error::Error;
};

/// Optimizer failed to converge; carries the final residual norm.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double final_residual)
        : Error(what + " (final residual " + std::to_string(final_residual) + ")"),
          final_residual_(final_residual) {}
    double final_residual() const noexcept { return final_residual_; }

private:
    double final_residual_;
};

/// Residual function returned a non-finite value.
class EvaluationError : public Error {
public:
    using Error::Error;
};

/// Data cannot determine one or more fit parameters.
class IdentifiabilityError : public Error {
public:
    using Error::Error;
};

/// Too many bootstrap resample refits failed.
class BootstrapError : public Error {
public:
    using Error::Error;
};

/// Numerical integration failed to reach its tolerance.
class QuadratureError : public Error {
public:
    using Error::Error;
};

/// Special function evaluated at a pole.
class PoleError : public Error {
public:
    using Error::Error;
};

/// Structured document (report, manifest) failed validation.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure (unreadable input, unwritable output).
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace sawkit
