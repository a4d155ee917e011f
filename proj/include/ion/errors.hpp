#pragma once
#include <stdexcept>
#include <string>

namespace ion {

// Base class for every error thrown by the library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// ---- model ----------------------------------------------------------------
// Elasticity matrix has a non-positive eigenvalue (structural instability,
// e.g. transverse zigzag softening past the critical stiffness).
struct NonPositiveModeError : Error { using Error::Error; };

// ---- gaussian -------------------------------------------------------------
struct OddDimensionError : Error { using Error::Error; };
struct NonAntisymmetricError : Error { using Error::Error; };
// String-operator linear system is numerically singular (|<P>| ~ 0).
// Recoverable: callers reject the flow step / retry with jitter.
struct SingularStringError : Error { using Error::Error; };
// purify() called on a covariance too far from the pure manifold.
struct TooMixedError : Error { using Error::Error; };

// ---- ngs ------------------------------------------------------------------
// Trial step raised the free energy beyond tolerance; caller halves dt.
struct StepRejectedError : Error { using Error::Error; };
// Flow exhausted max_steps (or dt underflow) without meeting the
// convergence criterion.
struct NoConvergenceError : Error { using Error::Error; };
// tune_filling could not bracket/reach the target filling.
struct FillingUnreachableError : Error { using Error::Error; };
// Density covariance D singular where an exact inverse was requested.
// The default flow regularizes instead of throwing; kept for API users
// that disable regularization.
struct DegenerateDError : Error { using Error::Error; };

// ---- observables ----------------------------------------------------------
struct AmbiguousPhaseError : Error { using Error::Error; };
struct NoDomainWallError : Error { using Error::Error; };
struct FitDegenerateError : Error { using Error::Error; };

// ---- oracle ---------------------------------------------------------------
struct DimensionBudgetError : Error { using Error::Error; };
struct EigenNoConvergenceError : Error { using Error::Error; };
// Spin-basis vs fermionized spectra disagree in the cross-check.
struct MismatchError : Error { using Error::Error; };

// ---- cli / config / store --------------------------------------------------
struct ConfigError : Error { using Error::Error; };
struct StoreError : Error { using Error::Error; };

} // namespace ion
