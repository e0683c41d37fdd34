#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "occusafe/moments.hpp"
#include "occusafe/polynomial.hpp"

namespace occusafe {
namespace problem {

using polyalg::Polynomial;

struct DiracInitial {
  std::vector<double> point;
};

struct UniformBoxInitial {
  std::vector<double> lo;
  std::vector<double> hi;
};

// Raw truncated moment sequence over the state variables, canonical order.
struct MomentInitial {
  int degree = 0;
  std::vector<double> values;
};

using InitialDistribution =
    std::variant<DiracInitial, UniformBoxInitial, MomentInitial>;

// Polynomial safety problem: dynamics x' = f(t, x) on [0, T], a safe region
// X and an unsafe region X_u (both as {g_i >= 0} intersections over the
// state variables), an initial distribution, and the running cost g
// integrated over the time the trajectory spends in X_u (default 1, which
// measures occupation time).
struct SafetyProblem {
  int n = 0;
  std::vector<std::string> state_names;
  double horizon = 0.0;  // T
  std::vector<Polynomial> dynamics;
  std::vector<Polynomial> safe_set;    // X: all listed polys >= 0
  std::vector<Polynomial> unsafe_set;  // X_u
  InitialDistribution initial = DiracInitial{};
  Polynomial objective = Polynomial(1);

  static SafetyProblem make(int n, double horizon);
};

// Affine change of coordinates recorded by normalize():
//   t = time_scale * tau,   x_i = space_scale[i] * x~_i + space_shift[i].
struct ScalingRecord {
  double time_scale = 1.0;
  std::vector<double> space_scale;
  std::vector<double> space_shift;
};

struct Diagnostic {
  enum class Severity { warning, error };
  Severity severity = Severity::warning;
  std::string message;
};

bool has_errors(const std::vector<Diagnostic>& diagnostics);

// Structural and sampling checks: dimensions consistent, horizon positive,
// set polynomials time-free, Dirac support inside X (warning), sampled X_u
// points inside X (warning), objective positive on sampled unsafe points
// (warning). The box is the sampling proposal region (and must enclose X).
std::vector<Diagnostic> validate(const SafetyProblem& p,
                                 const std::vector<double>& box_lo,
                                 const std::vector<double>& box_hi);

// Rescales to T = 1 and X inside [-1,1]^n: x_i = s_i x~_i + c_i with
// s_i = (hi-lo)/2, c_i = (hi+lo)/2, and f~_i = (T/s_i) f_i(T tau, s x~ + c).
// The box constraints 1 - x~_i^2 are appended to BOTH set descriptions
// (X_u is a subset of X, so its set is unchanged while its quadratic module
// becomes Archimedean). Throws on a degenerate box.
std::pair<SafetyProblem, ScalingRecord> normalize(
    const SafetyProblem& p, const std::vector<double>& box_lo,
    const std::vector<double>& box_hi);

// Moments of the initial distribution over the state variables up to
// `degree`. Raw moment input must carry at least that degree and unit mass.
moments::MomentVector initial_moments(const SafetyProblem& p, int degree);

// A bound computed on the normalized problem is in units of the rescaled
// horizon; multiply by T to express it in seconds.
double bound_in_original_units(double normalized_bound,
                               const ScalingRecord& record);

}  // namespace problem
}  // namespace occusafe
