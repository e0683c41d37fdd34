#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "occusafe/moments.hpp"
#include "occusafe/polynomial.hpp"
#include "occusafe/problem.hpp"

namespace occusafe {
namespace oracle {

using polyalg::Polynomial;

struct IntegratorOptions {
  double rel_tol = 1e-9;
  double abs_tol = 1e-11;
  double max_step = 0.0;  // 0: one thousandth of the time span
  long max_steps = 2000000;
};

// Dense solution of x' = f(t, x): accepted knots with the derivative at
// each, interpolated between knots by a cubic Hermite spline (fourth-order
// accurate, well below the integration tolerance).
struct Trajectory {
  std::vector<double> times;
  std::vector<std::vector<double>> states;
  std::vector<std::vector<double>> derivs;
  long accepted = 0;
  long rejected = 0;
  std::string failure;

  bool ok() const { return failure.empty(); }
  double t0() const { return times.front(); }
  double t1() const { return times.back(); }
  std::vector<double> state_at(double t) const;
};

// Adaptive Dormand-Prince 5(4) with step reuse of the last stage.
Trajectory integrate(const std::vector<Polynomial>& dynamics,
                     const std::vector<double>& x0, double t0, double t1,
                     const IntegratorOptions& opts = {});

// Maximal intervals of {t : x(t) in X_u}, X_u = {all g_i >= 0} (closed, so
// boundary points count). Candidate crossings come from a scan grid of the
// accepted knots plus four interior probes per step; each sign change is
// then bisected down to refine_tol (in time units).
std::vector<std::pair<double, double>> unsafe_intervals(
    const Trajectory& traj, const std::vector<Polynomial>& unsafe_set,
    double refine_tol = 1e-10);

double time_in_unsafe(const Trajectory& traj,
                      const std::vector<Polynomial>& unsafe_set,
                      double refine_tol = 1e-10);

// Integral of g(t, x(t)) over the unsafe intervals; g = 1 recovers
// time_in_unsafe.
double weighted_time_in_unsafe(const Trajectory& traj,
                               const std::vector<Polynomial>& unsafe_set,
                               const Polynomial& objective,
                               double refine_tol = 1e-10);

struct TimeEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  int samples = 0;
  long total_accepted = 0;
  std::string failure;

  bool ok() const { return failure.empty(); }
};

// Monte Carlo estimate of E over the initial distribution of the objective
// integrated over the time spent unsafe. A point mass needs a single run
// (std_error 0); a uniform box is sampled `samples` times with one
// deterministic generator per draw, so results are independent of ordering
// and reproducible for a given seed. Raw moment input cannot be sampled.
TimeEstimate expected_time(const problem::SafetyProblem& p, int samples,
                           std::uint64_t seed,
                           const IntegratorOptions& opts = {},
                           double refine_tol = 1e-10);

// Moments of the occupation measure of the trajectory: for each monomial
// t^a x^alpha up to `degree`, the integral of t^a x(t)^alpha dt over the
// trajectory's span, by composite Simpson on a uniform grid.
moments::MomentVector empirical_moments(const Trajectory& traj, int degree,
                                        int num_points = 4001);

}  // namespace oracle
}  // namespace occusafe
