#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "occusafe/oracle.hpp"
#include "occusafe/polynomial.hpp"
#include "occusafe/problem.hpp"

using occusafe::polyalg::parse_polynomial;
using occusafe::polyalg::Polynomial;
using namespace occusafe::oracle;
using occusafe::problem::DiracInitial;
using occusafe::problem::MomentInitial;
using occusafe::problem::SafetyProblem;
using occusafe::problem::UniformBoxInitial;

namespace {

std::vector<Polynomial> decay_field() {
  return {parse_polynomial("-x1", {"x1"})};
}

std::vector<Polynomial> oscillator_field() {
  return {parse_polynomial("x2", {"x1", "x2"}),
          parse_polynomial("-x1", {"x1", "x2"})};
}

std::vector<Polynomial> vdp_field() {
  return {parse_polynomial("-x2", {"x1", "x2"}),
          parse_polynomial("x1 + (x1^2 - 1)*x2", {"x1", "x2"})};
}

}  // namespace

TEST_CASE("integrator reproduces exponential decay") {
  const auto traj = integrate(decay_field(), {1.0}, 0.0, 1.0);
  REQUIRE(traj.ok());
  CHECK(traj.states.back()[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-9));
  CHECK(traj.accepted >= 1000);
  CHECK(traj.times.size() == traj.states.size());
  CHECK(traj.times.size() == traj.derivs.size());
}

TEST_CASE("integrator tracks a harmonic oscillator for a full period") {
  const double two_pi = 2.0 * std::acos(-1.0);
  const auto traj = integrate(oscillator_field(), {1.0, 0.0}, 0.0, two_pi);
  REQUIRE(traj.ok());
  CHECK(traj.states.back()[0] == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(traj.states.back()[1] == doctest::Approx(0.0).scale(1.0).epsilon(1e-7));

  // Dense output between knots: x(t) = (cos t, -sin t).
  for (double t : {0.3, 1.234, two_pi / 4, 3.999, 5.5}) {
    const auto x = traj.state_at(t);
    CHECK(x[0] == doctest::Approx(std::cos(t)).scale(1.0).epsilon(1e-8));
    CHECK(x[1] == doctest::Approx(-std::sin(t)).scale(1.0).epsilon(1e-8));
  }
}

TEST_CASE("integrator reports blow-up instead of garbage") {
  IntegratorOptions opts;
  opts.max_steps = 50000;
  const auto traj = integrate({parse_polynomial("x1^2", {"x1"})}, {1.5}, 0.0,
                              1.0, opts);
  CHECK_FALSE(traj.ok());
  CHECK_FALSE(traj.failure.empty());
}

TEST_CASE("integrator rejects malformed input") {
  CHECK_FALSE(integrate(decay_field(), {1.0, 2.0}, 0.0, 1.0).ok());
  CHECK_FALSE(integrate(decay_field(), {1.0}, 1.0, 1.0).ok());
}

TEST_CASE("unsafe time of the decay problem is log 2") {
  // x(t) = e^{-t} stays above 1/2 until t = log 2.
  const auto traj = integrate(decay_field(), {1.0}, 0.0, 10.0);
  REQUIRE(traj.ok());
  const std::vector<Polynomial> unsafe = {
      parse_polynomial("x1 - 0.5", {"x1"})};
  const double t_unsafe = time_in_unsafe(traj, unsafe);
  CHECK(t_unsafe == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  const auto intervals = unsafe_intervals(traj, unsafe);
  REQUIRE(intervals.size() == 1);
  CHECK(intervals[0].first == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
  CHECK(intervals[0].second == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("a trajectory pinned to the boundary counts as unsafe") {
  const auto traj = integrate({Polynomial(1)}, {0.5}, 0.0, 3.0);
  REQUIRE(traj.ok());
  const std::vector<Polynomial> unsafe = {
      parse_polynomial("x1 - 0.5", {"x1"})};
  CHECK(time_in_unsafe(traj, unsafe) == doctest::Approx(3.0));
}

TEST_CASE("an empty description marks everything unsafe") {
  const auto traj = integrate(decay_field(), {1.0}, 0.0, 2.0);
  REQUIRE(traj.ok());
  CHECK(time_in_unsafe(traj, {}) == doctest::Approx(2.0));
}

TEST_CASE("brief excursions through the unsafe set are caught") {
  // cos t >= 0.99 near t = 0 and t = 2 pi; each excursion lasts acos(0.99).
  const double two_pi = 2.0 * std::acos(-1.0);
  const auto traj = integrate(oscillator_field(), {1.0, 0.0}, 0.0, two_pi);
  REQUIRE(traj.ok());
  const std::vector<Polynomial> unsafe = {
      parse_polynomial("x1 - 0.99", {"x1", "x2"})};
  const auto intervals = unsafe_intervals(traj, unsafe);
  REQUIRE(intervals.size() == 2);
  const double expected = std::acos(0.99);
  CHECK(intervals[0].second - intervals[0].first ==
        doctest::Approx(expected).epsilon(1e-6));
  CHECK(intervals[1].second - intervals[1].first ==
        doctest::Approx(expected).epsilon(1e-6));
  CHECK(time_in_unsafe(traj, unsafe) ==
        doctest::Approx(2.0 * expected).epsilon(1e-6));
}

TEST_CASE("bisection refinement has converged at the default tolerance") {
  const auto traj = integrate(decay_field(), {1.0}, 0.0, 10.0);
  REQUIRE(traj.ok());
  const std::vector<Polynomial> unsafe = {
      parse_polynomial("x1 - 0.5", {"x1"})};
  const double coarse = time_in_unsafe(traj, unsafe, 1e-10);
  const double fine = time_in_unsafe(traj, unsafe, 1e-12);
  CHECK(std::abs(coarse - fine) <= 1e-9);
}

TEST_CASE("objective weighting integrates over the unsafe window") {
  // Integral of t over [0, log 2] is (log 2)^2 / 2.
  const auto traj = integrate(decay_field(), {1.0}, 0.0, 10.0);
  REQUIRE(traj.ok());
  const std::vector<Polynomial> unsafe = {
      parse_polynomial("x1 - 0.5", {"x1"})};
  const Polynomial weight = parse_polynomial("t", {"x1"});
  const double value = weighted_time_in_unsafe(traj, unsafe, weight);
  const double expected = 0.5 * std::log(2.0) * std::log(2.0);
  CHECK(value == doctest::Approx(expected).epsilon(1e-6));

  const Polynomial one = Polynomial::constant(1, 1.0);
  CHECK(weighted_time_in_unsafe(traj, unsafe, one) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("empirical occupation moments match closed-form integrals") {
  const auto traj = integrate(decay_field(), {1.0}, 0.0, 1.0);
  REQUIRE(traj.ok());
  const auto m = empirical_moments(traj, 4);
  const auto& basis = m.basis();
  const double e1 = std::exp(-1.0), e2 = std::exp(-2.0), e3 = std::exp(-3.0);

  auto value = [&](int a, int b) {
    return m.values[basis.index_of({a, b})];
  };
  CHECK(value(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(value(1, 0) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(value(2, 0) == doctest::Approx(1.0 / 3).epsilon(1e-9));
  CHECK(value(0, 1) == doctest::Approx(1.0 - e1).epsilon(1e-9));
  CHECK(value(1, 1) == doctest::Approx(1.0 - 2.0 * e1).epsilon(1e-9));
  CHECK(value(2, 1) == doctest::Approx(2.0 - 5.0 * e1).epsilon(1e-9));
  CHECK(value(0, 2) == doctest::Approx(0.5 * (1.0 - e2)).epsilon(1e-9));
  CHECK(value(1, 2) == doctest::Approx(0.25 * (1.0 - 3.0 * e2)).epsilon(1e-9));
  CHECK(value(0, 3) == doctest::Approx((1.0 - e3) / 3.0).epsilon(1e-9));
}

TEST_CASE("expected_time on a point mass runs one trajectory") {
  SafetyProblem p = SafetyProblem::make(1, 10.0);
  p.dynamics = decay_field();
  p.unsafe_set = {parse_polynomial("x1 - 0.5", {"x1"})};
  p.initial = DiracInitial{{1.0}};
  const auto est = expected_time(p, 100, 7);
  REQUIRE(est.ok());
  CHECK(est.samples == 1);
  CHECK(est.std_error == 0.0);
  CHECK(est.mean == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("expected_time averages over a uniform initial box") {
  // Starting at x0 in [1,2], the unsafe time is log(2 x0); its mean over
  // the box is 3 log 2 - 1.
  SafetyProblem p = SafetyProblem::make(1, 10.0);
  p.dynamics = decay_field();
  p.unsafe_set = {parse_polynomial("x1 - 0.5", {"x1"})};
  p.initial = UniformBoxInitial{{1.0}, {2.0}};
  const auto est = expected_time(p, 2000, 42);
  REQUIRE(est.ok());
  CHECK(est.samples == 2000);
  CHECK(est.std_error > 0.0);
  CHECK(est.std_error < 0.01);
  const double expected = 3.0 * std::log(2.0) - 1.0;
  CHECK(std::abs(est.mean - expected) <= 4.0 * est.std_error + 1e-6);

  const auto again = expected_time(p, 2000, 42);
  CHECK(again.mean == est.mean);
  CHECK(again.std_error == est.std_error);

  const auto other = expected_time(p, 2000, 43);
  CHECK(other.mean != est.mean);
  CHECK(std::abs(other.mean - expected) <= 4.0 * other.std_error + 1e-6);
}

TEST_CASE("expected_time refuses raw moment input") {
  SafetyProblem p = SafetyProblem::make(1, 1.0);
  p.dynamics = decay_field();
  p.initial = MomentInitial{2, {1.0, 0.5, 1.0 / 3}};
  CHECK_THROWS_AS(expected_time(p, 10, 0), std::invalid_argument);
}

TEST_CASE("the oscillator benchmark trajectory stays bounded") {
  const auto traj = integrate(vdp_field(), {2.0, 0.0}, 0.0, 10.0);
  REQUIRE(traj.ok());
  CHECK(traj.accepted >= 1000);
  for (const auto& x : traj.states) {
    CHECK(std::abs(x[0]) <= 3.0);
    CHECK(std::abs(x[1]) <= 3.0);
  }
}
