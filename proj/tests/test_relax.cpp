#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "occusafe/moments.hpp"
#include "occusafe/oracle.hpp"
#include "occusafe/polynomial.hpp"
#include "occusafe/problem.hpp"
#include "occusafe/relax.hpp"
#include "occusafe/solver.hpp"

using occusafe::polyalg::Exponent;
using occusafe::polyalg::parse_polynomial;
using occusafe::polyalg::Polynomial;
using occusafe::moments::MomentVector;
using occusafe::moments::SymMatrix;
using occusafe::problem::DiracInitial;
using occusafe::problem::SafetyProblem;
using namespace occusafe::relax;

namespace {

Polynomial parse1(const std::string& text) {
  return parse_polynomial(text, {"x1"});
}

Polynomial parse2(const std::string& text) {
  return parse_polynomial(text, {"x1", "x2"});
}

// x' = -x^3 on [0, 2] started at 1/2; the unsafe set is the whole box, so
// the expected unsafe time equals the horizon and the relaxation is exact
// at every order.
SafetyProblem cubic_toy() {
  SafetyProblem p = SafetyProblem::make(1, 2.0);
  p.dynamics[0] = parse1("-x1^3");
  p.unsafe_set = {parse1("1 - x1^2")};
  p.initial = DiracInitial{{0.5}};
  return p;
}

SafetyProblem cubic_toy_normalized() {
  return occusafe::problem::normalize(cubic_toy(), {-1.0}, {1.0}).first;
}

SafetyProblem vanderpol() {
  SafetyProblem p = SafetyProblem::make(2, 10.0);
  p.dynamics[0] = parse2("-x2");
  p.dynamics[1] = parse2("x1 + (x1^2 - 1)*x2");
  p.unsafe_set = {parse2("1 - 52*(x1 - 0.25)^2 + (x2 + 0.5)^2"),
                  parse2("x1"), parse2("0.5 - x1"), parse2("x2 + 2"),
                  parse2("1 - x2")};
  p.initial = DiracInitial{{2.0, 0.0}};
  return p;
}

SafetyProblem vanderpol_normalized() {
  return occusafe::problem::normalize(vanderpol(), {-3.0, -3.0}, {3.0, 3.0})
      .first;
}

// x' = -x on [0, 10], unsafe where x >= 1/2, started at x = 1. The true
// unsafe time is ln 2.
SafetyProblem decay() {
  SafetyProblem p = SafetyProblem::make(1, 10.0);
  p.dynamics[0] = parse1("-x1");
  p.unsafe_set = {parse1("x1 - 0.5")};
  p.initial = DiracInitial{{1.0}};
  return p;
}

bool contains_exponent(const std::vector<Exponent>& set, const Exponent& e) {
  return std::find(set.begin(), set.end(), e) != set.end();
}

double row_residual(const occusafe::solver::EqRow& row,
                    const std::vector<double>& z) {
  double acc = -row.rhs;
  for (const auto& term : row.terms) acc += term.coef * z[term.var];
  return std::abs(acc);
}

Eigen::MatrixXd eval_block(const occusafe::solver::PsdBlock& blk,
                           const std::vector<double>& z) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(blk.dim, blk.dim);
  int idx = 0;
  for (int i = 0; i < blk.dim; ++i) {
    for (int j = i; j < blk.dim; ++j, ++idx) {
      double v = blk.constant[idx];
      for (const auto& term : blk.linear[idx]) v += term.coef * z[term.var];
      m(i, j) = v;
      m(j, i) = v;
    }
  }
  return m;
}

void fill_group(const Relaxation& rel, MeasureGroup group,
                const MomentVector& y, std::vector<double>& z) {
  const auto& basis = group == MeasureGroup::terminal
                          ? *rel.layout.state_basis
                          : *rel.layout.ts_basis;
  REQUIRE(basis.size() == y.size());
  for (int i = 0; i < basis.size(); ++i) {
    z[rel.layout.var_index(group, basis[i])] = y[i];
  }
}

MomentVector random_moments(std::mt19937_64& rng, int num_vars, int degree) {
  MomentVector y(num_vars, degree);
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  for (double& v : y.values) v = coef(rng);
  return y;
}

}  // namespace

TEST_CASE("admissible test monomials") {
  SUBCASE("cubic dynamics at order 1 keeps only pure time powers") {
    const auto set = admissible_test_monomials({parse1("-x1^3")}, 1);
    REQUIRE(set.size() == 3);
    CHECK(contains_exponent(set, {0, 0}));
    CHECK(contains_exponent(set, {1, 0}));
    CHECK(contains_exponent(set, {2, 0}));
  }

  SUBCASE("linear dynamics admit the full basis") {
    const auto set = admissible_test_monomials({parse1("-x1")}, 2);
    CHECK(set.size() == occusafe::polyalg::enumerate_monomials(2, 4).size());
  }

  SUBCASE("pure time powers always qualify") {
    const auto f = vanderpol().dynamics;
    for (int r = 1; r <= 3; ++r) {
      const auto set = admissible_test_monomials(f, r);
      for (int a = 0; a <= 2 * r; ++a) {
        CHECK(contains_exponent(set, {a, 0, 0}));
      }
    }
  }

  SUBCASE("the admitted set grows with the order") {
    const auto f = vanderpol().dynamics;
    auto prev = admissible_test_monomials(f, 1);
    for (int r = 2; r <= 4; ++r) {
      const auto cur = admissible_test_monomials(f, r);
      CHECK(cur.size() >= prev.size());
      for (const Exponent& e : prev) CHECK(contains_exponent(cur, e));
      prev = cur;
    }
  }

  SUBCASE("empty dynamics are rejected") {
    CHECK_THROWS_AS(admissible_test_monomials({}, 2), std::invalid_argument);
  }
}

TEST_CASE("assembled program has the expected shape") {
  SUBCASE("cubic toy at order 2") {
    const Relaxation rel = assemble_primal(cubic_toy_normalized(), 2);
    CHECK(rel.program.num_vars == 50);
    CHECK(rel.layout.num_vars() == 50);
    CHECK(rel.layout.liouville.size() == 8);
    CHECK(rel.layout.domination.size() == 15);
    CHECK(rel.program.rows.size() == 23);
    CHECK(rel.program.blocks.size() == 12);
    CHECK(rel.layout.blocks.size() == 12);

    // Objective selects the unit mass of the unsafe occupation measure.
    REQUIRE(rel.program.objective.size() == 50);
    const int mass =
        rel.layout.var_index(MeasureGroup::unsafe_occupation, {0, 0});
    for (int i = 0; i < 50; ++i) {
      CHECK(rel.program.objective[i] == (i == mass ? 1.0 : 0.0));
    }
    CHECK(rel.layout.blocks[0].label == "unsafe moment");
    CHECK(rel.program.blocks[0].label == "unsafe moment");
  }

  SUBCASE("cubic toy at order 1") {
    const Relaxation rel = assemble_primal(cubic_toy_normalized(), 1);
    CHECK(rel.program.num_vars == 21);
    CHECK(rel.program.rows.size() == 9);
  }

  SUBCASE("Van der Pol at order 2") {
    const Relaxation rel = assemble_primal(vanderpol_normalized(), 2);
    CHECK(rel.program.num_vars == 120);
    CHECK(rel.layout.liouville.size() == 19);
    CHECK(rel.layout.domination.size() == 35);
    CHECK(rel.program.rows.size() == 54);
    // Unsafe: moment + time + 7 set localizers; the other two occupation
    // measures get 4 each; terminal: moment + 2.
    CHECK(rel.program.blocks.size() == 20);
  }

  SUBCASE("Van der Pol at order 6") {
    const Relaxation rel = assemble_primal(vanderpol_normalized(), 6);
    CHECK(rel.program.num_vars == 1456);
  }

  SUBCASE("two-state linear system at order 2") {
    SafetyProblem p = SafetyProblem::make(2, 1.0);
    p.dynamics[0] = parse2("-x1");
    p.dynamics[1] = parse2("x1 - x2");
    p.safe_set = {parse2("1 - x1^2 - x2^2")};
    p.initial = DiracInitial{{0.2, -0.1}};
    const Relaxation rel = assemble_primal(p, 2);
    // Linear dynamics admit all 35 test monomials, matching the 35
    // splitting rows; an unconstrained unsafe set drops its localizers.
    CHECK(rel.program.rows.size() == 70);
    CHECK(rel.program.blocks.size() == 10);
  }
}

TEST_CASE("assemble rejects malformed inputs") {
  const SafetyProblem toy = cubic_toy_normalized();
  CHECK_THROWS_AS(assemble_primal(toy, 0), std::invalid_argument);
  CHECK_THROWS_AS(assemble_primal(cubic_toy(), 2), std::invalid_argument);

  SafetyProblem bad_objective = toy;
  bad_objective.objective = parse1("x1^6");
  CHECK_THROWS_AS(assemble_primal(bad_objective, 2), std::invalid_argument);

  SafetyProblem bad_degree = toy;
  bad_degree.unsafe_set.push_back(parse1("1 - x1^6"));
  CHECK_THROWS_AS(assemble_primal(bad_degree, 2), std::invalid_argument);

  SafetyProblem time_dependent = toy;
  time_dependent.safe_set.push_back(parse_polynomial("1 - t*x1", {"x1"}));
  CHECK_THROWS_AS(assemble_primal(time_dependent, 2), std::invalid_argument);
}

TEST_CASE("trajectory moments satisfy every program row") {
  // Unit-horizon decay whose unsafe set equals the safe set, so the unsafe
  // occupation measure is the full occupation measure and the trajectory
  // moments give an exactly feasible point.
  SafetyProblem p = SafetyProblem::make(1, 1.0);
  p.dynamics[0] = parse1("-x1");
  p.safe_set = {parse1("1 - x1^2")};
  p.unsafe_set = {parse1("1 - x1^2")};
  p.initial = DiracInitial{{0.5}};

  const int r = 2;
  const Relaxation rel = assemble_primal(p, r);

  const auto traj = occusafe::oracle::integrate(p.dynamics, {0.5}, 0.0, 1.0);
  REQUIRE(traj.ok());
  const MomentVector occupation =
      occusafe::oracle::empirical_moments(traj, 2 * r);
  const MomentVector terminal =
      occusafe::moments::dirac_moments(traj.states.back(), 2 * r);

  std::vector<double> z(rel.program.num_vars, 0.0);
  fill_group(rel, MeasureGroup::unsafe_occupation, occupation, z);
  fill_group(rel, MeasureGroup::total_occupation, occupation, z);
  fill_group(rel, MeasureGroup::terminal, terminal, z);

  for (const auto& row : rel.program.rows) {
    CAPTURE(row.label);
    CHECK(row_residual(row, z) <= 1e-6);
  }

  // The same identity checked directly: v(1, x(1)) - v(0, x(0)) equals the
  // occupation average of dv/dt + f . grad v.
  const double x0 = 0.5;
  const double x1 = traj.states.back()[0];
  for (const Exponent& e : rel.layout.liouville) {
    const Polynomial v = Polynomial::monomial(e, 1.0);
    const Polynomial lv = occusafe::polyalg::lie_derivative(v, p.dynamics);
    const double lhs = v.evaluate({1.0, x1}) - v.evaluate({0.0, x0});
    CHECK(std::abs(lhs - occusafe::moments::riesz(occupation, lv)) <= 1e-6);
  }
}

TEST_CASE("block entries reproduce moment and localizing matrices") {
  std::mt19937_64 rng(0x51ab1e5ULL);
  const Polynomial tpoly = parse_polynomial("t - t^2", {"x1", "x2"});

  for (const SafetyProblem& p :
       {cubic_toy_normalized(), vanderpol_normalized()}) {
    const int r = 2;
    const Relaxation rel = assemble_primal(p, r);

    std::vector<double> z(rel.program.num_vars, 0.0);
    std::vector<MomentVector> group_ts;
    for (int g = 0; g < 3; ++g) {
      group_ts.push_back(random_moments(rng, 1 + p.n, 2 * r));
      fill_group(rel, static_cast<MeasureGroup>(g), group_ts.back(), z);
    }
    const MomentVector terminal = random_moments(rng, p.n, 2 * r);
    fill_group(rel, MeasureGroup::terminal, terminal, z);

    for (std::size_t k = 0; k < rel.program.blocks.size(); ++k) {
      const auto& info = rel.layout.blocks[k];
      const auto& blk = rel.program.blocks[k];
      CAPTURE(info.label);
      const MomentVector& y = info.group == MeasureGroup::terminal
                                  ? terminal
                                  : group_ts[static_cast<int>(info.group)];
      const int s = r - (info.multiplier.degree() + 1) / 2;
      const SymMatrix expected =
          info.multiplier.degree() == 0
              ? occusafe::moments::moment_matrix(y, s)
              : occusafe::moments::localizing_matrix(info.multiplier, y, s);
      const Eigen::MatrixXd got = eval_block(blk, z);
      REQUIRE(expected.dim() == blk.dim);
      CHECK((got - expected.to_dense()).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("whole-box unsafe set makes the relaxation exact") {
  const SafetyProblem p = cubic_toy_normalized();
  for (int r = 1; r <= 2; ++r) {
    const Relaxation rel = assemble_primal(p, r);
    const auto sol = occusafe::solver::solve(rel.program);
    CAPTURE(r);
    REQUIRE(sol.usable());
    CHECK(std::abs(sol.objective - 1.0) <= 1e-6);
    CHECK(std::abs(sol.dual_objective - 1.0) <= 1e-6);
  }
}

TEST_CASE("decay bounds shrink toward the true unsafe time") {
  const auto [p, record] =
      occusafe::problem::normalize(decay(), {-2.0}, {2.0});
  const double truth = std::log(2.0) / 10.0;  // normalized units
  std::vector<double> bounds;
  for (int r = 1; r <= 3; ++r) {
    const Relaxation rel = assemble_primal(p, r);
    const auto sol = occusafe::solver::solve(rel.program);
    CAPTURE(r);
    REQUIRE(sol.usable());
    bounds.push_back(sol.objective);
  }
  for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
    CHECK(bounds[i + 1] <= bounds[i] + 1e-7);
  }
  for (double b : bounds) {
    CHECK(b >= truth - 1e-6);
    CHECK(b <= 1.0 + 1e-6);
  }
  CHECK(occusafe::problem::bound_in_original_units(bounds.back(), record) >=
        std::log(2.0) - 1e-5);
}

TEST_CASE("hand-built certificate verifies exactly") {
  // v = 1 - t, w = 1 certify that the unsafe time of the toy problem is at
  // most the horizon: w - g = 0, w = 1 (Gram [1]), -Lv - w = 0, v(1,.) = 0.
  const SafetyProblem p = cubic_toy_normalized();
  Certificate cert;
  cert.v = parse_polynomial("1 - t", {"x1"});
  cert.w = parse1("1");
  cert.bound = 1.0;
  GramTerm unit;
  unit.multiplier = Polynomial::constant(1, 1.0);
  unit.basis = {Exponent{0, 0}};
  unit.gram = SymMatrix(1);
  unit.gram.set(0, 0, 1.0);
  cert.groups[1].push_back(unit);

  const CertificateReport report = verify_certificate(p, cert);
  CHECK(report.worst_violation == 0.0);
  CHECK(report.identity_residual[0] == 0.0);
  CHECK(report.identity_residual[1] == 0.0);
  CHECK(report.identity_residual[2] == 0.0);
  CHECK(report.identity_residual[3] == 0.0);
  CHECK(report.min_gram_eigenvalue == 1.0);
  CHECK(report.sample_violation == 0.0);
  CHECK(report.sound(1e-9));
}

TEST_CASE("broken certificates are flagged") {
  const SafetyProblem p = cubic_toy_normalized();
  Certificate cert;
  cert.v = parse_polynomial("1 - t", {"x1"});
  cert.w = parse1("0.5");  // w no longer dominates the objective
  cert.bound = 1.0;
  const CertificateReport report = verify_certificate(p, cert);
  CHECK(report.identity_residual[0] == 0.5);
  CHECK(report.sample_violation >= 0.5 - 1e-12);
  CHECK_FALSE(report.sound(1e-3));
}

TEST_CASE("extracted certificates are sound") {
  SUBCASE("cubic toy at order 2") {
    const SafetyProblem p = cubic_toy_normalized();
    const Relaxation rel = assemble_primal(p, 2);
    const auto sol = occusafe::solver::solve(rel.program);
    REQUIRE(sol.usable());
    const Certificate cert = extract_certificate(rel, sol);
    CHECK(std::abs(cert.bound - sol.dual_objective) <= 1e-6);
    const CertificateReport report = verify_certificate(p, cert);
    CHECK(report.worst_violation <= 1e-6);
    CHECK(report.min_gram_eigenvalue >= -1e-7);
    CHECK(report.sample_violation <= 1e-6);
  }

  SUBCASE("decay at order 3") {
    const SafetyProblem p =
        occusafe::problem::normalize(decay(), {-2.0}, {2.0}).first;
    const Relaxation rel = assemble_primal(p, 3);
    const auto sol = occusafe::solver::solve(rel.program);
    REQUIRE(sol.usable());
    const Certificate cert = extract_certificate(rel, sol);
    CHECK(std::abs(cert.bound - sol.dual_objective) <= 1e-6);
    // A valid certificate proves an upper bound, so it sits above the truth.
    CHECK(cert.bound >= std::log(2.0) / 10.0 - 1e-6);
    const CertificateReport report = verify_certificate(p, cert);
    CHECK(report.worst_violation <= 1e-6);
    CHECK(report.min_gram_eigenvalue >= -1e-7);
    CHECK(report.sample_violation <= 1e-6);
  }
}

TEST_CASE("extract_certificate rejects mismatched solutions") {
  const Relaxation rel = assemble_primal(cubic_toy_normalized(), 1);
  occusafe::solver::Solution sol;
  sol.row_duals.assign(rel.program.rows.size() + 1, 0.0);
  CHECK_THROWS_AS(extract_certificate(rel, sol), std::invalid_argument);
}
