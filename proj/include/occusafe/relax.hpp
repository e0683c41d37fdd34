#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "occusafe/moments.hpp"
#include "occusafe/polynomial.hpp"
#include "occusafe/problem.hpp"
#include "occusafe/solver.hpp"

namespace occusafe {
namespace relax {

using polyalg::Exponent;
using polyalg::Polynomial;

// The four moment vectors of the relaxation, in variable order.
enum class MeasureGroup {
  unsafe_occupation = 0,   // occupation measure restricted to the unsafe set
  complement_occupation = 1,
  total_occupation = 2,
  terminal = 3,            // state distribution at the final time
};

struct BlockInfo {
  MeasureGroup group = MeasureGroup::total_occupation;
  Polynomial multiplier = Polynomial(1);  // 1, t - t^2, or a set poly
  std::vector<Exponent> basis;  // time-space for groups 0..2, state for 3
  std::string label;
};

struct RelaxationLayout {
  int order = 0;
  int n = 0;
  std::shared_ptr<const moments::MonomialBasis> ts_basis;     // (t, x)
  std::shared_ptr<const moments::MonomialBasis> state_basis;  // x only
  std::array<int, 4> group_offset{};
  std::vector<Exponent> liouville;   // admissible test monomials t^a x^alpha
  std::vector<Exponent> domination;  // time-space exponents
  std::vector<BlockInfo> blocks;     // parallel to program.blocks
  moments::MomentVector initial;     // initial state moments to degree 2r

  int num_vars() const;
  int var_index(MeasureGroup group, const Exponent& e) const;
};

// Test monomials t^a x^alpha admitted at this order: total degree at most 2r
// and the degree of d/dt + f . grad applied to the monomial also at most 2r,
// measured on the actual dynamics. Pure powers of t always qualify, and the
// set only grows with the order.
std::vector<Exponent> admissible_test_monomials(
    const std::vector<Polynomial>& dynamics, int order);

struct Relaxation {
  solver::ConicProgram program;
  RelaxationLayout layout;
};

// Moment relaxation of the expected unsafe occupation problem at the given
// order: maximize the objective integrated against the unsafe occupation
// measure, subject to the transport identity rows, the splitting rows, and
// moment/localizing PSD blocks for each of the four measures. Requires a
// normalized problem (unit horizon, box coordinates).
Relaxation assemble_primal(const problem::SafetyProblem& normalized,
                           int order);

struct GramTerm {
  Polynomial multiplier = Polynomial(1);
  std::vector<Exponent> basis;
  moments::SymMatrix gram;
};

// Dual certificate: polynomials v(t, x) and w(t, x) with sum-of-squares
// weighted decompositions of w - g over the unsafe set, w over the safe
// set, -(dv/dt + f . grad v) - w over the safe set, and v(1, .) over the
// safe set. Any such pair proves the expected weighted unsafe time is at
// most the initial average of v(0, .), which is `bound`.
struct Certificate {
  Polynomial v = Polynomial(1);
  Polynomial w = Polynomial(1);
  double bound = 0.0;
  std::array<std::vector<GramTerm>, 4> groups;
};

Certificate extract_certificate(const Relaxation& relaxation,
                                const solver::Solution& solution);

struct CertificateReport {
  std::array<double, 4> identity_residual{};  // max abs coefficient each
  double worst_violation = 0.0;               // max of the four residuals
  double min_gram_eigenvalue = 0.0;
  double sample_violation = 0.0;  // worst pointwise slack on sampled points

  bool sound(double tol) const {
    return worst_violation <= tol && min_gram_eigenvalue >= -tol &&
           sample_violation <= tol;
  }
};

// Checks the four decomposition identities coefficient-wise, the PSD-ness
// of every Gram matrix, and the implied pointwise inequalities on
// deterministic sample grids.
CertificateReport verify_certificate(const problem::SafetyProblem& normalized,
                                     const Certificate& certificate);

}  // namespace relax
}  // namespace occusafe
