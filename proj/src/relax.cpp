#include "occusafe/relax.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace occusafe {
namespace relax {

namespace {

using moments::MonomialBasis;
using problem::SafetyProblem;
using solver::ConicProgram;
using solver::EqRow;
using solver::LinTerm;
using solver::PsdBlock;

Exponent add_exponents(const Exponent& a, const Exponent& b) {
  Exponent out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Exponent drop_time_slot(const Exponent& e) {
  return Exponent(e.begin() + 1, e.end());
}

Polynomial time_interval_poly(int n) {
  // t - t^2 >= 0 encodes t in [0, 1].
  Exponent t1(1 + n, 0), t2(1 + n, 0);
  t1[0] = 1;
  t2[0] = 2;
  Polynomial p = Polynomial::monomial(t1, 1.0);
  p += Polynomial::monomial(t2, -1.0);
  return p;
}

const char* group_name(MeasureGroup g) {
  switch (g) {
    case MeasureGroup::unsafe_occupation: return "unsafe";
    case MeasureGroup::complement_occupation: return "complement";
    case MeasureGroup::total_occupation: return "total";
    case MeasureGroup::terminal: return "terminal";
  }
  return "?";
}

}  // namespace

int RelaxationLayout::num_vars() const {
  return 3 * static_cast<int>(ts_basis->size()) +
         static_cast<int>(state_basis->size());
}

int RelaxationLayout::var_index(MeasureGroup group, const Exponent& e) const {
  const int g = static_cast<int>(group);
  if (group == MeasureGroup::terminal) {
    return group_offset[g] + static_cast<int>(state_basis->index_of(e));
  }
  return group_offset[g] + static_cast<int>(ts_basis->index_of(e));
}

std::vector<Exponent> admissible_test_monomials(
    const std::vector<Polynomial>& dynamics, int order) {
  if (dynamics.empty()) {
    throw std::invalid_argument("admissible_test_monomials: empty dynamics");
  }
  const int n = dynamics[0].num_state_vars();
  const int cap = 2 * order;
  std::vector<Exponent> out;
  for (const Exponent& e : polyalg::enumerate_monomials(1 + n, cap)) {
    const Polynomial v = Polynomial::monomial(e, 1.0);
    const Polynomial lv = polyalg::lie_derivative(v, dynamics);
    if (lv.degree() <= cap) out.push_back(e);
  }
  return out;
}

Relaxation assemble_primal(const SafetyProblem& normalized, int order) {
  const SafetyProblem& p = normalized;
  if (order < 1) {
    throw std::invalid_argument("assemble_primal: order must be at least 1");
  }
  if (std::abs(p.horizon - 1.0) > 1e-12) {
    throw std::invalid_argument(
        "assemble_primal: expects a normalized problem with unit horizon");
  }
  const int n = p.n;
  const int r = order;
  const int cap = 2 * r;
  if (p.objective.degree() > cap) {
    throw std::invalid_argument(
        "assemble_primal: objective degree exceeds the relaxation order");
  }
  auto check_set_poly = [cap](const Polynomial& g, const char* which) {
    if (g.degree() > cap) {
      throw std::invalid_argument(std::string("assemble_primal: ") + which +
                                  " set degree exceeds the relaxation order");
    }
    for (const auto& [e, c] : g.terms()) {
      if (e[0] != 0) {
        throw std::invalid_argument(std::string("assemble_primal: ") + which +
                                    " set polynomial depends on t");
      }
    }
  };
  for (const Polynomial& g : p.safe_set) check_set_poly(g, "safe");
  for (const Polynomial& g : p.unsafe_set) check_set_poly(g, "unsafe");

  Relaxation rel;
  RelaxationLayout& layout = rel.layout;
  layout.order = r;
  layout.n = n;
  layout.ts_basis = moments::basis_for(1 + n, cap);
  layout.state_basis = moments::basis_for(n, cap);
  const int ts_size = static_cast<int>(layout.ts_basis->size());
  layout.group_offset = {0, ts_size, 2 * ts_size, 3 * ts_size};
  layout.initial = problem::initial_moments(p, cap);

  ConicProgram& prog = rel.program;
  prog.num_vars = layout.num_vars();
  prog.objective.assign(prog.num_vars, 0.0);
  for (const auto& [e, coef] : p.objective.terms()) {
    prog.objective[layout.var_index(MeasureGroup::unsafe_occupation, e)] +=
        coef;
  }

  // Transport identity rows: for each admissible test monomial
  // v = t^a x^alpha, the final-time average of x^alpha minus the occupation
  // average of dv/dt + f . grad v equals the initial average of v(0, .).
  layout.liouville = admissible_test_monomials(p.dynamics, r);
  for (const Exponent& e : layout.liouville) {
    EqRow row;
    const Exponent alpha = drop_time_slot(e);
    row.terms.push_back(
        {layout.var_index(MeasureGroup::terminal, alpha), 1.0});
    const Polynomial lv =
        polyalg::lie_derivative(Polynomial::monomial(e, 1.0), p.dynamics);
    for (const auto& [le, lc] : lv.terms()) {
      row.terms.push_back(
          {layout.var_index(MeasureGroup::total_occupation, le), -lc});
    }
    row.rhs = e[0] == 0
                  ? layout.initial.values[layout.state_basis->index_of(alpha)]
                  : 0.0;
    row.label = "transport " + Polynomial::monomial(e, 1.0).to_string();
    prog.rows.push_back(std::move(row));
  }

  // Splitting rows: the unsafe and complement occupation moments add up to
  // the total occupation moments.
  for (const Exponent& e : layout.ts_basis->monomials()) {
    layout.domination.push_back(e);
    EqRow row;
    row.terms.push_back(
        {layout.var_index(MeasureGroup::unsafe_occupation, e), 1.0});
    row.terms.push_back(
        {layout.var_index(MeasureGroup::complement_occupation, e), 1.0});
    row.terms.push_back(
        {layout.var_index(MeasureGroup::total_occupation, e), -1.0});
    row.rhs = 0.0;
    row.label = "split " + Polynomial::monomial(e, 1.0).to_string();
    prog.rows.push_back(std::move(row));
  }

  // Scale each row by the inverse of its largest coefficient.
  for (EqRow& row : prog.rows) {
    double norm = 0.0;
    for (const LinTerm& t : row.terms) norm = std::max(norm, std::abs(t.coef));
    if (norm > 0.0 && norm != 1.0) {
      const double s = 1.0 / norm;
      for (LinTerm& t : row.terms) t.coef *= s;
      row.rhs *= s;
      row.scale = s;
    }
  }

  // One moment block plus localizers per measure.
  auto add_block = [&](MeasureGroup group, const Polynomial& multiplier,
                       const std::string& label) {
    const bool state_only = group == MeasureGroup::terminal;
    const int deg = multiplier.degree();
    const int s = r - (deg + 1) / 2;
    if (s < 0) {
      throw std::invalid_argument(
          "assemble_primal: set polynomial degree exceeds the order");
    }
    const auto basis = state_only ? moments::basis_for(n, s)
                                  : moments::basis_for(1 + n, s);
    BlockInfo info;
    info.group = group;
    info.multiplier = multiplier;
    info.basis = basis->monomials();
    info.label = label;

    PsdBlock blk;
    blk.dim = static_cast<int>(basis->size());
    blk.label = label;
    blk.constant.assign(PsdBlock::packed_size(blk.dim), 0.0);
    blk.linear.resize(blk.constant.size());
    int idx = 0;
    for (int i = 0; i < blk.dim; ++i) {
      for (int j = i; j < blk.dim; ++j, ++idx) {
        const Exponent base = add_exponents((*basis)[i], (*basis)[j]);
        for (const auto& [ge, gc] : multiplier.terms()) {
          Exponent e = add_exponents(base, state_only ? drop_time_slot(ge)
                                                      : ge);
          blk.linear[idx].push_back({layout.var_index(group, e), gc});
        }
      }
    }
    prog.blocks.push_back(std::move(blk));
    layout.blocks.push_back(std::move(info));
  };

  const Polynomial one = Polynomial::constant(n, 1.0);
  const Polynomial tpoly = time_interval_poly(n);
  const std::array<MeasureGroup, 3> ts_groups = {
      MeasureGroup::unsafe_occupation, MeasureGroup::complement_occupation,
      MeasureGroup::total_occupation};
  for (MeasureGroup group : ts_groups) {
    const std::string name = group_name(group);
    add_block(group, one, name + " moment");
    add_block(group, tpoly, name + " time localizer");
    const auto& set_polys = group == MeasureGroup::unsafe_occupation
                                ? p.unsafe_set
                                : p.safe_set;
    for (std::size_t i = 0; i < set_polys.size(); ++i) {
      add_block(group, set_polys[i],
                name + " set localizer " + std::to_string(i));
    }
  }
  add_block(MeasureGroup::terminal, one, "terminal moment");
  for (std::size_t i = 0; i < p.safe_set.size(); ++i) {
    add_block(MeasureGroup::terminal, p.safe_set[i],
              "terminal set localizer " + std::to_string(i));
  }

  prog.validate();
  return rel;
}

Certificate extract_certificate(const Relaxation& relaxation,
                                const solver::Solution& solution) {
  const RelaxationLayout& layout = relaxation.layout;
  const auto& rows = relaxation.program.rows;
  const std::size_t num_liouville = layout.liouville.size();
  if (solution.row_duals.size() != rows.size()) {
    throw std::invalid_argument(
        "extract_certificate: solution does not match the relaxation");
  }

  Certificate cert;
  cert.v = Polynomial(layout.n);
  cert.w = Polynomial(layout.n);
  for (std::size_t i = 0; i < num_liouville; ++i) {
    const double lambda = solution.row_duals[i] * rows[i].scale;
    cert.v += Polynomial::monomial(layout.liouville[i], lambda);
  }
  for (std::size_t i = 0; i < layout.domination.size(); ++i) {
    const std::size_t ri = num_liouville + i;
    const double u = solution.row_duals[ri] * rows[ri].scale;
    cert.w += Polynomial::monomial(layout.domination[i], u);
  }

  // Bound implied by the certificate: the initial average of v(0, .).
  Polynomial v0(layout.n);
  for (const auto& [e, c] : cert.v.terms()) {
    if (e[0] == 0) v0 += Polynomial::monomial(e, c);
  }
  cert.bound = moments::riesz(layout.initial, v0);

  for (std::size_t k = 0; k < layout.blocks.size(); ++k) {
    const BlockInfo& info = layout.blocks[k];
    GramTerm term;
    term.multiplier = info.multiplier;
    term.basis = info.basis;
    term.gram = solution.block_duals[k];
    cert.groups[static_cast<int>(info.group)].push_back(std::move(term));
  }
  return cert;
}

namespace {

// basis^T G basis expanded as a polynomial over the given variable slots.
Polynomial gram_polynomial(const GramTerm& term, int num_state_vars,
                           bool state_only) {
  Polynomial out(num_state_vars);
  const int d = term.gram.dim();
  for (int i = 0; i < d; ++i) {
    for (int j = i; j < d; ++j) {
      const double w = (i == j ? 1.0 : 2.0) * term.gram(i, j);
      if (w == 0.0) continue;
      Exponent e = add_exponents(term.basis[i], term.basis[j]);
      if (state_only) e.insert(e.begin(), 0);
      out += Polynomial::monomial(e, w);
    }
  }
  Polynomial mult = term.multiplier;
  return out * mult;
}

double max_abs_coefficient(const Polynomial& p) {
  double m = 0.0;
  for (const auto& [e, c] : p.terms()) m = std::max(m, std::abs(c));
  return m;
}

}  // namespace

CertificateReport verify_certificate(const SafetyProblem& normalized,
                                     const Certificate& certificate) {
  const SafetyProblem& p = normalized;
  const Certificate& cert = certificate;
  CertificateReport report;
  report.min_gram_eigenvalue = std::numeric_limits<double>::infinity();

  const Polynomial lv = polyalg::lie_derivative(cert.v, p.dynamics);
  Polynomial v_final(p.n);  // v(1, x)
  {
    std::vector<double> scale(1 + p.n, 1.0), shift(1 + p.n, 0.0);
    scale[0] = 0.0;
    shift[0] = 1.0;
    v_final = cert.v.compose_affine(scale, shift, 0.0);
  }

  std::array<Polynomial, 4> lhs = {
      cert.w - p.objective,          // over the unsafe set
      cert.w,                        // over the safe set
      -lv - cert.w,                  // over the safe set
      v_final,                       // over the safe set at the final time
  };
  for (int g = 0; g < 4; ++g) {
    Polynomial residual = lhs[g];
    for (const GramTerm& term : cert.groups[g]) {
      if (term.gram.dim() > 0) {
        report.min_gram_eigenvalue = std::min(report.min_gram_eigenvalue,
                                              term.gram.min_eigenvalue());
      }
      residual -= gram_polynomial(term, p.n, g == 3);
    }
    report.identity_residual[g] = max_abs_coefficient(residual);
    report.worst_violation =
        std::max(report.worst_violation, report.identity_residual[g]);
  }
  if (!std::isfinite(report.min_gram_eigenvalue)) {
    report.min_gram_eigenvalue = 0.0;
  }

  // Pointwise spot checks of the implied inequalities on deterministic
  // samples of the box, the safe set, and the unsafe set.
  std::mt19937_64 rng(0xcafef00dULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  auto inside = [&](const std::vector<Polynomial>& set_polys,
                    const std::vector<double>& point) {
    for (const Polynomial& g : set_polys) {
      if (g.evaluate(point) < 0.0) return false;
    }
    return true;
  };
  double viol = 0.0;
  int safe_found = 0, unsafe_found = 0;
  std::vector<double> point(1 + p.n, 0.0);
  for (int attempt = 0; attempt < 20000 && (safe_found < 400 ||
                                            unsafe_found < 400);
       ++attempt) {
    for (int i = 0; i < p.n; ++i) point[1 + i] = sym(rng);
    point[0] = unit(rng);
    if (unsafe_found < 400 && inside(p.unsafe_set, point)) {
      ++unsafe_found;
      viol = std::max(viol, p.objective.evaluate(point) -
                                cert.w.evaluate(point));
    }
    if (safe_found < 400 && inside(p.safe_set, point)) {
      ++safe_found;
      viol = std::max(viol, -cert.w.evaluate(point));
      viol = std::max(viol, lv.evaluate(point) + cert.w.evaluate(point));
      std::vector<double> final_point = point;
      final_point[0] = 1.0;
      viol = std::max(viol, -v_final.evaluate(final_point));
    }
  }
  report.sample_violation = viol;
  return report;
}

}  // namespace relax
}  // namespace occusafe
