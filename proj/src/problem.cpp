#include "occusafe/problem.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>

namespace occusafe {
namespace problem {

namespace {

bool uses_time(const Polynomial& p) {
  for (const auto& [e, c] : p.terms()) {
    if (e[0] != 0) return true;
  }
  return false;
}

bool inside(const std::vector<Polynomial>& set_polys,
            const std::vector<double>& point) {
  for (const Polynomial& g : set_polys) {
    if (g.evaluate(point) < 0.0) return false;
  }
  return true;
}

std::string describe_point(const std::vector<double>& point) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 1; i < point.size(); ++i) {
    if (i > 1) os << ", ";
    os << point[i];
  }
  os << ")";
  return os.str();
}

}  // namespace

SafetyProblem SafetyProblem::make(int n, double horizon) {
  SafetyProblem p;
  p.n = n;
  p.horizon = horizon;
  p.state_names.reserve(n);
  for (int i = 0; i < n; ++i) {
    p.state_names.push_back("x" + std::to_string(i + 1));
  }
  p.dynamics.assign(n, Polynomial(n));
  p.objective = Polynomial::constant(n, 1.0);
  return p;
}

bool has_errors(const std::vector<Diagnostic>& diagnostics) {
  for (const Diagnostic& d : diagnostics) {
    if (d.severity == Diagnostic::Severity::error) return true;
  }
  return false;
}

std::vector<Diagnostic> validate(const SafetyProblem& p,
                                 const std::vector<double>& box_lo,
                                 const std::vector<double>& box_hi) {
  std::vector<Diagnostic> out;
  auto error = [&out](std::string msg) {
    out.push_back({Diagnostic::Severity::error, std::move(msg)});
  };
  auto warning = [&out](std::string msg) {
    out.push_back({Diagnostic::Severity::warning, std::move(msg)});
  };

  if (p.n < 1) error("state dimension must be at least 1");
  if (!(p.horizon > 0.0)) error("time horizon must be positive");
  if (static_cast<int>(p.dynamics.size()) != p.n) {
    error("dynamics must provide one polynomial per state variable");
  }
  if (static_cast<int>(p.state_names.size()) != p.n) {
    error("state_names must list one name per state variable");
  }
  if (static_cast<int>(box_lo.size()) != p.n ||
      static_cast<int>(box_hi.size()) != p.n) {
    error("bounding box must have one interval per state variable");
  }
  if (has_errors(out)) return out;

  for (int i = 0; i < p.n; ++i) {
    if (!(box_lo[i] < box_hi[i])) {
      error("bounding box interval " + std::to_string(i + 1) +
            " is empty or degenerate");
    }
  }
  for (const Polynomial& g : p.safe_set) {
    if (g.num_state_vars() != p.n) {
      error("safe set polynomial has wrong variable count");
    } else if (uses_time(g)) {
      error("safe set polynomial depends on t: " + g.to_string(p.state_names));
    }
  }
  for (const Polynomial& g : p.unsafe_set) {
    if (g.num_state_vars() != p.n) {
      error("unsafe set polynomial has wrong variable count");
    } else if (uses_time(g)) {
      error("unsafe set polynomial depends on t: " +
            g.to_string(p.state_names));
    }
  }
  for (const Polynomial& f : p.dynamics) {
    if (f.num_state_vars() != p.n) {
      error("dynamics polynomial has wrong variable count");
    }
  }
  if (p.objective.num_state_vars() != p.n) {
    error("objective polynomial has wrong variable count");
  }
  if (const auto* d = std::get_if<DiracInitial>(&p.initial)) {
    if (static_cast<int>(d->point.size()) != p.n) {
      error("initial point has wrong dimension");
    }
  } else if (const auto* u = std::get_if<UniformBoxInitial>(&p.initial)) {
    if (static_cast<int>(u->lo.size()) != p.n ||
        static_cast<int>(u->hi.size()) != p.n) {
      error("initial box has wrong dimension");
    } else {
      for (int i = 0; i < p.n; ++i) {
        if (!(u->lo[i] < u->hi[i])) {
          error("initial box interval " + std::to_string(i + 1) +
                " is empty or degenerate");
        }
      }
    }
  } else if (const auto* m = std::get_if<MomentInitial>(&p.initial)) {
    if (m->degree < 0) {
      error("initial moment degree must be nonnegative");
    } else {
      const auto basis = moments::basis_for(p.n, m->degree);
      if (m->values.size() != basis->size()) {
        error("initial moments: expected " + std::to_string(basis->size()) +
              " values for degree " + std::to_string(m->degree) + ", got " +
              std::to_string(m->values.size()));
      } else if (std::abs(m->values[0] - 1.0) > 1e-9) {
        error("initial moments must describe a probability distribution "
              "(mass 1)");
      }
    }
  }
  if (has_errors(out)) return out;

  // Sampling checks. Deterministic generator: diagnostics are reproducible.
  std::mt19937_64 rng(0x5afe5afeULL);
  std::vector<std::uniform_real_distribution<double>> axis;
  axis.reserve(p.n);
  for (int i = 0; i < p.n; ++i) {
    axis.emplace_back(box_lo[i], box_hi[i]);
  }
  const int attempts = 10000;
  std::vector<double> point(1 + p.n, 0.0);
  int unsafe_hits = 0;
  for (int k = 0; k < attempts; ++k) {
    for (int i = 0; i < p.n; ++i) point[1 + i] = axis[i](rng);
    if (!inside(p.unsafe_set, point)) continue;
    ++unsafe_hits;
    if (!inside(p.safe_set, point)) {
      warning("sampled a point of the unsafe region outside the safe region "
              "at " + describe_point(point) +
              "; the unsafe region should satisfy the safe set constraints");
      break;
    }
    if (p.objective.evaluate(point) < 0.0) {
      warning("objective is negative on the unsafe region at " +
              describe_point(point) + "; bounds assume it is nonnegative");
      break;
    }
  }
  if (!p.unsafe_set.empty() && unsafe_hits == 0) {
    warning("no sampled box point landed in the unsafe region; it may be "
            "empty or very small relative to the box");
  }

  if (const auto* d = std::get_if<DiracInitial>(&p.initial)) {
    std::vector<double> x0(1 + p.n, 0.0);
    for (int i = 0; i < p.n; ++i) x0[1 + i] = d->point[i];
    if (!inside(p.safe_set, x0)) {
      warning("initial point lies outside the safe region");
    }
    for (int i = 0; i < p.n; ++i) {
      if (d->point[i] < box_lo[i] || d->point[i] > box_hi[i]) {
        warning("initial point lies outside the bounding box");
        break;
      }
    }
  } else if (const auto* u = std::get_if<UniformBoxInitial>(&p.initial)) {
    for (int i = 0; i < p.n; ++i) {
      if (u->lo[i] < box_lo[i] || u->hi[i] > box_hi[i]) {
        warning("initial box is not contained in the bounding box");
        break;
      }
    }
  }
  return out;
}

std::pair<SafetyProblem, ScalingRecord> normalize(
    const SafetyProblem& p, const std::vector<double>& box_lo,
    const std::vector<double>& box_hi) {
  if (static_cast<int>(box_lo.size()) != p.n ||
      static_cast<int>(box_hi.size()) != p.n) {
    throw std::invalid_argument("normalize: box dimension mismatch");
  }
  if (!(p.horizon > 0.0)) {
    throw std::invalid_argument("normalize: horizon must be positive");
  }

  ScalingRecord rec;
  rec.time_scale = p.horizon;
  rec.space_scale.resize(p.n);
  rec.space_shift.resize(p.n);
  for (int i = 0; i < p.n; ++i) {
    const double s = 0.5 * (box_hi[i] - box_lo[i]);
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw std::invalid_argument("normalize: degenerate box interval " +
                                  std::to_string(i + 1));
    }
    rec.space_scale[i] = s;
    rec.space_shift[i] = 0.5 * (box_hi[i] + box_lo[i]);
  }

  // Slot map for compose_affine: slot 0 is time, slots 1..n are states.
  std::vector<double> scale(1 + p.n), shift(1 + p.n, 0.0);
  scale[0] = rec.time_scale;
  for (int i = 0; i < p.n; ++i) {
    scale[1 + i] = rec.space_scale[i];
    shift[1 + i] = rec.space_shift[i];
  }

  SafetyProblem q = p;
  q.horizon = 1.0;
  for (int i = 0; i < p.n; ++i) {
    q.dynamics[i] = p.dynamics[i].compose_affine(scale, shift) *
                    (rec.time_scale / rec.space_scale[i]);
  }
  q.safe_set.clear();
  for (const Polynomial& g : p.safe_set) {
    q.safe_set.push_back(g.compose_affine(scale, shift));
  }
  q.unsafe_set.clear();
  for (const Polynomial& g : p.unsafe_set) {
    q.unsafe_set.push_back(g.compose_affine(scale, shift));
  }
  q.objective = p.objective.compose_affine(scale, shift);

  // Box constraints 1 - x~_i^2 >= 0 on both descriptions. X_u is contained
  // in X, hence in the box, so the sets are unchanged; the added generators
  // make each quadratic module Archimedean.
  for (int i = 0; i < p.n; ++i) {
    Polynomial box = Polynomial::constant(p.n, 1.0);
    polyalg::Exponent sq(1 + p.n, 0);
    sq[1 + i] = 2;
    box += Polynomial::monomial(sq, -1.0);
    q.safe_set.push_back(box);
    q.unsafe_set.push_back(box);
  }

  if (const auto* d = std::get_if<DiracInitial>(&p.initial)) {
    DiracInitial nd;
    nd.point.resize(p.n);
    for (int i = 0; i < p.n; ++i) {
      nd.point[i] = (d->point[i] - rec.space_shift[i]) / rec.space_scale[i];
    }
    q.initial = nd;
  } else if (const auto* u = std::get_if<UniformBoxInitial>(&p.initial)) {
    UniformBoxInitial nu;
    nu.lo.resize(p.n);
    nu.hi.resize(p.n);
    for (int i = 0; i < p.n; ++i) {
      nu.lo[i] = (u->lo[i] - rec.space_shift[i]) / rec.space_scale[i];
      nu.hi[i] = (u->hi[i] - rec.space_shift[i]) / rec.space_scale[i];
    }
    q.initial = nu;
  } else if (const auto* m = std::get_if<MomentInitial>(&p.initial)) {
    // E[x~^alpha] = E[prod ((x_i - c_i)/s_i)^{a_i}]: expand each factor by
    // the binomial theorem and read the result off the raw moments.
    const auto basis = moments::basis_for(p.n, m->degree);
    if (m->values.size() != basis->size()) {
      throw std::invalid_argument("normalize: initial moment vector has " +
                                  std::to_string(m->values.size()) +
                                  " values, expected " +
                                  std::to_string(basis->size()));
    }
    moments::MomentVector raw(p.n, m->degree);
    raw.values = m->values;

    MomentInitial nm;
    nm.degree = m->degree;
    nm.values.reserve(basis->size());
    for (std::size_t k = 0; k < basis->size(); ++k) {
      const polyalg::Exponent& alpha = (*basis)[k];
      Polynomial mapped = Polynomial::constant(p.n, 1.0);
      for (int i = 0; i < p.n; ++i) {
        if (alpha[i] == 0) continue;
        Polynomial lin = Polynomial::variable(p.n, 1 + i) *
                         (1.0 / rec.space_scale[i]);
        lin += Polynomial::constant(
            p.n, -rec.space_shift[i] / rec.space_scale[i]);
        mapped = mapped * lin.pow(alpha[i]);
      }
      nm.values.push_back(moments::riesz(raw, mapped));
    }
    q.initial = nm;
  }
  return {q, rec};
}

moments::MomentVector initial_moments(const SafetyProblem& p, int degree) {
  if (const auto* d = std::get_if<DiracInitial>(&p.initial)) {
    return moments::dirac_moments(d->point, degree);
  }
  if (const auto* u = std::get_if<UniformBoxInitial>(&p.initial)) {
    return moments::box_uniform_moments(u->lo, u->hi, degree);
  }
  const auto& m = std::get<MomentInitial>(p.initial);
  if (m.degree < degree) {
    throw std::invalid_argument(
        "initial_moments: raw moments carry degree " +
        std::to_string(m.degree) + ", need " + std::to_string(degree));
  }
  const auto full = moments::basis_for(p.n, m.degree);
  if (m.values.size() != full->size()) {
    throw std::invalid_argument("initial_moments: moment vector size "
                                "mismatch");
  }
  if (std::abs(m.values[0] - 1.0) > 1e-9) {
    throw std::invalid_argument("initial_moments: mass must be 1");
  }
  moments::MomentVector out(p.n, degree);
  const auto trunc = moments::basis_for(p.n, degree);
  for (std::size_t k = 0; k < trunc->size(); ++k) {
    out.values[k] = m.values[full->index_of((*trunc)[k])];
  }
  return out;
}

double bound_in_original_units(double normalized_bound,
                               const ScalingRecord& record) {
  return normalized_bound * record.time_scale;
}

}  // namespace problem
}  // namespace occusafe
