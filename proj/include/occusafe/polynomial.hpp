#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace occusafe {
namespace polyalg {

// Exponent tuple over (t, x1, ..., xn): slot 0 is the time variable, slots
// 1..n the state variables. Helper bases over x only use length-n tuples.
using Exponent = std::vector<int>;

int total_degree(const Exponent& e);

// Graded lexicographic order: lower total degree first; within a degree
// class the earlier variable dominates (t before x1 before x2, higher power
// first), so e.g. for two variables the degree-2 class reads z1^2, z1*z2,
// z2^2. This is the canonical order for moment vectors and matrix bases.
struct GradedLexLess {
  bool operator()(const Exponent& a, const Exponent& b) const;
};

struct ExponentHash {
  std::size_t operator()(const Exponent& e) const;
};

// All monomials in `num_vars` variables of total degree <= max_degree, in
// canonical order. Size is binom(num_vars + max_degree, max_degree).
std::vector<Exponent> enumerate_monomials(int num_vars, int max_degree);

// Sparse multivariate polynomial over (t, x1..xn) with double coefficients.
// Terms are kept in canonical order; arithmetic prunes exact-zero
// coefficients only (tolerance cleanup is a separate explicit operation).
class Polynomial {
 public:
  // Zero polynomial over n state variables (n + 1 slots including t).
  explicit Polynomial(int num_state_vars);

  static Polynomial constant(int num_state_vars, double value);
  // slot 0 is t, slot i >= 1 is x_i.
  static Polynomial variable(int num_state_vars, int slot);
  static Polynomial monomial(Exponent e, double coefficient);

  int num_state_vars() const { return num_state_vars_; }
  int num_slots() const { return num_state_vars_ + 1; }

  // Max total degree over terms; 0 for the zero polynomial.
  int degree() const;

  bool is_zero() const { return terms_.empty(); }

  double coefficient(const Exponent& e) const;
  void set_coefficient(const Exponent& e, double value);

  const std::map<Exponent, double, GradedLexLess>& terms() const {
    return terms_;
  }

  Polynomial& operator+=(const Polynomial& other);
  Polynomial& operator-=(const Polynomial& other);
  Polynomial& operator*=(double scalar);
  Polynomial operator-() const;

  friend Polynomial operator+(Polynomial a, const Polynomial& b) {
    a += b;
    return a;
  }
  friend Polynomial operator-(Polynomial a, const Polynomial& b) {
    a -= b;
    return a;
  }
  friend Polynomial operator*(const Polynomial& a, const Polynomial& b);
  friend Polynomial operator*(Polynomial a, double s) {
    a *= s;
    return a;
  }
  friend Polynomial operator*(double s, Polynomial a) {
    a *= s;
    return a;
  }

  bool operator==(const Polynomial& other) const;

  Polynomial pow(int exponent) const;

  // Partial derivative with respect to the given slot (0 = t).
  Polynomial differentiate(int slot) const;

  // point = (t, x1, ..., xn).
  double evaluate(const std::vector<double>& point) const;

  // Substitute slot j -> scale[j] * z_j + shift[j] for every slot and expand.
  // Near-zero coefficients produced by the expansion are pruned with the
  // given absolute tolerance (default matches the documented cleanup rule).
  Polynomial compose_affine(const std::vector<double>& scale,
                            const std::vector<double>& shift,
                            double cleanup_tol = 1e-14) const;

  // Drop terms with |coefficient| <= tol.
  Polynomial cleaned(double tol) const;

  // Canonical text form: terms in canonical order, coefficients printed with
  // 17 significant digits; re-parses to an identical polynomial.
  std::string to_string() const;
  std::string to_string(const std::vector<std::string>& state_names) const;

  // Largest |coefficient|; 0 for the zero polynomial.
  double max_abs_coefficient() const;

 private:
  int num_state_vars_;
  std::map<Exponent, double, GradedLexLess> terms_;
};

// Lv = dv/dt + sum_i dv/dx_i * f_i. Requires f.size() == v.num_state_vars().
Polynomial lie_derivative(const Polynomial& v,
                          const std::vector<Polynomial>& f);

// Thrown by parse_polynomial with a position-annotated message.
struct ParseError : std::runtime_error {
  ParseError(const std::string& message, std::size_t position);
  std::size_t position;
};

// Grammar: expr := term (('+'|'-') term)*, term := factor ('*' factor)*,
// factor := ('-'|'+')* base ('^' integer)?, base := number | variable |
// '(' expr ')'. No implicit multiplication. Variables are "t" plus the given
// state names; exponents must be nonnegative integer literals.
Polynomial parse_polynomial(const std::string& text,
                            const std::vector<std::string>& state_names);

}  // namespace polyalg
}  // namespace occusafe
