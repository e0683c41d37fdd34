#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "occusafe/polynomial.hpp"

namespace occusafe {
namespace moments {

using polyalg::Exponent;
using polyalg::Polynomial;

// Canonical monomial basis: all monomials of `num_vars` variables up to
// `max_degree`, graded-lex ordered, with O(1) exponent-to-index lookup.
class MonomialBasis {
 public:
  MonomialBasis(int num_vars, int max_degree);

  int num_vars() const { return num_vars_; }
  int max_degree() const { return max_degree_; }
  int size() const { return static_cast<int>(monomials_.size()); }
  const Exponent& operator[](int i) const { return monomials_[i]; }
  const std::vector<Exponent>& monomials() const { return monomials_; }

  // Throws std::out_of_range when the exponent exceeds the truncation.
  int index_of(const Exponent& e) const;
  // -1 when absent.
  int find(const Exponent& e) const;

 private:
  int num_vars_;
  int max_degree_;
  std::vector<Exponent> monomials_;
  std::unordered_map<Exponent, int, polyalg::ExponentHash> index_;
};

// Shared, cached basis lookup (bases are immutable once built).
std::shared_ptr<const MonomialBasis> basis_for(int num_vars, int max_degree);

// Truncated moment sequence: values in canonical order. num_vars is 1+n for
// time-space sequences (slot 0 = t) and n for state-only sequences.
struct MomentVector {
  int num_vars = 0;
  int degree = 0;
  std::vector<double> values;

  MomentVector() = default;
  MomentVector(int num_vars_in, int degree_in);

  int size() const { return static_cast<int>(values.size()); }
  const MonomialBasis& basis() const;

  double operator[](int i) const { return values[i]; }
  double& operator[](int i) { return values[i]; }

 private:
  mutable std::shared_ptr<const MonomialBasis> basis_;
};

// Dense symmetric matrix storing one triangle, so symmetry is exact by
// construction.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(int dim);

  int dim() const { return dim_; }
  double operator()(int i, int j) const { return upper_[packed_index(i, j)]; }
  void set(int i, int j, double value) { upper_[packed_index(i, j)] = value; }

  Eigen::MatrixXd to_dense() const;
  double min_eigenvalue() const;

 private:
  int packed_index(int i, int j) const;

  int dim_ = 0;
  std::vector<double> upper_;  // row-major upper triangle
};

// L_y(p) = sum_alpha p_alpha y_alpha. A state-only moment vector accepts a
// time-free polynomial (slot 0 is dropped). Throws std::invalid_argument on
// degree overflow or a variable-count mismatch.
double riesz(const MomentVector& y, const Polynomial& p);

// [M_r(y)]_{ij} = y_{alpha_i + alpha_j} over the degree-r basis.
// Requires y.degree >= 2r.
SymMatrix moment_matrix(const MomentVector& y, int r);

// [M_s(g, y)]_{ij} = sum_gamma g_gamma y_{gamma + alpha_i + alpha_j}.
// Requires y.degree >= 2s + deg(g).
SymMatrix localizing_matrix(const Polynomial& g, const MomentVector& y, int s);

// Moments of the Dirac measure at `point` up to `degree`.
MomentVector dirac_moments(const std::vector<double>& point, int degree);

// Moments of the uniform probability measure on the box [lo, hi].
MomentVector box_uniform_moments(const std::vector<double>& lo,
                                 const std::vector<double>& hi, int degree);

struct PutinarEntry {
  std::string label;
  int dim = 0;
  double min_eigenvalue = 0.0;
};

struct PutinarReport {
  bool feasible = false;
  double min_eigenvalue = 0.0;  // worst over all tested matrices
  std::vector<PutinarEntry> entries;
};

// Tests M_r(y) and every localizing matrix M_{r - ceil(deg g/2)}(g, y) for
// eigenvalues >= -tol. Constraints whose degree exceeds 2r are rejected.
PutinarReport putinar_feasible(const MomentVector& y,
                               const std::vector<Polynomial>& set_polys,
                               int r, double tol);

}  // namespace moments
}  // namespace occusafe
