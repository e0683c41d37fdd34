#include "occusafe/moments.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <mutex>

#include <Eigen/Eigenvalues>

namespace occusafe {
namespace moments {

MonomialBasis::MonomialBasis(int num_vars, int max_degree)
    : num_vars_(num_vars),
      max_degree_(max_degree),
      monomials_(polyalg::enumerate_monomials(num_vars, max_degree)) {
  index_.reserve(monomials_.size());
  for (int i = 0; i < static_cast<int>(monomials_.size()); ++i) {
    index_.emplace(monomials_[i], i);
  }
}

int MonomialBasis::index_of(const Exponent& e) const {
  const int i = find(e);
  if (i < 0) {
    throw std::out_of_range(
        "MonomialBasis: exponent beyond truncation (degree " +
        std::to_string(polyalg::total_degree(e)) + " > " +
        std::to_string(max_degree_) + ")");
  }
  return i;
}

int MonomialBasis::find(const Exponent& e) const {
  auto it = index_.find(e);
  return it == index_.end() ? -1 : it->second;
}

std::shared_ptr<const MonomialBasis> basis_for(int num_vars, int max_degree) {
  static std::mutex mutex;
  static std::map<std::pair<int, int>, std::shared_ptr<const MonomialBasis>>
      cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto& slot = cache[{num_vars, max_degree}];
  if (!slot) slot = std::make_shared<MonomialBasis>(num_vars, max_degree);
  return slot;
}

MomentVector::MomentVector(int num_vars_in, int degree_in)
    : num_vars(num_vars_in), degree(degree_in) {
  values.resize(basis_for(num_vars, degree)->size(), 0.0);
}

const MonomialBasis& MomentVector::basis() const {
  if (!basis_ || basis_->num_vars() != num_vars ||
      basis_->max_degree() != degree) {
    basis_ = basis_for(num_vars, degree);
  }
  return *basis_;
}

SymMatrix::SymMatrix(int dim) : dim_(dim), upper_(dim * (dim + 1) / 2, 0.0) {}

int SymMatrix::packed_index(int i, int j) const {
  if (i > j) std::swap(i, j);
  // Row-major upper triangle: row i starts at i*dim - i*(i-1)/2 - i offsets.
  return i * dim_ - i * (i - 1) / 2 + (j - i);
}

Eigen::MatrixXd SymMatrix::to_dense() const {
  Eigen::MatrixXd m(dim_, dim_);
  for (int i = 0; i < dim_; ++i) {
    for (int j = i; j < dim_; ++j) {
      m(i, j) = (*this)(i, j);
      m(j, i) = m(i, j);
    }
  }
  return m;
}

double SymMatrix::min_eigenvalue() const {
  if (dim_ == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_dense(),
                                                    Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

namespace {

// Maps a (t,x) exponent to the target variable count of y: identical length
// passes through; a state-only y requires a time-free exponent.
bool adapt_exponent(const Exponent& e, int y_vars, Exponent& out) {
  const int slots = static_cast<int>(e.size());
  if (slots == y_vars) {
    out = e;
    return true;
  }
  if (slots == y_vars + 1) {
    if (e[0] != 0) return false;
    out.assign(e.begin() + 1, e.end());
    return true;
  }
  throw std::invalid_argument(
      "moment operation: polynomial has " + std::to_string(slots) +
      " slots but the moment vector has " + std::to_string(y_vars) +
      " variables");
}

}  // namespace

double riesz(const MomentVector& y, const Polynomial& p) {
  const MonomialBasis& basis = y.basis();
  double acc = 0.0;
  Exponent adapted;
  for (const auto& [e, c] : p.terms()) {
    if (!adapt_exponent(e, y.num_vars, adapted)) {
      throw std::invalid_argument(
          "riesz: time-dependent polynomial applied to a state-only moment vector");
    }
    const int idx = basis.find(adapted);
    if (idx < 0) {
      throw std::invalid_argument(
          "riesz: degree overflow (polynomial references a moment beyond the truncation)");
    }
    acc += c * y.values[idx];
  }
  return acc;
}

SymMatrix moment_matrix(const MomentVector& y, int r) {
  if (r < 0) throw std::invalid_argument("moment_matrix: negative order");
  if (y.degree < 2 * r) {
    throw std::invalid_argument(
        "moment_matrix: truncation " + std::to_string(y.degree) +
        " too small for order " + std::to_string(r));
  }
  const MonomialBasis& rows = *basis_for(y.num_vars, r);
  const MonomialBasis& full = y.basis();
  SymMatrix m(rows.size());
  Exponent sum(y.num_vars);
  for (int i = 0; i < rows.size(); ++i) {
    for (int j = i; j < rows.size(); ++j) {
      for (int v = 0; v < y.num_vars; ++v) sum[v] = rows[i][v] + rows[j][v];
      m.set(i, j, y.values[full.index_of(sum)]);
    }
  }
  return m;
}

SymMatrix localizing_matrix(const Polynomial& g, const MomentVector& y,
                            int s) {
  if (s < 0) throw std::invalid_argument("localizing_matrix: negative order");
  if (y.degree < 2 * s + g.degree()) {
    throw std::invalid_argument(
        "localizing_matrix: truncation too small (need " +
        std::to_string(2 * s + g.degree()) + ", have " +
        std::to_string(y.degree) + ")");
  }
  const MonomialBasis& rows = *basis_for(y.num_vars, s);
  const MonomialBasis& full = y.basis();
  SymMatrix m(rows.size());
  Exponent adapted;
  Exponent sum(y.num_vars);
  for (const auto& [e, c] : g.terms()) {
    if (!adapt_exponent(e, y.num_vars, adapted)) {
      throw std::invalid_argument(
          "localizing_matrix: time-dependent polynomial applied to a state-only moment vector");
    }
    for (int i = 0; i < rows.size(); ++i) {
      for (int j = i; j < rows.size(); ++j) {
        for (int v = 0; v < y.num_vars; ++v) {
          sum[v] = adapted[v] + rows[i][v] + rows[j][v];
        }
        m.set(i, j, m(i, j) + c * y.values[full.index_of(sum)]);
      }
    }
  }
  return m;
}

MomentVector dirac_moments(const std::vector<double>& point, int degree) {
  const int v = static_cast<int>(point.size());
  if (v < 1) throw std::invalid_argument("dirac_moments: empty point");
  MomentVector y(v, degree);
  const MonomialBasis& basis = y.basis();
  for (int i = 0; i < basis.size(); ++i) {
    double m = 1.0;
    for (int j = 0; j < v; ++j) {
      for (int k = 0; k < basis[i][j]; ++k) m *= point[j];
    }
    y.values[i] = m;
  }
  return y;
}

MomentVector box_uniform_moments(const std::vector<double>& lo,
                                 const std::vector<double>& hi, int degree) {
  const int v = static_cast<int>(lo.size());
  if (v < 1 || hi.size() != lo.size()) {
    throw std::invalid_argument("box_uniform_moments: bad box");
  }
  // Per-dimension means of z^k over [lo, hi]:
  //   (hi^{k+1} - lo^{k+1}) / ((k+1)(hi - lo)).
  std::vector<std::vector<double>> axis(v);
  for (int j = 0; j < v; ++j) {
    if (!(hi[j] > lo[j])) {
      throw std::invalid_argument("box_uniform_moments: empty interval in dimension " +
                                  std::to_string(j + 1));
    }
    axis[j].resize(degree + 1);
    double plo = lo[j], phi = hi[j];
    for (int k = 0; k <= degree; ++k) {
      axis[j][k] = (phi - plo) / ((k + 1) * (hi[j] - lo[j]));
      plo *= lo[j];
      phi *= hi[j];
    }
  }
  MomentVector y(v, degree);
  const MonomialBasis& basis = y.basis();
  for (int i = 0; i < basis.size(); ++i) {
    double m = 1.0;
    for (int j = 0; j < v; ++j) m *= axis[j][basis[i][j]];
    y.values[i] = m;
  }
  return y;
}

PutinarReport putinar_feasible(const MomentVector& y,
                               const std::vector<Polynomial>& set_polys,
                               int r, double tol) {
  PutinarReport report;
  report.feasible = true;
  report.min_eigenvalue = std::numeric_limits<double>::infinity();

  auto record = [&](const std::string& label, const SymMatrix& m) {
    const double eig = m.min_eigenvalue();
    report.entries.push_back({label, m.dim(), eig});
    report.min_eigenvalue = std::min(report.min_eigenvalue, eig);
    if (eig < -tol) report.feasible = false;
  };

  record("moment matrix", moment_matrix(y, r));
  for (std::size_t i = 0; i < set_polys.size(); ++i) {
    const Polynomial& g = set_polys[i];
    const int d = (g.degree() + 1) / 2;
    if (r - d < 0) {
      throw std::invalid_argument(
          "putinar_feasible: constraint degree " + std::to_string(g.degree()) +
          " exceeds 2r for r = " + std::to_string(r));
    }
    record("localizer " + std::to_string(i + 1), localizing_matrix(g, y, r - d));
  }
  return report;
}

}  // namespace moments
}  // namespace occusafe
