#include "occusafe/solver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <tuple>

#include <Eigen/Dense>

#include "json.hpp"

namespace occusafe {
namespace solver {

int PsdBlock::packed_index(int i, int j, int dim) {
  if (i > j) std::swap(i, j);
  return i * dim - i * (i - 1) / 2 + (j - i);
}

void ConicProgram::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("conic program: " + msg);
  };
  if (num_vars < 1) fail("needs at least one variable");
  if (static_cast<int>(objective.size()) != num_vars) {
    fail("objective length does not match num_vars");
  }
  for (const EqRow& row : rows) {
    if (!(row.scale > 0.0)) fail("row scale must be positive");
    for (const LinTerm& t : row.terms) {
      if (t.var < 0 || t.var >= num_vars) fail("row term variable out of range");
    }
  }
  std::vector<char> covered(num_vars, 0);
  for (const PsdBlock& blk : blocks) {
    if (blk.dim < 1) fail("block dimension must be positive");
    const std::size_t packed = PsdBlock::packed_size(blk.dim);
    if (blk.constant.size() != packed) fail("block constant has wrong size");
    if (blk.linear.size() != packed) fail("block linear part has wrong size");
    for (const auto& entry : blk.linear) {
      for (const LinTerm& t : entry) {
        if (t.var < 0 || t.var >= num_vars) {
          fail("block term variable out of range");
        }
        covered[t.var] = 1;
      }
    }
  }
  for (int j = 0; j < num_vars; ++j) {
    // The interior-point reduction needs every variable to act on a cone.
    if (!covered[j]) {
      fail("variable " + std::to_string(j) + " appears in no PSD block");
    }
  }
}

std::string dump_program(const ConicProgram& program) {
  program.validate();
  nlohmann::json j;
  j["format"] = "conic-program-v1";
  j["num_vars"] = program.num_vars;
  j["objective"] = program.objective;
  j["rows"] = nlohmann::json::array();
  for (const EqRow& row : program.rows) {
    nlohmann::json r;
    r["label"] = row.label;
    r["scale"] = row.scale;
    r["rhs"] = row.rhs;
    auto& terms = r["terms"] = nlohmann::json::array();
    for (const LinTerm& t : row.terms) terms.push_back({t.var, t.coef});
    j["rows"].push_back(std::move(r));
  }
  j["blocks"] = nlohmann::json::array();
  for (const PsdBlock& blk : program.blocks) {
    nlohmann::json b;
    b["label"] = blk.label;
    b["dim"] = blk.dim;
    b["constant"] = blk.constant;
    auto& lin = b["linear"] = nlohmann::json::array();
    for (const auto& entry : blk.linear) {
      nlohmann::json e = nlohmann::json::array();
      for (const LinTerm& t : entry) e.push_back({t.var, t.coef});
      lin.push_back(std::move(e));
    }
    j["blocks"].push_back(std::move(b));
  }
  return j.dump(1);
}

ConicProgram load_program(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("conic program: not valid JSON: ") +
                                e.what());
  }
  ConicProgram p;
  try {
    if (j.at("format").get<std::string>() != "conic-program-v1") {
      throw std::invalid_argument("conic program: unknown format tag");
    }
    p.num_vars = j.at("num_vars").get<int>();
    p.objective = j.at("objective").get<std::vector<double>>();
    for (const auto& r : j.at("rows")) {
      EqRow row;
      row.label = r.at("label").get<std::string>();
      row.scale = r.at("scale").get<double>();
      row.rhs = r.at("rhs").get<double>();
      for (const auto& t : r.at("terms")) {
        row.terms.push_back({t.at(0).get<int>(), t.at(1).get<double>()});
      }
      p.rows.push_back(std::move(row));
    }
    for (const auto& b : j.at("blocks")) {
      PsdBlock blk;
      blk.label = b.at("label").get<std::string>();
      blk.dim = b.at("dim").get<int>();
      blk.constant = b.at("constant").get<std::vector<double>>();
      for (const auto& e : b.at("linear")) {
        std::vector<LinTerm> entry;
        for (const auto& t : e) {
          entry.push_back({t.at(0).get<int>(), t.at(1).get<double>()});
        }
        blk.linear.push_back(std::move(entry));
      }
      p.blocks.push_back(std::move(blk));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("conic program: bad field: ") +
                                e.what());
  }
  p.validate();
  return p;
}

const char* to_string(SolveStatus status) {
  switch (status) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::near_optimal: return "near_optimal";
    case SolveStatus::primal_infeasible: return "primal_infeasible";
    case SolveStatus::unbounded: return "unbounded";
    case SolveStatus::iteration_limit: return "iteration_limit";
    case SolveStatus::numerical_failure: return "numerical_failure";
  }
  return "unknown";
}

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using MatrixXld = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
using VectorXld = Eigen::Matrix<long double, Eigen::Dynamic, 1>;

struct BlockData {
  int dim = 0;
  MatrixXd F0;
  bool has_constant = false;
  // The PSD cone is invariant under positive scaling, so blocks with large
  // coefficients are divided down to unit size internally; inv_scale is the
  // factor applied (duals map back by the same factor).
  double inv_scale = 1.0;
  std::vector<int> vars;
  // Parallel to vars: packed entries (i, j, coef) with i <= j, pre-scaled.
  std::vector<std::vector<std::tuple<int, int, double>>> entries;
  const std::vector<std::vector<LinTerm>>* linear = nullptr;

  void eval_linear(const VectorXd& z, MatrixXd& out) const {
    out.setZero(dim, dim);
    int idx = 0;
    for (int i = 0; i < dim; ++i) {
      for (int j = i; j < dim; ++j, ++idx) {
        double v = 0.0;
        for (const LinTerm& t : (*linear)[idx]) v += t.coef * z[t.var];
        v *= inv_scale;
        out(i, j) = v;
        out(j, i) = v;
      }
    }
  }

  // out[var] += <F_var, M> over this block's variables.
  void add_adjoint(const MatrixXd& M, VectorXd& out) const {
    for (std::size_t a = 0; a < vars.size(); ++a) {
      double s = 0.0;
      for (const auto& [i, j, c] : entries[a]) {
        s += c * M(i, j) * (i == j ? 1.0 : 2.0);
      }
      out[vars[a]] += s;
    }
  }

  double min_eig_linear(const VectorXd& z) const {
    MatrixXd M(dim, dim);
    eval_linear(z, M);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(M, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  }
};

double inner(const MatrixXd& a, const MatrixXd& b) {
  return a.cwiseProduct(b).sum();
}

double max_abs(const MatrixXd& a) { return a.cwiseAbs().maxCoeff(); }

// Largest alpha with S + alpha * dS still PSD, given the factorization of S.
double psd_max_step(const MatrixXd& L, const MatrixXd& dS) {
  Eigen::PartialPivLU<MatrixXd> lu(L);
  MatrixXd B = lu.solve(dS);
  B = lu.solve(MatrixXd(B.transpose()));
  B = 0.5 * (B + B.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(B, Eigen::EigenvaluesOnly);
  const double lmin = es.eigenvalues().minCoeff();
  if (lmin >= 0.0) return std::numeric_limits<double>::infinity();
  return -1.0 / lmin;
}

// Square root factor L with L L^T = M. Cholesky when it goes through; for a
// numerically semidefinite iterate fall back to an eigendecomposition with
// the spectrum floored, so the scaling survives rank-deficient boundaries.
bool psd_factor(const MatrixXd& M, MatrixXd& L) {
  Eigen::LLT<MatrixXd> llt(M);
  if (llt.info() == Eigen::Success) {
    L = llt.matrixL();
    return true;
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(M);
  if (es.info() != Eigen::Success) return false;
  const double lmax = es.eigenvalues().maxCoeff();
  if (!(lmax > 0.0)) return false;
  const VectorXd lam = es.eigenvalues().cwiseMax(lmax * 1e-14);
  L.noalias() = es.eigenvectors() * lam.cwiseSqrt().asDiagonal();
  return true;
}

struct Scaling {
  MatrixXd R, Rinv, W, Ls, Ly;
  VectorXd lambda;
};

bool compute_nt_scaling(const MatrixXd& S, const MatrixXd& Y, Scaling& sc) {
  if (!psd_factor(S, sc.Ls)) return false;
  if (!psd_factor(Y, sc.Ly)) return false;
  const int d = static_cast<int>(S.rows());
  Eigen::JacobiSVD<MatrixXd> svd(sc.Ls.transpose() * sc.Ly,
                                 Eigen::ComputeFullU | Eigen::ComputeFullV);
  sc.lambda = svd.singularValues();
  if (sc.lambda.minCoeff() <= 0.0) return false;
  const VectorXd isqrt = sc.lambda.array().sqrt().inverse();
  const VectorXd rsqrt = sc.lambda.array().sqrt();
  sc.R.noalias() = sc.Ly * svd.matrixV() * isqrt.asDiagonal();
  const MatrixXd LyInv =
      sc.Ly.partialPivLu().solve(MatrixXd::Identity(d, d));
  sc.Rinv.noalias() = rsqrt.asDiagonal() * svd.matrixV().transpose() * LyInv;
  sc.W.noalias() = sc.R * sc.R.transpose();
  return true;
}

struct Iterate {
  VectorXd z, phi;
  std::vector<MatrixXd> S, Y;
  double tau = 1.0, kappa = 1.0;
};

struct Metrics {
  double pres = 0.0, dres = 0.0, relgap = 0.0;
  double primal = 0.0, dual = 0.0;
  double score() const { return std::max({pres, dres, relgap}); }
};

Solution solve_impl(const ConicProgram& program, const SolverOptions& options,
                    const std::vector<double>& block_rescale, int depth) {
  const auto start_time = std::chrono::steady_clock::now();
  program.validate();

  const int N = program.num_vars;
  const int m = static_cast<int>(program.rows.size());
  const int num_blocks = static_cast<int>(program.blocks.size());

  VectorXd c(N);
  for (int j = 0; j < N; ++j) c[j] = program.objective[j];
  MatrixXd A = MatrixXd::Zero(m, N);
  VectorXd b(m);
  for (int i = 0; i < m; ++i) {
    b[i] = program.rows[i].rhs;
    for (const LinTerm& t : program.rows[i].terms) A(i, t.var) += t.coef;
  }

  std::vector<BlockData> blocks(num_blocks);
  double nu = 0.0;
  for (int k = 0; k < num_blocks; ++k) {
    const PsdBlock& src = program.blocks[k];
    BlockData& blk = blocks[k];
    blk.dim = src.dim;
    blk.linear = &src.linear;
    nu += src.dim;
    blk.F0.setZero(src.dim, src.dim);
    int idx = 0;
    std::vector<std::vector<std::tuple<int, int, double>>> by_var(N);
    for (int i = 0; i < src.dim; ++i) {
      for (int j = i; j < src.dim; ++j, ++idx) {
        blk.F0(i, j) = src.constant[idx];
        blk.F0(j, i) = src.constant[idx];
        for (const LinTerm& t : src.linear[idx]) {
          by_var[t.var].emplace_back(i, j, t.coef);
        }
      }
    }
    blk.has_constant = max_abs(blk.F0) > 0.0;
    double coef_norm = max_abs(blk.F0);
    for (int j = 0; j < N; ++j) {
      if (by_var[j].empty()) continue;
      blk.vars.push_back(j);
      blk.entries.push_back(std::move(by_var[j]));
      for (const auto& [bi, bj, bc] : blk.entries.back()) {
        coef_norm = std::max(coef_norm, std::abs(bc));
      }
    }
    double scale_k = block_rescale.empty() ? 1.0 : block_rescale[k];
    if (coef_norm > 1.0) scale_k /= std::sqrt(coef_norm);
    if (scale_k != 1.0) {
      blk.inv_scale = scale_k;
      blk.F0 *= scale_k;
      for (auto& list : blk.entries) {
        for (auto& [bi, bj, bc] : list) bc *= scale_k;
      }
    }
  }

  const double b_norm = m > 0 ? b.cwiseAbs().maxCoeff() : 0.0;
  const double c_norm = c.cwiseAbs().maxCoeff();
  std::vector<double> f0_norm(num_blocks);
  for (int k = 0; k < num_blocks; ++k) f0_norm[k] = max_abs(blocks[k].F0);

  Iterate it;
  it.z = VectorXd::Zero(N);
  it.phi = VectorXd::Zero(m);
  it.S.resize(num_blocks);
  it.Y.resize(num_blocks);
  for (int k = 0; k < num_blocks; ++k) {
    it.S[k] = MatrixXd::Identity(blocks[k].dim, blocks[k].dim);
    it.Y[k] = MatrixXd::Identity(blocks[k].dim, blocks[k].dim);
  }

  Solution sol;
  sol.z.assign(N, 0.0);
  sol.row_duals.assign(m, 0.0);

  auto finish = [&](SolveStatus status, const Iterate& point,
                    const Metrics& mt, int iters) {
    sol.status = status;
    sol.iterations = iters;
    sol.primal_residual = mt.pres;
    sol.dual_residual = mt.dres;
    sol.duality_gap = mt.relgap;
    sol.objective = mt.primal;
    sol.dual_objective = mt.dual;
    for (int j = 0; j < N; ++j) sol.z[j] = point.z[j] / point.tau;
    for (int i = 0; i < m; ++i) sol.row_duals[i] = point.phi[i] / point.tau;
    sol.block_duals.clear();
    for (int k = 0; k < num_blocks; ++k) {
      moments::SymMatrix Yk(blocks[k].dim);
      for (int i = 0; i < blocks[k].dim; ++i) {
        for (int j = i; j < blocks[k].dim; ++j) {
          Yk.set(i, j, point.Y[k](i, j) * blocks[k].inv_scale / point.tau);
        }
      }
      sol.block_duals.push_back(std::move(Yk));
    }
    sol.solve_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      start_time)
            .count();
    return sol;
  };

  auto finish_certificate = [&](SolveStatus status, const Iterate& point,
                                double normalizer, int iters) {
    sol.status = status;
    sol.iterations = iters;
    const double qnan = std::numeric_limits<double>::quiet_NaN();
    sol.objective = qnan;
    sol.dual_objective = qnan;
    for (int j = 0; j < N; ++j) sol.z[j] = point.z[j] / normalizer;
    for (int i = 0; i < m; ++i) sol.row_duals[i] = point.phi[i] / normalizer;
    sol.block_duals.clear();
    for (int k = 0; k < num_blocks; ++k) {
      moments::SymMatrix Yk(blocks[k].dim);
      for (int i = 0; i < blocks[k].dim; ++i) {
        for (int j = i; j < blocks[k].dim; ++j) {
          Yk.set(i, j, point.Y[k](i, j) * blocks[k].inv_scale / normalizer);
        }
      }
      sol.block_duals.push_back(std::move(Yk));
    }
    sol.solve_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      start_time)
            .count();
    return sol;
  };

  // Certificate quality checks on the homogeneous iterate.
  auto unbounded_certificate = [&](const Iterate& point, double tol) {
    const double val = c.dot(point.z);
    if (!(val > 0.0)) return false;
    const VectorXd zt = point.z / val;
    if (m > 0 && (A * zt).cwiseAbs().maxCoeff() > tol * (1.0 + b_norm)) {
      return false;
    }
    for (int k = 0; k < num_blocks; ++k) {
      if (blocks[k].min_eig_linear(zt) < -tol * (1.0 + f0_norm[k])) {
        return false;
      }
    }
    return true;
  };
  auto infeasible_certificate = [&](const Iterate& point, double tol) {
    double val = m > 0 ? b.dot(point.phi) : 0.0;
    for (int k = 0; k < num_blocks; ++k) {
      val += inner(blocks[k].F0, point.Y[k]);
    }
    if (!(val < 0.0)) return false;
    VectorXd resid = VectorXd::Zero(N);
    if (m > 0) resid = A.transpose() * point.phi;
    for (int k = 0; k < num_blocks; ++k) {
      VectorXd adj = VectorXd::Zero(N);
      blocks[k].add_adjoint(point.Y[k], adj);
      resid -= adj;
    }
    return resid.cwiseAbs().maxCoeff() <= tol * (1.0 + c_norm) * (-val);
  };

  // Workspace.
  VectorXd R1(N), R2(m), u1(N), hF(N);
  double R4 = 0.0;
  std::vector<MatrixXd> R3(num_blocks), WR3W(num_blocks), G(num_blocks);
  std::vector<MatrixXd> dS(num_blocks), dY(num_blocks);
  std::vector<MatrixXd> dS_aff(num_blocks), dY_aff(num_blocks);
  std::vector<Scaling> scaling(num_blocks);
  MatrixXd H(N, N), Fz;
  Eigen::LLT<MatrixXd> lltH, lltM;
  MatrixXd Hsolve_At, M;
  MatrixXld Hld;
  const MatrixXld Ald = A.cast<long double>();
  // Latched once the double-precision factors stop producing usable
  // directions; the extended-precision factors carry the endgame.
  bool kkt_ld = false;
  Eigen::LDLT<MatrixXld> lltHld, lltMld;
  MatrixXld Hsolve_At_ld, Mld;
  VectorXd p1(N), q1(m), p2(N), q2(m);
  // Proximal regularization of the step system [[H + rp I, A^T], [A, -rd I]].
  // Near-dependent constraint rows make the exact Newton direction blow up
  // once mu is small; a plain factorization ridge does not help because
  // iterative refinement faithfully restores the huge exact solution. The
  // regularized system is solved *as stated* (refinement targets it too), so
  // the direction stays bounded, at a bias that shrinks with mu.
  double reg_p = 0.0, reg_d = 0.0;

  Metrics best_metrics;
  best_metrics.pres = best_metrics.dres = best_metrics.relgap =
      std::numeric_limits<double>::infinity();
  Iterate best_point = it;
  int iters_done = 0;
  int best_iter = 0;
  bool stalled = false;

  // A is constant, so its Gram factor for the dual polish is built once.
  Eigen::LDLT<MatrixXd> lltAAt;
  if (m > 0) lltAAt.compute(A * A.transpose());
  const bool can_polish = m > 0 && lltAAt.info() == Eigen::Success;

  auto compute_metrics = [&](const Iterate& point) {
    Metrics mt;
    mt.primal = c.dot(point.z) / point.tau;
    double dual = m > 0 ? b.dot(point.phi) : 0.0;
    for (int k = 0; k < num_blocks; ++k) {
      dual += inner(blocks[k].F0, point.Y[k]);
    }
    mt.dual = dual / point.tau;
    double pres = m > 0 ? (A * point.z - b * point.tau).cwiseAbs().maxCoeff() /
                              (1.0 + b_norm)
                        : 0.0;
    for (int k = 0; k < num_blocks; ++k) {
      blocks[k].eval_linear(point.z, Fz);
      const MatrixXd res =
          Fz + blocks[k].F0 * point.tau - point.S[k];
      pres = std::max(pres, max_abs(res) / (1.0 + f0_norm[k]));
    }
    mt.pres = pres / point.tau;
    VectorXd r1 = -c * point.tau;
    if (m > 0) r1 += A.transpose() * point.phi;
    for (int k = 0; k < num_blocks; ++k) {
      VectorXd adj = VectorXd::Zero(N);
      blocks[k].add_adjoint(point.Y[k], adj);
      r1 -= adj;
    }
    mt.dres = r1.cwiseAbs().maxCoeff() / ((1.0 + c_norm) * point.tau);
    mt.relgap = std::abs(mt.dual - mt.primal) /
                (1.0 + std::max(std::abs(mt.primal), std::abs(mt.dual)));
    return mt;
  };

  // Least-squares refit of the row multipliers against the current dual
  // matrices; adopted only when it improves the worst metric. Near the
  // boundary the Newton updates to phi lag the rest of the iterate.
  auto polish_phi = [&](Iterate& point, Metrics& mt) {
    if (!can_polish) return;
    VectorXd target = c * point.tau;
    for (int k = 0; k < num_blocks; ++k) {
      blocks[k].add_adjoint(point.Y[k], target);
    }
    const VectorXd phi_ls = lltAAt.solve(A * target);
    Iterate trial = point;
    trial.phi = phi_ls;
    const Metrics trial_mt = compute_metrics(trial);
    if (trial_mt.score() < mt.score()) {
      point.phi = phi_ls;
      mt = trial_mt;
    }
  };

  // Machinery shared by the homogeneous loop and the refinement stage.
  double h0 = 0.0;
  auto compute_scalings = [&](const Iterate& point) {
    for (int k = 0; k < num_blocks; ++k) {
      if (!compute_nt_scaling(point.S[k], point.Y[k], scaling[k])) return false;
    }
    return true;
  };

  // H = sum_k F_k^* (W_k . W_k) F_k, plus the constant-part vectors.
  auto assemble_H = [&]() {
    H.setZero();
    hF.setZero();
    h0 = 0.0;
    for (int k = 0; k < num_blocks; ++k) {
      const BlockData& blk = blocks[k];
      const MatrixXd& W = scaling[k].W;
      MatrixXd V(blk.dim, blk.dim);
      for (std::size_t a = 0; a < blk.vars.size(); ++a) {
        V.setZero();
        for (const auto& [p, q, coef] : blk.entries[a]) {
          if (p == q) {
            V.noalias() += coef * (W.col(p) * W.col(p).transpose());
          } else {
            V.noalias() += coef * (W.col(p) * W.col(q).transpose());
            V.noalias() += coef * (W.col(q) * W.col(p).transpose());
          }
        }
        const int va = blk.vars[a];
        for (std::size_t bb = 0; bb <= a; ++bb) {
          double s = 0.0;
          for (const auto& [p, q, coef] : blk.entries[bb]) {
            s += coef * V(p, q) * (p == q ? 1.0 : 2.0);
          }
          const int vb = blk.vars[bb];
          H(va, vb) += s;
          if (va != vb) H(vb, va) += s;
        }
      }
      if (blk.has_constant) {
        WR3W[k].noalias() = W * blk.F0 * W;  // reused below as W F0 W
        blk.add_adjoint(WR3W[k], hF);
        h0 += inner(blk.F0, WR3W[k]);
      }
    }
    if (reg_p > 0.0) H.diagonal().array() += reg_p;
  };

  // Gram operator of the dual-feasibility map, z -> sum_k F_k^*(F_k(z)).
  // Unlike H it does not depend on the iterate, so it is factored once and
  // stays well conditioned; solving against it projects the numerical
  // defect of a computed direction back onto the range of the map.
  MatrixXd Ggram;
  Eigen::LLT<MatrixXd> lltG;
  MatrixXld Ggld;
  {
    for (int k = 0; k < num_blocks; ++k) {
      scaling[k].W = MatrixXd::Identity(blocks[k].dim, blocks[k].dim);
    }
    assemble_H();
    Ggram = H;
    lltG.compute(Ggram);
    if (lltG.info() == Eigen::Success) Ggld = Ggram.cast<long double>();
  }
  const bool has_gram = lltG.info() == Eigen::Success;
  auto gram_solve = [&](VectorXd& v) {
    VectorXd w = lltG.solve(v);
    const VectorXld vld = v.cast<long double>();
    for (int sweep = 0; sweep < 4; ++sweep) {
      const VectorXd res = (vld - Ggld * w.cast<long double>()).cast<double>();
      w += lltG.solve(res);
    }
    v = w;
  };

  // Factor H, then the Schur complement M = A H^{-1} A^T. Both are Jacobi
  // equilibrated first: most of their conditioning blowup near convergence
  // is pure diagonal scaling, which the factorization would otherwise pay
  // for in lost digits. Solves unwrap the scaling.
  VectorXd hDv(N), mDv(m);
  VectorXld hDv_ld, mDv_ld;
  auto jacobi_weights = [](const VectorXd& diag, VectorXd& w) {
    w.resize(diag.size());
    for (int i = 0; i < diag.size(); ++i) {
      w[i] = diag[i] > 0.0 ? 1.0 / std::sqrt(diag[i]) : 1.0;
    }
  };
  // When a direction solve comes back garbage despite refinement, retrying
  // with a larger ridge helps: the ridge biases the factors but widens
  // refinement's convergence radius, and refinement then removes the bias.
  int ridge_boost = 0;
  auto factor_normal = [&]() {
    Hld = H.cast<long double>();
    jacobi_weights(H.diagonal(), hDv);
    if (kkt_ld) {
      hDv_ld = hDv.cast<long double>();
      const MatrixXld Hs =
          hDv_ld.asDiagonal() * Hld * hDv_ld.asDiagonal();
      bool factored = false;
      for (int attempt = 0; attempt < 5 && !factored; ++attempt) {
        MatrixXld Hr = Hs;
        const int eff = attempt + ridge_boost;
        if (eff > 0) {
          Hr.diagonal().array() +=
              1e-17L * std::pow(1e3L, static_cast<long double>(eff));
        }
        lltHld.compute(Hr);
        factored = lltHld.info() == Eigen::Success;
      }
      if (!factored) return false;
      if (m > 0) {
        Hsolve_At_ld =
            hDv_ld.asDiagonal() *
            lltHld.solve(hDv_ld.asDiagonal() * Ald.transpose());
        Mld.noalias() = Ald * Hsolve_At_ld;
        if (reg_d > 0.0) Mld.diagonal().array() += reg_d;
        jacobi_weights(Mld.diagonal().cast<double>(), mDv);
        mDv_ld = mDv.cast<long double>();
        const MatrixXld Ms =
            mDv_ld.asDiagonal() * Mld * mDv_ld.asDiagonal();
        factored = false;
        for (int attempt = 0; attempt < 5 && !factored; ++attempt) {
          MatrixXld Mr = Ms;
          const int eff = attempt + ridge_boost;
          if (eff > 0) {
            Mr.diagonal().array() +=
                1e-17L * std::pow(1e3L, static_cast<long double>(eff));
          }
          lltMld.compute(Mr);
          factored = lltMld.info() == Eigen::Success;
        }
        if (!factored) return false;
      }
      return true;
    }
    const MatrixXd Hs = hDv.asDiagonal() * H * hDv.asDiagonal();
    bool factored = false;
    for (int attempt = 0; attempt < 5 && !factored; ++attempt) {
      MatrixXd Hr = Hs;
      const int eff = attempt + ridge_boost;
      if (eff > 0) {
        Hr.diagonal().array() += 1e-14 * std::pow(1e3, eff);
      }
      lltH.compute(Hr);
      factored = lltH.info() == Eigen::Success;
    }
    if (!factored) return false;
    if (m > 0) {
      Hsolve_At =
          hDv.asDiagonal() * lltH.solve(hDv.asDiagonal() * A.transpose());
      M.noalias() = A * Hsolve_At;
      if (reg_d > 0.0) M.diagonal().array() += reg_d;
      jacobi_weights(M.diagonal(), mDv);
      const MatrixXd Ms = mDv.asDiagonal() * M * mDv.asDiagonal();
      factored = false;
      for (int attempt = 0; attempt < 5 && !factored; ++attempt) {
        MatrixXd Mr = Ms;
        const int eff = attempt + ridge_boost;
        if (eff > 0) {
          Mr.diagonal().array() += 1e-14 * std::pow(1e3, eff);
        }
        lltM.compute(Mr);
        factored = lltM.info() == Eigen::Success;
      }
      if (!factored) return false;
    }
    return true;
  };

  auto base_solve = [&](const VectorXd& r1, const VectorXd& r2, VectorXd& p,
                        VectorXd& q) {
    if (kkt_ld) {
      const VectorXld p0 =
          hDv_ld.asDiagonal() *
          lltHld.solve(hDv_ld.asDiagonal() * r1.cast<long double>());
      if (m > 0) {
        const VectorXld rq = Ald * p0 - r2.cast<long double>();
        const VectorXld qld =
            mDv_ld.asDiagonal() *
            lltMld.solve(mDv_ld.asDiagonal() * rq);
        p = (p0 - Hsolve_At_ld * qld).cast<double>();
        q = qld.cast<double>();
      } else {
        q.resize(0);
        p = p0.cast<double>();
      }
      return;
    }
    VectorXd p0 =
        hDv.asDiagonal() * lltH.solve((hDv.array() * r1.array()).matrix());
    if (m > 0) {
      const VectorXd rq = A * p0 - r2;
      q = mDv.asDiagonal() * lltM.solve((mDv.array() * rq.array()).matrix());
      p = p0 - Hsolve_At * q;
    } else {
      q.resize(0);
      p = p0;
    }
  };

  // Solve [H A^T; A 0][p; q] = [r1; r2] with iterative refinement against
  // the unregularized operator. Residuals are accumulated in extended
  // precision: the factorizations lose digits once the scaling matrices
  // become ill-conditioned near convergence, and double-precision
  // residuals floor the refinement above the tolerances asked of the
  // final iterates.
  double ksolve_err = 0.0;
  auto ksolve = [&](const VectorXd& r1, const VectorXd& r2, VectorXd& p,
                    VectorXd& q) {
    base_solve(r1, r2, p, q);
    const double rhs_scale = std::max({1.0, r1.cwiseAbs().maxCoeff(),
                                       m > 0 ? r2.cwiseAbs().maxCoeff() : 0.0});
    const VectorXld r1ld = r1.cast<long double>();
    const VectorXld r2ld = r2.cast<long double>();
    // The corrections accumulate in extended precision too: near-singular
    // systems have solution components far larger than the right-hand
    // side, and rounding the iterate to double floors the reachable
    // residual at eps * |H| * |p|.
    VectorXld pa = p.cast<long double>();
    VectorXld qa = q.cast<long double>();
    double prev = std::numeric_limits<double>::infinity();
    VectorXd res1(N), res2(m), dp, dq;
    VectorXld e1(N);
    for (int sweep = 0; sweep < 8; ++sweep) {
      e1 = r1ld;
      e1.noalias() -= Hld * pa;
      double err = 0.0;
      if (m > 0) {
        e1.noalias() -= Ald.transpose() * qa;
        res2 = (r2ld - Ald * pa +
                static_cast<long double>(reg_d) * qa).cast<double>();
        err = res2.cwiseAbs().maxCoeff();
      }
      res1 = e1.cast<double>();
      err = std::max(err, res1.cwiseAbs().maxCoeff());
      ksolve_err = err / rhs_scale;
      if (!(err < prev) || err <= 1e-14 * rhs_scale) break;
      prev = err;
      base_solve(res1, res2, dp, dq);
      pa += dp.cast<long double>();
      if (m > 0) qa += dq.cast<long double>();
    }
    p = pa.cast<double>();
    if (m > 0) q = qa.cast<double>();
  };

  auto bound_S = [&](const std::vector<MatrixXd>& ds) {
    double alpha = std::numeric_limits<double>::infinity();
    for (int k = 0; k < num_blocks; ++k) {
      alpha = std::min(alpha, psd_max_step(scaling[k].Ls, ds[k]));
    }
    return alpha;
  };
  auto bound_Y = [&](const std::vector<MatrixXd>& dy) {
    double alpha = std::numeric_limits<double>::infinity();
    for (int k = 0; k < num_blocks; ++k) {
      alpha = std::min(alpha, psd_max_step(scaling[k].Ly, dy[k]));
    }
    return alpha;
  };

  // Corrector target: solve the scaled-space Lyapunov equation for the
  // direction that recenters to sigma*mu and cancels the affine cross term.
  auto corrector_target = [&](double sigma_mu) {
    for (int k = 0; k < num_blocks; ++k) {
      const Scaling& sc = scaling[k];
      const MatrixXd dShat = sc.R.transpose() * dS_aff[k] * sc.R;
      const MatrixXd dYhat = sc.Rinv * dY_aff[k] * sc.Rinv.transpose();
      MatrixXd rhs = -0.5 * (dYhat * dShat + dShat * dYhat);
      rhs.diagonal().array() += sigma_mu;
      rhs.diagonal().array() -= sc.lambda.array().square();
      // Exact symmetry matters here: the division below amplifies any
      // rounding asymmetry by 1/lambda_min.
      rhs = 0.5 * (rhs + rhs.transpose()).eval();
      const int d = blocks[k].dim;
      MatrixXd Dp(d, d);
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
          Dp(i, j) = 2.0 * rhs(i, j) / (sc.lambda[i] + sc.lambda[j]);
        }
      }
      G[k].noalias() = sc.R * Dp * sc.R.transpose();
    }
  };

  const int max_iters = std::max(1, options.max_iterations);
  for (int iter = 0; iter < max_iters; ++iter) {
    iters_done = iter;

    // Residuals of the homogeneous model.
    R1 = -c * it.tau;
    if (m > 0) R1 += A.transpose() * it.phi;
    for (int k = 0; k < num_blocks; ++k) {
      VectorXd adj = VectorXd::Zero(N);
      blocks[k].add_adjoint(it.Y[k], adj);
      R1 -= adj;
    }
    if (m > 0) R2 = A * it.z - b * it.tau;
    double sum_sy = it.tau * it.kappa;
    double dual_const = m > 0 ? b.dot(it.phi) : 0.0;
    for (int k = 0; k < num_blocks; ++k) {
      blocks[k].eval_linear(it.z, Fz);
      R3[k] = Fz + blocks[k].F0 * it.tau - it.S[k];
      sum_sy += inner(it.S[k], it.Y[k]);
      dual_const += inner(blocks[k].F0, it.Y[k]);
    }
    R4 = c.dot(it.z) - dual_const - it.kappa;
    const double mu = sum_sy / (nu + 1.0);

    Metrics mt = compute_metrics(it);
    if (mt.dres > options.feas_tol &&
        mt.score() < std::sqrt(options.feas_tol)) {
      const VectorXd phi_before = it.phi;
      polish_phi(it, mt);
      if (m > 0 && it.phi != phi_before) {
        R1 = -c * it.tau + A.transpose() * it.phi;
        for (int k = 0; k < num_blocks; ++k) {
          VectorXd adj = VectorXd::Zero(N);
          blocks[k].add_adjoint(it.Y[k], adj);
          R1 -= adj;
        }
        dual_const += b.dot(it.phi - phi_before);
        R4 = c.dot(it.z) - dual_const - it.kappa;
      }
    }
    if (options.verbose) {
      std::printf(
          "iter %3d  mu %9.2e  pres %9.2e  dres %9.2e  gap %9.2e  tau %8.2e "
          "kappa %8.2e\n",
          iter, mu, mt.pres, mt.dres, mt.relgap, it.tau, it.kappa);
    }
    if (mt.score() < best_metrics.score()) {
      best_metrics = mt;
      best_point = it;
      best_iter = iter;
    }
    if (mt.pres <= options.feas_tol && mt.dres <= options.feas_tol &&
        mt.relgap <= options.gap_tol) {
      return finish(SolveStatus::optimal, it, mt, iter);
    }
    if (iter - best_iter > 40) break;  // no progress in 40 iterations
    if (it.tau < 0.01 && it.kappa > 100.0 * it.tau) {
      if (unbounded_certificate(it, options.feas_tol)) {
        return finish_certificate(SolveStatus::unbounded, it, c.dot(it.z),
                                  iter);
      }
      double dual_val = dual_const;
      if (infeasible_certificate(it, options.feas_tol)) {
        return finish_certificate(SolveStatus::primal_infeasible, it,
                                  -dual_val, iter);
      }
    }
    if (!std::isfinite(mu) || mu > 1e10) break;

    // Nesterov-Todd scaling per block.
    if (!compute_scalings(it)) break;
    assemble_H();
    if (!factor_normal()) break;

    ksolve(c - hF, b, p2, q2);
    const double denom = (c + hF).dot(p2) - (m > 0 ? b.dot(q2) : 0.0) + h0 +
                         it.kappa / it.tau;

    // W R3 W, shared by both directions this iteration.
    for (int k = 0; k < num_blocks; ++k) {
      const MatrixXd& W = scaling[k].W;
      WR3W[k].noalias() = W * R3[k] * W;
    }

    auto build_direction = [&](double eta, double tt, VectorXd& dz,
                               VectorXd& dphi, double& dtau, double& dkappa) {
      u1 = -eta * R1;
      double u4 = -eta * R4 + tt / it.tau;
      for (int k = 0; k < num_blocks; ++k) {
        const MatrixXd M1 = G[k] - eta * WR3W[k];
        blocks[k].add_adjoint(M1, u1);
        if (blocks[k].has_constant) u4 += inner(blocks[k].F0, M1);
      }
      ksolve(u1, -eta * R2, p1, q1);
      dtau = (u4 - (c + hF).dot(p1) + (m > 0 ? b.dot(q1) : 0.0)) / denom;
      dz = p1 + dtau * p2;
      dphi = m > 0 ? VectorXd(q1 + dtau * q2) : VectorXd();
      for (int k = 0; k < num_blocks; ++k) {
        blocks[k].eval_linear(dz, Fz);
        dS[k] = Fz + blocks[k].F0 * dtau + eta * R3[k];
        dY[k].noalias() = G[k] - scaling[k].W * dS[k] * scaling[k].W;
        dY[k] = 0.5 * (dY[k] + dY[k].transpose()).eval();
      }
      dkappa = (tt - it.kappa * dtau) / it.tau;
    };

    auto step_bound = [&](double dtau, double dkappa) {
      double alpha = std::min(bound_S(dS), bound_Y(dY));
      if (dtau < 0.0) alpha = std::min(alpha, -it.tau / dtau);
      if (dkappa < 0.0) alpha = std::min(alpha, -it.kappa / dkappa);
      return alpha;
    };

    // Predictor: full residual reduction, target SY = 0.
    for (int k = 0; k < num_blocks; ++k) G[k] = -it.Y[k];
    VectorXd dz, dphi;
    double dtau = 0.0, dkappa = 0.0;
    build_direction(1.0, -it.tau * it.kappa, dz, dphi, dtau, dkappa);
    const double alpha_aff = std::min(1.0, step_bound(dtau, dkappa));

    double mu_aff = (it.tau + alpha_aff * dtau) * (it.kappa + alpha_aff * dkappa);
    for (int k = 0; k < num_blocks; ++k) {
      mu_aff += inner(it.S[k] + alpha_aff * dS[k], it.Y[k] + alpha_aff * dY[k]);
    }
    mu_aff /= (nu + 1.0);
    const double sigma =
        std::clamp(std::pow(std::max(mu_aff, 0.0) / mu, 3.0), 0.0, 1.0);

    // Combined corrector step.
    const double dtau_aff = dtau, dkappa_aff = dkappa;
    for (int k = 0; k < num_blocks; ++k) {
      dS_aff[k] = dS[k];
      dY_aff[k] = dY[k];
    }
    corrector_target(sigma * mu);
    build_direction(1.0 - sigma,
                    sigma * mu - it.tau * it.kappa - dtau_aff * dkappa_aff,
                    dz, dphi, dtau, dkappa);

    // Step fraction opens up as the barrier parameter falls; a fixed 0.98
    // caps the linear rate and never closes the last two digits.
    const double gamma =
        std::min(0.9995, std::max(options.step_fraction, 1.0 - 100.0 * mu));
    double alpha = gamma * step_bound(dtau, dkappa);
    alpha = std::min(1.0, alpha);
    if (!(alpha > 1e-10)) {
      stalled = true;
      break;
    }

    it.z += alpha * dz;
    if (m > 0) it.phi += alpha * dphi;
    for (int k = 0; k < num_blocks; ++k) {
      it.S[k] += alpha * dS[k];
      it.S[k] = 0.5 * (it.S[k] + it.S[k].transpose());
      it.Y[k] += alpha * dY[k];
      it.Y[k] = 0.5 * (it.Y[k] + it.Y[k].transpose());
    }
    it.tau += alpha * dtau;
    it.kappa += alpha * dkappa;
    iters_done = iter + 1;
  }

  // The loop ended without a fully converged point: classify the best one.
  Metrics mt = compute_metrics(best_point);
  polish_phi(best_point, mt);
  const double want = std::min(options.feas_tol, options.gap_tol);

  // When a run converges only partway and the blocks' primal and dual norms
  // are badly mismatched, rescale each block toward the geometric mean of the
  // two and start over. F^*(Y) is invariant under this change of basis, so
  // the dual residual keeps its meaning; what improves is the conditioning of
  // the embedding, whose natural scale is set by the iterate norms.
  if (depth < 2 && mt.score() > want && mt.score() <= 1e-1) {
    std::vector<double> rescale(block_rescale);
    rescale.resize(num_blocks, 1.0);
    double worst = 1.0;
    for (int k = 0; k < num_blocks; ++k) {
      const double yn = max_abs(best_point.Y[k]);
      const double sn = max_abs(best_point.S[k]);
      if (yn > 0.0 && sn > 0.0) {
        // Clamped: a block whose slack is truly active has S* = 0, and no
        // rescaling can balance it.
        const double r = std::clamp(std::sqrt(yn / sn), 0.1, 10.0);
        rescale[k] *= r;
        worst = std::max(worst, std::max(r, 1.0 / r));
      }
    }
    if (worst > 3.0) {
      if (options.verbose) {
        std::printf("rescale pass %d: worst block imbalance %8.2e\n",
                    depth + 1, worst * worst);
      }
      Solution child = solve_impl(program, options, rescale, depth + 1);
      if (child.status == SolveStatus::primal_infeasible ||
          child.status == SolveStatus::unbounded) {
        return child;
      }
      const double child_score = std::max(
          {child.primal_residual, child.dual_residual, child.duality_gap});
      if (child_score < mt.score()) return child;
      // Otherwise the rescaled run did worse; classify this pass's point.
    }
  }

  // The homogeneous run stalled short of tolerance but got close, so the
  // problem is solvable. Finish with a plain infeasible-start
  // predictor-corrector at fixed tau = 1, from a fresh centered iterate: a
  // small tau at the homogeneous solution shrinks the reachable gap by
  // tau^2, and the stalled iterate sits too far off center to rescue.
  // Separate primal and dual step lengths decouple the two sides; each
  // residual then contracts by exactly its own 1 - alpha per iteration.
  if (nu > 0.0 && mt.score() > want && mt.score() <= 1e-2) {
    Iterate rp;
    rp.z = VectorXd::Zero(N);
    rp.phi = VectorXd::Zero(m);
    rp.S.resize(num_blocks);
    rp.Y.resize(num_blocks);
    for (int k = 0; k < num_blocks; ++k) {
      rp.S[k] = MatrixXd::Identity(blocks[k].dim, blocks[k].dim);
      rp.Y[k] = MatrixXd::Identity(blocks[k].dim, blocks[k].dim);
    }
    rp.tau = 1.0;
    rp.kappa = 0.0;
    Iterate prev = rp;
    double own_best = std::numeric_limits<double>::infinity();
    double prev_score = std::numeric_limits<double>::infinity();
    double mu_best = std::numeric_limits<double>::infinity();
    double trust = 1.0;
    int since_best = 0;
    int since_mu = 0;
    int direction_fail = 0;
    int boost_hold = 0;
    // Engaged on the first rejected direction; a clean run never pays the
    // regularization bias.
    bool reg_on = false;
    for (int riter = 0; riter < max_iters; ++riter) {
      Metrics cur = compute_metrics(rp);
      polish_phi(rp, cur);
      // A step that blows the metrics up came from a corrupted direction:
      // roll it back and retry shorter, rather than continuing from wreckage.
      if (cur.score() > 20.0 * prev_score && trust > 1e-4) {
        rp = prev;
        trust *= 0.25;
        cur = compute_metrics(rp);
      } else {
        prev = rp;
        prev_score = cur.score();
        trust = std::min(1.0, trust * 1.5);
      }
      if (cur.score() < mt.score()) {
        mt = cur;
        best_point = rp;
      }
      if (cur.score() < 0.99 * own_best) {
        own_best = cur.score();
        since_best = 0;
      } else {
        ++since_best;
      }
      ++iters_done;
      if (cur.pres <= options.feas_tol && cur.dres <= options.feas_tol &&
          cur.relgap <= options.gap_tol) {
        break;
      }

      R1 = -c;
      if (m > 0) R1 += A.transpose() * rp.phi;
      for (int k = 0; k < num_blocks; ++k) {
        VectorXd adj = VectorXd::Zero(N);
        blocks[k].add_adjoint(rp.Y[k], adj);
        R1 -= adj;
      }
      if (m > 0) R2 = A * rp.z - b;
      double sum_sy = 0.0;
      for (int k = 0; k < num_blocks; ++k) {
        blocks[k].eval_linear(rp.z, Fz);
        R3[k] = Fz + blocks[k].F0 - rp.S[k];
        sum_sy += inner(rp.S[k], rp.Y[k]);
      }
      const double mu = sum_sy / nu;
      if (!std::isfinite(mu) || !(mu > 0.0)) {
        if (options.verbose) std::printf("refine stop: mu %9.2e\n", mu);
        break;
      }
      // The gap tracks nu*mu and bounces while mu is still falling, so the
      // score alone is a noisy stall signal. Give up only once
      // complementarity has flatlined too; once mu is already small the
      // remaining work is feasibility polish and the score rules again.
      if (mu < 0.999 * mu_best) {
        mu_best = mu;
        since_mu = 0;
      } else {
        ++since_mu;
      }
      if (mu > 1e2) {
        // The stage starts at mu = 1; far above that it is diverging.
        if (options.verbose) std::printf("refine stop: diverging\n");
        break;
      }
      if (since_mu > 20 && mu > 1e-9) {
        if (options.verbose) std::printf("refine stop: mu stalled\n");
        break;
      }
      if (since_best > 15 && (since_mu > 6 || mu <= 1e-9)) {
        if (options.verbose) std::printf("refine stop: score stalled\n");
        break;
      }
      reg_p = reg_d = (reg_on && (ridge_boost > 0 || boost_hold > 0))
                          ? std::clamp(1e-4 * mu, 1e-13, 1e-9)
                          : 0.0;

      if (!compute_scalings(rp)) {
        if (options.verbose) std::printf("refine stop: scaling breakdown\n");
        break;
      }
      if (options.verbose && riter == 0) {
        double lmin = std::numeric_limits<double>::infinity(), lmax = 0.0;
        double sn = 0.0, yn = 0.0;
        for (int k = 0; k < num_blocks; ++k) {
          lmin = std::min(lmin, scaling[k].lambda.minCoeff());
          lmax = std::max(lmax, scaling[k].lambda.maxCoeff());
          sn = std::max(sn, max_abs(rp.S[k]));
          yn = std::max(yn, max_abs(rp.Y[k]));
        }
        std::printf(
            "refine start: |z| %8.2e |phi| %8.2e |S| %8.2e |Y| %8.2e "
            "lam [%8.2e, %8.2e] lam2/mu [%8.2e, %8.2e]\n",
            rp.z.cwiseAbs().maxCoeff(),
            m > 0 ? rp.phi.cwiseAbs().maxCoeff() : 0.0, sn, yn, lmin, lmax,
            lmin * lmin / mu, lmax * lmax / mu);
      }
      assemble_H();
      if (!factor_normal()) {
        if (options.verbose) std::printf("refine stop: factorization\n");
        break;
      }
      for (int k = 0; k < num_blocks; ++k) {
        WR3W[k].noalias() = scaling[k].W * R3[k] * scaling[k].W;
      }

      VectorXd dz, dphi;
      double ddef_pre = 0.0, ddef_post = 0.0;
      auto build_refine = [&](VectorXd& dz_out, VectorXd& dphi_out) {
        u1 = -R1;
        for (int k = 0; k < num_blocks; ++k) {
          const MatrixXd M1 = G[k] - WR3W[k];
          blocks[k].add_adjoint(M1, u1);
        }
        ksolve(u1, -R2, p1, q1);
        dz_out = p1;
        dphi_out = q1;
        for (int k = 0; k < num_blocks; ++k) {
          blocks[k].eval_linear(dz_out, Fz);
          dS[k] = Fz + R3[k];
          dY[k].noalias() = G[k] - scaling[k].W * dS[k] * scaling[k].W;
          dY[k] = 0.5 * (dY[k] + dY[k].transpose()).eval();
        }
        // The dual equation is affine in (phi, Y), so any numerical defect
        // in the direction leaks into the dual residual at full step
        // weight. Measure it and project it out through the Gram operator;
        // the perturbation to dY is of the defect's own (tiny) size.
        if (has_gram) {
          VectorXd gdef = R1;
          if (m > 0) gdef.noalias() += A.transpose() * dphi_out;
          VectorXd adj = VectorXd::Zero(N);
          for (int k = 0; k < num_blocks; ++k) {
            blocks[k].add_adjoint(dY[k], adj);
          }
          gdef -= adj;
          ddef_pre = gdef.cwiseAbs().maxCoeff();
          gram_solve(gdef);
          for (int k = 0; k < num_blocks; ++k) {
            blocks[k].eval_linear(gdef, Fz);
            dY[k] += Fz;
          }
          adj.setZero();
          VectorXd chk = R1;
          if (m > 0) chk.noalias() += A.transpose() * dphi_out;
          for (int k = 0; k < num_blocks; ++k) {
            blocks[k].add_adjoint(dY[k], adj);
          }
          chk -= adj;
          ddef_post = chk.cwiseAbs().maxCoeff();
        }
      };

      // Predictor, then the usual Mehrotra corrector. Residual terms stay at
      // full weight; only the centering target depends on sigma.
      for (int k = 0; k < num_blocks; ++k) G[k] = -rp.Y[k];
      build_refine(dz, dphi);
      const double ap_aff = std::min(1.0, bound_S(dS));
      const double ad_aff = std::min(1.0, bound_Y(dY));
      double mu_aff = 0.0;
      for (int k = 0; k < num_blocks; ++k) {
        mu_aff +=
            inner(rp.S[k] + ap_aff * dS[k], rp.Y[k] + ad_aff * dY[k]);
      }
      mu_aff /= nu;
      const double sigma =
          std::clamp(std::pow(std::max(mu_aff, 0.0) / mu, 3.0), 0.0, 1.0);
      for (int k = 0; k < num_blocks; ++k) {
        dS_aff[k] = dS[k];
        dY_aff[k] = dY[k];
      }
      corrector_target(sigma * mu);
      build_refine(dz, dphi);

      // Double-precision factors eventually stop producing directions the
      // refinement can repair; redo the iteration with extended-precision
      // factors from here on.
      if (!kkt_ld && ksolve_err > 1e-9) {
        kkt_ld = true;
        if (options.verbose) {
          std::printf("refine: switching to extended-precision factors\n");
        }
        continue;
      }

      const double gamma =
          trust *
          std::min(0.9995, std::max(options.step_fraction, 1.0 - 100.0 * mu));
      // One common step length: stepping the two sides unequally drifts the
      // pair off center, and the scaling then pins the lagging side at the
      // cone boundary.
      double alpha =
          std::min(1.0, gamma * std::min(bound_S(dS), bound_Y(dY)));
      // The second-order term in <S,Y> can flip mu negative when the
      // directions are noisy; back off until the post-step mu keeps at
      // least a sliver of the linear-model value.
      for (int tries = 0; tries < 12 && alpha > 1e-12; ++tries) {
        double trial = 0.0;
        for (int k = 0; k < num_blocks; ++k) {
          trial += inner(rp.S[k] + alpha * dS[k], rp.Y[k] + alpha * dY[k]);
        }
        if (trial >= 1e-3 * (1.0 - alpha) * sum_sy) break;
        alpha *= 0.3;
      }
      const double ap = alpha;
      const double ad = alpha;
      if (options.verbose) {
        std::printf(
            "refine %3d  mu %9.2e  sigma %8.2e  ap %8.2e  ad %8.2e  "
            "pres %9.2e  dres %9.2e  gap %9.2e  kerr %9.2e  "
            "ddef %9.2e -> %9.2e\n",
            riter, mu, sigma, ap, ad, cur.pres, cur.dres, cur.relgap,
            ksolve_err, ddef_pre, ddef_post);
      }
      if (!(std::max(ap, ad) > 1e-10) || ksolve_err > 1e-5) {
        // Garbage direction: the solve failed to refine or the cone bound
        // collapsed. Retry the iteration with a boosted ridge instead of
        // stepping into noise.
        if (++direction_fail <= 3) {
          ridge_boost = std::min(ridge_boost + 1, 4);
          boost_hold = 3;
          reg_on = true;
          // A retry is not a stall: the point did not move.
          since_best = std::max(0, since_best - 1);
          since_mu = std::max(0, since_mu - 1);
          if (options.verbose) {
            std::printf("refine: direction rejected, ridge boost %d\n",
                        ridge_boost);
          }
          continue;
        }
        break;
      }
      direction_fail = 0;
      // The boost is an emergency measure: the ridge it adds floors the
      // reachable solve accuracy, so it retreats once directions are clean.
      if (boost_hold > 0) {
        --boost_hold;
      } else if (ridge_boost > 0) {
        --ridge_boost;
      }
      rp.z += ap * dz;
      if (m > 0) rp.phi += ad * dphi;
      for (int k = 0; k < num_blocks; ++k) {
        rp.S[k] += ap * dS[k];
        rp.S[k] = 0.5 * (rp.S[k] + rp.S[k].transpose());
        rp.Y[k] += ad * dY[k];
        rp.Y[k] = 0.5 * (rp.Y[k] + rp.Y[k].transpose());
      }
    }
    reg_p = reg_d = 0.0;
    Metrics last = compute_metrics(rp);
    polish_phi(rp, last);
    if (last.score() < mt.score()) {
      mt = last;
      best_point = rp;
    }
  }

  const double near_feas = std::sqrt(options.feas_tol);
  const double near_gap = std::sqrt(options.gap_tol);
  if (mt.pres <= options.feas_tol && mt.dres <= options.feas_tol &&
      mt.relgap <= options.gap_tol) {
    return finish(SolveStatus::optimal, best_point, mt, iters_done);
  }
  if (mt.pres <= near_feas && mt.dres <= near_feas && mt.relgap <= near_gap) {
    return finish(SolveStatus::near_optimal, best_point, mt, iters_done);
  }
  if (unbounded_certificate(it, 1e-5)) {
    return finish_certificate(SolveStatus::unbounded, it, c.dot(it.z),
                              iters_done);
  }
  {
    double dual_val = m > 0 ? b.dot(it.phi) : 0.0;
    for (int k = 0; k < num_blocks; ++k) {
      dual_val += inner(blocks[k].F0, it.Y[k]);
    }
    if (infeasible_certificate(it, 1e-5)) {
      return finish_certificate(SolveStatus::primal_infeasible, it, -dual_val,
                                iters_done);
    }
  }
  return finish(stalled || iters_done < max_iters
                    ? SolveStatus::numerical_failure
                    : SolveStatus::iteration_limit,
                best_point, mt, iters_done);
}

}  // namespace

Solution solve(const ConicProgram& program, const SolverOptions& options) {
  return solve_impl(program, options, {}, 0);
}

}  // namespace solver
}  // namespace occusafe
