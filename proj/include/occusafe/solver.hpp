#pragma once

#include <string>
#include <vector>

#include "occusafe/moments.hpp"

namespace occusafe {
namespace solver {

struct LinTerm {
  int var = 0;
  double coef = 0.0;
};

struct EqRow {
  std::vector<LinTerm> terms;
  double rhs = 0.0;
  double scale = 1.0;  // factor the row was multiplied by during assembly
  std::string label;
};

// S = mat(constant) + sum_j z_j mat(linear_j), constrained to be PSD.
// Packed row-major upper triangle: entry (i,j), i <= j, lives at index
// i*dim - i*(i-1)/2 + (j-i).
struct PsdBlock {
  int dim = 0;
  std::string label;
  std::vector<double> constant;
  std::vector<std::vector<LinTerm>> linear;

  static int packed_size(int dim) { return dim * (dim + 1) / 2; }
  static int packed_index(int i, int j, int dim);
};

// Maximize objective . z subject to the equality rows and PSD blocks.
struct ConicProgram {
  int num_vars = 0;
  std::vector<double> objective;
  std::vector<EqRow> rows;
  std::vector<PsdBlock> blocks;

  void validate() const;  // throws std::invalid_argument on malformed data
};

std::string dump_program(const ConicProgram& program);  // JSON text
ConicProgram load_program(const std::string& text);

enum class SolveStatus {
  optimal,
  near_optimal,
  primal_infeasible,
  unbounded,
  iteration_limit,
  numerical_failure,
};

const char* to_string(SolveStatus status);

struct SolverOptions {
  int max_iterations = 200;
  double feas_tol = 1e-8;
  double gap_tol = 1e-8;
  double step_fraction = 0.98;
  bool verbose = false;
};

struct Solution {
  SolveStatus status = SolveStatus::numerical_failure;
  std::vector<double> z;
  std::vector<double> row_duals;                 // one multiplier per row
  std::vector<moments::SymMatrix> block_duals;   // one PSD matrix per block
  double objective = 0.0;
  double dual_objective = 0.0;
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double duality_gap = 0.0;  // relative
  double solve_seconds = 0.0;

  bool usable() const {
    return status == SolveStatus::optimal ||
           status == SolveStatus::near_optimal;
  }
};

// Primal-dual interior-point method on the homogeneous self-dual embedding
// with Nesterov-Todd scaling and a predictor-corrector step. Deterministic:
// equal inputs give bit-identical outputs.
Solution solve(const ConicProgram& program, const SolverOptions& options = {});

}  // namespace solver
}  // namespace occusafe
