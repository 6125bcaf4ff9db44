#pragma once

// Trust-region Newton maximization of a small dense block.
//
// The subproblem max g'p + p'Hp/2 s.t. |p| <= radius is solved exactly
// from an eigendecomposition of H; the multiplier lambda >= max(0,
// lambda_max(H)) satisfies (H - lambda I) p + g = 0.

#include "skycat/sky_model.hpp"

#include <Eigen/Dense>

#include <functional>

namespace skycat {

struct SolverConfig {
  double initial_radius = 1.0;
  double radius_min = 1e-12;
  double radius_max = 1e4;
  double shrink_factor = 0.25;
  double grow_factor = 2.0;
  double accept_rho = 0.1;
  double grow_rho = 0.75;
  double grad_tol = 1e-8;
  int max_iters = 200;

  void validate() const;
};

struct TrustRegionState {
  double radius = 1.0;
  int iteration = 0;       ///< subproblems solved
  int accepted_steps = 0;
  int evaluations = 0;     ///< objective evaluations, including the initial one
  bool converged = false;  ///< gradient criterion met
  double last_rho = 0.0;
  double value = 0.0;
  double grad_norm = 0.0;  ///< infinity norm at the returned point
};

struct SubproblemSolution {
  Eigen::VectorXd step;
  double multiplier = 0.0;
  bool on_boundary = false;
  bool hard_case = false;
  /// g'p + p'Hp/2
  double model_value = 0.0;
};

SubproblemSolution solve_tr_subproblem_detailed(const Eigen::VectorXd& gradient, const Eigen::MatrixXd& hessian,
                                                double radius);

inline Eigen::VectorXd solve_tr_subproblem(const Eigen::VectorXd& gradient, const Eigen::MatrixXd& hessian,
                                           double radius) {
  return solve_tr_subproblem_detailed(gradient, hessian, radius).step;
}

using ObjectiveFn = std::function<Objective(const Eigen::VectorXd&)>;
/// f(a) - f(b), possibly computed more accurately than by subtraction.
using ImprovementFn = std::function<double(const Eigen::VectorXd& a, const Eigen::VectorXd& b)>;

struct MaximizeResult {
  Eigen::VectorXd x;
  TrustRegionState state;
};

MaximizeResult maximize_block(const ObjectiveFn& objective, const Eigen::VectorXd& x0,
                              const SolverConfig& config = {}, const ImprovementFn& improvement = {});

}  // namespace skycat
