#include "skycat/trust_newton.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace skycat {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

bool all_finite(const Objective& o) {
  return std::isfinite(o.value) && o.gradient.allFinite() && o.hessian.allFinite();
}

}  // namespace

void SolverConfig::validate() const {
  if (!(initial_radius > 0.0 && radius_min > 0.0 && radius_max >= radius_min)) {
    throw ValidationError("solver config: radii must satisfy 0 < radius_min <= radius_max");
  }
  if (!(shrink_factor > 0.0 && shrink_factor < 1.0 && grow_factor > 1.0)) {
    throw ValidationError("solver config: need 0 < shrink_factor < 1 < grow_factor");
  }
  if (!(accept_rho > 0.0 && accept_rho < grow_rho && grow_rho < 1.0)) {
    throw ValidationError("solver config: need 0 < accept_rho < grow_rho < 1");
  }
  if (!(grad_tol > 0.0)) throw ValidationError("solver config: grad_tol must be > 0");
  if (max_iters < 0) throw ValidationError("solver config: max_iters must be >= 0");
}

SubproblemSolution solve_tr_subproblem_detailed(const Eigen::VectorXd& g, const Eigen::MatrixXd& H,
                                                double radius) {
  const Eigen::Index n = g.size();
  if (H.rows() != n || H.cols() != n) throw ValidationError("trust region: gradient/hessian size mismatch");
  if (!(radius > 0.0) || !std::isfinite(radius)) throw ValidationError("trust region: radius must be > 0");
  if (!g.allFinite() || !H.allFinite()) throw ValidationError("trust region: non-finite gradient or hessian");
  const double scale = std::max(1.0, H.cwiseAbs().maxCoeff());
  if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw ValidationError("trust region: hessian is not symmetric");
  }

  SubproblemSolution sol;
  if (n == 0) {
    sol.step = Eigen::VectorXd::Zero(0);
    return sol;
  }

  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (H + H.transpose()));
  const Eigen::VectorXd mu = eig.eigenvalues();  // ascending
  const Eigen::MatrixXd& Q = eig.eigenvectors();
  const Eigen::VectorXd gh = Q.transpose() * g;
  const double mu_max = mu(n - 1);
  const double gnorm = g.norm();

  const auto step_norm2 = [&](double lambda) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = lambda - mu(i);
      s += gh(i) * gh(i) / (d * d);
    }
    return s;
  };
  const auto step_at = [&](double lambda) {
    Eigen::VectorXd c(n);
    for (Eigen::Index i = 0; i < n; ++i) c(i) = gh(i) / (lambda - mu(i));
    return Eigen::VectorXd(Q * c);
  };
  const auto finish = [&](Eigen::VectorXd p, double lambda) {
    sol.step = std::move(p);
    sol.multiplier = lambda;
    sol.model_value = g.dot(sol.step) + 0.5 * sol.step.dot(H * sol.step);
    return sol;
  };

  // Interior maximizer of a negative definite model.
  if (mu_max < 0.0 && step_norm2(0.0) <= radius * radius) return finish(step_at(0.0), 0.0);

  // Hard case: the gradient has (almost) no component along the top
  // eigenspace and the remaining step at lambda = lambda_max is too short.
  const double tol = 1e-12 * scale;
  const double lo = std::max(0.0, mu_max);
  double top2 = 0.0, rest2 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (mu(i) >= mu_max - tol) {
      top2 += gh(i) * gh(i);
    } else {
      const double d = lo - mu(i);
      rest2 += gh(i) * gh(i) / (d * d);
    }
  }
  if (mu_max >= 0.0 && std::sqrt(top2) <= 1e-10 * std::max(gnorm, 1e-300) && rest2 <= radius * radius) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (mu(i) < mu_max - tol) c(i) = gh(i) / (lo - mu(i));
    }
    Eigen::VectorXd p = Q * c;
    const Eigen::VectorXd z = Q.col(n - 1);
    const double tau = std::sqrt(std::max(0.0, radius * radius - p.squaredNorm()));
    p += (g.dot(z) >= 0.0 ? tau : -tau) * z;
    sol.hard_case = true;
    sol.on_boundary = true;
    return finish(std::move(p), lo);
  }

  // Boundary solution: |p(lambda)| = radius on (lo, hi]. Newton on the
  // secular equation 1/|p| - 1/radius = 0, safeguarded by bisection.
  double a = lo;
  double b = mu_max + gnorm / radius;
  if (b <= a) b = a + gnorm / radius;
  double lambda = b;
  for (int it = 0; it < 200; ++it) {
    const double s2 = step_norm2(lambda);
    const double s = std::sqrt(s2);
    if (std::abs(s - radius) <= 1e-14 * radius) break;
    if (s > radius) {
      a = lambda;
    } else {
      b = lambda;
    }
    double ds = 0.0;  // d|p|/dlambda
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = lambda - mu(i);
      ds -= gh(i) * gh(i) / (d * d * d);
    }
    ds /= s;
    const double phi = 1.0 / s - 1.0 / radius;
    const double dphi = -ds / s2;
    double next = lambda - phi / dphi;
    if (!(next > a && next < b) || !std::isfinite(next)) next = 0.5 * (a + b);
    if (next == lambda || b - a <= 4.0 * kEps * std::max(1.0, std::abs(b))) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  Eigen::VectorXd p = step_at(lambda);
  const double pn = p.norm();
  if (pn > radius) p *= radius / pn;
  sol.on_boundary = true;
  return finish(std::move(p), lambda);
}

MaximizeResult maximize_block(const ObjectiveFn& objective, const Eigen::VectorXd& x0, const SolverConfig& config,
                              const ImprovementFn& improvement) {
  config.validate();
  if (!x0.allFinite()) throw ValidationError("maximize_block: non-finite starting point");

  MaximizeResult out;
  out.x = x0;
  TrustRegionState& st = out.state;
  st.radius = std::clamp(config.initial_radius, config.radius_min, config.radius_max);

  Objective cur = objective(out.x);
  ++st.evaluations;
  if (!all_finite(cur)) throw ValidationError("maximize_block: objective is not finite at the starting point");

  bool nonfinite_shrink = false;
  while (true) {
    st.grad_norm = cur.gradient.size() ? cur.gradient.cwiseAbs().maxCoeff() : 0.0;
    st.value = cur.value;
    if (st.grad_norm < config.grad_tol) {
      st.converged = true;
      break;
    }
    if (st.iteration >= config.max_iters) break;

    const SubproblemSolution sol = solve_tr_subproblem_detailed(cur.gradient, cur.hessian, st.radius);
    const double pred = sol.model_value;
    const double step_norm = sol.step.norm();
    ++st.iteration;

    const Eigen::VectorXd trial_x = out.x + sol.step;
    const Objective trial = objective(trial_x);
    ++st.evaluations;
    const double noise = 16.0 * kEps * std::max(1.0, std::abs(cur.value));

    bool accept = false;
    double rho = -std::numeric_limits<double>::infinity();
    if (all_finite(trial)) {
      nonfinite_shrink = false;
      const double actual = improvement ? improvement(trial_x, out.x) : trial.value - cur.value;
      rho = pred > 0.0 ? actual / pred : -std::numeric_limits<double>::infinity();
      if (pred <= noise) {
        // Predicted gain below the resolution of the objective: take the
        // step only if it does not lose value and reduces the gradient.
        const double floor = improvement ? 0.0 : -noise;
        const double trial_grad = trial.gradient.cwiseAbs().maxCoeff();
        accept = actual >= floor && trial_grad < st.grad_norm;
        if (!accept) {
          st.last_rho = rho;
          break;
        }
      } else {
        accept = rho >= config.accept_rho;
      }
    } else {
      nonfinite_shrink = true;
    }
    st.last_rho = rho;

    if (accept) {
      out.x = trial_x;
      cur = trial;
      ++st.accepted_steps;
    }
    if (!accept) {
      st.radius = config.shrink_factor * std::min(st.radius, std::max(step_norm, config.radius_min));
      if (st.radius < config.radius_min) {
        if (nonfinite_shrink) {
          throw ValidationError("maximize_block: objective non-finite for every step down to radius_min");
        }
        st.radius = config.radius_min;
        break;
      }
    } else if (rho > config.grow_rho) {
      st.radius = std::min(config.grow_factor * st.radius, config.radius_max);
    }
  }
  st.grad_norm = cur.gradient.size() ? cur.gradient.cwiseAbs().maxCoeff() : 0.0;
  st.value = cur.value;
  return out;
}

}  // namespace skycat
