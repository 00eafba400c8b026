#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <sstream>
#include <utility>

#include "zogp/common.hpp"

namespace zogp::dyn {

/// Continuous-time vector field with optional analytic Jacobians.
/// When `jacobian` is empty, central finite differences are used.
struct OdeModel {
  int nx = 0;
  int nu = 0;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> f;
  std::function<void(const Eigen::VectorXd&, const Eigen::VectorXd&,
                     Eigen::MatrixXd&, Eigen::MatrixXd&)>
      jacobian;

  void eval_jacobian(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                     Eigen::MatrixXd& dfdx, Eigen::MatrixXd& dfdu) const {
    if (jacobian) {
      jacobian(x, u, dfdx, dfdu);
      return;
    }
    dfdx.resize(nx, nx);
    dfdu.resize(nx, nu);
    const double h = 1e-7 * std::max(1.0, std::max(x.lpNorm<Eigen::Infinity>(),
                                                   u.lpNorm<Eigen::Infinity>()));
    Eigen::VectorXd xp = x, xm = x, up = u, um = u;
    for (int k = 0; k < nx; ++k) {
      xp(k) += h;
      xm(k) -= h;
      dfdx.col(k) = (f(xp, u) - f(xm, u)) / (2.0 * h);
      xp(k) = x(k);
      xm(k) = x(k);
    }
    for (int k = 0; k < nu; ++k) {
      up(k) += h;
      um(k) -= h;
      dfdu.col(k) = (f(x, up) - f(x, um)) / (2.0 * h);
      up(k) = u(k);
      um(k) = u(k);
    }
  }
};

struct IrkSettings {
  int stages = 2;             // Gauss-Legendre stage count (1, 2 or 3)
  double newton_tol = 1e-10;  // infinity norm of the stage residual
  int max_newton_iter = 50;

  void validate() const {
    if (stages < 1 || stages > 3)
      throw std::invalid_argument("IrkSettings: stages must be 1, 2 or 3");
    if (!(newton_tol > 0.0))
      throw std::invalid_argument("IrkSettings: newton_tol must be positive");
  }
};

/// One-step discretization psi(x, u) of `ode` by Gauss-Legendre collocation.
struct DiscreteModel {
  OdeModel ode;
  double ts = 0.2;
  IrkSettings irk;
};

namespace detail {

struct ButcherTableau {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;
};

inline ButcherTableau gauss_legendre(int stages) {
  ButcherTableau t;
  switch (stages) {
    case 1:
      t.a = Eigen::MatrixXd::Constant(1, 1, 0.5);
      t.b = Eigen::VectorXd::Constant(1, 1.0);
      break;
    case 2: {
      const double r = std::sqrt(3.0) / 6.0;
      t.a.resize(2, 2);
      t.a << 0.25, 0.25 - r, 0.25 + r, 0.25;
      t.b = Eigen::VectorXd::Constant(2, 0.5);
      break;
    }
    case 3: {
      const double r15 = std::sqrt(15.0);
      t.a.resize(3, 3);
      t.a << 5.0 / 36.0, 2.0 / 9.0 - r15 / 15.0, 5.0 / 36.0 - r15 / 30.0,
          5.0 / 36.0 + r15 / 24.0, 2.0 / 9.0, 5.0 / 36.0 - r15 / 24.0,
          5.0 / 36.0 + r15 / 30.0, 2.0 / 9.0 + r15 / 15.0, 5.0 / 36.0;
      t.b.resize(3);
      t.b << 5.0 / 18.0, 4.0 / 9.0, 5.0 / 18.0;
      break;
    }
    default:
      throw std::invalid_argument("gauss_legendre: unsupported stage count");
  }
  return t;
}

struct IrkStages {
  Eigen::MatrixXd k;       // nx x s, converged stage derivatives
  Eigen::VectorXd x_next;  // psi(x, u)
};

/// Solves the collocation equations K_j = f(x + ts * sum_l a_jl K_l, u)
/// with a full Newton iteration on the stacked stage derivatives.
inline IrkStages solve_stages(const DiscreteModel& model,
                              const Eigen::VectorXd& x,
                              const Eigen::VectorXd& u) {
  model.irk.validate();
  const int nx = model.ode.nx;
  const int s = model.irk.stages;
  const ButcherTableau tab = gauss_legendre(s);
  const double ts = model.ts;

  Eigen::MatrixXd k(nx, s);
  const Eigen::VectorXd f0 = model.ode.f(x, u);
  for (int j = 0; j < s; ++j) k.col(j) = f0;

  Eigen::MatrixXd newton(s * nx, s * nx);
  Eigen::VectorXd residual(s * nx);
  Eigen::VectorXd stage_x(nx);
  Eigen::MatrixXd dfdx, dfdu;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(s * nx);
  double res_norm = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < model.irk.max_newton_iter; ++iter) {
    newton.setZero();
    for (int j = 0; j < s; ++j) {
      stage_x = x;
      for (int l = 0; l < s; ++l) stage_x += ts * tab.a(j, l) * k.col(l);
      residual.segment(j * nx, nx) = k.col(j) - model.ode.f(stage_x, u);
      model.ode.eval_jacobian(stage_x, u, dfdx, dfdu);
      for (int l = 0; l < s; ++l) {
        newton.block(j * nx, l * nx, nx, nx) = -ts * tab.a(j, l) * dfdx;
        if (l == j)
          newton.block(j * nx, l * nx, nx, nx) +=
              Eigen::MatrixXd::Identity(nx, nx);
      }
    }
    res_norm = residual.lpNorm<Eigen::Infinity>();
    if (res_norm <= model.irk.newton_tol) {
      IrkStages out;
      out.k = k;
      out.x_next = x;
      for (int j = 0; j < s; ++j) out.x_next += ts * tab.b(j) * k.col(j);
      return out;
    }
    lu.compute(newton);
    residual = lu.solve(residual);
    for (int j = 0; j < s; ++j) k.col(j) -= residual.segment(j * nx, nx);
  }
  std::ostringstream msg;
  msg << "irk_step: stage Newton exceeded " << model.irk.max_newton_iter
      << " iterations, last residual " << res_norm;
  throw NumericalError(msg.str());
}

/// Sensitivity extraction at converged stages: one Jacobian pass over the
/// stage values, one LU, one multi-rhs solve.
inline void stage_sensitivities(const DiscreteModel& model,
                                const Eigen::VectorXd& x,
                                const Eigen::VectorXd& u, const IrkStages& stages,
                                Eigen::MatrixXd& dpsi_dx,
                                Eigen::MatrixXd& dpsi_du) {
  const int nx = model.ode.nx;
  const int nu = model.ode.nu;
  const int s = model.irk.stages;
  const ButcherTableau tab = gauss_legendre(s);
  const double ts = model.ts;

  Eigen::MatrixXd system(s * nx, s * nx);
  Eigen::MatrixXd rhs(s * nx, nx + nu);
  system.setZero();
  Eigen::VectorXd stage_x(nx);
  Eigen::MatrixXd dfdx, dfdu;
  for (int j = 0; j < s; ++j) {
    stage_x = x;
    for (int l = 0; l < s; ++l) stage_x += ts * tab.a(j, l) * stages.k.col(l);
    model.ode.eval_jacobian(stage_x, u, dfdx, dfdu);
    for (int l = 0; l < s; ++l) {
      system.block(j * nx, l * nx, nx, nx) = -ts * tab.a(j, l) * dfdx;
      if (l == j)
        system.block(j * nx, l * nx, nx, nx) +=
            Eigen::MatrixXd::Identity(nx, nx);
    }
    rhs.block(j * nx, 0, nx, nx) = dfdx;
    rhs.block(j * nx, nx, nx, nu) = dfdu;
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(system);
  const Eigen::MatrixXd dk = lu.solve(rhs);

  dpsi_dx = Eigen::MatrixXd::Identity(nx, nx);
  dpsi_du = Eigen::MatrixXd::Zero(nx, nu);
  for (int j = 0; j < s; ++j) {
    dpsi_dx += ts * tab.b(j) * dk.block(j * nx, 0, nx, nx);
    dpsi_du += ts * tab.b(j) * dk.block(j * nx, nx, nx, nu);
  }
}

}  // namespace detail

/// x_next = psi(x, u).
inline Eigen::VectorXd irk_step(const DiscreteModel& model,
                                const Eigen::VectorXd& x,
                                const Eigen::VectorXd& u) {
  return detail::solve_stages(model, x, u).x_next;
}

/// Exact sensitivities (d psi/dx, d psi/du) of the converged IRK map,
/// obtained by differentiating the stage equations at the solution.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> irk_sensitivities(
    const DiscreteModel& model, const Eigen::VectorXd& x,
    const Eigen::VectorXd& u) {
  const detail::IrkStages stages = detail::solve_stages(model, x, u);
  Eigen::MatrixXd dpsi_dx, dpsi_du;
  detail::stage_sensitivities(model, x, u, stages, dpsi_dx, dpsi_du);
  return {dpsi_dx, dpsi_du};
}

/// Fused step-and-sensitivity evaluation sharing one stage solve.
inline Eigen::VectorXd irk_step_with_sensitivities(const DiscreteModel& model,
                                                   const Eigen::VectorXd& x,
                                                   const Eigen::VectorXd& u,
                                                   Eigen::MatrixXd& dpsi_dx,
                                                   Eigen::MatrixXd& dpsi_du) {
  const detail::IrkStages stages = detail::solve_stages(model, x, u);
  detail::stage_sensitivities(model, x, u, stages, dpsi_dx, dpsi_du);
  return stages.x_next;
}

/// Directional derivative of the stacked sensitivity matrix
/// [d psi/dx | d psi/du] along `direction` in (x, u) space, by central
/// finite differences of irk_sensitivities (step 1e-5, magnitude-scaled).
inline Eigen::MatrixXd second_order_directional(
    const DiscreteModel& model, const Eigen::VectorXd& x,
    const Eigen::VectorXd& u, const Eigen::VectorXd& direction) {
  const int nx = model.ode.nx;
  const int nu = model.ode.nu;
  if (direction.size() != nx + nu)
    throw std::invalid_argument("second_order_directional: direction size mismatch");
  const double dir_norm = direction.lpNorm<Eigen::Infinity>();
  if (dir_norm == 0.0) return Eigen::MatrixXd::Zero(nx, nx + nu);

  const double scale = std::max(
      1.0, std::max(x.lpNorm<Eigen::Infinity>(), u.lpNorm<Eigen::Infinity>()));
  const double h = 1e-5 * scale / dir_norm;
  const Eigen::VectorXd dx = h * direction.head(nx);
  const Eigen::VectorXd du = h * direction.tail(nu);
  auto [ax_p, au_p] = irk_sensitivities(model, x + dx, u + du);
  auto [ax_m, au_m] = irk_sensitivities(model, x - dx, u - du);
  Eigen::MatrixXd out(nx, nx + nu);
  out.leftCols(nx) = (ax_p - ax_m) / (2.0 * h);
  out.rightCols(nu) = (au_p - au_m) / (2.0 * h);
  return out;
}

/// Discrete dynamics handle consumed by the OCP solvers: the step map,
/// its first-order sensitivities, and (for the covariance-augmented
/// baseline) directional derivatives of the sensitivities.
struct DiscreteDynamics {
  int nx = 0;
  int nu = 0;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> step;
  std::function<void(const Eigen::VectorXd&, const Eigen::VectorXd&,
                     Eigen::MatrixXd&, Eigen::MatrixXd&)>
      sensitivities;
  /// Step and sensitivities from one shared stage solve.
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&,
                                Eigen::MatrixXd&, Eigen::MatrixXd&)>
      step_sens;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const Eigen::VectorXd&,
                                const Eigen::VectorXd&)>
      sensitivity_directional;
};

inline DiscreteDynamics make_discrete_dynamics(DiscreteModel model) {
  DiscreteDynamics d;
  d.nx = model.ode.nx;
  d.nu = model.ode.nu;
  d.step = [model](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    return irk_step(model, x, u);
  };
  d.sensitivities = [model](const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                            Eigen::MatrixXd& dpsi_dx, Eigen::MatrixXd& dpsi_du) {
    std::tie(dpsi_dx, dpsi_du) = irk_sensitivities(model, x, u);
  };
  d.step_sens = [model](const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                        Eigen::MatrixXd& dpsi_dx, Eigen::MatrixXd& dpsi_du) {
    return irk_step_with_sensitivities(model, x, u, dpsi_dx, dpsi_du);
  };
  d.sensitivity_directional = [model](const Eigen::VectorXd& x,
                                      const Eigen::VectorXd& u,
                                      const Eigen::VectorXd& dir) {
    return second_order_directional(model, x, u, dir);
  };
  return d;
}

/// Exact linear discrete map x+ = a x + b u; useful for LQR-type tests.
inline DiscreteDynamics make_linear_dynamics(const Eigen::MatrixXd& a,
                                             const Eigen::MatrixXd& b) {
  DiscreteDynamics d;
  d.nx = static_cast<int>(a.rows());
  d.nu = static_cast<int>(b.cols());
  d.step = [a, b](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    return (a * x + b * u).eval();
  };
  d.sensitivities = [a, b](const Eigen::VectorXd&, const Eigen::VectorXd&,
                           Eigen::MatrixXd& dpsi_dx, Eigen::MatrixXd& dpsi_du) {
    dpsi_dx = a;
    dpsi_du = b;
  };
  d.step_sens = [a, b](const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                       Eigen::MatrixXd& dpsi_dx, Eigen::MatrixXd& dpsi_du) {
    dpsi_dx = a;
    dpsi_du = b;
    return (a * x + b * u).eval();
  };
  d.sensitivity_directional = [a, b](const Eigen::VectorXd&,
                                     const Eigen::VectorXd&,
                                     const Eigen::VectorXd&) {
    return Eigen::MatrixXd::Zero(a.rows(), a.cols() + b.cols());
  };
  return d;
}

}  // namespace zogp::dyn
