#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "zogp/common.hpp"

namespace zogp::chain {

/// Hanging-chain benchmark parameters. One end of the chain is anchored,
/// the other end's velocity is the control input; the intermediate masses
/// carry the dynamics. A latent force on the y-acceleration of each
/// intermediate mass plays the role of the unmodeled dynamics.
struct ChainConfig {
  int n_mass = 5;
  double mass = 0.033;         // kg
  double stiffness = 30.3;     // N/m
  double rest_length = 0.033;  // m
  double alpha_lat = -0.1;
  double beta1 = 2.0;
  double beta2 = 3.0;
  Eigen::Vector3d gravity{0.0, 0.0, -9.81};
  double ts = 0.2;       // s
  double y_wall = -0.05;  // m
  Eigen::Vector3d anchor{0.0, 0.0, 0.0};

  int free_masses() const { return n_mass - 2; }
  int state_dim() const { return 6 * (n_mass - 2) + 3; }
  int input_dim() const { return 3; }

  void validate() const {
    if (n_mass < 3) throw std::invalid_argument("ChainConfig: n_mass must be >= 3");
    if (!(mass > 0.0) || !(stiffness > 0.0) || !(rest_length > 0.0) || !(ts > 0.0))
      throw std::invalid_argument("ChainConfig: mass, stiffness, rest_length, ts must be positive");
  }
};

// State packing: x = [controlled_pos (3); positions of intermediate masses
// (3 each); velocities of intermediate masses (3 each)].
inline int controlled_pos_index() { return 0; }
inline int mass_pos_index(const ChainConfig& cfg, int j) {
  (void)cfg;
  return 3 + 3 * j;
}
inline int mass_vel_index(const ChainConfig& cfg, int j) {
  return 3 + 3 * cfg.free_masses() + 3 * j;
}

/// f_lat(x, v_x) = alpha * (v_x - sin(b1*2*pi*x/l) - sin(b2*2*pi*x/l)^2)^2
inline double latent_force(double x_pos, double v_x, const ChainConfig& cfg) {
  const double w1 = cfg.beta1 * 2.0 * M_PI * x_pos / cfg.rest_length;
  const double w2 = cfg.beta2 * 2.0 * M_PI * x_pos / cfg.rest_length;
  const double s = v_x - std::sin(w1) - std::sin(w2) * std::sin(w2);
  return cfg.alpha_lat * s * s;
}

/// (d f_lat / d x_pos, d f_lat / d v_x)
inline Eigen::Vector2d latent_force_gradient(double x_pos, double v_x,
                                             const ChainConfig& cfg) {
  const double c1 = cfg.beta1 * 2.0 * M_PI / cfg.rest_length;
  const double c2 = cfg.beta2 * 2.0 * M_PI / cfg.rest_length;
  const double w1 = c1 * x_pos;
  const double w2 = c2 * x_pos;
  const double s = v_x - std::sin(w1) - std::sin(w2) * std::sin(w2);
  const double ds_dx = -c1 * std::cos(w1) - 2.0 * std::sin(w2) * std::cos(w2) * c2;
  return {2.0 * cfg.alpha_lat * s * ds_dx, 2.0 * cfg.alpha_lat * s};
}

namespace detail {

/// Spring force on the lower-index endpoint: F = k (1 - l/|d|) d, d = p_b - p_a.
inline Eigen::Vector3d spring_force(const Eigen::Vector3d& delta,
                                    const ChainConfig& cfg) {
  const double r = delta.norm();
  if (r < 1e-12)
    throw NumericalError("chain_ode: adjacent masses coincide (spring length < 1e-12 m)");
  return cfg.stiffness * (1.0 - cfg.rest_length / r) * delta;
}

/// d spring_force / d delta.
inline Eigen::Matrix3d spring_force_jacobian(const Eigen::Vector3d& delta,
                                             const ChainConfig& cfg) {
  const double r = delta.norm();
  if (r < 1e-12)
    throw NumericalError("chain_ode: adjacent masses coincide (spring length < 1e-12 m)");
  return cfg.stiffness * ((1.0 - cfg.rest_length / r) * Eigen::Matrix3d::Identity() +
                          (cfg.rest_length / (r * r * r)) * delta * delta.transpose());
}

/// Position of chain mass i (0 = anchor, n_mass-1 = controlled end).
inline Eigen::Vector3d mass_position(const ChainConfig& cfg,
                                     const Eigen::Ref<const Eigen::VectorXd>& x,
                                     int i) {
  if (i == 0) return cfg.anchor;
  if (i == cfg.n_mass - 1) return x.head<3>();
  return x.segment<3>(mass_pos_index(cfg, i - 1));
}

}  // namespace detail

/// Continuous vector field of the chain. Controlled mass: d(pos)/dt = u.
/// Intermediate mass j: d(pos)/dt = vel, d(vel)/dt = spring force balance
/// over the two adjacent springs, gravity, and the latent y-force.
inline Eigen::VectorXd chain_ode(const Eigen::Ref<const Eigen::VectorXd>& x,
                                 const Eigen::Ref<const Eigen::VectorXd>& u,
                                 const ChainConfig& cfg) {
  if (x.size() != cfg.state_dim() || u.size() != 3)
    throw std::invalid_argument("chain_ode: dimension mismatch");
  const int nf = cfg.free_masses();
  Eigen::VectorXd xdot(x.size());
  xdot.head<3>() = u;
  Eigen::Vector3d p_prev = cfg.anchor;
  Eigen::Vector3d p_self = detail::mass_position(cfg, x, 1);
  for (int j = 0; j < nf; ++j) {
    const Eigen::Vector3d vel = x.segment<3>(mass_vel_index(cfg, j));
    xdot.segment<3>(mass_pos_index(cfg, j)) = vel;
    const Eigen::Vector3d p_next = detail::mass_position(cfg, x, j + 2);
    const Eigen::Vector3d f_next = detail::spring_force(p_next - p_self, cfg);
    const Eigen::Vector3d f_prev = detail::spring_force(p_self - p_prev, cfg);
    Eigen::Vector3d accel = (f_next - f_prev) / cfg.mass + cfg.gravity;
    accel.y() += latent_force(p_self.x(), vel.x(), cfg);
    xdot.segment<3>(mass_vel_index(cfg, j)) = accel;
    p_prev = p_self;
    p_self = p_next;
  }
  return xdot;
}

/// Analytic Jacobians of chain_ode w.r.t. state and input.
inline void chain_ode_jacobian(const Eigen::Ref<const Eigen::VectorXd>& x,
                               const Eigen::Ref<const Eigen::VectorXd>& u,
                               const ChainConfig& cfg, Eigen::MatrixXd& dfdx,
                               Eigen::MatrixXd& dfdu) {
  (void)u;
  const int nx = cfg.state_dim();
  const int nf = cfg.free_masses();
  dfdx.resize(nx, nx);
  dfdx.setZero();
  dfdu.resize(nx, 3);
  dfdu.setZero();
  dfdu.topLeftCorner<3, 3>().setIdentity();

  auto pos_col = [&](int mass) -> int {
    // column offset of that mass's position in the state, or -1 if fixed
    if (mass == 0) return -1;
    if (mass == cfg.n_mass - 1) return 0;  // controlled
    return mass_pos_index(cfg, mass - 1);
  };

  for (int j = 0; j < nf; ++j) {
    const int vrow = mass_vel_index(cfg, j);
    dfdx.block<3, 3>(mass_pos_index(cfg, j), vrow).setIdentity();

    const int i = j + 1;
    const Eigen::Vector3d p_prev = detail::mass_position(cfg, x, i - 1);
    const Eigen::Vector3d p_self = detail::mass_position(cfg, x, i);
    const Eigen::Vector3d p_next = detail::mass_position(cfg, x, i + 1);
    const Eigen::Matrix3d jac_next =
        detail::spring_force_jacobian(p_next - p_self, cfg) / cfg.mass;
    const Eigen::Matrix3d jac_prev =
        detail::spring_force_jacobian(p_self - p_prev, cfg) / cfg.mass;
    const int col_self = pos_col(i);
    const int col_next = pos_col(i + 1);
    const int col_prev = pos_col(i - 1);
    dfdx.block<3, 3>(vrow, col_self) -= jac_next + jac_prev;
    if (col_next >= 0) dfdx.block<3, 3>(vrow, col_next) += jac_next;
    if (col_prev >= 0) dfdx.block<3, 3>(vrow, col_prev) += jac_prev;

    const Eigen::Vector3d vel = x.segment<3>(vrow);
    const Eigen::Vector2d g = latent_force_gradient(p_self.x(), vel.x(), cfg);
    dfdx(vrow + 1, col_self) += g(0);  // y-accel w.r.t. x-position
    dfdx(vrow + 1, vrow) += g(1);      // y-accel w.r.t. x-velocity
  }
}

/// Total mechanical energy of the intermediate masses and springs
/// (kinetic + elastic + gravitational); used for integrator sanity checks.
inline double chain_energy(const Eigen::Ref<const Eigen::VectorXd>& x,
                           const ChainConfig& cfg) {
  const int nf = cfg.free_masses();
  double e = 0.0;
  for (int j = 0; j < nf; ++j) {
    const Eigen::Vector3d vel = x.segment<3>(mass_vel_index(cfg, j));
    e += 0.5 * cfg.mass * vel.squaredNorm();
    e -= cfg.mass * cfg.gravity.dot(detail::mass_position(cfg, x, j + 1));
  }
  for (int i = 0; i + 1 < cfg.n_mass; ++i) {
    const double stretch = (detail::mass_position(cfg, x, i + 1) -
                            detail::mass_position(cfg, x, i))
                               .norm() -
                           cfg.rest_length;
    e += 0.5 * cfg.stiffness * stretch * stretch;
  }
  return e;
}

/// Equilibrium state: zero velocities, controlled end at
/// (6 l (n_mass - 1), 0, 0), intermediate positions from a damped Newton
/// solve of the static force balance (latent force off).
inline Eigen::VectorXd resting_state(const ChainConfig& cfg) {
  cfg.validate();
  ChainConfig stat = cfg;
  stat.alpha_lat = 0.0;
  const int nf = cfg.free_masses();
  const Eigen::Vector3d controlled(
      6.0 * cfg.rest_length * (cfg.n_mass - 1), 0.0, 0.0);

  Eigen::VectorXd x = Eigen::VectorXd::Zero(cfg.state_dim());
  x.head<3>() = controlled;
  for (int j = 0; j < nf; ++j) {
    const double t = static_cast<double>(j + 1) / (cfg.n_mass - 1);
    x.segment<3>(mass_pos_index(cfg, j)) =
        cfg.anchor + t * (controlled - cfg.anchor);
  }

  const Eigen::VectorXd u = Eigen::VectorXd::Zero(3);
  const int n = 3 * nf;
  auto accel_residual = [&](const Eigen::VectorXd& state) {
    const Eigen::VectorXd xdot = chain_ode(state, u, stat);
    Eigen::VectorXd r(n);
    for (int j = 0; j < nf; ++j)
      r.segment<3>(3 * j) = xdot.segment<3>(mass_vel_index(cfg, j));
    return r;
  };

  Eigen::VectorXd r = accel_residual(x);
  Eigen::MatrixXd dfdx, dfdu;
  for (int iter = 0; iter < 200; ++iter) {
    if (r.lpNorm<Eigen::Infinity>() <= 1e-10) return x;
    chain_ode_jacobian(x, u, stat, dfdx, dfdu);
    Eigen::MatrixXd jac(n, n);
    for (int a = 0; a < nf; ++a)
      for (int b = 0; b < nf; ++b)
        jac.block<3, 3>(3 * a, 3 * b) =
            dfdx.block<3, 3>(mass_vel_index(cfg, a), mass_pos_index(cfg, b));
    const Eigen::VectorXd dir = jac.partialPivLu().solve(-r);
    double step = 1.0;
    while (true) {
      Eigen::VectorXd trial = x;
      for (int j = 0; j < nf; ++j)
        trial.segment<3>(mass_pos_index(cfg, j)) += step * dir.segment<3>(3 * j);
      Eigen::VectorXd r_trial = accel_residual(trial);
      if (r_trial.lpNorm<Eigen::Infinity>() <
              (1.0 - 1e-4 * step) * r.lpNorm<Eigen::Infinity>() ||
          step < 1e-6) {
        x = trial;
        r = r_trial;
        break;
      }
      step *= 0.5;
    }
  }
  if (r.lpNorm<Eigen::Infinity>() <= 1e-10) return x;
  throw NumericalError("resting_state: Newton did not reach 1e-10 in 200 iterations");
}

}  // namespace zogp::chain
