#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "zogp/common.hpp"
#include "zogp/dense_qp.hpp"
#include "zogp/gp.hpp"
#include "zogp/integrator.hpp"
#include "zogp/ocp_qp.hpp"
#include "zogp/riccati_ip.hpp"
#include "zogp/threading.hpp"
#include "zogp/uncertainty.hpp"

namespace zogp::sqp {

using unc::TighteningMode;

/// One stage inequality h(x, u) <= 0 with satisfaction probability `prob`.
/// prob = 1 marks a hard constraint, which bypasses tightening.
struct StageConstraintSpec {
  std::function<double(const Eigen::VectorXd&, const Eigen::VectorXd&)> value;
  std::function<Eigen::RowVectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)>
      gradient;
  double prob = 0.95;
  TighteningMode mode = TighteningMode::gaussian;
};

/// h = row * (x; u) + offset <= 0.
inline StageConstraintSpec make_affine_constraint(const Eigen::RowVectorXd& row,
                                                  double offset, double prob,
                                                  TighteningMode mode) {
  StageConstraintSpec c;
  c.value = [row, offset](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    double v = offset;
    v += row.head(x.size()).dot(x);
    v += row.tail(u.size()).dot(u);
    return v;
  };
  c.gradient = [row](const Eigen::VectorXd&, const Eigen::VectorXd&) { return row; };
  c.prob = prob;
  c.mode = mode;
  return c;
}

/// Hard box bounds on the input; entries may be +-infinity.
struct InputBounds {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  static InputBounds none(int nu) {
    InputBounds b;
    b.lower = Eigen::VectorXd::Constant(nu, -std::numeric_limits<double>::infinity());
    b.upper = Eigen::VectorXd::Constant(nu, std::numeric_limits<double>::infinity());
    return b;
  }
  static InputBounds box(int nu, double limit) {
    InputBounds b;
    b.lower = Eigen::VectorXd::Constant(nu, -limit);
    b.upper = Eigen::VectorXd::Constant(nu, limit);
    return b;
  }
};

/// The deterministic GP-MPC optimal control problem: mean dynamics
/// psi + B mu^d, covariance recursion driven by Sigma^d + Sigma^w, tightened
/// stage constraints, tracking cost on means and inputs.
struct OcpSpec {
  int horizon = 0;
  int nx = 0, nu = 0, nw = 0;
  dyn::DiscreteDynamics model;
  std::optional<gp::MultiGpModel> gp_model;
  Eigen::MatrixXd feature_selector;  // n_z x (nx+nu): z = S (x; u)
  Eigen::MatrixXd b_mat;             // nx x nw
  Eigen::VectorXd w_var;             // diag of Sigma^w
  Eigen::MatrixXd weight_x, weight_u, weight_term;
  Eigen::VectorXd x_ref, u_ref;
  std::vector<StageConstraintSpec> constraints;
  InputBounds input_bounds;
  Eigen::VectorXd x_current;

  void validate() const {
    if (horizon < 1) throw std::invalid_argument("OcpSpec: horizon must be >= 1");
    if (nx < 1 || nu < 1 || nw < 0)
      throw std::invalid_argument("OcpSpec: bad dimensions");
    if (!model.step || !model.sensitivities)
      throw std::invalid_argument("OcpSpec: discrete model handles missing");
    if (b_mat.rows() != nx || b_mat.cols() != nw)
      throw std::invalid_argument("OcpSpec: B dimension mismatch");
    if (w_var.size() != nw || (w_var.array() < 0.0).any())
      throw std::invalid_argument("OcpSpec: Sigma^w must be a nonnegative diagonal");
    if (weight_x.rows() != nx || weight_u.rows() != nu || weight_term.rows() != nx)
      throw std::invalid_argument("OcpSpec: weight dimension mismatch");
    if (x_ref.size() != nx || u_ref.size() != nu || x_current.size() != nx)
      throw std::invalid_argument("OcpSpec: reference dimension mismatch");
    if (gp_model) {
      if (gp_model->output_dim() != nw)
        throw std::invalid_argument("OcpSpec: GP output dim != nw");
      if (feature_selector.rows() != gp_model->input_dim() ||
          feature_selector.cols() != nx + nu)
        throw std::invalid_argument("OcpSpec: feature selector dimension mismatch");
    }
    if (input_bounds.lower.size() != nu || input_bounds.upper.size() != nu)
      throw std::invalid_argument("OcpSpec: input bound dimension mismatch");
  }
};

/// SQP state: mean/input trajectory, covariance trajectory, step bookkeeping
/// and the QP multiplier estimates adopted at the last iteration.
struct Iterate {
  std::vector<Eigen::VectorXd> mu;  // N+1
  std::vector<Eigen::VectorXd> u;   // N
  unc::CovarianceTrajectory p;
  double step_norm = std::numeric_limits<double>::infinity();
  int iteration = 0;
  std::vector<Eigen::VectorXd> eq_mult;
  std::vector<Eigen::VectorXd> ineq_mult;
};

enum class SqpMode { zero_order, naive };

struct SolverOptions {
  int max_iter = 50;
  double tol_step = 1e-8;  // infinity norm of the y step
  SqpMode mode = SqpMode::zero_order;
  qp::IpSettings qp_settings;
  qp::DenseQpSettings dense_settings;
  int workers = 1;
  bool force_iterations = false;  // timing runs: ignore tol, run max_iter steps
};

struct SolverStats {
  int iterations = 0;
  bool converged = false;
  double time_integrator = 0.0;
  double time_gp = 0.0;
  double time_prop_tight = 0.0;
  double time_qp = 0.0;
  double time_interface = 0.0;
  double time_total = 0.0;
  std::vector<double> step_norms;
  std::vector<double> iter_seconds;
  std::vector<double> dyn_residuals;
  std::vector<int> qp_iterations;

  double category_sum() const {
    return time_integrator + time_gp + time_prop_tight + time_qp + time_interface;
  }

  void write_trace_csv(std::ostream& os) const {
    os << "iter,step_norm,dyn_residual,seconds\n";
    os.precision(17);
    for (std::size_t k = 0; k < step_norms.size(); ++k)
      os << k << "," << step_norms[k] << ","
         << (k < dyn_residuals.size() ? dyn_residuals[k] : 0.0) << ","
         << (k < iter_seconds.size() ? iter_seconds[k] : 0.0) << "\n";
  }
  void write_trace_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open trace CSV: " + path);
    write_trace_csv(os);
  }
};

/// Thrown when a QP subproblem is reported infeasible; carries the QP for
/// post-mortem dumps.
class QpFailure : public NumericalError {
 public:
  QpFailure(std::string what, qp::OcpQp qp_in, qp::QpStatus status_in)
      : NumericalError(std::move(what)), qp(std::move(qp_in)), status(status_in) {}
  qp::OcpQp qp;
  qp::QpStatus status;
};

namespace detail {

class SectionTimer {
 public:
  explicit SectionTimer(double& sink)
      : sink_(sink), start_(std::chrono::steady_clock::now()) {}
  ~SectionTimer() {
    sink_ += std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                           start_)
                 .count();
  }

 private:
  double& sink_;
  std::chrono::steady_clock::time_point start_;
};

struct DynEval {
  Eigen::VectorXd psi;
  Eigen::MatrixXd dpsi_dx, dpsi_du;
};

struct GpEval {
  Eigen::VectorXd mean;  // nw
  Eigen::VectorXd var;   // nw
  Eigen::MatrixXd jac;   // nw x (nx+nu), after the feature-map chain rule
};

inline GpEval eval_gp(const OcpSpec& spec, const Eigen::VectorXd& x,
                      const Eigen::VectorXd& u, bool with_jacobian = true) {
  GpEval e;
  if (!spec.gp_model) {
    e.mean = Eigen::VectorXd::Zero(spec.nw);
    e.var = Eigen::VectorXd::Zero(spec.nw);
    e.jac = Eigen::MatrixXd::Zero(spec.nw, spec.nx + spec.nu);
    return e;
  }
  Eigen::VectorXd xu(spec.nx + spec.nu);
  xu << x, u;
  const Eigen::VectorXd z = spec.feature_selector * xu;
  std::tie(e.mean, e.var) = gp::posterior_mean_cov(*spec.gp_model, z);
  if (with_jacobian)
    e.jac = gp::posterior_mean_jacobian(*spec.gp_model, z) * spec.feature_selector;
  else
    e.jac = Eigen::MatrixXd::Zero(spec.nw, spec.nx + spec.nu);
  return e;
}

}  // namespace detail

/// Dynamics/GP linearization of one shooting stage plus the tightened
/// inequality rows evaluated against `sigma_i`.
struct StageData {
  Eigen::VectorXd psi;                 // psi(mu_i, u_i)
  Eigen::VectorXd gp_mean, gp_var;     // posterior at the stage feature
  Eigen::MatrixXd a_tilde;             // d(psi + B mu^d)/dx
  Eigen::MatrixXd b_tilde;             // d(psi + B mu^d)/du
  Eigen::VectorXd residual;            // psi + B mu^d - mu_{i+1}
  Eigen::VectorXd grad_x, grad_u;      // tracking-cost gradients
  std::vector<unc::TightenedConstraint> tightened;
};

/// Linearizes stage i of the OCP at (mu_i, u_i) against the covariance
/// sigma_i used for tightening; mu_next supplies the dynamics residual.
inline StageData linearize_stage(const OcpSpec& spec, const Eigen::VectorXd& mu_i,
                                 const Eigen::VectorXd& u_i,
                                 const Eigen::VectorXd& mu_next,
                                 const Eigen::MatrixXd& sigma_i) {
  if (!mu_i.allFinite() || !u_i.allFinite())
    throw std::invalid_argument("linearize_stage: non-finite iterate");
  StageData st;
  st.psi = spec.model.step(mu_i, u_i);
  Eigen::MatrixXd dpsi_dx, dpsi_du;
  spec.model.sensitivities(mu_i, u_i, dpsi_dx, dpsi_du);
  const detail::GpEval gpe = detail::eval_gp(spec, mu_i, u_i);
  st.gp_mean = gpe.mean;
  st.gp_var = gpe.var;
  st.a_tilde = dpsi_dx + spec.b_mat * gpe.jac.leftCols(spec.nx);
  st.b_tilde = dpsi_du + spec.b_mat * gpe.jac.rightCols(spec.nu);
  st.residual = st.psi + spec.b_mat * st.gp_mean - mu_next;
  st.grad_x = spec.weight_x * (mu_i - spec.x_ref);
  st.grad_u = spec.weight_u * (u_i - spec.u_ref);
  st.tightened.reserve(spec.constraints.size());
  for (const auto& c : spec.constraints) {
    const double h = c.value(mu_i, u_i);
    const Eigen::RowVectorXd g = c.gradient(mu_i, u_i);
    const double alpha =
        c.prob >= 1.0 ? 0.0 : unc::tightening_factor(c.prob, c.mode);
    st.tightened.push_back(unc::tighten(h, g, sigma_i, alpha, c.prob));
  }
  return st;
}

/// Tracking cost of the mean/input trajectory.
inline double cost_value(const OcpSpec& spec, const Iterate& it) {
  double v = 0.0;
  for (int i = 0; i < spec.horizon; ++i) {
    const Eigen::VectorXd ex = it.mu[static_cast<std::size_t>(i)] - spec.x_ref;
    const Eigen::VectorXd eu = it.u[static_cast<std::size_t>(i)] - spec.u_ref;
    v += 0.5 * ex.dot(spec.weight_x * ex) + 0.5 * eu.dot(spec.weight_u * eu);
  }
  const Eigen::VectorXd ex = it.mu.back() - spec.x_ref;
  v += 0.5 * ex.dot(spec.weight_term * ex);
  return v;
}

/// Default initializer: mean roll-in of the model from x_current with zero
/// inputs, zero covariances.
inline Iterate make_initial_guess(const OcpSpec& spec) {
  spec.validate();
  Iterate it;
  it.mu.resize(static_cast<std::size_t>(spec.horizon) + 1);
  it.u.assign(static_cast<std::size_t>(spec.horizon), Eigen::VectorXd::Zero(spec.nu));
  it.mu[0] = spec.x_current;
  for (int i = 0; i < spec.horizon; ++i) {
    const std::size_t si = static_cast<std::size_t>(i);
    const detail::GpEval gpe = detail::eval_gp(spec, it.mu[si], it.u[si], false);
    it.mu[si + 1] = spec.model.step(it.mu[si], it.u[si]) + spec.b_mat * gpe.mean;
  }
  it.p = unc::CovarianceTrajectory::zeros(spec.horizon, spec.nx);
  return it;
}

/// Shifts a solved trajectory one stage forward for closed-loop warm starts.
inline Iterate shift_iterate(const OcpSpec& spec, const Iterate& prev,
                             const Eigen::VectorXd& x_measured) {
  Iterate it = prev;
  it.mu[0] = x_measured;
  for (int i = 0; i + 1 < spec.horizon; ++i) {
    it.mu[static_cast<std::size_t>(i) + 1] = prev.mu[static_cast<std::size_t>(i) + 2];
    it.u[static_cast<std::size_t>(i)] = prev.u[static_cast<std::size_t>(i) + 1];
  }
  it.mu[static_cast<std::size_t>(spec.horizon) - 1] = prev.mu.back();
  it.mu[static_cast<std::size_t>(spec.horizon)] = prev.mu.back();
  it.step_norm = std::numeric_limits<double>::infinity();
  it.iteration = 0;
  return it;
}

namespace detail {

struct LinearizationPass {
  std::vector<DynEval> dyn;       // N
  std::vector<GpEval> gp;         // N
  std::vector<StageData> stages;  // N, composed
};

/// Dynamics pass and GP pass over all stages, each a parallel map with
/// wall-clock timing attributed to its own category.
inline LinearizationPass run_linearization(const OcpSpec& spec, const Iterate& it,
                                           int workers, SolverStats& stats) {
  LinearizationPass pass;
  const int n = spec.horizon;
  pass.dyn.resize(static_cast<std::size_t>(n));
  pass.gp.resize(static_cast<std::size_t>(n));
  {
    SectionTimer t(stats.time_integrator);
    parallel_for(n, workers, [&](int i) {
      const std::size_t si = static_cast<std::size_t>(i);
      DynEval d;
      if (spec.model.step_sens) {
        d.psi = spec.model.step_sens(it.mu[si], it.u[si], d.dpsi_dx, d.dpsi_du);
      } else {
        d.psi = spec.model.step(it.mu[si], it.u[si]);
        spec.model.sensitivities(it.mu[si], it.u[si], d.dpsi_dx, d.dpsi_du);
      }
      pass.dyn[si] = std::move(d);
    });
  }
  {
    SectionTimer t(stats.time_gp);
    parallel_for(n, workers, [&](int i) {
      const std::size_t si = static_cast<std::size_t>(i);
      pass.gp[si] = eval_gp(spec, it.mu[si], it.u[si]);
    });
  }
  return pass;
}

/// Assembles StageData from the cached passes; tightening against `sigma`.
inline StageData compose_stage(const OcpSpec& spec, const Eigen::VectorXd& mu_i,
                               const Eigen::VectorXd& u_i,
                               const Eigen::VectorXd& mu_next,
                               const Eigen::MatrixXd& sigma, const DynEval& d,
                               const GpEval& g) {
  StageData st;
  st.psi = d.psi;
  st.gp_mean = g.mean;
  st.gp_var = g.var;
  st.a_tilde = d.dpsi_dx + spec.b_mat * g.jac.leftCols(spec.nx);
  st.b_tilde = d.dpsi_du + spec.b_mat * g.jac.rightCols(spec.nu);
  st.residual = st.psi + spec.b_mat * st.gp_mean - mu_next;
  st.grad_x = spec.weight_x * (mu_i - spec.x_ref);
  st.grad_u = spec.weight_u * (u_i - spec.u_ref);
  st.tightened.reserve(spec.constraints.size());
  for (const auto& c : spec.constraints) {
    const double h = c.value(mu_i, u_i);
    const Eigen::RowVectorXd grad = c.gradient(mu_i, u_i);
    const double alpha =
        c.prob >= 1.0 ? 0.0 : unc::tightening_factor(c.prob, c.mode);
    st.tightened.push_back(unc::tighten(h, grad, sigma, alpha, c.prob));
  }
  return st;
}

inline bool has_input_part(const Eigen::RowVectorXd& row, int nu) {
  return row.tail(nu).lpNorm<Eigen::Infinity>() > 0.0;
}

/// Appends the hard input-bound rows for stage i to (cx, cu, ub) triplets.
inline void append_bound_rows(const OcpSpec& spec, const Eigen::VectorXd& u_i,
                              std::vector<Eigen::RowVectorXd>& rows_x,
                              std::vector<Eigen::RowVectorXd>& rows_u,
                              std::vector<double>& rhs) {
  for (int k = 0; k < spec.nu; ++k) {
    if (std::isfinite(spec.input_bounds.upper(k))) {
      Eigen::RowVectorXd ru = Eigen::RowVectorXd::Zero(spec.nu);
      ru(k) = 1.0;
      rows_x.push_back(Eigen::RowVectorXd::Zero(spec.nx));
      rows_u.push_back(ru);
      rhs.push_back(spec.input_bounds.upper(k) - u_i(k));
    }
    if (std::isfinite(spec.input_bounds.lower(k))) {
      Eigen::RowVectorXd ru = Eigen::RowVectorXd::Zero(spec.nu);
      ru(k) = -1.0;
      rows_x.push_back(Eigen::RowVectorXd::Zero(spec.nx));
      rows_u.push_back(ru);
      rhs.push_back(u_i(k) - spec.input_bounds.lower(k));
    }
  }
}

}  // namespace detail

/// One iteration of the zero-order scheme: propagate covariances at the
/// current mean trajectory, tighten against the fresh covariances, solve the
/// reduced structured QP, take the full step.
inline Iterate zero_order_iteration(const OcpSpec& spec, const Iterate& cur,
                                    const SolverOptions& opts,
                                    SolverStats& stats) {
  spec.validate();
  const int n = spec.horizon;
  const int workers = resolve_workers(opts.workers);

  const detail::LinearizationPass pass =
      detail::run_linearization(spec, cur, workers, stats);

  // Covariance propagation at the current iterate (Sigma_0 = 0).
  unc::CovarianceTrajectory p_plus;
  std::vector<StageData> stages(static_cast<std::size_t>(n));
  {
    detail::SectionTimer t(stats.time_prop_tight);
    std::vector<unc::StageLinearization> lins(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      unc::StageLinearization sl;
      sl.a_tilde = pass.dyn[si].dpsi_dx +
                   spec.b_mat * pass.gp[si].jac.leftCols(spec.nx);
      sl.b_mat = spec.b_mat;
      sl.gp_var = pass.gp[si].var;
      sl.w_var = spec.w_var;
      lins[si] = std::move(sl);
    }
    p_plus = unc::propagate_covariances(
        lins, Eigen::MatrixXd::Zero(spec.nx, spec.nx));
    for (int i = 0; i < n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      stages[si] = detail::compose_stage(spec, cur.mu[si], cur.u[si],
                                         cur.mu[si + 1], p_plus.sigmas[si],
                                         pass.dyn[si], pass.gp[si]);
    }
  }

  // Structured QP assembly.
  qp::OcpQp ocp_qp;
  {
    detail::SectionTimer t(stats.time_interface);
    ocp_qp.stages.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      qp::QpStage& qs = ocp_qp.stages[si];
      qs.hess_xx = spec.weight_x;
      qs.hess_uu = spec.weight_u;
      qs.hess_xu = Eigen::MatrixXd::Zero(spec.nx, spec.nu);
      qs.grad_x = stages[si].grad_x;
      qs.grad_u = stages[si].grad_u;
      qs.dyn_a = stages[si].a_tilde;
      qs.dyn_b = stages[si].b_tilde;
      qs.dyn_offset = stages[si].residual;

      std::vector<Eigen::RowVectorXd> rows_x, rows_u;
      std::vector<double> rhs;
      for (const auto& tc : stages[si].tightened) {
        // State-only rows are meaningless at the fixed initial stage.
        if (i == 0 && !detail::has_input_part(tc.row, spec.nu)) continue;
        rows_x.push_back(tc.row.head(spec.nx));
        rows_u.push_back(tc.row.tail(spec.nu));
        rhs.push_back(-(tc.offset + tc.backoff));
      }
      detail::append_bound_rows(spec, cur.u[si], rows_x, rows_u, rhs);
      const Eigen::Index m = static_cast<Eigen::Index>(rhs.size());
      qs.ineq_x.resize(m, spec.nx);
      qs.ineq_u.resize(m, spec.nu);
      qs.ineq_ub.resize(m);
      for (Eigen::Index r = 0; r < m; ++r) {
        qs.ineq_x.row(r) = rows_x[static_cast<std::size_t>(r)];
        qs.ineq_u.row(r) = rows_u[static_cast<std::size_t>(r)];
        qs.ineq_ub(r) = rhs[static_cast<std::size_t>(r)];
      }
    }
    ocp_qp.hess_term = spec.weight_term;
    ocp_qp.grad_term = spec.weight_term * (cur.mu.back() - spec.x_ref);
    // Terminal rows: tighten state-only constraints against Sigma_N.
    std::vector<Eigen::RowVectorXd> rows_x;
    std::vector<double> rhs;
    for (const auto& c : spec.constraints) {
      const Eigen::RowVectorXd g = c.gradient(cur.mu.back(), Eigen::VectorXd::Zero(spec.nu));
      if (detail::has_input_part(g, spec.nu)) continue;
      const double h = c.value(cur.mu.back(), Eigen::VectorXd::Zero(spec.nu));
      const double alpha =
          c.prob >= 1.0 ? 0.0 : unc::tightening_factor(c.prob, c.mode);
      const unc::TightenedConstraint tc =
          unc::tighten(h, g, p_plus.sigmas.back(), alpha, c.prob);
      rows_x.push_back(tc.row.head(spec.nx));
      rhs.push_back(-(tc.offset + tc.backoff));
    }
    ocp_qp.ineq_term_x.resize(static_cast<Eigen::Index>(rhs.size()), spec.nx);
    ocp_qp.ineq_term_ub.resize(static_cast<Eigen::Index>(rhs.size()));
    for (std::size_t r = 0; r < rhs.size(); ++r) {
      ocp_qp.ineq_term_x.row(static_cast<Eigen::Index>(r)) = rows_x[r];
      ocp_qp.ineq_term_ub(static_cast<Eigen::Index>(r)) = rhs[r];
    }
    ocp_qp.x0 = spec.x_current - cur.mu[0];
  }

  qp::QpSolution sol;
  {
    detail::SectionTimer t(stats.time_qp);
    qp::RiccatiIpSolver solver(opts.qp_settings);
    sol = solver.solve(ocp_qp);
  }
  stats.qp_iterations.push_back(sol.iterations);
  if (sol.status == qp::QpStatus::infeasible)
    throw QpFailure("zero_order_iteration: QP infeasible", std::move(ocp_qp),
                    sol.status);

  Iterate next;
  {
    detail::SectionTimer t(stats.time_interface);
    next.mu.resize(static_cast<std::size_t>(n) + 1);
    next.u.resize(static_cast<std::size_t>(n));
    double step = 0.0;
    for (int i = 0; i <= n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      next.mu[si] = cur.mu[si] + sol.dx[si];
      step = std::max(step, sol.dx[si].lpNorm<Eigen::Infinity>());
      if (i < n) {
        next.u[si] = cur.u[si] + sol.du[si];
        step = std::max(step, sol.du[si].lpNorm<Eigen::Infinity>());
      }
    }
    next.p = std::move(p_plus);
    next.step_norm = step;
    next.iteration = cur.iteration + 1;
    next.eq_mult = std::move(sol.eq_mult);
    next.ineq_mult = std::move(sol.ineq_mult);
  }
  double dyn_res = 0.0;
  for (const auto& st : stages)
    dyn_res = std::max(dyn_res, st.residual.lpNorm<Eigen::Infinity>());
  stats.dyn_residuals.push_back(dyn_res);
  return next;
}

namespace detail {

// vech indexing over the lower triangle (a >= b), diagonal included.
inline int sym_dim(int n) { return n * (n + 1) / 2; }

inline std::vector<std::pair<int, int>> sym_index_pairs(int n) {
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(static_cast<std::size_t>(sym_dim(n)));
  for (int b = 0; b < n; ++b)
    for (int a = b; a < n; ++a) pairs.emplace_back(a, b);
  return pairs;
}

inline Eigen::VectorXd vech_sym(const Eigen::MatrixXd& m,
                                const std::vector<std::pair<int, int>>& pairs) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t k = 0; k < pairs.size(); ++k)
    v(static_cast<Eigen::Index>(k)) = m(pairs[k].first, pairs[k].second);
  return v;
}

inline Eigen::MatrixXd unvech_sym(const Eigen::Ref<const Eigen::VectorXd>& v,
                                  int n,
                                  const std::vector<std::pair<int, int>>& pairs) {
  Eigen::MatrixXd m(n, n);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    m(pairs[k].first, pairs[k].second) = v(static_cast<Eigen::Index>(k));
    m(pairs[k].second, pairs[k].first) = v(static_cast<Eigen::Index>(k));
  }
  return m;
}

/// vech of A E_ab A^T for every symmetric basis element E_ab; the linear map
/// Delta vech(S) -> vech(A S A^T).
inline Eigen::MatrixXd sym_congruence_matrix(
    const Eigen::MatrixXd& a, const std::vector<std::pair<int, int>>& pairs) {
  const int n = static_cast<int>(a.rows());
  const int ns = sym_dim(n);
  Eigen::MatrixXd t(ns, ns);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [ai, bi] = pairs[k];
    Eigen::MatrixXd img;
    if (ai == bi)
      img = a.col(ai) * a.col(bi).transpose();
    else
      img = a.col(ai) * a.col(bi).transpose() + a.col(bi) * a.col(ai).transpose();
    t.col(static_cast<Eigen::Index>(k)) = vech_sym(img, pairs);
  }
  return t;
}

}  // namespace detail

/// One iteration of the covariance-augmented exact SQP (the naive baseline):
/// the QP carries Delta vech(Sigma_i) per stage, the covariance-equation
/// Jacobian w.r.t. y is built from directional derivatives of the dynamics
/// sensitivities, and tightened rows couple to the covariance variables.
/// Supported regime: GP prior only (no data points), i.e. constant Sigma^d.
inline Iterate naive_iteration(const OcpSpec& spec, const Iterate& cur,
                               const SolverOptions& opts, SolverStats& stats,
                               qp::DenseKktSolver& dense_solver) {
  spec.validate();
  if (spec.gp_model && spec.gp_model->count() > 0)
    throw UnsupportedConfiguration(
        "naive mode supports only D = 0 (GP prior) datasets");
  if (!spec.model.sensitivity_directional)
    throw UnsupportedConfiguration(
        "naive mode requires second-order directional sensitivities");
  const int n = spec.horizon;
  const int nx = spec.nx;
  const int nu = spec.nu;
  const int ny = nx + nu;
  const int ns = detail::sym_dim(nx);
  const int workers = resolve_workers(opts.workers);
  const auto pairs = detail::sym_index_pairs(nx);

  const detail::LinearizationPass pass =
      detail::run_linearization(spec, cur, workers, stats);

  // Directional second-order sensitivities dA/dy_k per stage.
  std::vector<std::vector<Eigen::MatrixXd>> da_dy(
      static_cast<std::size_t>(n),
      std::vector<Eigen::MatrixXd>(static_cast<std::size_t>(ny)));
  {
    detail::SectionTimer t(stats.time_integrator);
    parallel_for(n, workers, [&](int i) {
      const std::size_t si = static_cast<std::size_t>(i);
      for (int k = 0; k < ny; ++k) {
        Eigen::VectorXd dir = Eigen::VectorXd::Zero(ny);
        dir(k) = 1.0;
        da_dy[si][static_cast<std::size_t>(k)] =
            spec.model
                .sensitivity_directional(cur.mu[si], cur.u[si], dir)
                .leftCols(nx);
      }
    });
  }

  std::vector<StageData> stages(static_cast<std::size_t>(n));
  std::vector<Eigen::MatrixXd> cov_map(static_cast<std::size_t>(n));  // T_i
  std::vector<Eigen::MatrixXd> cov_jac_y(static_cast<std::size_t>(n));  // G_i
  std::vector<Eigen::VectorXd> cov_res(static_cast<std::size_t>(n));
  {
    detail::SectionTimer t(stats.time_prop_tight);
    for (int i = 0; i < n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      stages[si] = detail::compose_stage(spec, cur.mu[si], cur.u[si],
                                         cur.mu[si + 1], cur.p.sigmas[si],
                                         pass.dyn[si], pass.gp[si]);
      const Eigen::MatrixXd& a_tilde = stages[si].a_tilde;
      cov_map[si] = detail::sym_congruence_matrix(a_tilde, pairs);
      Eigen::MatrixXd g(ns, ny);
      for (int k = 0; k < ny; ++k) {
        const Eigen::MatrixXd& m = da_dy[si][static_cast<std::size_t>(k)];
        const Eigen::MatrixXd prod = m * cur.p.sigmas[si] * a_tilde.transpose();
        g.col(k) = detail::vech_sym(prod + prod.transpose(), pairs);
      }
      cov_jac_y[si] = std::move(g);
      const Eigen::MatrixXd noise =
          spec.b_mat * (stages[si].gp_var + spec.w_var).asDiagonal() *
          spec.b_mat.transpose();
      const Eigen::MatrixXd res = cur.p.sigmas[si + 1] -
                                  a_tilde * cur.p.sigmas[si] * a_tilde.transpose() -
                                  noise;
      cov_res[si] = detail::vech_sym(symmetrized(res), pairs);
    }
  }

  // Dense QP over z = (y_0..y_{N-1}, mu_N, vech Sigma_0 .. vech Sigma_N).
  qp::DenseQp dqp;
  {
    detail::SectionTimer t(stats.time_interface);
    const Eigen::Index y_dim = static_cast<Eigen::Index>(n) * ny + nx;
    const Eigen::Index z_dim = y_dim + static_cast<Eigen::Index>(n + 1) * ns;
    auto yoff = [&](int i) { return static_cast<Eigen::Index>(i) * ny; };
    auto poff = [&](int i) {
      return y_dim + static_cast<Eigen::Index>(i) * ns;
    };
    const Eigen::Index n_eq =
        static_cast<Eigen::Index>(n + 1) * nx + static_cast<Eigen::Index>(n + 1) * ns;
    dqp.hess = Eigen::MatrixXd::Zero(z_dim, z_dim);
    dqp.grad = Eigen::VectorXd::Zero(z_dim);
    dqp.eq_mat = Eigen::MatrixXd::Zero(n_eq, z_dim);
    dqp.eq_rhs = Eigen::VectorXd::Zero(n_eq);

    Eigen::Index eq_row = 0;
    // Initial mean.
    dqp.eq_mat.block(eq_row, 0, nx, nx).setIdentity();
    dqp.eq_rhs.segment(eq_row, nx) = spec.x_current - cur.mu[0];
    eq_row += nx;
    // Mean dynamics.
    for (int i = 0; i < n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      dqp.eq_mat.block(eq_row, yoff(i), nx, nx) = stages[si].a_tilde;
      dqp.eq_mat.block(eq_row, yoff(i) + nx, nx, nu) = stages[si].b_tilde;
      dqp.eq_mat.block(eq_row, yoff(i + 1), nx, nx) =
          -Eigen::MatrixXd::Identity(nx, nx);
      dqp.eq_rhs.segment(eq_row, nx) = -stages[si].residual;
      eq_row += nx;
    }
    // Initial covariance (Sigma_0 = 0).
    dqp.eq_mat.block(eq_row, poff(0), ns, ns).setIdentity();
    dqp.eq_rhs.segment(eq_row, ns) =
        -detail::vech_sym(cur.p.sigmas[0], pairs);
    eq_row += ns;
    // Covariance recursion, exact Jacobians.
    for (int i = 0; i < n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      dqp.eq_mat.block(eq_row, poff(i + 1), ns, ns).setIdentity();
      dqp.eq_mat.block(eq_row, poff(i), ns, ns) = -cov_map[si];
      dqp.eq_mat.block(eq_row, yoff(i), ns, ny) = -cov_jac_y[si];
      dqp.eq_rhs.segment(eq_row, ns) = -cov_res[si];
      eq_row += ns;
    }

    // Cost: tracking on means/inputs, nothing on covariances.
    for (int i = 0; i < n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      dqp.hess.block(yoff(i), yoff(i), nx, nx) = spec.weight_x;
      dqp.hess.block(yoff(i) + nx, yoff(i) + nx, nu, nu) = spec.weight_u;
      dqp.grad.segment(yoff(i), nx) = stages[si].grad_x;
      dqp.grad.segment(yoff(i) + nx, nu) = stages[si].grad_u;
    }
    dqp.hess.block(yoff(n), yoff(n), nx, nx) = spec.weight_term;
    dqp.grad.segment(yoff(n), nx) = spec.weight_term * (cur.mu.back() - spec.x_ref);

    // Inequalities: tightened rows with covariance coupling, input bounds.
    std::vector<Eigen::RowVectorXd> rows;
    std::vector<double> rhs;
    auto add_general_rows = [&](int i, const Eigen::VectorXd& mu_i,
                                const Eigen::VectorXd& u_i, bool state_rows) {
      for (const auto& c : spec.constraints) {
        const Eigen::RowVectorXd grad = c.gradient(mu_i, u_i);
        const bool input_part = detail::has_input_part(grad, nu);
        if (!state_rows && !input_part) continue;
        const double h = c.value(mu_i, u_i);
        const double alpha =
            c.prob >= 1.0 ? 0.0 : unc::tightening_factor(c.prob, c.mode);
        const Eigen::MatrixXd& sigma = cur.p.sigmas[static_cast<std::size_t>(i)];
        const Eigen::RowVectorXd cx = grad.head(nx);
        const double quad = std::max((cx * sigma * cx.transpose())(0, 0), 0.0);
        Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(z_dim);
        row.segment(yoff(i), nx) = cx;
        if (i < n) row.segment(yoff(i) + nx, nu) = grad.tail(nu);
        double backoff = 0.0;
        if (alpha > 0.0 && quad >= unc::kBackoffDegenerateTol) {
          backoff = alpha * std::sqrt(quad);
          // d backoff / d vech(Sigma) = alpha / (2 sqrt(q)) * dq/dvech
          const double coeff = alpha / (2.0 * std::sqrt(quad));
          for (std::size_t k = 0; k < pairs.size(); ++k) {
            const auto [ai, bi] = pairs[k];
            const double dq = ai == bi ? cx(ai) * cx(ai)
                                       : 2.0 * cx(ai) * cx(bi);
            row(poff(i) + static_cast<Eigen::Index>(k)) = coeff * dq;
          }
        }
        rows.push_back(row);
        rhs.push_back(-(h + backoff));
      }
    };
    for (int i = 0; i < n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      add_general_rows(i, cur.mu[si], cur.u[si], i > 0);
      std::vector<Eigen::RowVectorXd> bx, bu;
      std::vector<double> brhs;
      detail::append_bound_rows(spec, cur.u[si], bx, bu, brhs);
      for (std::size_t k = 0; k < brhs.size(); ++k) {
        Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(z_dim);
        row.segment(yoff(i), nx) = bx[k];
        row.segment(yoff(i) + nx, nu) = bu[k];
        rows.push_back(row);
        rhs.push_back(brhs[k]);
      }
    }
    add_general_rows(n, cur.mu.back(), Eigen::VectorXd::Zero(nu), true);

    dqp.ineq_mat.resize(static_cast<Eigen::Index>(rows.size()), z_dim);
    dqp.ineq_rhs.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      dqp.ineq_mat.row(static_cast<Eigen::Index>(r)) = rows[r];
      dqp.ineq_rhs(static_cast<Eigen::Index>(r)) = rhs[r];
    }
  }

  qp::DenseQpSolution sol;
  {
    detail::SectionTimer t(stats.time_qp);
    sol = dense_solver.solve(dqp);
  }
  if (sol.status == qp::QpStatus::infeasible)
    throw NumericalError("naive_iteration: covariance-augmented QP infeasible");

  Iterate next;
  {
    detail::SectionTimer t(stats.time_interface);
    const Eigen::Index y_dim = static_cast<Eigen::Index>(n) * ny + nx;
    next.mu.resize(static_cast<std::size_t>(n) + 1);
    next.u.resize(static_cast<std::size_t>(n));
    next.p.sigmas.resize(static_cast<std::size_t>(n) + 1);
    double step = 0.0;
    for (int i = 0; i <= n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      const Eigen::Index yo = static_cast<Eigen::Index>(i) * ny;
      next.mu[si] = cur.mu[si] + sol.z.segment(yo, nx);
      step = std::max(step, sol.z.segment(yo, nx).lpNorm<Eigen::Infinity>());
      if (i < n) {
        next.u[si] = cur.u[si] + sol.z.segment(yo + nx, nu);
        step = std::max(step, sol.z.segment(yo + nx, nu).lpNorm<Eigen::Infinity>());
      }
      next.p.sigmas[si] =
          cur.p.sigmas[si] +
          detail::unvech_sym(
              sol.z.segment(y_dim + static_cast<Eigen::Index>(i) * ns, ns), nx,
              pairs);
    }
    next.step_norm = step;
    next.iteration = cur.iteration + 1;
  }
  double dyn_res = 0.0;
  for (const auto& st : stages)
    dyn_res = std::max(dyn_res, st.residual.lpNorm<Eigen::Infinity>());
  stats.dyn_residuals.push_back(dyn_res);
  return next;
}

namespace detail {

template <typename StepFn>
std::pair<Iterate, SolverStats> run_sqp(const OcpSpec& spec, Iterate it,
                                        const SolverOptions& opts,
                                        StepFn&& step_fn) {
  SolverStats stats;
  const auto t0 = std::chrono::steady_clock::now();
  for (int k = 0; k < opts.max_iter; ++k) {
    const auto it_start = std::chrono::steady_clock::now();
    it = step_fn(it, stats);
    stats.iter_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - it_start)
            .count());
    stats.step_norms.push_back(it.step_norm);
    stats.iterations = k + 1;
    if (!opts.force_iterations && it.step_norm <= opts.tol_step) {
      stats.converged = true;
      break;
    }
  }
  if (opts.force_iterations)
    stats.converged = it.step_norm <= opts.tol_step;
  stats.time_total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(it), std::move(stats)};
}

}  // namespace detail

/// Zero-order SQP loop: iterate zero_order_iteration until the y step drops
/// below tol_step or max_iter is hit. Non-convergence is reported through
/// stats.converged, not as an error.
inline std::pair<Iterate, SolverStats> solve_zero_order(
    const OcpSpec& spec, std::optional<Iterate> init = std::nullopt,
    const SolverOptions& opts = {}) {
  Iterate it = init ? std::move(*init) : make_initial_guess(spec);
  return detail::run_sqp(spec, std::move(it), opts,
                         [&](const Iterate& cur, SolverStats& stats) {
                           return zero_order_iteration(spec, cur, opts, stats);
                         });
}

/// Exact SQP loop on the covariance-augmented problem (GP prior only).
inline std::pair<Iterate, SolverStats> solve_naive(
    const OcpSpec& spec, std::optional<Iterate> init = std::nullopt,
    const SolverOptions& opts = {}) {
  Iterate it = init ? std::move(*init) : make_initial_guess(spec);
  // A zero covariance guess leaves every backoff at its degenerate value;
  // seed the covariance trajectory by one propagation instead.
  bool all_zero = true;
  for (const auto& s : it.p.sigmas)
    if (s.lpNorm<Eigen::Infinity>() > 0.0) all_zero = false;
  if (all_zero) {
    SolverStats scratch;
    std::vector<unc::StageLinearization> lins;
    const detail::LinearizationPass pass =
        detail::run_linearization(spec, it, resolve_workers(opts.workers), scratch);
    for (int i = 0; i < spec.horizon; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      unc::StageLinearization sl;
      sl.a_tilde = pass.dyn[si].dpsi_dx +
                   spec.b_mat * pass.gp[si].jac.leftCols(spec.nx);
      sl.b_mat = spec.b_mat;
      sl.gp_var = pass.gp[si].var;
      sl.w_var = spec.w_var;
      lins.push_back(std::move(sl));
    }
    it.p = unc::propagate_covariances(lins,
                                      Eigen::MatrixXd::Zero(spec.nx, spec.nx));
  }
  qp::DenseKktSolver dense_solver(opts.dense_settings);
  return detail::run_sqp(spec, std::move(it), opts,
                         [&](const Iterate& cur, SolverStats& stats) {
                           return naive_iteration(spec, cur, opts, stats,
                                                  dense_solver);
                         });
}

/// The previous-iterate covariance heuristic: tighten against a frozen
/// covariance trajectory and never re-propagate. Converged points generally
/// violate the covariance equation, which is what the zero-order scheme
/// fixes; kept for the comparison experiments.
inline std::pair<Iterate, SolverStats> solve_with_frozen_covariance(
    const OcpSpec& spec, const unc::CovarianceTrajectory& frozen,
    std::optional<Iterate> init = std::nullopt, const SolverOptions& opts = {}) {
  Iterate it = init ? std::move(*init) : make_initial_guess(spec);
  it.p = frozen;
  return detail::run_sqp(
      spec, std::move(it), opts, [&](const Iterate& cur, SolverStats& stats) {
        const int n = spec.horizon;
        const int workers = resolve_workers(opts.workers);
        const detail::LinearizationPass pass =
            detail::run_linearization(spec, cur, workers, stats);
        std::vector<StageData> stages(static_cast<std::size_t>(n));
        {
          detail::SectionTimer t(stats.time_prop_tight);
          for (int i = 0; i < n; ++i) {
            const std::size_t si = static_cast<std::size_t>(i);
            stages[si] = detail::compose_stage(spec, cur.mu[si], cur.u[si],
                                               cur.mu[si + 1], frozen.sigmas[si],
                                               pass.dyn[si], pass.gp[si]);
          }
        }
        qp::OcpQp ocp_qp;
        {
          detail::SectionTimer t(stats.time_interface);
          ocp_qp.stages.resize(static_cast<std::size_t>(n));
          for (int i = 0; i < n; ++i) {
            const std::size_t si = static_cast<std::size_t>(i);
            qp::QpStage& qs = ocp_qp.stages[si];
            qs.hess_xx = spec.weight_x;
            qs.hess_uu = spec.weight_u;
            qs.hess_xu = Eigen::MatrixXd::Zero(spec.nx, spec.nu);
            qs.grad_x = stages[si].grad_x;
            qs.grad_u = stages[si].grad_u;
            qs.dyn_a = stages[si].a_tilde;
            qs.dyn_b = stages[si].b_tilde;
            qs.dyn_offset = stages[si].residual;
            std::vector<Eigen::RowVectorXd> rows_x, rows_u;
            std::vector<double> rhs;
            for (const auto& tc : stages[si].tightened) {
              if (i == 0 && !detail::has_input_part(tc.row, spec.nu)) continue;
              rows_x.push_back(tc.row.head(spec.nx));
              rows_u.push_back(tc.row.tail(spec.nu));
              rhs.push_back(-(tc.offset + tc.backoff));
            }
            detail::append_bound_rows(spec, cur.u[si], rows_x, rows_u, rhs);
            const Eigen::Index m = static_cast<Eigen::Index>(rhs.size());
            qs.ineq_x.resize(m, spec.nx);
            qs.ineq_u.resize(m, spec.nu);
            qs.ineq_ub.resize(m);
            for (Eigen::Index r = 0; r < m; ++r) {
              qs.ineq_x.row(r) = rows_x[static_cast<std::size_t>(r)];
              qs.ineq_u.row(r) = rows_u[static_cast<std::size_t>(r)];
              qs.ineq_ub(r) = rhs[static_cast<std::size_t>(r)];
            }
          }
          ocp_qp.hess_term = spec.weight_term;
          ocp_qp.grad_term = spec.weight_term * (cur.mu.back() - spec.x_ref);
          std::vector<Eigen::RowVectorXd> rows_x;
          std::vector<double> rhs;
          for (const auto& c : spec.constraints) {
            const Eigen::RowVectorXd g =
                c.gradient(cur.mu.back(), Eigen::VectorXd::Zero(spec.nu));
            if (detail::has_input_part(g, spec.nu)) continue;
            const double h = c.value(cur.mu.back(), Eigen::VectorXd::Zero(spec.nu));
            const double alpha =
                c.prob >= 1.0 ? 0.0 : unc::tightening_factor(c.prob, c.mode);
            const unc::TightenedConstraint tc =
                unc::tighten(h, g, frozen.sigmas.back(), alpha, c.prob);
            rows_x.push_back(tc.row.head(spec.nx));
            rhs.push_back(-(tc.offset + tc.backoff));
          }
          ocp_qp.ineq_term_x.resize(static_cast<Eigen::Index>(rhs.size()), spec.nx);
          ocp_qp.ineq_term_ub.resize(static_cast<Eigen::Index>(rhs.size()));
          for (std::size_t r = 0; r < rhs.size(); ++r) {
            ocp_qp.ineq_term_x.row(static_cast<Eigen::Index>(r)) = rows_x[r];
            ocp_qp.ineq_term_ub(static_cast<Eigen::Index>(r)) = rhs[r];
          }
          ocp_qp.x0 = spec.x_current - cur.mu[0];
        }
        qp::QpSolution sol;
        {
          detail::SectionTimer t(stats.time_qp);
          qp::RiccatiIpSolver solver(opts.qp_settings);
          sol = solver.solve(ocp_qp);
        }
        if (sol.status == qp::QpStatus::infeasible)
          throw QpFailure("frozen-covariance iteration: QP infeasible",
                          std::move(ocp_qp), sol.status);
        Iterate next = cur;
        double step = 0.0;
        for (int i = 0; i <= n; ++i) {
          const std::size_t si = static_cast<std::size_t>(i);
          next.mu[si] += sol.dx[si];
          step = std::max(step, sol.dx[si].lpNorm<Eigen::Infinity>());
          if (i < n) {
            next.u[si] += sol.du[si];
            step = std::max(step, sol.du[si].lpNorm<Eigen::Infinity>());
          }
        }
        next.step_norm = step;
        next.iteration = cur.iteration + 1;
        return next;
      });
}

/// Infinity-norm residuals of the deterministic OCP at (y, P): mean
/// dynamics, covariance recursion, tightened inequalities (violation only),
/// initial mean, initial covariance.
struct FeasibilityReport {
  double mean_dynamics = 0.0;
  double covariance = 0.0;
  double inequality = 0.0;
  double initial_state = 0.0;
  double initial_covariance = 0.0;

  double max_residual() const {
    return std::max({mean_dynamics, covariance, inequality, initial_state,
                     initial_covariance});
  }
};

inline FeasibilityReport check_feasibility(const OcpSpec& spec, const Iterate& it) {
  spec.validate();
  FeasibilityReport rep;
  const int n = spec.horizon;
  rep.initial_state = (it.mu[0] - spec.x_current).lpNorm<Eigen::Infinity>();
  rep.initial_covariance = it.p.sigmas[0].lpNorm<Eigen::Infinity>();
  for (int i = 0; i < n; ++i) {
    const std::size_t si = static_cast<std::size_t>(i);
    const detail::GpEval gpe = detail::eval_gp(spec, it.mu[si], it.u[si]);
    const Eigen::VectorXd next =
        spec.model.step(it.mu[si], it.u[si]) + spec.b_mat * gpe.mean;
    rep.mean_dynamics = std::max(
        rep.mean_dynamics, (next - it.mu[si + 1]).lpNorm<Eigen::Infinity>());
    Eigen::MatrixXd dpsi_dx, dpsi_du;
    spec.model.sensitivities(it.mu[si], it.u[si], dpsi_dx, dpsi_du);
    const Eigen::MatrixXd a_tilde =
        dpsi_dx + spec.b_mat * gpe.jac.leftCols(spec.nx);
    const Eigen::MatrixXd pred =
        a_tilde * it.p.sigmas[si] * a_tilde.transpose() +
        spec.b_mat * (gpe.var + spec.w_var).asDiagonal() * spec.b_mat.transpose();
    rep.covariance = std::max(
        rep.covariance, (it.p.sigmas[si + 1] - pred).lpNorm<Eigen::Infinity>());
    for (const auto& c : spec.constraints) {
      const Eigen::RowVectorXd g = c.gradient(it.mu[si], it.u[si]);
      if (i == 0 && !detail::has_input_part(g, spec.nu)) continue;
      const double h = c.value(it.mu[si], it.u[si]);
      const double alpha =
          c.prob >= 1.0 ? 0.0 : unc::tightening_factor(c.prob, c.mode);
      const unc::TightenedConstraint tc =
          unc::tighten(h, g, it.p.sigmas[si], alpha, c.prob);
      rep.inequality = std::max(rep.inequality, tc.tightened_value());
    }
    for (int k = 0; k < spec.nu; ++k) {
      if (std::isfinite(spec.input_bounds.upper(k)))
        rep.inequality =
            std::max(rep.inequality, it.u[si](k) - spec.input_bounds.upper(k));
      if (std::isfinite(spec.input_bounds.lower(k)))
        rep.inequality =
            std::max(rep.inequality, spec.input_bounds.lower(k) - it.u[si](k));
    }
  }
  for (const auto& c : spec.constraints) {
    const Eigen::RowVectorXd g =
        c.gradient(it.mu.back(), Eigen::VectorXd::Zero(spec.nu));
    if (detail::has_input_part(g, spec.nu)) continue;
    const double h = c.value(it.mu.back(), Eigen::VectorXd::Zero(spec.nu));
    const double alpha =
        c.prob >= 1.0 ? 0.0 : unc::tightening_factor(c.prob, c.mode);
    const unc::TightenedConstraint tc =
        unc::tighten(h, g, it.p.sigmas.back(), alpha, c.prob);
    rep.inequality = std::max(rep.inequality, tc.tightened_value());
  }
  rep.inequality = std::max(rep.inequality, 0.0);
  return rep;
}

/// Contraction diagnostics from recorded step norms: distances to the final
/// iterate are proxied by remaining path length, and kappa is the largest
/// successive-distance ratio over the convergence tail (last 5 ratios).
struct ContractionReport {
  std::vector<double> ratios;
  double kappa_estimate = 0.0;
};

inline ContractionReport measure_contraction(const std::vector<double>& step_norms) {
  if (step_norms.size() < 3)
    throw std::invalid_argument("measure_contraction: need at least 3 recorded steps");
  const std::size_t n = step_norms.size();
  std::vector<double> dist(n + 1, 0.0);
  for (std::size_t k = n; k-- > 0;) dist[k] = dist[k + 1] + step_norms[k];
  ContractionReport rep;
  for (std::size_t k = 0; k + 2 <= n; ++k) {
    if (dist[k] > 0.0 && dist[k + 1] > 0.0)
      rep.ratios.push_back(dist[k + 1] / dist[k]);
  }
  if (rep.ratios.empty()) {
    rep.kappa_estimate = 0.0;
    return rep;
  }
  const std::size_t tail = std::min<std::size_t>(5, rep.ratios.size());
  rep.kappa_estimate = 0.0;
  for (std::size_t k = rep.ratios.size() - tail; k < rep.ratios.size(); ++k)
    rep.kappa_estimate = std::max(rep.kappa_estimate, rep.ratios[k]);
  return rep;
}

/// Spectral-norm estimate of d/dy [A(y) P + b(y)] at (y, P): the Jacobian is
/// formed by central finite differences of the vectorized covariance system
/// (step 1e-6, magnitude-scaled), its norm estimated by 20 power-iteration
/// steps on J^T J.
inline double jacobian_error_norm(const OcpSpec& spec, const Iterate& it) {
  spec.validate();
  const int n = spec.horizon;
  const int ny = spec.nx + spec.nu;
  const Eigen::VectorXd p_vec = it.p.vectorized();

  auto system_residual = [&](const std::vector<Eigen::VectorXd>& mu,
                             const std::vector<Eigen::VectorXd>& u) {
    std::vector<unc::StageLinearization> lins(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      Eigen::MatrixXd dpsi_dx, dpsi_du;
      spec.model.sensitivities(mu[si], u[si], dpsi_dx, dpsi_du);
      const detail::GpEval gpe = detail::eval_gp(spec, mu[si], u[si]);
      unc::StageLinearization sl;
      sl.a_tilde = dpsi_dx + spec.b_mat * gpe.jac.leftCols(spec.nx);
      sl.b_mat = spec.b_mat;
      sl.gp_var = gpe.var;
      sl.w_var = spec.w_var;
      lins[si] = std::move(sl);
    }
    const unc::VectorizedSystem sys = unc::build_vectorized_system(lins);
    Eigen::VectorXd g = sys.b_vec;
    const Eigen::Index n2 = sys.a_mat.block_dim;
    g.head(n2) += p_vec.head(n2);
    for (std::size_t i = 0; i < sys.a_mat.sub.size(); ++i) {
      const Eigen::Index row = (static_cast<Eigen::Index>(i) + 1) * n2;
      g.segment(row, n2) += p_vec.segment(row, n2) +
                            sys.a_mat.sub[i] * p_vec.segment(row - n2, n2);
    }
    return g;
  };

  const Eigen::Index n_y = static_cast<Eigen::Index>(n) * ny;
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(n + 1) * spec.nx * spec.nx, n_y);
  std::vector<Eigen::VectorXd> mu = it.mu;
  std::vector<Eigen::VectorXd> u = it.u;
  for (Eigen::Index k = 0; k < n_y; ++k) {
    const int stage = static_cast<int>(k / ny);
    const int local = static_cast<int>(k % ny);
    double* slot = local < spec.nx
                       ? &mu[static_cast<std::size_t>(stage)](local)
                       : &u[static_cast<std::size_t>(stage)](local - spec.nx);
    const double base = *slot;
    const double h = 1e-6 * std::max(1.0, std::abs(base));
    *slot = base + h;
    const Eigen::VectorXd gp = system_residual(mu, u);
    *slot = base - h;
    const Eigen::VectorXd gm = system_residual(mu, u);
    *slot = base;
    jac.col(k) = (gp - gm) / (2.0 * h);
  }

  Eigen::VectorXd v = Eigen::VectorXd::Ones(n_y).normalized();
  double norm_estimate = 0.0;
  for (int step = 0; step < 20; ++step) {
    Eigen::VectorXd w = jac.transpose() * (jac * v);
    const double wn = w.norm();
    if (wn == 0.0) return 0.0;
    v = w / wn;
    norm_estimate = std::sqrt(wn);
  }
  return norm_estimate;
}

}  // namespace zogp::sqp
