#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "zogp/common.hpp"
#include "zogp/ocp_qp.hpp"

namespace zogp::qp {

struct IpSettings {
  double tol = 1e-8;               // KKT residual and duality-gap target
  int max_iter = 100;
  double mu0 = 10.0;               // initial complementarity level
  double frac_to_boundary = 0.995;
};

namespace detail {

/// Backward Riccati factorization of the equality-constrained stage system.
/// Depends on the (possibly barrier-augmented) Hessian blocks only, so one
/// factorization serves the predictor and the corrector right-hand sides.
/// Buffers are reused across calls of matching dimensions.
struct RiccatiFactor {
  std::vector<Eigen::MatrixXd> cost_to_go;          // P_i, i = 0..N
  std::vector<Eigen::LLT<Eigen::MatrixXd>> g_chol;  // R + B^T P B per stage
  std::vector<Eigen::MatrixXd> gain;                // K_i = -G^-1 H
  std::vector<Eigen::MatrixXd> h_mat;               // H = S^T + B^T P A
  // scratch
  Eigen::MatrixXd pa, pb, g;

  void resize(int horizon) {
    cost_to_go.resize(static_cast<std::size_t>(horizon) + 1);
    g_chol.resize(static_cast<std::size_t>(horizon));
    gain.resize(static_cast<std::size_t>(horizon));
    h_mat.resize(static_cast<std::size_t>(horizon));
  }
};

struct StageRhs {
  std::vector<Eigen::VectorXd> grad_x;  // N+1 entries (terminal last)
  std::vector<Eigen::VectorXd> grad_u;  // N
  std::vector<Eigen::VectorXd> offset;  // N dynamics offsets
  Eigen::VectorXd x0;                   // fixed initial value

  void resize(int horizon) {
    grad_x.resize(static_cast<std::size_t>(horizon) + 1);
    grad_u.resize(static_cast<std::size_t>(horizon));
    offset.resize(static_cast<std::size_t>(horizon));
  }
};

struct StageDirection {
  std::vector<Eigen::VectorXd> dx;   // N+1
  std::vector<Eigen::VectorXd> du;   // N
  std::vector<Eigen::VectorXd> dpi;  // N+1 (costates; index 0 = initial row)
  // scratch
  std::vector<Eigen::VectorXd> p_vec, ff;

  void resize(int horizon) {
    dx.resize(static_cast<std::size_t>(horizon) + 1);
    du.resize(static_cast<std::size_t>(horizon));
    dpi.resize(static_cast<std::size_t>(horizon) + 1);
    p_vec.resize(static_cast<std::size_t>(horizon) + 1);
    ff.resize(static_cast<std::size_t>(horizon));
  }
};

inline void riccati_factorize(const OcpQp& qp,
                              const std::vector<Eigen::MatrixXd>& q_bar,
                              const std::vector<Eigen::MatrixXd>& r_bar,
                              const std::vector<Eigen::MatrixXd>& s_bar,
                              const Eigen::MatrixXd& q_term, RiccatiFactor& f) {
  const int horizon = qp.horizon();
  f.resize(horizon);
  f.cost_to_go[static_cast<std::size_t>(horizon)] = symmetrized(q_term);
  for (int i = horizon - 1; i >= 0; --i) {
    const std::size_t si = static_cast<std::size_t>(i);
    const auto& st = qp.stages[si];
    const Eigen::MatrixXd& p_next = f.cost_to_go[si + 1];
    f.pb.noalias() = p_next * st.dyn_b;
    f.pa.noalias() = p_next * st.dyn_a;
    f.g = r_bar[si];
    f.g.noalias() += st.dyn_b.transpose() * f.pb;
    symmetrize(f.g);
    auto& chol = f.g_chol[si];
    chol.compute(f.g);
    if (chol.info() != Eigen::Success) {
      // Extreme barrier scalings can push the block to numerical
      // indefiniteness; escalate a small ridge before giving up.
      const double scale = std::max(1.0, f.g.diagonal().cwiseAbs().maxCoeff());
      bool fixed = false;
      for (double ridge = 1e-13 * scale; ridge <= 1e-5 * scale; ridge *= 100.0) {
        Eigen::MatrixXd shifted = f.g;
        shifted.diagonal().array() += ridge;
        chol.compute(shifted);
        if (chol.info() == Eigen::Success) {
          fixed = true;
          break;
        }
      }
      if (!fixed)
        throw NumericalError("riccati: input-Hessian block not positive definite");
    }
    f.h_mat[si] = s_bar[si].transpose();
    f.h_mat[si].noalias() += st.dyn_b.transpose() * f.pa;
    f.gain[si] = f.h_mat[si];
    chol.solveInPlace(f.gain[si]);
    f.gain[si] = -f.gain[si];
    Eigen::MatrixXd& p = f.cost_to_go[si];
    p = q_bar[si];
    p.noalias() += st.dyn_a.transpose() * f.pa;
    p.noalias() += f.h_mat[si].transpose() * f.gain[si];
    symmetrize(p);
  }
}

inline void riccati_solve(const OcpQp& qp, RiccatiFactor& f, const StageRhs& rhs,
                          StageDirection& dir) {
  const int horizon = qp.horizon();
  dir.resize(horizon);
  dir.p_vec[static_cast<std::size_t>(horizon)] =
      rhs.grad_x[static_cast<std::size_t>(horizon)];
  Eigen::VectorXd w;
  for (int i = horizon - 1; i >= 0; --i) {
    const std::size_t si = static_cast<std::size_t>(i);
    const auto& st = qp.stages[si];
    w = dir.p_vec[si + 1];
    w.noalias() += f.cost_to_go[si + 1] * rhs.offset[si];
    Eigen::VectorXd& gu = dir.ff[si];
    gu = rhs.grad_u[si];
    gu.noalias() += st.dyn_b.transpose() * w;
    f.g_chol[si].solveInPlace(gu);
    gu = -gu;
    dir.p_vec[si] = rhs.grad_x[si];
    dir.p_vec[si].noalias() += st.dyn_a.transpose() * w;
    dir.p_vec[si].noalias() += f.h_mat[si].transpose() * gu;
  }
  dir.dx[0] = rhs.x0;
  dir.dpi[0] = dir.p_vec[0];
  dir.dpi[0].noalias() += f.cost_to_go[0] * dir.dx[0];
  for (int i = 0; i < horizon; ++i) {
    const std::size_t si = static_cast<std::size_t>(i);
    const auto& st = qp.stages[si];
    dir.du[si] = dir.ff[si];
    dir.du[si].noalias() += f.gain[si] * dir.dx[si];
    dir.dx[si + 1] = rhs.offset[si];
    dir.dx[si + 1].noalias() += st.dyn_a * dir.dx[si];
    dir.dx[si + 1].noalias() += st.dyn_b * dir.du[si];
    dir.dpi[si + 1] = dir.p_vec[si + 1];
    dir.dpi[si + 1].noalias() += f.cost_to_go[si + 1] * dir.dx[si + 1];
  }
}

inline double max_step_to_boundary(const Eigen::VectorXd& v,
                                   const Eigen::VectorXd& dv, double tau) {
  double alpha = 1.0;
  for (Eigen::Index k = 0; k < v.size(); ++k)
    if (dv(k) < 0.0) alpha = std::min(alpha, -tau * v(k) / dv(k));
  return alpha;
}

}  // namespace detail

/// OCP-structured convex QP solver: primal-dual interior point with a
/// Mehrotra predictor-corrector, every Newton step factorized by one
/// backward Riccati sweep (O(N (nx+nu)^3) per iteration). Instances own
/// mutable workspace; use one instance per concurrent solve.
class RiccatiIpSolver {
 public:
  explicit RiccatiIpSolver(IpSettings settings = {}) : settings_(settings) {}

  QpSolution solve(const OcpQp& qp) {
    qp.validate();
    const int horizon = qp.horizon();
    const int n = qp.nx();
    const int nu = qp.nu();
    const std::size_t sn = static_cast<std::size_t>(horizon);

    // Inequality bookkeeping: stage index N holds the terminal rows.
    cx_.assign(sn + 1, Eigen::MatrixXd());
    cu_.assign(sn + 1, Eigen::MatrixXd());
    ub_.assign(sn + 1, Eigen::VectorXd());
    Eigen::Index m_total = 0;
    for (int i = 0; i < horizon; ++i) {
      const auto& st = qp.stages[static_cast<std::size_t>(i)];
      cx_[static_cast<std::size_t>(i)] = st.ineq_x;
      cu_[static_cast<std::size_t>(i)] = st.ineq_u;
      ub_[static_cast<std::size_t>(i)] = st.ineq_ub;
      m_total += st.ineq_count();
    }
    cx_[sn] = qp.ineq_term_x;
    cu_[sn] = Eigen::MatrixXd::Zero(qp.ineq_term_ub.size(), nu);
    ub_[sn] = qp.ineq_term_ub;
    m_total += qp.ineq_term_ub.size();

    if (m_total == 0) return solve_equality(qp);

    // Primal roll-in with zero inputs; slacks opened to at least mu0.
    std::vector<Eigen::VectorXd> x(sn + 1);
    std::vector<Eigen::VectorXd> u(sn, Eigen::VectorXd::Zero(nu));
    std::vector<Eigen::VectorXd> pi(sn + 1, Eigen::VectorXd::Zero(n));
    x[0] = qp.x0;
    for (int i = 0; i < horizon; ++i) {
      const auto& st = qp.stages[static_cast<std::size_t>(i)];
      x[static_cast<std::size_t>(i) + 1] =
          st.dyn_a * x[static_cast<std::size_t>(i)] + st.dyn_offset;
    }
    std::vector<Eigen::VectorXd> slack(sn + 1);
    std::vector<Eigen::VectorXd> lam(sn + 1);
    for (std::size_t i = 0; i <= sn; ++i) {
      const Eigen::Index mi = ub_[i].size();
      if (mi == 0) {
        slack[i].resize(0);
        lam[i].resize(0);
        continue;
      }
      Eigen::VectorXd margin = ub_[i] - cx_[i] * x[i];
      if (i < sn) margin -= cu_[i] * u[i];
      slack[i] = margin.cwiseMax(settings_.mu0);
      lam[i] = Eigen::VectorXd::Ones(mi);
    }

    std::vector<Eigen::MatrixXd> q_bar(sn), r_bar(sn), s_bar(sn);
    std::vector<Eigen::VectorXd> r_stat_x(sn + 1), r_stat_u(sn), r_dyn(sn);
    std::vector<Eigen::VectorXd> r_ineq(sn + 1), r_comp(sn + 1);
    std::vector<Eigen::VectorXd> dslack_aff(sn + 1), dlam_aff(sn + 1);
    std::vector<Eigen::VectorXd> dslack(sn + 1), dlam(sn + 1);
    dscale_.assign(sn + 1, Eigen::VectorXd());
    cdz_.assign(sn + 1, Eigen::VectorXd());
    vtmp_.assign(sn + 1, Eigen::VectorXd());
    detail::RiccatiFactor factor;
    detail::StageRhs rhs;
    detail::StageDirection aff, dir;
    rhs.resize(horizon);
    Eigen::MatrixXd q_term;

    QpSolution sol;
    const double tau = settings_.frac_to_boundary;
    for (int iter = 0; iter < settings_.max_iter; ++iter) {
      // --- residuals ---------------------------------------------------
      double res_stat = 0.0, res_eq = 0.0, res_in = 0.0;
      double mu = 0.0;
      for (std::size_t si = 0; si <= sn; ++si) {
        if (si < sn) {
          const auto& st = qp.stages[si];
          r_stat_x[si] = st.grad_x - pi[si];
          r_stat_x[si].noalias() += st.hess_xx * x[si];
          r_stat_x[si].noalias() += st.hess_xu * u[si];
          r_stat_x[si].noalias() += st.dyn_a.transpose() * pi[si + 1];
          r_stat_u[si] = st.grad_u;
          r_stat_u[si].noalias() += st.hess_xu.transpose() * x[si];
          r_stat_u[si].noalias() += st.hess_uu * u[si];
          r_stat_u[si].noalias() += st.dyn_b.transpose() * pi[si + 1];
          if (ub_[si].size() > 0) {
            r_stat_x[si].noalias() += cx_[si].transpose() * lam[si];
            r_stat_u[si].noalias() += cu_[si].transpose() * lam[si];
          }
          r_dyn[si] = st.dyn_offset - x[si + 1];
          r_dyn[si].noalias() += st.dyn_a * x[si];
          r_dyn[si].noalias() += st.dyn_b * u[si];
          res_eq = std::max(res_eq, r_dyn[si].lpNorm<Eigen::Infinity>());
          res_stat = std::max(res_stat, r_stat_u[si].lpNorm<Eigen::Infinity>());
        } else {
          r_stat_x[si] = qp.grad_term - pi[si];
          r_stat_x[si].noalias() += qp.hess_term * x[si];
          if (ub_[si].size() > 0)
            r_stat_x[si].noalias() += cx_[si].transpose() * lam[si];
        }
        res_stat = std::max(res_stat, r_stat_x[si].lpNorm<Eigen::Infinity>());
        if (ub_[si].size() > 0) {
          r_ineq[si] = slack[si] - ub_[si];
          r_ineq[si].noalias() += cx_[si] * x[si];
          if (si < sn) r_ineq[si].noalias() += cu_[si] * u[si];
          res_in = std::max(res_in, r_ineq[si].lpNorm<Eigen::Infinity>());
          mu += slack[si].dot(lam[si]);
        } else {
          r_ineq[si].resize(0);
        }
      }
      res_eq = std::max(res_eq, (qp.x0 - x[0]).lpNorm<Eigen::Infinity>());
      mu /= static_cast<double>(m_total);

      sol.kkt_residual = std::max({res_stat, res_eq, res_in, mu});
      sol.iterations = iter;
      if (sol.kkt_residual <= settings_.tol) {
        sol.status = QpStatus::optimal;
        break;
      }
      if (iter == settings_.max_iter - 1) {
        sol.status = QpStatus::max_iter;
        break;
      }
      double max_lam = 0.0;
      for (std::size_t si = 0; si <= sn; ++si)
        if (lam[si].size() > 0)
          max_lam = std::max(max_lam, lam[si].lpNorm<Eigen::Infinity>());
      if (max_lam > 1e10 && std::max(res_eq, res_in) > settings_.tol) {
        sol.status = QpStatus::infeasible;
        break;
      }

      // --- barrier-augmented Hessian and its Riccati factorization -----
      for (std::size_t si = 0; si < sn; ++si) {
        const auto& st = qp.stages[si];
        q_bar[si] = st.hess_xx;
        r_bar[si] = st.hess_uu;
        s_bar[si] = st.hess_xu;
        if (ub_[si].size() > 0) {
          dscale_[si] = lam[si].cwiseQuotient(slack[si]);
          dcx_.noalias() = dscale_[si].asDiagonal() * cx_[si];
          dcu_.noalias() = dscale_[si].asDiagonal() * cu_[si];
          q_bar[si].noalias() += cx_[si].transpose() * dcx_;
          r_bar[si].noalias() += cu_[si].transpose() * dcu_;
          s_bar[si].noalias() += cx_[si].transpose() * dcu_;
        }
      }
      q_term = qp.hess_term;
      if (ub_[sn].size() > 0) {
        dscale_[sn] = lam[sn].cwiseQuotient(slack[sn]);
        dcx_.noalias() = dscale_[sn].asDiagonal() * cx_[sn];
        q_term.noalias() += cx_[sn].transpose() * dcx_;
      }
      try {
        detail::riccati_factorize(qp, q_bar, r_bar, s_bar, q_term, factor);
      } catch (const NumericalError&) {
        // Barrier scaling beyond what the factorization can support: stop
        // at the best iterate instead of failing the solve.
        sol.status = QpStatus::max_iter;
        break;
      }

      auto assemble_rhs = [&](const std::vector<Eigen::VectorXd>& comp) {
        rhs.x0 = qp.x0 - x[0];
        for (std::size_t si = 0; si <= sn; ++si) {
          rhs.grad_x[si] = r_stat_x[si];
          if (si < sn) {
            rhs.grad_u[si] = r_stat_u[si];
            rhs.offset[si] = r_dyn[si];
          }
          if (ub_[si].size() > 0) {
            vtmp_[si] = (lam[si].cwiseProduct(r_ineq[si]) - comp[si])
                            .cwiseQuotient(slack[si]);
            rhs.grad_x[si].noalias() += cx_[si].transpose() * vtmp_[si];
            if (si < sn)
              rhs.grad_u[si].noalias() += cu_[si].transpose() * vtmp_[si];
          }
        }
      };
      auto recover_ineq = [&](const detail::StageDirection& d,
                              const std::vector<Eigen::VectorXd>& comp,
                              std::vector<Eigen::VectorXd>& ds,
                              std::vector<Eigen::VectorXd>& dl) {
        for (std::size_t si = 0; si <= sn; ++si) {
          if (ub_[si].size() == 0) {
            ds[si].resize(0);
            dl[si].resize(0);
            continue;
          }
          cdz_[si].noalias() = cx_[si] * d.dx[si];
          if (si < sn) cdz_[si].noalias() += cu_[si] * d.du[si];
          ds[si] = -r_ineq[si] - cdz_[si];
          dl[si] = ((cdz_[si] + r_ineq[si]).cwiseProduct(lam[si]) - comp[si])
                       .cwiseQuotient(slack[si]);
        }
      };

      // Predictor (affine scaling) direction.
      for (std::size_t si = 0; si <= sn; ++si)
        r_comp[si] = slack[si].cwiseProduct(lam[si]);
      assemble_rhs(r_comp);
      detail::riccati_solve(qp, factor, rhs, aff);
      recover_ineq(aff, r_comp, dslack_aff, dlam_aff);

      double alpha_aff_p = 1.0, alpha_aff_d = 1.0;
      for (std::size_t si = 0; si <= sn; ++si) {
        if (ub_[si].size() == 0) continue;
        alpha_aff_p = std::min(
            alpha_aff_p, detail::max_step_to_boundary(slack[si], dslack_aff[si], 1.0));
        alpha_aff_d = std::min(
            alpha_aff_d, detail::max_step_to_boundary(lam[si], dlam_aff[si], 1.0));
      }
      double mu_aff = 0.0;
      for (std::size_t si = 0; si <= sn; ++si) {
        if (ub_[si].size() == 0) continue;
        mu_aff += (slack[si] + alpha_aff_p * dslack_aff[si])
                      .dot(lam[si] + alpha_aff_d * dlam_aff[si]);
      }
      mu_aff /= static_cast<double>(m_total);
      const double sigma = std::pow(std::max(mu_aff, 0.0) / mu, 3.0);

      // Corrector direction (reuses the factorization).
      for (std::size_t si = 0; si <= sn; ++si) {
        if (ub_[si].size() == 0) continue;
        r_comp[si] = slack[si].cwiseProduct(lam[si]) +
                     dslack_aff[si].cwiseProduct(dlam_aff[si]);
        r_comp[si].array() -= sigma * mu;
      }
      assemble_rhs(r_comp);
      detail::riccati_solve(qp, factor, rhs, dir);
      recover_ineq(dir, r_comp, dslack, dlam);

      double alpha_p = 1.0, alpha_d = 1.0;
      for (std::size_t si = 0; si <= sn; ++si) {
        if (ub_[si].size() == 0) continue;
        alpha_p = std::min(alpha_p,
                           detail::max_step_to_boundary(slack[si], dslack[si], tau));
        alpha_d = std::min(alpha_d,
                           detail::max_step_to_boundary(lam[si], dlam[si], tau));
      }
      for (std::size_t si = 0; si <= sn; ++si) {
        x[si] += alpha_p * dir.dx[si];
        pi[si] += alpha_d * dir.dpi[si];
        if (si < sn) u[si] += alpha_p * dir.du[si];
        if (ub_[si].size() > 0) {
          slack[si] += alpha_p * dslack[si];
          lam[si] += alpha_d * dlam[si];
        }
      }
    }

    sol.dx = std::move(x);
    sol.du = std::move(u);
    sol.eq_mult = std::move(pi);
    sol.ineq_mult = std::move(lam);
    for (auto& l : sol.ineq_mult) l = l.cwiseMax(0.0);
    return sol;
  }

 private:
  /// No inequalities: a single Riccati sweep solves the KKT system exactly.
  QpSolution solve_equality(const OcpQp& qp) {
    const int horizon = qp.horizon();
    std::vector<Eigen::MatrixXd> q_bar, r_bar, s_bar;
    q_bar.reserve(static_cast<std::size_t>(horizon));
    for (const auto& st : qp.stages) {
      q_bar.push_back(st.hess_xx);
      r_bar.push_back(st.hess_uu);
      s_bar.push_back(st.hess_xu);
    }
    detail::RiccatiFactor factor;
    detail::riccati_factorize(qp, q_bar, r_bar, s_bar, qp.hess_term, factor);
    detail::StageRhs rhs;
    rhs.resize(horizon);
    rhs.x0 = qp.x0;
    for (int i = 0; i < horizon; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      rhs.grad_x[si] = qp.stages[si].grad_x;
      rhs.grad_u[si] = qp.stages[si].grad_u;
      rhs.offset[si] = qp.stages[si].dyn_offset;
    }
    rhs.grad_x[static_cast<std::size_t>(horizon)] = qp.grad_term;
    detail::StageDirection dir;
    detail::riccati_solve(qp, factor, rhs, dir);
    QpSolution sol;
    sol.dx = std::move(dir.dx);
    sol.du = std::move(dir.du);
    sol.eq_mult = std::move(dir.dpi);
    sol.ineq_mult.assign(static_cast<std::size_t>(horizon) + 1, Eigen::VectorXd());
    sol.status = QpStatus::optimal;
    sol.iterations = 1;
    double res = 0.0;
    for (int i = 0; i < horizon; ++i) {
      const auto& st = qp.stages[static_cast<std::size_t>(i)];
      const std::size_t si = static_cast<std::size_t>(i);
      res = std::max(res, (st.hess_xx * sol.dx[si] + st.hess_xu * sol.du[si] +
                           st.grad_x + st.dyn_a.transpose() * sol.eq_mult[si + 1] -
                           sol.eq_mult[si])
                              .lpNorm<Eigen::Infinity>());
      res = std::max(res, (st.hess_xu.transpose() * sol.dx[si] +
                           st.hess_uu * sol.du[si] + st.grad_u +
                           st.dyn_b.transpose() * sol.eq_mult[si + 1])
                              .lpNorm<Eigen::Infinity>());
    }
    sol.kkt_residual = res;
    return sol;
  }

  IpSettings settings_;
  std::vector<Eigen::MatrixXd> cx_, cu_;
  std::vector<Eigen::VectorXd> ub_;
  std::vector<Eigen::VectorXd> dscale_, cdz_, vtmp_;
  Eigen::MatrixXd dcx_, dcu_;
};

/// Convenience wrapper constructing a fresh solver instance.
inline QpSolution solve_ocp_qp(const OcpQp& qp, const IpSettings& settings = {}) {
  RiccatiIpSolver solver(settings);
  return solver.solve(qp);
}

}  // namespace zogp::qp
