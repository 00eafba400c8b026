#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <set>
#include <vector>

#include "zogp/common.hpp"
#include "zogp/ocp_qp.hpp"

namespace zogp::qp {

struct DenseQpSettings {
  double tol = 1e-9;        // multiplier sign tolerance (scaled)
  double feas_tol = 1e-9;   // constraint violation tolerance (scaled)
  double time_budget_seconds = 0.0;  // 0 disables the budget
};

struct DenseQpSolution {
  Eigen::VectorXd z;
  Eigen::VectorXd eq_mult;    // stationarity: H z + g + Aeq^T nu + Ain^T lam = 0
  Eigen::VectorXd ineq_mult;  // >= 0, zero off the active set
  QpStatus status = QpStatus::max_iter;
  int pivots = 0;
};

/// Active-set solver over dense KKT factorizations for general convex QPs
///   min 1/2 z^T H z + g^T z  s.t.  Aeq z = beq, Ain z <= bin.
/// Each pivot solves the KKT system of the current working set; rows enter
/// on violation and leave on negative multipliers. Exact (to linear-algebra
/// round-off) on small instances; the working set persists across solves as
/// a warm start. Guarded against cycling at 10 * n_ineq pivots.
class DenseKktSolver {
 public:
  explicit DenseKktSolver(DenseQpSettings settings = {}) : settings_(settings) {}

  const std::vector<Eigen::Index>& working_set() const { return working_; }
  void reset_warm_start() { working_.clear(); }

  DenseQpSolution solve(const DenseQp& qp) {
    const Eigen::Index n = qp.dim();
    const Eigen::Index me = qp.eq_rhs.size();
    const Eigen::Index mi = qp.ineq_rhs.size();
    if (qp.hess.rows() != n || qp.hess.cols() != n)
      throw std::invalid_argument("DenseKktSolver: Hessian dimension mismatch");
    if (me > 0 && qp.eq_mat.cols() != n)
      throw std::invalid_argument("DenseKktSolver: equality dimension mismatch");
    if (mi > 0 && qp.ineq_mat.cols() != n)
      throw std::invalid_argument("DenseKktSolver: inequality dimension mismatch");

    const auto start = std::chrono::steady_clock::now();
    auto out_of_budget = [&]() {
      if (settings_.time_budget_seconds <= 0.0) return false;
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
              .count();
      return elapsed > settings_.time_budget_seconds;
    };

    const double scale_g = std::max(1.0, qp.grad.lpNorm<Eigen::Infinity>());
    const double scale_b =
        std::max(1.0, mi > 0 ? qp.ineq_rhs.lpNorm<Eigen::Infinity>() : 0.0);

    // Drop warm-start indices that no longer exist.
    working_.erase(std::remove_if(working_.begin(), working_.end(),
                                  [mi](Eigen::Index k) { return k >= mi; }),
                   working_.end());

    DenseQpSolution sol;
    const int max_pivots = static_cast<int>(10 * std::max<Eigen::Index>(mi, 1)) + 10;
    for (int pivot = 0; pivot < max_pivots; ++pivot) {
      sol.pivots = pivot + 1;
      if (out_of_budget())
        throw NumericalError("dense QP: time budget exceeded");

      const Eigen::Index mw = static_cast<Eigen::Index>(working_.size());
      const Eigen::Index dim = n + me + mw;
      Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(dim, dim);
      Eigen::VectorXd rhs(dim);
      kkt.topLeftCorner(n, n) = qp.hess;
      rhs.head(n) = -qp.grad;
      if (me > 0) {
        kkt.block(n, 0, me, n) = qp.eq_mat;
        kkt.block(0, n, n, me) = qp.eq_mat.transpose();
        rhs.segment(n, me) = qp.eq_rhs;
      }
      for (Eigen::Index k = 0; k < mw; ++k) {
        kkt.row(n + me + k).head(n) = qp.ineq_mat.row(working_[static_cast<std::size_t>(k)]);
        kkt.col(n + me + k).head(n) =
            qp.ineq_mat.row(working_[static_cast<std::size_t>(k)]).transpose();
        rhs(n + me + k) = qp.ineq_rhs(working_[static_cast<std::size_t>(k)]);
      }

      Eigen::PartialPivLU<Eigen::MatrixXd> lu(kkt);
      Eigen::VectorXd sol_vec = lu.solve(rhs);
      double kkt_res = (kkt * sol_vec - rhs).lpNorm<Eigen::Infinity>() /
                       std::max(1.0, rhs.lpNorm<Eigen::Infinity>());
      if (!sol_vec.allFinite() || kkt_res > 1e-7) {
        // Rank-revealing retry; an inconsistent equality block means the
        // QP itself is infeasible.
        Eigen::FullPivLU<Eigen::MatrixXd> flu(kkt);
        sol_vec = flu.solve(rhs);
        kkt_res = (kkt * sol_vec - rhs).lpNorm<Eigen::Infinity>() /
                  std::max(1.0, rhs.lpNorm<Eigen::Infinity>());
        if (!sol_vec.allFinite() || kkt_res > 1e-7) {
          if (me > 0) {
            const Eigen::VectorXd ls =
                qp.eq_mat.colPivHouseholderQr().solve(qp.eq_rhs);
            if ((qp.eq_mat * ls - qp.eq_rhs).lpNorm<Eigen::Infinity>() >
                settings_.feas_tol * std::max(1.0, qp.eq_rhs.lpNorm<Eigen::Infinity>())) {
              sol.status = QpStatus::infeasible;
              return sol;
            }
          }
          throw NumericalError("dense QP: singular KKT system on working set");
        }
      }

      sol.z = sol_vec.head(n);
      sol.eq_mult = me > 0 ? sol_vec.segment(n, me) : Eigen::VectorXd();
      sol.ineq_mult = Eigen::VectorXd::Zero(mi);
      for (Eigen::Index k = 0; k < mw; ++k)
        sol.ineq_mult(working_[static_cast<std::size_t>(k)]) = sol_vec(n + me + k);

      if (mi == 0) {
        sol.status = QpStatus::optimal;
        return sol;
      }

      const Eigen::VectorXd violation = qp.ineq_mat * sol.z - qp.ineq_rhs;
      const double worst_violation = violation.maxCoeff();
      const double worst_mult = mw > 0 ? sol.ineq_mult.minCoeff() : 0.0;
      if (worst_violation <= settings_.feas_tol * scale_b &&
          worst_mult >= -settings_.tol * scale_g) {
        sol.ineq_mult = sol.ineq_mult.cwiseMax(0.0);
        sol.status = QpStatus::optimal;
        return sol;
      }

      // Primal-dual active-set update: keep rows whose multiplier-plus-
      // violation score is positive, admit violated rows.
      std::vector<Eigen::Index> next;
      next.reserve(working_.size() + 4);
      for (Eigen::Index k = 0; k < mi; ++k) {
        const double score = sol.ineq_mult(k) + violation(k);
        if (score > 0.0) next.push_back(k);
      }
      if (next == working_)
        throw NumericalError("dense QP: active-set iteration stalled");
      working_ = std::move(next);
    }
    throw NumericalError("dense QP: cycling guard tripped (10 x n_ineq pivots)");
  }

 private:
  DenseQpSettings settings_;
  std::vector<Eigen::Index> working_;
};

/// One-shot interface; see DenseKktSolver for the warm-started form.
inline DenseQpSolution solve_dense_kkt(const DenseQp& qp,
                                       const DenseQpSettings& settings = {}) {
  DenseKktSolver solver(settings);
  return solver.solve(qp);
}

}  // namespace zogp::qp
