#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "zogp/common.hpp"

namespace zogp::qp {

/// Stage data of an OCP-structured convex QP:
///   min  sum_i 1/2 x^T Qx x + x^T Qxu u + 1/2 u^T Qu u + gx^T x + gu^T u
///        + terminal quadratic
///   s.t. x_{i+1} = dyn_a x_i + dyn_b u_i + dyn_offset,
///        x_0 = x0,
///        ineq_x x_i + ineq_u u_i <= ineq_ub  (per stage, possibly empty).
struct QpStage {
  Eigen::MatrixXd hess_xx, hess_uu, hess_xu;  // hess_xu is nx x nu
  Eigen::VectorXd grad_x, grad_u;
  Eigen::MatrixXd dyn_a, dyn_b;
  Eigen::VectorXd dyn_offset;
  Eigen::MatrixXd ineq_x, ineq_u;
  Eigen::VectorXd ineq_ub;

  Eigen::Index ineq_count() const { return ineq_ub.size(); }
};

struct OcpQp {
  std::vector<QpStage> stages;
  Eigen::MatrixXd hess_term;
  Eigen::VectorXd grad_term;
  Eigen::MatrixXd ineq_term_x;
  Eigen::VectorXd ineq_term_ub;
  Eigen::VectorXd x0;

  int horizon() const { return static_cast<int>(stages.size()); }
  int nx() const { return static_cast<int>(x0.size()); }
  int nu() const {
    return stages.empty() ? 0 : static_cast<int>(stages.front().dyn_b.cols());
  }

  Eigen::Index total_ineq() const {
    Eigen::Index m = ineq_term_ub.size();
    for (const auto& st : stages) m += st.ineq_count();
    return m;
  }

  void validate() const {
    if (stages.empty()) throw std::invalid_argument("OcpQp: horizon must be >= 1");
    const Eigen::Index n = x0.size();
    const Eigen::Index m = stages.front().dyn_b.cols();
    for (const auto& st : stages) {
      if (st.hess_xx.rows() != n || st.hess_xx.cols() != n ||
          st.hess_uu.rows() != m || st.hess_uu.cols() != m ||
          st.hess_xu.rows() != n || st.hess_xu.cols() != m ||
          st.grad_x.size() != n || st.grad_u.size() != m ||
          st.dyn_a.rows() != n || st.dyn_a.cols() != n ||
          st.dyn_b.rows() != n || st.dyn_b.cols() != m ||
          st.dyn_offset.size() != n)
        throw std::invalid_argument("OcpQp: inconsistent stage dimensions");
      if (st.ineq_count() > 0 &&
          (st.ineq_x.rows() != st.ineq_count() || st.ineq_x.cols() != n ||
           st.ineq_u.rows() != st.ineq_count() || st.ineq_u.cols() != m))
        throw std::invalid_argument("OcpQp: inconsistent inequality rows");
    }
    if (hess_term.rows() != n || hess_term.cols() != n || grad_term.size() != n)
      throw std::invalid_argument("OcpQp: inconsistent terminal data");
    if (ineq_term_ub.size() > 0 &&
        (ineq_term_x.rows() != ineq_term_ub.size() || ineq_term_x.cols() != n))
      throw std::invalid_argument("OcpQp: inconsistent terminal inequality rows");
  }
};

enum class QpStatus { optimal, max_iter, infeasible };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::max_iter: return "max_iter";
    case QpStatus::infeasible: return "infeasible";
  }
  return "?";
}

/// Primal-dual solution of an OcpQp. eq_mult[0] belongs to the initialate
/// state constraint, eq_mult[i+1] to the stage-i dynamics row; ineq_mult[i]
/// to the stage-i inequality rows (index N: terminal rows).
struct QpSolution {
  std::vector<Eigen::VectorXd> dx;
  std::vector<Eigen::VectorXd> du;
  std::vector<Eigen::VectorXd> eq_mult;
  std::vector<Eigen::VectorXd> ineq_mult;
  QpStatus status = QpStatus::max_iter;
  int iterations = 0;
  double kkt_residual = std::numeric_limits<double>::infinity();

  /// Objective value of the QP at the primal solution.
  double objective(const OcpQp& qp) const {
    double v = 0.0;
    for (int i = 0; i < qp.horizon(); ++i) {
      const auto& st = qp.stages[static_cast<std::size_t>(i)];
      v += 0.5 * dx[static_cast<std::size_t>(i)].dot(st.hess_xx * dx[static_cast<std::size_t>(i)]);
      v += dx[static_cast<std::size_t>(i)].dot(st.hess_xu * du[static_cast<std::size_t>(i)]);
      v += 0.5 * du[static_cast<std::size_t>(i)].dot(st.hess_uu * du[static_cast<std::size_t>(i)]);
      v += st.grad_x.dot(dx[static_cast<std::size_t>(i)]);
      v += st.grad_u.dot(du[static_cast<std::size_t>(i)]);
    }
    v += 0.5 * dx.back().dot(qp.hess_term * dx.back()) + qp.grad_term.dot(dx.back());
    return v;
  }
};

// ---------------------------------------------------------------------------
// Dense view: z = (x_0, u_0, ..., x_{N-1}, u_{N-1}, x_N).
// Equality rows: initial-state block first, then the dynamics rows
// A x_i + B u_i - x_{i+1} = -offset. With these conventions the dense
// equality multipliers satisfy nu_0 = -pi_0 and nu_{i+1} = pi_{i+1}.
// ---------------------------------------------------------------------------

struct DenseQp {
  Eigen::MatrixXd hess;
  Eigen::VectorXd grad;
  Eigen::MatrixXd eq_mat;
  Eigen::VectorXd eq_rhs;
  Eigen::MatrixXd ineq_mat;
  Eigen::VectorXd ineq_rhs;

  Eigen::Index dim() const { return grad.size(); }
};

inline DenseQp to_dense(const OcpQp& qp) {
  qp.validate();
  const int n = qp.nx();
  const int m = qp.nu();
  const int horizon = qp.horizon();
  const Eigen::Index dim = static_cast<Eigen::Index>(horizon) * (n + m) + n;
  const Eigen::Index n_eq = static_cast<Eigen::Index>(horizon + 1) * n;
  DenseQp d;
  d.hess = Eigen::MatrixXd::Zero(dim, dim);
  d.grad = Eigen::VectorXd::Zero(dim);
  d.eq_mat = Eigen::MatrixXd::Zero(n_eq, dim);
  d.eq_rhs = Eigen::VectorXd::Zero(n_eq);
  d.ineq_mat = Eigen::MatrixXd::Zero(qp.total_ineq(), dim);
  d.ineq_rhs = Eigen::VectorXd::Zero(qp.total_ineq());

  auto xoff = [&](int i) { return static_cast<Eigen::Index>(i) * (n + m); };
  auto uoff = [&](int i) { return xoff(i) + n; };

  d.eq_mat.block(0, 0, n, n).setIdentity();
  d.eq_rhs.head(n) = qp.x0;

  Eigen::Index ineq_row = 0;
  for (int i = 0; i < horizon; ++i) {
    const auto& st = qp.stages[static_cast<std::size_t>(i)];
    d.hess.block(xoff(i), xoff(i), n, n) = st.hess_xx;
    d.hess.block(xoff(i), uoff(i), n, m) = st.hess_xu;
    d.hess.block(uoff(i), xoff(i), m, n) = st.hess_xu.transpose();
    d.hess.block(uoff(i), uoff(i), m, m) = st.hess_uu;
    d.grad.segment(xoff(i), n) = st.grad_x;
    d.grad.segment(uoff(i), m) = st.grad_u;

    const Eigen::Index row = static_cast<Eigen::Index>(i + 1) * n;
    d.eq_mat.block(row, xoff(i), n, n) = st.dyn_a;
    d.eq_mat.block(row, uoff(i), n, m) = st.dyn_b;
    d.eq_mat.block(row, xoff(i + 1), n, n) = -Eigen::MatrixXd::Identity(n, n);
    d.eq_rhs.segment(row, n) = -st.dyn_offset;

    if (st.ineq_count() > 0) {
      d.ineq_mat.block(ineq_row, xoff(i), st.ineq_count(), n) = st.ineq_x;
      d.ineq_mat.block(ineq_row, uoff(i), st.ineq_count(), m) = st.ineq_u;
      d.ineq_rhs.segment(ineq_row, st.ineq_count()) = st.ineq_ub;
      ineq_row += st.ineq_count();
    }
  }
  d.hess.block(xoff(horizon), xoff(horizon), n, n) = qp.hess_term;
  d.grad.segment(xoff(horizon), n) = qp.grad_term;
  if (qp.ineq_term_ub.size() > 0) {
    d.ineq_mat.block(ineq_row, xoff(horizon), qp.ineq_term_ub.size(), n) =
        qp.ineq_term_x;
    d.ineq_rhs.segment(ineq_row, qp.ineq_term_ub.size()) = qp.ineq_term_ub;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Binary container for regression corpora: "ZOQP" magic, version, dimension
// header, then row-major little-endian 64-bit floats for every block.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_i64(std::ostream& os, std::int64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::int64_t get_i64(std::istream& is) {
  std::int64_t v;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw std::runtime_error("ocp_qp load: truncated header");
  return v;
}

inline void put_matrix(std::ostream& os, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      os.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
}

inline Eigen::MatrixXd get_matrix(std::istream& is, Eigen::Index rows,
                                  Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      double v;
      is.read(reinterpret_cast<char*>(&v), sizeof(v));
      if (!is) throw std::runtime_error("ocp_qp load: truncated payload");
      m(r, c) = v;
    }
  return m;
}

}  // namespace detail

inline void save_ocp_qp(std::ostream& os, const OcpQp& qp) {
  qp.validate();
  os.write("ZOQP", 4);
  detail::put_i64(os, 1);  // format version
  detail::put_i64(os, qp.horizon());
  detail::put_i64(os, qp.nx());
  detail::put_i64(os, qp.nu());
  for (const auto& st : qp.stages) detail::put_i64(os, st.ineq_count());
  detail::put_i64(os, qp.ineq_term_ub.size());
  for (const auto& st : qp.stages) {
    detail::put_matrix(os, st.hess_xx);
    detail::put_matrix(os, st.hess_uu);
    detail::put_matrix(os, st.hess_xu);
    detail::put_matrix(os, st.grad_x);
    detail::put_matrix(os, st.grad_u);
    detail::put_matrix(os, st.dyn_a);
    detail::put_matrix(os, st.dyn_b);
    detail::put_matrix(os, st.dyn_offset);
    detail::put_matrix(os, st.ineq_x);
    detail::put_matrix(os, st.ineq_u);
    detail::put_matrix(os, st.ineq_ub);
  }
  detail::put_matrix(os, qp.hess_term);
  detail::put_matrix(os, qp.grad_term);
  detail::put_matrix(os, qp.ineq_term_x);
  detail::put_matrix(os, qp.ineq_term_ub);
  detail::put_matrix(os, qp.x0);
}

inline void save_ocp_qp(const std::string& path, const OcpQp& qp) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  save_ocp_qp(os, qp);
}

inline OcpQp load_ocp_qp(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "ZOQP")
    throw std::runtime_error("ocp_qp load: bad magic");
  if (detail::get_i64(is) != 1)
    throw std::runtime_error("ocp_qp load: unsupported version");
  const std::int64_t horizon = detail::get_i64(is);
  const std::int64_t n = detail::get_i64(is);
  const std::int64_t m = detail::get_i64(is);
  if (horizon < 1 || n < 1 || m < 0)
    throw std::runtime_error("ocp_qp load: bad dimensions");
  std::vector<std::int64_t> ineq_counts(static_cast<std::size_t>(horizon));
  for (auto& c : ineq_counts) c = detail::get_i64(is);
  const std::int64_t term_count = detail::get_i64(is);
  OcpQp qp;
  qp.stages.resize(static_cast<std::size_t>(horizon));
  for (std::size_t i = 0; i < qp.stages.size(); ++i) {
    QpStage& st = qp.stages[i];
    const std::int64_t mi = ineq_counts[i];
    st.hess_xx = detail::get_matrix(is, n, n);
    st.hess_uu = detail::get_matrix(is, m, m);
    st.hess_xu = detail::get_matrix(is, n, m);
    st.grad_x = detail::get_matrix(is, n, 1);
    st.grad_u = detail::get_matrix(is, m, 1);
    st.dyn_a = detail::get_matrix(is, n, n);
    st.dyn_b = detail::get_matrix(is, n, m);
    st.dyn_offset = detail::get_matrix(is, n, 1);
    st.ineq_x = detail::get_matrix(is, mi, n);
    st.ineq_u = detail::get_matrix(is, mi, m);
    st.ineq_ub = detail::get_matrix(is, mi, 1);
  }
  qp.hess_term = detail::get_matrix(is, n, n);
  qp.grad_term = detail::get_matrix(is, n, 1);
  qp.ineq_term_x = detail::get_matrix(is, term_count, n);
  qp.ineq_term_ub = detail::get_matrix(is, term_count, 1);
  qp.x0 = detail::get_matrix(is, n, 1);
  qp.validate();
  return qp;
}

inline OcpQp load_ocp_qp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open ocp_qp file: " + path);
  return load_ocp_qp(is);
}

}  // namespace zogp::qp
