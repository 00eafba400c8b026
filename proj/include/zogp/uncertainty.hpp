#pragma once

#include <Eigen/Dense>

#include <boost/math/special_functions/erf.hpp>

#include <cmath>
#include <vector>

#include "zogp/common.hpp"

namespace zogp::unc {

/// Per-stage data of the covariance recursion
/// S_{i+1} = a_tilde S_i a_tilde^T + b (diag(gp_var) + diag(w_var)) b^T.
struct StageLinearization {
  Eigen::MatrixXd a_tilde;  // nx x nx
  Eigen::MatrixXd b_mat;    // nx x nw
  Eigen::VectorXd gp_var;   // diagonal of Sigma^d at this stage
  Eigen::VectorXd w_var;    // diagonal of Sigma^w

  void validate() const {
    if (a_tilde.rows() != a_tilde.cols() || a_tilde.rows() != b_mat.rows())
      throw std::invalid_argument("StageLinearization: dimension mismatch");
    if (gp_var.size() != b_mat.cols() || w_var.size() != b_mat.cols())
      throw std::invalid_argument("StageLinearization: noise dimension mismatch");
    if ((gp_var.array() < 0.0).any() || (w_var.array() < 0.0).any())
      throw std::invalid_argument("StageLinearization: negative noise variance");
    if (!a_tilde.allFinite() || !b_mat.allFinite() || !gp_var.allFinite() ||
        !w_var.allFinite())
      throw std::invalid_argument("StageLinearization: non-finite entries");
  }
};

/// Sigma_0 .. Sigma_N, symmetric PSD.
struct CovarianceTrajectory {
  std::vector<Eigen::MatrixXd> sigmas;

  Eigen::Index horizon() const {
    return static_cast<Eigen::Index>(sigmas.size()) - 1;
  }

  /// Stacked column-wise vectorization (vec Sigma_0, ..., vec Sigma_N).
  Eigen::VectorXd vectorized() const {
    if (sigmas.empty()) return Eigen::VectorXd();
    const Eigen::Index n2 = sigmas.front().size();
    Eigen::VectorXd out(n2 * static_cast<Eigen::Index>(sigmas.size()));
    for (std::size_t i = 0; i < sigmas.size(); ++i)
      out.segment(static_cast<Eigen::Index>(i) * n2, n2) = vectorize(sigmas[i]);
    return out;
  }

  static CovarianceTrajectory zeros(int horizon, int nx) {
    CovarianceTrajectory t;
    t.sigmas.assign(static_cast<std::size_t>(horizon + 1),
                    Eigen::MatrixXd::Zero(nx, nx));
    return t;
  }
};

enum class TighteningMode { chebyshev, gaussian };

/// Constraint backoff factor for satisfaction probability p:
/// Chebyshev sqrt(p/(1-p)) for general distributions, or the standard
/// normal quantile for Gaussian ones (the less conservative choice).
inline double tightening_factor(double p, TighteningMode mode) {
  if (!(p > 0.0) || !(p < 1.0))
    throw std::invalid_argument("tightening_factor: p must lie in (0, 1)");
  switch (mode) {
    case TighteningMode::chebyshev:
      return std::sqrt(p / (1.0 - p));
    case TighteningMode::gaussian:
      return std::sqrt(2.0) * boost::math::erf_inv(2.0 * p - 1.0);
  }
  throw std::invalid_argument("tightening_factor: unknown mode");
}

/// Runs the covariance recursion from sigma0 over all stages, symmetrizing
/// after each step. Cost O(N nx^3); the production propagation path.
inline CovarianceTrajectory propagate_covariances(
    const std::vector<StageLinearization>& stages,
    const Eigen::MatrixXd& sigma0) {
  if (!sigma0.allFinite())
    throw std::invalid_argument("propagate_covariances: non-finite sigma0");
  CovarianceTrajectory traj;
  traj.sigmas.reserve(stages.size() + 1);
  traj.sigmas.push_back(symmetrized(sigma0));
  for (const StageLinearization& st : stages) {
    st.validate();
    const Eigen::MatrixXd& prev = traj.sigmas.back();
    Eigen::MatrixXd next = st.a_tilde * prev * st.a_tilde.transpose();
    next.noalias() += st.b_mat * (st.gp_var + st.w_var).asDiagonal() *
                      st.b_mat.transpose();
    symmetrize(next);
    traj.sigmas.push_back(std::move(next));
  }
  return traj;
}

/// Unit lower-triangular block-bidiagonal matrix: identity diagonal blocks
/// of size block_dim, sub-diagonal blocks sub[i] in block row i+1.
struct BlockBidiagonal {
  Eigen::Index block_dim = 0;
  std::vector<Eigen::MatrixXd> sub;

  Eigen::Index dim() const {
    return block_dim * (static_cast<Eigen::Index>(sub.size()) + 1);
  }

  Eigen::MatrixXd dense() const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(dim(), dim());
    for (std::size_t i = 0; i < sub.size(); ++i)
      m.block((static_cast<Eigen::Index>(i) + 1) * block_dim,
              static_cast<Eigen::Index>(i) * block_dim, block_dim, block_dim) =
          sub[i];
    return m;
  }
};

struct VectorizedSystem {
  BlockBidiagonal a_mat;
  Eigen::VectorXd b_vec;
};

/// Kronecker form of the covariance recursion: block row i+1 carries the
/// sub-diagonal block L_i = -(a_tilde_i (x) a_tilde_i) and the offset
/// -(b (x) b) vec(diag(gp_var_i + w_var_i)), so that
/// a_mat * vec(P) + b_vec = 0 reproduces the recursion with Sigma_0 = 0.
inline VectorizedSystem build_vectorized_system(
    const std::vector<StageLinearization>& stages) {
  if (stages.empty())
    throw std::invalid_argument("build_vectorized_system: no stages");
  const Eigen::Index nx = stages.front().a_tilde.rows();
  const Eigen::Index n2 = nx * nx;
  VectorizedSystem sys;
  sys.a_mat.block_dim = n2;
  sys.a_mat.sub.reserve(stages.size());
  sys.b_vec = Eigen::VectorXd::Zero(n2 * (static_cast<Eigen::Index>(stages.size()) + 1));
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageLinearization& st = stages[i];
    st.validate();
    if (st.a_tilde.rows() != nx)
      throw std::invalid_argument("build_vectorized_system: inconsistent stage dims");
    Eigen::MatrixXd l(n2, n2);
    for (Eigen::Index c = 0; c < nx; ++c)
      for (Eigen::Index r = 0; r < nx; ++r)
        l.block(r * nx, c * nx, nx, nx) = -st.a_tilde(r, c) * st.a_tilde;
    sys.a_mat.sub.push_back(std::move(l));
    const Eigen::MatrixXd noise = st.b_mat *
                                  (st.gp_var + st.w_var).asDiagonal() *
                                  st.b_mat.transpose();
    sys.b_vec.segment((static_cast<Eigen::Index>(i) + 1) * n2, n2) =
        -vectorize(noise);
  }
  return sys;
}

/// Solves a_mat * P = -b_vec by block forward substitution and unvectorizes
/// into symmetric covariance matrices.
inline CovarianceTrajectory solve_vectorized(const BlockBidiagonal& a_mat,
                                             const Eigen::VectorXd& b_vec) {
  const Eigen::Index n2 = a_mat.block_dim;
  if (b_vec.size() != a_mat.dim())
    throw std::invalid_argument("solve_vectorized: rhs size mismatch");
  const Eigen::Index nx = static_cast<Eigen::Index>(std::llround(std::sqrt(double(n2))));
  if (nx * nx != n2)
    throw std::invalid_argument("solve_vectorized: block dim is not a square");
  CovarianceTrajectory traj;
  traj.sigmas.reserve(a_mat.sub.size() + 1);
  Eigen::VectorXd prev = -b_vec.head(n2);
  traj.sigmas.push_back(symmetrized(unvectorize(prev, nx, nx)));
  for (std::size_t i = 0; i < a_mat.sub.size(); ++i) {
    Eigen::VectorXd cur =
        -b_vec.segment((static_cast<Eigen::Index>(i) + 1) * n2, n2) -
        a_mat.sub[i] * prev;
    traj.sigmas.push_back(symmetrized(unvectorize(cur, nx, nx)));
    prev = std::move(cur);
  }
  return traj;
}

/// One tightened inequality row: h(y) + alpha * sqrt(C_x Sigma C_x^T) <= 0.
struct TightenedConstraint {
  Eigen::RowVectorXd row;  // gradient of h w.r.t. (x, u)
  double offset = 0.0;     // h at the linearization point
  double prob = 1.0;
  double alpha = 0.0;
  double backoff = 0.0;

  double tightened_value() const { return offset + backoff; }
};

/// Quadratic forms below this threshold are treated as exactly zero to
/// avoid amplifying round-off through the square root.
inline constexpr double kBackoffDegenerateTol = 1e-14;

inline TightenedConstraint tighten(double h_val,
                                   const Eigen::RowVectorXd& c_row,
                                   const Eigen::MatrixXd& sigma, double alpha,
                                   double prob = 1.0) {
  const Eigen::Index nx = sigma.rows();
  if (c_row.size() < nx)
    throw std::invalid_argument("tighten: gradient shorter than state dimension");
  TightenedConstraint out;
  out.row = c_row;
  out.offset = h_val;
  out.prob = prob;
  out.alpha = alpha;
  const Eigen::RowVectorXd cx = c_row.head(nx);
  const double quad = std::max((cx * sigma * cx.transpose())(0, 0), 0.0);
  out.backoff = quad < kBackoffDegenerateTol ? 0.0 : alpha * std::sqrt(quad);
  return out;
}

}  // namespace zogp::unc
