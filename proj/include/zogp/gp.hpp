#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "zogp/common.hpp"

namespace zogp::gp {

/// ARD squared-exponential kernel parameters for one GP output.
/// `signal_variance` and `noise_variance` are in units of the target squared.
struct KernelHyperparams {
  Eigen::VectorXd lengthscales;
  double signal_variance = 1.0;
  double noise_variance = 1e-6;

  void validate() const {
    if (lengthscales.size() == 0 || (lengthscales.array() <= 0.0).any())
      throw std::invalid_argument("KernelHyperparams: lengthscales must be positive");
    if (!(signal_variance > 0.0) || !(noise_variance > 0.0))
      throw std::invalid_argument("KernelHyperparams: variances must be positive");
  }

  static KernelHyperparams isotropic(int input_dim, double lengthscale,
                                     double signal_var, double noise_var) {
    KernelHyperparams hp;
    hp.lengthscales = Eigen::VectorXd::Constant(input_dim, lengthscale);
    hp.signal_variance = signal_var;
    hp.noise_variance = noise_var;
    return hp;
  }
};

/// Training set: one row per sample, one target column per GP output.
struct GpDataset {
  Eigen::MatrixXd inputs;   // D x n_z
  Eigen::MatrixXd targets;  // D x n_w

  Eigen::Index count() const { return inputs.rows(); }
  Eigen::Index input_dim() const { return inputs.cols(); }
  Eigen::Index output_dim() const { return targets.cols(); }

  void validate() const {
    if (inputs.rows() != targets.rows())
      throw std::invalid_argument("GpDataset: inputs/targets row mismatch");
    if (!inputs.allFinite() || !targets.allFinite())
      throw std::invalid_argument("GpDataset: non-finite entries");
  }
};

/// k(z1, z2) = sf2 * exp(-1/2 * sum_d (z1_d - z2_d)^2 / l_d^2)
inline double se_kernel(const Eigen::Ref<const Eigen::VectorXd>& z1,
                        const Eigen::Ref<const Eigen::VectorXd>& z2,
                        const KernelHyperparams& hp) {
  if (z1.size() != hp.lengthscales.size() || z2.size() != hp.lengthscales.size())
    throw std::invalid_argument("se_kernel: input dimension mismatch");
  const double q =
      ((z1 - z2).array() / hp.lengthscales.array()).square().sum();
  return hp.signal_variance * std::exp(-0.5 * q);
}

namespace detail {

inline Eigen::MatrixXd gram_matrix(const Eigen::MatrixXd& inputs,
                                   const KernelHyperparams& hp) {
  const Eigen::Index d = inputs.rows();
  Eigen::MatrixXd k(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    k(i, i) = hp.signal_variance;
    for (Eigen::Index j = 0; j < i; ++j) {
      k(i, j) = se_kernel(inputs.row(i), inputs.row(j), hp);
      k(j, i) = k(i, j);
    }
  }
  return k;
}

inline Eigen::VectorXd cross_kernel(const Eigen::MatrixXd& inputs,
                                    const Eigen::Ref<const Eigen::VectorXd>& z,
                                    const KernelHyperparams& hp) {
  Eigen::VectorXd k(inputs.rows());
  for (Eigen::Index m = 0; m < inputs.rows(); ++m)
    k(m) = se_kernel(z, inputs.row(m), hp);
  return k;
}

}  // namespace detail

/// Conditioned exact GP for one output dimension.
struct GpOutputModel {
  KernelHyperparams hyperparams;
  Eigen::MatrixXd chol_factor;  // lower-triangular L, L L^T = K + sn2 I (+ jitter)
  Eigen::VectorXd weights;      // alpha = (K + sn2 I)^-1 y
  double jitter = 0.0;          // jitter actually applied to the diagonal
};

/// Independent per-output exact GPs sharing one training-input matrix.
/// Immutable after construction; concurrent read-only evaluation is safe.
struct MultiGpModel {
  Eigen::MatrixXd inputs;  // D x n_z
  std::vector<GpOutputModel> outputs;

  Eigen::Index count() const { return inputs.rows(); }
  Eigen::Index input_dim() const { return inputs.cols(); }
  Eigen::Index output_dim() const {
    return static_cast<Eigen::Index>(outputs.size());
  }
};

namespace detail {

/// Cholesky with the escalating jitter ladder: 1e-8*sf2 growing tenfold up
/// to 1e-2*sf2. Throws NumericalError when the Gram matrix stays indefinite.
inline std::pair<Eigen::MatrixXd, double> robust_cholesky(
    const Eigen::MatrixXd& gram_plus_noise, double signal_variance) {
  Eigen::LLT<Eigen::MatrixXd> llt(gram_plus_noise);
  if (llt.info() == Eigen::Success)
    return {Eigen::MatrixXd(llt.matrixL()), 0.0};
  for (double jitter = 1e-8 * signal_variance;
       jitter <= 1e-2 * signal_variance * (1.0 + 1e-12); jitter *= 10.0) {
    Eigen::MatrixXd shifted = gram_plus_noise;
    shifted.diagonal().array() += jitter;
    llt.compute(shifted);
    if (llt.info() == Eigen::Success)
      return {Eigen::MatrixXd(llt.matrixL()), jitter};
  }
  const double min_diag = gram_plus_noise.diagonal().minCoeff();
  const double max_diag = gram_plus_noise.diagonal().maxCoeff();
  std::ostringstream msg;
  msg << "fit_gp: Gram matrix not positive definite after jitter up to "
      << 1e-2 * signal_variance << " (diag range [" << min_diag << ", "
      << max_diag << "], D = " << gram_plus_noise.rows() << ")";
  throw NumericalError(msg.str());
}

}  // namespace detail

/// Fits independent exact GPs, one per target column.
/// `hyperparams` must supply one entry per output.
inline MultiGpModel fit_gp(const GpDataset& data,
                           const std::vector<KernelHyperparams>& hyperparams) {
  data.validate();
  if (static_cast<Eigen::Index>(hyperparams.size()) != data.output_dim())
    throw std::invalid_argument("fit_gp: one hyperparameter set per output required");
  if (data.count() < 1)
    throw std::invalid_argument("fit_gp: empty dataset (use a D = 0 prior model instead)");

  MultiGpModel model;
  model.inputs = data.inputs;
  model.outputs.resize(hyperparams.size());
  for (std::size_t j = 0; j < hyperparams.size(); ++j) {
    const KernelHyperparams& hp = hyperparams[j];
    hp.validate();
    if (hp.lengthscales.size() != data.input_dim())
      throw std::invalid_argument("fit_gp: lengthscale dimension mismatch");
    Eigen::MatrixXd gram = detail::gram_matrix(data.inputs, hp);
    gram.diagonal().array() += hp.noise_variance;
    auto [chol, jitter] = detail::robust_cholesky(gram, hp.signal_variance);
    GpOutputModel& out = model.outputs[j];
    out.hyperparams = hp;
    out.chol_factor = std::move(chol);
    out.jitter = jitter;
    const Eigen::VectorXd y = data.targets.col(static_cast<Eigen::Index>(j));
    out.weights = out.chol_factor.triangularView<Eigen::Lower>().solve(y);
    out.chol_factor.triangularView<Eigen::Lower>().transpose().solveInPlace(
        out.weights);
  }
  return model;
}

/// Prior-only model (D = 0): zero mean, variance sf2 per output.
inline MultiGpModel prior_gp(int input_dim,
                             const std::vector<KernelHyperparams>& hyperparams) {
  MultiGpModel model;
  model.inputs.resize(0, input_dim);
  model.outputs.resize(hyperparams.size());
  for (std::size_t j = 0; j < hyperparams.size(); ++j) {
    hyperparams[j].validate();
    model.outputs[j].hyperparams = hyperparams[j];
    model.outputs[j].chol_factor.resize(0, 0);
    model.outputs[j].weights.resize(0);
  }
  return model;
}

/// log p(y | X, theta) = -1/2 y^T alpha - sum_i log L_ii - D/2 log(2 pi)
inline double log_marginal_likelihood(const GpDataset& data,
                                      const KernelHyperparams& hp,
                                      int output_index) {
  data.validate();
  hp.validate();
  if (output_index < 0 || output_index >= data.output_dim())
    throw std::invalid_argument("log_marginal_likelihood: output index out of range");
  Eigen::MatrixXd gram = detail::gram_matrix(data.inputs, hp);
  gram.diagonal().array() += hp.noise_variance;
  auto [chol, jitter] = detail::robust_cholesky(gram, hp.signal_variance);
  (void)jitter;
  const Eigen::VectorXd y = data.targets.col(output_index);
  Eigen::VectorXd alpha = chol.triangularView<Eigen::Lower>().solve(y);
  const double quad = alpha.squaredNorm();  // y^T K_y^-1 y via the half-solve
  const double logdet_half = chol.diagonal().array().log().sum();
  const double d = static_cast<double>(data.count());
  return -0.5 * quad - logdet_half - 0.5 * d * std::log(2.0 * M_PI);
}

/// Gradient of log_marginal_likelihood w.r.t. the log-hyperparameters,
/// ordered (log l_1 .. log l_nz, log sf2, log sn2).
inline Eigen::VectorXd log_marginal_likelihood_grad(const GpDataset& data,
                                                    const KernelHyperparams& hp,
                                                    int output_index) {
  data.validate();
  hp.validate();
  const Eigen::Index d = data.count();
  const Eigen::Index nz = data.input_dim();
  Eigen::MatrixXd kernel = detail::gram_matrix(data.inputs, hp);  // noiseless K
  Eigen::MatrixXd gram = kernel;
  gram.diagonal().array() += hp.noise_variance;
  auto [chol, jitter] = detail::robust_cholesky(gram, hp.signal_variance);
  (void)jitter;
  const Eigen::VectorXd y = data.targets.col(output_index);
  Eigen::VectorXd alpha = chol.triangularView<Eigen::Lower>().solve(y);
  chol.triangularView<Eigen::Lower>().transpose().solveInPlace(alpha);
  // A = alpha alpha^T - K_y^-1;  dL/dtheta = 1/2 tr(A dK_y/dtheta)
  Eigen::MatrixXd ky_inv = Eigen::MatrixXd::Identity(d, d);
  chol.triangularView<Eigen::Lower>().solveInPlace(ky_inv);
  chol.triangularView<Eigen::Lower>().transpose().solveInPlace(ky_inv);
  const Eigen::MatrixXd a = alpha * alpha.transpose() - ky_inv;

  Eigen::VectorXd grad(nz + 2);
  for (Eigen::Index dim = 0; dim < nz; ++dim) {
    // dK/dlog l_d = K .* (delta_d^2 / l_d^2)
    double acc = 0.0;
    const double inv_l2 = 1.0 / (hp.lengthscales(dim) * hp.lengthscales(dim));
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) {
        const double delta = data.inputs(i, dim) - data.inputs(j, dim);
        acc += a(i, j) * kernel(i, j) * delta * delta * inv_l2;
      }
    grad(dim) = 0.5 * acc;
  }
  grad(nz) = 0.5 * (a.array() * kernel.array()).sum();           // dK/dlog sf2 = K
  grad(nz + 1) = 0.5 * hp.noise_variance * a.diagonal().sum();   // dK/dlog sn2 = sn2 I
  return grad;
}

/// Marginal-likelihood ascent on log-hyperparameters: plain gradient ascent
/// with step halving, at most `max_iter` accepted steps.
inline KernelHyperparams optimize_hyperparams(const GpDataset& data,
                                              const KernelHyperparams& init,
                                              int output_index,
                                              int max_iter = 200) {
  const Eigen::Index nz = data.input_dim();
  auto pack = [nz](const KernelHyperparams& hp) {
    Eigen::VectorXd theta(nz + 2);
    theta.head(nz) = hp.lengthscales.array().log();
    theta(nz) = std::log(hp.signal_variance);
    theta(nz + 1) = std::log(hp.noise_variance);
    return theta;
  };
  auto unpack = [nz](const Eigen::VectorXd& theta) {
    KernelHyperparams hp;
    hp.lengthscales = theta.head(nz).array().exp();
    hp.signal_variance = std::exp(theta(nz));
    hp.noise_variance = std::exp(theta(nz + 1));
    return hp;
  };
  Eigen::VectorXd theta = pack(init);
  double value = log_marginal_likelihood(data, unpack(theta), output_index);
  double step = 0.1;
  for (int iter = 0; iter < max_iter; ++iter) {
    const Eigen::VectorXd grad =
        log_marginal_likelihood_grad(data, unpack(theta), output_index);
    if (grad.lpNorm<Eigen::Infinity>() < 1e-9) break;
    bool accepted = false;
    while (step > 1e-14) {
      const Eigen::VectorXd trial = theta + step * grad;
      double trial_value;
      try {
        trial_value = log_marginal_likelihood(data, unpack(trial), output_index);
      } catch (const NumericalError&) {
        step *= 0.5;
        continue;
      }
      if (trial_value > value) {
        theta = trial;
        value = trial_value;
        step *= 1.5;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  return unpack(theta);
}

/// Posterior moments at z: mean_j = k*^T alpha_j,
/// var_j = sf2_j - ||L_j^-1 k*||^2, clamped at zero.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> posterior_mean_cov(
    const MultiGpModel& model, const Eigen::Ref<const Eigen::VectorXd>& z) {
  if (z.size() != model.input_dim())
    throw std::invalid_argument("posterior_mean_cov: input dimension mismatch");
  const Eigen::Index nw = model.output_dim();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(nw);
  Eigen::VectorXd var(nw);
  for (Eigen::Index j = 0; j < nw; ++j) {
    const GpOutputModel& out = model.outputs[static_cast<std::size_t>(j)];
    if (model.count() == 0) {
      var(j) = out.hyperparams.signal_variance;
      continue;
    }
    const Eigen::VectorXd kstar =
        detail::cross_kernel(model.inputs, z, out.hyperparams);
    mean(j) = kstar.dot(out.weights);
    const Eigen::VectorXd v =
        out.chol_factor.triangularView<Eigen::Lower>().solve(kstar);
    var(j) = std::max(out.hyperparams.signal_variance - v.squaredNorm(), 0.0);
  }
  return {mean, var};
}

/// d mu^d / dz, row j = sum_m alpha_{j,m} dk(z, z_m)/dz with
/// dk/dz_d = -(z_d - z_{m,d}) / l_d^2 * k(z, z_m).
inline Eigen::MatrixXd posterior_mean_jacobian(
    const MultiGpModel& model, const Eigen::Ref<const Eigen::VectorXd>& z) {
  if (z.size() != model.input_dim())
    throw std::invalid_argument("posterior_mean_jacobian: input dimension mismatch");
  const Eigen::Index nw = model.output_dim();
  const Eigen::Index nz = model.input_dim();
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(nw, nz);
  if (model.count() == 0) return jac;
  for (Eigen::Index j = 0; j < nw; ++j) {
    const GpOutputModel& out = model.outputs[static_cast<std::size_t>(j)];
    const Eigen::ArrayXd inv_l2 =
        out.hyperparams.lengthscales.array().square().inverse();
    for (Eigen::Index m = 0; m < model.count(); ++m) {
      const double k = se_kernel(z, model.inputs.row(m), out.hyperparams);
      jac.row(j) -= (out.weights(m) * k) *
                    ((z - model.inputs.row(m).transpose()).array() * inv_l2)
                        .matrix()
                        .transpose();
    }
  }
  return jac;
}

// ---------------------------------------------------------------------------
// Dataset CSV exchange: header z_1..z_nz,d_1..d_nw, one sample per row.
// ---------------------------------------------------------------------------

inline void write_dataset_csv(std::ostream& os, const GpDataset& data) {
  data.validate();
  for (Eigen::Index k = 0; k < data.input_dim(); ++k)
    os << (k == 0 ? "" : ",") << "z_" << (k + 1);
  for (Eigen::Index k = 0; k < data.output_dim(); ++k) os << ",d_" << (k + 1);
  os << "\n";
  os.precision(17);
  for (Eigen::Index i = 0; i < data.count(); ++i) {
    for (Eigen::Index k = 0; k < data.input_dim(); ++k)
      os << (k == 0 ? "" : ",") << data.inputs(i, k);
    for (Eigen::Index k = 0; k < data.output_dim(); ++k)
      os << "," << data.targets(i, k);
    os << "\n";
  }
}

inline void write_dataset_csv(const std::string& path, const GpDataset& data) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_dataset_csv(os, data);
}

inline GpDataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error("dataset CSV: missing header");
  int nz = 0, nw = 0;
  {
    std::stringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ',')) {
      if (cell.rfind("z_", 0) == 0)
        ++nz;
      else if (cell.rfind("d_", 0) == 0)
        ++nw;
      else
        throw std::runtime_error("dataset CSV: unexpected column '" + cell + "'");
    }
  }
  if (nz == 0 || nw == 0)
    throw std::runtime_error("dataset CSV: header must list z_* and d_* columns");
  std::vector<double> values;
  Eigen::Index rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    int count = 0;
    while (std::getline(row, cell, ',')) {
      values.push_back(std::stod(cell));
      ++count;
    }
    if (count != nz + nw)
      throw std::runtime_error("dataset CSV: ragged row");
    ++rows;
  }
  GpDataset data;
  data.inputs.resize(rows, nz);
  data.targets.resize(rows, nw);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (int k = 0; k < nz; ++k)
      data.inputs(i, k) = values[static_cast<std::size_t>(i * (nz + nw) + k)];
    for (int k = 0; k < nw; ++k)
      data.targets(i, k) =
          values[static_cast<std::size_t>(i * (nz + nw) + nz + k)];
  }
  data.validate();
  return data;
}

inline GpDataset read_dataset_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset CSV: " + path);
  return read_dataset_csv(is);
}

}  // namespace zogp::gp
