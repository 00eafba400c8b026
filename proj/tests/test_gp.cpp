#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <random>
#include <sstream>

#include "zogp/gp.hpp"

using namespace zogp;
using Catch::Approx;

namespace {

gp::GpDataset random_dataset(int d, int nz, int nw, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  gp::GpDataset data;
  data.inputs.resize(d, nz);
  data.targets.resize(d, nw);
  for (int i = 0; i < d; ++i) {
    for (int k = 0; k < nz; ++k) data.inputs(i, k) = normal(rng);
    for (int k = 0; k < nw; ++k) data.targets(i, k) = normal(rng);
  }
  return data;
}

Eigen::MatrixXd dense_gram(const gp::GpDataset& data,
                           const gp::KernelHyperparams& hp) {
  const Eigen::Index d = data.count();
  Eigen::MatrixXd k(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      k(i, j) = gp::se_kernel(data.inputs.row(i), data.inputs.row(j), hp);
  return k;
}

}  // namespace

TEST_CASE("se_kernel closed form") {
  gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(2, 1.0, 2.5, 1e-6);
  Eigen::Vector2d z(0.3, -1.2);
  CHECK(gp::se_kernel(z, z, hp) == Approx(2.5).margin(0.0));

  hp.signal_variance = 1.0;
  Eigen::Vector2d z1(1.0, 0.0), z2(0.0, 0.0);
  // exp(-1/2) evaluated by hand calculator
  CHECK(gp::se_kernel(z1, z2, hp) == Approx(0.60653065971263342).epsilon(1e-12));

  SECTION("monotone decay in distance") {
    double prev = gp::se_kernel(Eigen::Vector2d(0, 0), z2, hp);
    for (double r = 0.5; r < 20.0; r += 0.5) {
      const double v = gp::se_kernel(Eigen::Vector2d(r, 0), z2, hp);
      CHECK(v < prev);
      prev = v;
    }
    CHECK(prev < 1e-10);
  }

  SECTION("dimension mismatch") {
    Eigen::Vector3d bad(1, 2, 3);
    CHECK_THROWS_AS(gp::se_kernel(bad, bad, hp), std::invalid_argument);
  }
}

TEST_CASE("fit_gp solves the Gram system") {
  SECTION("single data point") {
    gp::GpDataset data;
    data.inputs = Eigen::MatrixXd::Zero(1, 1);
    data.targets = Eigen::MatrixXd::Constant(1, 1, 3.0);
    gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(1, 1.0, 2.0, 0.5);
    const gp::MultiGpModel model = gp::fit_gp(data, {hp});
    CHECK(model.outputs[0].weights(0) == Approx(3.0 / 2.5).epsilon(1e-14));
  }

  SECTION("residual check on a random dataset") {
    const gp::GpDataset data = random_dataset(20, 3, 2, 99);
    std::vector<gp::KernelHyperparams> hps(
        2, gp::KernelHyperparams::isotropic(3, 0.8, 1.3, 1e-3));
    const gp::MultiGpModel model = gp::fit_gp(data, hps);
    for (int j = 0; j < 2; ++j) {
      Eigen::MatrixXd ky = dense_gram(data, hps[static_cast<std::size_t>(j)]);
      ky.diagonal().array() += hps[static_cast<std::size_t>(j)].noise_variance;
      const Eigen::VectorXd resid =
          ky * model.outputs[static_cast<std::size_t>(j)].weights - data.targets.col(j);
      CHECK(resid.lpNorm<Eigen::Infinity>() <= 1e-9);
      // Gram reconstruction from the stored factor
      const Eigen::MatrixXd l = model.outputs[static_cast<std::size_t>(j)].chol_factor;
      CHECK((l * l.transpose() - ky).lpNorm<Eigen::Infinity>() <=
            1e-10 * ky.lpNorm<Eigen::Infinity>());
    }
  }

  SECTION("zero noise variance is rejected") {
    gp::GpDataset data;
    data.inputs = Eigen::MatrixXd::Zero(2, 1);  // duplicated rows
    data.targets = Eigen::MatrixXd::Ones(2, 1);
    gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(1, 1.0, 1.0, 1e-6);
    hp.noise_variance = 0.0;
    CHECK_THROWS_AS(gp::fit_gp(data, {hp}), std::invalid_argument);
  }
}

TEST_CASE("log marginal likelihood") {
  SECTION("single point, zero target") {
    gp::GpDataset data;
    data.inputs = Eigen::MatrixXd::Zero(1, 1);
    data.targets = Eigen::MatrixXd::Zero(1, 1);
    gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(1, 1.0, 2.0, 0.5);
    const double expected = -std::log(std::sqrt(2.5)) - 0.5 * std::log(2.0 * M_PI);
    CHECK(gp::log_marginal_likelihood(data, hp, 0) == Approx(expected).epsilon(1e-13));
  }

  SECTION("analytic gradient matches central differences") {
    const gp::GpDataset data = random_dataset(12, 2, 1, 7);
    gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(2, 0.9, 1.4, 0.2);
    hp.lengthscales(1) = 1.7;
    const Eigen::VectorXd grad = gp::log_marginal_likelihood_grad(data, hp, 0);
    const double h = 1e-6;
    auto eval_log = [&](int param, double delta) {
      gp::KernelHyperparams p = hp;
      if (param < 2)
        p.lengthscales(param) *= std::exp(delta);
      else if (param == 2)
        p.signal_variance *= std::exp(delta);
      else
        p.noise_variance *= std::exp(delta);
      return gp::log_marginal_likelihood(data, p, 0);
    };
    for (int k = 0; k < 4; ++k) {
      const double fd = (eval_log(k, h) - eval_log(k, -h)) / (2.0 * h);
      CHECK(grad(k) == Approx(fd).epsilon(1e-5).margin(1e-9));
    }
  }

  SECTION("noise scan on pure-noise data") {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> normal(0.0, 1.0);
    gp::GpDataset data;
    data.inputs.resize(40, 1);
    data.targets.resize(40, 1);
    for (int i = 0; i < 40; ++i) {
      data.inputs(i, 0) = 10.0 * normal(rng);
      data.targets(i, 0) = normal(rng);
    }
    const double sample_var =
        data.targets.col(0).squaredNorm() / static_cast<double>(data.count());
    gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(1, 0.05, 1e-4, 0.0);
    double prev = -std::numeric_limits<double>::infinity();
    for (double sn2 = 0.05 * sample_var; sn2 < 0.9 * sample_var; sn2 *= 1.6) {
      hp.noise_variance = sn2;
      const double lml = gp::log_marginal_likelihood(data, hp, 0);
      CHECK(lml > prev);
      prev = lml;
    }
  }
}

TEST_CASE("posterior moments") {
  SECTION("prior model") {
    std::vector<gp::KernelHyperparams> hps{
        gp::KernelHyperparams::isotropic(2, 1.0, 2.5, 1e-4),
        gp::KernelHyperparams::isotropic(2, 0.3, 0.7, 1e-4)};
    const gp::MultiGpModel model = gp::prior_gp(2, hps);
    auto [mean, var] = gp::posterior_mean_cov(model, Eigen::Vector2d(4.0, -1.0));
    CHECK(mean.isZero(0.0));
    CHECK(var(0) == 2.5);
    CHECK(var(1) == 0.7);
    CHECK(gp::posterior_mean_jacobian(model, Eigen::Vector2d(4.0, -1.0)).isZero(0.0));
  }

  SECTION("noiseless interpolation") {
    gp::GpDataset data;
    data.inputs.resize(3, 1);
    data.inputs << -1.0, 0.2, 1.4;
    data.targets.resize(3, 1);
    data.targets << 0.5, -0.3, 2.0;
    gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(1, 0.7, 1.0, 1e-12);
    const gp::MultiGpModel model = gp::fit_gp(data, {hp});
    auto [mean, var] = gp::posterior_mean_cov(model, data.inputs.row(1).transpose());
    CHECK(mean(0) == Approx(-0.3).margin(1e-5));
    CHECK(var(0) <= 1e-5);
  }

  SECTION("dense-inverse oracle") {
    const gp::GpDataset data = random_dataset(15, 2, 2, 3);
    std::vector<gp::KernelHyperparams> hps{
        gp::KernelHyperparams::isotropic(2, 0.9, 1.2, 1e-2),
        gp::KernelHyperparams::isotropic(2, 1.4, 0.6, 1e-3)};
    const gp::MultiGpModel model = gp::fit_gp(data, hps);
    std::mt19937_64 rng(17);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int probe = 0; probe < 25; ++probe) {
      const Eigen::Vector2d z(normal(rng), normal(rng));
      auto [mean, var] = gp::posterior_mean_cov(model, z);
      for (int j = 0; j < 2; ++j) {
        const auto& hp = hps[static_cast<std::size_t>(j)];
        Eigen::MatrixXd ky = dense_gram(data, hp);
        ky.diagonal().array() += hp.noise_variance;
        Eigen::VectorXd kstar(data.count());
        for (Eigen::Index m = 0; m < data.count(); ++m)
          kstar(m) = gp::se_kernel(z, data.inputs.row(m), hp);
        const Eigen::MatrixXd ky_inv = ky.inverse();
        const double mean_ref = kstar.dot(ky_inv * data.targets.col(j));
        const double var_ref = hp.signal_variance - kstar.dot(ky_inv * kstar);
        CHECK(mean(j) == Approx(mean_ref).margin(1e-9));
        CHECK(var(j) == Approx(std::max(var_ref, 0.0)).margin(1e-9));
      }
    }
  }

  SECTION("variance clamp keeps small negatives at zero") {
    const gp::GpDataset data = random_dataset(25, 2, 1, 5);
    gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(2, 1.1, 1.0, 1e-6);
    const gp::MultiGpModel model = gp::fit_gp(data, {hp});
    std::mt19937_64 rng(11);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int probe = 0; probe < 50; ++probe) {
      const Eigen::Vector2d z(normal(rng), normal(rng));
      auto [mean, var] = gp::posterior_mean_cov(model, z);
      (void)mean;
      CHECK(var(0) >= 0.0);
      // pre-clamp value from the stored factor
      Eigen::VectorXd kstar(data.count());
      for (Eigen::Index m = 0; m < data.count(); ++m)
        kstar(m) = gp::se_kernel(z, data.inputs.row(m), hp);
      const Eigen::VectorXd v =
          model.outputs[0].chol_factor.triangularView<Eigen::Lower>().solve(kstar);
      const double raw = hp.signal_variance - v.squaredNorm();
      CHECK(raw >= -1e-8 * hp.signal_variance);
    }
  }

  SECTION("evaluation is pure") {
    const gp::GpDataset data = random_dataset(10, 2, 1, 31);
    gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(2, 0.8, 1.0, 1e-3);
    const gp::MultiGpModel model = gp::fit_gp(data, {hp});
    const Eigen::Vector2d z(0.4, -0.9);
    auto [m1, v1] = gp::posterior_mean_cov(model, z);
    auto [m2, v2] = gp::posterior_mean_cov(model, z);
    CHECK(std::memcmp(m1.data(), m2.data(), sizeof(double) * m1.size()) == 0);
    CHECK(std::memcmp(v1.data(), v2.data(), sizeof(double) * v1.size()) == 0);
    const Eigen::MatrixXd j1 = gp::posterior_mean_jacobian(model, z);
    const Eigen::MatrixXd j2 = gp::posterior_mean_jacobian(model, z);
    CHECK(std::memcmp(j1.data(), j2.data(), sizeof(double) * j1.size()) == 0);
  }
}

TEST_CASE("posterior mean jacobian") {
  SECTION("finite-difference oracle") {
    const gp::GpDataset data = random_dataset(12, 3, 2, 41);
    std::vector<gp::KernelHyperparams> hps{
        gp::KernelHyperparams::isotropic(3, 0.9, 1.0, 1e-3),
        gp::KernelHyperparams::isotropic(3, 1.5, 0.4, 1e-3)};
    const gp::MultiGpModel model = gp::fit_gp(data, hps);
    std::mt19937_64 rng(13);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double h = 1e-6;
    for (int probe = 0; probe < 20; ++probe) {
      Eigen::Vector3d z(normal(rng), normal(rng), normal(rng));
      const Eigen::MatrixXd jac = gp::posterior_mean_jacobian(model, z);
      for (int k = 0; k < 3; ++k) {
        Eigen::Vector3d zp = z, zm = z;
        zp(k) += h;
        zm(k) -= h;
        const Eigen::VectorXd fd =
            (gp::posterior_mean_cov(model, zp).first -
             gp::posterior_mean_cov(model, zm).first) /
            (2.0 * h);
        for (int j = 0; j < 2; ++j)
          CHECK(jac(j, k) == Approx(fd(j)).epsilon(1e-5).margin(1e-8));
      }
    }
  }

  SECTION("stationary at the single training input") {
    gp::GpDataset data;
    data.inputs = Eigen::MatrixXd::Constant(1, 2, 0.3);
    data.targets = Eigen::MatrixXd::Constant(1, 1, 1.0);
    gp::KernelHyperparams hp = gp::KernelHyperparams::isotropic(2, 0.5, 1.0, 1e-4);
    const gp::MultiGpModel model = gp::fit_gp(data, {hp});
    const Eigen::MatrixXd jac =
        gp::posterior_mean_jacobian(model, data.inputs.row(0).transpose());
    CHECK(jac.lpNorm<Eigen::Infinity>() <= 1e-14);
  }
}

TEST_CASE("hyperparameter ascent improves the likelihood") {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal(0.0, 1.0);
  gp::GpDataset data;
  data.inputs.resize(30, 1);
  data.targets.resize(30, 1);
  for (int i = 0; i < 30; ++i) {
    data.inputs(i, 0) = 2.0 * normal(rng);
    data.targets(i, 0) = std::sin(data.inputs(i, 0)) + 0.05 * normal(rng);
  }
  const gp::KernelHyperparams init = gp::KernelHyperparams::isotropic(1, 3.0, 0.1, 0.1);
  const gp::KernelHyperparams opt = gp::optimize_hyperparams(data, init, 0, 100);
  CHECK(gp::log_marginal_likelihood(data, opt, 0) >
        gp::log_marginal_likelihood(data, init, 0));
}

TEST_CASE("dataset CSV round trip") {
  const gp::GpDataset data = random_dataset(9, 4, 2, 55);
  std::stringstream ss;
  gp::write_dataset_csv(ss, data);
  const gp::GpDataset back = gp::read_dataset_csv(ss);
  REQUIRE(back.count() == data.count());
  REQUIRE(back.input_dim() == data.input_dim());
  REQUIRE(back.output_dim() == data.output_dim());
  CHECK((back.inputs - data.inputs).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK((back.targets - data.targets).lpNorm<Eigen::Infinity>() == 0.0);
}
