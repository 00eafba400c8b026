#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <cstring>
#include <random>

#include "zogp/harness.hpp"
#include "zogp/sqp.hpp"

using namespace zogp;
using Catch::Approx;

namespace {

/// Tracking LQR spec on a random stable linear system; no uncertainty.
sqp::OcpSpec lqr_spec(int nx, int nu, int horizon, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a(nx, nx), b(nx, nu);
  for (int r = 0; r < nx; ++r) {
    for (int c = 0; c < nx; ++c) a(r, c) = 0.3 * normal(rng);
    for (int c = 0; c < nu; ++c) b(r, c) = normal(rng);
  }
  sqp::OcpSpec spec;
  spec.horizon = horizon;
  spec.nx = nx;
  spec.nu = nu;
  spec.nw = 1;
  spec.model = dyn::make_linear_dynamics(a, b);
  spec.feature_selector = Eigen::MatrixXd::Identity(nx + nu, nx + nu);
  spec.b_mat = Eigen::MatrixXd::Zero(nx, 1);
  spec.b_mat(0, 0) = 1.0;
  spec.w_var = Eigen::VectorXd::Zero(1);
  spec.weight_x = Eigen::MatrixXd::Identity(nx, nx);
  spec.weight_u = 0.5 * Eigen::MatrixXd::Identity(nu, nu);
  spec.weight_term = 2.0 * Eigen::MatrixXd::Identity(nx, nx);
  spec.x_ref = Eigen::VectorXd::Zero(nx);
  spec.u_ref = Eigen::VectorXd::Zero(nu);
  spec.input_bounds = sqp::InputBounds::none(nu);
  spec.x_current = Eigen::VectorXd::NullaryExpr(nx, [&]() { return normal(rng); });
  return spec;
}

/// Textbook backward Riccati sweep for the tracking-to-zero LQR; the oracle
/// for the linear-problem tests.
std::pair<std::vector<Eigen::VectorXd>, std::vector<Eigen::VectorXd>> lqr_oracle(
    const sqp::OcpSpec& spec) {
  Eigen::MatrixXd a, b;
  spec.model.sensitivities(spec.x_current, Eigen::VectorXd::Zero(spec.nu), a, b);
  std::vector<Eigen::MatrixXd> p(static_cast<std::size_t>(spec.horizon) + 1);
  std::vector<Eigen::MatrixXd> gains(static_cast<std::size_t>(spec.horizon));
  p.back() = spec.weight_term;
  for (int i = spec.horizon - 1; i >= 0; --i) {
    const Eigen::MatrixXd& pn = p[static_cast<std::size_t>(i) + 1];
    const Eigen::MatrixXd g = spec.weight_u + b.transpose() * pn * b;
    gains[static_cast<std::size_t>(i)] = g.ldlt().solve(b.transpose() * pn * a);
    const Eigen::MatrixXd acl = a - b * gains[static_cast<std::size_t>(i)];
    p[static_cast<std::size_t>(i)] =
        spec.weight_x + gains[static_cast<std::size_t>(i)].transpose() *
                            spec.weight_u * gains[static_cast<std::size_t>(i)] +
        acl.transpose() * pn * acl;
  }
  std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(spec.horizon) + 1);
  std::vector<Eigen::VectorXd> us(static_cast<std::size_t>(spec.horizon));
  xs[0] = spec.x_current;
  for (int i = 0; i < spec.horizon; ++i) {
    us[static_cast<std::size_t>(i)] =
        -gains[static_cast<std::size_t>(i)] * xs[static_cast<std::size_t>(i)];
    xs[static_cast<std::size_t>(i) + 1] =
        a * xs[static_cast<std::size_t>(i)] + b * us[static_cast<std::size_t>(i)];
  }
  return {xs, us};
}

bench::ExperimentConfig small_chain_config(int horizon = 10) {
  bench::ExperimentConfig cfg;
  cfg.horizon = horizon;
  cfg.workers = 1;
  return cfg;
}

sqp::OcpSpec excited_chain_spec(const bench::ExperimentConfig& cfg, int n_mass,
                                bench::ControllerMode mode) {
  auto gpm = bench::fit_benchmark_gp(cfg, n_mass, gp::GpDataset{});
  sqp::OcpSpec spec = bench::build_chain_ocp(cfg, n_mass, gpm, mode);
  spec.x_current = bench::detail::excited_state(cfg, n_mass);
  return spec;
}

}  // namespace

TEST_CASE("linearize_stage") {
  bench::ExperimentConfig cfg = small_chain_config();
  sqp::OcpSpec spec = excited_chain_spec(cfg, 3, bench::ControllerMode::zero_order);

  SECTION("prior GP leaves the nominal sensitivity untouched") {
    const sqp::Iterate it = sqp::make_initial_guess(spec);
    const sqp::StageData st = sqp::linearize_stage(
        spec, it.mu[0], it.u[0], it.mu[1], Eigen::MatrixXd::Zero(spec.nx, spec.nx));
    Eigen::MatrixXd dpsi_dx, dpsi_du;
    spec.model.sensitivities(it.mu[0], it.u[0], dpsi_dx, dpsi_du);
    CHECK((st.a_tilde - dpsi_dx).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((st.b_tilde - dpsi_du).lpNorm<Eigen::Infinity>() == 0.0);
  }

  SECTION("rolled-in trajectory has zero dynamics residual") {
    const sqp::Iterate it = sqp::make_initial_guess(spec);
    for (int i = 0; i < spec.horizon; ++i) {
      const sqp::StageData st = sqp::linearize_stage(
          spec, it.mu[static_cast<std::size_t>(i)], it.u[static_cast<std::size_t>(i)],
          it.mu[static_cast<std::size_t>(i) + 1],
          Eigen::MatrixXd::Zero(spec.nx, spec.nx));
      CHECK(st.residual.lpNorm<Eigen::Infinity>() <= 1e-12);
    }
  }

  SECTION("a_tilde matches finite differences of the mean map") {
    // dataset-backed GP so the jacobian includes the GP term
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal(0.0, 0.05);
    gp::GpDataset data;
    data.inputs.resize(12, 2);
    data.targets.resize(12, 3);
    for (int i = 0; i < 12; ++i) {
      for (int k = 0; k < 2; ++k) data.inputs(i, k) = normal(rng) * 4.0;
      for (int k = 0; k < 3; ++k) data.targets(i, k) = normal(rng);
    }
    spec.gp_model = gp::fit_gp(data, bench::default_hyperparams(cfg, 3));
    const sqp::Iterate it = sqp::make_initial_guess(spec);
    const sqp::StageData st = sqp::linearize_stage(
        spec, it.mu[0], it.u[0], it.mu[1], Eigen::MatrixXd::Zero(spec.nx, spec.nx));
    auto mean_map = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
      Eigen::VectorXd xu(spec.nx + spec.nu);
      xu << x, u;
      return (spec.model.step(x, u) +
              spec.b_mat *
                  gp::posterior_mean_cov(*spec.gp_model, spec.feature_selector * xu)
                      .first)
          .eval();
    };
    const double h = 1e-6;
    double worst = 0.0;
    for (int k = 0; k < spec.nx; ++k) {
      Eigen::VectorXd xp = it.mu[0], xm = it.mu[0];
      xp(k) += h;
      xm(k) -= h;
      const Eigen::VectorXd fd = (mean_map(xp, it.u[0]) - mean_map(xm, it.u[0])) / (2 * h);
      worst = std::max(worst, (st.a_tilde.col(k) - fd).lpNorm<Eigen::Infinity>());
    }
    CHECK(worst <= 1e-5 * std::max(1.0, st.a_tilde.lpNorm<Eigen::Infinity>()));
  }
}

TEST_CASE("zero-order solver on linear-quadratic problems") {
  const sqp::OcpSpec spec = lqr_spec(4, 2, 8, 11);
  const auto [xs_ref, us_ref] = lqr_oracle(spec);
  sqp::SolverOptions opts;
  opts.workers = 1;

  SECTION("one iteration lands on the optimum") {
    sqp::SolverStats stats;
    const sqp::Iterate it =
        sqp::zero_order_iteration(spec, sqp::make_initial_guess(spec), opts, stats);
    for (int i = 0; i <= spec.horizon; ++i)
      CHECK((it.mu[static_cast<std::size_t>(i)] - xs_ref[static_cast<std::size_t>(i)])
                .lpNorm<Eigen::Infinity>() <= 1e-8);
    for (int i = 0; i < spec.horizon; ++i)
      CHECK((it.u[static_cast<std::size_t>(i)] - us_ref[static_cast<std::size_t>(i)])
                .lpNorm<Eigen::Infinity>() <= 1e-8);
  }

  SECTION("full solve converges and matches the closed form") {
    auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, opts);
    CHECK(stats.converged);
    CHECK(stats.iterations <= 3);
    for (int i = 0; i <= spec.horizon; ++i)
      CHECK((it.mu[static_cast<std::size_t>(i)] - xs_ref[static_cast<std::size_t>(i)])
                .lpNorm<Eigen::Infinity>() <= 1e-8);
  }

  SECTION("fixed point produces a zero step") {
    auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, opts);
    REQUIRE(stats.converged);
    sqp::SolverStats extra;
    const sqp::Iterate again = sqp::zero_order_iteration(spec, it, opts, extra);
    CHECK(again.step_norm <= 1e-9);
  }

  SECTION("tail too short for contraction measurement") {
    sqp::SolverOptions forced = opts;
    forced.force_iterations = true;
    forced.max_iter = 4;
    auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, forced);
    REQUIRE(stats.step_norms.size() == 4);
    const sqp::ContractionReport rep = sqp::measure_contraction(stats.step_norms);
    CHECK(std::isfinite(rep.kappa_estimate));
    CHECK(!rep.ratios.empty());
  }
}

TEST_CASE("zero-order solver on the chain") {
  bench::ExperimentConfig cfg = small_chain_config();
  const sqp::OcpSpec spec = excited_chain_spec(cfg, 3, bench::ControllerMode::zero_order);
  sqp::SolverOptions opts = bench::solver_options(cfg, bench::ControllerMode::zero_order);
  opts.workers = 1;

  SECTION("converges feasibly and contracts") {
    auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, opts);
    REQUIRE(stats.converged);
    const sqp::FeasibilityReport rep = sqp::check_feasibility(spec, it);
    CHECK(rep.max_residual() <= 1e-6);
    // step norms decrease monotonically after the second iteration
    for (std::size_t k = 1; k + 1 < stats.step_norms.size(); ++k)
      CHECK(stats.step_norms[k + 1] < stats.step_norms[k]);
    REQUIRE(stats.step_norms.size() >= 3);
    const sqp::ContractionReport rep2 = sqp::measure_contraction(stats.step_norms);
    CHECK(rep2.kappa_estimate < 1.0);
  }

  SECTION("hand-perturbed trajectory is flagged infeasible") {
    auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, opts);
    REQUIRE(stats.converged);
    sqp::Iterate bad = it;
    bad.mu[3](1) += 0.1;
    const sqp::FeasibilityReport rep = sqp::check_feasibility(spec, bad);
    CHECK(rep.mean_dynamics >= 0.05);
  }

  SECTION("huge process noise voids the convergence guarantee") {
    sqp::OcpSpec noisy = spec;
    noisy.w_var = spec.w_var * 1e4;
    // Lemma-3 regime violated: completion without convergence or a QP
    // failure are both acceptable outcomes; only a clean report is required.
    try {
      auto [it, stats] = sqp::solve_zero_order(noisy, std::nullopt, opts);
      CHECK(stats.iterations >= 1);
    } catch (const sqp::QpFailure& e) {
      CHECK(e.status == qp::QpStatus::infeasible);
    }
  }

  SECTION("identical runs are bit-identical") {
    auto [it1, stats1] = sqp::solve_zero_order(spec, std::nullopt, opts);
    auto [it2, stats2] = sqp::solve_zero_order(spec, std::nullopt, opts);
    REQUIRE(it1.mu.size() == it2.mu.size());
    for (std::size_t i = 0; i < it1.mu.size(); ++i)
      CHECK(std::memcmp(it1.mu[i].data(), it2.mu[i].data(),
                        sizeof(double) * static_cast<std::size_t>(it1.mu[i].size())) == 0);
    for (std::size_t i = 0; i < it1.u.size(); ++i)
      CHECK(std::memcmp(it1.u[i].data(), it2.u[i].data(),
                        sizeof(double) * static_cast<std::size_t>(it1.u[i].size())) == 0);
  }

  SECTION("stats accounting stays within the measured total") {
    auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, opts);
    CHECK(stats.category_sum() <= 1.05 * stats.time_total);
    CHECK(stats.time_integrator >= 0.0);
    CHECK(stats.iter_seconds.size() == static_cast<std::size_t>(stats.iterations));
  }

  SECTION("solver trace CSV") {
    auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, opts);
    std::stringstream ss;
    stats.write_trace_csv(ss);
    std::string header;
    std::getline(ss, header);
    CHECK(header == "iter,step_norm,dyn_residual,seconds");
    int rows = 0;
    for (std::string line; std::getline(ss, line);) ++rows;
    CHECK(rows == stats.iterations);
  }
}

TEST_CASE("naive covariance-augmented solver") {
  bench::ExperimentConfig cfg = small_chain_config();

  SECTION("identical step to zero-order on an LQR instance") {
    const sqp::OcpSpec spec = lqr_spec(3, 2, 6, 21);
    sqp::SolverOptions opts;
    opts.workers = 1;
    sqp::SolverStats s1, s2;
    qp::DenseKktSolver dense;
    const sqp::Iterate init = sqp::make_initial_guess(spec);
    const sqp::Iterate a = sqp::zero_order_iteration(spec, init, opts, s1);
    const sqp::Iterate b = sqp::naive_iteration(spec, init, opts, s2, dense);
    for (int i = 0; i <= spec.horizon; ++i)
      CHECK((a.mu[static_cast<std::size_t>(i)] - b.mu[static_cast<std::size_t>(i)])
                .lpNorm<Eigen::Infinity>() <= 1e-7);
    for (int i = 0; i < spec.horizon; ++i)
      CHECK((a.u[static_cast<std::size_t>(i)] - b.u[static_cast<std::size_t>(i)])
                .lpNorm<Eigen::Infinity>() <= 1e-7);
  }

  SECTION("chain: converges, feasible, and at most the zero-order cost") {
    const sqp::OcpSpec spec = excited_chain_spec(cfg, 3, bench::ControllerMode::zero_order);
    sqp::SolverOptions opts = bench::solver_options(cfg, bench::ControllerMode::zero_order);
    opts.workers = 1;
    auto [it_zo, st_zo] = sqp::solve_zero_order(spec, std::nullopt, opts);
    REQUIRE(st_zo.converged);
    auto [it_nv, st_nv] = sqp::solve_naive(spec, std::nullopt, opts);
    REQUIRE(st_nv.converged);
    const sqp::FeasibilityReport rep = sqp::check_feasibility(spec, it_nv);
    CHECK(rep.max_residual() <= 1e-6);
    CHECK(sqp::cost_value(spec, it_nv) <= sqp::cost_value(spec, it_zo) + 1e-6);
  }

  SECTION("certainty limit reduces both modes to nominal SQP") {
    bench::ExperimentConfig certain = cfg;
    sqp::OcpSpec spec =
        bench::build_chain_ocp(certain, 3, std::nullopt, bench::ControllerMode::nominal);
    spec.constraints.clear();
    spec.input_bounds = sqp::InputBounds::none(3);
    spec.x_current = bench::detail::excited_state(certain, 3);
    sqp::SolverOptions opts = bench::solver_options(certain, bench::ControllerMode::nominal);
    opts.workers = 1;
    auto [it_zo, st_zo] = sqp::solve_zero_order(spec, std::nullopt, opts);
    auto [it_nv, st_nv] = sqp::solve_naive(spec, std::nullopt, opts);
    REQUIRE(st_zo.converged);
    REQUIRE(st_nv.converged);
    for (int i = 0; i <= spec.horizon; ++i) {
      CHECK((it_zo.mu[static_cast<std::size_t>(i)] - it_nv.mu[static_cast<std::size_t>(i)])
                .lpNorm<Eigen::Infinity>() <= 1e-8);
      CHECK(it_nv.p.sigmas[static_cast<std::size_t>(i)].lpNorm<Eigen::Infinity>() <= 1e-12);
    }
  }

  SECTION("conditioned datasets are rejected") {
    sqp::OcpSpec spec = excited_chain_spec(cfg, 3, bench::ControllerMode::zero_order);
    gp::GpDataset data;
    data.inputs = Eigen::MatrixXd::Random(5, 2);
    data.targets = Eigen::MatrixXd::Random(5, 3);
    spec.gp_model = gp::fit_gp(data, bench::default_hyperparams(cfg, 3));
    CHECK_THROWS_AS(sqp::solve_naive(spec, std::nullopt, sqp::SolverOptions{}),
                    UnsupportedConfiguration);
  }
}

TEST_CASE("fixed-covariance heuristic violates the covariance equation") {
  bench::ExperimentConfig cfg = small_chain_config();
  cfg.sigma_w = 3e-3;  // visible covariance levels
  sqp::OcpSpec spec_a = excited_chain_spec(cfg, 3, bench::ControllerMode::zero_order);
  sqp::SolverOptions opts = bench::solver_options(cfg, bench::ControllerMode::zero_order);
  opts.workers = 1;
  auto [it_a, st_a] = sqp::solve_zero_order(spec_a, std::nullopt, opts);
  REQUIRE(st_a.converged);

  // reference step: the target chain jumps 0.3 m in y; covariances stay
  // frozen at the pre-step values
  sqp::OcpSpec spec_b = spec_a;
  const chain::ChainConfig ch = bench::chain_config_for(cfg, 3);
  spec_b.x_ref(1) += 0.3;
  for (int j = 0; j < ch.free_masses(); ++j)
    spec_b.x_ref(chain::mass_pos_index(ch, j) + 1) += 0.3;
  auto [it_heur, st_heur] =
      sqp::solve_with_frozen_covariance(spec_b, it_a.p, std::nullopt, opts);
  REQUIRE(st_heur.converged);
  const sqp::FeasibilityReport rep_heur = sqp::check_feasibility(spec_b, it_heur);
  CHECK(rep_heur.covariance >= 1e-3);

  auto [it_zo, st_zo] = sqp::solve_zero_order(spec_b, std::nullopt, opts);
  REQUIRE(st_zo.converged);
  const sqp::FeasibilityReport rep_zo = sqp::check_feasibility(spec_b, it_zo);
  CHECK(rep_zo.max_residual() <= 1e-6);
}

TEST_CASE("measure_contraction") {
  SECTION("geometric step sequence") {
    std::vector<double> steps;
    double s = 1.0;
    for (int k = 0; k < 20; ++k) {
      steps.push_back(s);
      s *= 0.3;
    }
    const sqp::ContractionReport rep = sqp::measure_contraction(steps);
    CHECK(rep.kappa_estimate == Approx(0.3).margin(0.05));
  }

  SECTION("too few steps") {
    CHECK_THROWS_AS(sqp::measure_contraction({1.0, 0.5}), std::invalid_argument);
  }
}

TEST_CASE("jacobian_error_norm") {
  SECTION("linear dynamics with constant uncertainty give zero") {
    sqp::OcpSpec spec = lqr_spec(3, 2, 5, 33);
    sqp::SolverOptions opts;
    opts.workers = 1;
    auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, opts);
    REQUIRE(stats.converged);
    CHECK(sqp::jacobian_error_norm(spec, it) <= 1e-9);
  }

  SECTION("power-iteration estimate matches the dense oracle within 10%") {
    bench::ExperimentConfig cfg = small_chain_config(6);
    cfg.sigma_w = 1e-4;
    sqp::OcpSpec spec = excited_chain_spec(cfg, 3, bench::ControllerMode::zero_order);
    sqp::SolverOptions opts = bench::solver_options(cfg, bench::ControllerMode::zero_order);
    opts.workers = 1;
    auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, opts);
    REQUIRE(stats.converged);
    const double estimate = sqp::jacobian_error_norm(spec, it);

    // independent oracle: finite differences of the recursion-based residual,
    // full dense Jacobian, exact spectral norm by SVD
    const Eigen::VectorXd p_vec = it.p.vectorized();
    auto residual = [&](const std::vector<Eigen::VectorXd>& mu,
                        const std::vector<Eigen::VectorXd>& u) {
      const int n2 = spec.nx * spec.nx;
      Eigen::VectorXd g((spec.horizon + 1) * n2);
      g.head(n2) = p_vec.head(n2);
      for (int i = 0; i < spec.horizon; ++i) {
        const std::size_t si = static_cast<std::size_t>(i);
        Eigen::MatrixXd dpsi_dx, dpsi_du;
        spec.model.sensitivities(mu[si], u[si], dpsi_dx, dpsi_du);
        Eigen::VectorXd xu(spec.nx + spec.nu);
        xu << mu[si], u[si];
        const Eigen::VectorXd z = spec.feature_selector * xu;
        const Eigen::MatrixXd gj =
            gp::posterior_mean_jacobian(*spec.gp_model, z) * spec.feature_selector;
        const Eigen::MatrixXd a_tilde = dpsi_dx + spec.b_mat * gj.leftCols(spec.nx);
        const Eigen::VectorXd var = gp::posterior_mean_cov(*spec.gp_model, z).second;
        const Eigen::MatrixXd sigma_prev =
            unvectorize(p_vec.segment(i * n2, n2), spec.nx, spec.nx);
        const Eigen::MatrixXd sigma_next =
            unvectorize(p_vec.segment((i + 1) * n2, n2), spec.nx, spec.nx);
        const Eigen::MatrixXd pred =
            a_tilde * sigma_prev * a_tilde.transpose() +
            spec.b_mat * (var + spec.w_var).asDiagonal() * spec.b_mat.transpose();
        g.segment((i + 1) * n2, n2) = vectorize(sigma_next) - vectorize(pred);
      }
      return g;
    };
    const int ny = spec.nx + spec.nu;
    Eigen::MatrixXd jac((spec.horizon + 1) * spec.nx * spec.nx,
                        spec.horizon * ny);
    std::vector<Eigen::VectorXd> mu = it.mu;
    std::vector<Eigen::VectorXd> u = it.u;
    for (int k = 0; k < spec.horizon * ny; ++k) {
      const int stage = k / ny;
      const int local = k % ny;
      double* slot = local < spec.nx ? &mu[static_cast<std::size_t>(stage)](local)
                                     : &u[static_cast<std::size_t>(stage)](local - spec.nx);
      const double base = *slot;
      const double h = 1e-6 * std::max(1.0, std::abs(base));
      *slot = base + h;
      const Eigen::VectorXd gp_val = residual(mu, u);
      *slot = base - h;
      const Eigen::VectorXd gm_val = residual(mu, u);
      *slot = base;
      jac.col(k) = (gp_val - gm_val) / (2.0 * h);
    }
    const double oracle =
        jac.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).singularValues()(0);
    CHECK(estimate == Approx(oracle).epsilon(0.10));
  }
}

TEST_CASE("warm-start shift keeps dimensions and the measured state") {
  bench::ExperimentConfig cfg = small_chain_config();
  const sqp::OcpSpec spec = excited_chain_spec(cfg, 3, bench::ControllerMode::zero_order);
  sqp::SolverOptions opts = bench::solver_options(cfg, bench::ControllerMode::zero_order);
  opts.workers = 1;
  auto [it, stats] = sqp::solve_zero_order(spec, std::nullopt, opts);
  const Eigen::VectorXd x_meas = it.mu[1];
  const sqp::Iterate shifted = sqp::shift_iterate(spec, it, x_meas);
  REQUIRE(shifted.mu.size() == it.mu.size());
  CHECK((shifted.mu[0] - x_meas).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK((shifted.u[0] - it.u[1]).lpNorm<Eigen::Infinity>() == 0.0);
  auto [it2, stats2] = sqp::solve_zero_order(spec, shifted, opts);
  CHECK(stats2.iterations <= stats.iterations);
}
