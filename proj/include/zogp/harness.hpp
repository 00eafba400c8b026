#pragma once

#include <Eigen/Dense>

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "zogp/chain.hpp"
#include "zogp/common.hpp"
#include "zogp/gp.hpp"
#include "zogp/integrator.hpp"
#include "zogp/sqp.hpp"
#include "zogp/svg.hpp"
#include "zogp/threading.hpp"

namespace zogp::bench {

enum class ControllerMode { nominal, zero_order, naive };

inline const char* to_string(ControllerMode m) {
  switch (m) {
    case ControllerMode::nominal: return "nominal";
    case ControllerMode::zero_order: return "zero_order";
    case ControllerMode::naive: return "naive";
  }
  return "?";
}

inline ControllerMode parse_mode(const std::string& s) {
  if (s == "nominal") return ControllerMode::nominal;
  if (s == "zero_order") return ControllerMode::zero_order;
  if (s == "naive") return ControllerMode::naive;
  throw std::invalid_argument("unknown controller mode: " + s);
}

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// GP prior/training settings for the benchmark. Features default to the
/// per-mass (x-position, x-velocity) pairs of the intermediate masses.
struct GpConfig {
  double lengthscale_pos = 0.05;
  double lengthscale_vel = 0.5;
  double signal_variance = 4e-4;
  double noise_variance = 1e-6;
  bool optimize_hyperparams = false;
};

struct ScalingConfig {
  std::vector<int> n_mass{3, 4, 5, 6, 7};
  std::vector<std::string> modes{"zero_order", "naive"};
  std::vector<int> data_sizes{0};
  int timed_iterations = 20;
  int warmup_iterations = 3;
  double naive_budget_seconds = 60.0;
};

struct ProfileConfig {
  int n_mass = 7;
  std::vector<int> data_sizes{0, 150, 1500};
  std::vector<int> worker_counts{1, 0};  // 0 = all hardware threads
  int iterations = 20;
  int warmup_iterations = 3;
};

struct ExperimentConfig {
  chain::ChainConfig chain;
  int horizon = 20;
  int closed_loop_steps = 60;
  int n_x0 = 10;
  std::uint64_t seed = 1;
  double wall_prob = 0.95;
  unc::TighteningMode tight_mode = unc::TighteningMode::gaussian;
  std::string out_dir = "results";
  int workers = 0;  // 0 = all hardware threads
  double u_bound = 1.0;
  double q_pos = 1.0;
  double q_vel = 0.1;
  double r_weight = 0.1;
  double q_term_scale = 10.0;
  double sigma_w = 1e-5;         // process-noise variance per channel in the OCP
  double t_init = 1.0;           // excitation duration, u_init = (1,1,1)
  double init_perturb_std = 0.01;
  double plant_noise_std = 0.0;  // additive noise on the B channel of the plant
  std::string feature_map = "mass_xv";  // or "full"
  GpConfig gp;
  int max_sqp_iter = 50;
  double tol_step = 1e-8;
  double qp_tol = 1e-8;
  ScalingConfig scaling;
  ProfileConfig profile;

  void validate() const {
    chain.validate();
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (n_x0 < 1) throw ConfigError("n_x0 must be >= 1");
    if (!(wall_prob > 0.0) || wall_prob > 1.0)
      throw ConfigError("wall_prob must lie in (0, 1]");
    if (scaling.n_mass.empty()) throw ConfigError("scaling.n_mass must be non-empty");
    if (scaling.modes.empty()) throw ConfigError("scaling.modes must be non-empty");
    if (feature_map != "mass_xv" && feature_map != "full")
      throw ConfigError("feature_map must be 'mass_xv' or 'full'");
  }
};

// ---------------------------------------------------------------------------
// Config file: JSON, documented in the README. Unknown keys are rejected.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_known_keys(const nlohmann::json& j,
                             const std::vector<std::string>& known,
                             const std::string& scope) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown config key '" + scope + key + "'");
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  detail::check_known_keys(
      j,
      {"chain", "horizon", "closed_loop_steps", "n_x0", "seed", "wall_prob",
       "tightening", "out_dir", "workers", "u_bound", "q_pos", "q_vel",
       "r_weight", "q_term_scale", "sigma_w", "t_init", "init_perturb_std",
       "plant_noise_std", "feature_map", "gp", "max_sqp_iter", "tol_step",
       "qp_tol", "scaling", "profile"},
      "");
  if (j.contains("chain")) {
    const auto& c = j.at("chain");
    detail::check_known_keys(c,
                             {"n_mass", "mass", "stiffness", "rest_length",
                              "alpha_lat", "beta1", "beta2", "gravity", "ts",
                              "y_wall"},
                             "chain.");
    detail::read_key(c, "n_mass", cfg.chain.n_mass);
    detail::read_key(c, "mass", cfg.chain.mass);
    detail::read_key(c, "stiffness", cfg.chain.stiffness);
    detail::read_key(c, "rest_length", cfg.chain.rest_length);
    detail::read_key(c, "alpha_lat", cfg.chain.alpha_lat);
    detail::read_key(c, "beta1", cfg.chain.beta1);
    detail::read_key(c, "beta2", cfg.chain.beta2);
    detail::read_key(c, "ts", cfg.chain.ts);
    detail::read_key(c, "y_wall", cfg.chain.y_wall);
    if (c.contains("gravity")) {
      const auto g = c.at("gravity").get<std::vector<double>>();
      if (g.size() != 3) throw ConfigError("chain.gravity must have 3 entries");
      cfg.chain.gravity = Eigen::Vector3d(g[0], g[1], g[2]);
    }
  }
  detail::read_key(j, "horizon", cfg.horizon);
  detail::read_key(j, "closed_loop_steps", cfg.closed_loop_steps);
  detail::read_key(j, "n_x0", cfg.n_x0);
  detail::read_key(j, "seed", cfg.seed);
  detail::read_key(j, "wall_prob", cfg.wall_prob);
  if (j.contains("tightening")) {
    const std::string mode = j.at("tightening").get<std::string>();
    if (mode == "gaussian")
      cfg.tight_mode = unc::TighteningMode::gaussian;
    else if (mode == "chebyshev")
      cfg.tight_mode = unc::TighteningMode::chebyshev;
    else
      throw ConfigError("tightening must be 'gaussian' or 'chebyshev'");
  }
  detail::read_key(j, "out_dir", cfg.out_dir);
  detail::read_key(j, "workers", cfg.workers);
  detail::read_key(j, "u_bound", cfg.u_bound);
  detail::read_key(j, "q_pos", cfg.q_pos);
  detail::read_key(j, "q_vel", cfg.q_vel);
  detail::read_key(j, "r_weight", cfg.r_weight);
  detail::read_key(j, "q_term_scale", cfg.q_term_scale);
  detail::read_key(j, "sigma_w", cfg.sigma_w);
  detail::read_key(j, "t_init", cfg.t_init);
  detail::read_key(j, "init_perturb_std", cfg.init_perturb_std);
  detail::read_key(j, "plant_noise_std", cfg.plant_noise_std);
  detail::read_key(j, "feature_map", cfg.feature_map);
  if (j.contains("gp")) {
    const auto& g = j.at("gp");
    detail::check_known_keys(g,
                             {"lengthscale_pos", "lengthscale_vel",
                              "signal_variance", "noise_variance",
                              "optimize_hyperparams"},
                             "gp.");
    detail::read_key(g, "lengthscale_pos", cfg.gp.lengthscale_pos);
    detail::read_key(g, "lengthscale_vel", cfg.gp.lengthscale_vel);
    detail::read_key(g, "signal_variance", cfg.gp.signal_variance);
    detail::read_key(g, "noise_variance", cfg.gp.noise_variance);
    detail::read_key(g, "optimize_hyperparams", cfg.gp.optimize_hyperparams);
  }
  detail::read_key(j, "max_sqp_iter", cfg.max_sqp_iter);
  detail::read_key(j, "tol_step", cfg.tol_step);
  detail::read_key(j, "qp_tol", cfg.qp_tol);
  if (j.contains("scaling")) {
    const auto& s = j.at("scaling");
    detail::check_known_keys(s,
                             {"n_mass", "modes", "data_sizes",
                              "timed_iterations", "warmup_iterations",
                              "naive_budget_seconds"},
                             "scaling.");
    detail::read_key(s, "n_mass", cfg.scaling.n_mass);
    detail::read_key(s, "modes", cfg.scaling.modes);
    detail::read_key(s, "data_sizes", cfg.scaling.data_sizes);
    detail::read_key(s, "timed_iterations", cfg.scaling.timed_iterations);
    detail::read_key(s, "warmup_iterations", cfg.scaling.warmup_iterations);
    detail::read_key(s, "naive_budget_seconds", cfg.scaling.naive_budget_seconds);
  }
  if (j.contains("profile")) {
    const auto& p = j.at("profile");
    detail::check_known_keys(p,
                             {"n_mass", "data_sizes", "worker_counts",
                              "iterations", "warmup_iterations"},
                             "profile.");
    detail::read_key(p, "n_mass", cfg.profile.n_mass);
    detail::read_key(p, "data_sizes", cfg.profile.data_sizes);
    detail::read_key(p, "worker_counts", cfg.profile.worker_counts);
    detail::read_key(p, "iterations", cfg.profile.iterations);
    detail::read_key(p, "warmup_iterations", cfg.profile.warmup_iterations);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config file not found: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse failure in " + path + ": " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config schema failure in " + path + ": " + e.what());
  }
}

inline std::string config_digest(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << cfg.chain.n_mass << cfg.chain.mass << cfg.chain.stiffness
     << cfg.chain.rest_length << cfg.chain.alpha_lat << cfg.chain.ts
     << cfg.chain.y_wall << cfg.horizon << cfg.closed_loop_steps << cfg.n_x0
     << cfg.seed << cfg.wall_prob << cfg.u_bound << cfg.q_pos << cfg.q_vel
     << cfg.r_weight << cfg.q_term_scale << cfg.sigma_w << cfg.t_init
     << cfg.init_perturb_std << cfg.plant_noise_std << cfg.feature_map
     << cfg.gp.lengthscale_pos << cfg.gp.lengthscale_vel
     << cfg.gp.signal_variance << cfg.gp.noise_variance;
  // FNV-1a 64
  std::uint64_t h = 1469598103934665603ULL;
  for (const char c : os.str()) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 1099511628211ULL;
  }
  std::ostringstream hex;
  hex << std::hex << h;
  return hex.str();
}

#ifndef ZOGP_GIT_HASH
#define ZOGP_GIT_HASH "unknown"
#endif

inline void write_csv_metadata(std::ostream& os, const ExperimentConfig& cfg) {
  os << "# zogp git=" << ZOGP_GIT_HASH << " seed=" << cfg.seed
     << " config_digest=" << config_digest(cfg) << "\n";
}

// ---------------------------------------------------------------------------
// Problem construction
// ---------------------------------------------------------------------------

inline chain::ChainConfig chain_config_for(const ExperimentConfig& cfg, int n_mass) {
  chain::ChainConfig c = cfg.chain;
  c.n_mass = n_mass;
  return c;
}

/// Feature selector z = S (x; u). "mass_xv": the (x-position, x-velocity)
/// pair of every intermediate mass; "full": the whole (x, u).
inline Eigen::MatrixXd feature_selector(const ExperimentConfig& cfg, int n_mass) {
  const chain::ChainConfig ch = chain_config_for(cfg, n_mass);
  const int nx = ch.state_dim();
  const int nu = 3;
  if (cfg.feature_map == "full")
    return Eigen::MatrixXd::Identity(nx + nu, nx + nu);
  const int nf = ch.free_masses();
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(2 * nf, nx + nu);
  for (int j = 0; j < nf; ++j) {
    s(2 * j, chain::mass_pos_index(ch, j)) = 1.0;       // x-position
    s(2 * j + 1, chain::mass_vel_index(ch, j)) = 1.0;   // x-velocity
  }
  return s;
}

inline std::vector<gp::KernelHyperparams> default_hyperparams(
    const ExperimentConfig& cfg, int n_mass) {
  const chain::ChainConfig ch = chain_config_for(cfg, n_mass);
  const int nw = 3 * ch.free_masses();
  const int nz = cfg.feature_map == "full"
                     ? ch.state_dim() + 3
                     : 2 * ch.free_masses();
  gp::KernelHyperparams hp;
  hp.lengthscales.resize(nz);
  if (cfg.feature_map == "full") {
    hp.lengthscales.setConstant(cfg.gp.lengthscale_vel);
  } else {
    for (int j = 0; j < nz / 2; ++j) {
      hp.lengthscales(2 * j) = cfg.gp.lengthscale_pos;
      hp.lengthscales(2 * j + 1) = cfg.gp.lengthscale_vel;
    }
  }
  hp.signal_variance = cfg.gp.signal_variance;
  hp.noise_variance = cfg.gp.noise_variance;
  return std::vector<gp::KernelHyperparams>(static_cast<std::size_t>(nw), hp);
}

/// Discrete nominal model psi: chain without the latent force.
inline dyn::DiscreteModel nominal_model(const chain::ChainConfig& ch) {
  chain::ChainConfig nominal = ch;
  nominal.alpha_lat = 0.0;
  dyn::DiscreteModel model;
  model.ode.nx = nominal.state_dim();
  model.ode.nu = 3;
  model.ode.f = [nominal](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    return chain::chain_ode(x, u, nominal);
  };
  model.ode.jacobian = [nominal](const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                 Eigen::MatrixXd& dfdx, Eigen::MatrixXd& dfdu) {
    chain::chain_ode_jacobian(x, u, nominal, dfdx, dfdu);
  };
  model.ts = ch.ts;
  return model;
}

/// True plant: chain including the latent force.
inline dyn::DiscreteModel plant_model(const chain::ChainConfig& ch) {
  dyn::DiscreteModel model;
  model.ode.nx = ch.state_dim();
  model.ode.nu = 3;
  model.ode.f = [ch](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    return chain::chain_ode(x, u, ch);
  };
  model.ode.jacobian = [ch](const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                            Eigen::MatrixXd& dfdx, Eigen::MatrixXd& dfdu) {
    chain::chain_ode_jacobian(x, u, ch, dfdx, dfdu);
  };
  model.ts = ch.ts;
  return model;
}

/// Builds the tracking OCP for the hanging chain: wall constraints on the
/// y-position of every free mass, hard input bounds, B selecting the
/// intermediate-velocity rows. `nominal` mode disables the uncertainty
/// description entirely (no GP, no process noise, hence zero backoffs).
inline sqp::OcpSpec build_chain_ocp(const ExperimentConfig& cfg, int n_mass,
                                    std::optional<gp::MultiGpModel> gp_model,
                                    ControllerMode mode = ControllerMode::zero_order) {
  if (n_mass < 3) throw std::invalid_argument("build_chain_ocp: n_mass must be >= 3");
  const chain::ChainConfig ch = chain_config_for(cfg, n_mass);
  const int nx = ch.state_dim();
  const int nf = ch.free_masses();
  const int nw = 3 * nf;

  sqp::OcpSpec spec;
  spec.horizon = cfg.horizon;
  spec.nx = nx;
  spec.nu = 3;
  spec.nw = nw;
  spec.model = dyn::make_discrete_dynamics(nominal_model(ch));
  if (mode == ControllerMode::nominal) {
    spec.gp_model.reset();
    spec.w_var = Eigen::VectorXd::Zero(nw);
  } else {
    spec.gp_model = std::move(gp_model);
    spec.w_var = Eigen::VectorXd::Constant(nw, cfg.sigma_w);
  }
  spec.feature_selector = feature_selector(cfg, n_mass);
  // B selects the velocity rows of the intermediate masses.
  spec.b_mat = Eigen::MatrixXd::Zero(nx, nw);
  for (int j = 0; j < nf; ++j)
    spec.b_mat.block<3, 3>(chain::mass_vel_index(ch, j), 3 * j).setIdentity();

  Eigen::VectorXd qdiag = Eigen::VectorXd::Constant(nx, cfg.q_pos);
  for (int j = 0; j < nf; ++j)
    qdiag.segment<3>(chain::mass_vel_index(ch, j)).setConstant(cfg.q_vel);
  spec.weight_x = qdiag.asDiagonal();
  spec.weight_u = cfg.r_weight * Eigen::MatrixXd::Identity(3, 3);
  spec.weight_term = cfg.q_term_scale * Eigen::MatrixXd(qdiag.asDiagonal());
  spec.x_ref = chain::resting_state(ch);
  spec.u_ref = Eigen::VectorXd::Zero(3);
  spec.x_current = spec.x_ref;

  // Wall constraints y_wall - p_y <= 0 for the controlled and intermediate
  // masses; tightening disabled in nominal mode via prob = 1.
  const double prob = mode == ControllerMode::nominal ? 1.0 : cfg.wall_prob;
  auto add_wall = [&](int y_index) {
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(nx + 3);
    row(y_index) = -1.0;
    spec.constraints.push_back(
        sqp::make_affine_constraint(row, ch.y_wall, prob, cfg.tight_mode));
  };
  add_wall(1);  // controlled mass y
  for (int j = 0; j < nf; ++j) add_wall(chain::mass_pos_index(ch, j) + 1);

  spec.input_bounds = sqp::InputBounds::box(3, cfg.u_bound);
  return spec;
}

inline sqp::SolverOptions solver_options(const ExperimentConfig& cfg,
                                         ControllerMode mode) {
  sqp::SolverOptions opts;
  opts.max_iter = cfg.max_sqp_iter;
  opts.tol_step = cfg.tol_step;
  opts.mode = mode == ControllerMode::naive ? sqp::SqpMode::naive
                                            : sqp::SqpMode::zero_order;
  opts.qp_settings.tol = cfg.qp_tol;
  opts.workers = cfg.workers;
  return opts;
}

inline std::pair<sqp::Iterate, sqp::SolverStats> solve_mode(
    const sqp::OcpSpec& spec, ControllerMode mode,
    std::optional<sqp::Iterate> init, const sqp::SolverOptions& opts) {
  if (mode == ControllerMode::naive)
    return sqp::solve_naive(spec, std::move(init), opts);
  return sqp::solve_zero_order(spec, std::move(init), opts);
}

// ---------------------------------------------------------------------------
// Plant simulation and closed-loop runs
// ---------------------------------------------------------------------------

/// Steps the true plant, optionally injecting process noise on the
/// B channel (i.i.d. Gaussian per component).
class PlantSim {
 public:
  PlantSim(const ExperimentConfig& cfg, int n_mass, std::uint64_t seed)
      : chain_(chain_config_for(cfg, n_mass)),
        model_(plant_model(chain_)),
        noise_std_(cfg.plant_noise_std),
        rng_(seed) {}

  const chain::ChainConfig& chain_config() const { return chain_; }

  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    Eigen::VectorXd next = dyn::irk_step(model_, x, u);
    if (noise_std_ > 0.0) {
      std::normal_distribution<double> normal(0.0, noise_std_);
      const int nf = chain_.free_masses();
      for (int j = 0; j < nf; ++j)
        for (int k = 0; k < 3; ++k)
          next(chain::mass_vel_index(chain_, j) + k) += normal(rng_);
    }
    return next;
  }

 private:
  chain::ChainConfig chain_;
  dyn::DiscreteModel model_;
  double noise_std_;
  std::mt19937_64 rng_;
};

/// Smallest y-distance of any free mass to the wall.
inline double wall_margin(const chain::ChainConfig& ch, const Eigen::VectorXd& x) {
  double margin = x(1) - ch.y_wall;  // controlled mass
  for (int j = 0; j < ch.free_masses(); ++j)
    margin = std::min(margin, x(chain::mass_pos_index(ch, j) + 1) - ch.y_wall);
  return margin;
}

inline int excitation_steps(const ExperimentConfig& cfg) {
  return static_cast<int>(std::llround(cfg.t_init / cfg.chain.ts));
}

struct DataGenReport {
  int requested_starts = 0;
  int successful_starts = 0;
  std::vector<int> failed_starts;
};

/// Training-data protocol: from each perturbed start, excite with
/// u_init = (1,1,1) for t_init, then run 15 closed-loop steps of nominal
/// MPC against the true plant, recording the model mismatch
/// B^T (x_meas(k+1) - psi(x_k, u_k)) with the configured feature map.
inline gp::GpDataset generate_training_data(const ExperimentConfig& cfg, int n_mass,
                                            std::uint64_t seed,
                                            DataGenReport* report = nullptr) {
  const chain::ChainConfig ch = chain_config_for(cfg, n_mass);
  const int nf = ch.free_masses();
  const int nw = 3 * nf;
  const Eigen::MatrixXd selector = feature_selector(cfg, n_mass);
  const int nz = static_cast<int>(selector.rows());
  const Eigen::VectorXd resting = chain::resting_state(ch);
  const dyn::DiscreteModel nominal = nominal_model(ch);
  constexpr int kStepsPerStart = 15;

  struct StartResult {
    bool ok = false;
    Eigen::MatrixXd inputs;
    Eigen::MatrixXd targets;
  };
  std::vector<StartResult> results(static_cast<std::size_t>(cfg.n_x0));
  const int workers = resolve_workers(cfg.workers);

  parallel_for(cfg.n_x0, workers, [&](int start) {
    StartResult& out = results[static_cast<std::size_t>(start)];
    try {
      std::mt19937_64 rng(split_seed(seed, static_cast<std::uint64_t>(start)));
      std::normal_distribution<double> normal(0.0, cfg.init_perturb_std);
      Eigen::VectorXd x = resting;
      x.head<3>() += Eigen::Vector3d(normal(rng), normal(rng), normal(rng));
      for (int j = 0; j < nf; ++j)
        for (int k = 0; k < 3; ++k)
          x(chain::mass_pos_index(ch, j) + k) += normal(rng);

      PlantSim plant(cfg, n_mass,
                     split_seed(seed, 1000 + static_cast<std::uint64_t>(start)));
      const Eigen::Vector3d u_init(1.0, 1.0, 1.0);
      for (int k = 0; k < excitation_steps(cfg); ++k) x = plant.step(x, u_init);

      sqp::OcpSpec spec =
          build_chain_ocp(cfg, n_mass, std::nullopt, ControllerMode::nominal);
      sqp::SolverOptions opts = solver_options(cfg, ControllerMode::nominal);
      opts.workers = 1;  // the starts themselves run in parallel
      out.inputs.resize(kStepsPerStart, nz);
      out.targets.resize(kStepsPerStart, nw);
      std::optional<sqp::Iterate> warm;
      for (int k = 0; k < kStepsPerStart; ++k) {
        spec.x_current = x;
        auto [it, stats] =
            sqp::solve_zero_order(spec, std::move(warm), opts);
        if (!stats.converged)
          throw NumericalError("nominal MPC did not converge during data generation");
        const Eigen::VectorXd u = it.u.front();
        const Eigen::VectorXd x_next = plant.step(x, u);
        const Eigen::VectorXd psi_next = dyn::irk_step(nominal, x, u);
        Eigen::VectorXd xu(x.size() + 3);
        xu << x, u;
        out.inputs.row(k) = (selector * xu).transpose();
        out.targets.row(k) =
            (spec.b_mat.transpose() * (x_next - psi_next)).transpose();
        warm = sqp::shift_iterate(spec, it, x_next);
        x = x_next;
      }
      out.ok = true;
    } catch (const std::exception&) {
      out.ok = false;
    }
  });

  gp::GpDataset data;
  int ok_count = 0;
  for (const auto& r : results)
    if (r.ok) ++ok_count;
  data.inputs.resize(kStepsPerStart * ok_count, nz);
  data.targets.resize(kStepsPerStart * ok_count, nw);
  int row = 0;
  if (report) {
    report->requested_starts = cfg.n_x0;
    report->successful_starts = ok_count;
    report->failed_starts.clear();
  }
  for (int start = 0; start < cfg.n_x0; ++start) {
    const auto& r = results[static_cast<std::size_t>(start)];
    if (!r.ok) {
      if (report) report->failed_starts.push_back(start);
      continue;
    }
    data.inputs.middleRows(row, kStepsPerStart) = r.inputs;
    data.targets.middleRows(row, kStepsPerStart) = r.targets;
    row += kStepsPerStart;
  }
  return data;
}

/// Fits the benchmark GP from a dataset using the configured hyperparameters
/// (optionally refined by marginal-likelihood ascent on the first output).
inline gp::MultiGpModel fit_benchmark_gp(const ExperimentConfig& cfg, int n_mass,
                                         const gp::GpDataset& data) {
  std::vector<gp::KernelHyperparams> hps = default_hyperparams(cfg, n_mass);
  if (data.count() == 0)
    return gp::prior_gp(static_cast<int>(feature_selector(cfg, n_mass).rows()), hps);
  if (cfg.gp.optimize_hyperparams) {
    const gp::KernelHyperparams tuned =
        gp::optimize_hyperparams(data, hps.front(), 0, 200);
    for (auto& hp : hps) hp = tuned;
  }
  return gp::fit_gp(data, hps);
}

struct ClosedLoopLog {
  struct Row {
    int step = 0;
    Eigen::VectorXd input;
    Eigen::VectorXd state;
    int sqp_iterations = 0;
    bool solved = false;
    double solve_seconds = 0.0;
    double margin = 0.0;
  };
  std::vector<Row> rows;
  double min_margin = std::numeric_limits<double>::infinity();
  int violations = 0;

  void write_csv(std::ostream& os, const ExperimentConfig& cfg) const {
    write_csv_metadata(os, cfg);
    os << "step,margin,solved,sqp_iterations,solve_seconds";
    if (!rows.empty()) {
      for (Eigen::Index k = 0; k < rows.front().input.size(); ++k)
        os << ",u_" << k;
    }
    os << "\n";
    os.precision(17);
    for (const auto& r : rows) {
      os << r.step << "," << r.margin << "," << (r.solved ? 1 : 0) << ","
         << r.sqp_iterations << "," << r.solve_seconds;
      for (Eigen::Index k = 0; k < r.input.size(); ++k) os << "," << r.input(k);
      os << "\n";
    }
  }
};

/// Closed-loop simulation: excitation with u_init for t_init, then receding-
/// horizon control toward the resting state. On solver failure the previous
/// input is re-applied and the step is logged as unsolved.
inline ClosedLoopLog run_closed_loop(const ExperimentConfig& cfg,
                                     ControllerMode mode,
                                     std::optional<gp::MultiGpModel> gp_model,
                                     int steps, std::uint64_t seed) {
  const int n_mass = cfg.chain.n_mass;
  const chain::ChainConfig ch = chain_config_for(cfg, n_mass);
  PlantSim plant(cfg, n_mass, split_seed(seed, 7));
  sqp::OcpSpec spec = build_chain_ocp(cfg, n_mass, std::move(gp_model), mode);
  const sqp::SolverOptions opts = solver_options(cfg, mode);

  ClosedLoopLog log;
  Eigen::VectorXd x = spec.x_ref;
  auto record = [&](int k, const Eigen::VectorXd& u, bool solved, int iters,
                    double seconds) {
    ClosedLoopLog::Row row;
    row.step = k;
    row.input = u;
    row.state = x;
    row.solved = solved;
    row.sqp_iterations = iters;
    row.solve_seconds = seconds;
    row.margin = wall_margin(ch, x);
    log.min_margin = std::min(log.min_margin, row.margin);
    if (row.margin < 0.0) ++log.violations;
    log.rows.push_back(std::move(row));
  };

  const Eigen::Vector3d u_init(1.0, 1.0, 1.0);
  int k = 0;
  for (; k < excitation_steps(cfg); ++k) {
    x = plant.step(x, u_init);
    record(k, u_init, true, 0, 0.0);
  }
  std::optional<sqp::Iterate> warm;
  Eigen::VectorXd u_prev = Eigen::VectorXd::Zero(3);
  for (int step = 0; step < steps; ++step, ++k) {
    spec.x_current = x;
    Eigen::VectorXd u = u_prev;
    bool solved = false;
    int iters = 0;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      auto [it, stats] = solve_mode(spec, mode, std::move(warm), opts);
      solved = stats.converged;
      iters = stats.iterations;
      u = it.u.front();
      warm = sqp::shift_iterate(spec, it, Eigen::VectorXd(x));  // x updated below
    } catch (const std::exception&) {
      warm.reset();
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    x = plant.step(x, u);
    if (warm) warm->mu[0] = x;
    u_prev = u;
    record(k, u, solved, iters, seconds);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Scaling and profiling experiments
// ---------------------------------------------------------------------------

struct ScalingRow {
  int n_mass = 0;
  int n_x = 0;
  std::string mode;
  int data_size = 0;
  int workers = 1;
  double median_iter_seconds = 0.0;
  std::string status;  // ok | timed_out | skipped
};

struct ScalingTable {
  std::vector<ScalingRow> rows;

  void write_csv(std::ostream& os, const ExperimentConfig& cfg) const {
    write_csv_metadata(os, cfg);
    os << "n_x,mode,data_size,workers,median_iter_seconds,status\n";
    os.precision(17);
    for (const auto& r : rows)
      os << r.n_x << "," << r.mode << "," << r.data_size << "," << r.workers
         << "," << r.median_iter_seconds << "," << r.status << "\n";
  }
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

/// Post-excitation state used as the timing scenario.
inline Eigen::VectorXd excited_state(const ExperimentConfig& cfg, int n_mass) {
  const chain::ChainConfig ch = chain_config_for(cfg, n_mass);
  const dyn::DiscreteModel plant = plant_model(ch);
  Eigen::VectorXd x = chain::resting_state(ch);
  for (int k = 0; k < excitation_steps(cfg); ++k)
    x = dyn::irk_step(plant, x, Eigen::Vector3d(1.0, 1.0, 1.0));
  return x;
}

}  // namespace detail

/// Per-iteration SQP timings over the n_mass sweep. Every grid point runs
/// warmup + timed iterations with convergence checks disabled, reporting the
/// median. Naive rows stop at the first size whose single iteration exceeds
/// the budget (projected costs skip hopeless sizes up front).
inline ScalingTable run_scaling_experiment(const ExperimentConfig& cfg) {
  ScalingTable table;
  std::map<std::pair<int, int>, gp::MultiGpModel> gp_cache;
  auto gp_for = [&](int n_mass, int d) -> gp::MultiGpModel {
    const auto key = std::make_pair(n_mass, d);
    auto found = gp_cache.find(key);
    if (found != gp_cache.end()) return found->second;
    gp::MultiGpModel model;
    if (d == 0) {
      model = fit_benchmark_gp(cfg, n_mass, gp::GpDataset{});
    } else {
      ExperimentConfig gen = cfg;
      gen.n_x0 = (d + 14) / 15;
      const gp::GpDataset data =
          generate_training_data(gen, n_mass, split_seed(cfg.seed, 77));
      model = fit_benchmark_gp(cfg, n_mass, data);
    }
    gp_cache.emplace(key, model);
    return model;
  };

  for (const std::string& mode_name : cfg.scaling.modes) {
    const ControllerMode mode = parse_mode(mode_name);
    const std::vector<int> data_sizes =
        mode == ControllerMode::zero_order ? cfg.scaling.data_sizes
                                           : std::vector<int>{0};
    for (const int d : data_sizes) {
      double prev_seconds = 0.0;
      int prev_nx = 0;
      bool stop_sweep = false;
      for (const int n_mass : cfg.scaling.n_mass) {
        const chain::ChainConfig ch = chain_config_for(cfg, n_mass);
        ScalingRow row;
        row.n_mass = n_mass;
        row.n_x = ch.state_dim();
        row.mode = mode_name;
        row.data_size = d;
        row.workers = resolve_workers(cfg.workers);
        if (stop_sweep) {
          row.status = "skipped";
          table.rows.push_back(row);
          continue;
        }
        if (mode == ControllerMode::naive && prev_nx > 0) {
          // augmented KKT dimension grows ~ nx^2; LU cost ~ dim^3
          const double ratio = std::pow(
              static_cast<double>(row.n_x) / prev_nx, 6.0);
          if (prev_seconds * ratio > cfg.scaling.naive_budget_seconds) {
            row.status = "skipped";
            table.rows.push_back(row);
            stop_sweep = true;
            continue;
          }
        }

        sqp::OcpSpec spec = build_chain_ocp(
            cfg, n_mass,
            mode == ControllerMode::nominal
                ? std::nullopt
                : std::optional<gp::MultiGpModel>(gp_for(n_mass, d)),
            mode);
        spec.x_current = detail::excited_state(cfg, n_mass);
        sqp::SolverOptions opts = solver_options(cfg, mode);
        opts.force_iterations = true;
        opts.max_iter =
            cfg.scaling.warmup_iterations + cfg.scaling.timed_iterations;
        if (mode == ControllerMode::naive)
          opts.dense_settings.time_budget_seconds =
              cfg.scaling.naive_budget_seconds;
        try {
          auto [it, stats] = solve_mode(spec, mode, std::nullopt, opts);
          (void)it;
          std::vector<double> timed(
              stats.iter_seconds.begin() + cfg.scaling.warmup_iterations,
              stats.iter_seconds.end());
          row.median_iter_seconds = detail::median(timed);
          row.status = "ok";
          if (mode == ControllerMode::naive &&
              row.median_iter_seconds > cfg.scaling.naive_budget_seconds) {
            row.status = "timed_out";
            stop_sweep = true;
          }
          prev_seconds = row.median_iter_seconds;
          prev_nx = row.n_x;
        } catch (const NumericalError&) {
          row.status = "timed_out";
          stop_sweep = true;
        }
        table.rows.push_back(row);
      }
    }
  }
  return table;
}

inline void write_scaling_outputs(const ExperimentConfig& cfg,
                                  const ScalingTable& table) {
  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream os(cfg.out_dir + "/scaling.csv");
    if (!os) throw std::runtime_error("cannot write scaling.csv");
    table.write_csv(os, cfg);
  }
  std::map<std::string, SvgSeries> series;
  for (const auto& r : table.rows) {
    if (r.status != "ok") continue;
    std::ostringstream label;
    label << r.mode;
    if (r.mode == "zero_order") label << "-cpu" << r.workers << "-" << r.data_size;
    series[label.str()].label = label.str();
    series[label.str()].points.emplace_back(r.n_x, r.median_iter_seconds);
  }
  std::vector<SvgSeries> list;
  for (auto& [label, s] : series) list.push_back(std::move(s));
  write_loglog_svg(cfg.out_dir + "/scaling.svg",
                   "SQP timings vs state dimension", "n_x",
                   "median seconds per SQP iteration", list);
}

struct ProfileRow {
  int data_size = 0;
  int workers = 1;
  double integrator = 0.0;
  double gp_eval = 0.0;
  double prop_tight = 0.0;
  double qp_solve = 0.0;
  double interface = 0.0;

  double total() const {
    return integrator + gp_eval + prop_tight + qp_solve + interface;
  }
};

struct ProfileTable {
  std::vector<ProfileRow> rows;

  void write_csv(std::ostream& os, const ExperimentConfig& cfg) const {
    write_csv_metadata(os, cfg);
    os << "data_size,workers,integrator,gp_eval,prop_tight,qp_solve,interface,"
          "share_integrator,share_gp_eval,share_prop_tight,share_qp_solve,"
          "share_interface\n";
    os.precision(17);
    for (const auto& r : rows) {
      const double t = std::max(r.total(), 1e-300);
      os << r.data_size << "," << r.workers << "," << r.integrator << ","
         << r.gp_eval << "," << r.prop_tight << "," << r.qp_solve << ","
         << r.interface << "," << r.integrator / t << "," << r.gp_eval / t
         << "," << r.prop_tight / t << "," << r.qp_solve / t << ","
         << r.interface / t << "\n";
    }
  }
};

/// Timing profile of the zero-order solver at the configured n_mass across
/// data sizes and worker counts.
inline ProfileTable run_profile_experiment(const ExperimentConfig& cfg) {
  ProfileTable table;
  const int n_mass = cfg.profile.n_mass;
  std::map<int, gp::MultiGpModel> gp_cache;
  for (const int d : cfg.profile.data_sizes) {
    gp::MultiGpModel model;
    if (d == 0) {
      model = fit_benchmark_gp(cfg, n_mass, gp::GpDataset{});
    } else {
      ExperimentConfig gen = cfg;
      gen.n_x0 = (d + 14) / 15;
      const gp::GpDataset data =
          generate_training_data(gen, n_mass, split_seed(cfg.seed, 78));
      model = fit_benchmark_gp(cfg, n_mass, data);
    }
    for (const int workers : cfg.profile.worker_counts) {
      sqp::OcpSpec spec = build_chain_ocp(cfg, n_mass, model,
                                          ControllerMode::zero_order);
      spec.x_current = detail::excited_state(cfg, n_mass);
      sqp::SolverOptions opts = solver_options(cfg, ControllerMode::zero_order);
      opts.workers = workers;
      opts.force_iterations = true;
      // warmup solve, then the measured solve
      opts.max_iter = cfg.profile.warmup_iterations;
      solve_mode(spec, ControllerMode::zero_order, std::nullopt, opts);
      opts.max_iter = cfg.profile.iterations;
      auto [it, stats] =
          solve_mode(spec, ControllerMode::zero_order, std::nullopt, opts);
      (void)it;
      ProfileRow row;
      row.data_size = d;
      row.workers = resolve_workers(workers);
      row.integrator = stats.time_integrator;
      row.gp_eval = stats.time_gp;
      row.prop_tight = stats.time_prop_tight;
      row.qp_solve = stats.time_qp;
      row.interface = stats.time_interface;
      table.rows.push_back(row);
    }
  }
  return table;
}

inline void write_profile_outputs(const ExperimentConfig& cfg,
                                  const ProfileTable& table) {
  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream os(cfg.out_dir + "/profile.csv");
    if (!os) throw std::runtime_error("cannot write profile.csv");
    table.write_csv(os, cfg);
  }
  std::vector<std::string> groups;
  std::vector<std::vector<double>> values;
  for (const auto& r : table.rows) {
    std::ostringstream label;
    label << "D=" << r.data_size << " workers=" << r.workers;
    groups.push_back(label.str());
    values.push_back({r.integrator, r.gp_eval, r.prop_tight, r.qp_solve,
                      r.interface});
  }
  write_stacked_bars_svg(cfg.out_dir + "/profile.svg",
                         "Zero-order timing profile",
                         {"integrator", "gp_eval", "prop_tight", "qp_solve",
                          "interface"},
                         groups, values);
}

}  // namespace zogp::bench
