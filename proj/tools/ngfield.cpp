#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ngfield/io.hpp"

namespace {

using namespace ngfield;

struct Context {
  RunConfig cfg;
  Mesh mesh;
  FemOperators ops;
  Eigen::MatrixXd b_gamma;  // node covariates for drift (constant column)
  Eigen::MatrixXd b_mu;     // node covariates for skew
};

Context make_context(const std::string& config_path, bool seed_given, std::uint64_t seed,
                     bool transform_given, const std::string& transform) {
  Context ctx;
  ctx.cfg = load_config(config_path);
  if (seed_given) {
    ctx.cfg.seed = seed;
    ctx.cfg.gibbs.seed = seed;
    ctx.cfg.mcem.gibbs.seed = seed;
  }
  if (transform_given) ctx.cfg.transform = transform_from_name(transform);
  ctx.mesh = make_mesh(ctx.cfg.mesh);
  ctx.cfg.mesh.dimension = ctx.mesh.dimension;
  ctx.ops = assemble_operators(ctx.mesh);
  const int n = ctx.ops.n;
  if (ctx.cfg.params.noise.family == NoiseFamily::gaussian) {
    ctx.b_gamma = Eigen::MatrixXd::Zero(n, 0);
    ctx.b_mu = Eigen::MatrixXd::Zero(n, 0);
  } else {
    ctx.b_gamma = Eigen::MatrixXd::Ones(n, 1);
    ctx.b_mu = Eigen::MatrixXd::Ones(n, 1);
  }
  return ctx;
}

// Core rectangle for lattice/simulation targets: the configured rectangle,
// or the bounding box of the nodes when the mesh came from a file.
Rect core_rect(const Context& ctx) {
  if (ctx.cfg.mesh.file.empty())
    return Rect{ctx.cfg.mesh.x0, ctx.cfg.mesh.y0, ctx.cfg.mesh.x1, ctx.cfg.mesh.y1};
  Rect r{ctx.mesh.nodes[0][0], ctx.mesh.nodes[0][1], ctx.mesh.nodes[0][0], ctx.mesh.nodes[0][1]};
  for (const auto& p : ctx.mesh.nodes) {
    r.x0 = std::min(r.x0, p[0]);
    r.y0 = std::min(r.y0, p[1]);
    r.x1 = std::max(r.x1, p[0]);
    r.y1 = std::max(r.y1, p[1]);
  }
  return r;
}

void apply_sqrt_transform(LoadedData* ld) {
  for (int r : ld->observed) {
    if (ld->y[r] < 0)
      throw NonPositiveArgument("sqrt transform requires non-negative observations");
    ld->y[r] = std::sqrt(ld->y[r]);
  }
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

void print_params(std::ostream& os, const ModelParams& p) {
  os << "  kappa     = " << fmt17(p.kappa) << "\n";
  os << "  sigma_eps = " << fmt17(p.sigma_eps) << "\n";
  switch (p.noise.family) {
    case NoiseFamily::gaussian:
      os << "  phi       = " << fmt17(p.noise.phi) << "\n";
      break;
    case NoiseFamily::gal:
      os << "  sigma     = " << fmt17(p.noise.sigma) << "\n";
      os << "  tau       = " << fmt17(p.noise.tau) << "\n";
      break;
    case NoiseFamily::nig:
      os << "  sigma     = " << fmt17(p.noise.sigma) << "\n";
      os << "  nu        = " << fmt17(p.noise.nu) << "\n";
      break;
  }
  for (Eigen::Index i = 0; i < p.beta.size(); ++i)
    os << "  beta_" << i << "    = " << fmt17(p.beta[i]) << "\n";
  for (Eigen::Index i = 0; i < p.noise.drift.size(); ++i)
    os << "  drift_" << i << "   = " << fmt17(p.noise.drift[i]) << "\n";
  for (Eigen::Index i = 0; i < p.noise.mu.size(); ++i)
    os << "  mu_" << i << "      = " << fmt17(p.noise.mu[i]) << "\n";
}

int cmd_simulate(Context& ctx, const std::string& data_path, const std::string& out_dir) {
  const RunConfig& cfg = ctx.cfg;
  const int dim = ctx.mesh.dimension;
  if (cfg.sim.replicates < 1) throw ConfigError("simulate.replicates must be at least 1");

  std::vector<std::array<double, 2>> locs;
  Eigen::MatrixXd b_obs;
  if (!data_path.empty()) {
    LoadedData ld = load_dataset(data_path, cfg.covariates);
    if (ld.dimension != dim)
      throw DimensionMismatch("data coordinate dimension does not match the mesh");
    locs = ld.locations;
    b_obs = ld.b;
  } else {
    if (!cfg.covariates.empty())
      throw ConfigError("simulate with covariates requires --data with covariate values");
    const Rect r = core_rect(ctx);
    RngStream loc_rng(RngStream::derive(cfg.seed, 101));
    locs.resize(static_cast<std::size_t>(std::max(0, cfg.sim.n_obs)));
    for (auto& p : locs) {
      p[0] = r.x0 + loc_rng.uniform() * (r.x1 - r.x0);
      p[1] = dim == 2 ? r.y0 + loc_rng.uniform() * (r.y1 - r.y0) : 0.0;
    }
    b_obs = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(locs.size()), 1);
  }

  const int n = ctx.ops.n;
  const int reps = cfg.sim.replicates;
  RngStream field_rng(RngStream::derive(cfg.seed, 102));
  Eigen::MatrixXd fields(n, reps);
  Eigen::VectorXd w_first;
  for (int r = 0; r < reps; ++r) {
    LatentState st = simulate_latent(cfg.params, ctx.ops, ctx.b_gamma, ctx.b_mu, field_rng);
    fields.col(r) = st.w;
    if (r == 0) w_first = st.w;
  }

  // field.csv: node coordinates, interior flag, one column per replicate.
  {
    std::vector<std::string> cols;
    cols.push_back("x");
    if (dim == 2) cols.push_back("y");
    cols.push_back("interior");
    if (reps == 1) {
      cols.push_back("w");
    } else {
      for (int r = 0; r < reps; ++r) cols.push_back("w_" + std::to_string(r));
    }
    Eigen::MatrixXd vals(n, static_cast<Eigen::Index>(cols.size()));
    for (int i = 0; i < n; ++i) {
      Eigen::Index c = 0;
      vals(i, c++) = ctx.mesh.nodes[static_cast<std::size_t>(i)][0];
      if (dim == 2) vals(i, c++) = ctx.mesh.nodes[static_cast<std::size_t>(i)][1];
      vals(i, c++) = ctx.mesh.interior[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
      for (int r = 0; r < reps; ++r) vals(i, c++) = fields(i, r);
    }
    write_csv(join_path(out_dir, "field.csv"), cols, vals);
  }

  // observations.csv from the first replicate.
  {
    ObservationMatrix a = build_observation_matrix(ctx.mesh, locs);
    a.require_all_inside();
    Eigen::VectorXd y;
    if (!locs.empty()) {
      RngStream obs_rng(RngStream::derive(cfg.seed, 103));
      y = simulate_observations(cfg.params, a, b_obs, w_first, obs_rng);
    }
    std::vector<std::string> cols;
    cols.push_back("x");
    if (dim == 2) cols.push_back("y");
    cols.push_back("obs");
    for (const std::string& c : cfg.covariates) cols.push_back(c);
    Eigen::MatrixXd vals(static_cast<Eigen::Index>(locs.size()),
                         static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < locs.size(); ++i) {
      const Eigen::Index ri = static_cast<Eigen::Index>(i);
      Eigen::Index c = 0;
      vals(ri, c++) = locs[i][0];
      if (dim == 2) vals(ri, c++) = locs[i][1];
      vals(ri, c++) = y[ri];
      for (std::size_t j = 0; j < cfg.covariates.size(); ++j)
        vals(ri, c++) = b_obs(ri, 1 + static_cast<Eigen::Index>(j));
    }
    write_csv(join_path(out_dir, "observations.csv"), cols, vals);
  }

  RunConfig truth = cfg;
  truth.dataset = "";
  truth.trace = "";
  save_model(join_path(out_dir, "truth.json"), truth);

  std::cout << "simulate: " << reps << " replicate(s) on " << n << " nodes, " << locs.size()
            << " observation(s)\n";
  return 0;
}

int cmd_fit(Context& ctx, const std::string& data_path, const std::string& out_dir) {
  RunConfig& cfg = ctx.cfg;
  std::string path = !data_path.empty() ? data_path : cfg.dataset;
  if (path.empty()) throw ConfigError("fit requires --data or a 'dataset' entry in the config");

  LoadedData ld = load_dataset(path, cfg.covariates);
  if (ld.dimension != ctx.mesh.dimension)
    throw DimensionMismatch("data coordinate dimension does not match the mesh");
  if (cfg.transform == ObsTransform::sqrt_back) apply_sqrt_transform(&ld);
  Dataset data = ld.observed_data(ctx.b_gamma, ctx.b_mu);
  if (data.y.size() == 0) throw ConfigError("dataset has no observed rows to fit");

  ObservationMatrix a = build_observation_matrix(ctx.mesh, data.locations);
  a.require_all_inside();

  FitResult fit = mcem_fit(data, ctx.ops, a, cfg.params, cfg.mcem);
  for (const std::string& w : fit.warnings) std::cerr << "warning: " << w << "\n";

  write_trace(join_path(out_dir, "trace.csv"), fit);
  RunConfig model = cfg;
  model.params = fit.params;
  model.dataset = path;
  model.trace = "trace.csv";
  save_model(join_path(out_dir, "model.json"), model);

  std::cout << "fit: family=" << family_name(cfg.params.noise.family)
            << " iterations=" << fit.iterations << " termination=" << fit.termination << "\n";
  print_params(std::cout, fit.params);
  return 0;
}

int cmd_predict(Context& ctx, const std::string& data_path, const std::string& out_dir) {
  const RunConfig& cfg = ctx.cfg;
  const int dim = ctx.mesh.dimension;
  if (cfg.dataset.empty())
    throw ConfigError("predict requires a model config with a recorded 'dataset' path");

  LoadedData ld = load_dataset(cfg.dataset, cfg.covariates);
  if (ld.dimension != dim)
    throw DimensionMismatch("data coordinate dimension does not match the mesh");
  if (cfg.transform == ObsTransform::sqrt_back) apply_sqrt_transform(&ld);
  Dataset data = ld.observed_data(ctx.b_gamma, ctx.b_mu);
  if (data.y.size() == 0) throw ConfigError("dataset has no observed rows to condition on");
  ObservationMatrix a = build_observation_matrix(ctx.mesh, data.locations);
  a.require_all_inside();

  // Target locations from --data (all rows), possibly empty.
  std::vector<std::array<double, 2>> t_locs;
  Eigen::MatrixXd t_b;
  if (!data_path.empty()) {
    LoadedData lt = load_dataset(data_path, cfg.covariates);
    if (lt.dimension != dim)
      throw DimensionMismatch("prediction locations dimension does not match the mesh");
    t_locs = lt.locations;
    t_b = lt.b;
  } else {
    t_b = Eigen::MatrixXd::Zero(0, 1 + static_cast<Eigen::Index>(cfg.covariates.size()));
  }
  ObservationMatrix a_t = build_observation_matrix(ctx.mesh, t_locs);
  for (int r : a_t.outside)
    std::cerr << "warning: prediction row " << r << " is outside the mesh\n";

  // Lattice over the core rectangle.
  const Rect r = core_rect(ctx);
  if (cfg.grid.nx < 2 || (dim == 2 && cfg.grid.ny < 2))
    throw ConfigError("grid.nx/grid.ny must be at least 2");
  std::vector<std::array<double, 2>> g_locs;
  if (dim == 2) {
    g_locs.reserve(static_cast<std::size_t>(cfg.grid.nx) * static_cast<std::size_t>(cfg.grid.ny));
    for (int iy = 0; iy < cfg.grid.ny; ++iy)
      for (int ix = 0; ix < cfg.grid.nx; ++ix)
        g_locs.push_back({r.x0 + (r.x1 - r.x0) * ix / (cfg.grid.nx - 1),
                          r.y0 + (r.y1 - r.y0) * iy / (cfg.grid.ny - 1)});
  } else {
    for (int ix = 0; ix < cfg.grid.nx; ++ix)
      g_locs.push_back({r.x0 + (r.x1 - r.x0) * ix / (cfg.grid.nx - 1), 0.0});
  }
  ObservationMatrix a_g = build_observation_matrix(ctx.mesh, g_locs);
  a_g.require_all_inside();

  GibbsModel model(cfg.params, ctx.ops, a, data);
  const bool const_prec = cfg.params.noise.family == NoiseFamily::gaussian;
  KrigingAccumulator acc_t(a_t.a, true, const_prec);
  KrigingAccumulator acc_g(a_g.a, true, const_prec);
  std::vector<GibbsConsumer*> consumers{&acc_t, &acc_g};
  LatentState chain;
  GibbsConfig gc = cfg.gibbs;
  gc.seed = RngStream::derive(cfg.seed, 201);
  gibbs_run(model, &chain, gc, consumers);

  const double nan = std::numeric_limits<double>::quiet_NaN();

  // predictions.csv for the target rows (original order, NaN outside).
  {
    PredictionResult pt = acc_t.finalize();
    std::vector<bool> is_outside(t_locs.size(), false);
    for (int idx : a_t.outside) is_outside[static_cast<std::size_t>(idx)] = true;
    std::vector<std::string> cols;
    cols.push_back("x");
    if (dim == 2) cols.push_back("y");
    cols.push_back("mean_mc");
    cols.push_back("mean_rb");
    cols.push_back("var_mc");
    cols.push_back("var_rb");
    Eigen::MatrixXd vals(static_cast<Eigen::Index>(t_locs.size()),
                         static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < t_locs.size(); ++i) {
      const Eigen::Index ri = static_cast<Eigen::Index>(i);
      Eigen::Index c = 0;
      vals(ri, c++) = t_locs[i][0];
      if (dim == 2) vals(ri, c++) = t_locs[i][1];
      if (is_outside[i]) {
        vals(ri, c++) = nan;
        vals(ri, c++) = nan;
        vals(ri, c++) = nan;
        vals(ri, c++) = nan;
        continue;
      }
      const double fixed = t_b.row(ri).dot(cfg.params.beta);
      double m_mc = pt.mean_mc[ri] + fixed;
      double m_rb = pt.mean_rb[ri] + fixed;
      double v_mc = pt.var_mc[ri];
      double v_rb = pt.var_rb[ri];
      if (cfg.transform == ObsTransform::sqrt_back) {
        const double m1 = m_mc, v1 = v_mc;
        m_mc = m1 * m1 + v1;
        v_mc = 2.0 * v1 * v1 + 4.0 * m1 * m1 * v1;
        const double m2 = m_rb, v2 = v_rb;
        m_rb = m2 * m2 + v2;
        v_rb = 2.0 * v2 * v2 + 4.0 * m2 * m2 * v2;
      }
      vals(ri, c++) = m_mc;
      vals(ri, c++) = m_rb;
      vals(ri, c++) = v_mc;
      vals(ri, c++) = v_rb;
    }
    write_csv(join_path(out_dir, "predictions.csv"), cols, vals);
  }

  // grid.csv: latent field map (posterior mean and standard deviation).
  {
    PredictionResult pg = acc_g.finalize();
    std::vector<std::string> cols;
    cols.push_back("x");
    if (dim == 2) cols.push_back("y");
    cols.push_back("mean");
    cols.push_back("sd");
    Eigen::MatrixXd vals(static_cast<Eigen::Index>(g_locs.size()),
                         static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < g_locs.size(); ++i) {
      const Eigen::Index ri = static_cast<Eigen::Index>(i);
      Eigen::Index c = 0;
      vals(ri, c++) = g_locs[i][0];
      if (dim == 2) vals(ri, c++) = g_locs[i][1];
      vals(ri, c++) = pg.mean_rb[ri];
      vals(ri, c++) = std::sqrt(std::max(0.0, pg.var_rb[ri]));
    }
    write_csv(join_path(out_dir, "grid.csv"), cols, vals);
  }

  std::cout << "predict: " << t_locs.size() << " target row(s) (" << a_t.outside.size()
            << " outside), grid " << cfg.grid.nx << (dim == 2 ? "x" + std::to_string(cfg.grid.ny) : "")
            << "\n";
  return 0;
}

int cmd_crossval(Context& ctx, const std::string& data_path, const std::string& out_dir) {
  RunConfig& cfg = ctx.cfg;
  std::string path = !data_path.empty() ? data_path : cfg.dataset;
  if (path.empty()) throw ConfigError("crossval requires --data or a 'dataset' entry in the config");

  LoadedData ld = load_dataset(path, cfg.covariates);
  if (ld.dimension != ctx.mesh.dimension)
    throw DimensionMismatch("data coordinate dimension does not match the mesh");
  if (cfg.transform == ObsTransform::sqrt_back) apply_sqrt_transform(&ld);
  Dataset data = ld.observed_data(ctx.b_gamma, ctx.b_mu);
  if (data.y.size() == 0) throw ConfigError("dataset has no observed rows");
  ObservationMatrix a = build_observation_matrix(ctx.mesh, data.locations);
  a.require_all_inside();

  ModelParams theta = cfg.params;
  if (cfg.cv.fit_full && !cfg.cv.refit) {
    FitResult fit = mcem_fit(data, ctx.ops, a, cfg.params, cfg.mcem);
    for (const std::string& w : fit.warnings) std::cerr << "warning: " << w << "\n";
    theta = fit.params;
  }

  CrossvalOptions opt;
  opt.folds = cfg.cv.folds;
  opt.seed = RngStream::derive(cfg.seed, 301);
  opt.refit = cfg.cv.refit;
  opt.gibbs = cfg.gibbs;
  opt.mcem = cfg.mcem;
  opt.transform = cfg.transform;
  CrossvalResult res = crossval(data, ctx.ops, ctx.mesh, theta, opt);

  write_scores(join_path(out_dir, "scores.json"), res.scores);
  {
    std::vector<std::string> cols{"r", "r_s", "fold"};
    Eigen::MatrixXd vals(res.residual.size(), 3);
    for (Eigen::Index i = 0; i < res.residual.size(); ++i) {
      vals(i, 0) = res.residual[i];
      vals(i, 1) = res.residual_std[i];
      vals(i, 2) = static_cast<double>(res.fold_of[static_cast<std::size_t>(i)]);
    }
    write_csv(join_path(out_dir, "residuals.csv"), cols, vals);
  }

  std::cout << "crossval: folds=" << cfg.cv.folds << " n=" << res.residual.size() << "\n";
  std::cout << "  var_rs     = " << fmt17(res.scores.var_rs) << "\n";
  std::cout << "  mean_r     = " << fmt17(res.scores.mean_r) << "\n";
  std::cout << "  var_r      = " << fmt17(res.scores.var_r) << "\n";
  std::cout << "  mean_abs_r = " << fmt17(res.scores.mean_abs_r) << "\n";
  std::cout << "  crps       = " << fmt17(res.scores.crps) << "\n";
  std::cout << "  energy     = " << fmt17(res.scores.energy) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"simulation, fitting, and prediction for non-gaussian matern random fields"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_dir = ".", transform_str;
  std::uint64_t seed = 0;

  CLI::App* sub[4];
  sub[0] = app.add_subcommand("simulate", "draw fields and observations from the model");
  sub[1] = app.add_subcommand("fit", "estimate parameters by monte carlo em");
  sub[2] = app.add_subcommand("predict", "krige a fitted model at new locations");
  sub[3] = app.add_subcommand("crossval", "k-fold predictive cross-validation");
  for (CLI::App* s : sub) {
    s->add_option("--config", config_path, "json configuration or fitted model file")->required();
    s->add_option("--data", data_path, "csv with locations/observations");
    s->add_option("--out", out_dir, "output directory (default: current)");
    s->add_option("--transform", transform_str, "observation transform: none or sqrt");
    s->add_option("--seed", seed, "override the configured rng seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    std::filesystem::create_directories(out_dir);
    Context ctx = make_context(config_path, sub[0]->count("--seed") + sub[1]->count("--seed") +
                                                    sub[2]->count("--seed") +
                                                    sub[3]->count("--seed") >
                                                0,
                               seed,
                               sub[0]->count("--transform") + sub[1]->count("--transform") +
                                       sub[2]->count("--transform") +
                                       sub[3]->count("--transform") >
                                   0,
                               transform_str);
    if (sub[0]->parsed()) return cmd_simulate(ctx, data_path, out_dir);
    if (sub[1]->parsed()) return cmd_fit(ctx, data_path, out_dir);
    if (sub[2]->parsed()) return cmd_predict(ctx, data_path, out_dir);
    return cmd_crossval(ctx, data_path, out_dir);
  } catch (const ngfield::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    const bool numerical = dynamic_cast<const NotPositiveDefinite*>(&e) != nullptr ||
                           dynamic_cast<const SingularQpar*>(&e) != nullptr ||
                           dynamic_cast<const BracketFailure*>(&e) != nullptr ||
                           dynamic_cast<const RankDeficientB*>(&e) != nullptr ||
                           dynamic_cast<const MomentUndefined*>(&e) != nullptr ||
                           dynamic_cast<const PatternNotCovered*>(&e) != nullptr;
    return numerical ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
