// Acceptance gate: ten numbered end-to-end checks over the assembled library
// and command-line tool. Each run covers one criterion and prints exactly one
// line,
//     criterion N: PASS (<measured detail>)
// or  criterion N: FAIL (<measured detail>)
// and exits nonzero on failure. Every tolerance is pinned as a named
// constant below; nothing is read from the environment except NGFIELD_BIN
// for the determinism check.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ngfield/errors.hpp"
#include "ngfield/gig.hpp"
#include "ngfield/inference.hpp"
#include "ngfield/io.hpp"
#include "ngfield/mesh.hpp"
#include "ngfield/model.hpp"
#include "ngfield/prediction.hpp"
#include "ngfield/rng.hpp"
#include "ngfield/sparse.hpp"
#include "oracle.hpp"

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---- pinned tolerances -----------------------------------------------------
constexpr double kCovRelTol = 0.05;        // discrete field covariance vs closed form
constexpr double kGigMomentTol = 1e-6;     // mixing moments vs quadrature
constexpr double kGigKsTol = 0.01;         // sampler KS distance at 1e5 draws
constexpr double kToyRelTol = 0.02;        // tiny-field posterior means vs quadrature
constexpr double kMlRelTol = 0.05;         // em estimates vs direct maximum likelihood
constexpr double kRecoveryRelTol = 0.25;   // parameter recovery at desk scale
constexpr double kAscentFraction = 0.90;   // smoothed objective must rise this often
constexpr double kAscentSpanFrac = 1e-3;   // dip allowance relative to the total climb
constexpr double kRbWinFraction = 0.80;    // sites where the smoothed mean must not lose
constexpr double kExactRbTol = 1e-10;      // one-sweep gaussian kriging identity
constexpr double kMstepMatchTol = 1e-10;   // streamed vs recomputed statistics
constexpr double kSelInvTol = 1e-8;        // selected inverse vs dense inverse
constexpr double kCrpsRelTol = 0.01;       // crps of a standard normal forecast
constexpr double kEnergyMatchTol = 1e-12;  // energy score vs crps at one location
constexpr double kCalibLo = 0.9;           // standardized residual variance window
constexpr double kCalibHi = 1.1;

struct Outcome {
  bool ok = false;
  std::string detail;
};

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(4);
  os << x;
  return os.str();
}

double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(std::abs(want), 1e-12);
}

VectorXd scalar_vec(double x) {
  VectorXd v(1);
  v(0) = x;
  return v;
}

double column_variance(const VectorXd& col) {
  const double m = col.mean();
  return (col.array() - m).square().sum() / static_cast<double>(col.size() - 1);
}

ngfield::ModelParams gaussian_params(double kappa, double phi, double sigma_eps, double beta0) {
  ngfield::ModelParams p;
  p.kappa = kappa;
  p.sigma_eps = sigma_eps;
  p.beta = scalar_vec(beta0);
  p.noise.family = ngfield::NoiseFamily::gaussian;
  p.noise.phi = phi;
  p.noise.sigma = phi;
  p.noise.drift.resize(0);
  p.noise.mu.resize(0);
  return p;
}

ngfield::ModelParams mixing_params(ngfield::NoiseFamily fam, double kappa, double sigma_eps,
                                   double sigma, double shape, double drift, double mu,
                                   double beta0) {
  ngfield::ModelParams p;
  p.kappa = kappa;
  p.sigma_eps = sigma_eps;
  p.beta = scalar_vec(beta0);
  p.noise.family = fam;
  p.noise.sigma = sigma;
  p.noise.phi = sigma;
  if (fam == ngfield::NoiseFamily::gal)
    p.noise.tau = shape;
  else
    p.noise.nu = shape;
  p.noise.drift = scalar_vec(drift);
  p.noise.mu = scalar_vec(mu);
  return p;
}

// A simulated dataset on a fresh rectangle mesh: observation sites uniform
// over the core rectangle, intercept-only design, y = beta0 + A w + noise.
struct SimData {
  ngfield::Mesh mesh;
  ngfield::FemOperators ops;
  ngfield::Dataset data;
  ngfield::ObservationMatrix a;
  ngfield::LatentState latent;
  ngfield::ModelParams truth;  // params actually used to draw y
  double field_sd = 0;         // sample sd of A w at the data sites
};

// noise_frac > 0 replaces prm.sigma_eps with noise_frac * field_sd before y
// is drawn; the realized parameters are returned in SimData::truth.  The
// design is intercept-only unless centered_covariate is set, which switches
// it to the single column x - mid.  Under closed boundaries a constant drift
// or asymmetry coefficient induces an exactly constant mean, so an intercept
// would be perfectly collinear with it and the split between the two would
// be likelihood-flat; a centered covariate keeps the regression coefficient
// identifiable alongside scalar drift and asymmetry.
SimData make_sim(ngfield::ModelParams prm, const ngfield::Rect& core, double edge,
                 double ext_width, double ext_edge, int n_obs, std::uint64_t seed,
                 double noise_frac, bool centered_covariate = false) {
  using namespace ngfield;
  SimData s;
  s.mesh = build_mesh_2d(core, edge, ext_width, ext_edge);
  s.ops = assemble_operators(s.mesh);
  const int n = s.ops.n;
  const bool gauss = prm.noise.family == NoiseFamily::gaussian;
  // A constant continuum drift integrates to drift * h_i per dual cell, so
  // its node covariate is the lumped-mass column; the asymmetry coefficient
  // multiplies V_i, which already scales with cell area, so its covariate is
  // a plain ones column.  Together these keep the induced mean exactly
  // constant under closed boundaries instead of tracing the mesh grading.
  s.data.b_gamma = gauss ? MatrixXd(n, 0) : MatrixXd(s.ops.h);
  s.data.b_mu = gauss ? MatrixXd(n, 0) : MatrixXd(MatrixXd::Ones(n, 1));

  RngStream loc_rng(RngStream::derive(seed, 1));
  s.data.locations.resize(static_cast<std::size_t>(n_obs));
  for (auto& p : s.data.locations)
    p = {core.x0 + (core.x1 - core.x0) * loc_rng.uniform(),
         core.y0 + (core.y1 - core.y0) * loc_rng.uniform()};
  s.a = build_observation_matrix(s.mesh, s.data.locations);
  s.a.require_all_inside();

  RngStream field_rng(RngStream::derive(seed, 2));
  s.latent = simulate_latent(prm, s.ops, s.data.b_gamma, s.data.b_mu, field_rng);
  const VectorXd f = s.a.a * s.latent.w;
  s.field_sd = std::sqrt((f.array() - f.mean()).square().sum() / (f.size() - 1.0));
  if (noise_frac > 0) prm.sigma_eps = noise_frac * s.field_sd;

  if (centered_covariate) {
    s.data.b = MatrixXd(n_obs, 1);
    const double mid = 0.5 * (core.x0 + core.x1);
    for (int i = 0; i < n_obs; ++i)
      s.data.b(i, 0) = s.data.locations[static_cast<std::size_t>(i)][0] - mid;
  } else {
    s.data.b = MatrixXd::Ones(n_obs, 1);
  }
  RngStream obs_rng(RngStream::derive(seed, 3));
  s.data.y = simulate_observations(prm, s.a, s.data.b, s.latent.w, obs_rng);
  s.truth = prm;
  return s;
}

class MomentConsumer : public ngfield::GibbsConsumer {
 public:
  VectorXd sum_w, sum_v;
  long k = 0;
  void consume(const ngfield::LatentState& st, const ngfield::ConditionalGaussian&) override {
    if (k == 0) {
      sum_w = VectorXd::Zero(st.w.size());
      sum_v = VectorXd::Zero(st.v.size());
    }
    sum_w += st.w;
    sum_v += st.v;
    ++k;
  }
};

// ---- criterion 1: discrete covariance against the closed form --------------

Outcome criterion1() {
  using namespace ngfield;
  const double kappa = 1.5, phi = 1.0;
  const double corr_range = std::sqrt(8.0) / kappa;
  // Band elements at most twice the core edge: a sharper grading jump at the
  // interface reflects enough energy to distort covariances several cells in.
  Mesh mesh = build_mesh_2d(Rect{0.0, 0.0, 10.0, 10.0}, 0.25, 2.0 * corr_range, 0.5);
  FemOperators ops = assemble_operators(mesh);
  CholFactor f = chol_factor(build_k(ops, kappa));

  std::vector<int> interior;
  for (int i = 0; i < mesh.n_nodes(); ++i)
    if (mesh.interior[i]) interior.push_back(i);

  // 30 interior node pairs at lags between 0.5 and 3 correlation distances.
  const double lo = 0.5 / kappa, hi = 3.0 / kappa;
  RngStream rng(RngStream::derive(42, 1));
  std::vector<std::tuple<int, int, double>> pairs;
  for (int guard = 0; pairs.size() < 30 && guard < 1000000; ++guard) {
    const int i = interior[static_cast<std::size_t>(rng.uniform() * interior.size())];
    const int j = interior[static_cast<std::size_t>(rng.uniform() * interior.size())];
    if (i == j) continue;
    const double d = std::hypot(mesh.nodes[static_cast<std::size_t>(i)][0] -
                                    mesh.nodes[static_cast<std::size_t>(j)][0],
                                mesh.nodes[static_cast<std::size_t>(i)][1] -
                                    mesh.nodes[static_cast<std::size_t>(j)][1]);
    if (d < lo || d > hi) continue;
    pairs.emplace_back(i, j, d);
  }
  if (pairs.size() < 30) return {false, "could not place 30 interior node pairs"};

  std::map<int, VectorXd> zcol;  // columns of the inverse operator
  for (const auto& [i, j, d] : pairs) {
    (void)d;
    for (int idx : {i, j})
      if (!zcol.count(idx)) {
        VectorXd e = VectorXd::Zero(ops.n);
        e(idx) = 1.0;
        zcol.emplace(idx, f.solve(e));
      }
  }

  double worst = 0;
  for (const auto& [i, j, d] : pairs) {
    const double got =
        phi * phi * (zcol.at(i).array() * ops.h.array() * zcol.at(j).array()).sum();
    const double want = matern_cov(d, kappa, 1.0, phi, 2);
    worst = std::max(worst, rel_err(got, want));
  }
  return {worst <= kCovRelTol, "worst rel err " + fmt(worst) + " over 30 pairs, " +
                                   std::to_string(zcol.size()) + " node solves on " +
                                   std::to_string(ops.n) + " nodes"};
}

// ---- criterion 2: mixing-law moments and sampler against quadrature --------

Outcome criterion2() {
  using namespace ngfield;
  double worst_m = 0;
  int laws = 0;
  for (double p : {-2.5, 0.5, 3.0})
    for (double a : {0.5, 2.0, 8.0})
      for (double b : {0.4, 1.0, 5.0}) {
        const GigParams g{p, a, b};
        ++laws;
        for (double lam : {-1.0, 1.0, 2.0}) {
          const double got = gig_moment(g, lam);
          const double want = oracle::gig_expect(g, [lam](double x) { return std::pow(x, lam); });
          worst_m = std::max(worst_m, std::abs(got - want) / std::max(1.0, std::abs(want)));
        }
        const double got_log = gig_expect_log(g);
        const double want_log = oracle::gig_expect(g, [](double x) { return std::log(x); });
        worst_m = std::max(worst_m, std::abs(got_log - want_log) / std::max(1.0, std::abs(want_log)));
      }

  double worst_ks = 0;
  const GigParams sets[] = {{0.5, 2.0, 1.0}, {-2.0, 1.0, 3.0}, {3.0, 2.0, 1.0}, {0.2, 0.3, 0.2}};
  std::uint64_t stream = 0;
  for (const GigParams& g : sets) {
    RngStream rng(RngStream::derive(7, ++stream));
    std::vector<double> xs(100000);
    for (double& x : xs) x = gig_sample(g, rng);
    worst_ks = std::max(worst_ks, oracle::gig_ks(g, std::move(xs)));
  }
  const bool ok = worst_m <= kGigMomentTol && worst_ks < kGigKsTol;
  return {ok, "worst moment err " + fmt(worst_m) + " over " + std::to_string(laws) +
                  " laws, worst ks " + fmt(worst_ks) + " at 1e5 draws"};
}

// ---- criterion 3: gibbs posterior means against direct quadrature ----------

Outcome criterion3() {
  using namespace ngfield;
  using Eigen::Matrix3d;
  using Eigen::Matrix4d;
  using Eigen::Vector3d;
  using Eigen::Vector4d;

  Mesh mesh = build_mesh_1d(0.0, 3.0, 4);
  FemOperators ops = assemble_operators(mesh);
  ModelParams prm = mixing_params(NoiseFamily::gal, 1.0, 0.25, 0.7, 2.0, 1.0, 1.5, 0.5);

  Dataset data;
  data.locations = {{0.4, 0.0}, {1.6, 0.0}, {2.7, 0.0}};
  data.y = (VectorXd(3) << 1.2, -0.4, 2.0).finished();
  data.b = MatrixXd::Ones(3, 1);
  data.b_gamma = MatrixXd::Ones(4, 1);
  data.b_mu = MatrixXd::Ones(4, 1);
  ObservationMatrix a = build_observation_matrix(mesh, data.locations);

  // Quadrature oracle over the four mixing variances: a Simpson product rule
  // on a log grid. At each grid point w is gaussian given (V, y), so both the
  // marginal likelihood of y and the conditional mean of w are closed-form.
  const Matrix4d kd = Matrix4d(MatrixXd(build_k(ops, prm.kappa).full()));
  const Matrix4d kinv = kd.inverse();
  const Eigen::Matrix<double, 3, 4> ad = Eigen::Matrix<double, 3, 4>(MatrixXd(a.a));
  const Eigen::Matrix<double, 3, 4> aki = ad * kinv;
  const Vector4d bg = data.b_gamma * prm.noise.drift;
  const Vector4d bm = data.b_mu * prm.noise.mu;
  const Vector3d resid0 = data.y - data.b * prm.beta;
  const Matrix4d ata = ad.transpose() * ad;
  const Vector4d at_r = ad.transpose() * resid0;
  Matrix4d kk[4];
  for (int j = 0; j < 4; ++j) kk[j] = kd.col(j) * kd.col(j).transpose();
  const double s2 = prm.noise.sigma * prm.noise.sigma;
  const double e2 = prm.sigma_eps * prm.sigma_eps;

  GigParams prior[4];
  for (int j = 0; j < 4; ++j) prior[j] = GigParams{prm.noise.tau * ops.h(j), 2.0, 0.0};

  const int m = 45;  // odd point count -> even interval count for Simpson
  const double ulo = -10.0, uhi = 3.5;
  const double du = (uhi - ulo) / (m - 1);
  std::vector<double> vg(m), sw(m);
  std::vector<std::array<double, 4>> lpre(m);
  for (int i = 0; i < m; ++i) {
    const double u = ulo + i * du;
    vg[static_cast<std::size_t>(i)] = std::exp(u);
    sw[static_cast<std::size_t>(i)] = (i == 0 || i == m - 1) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    for (int j = 0; j < 4; ++j)
      lpre[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          gig_logpdf(prior[j], vg[static_cast<std::size_t>(i)]) + u;  // + log jacobian
  }

  double lmax = -std::numeric_limits<double>::infinity();
  double z = 0;
  Vector4d or_w = Vector4d::Zero(), or_v = Vector4d::Zero();
  for (int i0 = 0; i0 < m; ++i0)
    for (int i1 = 0; i1 < m; ++i1)
      for (int i2 = 0; i2 < m; ++i2)
        for (int i3 = 0; i3 < m; ++i3) {
          Vector4d v;
          v << vg[static_cast<std::size_t>(i0)], vg[static_cast<std::size_t>(i1)],
              vg[static_cast<std::size_t>(i2)], vg[static_cast<std::size_t>(i3)];
          const double lp = lpre[static_cast<std::size_t>(i0)][0] +
                            lpre[static_cast<std::size_t>(i1)][1] +
                            lpre[static_cast<std::size_t>(i2)][2] +
                            lpre[static_cast<std::size_t>(i3)][3];

          const Vector4d mp = kinv * (bg + v.cwiseProduct(bm));
          Matrix3d sy = e2 * Matrix3d::Identity();
          for (int j = 0; j < 4; ++j)
            sy += s2 * v(j) * (aki.col(j) * aki.col(j).transpose());
          const Eigen::LLT<Matrix3d> l3(sy);
          const Matrix3d lmat = l3.matrixL();
          const Vector3d r3 = resid0 - ad * mp;
          const double quad = r3.dot(l3.solve(r3));
          const double lw = lp - 0.5 * quad - lmat.diagonal().array().log().sum() -
                            1.5 * std::log(2.0 * M_PI);

          Matrix4d q = (1.0 / e2) * ata;
          for (int j = 0; j < 4; ++j) q += (1.0 / (s2 * v(j))) * kk[j];
          const Vector4d shift =
              (1.0 / s2) * (kd * (bg.cwiseQuotient(v) + bm)) + (1.0 / e2) * at_r;
          const Vector4d ew = q.llt().solve(shift);

          const double swgt = sw[static_cast<std::size_t>(i0)] * sw[static_cast<std::size_t>(i1)] *
                              sw[static_cast<std::size_t>(i2)] * sw[static_cast<std::size_t>(i3)];
          if (lw > lmax) {
            const double sc = std::exp(lmax - lw);
            z *= sc;
            or_w *= sc;
            or_v *= sc;
            lmax = lw;
          }
          const double wgt = swgt * std::exp(lw - lmax);
          z += wgt;
          or_w += wgt * ew;
          or_v += wgt * v;
        }
  or_w /= z;
  or_v /= z;

  GibbsModel model(prm, ops, a, data);
  LatentState st;
  GibbsConfig cfg;
  cfg.samples = 100000;
  cfg.burn_in = 2000;
  cfg.thinning = 1;
  cfg.seed = RngStream::derive(99, 3);
  MomentConsumer mom;
  gibbs_run(model, &st, cfg, {&mom});
  const VectorXd mc_w = mom.sum_w / static_cast<double>(mom.k);
  const VectorXd mc_v = mom.sum_v / static_cast<double>(mom.k);

  double worst = 0;
  for (int j = 0; j < 4; ++j) {
    worst = std::max(worst, std::abs(mc_w(j) - or_w(j)) / std::max(std::abs(or_w(j)), 0.01));
    worst = std::max(worst, std::abs(mc_v(j) - or_v(j)) / std::max(std::abs(or_v(j)), 0.01));
  }
  return {worst <= kToyRelTol, "worst rel err " + fmt(worst) +
                                   " across E[w] and E[V] (4 nodes, 1e5 sweeps)"};
}

// ---- criterion 4: gaussian em against direct maximum likelihood ------------

Outcome criterion4() {
  using namespace ngfield;
  ModelParams truth = gaussian_params(1.5, 1.0, 0.05, 2.0);
  SimData s = make_sim(truth, Rect{0.0, 0.0, 10.0, 10.0}, 0.26, 0.0, 1.0, 2000, 4001, 0.0);

  // Launch the regression at the sample mean: a chain started at zero lets
  // the posterior field swallow the intercept, and once kappa drifts down a
  // constant deviation costs the prior nothing, so the handback stalls.
  ModelParams init = gaussian_params(1.0, 1.0, 0.1, s.data.y.mean());
  McemConfig cfg;
  cfg.gibbs = GibbsConfig{50, 60, 1, RngStream::derive(4, 0)};
  cfg.max_iter = 60;
  cfg.k0 = 25;
  cfg.k_max = 200;
  cfg.growth = 1.25;
  cfg.warm_burn_in = 10;
  cfg.stop_tol = 3e-4;
  cfg.stop_window = 4;
  const FitResult fit = mcem_fit(s.data, s.ops, s.a, init, cfg);

  // Direct maximum likelihood on the same discrete model by simplex search,
  // run from a generic start and from the em answer; keep the better optimum.
  auto obj = [&](const VectorXd& t) {
    return oracle::gaussian_marginal_loglik(s.data.y, s.data.b, scalar_vec(t(3)), s.a.a, s.ops,
                                            std::exp(t(0)), std::exp(t(1)), std::exp(t(2)));
  };
  VectorXd t0(4);
  t0 << 0.0, 0.0, std::log(0.1), 0.0;
  const VectorXd m1 = oracle::nelder_mead(obj, t0, 0.3, 3000, 1e-11);
  VectorXd t1(4);
  t1 << std::log(fit.params.kappa), std::log(fit.params.noise.phi),
      std::log(fit.params.sigma_eps), fit.params.beta(0);
  const VectorXd m2 = oracle::nelder_mead(obj, t1, 0.05, 3000, 1e-11);
  const VectorXd ml = obj(m2) > obj(m1) ? m2 : m1;

  const double ek = rel_err(fit.params.kappa, std::exp(ml(0)));
  const double ep = rel_err(fit.params.noise.phi, std::exp(ml(1)));
  const double ee = rel_err(fit.params.sigma_eps, std::exp(ml(2)));
  const double eb = rel_err(fit.params.beta(0), ml(3));
  const double worst = std::max({ek, ep, ee, eb});
  std::ostringstream os;
  os.precision(4);
  os << "em vs ml: kappa " << fit.params.kappa << "/" << std::exp(ml(0)) << ", phi "
     << fit.params.noise.phi << "/" << std::exp(ml(1)) << ", sigma_eps " << fit.params.sigma_eps
     << "/" << std::exp(ml(2)) << ", beta " << fit.params.beta(0) << "/" << ml(3)
     << ", worst rel diff " << worst << ", " << fit.iterations << " iterations ("
     << fit.termination << ")";
  return {worst <= kMlRelTol, os.str()};
}

// ---- criterion 5: parameter recovery for both mixing families --------------

Outcome recovery_case(ngfield::NoiseFamily fam, std::uint64_t seed) {
  using namespace ngfield;
  const bool gal = fam == NoiseFamily::gal;
  ModelParams truth = mixing_params(fam, 1.5, 0.1, 1.0, gal ? 3.0 : 1.0, 0.5, 1.0, 2.0);
  SimData s = make_sim(truth, Rect{0.0, 0.0, 10.0, 10.0}, 0.3, 1.5, 0.6, 2000, seed, 0.1, true);

  // Stage 1: Gaussian fit.  GAL and NIG fields are variance mixtures of the
  // Gaussian model, so the data's second-order structure is exactly that of
  // the Gaussian field and its quasi-likelihood is consistent for kappa, the
  // nugget, and the slope.  The mixing families' per-node variance layer can
  // whiten the increment mismatch left by any kappa — the complete-data
  // update returns the current kappa essentially unchanged, right or wrong —
  // so the mixing EM must be launched near the right kappa rather than asked
  // to travel there.  An intercept column holds the constant mean the scalar
  // drift and asymmetry induce.
  const int n_obs = static_cast<int>(s.data.y.size());
  Dataset gdata = s.data;
  gdata.b = MatrixXd(n_obs, 2);
  gdata.b.col(0).setOnes();
  gdata.b.col(1) = s.data.b.col(0);
  gdata.b_gamma = MatrixXd(s.ops.n, 0);
  gdata.b_mu = MatrixXd(s.ops.n, 0);
  ModelParams ginit = gaussian_params(1.0, 1.0, 0.5 * s.field_sd, 0.0);
  ginit.beta = (gdata.b.transpose() * gdata.b).ldlt().solve(gdata.b.transpose() * gdata.y);
  McemConfig gcfg;
  gcfg.gibbs = GibbsConfig{50, 60, 1, RngStream::derive(seed, 20)};
  gcfg.max_iter = 60;
  gcfg.k0 = 25;
  gcfg.k_max = 200;
  gcfg.growth = 1.25;
  gcfg.warm_burn_in = 10;
  gcfg.stop_tol = 3e-4;
  gcfg.stop_window = 4;
  const FitResult gfit = mcem_fit(gdata, s.ops, s.a, ginit, gcfg);

  // Stage 2: mixing EM from the matched start.  sigma is chosen so the prior
  // V scale at the initial shape reproduces the fitted phi (sigma² · ΣE[V_i]
  // = phi² · Σh_i); drift and mu start at zero and the layer regression
  // recovers the induced mean within the first few sweeps.
  ModelParams init = mixing_params(fam, gfit.params.kappa, gfit.params.sigma_eps, 1.0,
                                   gal ? 1.5 : 0.5, 0.0, 0.0, gfit.params.beta(1));
  const VectorXd ev = prior_v_mean(init.noise, s.ops.h);
  init.noise.sigma = gfit.params.noise.phi * std::sqrt(s.ops.h.sum() / ev.sum());
  init.noise.phi = init.noise.sigma;
  // Default growth schedule (k0 50, growth 1.2, cap 2000) and the default
  // iteration cap; the step-size stop keeps the run inside the time budget
  // once the parameters settle.
  McemConfig cfg;
  cfg.gibbs = GibbsConfig{50, 100, 1, RngStream::derive(seed, 9)};
  cfg.warm_burn_in = 10;
  cfg.stop_tol = 3e-3;
  cfg.stop_window = 5;
  const FitResult fit = mcem_fit(s.data, s.ops, s.a, init, cfg);

  const double ek = rel_err(fit.params.kappa, s.truth.kappa);
  const double es = rel_err(fit.params.noise.sigma, s.truth.noise.sigma);
  const double ee = rel_err(fit.params.sigma_eps, s.truth.sigma_eps);
  const double eb = rel_err(fit.params.beta(0), s.truth.beta(0));
  const double worst = std::max({ek, es, ee, eb});

  // Window-10 moving average of the smoothed objective must be nondecreasing
  // in at least kAscentFraction of consecutive windows; a dip only counts
  // when it exceeds kAscentSpanFrac of the total climb (measurement noise at
  // the plateau stays well under that, a broken update does not).
  int pairsn = 0, rises = 0;
  if (fit.q_rb.size() >= 11) {
    std::vector<double> smooth;
    for (std::size_t t = 0; t + 10 <= fit.q_rb.size(); ++t)
      smooth.push_back(std::accumulate(fit.q_rb.begin() + static_cast<long>(t),
                                       fit.q_rb.begin() + static_cast<long>(t) + 10, 0.0) /
                       10.0);
    const double span = *std::max_element(smooth.begin(), smooth.end()) -
                        *std::min_element(smooth.begin(), smooth.end());
    const double slack = kAscentSpanFrac * std::max(span, 1e-12);
    for (std::size_t t = 0; t + 1 < smooth.size(); ++t) {
      ++pairsn;
      if (smooth[t + 1] >= smooth[t] - slack) ++rises;
    }
  }
  const double frac = pairsn > 0 ? static_cast<double>(rises) / pairsn : 1.0;

  const bool ok = worst <= kRecoveryRelTol && frac >= kAscentFraction;
  std::ostringstream os;
  os.precision(4);
  os << family_name(fam) << ": kappa " << fit.params.kappa << "/" << s.truth.kappa << ", sigma "
     << fit.params.noise.sigma << "/" << s.truth.noise.sigma << ", sigma_eps "
     << fit.params.sigma_eps << "/" << s.truth.sigma_eps << ", beta " << fit.params.beta(0) << "/"
     << s.truth.beta(0) << ", worst rel err " << worst << ", ascent " << frac << " over "
     << pairsn << " window pairs, " << fit.iterations << " iterations (" << fit.termination
     << ")";
  return {ok, os.str()};
}

Outcome criterion5() {
  const Outcome g = recovery_case(ngfield::NoiseFamily::gal, 51);
  const Outcome n = recovery_case(ngfield::NoiseFamily::nig, 52);
  return {g.ok && n.ok, g.detail + "; " + n.detail};
}

// ---- criterion 6: smoothed kriging beats plain averaging -------------------

Outcome criterion6() {
  using namespace ngfield;
  ModelParams truth = mixing_params(NoiseFamily::gal, 1.2, 0.3, 0.8, 2.0, 0.4, 0.6, 1.0);
  SimData s = make_sim(truth, Rect{0.0, 0.0, 4.0, 4.0}, 0.4, 0.0, 1.0, 80, 61, 0.0);

  RngStream site_rng(RngStream::derive(6, 1));
  std::vector<std::array<double, 2>> sites(20);
  for (auto& p : sites)
    p = {0.5 + 3.0 * site_rng.uniform(), 0.5 + 3.0 * site_rng.uniform()};
  ObservationMatrix ap = build_observation_matrix(s.mesh, sites);
  ap.require_all_inside();

  GibbsModel model(truth, s.ops, s.a, s.data);
  const int chains = 50, kper = 200;
  MatrixXd rb(chains, 20), mc(chains, 20);
  for (int c = 0; c < chains; ++c) {
    LatentState st;
    const GibbsConfig cfg{kper, 50, 1, RngStream::derive(6, static_cast<std::uint64_t>(100 + c))};
    const PredictionResult pr = krige(model, &st, cfg, ap.a, false);
    rb.row(c) = pr.mean_rb.transpose();
    mc.row(c) = pr.mean_mc.transpose();
  }
  int wins = 0;
  for (int t = 0; t < 20; ++t)
    if (column_variance(rb.col(t)) <= column_variance(mc.col(t))) ++wins;

  // A single gaussian sweep must reproduce the closed-form conditional mean.
  ModelParams gsp = gaussian_params(1.2, 0.8, 0.3, 1.0);
  Dataset gd = s.data;
  gd.b_gamma = MatrixXd(s.ops.n, 0);
  gd.b_mu = MatrixXd(s.ops.n, 0);
  GibbsModel gmodel(gsp, s.ops, s.a, gd);
  LatentState gst;
  const GibbsConfig gcfg{1, 0, 1, RngStream::derive(6, 999)};
  const PredictionResult gone = krige(gmodel, &gst, gcfg, ap.a, true);
  const VectorXd closed = ap.a * gmodel.conditional(s.ops.h).mean;
  const double gap = (gone.mean_rb - closed).lpNorm<Eigen::Infinity>();

  const bool ok = wins >= static_cast<int>(kRbWinFraction * 20.0) && gap <= kExactRbTol;
  return {ok, "smoothed estimator wins at " + std::to_string(wins) +
                  "/20 sites over 50 chains of 200 sweeps; one-sweep gaussian gap " + fmt(gap)};
}

// ---- criterion 7: streamed statistics vs recomputation from raw states -----

Outcome criterion7() {
  using namespace ngfield;
  // The nig mixing law keeps every variance draw bounded away from zero, so
  // the 1/V-weighted sums stay well conditioned and the streamed-vs-rebuilt
  // identity is meaningful at the pinned tolerance.
  ModelParams prm = mixing_params(NoiseFamily::nig, 1.2, 0.3, 0.8, 1.5, 0.4, 0.6, 1.0);
  SimData s = make_sim(prm, Rect{0.0, 0.0, 2.0, 1.0}, 0.1, 0.0, 1.0, 150, 71, 0.0);

  GibbsModel model(prm, s.ops, s.a, s.data);
  LatentState st;
  const GibbsConfig cfg{100, 50, 1, RngStream::derive(7, 1)};
  std::vector<LatentState> kept;
  const SufficientStats streamed = gibbs_run(model, &st, cfg, {}, &kept);

  SufficientStats redo;
  redo.init(s.ops.n, 1, 1, 1);
  const MatrixXd gd = MatrixXd(s.ops.g.full());
  const MatrixXd adm = MatrixXd(s.a.a);
  for (const LatentState& state : kept) {
    const VectorXd cw = s.ops.h.cwiseProduct(state.w);
    const VectorXd gw = gd * state.w;
    const VectorXd vinv = state.v.cwiseInverse();
    redo.s1 += cw.dot(vinv.cwiseProduct(cw));
    redo.s2 += cw.dot(vinv.cwiseProduct(gw));
    redo.s3 += gw.dot(vinv.cwiseProduct(gw));
    redo.s4 += s.data.b_gamma.transpose() * vinv.cwiseProduct(cw);
    redo.s5 += s.data.b_gamma.transpose() * vinv.cwiseProduct(gw);
    redo.s6 += s.data.b_mu.transpose() * cw;
    redo.s7 += s.data.b_mu.transpose() * gw;
    redo.s8 += s.data.b_gamma.transpose() * vinv.asDiagonal() * s.data.b_gamma;
    redo.s9 += s.data.b_mu.transpose() * state.v.asDiagonal() * s.data.b_mu;
    const VectorXd r = s.data.y - adm * state.w;
    redo.bx += s.data.b.transpose() * r;
    redo.hx += r.squaredNorm();
    redo.sum_log_v += state.v.array().log().matrix();
    redo.sum_v += state.v;
    redo.sum_v_inv += vinv;
    ++redo.k;
  }

  const auto [beta_a, sig_a] = mstep_regression(streamed, s.data.b);
  const auto [beta_b, sig_b] = mstep_regression(redo, s.data.b);
  const SpdeEstimate sp_a = mstep_spde(streamed, s.ops, s.data.b_gamma, s.data.b_mu, 2, 0.02, 50.0);
  const SpdeEstimate sp_b = mstep_spde(redo, s.ops, s.data.b_gamma, s.data.b_mu, 2, 0.02, 50.0);
  const NoiseSpec no_a = mstep_noise(streamed, prm.noise, s.ops.h);
  const NoiseSpec no_b = mstep_noise(redo, prm.noise, s.ops.h);

  double worst = (beta_a - beta_b).lpNorm<Eigen::Infinity>() /
                 std::max(beta_b.lpNorm<Eigen::Infinity>(), 1e-12);
  worst = std::max(worst, rel_err(sig_a, sig_b));
  worst = std::max(worst, rel_err(sp_a.kappa, sp_b.kappa));
  worst = std::max(worst, rel_err(sp_a.sigma, sp_b.sigma));
  worst = std::max(worst, rel_err(sp_a.drift(0), sp_b.drift(0)));
  worst = std::max(worst, rel_err(sp_a.mu(0), sp_b.mu(0)));
  worst = std::max(worst, rel_err(no_a.nu, no_b.nu));

  const bool ok = worst <= kMstepMatchTol && streamed.k == static_cast<long>(kept.size());
  return {ok, "worst rel gap " + fmt(worst) + " across 7 update outputs from " +
                  std::to_string(streamed.k) + " states on " + std::to_string(s.ops.n) +
                  " nodes"};
}

// ---- criterion 8: selected inverse against a dense inverse -----------------

Outcome criterion8() {
  using namespace ngfield;
  RngStream rng(RngStream::derive(8, 0));
  double worst = 0;
  long entries = 0;
  for (int t = 0; t < 20; ++t) {
    const int n = 5 + static_cast<int>(rng.uniform() * 196.0);
    std::vector<Triplet> tr;
    VectorXd diag = VectorXd::Constant(n, 1.0);
    for (int i = 0; i < n; ++i) {
      const int links = 1 + static_cast<int>(rng.uniform() * 3.0);
      for (int l = 0; l < links; ++l) {
        const int j = static_cast<int>(rng.uniform() * n);
        if (j == i) continue;
        const double val = rng.uniform() - 0.5;
        tr.emplace_back(std::min(i, j), std::max(i, j), val);
        diag(i) += std::abs(val);
        diag(j) += std::abs(val);
      }
    }
    for (int i = 0; i < n; ++i) tr.emplace_back(i, i, diag(i) + rng.uniform());

    const SparseSym m = SparseSym::from_triplets(n, tr);
    const CholFactor f = chol_factor(m);
    const SparseSym sel = selected_inverse(f);
    const MatrixXd dinv = MatrixXd(m.full()).inverse();
    for (const Triplet& e : sel.upper_triplets()) {
      worst = std::max(worst, std::abs(e.value() - dinv(e.row(), e.col())));
      ++entries;
    }
  }
  return {worst <= kSelInvTol, "worst abs gap " + fmt(worst) + " over " +
                                   std::to_string(entries) + " stored entries in 20 matrices"};
}

// ---- criterion 9: scoring rules and predictive calibration ------------------

Outcome criterion9() {
  using namespace ngfield;

  RngStream rng(RngStream::derive(9, 0));
  MatrixXd z(100000, 1);
  for (int i = 0; i < z.rows(); ++i) z(i, 0) = rng.normal();
  const double got = crps_mc(z, VectorXd::Zero(1));
  const double want = (std::sqrt(2.0) - 1.0) / std::sqrt(M_PI);
  const double e_crps = rel_err(got, want);

  const MatrixXd z2 = z.topRows(500);
  const VectorXd y1 = scalar_vec(0.3);
  const double gap_e = std::abs(energy_score_mc(z2, y1) - crps_mc(z2, y1));

  ModelParams truth = gaussian_params(1.5, 1.0, 0.05, 2.0);
  SimData s = make_sim(truth, Rect{0.0, 0.0, 10.0, 10.0}, 0.4, 0.0, 1.0, 2000, 91, 0.0);
  CrossvalOptions opt;
  opt.folds = 10;
  opt.seed = RngStream::derive(9, 1);
  opt.refit = false;
  opt.gibbs = GibbsConfig{60, 30, 1, 0};
  const CrossvalResult cv = crossval(s.data, s.ops, s.mesh, truth, opt);
  const double vrs = cv.scores.var_rs;

  const bool ok = e_crps <= kCrpsRelTol && gap_e <= kEnergyMatchTol && vrs >= kCalibLo &&
                  vrs <= kCalibHi;
  return {ok, "crps rel err " + fmt(e_crps) + " at 1e5 draws, energy-vs-crps gap " + fmt(gap_e) +
                  ", standardized residual variance " + fmt(vrs) + " over 2000 held-out points"};
}

// ---- criterion 10: the command-line tool is byte-deterministic --------------

int run_cmd(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string config_json(const std::string& dataset) {
  std::ostringstream os;
  os << "{\n  \"family\": \"gal\",\n  \"seed\": 9001,\n";
  if (!dataset.empty()) os << "  \"dataset\": \"" << dataset << "\",\n";
  os << R"(  "mesh": {"dimension": 2, "x0": 0.0, "y0": 0.0, "x1": 2.0, "y1": 1.0, "edge": 0.5},
  "params": {"kappa": 1.2, "sigma_eps": 0.3, "sigma": 0.8, "drift": [0.4], "mu": [0.6]},
  "simulate": {"n_obs": 40, "replicates": 1},
  "gibbs": {"samples": 15, "burn_in": 10},
  "mcem": {"max_iter": 2, "k0": 10, "k_max": 20},
  "grid": {"nx": 4, "ny": 3},
  "crossval": {"folds": 3, "fit_full": false}
}
)";
  return os.str();
}

Outcome criterion10() {
  namespace fs = std::filesystem;
  const char* bin = std::getenv("NGFIELD_BIN");
  if (!bin) return {false, "NGFIELD_BIN is not set"};

  const fs::path base =
      fs::temp_directory_path() / ("ngfield_acceptance10_" + std::to_string(getpid()));
  std::error_code ec;
  fs::remove_all(base, ec);
  fs::create_directories(base / "a");
  fs::create_directories(base / "b");

  const fs::path cfg_sim = base / "sim.json";
  {
    std::ofstream out(cfg_sim);
    out << config_json("");
  }
  const fs::path targets = base / "targets.csv";
  {
    std::ofstream out(targets);
    out << "x,y\n0.3,0.4\n1.1,0.2\n1.9,0.8\n";
  }

  std::vector<std::string> problems;
  auto shell = [&](const std::string& args) {
    const int rc = run_cmd(std::string(bin) + " " + args + " >/dev/null 2>&1");
    if (rc != 0) problems.push_back("exit " + std::to_string(rc) + ": " + args);
  };

  for (const char* rep : {"a", "b"})
    shell("simulate --config " + cfg_sim.string() + " --out " + (base / rep / "sim").string());

  // Both replicas fit/predict/score the same dataset file so that every
  // recorded path is identical.
  const fs::path cfg_main = base / "main.json";
  {
    std::ofstream out(cfg_main);
    out << config_json((base / "a" / "sim" / "observations.csv").string());
  }
  for (const char* rep : {"a", "b"}) {
    shell("fit --config " + cfg_main.string() + " --out " + (base / rep / "fit").string());
    shell("predict --config " + cfg_main.string() + " --data " + targets.string() + " --out " +
          (base / rep / "pred").string());
    shell("crossval --config " + cfg_main.string() + " --out " + (base / rep / "cv").string());
  }

  const std::vector<std::pair<std::string, std::string>> files = {
      {"sim", "field.csv"},       {"sim", "observations.csv"}, {"sim", "truth.json"},
      {"fit", "trace.csv"},       {"fit", "model.json"},       {"pred", "predictions.csv"},
      {"pred", "grid.csv"},       {"cv", "scores.json"},       {"cv", "residuals.csv"}};
  int identical = 0;
  for (const auto& [dir, name] : files) {
    const std::string a = slurp(base / "a" / dir / name);
    const std::string b = slurp(base / "b" / dir / name);
    if (a.empty())
      problems.push_back(dir + "/" + name + " is empty or missing");
    else if (a != b)
      problems.push_back(dir + "/" + name + " differs between runs");
    else
      ++identical;
  }
  fs::remove_all(base, ec);

  if (!problems.empty()) return {false, problems.front()};
  return {true, std::to_string(identical) + "/9 outputs byte-identical across repeated runs"};
}

Outcome dispatch(int c) {
  switch (c) {
    case 1: return criterion1();
    case 2: return criterion2();
    case 3: return criterion3();
    case 4: return criterion4();
    case 5: return criterion5();
    case 6: return criterion6();
    case 7: return criterion7();
    case 8: return criterion8();
    case 9: return criterion9();
    case 10: return criterion10();
  }
  return {false, "unknown criterion"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: acceptance <criterion 1..10>\n");
    return 2;
  }
  const int c = std::atoi(argv[1]);
  if (c < 1 || c > 10) {
    std::fprintf(stderr, "usage: acceptance <criterion 1..10>\n");
    return 2;
  }
  Outcome o;
  try {
    o = dispatch(c);
  } catch (const std::exception& e) {
    o = {false, std::string("unexpected exception: ") + e.what()};
  }
  std::printf("criterion %d: %s (%s)\n", c, o.ok ? "PASS" : "FAIL", o.detail.c_str());
  return o.ok ? 0 : 1;
}
