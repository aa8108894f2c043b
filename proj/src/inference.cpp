#include "ngfield/inference.hpp"

#include <gsl/gsl_sf_psi.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ngfield/gig.hpp"

namespace ngfield {
namespace {

constexpr double kHazardWindow = 0.05;
constexpr double kHazardClamp = 1e6;
constexpr double kCondBFloor = 1e-12;

std::string dump_state(const Eigen::VectorXd& v) {
  std::ostringstream os;
  os << " (mixing variances: min=" << v.minCoeff() << ", max=" << v.maxCoeff() << ")";
  return os.str();
}

}  // namespace

GibbsModel::GibbsModel(const ModelParams& params, const FemOperators& ops,
                       const ObservationMatrix& a, const Dataset& data)
    : params_(params), ops_(&ops), a_(&a), data_(&data) {
  const int n = ops.n;
  const Eigen::Index n_obs = data.y.size();
  if (a.a.cols() != n) throw DimensionMismatch("observation matrix columns do not match mesh size");
  if (a.a.rows() != n_obs) throw DimensionMismatch("observation matrix rows do not match data size");
  if (data.b.rows() != n_obs) throw DimensionMismatch("covariate rows do not match data size");
  if (data.b.cols() != params.beta.size())
    throw DimensionMismatch("beta length does not match covariate columns");
  if (data.b_gamma.rows() != n || data.b_mu.rows() != n)
    throw DimensionMismatch("node covariate rows do not match mesh size");
  if (data.b_gamma.cols() != params.noise.drift.size())
    throw DimensionMismatch("drift length does not match node covariate columns");
  if (data.b_mu.cols() != params.noise.mu.size())
    throw DimensionMismatch("skew length does not match node covariate columns");
  if (params.sigma_eps <= 0) throw InvalidParams("sigma_eps must be positive");
  if (mixing_sigma() <= 0) throw InvalidParams("noise scale must be positive");

  k_alpha_ = build_k_alpha(ops, params.kappa, params.alpha);
  k_full_ = k_alpha_.full();
  SpMat a_csc(a.a);
  SpMat ata = SpMat(a_csc.transpose()) * a_csc;
  ata_full_ = ata;
  ata_full_.prune(0.0, 0.0);
  ata_full_.makeCompressed();
  Eigen::VectorXd resid = data.y - data.b * params.beta;
  at_resid_ = a_csc.transpose() * resid;
  bg_drift_ = data.b_gamma * params.noise.drift;
  bm_mu_ = data.b_mu * params.noise.mu;
  if (params.noise.family == NoiseFamily::gal) {
    double closest = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j)
      closest = std::min(closest, std::abs(params.noise.tau * ops.h[j] - 0.5));
    hazard_active_ = closest < kHazardWindow;
  }
}

double GibbsModel::mixing_sigma() const {
  return params_.noise.family == NoiseFamily::gaussian ? params_.noise.phi : params_.noise.sigma;
}

ConditionalGaussian GibbsModel::conditional(const Eigen::VectorXd& v) {
  const int n = ops_->n;
  if (v.size() != n) throw DimensionMismatch("mixing variance vector does not match mesh size");
  if ((v.array() <= 0).any()) throw InvalidParams("mixing variances must be positive");

  const double s2inv = 1.0 / (mixing_sigma() * mixing_sigma());
  const double e2inv = 1.0 / (params_.sigma_eps * params_.sigma_eps);
  Eigen::VectorXd vinv = v.cwiseInverse();

  SpMat q = s2inv * SpMat(k_full_ * vinv.asDiagonal() * k_full_) + e2inv * ata_full_;

  ConditionalGaussian cg;
  cg.q_hat = SparseSym::from_symmetric(q);
  cg.shift = s2inv * (k_full_ *
                      (vinv.array() * bg_drift_.array() + bm_mu_.array()).matrix()) +
             e2inv * at_resid_;
  cg.factor = ws_.refactorize(cg.q_hat);
  cg.mean = cg.factor.solve(cg.shift);
  return cg;
}

VarianceLaw GibbsModel::conditional_v(const Eigen::VectorXd& w) const {
  const int n = ops_->n;
  if (w.size() != n) throw DimensionMismatch("weight vector does not match mesh size");
  VarianceLaw law;
  if (params_.noise.family == NoiseFamily::gaussian) {
    law.degenerate = true;
    return law;
  }
  law.degenerate = false;
  law.gig.resize(n);
  const double s2inv = 1.0 / (mixing_sigma() * mixing_sigma());
  Eigen::VectorXd kw = k_alpha_.apply(w);
  for (int j = 0; j < n; ++j) {
    const double r = kw[j] - bg_drift_[j];
    const double a = bm_mu_[j] * bm_mu_[j] * s2inv + 2.0;
    const double b0 = r * r * s2inv;
    if (params_.noise.family == NoiseFamily::gal) {
      law.gig[j] = GigParams{params_.noise.tau * ops_->h[j] - 0.5, a, std::max(b0, kCondBFloor)};
    } else {
      const double b = b0 + ops_->h[j] * params_.noise.nu * params_.noise.nu;
      law.gig[j] = GigParams{-1.0, a, std::max(b, kCondBFloor)};
    }
  }
  return law;
}

void GibbsModel::conditional_v_moments(const Eigen::VectorXd& w, Eigen::VectorXd* ev,
                                       Eigen::VectorXd* ev_inv, Eigen::VectorXd* elog_v) const {
  const int n = ops_->n;
  VarianceLaw law = conditional_v(w);
  ev->resize(n);
  ev_inv->resize(n);
  elog_v->resize(n);
  if (law.degenerate) {
    *ev = ops_->h;
    *ev_inv = ops_->h.cwiseInverse();
    *elog_v = ops_->h.array().log();
    return;
  }
  for (int j = 0; j < n; ++j) {
    (*ev)[j] = gig_moment(law.gig[j], 1.0);
    double m1 = gig_moment(law.gig[j], -1.0);
    if (hazard_active_ && m1 > kHazardClamp) m1 = kHazardClamp;
    (*ev_inv)[j] = m1;
    (*elog_v)[j] = gig_expect_log(law.gig[j]);
  }
}

ConditionalGaussian conditional_w(const ModelParams& params, const FemOperators& ops,
                                  const ObservationMatrix& a, const Dataset& data,
                                  const Eigen::VectorXd& v) {
  GibbsModel model(params, ops, a, data);
  return model.conditional(v);
}

VarianceLaw conditional_v_params(const ModelParams& params, const FemOperators& ops,
                                 const Eigen::VectorXd& w) {
  Dataset empty;
  empty.y = Eigen::VectorXd::Zero(0);
  empty.b = Eigen::MatrixXd::Zero(0, params.beta.size());
  empty.b_gamma = Eigen::MatrixXd::Ones(ops.n, params.noise.drift.size());
  empty.b_mu = Eigen::MatrixXd::Ones(ops.n, params.noise.mu.size());
  ObservationMatrix a;
  a.a = SpMatRow(0, ops.n);
  GibbsModel model(params, ops, a, empty);
  return model.conditional_v(w);
}

void SufficientStats::init(int n, int n_x, int n_gamma, int n_mu) {
  s1 = s2 = s3 = 0;
  s4 = Eigen::VectorXd::Zero(n_gamma);
  s5 = Eigen::VectorXd::Zero(n_gamma);
  s6 = Eigen::VectorXd::Zero(n_mu);
  s7 = Eigen::VectorXd::Zero(n_mu);
  s8 = Eigen::MatrixXd::Zero(n_gamma, n_gamma);
  s9 = Eigen::MatrixXd::Zero(n_mu, n_mu);
  bx = Eigen::VectorXd::Zero(n_x);
  hx = 0;
  sum_log_v = Eigen::VectorXd::Zero(n);
  sum_v = Eigen::VectorXd::Zero(n);
  sum_v_inv = Eigen::VectorXd::Zero(n);
  r1 = r2 = r3 = 0;
  r4 = Eigen::VectorXd::Zero(n_gamma);
  r5 = Eigen::VectorXd::Zero(n_gamma);
  r8 = Eigen::MatrixXd::Zero(n_gamma, n_gamma);
  r9 = Eigen::MatrixXd::Zero(n_mu, n_mu);
  rb_sum_log_v = Eigen::VectorXd::Zero(n);
  rb_sum_v = Eigen::VectorXd::Zero(n);
  rb_sum_v_inv = Eigen::VectorXd::Zero(n);
  k = 0;
  hazard_clamped = false;
}

void SufficientStats::accumulate(const LatentState& state, const GibbsModel& model) {
  const FemOperators& ops = model.ops();
  const Dataset& data = model.data();
  const Eigen::VectorXd& w = state.w;
  const Eigen::VectorXd& v = state.v;
  if (w.size() != ops.n || v.size() != ops.n)
    throw DimensionMismatch("latent state does not match mesh size");

  Eigen::VectorXd cw = ops.h.cwiseProduct(w);
  Eigen::VectorXd gw = ops.g.apply(w);
  Eigen::VectorXd vinv = v.cwiseInverse();

  s1 += (cw.array().square() * vinv.array()).sum();
  s2 += (cw.array() * gw.array() * vinv.array()).sum();
  s3 += (gw.array().square() * vinv.array()).sum();
  s4 += data.b_gamma.transpose() * (vinv.array() * cw.array()).matrix();
  s5 += data.b_gamma.transpose() * (vinv.array() * gw.array()).matrix();
  s6 += data.b_mu.transpose() * cw;
  s7 += data.b_mu.transpose() * gw;
  s8 += data.b_gamma.transpose() * vinv.asDiagonal() * data.b_gamma;
  s9 += data.b_mu.transpose() * v.asDiagonal() * data.b_mu;
  sum_log_v += v.array().log().matrix();
  sum_v += v;
  sum_v_inv += vinv;

  Eigen::VectorXd resid = data.y - model.obs().a * w;
  bx += data.b.transpose() * resid;
  hx += resid.squaredNorm();

  Eigen::VectorXd ev, ev_inv, elog_v;
  model.conditional_v_moments(w, &ev, &ev_inv, &elog_v);
  if (model.hazard_active() && (ev_inv.array() >= kHazardClamp).any()) hazard_clamped = true;
  r1 += (cw.array().square() * ev_inv.array()).sum();
  r2 += (cw.array() * gw.array() * ev_inv.array()).sum();
  r3 += (gw.array().square() * ev_inv.array()).sum();
  r4 += data.b_gamma.transpose() * (ev_inv.array() * cw.array()).matrix();
  r5 += data.b_gamma.transpose() * (ev_inv.array() * gw.array()).matrix();
  r8 += data.b_gamma.transpose() * ev_inv.asDiagonal() * data.b_gamma;
  r9 += data.b_mu.transpose() * ev.asDiagonal() * data.b_mu;
  rb_sum_log_v += elog_v;
  rb_sum_v += ev;
  rb_sum_v_inv += ev_inv;

  ++k;
}

void SufficientStats::merge(const SufficientStats& other) {
  s1 += other.s1;
  s2 += other.s2;
  s3 += other.s3;
  s4 += other.s4;
  s5 += other.s5;
  s6 += other.s6;
  s7 += other.s7;
  s8 += other.s8;
  s9 += other.s9;
  bx += other.bx;
  hx += other.hx;
  sum_log_v += other.sum_log_v;
  sum_v += other.sum_v;
  sum_v_inv += other.sum_v_inv;
  r1 += other.r1;
  r2 += other.r2;
  r3 += other.r3;
  r4 += other.r4;
  r5 += other.r5;
  r8 += other.r8;
  r9 += other.r9;
  rb_sum_log_v += other.rb_sum_log_v;
  rb_sum_v += other.rb_sum_v;
  rb_sum_v_inv += other.rb_sum_v_inv;
  k += other.k;
  hazard_clamped = hazard_clamped || other.hazard_clamped;
}

SufficientStats gibbs_run(GibbsModel& model, LatentState* state, const GibbsConfig& cfg,
                          const std::vector<GibbsConsumer*>& consumers,
                          std::vector<LatentState>* retained) {
  if (cfg.samples < 1) throw InvalidParams("gibbs samples must be at least 1");
  if (cfg.burn_in < 0) throw InvalidParams("gibbs burn_in must be non-negative");
  if (cfg.thinning < 1) throw InvalidParams("gibbs thinning must be at least 1");

  const int n = model.n();
  RngStream rng(cfg.seed);
  if (state->v.size() != n) {
    state->v = prior_v_mean(model.params().noise, model.ops().h);
    state->w = Eigen::VectorXd::Zero(n);
  }

  SufficientStats stats;
  stats.init(n, static_cast<int>(model.data().b.cols()),
             static_cast<int>(model.data().b_gamma.cols()),
             static_cast<int>(model.data().b_mu.cols()));

  const bool gaussian = model.family() == NoiseFamily::gaussian;
  ConditionalGaussian fixed;
  if (gaussian) {
    try {
      fixed = model.conditional(state->v);
    } catch (const NotPositiveDefinite& e) {
      throw NotPositiveDefinite(std::string(e.what()) + " at gibbs setup" + dump_state(state->v));
    }
  }

  const long total = static_cast<long>(cfg.burn_in) +
                     static_cast<long>(cfg.samples) * static_cast<long>(cfg.thinning);
  for (long sweep = 0; sweep < total; ++sweep) {
    const ConditionalGaussian* cg = &fixed;
    ConditionalGaussian scratch;
    if (!gaussian) {
      try {
        scratch = model.conditional(state->v);
      } catch (const NotPositiveDefinite& e) {
        throw NotPositiveDefinite(std::string(e.what()) + " at gibbs sweep " +
                                  std::to_string(sweep) + dump_state(state->v));
      }
      cg = &scratch;
    }
    state->w = sample_gaussian(cg->factor, cg->mean, rng);
    if (!gaussian) {
      VarianceLaw law = model.conditional_v(state->w);
      for (int j = 0; j < n; ++j) state->v[j] = gig_sample(law.gig[j], rng);
    }
    if (sweep >= cfg.burn_in && (sweep - cfg.burn_in) % cfg.thinning == cfg.thinning - 1) {
      stats.accumulate(*state, model);
      for (GibbsConsumer* c : consumers) c->consume(*state, *cg);
      if (retained != nullptr) retained->push_back(*state);
    }
  }
  return stats;
}

std::pair<Eigen::VectorXd, double> mstep_regression(const SufficientStats& stats,
                                                    const Eigen::MatrixXd& b) {
  if (stats.k < 1) throw InvalidParams("m-step requires at least one collected sample");
  const Eigen::Index n_obs = b.rows();
  if (n_obs < 1) throw InvalidParams("m-step requires at least one observation");
  if (stats.bx.size() != b.cols()) throw DimensionMismatch("covariate columns do not match stats");

  const double inv_k = 1.0 / static_cast<double>(stats.k);
  Eigen::VectorXd bx_bar = stats.bx * inv_k;
  const double hx_bar = stats.hx * inv_k;

  Eigen::VectorXd beta(b.cols());
  if (b.cols() > 0) {
    Eigen::MatrixXd btb = b.transpose() * b;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(btb, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double smax = svd.singularValues()(0);
    const double smin = svd.singularValues()(svd.singularValues().size() - 1);
    if (smax <= 0 || smin / smax <= 1e-12)
      throw RankDeficientB("covariate matrix is rank deficient");
    beta = svd.solve(bx_bar);
    double s2 = (hx_bar - 2.0 * bx_bar.dot(beta) + beta.dot(btb * beta)) /
                static_cast<double>(n_obs);
    return {beta, std::max(s2, 1e-12)};
  }
  return {beta, std::max(hx_bar / static_cast<double>(n_obs), 1e-12)};
}

namespace {

// Derivative of the expected log prior of the GAL mixing variances in tau.
double gal_score(double tau, const Eigen::VectorXd& h, const Eigen::VectorXd& mean_log_v) {
  double s = 0;
  for (Eigen::Index j = 0; j < h.size(); ++j)
    s += h[j] * (mean_log_v[j] - gsl_sf_psi(tau * h[j]));
  return s;
}

double gal_curvature(double tau, const Eigen::VectorXd& h) {
  double s = 0;
  for (Eigen::Index j = 0; j < h.size(); ++j) s -= h[j] * h[j] * gsl_sf_psi_1(tau * h[j]);
  return s;
}

}  // namespace

NoiseSpec mstep_noise(const SufficientStats& stats, const NoiseSpec& noise,
                      const Eigen::VectorXd& h) {
  if (stats.k < 1) throw InvalidParams("m-step requires at least one collected sample");
  NoiseSpec out = noise;
  if (noise.family == NoiseFamily::gaussian) return out;
  const double inv_k = 1.0 / static_cast<double>(stats.k);

  if (noise.family == NoiseFamily::gal) {
    Eigen::VectorXd mean_log_v = stats.sum_log_v * inv_k;
    double lo = noise.tau, hi = noise.tau;
    while (gal_score(lo, h, mean_log_v) <= 0) {
      lo *= 0.5;
      if (lo < 1e-12) throw BracketFailure("no sign change bracketing the tau score from below");
    }
    while (gal_score(hi, h, mean_log_v) >= 0) {
      hi *= 2.0;
      if (hi > 1e12) throw BracketFailure("no sign change bracketing the tau score from above");
    }
    double x = std::sqrt(lo * hi);
    for (int it = 0; it < 200; ++it) {
      const double g = gal_score(x, h, mean_log_v);
      if (std::abs(g) < 1e-10) break;
      if (g > 0) lo = x;
      else hi = x;
      const double gp = gal_curvature(x, h);
      double next = x - g / gp;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (hi - lo < 1e-14 * x) break;
      x = next;
    }
    out.tau = x;
    return out;
  }

  // Inverse-Gaussian mixing: the shape update has a closed form.
  double s = 0;
  for (Eigen::Index j = 0; j < h.size(); ++j) s += std::sqrt(h[j]);
  const double t = h.dot(stats.sum_v_inv) * inv_k;
  const double n = static_cast<double>(h.size());
  const double nu = (s + std::sqrt(s * s + 2.0 * n * t)) / (std::sqrt(2.0) * t);
  out.nu = nu;
  return out;
}

namespace {

struct ProfileParts {
  double s1, s2, s3;
  Eigen::VectorXd s4, s5, s6, s7;
  Eigen::MatrixXd qpar;       // [[s9, cross], [cross', s8]] (kappa free)
  Eigen::JacobiSVD<Eigen::MatrixXd> svd;
  int n_mu = 0, n_gamma = 0;
  int n = 0;
};

// Profiled log-likelihood over (theta, sigma^2) at fixed kappa.
double profile_at(const ProfileParts& pp, const FemOperators& ops, double kappa, double* sigma2,
                  Eigen::VectorXd* theta) {
  const double k2 = kappa * kappa;
  const double h_term = k2 * k2 * pp.s1 + 2.0 * k2 * pp.s2 + pp.s3;
  Eigen::VectorXd b(pp.n_mu + pp.n_gamma);
  b.head(pp.n_mu) = k2 * pp.s6 + pp.s7;
  b.tail(pp.n_gamma) = k2 * pp.s4 + pp.s5;
  double qmin = h_term;
  if (b.size() > 0) {
    *theta = pp.svd.solve(b);
    qmin -= b.dot(*theta);
  } else {
    theta->resize(0);
  }
  *sigma2 = std::max(qmin, 1e-300) / static_cast<double>(pp.n);
  const double logdet = chol_factor(build_k(ops, kappa)).log_det();
  return logdet - 0.5 * static_cast<double>(pp.n) * std::log(*sigma2);
}

}  // namespace

SpdeEstimate mstep_spde(const SufficientStats& stats, const FemOperators& ops,
                        const Eigen::MatrixXd& b_gamma, const Eigen::MatrixXd& b_mu, int alpha,
                        double kappa_lo, double kappa_hi) {
  if (alpha != 2) throw UnsupportedAlpha("estimation supports alpha=2 only");
  if (stats.k < 1) throw InvalidParams("m-step requires at least one collected sample");
  if (!(kappa_lo > 0) || !(kappa_hi > kappa_lo))
    throw InvalidInterval("kappa search interval must satisfy 0 < lo < hi");

  ProfileParts pp;
  const double inv_k = 1.0 / static_cast<double>(stats.k);
  pp.s1 = stats.s1 * inv_k;
  pp.s2 = stats.s2 * inv_k;
  pp.s3 = stats.s3 * inv_k;
  pp.s4 = stats.s4 * inv_k;
  pp.s5 = stats.s5 * inv_k;
  pp.s6 = stats.s6 * inv_k;
  pp.s7 = stats.s7 * inv_k;
  pp.n_mu = static_cast<int>(stats.s6.size());
  pp.n_gamma = static_cast<int>(stats.s4.size());
  pp.n = ops.n;
  if (b_gamma.cols() != pp.n_gamma || b_mu.cols() != pp.n_mu)
    throw DimensionMismatch("node covariates do not match statistics dimensions");

  const int n_par = pp.n_mu + pp.n_gamma;
  pp.qpar = Eigen::MatrixXd::Zero(n_par, n_par);
  if (n_par > 0) {
    pp.qpar.topLeftCorner(pp.n_mu, pp.n_mu) = stats.s9 * inv_k;
    pp.qpar.bottomRightCorner(pp.n_gamma, pp.n_gamma) = stats.s8 * inv_k;
    Eigen::MatrixXd cross = b_mu.transpose() * b_gamma;
    pp.qpar.topRightCorner(pp.n_mu, pp.n_gamma) = cross;
    pp.qpar.bottomLeftCorner(pp.n_gamma, pp.n_mu) = cross.transpose();
    pp.svd.compute(pp.qpar, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double smax = pp.svd.singularValues()(0);
    const double smin = pp.svd.singularValues()(pp.svd.singularValues().size() - 1);
    if (smax <= 0 || smin / smax <= 1e-12)
      throw SingularQpar("drift/skew normal matrix is numerically singular");
  }

  double sigma2 = 0;
  Eigen::VectorXd theta;

  const int n_grid = 17;
  const double llo = std::log(kappa_lo), lhi = std::log(kappa_hi);
  int best = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_grid; ++i) {
    const double kap = std::exp(llo + (lhi - llo) * i / (n_grid - 1));
    const double val = profile_at(pp, ops, kap, &sigma2, &theta);
    if (val > best_val) {
      best_val = val;
      best = i;
    }
  }
  SpdeEstimate est;
  est.at_edge = (best == 0 || best == n_grid - 1);
  if (est.at_edge) {
    // No interior maximum on the grid: report the boundary value.
    est.kappa = (best == 0) ? kappa_lo : kappa_hi;
  } else {
    double a = llo + (lhi - llo) * (best - 1) / (n_grid - 1);
    double b = llo + (lhi - llo) * (best + 1) / (n_grid - 1);
    const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = b - invphi * (b - a);
    double x2 = a + invphi * (b - a);
    double f1 = profile_at(pp, ops, std::exp(x1), &sigma2, &theta);
    double f2 = profile_at(pp, ops, std::exp(x2), &sigma2, &theta);
    while (b - a > 1e-5) {
      if (f1 < f2) {
        a = x1;
        x1 = x2;
        f1 = f2;
        x2 = a + invphi * (b - a);
        f2 = profile_at(pp, ops, std::exp(x2), &sigma2, &theta);
      } else {
        b = x2;
        x2 = x1;
        f2 = f1;
        x1 = b - invphi * (b - a);
        f1 = profile_at(pp, ops, std::exp(x1), &sigma2, &theta);
      }
    }
    est.kappa = std::exp(0.5 * (a + b));
  }
  est.profile = profile_at(pp, ops, est.kappa, &sigma2, &theta);
  est.sigma = std::sqrt(sigma2);
  est.mu = theta.head(pp.n_mu);
  est.drift = theta.tail(pp.n_gamma);
  return est;
}

namespace {

double q_value(const SufficientStats& stats, const ModelParams& params, const FemOperators& ops,
               const Dataset& data, bool use_rb) {
  if (stats.k < 1) throw TooFewSamples("objective requires at least one collected sample");
  if (params.alpha != 2) throw UnsupportedAlpha("objective supports alpha=2 only");
  const double inv_k = 1.0 / static_cast<double>(stats.k);
  const double n_obs = static_cast<double>(data.y.size());
  const int n = ops.n;

  // Measurement block (free of the mixing variances).
  const double se2 = params.sigma_eps * params.sigma_eps;
  Eigen::MatrixXd btb = data.b.transpose() * data.b;
  const double rss = stats.hx * inv_k - 2.0 * (stats.bx * inv_k).dot(params.beta) +
                     params.beta.dot(btb * params.beta);
  double value = -0.5 * n_obs * std::log(2.0 * M_PI * se2) - rss / (2.0 * se2);

  // Field block.
  const double sigma = params.noise.family == NoiseFamily::gaussian ? params.noise.phi
                                                                    : params.noise.sigma;
  const double s2 = sigma * sigma;
  const double k2 = params.kappa * params.kappa;
  const double t1 = use_rb ? stats.r1 : stats.s1;
  const double t2 = use_rb ? stats.r2 : stats.s2;
  const double t3 = use_rb ? stats.r3 : stats.s3;
  const Eigen::VectorXd& t4 = use_rb ? stats.r4 : stats.s4;
  const Eigen::VectorXd& t5 = use_rb ? stats.r5 : stats.s5;
  const Eigen::MatrixXd& t8 = use_rb ? stats.r8 : stats.s8;
  const Eigen::MatrixXd& t9 = use_rb ? stats.r9 : stats.s9;
  const Eigen::VectorXd& slv = use_rb ? stats.rb_sum_log_v : stats.sum_log_v;
  const Eigen::VectorXd& sv = use_rb ? stats.rb_sum_v : stats.sum_v;
  const Eigen::VectorXd& svi = use_rb ? stats.rb_sum_v_inv : stats.sum_v_inv;

  const Eigen::VectorXd& gamma = params.noise.drift;
  const Eigen::VectorXd& mu = params.noise.mu;
  Eigen::MatrixXd cross = data.b_mu.transpose() * data.b_gamma;
  // All accumulators below are sums over k states; divide once at the end.
  double qf = k2 * k2 * t1 + 2.0 * k2 * t2 + t3;
  qf -= 2.0 * gamma.dot(k2 * t4 + t5);
  qf -= 2.0 * mu.dot(k2 * stats.s6 + stats.s7);
  qf += 2.0 * static_cast<double>(stats.k) * mu.dot(cross * gamma);
  qf += gamma.dot(t8 * gamma);
  qf += mu.dot(t9 * mu);
  qf *= inv_k;
  const double logdet = chol_factor(build_k(ops, params.kappa)).log_det();
  value += -0.5 * n * std::log(2.0 * M_PI * s2) + logdet - 0.5 * slv.sum() * inv_k -
           qf / (2.0 * s2);

  // Mixing-variance prior block.
  if (params.noise.family != NoiseFamily::gaussian) {
    VarianceLaw prior = prior_variance_params(params.noise, ops.h);
    for (int j = 0; j < n; ++j) {
      const GigParams& g = prior.gig[j];
      double term = detail::gig_log_normalizer(g) + (g.p - 1.0) * slv[j] * inv_k;
      if (g.a > 0) term -= 0.5 * g.a * sv[j] * inv_k;
      if (g.b > 0) term -= 0.5 * g.b * svi[j] * inv_k;
      value += term;
    }
  }
  return value;
}

}  // namespace

double rb_q_value(const SufficientStats& stats, const ModelParams& params, const FemOperators& ops,
                  const Dataset& data) {
  return q_value(stats, params, ops, data, true);
}

double q_mc_value(const SufficientStats& stats, const ModelParams& params, const FemOperators& ops,
                  const Dataset& data) {
  return q_value(stats, params, ops, data, false);
}

namespace {

std::vector<double> flatten_params(const ModelParams& p) {
  std::vector<double> out;
  out.push_back(p.kappa);
  out.push_back(p.sigma_eps);
  for (Eigen::Index i = 0; i < p.beta.size(); ++i) out.push_back(p.beta[i]);
  switch (p.noise.family) {
    case NoiseFamily::gaussian:
      out.push_back(p.noise.phi);
      break;
    case NoiseFamily::gal:
      out.push_back(p.noise.sigma);
      out.push_back(p.noise.tau);
      break;
    case NoiseFamily::nig:
      out.push_back(p.noise.sigma);
      out.push_back(p.noise.nu);
      break;
  }
  for (Eigen::Index i = 0; i < p.noise.drift.size(); ++i) out.push_back(p.noise.drift[i]);
  for (Eigen::Index i = 0; i < p.noise.mu.size(); ++i) out.push_back(p.noise.mu[i]);
  return out;
}

}  // namespace

FitResult mcem_fit(const Dataset& data, const FemOperators& ops, const ObservationMatrix& a,
                   const ModelParams& initial, const McemConfig& cfg) {
  if (cfg.max_iter < 0) throw InvalidParams("max_iter must be non-negative");
  if (cfg.k0 < 1 || cfg.k_max < cfg.k0) throw InvalidParams("chain length schedule is invalid");
  if (!(cfg.growth >= 1.0)) throw InvalidParams("chain growth factor must be at least 1");

  FitResult result;
  result.params = initial;
  ModelParams cur = initial;
  LatentState state;
  std::vector<double> prev = flatten_params(cur);
  int streak = 0;
  bool warned_hazard = false, warned_edge = false;

  for (int p = 0; p < cfg.max_iter; ++p) {
    const double raw = static_cast<double>(cfg.k0) * std::pow(cfg.growth, p);
    const int k_p = static_cast<int>(std::min<double>(cfg.k_max, std::ceil(raw)));

    GibbsConfig gc = cfg.gibbs;
    gc.samples = k_p;
    gc.burn_in = (p == 0) ? cfg.gibbs.burn_in : cfg.warm_burn_in;
    gc.seed = RngStream::derive(cfg.gibbs.seed, static_cast<std::uint64_t>(p));

    SufficientStats stats;
    try {
      GibbsModel model(cur, ops, a, data);
      stats = gibbs_run(model, &state, gc);
    } catch (const NotPositiveDefinite& e) {
      throw NotPositiveDefinite("em iteration " + std::to_string(p) + ": " + e.what());
    }

    auto [beta, se2] = mstep_regression(stats, data.b);
    SpdeEstimate spde = mstep_spde(stats, ops, data.b_gamma, data.b_mu, cur.alpha, cfg.kappa_lo,
                                   cfg.kappa_hi);
    ModelParams next = cur;
    next.beta = beta;
    next.sigma_eps = std::sqrt(se2);
    next.kappa = spde.kappa;
    if (next.noise.family == NoiseFamily::gaussian) {
      next.noise.phi = spde.sigma;
    } else {
      next.noise.sigma = spde.sigma;
      next.noise.drift = spde.drift;
      next.noise.mu = spde.mu;
    }
    next.noise = mstep_noise(stats, next.noise, ops.h);

    if (stats.hazard_clamped && !warned_hazard) {
      result.warnings.push_back("gal mixing shape close to 1/2 at iteration " + std::to_string(p) +
                                "; conditional inverse moments were clamped");
      warned_hazard = true;
    }
    if (spde.at_edge && !warned_edge) {
      result.warnings.push_back("kappa profile maximum at search boundary at iteration " +
                                std::to_string(p) + " (kappa=" + std::to_string(spde.kappa) + ")");
      warned_edge = true;
    }

    result.q_rb.push_back(rb_q_value(stats, next, ops, data));
    result.trace.push_back(next);
    result.k_schedule.push_back(k_p);
    result.iterations = p + 1;

    std::vector<double> now = flatten_params(next);
    double rel = 0;
    for (std::size_t i = 0; i < now.size(); ++i)
      rel = std::max(rel, std::abs(now[i] - prev[i]) / std::max(std::abs(prev[i]), 1e-3));
    streak = (rel < cfg.stop_tol) ? streak + 1 : 0;
    prev = std::move(now);
    cur = next;

    if (streak >= cfg.stop_window) {
      result.termination = "converged";
      break;
    }
  }

  if (result.termination.empty()) result.termination = "max_iter";
  result.params = cur;
  return result;
}

}  // namespace ngfield
