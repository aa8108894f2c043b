#include "ngfield/model.hpp"

#include <cmath>

namespace ngfield {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

double matern_cov(double dist, double kappa, double nu_shape, double phi, int d) {
  if (!(nu_shape > 0.0)) throw InvalidShape("matern smoothness must be positive");
  if (!(kappa > 0.0)) throw NonPositiveKappa("kappa must be positive");
  if (!(phi > 0.0)) throw InvalidParams("matern scale phi must be positive");
  if (d != 1 && d != 2) throw InvalidParams("matern dimension must be 1 or 2");
  if (dist < 0.0) throw InvalidParams("distance must be non-negative");
  // log of the common prefactor 2^{1-nu} phi^2 / ((4 pi)^{d/2} Gamma(nu+d/2) kappa^{2 nu})
  const double log_pre = (1.0 - nu_shape) * std::log(2.0) + 2.0 * std::log(phi) -
                         0.5 * d * std::log(4.0 * kPi) - std::lgamma(nu_shape + d / 2.0) -
                         2.0 * nu_shape * std::log(kappa);
  if (dist == 0.0) {
    // lim x->0 x^nu K_nu(x) = 2^{nu-1} Gamma(nu)
    return std::exp(log_pre + (nu_shape - 1.0) * std::log(2.0) + std::lgamma(nu_shape));
  }
  const double x = kappa * dist;
  return std::exp(log_pre + nu_shape * std::log(x) + log_bessel_k(nu_shape, x));
}

VarianceLaw prior_variance_params(const NoiseSpec& noise, const Eigen::VectorXd& h) {
  for (int i = 0; i < h.size(); ++i)
    if (!(h[i] > 0.0)) throw InvalidParams("cell areas must be strictly positive");
  VarianceLaw law;
  switch (noise.family) {
    case NoiseFamily::gaussian:
      law.degenerate = true;
      return law;
    case NoiseFamily::gal:
      if (!(noise.tau > 0.0)) throw InvalidParams("gal tau must be positive");
      law.gig.reserve(static_cast<std::size_t>(h.size()));
      for (int i = 0; i < h.size(); ++i) law.gig.push_back({h[i] * noise.tau, 2.0, 0.0});
      return law;
    case NoiseFamily::nig:
      if (!(noise.nu > 0.0)) throw InvalidParams("nig nu must be positive");
      law.gig.reserve(static_cast<std::size_t>(h.size()));
      for (int i = 0; i < h.size(); ++i)
        law.gig.push_back({-0.5, 2.0, noise.nu * noise.nu * h[i]});
      return law;
  }
  throw InvalidFamily("unknown noise family");
}

Eigen::VectorXd prior_v_mean(const NoiseSpec& noise, const Eigen::VectorXd& h) {
  const VarianceLaw law = prior_variance_params(noise, h);
  if (law.degenerate) return h;
  Eigen::VectorXd m(h.size());
  for (int i = 0; i < h.size(); ++i) m[i] = gig_moment(law.gig[static_cast<std::size_t>(i)], 1.0);
  return m;
}

Eigen::VectorXd draw_prior_v(const NoiseSpec& noise, const Eigen::VectorXd& h, RngStream& rng) {
  const VarianceLaw law = prior_variance_params(noise, h);
  if (law.degenerate) return h;
  Eigen::VectorXd v(h.size());
  for (int i = 0; i < h.size(); ++i) v[i] = gig_sample(law.gig[static_cast<std::size_t>(i)], rng);
  return v;
}

LatentState simulate_latent(const ModelParams& params, const FemOperators& ops,
                            const Eigen::MatrixXd& b_gamma, const Eigen::MatrixXd& b_mu,
                            RngStream& rng) {
  const int n = ops.n;
  if (b_gamma.rows() != n && b_gamma.size() != 0)
    throw DimensionMismatch("b_gamma row count does not match node count");
  if (b_mu.rows() != n && b_mu.size() != 0)
    throw DimensionMismatch("b_mu row count does not match node count");
  if (params.noise.drift.size() != b_gamma.cols())
    throw DimensionMismatch("drift coefficient count does not match b_gamma columns");
  if (params.noise.mu.size() != b_mu.cols())
    throw DimensionMismatch("mu coefficient count does not match b_mu columns");

  LatentState state;
  state.v = draw_prior_v(params.noise, ops.h, rng);

  Eigen::VectorXd noise_vec = Eigen::VectorXd::Zero(n);
  if (b_gamma.cols() > 0) noise_vec += b_gamma * params.noise.drift;
  if (b_mu.cols() > 0) noise_vec += state.v.asDiagonal() * (b_mu * params.noise.mu);
  const double sigma =
      params.noise.family == NoiseFamily::gaussian ? params.noise.phi : params.noise.sigma;
  for (int i = 0; i < n; ++i) noise_vec[i] += sigma * std::sqrt(state.v[i]) * rng.normal();

  const SparseSym k_alpha = build_k_alpha(ops, params.kappa, params.alpha);
  state.w = chol_factor(k_alpha).solve(noise_vec);
  return state;
}

Eigen::VectorXd simulate_observations(const ModelParams& params, const ObservationMatrix& a,
                                      const Eigen::MatrixXd& b, const Eigen::VectorXd& w,
                                      RngStream& rng) {
  if (a.a.cols() != w.size()) throw DimensionMismatch("w length does not match node count");
  if (b.rows() != a.a.rows()) throw DimensionMismatch("covariate rows do not match locations");
  if (b.cols() != params.beta.size())
    throw DimensionMismatch("beta length does not match covariate columns");
  if (!(params.sigma_eps >= 0.0)) throw InvalidParams("sigma_eps must be non-negative");
  Eigen::VectorXd y = a.a * w;
  if (b.cols() > 0) y += b * params.beta;
  for (int i = 0; i < y.size(); ++i) y[i] += params.sigma_eps * rng.normal();
  return y;
}

Eigen::MatrixXd ones_column(int rows) { return Eigen::MatrixXd::Ones(rows, 1); }

const char* family_name(NoiseFamily family) {
  switch (family) {
    case NoiseFamily::gaussian: return "gaussian";
    case NoiseFamily::gal: return "gal";
    case NoiseFamily::nig: return "nig";
  }
  return "unknown";
}

NoiseFamily family_from_name(const std::string& name) {
  if (name == "gaussian") return NoiseFamily::gaussian;
  if (name == "gal") return NoiseFamily::gal;
  if (name == "nig") return NoiseFamily::nig;
  throw InvalidFamily("unknown noise family '" + name + "' (expected gaussian, gal, or nig)");
}

}  // namespace ngfield
