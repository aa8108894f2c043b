#pragma once

#include <vector>

#include "ngfield/gig.hpp"
#include "ngfield/mesh.hpp"

namespace ngfield {

enum class NoiseFamily { gaussian, gal, nig };

// Driving-noise specification. The drift coefficients are stored with the
// GAL shape multiplier already absorbed (drift = tau * gamma for GAL), so
// every estimation formula is free of the non-identifiable product; the
// plain GAL gamma is recovered as drift / tau for display only.
struct NoiseSpec {
  NoiseFamily family = NoiseFamily::gaussian;
  double phi = 1.0;            // gaussian: noise scale (kept equal to sigma)
  double tau = 1.0;            // gal: gamma shape per unit area
  double nu = 1.0;             // nig: shape
  Eigen::VectorXd drift;       // coefficients on the b_gamma columns
  Eigen::VectorXd mu;          // skew coefficients on the b_mu columns
  double sigma = 1.0;          // mixing scale
};

struct ModelParams {
  double kappa = 1.0;
  int alpha = 2;
  Eigen::VectorXd beta;        // mean covariate coefficients
  double sigma_eps = 0.1;      // measurement noise std
  NoiseSpec noise;

  // Matern smoothness implied by alpha in dimension d.
  double nu_shape(int d) const { return alpha - d / 2.0; }
};

// Latent field state: basis weights w and variance components V.
struct LatentState {
  Eigen::VectorXd w;
  Eigen::VectorXd v;
};

// Observations plus covariates. Rows of the source table without an
// observation value are carried separately as prediction-only locations.
struct Dataset {
  std::vector<std::array<double, 2>> locations;
  Eigen::VectorXd y;
  Eigen::MatrixXd b;        // N x n_x mean covariates (first column intercept)
  std::vector<std::array<double, 2>> pred_locations;
  Eigen::MatrixXd pred_b;
  Eigen::MatrixXd b_gamma;  // n x n_gamma node covariates for the drift
  Eigen::MatrixXd b_mu;     // n x n_mu node covariates for the skew

  int n_obs() const { return static_cast<int>(y.size()); }
};

// Per-node variance-component law: either the degenerate Gaussian limit
// (V_i = h_i exactly) or a vector of GIG laws.
struct VarianceLaw {
  bool degenerate = false;
  std::vector<GigParams> gig;
};

// Stationary Matern covariance at distance `dist` in dimension d.
double matern_cov(double dist, double kappa, double nu_shape, double phi, int d);

// Prior law of V given the noise family and cell areas h.
VarianceLaw prior_variance_params(const NoiseSpec& noise, const Eigen::VectorXd& h);

Eigen::VectorXd prior_v_mean(const NoiseSpec& noise, const Eigen::VectorXd& h);
Eigen::VectorXd draw_prior_v(const NoiseSpec& noise, const Eigen::VectorXd& h, RngStream& rng);

// Draw (V, w) from the model prior: w = K_alpha^{-1}(B_g*drift + I_V B_m mu
// + sigma sqrt(V) Z).
LatentState simulate_latent(const ModelParams& params, const FemOperators& ops,
                            const Eigen::MatrixXd& b_gamma, const Eigen::MatrixXd& b_mu,
                            RngStream& rng);

// y = B beta + A w + eps, eps iid N(0, sigma_eps^2).
Eigen::VectorXd simulate_observations(const ModelParams& params, const ObservationMatrix& a,
                                      const Eigen::MatrixXd& b, const Eigen::VectorXd& w,
                                      RngStream& rng);

// Defaults when no covariates are configured: a single all-ones column
// (scalar coefficient), or a zero-column matrix for the Gaussian family.
Eigen::MatrixXd ones_column(int rows);

const char* family_name(NoiseFamily family);
NoiseFamily family_from_name(const std::string& name);  // throws InvalidFamily

}  // namespace ngfield
