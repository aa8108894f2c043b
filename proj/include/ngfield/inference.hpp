#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ngfield/model.hpp"

namespace ngfield {

// Gaussian conditional of w given (V, y): precision q_hat, shift vector
// (q_hat * mean = shift), cached factorization, and the solved mean.
struct ConditionalGaussian {
  SparseSym q_hat;
  Eigen::VectorXd shift;
  CholFactor factor;
  Eigen::VectorXd mean;
};

struct GibbsConfig {
  int samples = 100;
  int burn_in = 100;
  int thinning = 1;
  std::uint64_t seed = 0;
};

// Callback fed every kept Gibbs state together with the conditional that
// generated its w draw. The conditional's factor is only valid during the
// call (the sampler's workspace reuses it).
class GibbsConsumer {
 public:
  virtual ~GibbsConsumer() = default;
  virtual void consume(const LatentState& state, const ConditionalGaussian& cg) = 0;
};

// Constant-memory accumulators collected over kept Gibbs states. Two
// parallel sets are kept: plain sums over the sampled V (drive the M-step),
// and conditional-expectation sums given each w (drive the smoothed
// objective). Quantities free of V are shared.
struct SufficientStats {
  double s1 = 0, s2 = 0, s3 = 0;      // w' K' I_V^{-1} K w pieces (C/G split)
  Eigen::VectorXd s4, s5;             // B_g' I_V^{-1} (Cw), (Gw)
  Eigen::VectorXd s6, s7;             // B_m' (Cw), (Gw)
  Eigen::MatrixXd s8;                 // B_g' I_V^{-1} B_g
  Eigen::MatrixXd s9;                 // B_m' I_V B_m
  Eigen::VectorXd bx;                 // B' (y - Aw)
  double hx = 0;                      // |y - Aw|^2
  Eigen::VectorXd sum_log_v, sum_v, sum_v_inv;

  double r1 = 0, r2 = 0, r3 = 0;      // conditional-expectation counterparts
  Eigen::VectorXd r4, r5;
  Eigen::MatrixXd r8, r9;
  Eigen::VectorXd rb_sum_log_v, rb_sum_v, rb_sum_v_inv;

  long k = 0;
  bool hazard_clamped = false;        // E[V^{-1}] clamp engaged (GAL hazard)

  void init(int n, int n_x, int n_gamma, int n_mu);
  void accumulate(const LatentState& state, const class GibbsModel& model);
  void merge(const SufficientStats& other);
};

// One model instance bound to fixed parameters, operators, observation
// matrix, and data; owns the factorization workspace for the Gibbs loop.
class GibbsModel {
 public:
  GibbsModel(const ModelParams& params, const FemOperators& ops, const ObservationMatrix& a,
             const Dataset& data);

  int n() const { return ops_->n; }
  NoiseFamily family() const { return params_.noise.family; }
  const ModelParams& params() const { return params_; }
  const FemOperators& ops() const { return *ops_; }
  const ObservationMatrix& obs() const { return *a_; }
  const Dataset& data() const { return *data_; }
  double mixing_sigma() const;               // sigma (phi for Gaussian)
  const Eigen::VectorXd& drift_vector() const { return bg_drift_; }
  const Eigen::VectorXd& skew_vector() const { return bm_mu_; }
  bool hazard_active() const { return hazard_active_; }

  // N(mean, q_hat^{-1}) of w given V; reuses the symbolic factorization.
  ConditionalGaussian conditional(const Eigen::VectorXd& v);

  // GIG law of each V_i given w (independent of y).
  VarianceLaw conditional_v(const Eigen::VectorXd& w) const;

  // Conditional moments E[V], E[V^{-1}], E[log V] given w, with the GAL
  // hazard clamp applied to E[V^{-1}].
  void conditional_v_moments(const Eigen::VectorXd& w, Eigen::VectorXd* ev,
                             Eigen::VectorXd* ev_inv, Eigen::VectorXd* elog_v) const;

 private:
  ModelParams params_;
  const FemOperators* ops_;
  const ObservationMatrix* a_;
  const Dataset* data_;
  SparseSym k_alpha_;
  SpMat k_full_;               // cached full-storage copies used every sweep
  SpMat ata_full_;
  Eigen::VectorXd at_resid_;   // A'(y - B beta)
  Eigen::VectorXd bg_drift_;   // B_g * drift
  Eigen::VectorXd bm_mu_;      // B_m * mu
  bool hazard_active_ = false;
  CholWorkspace ws_;
};

// Standalone builders mirroring the model methods (fresh factorization).
ConditionalGaussian conditional_w(const ModelParams& params, const FemOperators& ops,
                                  const ObservationMatrix& a, const Dataset& data,
                                  const Eigen::VectorXd& v);
VarianceLaw conditional_v_params(const ModelParams& params, const FemOperators& ops,
                                 const Eigen::VectorXd& w);

// Runs burn-in plus samples*thinning sweeps (w | V then V | w), keeping every
// thinning-th state: accumulates statistics, feeds consumers, optionally
// retains raw states. `state` is the chain position: entered as the start
// point (initialized to the prior V mean when empty) and left at the final
// state for warm restarts.
SufficientStats gibbs_run(GibbsModel& model, LatentState* state, const GibbsConfig& cfg,
                          const std::vector<GibbsConsumer*>& consumers = {},
                          std::vector<LatentState>* retained = nullptr);

// Maximizers of the three blocks of the complete-data likelihood.
std::pair<Eigen::VectorXd, double> mstep_regression(const SufficientStats& stats,
                                                    const Eigen::MatrixXd& b);

NoiseSpec mstep_noise(const SufficientStats& stats, const NoiseSpec& noise,
                      const Eigen::VectorXd& h);

struct SpdeEstimate {
  double kappa = 0;
  double sigma = 0;
  Eigen::VectorXd drift;
  Eigen::VectorXd mu;
  bool at_edge = false;   // profile maximum hit the search-interval boundary
  double profile = 0;     // profiled log-likelihood at kappa
};

SpdeEstimate mstep_spde(const SufficientStats& stats, const FemOperators& ops,
                        const Eigen::MatrixXd& b_gamma, const Eigen::MatrixXd& b_mu, int alpha,
                        double kappa_lo, double kappa_hi);

// Average complete-data log-likelihood at `params` over the collected
// states: rb_q_value uses the conditional-expectation accumulators (the
// smoothed objective reported in the fit trace), q_mc_value the plain ones.
double rb_q_value(const SufficientStats& stats, const ModelParams& params,
                  const FemOperators& ops, const Dataset& data);
double q_mc_value(const SufficientStats& stats, const ModelParams& params,
                  const FemOperators& ops, const Dataset& data);

struct McemConfig {
  GibbsConfig gibbs;        // seed, first-iteration burn-in, thinning
  int max_iter = 200;
  int k0 = 50;              // chain length schedule: min(k_max, ceil(k0*growth^p))
  int k_max = 2000;
  double growth = 1.2;
  int warm_burn_in = 10;    // burn-in after the first iteration (warm start)
  double stop_tol = 1e-3;
  int stop_window = 5;      // consecutive small-change iterations to stop
  double kappa_lo = 0.02;
  double kappa_hi = 50.0;
};

struct FitResult {
  ModelParams params;
  std::vector<ModelParams> trace;
  std::vector<double> q_rb;
  std::vector<int> k_schedule;
  int iterations = 0;
  std::string termination;
  std::vector<std::string> warnings;
};

FitResult mcem_fit(const Dataset& data, const FemOperators& ops, const ObservationMatrix& a,
                   const ModelParams& initial, const McemConfig& cfg);

}  // namespace ngfield
