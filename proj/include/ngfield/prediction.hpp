#pragma once

#include <cstdint>
#include <vector>

#include "ngfield/inference.hpp"

namespace ngfield {

// Kriging output at a set of target locations. The _mc estimates average the
// sampled field directly; the _rb estimates average the conditional mean
// given each mixing-variance draw, which has lower Monte Carlo variance.
// var_rb combines the average conditional variance with the spread of the
// conditional means (law of total variance); var_rb_within keeps only the
// first piece and is exposed as a diagnostic.
struct PredictionResult {
  Eigen::VectorXd mean_mc;
  Eigen::VectorXd mean_rb;
  Eigen::VectorXd var_mc;
  Eigen::VectorXd var_rb;
  Eigen::VectorXd var_rb_within;
  long k = 0;
  long pattern_fallbacks = 0;  // rows handled by a direct solve instead of the
                               // selected inverse
};

// Gibbs consumer that accumulates kriging sums for the rows of a_p.
// constant_precision: the conditional precision never changes between sweeps
// (Gaussian driving noise), so the selected inverse is computed once.
class KrigingAccumulator : public GibbsConsumer {
 public:
  KrigingAccumulator(const SpMatRow& a_p, bool with_variance, bool constant_precision);
  void consume(const LatentState& state, const ConditionalGaussian& cg) override;
  PredictionResult finalize() const;

 private:
  void accumulate_variance(const ConditionalGaussian& cg);

  SpMatRow a_p_;
  bool with_variance_;
  bool constant_precision_;
  bool have_cached_sel_ = false;
  SparseSym cached_sel_;
  long k_ = 0;
  long fallbacks_ = 0;
  Eigen::VectorXd sum_mc_, sumsq_mc_;
  Eigen::VectorXd sum_rb_, sumsq_rb_;
  Eigen::VectorXd sum_condvar_;
};

// Runs a Gibbs chain at fixed parameters and kriges the rows of a_p.
PredictionResult krige(GibbsModel& model, LatentState* state, const GibbsConfig& cfg,
                       const SpMatRow& a_p, bool with_variance = true);

// Monte Carlo continuous ranked probability score, averaged over locations:
// samples is k x m (k draws of an m-vector), y the realized m-vector. Uses
// the unbiased pairwise form with an O(k log k) sorted evaluation.
double crps_mc(const Eigen::MatrixXd& samples, const Eigen::VectorXd& y);

// Monte Carlo energy score (multivariate CRPS, Euclidean norm), unbiased
// pairwise form. For a single location it reduces to crps_mc exactly.
double energy_score_mc(const Eigen::MatrixXd& samples, const Eigen::VectorXd& y);

struct Scores {
  double var_rs = 0;     // variance of standardized residuals (1 if calibrated)
  double mean_r = 0;
  double var_r = 0;
  double mean_abs_r = 0;
  double crps = 0;
  double energy = 0;
};

// Population moments of the residuals r and of r standardized by the
// prediction standard deviations. crps/energy are left at zero.
Scores residual_summaries(const Eigen::VectorXd& r, const Eigen::VectorXd& pred_var);

// Observation-scale transform applied before fitting/scoring: none, or
// fields observed as squares (fit on sqrt(y), score back on y).
enum class ObsTransform { none, sqrt_back };

struct CrossvalOptions {
  int folds = 10;
  std::uint64_t seed = 0;
  bool refit = false;             // refit parameters on each training fold
  GibbsConfig gibbs;              // per-fold prediction chain settings
  McemConfig mcem;                // used only when refit is true
  ObsTransform transform = ObsTransform::none;
};

struct CrossvalResult {
  Scores scores;
  Eigen::VectorXd pred_mean;      // per observation, original row order
  Eigen::VectorXd pred_var;       // observation scale (includes nugget)
  Eigen::VectorXd residual;
  Eigen::VectorXd residual_std;
  std::vector<int> fold_of;
};

// K-fold cross-validation: random balanced partition, per-fold conditioning
// chains on the training rows, held-out predictive scoring. When transform
// is sqrt_back the dataset y is on the square-root scale and all scoring
// happens on the original (squared) scale.
CrossvalResult crossval(const Dataset& data, const FemOperators& ops, const Mesh& mesh,
                        const ModelParams& params, const CrossvalOptions& opt);

}  // namespace ngfield
