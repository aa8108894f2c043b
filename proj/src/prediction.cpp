#include "ngfield/prediction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace ngfield {
namespace {

// True when (i, j) is a stored entry (inner indices are sorted).
bool entry_stored(const SpMat& m, int i, int j) {
  for (SpMat::InnerIterator it(m, j); it; ++it) {
    if (it.row() == i) return true;
    if (it.row() > i) return false;
  }
  return false;
}

}  // namespace

KrigingAccumulator::KrigingAccumulator(const SpMatRow& a_p, bool with_variance,
                                       bool constant_precision)
    : a_p_(a_p), with_variance_(with_variance), constant_precision_(constant_precision) {
  const Eigen::Index m = a_p_.rows();
  sum_mc_ = Eigen::VectorXd::Zero(m);
  sumsq_mc_ = Eigen::VectorXd::Zero(m);
  sum_rb_ = Eigen::VectorXd::Zero(m);
  sumsq_rb_ = Eigen::VectorXd::Zero(m);
  sum_condvar_ = Eigen::VectorXd::Zero(m);
}

void KrigingAccumulator::consume(const LatentState& state, const ConditionalGaussian& cg) {
  Eigen::VectorXd x = a_p_ * state.w;
  sum_mc_ += x;
  sumsq_mc_ += x.cwiseAbs2();
  Eigen::VectorXd m = a_p_ * cg.mean;
  sum_rb_ += m;
  sumsq_rb_ += m.cwiseAbs2();
  if (with_variance_) accumulate_variance(cg);
  ++k_;
}

void KrigingAccumulator::accumulate_variance(const ConditionalGaussian& cg) {
  if (!constant_precision_ || !have_cached_sel_) {
    cached_sel_ = selected_inverse(cg.factor);
    have_cached_sel_ = true;
  }
  const SpMat& sel = cached_sel_.full();
  for (Eigen::Index r = 0; r < a_p_.rows(); ++r) {
    double qf = 0;
    bool covered = true;
    for (SpMatRow::InnerIterator iu(a_p_, r); iu && covered; ++iu) {
      for (SpMatRow::InnerIterator iv(a_p_, r); iv && covered; ++iv) {
        const int u = static_cast<int>(iu.col());
        const int v = static_cast<int>(iv.col());
        if (!entry_stored(sel, u, v)) {
          covered = false;
          break;
        }
        qf += iu.value() * iv.value() * sel.coeff(u, v);
      }
    }
    if (!covered) {
      // Entry outside the factor pattern: fall back to a direct solve.
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(a_p_.cols());
      for (SpMatRow::InnerIterator iu(a_p_, r); iu; ++iu) rhs[iu.col()] = iu.value();
      qf = rhs.dot(cg.factor.solve(rhs));
      ++fallbacks_;
    }
    sum_condvar_[r] += qf;
  }
}

PredictionResult KrigingAccumulator::finalize() const {
  if (k_ < 1) throw TooFewSamples("kriging requires at least one kept sample");
  const double inv_k = 1.0 / static_cast<double>(k_);
  PredictionResult out;
  out.k = k_;
  out.pattern_fallbacks = fallbacks_;
  out.mean_mc = sum_mc_ * inv_k;
  out.var_mc = (sumsq_mc_ * inv_k - out.mean_mc.cwiseAbs2()).cwiseMax(0.0);
  out.mean_rb = sum_rb_ * inv_k;
  Eigen::VectorXd between = (sumsq_rb_ * inv_k - out.mean_rb.cwiseAbs2()).cwiseMax(0.0);
  out.var_rb_within =
      with_variance_ ? Eigen::VectorXd(sum_condvar_ * inv_k) : Eigen::VectorXd::Zero(sum_mc_.size());
  out.var_rb = out.var_rb_within + between;
  return out;
}

PredictionResult krige(GibbsModel& model, LatentState* state, const GibbsConfig& cfg,
                       const SpMatRow& a_p, bool with_variance) {
  KrigingAccumulator acc(a_p, with_variance, model.family() == NoiseFamily::gaussian);
  std::vector<GibbsConsumer*> consumers{&acc};
  gibbs_run(model, state, cfg, consumers);
  return acc.finalize();
}

double crps_mc(const Eigen::MatrixXd& samples, const Eigen::VectorXd& y) {
  const Eigen::Index k = samples.rows();
  const Eigen::Index m = samples.cols();
  if (k < 2) throw TooFewSamples("crps needs at least two draws");
  if (m != y.size()) throw DimensionMismatch("sample columns do not match observation length");
  if (m < 1) throw InvalidParams("crps needs at least one location");

  double total = 0;
  std::vector<double> col(static_cast<std::size_t>(k));
  const double kd = static_cast<double>(k);
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index i = 0; i < k; ++i) col[static_cast<std::size_t>(i)] = samples(i, j);
    std::sort(col.begin(), col.end());
    double t1 = 0;
    for (double x : col) t1 += std::abs(y[j] - x);
    t1 /= kd;
    // sum over ordered pairs of |x_a - x_b| via the sorted representation
    double pair_sum = 0;
    for (Eigen::Index l = 1; l <= k; ++l)
      pair_sum += (2.0 * static_cast<double>(l) - 1.0 - kd) * col[static_cast<std::size_t>(l - 1)];
    const double t2 = 2.0 * pair_sum / (kd * (kd - 1.0));
    total += t1 - 0.5 * t2;
  }
  return total / static_cast<double>(m);
}

double energy_score_mc(const Eigen::MatrixXd& samples, const Eigen::VectorXd& y) {
  const Eigen::Index k = samples.rows();
  const Eigen::Index m = samples.cols();
  if (k < 2) throw TooFewSamples("energy score needs at least two draws");
  if (m != y.size()) throw DimensionMismatch("sample columns do not match observation length");
  if (m < 1) throw InvalidParams("energy score needs at least one location");
  if (m == 1) return crps_mc(samples, y);  // identical by definition

  const double kd = static_cast<double>(k);
  double t1 = 0;
  for (Eigen::Index i = 0; i < k; ++i) t1 += (samples.row(i).transpose() - y).norm();
  t1 /= kd;
  double pair_sum = 0;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) pair_sum += (samples.row(i) - samples.row(j)).norm();
  const double t2 = 2.0 * pair_sum / (kd * (kd - 1.0));
  return t1 - 0.5 * t2;
}

Scores residual_summaries(const Eigen::VectorXd& r, const Eigen::VectorXd& pred_var) {
  const Eigen::Index n = r.size();
  if (n < 1) throw InvalidParams("residual summaries need at least one residual");
  if (pred_var.size() != n) throw DimensionMismatch("prediction variance length mismatch");
  if ((pred_var.array() <= 0).any())
    throw NonPositiveVariance("prediction variances must be positive for standardization");

  Eigen::VectorXd rs = r.array() / pred_var.array().sqrt();
  Scores s;
  s.mean_r = r.mean();
  s.var_r = (r.array() - s.mean_r).square().mean();
  s.mean_abs_r = r.cwiseAbs().mean();
  const double mean_rs = rs.mean();
  s.var_rs = (rs.array() - mean_rs).square().mean();
  return s;
}

namespace {

// Collects held-out predictive draws y* = B beta + A w + eps per kept sweep.
class PredictiveSampler : public GibbsConsumer {
 public:
  PredictiveSampler(const SpMatRow& a, const Eigen::MatrixXd& b, const ModelParams& params,
                    std::uint64_t seed)
      : a_(a), mean_fixed_(b * params.beta), sigma_eps_(params.sigma_eps), rng_(seed) {}

  void consume(const LatentState& state, const ConditionalGaussian&) override {
    Eigen::VectorXd row = a_ * state.w + mean_fixed_;
    for (Eigen::Index i = 0; i < row.size(); ++i) row[i] += sigma_eps_ * rng_.normal();
    rows_.push_back(std::move(row));
  }

  Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows_.size()), a_.rows());
    for (std::size_t i = 0; i < rows_.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows_[i];
    return out;
  }

 private:
  SpMatRow a_;
  Eigen::VectorXd mean_fixed_;
  double sigma_eps_;
  RngStream rng_;
  std::vector<Eigen::VectorXd> rows_;
};

Dataset subset_rows(const Dataset& data, const std::vector<int>& rows) {
  Dataset out;
  out.locations.reserve(rows.size());
  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  out.b.resize(static_cast<Eigen::Index>(rows.size()), data.b.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.locations.push_back(data.locations[static_cast<std::size_t>(rows[i])]);
    out.y[static_cast<Eigen::Index>(i)] = data.y[rows[i]];
    out.b.row(static_cast<Eigen::Index>(i)) = data.b.row(rows[i]);
  }
  out.b_gamma = data.b_gamma;
  out.b_mu = data.b_mu;
  return out;
}

}  // namespace

CrossvalResult crossval(const Dataset& data, const FemOperators& ops, const Mesh& mesh,
                        const ModelParams& params, const CrossvalOptions& opt) {
  const int n_obs = static_cast<int>(data.y.size());
  if (opt.folds < 2) throw FoldTooSmall("cross-validation needs at least two folds");
  if (n_obs < opt.folds) throw FoldTooSmall("fewer observations than folds");

  // Random balanced partition.
  std::vector<int> perm(static_cast<std::size_t>(n_obs));
  std::iota(perm.begin(), perm.end(), 0);
  RngStream prng(RngStream::derive(opt.seed, 0));
  for (int i = n_obs - 1; i > 0; --i) {
    const int j = static_cast<int>(prng.uniform() * (i + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(std::min(j, i))]);
  }
  std::vector<int> fold_of(static_cast<std::size_t>(n_obs));
  for (int i = 0; i < n_obs; ++i) fold_of[static_cast<std::size_t>(perm[i])] = i % opt.folds;

  CrossvalResult result;
  result.fold_of = fold_of;
  result.pred_mean = Eigen::VectorXd::Zero(n_obs);
  result.pred_var = Eigen::VectorXd::Zero(n_obs);
  result.residual = Eigen::VectorXd::Zero(n_obs);
  result.residual_std = Eigen::VectorXd::Zero(n_obs);

  double crps_weighted = 0;
  double energy_sum = 0;

  for (int f = 0; f < opt.folds; ++f) {
    std::vector<int> train_rows, held_rows;
    for (int i = 0; i < n_obs; ++i)
      (fold_of[static_cast<std::size_t>(i)] == f ? held_rows : train_rows).push_back(i);

    Dataset train = subset_rows(data, train_rows);
    Dataset held = subset_rows(data, held_rows);
    ObservationMatrix a_tr = build_observation_matrix(mesh, train.locations);
    a_tr.require_all_inside();
    ObservationMatrix a_he = build_observation_matrix(mesh, held.locations);
    a_he.require_all_inside();

    ModelParams theta = params;
    if (opt.refit) {
      McemConfig mc = opt.mcem;
      mc.gibbs.seed = RngStream::derive(opt.seed, 1000 + static_cast<std::uint64_t>(f));
      theta = mcem_fit(train, ops, a_tr, params, mc).params;
    }

    GibbsModel model(theta, ops, a_tr, train);
    KrigingAccumulator acc(a_he.a, true, theta.noise.family == NoiseFamily::gaussian);
    PredictiveSampler sampler(a_he.a, held.b, theta,
                              RngStream::derive(opt.seed, 2000 + static_cast<std::uint64_t>(f)));
    std::vector<GibbsConsumer*> consumers{&acc, &sampler};

    LatentState chain;
    GibbsConfig gc = opt.gibbs;
    gc.seed = RngStream::derive(opt.seed, 3000 + static_cast<std::uint64_t>(f));
    gibbs_run(model, &chain, gc, consumers);

    PredictionResult pr = acc.finalize();
    Eigen::MatrixXd draws = sampler.matrix();
    Eigen::VectorXd y_sc = held.y;

    const double nugget = theta.sigma_eps * theta.sigma_eps;
    const Eigen::Index m_f = static_cast<Eigen::Index>(held_rows.size());
    Eigen::VectorXd mean_sc(m_f), var_sc(m_f);
    for (Eigen::Index r = 0; r < m_f; ++r) {
      const double mean_y = pr.mean_rb[r] + held.b.row(r).dot(theta.beta);
      const double var_y = pr.var_rb[r] + nugget;
      if (opt.transform == ObsTransform::sqrt_back) {
        mean_sc[r] = mean_y * mean_y + var_y;
        var_sc[r] = 2.0 * var_y * var_y + 4.0 * mean_y * mean_y * var_y;
        y_sc[r] = held.y[r] * held.y[r];
      } else {
        mean_sc[r] = mean_y;
        var_sc[r] = var_y;
      }
    }
    if (opt.transform == ObsTransform::sqrt_back) draws = draws.cwiseAbs2();

    crps_weighted += static_cast<double>(m_f) * crps_mc(draws, y_sc);
    energy_sum += energy_score_mc(draws, y_sc);

    for (Eigen::Index r = 0; r < m_f; ++r) {
      const int orig = held_rows[static_cast<std::size_t>(r)];
      result.pred_mean[orig] = mean_sc[r];
      result.pred_var[orig] = var_sc[r];
      result.residual[orig] = y_sc[r] - mean_sc[r];
      result.residual_std[orig] = (y_sc[r] - mean_sc[r]) / std::sqrt(var_sc[r]);
    }
  }

  result.scores = residual_summaries(result.residual, result.pred_var);
  result.scores.crps = crps_weighted / static_cast<double>(n_obs);
  result.scores.energy = energy_sum / static_cast<double>(opt.folds);
  return result;
}

}  // namespace ngfield
