#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ngfield/inference.hpp"
#include "ngfield/mesh.hpp"
#include "ngfield/prediction.hpp"

namespace ngfield {

// Numeric CSV with a header row. Empty cells parse as NaN.
struct CsvTable {
  std::vector<std::string> columns;
  Eigen::MatrixXd values;
  int column(const std::string& name) const;  // -1 when absent
};

CsvTable read_csv(const std::string& path);
void write_csv(const std::string& path, const std::vector<std::string>& columns,
               const Eigen::MatrixXd& values);

// Shortest-exact decimal form of a double (17 significant digits).
std::string fmt17(double x);

// Point data loaded from CSV: coordinates x[,y], optional obs column, named
// covariate columns. Rows with a missing obs value are prediction targets.
struct LoadedData {
  int dimension = 2;
  std::vector<std::array<double, 2>> locations;  // every row
  Eigen::MatrixXd b;                             // intercept + covariates, every row
  Eigen::VectorXd y;                             // NaN where missing
  std::vector<int> observed;                     // row indices with obs present
  bool has_obs_column = false;

  // Dataset over the observed rows; node covariate matrices supplied by the
  // caller (constant columns over mesh nodes).
  Dataset observed_data(const Eigen::MatrixXd& b_gamma, const Eigen::MatrixXd& b_mu) const;
};

LoadedData load_dataset(const std::string& path, const std::vector<std::string>& covariates);

// Geometry block of a run configuration. When `file` is set the mesh is read
// from disk; otherwise a structured mesh is built from the rectangle spec.
struct MeshSpec {
  int dimension = 2;
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;
  double edge = 0.1;
  double extension_width = 0;
  double extension_edge = 0;
  std::string file;
};

Mesh make_mesh(const MeshSpec& spec);

struct GridSpec {
  int nx = 50;
  int ny = 50;
};

struct SimSpec {
  int n_obs = 0;
  int replicates = 1;
};

struct CrossvalSpec {
  int folds = 10;
  bool refit = false;
  bool fit_full = true;  // fit on the full data before reuse-mode validation
};

// One JSON document drives every subcommand; a fitted model file is the same
// schema with the parameter block replaced by the estimates.
struct RunConfig {
  MeshSpec mesh;
  ModelParams params;
  std::vector<std::string> covariates;  // observation-level covariate names
  GibbsConfig gibbs;
  McemConfig mcem;
  std::uint64_t seed = 0;
  ObsTransform transform = ObsTransform::none;
  std::string dataset;
  std::string trace;
  GridSpec grid;
  SimSpec sim;
  CrossvalSpec cv;
};

RunConfig load_config(const std::string& path);
void save_model(const std::string& path, const RunConfig& cfg);

void write_scores(const std::string& path, const Scores& scores);
void write_trace(const std::string& path, const FitResult& fit);

std::string transform_name(ObsTransform t);
ObsTransform transform_from_name(const std::string& name);

}  // namespace ngfield
