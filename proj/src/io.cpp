#include "ngfield/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include "json.hpp"
#include <set>
#include <sstream>

namespace ngfield {
namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return static_cast<int>(i);
  return -1;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MalformedCsv("cannot open csv file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw MalformedCsv(path + ": empty file");

  CsvTable t;
  {
    std::set<std::string> seen;
    for (const std::string& raw : split_fields(line)) {
      std::string name = trim(raw);
      if (name.empty()) throw MalformedCsv(path + ": empty column name in header");
      if (!seen.insert(name).second)
        throw MalformedCsv(path + ": duplicate column name '" + name + "'");
      t.columns.push_back(name);
    }
  }

  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> fields = split_fields(line);
    if (fields.size() != t.columns.size())
      throw MalformedCsv(path + " line " + std::to_string(lineno) + ": expected " +
                         std::to_string(t.columns.size()) + " fields, got " +
                         std::to_string(fields.size()));
    std::vector<double> row(fields.size());
    for (std::size_t i = 0; i < fields.size(); ++i) {
      std::string f = trim(fields[i]);
      if (f.empty()) {
        row[i] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      char* end = nullptr;
      const double v = std::strtod(f.c_str(), &end);
      if (end != f.c_str() + f.size())
        throw MalformedCsv(path + " line " + std::to_string(lineno) + ": invalid number '" + f +
                           "'");
      row[i] = v;
    }
    rows.push_back(std::move(row));
  }

  t.values.resize(static_cast<Eigen::Index>(rows.size()),
                  static_cast<Eigen::Index>(t.columns.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return t;
}

void write_csv(const std::string& path, const std::vector<std::string>& columns,
               const Eigen::MatrixXd& values) {
  if (values.size() > 0 && values.cols() != static_cast<Eigen::Index>(columns.size()))
    throw DimensionMismatch("csv values do not match column count");
  std::ofstream out(path);
  if (!out) throw Error("cannot write file: " + path);
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (i > 0) out << ',';
    out << columns[i];
  }
  out << '\n';
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      if (c > 0) out << ',';
      out << fmt17(values(r, c));
    }
    out << '\n';
  }
  if (!out) throw Error("write failed: " + path);
}

Dataset LoadedData::observed_data(const Eigen::MatrixXd& b_gamma,
                                  const Eigen::MatrixXd& b_mu) const {
  Dataset out;
  out.locations.reserve(observed.size());
  out.y.resize(static_cast<Eigen::Index>(observed.size()));
  out.b.resize(static_cast<Eigen::Index>(observed.size()), b.cols());
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const int r = observed[i];
    out.locations.push_back(locations[static_cast<std::size_t>(r)]);
    out.y[static_cast<Eigen::Index>(i)] = y[r];
    out.b.row(static_cast<Eigen::Index>(i)) = b.row(r);
  }
  out.b_gamma = b_gamma;
  out.b_mu = b_mu;
  return out;
}

LoadedData load_dataset(const std::string& path, const std::vector<std::string>& covariates) {
  for (const std::string& c : covariates)
    if (c == "x" || c == "y" || c == "obs")
      throw ConfigError("covariate name '" + c + "' collides with a reserved column");

  CsvTable t = read_csv(path);
  const int cx = t.column("x");
  if (cx < 0) throw MissingColumn(path + ": required column 'x' is missing");
  const int cy = t.column("y");
  const int cobs = t.column("obs");
  std::vector<int> ccov;
  for (const std::string& c : covariates) {
    const int idx = t.column(c);
    if (idx < 0) throw MissingColumn(path + ": covariate column '" + c + "' is missing");
    ccov.push_back(idx);
  }

  LoadedData out;
  out.dimension = cy >= 0 ? 2 : 1;
  out.has_obs_column = cobs >= 0;
  const Eigen::Index n = t.values.rows();
  out.locations.resize(static_cast<std::size_t>(n));
  out.b.resize(n, 1 + static_cast<Eigen::Index>(ccov.size()));
  out.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = t.values(i, cx);
    const double yy = cy >= 0 ? t.values(i, cy) : 0.0;
    if (std::isnan(x) || (cy >= 0 && std::isnan(yy)))
      throw MalformedCsv(path + " data row " + std::to_string(i + 1) + ": missing coordinate");
    out.locations[static_cast<std::size_t>(i)] = {x, yy};
    out.b(i, 0) = 1.0;
    for (std::size_t j = 0; j < ccov.size(); ++j) {
      const double v = t.values(i, ccov[j]);
      if (std::isnan(v))
        throw MalformedCsv(path + " data row " + std::to_string(i + 1) +
                           ": missing covariate value in '" + covariates[j] + "'");
      out.b(i, 1 + static_cast<Eigen::Index>(j)) = v;
    }
    out.y[i] = cobs >= 0 ? t.values(i, cobs) : std::numeric_limits<double>::quiet_NaN();
    if (!std::isnan(out.y[i])) out.observed.push_back(static_cast<int>(i));
  }
  return out;
}

Mesh make_mesh(const MeshSpec& spec) {
  if (!spec.file.empty()) return read_mesh(spec.file);
  if (spec.dimension == 1) {
    if (!(spec.edge > 0) || !(spec.x1 > spec.x0))
      throw InvalidGeometry("1d mesh requires x1 > x0 and a positive edge length");
    const int cells = std::max(1, static_cast<int>(std::ceil((spec.x1 - spec.x0) / spec.edge - 1e-9)));
    return build_mesh_1d(spec.x0, spec.x1, cells + 1);
  }
  if (spec.dimension == 2) {
    return build_mesh_2d(Rect{spec.x0, spec.y0, spec.x1, spec.y1}, spec.edge,
                         spec.extension_width, spec.extension_edge);
  }
  throw ConfigError("mesh dimension must be 1 or 2");
}

namespace {

const json& jobj(const json& j, const char* key, const json& def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_object()) throw ConfigError(std::string("config key '") + key + "' must be an object");
  return v;
}

double jnum(const json& j, const std::string& ctx, const char* key, double def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number()) throw ConfigError("config key '" + ctx + key + "' must be a number");
  return v.get<double>();
}

int jint(const json& j, const std::string& ctx, const char* key, int def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_integer())
    throw ConfigError("config key '" + ctx + key + "' must be an integer");
  return v.get<int>();
}

bool jbool(const json& j, const std::string& ctx, const char* key, bool def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_boolean()) throw ConfigError("config key '" + ctx + key + "' must be a boolean");
  return v.get<bool>();
}

std::string jstr(const json& j, const std::string& ctx, const char* key, const std::string& def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_string()) throw ConfigError("config key '" + ctx + key + "' must be a string");
  return v.get<std::string>();
}

Eigen::VectorXd jvec(const json& j, const std::string& ctx, const char* key,
                     const Eigen::VectorXd& def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_array())
    throw ConfigError("config key '" + ctx + key + "' must be an array of numbers");
  Eigen::VectorXd out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number())
      throw ConfigError("config key '" + ctx + key + "' must be an array of numbers");
    out[static_cast<Eigen::Index>(i)] = v[i].get<double>();
  }
  return out;
}

std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

std::string transform_name(ObsTransform t) {
  return t == ObsTransform::sqrt_back ? "sqrt" : "none";
}

ObsTransform transform_from_name(const std::string& name) {
  if (name == "none") return ObsTransform::none;
  if (name == "sqrt") return ObsTransform::sqrt_back;
  throw ConfigError("unknown transform '" + name + "' (expected 'none' or 'sqrt')");
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": top level must be an object");
  if (!j.contains("family")) throw ConfigError(path + ": required key 'family' is missing");
  if (!j.contains("seed")) throw ConfigError(path + ": required key 'seed' is missing");
  if (!j.contains("mesh")) throw ConfigError(path + ": required key 'mesh' is missing");

  RunConfig rc;
  rc.params.noise.family = family_from_name(jstr(j, "", "family", ""));
  {
    const json& s = j.at("seed");
    if (!s.is_number_integer() && !s.is_number_unsigned())
      throw ConfigError("config key 'seed' must be an integer");
    if (s.is_number_integer() && s.get<long long>() < 0)
      throw ConfigError("config key 'seed' must be non-negative");
    rc.seed = s.get<std::uint64_t>();
  }

  static const json empty_obj = json::object();
  const json& jm = jobj(j, "mesh", empty_obj);
  rc.mesh.dimension = jint(jm, "mesh.", "dimension", 2);
  rc.mesh.x0 = jnum(jm, "mesh.", "x0", 0.0);
  rc.mesh.y0 = jnum(jm, "mesh.", "y0", 0.0);
  rc.mesh.x1 = jnum(jm, "mesh.", "x1", 1.0);
  rc.mesh.y1 = jnum(jm, "mesh.", "y1", 1.0);
  rc.mesh.edge = jnum(jm, "mesh.", "edge", 0.1);
  rc.mesh.extension_width = jnum(jm, "mesh.", "extension_width", 0.0);
  rc.mesh.extension_edge = jnum(jm, "mesh.", "extension_edge", 0.0);
  rc.mesh.file = jstr(jm, "mesh.", "file", "");

  if (j.contains("covariates")) {
    const json& cov = j.at("covariates");
    if (!cov.is_array()) throw ConfigError("config key 'covariates' must be an array of strings");
    for (const json& c : cov) {
      if (!c.is_string())
        throw ConfigError("config key 'covariates' must be an array of strings");
      rc.covariates.push_back(c.get<std::string>());
    }
  }

  const bool gaussian = rc.params.noise.family == NoiseFamily::gaussian;
  const json& jp = jobj(j, "params", empty_obj);
  rc.params.alpha = jint(jp, "params.", "alpha", 2);
  rc.params.kappa = jnum(jp, "params.", "kappa", 1.0);
  rc.params.sigma_eps = jnum(jp, "params.", "sigma_eps", 0.1);
  const Eigen::Index n_beta = 1 + static_cast<Eigen::Index>(rc.covariates.size());
  rc.params.beta = jvec(jp, "params.", "beta", Eigen::VectorXd::Zero(n_beta));
  if (rc.params.beta.size() != n_beta)
    throw ConfigError("config key 'params.beta' must have one entry per covariate plus intercept");
  rc.params.noise.phi = jnum(jp, "params.", "phi", 1.0);
  rc.params.noise.sigma = jnum(jp, "params.", "sigma", 1.0);
  rc.params.noise.tau = jnum(jp, "params.", "tau", 1.0);
  rc.params.noise.nu = jnum(jp, "params.", "nu", 1.0);
  const Eigen::VectorXd zero1 = Eigen::VectorXd::Zero(gaussian ? 0 : 1);
  rc.params.noise.drift = jvec(jp, "params.", "drift", zero1);
  rc.params.noise.mu = jvec(jp, "params.", "mu", zero1);
  if (rc.params.noise.drift.size() != zero1.size() || rc.params.noise.mu.size() != zero1.size())
    throw ConfigError(gaussian ? "config keys 'params.drift'/'params.mu' must be empty for the "
                                 "gaussian family"
                               : "config keys 'params.drift'/'params.mu' must have exactly one "
                                 "entry (constant node covariate)");

  const json& jg = jobj(j, "gibbs", empty_obj);
  rc.gibbs.samples = jint(jg, "gibbs.", "samples", 100);
  rc.gibbs.burn_in = jint(jg, "gibbs.", "burn_in", 100);
  rc.gibbs.thinning = jint(jg, "gibbs.", "thinning", 1);
  rc.gibbs.seed = rc.seed;

  const json& jc = jobj(j, "mcem", empty_obj);
  rc.mcem.max_iter = jint(jc, "mcem.", "max_iter", 200);
  rc.mcem.k0 = jint(jc, "mcem.", "k0", 50);
  rc.mcem.k_max = jint(jc, "mcem.", "k_max", 2000);
  rc.mcem.growth = jnum(jc, "mcem.", "growth", 1.2);
  rc.mcem.warm_burn_in = jint(jc, "mcem.", "warm_burn_in", 10);
  rc.mcem.stop_tol = jnum(jc, "mcem.", "stop_tol", 1e-3);
  rc.mcem.stop_window = jint(jc, "mcem.", "stop_window", 5);
  rc.mcem.kappa_lo = jnum(jc, "mcem.", "kappa_lo", 0.02);
  rc.mcem.kappa_hi = jnum(jc, "mcem.", "kappa_hi", 50.0);
  rc.mcem.gibbs = rc.gibbs;

  rc.transform = transform_from_name(jstr(j, "", "transform", "none"));
  rc.dataset = jstr(j, "", "dataset", "");
  rc.trace = jstr(j, "", "trace", "");

  const json& jgr = jobj(j, "grid", empty_obj);
  rc.grid.nx = jint(jgr, "grid.", "nx", 50);
  rc.grid.ny = jint(jgr, "grid.", "ny", 50);

  const json& js = jobj(j, "simulate", empty_obj);
  rc.sim.n_obs = jint(js, "simulate.", "n_obs", 0);
  rc.sim.replicates = jint(js, "simulate.", "replicates", 1);

  const json& jv = jobj(j, "crossval", empty_obj);
  rc.cv.folds = jint(jv, "crossval.", "folds", 10);
  rc.cv.refit = jbool(jv, "crossval.", "refit", false);
  rc.cv.fit_full = jbool(jv, "crossval.", "fit_full", true);

  return rc;
}

void save_model(const std::string& path, const RunConfig& cfg) {
  json j;
  j["family"] = family_name(cfg.params.noise.family);
  j["seed"] = cfg.seed;
  j["covariates"] = cfg.covariates;
  j["dataset"] = cfg.dataset;
  j["trace"] = cfg.trace;
  j["transform"] = transform_name(cfg.transform);
  j["mesh"] = {{"dimension", cfg.mesh.dimension}, {"x0", cfg.mesh.x0},
               {"y0", cfg.mesh.y0},               {"x1", cfg.mesh.x1},
               {"y1", cfg.mesh.y1},               {"edge", cfg.mesh.edge},
               {"extension_width", cfg.mesh.extension_width},
               {"extension_edge", cfg.mesh.extension_edge},
               {"file", cfg.mesh.file}};
  j["params"] = {{"alpha", cfg.params.alpha},
                 {"kappa", cfg.params.kappa},
                 {"sigma_eps", cfg.params.sigma_eps},
                 {"beta", to_std(cfg.params.beta)},
                 {"phi", cfg.params.noise.phi},
                 {"sigma", cfg.params.noise.sigma},
                 {"tau", cfg.params.noise.tau},
                 {"nu", cfg.params.noise.nu},
                 {"drift", to_std(cfg.params.noise.drift)},
                 {"mu", to_std(cfg.params.noise.mu)}};
  j["gibbs"] = {{"samples", cfg.gibbs.samples},
                {"burn_in", cfg.gibbs.burn_in},
                {"thinning", cfg.gibbs.thinning}};
  j["mcem"] = {{"max_iter", cfg.mcem.max_iter},     {"k0", cfg.mcem.k0},
               {"k_max", cfg.mcem.k_max},           {"growth", cfg.mcem.growth},
               {"warm_burn_in", cfg.mcem.warm_burn_in},
               {"stop_tol", cfg.mcem.stop_tol},     {"stop_window", cfg.mcem.stop_window},
               {"kappa_lo", cfg.mcem.kappa_lo},     {"kappa_hi", cfg.mcem.kappa_hi}};
  j["grid"] = {{"nx", cfg.grid.nx}, {"ny", cfg.grid.ny}};
  j["simulate"] = {{"n_obs", cfg.sim.n_obs}, {"replicates", cfg.sim.replicates}};
  j["crossval"] = {{"folds", cfg.cv.folds}, {"refit", cfg.cv.refit},
                   {"fit_full", cfg.cv.fit_full}};

  std::ofstream out(path);
  if (!out) throw Error("cannot write file: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw Error("write failed: " + path);
}

void write_scores(const std::string& path, const Scores& scores) {
  json j;
  j["var_rs"] = scores.var_rs;
  j["mean_r"] = scores.mean_r;
  j["var_r"] = scores.var_r;
  j["mean_abs_r"] = scores.mean_abs_r;
  j["crps"] = scores.crps;
  j["energy"] = scores.energy;
  std::ofstream out(path);
  if (!out) throw Error("cannot write file: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw Error("write failed: " + path);
}

void write_trace(const std::string& path, const FitResult& fit) {
  const NoiseFamily family = fit.params.noise.family;
  std::vector<std::string> cols{"iter", "k", "q_rb", "kappa", "sigma_eps"};
  switch (family) {
    case NoiseFamily::gaussian:
      cols.push_back("phi");
      break;
    case NoiseFamily::gal:
      cols.push_back("sigma");
      cols.push_back("tau");
      break;
    case NoiseFamily::nig:
      cols.push_back("sigma");
      cols.push_back("nu");
      break;
  }
  for (Eigen::Index i = 0; i < fit.params.beta.size(); ++i)
    cols.push_back("beta_" + std::to_string(i));
  for (Eigen::Index i = 0; i < fit.params.noise.drift.size(); ++i)
    cols.push_back("drift_" + std::to_string(i));
  for (Eigen::Index i = 0; i < fit.params.noise.mu.size(); ++i)
    cols.push_back("mu_" + std::to_string(i));

  Eigen::MatrixXd rows(static_cast<Eigen::Index>(fit.trace.size()),
                       static_cast<Eigen::Index>(cols.size()));
  for (std::size_t r = 0; r < fit.trace.size(); ++r) {
    const ModelParams& p = fit.trace[r];
    Eigen::Index c = 0;
    const Eigen::Index ri = static_cast<Eigen::Index>(r);
    rows(ri, c++) = static_cast<double>(r + 1);
    rows(ri, c++) = static_cast<double>(fit.k_schedule[r]);
    rows(ri, c++) = fit.q_rb[r];
    rows(ri, c++) = p.kappa;
    rows(ri, c++) = p.sigma_eps;
    switch (family) {
      case NoiseFamily::gaussian:
        rows(ri, c++) = p.noise.phi;
        break;
      case NoiseFamily::gal:
        rows(ri, c++) = p.noise.sigma;
        rows(ri, c++) = p.noise.tau;
        break;
      case NoiseFamily::nig:
        rows(ri, c++) = p.noise.sigma;
        rows(ri, c++) = p.noise.nu;
        break;
    }
    for (Eigen::Index i = 0; i < p.beta.size(); ++i) rows(ri, c++) = p.beta[i];
    for (Eigen::Index i = 0; i < p.noise.drift.size(); ++i) rows(ri, c++) = p.noise.drift[i];
    for (Eigen::Index i = 0; i < p.noise.mu.size(); ++i) rows(ri, c++) = p.noise.mu[i];
  }
  write_csv(path, cols, rows);
}

}  // namespace ngfield
