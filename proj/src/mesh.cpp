#include "ngfield/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace ngfield {

namespace {

// Tensor-axis coordinates: `steps` core cells across [lo, hi] plus `bands`
// extension cells of size band_edge on each side.
std::vector<double> axis_coords(double lo, double hi, int steps, int bands, double band_edge) {
  std::vector<double> xs;
  xs.reserve(static_cast<std::size_t>(steps + 2 * bands + 1));
  for (int i = bands; i >= 1; --i) xs.push_back(lo - i * band_edge);
  const double d = (hi - lo) / steps;
  for (int i = 0; i <= steps; ++i) xs.push_back(lo + i * d);
  for (int i = 1; i <= bands; ++i) xs.push_back(hi + i * band_edge);
  return xs;
}

int cells_for(double span, double edge) {
  return std::max(1, static_cast<int>(std::ceil(span / edge - 1e-9)));
}

}  // namespace

void validate_mesh(const Mesh& mesh) {
  if (mesh.dimension != 1 && mesh.dimension != 2)
    throw InvalidGeometry("mesh dimension must be 1 or 2");
  const int n = mesh.n_nodes();
  if (n < 2) throw InvalidGeometry("mesh needs at least 2 nodes");
  if (mesh.n_elements() < 1) throw InvalidGeometry("mesh has no elements");
  if (static_cast<int>(mesh.interior.size()) != n)
    throw InvalidGeometry("interior flag count does not match node count");

  const int per = mesh.dimension + 1;
  std::vector<int> comp(n);
  for (int i = 0; i < n; ++i) comp[i] = i;
  // union-find for connectivity
  std::function<int(int)> find = [&](int i) {
    while (comp[i] != i) i = comp[i] = comp[comp[i]];
    return i;
  };

  for (const auto& e : mesh.elements) {
    for (int v = 0; v < per; ++v)
      if (e[v] < 0 || e[v] >= n) throw InvalidGeometry("element node index out of range");
    if (mesh.dimension == 1) {
      if (e[0] == e[1]) throw InvalidGeometry("degenerate segment: repeated node");
      if (e[2] != -1) throw InvalidGeometry("1D element must have exactly 2 nodes");
    } else {
      if (e[0] == e[1] || e[1] == e[2] || e[0] == e[2])
        throw InvalidGeometry("degenerate triangle: repeated node");
    }
    for (int v = 1; v < per; ++v) comp[find(e[v])] = find(e[0]);
  }
  const int root = find(0);
  for (int i = 0; i < n; ++i)
    if (find(i) != root) throw InvalidGeometry("mesh is not connected");
}

Mesh build_mesh_1d(double a, double b, int n_nodes) {
  if (!(a < b)) throw InvalidInterval("interval requires a < b");
  if (n_nodes < 2) throw InvalidInterval("1D mesh needs at least 2 nodes");
  Mesh mesh;
  mesh.dimension = 1;
  const double d = (b - a) / (n_nodes - 1);
  mesh.nodes.reserve(static_cast<std::size_t>(n_nodes));
  for (int i = 0; i < n_nodes; ++i) mesh.nodes.push_back({a + i * d, 0.0});
  mesh.nodes.back()[0] = b;  // exact endpoint
  for (int i = 0; i + 1 < n_nodes; ++i) mesh.elements.push_back({i, i + 1, -1});
  mesh.interior.assign(static_cast<std::size_t>(n_nodes), true);
  return mesh;
}

Mesh build_mesh_2d(const Rect& domain, double target_edge, double extension_width,
                   double extension_edge) {
  if (!(domain.x1 > domain.x0) || !(domain.y1 > domain.y0))
    throw InvalidGeometry("rectangle must have positive extent");
  if (!(target_edge > 0.0)) throw InvalidGeometry("target edge must be positive");
  if (extension_width < 0.0) throw InvalidGeometry("extension width must be non-negative");
  int bands = 0;
  if (extension_width > 0.0) {
    if (!(extension_edge > 0.0))
      throw InvalidGeometry("extension edge must be positive when a band is requested");
    bands = cells_for(extension_width, extension_edge);
  }

  const auto xs = axis_coords(domain.x0, domain.x1, cells_for(domain.x1 - domain.x0, target_edge),
                              bands, extension_edge);
  const auto ys = axis_coords(domain.y0, domain.y1, cells_for(domain.y1 - domain.y0, target_edge),
                              bands, extension_edge);
  const int nx = static_cast<int>(xs.size());
  const int ny = static_cast<int>(ys.size());

  Mesh mesh;
  mesh.dimension = 2;
  mesh.nodes.reserve(static_cast<std::size_t>(nx) * ny);
  mesh.interior.reserve(static_cast<std::size_t>(nx) * ny);
  const double tol =
      1e-12 * std::max({std::fabs(domain.x0), std::fabs(domain.x1), std::fabs(domain.y0),
                        std::fabs(domain.y1), 1.0});
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      mesh.nodes.push_back({xs[i], ys[j]});
      mesh.interior.push_back(xs[i] >= domain.x0 - tol && xs[i] <= domain.x1 + tol &&
                              ys[j] >= domain.y0 - tol && ys[j] <= domain.y1 + tol);
    }
  }
  mesh.elements.reserve(2 * static_cast<std::size_t>(nx - 1) * (ny - 1));
  for (int j = 0; j + 1 < ny; ++j) {
    for (int i = 0; i + 1 < nx; ++i) {
      const int sw = j * nx + i;
      const int se = sw + 1;
      const int nw = sw + nx;
      const int ne = nw + 1;
      mesh.elements.push_back({sw, se, ne});  // counter-clockwise
      mesh.elements.push_back({sw, ne, nw});
    }
  }
  return mesh;
}

FemOperators assemble_operators(const Mesh& mesh) {
  validate_mesh(mesh);
  const int n = mesh.n_nodes();
  Eigen::VectorXd h = Eigen::VectorXd::Zero(n);
  std::vector<Triplet> g_upper;
  g_upper.reserve(mesh.elements.size() * 6);

  auto add_g = [&](int i, int j, double v) {
    if (i <= j)
      g_upper.emplace_back(i, j, v);
    else
      g_upper.emplace_back(j, i, v);
  };

  for (const auto& e : mesh.elements) {
    if (mesh.dimension == 1) {
      const double len = std::fabs(mesh.nodes[e[1]][0] - mesh.nodes[e[0]][0]);
      if (!(len > 0.0)) throw DegenerateElement("zero-length segment");
      h[e[0]] += len / 2.0;
      h[e[1]] += len / 2.0;
      add_g(e[0], e[0], 1.0 / len);
      add_g(e[1], e[1], 1.0 / len);
      add_g(e[0], e[1], -1.0 / len);
    } else {
      const auto& p0 = mesh.nodes[e[0]];
      const auto& p1 = mesh.nodes[e[1]];
      const auto& p2 = mesh.nodes[e[2]];
      const double two_a =
          (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
      const double area = std::fabs(two_a) / 2.0;
      const double scale = std::max({p0[0] * p0[0] + p0[1] * p0[1],
                                     p1[0] * p1[0] + p1[1] * p1[1],
                                     p2[0] * p2[0] + p2[1] * p2[1], 1.0});
      if (!(area > 1e-14 * scale)) throw DegenerateElement("zero-area triangle");
      // gradient coefficients of the linear basis on this triangle
      double bb[3], cc[3];
      for (int v = 0; v < 3; ++v) {
        const auto& pj = mesh.nodes[e[(v + 1) % 3]];
        const auto& pk = mesh.nodes[e[(v + 2) % 3]];
        bb[v] = pj[1] - pk[1];
        cc[v] = pk[0] - pj[0];
      }
      for (int v = 0; v < 3; ++v) {
        h[e[v]] += area / 3.0;
        for (int u = v; u < 3; ++u)
          add_g(e[v], e[u], (bb[v] * bb[u] + cc[v] * cc[u]) / (4.0 * area));
      }
    }
  }

  FemOperators ops;
  ops.h = std::move(h);
  ops.c_lumped = SparseSym::diagonal(ops.h);
  ops.g = SparseSym::from_triplets(n, g_upper);
  ops.n = n;
  return ops;
}

SparseSym build_k(const FemOperators& ops, double kappa) {
  if (!(kappa > 0.0)) throw NonPositiveKappa("kappa must be positive");
  SpMat sum = kappa * kappa * ops.c_lumped.full() + ops.g.full();
  return SparseSym::from_symmetric(sum);
}

SparseSym build_k_alpha(const FemOperators& ops, double kappa, int alpha) {
  if (alpha != 2 && alpha != 4) throw UnsupportedAlpha("alpha must be 2 or 4");
  SparseSym k = build_k(ops, kappa);
  if (alpha == 2) return k;
  const Eigen::VectorXd hinv = ops.h.cwiseInverse();
  SpMat prod = k.full() * hinv.asDiagonal() * k.full();
  return SparseSym::from_symmetric(prod);
}

namespace {

// Uniform background grid over element bounding boxes for O(1) point location.
struct Locator {
  double x0, y0, dx, dy;
  int cx, cy;
  std::vector<std::vector<int>> cells;

  explicit Locator(const Mesh& mesh) {
    double x1 = -1e300, y1 = -1e300;
    x0 = 1e300;
    y0 = 1e300;
    for (const auto& p : mesh.nodes) {
      x0 = std::min(x0, p[0]);
      x1 = std::max(x1, p[0]);
      y0 = std::min(y0, p[1]);
      y1 = std::max(y1, p[1]);
    }
    const int target = std::max(1, static_cast<int>(std::sqrt(double(mesh.n_elements()))));
    cx = target;
    cy = mesh.dimension == 2 ? target : 1;
    dx = std::max((x1 - x0) / cx, 1e-300);
    dy = mesh.dimension == 2 ? std::max((y1 - y0) / cy, 1e-300) : 1.0;
    cells.resize(static_cast<std::size_t>(cx) * cy);
    for (int t = 0; t < mesh.n_elements(); ++t) {
      const auto& e = mesh.elements[t];
      const int per = mesh.dimension + 1;
      double ex0 = 1e300, ex1 = -1e300, ey0 = 1e300, ey1 = -1e300;
      for (int v = 0; v < per; ++v) {
        ex0 = std::min(ex0, mesh.nodes[e[v]][0]);
        ex1 = std::max(ex1, mesh.nodes[e[v]][0]);
        ey0 = std::min(ey0, mesh.nodes[e[v]][1]);
        ey1 = std::max(ey1, mesh.nodes[e[v]][1]);
      }
      for (int j = cell_y(ey0); j <= cell_y(ey1); ++j)
        for (int i = cell_x(ex0); i <= cell_x(ex1); ++i)
          cells[static_cast<std::size_t>(j) * cx + i].push_back(t);
    }
  }

  int cell_x(double x) const {
    return std::clamp(static_cast<int>((x - x0) / dx), 0, cx - 1);
  }
  int cell_y(double y) const {
    return std::clamp(static_cast<int>((y - y0) / dy), 0, cy - 1);
  }
  const std::vector<int>& candidates(double x, double y) const {
    return cells[static_cast<std::size_t>(cell_y(y)) * cx + cell_x(x)];
  }
};

constexpr double kBaryTol = 1e-12;

// Barycentric weights of point p in element t; false if outside.
bool bary_weights(const Mesh& mesh, int t, const std::array<double, 2>& p, double* lam) {
  const auto& e = mesh.elements[t];
  if (mesh.dimension == 1) {
    const double xa = mesh.nodes[e[0]][0];
    const double xb = mesh.nodes[e[1]][0];
    const double len = xb - xa;
    const double u = (p[0] - xa) / len;
    if (u < -kBaryTol || u > 1.0 + kBaryTol) return false;
    lam[0] = 1.0 - u;
    lam[1] = u;
    lam[2] = 0.0;
    return true;
  }
  const auto& p0 = mesh.nodes[e[0]];
  const auto& p1 = mesh.nodes[e[1]];
  const auto& p2 = mesh.nodes[e[2]];
  const double det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
  const double l1 = ((p[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p[1] - p0[1])) / det;
  const double l2 = ((p1[0] - p0[0]) * (p[1] - p0[1]) - (p[0] - p0[0]) * (p1[1] - p0[1])) / det;
  const double l0 = 1.0 - l1 - l2;
  if (l0 < -kBaryTol || l1 < -kBaryTol || l2 < -kBaryTol) return false;
  lam[0] = l0;
  lam[1] = l1;
  lam[2] = l2;
  return true;
}

}  // namespace

void ObservationMatrix::require_all_inside() const {
  if (outside.empty()) return;
  std::ostringstream msg;
  msg << "locations outside mesh at row";
  msg << (outside.size() > 1 ? "s" : "");
  for (std::size_t i = 0; i < outside.size() && i < 20; ++i) msg << ' ' << outside[i];
  if (outside.size() > 20) msg << " ... (" << outside.size() << " total)";
  throw LocationOutsideMesh(msg.str());
}

ObservationMatrix build_observation_matrix(const Mesh& mesh,
                                           const std::vector<std::array<double, 2>>& locations) {
  validate_mesh(mesh);
  const Locator loc(mesh);
  const int per = mesh.dimension + 1;
  ObservationMatrix obs;
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(locations.size() * static_cast<std::size_t>(per));

  for (int r = 0; r < static_cast<int>(locations.size()); ++r) {
    const auto& p = locations[static_cast<std::size_t>(r)];
    double lam[3];
    bool found = false;
    for (int t : loc.candidates(p[0], mesh.dimension == 2 ? p[1] : 0.0)) {
      if (!bary_weights(mesh, t, p, lam)) continue;
      // snap near-0/1 weights so rows stay maximally sparse, then renormalize
      double sum = 0.0;
      for (int v = 0; v < per; ++v) {
        if (lam[v] < kBaryTol) lam[v] = 0.0;
        if (lam[v] > 1.0 - kBaryTol) lam[v] = 1.0;
        sum += lam[v];
      }
      const auto& e = mesh.elements[t];
      for (int v = 0; v < per; ++v)
        if (lam[v] > 0.0) trip.emplace_back(r, e[v], lam[v] / sum);
      found = true;
      break;
    }
    if (!found) obs.outside.push_back(r);
  }

  obs.a = SpMatRow(static_cast<int>(locations.size()), mesh.n_nodes());
  obs.a.setFromTriplets(trip.begin(), trip.end());
  obs.a.makeCompressed();
  return obs;
}

void write_mesh(const std::string& path, const Mesh& mesh) {
  std::ofstream out(path);
  if (!out) throw InvalidGeometry("cannot open " + path + " for writing");
  out << mesh.dimension << ' ' << mesh.n_nodes() << ' ' << mesh.n_elements() << '\n';
  char buf[128];
  for (const auto& p : mesh.nodes) {
    if (mesh.dimension == 1) {
      std::snprintf(buf, sizeof buf, "%.17g", p[0]);
    } else {
      std::snprintf(buf, sizeof buf, "%.17g %.17g", p[0], p[1]);
    }
    out << buf << '\n';
  }
  for (const auto& e : mesh.elements) {
    out << e[0] << ' ' << e[1];
    if (mesh.dimension == 2) out << ' ' << e[2];
    out << '\n';
  }
  if (!out) throw InvalidGeometry("write failed for " + path);
}

Mesh read_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidGeometry("cannot open mesh file " + path);
  Mesh mesh;
  int n_nodes = 0, n_elements = 0;
  if (!(in >> mesh.dimension >> n_nodes >> n_elements))
    throw InvalidGeometry(path + ": bad mesh header");
  if (mesh.dimension != 1 && mesh.dimension != 2)
    throw InvalidGeometry(path + ": mesh dimension must be 1 or 2");
  if (n_nodes < 2 || n_elements < 1) throw InvalidGeometry(path + ": empty mesh");
  mesh.nodes.resize(static_cast<std::size_t>(n_nodes));
  for (auto& p : mesh.nodes) {
    p[1] = 0.0;
    if (mesh.dimension == 1 ? !(in >> p[0]) : !(in >> p[0] >> p[1]))
      throw InvalidGeometry(path + ": bad node line");
  }
  mesh.elements.resize(static_cast<std::size_t>(n_elements));
  for (auto& e : mesh.elements) {
    e[2] = -1;
    if (mesh.dimension == 1 ? !(in >> e[0] >> e[1]) : !(in >> e[0] >> e[1] >> e[2]))
      throw InvalidGeometry(path + ": bad element line");
  }
  mesh.interior.assign(static_cast<std::size_t>(n_nodes), true);
  validate_mesh(mesh);
  return mesh;
}

}  // namespace ngfield
