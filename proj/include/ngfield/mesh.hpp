#pragma once

#include <array>
#include <string>
#include <vector>

#include "ngfield/sparse.hpp"

namespace ngfield {

// Piecewise-linear FEM mesh: segments in 1D, triangles in 2D. For 1D meshes
// the third element index is -1 and the second coordinate is 0.
struct Mesh {
  int dimension = 0;
  std::vector<std::array<double, 2>> nodes;
  std::vector<std::array<int, 3>> elements;
  std::vector<bool> interior;  // false inside the boundary-extension band

  int n_nodes() const { return static_cast<int>(nodes.size()); }
  int n_elements() const { return static_cast<int>(elements.size()); }
};

// Structural validation: index ranges, distinct element nodes, connectivity.
void validate_mesh(const Mesh& mesh);

Mesh build_mesh_1d(double a, double b, int n_nodes);

struct Rect {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;
};

// Structured triangulation of `domain` at resolution `target_edge`,
// surrounded by a coarser band of width `extension_width` at resolution
// `extension_edge`. Band nodes carry interior = false.
Mesh build_mesh_2d(const Rect& domain, double target_edge, double extension_width,
                   double extension_edge);

// Lumped mass vector h (h_i = integral of basis i), its diagonal matrix, and
// the stiffness matrix G assembled with exact linear-element formulas.
struct FemOperators {
  Eigen::VectorXd h;
  SparseSym c_lumped;
  SparseSym g;
  int n = 0;
};

FemOperators assemble_operators(const Mesh& mesh);

// K = kappa^2 * C_lumped + G.
SparseSym build_k(const FemOperators& ops, double kappa);

// K_alpha: alpha=2 gives K itself, alpha=4 gives K * C_lumped^{-1} * K.
SparseSym build_k_alpha(const FemOperators& ops, double kappa, int alpha);

// Rows of piecewise-linear basis weights, one per query location. Locations
// not covered by any element get an empty row and are listed in `outside`.
struct ObservationMatrix {
  SpMatRow a;
  std::vector<int> outside;

  int n_rows() const { return static_cast<int>(a.rows()); }
  // Throws LocationOutsideMesh naming the offending row indices.
  void require_all_inside() const;
};

ObservationMatrix build_observation_matrix(const Mesh& mesh,
                                           const std::vector<std::array<double, 2>>& locations);

// Plain-text exchange format: "dim n_nodes n_elements" header, node
// coordinate lines, then 0-based element index lines.
void write_mesh(const std::string& path, const Mesh& mesh);
Mesh read_mesh(const std::string& path);  // imported nodes are all flagged interior

}  // namespace ngfield
