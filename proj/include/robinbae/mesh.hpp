#pragma once

// Structured simplicial meshes of the slab [0,L]^(d-1) x [0,H] with tagged
// boundary facets and the bottom-surface trace map.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace robinbae {

enum class FacetTag : std::uint8_t { Top, Bottom, Side };

inline const char* to_string(FacetTag tag)
{
  switch (tag) {
    case FacetTag::Top: return "TOP";
    case FacetTag::Bottom: return "BOTTOM";
    case FacetTag::Side: return "SIDE";
  }
  return "?";
}

/// A conforming simplicial mesh. Used both for the volume slab and for the
/// (d-1)-dimensional bottom surface extracted from it.
///
/// Storage is flat: `dim` doubles per node, `dim + 1` indices per cell and
/// `dim` indices per boundary facet. For a volume mesh `bottom_trace[j]` is the
/// volume index of bottom-surface node j. For an extracted surface mesh it maps
/// the surface node j back to its parent volume node.
struct SlabMesh {
  int dim = 0;
  std::vector<double> coords;
  std::vector<int> cells;
  std::vector<int> facets;
  std::vector<FacetTag> facet_tags;
  std::vector<int> bottom_trace;
  std::array<int, 3> resolution{0, 0, 0};  // (nx, ny, nz); ny = 0 when dim == 2
  double length = 0.0;
  double height = 0.0;

  int num_nodes() const { return static_cast<int>(coords.size()) / dim; }
  int num_cells() const { return static_cast<int>(cells.size()) / (dim + 1); }
  int num_facets() const { return static_cast<int>(facet_tags.size()); }
  int nodes_per_cell() const { return dim + 1; }

  std::span<const double> point(int i) const
  {
    return {coords.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const int> cell(int c) const
  {
    return {cells.data() + static_cast<std::size_t>(c) * (dim + 1), static_cast<std::size_t>(dim + 1)};
  }
  std::span<const int> facet(int f) const
  {
    return {facets.data() + static_cast<std::size_t>(f) * dim, static_cast<std::size_t>(dim)};
  }

  /// 64-bit FNV-1a hash of the node and cell arrays.
  std::uint64_t fingerprint() const;
};

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 1469598103934665603ULL)
{
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

// Signed measure (times k!) of a k-simplex in R^k given k+1 vertices.
inline double signed_det(const SlabMesh& m, std::span<const int> v)
{
  const int d = m.dim;
  double a[3][3] = {};
  auto p0 = m.point(v[0]);
  for (int r = 1; r <= d; ++r) {
    auto pr = m.point(v[r]);
    for (int c = 0; c < d; ++c) a[r - 1][c] = pr[c] - p0[c];
  }
  if (d == 1) return a[0][0];
  if (d == 2) return a[0][0] * a[1][1] - a[0][1] * a[1][0];
  return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
         a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
}

inline void orient_cells(SlabMesh& m)
{
  const int nv = m.dim + 1;
  for (int c = 0; c < m.num_cells(); ++c) {
    if (signed_det(m, m.cell(c)) < 0.0) {
      int* v = m.cells.data() + static_cast<std::size_t>(c) * nv;
      std::swap(v[nv - 2], v[nv - 1]);
    }
  }
}

// Faces of the cells that belong to exactly one cell, sorted lexicographically.
inline std::vector<std::vector<int>> boundary_faces(const SlabMesh& m)
{
  const int nv = m.dim + 1;
  std::vector<std::array<int, 3>> faces;
  faces.reserve(static_cast<std::size_t>(m.num_cells()) * nv);
  for (int c = 0; c < m.num_cells(); ++c) {
    auto cell = m.cell(c);
    for (int skip = 0; skip < nv; ++skip) {
      std::array<int, 3> face{-1, -1, -1};
      int n = 0;
      for (int k = 0; k < nv; ++k)
        if (k != skip) face[n++] = cell[k];
      std::sort(face.begin(), face.begin() + n);
      faces.push_back(face);
    }
  }
  std::sort(faces.begin(), faces.end());
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < faces.size();) {
    std::size_t j = i + 1;
    while (j < faces.size() && faces[j] == faces[i]) ++j;
    if (j - i == 1) out.emplace_back(faces[i].begin(), faces[i].begin() + (nv - 1));
    i = j;
  }
  return out;
}

}  // namespace detail

inline std::uint64_t SlabMesh::fingerprint() const
{
  std::uint64_t h = detail::fnv1a(&dim, sizeof(dim));
  h = detail::fnv1a(coords.data(), coords.size() * sizeof(double), h);
  h = detail::fnv1a(cells.data(), cells.size() * sizeof(int), h);
  return h;
}

/// Tensor grid of (nx [x ny] x nz) boxes, each split into Kuhn simplices
/// (6 tetrahedra in 3-D, 2 triangles in 2-D). Nodes are ordered
/// lexicographically with x fastest and the vertical index slowest, so the
/// bottom-surface nodes are the first (nx+1)(ny+1) volume nodes.
inline SlabMesh build_slab_mesh(int nx, int ny, int nz, double L, double H, int dim)
{
  if (dim != 2 && dim != 3) throw std::invalid_argument("build_slab_mesh: dim must be 2 or 3");
  if (nx < 1 || nz < 1 || (dim == 3 && ny < 1))
    throw std::invalid_argument("build_slab_mesh: cell counts must be >= 1");
  if (!(L > 0.0) || !(H > 0.0)) throw std::invalid_argument("build_slab_mesh: lengths must be positive");

  SlabMesh m;
  m.dim = dim;
  m.length = L;
  m.height = H;
  if (dim == 2) ny = 0;
  m.resolution = {nx, ny, nz};

  const int sx = nx + 1;
  const int sy = dim == 3 ? ny + 1 : 1;
  const int sz = nz + 1;
  auto coord = [](int i, int n, double len) { return i == n ? len : len * i / n; };

  // The vertical index of a node is what decides TOP/BOTTOM membership, so it is
  // kept alongside the coordinates while building.
  std::vector<int> layer;
  for (int k = 0; k < sz; ++k)
    for (int j = 0; j < sy; ++j)
      for (int i = 0; i < sx; ++i) {
        m.coords.push_back(coord(i, nx, L));
        if (dim == 3) m.coords.push_back(coord(j, ny, L));
        m.coords.push_back(coord(k, nz, H));
        layer.push_back(k);
      }

  auto node = [&](int i, int j, int k) { return i + sx * (j + sy * k); };

  if (dim == 2) {
    for (int k = 0; k < nz; ++k)
      for (int i = 0; i < nx; ++i) {
        const int v00 = node(i, 0, k), v10 = node(i + 1, 0, k);
        const int v01 = node(i, 0, k + 1), v11 = node(i + 1, 0, k + 1);
        m.cells.insert(m.cells.end(), {v00, v10, v11});
        m.cells.insert(m.cells.end(), {v00, v11, v01});
      }
  } else {
    static constexpr std::array<std::array<int, 3>, 6> perms{
        {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
    for (int k = 0; k < nz; ++k)
      for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i)
          for (const auto& p : perms) {
            std::array<int, 3> g{i, j, k};
            m.cells.push_back(node(g[0], g[1], g[2]));
            for (int axis : p) {
              ++g[axis];
              m.cells.push_back(node(g[0], g[1], g[2]));
            }
          }
  }
  detail::orient_cells(m);

  for (auto& face : detail::boundary_faces(m)) {
    bool all_bottom = true, all_top = true;
    for (int v : face) {
      all_bottom = all_bottom && layer[v] == 0;
      all_top = all_top && layer[v] == nz;
    }
    m.facets.insert(m.facets.end(), face.begin(), face.end());
    m.facet_tags.push_back(all_bottom ? FacetTag::Bottom : all_top ? FacetTag::Top : FacetTag::Side);
  }

  for (int v = 0; v < static_cast<int>(layer.size()); ++v)
    if (layer[v] == 0) m.bottom_trace.push_back(v);
  return m;
}

/// The (d-1)-dimensional mesh of BOTTOM facets, with coordinates projected by
/// dropping the vertical component. Surface node j corresponds to volume node
/// `mesh.bottom_trace[j]`; the surface's own boundary facets are tagged SIDE.
inline SlabMesh extract_bottom_mesh(const SlabMesh& mesh)
{
  if (mesh.dim < 2) throw std::invalid_argument("extract_bottom_mesh: need a volume mesh");
  SlabMesh s;
  s.dim = mesh.dim - 1;
  s.length = mesh.length;
  s.height = 0.0;
  s.resolution = {mesh.resolution[0], mesh.resolution[1], 0};
  s.bottom_trace = mesh.bottom_trace;

  std::vector<int> to_surface(mesh.num_nodes(), -1);
  for (int j = 0; j < static_cast<int>(mesh.bottom_trace.size()); ++j) to_surface[mesh.bottom_trace[j]] = j;

  for (int j : mesh.bottom_trace) {
    auto p = mesh.point(j);
    for (int c = 0; c < s.dim; ++c) s.coords.push_back(p[c]);
  }
  for (int f = 0; f < mesh.num_facets(); ++f) {
    if (mesh.facet_tags[f] != FacetTag::Bottom) continue;
    for (int v : mesh.facet(f)) {
      if (to_surface[v] < 0) throw std::logic_error("extract_bottom_mesh: bottom facet node missing from trace");
      s.cells.push_back(to_surface[v]);
    }
  }
  detail::orient_cells(s);
  for (auto& face : detail::boundary_faces(s)) {
    s.facets.insert(s.facets.end(), face.begin(), face.end());
    s.facet_tags.push_back(FacetTag::Side);
  }
  return s;
}

/// Sum of the cell measures.
inline double mesh_measure(const SlabMesh& m)
{
  const double fact = m.dim == 1 ? 1.0 : m.dim == 2 ? 2.0 : 6.0;
  double total = 0.0;
  for (int c = 0; c < m.num_cells(); ++c) total += detail::signed_det(m, m.cell(c)) / fact;
  return total;
}

inline double cell_measure(const SlabMesh& m, int c)
{
  const double fact = m.dim == 1 ? 1.0 : m.dim == 2 ? 2.0 : 6.0;
  return detail::signed_det(m, m.cell(c)) / fact;
}

/// Plain-text export: header `dim n_nodes n_cells`, node coordinates, cell
/// tuples, then one `facet_node_indices tag` record per boundary facet.
inline void write_mesh(std::ostream& os, const SlabMesh& m)
{
  char buf[64];
  os << m.dim << ' ' << m.num_nodes() << ' ' << m.num_cells() << '\n';
  for (int i = 0; i < m.num_nodes(); ++i) {
    auto p = m.point(i);
    for (int c = 0; c < m.dim; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", p[c]);
      os << (c ? " " : "") << buf;
    }
    os << '\n';
  }
  for (int c = 0; c < m.num_cells(); ++c) {
    auto cell = m.cell(c);
    for (std::size_t k = 0; k < cell.size(); ++k) os << (k ? " " : "") << cell[k];
    os << '\n';
  }
  for (int f = 0; f < m.num_facets(); ++f) {
    for (int v : m.facet(f)) os << v << ' ';
    os << to_string(m.facet_tags[f]) << '\n';
  }
}

}  // namespace robinbae
