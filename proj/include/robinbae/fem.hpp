#pragma once

// P1 Lagrange assembly on SlabMesh, symmetric Dirichlet elimination and SPD
// solves. Coefficients such as exp(a) are evaluated once per simplex at the
// centroid of the P1 interpolant.

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "robinbae/mesh.hpp"

namespace robinbae {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplets = std::vector<Eigen::Triplet<double>>;

/// Raised when a factorization or solve breaks down.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a point cannot be located in a mesh.
class OutOfDomain : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_size(const Vector& v, Eigen::Index n, const char* what)
{
  if (v.size() != n)
    throw std::invalid_argument(std::string(what) + ": expected length " + std::to_string(n) + ", got " +
                                std::to_string(v.size()));
}

// ---------------------------------------------------------------------------
// Element kernels
// ---------------------------------------------------------------------------

/// Geometry of one full-dimensional simplex: measure and the (constant)
/// gradients of its barycentric coordinates, one row per vertex.
struct SimplexGeometry {
  double measure = 0.0;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 4, 3> grads;
};

inline SimplexGeometry simplex_geometry(const SlabMesh& m, int c)
{
  const int d = m.dim;
  auto v = m.cell(c);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 3, 3> J(d, d);
  auto p0 = m.point(v[0]);
  for (int r = 1; r <= d; ++r) {
    auto pr = m.point(v[r]);
    for (int k = 0; k < d; ++k) J(k, r - 1) = pr[k] - p0[k];
  }
  SimplexGeometry g;
  const double det = J.determinant();
  const double fact = d == 1 ? 1.0 : d == 2 ? 2.0 : 6.0;
  g.measure = std::abs(det) / fact;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 3, 3> Jinv = J.inverse();
  g.grads.resize(d + 1, d);
  g.grads.bottomRows(d) = Jinv;
  g.grads.row(0) = -Jinv.colwise().sum();
  return g;
}

/// Measure of a boundary facet ((d-1)-simplex embedded in R^d).
inline double facet_measure(const SlabMesh& m, int f)
{
  auto v = m.facet(f);
  const int d = m.dim;
  if (d == 1) return 1.0;
  auto p0 = m.point(v[0]);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 3, 2> E(d, d - 1);
  for (int r = 1; r < d; ++r) {
    auto pr = m.point(v[r]);
    for (int k = 0; k < d; ++k) E(k, r - 1) = pr[k] - p0[k];
  }
  const double gram = (E.transpose() * E).determinant();
  return std::sqrt(std::max(gram, 0.0)) / (d == 2 ? 1.0 : 2.0);
}

/// Exact P1 mass matrix entry on a k-simplex: |T| (1 + delta_ij) / ((k+1)(k+2)).
inline double p1_mass_entry(double measure, int k, bool diagonal)
{
  return measure * (diagonal ? 2.0 : 1.0) / ((k + 1.0) * (k + 2.0));
}

/// Mean of a nodal field over the vertices of each cell (the centroid value of
/// its P1 interpolant).
inline Vector cell_centroid_values(const SlabMesh& m, const Vector& nodal)
{
  require_size(nodal, m.num_nodes(), "cell_centroid_values");
  Vector out(m.num_cells());
  for (int c = 0; c < m.num_cells(); ++c) {
    double s = 0.0;
    for (int v : m.cell(c)) s += nodal[v];
    out[c] = s / (m.dim + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

inline SparseMatrix from_triplets(int n, const Triplets& t)
{
  SparseMatrix A(n, n);
  A.setFromTriplets(t.begin(), t.end());
  A.makeCompressed();
  return A;
}

/// M_ij = int phi_i phi_j, optionally scaled per cell.
inline SparseMatrix assemble_mass(const SlabMesh& m, const Vector* cell_scale = nullptr)
{
  const int nv = m.dim + 1;
  Triplets t;
  t.reserve(static_cast<std::size_t>(m.num_cells()) * nv * nv);
  for (int c = 0; c < m.num_cells(); ++c) {
    const double s = cell_scale ? (*cell_scale)[c] : 1.0;
    const double meas = cell_measure(m, c);
    auto v = m.cell(c);
    for (int i = 0; i < nv; ++i)
      for (int j = 0; j < nv; ++j) t.emplace_back(v[i], v[j], s * p1_mass_entry(meas, m.dim, i == j));
  }
  return from_triplets(m.num_nodes(), t);
}

/// int c_e (gamma grad phi_i) . grad phi_j with a per-cell scalar c_e and a
/// constant symmetric tensor gamma (identity when empty).
inline SparseMatrix assemble_stiffness_cells(const SlabMesh& m, const Vector& cell_coef, const Matrix& gamma = Matrix())
{
  require_size(cell_coef, m.num_cells(), "assemble_stiffness");
  const int nv = m.dim + 1;
  const bool iso = gamma.size() == 0;
  if (!iso && (gamma.rows() != m.dim || gamma.cols() != m.dim))
    throw std::invalid_argument("assemble_stiffness: gamma must be dim x dim");
  Triplets t;
  t.reserve(static_cast<std::size_t>(m.num_cells()) * nv * nv);
  for (int c = 0; c < m.num_cells(); ++c) {
    const SimplexGeometry g = simplex_geometry(m, c);
    Matrix Ke = iso ? Matrix(g.grads * g.grads.transpose()) : Matrix(g.grads * gamma * g.grads.transpose());
    Ke *= g.measure * cell_coef[c];
    auto v = m.cell(c);
    for (int i = 0; i < nv; ++i)
      for (int j = 0; j < nv; ++j) t.emplace_back(v[i], v[j], 0.5 * (Ke(i, j) + Ke(j, i)));
  }
  return from_triplets(m.num_nodes(), t);
}

/// Stiffness of -div(exp(a) grad u) with exp(a) evaluated at cell centroids.
inline SparseMatrix assemble_stiffness(const SlabMesh& m, const Vector& a)
{
  Vector coef = cell_centroid_values(m, a).array().exp();
  return assemble_stiffness_cells(m, coef);
}

/// Mass matrix of the boundary facets carrying `tag`, in volume numbering.
inline SparseMatrix assemble_facet_mass(const SlabMesh& m, FacetTag tag, double scale = 1.0)
{
  const int nv = m.dim;
  Triplets t;
  for (int f = 0; f < m.num_facets(); ++f) {
    if (m.facet_tags[f] != tag) continue;
    const double meas = facet_measure(m, f);
    auto v = m.facet(f);
    for (int i = 0; i < nv; ++i)
      for (int j = 0; j < nv; ++j) t.emplace_back(v[i], v[j], scale * p1_mass_entry(meas, m.dim - 1, i == j));
  }
  return from_triplets(m.num_nodes(), t);
}

/// Robin term int_{bottom} exp(beta) u v, embedded in volume numbering via
/// the bottom trace. `beta` lives on `bottom` (see extract_bottom_mesh).
inline SparseMatrix assemble_robin_mass(const SlabMesh& volume, const SlabMesh& bottom, const Vector& beta)
{
  if (beta.size() != bottom.num_nodes() || bottom.bottom_trace.size() != volume.bottom_trace.size())
    throw std::invalid_argument("assemble_robin_mass: beta does not live on the bottom surface of this mesh");
  const Vector coef = cell_centroid_values(bottom, beta).array().exp();
  const int nv = bottom.dim + 1;
  Triplets t;
  t.reserve(static_cast<std::size_t>(bottom.num_cells()) * nv * nv);
  for (int c = 0; c < bottom.num_cells(); ++c) {
    const double meas = cell_measure(bottom, c);
    auto v = bottom.cell(c);
    for (int i = 0; i < nv; ++i)
      for (int j = 0; j < nv; ++j)
        t.emplace_back(bottom.bottom_trace[v[i]], bottom.bottom_trace[v[j]],
                       coef[c] * p1_mass_entry(meas, bottom.dim, i == j));
  }
  return from_triplets(volume.num_nodes(), t);
}

/// Load int_{top} g v for a nodal flux g; only values at TOP nodes matter.
inline Vector assemble_flux_load(const SlabMesh& m, const Vector& g)
{
  require_size(g, m.num_nodes(), "assemble_flux_load");
  return assemble_facet_mass(m, FacetTag::Top) * g;
}

/// Test-only volumetric source int f v (the production model has none).
inline Vector assemble_source_load(const SlabMesh& m, const Vector& f)
{
  require_size(f, m.num_nodes(), "assemble_source_load");
  return assemble_mass(m) * f;
}

// ---------------------------------------------------------------------------
// Dirichlet elimination
// ---------------------------------------------------------------------------

/// Free/constrained split of the degrees of freedom. Constrained values are
/// zero; rows and columns are removed (not penalised), which keeps SPD.
class DofMap {
 public:
  DofMap() = default;
  DofMap(int n, const std::vector<bool>& constrained) : n_(n), to_free_(n, -1)
  {
    for (int i = 0; i < n; ++i)
      if (!constrained[i]) {
        to_free_[i] = static_cast<int>(free_.size());
        free_.push_back(i);
      }
  }

  static DofMap all_free(int n) { return DofMap(n, std::vector<bool>(n, false)); }

  int size() const { return n_; }
  int num_free() const { return static_cast<int>(free_.size()); }
  const std::vector<int>& free_dofs() const { return free_; }
  int free_index(int i) const { return to_free_[i]; }

  SparseMatrix restrict_matrix(const SparseMatrix& A) const
  {
    Triplets t;
    t.reserve(A.nonZeros());
    for (int k = 0; k < A.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(A, k); it; ++it) {
        const int r = to_free_[it.row()], c = to_free_[it.col()];
        if (r >= 0 && c >= 0) t.emplace_back(r, c, it.value());
      }
    SparseMatrix out(num_free(), num_free());
    out.setFromTriplets(t.begin(), t.end());
    out.makeCompressed();
    return out;
  }

  Vector restrict_vector(const Vector& v) const
  {
    Vector out(num_free());
    for (int k = 0; k < num_free(); ++k) out[k] = v[free_[k]];
    return out;
  }

  Vector prolong(const Vector& v) const
  {
    Vector out = Vector::Zero(n_);
    for (int k = 0; k < num_free(); ++k) out[free_[k]] = v[k];
    return out;
  }

 private:
  int n_ = 0;
  std::vector<int> free_;
  std::vector<int> to_free_;
};

/// Nodes on SIDE facets; these carry the homogeneous Dirichlet condition.
inline DofMap side_dirichlet_dofs(const SlabMesh& m)
{
  std::vector<bool> constrained(m.num_nodes(), false);
  for (int f = 0; f < m.num_facets(); ++f)
    if (m.facet_tags[f] == FacetTag::Side)
      for (int v : m.facet(f)) constrained[v] = true;
  return DofMap(m.num_nodes(), constrained);
}

/// Nodes on any boundary facet of the mesh.
inline std::vector<bool> boundary_nodes(const SlabMesh& m)
{
  std::vector<bool> on(m.num_nodes(), false);
  for (int f = 0; f < m.num_facets(); ++f)
    for (int v : m.facet(f)) on[v] = true;
  return on;
}

// ---------------------------------------------------------------------------
// SPD solves
// ---------------------------------------------------------------------------

/// Sparse SPD solver: sparse Cholesky up to `direct_limit` unknowns, diagonal
/// preconditioned CG beyond. The factorization is reused across solves.
class SpdSolver {
 public:
  static constexpr int direct_limit = 30000;

  SpdSolver() = default;
  explicit SpdSolver(const SparseMatrix& A, double tol = 1e-12) { compute(A, tol); }

  void compute(const SparseMatrix& A, double tol = 1e-12)
  {
    if (A.rows() != A.cols()) throw std::invalid_argument("solve_spd: matrix is not square");
    n_ = static_cast<int>(A.rows());
    tol_ = tol;
    if (n_ == 0) return;
    if (n_ <= direct_limit) {
      direct_ = std::make_unique<Eigen::SimplicialLLT<SparseMatrix>>();
      direct_->compute(A);
      if (direct_->info() != Eigen::Success)
        throw NumericalFailure("solve_spd: Cholesky factorization failed (matrix singular or indefinite)");
      // Roundoff can let a singular matrix through with a tiny last pivot.
      const Vector piv = direct_->matrixL().nestedExpression().diagonal();
      const double lo = piv.minCoeff(), hi = piv.maxCoeff();
      if (!(lo * lo > 1e-14 * hi * hi))
        throw NumericalFailure("solve_spd: matrix is numerically singular");
      iterative_.reset();
      matrix_.reset();
    } else {
      iterative_ = std::make_unique<Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper>>();
      iterative_->setTolerance(tol);
      iterative_->setMaxIterations(10 * n_);
      // The CG object keeps a reference to its matrix.
      matrix_ = std::make_unique<SparseMatrix>(A);
      iterative_->compute(*matrix_);
      if (iterative_->info() != Eigen::Success) throw NumericalFailure("solve_spd: CG setup failed");
      direct_.reset();
    }
  }

  int size() const { return n_; }

  Vector solve(const Vector& b) const
  {
    require_size(b, n_, "solve_spd");
    if (n_ == 0) return Vector();
    if (direct_) return direct_->solve(b);
    Vector x = iterative_->solve(b);
    if (iterative_->info() != Eigen::Success) throw NumericalFailure("solve_spd: CG did not converge");
    return x;
  }

  Matrix solve(const Matrix& B) const
  {
    Matrix X(B.rows(), B.cols());
    for (Eigen::Index j = 0; j < B.cols(); ++j) X.col(j) = solve(Vector(B.col(j)));
    return X;
  }

  /// F y for the Cholesky-type factor F = U P with F^T F = A.
  Vector sqrt_apply(const Vector& y) const
  {
    require_size(y, n_, "sqrt_apply");
    if (!direct_) throw std::logic_error("sqrt_apply requires a direct factorization");
    Vector py = direct_->permutationP() * y;
    return direct_->matrixU() * py;
  }
  bool is_direct() const { return static_cast<bool>(direct_); }

  /// White noise with covariance A^{-1}: P^T U^{-1} xi for A = P^T U^T U P.
  /// Only available for the direct factorization.
  Vector inverse_sqrt_apply(const Vector& xi) const
  {
    require_size(xi, n_, "inverse_sqrt_apply");
    if (!direct_) throw std::logic_error("inverse_sqrt_apply requires a direct factorization");
    Vector y = direct_->matrixU().solve(xi);
    return direct_->permutationPinv() * y;
  }

 private:
  int n_ = 0;
  double tol_ = 1e-12;
  std::unique_ptr<Eigen::SimplicialLLT<SparseMatrix>> direct_;
  std::unique_ptr<SparseMatrix> matrix_;
  std::unique_ptr<Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper>> iterative_;
};

inline Vector solve_spd(const SparseMatrix& A, const Vector& b, double tol = 1e-12)
{
  return SpdSolver(A, tol).solve(b);
}

// ---------------------------------------------------------------------------
// Point location and interpolation
// ---------------------------------------------------------------------------

struct PointLocation {
  int cell = -1;
  std::array<double, 4> bary{};
};

/// Bucket grid over cell bounding boxes.
class PointLocator {
 public:
  explicit PointLocator(const SlabMesh& m, double tol = 1e-12) : mesh_(&m), tol_(tol)
  {
    const int d = m.dim;
    lo_.assign(d, 1e300);
    hi_.assign(d, -1e300);
    for (int i = 0; i < m.num_nodes(); ++i) {
      auto p = m.point(i);
      for (int k = 0; k < d; ++k) {
        lo_[k] = std::min(lo_[k], p[k]);
        hi_[k] = std::max(hi_[k], p[k]);
      }
    }
    const double per_axis = std::pow(std::max(1, m.num_cells()), 1.0 / d);
    for (int k = 0; k < d; ++k) {
      // Flat axes (thin slab) get fewer buckets so buckets stay roughly cubic.
      const double ext = hi_[k] - lo_[k];
      double maxext = 0.0;
      for (int j = 0; j < d; ++j) maxext = std::max(maxext, hi_[j] - lo_[j]);
      nb_[k] = std::max(1, static_cast<int>(std::ceil(per_axis * ext / maxext)));
      nb_[k] = std::min(nb_[k], 4096);
    }
    buckets_.assign(static_cast<std::size_t>(nb_[0]) * nb_[1] * nb_[2], {});
    for (int c = 0; c < m.num_cells(); ++c) {
      std::array<int, 3> b0{0, 0, 0}, b1{0, 0, 0};
      for (int k = 0; k < d; ++k) {
        double cl = 1e300, ch = -1e300;
        for (int v : m.cell(c)) {
          cl = std::min(cl, m.point(v)[k]);
          ch = std::max(ch, m.point(v)[k]);
        }
        b0[k] = bucket_index(k, cl);
        b1[k] = bucket_index(k, ch);
      }
      for (int i = b0[0]; i <= b1[0]; ++i)
        for (int j = b0[1]; j <= b1[1]; ++j)
          for (int l = b0[2]; l <= b1[2]; ++l) buckets_[flat(i, j, l)].push_back(c);
    }
  }

  /// Enclosing simplex and barycentric weights. Points outside the mesh by
  /// more than `tol` (physical distance) raise OutOfDomain.
  PointLocation locate(std::span<const double> x) const
  {
    const SlabMesh& m = *mesh_;
    const int d = m.dim;
    std::array<int, 3> b{0, 0, 0};
    for (int k = 0; k < d; ++k) b[k] = bucket_index(k, x[k]);
    PointLocation best;
    double best_dist = 1e300;
    for (int c : buckets_[flat(b[0], b[1], b[2])]) {
      const SimplexGeometry g = simplex_geometry(m, c);
      auto v = m.cell(c);
      auto p0 = m.point(v[0]);
      std::array<double, 4> lam{};
      lam[0] = 1.0;
      for (int i = 1; i <= d; ++i) {
        double s = 0.0;
        for (int k = 0; k < d; ++k) s += g.grads(i, k) * (x[k] - p0[k]);
        lam[i] = s;
        lam[0] -= s;
      }
      // Distance outside = max over violated faces of -lambda_i / |grad lambda_i|.
      double dist = 0.0;
      for (int i = 0; i <= d; ++i)
        if (lam[i] < 0.0) dist = std::max(dist, -lam[i] / g.grads.row(i).norm());
      if (dist < best_dist) {
        best_dist = dist;
        best.cell = c;
        best.bary = lam;
      }
      if (dist == 0.0) break;
    }
    if (best.cell < 0 || best_dist > tol_) {
      std::string s = "point (";
      for (int k = 0; k < d; ++k) s += (k ? ", " : "") + std::to_string(x[k]);
      throw OutOfDomain(s + ") lies outside the mesh");
    }
    double sum = 0.0;
    for (int i = 0; i <= d; ++i) {
      best.bary[i] = std::max(best.bary[i], 0.0);
      sum += best.bary[i];
    }
    for (int i = 0; i <= d; ++i) best.bary[i] /= sum;
    return best;
  }

  double evaluate(const Vector& field, std::span<const double> x) const
  {
    const PointLocation loc = locate(x);
    auto v = mesh_->cell(loc.cell);
    double s = 0.0;
    for (int i = 0; i <= mesh_->dim; ++i) s += loc.bary[i] * field[v[i]];
    return s;
  }

  const SlabMesh& mesh() const { return *mesh_; }

 private:
  int bucket_index(int k, double x) const
  {
    const double ext = hi_[k] - lo_[k];
    if (ext <= 0.0) return 0;
    int i = static_cast<int>(std::floor((x - lo_[k]) / ext * nb_[k]));
    return std::clamp(i, 0, nb_[k] - 1);
  }
  std::size_t flat(int i, int j, int l) const { return (static_cast<std::size_t>(l) * nb_[1] + j) * nb_[0] + i; }

  const SlabMesh* mesh_;
  double tol_;
  std::vector<double> lo_, hi_;
  std::array<int, 3> nb_{1, 1, 1};
  std::vector<std::vector<int>> buckets_;
};

/// P1 interpolation of a nodal field from `src` onto the nodes of `dst`.
inline Vector interpolate_field(const SlabMesh& src, const Vector& field, const SlabMesh& dst)
{
  require_size(field, src.num_nodes(), "interpolate_field");
  if (src.dim != dst.dim) throw std::invalid_argument("interpolate_field: dimension mismatch");
  if (src.fingerprint() == dst.fingerprint()) return field;
  PointLocator loc(src);
  Vector out(dst.num_nodes());
  for (int i = 0; i < dst.num_nodes(); ++i) out[i] = loc.evaluate(field, dst.point(i));
  return out;
}

}  // namespace robinbae
