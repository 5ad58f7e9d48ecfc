#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "robinbae/mesh.hpp"

using namespace robinbae;

namespace {

// Independent facet enumerator: count every cell face in an ordered map.
std::map<std::vector<int>, int> face_counts(const SlabMesh& m)
{
  std::map<std::vector<int>, int> counts;
  const int nv = m.dim + 1;
  for (int c = 0; c < m.num_cells(); ++c) {
    auto cell = m.cell(c);
    for (int skip = 0; skip < nv; ++skip) {
      std::vector<int> f;
      for (int k = 0; k < nv; ++k)
        if (k != skip) f.push_back(cell[k]);
      std::sort(f.begin(), f.end());
      ++counts[f];
    }
  }
  return counts;
}

}  // namespace

TEST(Mesh, FullScaleCounts)
{
  const SlabMesh m = build_slab_mesh(30, 30, 6, 1.0, 0.01, 3);
  EXPECT_EQ(m.num_nodes(), 6727);
  EXPECT_EQ(m.num_cells(), 32400);
  EXPECT_EQ(m.bottom_trace.size(), 961u);
}

TEST(Mesh, SmallCounts)
{
  const SlabMesh m = build_slab_mesh(2, 2, 1, 1.0, 0.01, 3);
  EXPECT_EQ(m.num_nodes(), 18);
  EXPECT_EQ(m.num_cells(), 24);
  EXPECT_EQ(m.bottom_trace.size(), 9u);
}

TEST(Mesh, VolumesPositiveAndSumToBox)
{
  for (int dim : {2, 3}) {
    const SlabMesh m = build_slab_mesh(5, 4, 3, 1.0, 0.01, dim);
    double total = 0.0;
    for (int c = 0; c < m.num_cells(); ++c) {
      const double v = cell_measure(m, c);
      ASSERT_GT(v, 0.0);
      total += v;
    }
    const double expect = 1.0 * 0.01;  // L^(d-1) H with L = 1
    EXPECT_NEAR(total / expect, 1.0, 1e-12);
    EXPECT_NEAR(mesh_measure(m) / expect, 1.0, 1e-12);
  }
}

TEST(Mesh, FacetsPartitionTheBoundary)
{
  for (int dim : {2, 3}) {
    const SlabMesh m = build_slab_mesh(3, 4, 2, 1.0, 0.5, dim);
    std::set<std::vector<int>> oracle;
    for (const auto& [f, n] : face_counts(m))
      if (n == 1) oracle.insert(f);
    std::set<std::vector<int>> seen;
    int top = 0, bottom = 0, side = 0;
    for (int f = 0; f < m.num_facets(); ++f) {
      std::vector<int> v(m.facet(f).begin(), m.facet(f).end());
      std::sort(v.begin(), v.end());
      EXPECT_TRUE(seen.insert(v).second);
      const int last = dim - 1;
      const bool at_bottom = std::all_of(v.begin(), v.end(), [&](int i) { return m.point(i)[last] == 0.0; });
      const bool at_top = std::all_of(v.begin(), v.end(), [&](int i) { return m.point(i)[last] == m.height; });
      switch (m.facet_tags[f]) {
        case FacetTag::Top: ++top; EXPECT_TRUE(at_top); break;
        case FacetTag::Bottom: ++bottom; EXPECT_TRUE(at_bottom); break;
        case FacetTag::Side: ++side; EXPECT_FALSE(at_top || at_bottom); break;
      }
    }
    EXPECT_EQ(seen, oracle);
    EXPECT_EQ(top + bottom + side, static_cast<int>(oracle.size()));
    const int per_face = dim == 3 ? 2 * 3 * 4 : 3;
    EXPECT_EQ(top, per_face);
    EXPECT_EQ(bottom, per_face);
  }
}

TEST(Mesh, BottomTraceCoversExactlyTheBottomNodes)
{
  const SlabMesh m = build_slab_mesh(4, 3, 2, 1.0, 0.01, 3);
  std::set<int> trace(m.bottom_trace.begin(), m.bottom_trace.end());
  EXPECT_EQ(trace.size(), m.bottom_trace.size());
  std::set<int> zero;
  for (int i = 0; i < m.num_nodes(); ++i)
    if (m.point(i)[2] == 0.0) zero.insert(i);
  EXPECT_EQ(trace, zero);
  EXPECT_EQ(m.bottom_trace.size(), 5u * 4u);

  const SlabMesh m2 = build_slab_mesh(7, 1, 2, 1.0, 0.01, 2);
  EXPECT_EQ(m2.bottom_trace.size(), 8u);
}

TEST(Mesh, ExtractBottomFullScale)
{
  const SlabMesh m = build_slab_mesh(30, 30, 6, 1.0, 0.01, 3);
  const SlabMesh b = extract_bottom_mesh(m);
  EXPECT_EQ(b.dim, 2);
  EXPECT_EQ(b.num_nodes(), 961);
  EXPECT_EQ(b.num_cells(), 1800);
  EXPECT_NEAR(mesh_measure(b), 1.0, 1e-12);
  for (int j = 0; j < b.num_nodes(); ++j) {
    EXPECT_EQ(m.point(b.bottom_trace[j])[2], 0.0);
    EXPECT_EQ(m.point(b.bottom_trace[j])[0], b.point(j)[0]);
    EXPECT_EQ(m.point(b.bottom_trace[j])[1], b.point(j)[1]);
  }
  // Every bottom facet of the volume appears as a surface cell.
  int bottom_facets = 0;
  for (auto tag : m.facet_tags) bottom_facets += tag == FacetTag::Bottom;
  EXPECT_EQ(bottom_facets, 1800);
  EXPECT_EQ(b.num_facets(), 4 * 30);
}

TEST(Mesh, ExtractBottom2D)
{
  const SlabMesh m = build_slab_mesh(9, 1, 3, 2.0, 0.1, 2);
  const SlabMesh b = extract_bottom_mesh(m);
  EXPECT_EQ(b.dim, 1);
  EXPECT_EQ(b.num_nodes(), 10);
  EXPECT_EQ(b.num_cells(), 9);
  EXPECT_NEAR(mesh_measure(b), 2.0, 1e-12);
  EXPECT_EQ(b.num_facets(), 2);
}

TEST(Mesh, Deterministic)
{
  const SlabMesh a = build_slab_mesh(6, 5, 2, 1.0, 0.01, 3);
  const SlabMesh b = build_slab_mesh(6, 5, 2, 1.0, 0.01, 3);
  EXPECT_EQ(a.coords, b.coords);
  EXPECT_EQ(a.cells, b.cells);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_NE(a.fingerprint(), build_slab_mesh(6, 5, 3, 1.0, 0.01, 3).fingerprint());
}

TEST(Mesh, RejectsBadArguments)
{
  EXPECT_THROW(build_slab_mesh(0, 1, 1, 1.0, 1.0, 3), std::invalid_argument);
  EXPECT_THROW(build_slab_mesh(1, 0, 1, 1.0, 1.0, 3), std::invalid_argument);
  EXPECT_THROW(build_slab_mesh(1, 1, -1, 1.0, 1.0, 3), std::invalid_argument);
  EXPECT_THROW(build_slab_mesh(1, 1, 1, 0.0, 1.0, 3), std::invalid_argument);
  EXPECT_THROW(build_slab_mesh(1, 1, 1, 1.0, -1.0, 2), std::invalid_argument);
  EXPECT_THROW(build_slab_mesh(1, 1, 1, 1.0, 1.0, 4), std::invalid_argument);
  EXPECT_NO_THROW(build_slab_mesh(1, 0, 1, 1.0, 1.0, 2));
}

TEST(Mesh, ExportFormat)
{
  const SlabMesh m = build_slab_mesh(1, 1, 1, 1.0, 0.01, 2);
  std::ostringstream os;
  write_mesh(os, m);
  std::istringstream is(os.str());
  int dim, n, c;
  is >> dim >> n >> c;
  EXPECT_EQ(dim, 2);
  EXPECT_EQ(n, 4);
  EXPECT_EQ(c, 2);
  EXPECT_NE(os.str().find("0.01\n"), std::string::npos);
  EXPECT_NE(os.str().find("BOTTOM"), std::string::npos);
  EXPECT_NE(os.str().find("TOP"), std::string::npos);
  EXPECT_NE(os.str().find("SIDE"), std::string::npos);
}
