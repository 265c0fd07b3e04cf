#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pialnn/common.hpp"

namespace pialnn {

// Triangular surface mesh. Faces are vertex-index triples in counter-
// clockwise orientation; the edge set derived from them is undirected.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;

  // Throws format_error if a face index is out of range or repeated.
  void validate() const;
};

// Per-vertex neighbor lists in CSR form: neighbors of i are
// items[offsets[i] .. offsets[i+1]), sorted and deduplicated, no self loops.
struct AdjacencyList {
  std::vector<int32_t> offsets;
  std::vector<int32_t> items;

  int vertex_count() const { return (int)offsets.size() - 1; }
  int degree(int i) const { return offsets[i + 1] - offsets[i]; }
  const int32_t* begin(int i) const { return items.data() + offsets[i]; }
  const int32_t* end(int i) const { return items.data() + offsets[i + 1]; }
};

// Per-vertex incident-face lists in CSR form, in ascending face order.
struct FaceIncidence {
  std::vector<int32_t> offsets;
  std::vector<int32_t> items;
};

AdjacencyList build_adjacency(const TriMesh& mesh);
FaceIncidence build_face_incidence(const TriMesh& mesh);

// Everything position-independent about a mesh, built once and reused while
// vertices deform (the face list never changes).
struct MeshTopology {
  std::vector<Face> faces;
  FaceIncidence incidence;
  AdjacencyList adjacency;

  static MeshTopology build(const TriMesh& mesh);
};

// Area-weighted vertex normals: the normalized sum of incident-face cross
// products. A vertex whose accumulated vector is exactly zero (isolated, or
// only degenerate faces) gets the zero vector.
std::vector<Vec3> compute_vertex_normals(const TriMesh& mesh);

// Same, writing into `normals` (resized) using a prebuilt incidence; this is
// the form the deformation model calls once per block.
void compute_vertex_normals(const std::vector<Vec3>& vertices,
                            const std::vector<Face>& faces,
                            const FaceIncidence& incidence,
                            std::vector<Vec3>& normals);

// out_i = (1-lambda)*v_i + lambda * mean of neighbors; vertices with no
// neighbors pass through unchanged. Requires 0 <= lambda <= 1.
std::vector<Vec3> laplacian_smooth(const std::vector<Vec3>& vertices,
                                   const AdjacencyList& adj, double lambda);
void laplacian_smooth(const Vec3* vertices, const AdjacencyList& adj,
                      double lambda, Vec3* out);

// Transpose of the smoothing operator, for backpropagation:
// out_j = (1-lambda)*g_j + lambda * sum_{i in N(j)} g_i / |N(i)|.
void laplacian_smooth_transpose(const Vec3* grad_out, const AdjacencyList& adj,
                                double lambda, Vec3* grad_in);

// n points drawn by area-weighted face selection then uniform barycentric
// coordinates; bit-identical for a fixed seed. Throws numeric_error if the
// total surface area is zero and n > 0.
std::vector<Vec3> sample_surface_points(const TriMesh& mesh, size_t n,
                                        uint64_t seed);

double surface_area(const TriMesh& mesh);

// Unit icosphere: the regular icosahedron (12 vertices at subdivision 0),
// each subdivision splitting every face in four with midpoints projected to
// the sphere. Vertex counts: 12, 42, 162, 642, 2562, 10242, ...
TriMesh make_icosphere(int subdivisions, double radius = 1.0);

// Strict ASCII OBJ subset: `v x y z`, `f i j k` (1-based, triangles only),
// `#` comments. Anything else is rejected with the offending line number.
TriMesh read_obj(const std::string& path);
void write_obj(const TriMesh& mesh, const std::string& path);

namespace serial {
void compute_vertex_normals(const std::vector<Vec3>& vertices,
                            const std::vector<Face>& faces,
                            const FaceIncidence& incidence,
                            std::vector<Vec3>& normals);
void laplacian_smooth(const Vec3* vertices, const AdjacencyList& adj,
                      double lambda, Vec3* out);
}  // namespace serial

}  // namespace pialnn
