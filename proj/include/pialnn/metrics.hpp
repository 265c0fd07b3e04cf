#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pialnn/geometry.hpp"

namespace pialnn {

// Exact nearest-neighbor distances from each point of A to the set B.
// The grid-accelerated version must match the O(nm) brute force exactly;
// both share the same per-pair distance computation.
std::vector<double> nearest_distances_brute(const std::vector<Vec3>& A,
                                            const std::vector<Vec3>& B);
std::vector<double> nearest_distances(const std::vector<Vec3>& A,
                                      const std::vector<Vec3>& B);

// Symmetric Chamfer distance between two point sets:
// (mean_A NN(A->B) + mean_B NN(B->A)) / 2. The average (not the sum) of the
// two directions is used so CD shares units and scale with AD.
double chamfer(const std::vector<Vec3>& A, const std::vector<Vec3>& B);

// AD/HD between surfaces: sample n points from each mesh (same seed for
// both sides, so the metrics are symmetric by construction), then
// AD = mean of the two directional NN-distance means,
// HD = max of the two directional maxima.
double average_abs_distance(const TriMesh& A, const TriMesh& B,
                            size_t n_samples, uint64_t seed);
double hausdorff_distance(const TriMesh& A, const TriMesh& B,
                          size_t n_samples, uint64_t seed);

// Distance from each predicted vertex to the nearest ground-truth surface
// sample; the per-vertex field used for error maps.
std::vector<double> error_map(const TriMesh& pred, const TriMesh& gt,
                              size_t n_samples, uint64_t seed);

struct MetricsReport {
  double chamfer = 0;       // on vertex sets
  double average_abs = 0;   // on sampled points
  double hausdorff = 0;     // on sampled points
  size_t pred_vertices = 0;
  size_t gt_vertices = 0;
  size_t samples_per_mesh = 0;
  uint64_t seed = 0;
  std::vector<double> per_vertex;  // error map for pred
};

MetricsReport evaluate_meshes(const TriMesh& pred, const TriMesh& gt,
                              size_t n_samples, uint64_t seed);

void write_metrics_json(const MetricsReport& report, const std::string& path);
void write_error_map_csv(const MetricsReport& report, const std::string& path);

namespace serial {
std::vector<double> nearest_distances(const std::vector<Vec3>& A,
                                      const std::vector<Vec3>& B);
}

}  // namespace pialnn
