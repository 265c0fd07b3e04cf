#include "pialnn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

namespace pialnn {

namespace {

inline double sqdist(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

double nn_brute_one(const Vec3& a, const Vec3* b, size_t m) {
  double best = std::numeric_limits<double>::infinity();
  for (size_t j = 0; j < m; ++j) {
    const double d = sqdist(a, b[j]);
    if (d < best) best = d;
  }
  return std::sqrt(best);
}

// Uniform grid over B's bounding box with roughly 2 points per cell.
struct PointGrid {
  Vec3 origin;
  double cell = 1;
  int nx = 1, ny = 1, nz = 1;
  std::vector<int32_t> starts;  // CSR over cells
  std::vector<int32_t> order;   // point indices grouped by cell
  const Vec3* pts = nullptr;
  size_t count = 0;

  void build(const std::vector<Vec3>& points) {
    pts = points.data();
    count = points.size();
    Vec3 lo = points[0], hi = points[0];
    for (const Vec3& p : points)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
    origin = lo;
    const double vol = std::max((hi.x - lo.x) * (hi.y - lo.y) * (hi.z - lo.z),
                                1e-300);
    cell = std::cbrt(vol * 2.0 / (double)count);
    const double longest =
        std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z, 1e-300});
    cell = std::max(cell, longest / 128.0);  // cap the grid at 128^3
    if (!(cell > 0) || !std::isfinite(cell)) cell = 1.0;
    nx = std::max(1, (int)((hi.x - lo.x) / cell) + 1);
    ny = std::max(1, (int)((hi.y - lo.y) / cell) + 1);
    nz = std::max(1, (int)((hi.z - lo.z) / cell) + 1);

    const size_t ncells = (size_t)nx * ny * nz;
    starts.assign(ncells + 1, 0);
    std::vector<int32_t> which(count);
    for (size_t i = 0; i < count; ++i) {
      which[i] = (int32_t)cell_of(points[i]);
      starts[which[i] + 1]++;
    }
    for (size_t c = 0; c < ncells; ++c) starts[c + 1] += starts[c];
    order.resize(count);
    std::vector<int32_t> cursor(starts.begin(), starts.end() - 1);
    for (size_t i = 0; i < count; ++i) order[cursor[which[i]]++] = (int32_t)i;
  }

  int clampi(int v, int hi_) const { return v < 0 ? 0 : (v > hi_ ? hi_ : v); }

  size_t cell_of(const Vec3& p) const {
    const int cx = clampi((int)((p.x - origin.x) / cell), nx - 1);
    const int cy = clampi((int)((p.y - origin.y) / cell), ny - 1);
    const int cz = clampi((int)((p.z - origin.z) / cell), nz - 1);
    return (size_t)cx + (size_t)nx * ((size_t)cy + (size_t)ny * cz);
  }

  // Exact nearest distance: expanding Chebyshev rings of cells. A cell at
  // ring r is at least (r-1)*cell away, so the search stops once that lower
  // bound exceeds the best hit.
  double query(const Vec3& a) const {
    const int cx = (int)std::floor((a.x - origin.x) / cell);
    const int cy = (int)std::floor((a.y - origin.y) / cell);
    const int cz = (int)std::floor((a.z - origin.z) / cell);
    double best = std::numeric_limits<double>::infinity();
    const int rmax =
        std::max({nx + std::abs(cx), ny + std::abs(cy), nz + std::abs(cz)}) +
        2;
    for (int r = 0; r <= rmax; ++r) {
      if (r >= 2) {
        const double bound = (r - 1) * cell;
        if (bound * bound > best) break;
      }
      for (int dz = -r; dz <= r; ++dz) {
        const int z = cz + dz;
        if (z < 0 || z >= nz) continue;
        for (int dy = -r; dy <= r; ++dy) {
          const int y = cy + dy;
          if (y < 0 || y >= ny) continue;
          const bool face = std::abs(dz) == r || std::abs(dy) == r;
          const int step = face ? 1 : 2 * r;
          for (int dx = -r; dx <= r; dx += (step > 0 ? step : 1)) {
            const int x = cx + dx;
            if (x < 0 || x >= nx) continue;
            if (!face && std::abs(dx) != r) continue;
            const size_t c = (size_t)x + (size_t)nx * ((size_t)y + (size_t)ny * z);
            for (int32_t k = starts[c]; k < starts[c + 1]; ++k) {
              const double d = sqdist(a, pts[order[k]]);
              if (d < best) best = d;
            }
          }
        }
      }
      if (r == 0 && rmax == 0) break;
    }
    return std::sqrt(best);
  }
};

}  // namespace

std::vector<double> nearest_distances_brute(const std::vector<Vec3>& A,
                                            const std::vector<Vec3>& B) {
  if (B.empty()) throw format_error("nearest_distances: empty reference set");
  std::vector<double> out(A.size());
#pragma omp parallel for schedule(static) if (A.size() * B.size() >= 1 << 16)
  for (long i = 0; i < (long)A.size(); ++i)
    out[i] = nn_brute_one(A[i], B.data(), B.size());
  return out;
}

std::vector<double> nearest_distances(const std::vector<Vec3>& A,
                                      const std::vector<Vec3>& B) {
  if (B.empty()) throw format_error("nearest_distances: empty reference set");
  PointGrid grid;
  grid.build(B);
  std::vector<double> out(A.size());
#pragma omp parallel for schedule(static) if (A.size() >= 512)
  for (long i = 0; i < (long)A.size(); ++i) out[i] = grid.query(A[i]);
  return out;
}

namespace serial {
std::vector<double> nearest_distances(const std::vector<Vec3>& A,
                                      const std::vector<Vec3>& B) {
  if (B.empty()) throw format_error("nearest_distances: empty reference set");
  PointGrid grid;
  grid.build(B);
  std::vector<double> out(A.size());
  for (size_t i = 0; i < A.size(); ++i) out[i] = grid.query(A[i]);
  return out;
}
}  // namespace serial

namespace {

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / (double)v.size();
}

double maximum(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s = std::max(s, x);
  return s;
}

}  // namespace

double chamfer(const std::vector<Vec3>& A, const std::vector<Vec3>& B) {
  if (A.empty() || B.empty()) throw format_error("chamfer: empty point set");
  const std::vector<double> ab = nearest_distances(A, B);
  const std::vector<double> ba = nearest_distances(B, A);
  return 0.5 * (mean(ab) + mean(ba));
}

double average_abs_distance(const TriMesh& A, const TriMesh& B,
                            size_t n_samples, uint64_t seed) {
  if (n_samples < 1) throw format_error("average_abs_distance: n_samples < 1");
  const std::vector<Vec3> sa = sample_surface_points(A, n_samples, seed);
  const std::vector<Vec3> sb = sample_surface_points(B, n_samples, seed);
  return 0.5 *
         (mean(nearest_distances(sa, sb)) + mean(nearest_distances(sb, sa)));
}

double hausdorff_distance(const TriMesh& A, const TriMesh& B,
                          size_t n_samples, uint64_t seed) {
  if (n_samples < 1) throw format_error("hausdorff_distance: n_samples < 1");
  const std::vector<Vec3> sa = sample_surface_points(A, n_samples, seed);
  const std::vector<Vec3> sb = sample_surface_points(B, n_samples, seed);
  return std::max(maximum(nearest_distances(sa, sb)),
                  maximum(nearest_distances(sb, sa)));
}

std::vector<double> error_map(const TriMesh& pred, const TriMesh& gt,
                              size_t n_samples, uint64_t seed) {
  const std::vector<Vec3> samples = sample_surface_points(gt, n_samples, seed);
  return nearest_distances(pred.vertices, samples);
}

MetricsReport evaluate_meshes(const TriMesh& pred, const TriMesh& gt,
                              size_t n_samples, uint64_t seed) {
  MetricsReport r;
  r.pred_vertices = pred.vertices.size();
  r.gt_vertices = gt.vertices.size();
  r.samples_per_mesh = n_samples;
  r.seed = seed;
  r.chamfer = chamfer(pred.vertices, gt.vertices);

  const std::vector<Vec3> sp = sample_surface_points(pred, n_samples, seed);
  const std::vector<Vec3> sg = sample_surface_points(gt, n_samples, seed);
  const std::vector<double> pg = nearest_distances(sp, sg);
  const std::vector<double> gp = nearest_distances(sg, sp);
  r.average_abs = 0.5 * (mean(pg) + mean(gp));
  r.hausdorff = std::max(maximum(pg), maximum(gp));
  r.per_vertex = nearest_distances(pred.vertices, sg);
  return r;
}

void write_metrics_json(const MetricsReport& report, const std::string& path) {
  nlohmann::ordered_json j;
  j["chamfer"] = report.chamfer;
  j["average_abs"] = report.average_abs;
  j["hausdorff"] = report.hausdorff;
  j["pred_vertices"] = report.pred_vertices;
  j["gt_vertices"] = report.gt_vertices;
  j["samples_per_mesh"] = report.samples_per_mesh;
  j["seed"] = report.seed;
  std::ofstream out(path);
  if (!out) throw io_error("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw io_error("failed to write " + path);
}

void write_error_map_csv(const MetricsReport& report,
                         const std::string& path) {
  std::FILE* out = std::fopen(path.c_str(), "w");
  if (!out) throw io_error("cannot open " + path + " for writing");
  std::fprintf(out, "vertex_index,distance\n");
  for (size_t i = 0; i < report.per_vertex.size(); ++i)
    std::fprintf(out, "%zu,%.17g\n", i, report.per_vertex[i]);
  if (std::fclose(out) != 0) throw io_error("failed to write " + path);
}

}  // namespace pialnn
