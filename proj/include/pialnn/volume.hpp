#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "pialnn/common.hpp"

namespace pialnn {

// Dense scalar grid, x index fastest. Values are stored as f32 (the on-disk
// payload type); all interpolation math runs in double.
struct Volume {
  std::array<int32_t, 3> dims{0, 0, 0};  // (L, W, H)
  std::vector<float> data;
  // Row-major 4x4 world->voxel affine; identity means world == voxel space.
  std::array<double, 16> affine{1, 0, 0, 0, 0, 1, 0, 0,
                                0, 0, 1, 0, 0, 0, 0, 1};

  size_t voxel_count() const {
    return (size_t)dims[0] * dims[1] * dims[2];
  }
  float& at(int x, int y, int z) {
    return data[(size_t)x + dims[0] * ((size_t)y + (size_t)dims[1] * z)];
  }
  float at(int x, int y, int z) const {
    return data[(size_t)x + dims[0] * ((size_t)y + (size_t)dims[1] * z)];
  }
  bool identity_affine() const;
  Vec3 world_to_voxel(const Vec3& p) const;
};

// Exactly three scales (1, 1/2, 1/4); each coarser level is 2x2x2 average
// pooling of the previous with partial slabs averaging existing voxels only.
struct VolumePyramid {
  std::vector<Volume> levels;
};

// One 2x average-pooling step; output dims = ceil(dims/2).
Volume downsample2x(const Volume& vol);

// Throws format_error if any dim < 4.
VolumePyramid build_pyramid(const Volume& vol, int scales = 3);

// Trilinear interpolation at continuous voxel coordinate p; returns 0 if p
// lies outside [0, dim-1] on any axis.
double trilinear_sample(const Volume& vol, const Vec3& p);

// Value plus gradient with respect to the voxel coordinate (zero outside).
struct SampleGrad {
  double value = 0;
  Vec3 grad{0, 0, 0};
};
SampleGrad trilinear_sample_grad(const Volume& vol, const Vec3& p);

// Counts trilinear evaluations made through cube sampling; used to verify
// that sampling cost depends on the vertex count only, not the volume size.
std::atomic<uint64_t>& trilinear_eval_count();

// Per-vertex multi-scale intensity cube, flattened [channel][z][y][x] with x
// fastest: entry index = ((c*K + iz)*K + iy)*K + ix. Channel c is sampled
// from pyramid level c at coordinate g/2^c + offset, where g is the vertex's
// native voxel coordinate and the integer offsets span {-(K-1)/2..(K-1)/2}^3
// in level-c voxel units, so the channels cover 1x/2x/4x physical extent.
struct CubeBatch {
  int K = 0;
  int scales = 0;
  std::vector<double> values;  // [vertex][scales*K^3]

  int width() const { return scales * K * K * K; }
};

// g = world_to_voxel(vertex) per vertex; writes cubes.values.
void cube_sample(const VolumePyramid& pyr, const Vec3* vertices, int count,
                 int K, CubeBatch& cubes);

// Accumulates d(loss)/d(vertex) given d(loss)/d(cube values), chaining the
// trilinear gradient with the level scaling and the affine linear part.
void cube_sample_backward(const VolumePyramid& pyr, const Vec3* vertices,
                          int count, int K, int scales,
                          const double* dcubes, Vec3* dvertices_acc);

// Cube sampling with K = 1: the intensity at the vertex itself, one value
// per pyramid level.
std::array<double, 3> point_sample(const VolumePyramid& pyr,
                                   const Vec3& vertex);

// Volume on disk = JSON header (dims, dtype f32, byte_order little, affine)
// plus a sibling .raw payload of little-endian f32, x fastest.
Volume read_volume(const std::string& header_path);
void write_volume(const Volume& vol, const std::string& header_path);

namespace serial {
void cube_sample(const VolumePyramid& pyr, const Vec3* vertices, int count,
                 int K, CubeBatch& cubes);
}

}  // namespace pialnn
