#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pialnn/geometry.hpp"
#include "pialnn/nn.hpp"
#include "pialnn/volume.hpp"

namespace pialnn {

// Architecture of one deformation block (shared by all L blocks):
//   point feature : MLP on (normalized coordinates, normal), 6 -> 128 -> 128
//   local feature : cube conv (scales*K^3 -> 64) then MLP 64 -> 128
//   fusion head   : 256 -> 128 -> 64 -> 3 (displacement), linear final layer
// Leaky ReLU (slope below) between all hidden layers.
struct ModelConfig {
  int L = 3;
  int K = 5;
  int scales = 3;
  double lambda = 1.0;
  double slope = 0.2;
  std::string sampling = "cube";  // "cube" | "point" (point forces K = 1)

  static constexpr int kPointIn = 6;
  static constexpr int kPointHidden = 128;
  static constexpr int kPointOut = 128;
  static constexpr int kConvOut = 64;
  static constexpr int kLocalOut = 128;
  static constexpr int kFuse1 = 128;
  static constexpr int kFuse2 = 64;

  int effective_K() const { return sampling == "point" ? 1 : K; }
  int cube_width() const {
    const int k = effective_K();
    return scales * k * k * k;
  }
  int fusion_in() const { return kPointOut + kLocalOut; }
  void validate() const;
};

struct DeformationModel {
  ModelConfig config;
  // World-box used to normalize coordinates to [-1,1]^3 for the point MLP.
  Vec3 norm_lo{0, 0, 0};
  Vec3 norm_hi{1, 1, 1};
  ParamStore params;
  int64_t step = 0;         // optimizer steps taken
  int64_t epochs_done = 0;  // finished training epochs

  // Fresh parameters: hidden layers uniform +-sqrt(1/fan_in), fusion output
  // layer zeroed so the initial model is the identity deformation (pass
  // zero_final = false for a fully random model, e.g. in gradient checks).
  static DeformationModel create(const ModelConfig& config, uint64_t seed,
                                 bool zero_final = true);

  Tensor& t(int block, const std::string& leaf);
  const Tensor& t(int block, const std::string& leaf) const;

  void set_normalization_from(const Volume& vol);
};

// Cached per-block state from a forward pass, laid out batch-major; holds
// everything the backward pass and the gradient-check fast path need.
struct BlockBuffers {
  std::vector<Vec3> v_in, normals, v_out;
  std::vector<double> x0;            // N x 6
  CubeBatch cubes;                   // N x cube_width
  std::vector<double> z1, h1, z2, pf;  // point path
  std::vector<double> zc, hc, z3, lf;  // local path
  std::vector<double> z4, f1, z5, f2, dv;  // fusion head
  void resize(int n, const ModelConfig& cfg);
};

struct ModelWorkspace {
  std::vector<BlockBuffers> blocks;
  std::vector<Vec3> v_smooth;
  // backward scratch
  std::vector<Vec3> d_v;
  std::vector<double> d3, d_f2, d_z5, d_f1, d_z4, d_pf, d_lf, d_z3, d_hc,
      d_zc, d_cube, d_z2, d_h1, d_z1, d_x0;
  void resize(int n, const ModelConfig& cfg);
};

// Point-to-point MSE over all 3n coordinates: mean((pred - target)^2).
// grad_out (optional) receives 2*(pred - target)/(3n). Throws format_error
// on a vertex-count mismatch (connectivity violated).
double mse_loss(const Vec3* pred, const Vec3* target, int n, Vec3* grad_out);

// Runs all L blocks (recomputing normals from the deformed mesh before each)
// followed by one Laplacian smoothing pass; caches activations in ws. The
// result is ws.v_smooth; intermediate meshes are ws.blocks[l].v_out. Throws
// numeric_error on non-finite displacements.
// If freeze_normals_from is non-null, per-block normals are taken from that
// workspace instead of being recomputed. The finite-difference harness uses
// this so its probes difference exactly the function the backward pass
// differentiates (normals are constants there by design).
void model_forward(const DeformationModel& m, const std::vector<Vec3>& v0,
                   const MeshTopology& topo, const VolumePyramid& pyr,
                   ModelWorkspace& ws,
                   const ModelWorkspace* freeze_normals_from = nullptr);

// Backpropagates d(loss)/d(smoothed vertices) into parameter gradients
// (accumulated in m.params) and optionally d(loss)/d(input vertices).
// Gradient flows through vertex positions across blocks, including the
// trilinear cube-sampling path and the smoothing map; the per-block normal
// recomputation is treated as constant.
void model_backward(DeformationModel& m, const MeshTopology& topo,
                    const VolumePyramid& pyr, ModelWorkspace& ws,
                    const std::vector<Vec3>& d_smooth,
                    std::vector<Vec3>* d_v0);

// Forward pass without activation caching, processing vertices in chunks;
// memory stays proportional to the chunk size. Bitwise identical to
// model_forward (row partitioning never changes per-element math).
void model_infer(const DeformationModel& m, const std::vector<Vec3>& v0,
                 const MeshTopology& topo, const VolumePyramid& pyr,
                 std::vector<Vec3>& out, int chunk = 16384);

// ---- gradient-check support ----------------------------------------------

enum class BlockStage { kPoint, kLocal, kFusion };

// Stage of the tensor named "blockN/<leaf>/..".
BlockStage stage_of_leaf(const std::string& leaf);

// Loss recomputed after a parameter of `block` changed, reusing cached
// upstream state from `base`: only the affected stage of that block, the
// downstream blocks, the smoothing pass and the loss are re-evaluated.
// Recomputed values are written to `scratch`; `base` stays untouched.
double loss_with_block_suffix(const DeformationModel& m, int block,
                              BlockStage stage, const ModelWorkspace& base,
                              ModelWorkspace& scratch,
                              const MeshTopology& topo,
                              const VolumePyramid& pyr,
                              const std::vector<Vec3>& target);

// Full forward + loss into scratch buffers (used when inputs change).
double forward_loss(const DeformationModel& m, const std::vector<Vec3>& v0,
                    const MeshTopology& topo, const VolumePyramid& pyr,
                    ModelWorkspace& scratch, const std::vector<Vec3>& target,
                    const ModelWorkspace* freeze_normals_from = nullptr);

struct GradCheckReport {
  double max_rel_error = 0;
  size_t coords_checked = 0;
  size_t coords_skipped = 0;  // probes that straddle an activation kink or
                              // an interpolation cell boundary
  double seconds = 0;
};

// Central finite differences over every parameter coordinate and every input
// vertex coordinate against the analytic backward pass. eps is the probe
// step; relative error uses denominator max(floor, |numeric|). A probe whose
// +eps/-eps evaluations land on opposite sides of a leaky-ReLU kink or in
// different trilinear cells differences a point of non-differentiability;
// such coordinates are excluded and counted in coords_skipped.
GradCheckReport model_grad_check(const DeformationModel& m,
                                 const TriMesh& mesh, const Volume& vol,
                                 const std::vector<Vec3>& target, double eps,
                                 double floor = 1e-5);

}  // namespace pialnn
