#include "pialnn/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "pialnn/kernels.hpp"

namespace pialnn {

static_assert(sizeof(Vec3) == 3 * sizeof(double));

void ModelConfig::validate() const {
  if (L < 1) throw format_error("model: L must be >= 1");
  if (K < 1 || K % 2 == 0) throw format_error("model: K must be odd, >= 1");
  if (scales != 1 && scales != 3)
    throw format_error("model: scales must be 1 or 3");
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw format_error("model: lambda must be in [0,1]");
  if (!(slope > 0.0 && slope < 1.0))
    throw format_error("model: slope must be in (0,1)");
  if (sampling != "cube" && sampling != "point")
    throw format_error("model: sampling must be `cube` or `point`");
}

DeformationModel DeformationModel::create(const ModelConfig& config,
                                          uint64_t seed, bool zero_final) {
  config.validate();
  DeformationModel m;
  m.config = config;
  std::vector<LayerSpec> specs;
  const int width = config.cube_width();
  for (int l = 0; l < config.L; ++l) {
    const std::string p = "block" + std::to_string(l) + "/";
    specs.push_back({LayerSpec::kDense, p + "point1", ModelConfig::kPointIn,
                     ModelConfig::kPointHidden, config.slope});
    specs.push_back({LayerSpec::kDense, p + "point2", ModelConfig::kPointHidden,
                     ModelConfig::kPointOut, config.slope});
    specs.push_back({LayerSpec::kCubeConv, p + "conv", width,
                     ModelConfig::kConvOut, config.slope});
    specs.push_back({LayerSpec::kDense, p + "local", ModelConfig::kConvOut,
                     ModelConfig::kLocalOut, config.slope});
    specs.push_back({LayerSpec::kDense, p + "fuse1", config.fusion_in(),
                     ModelConfig::kFuse1, config.slope});
    specs.push_back({LayerSpec::kDense, p + "fuse2", ModelConfig::kFuse1,
                     ModelConfig::kFuse2, config.slope});
    specs.push_back({LayerSpec::kDense, p + "out", ModelConfig::kFuse2, 3,
                     config.slope});
  }
  m.params = init_params(specs, seed);
  // Zero displacement at initialization: the untrained model is the identity
  // deformation, which stabilizes the first training steps.
  if (zero_final) {
    for (int l = 0; l < config.L; ++l) {
      Tensor& W = m.t(l, "out/W");
      std::fill(W.value.begin(), W.value.end(), 0.0);
    }
  }
  return m;
}

Tensor& DeformationModel::t(int block, const std::string& leaf) {
  return params.at("block" + std::to_string(block) + "/" + leaf);
}

const Tensor& DeformationModel::t(int block, const std::string& leaf) const {
  return params.at("block" + std::to_string(block) + "/" + leaf);
}

namespace {

// Inverse of a 4x4 affine (last row 0 0 0 1): invert the 3x3 linear part and
// back-substitute the translation.
std::array<double, 16> invert_affine(const std::array<double, 16>& a) {
  const double m00 = a[0], m01 = a[1], m02 = a[2], tx = a[3];
  const double m10 = a[4], m11 = a[5], m12 = a[6], ty = a[7];
  const double m20 = a[8], m21 = a[9], m22 = a[10], tz = a[11];
  const double det = m00 * (m11 * m22 - m12 * m21) -
                     m01 * (m10 * m22 - m12 * m20) +
                     m02 * (m10 * m21 - m11 * m20);
  if (det == 0.0) throw numeric_error("affine is singular");
  const double i = 1.0 / det;
  std::array<double, 16> r{};
  r[0] = (m11 * m22 - m12 * m21) * i;
  r[1] = (m02 * m21 - m01 * m22) * i;
  r[2] = (m01 * m12 - m02 * m11) * i;
  r[4] = (m12 * m20 - m10 * m22) * i;
  r[5] = (m00 * m22 - m02 * m20) * i;
  r[6] = (m02 * m10 - m00 * m12) * i;
  r[8] = (m10 * m21 - m11 * m20) * i;
  r[9] = (m01 * m20 - m00 * m21) * i;
  r[10] = (m00 * m11 - m01 * m10) * i;
  r[3] = -(r[0] * tx + r[1] * ty + r[2] * tz);
  r[7] = -(r[4] * tx + r[5] * ty + r[6] * tz);
  r[11] = -(r[8] * tx + r[9] * ty + r[10] * tz);
  r[15] = 1.0;
  return r;
}

}  // namespace

void DeformationModel::set_normalization_from(const Volume& vol) {
  if (vol.identity_affine()) {
    norm_lo = {0, 0, 0};
    norm_hi = {(double)vol.dims[0] - 1, (double)vol.dims[1] - 1,
               (double)vol.dims[2] - 1};
  } else {
    const auto inv = invert_affine(vol.affine);
    Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (int c = 0; c < 8; ++c) {
      const Vec3 vx{(c & 1) ? (double)vol.dims[0] - 1 : 0.0,
                    (c & 2) ? (double)vol.dims[1] - 1 : 0.0,
                    (c & 4) ? (double)vol.dims[2] - 1 : 0.0};
      const Vec3 w{inv[0] * vx.x + inv[1] * vx.y + inv[2] * vx.z + inv[3],
                   inv[4] * vx.x + inv[5] * vx.y + inv[6] * vx.z + inv[7],
                   inv[8] * vx.x + inv[9] * vx.y + inv[10] * vx.z + inv[11]};
      for (int axis = 0; axis < 3; ++axis) {
        lo[axis] = std::min(lo[axis], w[axis]);
        hi[axis] = std::max(hi[axis], w[axis]);
      }
    }
    norm_lo = lo;
    norm_hi = hi;
  }
  for (int axis = 0; axis < 3; ++axis)
    if (!(norm_hi[axis] > norm_lo[axis]))
      throw numeric_error("degenerate normalization box");
}

void BlockBuffers::resize(int n, const ModelConfig& cfg) {
  v_in.resize(n);
  normals.resize(n);
  v_out.resize(n);
  x0.resize((size_t)n * ModelConfig::kPointIn);
  z1.resize((size_t)n * ModelConfig::kPointHidden);
  h1.resize((size_t)n * ModelConfig::kPointHidden);
  z2.resize((size_t)n * ModelConfig::kPointOut);
  pf.resize((size_t)n * ModelConfig::kPointOut);
  zc.resize((size_t)n * ModelConfig::kConvOut);
  hc.resize((size_t)n * ModelConfig::kConvOut);
  z3.resize((size_t)n * ModelConfig::kLocalOut);
  lf.resize((size_t)n * ModelConfig::kLocalOut);
  z4.resize((size_t)n * ModelConfig::kFuse1);
  f1.resize((size_t)n * ModelConfig::kFuse1);
  z5.resize((size_t)n * ModelConfig::kFuse2);
  f2.resize((size_t)n * ModelConfig::kFuse2);
  dv.resize((size_t)n * 3);
  cubes.K = cfg.effective_K();
  cubes.scales = cfg.scales;
  cubes.values.resize((size_t)n * cfg.cube_width());
}

void ModelWorkspace::resize(int n, const ModelConfig& cfg) {
  blocks.resize(cfg.L);
  for (auto& b : blocks) b.resize(n, cfg);
  v_smooth.resize(n);
  d_v.resize(n);
  d3.resize((size_t)n * 3);
  d_f2.resize((size_t)n * ModelConfig::kFuse2);
  d_z5.resize((size_t)n * ModelConfig::kFuse2);
  d_f1.resize((size_t)n * ModelConfig::kFuse1);
  d_z4.resize((size_t)n * ModelConfig::kFuse1);
  d_pf.resize((size_t)n * ModelConfig::kPointOut);
  d_lf.resize((size_t)n * ModelConfig::kLocalOut);
  d_z3.resize((size_t)n * ModelConfig::kLocalOut);
  d_hc.resize((size_t)n * ModelConfig::kConvOut);
  d_zc.resize((size_t)n * ModelConfig::kConvOut);
  d_cube.resize((size_t)n * cfg.cube_width());
  d_z2.resize((size_t)n * ModelConfig::kPointOut);
  d_h1.resize((size_t)n * ModelConfig::kPointHidden);
  d_z1.resize((size_t)n * ModelConfig::kPointHidden);
  d_x0.resize((size_t)n * ModelConfig::kPointIn);
}

double mse_loss(const Vec3* pred, const Vec3* target, int n, Vec3* grad_out) {
  if (n <= 0) throw format_error("mse_loss: empty input");
  const double inv = 1.0 / (3.0 * n);
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const Vec3 d = pred[i] - target[i];
    loss += dot(d, d);
    if (grad_out) grad_out[i] = d * (2.0 * inv);
  }
  return loss * inv;
}

namespace {

void assemble_x0(const Vec3* v, const Vec3* nrm, int n, const Vec3& lo,
                 const Vec3& hi, double* x0) {
  const Vec3 s{2.0 / (hi.x - lo.x), 2.0 / (hi.y - lo.y), 2.0 / (hi.z - lo.z)};
  for (int i = 0; i < n; ++i) {
    double* row = x0 + (size_t)i * 6;
    row[0] = (v[i].x - lo.x) * s.x - 1.0;
    row[1] = (v[i].y - lo.y) * s.y - 1.0;
    row[2] = (v[i].z - lo.z) * s.z - 1.0;
    row[3] = nrm[i].x;
    row[4] = nrm[i].y;
    row[5] = nrm[i].z;
  }
}

void run_point(const DeformationModel& m, int l, int n, const double* x0,
               BlockBuffers& b) {
  const double slope = m.config.slope;
  const Tensor& W1 = m.t(l, "point1/W");
  const Tensor& b1 = m.t(l, "point1/b");
  const Tensor& W2 = m.t(l, "point2/W");
  const Tensor& b2 = m.t(l, "point2/b");
  dense_forward(x0, n, ModelConfig::kPointIn, ModelConfig::kPointHidden,
                W1.value.data(), b1.value.data(), b.z1.data());
  leaky_relu_forward(b.z1.data(), b.h1.data(), b.z1.size(), slope);
  dense_forward(b.h1.data(), n, ModelConfig::kPointHidden,
                ModelConfig::kPointOut, W2.value.data(), b2.value.data(),
                b.z2.data());
  leaky_relu_forward(b.z2.data(), b.pf.data(), b.z2.size(), slope);
}

void run_local(const DeformationModel& m, int l, int n, const double* cubes,
               BlockBuffers& b) {
  const double slope = m.config.slope;
  const int width = m.config.cube_width();
  const Tensor& Wc = m.t(l, "conv/W");  // (width x kConvOut)
  const Tensor& bc = m.t(l, "conv/b");
  const Tensor& W3 = m.t(l, "local/W");
  const Tensor& b3 = m.t(l, "local/b");
  dense_forward(cubes, n, width, ModelConfig::kConvOut, Wc.value.data(),
                bc.value.data(), b.zc.data());
  leaky_relu_forward(b.zc.data(), b.hc.data(), b.zc.size(), slope);
  dense_forward(b.hc.data(), n, ModelConfig::kConvOut, ModelConfig::kLocalOut,
                W3.value.data(), b3.value.data(), b.z3.data());
  leaky_relu_forward(b.z3.data(), b.lf.data(), b.z3.size(), slope);
}

void run_fusion(const DeformationModel& m, int l, int n, const double* pf,
                const double* lf, const Vec3* v_in, BlockBuffers& b) {
  const double slope = m.config.slope;
  const Tensor& W4 = m.t(l, "fuse1/W");  // (256 x 128); point rows first
  const Tensor& b4 = m.t(l, "fuse1/b");
  const Tensor& W5 = m.t(l, "fuse2/W");
  const Tensor& b5 = m.t(l, "fuse2/b");
  const Tensor& W6 = m.t(l, "out/W");
  const Tensor& b6 = m.t(l, "out/b");
  constexpr int P = ModelConfig::kPointOut;
  constexpr int F1 = ModelConfig::kFuse1;
  // The concatenated input never materializes: z4 = [pf lf] * W4 is split as
  // pf * W4[:P] + lf * W4[P:], which accumulates in the same k order.
  kernels::gemm_nn(pf, P, W4.value.data(), F1, b4.value.data(), b.z4.data(),
                   F1, n, P, F1);
  kernels::gemm_nn_acc(lf, ModelConfig::kLocalOut,
                       W4.value.data() + (size_t)P * F1, F1, b.z4.data(), F1,
                       n, ModelConfig::kLocalOut, F1);
  leaky_relu_forward(b.z4.data(), b.f1.data(), b.z4.size(), slope);
  dense_forward(b.f1.data(), n, F1, ModelConfig::kFuse2, W5.value.data(),
                b5.value.data(), b.z5.data());
  leaky_relu_forward(b.z5.data(), b.f2.data(), b.z5.size(), slope);
  dense_forward(b.f2.data(), n, ModelConfig::kFuse2, 3, W6.value.data(),
                b6.value.data(), b.dv.data());
  for (int i = 0; i < n; ++i) {
    const Vec3 d{b.dv[3 * i], b.dv[3 * i + 1], b.dv[3 * i + 2]};
    if (!finite(d))
      throw numeric_error("non-finite displacement in block " +
                          std::to_string(l));
    b.v_out[i] = v_in[i] + d;
  }
}

void run_block_full(const DeformationModel& m, int l,
                    const MeshTopology& topo, const VolumePyramid& pyr,
                    BlockBuffers& b, const Vec3* frozen_normals = nullptr) {
  const int n = (int)b.v_in.size();
  if (frozen_normals)
    b.normals.assign(frozen_normals, frozen_normals + n);
  else
    compute_vertex_normals(b.v_in, topo.faces, topo.incidence, b.normals);
  assemble_x0(b.v_in.data(), b.normals.data(), n, m.norm_lo, m.norm_hi,
              b.x0.data());
  cube_sample(pyr, b.v_in.data(), n, m.config.effective_K(), b.cubes);
  run_point(m, l, n, b.x0.data(), b);
  run_local(m, l, n, b.cubes.values.data(), b);
  run_fusion(m, l, n, b.pf.data(), b.lf.data(), b.v_in.data(), b);
}

}  // namespace

void model_forward(const DeformationModel& m, const std::vector<Vec3>& v0,
                   const MeshTopology& topo, const VolumePyramid& pyr,
                   ModelWorkspace& ws,
                   const ModelWorkspace* freeze_normals_from) {
  const int n = (int)v0.size();
  ws.resize(n, m.config);
  const std::vector<Vec3>* cur = &v0;
  for (int l = 0; l < m.config.L; ++l) {
    BlockBuffers& b = ws.blocks[l];
    b.v_in = *cur;
    run_block_full(m, l, topo, pyr, b,
                   freeze_normals_from
                       ? freeze_normals_from->blocks[l].normals.data()
                       : nullptr);
    cur = &b.v_out;
  }
  laplacian_smooth(cur->data(), topo.adjacency, m.config.lambda,
                   ws.v_smooth.data());
}

void model_backward(DeformationModel& m, const MeshTopology& topo,
                    const VolumePyramid& pyr, ModelWorkspace& ws,
                    const std::vector<Vec3>& d_smooth,
                    std::vector<Vec3>* d_v0) {
  const ModelConfig& cfg = m.config;
  const int n = (int)d_smooth.size();
  const double slope = cfg.slope;
  constexpr int P = ModelConfig::kPointOut;
  constexpr int LW = ModelConfig::kLocalOut;
  constexpr int F1 = ModelConfig::kFuse1;
  constexpr int F2 = ModelConfig::kFuse2;
  constexpr int H = ModelConfig::kPointHidden;
  constexpr int C = ModelConfig::kConvOut;
  const int width = cfg.cube_width();

  laplacian_smooth_transpose(d_smooth.data(), topo.adjacency, cfg.lambda,
                             ws.d_v.data());

  for (int l = cfg.L - 1; l >= 0; --l) {
    BlockBuffers& b = ws.blocks[l];
    for (int i = 0; i < n; ++i) {
      ws.d3[3 * i] = ws.d_v[i].x;
      ws.d3[3 * i + 1] = ws.d_v[i].y;
      ws.d3[3 * i + 2] = ws.d_v[i].z;
    }

    // fusion head
    Tensor& W6 = m.t(l, "out/W");
    dense_backward(b.f2.data(), ws.d3.data(), n, F2, 3, W6.value.data(),
                   ws.d_f2.data(), m.t(l, "out/W").grad.data(),
                   m.t(l, "out/b").grad.data());
    leaky_relu_backward(b.z5.data(), ws.d_f2.data(), ws.d_z5.data(),
                        b.z5.size(), slope);
    Tensor& W5 = m.t(l, "fuse2/W");
    dense_backward(b.f1.data(), ws.d_z5.data(), n, F1, F2, W5.value.data(),
                   ws.d_f1.data(), W5.grad.data(),
                   m.t(l, "fuse2/b").grad.data());
    leaky_relu_backward(b.z4.data(), ws.d_f1.data(), ws.d_z4.data(),
                        b.z4.size(), slope);
    Tensor& W4 = m.t(l, "fuse1/W");
    kernels::gemm_tn_acc(b.pf.data(), P, ws.d_z4.data(), F1, W4.grad.data(),
                         F1, n, P, F1);
    kernels::gemm_tn_acc(b.lf.data(), LW, ws.d_z4.data(), F1,
                         W4.grad.data() + (size_t)P * F1, F1, n, LW, F1);
    kernels::colsum_acc(ws.d_z4.data(), F1, m.t(l, "fuse1/b").grad.data(), n,
                        F1);
    kernels::gemm_nt(ws.d_z4.data(), F1, W4.value.data(), F1, nullptr,
                     ws.d_pf.data(), P, n, F1, P);
    kernels::gemm_nt(ws.d_z4.data(), F1, W4.value.data() + (size_t)P * F1, F1,
                     nullptr, ws.d_lf.data(), LW, n, F1, LW);

    // local path
    leaky_relu_backward(b.z3.data(), ws.d_lf.data(), ws.d_z3.data(),
                        b.z3.size(), slope);
    Tensor& W3 = m.t(l, "local/W");
    dense_backward(b.hc.data(), ws.d_z3.data(), n, C, LW, W3.value.data(),
                   ws.d_hc.data(), W3.grad.data(),
                   m.t(l, "local/b").grad.data());
    leaky_relu_backward(b.zc.data(), ws.d_hc.data(), ws.d_zc.data(),
                        b.zc.size(), slope);
    Tensor& Wc = m.t(l, "conv/W");
    kernels::gemm_tn_acc(b.cubes.values.data(), width, ws.d_zc.data(), C,
                         Wc.grad.data(), C, n, width, C);
    kernels::colsum_acc(ws.d_zc.data(), C, m.t(l, "conv/b").grad.data(), n, C);
    kernels::gemm_nt(ws.d_zc.data(), C, Wc.value.data(), C, nullptr,
                     ws.d_cube.data(), width, n, C, width);
    cube_sample_backward(pyr, b.v_in.data(), n, cfg.effective_K(), cfg.scales,
                         ws.d_cube.data(), ws.d_v.data());

    // point path
    leaky_relu_backward(b.z2.data(), ws.d_pf.data(), ws.d_z2.data(),
                        b.z2.size(), slope);
    Tensor& W2 = m.t(l, "point2/W");
    dense_backward(b.h1.data(), ws.d_z2.data(), n, H, P, W2.value.data(),
                   ws.d_h1.data(), W2.grad.data(),
                   m.t(l, "point2/b").grad.data());
    leaky_relu_backward(b.z1.data(), ws.d_h1.data(), ws.d_z1.data(),
                        b.z1.size(), slope);
    Tensor& W1 = m.t(l, "point1/W");
    dense_backward(b.x0.data(), ws.d_z1.data(), n, ModelConfig::kPointIn, H,
                   W1.value.data(), ws.d_x0.data(), W1.grad.data(),
                   m.t(l, "point1/b").grad.data());
    const Vec3 s{2.0 / (m.norm_hi.x - m.norm_lo.x),
                 2.0 / (m.norm_hi.y - m.norm_lo.y),
                 2.0 / (m.norm_hi.z - m.norm_lo.z)};
    for (int i = 0; i < n; ++i) {
      // Coordinate slots chain through the normalization; the normal slots
      // are truncated (normals are treated as constants).
      ws.d_v[i].x += ws.d_x0[6 * i] * s.x;
      ws.d_v[i].y += ws.d_x0[6 * i + 1] * s.y;
      ws.d_v[i].z += ws.d_x0[6 * i + 2] * s.z;
    }
  }
  if (d_v0) *d_v0 = ws.d_v;
}

void model_infer(const DeformationModel& m, const std::vector<Vec3>& v0,
                 const MeshTopology& topo, const VolumePyramid& pyr,
                 std::vector<Vec3>& out, int chunk) {
  const int n = (int)v0.size();
  std::vector<Vec3> cur = v0, normals(n);
  std::vector<Vec3> next(n);
  BlockBuffers buf;
  const int cn = std::min(n, chunk);
  buf.resize(cn, m.config);
  for (int l = 0; l < m.config.L; ++l) {
    compute_vertex_normals(cur, topo.faces, topo.incidence, normals);
    for (int at = 0; at < n; at += cn) {
      const int len = std::min(cn, n - at);
      assemble_x0(cur.data() + at, normals.data() + at, len, m.norm_lo,
                  m.norm_hi, buf.x0.data());
      cube_sample(pyr, cur.data() + at, len, m.config.effective_K(),
                  buf.cubes);
      run_point(m, l, len, buf.x0.data(), buf);
      run_local(m, l, len, buf.cubes.values.data(), buf);
      run_fusion(m, l, len, buf.pf.data(), buf.lf.data(), cur.data() + at,
                 buf);
      std::copy(buf.v_out.begin(), buf.v_out.begin() + len, next.begin() + at);
    }
    std::swap(cur, next);
  }
  out.resize(n);
  laplacian_smooth(cur.data(), topo.adjacency, m.config.lambda, out.data());
}

BlockStage stage_of_leaf(const std::string& leaf) {
  if (leaf.rfind("point", 0) == 0) return BlockStage::kPoint;
  if (leaf.rfind("conv", 0) == 0 || leaf.rfind("local", 0) == 0)
    return BlockStage::kLocal;
  return BlockStage::kFusion;
}

double loss_with_block_suffix(const DeformationModel& m, int block,
                              BlockStage stage, const ModelWorkspace& base,
                              ModelWorkspace& scratch, const MeshTopology& topo,
                              const VolumePyramid& pyr,
                              const std::vector<Vec3>& target) {
  const int n = (int)target.size();
  scratch.resize(n, m.config);
  const BlockBuffers& bb = base.blocks[block];
  BlockBuffers& sb = scratch.blocks[block];

  const double* pf = bb.pf.data();
  const double* lf = bb.lf.data();
  if (stage == BlockStage::kPoint) {
    run_point(m, block, n, bb.x0.data(), sb);
    pf = sb.pf.data();
  } else if (stage == BlockStage::kLocal) {
    run_local(m, block, n, bb.cubes.values.data(), sb);
    lf = sb.lf.data();
  }
  run_fusion(m, block, n, pf, lf, bb.v_in.data(), sb);

  const std::vector<Vec3>* cur = &sb.v_out;
  for (int l = block + 1; l < m.config.L; ++l) {
    BlockBuffers& db = scratch.blocks[l];
    db.v_in = *cur;
    run_block_full(m, l, topo, pyr, db, base.blocks[l].normals.data());
    cur = &db.v_out;
  }
  laplacian_smooth(cur->data(), topo.adjacency, m.config.lambda,
                   scratch.v_smooth.data());
  return mse_loss(scratch.v_smooth.data(), target.data(), n, nullptr);
}

double forward_loss(const DeformationModel& m, const std::vector<Vec3>& v0,
                    const MeshTopology& topo, const VolumePyramid& pyr,
                    ModelWorkspace& scratch, const std::vector<Vec3>& target,
                    const ModelWorkspace* freeze_normals_from) {
  model_forward(m, v0, topo, pyr, scratch, freeze_normals_from);
  return mse_loss(scratch.v_smooth.data(), target.data(), (int)v0.size(),
                  nullptr);
}

namespace {

bool signs_differ(const std::vector<double>& a, const std::vector<double>& b) {
  for (size_t i = 0; i < a.size(); ++i)
    if ((a[i] >= 0.0) != (b[i] >= 0.0)) return true;
  return false;
}

// The trilinear cell pattern of a vertex is fixed by the per-level floor of
// its base coordinate (integer cube offsets preserve it).
bool cells_differ(const Vec3& va, const Vec3& vb, const VolumePyramid& pyr) {
  const Vec3 ga = pyr.levels[0].world_to_voxel(va);
  const Vec3 gb = pyr.levels[0].world_to_voxel(vb);
  for (int c = 0; c < (int)pyr.levels.size(); ++c) {
    const double inv = 1.0 / (double)(1 << c);
    for (int axis = 0; axis < 3; ++axis)
      if (std::floor(ga[axis] * inv) != std::floor(gb[axis] * inv))
        return true;
  }
  return false;
}

// Input probes recompute everything, block 0 cube cells included.
bool probe_crosses_kink_full(const ModelWorkspace& p, const ModelWorkspace& q,
                             const std::vector<Vec3>& v0p,
                             const std::vector<Vec3>& v0q, int L,
                             const VolumePyramid& pyr) {
  for (size_t i = 0; i < v0p.size(); ++i)
    if (cells_differ(v0p[i], v0q[i], pyr)) return true;
  for (int l = 0; l < L; ++l) {
    const BlockBuffers& dp = p.blocks[l];
    const BlockBuffers& dq = q.blocks[l];
    if (l > 0)
      for (size_t i = 0; i < dp.v_in.size(); ++i)
        if (cells_differ(dp.v_in[i], dq.v_in[i], pyr)) return true;
    if (signs_differ(dp.z1, dq.z1) || signs_differ(dp.z2, dq.z2) ||
        signs_differ(dp.zc, dq.zc) || signs_differ(dp.z3, dq.z3) ||
        signs_differ(dp.z4, dq.z4) || signs_differ(dp.z5, dq.z5))
      return true;
  }
  return false;
}

}  // namespace

namespace {

enum Layer { kL_point1, kL_point2, kL_conv, kL_local, kL_fuse1, kL_fuse2, kL_out };

Layer layer_of_leaf(const std::string& leaf) {
  if (leaf.rfind("point1", 0) == 0) return kL_point1;
  if (leaf.rfind("point2", 0) == 0) return kL_point2;
  if (leaf.rfind("conv", 0) == 0) return kL_conv;
  if (leaf.rfind("local", 0) == 0) return kL_local;
  if (leaf.rfind("fuse1", 0) == 0) return kL_fuse1;
  if (leaf.rfind("fuse2", 0) == 0) return kL_fuse2;
  return kL_out;
}

void dup_rows(const std::vector<double>& src, std::vector<double>& dst,
              size_t count) {
  std::copy(src.begin(), src.begin() + count, dst.begin());
  std::copy(src.begin(), src.begin() + count, dst.begin() + count);
}

bool halves_sign_differ(const std::vector<double>& z, size_t half) {
  for (size_t i = 0; i < half; ++i)
    if ((z[i] >= 0.0) != (z[half + i] >= 0.0)) return true;
  return false;
}

// Evaluates the +eps and -eps losses of one parameter probe in a single
// pass: only the perturbed layer runs per side; every later layer and all
// downstream blocks run on the two sides stacked as one 2n-row batch, which
// streams each weight matrix once. Row partitioning does not change
// per-element arithmetic, so the results are bitwise those of two separate
// evaluations. Sets *kink when the sides straddle an activation kink or an
// interpolation cell boundary.
std::pair<double, double> loss_pair_perturbed(
    DeformationModel& m, int block, Layer layer, double* slot, double eps,
    const ModelWorkspace& base, ModelWorkspace& ws2,
    const MeshTopology& topo, const VolumePyramid& pyr,
    const std::vector<Vec3>& target,
    const std::vector<std::vector<Vec3>>& frozen2, bool* kink) {
  const ModelConfig& cfg = m.config;
  const int n = (int)target.size();
  const int n2 = 2 * n;
  constexpr int PH = ModelConfig::kPointHidden;
  constexpr int P = ModelConfig::kPointOut;
  constexpr int C = ModelConfig::kConvOut;
  constexpr int LW = ModelConfig::kLocalOut;
  constexpr int F1 = ModelConfig::kFuse1;
  constexpr int F2 = ModelConfig::kFuse2;
  const int width = cfg.cube_width();
  const double slope = cfg.slope;
  ws2.resize(n2, cfg);
  const BlockBuffers& bb = base.blocks[block];
  BlockBuffers& sb = ws2.blocks[block];
  const double saved = *slot;

  // Runs `fn(side)` with the slot at +eps then -eps; fn writes rows
  // [side*n, side*n + n) of the first recomputed array.
  auto per_side = [&](auto&& fn) {
    *slot = saved + eps;
    fn(0);
    *slot = saved - eps;
    fn(1);
    *slot = saved;
  };

  bool probe_kink = false;
  const Tensor& W2t = m.t(block, "point2/W");
  const Tensor& b2t = m.t(block, "point2/b");
  const Tensor& W3t = m.t(block, "local/W");
  const Tensor& b3t = m.t(block, "local/b");
  const Tensor& W4t = m.t(block, "fuse1/W");
  const Tensor& b4t = m.t(block, "fuse1/b");
  const Tensor& W5t = m.t(block, "fuse2/W");
  const Tensor& b5t = m.t(block, "fuse2/b");
  const Tensor& W6t = m.t(block, "out/W");
  const Tensor& b6t = m.t(block, "out/b");

  // Point path (only when the probe lives in it).
  if (layer == kL_point1) {
    const Tensor& W1t = m.t(block, "point1/W");
    const Tensor& b1t = m.t(block, "point1/b");
    per_side([&](int side) {
      kernels::gemm_nn(bb.x0.data(), 6, W1t.value.data(), PH,
                       b1t.value.data(), sb.z1.data() + (size_t)side * n * PH,
                       PH, n, 6, PH);
    });
    probe_kink |= halves_sign_differ(sb.z1, (size_t)n * PH);
    kernels::leaky_relu(sb.z1.data(), sb.h1.data(), (size_t)n2 * PH, slope);
  }
  if (layer == kL_point2) {
    per_side([&](int side) {
      kernels::gemm_nn(bb.h1.data(), PH, W2t.value.data(), P,
                       b2t.value.data(), sb.z2.data() + (size_t)side * n * P,
                       P, n, PH, P);
    });
  } else if (layer == kL_point1) {
    kernels::gemm_nn(sb.h1.data(), PH, W2t.value.data(), P, b2t.value.data(),
                     sb.z2.data(), P, n2, PH, P);
  }
  const bool point_changed = layer <= kL_point2;
  if (point_changed) {
    probe_kink |= halves_sign_differ(sb.z2, (size_t)n * P);
    kernels::leaky_relu(sb.z2.data(), sb.pf.data(), (size_t)n2 * P, slope);
  }

  // Local path.
  if (layer == kL_conv) {
    const Tensor& Wct = m.t(block, "conv/W");
    const Tensor& bct = m.t(block, "conv/b");
    per_side([&](int side) {
      kernels::gemm_nn(bb.cubes.values.data(), width, Wct.value.data(), C,
                       bct.value.data(), sb.zc.data() + (size_t)side * n * C,
                       C, n, width, C);
    });
    probe_kink |= halves_sign_differ(sb.zc, (size_t)n * C);
    kernels::leaky_relu(sb.zc.data(), sb.hc.data(), (size_t)n2 * C, slope);
  }
  if (layer == kL_local) {
    per_side([&](int side) {
      kernels::gemm_nn(bb.hc.data(), C, W3t.value.data(), LW, b3t.value.data(),
                       sb.z3.data() + (size_t)side * n * LW, LW, n, C, LW);
    });
  } else if (layer == kL_conv) {
    kernels::gemm_nn(sb.hc.data(), C, W3t.value.data(), LW, b3t.value.data(),
                     sb.z3.data(), LW, n2, C, LW);
  }
  const bool local_changed = layer == kL_conv || layer == kL_local;
  if (local_changed) {
    probe_kink |= halves_sign_differ(sb.z3, (size_t)n * LW);
    kernels::leaky_relu(sb.z3.data(), sb.lf.data(), (size_t)n2 * LW, slope);
  }

  // Fusion head on stacked rows. Layers upstream of the probe are taken
  // from the base forward (their halves are identical); everything from the
  // perturbed layer onward is recomputed.
  if (layer <= kL_fuse1) {
    if (point_changed) {
      // pf already stacked in sb.pf
    } else {
      dup_rows(bb.pf, sb.pf, (size_t)n * P);
    }
    if (!local_changed) dup_rows(bb.lf, sb.lf, (size_t)n * LW);
    const double* pf2 = sb.pf.data();
    const double* lf2 = sb.lf.data();
    if (layer == kL_fuse1) {
      per_side([&](int side) {
        double* z4s = sb.z4.data() + (size_t)side * n * F1;
        kernels::gemm_nn(pf2, P, W4t.value.data(), F1, b4t.value.data(), z4s,
                         F1, n, P, F1);
        kernels::gemm_nn_acc(lf2, LW, W4t.value.data() + (size_t)P * F1, F1,
                             z4s, F1, n, LW, F1);
      });
    } else {
      kernels::gemm_nn(pf2, P, W4t.value.data(), F1, b4t.value.data(),
                       sb.z4.data(), F1, n2, P, F1);
      kernels::gemm_nn_acc(lf2, LW, W4t.value.data() + (size_t)P * F1, F1,
                           sb.z4.data(), F1, n2, LW, F1);
    }
    probe_kink |= halves_sign_differ(sb.z4, (size_t)n * F1);
    kernels::leaky_relu(sb.z4.data(), sb.f1.data(), (size_t)n2 * F1, slope);
  } else {
    dup_rows(bb.f1, sb.f1, (size_t)n * F1);
  }

  if (layer <= kL_fuse2) {
    if (layer == kL_fuse2) {
      per_side([&](int side) {
        kernels::gemm_nn(sb.f1.data() + (size_t)side * n * F1, F1,
                         W5t.value.data(), F2, b5t.value.data(),
                         sb.z5.data() + (size_t)side * n * F2, F2, n, F1, F2);
      });
    } else {
      kernels::gemm_nn(sb.f1.data(), F1, W5t.value.data(), F2,
                       b5t.value.data(), sb.z5.data(), F2, n2, F1, F2);
    }
    probe_kink |= halves_sign_differ(sb.z5, (size_t)n * F2);
    kernels::leaky_relu(sb.z5.data(), sb.f2.data(), (size_t)n2 * F2, slope);
  } else {
    dup_rows(bb.f2, sb.f2, (size_t)n * F2);
  }

  if (layer == kL_out) {
    per_side([&](int side) {
      kernels::gemm_nn(sb.f2.data() + (size_t)side * n * F2, F2,
                       W6t.value.data(), 3, b6t.value.data(),
                       sb.dv.data() + (size_t)side * n * 3, 3, n, F2, 3);
    });
  } else {
    kernels::gemm_nn(sb.f2.data(), F2, W6t.value.data(), 3, b6t.value.data(),
                     sb.dv.data(), 3, n2, F2, 3);
  }

  for (int i = 0; i < n2; ++i) {
    const Vec3 d{sb.dv[3 * i], sb.dv[3 * i + 1], sb.dv[3 * i + 2]};
    sb.v_out[i] = bb.v_in[i % n] + d;
  }

  // Downstream blocks on the stacked batch, normals frozen at base values.
  const std::vector<Vec3>* cur = &sb.v_out;
  for (int l = block + 1; l < cfg.L; ++l) {
    BlockBuffers& db = ws2.blocks[l];
    db.v_in = *cur;
    for (int i = 0; i < n && !probe_kink; ++i)
      probe_kink |= cells_differ(db.v_in[i], db.v_in[n + i], pyr);
    run_block_full(m, l, topo, pyr, db, frozen2[l].data());
    probe_kink |= halves_sign_differ(db.z1, (size_t)n * PH) ||
                  halves_sign_differ(db.z2, (size_t)n * P) ||
                  halves_sign_differ(db.zc, (size_t)n * C) ||
                  halves_sign_differ(db.z3, (size_t)n * LW) ||
                  halves_sign_differ(db.z4, (size_t)n * F1) ||
                  halves_sign_differ(db.z5, (size_t)n * F2);
    cur = &db.v_out;
  }

  const Vec3* vp = cur->data();
  laplacian_smooth(vp, topo.adjacency, cfg.lambda, ws2.v_smooth.data());
  laplacian_smooth(vp + n, topo.adjacency, cfg.lambda,
                   ws2.v_smooth.data() + n);
  const double fp = mse_loss(ws2.v_smooth.data(), target.data(), n, nullptr);
  const double fm =
      mse_loss(ws2.v_smooth.data() + n, target.data(), n, nullptr);
  *kink = probe_kink;
  return {fp, fm};
}

}  // namespace

GradCheckReport model_grad_check(const DeformationModel& m,
                                 const TriMesh& mesh, const Volume& vol,
                                 const std::vector<Vec3>& target, double eps,
                                 double floor) {
  const auto t_start = std::chrono::steady_clock::now();
  const MeshTopology topo = MeshTopology::build(mesh);
  const VolumePyramid pyr = build_pyramid(vol, m.config.scales);
  const int n = (int)mesh.vertices.size();

  // Analytic gradients once.
  DeformationModel mm = m;
  mm.params.zero_grads();
  ModelWorkspace base;
  model_forward(mm, mesh.vertices, topo, pyr, base);
  std::vector<Vec3> d_smooth(n), d_v0(n);
  mse_loss(base.v_smooth.data(), target.data(), n, d_smooth.data());
  model_backward(mm, topo, pyr, base, d_smooth, &d_v0);

  // Per-tensor block/layer descriptors and coordinate offsets.
  const size_t ntensors = mm.params.tensors.size();
  std::vector<int> blk(ntensors);
  std::vector<Layer> lyr(ntensors);
  std::vector<size_t> offset(ntensors + 1, 0);
  for (size_t t = 0; t < ntensors; ++t) {
    const std::string& name = mm.params.tensors[t].name;
    const size_t slash = name.find('/');
    blk[t] = std::stoi(name.substr(5, slash - 5));  // "blockN/..."
    lyr[t] = layer_of_leaf(name.substr(slash + 1));
    offset[t + 1] = offset[t] + mm.params.tensors[t].size();
  }
  const size_t param_coords = offset[ntensors];
  const size_t total = param_coords + (size_t)n * 3;

  std::vector<std::vector<Vec3>> frozen2(m.config.L);
  for (int l = 0; l < m.config.L; ++l) {
    frozen2[l] = base.blocks[l].normals;
    frozen2[l].insert(frozen2[l].end(), base.blocks[l].normals.begin(),
                      base.blocks[l].normals.end());
  }

  double worst = 0.0;
  long skipped = 0;
#pragma omp parallel reduction(max : worst) reduction(+ : skipped)
  {
    DeformationModel local = m;
    ModelWorkspace ws2, sp, sq;
    std::vector<Vec3> v_plus = mesh.vertices, v_minus = mesh.vertices;
    size_t t_hint = 0;
#pragma omp for schedule(dynamic, 64)
    for (long idx = 0; idx < (long)total; ++idx) {
      double numeric, analytic;
      bool kink = false;
      if ((size_t)idx < param_coords) {
        // Locate the owning tensor (indices arrive mostly in order).
        size_t t = t_hint;
        while ((size_t)idx >= offset[t + 1]) ++t;
        while ((size_t)idx < offset[t]) --t;
        t_hint = t;
        const size_t i = idx - offset[t];
        const auto [fp, fm] = loss_pair_perturbed(
            local, blk[t], lyr[t], &local.params.tensors[t].value[i], eps,
            base, ws2, topo, pyr, target, frozen2, &kink);
        numeric = (fp - fm) / (2 * eps);
        analytic = mm.params.tensors[t].grad[i];
      } else {
        const size_t i = idx - param_coords;
        const size_t vi = i / 3;
        const int axis = (int)(i % 3);
        const double saved = v_plus[vi][axis];
        v_plus[vi][axis] = saved + eps;
        v_minus[vi][axis] = saved - eps;
        const double fp =
            forward_loss(local, v_plus, topo, pyr, sp, target, &base);
        const double fm =
            forward_loss(local, v_minus, topo, pyr, sq, target, &base);
        kink =
            probe_crosses_kink_full(sp, sq, v_plus, v_minus, m.config.L, pyr);
        v_plus[vi][axis] = saved;
        v_minus[vi][axis] = saved;
        numeric = (fp - fm) / (2 * eps);
        analytic = d_v0[vi][axis];
      }
      if (kink) {
        ++skipped;
        continue;
      }
      const double rel =
          std::abs(analytic - numeric) / std::max(floor, std::abs(numeric));
      if (rel > worst) worst = rel;
    }
  }

  GradCheckReport report;
  report.max_rel_error = worst;
  report.coords_checked = total - (size_t)skipped;
  report.coords_skipped = (size_t)skipped;
  report.seconds = std::chrono::duration<double>(
                       std::chrono::steady_clock::now() - t_start)
                       .count();
  return report;
}

}  // namespace pialnn
