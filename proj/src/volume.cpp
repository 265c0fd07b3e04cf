#include "pialnn/volume.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

namespace pialnn {

bool Volume::identity_affine() const {
  static constexpr std::array<double, 16> id{1, 0, 0, 0, 0, 1, 0, 0,
                                             0, 0, 1, 0, 0, 0, 0, 1};
  return affine == id;
}

Vec3 Volume::world_to_voxel(const Vec3& p) const {
  const auto& a = affine;
  return {a[0] * p.x + a[1] * p.y + a[2] * p.z + a[3],
          a[4] * p.x + a[5] * p.y + a[6] * p.z + a[7],
          a[8] * p.x + a[9] * p.y + a[10] * p.z + a[11]};
}

Volume downsample2x(const Volume& vol) {
  Volume out;
  for (int a = 0; a < 3; ++a) out.dims[a] = (vol.dims[a] + 1) / 2;
  out.affine = vol.affine;
  out.data.resize(out.voxel_count());
  const int32_t nx = vol.dims[0], ny = vol.dims[1], nz = vol.dims[2];
#pragma omp parallel for schedule(static) if (out.voxel_count() >= 1 << 15)
  for (int z = 0; z < out.dims[2]; ++z) {
    for (int y = 0; y < out.dims[1]; ++y) {
      for (int x = 0; x < out.dims[0]; ++x) {
        double sum = 0;
        int n = 0;
        for (int dz = 0; dz < 2; ++dz) {
          const int sz = 2 * z + dz;
          if (sz >= nz) continue;
          for (int dy = 0; dy < 2; ++dy) {
            const int sy = 2 * y + dy;
            if (sy >= ny) continue;
            for (int dx = 0; dx < 2; ++dx) {
              const int sx = 2 * x + dx;
              if (sx >= nx) continue;
              sum += vol.at(sx, sy, sz);
              ++n;
            }
          }
        }
        out.at(x, y, z) = (float)(sum / n);
      }
    }
  }
  return out;
}

VolumePyramid build_pyramid(const Volume& vol, int scales) {
  if (vol.dims[0] < 4 || vol.dims[1] < 4 || vol.dims[2] < 4)
    throw format_error("build_pyramid: all dims must be >= 4");
  if (scales < 1 || scales > 3)
    throw format_error("build_pyramid: scales must be 1..3");
  VolumePyramid pyr;
  pyr.levels.push_back(vol);
  for (int s = 1; s < scales; ++s)
    pyr.levels.push_back(downsample2x(pyr.levels.back()));
  return pyr;
}

namespace {

struct Cell {
  bool inside = false;
  size_t base = 0;     // index of the (x0,y0,z0) corner
  size_t sx, sy, sz;   // strides to the +1 corner per axis (0 at far edge)
  double fx, fy, fz;
};

inline Cell locate(const Volume& vol, const Vec3& p) {
  Cell c;
  const double mx = vol.dims[0] - 1, my = vol.dims[1] - 1,
               mz = vol.dims[2] - 1;
  if (!(p.x >= 0.0 && p.x <= mx && p.y >= 0.0 && p.y <= my && p.z >= 0.0 &&
        p.z <= mz))
    return c;  // outside (or NaN): zero
  c.inside = true;
  double ix = std::floor(p.x), iy = std::floor(p.y), iz = std::floor(p.z);
  c.fx = p.x - ix;
  c.fy = p.y - iy;
  c.fz = p.z - iz;
  int x0 = (int)ix, y0 = (int)iy, z0 = (int)iz;
  c.sx = x0 < mx ? 1 : 0;
  c.sy = y0 < my ? (size_t)vol.dims[0] : 0;
  c.sz = z0 < mz ? (size_t)vol.dims[0] * vol.dims[1] : 0;
  c.base = (size_t)x0 + vol.dims[0] * ((size_t)y0 + (size_t)vol.dims[1] * z0);
  return c;
}

}  // namespace

double trilinear_sample(const Volume& vol, const Vec3& p) {
  const Cell c = locate(vol, p);
  if (!c.inside) return 0.0;
  const float* d = vol.data.data();
  const double v000 = d[c.base], v100 = d[c.base + c.sx];
  const double v010 = d[c.base + c.sy], v110 = d[c.base + c.sy + c.sx];
  const double v001 = d[c.base + c.sz], v101 = d[c.base + c.sz + c.sx];
  const double v011 = d[c.base + c.sz + c.sy],
               v111 = d[c.base + c.sz + c.sy + c.sx];
  const double c00 = v000 + (v100 - v000) * c.fx;
  const double c10 = v010 + (v110 - v010) * c.fx;
  const double c01 = v001 + (v101 - v001) * c.fx;
  const double c11 = v011 + (v111 - v011) * c.fx;
  const double c0 = c00 + (c10 - c00) * c.fy;
  const double c1 = c01 + (c11 - c01) * c.fy;
  return c0 + (c1 - c0) * c.fz;
}

SampleGrad trilinear_sample_grad(const Volume& vol, const Vec3& p) {
  SampleGrad g;
  const Cell c = locate(vol, p);
  if (!c.inside) return g;
  const float* d = vol.data.data();
  const double v000 = d[c.base], v100 = d[c.base + c.sx];
  const double v010 = d[c.base + c.sy], v110 = d[c.base + c.sy + c.sx];
  const double v001 = d[c.base + c.sz], v101 = d[c.base + c.sz + c.sx];
  const double v011 = d[c.base + c.sz + c.sy],
               v111 = d[c.base + c.sz + c.sy + c.sx];
  const double c00 = v000 + (v100 - v000) * c.fx;
  const double c10 = v010 + (v110 - v010) * c.fx;
  const double c01 = v001 + (v101 - v001) * c.fx;
  const double c11 = v011 + (v111 - v011) * c.fx;
  const double c0 = c00 + (c10 - c00) * c.fy;
  const double c1 = c01 + (c11 - c01) * c.fy;
  g.value = c0 + (c1 - c0) * c.fz;
  const double gx00 = v100 - v000, gx10 = v110 - v010;
  const double gx01 = v101 - v001, gx11 = v111 - v011;
  const double gx0 = gx00 + (gx10 - gx00) * c.fy;
  const double gx1 = gx01 + (gx11 - gx01) * c.fy;
  g.grad.x = gx0 + (gx1 - gx0) * c.fz;
  const double gy0 = c10 - c00, gy1 = c11 - c01;
  g.grad.y = gy0 + (gy1 - gy0) * c.fz;
  g.grad.z = c1 - c0;
  return g;
}

std::atomic<uint64_t>& trilinear_eval_count() {
  static std::atomic<uint64_t> count{0};
  return count;
}

namespace {

void cube_sample_range(const VolumePyramid& pyr, const Vec3* vertices, int K,
                       CubeBatch& cubes, int v0, int v1) {
  const int r = (K - 1) / 2;
  const int scales = cubes.scales;
  const int width = cubes.width();
  for (int v = v0; v < v1; ++v) {
    const Vec3 g = pyr.levels[0].world_to_voxel(vertices[v]);
    double* out = cubes.values.data() + (size_t)v * width;
    for (int c = 0; c < scales; ++c) {
      const Volume& level = pyr.levels[c];
      const double inv = 1.0 / (double)(1 << c);
      const Vec3 base = g * inv;
      for (int iz = 0; iz < K; ++iz)
        for (int iy = 0; iy < K; ++iy)
          for (int ix = 0; ix < K; ++ix)
            *out++ = trilinear_sample(
                level, {base.x + (ix - r), base.y + (iy - r), base.z + (iz - r)});
    }
  }
  trilinear_eval_count().fetch_add((uint64_t)(v1 - v0) * width,
                                   std::memory_order_relaxed);
}

}  // namespace

void cube_sample(const VolumePyramid& pyr, const Vec3* vertices, int count,
                 int K, CubeBatch& cubes) {
  if (K < 1 || K % 2 == 0) throw format_error("cube_sample: K must be odd");
  cubes.K = K;
  cubes.scales = (int)pyr.levels.size();
  cubes.values.resize((size_t)count * cubes.width());
#pragma omp parallel for schedule(static) if (count >= 256)
  for (int v = 0; v < count; ++v)
    cube_sample_range(pyr, vertices, K, cubes, v, v + 1);
}

namespace serial {
void cube_sample(const VolumePyramid& pyr, const Vec3* vertices, int count,
                 int K, CubeBatch& cubes) {
  if (K < 1 || K % 2 == 0) throw format_error("cube_sample: K must be odd");
  cubes.K = K;
  cubes.scales = (int)pyr.levels.size();
  cubes.values.resize((size_t)count * cubes.width());
  cube_sample_range(pyr, vertices, K, cubes, 0, count);
}
}  // namespace serial

void cube_sample_backward(const VolumePyramid& pyr, const Vec3* vertices,
                          int count, int K, int scales, const double* dcubes,
                          Vec3* dvertices_acc) {
  const int r = (K - 1) / 2;
  const int width = scales * K * K * K;
  const auto& aff = pyr.levels[0].affine;
#pragma omp parallel for schedule(static) if (count >= 256)
  for (int v = 0; v < count; ++v) {
    const Vec3 g = pyr.levels[0].world_to_voxel(vertices[v]);
    const double* dc = dcubes + (size_t)v * width;
    Vec3 dg{0, 0, 0};
    for (int c = 0; c < scales; ++c) {
      const Volume& level = pyr.levels[c];
      const double inv = 1.0 / (double)(1 << c);
      const Vec3 base = g * inv;
      for (int iz = 0; iz < K; ++iz)
        for (int iy = 0; iy < K; ++iy)
          for (int ix = 0; ix < K; ++ix) {
            const double up = *dc++;
            if (up == 0.0) continue;
            const SampleGrad sg = trilinear_sample_grad(
                level,
                {base.x + (ix - r), base.y + (iy - r), base.z + (iz - r)});
            dg += sg.grad * (up * inv);
          }
    }
    // Chain through the affine's linear part: d(voxel)/d(world) = A[0:3,0:3].
    dvertices_acc[v] += Vec3{aff[0] * dg.x + aff[4] * dg.y + aff[8] * dg.z,
                             aff[1] * dg.x + aff[5] * dg.y + aff[9] * dg.z,
                             aff[2] * dg.x + aff[6] * dg.y + aff[10] * dg.z};
  }
}

std::array<double, 3> point_sample(const VolumePyramid& pyr,
                                   const Vec3& vertex) {
  CubeBatch cubes;
  serial::cube_sample(pyr, &vertex, 1, 1, cubes);
  std::array<double, 3> out{0, 0, 0};
  for (int c = 0; c < (int)pyr.levels.size(); ++c) out[c] = cubes.values[c];
  return out;
}

namespace {

std::string payload_path(const std::string& header_path) {
  const size_t dot = header_path.rfind('.');
  const size_t slash = header_path.find_last_of("/\\");
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return header_path + ".raw";
  return header_path.substr(0, dot) + ".raw";
}

}  // namespace

Volume read_volume(const std::string& header_path) {
  std::ifstream in(header_path);
  if (!in) throw io_error("cannot open " + header_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(header_path + ": invalid JSON: " + e.what());
  }

  Volume vol;
  try {
    auto dims = j.at("dims");
    if (!dims.is_array() || dims.size() != 3)
      throw format_error(header_path + ": dims must be [L, W, H]");
    for (int a = 0; a < 3; ++a) vol.dims[a] = dims[a].get<int32_t>();
    if (j.at("dtype").get<std::string>() != "f32")
      throw format_error(header_path + ": unsupported dtype");
    if (j.at("byte_order").get<std::string>() != "little")
      throw format_error(header_path + ": unsupported byte order");
    auto aff = j.at("affine");
    if (!aff.is_array() || aff.size() != 4)
      throw format_error(header_path + ": affine must be 4x4");
    for (int r = 0; r < 4; ++r) {
      if (!aff[r].is_array() || aff[r].size() != 4)
        throw format_error(header_path + ": affine must be 4x4");
      for (int c = 0; c < 4; ++c) vol.affine[4 * r + c] = aff[r][c].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw format_error(header_path + ": bad header: " + e.what());
  }
  if (vol.dims[0] <= 0 || vol.dims[1] <= 0 || vol.dims[2] <= 0)
    throw format_error(header_path + ": dims must be positive");

  const std::string raw = payload_path(header_path);
  std::ifstream pin(raw, std::ios::binary | std::ios::ate);
  if (!pin) throw io_error("cannot open " + raw);
  const size_t bytes = (size_t)pin.tellg();
  if (bytes != vol.voxel_count() * sizeof(float))
    throw format_error(raw + ": payload size " + std::to_string(bytes) +
                       " does not match dims (" +
                       std::to_string(vol.voxel_count() * sizeof(float)) +
                       " expected)");
  pin.seekg(0);
  vol.data.resize(vol.voxel_count());
  pin.read(reinterpret_cast<char*>(vol.data.data()), (std::streamsize)bytes);
  if (!pin) throw io_error("failed to read " + raw);
  for (float f : vol.data)
    if (!std::isfinite(f))
      throw format_error(raw + ": payload contains non-finite values");
  return vol;
}

void write_volume(const Volume& vol, const std::string& header_path) {
  if (vol.data.size() != vol.voxel_count())
    throw format_error("write_volume: data length does not match dims");
  for (float f : vol.data)
    if (!std::isfinite(f))
      throw numeric_error("write_volume: non-finite values");

  nlohmann::ordered_json j;
  j["dims"] = {vol.dims[0], vol.dims[1], vol.dims[2]};
  j["dtype"] = "f32";
  j["byte_order"] = "little";
  nlohmann::ordered_json aff = nlohmann::ordered_json::array();
  for (int r = 0; r < 4; ++r) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (int c = 0; c < 4; ++c) row.push_back(vol.affine[4 * r + c]);
    aff.push_back(row);
  }
  j["affine"] = aff;

  std::ofstream out(header_path);
  if (!out) throw io_error("cannot open " + header_path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw io_error("failed to write " + header_path);

  const std::string raw = payload_path(header_path);
  std::ofstream pout(raw, std::ios::binary);
  if (!pout) throw io_error("cannot open " + raw + " for writing");
  pout.write(reinterpret_cast<const char*>(vol.data.data()),
             (std::streamsize)(vol.data.size() * sizeof(float)));
  if (!pout) throw io_error("failed to write " + raw);
}

}  // namespace pialnn
