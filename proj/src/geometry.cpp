#include "pialnn/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "pialnn/rng.hpp"

namespace pialnn {

void TriMesh::validate() const {
  const int32_t nv = (int32_t)vertices.size();
  for (size_t f = 0; f < faces.size(); ++f) {
    const Face& fc = faces[f];
    for (int c = 0; c < 3; ++c) {
      if (fc[c] < 0 || fc[c] >= nv)
        throw format_error("face " + std::to_string(f) +
                           ": vertex index out of range");
    }
    if (fc[0] == fc[1] || fc[1] == fc[2] || fc[0] == fc[2])
      throw format_error("face " + std::to_string(f) +
                         ": repeated vertex index");
  }
}

AdjacencyList build_adjacency(const TriMesh& mesh) {
  const int nv = (int)mesh.vertices.size();
  std::vector<std::pair<int32_t, int32_t>> edges;
  edges.reserve(mesh.faces.size() * 6);
  for (const Face& f : mesh.faces) {
    for (int c = 0; c < 3; ++c) {
      int32_t a = f[c], b = f[(c + 1) % 3];
      edges.emplace_back(a, b);
      edges.emplace_back(b, a);
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  AdjacencyList adj;
  adj.offsets.assign(nv + 1, 0);
  for (auto& e : edges) adj.offsets[e.first + 1]++;
  for (int i = 0; i < nv; ++i) adj.offsets[i + 1] += adj.offsets[i];
  adj.items.reserve(edges.size());
  for (auto& e : edges) adj.items.push_back(e.second);
  return adj;
}

MeshTopology MeshTopology::build(const TriMesh& mesh) {
  MeshTopology topo;
  topo.faces = mesh.faces;
  topo.incidence = build_face_incidence(mesh);
  topo.adjacency = build_adjacency(mesh);
  return topo;
}

FaceIncidence build_face_incidence(const TriMesh& mesh) {
  const int nv = (int)mesh.vertices.size();
  FaceIncidence inc;
  inc.offsets.assign(nv + 1, 0);
  for (const Face& f : mesh.faces)
    for (int c = 0; c < 3; ++c) inc.offsets[f[c] + 1]++;
  for (int i = 0; i < nv; ++i) inc.offsets[i + 1] += inc.offsets[i];
  inc.items.resize(inc.offsets[nv]);
  std::vector<int32_t> cursor(inc.offsets.begin(), inc.offsets.end() - 1);
  for (int32_t fi = 0; fi < (int32_t)mesh.faces.size(); ++fi)
    for (int c = 0; c < 3; ++c) inc.items[cursor[mesh.faces[fi][c]]++] = fi;
  return inc;
}

namespace {

// Accumulates incident-face cross products for vertices [i0, i1) in
// ascending face order, then normalizes. The cross product of two edge
// vectors has magnitude 2*area, so summing raw cross products is the
// area-weighted accumulation; degenerate faces contribute exactly zero.
void normals_range(const Vec3* v, const Face* faces, const FaceIncidence& inc,
                   Vec3* out, int i0, int i1) {
  for (int i = i0; i < i1; ++i) {
    Vec3 acc{0, 0, 0};
    for (int32_t k = inc.offsets[i]; k < inc.offsets[i + 1]; ++k) {
      const Face& f = faces[inc.items[k]];
      acc += cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]]);
    }
    const double len2 = norm2(acc);
    out[i] = len2 > 0.0 ? acc / std::sqrt(len2) : Vec3{0, 0, 0};
  }
}

void smooth_range(const Vec3* v, const AdjacencyList& adj, double lambda,
                  Vec3* out, int i0, int i1) {
  for (int i = i0; i < i1; ++i) {
    const int deg = adj.degree(i);
    if (deg == 0) {
      out[i] = v[i];
      continue;
    }
    Vec3 mean{0, 0, 0};
    for (const int32_t* j = adj.begin(i); j != adj.end(i); ++j) mean += v[*j];
    out[i] = v[i] * (1.0 - lambda) + mean * (lambda / deg);
  }
}

}  // namespace

void compute_vertex_normals(const std::vector<Vec3>& vertices,
                            const std::vector<Face>& faces,
                            const FaceIncidence& incidence,
                            std::vector<Vec3>& normals) {
  const int nv = (int)vertices.size();
  normals.resize(nv);
#pragma omp parallel for schedule(static) if (nv >= 2048)
  for (int i = 0; i < nv; ++i)
    normals_range(vertices.data(), faces.data(), incidence, normals.data(), i,
                  i + 1);
}

std::vector<Vec3> compute_vertex_normals(const TriMesh& mesh) {
  std::vector<Vec3> normals;
  compute_vertex_normals(mesh.vertices, mesh.faces,
                         build_face_incidence(mesh), normals);
  return normals;
}

void laplacian_smooth(const Vec3* vertices, const AdjacencyList& adj,
                      double lambda, Vec3* out) {
  const int nv = adj.vertex_count();
#pragma omp parallel for schedule(static) if (nv >= 2048)
  for (int i = 0; i < nv; ++i)
    smooth_range(vertices, adj, lambda, out, i, i + 1);
}

std::vector<Vec3> laplacian_smooth(const std::vector<Vec3>& vertices,
                                   const AdjacencyList& adj, double lambda) {
  std::vector<Vec3> out(vertices.size());
  laplacian_smooth(vertices.data(), adj, lambda, out.data());
  return out;
}

void laplacian_smooth_transpose(const Vec3* grad_out, const AdjacencyList& adj,
                                double lambda, Vec3* grad_in) {
  const int nv = adj.vertex_count();
#pragma omp parallel for schedule(static) if (nv >= 2048)
  for (int j = 0; j < nv; ++j) {
    // The adjacency is symmetric, so rows i with j in N(i) are exactly N(j).
    Vec3 acc = grad_out[j] * (adj.degree(j) == 0 ? 1.0 : 1.0 - lambda);
    for (const int32_t* i = adj.begin(j); i != adj.end(j); ++i) {
      const int deg_i = adj.degree(*i);
      if (deg_i > 0) acc += grad_out[*i] * (lambda / deg_i);
    }
    grad_in[j] = acc;
  }
}

namespace serial {

void compute_vertex_normals(const std::vector<Vec3>& vertices,
                            const std::vector<Face>& faces,
                            const FaceIncidence& incidence,
                            std::vector<Vec3>& normals) {
  normals.resize(vertices.size());
  normals_range(vertices.data(), faces.data(), incidence, normals.data(), 0,
                (int)vertices.size());
}

void laplacian_smooth(const Vec3* vertices, const AdjacencyList& adj,
                      double lambda, Vec3* out) {
  smooth_range(vertices, adj, lambda, out, 0, adj.vertex_count());
}

}  // namespace serial

double surface_area(const TriMesh& mesh) {
  double area = 0;
  for (const Face& f : mesh.faces)
    area += 0.5 * norm(cross(mesh.vertices[f[1]] - mesh.vertices[f[0]],
                             mesh.vertices[f[2]] - mesh.vertices[f[0]]));
  return area;
}

std::vector<Vec3> sample_surface_points(const TriMesh& mesh, size_t n,
                                        uint64_t seed) {
  std::vector<Vec3> points;
  if (n == 0) return points;

  std::vector<double> cum(mesh.faces.size());
  double total = 0;
  for (size_t f = 0; f < mesh.faces.size(); ++f) {
    const Face& fc = mesh.faces[f];
    total += 0.5 * norm(cross(mesh.vertices[fc[1]] - mesh.vertices[fc[0]],
                              mesh.vertices[fc[2]] - mesh.vertices[fc[0]]));
    cum[f] = total;
  }
  if (!(total > 0.0))
    throw numeric_error("sample_surface_points: mesh has zero surface area");

  points.reserve(n);
  Rng rng(subkey(seed, /*tag=*/0x5A4D504Cull));  // "SMPL"
  for (size_t i = 0; i < n; ++i) {
    const double pick = rng.uniform() * total;
    const size_t f =
        std::upper_bound(cum.begin(), cum.end(), pick) - cum.begin();
    const Face& fc = mesh.faces[f < cum.size() ? f : cum.size() - 1];
    double u = rng.uniform(), w = rng.uniform();
    if (u + w > 1.0) {
      u = 1.0 - u;
      w = 1.0 - w;
    }
    const Vec3& a = mesh.vertices[fc[0]];
    points.push_back(a + (mesh.vertices[fc[1]] - a) * u +
                     (mesh.vertices[fc[2]] - a) * w);
  }
  return points;
}

TriMesh make_icosphere(int subdivisions, double radius) {
  if (subdivisions < 0) throw format_error("make_icosphere: negative level");
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  TriMesh mesh;
  mesh.vertices = {{-1, phi, 0}, {1, phi, 0},   {-1, -phi, 0}, {1, -phi, 0},
                   {0, -1, phi}, {0, 1, phi},   {0, -1, -phi}, {0, 1, -phi},
                   {phi, 0, -1}, {phi, 0, 1},   {-phi, 0, -1}, {-phi, 0, 1}};
  for (Vec3& v : mesh.vertices) v = v / norm(v);
  mesh.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

  for (int s = 0; s < subdivisions; ++s) {
    std::vector<Face> next;
    next.reserve(mesh.faces.size() * 4);
    std::unordered_map<uint64_t, int32_t> midpoint;
    auto mid = [&](int32_t a, int32_t b) -> int32_t {
      const uint64_t key =
          ((uint64_t)std::min(a, b) << 32) | (uint32_t)std::max(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      Vec3 p = (mesh.vertices[a] + mesh.vertices[b]) * 0.5;
      p = p / norm(p);
      mesh.vertices.push_back(p);
      const int32_t idx = (int32_t)mesh.vertices.size() - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    for (const Face& f : mesh.faces) {
      const int32_t ab = mid(f[0], f[1]), bc = mid(f[1], f[2]),
                    ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    mesh.faces = std::move(next);
  }
  for (Vec3& v : mesh.vertices) v *= radius;
  return mesh;
}

namespace {

[[noreturn]] void parse_fail(size_t line, const std::string& msg) {
  throw format_error("line " + std::to_string(line) + ": " + msg);
}

bool parse_double(const std::string& tok, double& out) {
  const char* b = tok.data();
  const char* e = b + tok.size();
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

bool parse_index(const std::string& tok, int64_t& out) {
  const char* b = tok.data();
  const char* e = b + tok.size();
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

}  // namespace

TriMesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);

  TriMesh mesh;
  std::vector<size_t> face_lines;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    std::string word;
    if (!(ss >> word)) continue;  // blank or comment-only line

    if (word == "v") {
      Vec3 p;
      std::string sx, sy, sz, extra;
      if (!(ss >> sx >> sy >> sz) || (ss >> extra))
        parse_fail(lineno, "expected `v x y z`");
      if (!parse_double(sx, p.x) || !parse_double(sy, p.y) ||
          !parse_double(sz, p.z))
        parse_fail(lineno, "malformed vertex coordinate");
      if (!finite(p)) parse_fail(lineno, "non-finite vertex coordinate");
      mesh.vertices.push_back(p);
    } else if (word == "f") {
      std::vector<std::string> toks;
      std::string t;
      while (ss >> t) toks.push_back(t);
      if (toks.size() != 3)
        parse_fail(lineno, "non-triangle face (" +
                               std::to_string(toks.size()) + " indices)");
      Face f;
      for (int c = 0; c < 3; ++c) {
        if (toks[c].find('/') != std::string::npos)
          parse_fail(lineno, "texture/normal slots not supported");
        int64_t idx;
        if (!parse_index(toks[c], idx)) parse_fail(lineno, "malformed face index");
        if (idx < 1) parse_fail(lineno, "face index must be positive");
        f[c] = (int32_t)(idx - 1);
      }
      mesh.faces.push_back(f);
      face_lines.push_back(lineno);
    } else {
      parse_fail(lineno, "unsupported directive `" + word + "`");
    }
  }

  const int32_t nv = (int32_t)mesh.vertices.size();
  for (size_t i = 0; i < mesh.faces.size(); ++i) {
    for (int c = 0; c < 3; ++c)
      if (mesh.faces[i][c] >= nv)
        parse_fail(face_lines[i], "face index " +
                                      std::to_string(mesh.faces[i][c] + 1) +
                                      " exceeds vertex count");
    if (mesh.faces[i][0] == mesh.faces[i][1] ||
        mesh.faces[i][1] == mesh.faces[i][2] ||
        mesh.faces[i][0] == mesh.faces[i][2])
      parse_fail(face_lines[i], "face repeats a vertex index");
  }
  return mesh;
}

void write_obj(const TriMesh& mesh, const std::string& path) {
  std::FILE* out = std::fopen(path.c_str(), "w");
  if (!out) throw io_error("cannot open " + path + " for writing");
  for (const Vec3& v : mesh.vertices)
    std::fprintf(out, "v %.17g %.17g %.17g\n", v.x, v.y, v.z);
  for (const Face& f : mesh.faces)
    std::fprintf(out, "f %" PRId32 " %" PRId32 " %" PRId32 "\n", f[0] + 1,
                 f[1] + 1, f[2] + 1);
  if (std::fclose(out) != 0) throw io_error("failed to write " + path);
}

}  // namespace pialnn
