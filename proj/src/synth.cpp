#include "pialnn/synth.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pialnn/rng.hpp"

namespace fs = std::filesystem;

namespace pialnn {

namespace {

constexpr uint64_t kTagCase = 0x43415345;   // "CASE"
constexpr uint64_t kTagWhite = 0x57484954;  // "WHIT"
constexpr uint64_t kTagPial = 0x5049414C;   // "PIAL"
constexpr uint64_t kTagJitter = 0x4A495454; // "JITT"
constexpr uint64_t kTagNoise = 0x4E4F4953;  // "NOIS"

// Smooth bounded field on the unit sphere: a sum of Gaussian-like lobes
// normalized so |field| <= amplitude everywhere.
struct SphereField {
  std::vector<Vec3> centers;
  std::vector<double> weights;
  double inv_w2 = 1;
  double scale = 0;

  static SphereField make(uint64_t key, int lobes, double width,
                          double amplitude) {
    SphereField f;
    Rng rng(key);
    f.inv_w2 = 1.0 / (width * width);
    double wsum = 0;
    for (int j = 0; j < lobes; ++j) {
      // Uniform direction via normalized Gaussian triple.
      Vec3 c{rng.normal(), rng.normal(), rng.normal()};
      const double len = norm(c);
      f.centers.push_back(len > 0 ? c / len : Vec3{0, 0, 1});
      const double a = rng.uniform(-1.0, 1.0);
      f.weights.push_back(a);
      wsum += std::abs(a);
    }
    f.scale = amplitude / std::max(1e-9, wsum);
    return f;
  }

  double eval(const Vec3& u) const {
    double acc = 0;
    for (size_t j = 0; j < centers.size(); ++j)
      acc += weights[j] * std::exp((dot(u, centers[j]) - 1.0) * inv_w2);
    return scale * acc;
  }
};

}  // namespace

void SynthConfig::validate() const {
  if (subdivision < 0 || subdivision > 7)
    throw format_error("synth: subdivision must be in 0..7");
  if (volume_dim < 8) throw format_error("synth: volume_dim must be >= 8");
  if (!(base_radius > 0)) throw format_error("synth: base_radius must be > 0");
  if (!(amplitude > 0)) throw format_error("synth: amplitude must be > 0");
  if (!(delta_min > 0)) throw format_error("synth: delta_min must be > 0");
  if (lobes < 1) throw format_error("synth: lobes must be >= 1");
  if (!(lobe_width > 0)) throw format_error("synth: lobe_width must be > 0");
  if (!(sharpness > 0)) throw format_error("synth: sharpness must be > 0");
  if (noise_sigma < 0) throw format_error("synth: noise_sigma must be >= 0");
  const double min_gap = gap - gap_jitter - amplitude - white_amplitude;
  if (min_gap < delta_min)
    throw format_error(
        "synth: gap - gap_jitter - amplitude - white_amplitude must be >= "
        "delta_min");
  const double max_radius = base_radius + gap + gap_jitter + amplitude;
  if (max_radius + 2.0 > (volume_dim - 1) / 2.0)
    throw format_error("synth: surfaces do not fit inside the volume");
}

nlohmann::ordered_json SynthConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["subdivision"] = subdivision;
  j["base_radius"] = base_radius;
  j["volume_dim"] = volume_dim;
  j["gap"] = gap;
  j["gap_jitter"] = gap_jitter;
  j["amplitude"] = amplitude;
  j["lobes"] = lobes;
  j["lobe_width"] = lobe_width;
  j["white_amplitude"] = white_amplitude;
  j["delta_min"] = delta_min;
  j["lipschitz_bound"] = lipschitz_bound;
  j["inner_level"] = inner_level;
  j["outer_level"] = outer_level;
  j["sharpness"] = sharpness;
  j["noise_sigma"] = noise_sigma;
  return j;
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("seed", c.seed);
  get("subdivision", c.subdivision);
  get("base_radius", c.base_radius);
  get("volume_dim", c.volume_dim);
  get("gap", c.gap);
  get("gap_jitter", c.gap_jitter);
  get("amplitude", c.amplitude);
  get("lobes", c.lobes);
  get("lobe_width", c.lobe_width);
  get("white_amplitude", c.white_amplitude);
  get("delta_min", c.delta_min);
  get("lipschitz_bound", c.lipschitz_bound);
  get("inner_level", c.inner_level);
  get("outer_level", c.outer_level);
  get("sharpness", c.sharpness);
  get("noise_sigma", c.noise_sigma);
  return c;
}

SynthCase generate_case(const SynthConfig& cfg, int case_index) {
  cfg.validate();
  const uint64_t case_key =
      subkey(subkey(cfg.seed, kTagCase), (uint64_t)case_index);
  const SphereField white_field = SphereField::make(
      subkey(case_key, kTagWhite), cfg.lobes, cfg.lobe_width,
      cfg.white_amplitude);
  const SphereField pial_field = SphereField::make(
      subkey(case_key, kTagPial), cfg.lobes, cfg.lobe_width, cfg.amplitude);
  Rng jrng(subkey(case_key, kTagJitter));
  const double jitter = jrng.uniform(-cfg.gap_jitter, cfg.gap_jitter);
  const double pial_base = cfg.base_radius + cfg.gap + jitter;

  const double c0 = (cfg.volume_dim - 1) / 2.0;
  const Vec3 center{c0, c0, c0};
  auto pial_radius = [&](const Vec3& u) { return pial_base + pial_field.eval(u); };

  SynthCase out;
  out.white = make_icosphere(cfg.subdivision, 1.0);
  const int n = (int)out.white.vertices.size();
  std::vector<Vec3> units(out.white.vertices);
  for (int i = 0; i < n; ++i) {
    const Vec3& u = units[i];
    out.white.vertices[i] =
        center + u * (cfg.base_radius + white_field.eval(u));
  }

  // Pial vertices sit exactly on the radius field: march along the white
  // normal until |p - center| == pial_radius(dir(p)). The normal is nearly
  // radial and the field is smooth, so the root is unique and bracketed.
  out.pial.faces = out.white.faces;
  out.pial.vertices.resize(n);
  const std::vector<Vec3> normals = compute_vertex_normals(out.white);
  double min_gap = 1e300;
  for (int i = 0; i < n; ++i) {
    const Vec3 v = out.white.vertices[i] - center;
    const Vec3& nrm = normals[i];
    if (dot(nrm, units[i]) < 0.5)
      throw numeric_error("synth: normal far from radial; config too rough");
    auto phi = [&](double d) {
      const Vec3 p = v + nrm * d;
      const double r = norm(p);
      return r - pial_radius(p / r);
    };
    double lo = 0.0, hi = cfg.gap + cfg.gap_jitter + cfg.amplitude +
                          cfg.white_amplitude + 2.0;
    int expand = 0;
    while (phi(hi) < 0 && expand++ < 4) hi *= 2;
    if (phi(lo) >= 0 || phi(hi) < 0)
      throw numeric_error("synth: failed to bracket the pial surface");
    for (int it = 0; it < 80; ++it) {
      const double mid = 0.5 * (lo + hi);
      (phi(mid) < 0 ? lo : hi) = mid;
    }
    const double d = 0.5 * (lo + hi);
    out.pial.vertices[i] = out.white.vertices[i] + nrm * d;
    min_gap = std::min(min_gap, norm(out.pial.vertices[i] - center) -
                                    norm(v));
  }
  out.achieved_min_gap = min_gap;
  if (min_gap < cfg.delta_min)
    throw numeric_error("synth: radial gap fell below delta_min");

  // Intensity: logistic ramp in signed distance to the pial radius field,
  // high inside, low outside, mid-level exactly on the surface.
  Volume& vol = out.volume;
  vol.dims = {cfg.volume_dim, cfg.volume_dim, cfg.volume_dim};
  vol.data.resize(vol.voxel_count());
  const double range = cfg.inner_level - cfg.outer_level;
  const uint64_t noise_key = subkey(case_key, kTagNoise);
  const int dim = cfg.volume_dim;
#pragma omp parallel for schedule(static)
  for (int z = 0; z < dim; ++z) {
    for (int y = 0; y < dim; ++y) {
      for (int x = 0; x < dim; ++x) {
        const Vec3 p{x - c0, y - c0, z - c0};
        const double r = norm(p);
        const Vec3 u = r > 0 ? p / r : Vec3{0, 0, 1};
        const double t = (pial_radius(u) - r) / cfg.sharpness;
        double value = cfg.outer_level + range / (1.0 + std::exp(-t));
        if (cfg.noise_sigma > 0) {
          const size_t idx =
              (size_t)x + (size_t)dim * ((size_t)y + (size_t)dim * z);
          Rng nrng(subkey(noise_key, idx));
          value += cfg.noise_sigma * nrng.normal();
        }
        vol.at(x, y, z) = (float)value;
      }
    }
  }
  return out;
}

namespace {

std::string case_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%04d", index);
  return buf;
}

void write_case(const SynthConfig& cfg, int index, const std::string& dir) {
  const SynthCase c = generate_case(cfg, index);
  fs::create_directories(dir);
  write_obj(c.white, dir + "/white.obj");
  write_obj(c.pial, dir + "/pial.obj");
  write_volume(c.volume, dir + "/volume.json");
  nlohmann::ordered_json meta;
  meta["case_index"] = index;
  meta["seed"] = cfg.seed;
  meta["delta_min"] = cfg.delta_min;
  meta["achieved_min_gap"] = c.achieved_min_gap;
  meta["profile"] = {{"inner_level", cfg.inner_level},
                     {"outer_level", cfg.outer_level},
                     {"sharpness", cfg.sharpness},
                     {"noise_sigma", cfg.noise_sigma}};
  std::ofstream out(dir + "/meta.json");
  if (!out) throw io_error("cannot write " + dir + "/meta.json");
  out << meta.dump(2) << "\n";
}

}  // namespace

void generate_dataset(const SynthConfig& cfg, int n_train, int n_val,
                      int n_test, const std::string& out_dir) {
  cfg.validate();
  if (n_train < 0 || n_val < 0 || n_test < 0)
    throw format_error("generate_dataset: negative split size");
  fs::create_directories(fs::path(out_dir) / "cases");

  nlohmann::ordered_json splits;
  int index = 0;
  for (auto [name, count] : {std::pair<const char*, int>{"train", n_train},
                             {"val", n_val},
                             {"test", n_test}}) {
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (int i = 0; i < count; ++i, ++index) {
      const std::string rel = "cases/" + case_dir_name(index);
      write_case(cfg, index, out_dir + "/" + rel);
      list.push_back(rel);
    }
    splits[name] = list;
  }

  nlohmann::ordered_json manifest;
  manifest["config"] = cfg.to_json();
  manifest["splits"] = splits;
  std::ofstream out(out_dir + "/dataset.json");
  if (!out) throw io_error("cannot write " + out_dir + "/dataset.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw io_error("failed to write " + out_dir + "/dataset.json");
}

DatasetManifest load_dataset_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw io_error("cannot open " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(manifest_path + ": invalid JSON: " + e.what());
  }
  DatasetManifest m;
  const fs::path root = fs::path(manifest_path).parent_path();
  try {
    m.config = j.at("config");
    auto read_split = [&](const char* name, std::vector<std::string>& out) {
      for (const auto& rel : j.at("splits").at(name))
        out.push_back((root / rel.get<std::string>()).string());
    };
    read_split("train", m.train);
    read_split("val", m.val);
    read_split("test", m.test);
  } catch (const nlohmann::json::exception& e) {
    throw format_error(manifest_path + ": bad manifest: " + e.what());
  }
  return m;
}

TrainCase load_case(const std::string& case_dir) {
  TrainCase c;
  c.id = fs::path(case_dir).filename().string();
  c.white = read_obj(case_dir + "/white.obj");
  c.pial = read_obj(case_dir + "/pial.obj");
  c.volume = read_volume(case_dir + "/volume.json");
  return c;
}

std::vector<TrainCase> load_cases(const std::vector<std::string>& dirs) {
  std::vector<TrainCase> cases;
  cases.reserve(dirs.size());
  for (const std::string& d : dirs) cases.push_back(load_case(d));
  return cases;
}

}  // namespace pialnn
