#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pialnn/train.hpp"

namespace pialnn {

// Desk-scale stand-in for real cortical data: a perturbed sphere ("white"
// surface) nested inside a lobed outer surface ("pial"), plus an intensity
// volume whose smooth ramp crosses mid-level exactly on the pial surface,
// so the target is recoverable from intensity alone.
struct SynthConfig {
  uint64_t seed = 7;
  int subdivision = 4;       // icosphere level (4 -> 2562 vertices)
  double base_radius = 20.0; // voxel units
  int volume_dim = 64;       // cubic volume

  // radial structure, all in voxel units
  double gap = 5.0;            // mean white->pial radial gap
  double gap_jitter = 1.25;    // per-case uniform offset in [-j, j]
  double amplitude = 2.0;      // pial lobe field bound
  int lobes = 6;               // spherical lobes per field
  double lobe_width = 0.8;     // angular width; larger = smoother
  double white_amplitude = 0.5;  // white-surface perturbation bound
  double delta_min = 1.0;      // guaranteed minimum radial gap
  double lipschitz_bound = 1.5;  // max displacement difference across an edge

  // intensity profile
  double inner_level = 1.0;
  double outer_level = 0.0;
  double sharpness = 1.5;    // logistic ramp width in voxels
  double noise_sigma = 0.0;  // optional iid voxel noise on top of the ramp

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct SynthCase {
  TriMesh white;
  TriMesh pial;
  Volume volume;
  double achieved_min_gap = 0;
};

// Deterministic in (cfg.seed, case_index).
SynthCase generate_case(const SynthConfig& cfg, int case_index);

// Writes cases/case_NNNN directories (white.obj, pial.obj, volume.json,
// volume.raw, meta.json) with disjoint indices per split, plus dataset.json
// listing the splits and the generating config.
void generate_dataset(const SynthConfig& cfg, int n_train, int n_val,
                      int n_test, const std::string& out_dir);

struct DatasetManifest {
  nlohmann::json config;
  std::vector<std::string> train, val, test;  // case dirs, absolute
};

DatasetManifest load_dataset_manifest(const std::string& manifest_path);
TrainCase load_case(const std::string& case_dir);
std::vector<TrainCase> load_cases(const std::vector<std::string>& dirs);

}  // namespace pialnn
