#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pialnn/model.hpp"

namespace pialnn {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 200;
  int batch_size = 1;  // fixed
  uint64_t seed = 42;
  double lambda = 1.0;
  int K = 5;
  int L = 3;
  int scales = 3;
  std::string sampling = "cube";
  int checkpoint_interval = 50;  // epochs between rolling checkpoints

  void validate() const;
  ModelConfig model_config() const;
};

// First/second moment buffers matching the parameter tensors, plus the step
// counter used for bias correction.
struct AdamState {
  std::vector<std::vector<double>> m1;
  std::vector<std::vector<double>> m2;
  int64_t step = 0;

  static AdamState create(const ParamStore& params);
};

// Standard bias-corrected Adam update over every tensor, then zeroes the
// gradients. Throws numeric_error naming the tensor if any gradient is
// non-finite.
void adam_step(ParamStore& params, AdamState& state, const TrainConfig& cfg);

struct TrainCase {
  std::string id;
  TriMesh white;
  TriMesh pial;
  Volume volume;
};

// Checkpoint = JSON manifest + sibling .bin payload of little-endian f64:
// parameter tensors concatenated in manifest order, then (when optimizer
// state is saved) the Adam m1/m2 arrays in the same order.
void save_checkpoint(const std::string& manifest_path,
                     const DeformationModel& model, const AdamState* adam);
DeformationModel load_checkpoint(const std::string& manifest_path,
                                 AdamState* adam_out = nullptr);

struct EpochLoss {
  int epoch;
  std::string case_id;
  double loss;
};

struct TrainResult {
  DeformationModel model;
  std::vector<EpochLoss> log;
};

// Epochs x cases loop: forward, MSE loss on the final smoothed mesh,
// backward, Adam step. Case order is reshuffled each epoch from (seed,
// epoch), so a run resumed from a checkpoint continues identically.
// `on_epoch` (optional) is called after each epoch with the epoch number.
TrainResult train(const std::vector<TrainCase>& cases, const TrainConfig& cfg,
                  const std::string& checkpoint_path,
                  const DeformationModel* resume_model,
                  const AdamState* resume_adam,
                  const std::function<void(int)>& on_epoch = nullptr);

// Deforms `white` through the model; the output mesh keeps the input face
// list. extra_smooth additional Laplacian passes at lambda = 1 are applied
// after the model's own smoothing.
TriMesh predict(const DeformationModel& model, const TriMesh& white,
                const Volume& volume, int extra_smooth = 1);

void write_loss_log(const std::vector<EpochLoss>& log,
                    const std::string& path);

}  // namespace pialnn
