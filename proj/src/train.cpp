#include "pialnn/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pialnn/rng.hpp"

namespace pialnn {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw format_error("train: lr must be > 0");
  if (epochs < 1) throw format_error("train: epochs must be >= 1");
  if (batch_size != 1) throw format_error("train: batch size is fixed at 1");
  if (checkpoint_interval < 1)
    throw format_error("train: checkpoint interval must be >= 1");
  model_config().validate();
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig mc;
  mc.L = L;
  mc.K = K;
  mc.scales = scales;
  mc.lambda = lambda;
  mc.sampling = sampling;
  return mc;
}

AdamState AdamState::create(const ParamStore& params) {
  AdamState s;
  s.m1.reserve(params.tensors.size());
  s.m2.reserve(params.tensors.size());
  for (const Tensor& t : params.tensors) {
    s.m1.emplace_back(t.size(), 0.0);
    s.m2.emplace_back(t.size(), 0.0);
  }
  return s;
}

void adam_step(ParamStore& params, AdamState& state, const TrainConfig& cfg) {
  const std::string bad = params.first_nonfinite_grad();
  if (!bad.empty())
    throw numeric_error("non-finite gradient in parameter " + bad);

  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, (double)state.step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, (double)state.step);
  for (size_t t = 0; t < params.tensors.size(); ++t) {
    Tensor& tensor = params.tensors[t];
    double* m1 = state.m1[t].data();
    double* m2 = state.m2[t].data();
    double* value = tensor.value.data();
    double* grad = tensor.grad.data();
    const long count = (long)tensor.size();
#pragma omp parallel for schedule(static) if (count >= 1 << 16)
    for (long i = 0; i < count; ++i) {
      const double g = grad[i];
      m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
      m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m1[i] / bc1;
      const double vhat = m2[i] / bc2;
      value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      grad[i] = 0.0;
    }
  }
}

namespace {

std::string payload_path(const std::string& manifest_path) {
  const size_t dot = manifest_path.rfind('.');
  const size_t slash = manifest_path.find_last_of("/\\");
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return manifest_path + ".bin";
  return manifest_path.substr(0, dot) + ".bin";
}

void write_all(std::ofstream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            (std::streamsize)(v.size() * sizeof(double)));
}

void read_all(std::ifstream& in, std::vector<double>& v) {
  in.read(reinterpret_cast<char*>(v.data()),
          (std::streamsize)(v.size() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const std::string& manifest_path,
                     const DeformationModel& model, const AdamState* adam) {
  nlohmann::ordered_json j;
  j["format"] = "pialnn-checkpoint";
  j["version"] = 1;
  j["K"] = model.config.K;
  j["L"] = model.config.L;
  j["scales"] = model.config.scales;
  j["lambda"] = model.config.lambda;
  j["slope"] = model.config.slope;
  j["sampling"] = model.config.sampling;
  j["norm_lo"] = {model.norm_lo.x, model.norm_lo.y, model.norm_lo.z};
  j["norm_hi"] = {model.norm_hi.x, model.norm_hi.y, model.norm_hi.z};
  j["init_seed"] = model.params.init_seed;
  j["step"] = model.step;
  j["epochs_done"] = model.epochs_done;
  nlohmann::ordered_json plist = nlohmann::ordered_json::array();
  for (const Tensor& t : model.params.tensors) {
    nlohmann::ordered_json p;
    p["name"] = t.name;
    p["shape"] = t.shape;
    plist.push_back(p);
  }
  j["params"] = plist;
  j["optimizer_state"] = adam != nullptr;

  // Write-temp-then-rename so an interrupted save never corrupts an existing
  // checkpoint.
  const std::string bin = payload_path(manifest_path);
  const std::string tmp_json = manifest_path + ".tmp";
  const std::string tmp_bin = bin + ".tmp";
  {
    std::ofstream out(tmp_json);
    if (!out) throw io_error("cannot open " + tmp_json + " for writing");
    out << j.dump(2) << "\n";
    if (!out) throw io_error("failed to write " + tmp_json);
  }
  {
    std::ofstream out(tmp_bin, std::ios::binary);
    if (!out) throw io_error("cannot open " + tmp_bin + " for writing");
    for (const Tensor& t : model.params.tensors) write_all(out, t.value);
    if (adam) {
      for (const auto& v : adam->m1) write_all(out, v);
      for (const auto& v : adam->m2) write_all(out, v);
    }
    if (!out) throw io_error("failed to write " + tmp_bin);
  }
  std::filesystem::rename(tmp_bin, bin);
  std::filesystem::rename(tmp_json, manifest_path);
}

DeformationModel load_checkpoint(const std::string& manifest_path,
                                 AdamState* adam_out) {
  std::ifstream in(manifest_path);
  if (!in) throw io_error("cannot open " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(manifest_path + ": invalid JSON: " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "pialnn-checkpoint")
      throw format_error(manifest_path + ": not a checkpoint manifest");
    ModelConfig cfg;
    cfg.K = j.at("K").get<int>();
    cfg.L = j.at("L").get<int>();
    cfg.scales = j.at("scales").get<int>();
    cfg.lambda = j.at("lambda").get<double>();
    cfg.slope = j.at("slope").get<double>();
    cfg.sampling = j.at("sampling").get<std::string>();
    DeformationModel model =
        DeformationModel::create(cfg, j.at("init_seed").get<uint64_t>());
    auto lo = j.at("norm_lo"), hi = j.at("norm_hi");
    model.norm_lo = {lo[0].get<double>(), lo[1].get<double>(),
                     lo[2].get<double>()};
    model.norm_hi = {hi[0].get<double>(), hi[1].get<double>(),
                     hi[2].get<double>()};
    model.step = j.at("step").get<int64_t>();
    model.epochs_done = j.at("epochs_done").get<int64_t>();

    const auto& plist = j.at("params");
    if (plist.size() != model.params.tensors.size())
      throw format_error(manifest_path + ": parameter list mismatch");
    for (size_t t = 0; t < plist.size(); ++t) {
      const Tensor& tt = model.params.tensors[t];
      if (plist[t].at("name").get<std::string>() != tt.name)
        throw format_error(manifest_path + ": unexpected parameter order (" +
                           plist[t].at("name").get<std::string>() + " vs " +
                           tt.name + ")");
      if (plist[t].at("shape").get<std::vector<int>>() != tt.shape)
        throw format_error(manifest_path + ": shape mismatch for " + tt.name);
    }

    const bool has_adam = j.at("optimizer_state").get<bool>();
    const std::string bin = payload_path(manifest_path);
    std::ifstream pin(bin, std::ios::binary | std::ios::ate);
    if (!pin) throw io_error("cannot open " + bin);
    size_t expected = model.params.total_size() * sizeof(double);
    if (has_adam) expected *= 3;
    if ((size_t)pin.tellg() != expected)
      throw format_error(bin + ": payload size mismatch");
    pin.seekg(0);
    for (Tensor& t : model.params.tensors) read_all(pin, t.value);
    if (has_adam && adam_out) {
      *adam_out = AdamState::create(model.params);
      for (auto& v : adam_out->m1) read_all(pin, v);
      for (auto& v : adam_out->m2) read_all(pin, v);
      adam_out->step = model.step;
    } else if (adam_out) {
      *adam_out = AdamState::create(model.params);
      adam_out->step = model.step;
    }
    if (!pin) throw io_error("failed to read " + bin);
    for (const Tensor& t : model.params.tensors)
      for (double v : t.value)
        if (!std::isfinite(v))
          throw format_error(bin + ": non-finite parameter in " + t.name);
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(manifest_path + ": bad manifest: " + e.what());
  }
}

namespace {

void check_case(const TrainCase& c) {
  if (c.white.vertices.size() != c.pial.vertices.size())
    throw format_error("case " + c.id +
                       ": white/pial vertex counts differ (connectivity "
                       "violated)");
  if (c.white.faces != c.pial.faces)
    throw format_error("case " + c.id + ": white/pial face lists differ");
}

std::vector<int> epoch_order(int ncases, uint64_t seed, int epoch) {
  std::vector<int> order(ncases);
  for (int i = 0; i < ncases; ++i) order[i] = i;
  Rng rng(subkey(seed, 0x53485546ull + (uint64_t)epoch));  // "SHUF"
  for (int i = ncases - 1; i > 0; --i)
    std::swap(order[i], order[rng.below((uint64_t)i + 1)]);
  return order;
}

}  // namespace

TrainResult train(const std::vector<TrainCase>& cases, const TrainConfig& cfg,
                  const std::string& checkpoint_path,
                  const DeformationModel* resume_model,
                  const AdamState* resume_adam,
                  const std::function<void(int)>& on_epoch) {
  cfg.validate();
  if (cases.empty()) throw format_error("train: empty dataset");
  for (const TrainCase& c : cases) check_case(c);

  TrainResult result;
  if (resume_model) {
    result.model = *resume_model;
  } else {
    result.model = DeformationModel::create(cfg.model_config(), cfg.seed);
    result.model.set_normalization_from(cases[0].volume);
  }
  DeformationModel& model = result.model;

  AdamState adam =
      resume_adam ? *resume_adam : AdamState::create(model.params);

  struct Prepared {
    MeshTopology topo;
    VolumePyramid pyr;
  };
  std::vector<Prepared> prep;
  prep.reserve(cases.size());
  for (const TrainCase& c : cases) {
    c.white.validate();
    prep.push_back({MeshTopology::build(c.white),
                    build_pyramid(c.volume, cfg.scales)});
  }

  ModelWorkspace ws;
  std::vector<Vec3> d_smooth;
  model.params.zero_grads();
  for (int epoch = (int)model.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    for (int idx : epoch_order((int)cases.size(), cfg.seed, epoch)) {
      const TrainCase& c = cases[idx];
      const int n = (int)c.white.vertices.size();
      model_forward(model, c.white.vertices, prep[idx].topo, prep[idx].pyr,
                    ws);
      d_smooth.resize(n);
      const double loss = mse_loss(ws.v_smooth.data(), c.pial.vertices.data(),
                                   n, d_smooth.data());
      if (!std::isfinite(loss))
        throw numeric_error("non-finite loss at epoch " +
                            std::to_string(epoch) + ", case " + c.id);
      model_backward(model, prep[idx].topo, prep[idx].pyr, ws, d_smooth,
                     nullptr);
      adam_step(model.params, adam, cfg);
      model.step = adam.step;
      result.log.push_back({epoch, c.id, loss});
    }
    model.epochs_done = epoch;
    if (!checkpoint_path.empty() &&
        (epoch % cfg.checkpoint_interval == 0 || epoch == cfg.epochs))
      save_checkpoint(checkpoint_path, model, &adam);
    if (on_epoch) on_epoch(epoch);
  }
  if (!checkpoint_path.empty() && cfg.epochs <= (int)model.epochs_done &&
      result.log.empty())
    save_checkpoint(checkpoint_path, model, &adam);  // nothing left to train
  return result;
}

TriMesh predict(const DeformationModel& model, const TriMesh& white,
                const Volume& volume, int extra_smooth) {
  white.validate();
  if (extra_smooth < 0) throw format_error("predict: extra_smooth < 0");
  const MeshTopology topo = MeshTopology::build(white);
  const VolumePyramid pyr = build_pyramid(volume, model.config.scales);
  TriMesh out;
  out.faces = white.faces;
  model_infer(model, white.vertices, topo, pyr, out.vertices);
  std::vector<Vec3> tmp(out.vertices.size());
  for (int pass = 0; pass < extra_smooth; ++pass) {
    laplacian_smooth(out.vertices.data(), topo.adjacency, 1.0, tmp.data());
    out.vertices.swap(tmp);
  }
  return out;
}

void write_loss_log(const std::vector<EpochLoss>& log,
                    const std::string& path) {
  std::FILE* out = std::fopen(path.c_str(), "w");
  if (!out) throw io_error("cannot open " + path + " for writing");
  std::fprintf(out, "epoch,case,loss\n");
  for (const EpochLoss& row : log)
    std::fprintf(out, "%d,%s,%.17g\n", row.epoch, row.case_id.c_str(),
                 row.loss);
  if (std::fclose(out) != 0) throw io_error("failed to write " + path);
}

}  // namespace pialnn
