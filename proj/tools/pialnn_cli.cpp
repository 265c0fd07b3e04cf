// pialnn command-line tool: dataset generation, training, prediction,
// evaluation, gradient checking and the sampling ablation.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
// failure (non-finite loss or a failed gradient check).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "pialnn/metrics.hpp"
#include "pialnn/model.hpp"
#include "pialnn/rng.hpp"
#include "pialnn/synth.hpp"
#include "pialnn/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace pialnn;

namespace {

void require_fresh_dir(const std::string& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw format_error(dir + " exists and is not a directory");
  if (fs::is_directory(dir) && !fs::is_empty(dir) && !force)
    throw CLI::ValidationError(
        "output", dir + " is not empty; pass --force to overwrite");
  fs::create_directories(dir);
}

void require_fresh_file(const std::string& path, bool force) {
  if (fs::exists(path) && !force)
    throw CLI::ValidationError(
        "output", path + " already exists; pass --force to overwrite");
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void write_snapshot(const std::string& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw format_error(path + ": invalid JSON: " + e.what());
  }
  return j;
}

ordered_json train_config_json(const TrainConfig& c) {
  ordered_json j;
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["lambda"] = c.lambda;
  j["K"] = c.K;
  j["L"] = c.L;
  j["scales"] = c.scales;
  j["sampling"] = c.sampling;
  j["checkpoint_interval"] = c.checkpoint_interval;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("lr", c.lr);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("eps", c.eps);
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("seed", c.seed);
  get("lambda", c.lambda);
  get("K", c.K);
  get("L", c.L);
  get("scales", c.scales);
  get("sampling", c.sampling);
  get("checkpoint_interval", c.checkpoint_interval);
  return c;
}

struct EvalSummary {
  double chamfer = 0, average_abs = 0, hausdorff = 0;
};

EvalSummary eval_cases_mean(const DeformationModel& model,
                            const std::vector<TrainCase>& cases,
                            size_t samples, uint64_t seed, int extra_smooth) {
  EvalSummary s;
  for (const TrainCase& c : cases) {
    const TriMesh pred = predict(model, c.white, c.volume, extra_smooth);
    const MetricsReport r = evaluate_meshes(pred, c.pial, samples, seed);
    s.chamfer += r.chamfer;
    s.average_abs += r.average_abs;
    s.hausdorff += r.hausdorff;
  }
  const double n = (double)cases.size();
  s.chamfer /= n;
  s.average_abs /= n;
  s.hausdorff /= n;
  return s;
}

int run(int argc, char** argv) {
  CLI::App app{"pialnn: learned deformation of a white-matter surface toward "
               "a pial surface, driven by multi-scale volume sampling"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP thread count (0 = default)");

  // ---- generate -----------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset");
  std::string gen_out, gen_config;
  int n_train = 20, n_val = 5, n_test = 5;
  bool gen_force = false;
  SynthConfig synth;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--config", gen_config, "JSON config (flat SynthConfig keys)");
  gen->add_option("--train", n_train, "Training cases");
  gen->add_option("--val", n_val, "Validation cases");
  gen->add_option("--test", n_test, "Test cases");
  auto* g_seed = gen->add_option("--seed", synth.seed, "Generator seed");
  auto* g_sub = gen->add_option("--subdivision", synth.subdivision,
                                "Icosphere subdivision level");
  auto* g_dims = gen->add_option("--dims", synth.volume_dim, "Volume dimension");
  gen->add_flag("--force", gen_force, "Overwrite existing outputs");

  // ---- train --------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train a deformation model");
  std::string tr_data, tr_out, tr_config, tr_resume;
  bool tr_force = false;
  TrainConfig tc;
  tr->add_option("--data", tr_data, "dataset.json path")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--config", tr_config, "JSON config (flat TrainConfig keys)");
  auto* t_lr = tr->add_option("--lr", tc.lr, "Learning rate");
  auto* t_ep = tr->add_option("--epochs", tc.epochs, "Training epochs");
  auto* t_k = tr->add_option("--K", tc.K, "Cube size (odd)");
  auto* t_l = tr->add_option("--L", tc.L, "Deformation blocks");
  auto* t_lam = tr->add_option("--lambda", tc.lambda, "Smoothing coefficient");
  auto* t_sc = tr->add_option("--scales", tc.scales, "Pyramid scales (1 or 3)");
  auto* t_sam = tr->add_option("--sampling", tc.sampling, "cube | point");
  auto* t_seed = tr->add_option("--seed", tc.seed, "Run seed");
  auto* t_ci = tr->add_option("--checkpoint-interval", tc.checkpoint_interval,
                              "Epochs between checkpoints");
  tr->add_option("--resume", tr_resume, "Checkpoint manifest to resume from");
  tr->add_flag("--force", tr_force, "Overwrite existing outputs");

  // ---- predict ------------------------------------------------------------
  auto* pr = app.add_subcommand("predict", "Deform a mesh with a checkpoint");
  std::string pr_ckpt, pr_mesh, pr_vol, pr_out;
  int extra_smooth = 1;
  bool pr_force = false;
  pr->add_option("--checkpoint", pr_ckpt, "Checkpoint manifest")->required();
  pr->add_option("--mesh", pr_mesh, "Input white-surface OBJ")->required();
  pr->add_option("--volume", pr_vol, "Volume header JSON")->required();
  pr->add_option("--out", pr_out, "Output OBJ path")->required();
  pr->add_option("--extra-smooth", extra_smooth,
                 "Additional smoothing passes after the model (default 1)");
  pr->add_flag("--force", pr_force, "Overwrite existing outputs");

  // ---- eval ---------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Surface-distance metrics");
  std::string ev_pred, ev_gt, ev_out;
  size_t ev_samples = 10000;
  uint64_t ev_seed = 2024;
  bool ev_map = false, ev_force = false;
  ev->add_option("--pred", ev_pred, "Predicted OBJ")->required();
  ev->add_option("--gt", ev_gt, "Ground-truth OBJ")->required();
  ev->add_option("--out", ev_out, "Output directory")->required();
  ev->add_option("--samples", ev_samples, "Surface samples per mesh");
  ev->add_option("--seed", ev_seed, "Sampling seed");
  ev->add_flag("--error-map", ev_map, "Also write per-vertex error_map.csv");
  ev->add_flag("--force", ev_force, "Overwrite existing outputs");

  // ---- gradcheck ----------------------------------------------------------
  auto* gc = app.add_subcommand(
      "gradcheck", "Finite-difference check of the full model gradient");
  int gc_K = 3, gc_L = 3, gc_vertices = 12, gc_dims = 16;
  double gc_eps = 1e-5, gc_threshold = 1e-4, gc_floor = 1e-5;
  uint64_t gc_seed = 99;
  gc->add_option("--K", gc_K, "Cube size (odd)");
  gc->add_option("--L", gc_L, "Deformation blocks");
  gc->add_option("--vertices", gc_vertices, "Mesh vertex count (icosphere)");
  gc->add_option("--dims", gc_dims, "Random volume dimension");
  gc->add_option("--eps", gc_eps, "Probe step");
  gc->add_option("--floor", gc_floor,
                 "Relative-error denominator floor: |a-n|/max(floor, |n|)");
  gc->add_option("--threshold", gc_threshold, "Failure threshold");
  gc->add_option("--seed", gc_seed, "Seed for volume/params/target");

  // ---- ablate -------------------------------------------------------------
  auto* ab = app.add_subcommand(
      "ablate", "Train cube / single-scale / point-sampling variants and "
                "compare test metrics");
  std::string ab_data, ab_out, ab_config;
  size_t ab_samples = 10000;
  uint64_t ab_eval_seed = 2024;
  bool ab_force = false;
  TrainConfig ac;
  ab->add_option("--data", ab_data, "dataset.json path")->required();
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--config", ab_config, "JSON config (flat TrainConfig keys)");
  auto* a_lr = ab->add_option("--lr", ac.lr, "Learning rate");
  auto* a_ep = ab->add_option("--epochs", ac.epochs, "Training epochs");
  auto* a_k = ab->add_option("--K", ac.K, "Cube size (odd)");
  auto* a_l = ab->add_option("--L", ac.L, "Deformation blocks");
  auto* a_lam = ab->add_option("--lambda", ac.lambda, "Smoothing coefficient");
  auto* a_seed = ab->add_option("--seed", ac.seed, "Run seed (shared)");
  ab->add_option("--samples", ab_samples, "Eval samples per mesh");
  ab->add_option("--eval-seed", ab_eval_seed, "Eval sampling seed");
  ab->add_flag("--force", ab_force, "Overwrite existing outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif

  if (*gen) {
    if (!gen_config.empty())
      synth = SynthConfig::from_json(load_json_file(gen_config));
    // explicit flags override the config file
    if (g_seed->count()) synth.seed = g_seed->as<uint64_t>();
    if (g_sub->count()) synth.subdivision = g_sub->as<int>();
    if (g_dims->count()) synth.volume_dim = g_dims->as<int>();
    synth.validate();
    require_fresh_dir(gen_out, gen_force);
    generate_dataset(synth, n_train, n_val, n_test, gen_out);
    ordered_json snap;
    snap["command"] = "generate";
    snap["config"] = synth.to_json();
    snap["splits"] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};
    write_snapshot(gen_out + "/resolved_config.json", snap);
    std::printf("generated %d cases in %s\n", n_train + n_val + n_test,
                gen_out.c_str());
    return 0;
  }

  if (*tr) {
    if (!tr_config.empty()) tc = train_config_from_json(load_json_file(tr_config));
    if (t_lr->count()) tc.lr = t_lr->as<double>();
    if (t_ep->count()) tc.epochs = t_ep->as<int>();
    if (t_k->count()) tc.K = t_k->as<int>();
    if (t_l->count()) tc.L = t_l->as<int>();
    if (t_lam->count()) tc.lambda = t_lam->as<double>();
    if (t_sc->count()) tc.scales = t_sc->as<int>();
    if (t_sam->count()) tc.sampling = t_sam->as<std::string>();
    if (t_seed->count()) tc.seed = t_seed->as<uint64_t>();
    if (t_ci->count()) tc.checkpoint_interval = t_ci->as<int>();
    tc.validate();
    require_fresh_dir(tr_out, tr_force);

    const DatasetManifest manifest = load_dataset_manifest(tr_data);
    const std::vector<TrainCase> cases = load_cases(manifest.train);

    std::optional<DeformationModel> resume_model;
    std::optional<AdamState> resume_adam;
    if (!tr_resume.empty()) {
      AdamState adam;
      resume_model = load_checkpoint(tr_resume, &adam);
      resume_adam = std::move(adam);
    }

    ordered_json snap;
    snap["command"] = "train";
    snap["data"] = tr_data;
    snap["config"] = train_config_json(tc);
    snap["resume"] = tr_resume;
    write_snapshot(tr_out + "/resolved_config.json", snap);

    const TrainResult result = train(
        cases, tc, tr_out + "/checkpoint.json",
        resume_model ? &*resume_model : nullptr,
        resume_adam ? &*resume_adam : nullptr, [&](int epoch) {
          if (epoch % 10 == 0 || epoch == tc.epochs)
            std::printf("epoch %d/%d\n", epoch, tc.epochs), std::fflush(stdout);
        });
    write_loss_log(result.log, tr_out + "/loss_log.csv");
    std::printf("checkpoint: %s/checkpoint.json\n", tr_out.c_str());
    return 0;
  }

  if (*pr) {
    require_fresh_file(pr_out, pr_force);
    const DeformationModel model = load_checkpoint(pr_ckpt);
    const TriMesh white = read_obj(pr_mesh);
    const Volume vol = read_volume(pr_vol);
    const TriMesh pred = predict(model, white, vol, extra_smooth);
    write_obj(pred, pr_out);
    ordered_json snap;
    snap["command"] = "predict";
    snap["checkpoint"] = pr_ckpt;
    snap["mesh"] = pr_mesh;
    snap["volume"] = pr_vol;
    snap["extra_smooth"] = extra_smooth;
    write_snapshot(pr_out + ".config.json", snap);
    std::printf("wrote %s\n", pr_out.c_str());
    return 0;
  }

  if (*ev) {
    require_fresh_dir(ev_out, ev_force);
    const TriMesh pred = read_obj(ev_pred);
    const TriMesh gt = read_obj(ev_gt);
    const MetricsReport report = evaluate_meshes(pred, gt, ev_samples, ev_seed);
    write_metrics_json(report, ev_out + "/report.json");
    if (ev_map) write_error_map_csv(report, ev_out + "/error_map.csv");
    ordered_json snap;
    snap["command"] = "eval";
    snap["pred"] = ev_pred;
    snap["gt"] = ev_gt;
    snap["samples"] = ev_samples;
    snap["seed"] = ev_seed;
    write_snapshot(ev_out + "/resolved_config.json", snap);
    std::printf("chamfer %.6g  average %.6g  hausdorff %.6g\n", report.chamfer,
                report.average_abs, report.hausdorff);
    return 0;
  }

  if (*gc) {
    if (gc_vertices < 12)
      throw CLI::ValidationError("--vertices", "must be >= 12");
    int sub = 0;
    TriMesh mesh = make_icosphere(0, 1.0);
    while ((int)mesh.vertices.size() < gc_vertices && sub < 7)
      mesh = make_icosphere(++sub, 1.0);

    ModelConfig mc;
    mc.K = gc_K;
    mc.L = gc_L;
    mc.validate();

    Volume vol;
    vol.dims = {gc_dims, gc_dims, gc_dims};
    vol.data.resize(vol.voxel_count());
    Rng vrng(subkey(gc_seed, 0x564F4Cull));  // "VOL"
    for (float& f : vol.data) f = (float)vrng.uniform();

    // Place the mesh inside the volume and give every layer random weights:
    // a zeroed output layer would leave upstream gradients identically zero.
    const double c0 = (gc_dims - 1) / 2.0;
    for (Vec3& v : mesh.vertices)
      v = Vec3{c0, c0, c0} + v * (0.35 * (gc_dims - 1));
    DeformationModel model =
        DeformationModel::create(mc, subkey(gc_seed, 0x504152ull), false);
    model.set_normalization_from(vol);

    Rng trng(subkey(gc_seed, 0x544752ull));  // "TGR"
    std::vector<Vec3> target = mesh.vertices;
    for (Vec3& t : target)
      t += Vec3{trng.uniform(-1, 1), trng.uniform(-1, 1), trng.uniform(-1, 1)};

    const GradCheckReport report =
        model_grad_check(model, mesh, vol, target, gc_eps, gc_floor);
    std::printf(
        "gradcheck: max relative error %.3e over %zu coordinates "
        "(%zu kink-skipped, %.1f s, %d vertices, K=%d, L=%d)\n",
        report.max_rel_error, report.coords_checked, report.coords_skipped, report.seconds,
        (int)mesh.vertices.size(), gc_K, gc_L);
    if (!(report.max_rel_error < gc_threshold)) {
      std::fprintf(stderr, "gradcheck FAILED: %.3e >= %.3e\n",
                   report.max_rel_error, gc_threshold);
      return 3;
    }
    return 0;
  }

  if (*ab) {
    if (!ab_config.empty()) ac = train_config_from_json(load_json_file(ab_config));
    if (a_lr->count()) ac.lr = a_lr->as<double>();
    if (a_ep->count()) ac.epochs = a_ep->as<int>();
    if (a_k->count()) ac.K = a_k->as<int>();
    if (a_l->count()) ac.L = a_l->as<int>();
    if (a_lam->count()) ac.lambda = a_lam->as<double>();
    if (a_seed->count()) ac.seed = a_seed->as<uint64_t>();
    ac.validate();
    require_fresh_dir(ab_out, ab_force);

    const DatasetManifest manifest = load_dataset_manifest(ab_data);
    const std::vector<TrainCase> cases = load_cases(manifest.train);
    const std::vector<TrainCase> test_cases = load_cases(manifest.test);
    if (test_cases.empty()) throw format_error("ablate: empty test split");

    struct Variant {
      const char* name;
      std::string sampling;
      int scales;
    };
    const Variant variants[] = {{"cube", "cube", 3},
                                {"single_scale", "cube", 1},
                                {"point", "point", 3}};

    ordered_json snap;
    snap["command"] = "ablate";
    snap["data"] = ab_data;
    snap["config"] = train_config_json(ac);
    write_snapshot(ab_out + "/resolved_config.json", snap);

    std::FILE* csv = std::fopen((ab_out + "/ablation.csv").c_str(), "w");
    if (!csv) throw io_error("cannot write " + ab_out + "/ablation.csv");
    std::fprintf(csv, "variant,chamfer,average_abs,hausdorff\n");

    EvalSummary base;
    for (const TrainCase& c : test_cases) {
      const MetricsReport r =
          evaluate_meshes(c.white, c.pial, ab_samples, ab_eval_seed);
      base.chamfer += r.chamfer;
      base.average_abs += r.average_abs;
      base.hausdorff += r.hausdorff;
    }
    base.chamfer /= (double)test_cases.size();
    base.average_abs /= (double)test_cases.size();
    base.hausdorff /= (double)test_cases.size();
    std::fprintf(csv, "undeformed,%.17g,%.17g,%.17g\n", base.chamfer,
                 base.average_abs, base.hausdorff);

    for (const Variant& v : variants) {
      TrainConfig vc = ac;
      vc.sampling = v.sampling;
      vc.scales = v.scales;
      const std::string vdir = ab_out + "/" + v.name;
      fs::create_directories(vdir);
      std::printf("training variant %s...\n", v.name);
      std::fflush(stdout);
      const TrainResult result =
          train(cases, vc, vdir + "/checkpoint.json", nullptr, nullptr);
      write_loss_log(result.log, vdir + "/loss_log.csv");
      const EvalSummary s = eval_cases_mean(result.model, test_cases,
                                            ab_samples, ab_eval_seed, 1);
      std::fprintf(csv, "%s,%.17g,%.17g,%.17g\n", v.name, s.chamfer,
                   s.average_abs, s.hausdorff);
      std::printf("%s: chamfer %.6g average %.6g hausdorff %.6g\n", v.name,
                  s.chamfer, s.average_abs, s.hausdorff);
      std::fflush(stdout);
    }
    if (std::fclose(csv) != 0)
      throw io_error("failed to write " + ab_out + "/ablation.csv");
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const format_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const io_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
