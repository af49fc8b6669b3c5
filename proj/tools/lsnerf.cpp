// lsnerf command-line front end: scene synthesis, phased training,
// rendering, evaluation, and benchmarking.
//
//   lsnerf synth   --out scene/ --views 20 --res 64 --seed 7
//   lsnerf train   --manifest scene/manifest.json --out run/ --preset desk
//   lsnerf render  --checkpoint run/phase_c.lsnf --out frames/ --mode latent --spiral 120
//   lsnerf eval    --renders frames/ --manifest scene/manifest.json --out eval/
//   lsnerf bench   --checkpoint run/phase_c.lsnf --out bench/ --frames 120
//
// Every subcommand is deterministic under --seed in deterministic mode;
// artifact paths live under --out.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lsnerf/lsnerf.hpp"

namespace fs = std::filesystem;
using namespace lsnerf;

namespace {

struct ModelBundle {
  FieldConfig field_config;
  AEConfig ae_config;
  std::unique_ptr<Field<float>> field;
  std::unique_ptr<Autoencoder<float>> ae;
  std::string phase;
};

ModelBundle load_models(const std::string& checkpoint_path) {
  const Checkpoint cp = load_checkpoint(checkpoint_path);
  ModelBundle mb;
  mb.field_config = cp.field_config;
  mb.ae_config = cp.ae_config;
  mb.field = std::make_unique<Field<float>>(cp.field_config, 0);
  mb.ae = std::make_unique<Autoencoder<float>>(cp.ae_config, 0);
  restore_params(mb.field->params(), cp.field_params);
  restore_params(mb.ae->encoder_params(), cp.encoder_params);
  restore_params(mb.ae->decoder_params(), cp.decoder_params);
  mb.phase = cp.phase;
  return mb;
}

PresetBundle resolve_preset(const std::string& name) {
  if (name == "paper") return preset_paper();
  if (name == "desk") return preset_desk();
  throw CLI::ValidationError("--preset", "unknown preset '" + name + "'");
}

void write_config_echo(const std::string& out_dir, const PresetBundle& p,
                       const std::string& preset_name, uint64_t seed) {
  nlohmann::json j;
  j["version"] = 1;
  j["preset"] = preset_name;
  j["seed"] = seed;
  j["train"] = p.train.to_json();
  j["field"] = {{"latent_dim", p.field.latent_dim},
                {"encoding", p.field.encoding == EncodingKind::kHashGrid ? "hashgrid" : "fourier"},
                {"fourier_pos_levels", p.field.fourier_pos_levels},
                {"fourier_dir_levels", p.field.fourier_dir_levels},
                {"trunk_width", p.field.trunk_width},
                {"trunk_depth", p.field.trunk_depth},
                {"color_hidden", p.field.color_hidden},
                {"latent_hidden", p.field.latent_hidden}};
  j["autoencoder"] = {{"latent_channels", p.ae.latent_channels},
                      {"encoder_widths", p.ae.encoder_widths},
                      {"decoder_widths", p.ae.decoder_widths}};
  std::ofstream os(out_dir + "/config_echo.json");
  if (!os) throw std::runtime_error("cannot write config echo in " + out_dir);
  os << j.dump(2) << "\n";
}

std::string frame_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%03d", index);
  return buf;
}

int cmd_synth(const std::string& out, int views, int test_views, int res,
              uint64_t seed) {
  if (res % 8) throw CLI::ValidationError("--res", "resolution must be a multiple of 8");
  SceneSpec spec = default_scene_spec();
  spec.views = views;
  spec.test_views = test_views;
  spec.width = spec.height = res;
  spec.seed = seed;
  const PosedDataset ds = generate_synthetic_scene(spec);
  const std::string manifest = save_dataset(out, ds);
  std::cout << manifest << "\n";
  return 0;
}

int cmd_train(const std::string& manifest, const std::string& out,
              const std::string& preset_name, uint64_t seed, bool skip_a, bool skip_c,
              const std::string& resume, int threads, int override_b_iters) {
  fs::create_directories(out);
  const PosedDataset ds = load_dataset(manifest);
  PresetBundle p = resolve_preset(preset_name);
  p.train.seed = seed;
  p.train.threads = threads;
  if (override_b_iters > 0) p.train.b_iterations = override_b_iters;
  write_config_echo(out, p, preset_name, seed);

  Trainer<float> trainer(ds, p.field, p.ae, p.train, out);
  if (!resume.empty()) {
    const Checkpoint cp = load_checkpoint(resume);
    trainer.restore(cp);
    std::cout << "resumed from " << resume << " (phase " << cp.phase << ", iteration "
              << cp.iteration << ")\n";
  }

  auto save_phase = [&](const std::string& tag) {
    const std::string path = out + "/phase_" + tag + ".lsnf";
    save_checkpoint(path, trainer.checkpoint());
    std::cout << "wrote " << path << "\n";
  };

  if (!skip_a) {
    trainer.run_phase_a();
    save_phase("a");
  }
  trainer.run_phase_b();
  save_phase("b");
  std::cout << "test RGB PSNR after phase B: " << trainer.eval_rgb_psnr("test") << " dB\n";
  if (!skip_c) {
    trainer.run_phase_c();
    save_phase("c");
    std::cout << "test decoded PSNR after phase C: " << trainer.eval_decoded_psnr("test")
              << " dB\n";
  }
  trainer.write_log(out + "/training_log.jsonl");
  return 0;
}

int cmd_render(const std::string& checkpoint, const std::string& manifest,
               const std::string& out, const std::string& mode, int spiral,
               int samples, int threads) {
  fs::create_directories(out);
  ModelBundle mb = load_models(checkpoint);
  if (mode == "latent" && mb.phase != "B" && mb.phase != "C")
    throw std::runtime_error("latent rendering requires a phase-B or phase-C checkpoint; "
                             "this one is from phase " + mb.phase);
  const PosedDataset ds = load_dataset(manifest);

  std::vector<Camera> cams;
  std::vector<std::string> names;
  if (spiral > 0) {
    std::vector<Camera> train_cams;
    for (int i : ds.split_indices("train")) train_cams.push_back(ds.frames[i].camera);
    cams = spiral_path(train_cams, spiral);
    for (int i = 0; i < spiral; ++i) names.push_back(frame_name(i));
  } else {
    for (int i : ds.split_indices("test")) {
      cams.push_back(ds.frames[i].camera);
      names.push_back(ds.frames[i].id);
    }
  }

  RenderOptions opt;
  opt.near = ds.near;
  opt.far = ds.far;
  opt.samples_per_ray = samples;
  opt.threads = threads;

  for (size_t i = 0; i < cams.size(); ++i) {
    opt.frame = i;
    Image img;
    DepthMap dm;
    if (mode == "rgb") {
      std::tie(img, dm) = render_rgb_image<float>(cams[i], *mb.field, opt);
    } else if (mode == "latent") {
      auto [li, ldm] = render_latent_image<float>(cams[i], *mb.field,
                                                  mb.ae->latent_channels(), opt);
      img = mb.ae->decode_image(li);
      // Depth at latent resolution accompanies the latent path.
      dm = std::move(ldm);
    } else {
      throw CLI::ValidationError("--mode", "expected rgb or latent");
    }
    save_ppm(out + "/" + names[i] + ".ppm", img);
    save_depth(out + "/" + names[i] + ".dpth", dm);
  }
  // Poses for downstream consistency metrics.
  nlohmann::json j;
  j["version"] = 1;
  j["type"] = "render_index";
  j["mode"] = mode;
  j["frames"] = nlohmann::json::array();
  for (size_t i = 0; i < cams.size(); ++i)
    j["frames"].push_back({{"id", names[i]},
                           {"image", names[i] + ".ppm"},
                           {"depth", names[i] + ".dpth"},
                           {"width", cams[i].width},
                           {"height", cams[i].height},
                           {"fx", cams[i].fx}, {"fy", cams[i].fy},
                           {"cx", cams[i].cx}, {"cy", cams[i].cy},
                           {"pose", [&] {
                              nlohmann::json a = nlohmann::json::array();
                              for (double v : cams[i].camera_to_world.m) a.push_back(v);
                              return a;
                            }()}});
  std::ofstream os(out + "/render_index.json");
  os << j.dump(2) << "\n";
  std::cout << "wrote " << cams.size() << " frames to " << out << "\n";
  return 0;
}

std::vector<RccFrame> load_render_dir(const std::string& dir) {
  std::ifstream is(dir + "/render_index.json");
  if (!is) throw std::runtime_error("no render_index.json in " + dir);
  nlohmann::json j;
  is >> j;
  std::vector<RccFrame> frames;
  for (const auto& jf : j.at("frames")) {
    RccFrame f;
    f.image = load_ppm(dir + "/" + jf.at("image").get<std::string>());
    f.depth = load_depth(dir + "/" + jf.at("depth").get<std::string>());
    f.camera.width = jf.at("width");
    f.camera.height = jf.at("height");
    f.camera.fx = jf.at("fx");
    f.camera.fy = jf.at("fy");
    f.camera.cx = jf.at("cx");
    f.camera.cy = jf.at("cy");
    const auto& pose = jf.at("pose");
    for (int i = 0; i < 16; ++i) f.camera.camera_to_world.m[i] = pose[i].get<double>();
    frames.push_back(std::move(f));
  }
  return frames;
}

int cmd_eval(const std::string& renders, const std::string& manifest,
             const std::string& out, bool no_occlusion_mask) {
  fs::create_directories(out);
  MetricReport report;
  std::vector<RccFrame> frames = load_render_dir(renders);

  if (!manifest.empty()) {
    const PosedDataset ds = load_dataset(manifest);
    const auto test_idx = ds.split_indices("test");
    // Reference-based PSNR against held-out views, matched by frame id.
    std::ifstream is(renders + "/render_index.json");
    nlohmann::json j;
    is >> j;
    size_t fi = 0;
    double acc = 0;
    int matched = 0;
    for (const auto& jf : j.at("frames")) {
      const std::string id = jf.at("id");
      for (int ti : test_idx)
        if (ds.frames[ti].id == id && fi < frames.size()) {
          if (frames[fi].image.same_size(ds.frames[ti].image)) {
            const double db = capped_db(psnr(frames[fi].image, ds.frames[ti].image));
            report.add("psnr", db, id);
            acc += db;
            ++matched;
          }
        }
      ++fi;
    }
    if (matched) report.add("psnr_mean", acc / matched, "all");
  }

  if (frames.size() >= 2) {
    bool have_depth = true;
    for (const auto& f : frames) {
      bool any = false;
      for (uint8_t v : f.depth.valid) any |= v != 0;
      have_depth &= any;
    }
    if (have_depth) {
      RccOptions opt;
      opt.occlusion_mask = !no_occlusion_mask;
      const RccResult r = rcc(frames, opt);
      if (r.defined)
        report.add("rcc", capped_db(r.db), "0.." + std::to_string(frames.size() - 1),
                   r.coverage);
      else
        report.add("rcc_undefined", 0.0, "0.." + std::to_string(frames.size() - 1), 0.0);
    } else {
      std::cerr << "warning: depth maps missing or empty, RCC skipped\n";
    }
  }

  std::ofstream os(out + "/metrics.jsonl");
  report.dump(os);
  report.dump(std::cout);
  return 0;
}

int cmd_bench(const std::string& checkpoint, const std::string& manifest,
              const std::string& out, int frames, int samples, int threads) {
  fs::create_directories(out);
  ModelBundle mb = load_models(checkpoint);
  const PosedDataset ds = load_dataset(manifest);
  std::vector<Camera> train_cams;
  for (int i : ds.split_indices("train")) train_cams.push_back(ds.frames[i].camera);
  const std::vector<Camera> path = spiral_path(train_cams, frames);

  RenderOptions opt;
  opt.near = ds.near;
  opt.far = ds.far;
  opt.samples_per_ray = samples;
  opt.threads = threads;
  const BenchReport rep = bench(*mb.field, *mb.ae, path, opt);

  std::ofstream os(out + "/bench.json");
  os << rep.to_json().dump(2) << "\n";
  std::cout << rep.to_json().dump(2) << "\n";
  if (rep.frames > 0) {
    std::cout << "query ratio rgb:latent = " << rep.rgb_queries << ":" << rep.latent_queries;
    if (rep.latent_queries)
      std::cout << " (" << (rep.rgb_queries / std::max<uint64_t>(1, rep.latent_queries))
                << "x)";
    std::cout << "\nspeedup " << rep.speedup << "x, decoder share "
              << rep.decoder_time_share << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-space neural field renderer"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic oracle scene");
  std::string synth_out = "scene";
  int views = 20, test_views = 4, res = 64;
  uint64_t seed = 7;
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--views", views, "training views");
  synth->add_option("--test-views", test_views, "held-out views");
  synth->add_option("--res", res, "image resolution (multiple of 8)");
  synth->add_option("--seed", seed, "rng seed");

  // train
  auto* train = app.add_subcommand("train", "run the three-phase fitting");
  std::string manifest, train_out = "run", preset = "desk", resume;
  bool skip_a = false, skip_c = false, deterministic = true;
  int threads = 1, b_iters_override = 0;
  train->add_option("--manifest", manifest, "dataset manifest")->required();
  train->add_option("--out", train_out, "output directory");
  train->add_option("--preset", preset, "config preset: paper | desk");
  train->add_option("--seed", seed, "rng seed");
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--threads", threads, "worker cap");
  train->add_option("--b-iterations", b_iters_override, "override phase-B iteration count");
  train->add_flag("--skip-phase-a", skip_a, "skip AE pretraining");
  train->add_flag("--skip-phase-c", skip_c, "skip decoder distillation");
  train->add_flag("--deterministic,!--no-deterministic", deterministic,
                  "seeded deterministic mode (default on)");

  // render
  auto* render = app.add_subcommand("render", "render frames from a checkpoint");
  std::string checkpoint, render_out = "frames", mode = "latent";
  int spiral = 0, samples = 64;
  render->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  render->add_option("--manifest", manifest, "dataset manifest (cameras)")->required();
  render->add_option("--out", render_out, "output directory");
  render->add_option("--mode", mode, "rgb | latent");
  render->add_option("--spiral", spiral, "render an N-frame spiral instead of test views");
  render->add_option("--samples", samples, "quadrature samples per ray");
  render->add_option("--threads", threads, "worker cap");

  // eval
  auto* eval = app.add_subcommand("eval", "PSNR / RCC over rendered frames");
  std::string renders_dir, eval_out = "eval";
  bool no_occ = false;
  eval->add_option("--renders", renders_dir, "directory from `render`")->required();
  eval->add_option("--manifest", manifest, "manifest for reference-based PSNR");
  eval->add_option("--out", eval_out, "output directory");
  eval->add_flag("--rcc-no-occlusion-mask", no_occ, "literal reprojection, no depth check");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "time RGB vs latent+decode paths");
  std::string bench_out = "bench";
  int bench_frames = 120;
  bench_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  bench_cmd->add_option("--manifest", manifest, "dataset manifest (cameras)")->required();
  bench_cmd->add_option("--out", bench_out, "output directory");
  bench_cmd->add_option("--frames", bench_frames, "spiral length");
  bench_cmd->add_option("--samples", samples, "quadrature samples per ray");
  bench_cmd->add_option("--threads", threads, "worker cap");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_out, views, test_views, res, seed);
    if (train->parsed())
      return cmd_train(manifest, train_out, preset, seed, skip_a, skip_c, resume,
                       threads, b_iters_override);
    if (render->parsed())
      return cmd_render(checkpoint, manifest, render_out, mode, spiral, samples, threads);
    if (eval->parsed()) return cmd_eval(renders_dir, manifest, eval_out, no_occ);
    if (bench_cmd->parsed())
      return cmd_bench(checkpoint, manifest, bench_out, bench_frames, samples, threads);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
