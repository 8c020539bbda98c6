#include "skattn/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <unistd.h>

#include <CLI11.hpp>

#include "skattn/archive.hpp"
#include "skattn/diffusion.hpp"
#include "skattn/error.hpp"
#include "skattn/gradient_suite.hpp"
#include "skattn/harness.hpp"
#include "skattn/image_io.hpp"
#include "skattn/kernels.hpp"
#include "skattn/metrics.hpp"

namespace fs = std::filesystem;

namespace skattn {
namespace {

struct Usage : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig resolve_config(const std::string& path) {
  RunConfig config = path.empty() ? RunConfig{} : load_config(path);
  config.finalize();
  return config;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

Image upscale(const Image& in, int factor) {
  Image out = Image::blank(in.width * factor, in.height * factor, in.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < in.channels; ++c) out.at(x, y, c) = in.at(x / factor, y / factor, c);
  return out;
}

void write_frames(const fs::path& dir, const std::vector<Tensor>& frames, int scale) {
  ensure_dir(dir);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.png", i);
    write_png((dir / name).string(), upscale(latent_to_image(frames[i]), scale));
  }
}

double finite_or_max(double v) { return std::isfinite(v) ? v : 1e300; }

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, out;
  int steps = -1;
  int motion_steps = -1;
  bool print_config = false;
  bool skip_eval = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig config = resolve_config(a.config);
  if (a.steps >= 0) config.train.steps = a.steps;
  if (a.motion_steps >= 0) config.train.motion_steps = a.motion_steps;
  config.finalize();
  if (a.print_config) {
    out << to_json(config).dump(2) << '\n';
    return 0;
  }
  if (a.out.empty()) throw Usage("train: --out is required");
  const fs::path dir(a.out);
  ensure_dir(dir);
  { open_out(dir / "config.json") << to_json(config).dump(2) << '\n'; }

  Model model = build_model(config);
  auto csv = open_out(dir / "loss.csv");
  const int every = config.train.checkpoint_every;
  const auto result = run_training(model, config, &csv, &err, [&](int step) {
    if (every > 0 && (step + 1) % every == 0 && step + 1 < config.train.steps) {
      save_checkpoint((dir / ("checkpoint_step" + std::to_string(step + 1) + ".skw")).string(), model, config);
    }
  });
  csv.close();
  save_checkpoint((dir / "checkpoint.skw").string(), model, config);

  nlohmann::json summary;
  summary["steps"] = config.train.steps;
  summary["initial_loss"] = result.initial_loss;
  summary["smoothed_final_loss"] = result.smoothed_final;
  summary["loss_ratio"] = result.initial_loss > 0 ? result.smoothed_final / result.initial_loss : 0.0;
  summary["base_digest"] = result.base_digest_after;
  summary["base_unchanged"] = result.base_digest_before == result.base_digest_after;
  summary["seconds"] = result.seconds;
  if (!result.motion_log.empty()) summary["motion_smoothed_final_loss"] = smoothed_loss(result.motion_log);
  if (!a.skip_eval) {
    const auto h = evaluate_heldout(model, config);
    summary["heldout"] = {{"samples", h.samples},    {"model_psnr", h.model_psnr},
                          {"copy_psnr", h.copy_psnr}, {"model_ssim", h.model_ssim},
                          {"copy_ssim", h.copy_ssim}, {"psnr_gain", h.model_psnr - h.copy_psnr}};
  }
  open_out(dir / "summary.json") << summary.dump(2) << '\n';
  out << summary.dump(2) << '\n';
  return result.base_digest_before == result.base_digest_after ? 0 : 1;
}

// -------------------------------------------------------------- reenact

struct ReenactArgs {
  std::string checkpoint, out, script;
  int frames = -1;
  int scale = 4;
  bool print_config = false;
};

int cmd_reenact(const ReenactArgs& a, std::ostream& out) {
  RunConfig config;
  Model model = load_checkpoint(a.checkpoint, &config);
  config.finalize();
  if (a.frames > 0) config.sampling.clip_frames = a.frames;
  if (a.print_config) {
    out << to_json(config).dump(2) << '\n';
    return 0;
  }
  if (a.out.empty()) throw Usage("reenact: --out is required");
  if (a.scale < 1) throw Usage("reenact: --scale must be >= 1");

  std::vector<SynthSample> frames;
  if (!a.script.empty()) {
    frames = render_script(load_condition_script(a.script), config.synth);
    if (a.frames > 0 && static_cast<int>(frames.size()) > a.frames) frames.resize(static_cast<std::size_t>(a.frames));
  } else {
    frames = synth_clip(config.sampling.clip_frames, config.seed + 3, config.synth);
  }
  const auto r = run_reenactment(model, config, frames, config.seed + 4);

  const fs::path dir(a.out);
  write_frames(dir / "stage1", r.stage1.frames, a.scale);
  write_frames(dir / "stage2", r.stage2.clip.frames, a.scale);
  write_frames(dir / "truth", r.ground_truth, a.scale);

  auto clip_metrics = [&](const std::vector<Tensor>& clip) {
    double p = 0.0, s = 0.0;
    for (std::size_t i = 0; i < clip.size(); ++i) {
      p += finite_or_max(psnr(to_unit_range(clip[i]), to_unit_range(r.ground_truth[i])));
      s += ssim(to_unit_range(clip[i]), to_unit_range(r.ground_truth[i]));
    }
    const double n = static_cast<double>(clip.size());
    return nlohmann::json{{"psnr", p / n}, {"ssim", s / n}};
  };
  double copy = 0.0;
  for (const auto& t : r.ground_truth) {
    copy += finite_or_max(psnr(to_unit_range(frames.front().reference), to_unit_range(t)));
  }
  nlohmann::json metrics;
  metrics["frames"] = frames.size();
  metrics["fps"] = r.stage1.fps;
  metrics["stage1"] = clip_metrics(r.stage1.frames);
  metrics["stage2"] = clip_metrics(r.stage2.clip.frames);
  metrics["stage1"]["flicker_mad"] = r.stage1_flicker;
  metrics["stage2"]["flicker_mad"] = r.stage2_flicker;
  metrics["copy_reference_psnr"] = copy / static_cast<double>(r.ground_truth.size());
  metrics["patch_starts"] = patch_starts(static_cast<int>(frames.size()), config.sampling.stage2.patch_len,
                                         config.sampling.stage2.overlap);
  metrics["output_digest"] = r.digest;
  open_out(dir / "metrics.json") << metrics.dump(2) << '\n';
  out << metrics.dump(2) << '\n';
  return 0;
}

// ----------------------------------------------------------- bench-attn

struct BenchArgs {
  int h = 16, w = 16, l = 5, d = 64, heads = 1, repeats = 3;
  std::uint64_t seed = 7;
};

int cmd_bench_attn(const BenchArgs& a, std::ostream& out) {
  if (a.h < 1 || a.w < 1 || a.l < 1 || a.d < 1 || a.heads < 1 || a.d % a.heads != 0 || a.repeats < 1) {
    throw Usage("bench-attn: extents must be positive and d divisible by heads");
  }
  std::mt19937_64 rng(a.seed);
  auto randn = [&](Shape s) { return gaussian_noise(s, rng); };
  const FeatureMap2D map(randn({a.d, a.h, a.w}));
  const FeatureMap2D ref(randn({a.d, a.h, a.w}));
  const TokenSequence seq(randn({a.l, a.d}));
  const auto params = AttentionParams::init(a.d, a.d, a.heads, rng, false, false);

  using Clock = std::chrono::steady_clock;
  out << "variant,H,W,L,d,heads,predicted_score,predicted_value,measured_score,measured_value,exact,"
         "serial_ms,parallel_ms\n";
  bool all_exact = true;
  for (auto v : {AttentionVariant::kFlatSelf, AttentionVariant::kFlatCross, AttentionVariant::kSkCross,
                 AttentionVariant::kSkReference}) {
    auto run = [&] {
      switch (v) {
        case AttentionVariant::kFlatSelf: return flat_self_attention(map, params);
        case AttentionVariant::kFlatCross: return flat_attention_baseline(map, seq, params);
        case AttentionVariant::kSkCross: return sk_cross_attention(map, seq, params);
        case AttentionVariant::kSkReference: return sk_reference_attention(map, ref, params);
      }
      return map;
    };
    kernels::MacCounters counters;
    const auto s0 = Clock::now();
    {
      kernels::CountingScope scope(counters);
      run();
    }
    const double serial_ms = std::chrono::duration<double, std::milli>(Clock::now() - s0).count();
    double parallel_ms = 0.0;
    for (int r = 0; r < a.repeats; ++r) {
      const auto p0 = Clock::now();
      run();
      parallel_ms += std::chrono::duration<double, std::milli>(Clock::now() - p0).count();
    }
    parallel_ms /= a.repeats;
    const auto predicted = attention_op_count(a.h, a.w, a.l, a.d, v);
    const bool exact = predicted.score == counters.score && predicted.value == counters.value;
    all_exact = all_exact && exact;
    char line[320];
    std::snprintf(line, sizeof line, "%s,%d,%d,%d,%d,%d,%llu,%llu,%llu,%llu,%d,%.3f,%.3f\n", variant_name(v),
                  a.h, a.w, a.l, a.d, a.heads, static_cast<unsigned long long>(predicted.score),
                  static_cast<unsigned long long>(predicted.value),
                  static_cast<unsigned long long>(counters.score),
                  static_cast<unsigned long long>(counters.value), exact ? 1 : 0, serial_ms, parallel_ms);
    out << line;
  }
  return all_exact ? 0 : 1;
}

// ----------------------------------------------------------- grad-check

int cmd_grad_check(int shapes, std::uint64_t seed, std::ostream& out) {
  if (shapes < 1) throw Usage("grad-check: --shapes must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_gradient_suite(shapes, seed);
  int failed = 0;
  out << "op,shape,max_rel_error,passed\n";
  for (const auto& c : cases) {
    char err[32];
    std::snprintf(err, sizeof err, "%.3e", c.max_rel_error);
    out << c.op << ",\"" << c.shape << "\"," << err << ',' << (c.passed ? 1 : 0) << '\n';
    failed += c.passed ? 0 : 1;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "# " << cases.size() - failed << "/" << cases.size() << " passed in " << secs << " s\n";
  return failed == 0 ? 0 : 1;
}

// -------------------------------------------------------- raster-golden

int cmd_raster_golden(const std::string& dir, bool write, std::ostream& out) {
  if (!fs::is_directory(dir)) throw Usage("raster-golden: not a directory: " + dir);
  std::vector<fs::path> sidecars;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") sidecars.push_back(e.path());
  }
  std::sort(sidecars.begin(), sidecars.end());
  if (sidecars.empty()) throw Usage("raster-golden: no .json sidecars in " + dir);
  bool ok = true;
  for (const auto& p : sidecars) {
    const auto r = check_raster_fixture(p.string(), write);
    const bool pass = r.corners_match && r.image_match;
    ok = ok && pass;
    out << (pass ? "PASS " : "FAIL ") << r.name << (r.detail.empty() ? "" : "  (" + r.detail + ")") << '\n';
  }
  return ok ? 0 : 1;
}

// ------------------------------------------------------------ self-test

int cmd_self_test(std::ostream& out) {
  int failures = 0;
  auto report = [&](const char* name, bool pass) {
    out << (pass ? "PASS " : "FAIL ") << name << '\n';
    failures += pass ? 0 : 1;
  };

  const auto cases = run_gradient_suite(1, 3);
  report("gradient suite (1 shape per op)",
         std::all_of(cases.begin(), cases.end(), [](const GradientCase& c) { return c.passed; }));

  RunConfig config;
  config.finalize();
  const Model model = build_model(config);
  std::mt19937_64 rng(5);
  const auto sample = synth_dataset(1, 9, config.synth).front();
  const auto ref = reference_pass(sample.reference, model.base);
  const auto control = encode_condition(model, sample.condition());
  const Tensor z = gaussian_noise(sample.driving.shape(), rng);
  const Tensor with = unet_forward(model.base, &model.adapters, z, 500, &control, &ref);
  const Tensor without = unet_forward(model.base, nullptr, z, 500, nullptr, nullptr);
  report("zero-init adapters leave the base output unchanged",
         std::equal(with.data().begin(), with.data().end(), without.data().begin()));

  {
    kernels::MacCounters counters;
    std::mt19937_64 r(1);
    const auto params = AttentionParams::init(64, 64, 4, r, false, false);
    const FeatureMap2D map(gaussian_noise({64, 16, 16}, r));
    const TokenSequence seq(gaussian_noise({5, 64}, r));
    {
      kernels::CountingScope scope(counters);
      sk_cross_attention(map, seq, params);
    }
    report("sk-cross 16x16 L=5 d=64 counts 163840 score MACs", counters.score == 163840);
  }

  {
    const Tensor a = Tensor::full({1, 2, 2}, 0.5);
    const Tensor b = Tensor::full({1, 2, 2}, 0.0);
    const auto l = weighted_loss(a, b, Tensor::full({1, 2, 2}, 1.0), 1000, 1e-8);
    report("weighted loss at t=1000 is the mean term", l.total.item() == l.mean_term && l.masked_term == 0.0 && l.mean_term == 0.25);
  }

  {
    const fs::path tmp = fs::temp_directory_path() / ("skattn_selftest_" + std::to_string(::getpid()) + ".skw");
    save_weights(tmp.string(), model.adapters.named());
    const auto loaded = load_weights(tmp.string());
    fs::remove(tmp);
    report("weight archive round trip", weights_digest(loaded.tensors) == weights_digest(model.adapters.named()));
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int cli_run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knitted-attention reenactment toolkit", "skattn"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train the adapters on synthetic pairs");
  train_cmd->add_option("--config", train.config, "JSON run configuration");
  train_cmd->add_option("--out", train.out, "Output directory");
  train_cmd->add_option("--steps", train.steps, "Override train.steps")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--motion-steps", train.motion_steps, "Override train.motion_steps")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_flag("--print-config", train.print_config, "Print the resolved configuration and exit");
  train_cmd->add_flag("--skip-eval", train.skip_eval, "Skip the held-out evaluation");

  ReenactArgs reenact;
  auto* reenact_cmd = app.add_subcommand("reenact", "Generate a clip from a checkpoint");
  reenact_cmd->add_option("--checkpoint", reenact.checkpoint, "Checkpoint written by train")->required();
  reenact_cmd->add_option("--out", reenact.out, "Output directory");
  reenact_cmd->add_option("--script", reenact.script, "JSON condition script (default: synthetic clip)");
  reenact_cmd->add_option("--frames", reenact.frames, "Frame count")->check(CLI::PositiveNumber);
  reenact_cmd->add_option("--scale", reenact.scale, "PNG upscaling factor");
  reenact_cmd->add_flag("--print-config", reenact.print_config, "Print the checkpoint configuration and exit");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench-attn", "Predicted vs counted attention MACs and timings");
  bench_cmd->add_option("--H", bench.h, "Map height");
  bench_cmd->add_option("--W", bench.w, "Map width");
  bench_cmd->add_option("--L", bench.l, "Token count");
  bench_cmd->add_option("--d", bench.d, "Model width");
  bench_cmd->add_option("--heads", bench.heads, "Attention heads");
  bench_cmd->add_option("--repeats", bench.repeats, "Timed repetitions");
  bench_cmd->add_option("--seed", bench.seed, "Input seed");

  int shapes = 5;
  std::uint64_t grad_seed = 1;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  grad_cmd->add_option("--shapes", shapes, "Random shapes per op");
  grad_cmd->add_option("--seed", grad_seed, "Shape and value seed");

  std::string raster_dir;
  bool raster_write = false;
  auto* raster_cmd = app.add_subcommand("raster-golden", "Compare or regenerate pose raster fixtures");
  raster_cmd->add_option("--dir", raster_dir, "Fixture directory")->required();
  raster_cmd->add_flag("--write", raster_write, "Regenerate the PNGs");

  auto* self_cmd = app.add_subcommand("self-test", "Quick end-to-end sanity checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(train, out, err);
    if (*reenact_cmd) return cmd_reenact(reenact, out);
    if (*bench_cmd) return cmd_bench_attn(bench, out);
    if (*grad_cmd) return cmd_grad_check(shapes, grad_seed, out);
    if (*raster_cmd) return cmd_raster_golden(raster_dir, raster_write, out);
    if (*self_cmd) return cmd_self_test(out);
  } catch (const Usage& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace skattn
