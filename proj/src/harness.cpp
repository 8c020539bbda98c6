#include "skattn/harness.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>


#include "skattn/archive.hpp"
#include "skattn/error.hpp"
#include "skattn/image_io.hpp"
#include "skattn/metrics.hpp"
#include "skattn/ops.hpp"

namespace skattn {

Model build_model(const RunConfig& config) {
  return Model::create(config.unet, config.adapter, config.schedule);
}

double smoothed_loss(const std::vector<TrainLogRow>& log, int window) {
  if (log.empty()) return 0.0;
  const std::size_t n = std::min(log.size(), static_cast<std::size_t>(std::max(window, 1)));
  double sum = 0.0;
  for (std::size_t i = log.size() - n; i < log.size(); ++i) sum += log[i].loss_total;
  return sum / static_cast<double>(n);
}

void write_loss_csv_header(std::ostream& out) {
  out << "step,t_sampled,loss_total,loss_mean,loss_masked\n";
}

void write_loss_csv_row(std::ostream& out, const TrainLogRow& row) {
  out << row.step << ',';
  for (std::size_t i = 0; i < row.timesteps.size(); ++i) out << (i ? " " : "") << row.timesteps[i];
  char buf[96];
  std::snprintf(buf, sizeof buf, ",%.9g,%.9g,%.9g\n", row.loss_total, row.loss_mean, row.loss_masked);
  out << buf;
}

namespace {

TrainLogRow to_row(int step, const TrainStepResult& r) {
  return TrainLogRow{step, r.timesteps, r.loss_total, r.loss_mean, r.loss_masked};
}

}  // namespace

std::vector<TrainLogRow> pretrain_base(BaseUNet& base, const NoiseSchedule& schedule,
                                       const RunConfig& config, std::ostream* progress) {
  const auto& tc = config.train;
  std::vector<TrainLogRow> log;
  if (tc.base_steps <= 0) return log;
  const auto data = synth_dataset(tc.base_samples, config.seed + 100, config.synth);
  const NamedTensors params = base.named();
  for (const auto& [name, t] : params) t.impl()->requires_grad = true;

  AdamConfig ac;
  ac.lr_max = tc.base_lr;
  ac.lr_min = tc.base_lr * 0.01;
  ac.total_steps = tc.base_steps;
  ac.grad_clip = tc.grad_clip;
  Adam adam(params, ac);
  std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ULL + 5);
  std::uniform_int_distribution<int> pick(0, 2 * tc.base_samples - 1);
  std::uniform_int_distribution<int> step_dist(0, schedule.steps - 1);
  const Tensor no_mask = Tensor::zeros(data.front().driving.shape());
  for (int step = 0; step < tc.base_steps; ++step) {
    TrainLogRow row{step, {}, 0.0, 0.0, 0.0};
    {
      Graph graph;
      GraphScope scope(graph);
      Tensor total;
      for (int k = 0; k < tc.base_batch_size; ++k) {
        const int i = pick(rng);
        const Tensor& x0 = i % 2 ? data[i / 2].reference : data[i / 2].driving;
        const int t = step_dist(rng);
        const Tensor noise = gaussian_noise(x0.shape(), rng);
        const Tensor pred = unet_forward(base, nullptr, q_sample(x0, t, noise, schedule), t, nullptr, nullptr);
        const Tensor& target = config.schedule.prediction == Prediction::kSample ? x0 : noise;
        const Tensor l = weighted_loss(target, pred, no_mask, t, tc.eps_norm).total;
        total = total.defined() ? ops::add(total, l) : l;
        row.timesteps.push_back(t);
      }
      total = ops::scale(total, 1.0 / tc.base_batch_size);
      row.loss_total = row.loss_mean = total.item();
      graph.backward(total);
    }
    adam.step();
    log.push_back(row);
    if (progress && (step % 100 == 0 || step == tc.base_steps - 1)) {
      *progress << "base step " << step << " loss " << row.loss_total << " smoothed " << smoothed_loss(log)
                << '\n'
                << std::flush;
    }
  }
  for (const auto& [name, t] : params) {
    t.impl()->requires_grad = false;
    t.impl()->grad.clear();
  }
  return log;
}

TrainRunResult run_training(Model& model, const RunConfig& config, std::ostream* csv,
                            std::ostream* progress, const std::function<void(int)>& after_step) {
  const auto& tc = config.train;
  TrainRunResult result;
  const auto t0 = std::chrono::steady_clock::now();
  result.base_log = pretrain_base(model.base, model.schedule, config, progress);
  result.base_digest_before = weights_digest(model.base.named());

  const auto data = synth_dataset(tc.samples, config.seed, config.synth);
  std::vector<ReferenceFeatures> refs(data.size());
  std::vector<TrainExample> examples(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    refs[i] = reference_pass(data[i].reference, model.base);
    examples[i] = TrainExample{data[i].reference, data[i].driving, data[i].condition(), data[i].mask,
                               &refs[i]};
  }

  AdamConfig ac;
  ac.lr_max = tc.lr_max;
  ac.lr_min = tc.lr_min;
  ac.total_steps = tc.steps;
  ac.grad_clip = tc.grad_clip;
  Adam adam(model.adapters.appearance_parameters(), ac);
  const TrainOptions opts{tc.eps_norm, tc.blur_min, tc.blur_max};
  std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ULL + 17);
  std::uniform_int_distribution<int> pick(0, tc.samples - 1);

  if (csv) write_loss_csv_header(*csv);
  std::vector<TrainExample> batch(static_cast<std::size_t>(tc.batch_size));
  for (int step = 0; step < tc.steps; ++step) {
    for (auto& e : batch) e = examples[static_cast<std::size_t>(pick(rng))];
    const auto r = train_step(model, adam, batch, rng, opts);
    result.log.push_back(to_row(step, r));
    if (step == 0) result.initial_loss = r.loss_total;
    if (csv && (step % std::max(tc.log_every, 1) == 0 || step == tc.steps - 1)) {
      write_loss_csv_row(*csv, result.log.back());
    }
    if (progress && (step % 100 == 0 || step == tc.steps - 1)) {
      *progress << "step " << step << " loss " << r.loss_total << " smoothed "
                << smoothed_loss(result.log) << " lr " << r.lr << '\n'
                << std::flush;
    }
    if (after_step) after_step(step);
  }

  if (tc.motion_steps > 0) {
    const int n_clips = 16;
    std::vector<std::vector<SynthSample>> clips;
    std::vector<ReferenceFeatures> clip_refs;
    std::vector<MotionExample> motion;
    for (int c = 0; c < n_clips; ++c) {
      clips.push_back(synth_clip(tc.motion_frames, config.seed * 1000 + 7 + c, config.synth));
      clip_refs.push_back(reference_pass(clips.back().front().reference, model.base));
    }
    for (int c = 0; c < n_clips; ++c) {
      MotionExample m;
      for (const auto& s : clips[c]) {
        m.latents.push_back(s.driving);
        m.conditions.push_back(s.condition());
      }
      m.reference_features = &clip_refs[c];
      motion.push_back(std::move(m));
    }
    AdamConfig mc = ac;
    mc.lr_max = tc.motion_lr;
    mc.lr_min = tc.motion_lr * 0.01;
    mc.total_steps = tc.motion_steps;
    Adam motion_adam(model.adapters.motion_parameters(), mc);
    std::uniform_int_distribution<int> pick_clip(0, n_clips - 1);
    for (int step = 0; step < tc.motion_steps; ++step) {
      const auto r = motion_train_step(model, motion_adam, motion[pick_clip(rng)], rng, opts);
      result.motion_log.push_back(to_row(step, r));
      if (progress && (step % 100 == 0 || step == tc.motion_steps - 1)) {
        *progress << "motion step " << step << " loss " << r.loss_total << '\n' << std::flush;
      }
    }
  }

  result.smoothed_final = smoothed_loss(result.log);
  result.base_digest_after = weights_digest(model.base.named());
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

namespace {

NamedTensors prefixed(const NamedTensors& tensors, const std::string& prefix) {
  NamedTensors out;
  out.reserve(tensors.size());
  for (const auto& [name, t] : tensors) out.emplace_back(prefix + name, t);
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const RunConfig& config) {
  nlohmann::json meta;
  meta["config"] = to_json(config);
  meta["base_digest"] = weights_digest(model.base.named());
  meta["adapter_digest"] = weights_digest(model.adapters.named());
  NamedTensors all = prefixed(model.base.named(), "base.");
  for (auto& e : prefixed(model.adapters.named(), "adapter.")) all.push_back(std::move(e));
  save_weights(path, all, meta);
}

Model load_checkpoint(const std::string& path, RunConfig* config_out) {
  const WeightArchive archive = load_weights(path);
  if (!archive.metadata.contains("config") || !archive.metadata.contains("base_digest")) {
    throw CorruptHeader("checkpoint metadata lacks config or base_digest");
  }
  RunConfig config = config_from_json(archive.metadata["config"]);
  Model model = build_model(config);
  assign_weights(prefixed(model.base.named(), "base."), archive);
  if (weights_digest(model.base.named()) != archive.metadata["base_digest"].get<std::string>()) {
    throw CorruptHeader("base weights differ from the checkpoint's base digest");
  }
  assign_weights(prefixed(model.adapters.named(), "adapter."), archive);
  if (config_out) *config_out = config;
  return model;
}

HeldoutResult evaluate_heldout(const Model& model, const RunConfig& config) {
  HeldoutResult out;
  const auto held = synth_dataset(config.train.heldout_samples, config.seed + 1, config.synth);
  std::mt19937_64 rng(config.seed + 2);
  for (const auto& h : held) {
    const auto ref = reference_pass(h.reference, model.base);
    const auto control = encode_condition(model, h.condition());
    const Tensor sample = ddim_sample(model, gaussian_noise(h.driving.shape(), rng), &control, &ref,
                                      config.sampling.eval_steps, config.sampling.clip_x0);
    const Tensor truth = to_unit_range(h.driving);
    const Tensor got = to_unit_range(sample);
    const Tensor copy = to_unit_range(h.reference);
    out.model_psnr += psnr(got, truth);
    out.copy_psnr += psnr(copy, truth);
    out.model_ssim += ssim(got, truth);
    out.copy_ssim += ssim(copy, truth);
  }
  out.samples = static_cast<int>(held.size());
  if (out.samples > 0) {
    const double n = out.samples;
    out.model_psnr /= n;
    out.copy_psnr /= n;
    out.model_ssim /= n;
    out.copy_ssim /= n;
  }
  return out;
}

ConditionScript load_condition_script(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open script " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("script: ") + e.what());
  }
  ConditionScript script;
  try {
    script.identity_seed = j.value("identity_seed", std::uint64_t{0});
    const auto& frames = j.at("frames");
    if (!frames.is_array() || frames.empty()) throw InvalidArgument("script: frames must be a non-empty array");
    constexpr double kDeg = std::numbers::pi / 180.0;
    for (const auto& f : frames) {
      const auto t = f.at("translation").get<std::vector<double>>();
      if (t.size() != 3) throw InvalidArgument("script: translation needs 3 values");
      script.poses.push_back(PoseRT::from_angles(f.value("yaw_deg", 0.0) * kDeg,
                                                 f.value("pitch_deg", 0.0) * kDeg,
                                                 f.value("roll_deg", 0.0) * kDeg, {t[0], t[1], t[2]}));
      auto c = f.value("coefficients", std::vector<double>{});
      if (c.size() > static_cast<std::size_t>(kExpressionCoefficients)) {
        throw InvalidArgument("script: at most 51 coefficients per frame");
      }
      c.resize(kExpressionCoefficients, 0.0);
      script.coefficients.emplace_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("script: ") + e.what());
  }
  return script;
}

std::vector<SynthSample> render_script(const ConditionScript& script, const SynthConfig& config) {
  std::mt19937_64 rng(script.identity_seed);
  const Identity id = random_identity(rng);
  std::vector<SynthSample> out;
  for (std::size_t i = 0; i < script.poses.size(); ++i) {
    out.push_back(make_sample(id, script.poses[i], script.coefficients[i], ExpressionCoefficients{}, config));
  }
  return out;
}

double mean_adjacent_difference(const VideoClip& clip) {
  if (clip.frames.size() < 2) return 0.0;
  double total = 0.0;
  for (std::size_t f = 1; f < clip.frames.size(); ++f) {
    const auto a = clip.frames[f - 1].data();
    const auto b = clip.frames[f].data();
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    total += s / static_cast<double>(a.size());
  }
  return total / static_cast<double>(clip.frames.size() - 1);
}

std::string clip_digest(const std::vector<Tensor>& frames) {
  NamedTensors named;
  for (std::size_t i = 0; i < frames.size(); ++i) named.emplace_back("frame" + std::to_string(i), frames[i]);
  return weights_digest(named);
}

RasterFixtureResult check_raster_fixture(const std::string& json_path, bool write) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open " + json_path);
  nlohmann::json j;
  RasterFixtureResult out;
  out.name = std::filesystem::path(json_path).stem().string();
  const std::string png = (std::filesystem::path(json_path).parent_path() / (out.name + ".png")).string();
  try {
    in >> j;
    const auto& k = j.at("intrinsics");
    CameraIntrinsics cam{k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                         k.at("cy").get<double>()};
    BoxHalfExtents box{j.at("half_extents").at("a").get<double>(), j.at("half_extents").at("b").get<double>()};
    PoseRT pose;
    const auto r = j.at("rotation").get<std::vector<double>>();
    const auto t = j.at("translation").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3) throw InvalidArgument(out.name + ": bad rotation or translation");
    std::copy(r.begin(), r.end(), pose.rotation.begin());
    std::copy(t.begin(), t.end(), pose.translation.begin());
    const int w = j.at("width").get<int>(), h = j.at("height").get<int>();

    const auto corners = box_corner_pixels(pose, cam, box);
    const auto expected = j.at("corner_pixels").get<std::vector<std::array<int, 2>>>();
    out.corners_match = expected.size() == 4 && std::equal(corners.begin(), corners.end(), expected.begin());
    const Image image = rasterize_box_edges(pose, cam, box, w, h);
    if (write) {
      write_png(png, image);
      out.image_match = true;
      out.detail = "written";
    } else {
      out.image_match = read_png(png) == image;
      if (!out.image_match) out.detail = "pixels differ from " + png;
    }
    if (!out.corners_match) out.detail += (out.detail.empty() ? "" : "; ") + std::string("corner pixels differ");
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(out.name + ": " + e.what());
  }
  return out;
}

ReenactResult run_reenactment(const Model& model, const RunConfig& config,
                              const std::vector<SynthSample>& frames, std::uint64_t seed) {
  if (frames.empty()) throw InvalidArgument("reenactment needs at least one frame");
  const auto& sc = config.sampling;
  ReenactResult out;
  const auto ref = reference_pass(frames.front().reference, model.base);
  std::vector<ControlPyramid> controls;
  for (const auto& f : frames) {
    controls.push_back(encode_condition(model, f.condition()));
    out.ground_truth.push_back(f.driving);
  }
  std::mt19937_64 rng(seed);
  const Shape shape = frames.front().driving.shape();
  const Tensor shared = gaussian_noise(shape, rng);
  const Tensor renoise = gaussian_noise(shape, rng);
  out.stage1 = stage1_generate(model, ref, controls, shared, sc.stage1_steps, sc.clip_x0);
  out.stage1.fps = sc.fps;
  out.stage2 = stage2_generate(model, out.stage1, ref, controls, renoise, sc.stage2);
  out.stage1_flicker = mean_adjacent_difference(out.stage1);
  out.stage2_flicker = mean_adjacent_difference(out.stage2.clip);
  std::vector<Tensor> all = out.stage1.frames;
  all.insert(all.end(), out.stage2.clip.frames.begin(), out.stage2.clip.frames.end());
  out.digest = clip_digest(all);
  return out;
}

}  // namespace skattn
