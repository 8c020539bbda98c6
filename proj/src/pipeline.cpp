#include "skattn/pipeline.hpp"

#include <cmath>

#include "skattn/error.hpp"
#include "skattn/ops.hpp"

namespace skattn {

Model Model::create(const UNetConfig& unet, const AdapterConfig& adapter,
                    const ScheduleConfig& schedule) {
  return Model{unet,
               adapter,
               schedule,
               BaseUNet::init(unet),
               AdapterWeights::init(adapter, unet),
               ToyPatchEncoder(adapter.expr_width, adapter.encoder_seed),
               NoiseSchedule::linear(schedule.steps, schedule.beta_start, schedule.beta_end)};
}

ControlPyramid encode_condition(const Model& model, const FrameCondition& c) {
  const TokenSequence expr = assemble_expression_features(c.coefficients, c.eye_patch, c.mouth_patch,
                                                          model.encoder, model.adapters.expression);
  return control_pyramid(c.pose, expr, model.adapters, model.unet_config);
}

void VideoClip::validate() const {
  for (const auto& f : frames) {
    if (f.shape() != frames.front().shape()) throw ShapeMismatch("video clip frames differ in shape");
  }
}

Tensor gaussian_noise(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::create(shape, std::move(v));
}

const Tensor& prediction_target(const Model& model, const Tensor& clean, const Tensor& noise) {
  return model.schedule_config.prediction == Prediction::kSample ? clean : noise;
}

std::vector<double> noise_estimate(const Model& model, std::span<const double> x_t,
                                   std::span<const double> output, int t) {
  std::vector<double> eps(output.begin(), output.end());
  if (model.schedule_config.prediction == Prediction::kSample) {
    const double ab = model.schedule.alpha_bar(t);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (x_t[i] - sa * output[i]) / sb;
  }
  return eps;
}

std::vector<Tensor> ddim_denoise(const Model& model, std::vector<Tensor> latents, int start_t,
                                 int steps, const std::vector<ControlPyramid>& controls,
                                 const ReferenceFeatures* reference, bool motion, bool clip_x0) {
  const auto ts = ddim_timesteps(start_t, steps);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_prev = k + 1 < ts.size() ? ts[k + 1] : -1;
    UNetInputs in;
    in.latents = latents;
    in.timestep = t;
    in.controls = controls;
    in.reference = reference;
    in.motion = motion;
    const auto out = unet_forward(model.base, &model.adapters, in);
    for (std::size_t f = 0; f < latents.size(); ++f) {
      const auto eps = noise_estimate(model, latents[f].data(), out[f].data(), t);
      latents[f] = Tensor::create(latents[f].shape(),
                                  ddim_update(latents[f].data(), eps, t, t_prev, model.schedule, clip_x0));
    }
  }
  return latents;
}

Tensor ddim_sample(const Model& model, const Tensor& initial_noise, const ControlPyramid* control,
                   const ReferenceFeatures* reference, int steps, bool clip_x0) {
  std::vector<ControlPyramid> controls;
  if (control) controls.push_back(*control);
  return ddim_denoise(model, {initial_noise.detach()}, model.schedule.steps - 1, steps, controls,
                      reference, false, clip_x0)[0];
}

VideoClip stage1_generate(const Model& model, const ReferenceFeatures& reference,
                          const std::vector<ControlPyramid>& conditions, const Tensor& shared_noise,
                          int steps, bool clip_x0) {
  VideoClip clip;
  clip.frames.reserve(conditions.size());
  for (const auto& c : conditions) {
    clip.frames.push_back(ddim_sample(model, shared_noise, &c, &reference, steps, clip_x0));
  }
  return clip;
}

void Stage2Config::validate() const {
  if (patch_len < 1) throw PatchConfigInvalid("patch_len must be >= 1");
  if (overlap <= 0 || overlap >= patch_len) {
    throw PatchConfigInvalid("overlap must satisfy 0 < overlap < patch_len");
  }
  if (!(renoise_strength > 0.0 && renoise_strength <= 1.0)) {
    throw PatchConfigInvalid("renoise strength must lie in (0, 1]");
  }
  if (steps < 1) throw PatchConfigInvalid("steps must be >= 1");
}

std::vector<int> patch_starts(int frames, int patch_len, int overlap) {
  std::vector<int> starts{0};
  while (starts.back() + patch_len < frames) starts.push_back(starts.back() + patch_len - overlap);
  return starts;
}

Stage2Result stage2_generate(const Model& model, const VideoClip& stage1,
                             const ReferenceFeatures& reference,
                             const std::vector<ControlPyramid>& conditions,
                             const Tensor& renoise_noise, const Stage2Config& config) {
  config.validate();
  stage1.validate();
  const int n = static_cast<int>(stage1.frames.size());
  if (n == 0) throw ShapeMismatch("stage2: empty clip");
  if (static_cast<int>(conditions.size()) != n) throw ShapeMismatch("stage2: one condition per frame");
  const int t_start = static_cast<int>(std::lround(config.renoise_strength * (model.schedule.steps - 1)));

  std::vector<Tensor> noised;
  noised.reserve(n);
  for (const auto& f : stage1.frames) noised.push_back(q_sample(f, t_start, renoise_noise, model.schedule));

  Stage2Result result;
  result.clip.fps = stage1.fps;
  result.clip.frames.resize(n);
  int covered = 0;  // frames [0, covered) already written
  for (int start : patch_starts(n, config.patch_len, config.overlap)) {
    const int end = std::min(n, start + config.patch_len);
    std::vector<Tensor> latents(noised.begin() + start, noised.begin() + end);
    std::vector<ControlPyramid> conds(conditions.begin() + start, conditions.begin() + end);
    PatchOutput patch{start, ddim_denoise(model, std::move(latents), t_start, config.steps, conds,
                                          &reference, true, config.clip_x0)};
    for (int f = start; f < end; ++f) {
      const Tensor& next = patch.frames[f - start];
      if (f < covered) {
        const double w = static_cast<double>(f - start + 1) / (config.overlap + 1);
        const auto prev = result.clip.frames[f].data();
        std::vector<double> v(next.numel());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = w * next.data()[i] + (1.0 - w) * prev[i];
        result.clip.frames[f] = Tensor::create(next.shape(), std::move(v));
      } else {
        result.clip.frames[f] = next;
      }
    }
    covered = end;
    result.patches.push_back(std::move(patch));
  }
  return result;
}

namespace {

FrameCondition blurred(const FrameCondition& c, std::mt19937_64& rng, const TrainOptions& o) {
  FrameCondition out = c;
  out.eye_patch = random_blur_augment(c.eye_patch, o.blur_min, o.blur_max, rng());
  out.mouth_patch = random_blur_augment(c.mouth_patch, o.blur_min, o.blur_max, rng());
  return out;
}

}  // namespace

TrainStepResult train_step(Model& model, Adam& optimizer, std::span<const TrainExample> batch,
                           std::mt19937_64& rng, const TrainOptions& options) {
  if (batch.empty()) throw InvalidArgument("train_step: empty batch");
  TrainStepResult r;
  {
    Graph graph;
    GraphScope scope(graph);
    std::vector<Tensor> losses;
    for (const auto& ex : batch) {
      const int t = std::uniform_int_distribution<int>(0, model.schedule.steps - 1)(rng);
      const Tensor noise = gaussian_noise(ex.driving_latent.shape(), rng);
      const Tensor z_t = q_sample(ex.driving_latent, t, noise, model.schedule);
      const ControlPyramid control = encode_condition(model, blurred(ex.condition, rng, options));
      ReferenceFeatures local;
      const ReferenceFeatures* ref = ex.reference_features;
      if (!ref) {
        local = reference_pass(ex.reference_latent, model.base);
        ref = &local;
      }
      const Tensor pred = unet_forward(model.base, &model.adapters, z_t, t, &control, ref);
      const WeightedLoss l =
          weighted_loss(prediction_target(model, ex.driving_latent, noise), pred, ex.mask, t, options.eps_norm);
      losses.push_back(l.total);
      r.loss_mean += l.mean_term;
      r.loss_masked += l.masked_term;
      r.timesteps.push_back(t);
    }
    Tensor total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = ops::add(total, losses[i]);
    total = ops::scale(total, 1.0 / static_cast<double>(batch.size()));
    r.loss_total = total.item();
    graph.backward(total);
  }
  r.loss_mean /= static_cast<double>(batch.size());
  r.loss_masked /= static_cast<double>(batch.size());
  r.lr = optimizer.step();
  return r;
}

TrainStepResult motion_train_step(Model& model, Adam& optimizer, const MotionExample& clip,
                                  std::mt19937_64& rng, const TrainOptions& options) {
  const int n = static_cast<int>(clip.latents.size());
  if (n == 0 || static_cast<int>(clip.conditions.size()) != n) {
    throw ShapeMismatch("motion_train_step: one condition per frame required");
  }
  TrainStepResult r;
  {
    Graph graph;
    GraphScope scope(graph);
    const int t = std::uniform_int_distribution<int>(0, model.schedule.steps - 1)(rng);
    UNetInputs in;
    in.timestep = t;
    in.motion = true;
    std::vector<Tensor> noises;
    for (int f = 0; f < n; ++f) {
      noises.push_back(gaussian_noise(clip.latents[f].shape(), rng));
      in.latents.push_back(q_sample(clip.latents[f], t, noises.back(), model.schedule));
      in.controls.push_back(encode_condition(model, blurred(clip.conditions[f], rng, options)));
    }
    in.reference = clip.reference_features;
    if (!in.reference) throw InvalidArgument("motion_train_step: reference features required");
    const auto pred = unet_forward(model.base, &model.adapters, in);
    const Tensor none = Tensor::zeros(noises[0].shape());
    Tensor total;
    for (int f = 0; f < n; ++f) {
      const WeightedLoss l =
          weighted_loss(prediction_target(model, clip.latents[f], noises[f]), pred[f], none, t, options.eps_norm);
      total = total.defined() ? ops::add(total, l.total) : l.total;
    }
    total = ops::scale(total, 1.0 / n);
    r.loss_total = r.loss_mean = total.item();
    r.timesteps.push_back(t);
    graph.backward(total);
  }
  r.lr = optimizer.step();
  return r;
}

}  // namespace skattn
