#include "skattn/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "skattn/error.hpp"

namespace skattn {

void to_json(nlohmann::json& j, Prediction p) { j = p == Prediction::kSample ? "sample" : "epsilon"; }

void from_json(const nlohmann::json& j, Prediction& p) {
  const auto s = j.get<std::string>();
  if (s == "epsilon") {
    p = Prediction::kEpsilon;
  } else if (s == "sample") {
    p = Prediction::kSample;
  } else {
    throw InvalidArgument("prediction must be \"epsilon\" or \"sample\"");
  }
}

namespace {

template <typename F>
void fields(UNetConfig& c, F&& f) {
  f("latent_channels", c.latent_channels);
  f("latent_size", c.latent_size);
  f("channels", c.channels);
  f("res_blocks", c.res_blocks);
  f("groups", c.groups);
  f("time_dim", c.time_dim);
  f("reference_timestep", c.reference_timestep);
  f("seed", c.seed);
}

template <typename F>
void fields(AdapterConfig& c, F&& f) {
  f("expr_width", c.expr_width);
  f("heads", c.heads);
  f("pose_scale", c.pose_scale);
  f("stem_channels", c.stem_channels);
  f("positional_encoding", c.positional_encoding);
  f("motion_heads", c.motion_heads);
  f("motion_positional_encoding", c.motion_positional_encoding);
  f("seed", c.seed);
  f("encoder_seed", c.encoder_seed);
}

template <typename F>
void fields(ScheduleConfig& c, F&& f) {
  f("steps", c.steps);
  f("beta_start", c.beta_start);
  f("beta_end", c.beta_end);
  f("prediction", c.prediction);
}

template <typename F>
void fields(BoxHalfExtents& c, F&& f) {
  f("a", c.a);
  f("b", c.b);
}

template <typename F>
void fields(SynthConfig& c, F&& f) {
  f("image_size", c.image_size);
  f("channels", c.channels);
  f("supersample", c.supersample);
  f("focal_scale", c.focal_scale);
  f("canonical_depth", c.canonical_depth);
  f("max_yaw_deg", c.max_yaw_deg);
  f("max_pitch_deg", c.max_pitch_deg);
  f("max_roll_deg", c.max_roll_deg);
  f("max_shift", c.max_shift);
  f("depth_min", c.depth_min);
  f("depth_max", c.depth_max);
  f("active_coefficients", c.active_coefficients);
  f("pose_scale", c.pose_scale);
  f("box", c.box);
}

template <typename F>
void fields(TrainConfig& c, F&& f) {
  f("base_steps", c.base_steps);
  f("base_batch_size", c.base_batch_size);
  f("base_samples", c.base_samples);
  f("base_lr", c.base_lr);
  f("steps", c.steps);
  f("batch_size", c.batch_size);
  f("samples", c.samples);
  f("heldout_samples", c.heldout_samples);
  f("lr_max", c.lr_max);
  f("lr_min", c.lr_min);
  f("grad_clip", c.grad_clip);
  f("eps_norm", c.eps_norm);
  f("blur_min", c.blur_min);
  f("blur_max", c.blur_max);
  f("log_every", c.log_every);
  f("checkpoint_every", c.checkpoint_every);
  f("motion_steps", c.motion_steps);
  f("motion_frames", c.motion_frames);
  f("motion_lr", c.motion_lr);
}

template <typename F>
void fields(Stage2Config& c, F&& f) {
  f("renoise_strength", c.renoise_strength);
  f("patch_len", c.patch_len);
  f("overlap", c.overlap);
  f("steps", c.steps);
  f("clip_x0", c.clip_x0);
}

template <typename F>
void fields(SamplingConfig& c, F&& f) {
  f("stage1_steps", c.stage1_steps);
  f("eval_steps", c.eval_steps);
  f("clip_x0", c.clip_x0);
  f("stage2", c.stage2);
  f("clip_frames", c.clip_frames);
  f("fps", c.fps);
}

template <typename F>
void fields(RunConfig& c, F&& f) {
  f("seed", c.seed);
  f("unet", c.unet);
  f("adapter", c.adapter);
  f("schedule", c.schedule);
  f("synth", c.synth);
  f("train", c.train);
  f("sampling", c.sampling);
}

template <typename T>
concept Section = requires(T& t) { fields(t, [](const char*, auto&) {}); };

template <typename T>
nlohmann::json dump(const T& value) {
  if constexpr (Section<T>) {
    nlohmann::json j = nlohmann::json::object();
    fields(const_cast<T&>(value), [&](const char* name, auto& v) { j[name] = dump(v); });
    return j;
  } else {
    return nlohmann::json(value);
  }
}

template <typename T>
void parse(const nlohmann::json& j, T& value, const std::string& path) {
  if constexpr (Section<T>) {
    if (!j.is_object()) throw InvalidArgument("config: " + path + " must be an object");
    std::set<std::string> known;
    fields(value, [&](const char* name, auto& v) {
      known.insert(name);
      if (j.contains(name)) parse(j.at(name), v, path.empty() ? name : path + "." + name);
    });
    for (const auto& item : j.items()) {
      if (!known.count(item.key())) {
        throw InvalidArgument("config: unknown key " + (path.empty() ? "" : path + ".") + item.key());
      }
    }
  } else {
    try {
      value = j.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument("config: bad value for " + path + ": " + e.what());
    }
  }
}

}  // namespace

void RunConfig::finalize() {
  if (const char* env = std::getenv("SKATTN_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw InvalidArgument("SKATTN_SEED must be an unsigned integer");
    seed = v;
  }
  unet.validate();
  adapter.validate(unet);
  if (synth.image_size != unet.latent_size || synth.channels != unet.latent_channels) {
    throw InvalidArgument("config: synth image must match the latent shape");
  }
  if (synth.pose_scale != adapter.pose_scale) {
    throw InvalidArgument("config: synth.pose_scale must equal adapter.pose_scale");
  }
  if (train.steps < 0 || train.batch_size < 1 || train.samples < 1 || train.heldout_samples < 1) {
    throw InvalidArgument("config: train sizes must be positive");
  }
  if (train.base_steps < 0 || train.base_batch_size < 1 || train.base_samples < 1 || train.motion_steps < 0 ||
      train.motion_frames < 1) {
    throw InvalidArgument("config: pretraining and motion sizes must be positive");
  }
  if (sampling.stage1_steps < 1 || sampling.eval_steps < 1 || sampling.clip_frames < 1) {
    throw InvalidArgument("config: sampling step counts must be positive");
  }
  try {
    sampling.stage2.validate();
  } catch (const PatchConfigInvalid& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
}

nlohmann::json to_json(const RunConfig& config) { return dump(config); }

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  parse(j, c, "");
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("config: " + std::string(e.what()));
  }
  return config_from_json(j);
}

}  // namespace skattn
