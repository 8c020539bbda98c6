#pragma once

// End-to-end runs shared by the command-line tool and the acceptance suite.

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "skattn/config.hpp"
#include "skattn/pipeline.hpp"
#include "skattn/synth.hpp"

namespace skattn {

Model build_model(const RunConfig& config);

struct TrainLogRow {
  int step = 0;
  std::vector<int> timesteps;
  double loss_total = 0.0;
  double loss_mean = 0.0;
  double loss_masked = 0.0;
};

struct TrainRunResult {
  std::vector<TrainLogRow> base_log;
  std::vector<TrainLogRow> log;
  std::vector<TrainLogRow> motion_log;
  double initial_loss = 0.0;
  double smoothed_final = 0.0;
  std::string base_digest_before;
  std::string base_digest_after;
  double seconds = 0.0;
};

/// Trailing mean of the last `window` values.
double smoothed_loss(const std::vector<TrainLogRow>& log, int window = 100);

/// Unconditional denoising on synth_dataset(base_samples, seed + 100), both
/// reference and driving images. Every base tensor is trainable during the
/// call and frozen again on return.
std::vector<TrainLogRow> pretrain_base(BaseUNet& base, const NoiseSchedule& schedule,
                                       const RunConfig& config, std::ostream* progress);

/// Base pretraining (when train.base_steps > 0), then adapter training on
/// synth_dataset(train.samples, seed) with the base frozen, then the optional
/// motion phase on short clips. Rows are appended to `csv` (header included)
/// when non-null; progress lines go to `progress` when non-null.
/// `after_step(step)` runs after every appearance step when set.
TrainRunResult run_training(Model& model, const RunConfig& config, std::ostream* csv,
                            std::ostream* progress,
                            const std::function<void(int)>& after_step = {});

void write_loss_csv_header(std::ostream& out);
void write_loss_csv_row(std::ostream& out, const TrainLogRow& row);

/// Base and adapter weights ("base." / "adapter." prefixes) plus the
/// configuration and the base digest as metadata.
void save_checkpoint(const std::string& path, const Model& model, const RunConfig& config);
/// Rebuilds the model from the stored configuration and weights. Throws
/// CorruptHeader when the stored base does not match its recorded digest.
Model load_checkpoint(const std::string& path, RunConfig* config_out = nullptr);

struct HeldoutResult {
  int samples = 0;
  double model_psnr = 0.0;
  double copy_psnr = 0.0;
  double model_ssim = 0.0;
  double copy_ssim = 0.0;
};

/// Self-reenactment on synth_dataset(heldout_samples, seed + 1) with
/// sampling.eval_steps DDIM steps, against copying the reference frame.
HeldoutResult evaluate_heldout(const Model& model, const RunConfig& config);

/// Frames of one identity: per-frame pose and expression.
struct ConditionScript {
  std::uint64_t identity_seed = 0;
  std::vector<PoseRT> poses;
  std::vector<ExpressionCoefficients> coefficients;
};

/// {"identity_seed": n, "frames": [{"yaw_deg", "pitch_deg", "roll_deg",
///   "translation": [x,y,z], "coefficients": [...]}]}; coefficients shorter
/// than 51 are zero-padded. Throws InvalidArgument, IoError.
ConditionScript load_condition_script(const std::string& path);
std::vector<SynthSample> render_script(const ConditionScript& script, const SynthConfig& config);

struct ReenactResult {
  VideoClip stage1;
  Stage2Result stage2;
  std::vector<Tensor> ground_truth;
  double stage1_flicker = 0.0;  // mean absolute difference of adjacent frames
  double stage2_flicker = 0.0;
  std::string digest;  // SHA-256 over both clips
};

/// Stage 1 then stage 2 on the given frames (reference from the first).
/// Noise tensors are drawn from `seed`.
ReenactResult run_reenactment(const Model& model, const RunConfig& config,
                              const std::vector<SynthSample>& frames, std::uint64_t seed);

double mean_adjacent_difference(const VideoClip& clip);

struct RasterFixtureResult {
  std::string name;
  bool corners_match = false;
  bool image_match = false;  // decoded pixels equal
  std::string detail;
};

/// Renders the pose described by `<dir>/<name>.json` and compares it with the
/// sidecar's corner pixels and `<dir>/<name>.png`. With `write`, the PNG is
/// regenerated instead of compared. Throws IoError, InvalidArgument.
RasterFixtureResult check_raster_fixture(const std::string& json_path, bool write);
std::string clip_digest(const std::vector<Tensor>& frames);

}  // namespace skattn
