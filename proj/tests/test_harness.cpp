#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "skattn/archive.hpp"
#include "skattn/cli.hpp"
#include "skattn/config.hpp"
#include "skattn/error.hpp"
#include "skattn/harness.hpp"
#include "skattn/image_io.hpp"
#include "skattn/metrics.hpp"
#include "skattn/synth.hpp"
#include "test_util.hpp"

using namespace skattn;
using namespace skattn::testing;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("skattn_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" + std::to_string(std::rand()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ------------------------------------------------------------ synthetic data

TEST(Synth, Deterministic) {
  const auto a = synth_dataset(4, 7);
  const auto b = synth_dataset(4, 7);
  for (int i = 0; i < 4; ++i) {
    EXPECT_TRUE(bit_equal(a[i].driving.data(), b[i].driving.data()));
    EXPECT_TRUE(bit_equal(a[i].reference.data(), b[i].reference.data()));
    EXPECT_EQ(a[i].pose_image, b[i].pose_image);
    EXPECT_EQ(a[i].coefficients.values(), b[i].coefficients.values());
  }
  const auto c = synth_dataset(4, 8);
  EXPECT_FALSE(bit_equal(a[0].driving.data(), c[0].driving.data()));
}

TEST(Synth, ShapesAndRanges) {
  const auto s = synth_dataset(3, 1);
  for (const auto& x : s) {
    EXPECT_EQ(x.driving.shape(), (Shape{4, 16, 16}));
    EXPECT_EQ(x.mask.shape(), (Shape{1, 16, 16}));
    EXPECT_EQ(x.pose_image.width, 64);
    EXPECT_EQ(x.eye_patch.width, 16);
    for (double v : x.driving.data()) ASSERT_TRUE(v >= -1.0 && v <= 1.0);
    for (double v : x.mask.data()) ASSERT_TRUE(v == 0.0 || v == 1.0);
    for (int k = 2; k < kExpressionCoefficients; ++k) EXPECT_EQ(x.coefficients[k], 0.0);
  }
}

class CoefficientDiff : public ::testing::TestWithParam<int> {};

TEST_P(CoefficientDiff, ChangesStayInsideMask) {
  const int which = GetParam();
  std::mt19937_64 rng(40 + which);
  const SynthConfig cfg;
  for (int trial = 0; trial < 8; ++trial) {
    const Identity id = random_identity(rng);
    const PoseRT pose = random_pose(cfg, rng);
    std::vector<double> lo(kExpressionCoefficients, 0.0), hi = lo;
    hi[which] = 1.0;
    const Tensor a = render_face(id, pose, ExpressionCoefficients(lo), cfg);
    const Tensor b = render_face(id, pose, ExpressionCoefficients(hi), cfg);
    const Tensor mask = region_mask(pose, cfg);
    int changed = 0;
    for (int c = 0; c < 4; ++c)
      for (int p = 0; p < 256; ++p) {
        if (a.data()[c * 256 + p] != b.data()[c * 256 + p]) {
          ++changed;
          ASSERT_EQ(mask.data()[p], 1.0) << "pixel " << p;
        }
      }
    EXPECT_GT(changed, 0);
  }
}

INSTANTIATE_TEST_SUITE_P(EyesAndMouth, CoefficientDiff, ::testing::Values(0, 1));

TEST(Synth, ClipMovesSmoothly) {
  const auto clip = synth_clip(6, 3);
  ASSERT_EQ(clip.size(), 6u);
  for (std::size_t f = 1; f < clip.size(); ++f) {
    EXPECT_TRUE(bit_equal(clip[f].reference.data(), clip[0].reference.data()));
  }
}

// ------------------------------------------------------------------ metrics

double naive_psnr(const Tensor& a, const Tensor& b) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) se += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  return 10.0 * std::log10(static_cast<double>(a.numel()) / se);
}

double naive_ssim(const Tensor& a, const Tensor& b, int window) {
  const int ch = a.dim(0), h = a.dim(1), w = a.dim(2);
  const int win = std::min({window, h, w});
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  int count = 0;
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y + win <= h; ++y)
      for (int x = 0; x + win <= w; ++x) {
        auto px = [&](const Tensor& t, int dy, int dx) { return t.at({c, y + dy, x + dx}); };
        const double n = win * win;
        double ma = 0, mb = 0;
        for (int dy = 0; dy < win; ++dy)
          for (int dx = 0; dx < win; ++dx) ma += px(a, dy, dx), mb += px(b, dy, dx);
        ma /= n;
        mb /= n;
        double va = 0, vb = 0, cov = 0;
        for (int dy = 0; dy < win; ++dy)
          for (int dx = 0; dx < win; ++dx) {
            va += (px(a, dy, dx) - ma) * (px(a, dy, dx) - ma);
            vb += (px(b, dy, dx) - mb) * (px(b, dy, dx) - mb);
            cov += (px(a, dy, dx) - ma) * (px(b, dy, dx) - mb);
          }
        va /= n;
        vb /= n;
        cov /= n;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / count;
}

TEST(Metrics, MatchNaiveScalarImplementations) {
  std::mt19937_64 rng(50);
  const auto s = synth_dataset(2, 51);
  const std::vector<std::pair<Tensor, Tensor>> pairs{
      {random_tensor({3, 12, 12}, rng, false, 0, 1), random_tensor({3, 12, 12}, rng, false, 0, 1)},
      {to_unit_range(s[0].reference), to_unit_range(s[0].driving)},
      {to_unit_range(s[1].driving), to_unit_range(s[0].driving)},
  };
  for (const auto& [a, b] : pairs) {
    EXPECT_NEAR(psnr(a, b), naive_psnr(a, b), 1e-9);
    EXPECT_NEAR(ssim(a, b), naive_ssim(a, b, 8), 1e-9);
    EXPECT_NEAR(ssim(a, b, 3), naive_ssim(a, b, 3), 1e-9);
  }
}

TEST(Metrics, PsnrExamples) {
  const Tensor a = Tensor::full({1, 4, 4}, 0.3);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  const Tensor b = Tensor::full({1, 4, 4}, 0.4);  // MSE 0.01
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_EQ(psnr(a, b), psnr(b, a));
  EXPECT_THROW(psnr(a, Tensor::zeros({1, 4, 3})), ShapeMismatch);
}

TEST(Metrics, SsimExamples) {
  std::vector<double> v(64);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) v[y * 8 + x] = ((x / 2 + y / 2) % 2) ? 1.0 : 0.0;
  const Tensor a = Tensor::create({1, 8, 8}, v);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  std::vector<double> inv(v);
  for (double& x : inv) x = 1.0 - x;
  EXPECT_LT(ssim(a, Tensor::create({1, 8, 8}, inv)), 0.2);
  std::vector<double> shifted(v);
  for (double& x : shifted) x += 1e-4;
  EXPECT_NEAR(ssim(a, Tensor::create({1, 8, 8}, shifted)), 1.0, 1e-3);
  EXPECT_THROW(ssim(a, Tensor::zeros({1, 8, 7})), ShapeMismatch);
}

// ------------------------------------------------------------------ archive

NamedTensors sample_tensors() {
  std::mt19937_64 rng(60);
  return {{"a.w", random_tensor({2, 3}, rng)}, {"b", random_tensor({5}, rng)}, {"c.k", random_tensor({1, 2, 2}, rng)}};
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

TEST(Archive, RoundTripIsBitExact) {
  const auto dir = temp_dir("archive");
  const auto path = (dir / "w.skw").string();
  const auto t = sample_tensors();
  save_weights(path, t, {{"note", "x"}});
  const auto a = load_weights(path);
  EXPECT_EQ(weights_digest(a.tensors), weights_digest(t));
  EXPECT_EQ(a.metadata.at("note"), "x");
  ASSERT_NE(a.find("b"), nullptr);
  EXPECT_TRUE(bit_equal(a.find("b")->data(), t[1].second.data()));

  const auto bytes = read_bytes(path);
  EXPECT_EQ(bytes.substr(0, 4), "SKWA");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  EXPECT_EQ(bytes.size(), 16 + header_len + 8 * (6 + 5 + 4));
  fs::remove_all(dir);
}

TEST(Archive, RejectsDamage) {
  const auto dir = temp_dir("archive_bad");
  const auto path = dir / "w.skw";
  save_weights(path.string(), sample_tensors());
  const auto good = read_bytes(path);

  write_bytes(path, good.substr(0, good.size() - 8));
  EXPECT_THROW(load_weights(path.string()), CorruptHeader);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  write_bytes(path, bad_magic);
  EXPECT_THROW(load_weights(path.string()), CorruptHeader);

  std::string version = good;
  version[4] = 9;
  write_bytes(path, version);
  EXPECT_THROW(load_weights(path.string()), FormatVersionMismatch);

  std::uint64_t header_len = 0;
  std::memcpy(&header_len, good.data() + 8, 8);
  auto header = nlohmann::json::parse(good.substr(16, header_len));
  header["tensors"]["a.w"]["shape"] = {2, 4};
  const std::string h = header.dump();
  std::string edited = good.substr(0, 8);
  const std::uint64_t n = h.size();
  edited.append(reinterpret_cast<const char*>(&n), 8);
  edited += h;
  edited += good.substr(16 + header_len);
  write_bytes(path, edited);
  EXPECT_THROW(load_weights(path.string()), CorruptHeader);

  EXPECT_THROW(load_weights((dir / "missing.skw").string()), IoError);
  fs::remove_all(dir);
}

TEST(Archive, AssignChecksNamesAndShapes) {
  const auto dir = temp_dir("archive_assign");
  const auto path = (dir / "w.skw").string();
  const auto t = sample_tensors();
  save_weights(path, t);
  const auto a = load_weights(path);
  NamedTensors targets{{"a.w", Tensor::zeros({2, 3})}, {"b", Tensor::zeros({5})}};
  assign_weights(targets, a);
  EXPECT_TRUE(bit_equal(targets[0].second.data(), t[0].second.data()));
  NamedTensors wrong{{"b", Tensor::zeros({4})}};
  EXPECT_THROW(assign_weights(wrong, a), CorruptHeader);
  NamedTensors missing{{"zzz", Tensor::zeros({4})}};
  EXPECT_THROW(assign_weights(missing, a), CorruptHeader);
  fs::remove_all(dir);
}

// ------------------------------------------------------------------- config

TEST(Config, JsonRoundTripAndUnknownKeys) {
  RunConfig c;
  c.seed = 42;
  c.train.steps = 17;
  c.sampling.stage2.overlap = 3;
  const auto j = to_json(c);
  for (const char* k : {"seed", "unet", "adapter", "schedule", "synth", "train", "sampling"}) EXPECT_TRUE(j.contains(k)) << k;
  const RunConfig back = config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  auto bad = j;
  bad["train"]["stepz"] = 3;
  EXPECT_THROW(config_from_json(bad), InvalidArgument);
  EXPECT_EQ(config_from_json(nlohmann::json::object()).train.steps, RunConfig{}.train.steps);
}

TEST(Config, SeedEnvironmentOverride) {
  RunConfig c;
  ::setenv("SKATTN_SEED", "777", 1);
  c.finalize();
  EXPECT_EQ(c.seed, 777u);
  ::setenv("SKATTN_SEED", "abc", 1);
  EXPECT_THROW(c.finalize(), InvalidArgument);
  ::unsetenv("SKATTN_SEED");
}

TEST(Config, CrossSectionChecks) {
  RunConfig c;
  c.synth.image_size = 8;
  EXPECT_THROW(c.finalize(), InvalidArgument);
}

// ---------------------------------------------------------------------- cli

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "skattn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

TEST(Cli, UnknownSubcommandIsUsageError) {
  const auto r = run_cli({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"bench-attn", "--H", "0"}).code, 2);
  EXPECT_EQ(run_cli({"train", "--config", "/nonexistent/cfg.json", "--out", "x"}).code, 1);
}

TEST(Cli, BenchAttnReportsExactCounts) {
  const auto r = run_cli({"bench-attn", "--H", "16", "--W", "16", "--L", "5", "--d", "64", "--repeats", "1"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("sk-cross,16,16,5,64,1,163840,163840,163840,163840,1,"), std::string::npos) << r.out;
}

TEST(Cli, RasterGoldenPasses) {
  const auto r = run_cli({"raster-golden", "--dir", std::string(SKATTN_FIXTURE_DIR) + "/raster"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, GradCheckPasses) {
  const auto r = run_cli({"grad-check", "--shapes", "1"});
  EXPECT_EQ(r.code, 0) << r.out;
}

TEST(Cli, PrintConfigDumpsDefaults) {
  const auto r = run_cli({"train", "--print-config"});
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j, to_json([] {
              RunConfig c;
              c.finalize();
              return c;
            }()));
}

nlohmann::json tiny_run_config() {
  RunConfig c;
  c.unet.latent_size = 8;
  c.unet.channels = {8, 8, 16};
  c.unet.res_blocks = 1;
  c.unet.groups = 4;
  c.unet.time_dim = 16;
  c.adapter.expr_width = 8;
  c.adapter.heads = 2;
  c.adapter.motion_heads = 2;
  c.adapter.stem_channels = 4;
  c.synth.image_size = 8;
  c.train.steps = 4;
  c.train.samples = 6;
  c.train.heldout_samples = 2;
  c.train.base_steps = 3;
  c.train.base_samples = 4;
  c.train.motion_steps = 2;
  c.train.motion_frames = 3;
  c.train.checkpoint_every = 2;
  c.sampling.stage1_steps = 2;
  c.sampling.eval_steps = 2;
  c.sampling.clip_frames = 5;
  c.sampling.stage2.patch_len = 4;
  c.sampling.stage2.overlap = 2;
  c.sampling.stage2.steps = 2;
  return to_json(c);
}

TEST(Cli, TrainAndReenactAreDeterministic) {
  const auto dir = temp_dir("cli_train");
  const auto cfg = dir / "config.json";
  std::ofstream(cfg) << tiny_run_config().dump(2);
  for (const char* run : {"a", "b"}) {
    const auto r = run_cli({"train", "--config", cfg.string(), "--out", (dir / run).string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto csv = read_bytes(dir / "a" / "loss.csv");
  EXPECT_EQ(csv, read_bytes(dir / "b" / "loss.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,t_sampled,loss_total,loss_mean,loss_masked");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_TRUE(fs::exists(dir / "a" / "checkpoint_step2.skw"));
  const auto summary = nlohmann::json::parse(read_bytes(dir / "a" / "summary.json"));
  EXPECT_TRUE(summary.at("base_unchanged").get<bool>());
  EXPECT_EQ(summary.at("heldout").at("samples"), 2);

  std::string digest;
  for (const char* run : {"a", "b"}) {
    const auto out = dir / run / "reenact";
    const auto r = run_cli({"reenact", "--checkpoint", (dir / run / "checkpoint.skw").string(), "--out", out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = nlohmann::json::parse(read_bytes(out / "metrics.json"));
    EXPECT_EQ(m.at("frames"), 5);
    EXPECT_EQ(m.at("patch_starts"), (std::vector<int>{0, 2}));
    EXPECT_TRUE(fs::exists(out / "stage2" / "frame_004.png"));
    if (digest.empty()) digest = m.at("output_digest");
    EXPECT_EQ(m.at("output_digest"), digest);
  }
  fs::remove_all(dir);
}

TEST(Cli, ReenactFromScript) {
  const auto dir = temp_dir("cli_script");
  const auto cfg = dir / "config.json";
  auto c = tiny_run_config();
  c["train"]["steps"] = 1;
  c["train"]["motion_steps"] = 0;
  c["train"]["checkpoint_every"] = 0;
  std::ofstream(cfg) << c.dump();
  ASSERT_EQ(run_cli({"train", "--config", cfg.string(), "--out", dir.string(), "--skip-eval"}).code, 0);
  const auto script = dir / "script.json";
  std::ofstream(script) << R"({"identity_seed": 3, "frames": [
      {"yaw_deg": 0, "translation": [0, 0, 4.5], "coefficients": [0.2, 0.8]},
      {"yaw_deg": 5, "roll_deg": 4, "translation": [0.1, 0, 4.5], "coefficients": [0.3, 0.6]},
      {"yaw_deg": 10, "translation": [0.2, 0, 4.5]}]})";
  const auto r = run_cli({"reenact", "--checkpoint", (dir / "checkpoint.skw").string(), "--out",
                          (dir / "out").string(), "--script", script.string(), "--scale", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_png((dir / "out" / "stage1" / "frame_002.png").string()).width, 16);
  std::ofstream(script) << R"({"frames": [{"translation": [0, 0]}]})";
  EXPECT_EQ(run_cli({"reenact", "--checkpoint", (dir / "checkpoint.skw").string(), "--out",
                     (dir / "out2").string(), "--script", script.string()})
                .code,
            2);
  fs::remove_all(dir);
}

TEST(Cli, SelfTestPasses) {
  const auto r = run_cli({"self-test"});
  EXPECT_EQ(r.code, 0) << r.out;
}

}  // namespace
