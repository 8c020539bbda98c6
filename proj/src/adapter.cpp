#include "skattn/adapter.hpp"

#include <cmath>

#include "skattn/error.hpp"
#include "skattn/ops.hpp"

namespace skattn {

namespace {

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::create(std::move(shape), std::move(v), true);
}

Tensor conv_weight(int c_out, int c_in, std::mt19937_64& rng) {
  return gaussian({c_out, c_in, 3, 3}, 1.0 / std::sqrt(9.0 * c_in), rng);
}

void append(NamedTensors& out, const NamedTensors& more) { out.insert(out.end(), more.begin(), more.end()); }

int stem_convs(int pose_scale) {
  int n = 0;
  while ((1 << n) < pose_scale) ++n;
  return n == 0 ? 1 : n;
}

}  // namespace

FeatureMap2D ZeroConv::apply(const FeatureMap2D& x) const {
  return FeatureMap2D(ops::conv1x1(x.tensor(), w, b));
}

NamedTensors ZeroConv::named(const std::string& prefix) const {
  return {{prefix + ".w", w}, {prefix + ".b", b}};
}

ZeroConv zero_conv_init(int c_in, int c_out, bool requires_grad) {
  if (c_in < 1 || c_out < 1) throw InvalidArgument("zero_conv_init: channel counts must be positive");
  return {Tensor::zeros({c_out, c_in}, requires_grad), Tensor::zeros({c_out}, requires_grad)};
}

NamedTensors ControlEncoder::named(const std::string& prefix) const {
  NamedTensors out;
  for (std::size_t i = 0; i < stem_w.size(); ++i) {
    out.emplace_back(prefix + ".stem" + std::to_string(i) + ".w", stem_w[i]);
    out.emplace_back(prefix + ".stem" + std::to_string(i) + ".b", stem_b[i]);
  }
  for (int l = 0; l + 1 < kLevels; ++l) {
    out.emplace_back(prefix + ".down" + std::to_string(l) + ".w", down_w[l]);
    out.emplace_back(prefix + ".down" + std::to_string(l) + ".b", down_b[l]);
  }
  return out;
}

NamedTensors MotionBlock::named(const std::string& prefix) const {
  NamedTensors out{{prefix + ".w_q", stage.w_q},
                   {prefix + ".w_k", stage.w_k},
                   {prefix + ".w_v", stage.w_v},
                   {prefix + ".w_o", stage.w_o},
                   {prefix + ".ln_gamma", stage.ln_gamma},
                   {prefix + ".ln_beta", stage.ln_beta}};
  append(out, gate.named(prefix + ".gate"));
  return out;
}

AdapterWeights AdapterWeights::init(const AdapterConfig& config, const UNetConfig& unet) {
  unet.validate();
  config.validate(unet);
  std::mt19937_64 rng(config.seed);
  AdapterWeights a;
  a.config = config;
  a.expression = ExpressionProjection::init(config.expr_width, rng);

  const int n_stem = stem_convs(config.pose_scale);
  int c_in = 3;
  for (int i = 0; i < n_stem; ++i) {
    const int c_out = i + 1 == n_stem ? unet.channels[0] : config.stem_channels;
    a.encoder.stem_w.push_back(conv_weight(c_out, c_in, rng));
    a.encoder.stem_b.push_back(Tensor::zeros({c_out}, true));
    c_in = c_out;
  }
  for (int l = 0; l + 1 < kLevels; ++l) {
    a.encoder.down_w[l] = conv_weight(unet.channels[l + 1], unet.channels[l], rng);
    a.encoder.down_b[l] = Tensor::zeros({unet.channels[l + 1]}, true);
  }
  for (int l = 0; l < kLevels; ++l) {
    const int c = unet.channels[l];
    a.control_attention[l] = AttentionParams::init(c, config.expr_width, config.heads, rng);
    a.control_attention[l].set_positional_encoding(config.positional_encoding);
    a.control_gates[l] = zero_conv_init(c, c);
  }
  for (Site s : kAllSites) {
    const int i = static_cast<int>(s);
    const int c = unet.channels[site_level(s)];
    a.reference_attention[i] = AttentionParams::init(c, c, config.heads, rng);
    a.reference_attention[i].set_positional_encoding(config.positional_encoding);
    a.reference_gates[i] = zero_conv_init(c, c);
  }
  for (int l = 0; l < kLevels; ++l) {
    const int c = unet.channels[l];
    const auto p = AttentionParams::init(c, c, config.motion_heads, rng);
    a.motion[l].stage = p.row;
    a.motion[l].stage.positional_encoding = config.motion_positional_encoding;
    a.motion[l].n_heads = config.motion_heads;
    a.motion[l].gate = zero_conv_init(c, c);
  }
  return a;
}

NamedTensors AdapterWeights::appearance_parameters() const {
  NamedTensors out = expression.named("expression");
  append(out, encoder.named("control.encoder"));
  for (int l = 0; l < kLevels; ++l) {
    const std::string p = "control.level" + std::to_string(l);
    append(out, control_attention[l].named(p + ".attention"));
    append(out, control_gates[l].named(p + ".gate"));
  }
  for (Site s : kAllSites) {
    const int i = static_cast<int>(s);
    const std::string p = "reference." + site_name(s);
    append(out, reference_attention[i].named(p + ".attention"));
    append(out, reference_gates[i].named(p + ".gate"));
  }
  return out;
}

NamedTensors AdapterWeights::motion_parameters() const {
  NamedTensors out;
  for (int l = 0; l < kLevels; ++l) append(out, motion[l].named("motion.level" + std::to_string(l)));
  return out;
}

NamedTensors AdapterWeights::named() const {
  NamedTensors out = appearance_parameters();
  append(out, motion_parameters());
  return out;
}

ControlPyramid control_pyramid(const PoseImage& pose, const TokenSequence& expression,
                               const AdapterWeights& weights, const UNetConfig& unet) {
  const int side = weights.config.pose_size(unet);
  if (pose.width != side || pose.height != side || pose.channels != 3) {
    throw ShapeMismatch("pose image must be " + std::to_string(side) + "x" + std::to_string(side) +
                        " RGB, got " + std::to_string(pose.width) + "x" + std::to_string(pose.height) +
                        "x" + std::to_string(pose.channels));
  }
  if (expression.width() != weights.config.expr_width) {
    throw ShapeMismatch("expression width " + std::to_string(expression.width()));
  }
  const auto& enc = weights.encoder;
  const int stride = weights.config.pose_scale == 1 ? 1 : 2;
  Tensor h = image_to_tensor(pose);
  for (std::size_t i = 0; i < enc.stem_w.size(); ++i) {
    h = ops::silu(ops::conv3x3(h, enc.stem_w[i], enc.stem_b[i], stride));
  }
  ControlPyramid out;
  for (int l = 0; l < kLevels; ++l) {
    if (l > 0) h = ops::silu(ops::conv3x3(h, enc.down_w[l - 1], enc.down_b[l - 1], 2));
    const FeatureMap2D fused =
        sk_cross_attention(FeatureMap2D(h), expression, weights.control_attention[l]);
    out.maps[l] = weights.control_gates[l].apply(fused);
  }
  return out;
}

FeatureMap2D add_control(const FeatureMap2D& hidden, const FeatureMap2D& control) {
  if (!hidden.same_shape(control)) {
    throw ShapeMismatch("add_control: " + shape_str(hidden.tensor().shape()) + " vs " +
                        shape_str(control.tensor().shape()));
  }
  return FeatureMap2D(ops::add(hidden.tensor(), control.tensor()));
}

FeatureMap2D inject_reference(const FeatureMap2D& hidden, const FeatureMap2D& ref_hidden,
                              const AttentionParams& attention, const ZeroConv& gate) {
  if (!hidden.same_shape(ref_hidden)) {
    throw ShapeMismatch("inject_reference: " + shape_str(hidden.tensor().shape()) + " vs " +
                        shape_str(ref_hidden.tensor().shape()));
  }
  const FeatureMap2D branch = gate.apply(sk_reference_attention(hidden, ref_hidden, attention));
  return FeatureMap2D(ops::add(hidden.tensor(), branch.tensor()));
}

TokenSequence tile_id_feature(const std::vector<double>& id, int n) {
  if (n < 1) throw InvalidArgument("tile_id_feature: n must be >= 1");
  if (id.empty()) throw ShapeMismatch("tile_id_feature: empty feature");
  std::vector<double> v;
  v.reserve(id.size() * n);
  for (int i = 0; i < n; ++i) v.insert(v.end(), id.begin(), id.end());
  return TokenSequence(Tensor::create({n, static_cast<int>(id.size())}, std::move(v)));
}

std::vector<FeatureMap2D> temporal_attention(const std::vector<FeatureMap2D>& frames,
                                             const MotionBlock& block) {
  if (frames.empty()) throw ShapeMismatch("temporal_attention: no frames");
  const int c = frames[0].channels(), h = frames[0].height(), w = frames[0].width();
  const int f = static_cast<int>(frames.size());
  std::vector<Tensor> parts;
  parts.reserve(frames.size());
  for (const auto& fr : frames) {
    if (!fr.same_shape(frames[0])) throw ShapeMismatch("temporal_attention: frame shapes differ");
    parts.push_back(ops::reshape(fr.tensor(), {1, c, h, w}));
  }
  // [F,C,H,W] -> [H*W, F, C]
  const Tensor tokens =
      ops::reshape(ops::permute(ops::concat(parts, 0), {2, 3, 0, 1}), {h * w, f, c});
  Tensor normed = ops::layer_norm(tokens, block.stage.ln_gamma, block.stage.ln_beta);
  if (block.stage.positional_encoding) {
    const Tensor pe = sinusoidal_encoding(f, c);
    std::vector<double> tiled;
    tiled.reserve(static_cast<std::size_t>(h) * w * pe.numel());
    for (int i = 0; i < h * w; ++i) tiled.insert(tiled.end(), pe.data().begin(), pe.data().end());
    normed = ops::add(normed, Tensor::create({h * w, f, c}, std::move(tiled)));
  }
  const Tensor attended = multi_head_attention(normed, normed, block.stage, block.n_heads);
  const Tensor back = ops::permute(ops::reshape(attended, {h, w, f, c}), {2, 3, 0, 1});
  std::vector<FeatureMap2D> out;
  out.reserve(frames.size());
  for (int i = 0; i < f; ++i) {
    const FeatureMap2D a(ops::reshape(ops::slice(back, 0, i, i + 1), {c, h, w}));
    out.emplace_back(ops::add(frames[i].tensor(), block.gate.apply(a).tensor()));
  }
  return out;
}

}  // namespace skattn
