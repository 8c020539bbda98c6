#include "skattn/attention.hpp"

#include <cmath>

#include "skattn/error.hpp"
#include "skattn/ops.hpp"

namespace skattn {

FeatureMap2D::FeatureMap2D(Tensor data) : data_(std::move(data)) {
  if (!data_.defined() || data_.rank() != 3) {
    throw ShapeMismatch("feature map must be [C,H,W], got " +
                        (data_.defined() ? shape_str(data_.shape()) : std::string("undefined")));
  }
}

TokenSequence::TokenSequence(Tensor data) : data_(std::move(data)) {
  if (!data_.defined() || data_.rank() != 2) {
    throw ShapeMismatch("token sequence must be [L,D], got " +
                        (data_.defined() ? shape_str(data_.shape()) : std::string("undefined")));
  }
}

namespace {

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::create(std::move(shape), std::move(v), requires_grad);
}

StageParams init_stage(int d_model, int d_context, std::mt19937_64& rng, bool zero_output,
                       bool requires_grad) {
  StageParams s;
  s.w_q = gaussian({d_model, d_model}, 1.0 / std::sqrt(d_model), rng, requires_grad);
  s.w_k = gaussian({d_context, d_model}, 1.0 / std::sqrt(d_context), rng, requires_grad);
  s.w_v = gaussian({d_context, d_model}, 1.0 / std::sqrt(d_context), rng, requires_grad);
  s.w_o = zero_output ? Tensor::zeros({d_model, d_model}, requires_grad)
                      : gaussian({d_model, d_model}, 1.0 / std::sqrt(d_model), rng, requires_grad);
  s.ln_gamma = Tensor::full({d_model}, 1.0, requires_grad);
  s.ln_beta = Tensor::zeros({d_model}, requires_grad);
  return s;
}

void add_stage(NamedTensors& out, const std::string& prefix, const StageParams& s) {
  out.emplace_back(prefix + ".w_q", s.w_q);
  out.emplace_back(prefix + ".w_k", s.w_k);
  out.emplace_back(prefix + ".w_v", s.w_v);
  out.emplace_back(prefix + ".w_o", s.w_o);
  out.emplace_back(prefix + ".ln_gamma", s.ln_gamma);
  out.emplace_back(prefix + ".ln_beta", s.ln_beta);
}

// [C,H,W] -> [A,B,C] where attention runs along B.
Tensor to_tokens(const Tensor& map, KnitAxis axis) {
  return ops::permute(map, axis == KnitAxis::kRows ? std::vector<int>{1, 2, 0}
                                                   : std::vector<int>{2, 1, 0});
}

Tensor from_tokens(const Tensor& tokens, KnitAxis axis) {
  return ops::permute(tokens, axis == KnitAxis::kRows ? std::vector<int>{2, 0, 1}
                                                      : std::vector<int>{2, 1, 0});
}

// Repeats a [B,C] table `reps` times along a new leading axis, and `halves`
// times along B: result [reps, halves*B, C].
Tensor tiled_encoding(int reps, int halves, int length, int width) {
  const Tensor pe = sinusoidal_encoding(length, width);
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(reps) * halves * pe.numel());
  for (int r = 0; r < reps; ++r) {
    for (int h = 0; h < halves; ++h) v.insert(v.end(), pe.data().begin(), pe.data().end());
  }
  return Tensor::create({reps, halves * length, width}, std::move(v));
}

void check_stage(const StageParams& s, int d_model, int d_context, int n_heads) {
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw ShapeMismatch("d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
  }
  if (s.w_q.shape() != Shape{d_model, d_model} || s.w_o.shape() != Shape{d_model, d_model} ||
      s.w_k.shape() != Shape{d_context, d_model} || s.w_v.shape() != Shape{d_context, d_model}) {
    throw ShapeMismatch("attention stage projections do not match d_model=" +
                        std::to_string(d_model) + ", d_context=" + std::to_string(d_context));
  }
}

}  // namespace

AttentionParams AttentionParams::init(int d_model, int d_context, int n_heads,
                                      std::mt19937_64& rng, bool zero_output,
                                      bool requires_grad) {
  if (d_model < 1 || d_context < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw ShapeMismatch("AttentionParams: d_model must be divisible by n_heads");
  }
  AttentionParams p;
  p.d_model = d_model;
  p.d_context = d_context;
  p.n_heads = n_heads;
  p.row = init_stage(d_model, d_context, rng, zero_output, requires_grad);
  p.col = init_stage(d_model, d_context, rng, zero_output, requires_grad);
  return p;
}

void AttentionParams::set_positional_encoding(bool enabled) {
  row.positional_encoding = enabled;
  col.positional_encoding = enabled;
}

NamedTensors AttentionParams::named(const std::string& prefix) const {
  NamedTensors out;
  add_stage(out, prefix + ".row", row);
  add_stage(out, prefix + ".col", col);
  return out;
}

Tensor sinusoidal_encoding(int length, int width) {
  std::vector<double> v(static_cast<std::size_t>(length) * width);
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / width);
      v[static_cast<std::size_t>(pos) * width + i] =
          (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return Tensor::create({length, width}, std::move(v));
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values,
                            const StageParams& stage, int n_heads, int keep) {
  if (queries.rank() == 2) {
    const Tensor q3 = ops::reshape(queries, {1, queries.dim(0), queries.dim(1)});
    const Tensor kv3 = keys_values.rank() == 2
                           ? ops::reshape(keys_values, {1, keys_values.dim(0), keys_values.dim(1)})
                           : keys_values;
    const Tensor out = multi_head_attention(q3, kv3, stage, n_heads, keep);
    return ops::reshape(out, {out.dim(1), out.dim(2)});
  }
  if (queries.rank() != 3 || keys_values.rank() != 3) {
    throw ShapeMismatch("multi_head_attention: queries " + shape_str(queries.shape()) +
                        ", keys/values " + shape_str(keys_values.shape()));
  }
  const int a = queries.dim(0), n = queries.dim(1), d = queries.dim(2);
  const int akv = keys_values.dim(0), m = keys_values.dim(1), dkv = keys_values.dim(2);
  if (akv != 1 && akv != a) {
    throw ShapeMismatch("multi_head_attention: key/value batch must be 1 or match queries");
  }
  check_stage(stage, d, dkv, n_heads);
  const int dh = d / n_heads;
  if (keep <= 0) keep = n;
  if (keep > n) throw InvalidArgument("multi_head_attention: keep exceeds query length");

  auto split = [&](const Tensor& x, const Tensor& w, int batch, int len) {
    Tensor y = ops::linear(ops::reshape(x, {batch * len, x.dim(2)}), w);
    y = ops::reshape(y, {batch, len, n_heads, dh});
    y = ops::permute(y, {0, 2, 1, 3});
    return ops::reshape(y, {batch * n_heads, len, dh});
  };
  const Tensor q = split(queries, stage.w_q, a, n);
  const Tensor k = split(keys_values, stage.w_k, akv, m);
  const Tensor v = split(keys_values, stage.w_v, akv, m);

  Tensor o = ops::scaled_dot_attention(q, k, v);
  if (keep < n) o = ops::slice(o, 1, 0, keep);
  o = ops::reshape(o, {a, n_heads, keep, dh});
  o = ops::permute(o, {0, 2, 1, 3});
  o = ops::linear(ops::reshape(o, {a * keep, d}), stage.w_o);
  return ops::reshape(o, {a, keep, d});
}

FeatureMap2D knit_cross_stage(const FeatureMap2D& map, const TokenSequence& seq,
                              const StageParams& stage, int n_heads, KnitAxis axis) {
  const Tensor x = to_tokens(map.tensor(), axis);  // [A,B,C]
  const int a = x.dim(0), b = x.dim(1), c = x.dim(2);
  Tensor normed = ops::layer_norm(x, stage.ln_gamma, stage.ln_beta);
  if (stage.positional_encoding) normed = ops::add(normed, tiled_encoding(a, 1, b, c));
  const Tensor ctx = ops::reshape(seq.tensor(), {1, seq.length(), seq.width()});
  const Tensor y = ops::add(x, multi_head_attention(normed, ctx, stage, n_heads));
  return FeatureMap2D(from_tokens(y, axis));
}

FeatureMap2D knit_reference_stage(const FeatureMap2D& map, const FeatureMap2D& ref,
                                  const StageParams& stage, int n_heads, KnitAxis axis) {
  if (!map.same_shape(ref)) {
    throw ShapeMismatch("reference attention: map " + shape_str(map.tensor().shape()) +
                        " vs ref " + shape_str(ref.tensor().shape()));
  }
  const Tensor x = to_tokens(map.tensor(), axis);
  const Tensor r = to_tokens(ref.tensor(), axis);
  const int a = x.dim(0), b = x.dim(1), c = x.dim(2);
  Tensor joined = ops::layer_norm(ops::concat({x, r}, 1), stage.ln_gamma, stage.ln_beta);
  if (stage.positional_encoding) joined = ops::add(joined, tiled_encoding(a, 2, b, c));
  const Tensor y = ops::add(x, multi_head_attention(joined, joined, stage, n_heads, b));
  return FeatureMap2D(from_tokens(y, axis));
}

FeatureMap2D sk_cross_attention(const FeatureMap2D& map, const TokenSequence& seq,
                                const AttentionParams& params) {
  if (map.channels() != params.d_model || seq.width() != params.d_context) {
    throw ShapeMismatch("sk_cross_attention: map channels " + std::to_string(map.channels()) +
                        ", seq width " + std::to_string(seq.width()) + ", params d_model " +
                        std::to_string(params.d_model) + "/d_context " +
                        std::to_string(params.d_context));
  }
  const FeatureMap2D rows = knit_cross_stage(map, seq, params.row, params.n_heads, KnitAxis::kRows);
  return knit_cross_stage(rows, seq, params.col, params.n_heads, KnitAxis::kColumns);
}

FeatureMap2D sk_reference_attention(const FeatureMap2D& map, const FeatureMap2D& ref,
                                    const AttentionParams& params) {
  if (map.channels() != params.d_model || params.d_context != params.d_model) {
    throw ShapeMismatch("sk_reference_attention: map channels " + std::to_string(map.channels()) +
                        " vs d_model " + std::to_string(params.d_model));
  }
  const FeatureMap2D rows =
      knit_reference_stage(map, ref, params.row, params.n_heads, KnitAxis::kRows);
  return knit_reference_stage(rows, ref, params.col, params.n_heads, KnitAxis::kColumns);
}

FeatureMap2D flat_attention_baseline(const FeatureMap2D& map, const TokenSequence& seq,
                                     const AttentionParams& params) {
  if (map.channels() != params.d_model || seq.width() != params.d_context) {
    throw ShapeMismatch("flat_attention_baseline: channel/width mismatch");
  }
  const int c = map.channels(), h = map.height(), w = map.width();
  const Tensor x = ops::reshape(ops::permute(map.tensor(), {1, 2, 0}), {1, h * w, c});
  Tensor normed = ops::layer_norm(x, params.row.ln_gamma, params.row.ln_beta);
  if (params.row.positional_encoding) {
    // 2D encoding: first half of the channels encodes the row, second half the column.
    const int half = c / 2;
    const Tensor pe_y = sinusoidal_encoding(h, std::max(half, 1));
    const Tensor pe_x = sinusoidal_encoding(w, std::max(c - half, 1));
    std::vector<double> pe(static_cast<std::size_t>(h) * w * c, 0.0);
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double* dst = pe.data() + (static_cast<std::size_t>(y) * w + xx) * c;
        for (int i = 0; i < half; ++i) dst[i] = pe_y.data()[static_cast<std::size_t>(y) * half + i];
        for (int i = 0; i < c - half; ++i) {
          dst[half + i] = pe_x.data()[static_cast<std::size_t>(xx) * (c - half) + i];
        }
      }
    }
    normed = ops::add(normed, Tensor::create({1, h * w, c}, std::move(pe)));
  }
  const Tensor ctx = ops::reshape(seq.tensor(), {1, seq.length(), seq.width()});
  const Tensor y = ops::add(x, multi_head_attention(normed, ctx, params.row, params.n_heads));
  return FeatureMap2D(ops::permute(ops::reshape(y, {h, w, c}), {2, 0, 1}));
}

FeatureMap2D flat_self_attention(const FeatureMap2D& map, const AttentionParams& params) {
  if (map.channels() != params.d_model || params.d_context != params.d_model) {
    throw ShapeMismatch("flat_self_attention: channel mismatch");
  }
  const int c = map.channels(), h = map.height(), w = map.width();
  const Tensor x = ops::reshape(ops::permute(map.tensor(), {1, 2, 0}), {1, h * w, c});
  const Tensor normed = ops::layer_norm(x, params.row.ln_gamma, params.row.ln_beta);
  const Tensor y = ops::add(x, multi_head_attention(normed, normed, params.row, params.n_heads));
  return FeatureMap2D(ops::permute(ops::reshape(y, {h, w, c}), {2, 0, 1}));
}

OpCount attention_op_count(std::uint64_t h, std::uint64_t w, std::uint64_t l, std::uint64_t d,
                           AttentionVariant variant) {
  std::uint64_t each = 0;
  switch (variant) {
    case AttentionVariant::kFlatSelf:
      each = (h * w) * (h * w) * d;
      break;
    case AttentionVariant::kFlatCross:
      each = h * w * l * d;
      break;
    case AttentionVariant::kSkCross:
      each = h * w * l * d + w * h * l * d;
      break;
    case AttentionVariant::kSkReference:
      each = h * (2 * w) * (2 * w) * d + w * (2 * h) * (2 * h) * d;
      break;
  }
  return {each, each};
}

const char* variant_name(AttentionVariant variant) {
  switch (variant) {
    case AttentionVariant::kFlatSelf: return "flat-self";
    case AttentionVariant::kFlatCross: return "flat-cross";
    case AttentionVariant::kSkCross: return "sk-cross";
    case AttentionVariant::kSkReference: return "sk-reference";
  }
  return "?";
}

}  // namespace skattn
