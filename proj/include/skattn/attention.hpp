#pragma once

// Spatial knitting attention: attention over a 2D feature map applied to every
// row independently and then to every column independently, instead of over
// the flattened map.
//
// Each stage is a pre-norm residual block
//     x <- x + W_o . MHA(LN(x) [+ PE], context)
// so a stage whose W_o is zero is an exact identity.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "skattn/tensor.hpp"

namespace skattn {

/// [C, H, W] feature map.
class FeatureMap2D {
 public:
  FeatureMap2D() = default;
  /// Throws ShapeMismatch unless `data` is rank 3.
  explicit FeatureMap2D(Tensor data);

  const Tensor& tensor() const { return data_; }
  int channels() const { return data_.dim(0); }
  int height() const { return data_.dim(1); }
  int width() const { return data_.dim(2); }
  bool same_shape(const FeatureMap2D& other) const { return data_.shape() == other.data_.shape(); }

 private:
  Tensor data_;
};

/// [L, D] token sequence.
class TokenSequence {
 public:
  TokenSequence() = default;
  /// Throws ShapeMismatch unless `data` is rank 2.
  explicit TokenSequence(Tensor data);

  const Tensor& tensor() const { return data_; }
  int length() const { return data_.dim(0); }
  int width() const { return data_.dim(1); }

 private:
  Tensor data_;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct StageParams {
  Tensor w_q;  // [d_model, d_model]
  Tensor w_k;  // [d_context, d_model]
  Tensor w_v;  // [d_context, d_model]
  Tensor w_o;  // [d_model, d_model]
  Tensor ln_gamma, ln_beta;  // [d_model]
  bool positional_encoding = false;
};

/// One parameter set per stage, shared by every row (row stage) or every
/// column (column stage).
struct AttentionParams {
  int d_model = 0;
  int d_context = 0;
  int n_heads = 1;
  StageParams row;
  StageParams col;

  /// Gaussian projections scaled by 1/sqrt(fan_in). With `zero_output`, both
  /// W_o start at zero so the block is an identity at initialization.
  static AttentionParams init(int d_model, int d_context, int n_heads, std::mt19937_64& rng,
                              bool zero_output = false, bool requires_grad = true);

  void set_positional_encoding(bool enabled);
  NamedTensors named(const std::string& prefix) const;
};

enum class KnitAxis { kRows, kColumns };

/// Sinusoidal encoding table [length, width].
Tensor sinusoidal_encoding(int length, int width);

/// queries [A,n,d_model] (or [n,d_model]); keys_values [Akv,m,d_kv] with Akv in {1, A}
/// (or [m,d_kv]). Returns W_o . concat_heads(attention), shaped like `queries`
/// except that only the first `keep` query positions survive when keep > 0.
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values,
                            const StageParams& stage, int n_heads, int keep = 0);

/// One knitted cross-attention stage: every row (or column) of `map` attends to `seq`.
FeatureMap2D knit_cross_stage(const FeatureMap2D& map, const TokenSequence& seq,
                              const StageParams& stage, int n_heads, KnitAxis axis);

/// One knitted reference stage: each row (or column) of `map` is concatenated
/// with the matching row (column) of `ref`, self-attended, and the map half kept.
FeatureMap2D knit_reference_stage(const FeatureMap2D& map, const FeatureMap2D& ref,
                                  const StageParams& stage, int n_heads, KnitAxis axis);

FeatureMap2D sk_cross_attention(const FeatureMap2D& map, const TokenSequence& seq,
                                const AttentionParams& params);

FeatureMap2D sk_reference_attention(const FeatureMap2D& map, const FeatureMap2D& ref,
                                    const AttentionParams& params);

/// Flattened control arm: all H*W positions as one sequence, a single
/// cross-attention stage using params.row, reshaped back.
FeatureMap2D flat_attention_baseline(const FeatureMap2D& map, const TokenSequence& seq,
                                     const AttentionParams& params);

/// Flattened self-attention over all H*W positions (params.row, d_context == d_model).
FeatureMap2D flat_self_attention(const FeatureMap2D& map, const AttentionParams& params);

enum class AttentionVariant { kFlatSelf, kFlatCross, kSkCross, kSkReference };

struct OpCount {
  std::uint64_t score = 0;
  std::uint64_t value = 0;
  std::uint64_t total() const { return score + value; }
};

/// Closed-form multiply-accumulate count of the score and value products.
///   flat-self:    (HW)^2 d each
///   flat-cross:   HW L d each
///   sk-cross:     H W L d + W H L d each
///   sk-reference: H (2W)^2 d + W (2H)^2 d each
/// `L` is ignored by the self/reference variants.
OpCount attention_op_count(std::uint64_t h, std::uint64_t w, std::uint64_t l, std::uint64_t d,
                           AttentionVariant variant);

const char* variant_name(AttentionVariant variant);

}  // namespace skattn
