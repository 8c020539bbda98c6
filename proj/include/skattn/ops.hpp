#pragma once

// Differentiable operations. Index order is row-major throughout; feature maps
// are [C, H, W] and token sequences are [L, D].

#include <vector>

#include "skattn/tensor.hpp"

namespace skattn::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor silu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// C[i,j] = sum_p A[i,p] B[p,j].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[n,k] . w[k,m] (+ bias[m]); bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

/// Adds b[C] to every pixel of x[C,H,W].
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

/// Max-subtracted softmax along `axis`. NaN inputs propagate to NaN outputs.
Tensor softmax(const Tensor& x, int axis);

/// Normalizes over the last axis, then applies gamma/beta (both [last extent]).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// x[C,H,W]; statistics over each group of C/groups channels and all pixels.
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// x[c_in,H,W], w[c_out,c_in], b[c_out] -> [c_out,H,W].
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b);

/// Zero-padded 3x3 convolution. w[c_out,c_in,3,3], b[c_out] (may be undefined).
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1);

/// Nearest-neighbour 2x upsampling of x[C,H,W].
Tensor upsample2x(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// out.shape[i] = x.shape[axes[i]].
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int begin, int end);

/// softmax(Q K^T / sqrt(d)) V.
/// Q [n,d], K [m,d], V [m,d]; or batched Q [B,n,d], K/V [Bk,m,d] with B % Bk == 0,
/// where query batch b reads key batch b % Bk.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace skattn::ops
