#pragma once

#include "skattn/tensor.hpp"

namespace skattn {

/// 10 log10(1 / MSE) for values in [0,1]; +infinity when the inputs are equal.
double psnr(const Tensor& a, const Tensor& b);

/// Mean SSIM over every window x window patch (stride 1) of every channel of
/// [C,H,W] inputs, with population statistics and dynamic range 1.
/// The window shrinks to the image extent for small inputs.
double ssim(const Tensor& a, const Tensor& b, int window = 8, double k1 = 0.01, double k2 = 0.03);

}  // namespace skattn
