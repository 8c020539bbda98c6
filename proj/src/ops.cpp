#include "skattn/ops.hpp"

#include <cmath>
#include <numeric>

#include "skattn/error.hpp"
#include "skattn/kernels.hpp"

namespace skattn::ops {

namespace k = skattn::kernels;
using detail::finish;
using detail::grad_buffer;
using detail::tracks;
using Impl = std::shared_ptr<TensorImpl>;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_str(t.shape()));
  }
}

// Which inputs need gradients, captured when the node is recorded.
struct Needs {
  explicit Needs(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts) flags.push_back(t && t->defined() && tracks(*t->impl()));
  }
  bool operator[](std::size_t i) const { return flags[i]; }
  std::vector<bool> flags;
};

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  const Needs need{&a, &b};
  return finish("add", a.shape(), std::move(out), {&a, &b}, [&](const Impl&) {
    return [ai = a.impl(), bi = b.impl(), need](std::span<const double> g) {
      for (int s = 0; s < 2; ++s) {
        if (!need[s]) continue;
        auto gb = grad_buffer(s == 0 ? *ai : *bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  const Needs need{&a, &b};
  return finish("sub", a.shape(), std::move(out), {&a, &b}, [&](const Impl&) {
    return [ai = a.impl(), bi = b.impl(), need](std::span<const double> g) {
      if (need[0]) {
        auto ga = grad_buffer(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (need[1]) {
        auto gb = grad_buffer(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  const Needs need{&a, &b};
  return finish("mul", a.shape(), std::move(out), {&a, &b}, [&](const Impl&) {
    return [ai = a.impl(), bi = b.impl(), need](std::span<const double> g) {
      if (need[0]) {
        auto ga = grad_buffer(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
      }
      if (need[1]) {
        auto gb = grad_buffer(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
      }
    };
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return finish("scale", a.shape(), std::move(out), {&a}, [&](const Impl&) {
    return [ai = a.impl(), s](std::span<const double> g) {
      auto ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    };
  });
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = v / (1.0 + std::exp(-v));
  }
  return finish("silu", x.shape(), std::move(out), {&x}, [&](const Impl&) {
    return [xi = x.impl()](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xi->data[i];
        const double s = 1.0 / (1.0 + std::exp(-v));
        gx[i] += g[i] * (s + v * s * (1.0 - s));
      }
    };
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return finish("sum", {1}, {total}, {&x}, [&](const Impl&) {
    return [xi = x.impl()](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (double& v : gx) v += g[0];
    };
  });
}

Tensor mean(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  const double n = static_cast<double>(x.numel());
  return finish("mean", {1}, {total / n}, {&x}, [&](const Impl&) {
    return [xi = x.impl(), n](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (double& v : gx) v += g[0] / n;
    };
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), kk = a.dim(1), n = b.dim(1);
  if (b.dim(0) != kk) {
    throw ShapeMismatch("matmul: inner extents " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  k::parallel::gemm(k::Trans::kNo, k::Trans::kNo, m, n, kk, a.data(), b.data(), out, false);
  const Needs need{&a, &b};
  return finish("matmul", {m, n}, std::move(out), {&a, &b}, [&](const Impl&) {
    return [ai = a.impl(), bi = b.impl(), need, m, n, kk](std::span<const double> g) {
      if (need[0]) {
        k::parallel::gemm(k::Trans::kNo, k::Trans::kYes, m, kk, n, g, bi->data, grad_buffer(*ai),
                          true);
      }
      if (need[1]) {
        k::parallel::gemm(k::Trans::kYes, k::Trans::kNo, kk, n, m, ai->data, g, grad_buffer(*bi),
                          true);
      }
    };
  });
}

namespace {

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  const int n = x.dim(0), d = x.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeMismatch("linear: bias " + shape_str(bias.shape()) + " for width " +
                        std::to_string(d));
  }
  std::vector<double> out(x.values());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i) * d + j] += bias.data()[j];
  }
  const Needs need{&x, &bias};
  return finish("add_row_bias", x.shape(), std::move(out), {&x, &bias}, [&](const Impl&) {
    return [xi = x.impl(), bi = bias.impl(), need, n, d](std::span<const double> g) {
      if (need[0]) {
        auto gx = grad_buffer(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (need[1]) {
        auto gb = grad_buffer(*bi);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < d; ++j) gb[j] += g[static_cast<std::size_t>(i) * d + j];
        }
      }
    };
  });
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w);
  return bias.defined() ? add_row_bias(y, bias) : y;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  require_rank(x, 3, "add_channel_bias");
  const int c = x.dim(0);
  const int plane = x.dim(1) * x.dim(2);
  if (b.rank() != 1 || b.dim(0) != c) {
    throw ShapeMismatch("add_channel_bias: " + shape_str(b.shape()) + " for " +
                        shape_str(x.shape()));
  }
  std::vector<double> out(x.values());
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < plane; ++p) out[static_cast<std::size_t>(ch) * plane + p] += b.data()[ch];
  }
  const Needs need{&x, &b};
  return finish("add_channel_bias", x.shape(), std::move(out), {&x, &b}, [&](const Impl&) {
    return [xi = x.impl(), bi = b.impl(), need, c, plane](std::span<const double> g) {
      if (need[0]) {
        auto gx = grad_buffer(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (need[1]) {
        auto gb = grad_buffer(*bi);
        for (int ch = 0; ch < c; ++ch) {
          double s = 0.0;
          for (int p = 0; p < plane; ++p) s += g[static_cast<std::size_t>(ch) * plane + p];
          gb[ch] += s;
        }
      }
    };
  });
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw InvalidArgument("softmax: axis out of range");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(s[i]);
  const auto len = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]);

  std::vector<double> out(x.numel());
  std::vector<double> slice_in(len), slice_out(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      for (std::size_t j = 0; j < len; ++j) slice_in[j] = x.data()[base + j * inner];
      k::serial::softmax_rows(1, static_cast<int>(len), slice_in, slice_out);
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = slice_out[j];
    }
  }
  return finish("softmax", s, std::move(out), {&x}, [&](const Impl& y) {
    return [xi = x.impl(), yw = std::weak_ptr<TensorImpl>(y), outer, inner,
            len](std::span<const double> g) {
      const auto yi = yw.lock();
      auto gx = grad_buffer(*xi);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            dot += yi->data[base + j * inner] * g[base + j * inner];
          }
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += yi->data[idx] * (g[idx] - dot);
          }
        }
      }
    };
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int d = x.dim(-1);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d || beta.dim(0) != d) {
    throw ShapeMismatch("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  std::vector<double> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  const Needs need{&x, &gamma, &beta};
  return finish("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta}, [&](const Impl&) {
    return [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), need, xhat = std::move(xhat),
            rstd = std::move(rstd), rows, d](std::span<const double> g) {
      if (need[1] || need[2]) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (int j = 0; j < d; ++j) {
            if (need[1]) grad_buffer(*gi)[j] += g[r * d + j] * xhat[r * d + j];
            if (need[2]) grad_buffer(*bi)[j] += g[r * d + j];
          }
        }
      }
      if (!need[0]) return;
      auto gx = grad_buffer(*xi);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
          const double dh = g[r * d + j] * gi->data[j];
          m1 += dh;
          m2 += dh * xhat[r * d + j];
        }
        m1 /= d;
        m2 /= d;
        for (int j = 0; j < d; ++j) {
          const double dh = g[r * d + j] * gi->data[j];
          gx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
        }
      }
    };
  });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require_rank(x, 3, "group_norm");
  const int c = x.dim(0);
  if (groups < 1 || c % groups != 0) {
    throw ShapeMismatch("group_norm: " + std::to_string(c) + " channels into " +
                        std::to_string(groups) + " groups");
  }
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != c || beta.dim(0) != c) {
    throw ShapeMismatch("group_norm: gamma/beta must be [" + std::to_string(c) + "]");
  }
  const int plane = x.dim(1) * x.dim(2);
  const int per = c / groups;
  const std::size_t span = static_cast<std::size_t>(per) * plane;
  std::vector<double> out(x.numel()), xhat(x.numel()), rstd(groups);
  for (int gidx = 0; gidx < groups; ++gidx) {
    const std::size_t base = gidx * span;
    double mu = 0.0;
    for (std::size_t i = 0; i < span; ++i) mu += x.data()[base + i];
    mu /= static_cast<double>(span);
    double var = 0.0;
    for (std::size_t i = 0; i < span; ++i) {
      const double dv = x.data()[base + i] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(span);
    rstd[gidx] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < span; ++i) {
      const int ch = gidx * per + static_cast<int>(i / plane);
      const double h = (x.data()[base + i] - mu) * rstd[gidx];
      xhat[base + i] = h;
      out[base + i] = h * gamma.data()[ch] + beta.data()[ch];
    }
  }
  const Needs need{&x, &gamma, &beta};
  return finish("group_norm", x.shape(), std::move(out), {&x, &gamma, &beta}, [&](const Impl&) {
    return [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), need, xhat = std::move(xhat),
            rstd = std::move(rstd), groups, per, plane, span](std::span<const double> g) {
      for (int gidx = 0; gidx < groups; ++gidx) {
        const std::size_t base = gidx * span;
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t i = 0; i < span; ++i) {
          const int ch = gidx * per + static_cast<int>(i / plane);
          if (need[1]) grad_buffer(*gi)[ch] += g[base + i] * xhat[base + i];
          if (need[2]) grad_buffer(*bi)[ch] += g[base + i];
          const double dh = g[base + i] * gi->data[ch];
          m1 += dh;
          m2 += dh * xhat[base + i];
        }
        if (!need[0]) continue;
        m1 /= static_cast<double>(span);
        m2 /= static_cast<double>(span);
        auto gx = grad_buffer(*xi);
        for (std::size_t i = 0; i < span; ++i) {
          const int ch = gidx * per + static_cast<int>(i / plane);
          const double dh = g[base + i] * gi->data[ch];
          gx[base + i] += rstd[gidx] * (dh - m1 - xhat[base + i] * m2);
        }
      }
    };
  });
}

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 3, "conv1x1");
  require_rank(w, 2, "conv1x1");
  const int ci = x.dim(0), co = w.dim(0);
  const int plane = x.dim(1) * x.dim(2);
  if (w.dim(1) != ci || b.rank() != 1 || b.dim(0) != co) {
    throw ShapeMismatch("conv1x1: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) +
                        ", b " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(co) * plane);
  k::parallel::gemm(k::Trans::kNo, k::Trans::kNo, co, plane, ci, w.data(), x.data(), out, false);
  for (int o = 0; o < co; ++o) {
    for (int p = 0; p < plane; ++p) out[static_cast<std::size_t>(o) * plane + p] += b.data()[o];
  }
  const Needs need{&x, &w, &b};
  return finish("conv1x1", {co, x.dim(1), x.dim(2)}, std::move(out), {&x, &w, &b},
                [&](const Impl&) {
                  return [xi = x.impl(), wi = w.impl(), bi = b.impl(), need, ci, co,
                          plane](std::span<const double> g) {
                    if (need[0]) {
                      k::parallel::gemm(k::Trans::kYes, k::Trans::kNo, ci, plane, co, wi->data, g,
                                        grad_buffer(*xi), true);
                    }
                    if (need[1]) {
                      k::parallel::gemm(k::Trans::kNo, k::Trans::kYes, co, ci, plane, g, xi->data,
                                        grad_buffer(*wi), true);
                    }
                    if (need[2]) {
                      auto gb = grad_buffer(*bi);
                      for (int o = 0; o < co; ++o) {
                        double s = 0.0;
                        for (int p = 0; p < plane; ++p) s += g[static_cast<std::size_t>(o) * plane + p];
                        gb[o] += s;
                      }
                    }
                  };
                });
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  require_rank(x, 3, "conv3x3");
  require_rank(w, 4, "conv3x3");
  k::ConvDims dims{x.dim(0), x.dim(1), x.dim(2), w.dim(0), stride};
  if (w.dim(1) != dims.c_in || w.dim(2) != 3 || w.dim(3) != 3 ||
      (b.defined() && (b.rank() != 1 || b.dim(0) != dims.c_out))) {
    throw ShapeMismatch("conv3x3: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()));
  }
  if (stride < 1) throw InvalidArgument("conv3x3: stride must be >= 1");
  std::vector<double> out(static_cast<std::size_t>(dims.c_out) * dims.out_h() * dims.out_w());
  k::parallel::conv3x3_forward(dims, x.data(), w.data(),
                               b.defined() ? b.data() : std::span<const double>{}, out);
  const Needs need{&x, &w, &b};
  return finish("conv3x3", {dims.c_out, dims.out_h(), dims.out_w()}, std::move(out), {&x, &w, &b},
                [&](const Impl&) {
                  return [xi = x.impl(), wi = w.impl(), bi = b.defined() ? b.impl() : nullptr,
                          need, dims](std::span<const double> g) {
                    if (need[0]) k::parallel::conv3x3_backward_input(dims, wi->data, g, grad_buffer(*xi));
                    if (need[1]) k::parallel::conv3x3_backward_weight(dims, xi->data, g, grad_buffer(*wi));
                    if (need[2]) {
                      auto gb = grad_buffer(*bi);
                      const int plane = dims.out_h() * dims.out_w();
                      for (int o = 0; o < dims.c_out; ++o) {
                        double s = 0.0;
                        for (int p = 0; p < plane; ++p) s += g[static_cast<std::size_t>(o) * plane + p];
                        gb[o] += s;
                      }
                    }
                  };
                });
}

Tensor upsample2x(const Tensor& x) {
  require_rank(x, 3, "upsample2x");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(static_cast<std::size_t>(c) * 4 * h * w);
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) {
        out[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx] =
            x.data()[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
      }
    }
  }
  return finish("upsample2x", {c, 2 * h, 2 * w}, std::move(out), {&x}, [&](const Impl&) {
    return [xi = x.impl(), c, h, w](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < 2 * h; ++y) {
          for (int xx = 0; xx < 2 * w; ++xx) {
            gx[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
                g[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx];
          }
        }
      }
    };
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeMismatch("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return finish("reshape", std::move(shape), x.values(), {&x}, [&](const Impl&) {
    return [xi = x.impl()](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
  });
}

namespace {

// Source offset for every output element of a permutation.
std::vector<std::size_t> permutation_map(const Shape& in_shape, const std::vector<int>& axes) {
  const int rank = static_cast<int>(in_shape.size());
  std::vector<std::size_t> in_stride(static_cast<std::size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i) {
    in_stride[static_cast<std::size_t>(i)] =
        in_stride[static_cast<std::size_t>(i) + 1] * static_cast<std::size_t>(in_shape[static_cast<std::size_t>(i) + 1]);
  }
  Shape out_shape(static_cast<std::size_t>(rank));
  std::vector<std::size_t> stride(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  }
  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> map(n);
  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    map[o] = src;
    for (int a = rank - 1; a >= 0; --a) {
      const auto ua = static_cast<std::size_t>(a);
      if (++idx[ua] < out_shape[ua]) {
        src += stride[ua];
        break;
      }
      src -= stride[ua] * static_cast<std::size_t>(out_shape[ua] - 1);
      idx[ua] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int rank = x.rank();
  if (static_cast<int>(axes.size()) != rank) throw InvalidArgument("permute: axes rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  for (int a : axes) {
    if (a < 0 || a >= rank || seen[static_cast<std::size_t>(a)]) {
      throw InvalidArgument("permute: axes are not a permutation");
    }
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape;
  for (int a : axes) out_shape.push_back(x.dim(a));
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_map(x.shape(), axes));
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.data()[(*map)[o]];
  return finish("permute", std::move(out_shape), std::move(out), {&x}, [&](const Impl&) {
    return [xi = x.impl(), map](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (std::size_t o = 0; o < g.size(); ++o) gx[(*map)[o]] += g[o];
    };
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw InvalidArgument("concat: axis out of range");
  Shape shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeMismatch("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.dim(i) != shape[static_cast<std::size_t>(i)]) {
        throw ShapeMismatch("concat: " + shape_str(p.shape()) + " vs " + shape_str(shape));
      }
    }
    total += p.dim(axis);
  }
  shape[static_cast<std::size_t>(axis)] = total;
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);

  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(static_cast<std::size_t>(p.dim(axis)) * inner);
  const std::size_t row = static_cast<std::size_t>(total) * inner;
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto src = parts[pi].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * widths[pi]), widths[pi],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    }
    offset += widths[pi];
  }

  // finish() takes a fixed initializer list; record with the first part and
  // attach the rest manually.
  bool any = false;
  std::vector<bool> need;
  for (const auto& p : parts) {
    need.push_back(tracks(*p.impl()));
    any = any || need.back();
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(out);
  impl->leaf = false;
  if (!any) return Tensor(std::move(impl));
  std::vector<Impl> inputs;
  for (const auto& p : parts) inputs.push_back(p.impl());
  auto fn = [inputs, need, widths, outer, row](std::span<const double> g) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
      if (need[pi]) {
        auto gp = grad_buffer(*inputs[pi]);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < widths[pi]; ++j) gp[o * widths[pi] + j] += g[o * row + off + j];
        }
      }
      off += widths[pi];
    }
  };
  active_graph()->record("concat", inputs, impl, std::move(fn));
  return Tensor(std::move(impl));
}

Tensor slice(const Tensor& x, int axis, int begin, int end) {
  const int rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw InvalidArgument("slice: axis out of range");
  if (begin < 0 || end > x.dim(axis) || begin >= end) {
    throw InvalidArgument("slice: bad range [" + std::to_string(begin) + "," +
                          std::to_string(end) + ") on extent " + std::to_string(x.dim(axis)));
  }
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = end - begin;
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
  const std::size_t src_row = static_cast<std::size_t>(x.dim(axis)) * inner;
  const std::size_t dst_row = static_cast<std::size_t>(end - begin) * inner;
  const std::size_t start = static_cast<std::size_t>(begin) * inner;
  std::vector<double> out(outer * dst_row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(o * src_row + start), dst_row,
                out.begin() + static_cast<std::ptrdiff_t>(o * dst_row));
  }
  return finish("slice", std::move(shape), std::move(out), {&x}, [&](const Impl&) {
    return [xi = x.impl(), outer, src_row, dst_row, start](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < dst_row; ++j) gx[o * src_row + start + j] += g[o * dst_row + j];
      }
    };
  });
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& kk, const Tensor& v) {
  const bool batched = q.rank() == 3;
  if (!(q.rank() == 2 || batched) || kk.rank() != q.rank() || v.rank() != q.rank()) {
    throw ShapeMismatch("attention: expected rank-2 or rank-3 Q/K/V");
  }
  k::AttentionDims dims;
  if (batched) {
    dims = {q.dim(0), q.dim(1), kk.dim(1), q.dim(2), kk.dim(0)};
    if (v.dim(0) != kk.dim(0) || dims.batch % dims.kv_batch != 0) {
      throw ShapeMismatch("attention: batch extents " + shape_str(q.shape()) + " / " +
                          shape_str(kk.shape()));
    }
  } else {
    dims = {1, q.dim(0), kk.dim(0), q.dim(1), 1};
  }
  if (kk.dim(-1) != dims.d || v.dim(-1) != dims.d || v.dim(-2) != dims.m) {
    throw ShapeMismatch("attention: Q " + shape_str(q.shape()) + ", K " + shape_str(kk.shape()) +
                        ", V " + shape_str(v.shape()));
  }
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(dims.batch) * dims.n *
                                                     dims.m);
  std::vector<double> out(q.numel());
  if (auto* counters = k::active_counters()) {
    k::serial::attention_forward(dims, q.data(), kk.data(), v.data(), *probs, out, counters);
  } else {
    k::parallel::attention_forward(dims, q.data(), kk.data(), v.data(), *probs, out);
  }
  const Needs need{&q, &kk, &v};
  return finish("scaled_dot_attention", q.shape(), std::move(out), {&q, &kk, &v},
                [&](const Impl&) {
                  return [qi = q.impl(), ki = kk.impl(), vi = v.impl(), probs, dims,
                          need](std::span<const double> g) {
                    k::parallel::attention_backward(
                        dims, qi->data, ki->data, vi->data, *probs, g,
                        need[0] ? grad_buffer(*qi) : std::span<double>{},
                        need[1] ? grad_buffer(*ki) : std::span<double>{},
                        need[2] ? grad_buffer(*vi) : std::span<double>{});
                  };
                });
}

}  // namespace skattn::ops
