#include "skattn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace skattn::kernels::parallel {

namespace {

std::vector<double> im2col(const ConvDims& dims, std::span<const double> x) {
  const int ho = dims.out_h(), wo = dims.out_w();
  const int plane = ho * wo;
  std::vector<double> cols(static_cast<std::size_t>(dims.c_in) * 9 * plane, 0.0);
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < dims.c_in; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* row = cols.data() + static_cast<std::ptrdiff_t>((ci * 3 + ky) * 3 + kx) * plane;
        for (int y = 0; y < ho; ++y) {
          const int iy = y * dims.stride + ky - 1;
          if (iy < 0 || iy >= dims.h) continue;
          for (int xo = 0; xo < wo; ++xo) {
            const int ix = xo * dims.stride + kx - 1;
            if (ix < 0 || ix >= dims.w) continue;
            row[y * wo + xo] = x[(ci * dims.h + iy) * dims.w + ix];
          }
        }
      }
    }
  }
  return cols;
}

}  // namespace

void gemm(Trans ta, Trans tb, int m, int n, int k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate) {
  if (tb == Trans::kYes) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        const double* bj = b.data() + static_cast<std::ptrdiff_t>(j) * k;
        double sum = 0.0;
        if (ta == Trans::kNo) {
          const double* ai = a.data() + static_cast<std::ptrdiff_t>(i) * k;
          for (int p = 0; p < k; ++p) sum += ai[p] * bj[p];
        } else {
          for (int p = 0; p < k; ++p) sum += a[static_cast<std::ptrdiff_t>(p) * m + i] * bj[p];
        }
        double& out = c[static_cast<std::ptrdiff_t>(i) * n + j];
        out = accumulate ? out + sum : sum;
      }
    }
    return;
  }
#pragma omp parallel
  {
    std::vector<double> row(n);
#pragma omp for schedule(static)
    for (int i = 0; i < m; ++i) {
      std::fill(row.begin(), row.end(), 0.0);
      for (int p = 0; p < k; ++p) {
        const double av = ta == Trans::kNo ? a[static_cast<std::ptrdiff_t>(i) * k + p]
                                           : a[static_cast<std::ptrdiff_t>(p) * m + i];
        const double* bp = b.data() + static_cast<std::ptrdiff_t>(p) * n;
        for (int j = 0; j < n; ++j) row[j] += av * bp[j];
      }
      double* ci = c.data() + static_cast<std::ptrdiff_t>(i) * n;
      if (accumulate) {
        for (int j = 0; j < n; ++j) ci[j] += row[j];
      } else {
        std::copy(row.begin(), row.end(), ci);
      }
    }
  }
}

void softmax_rows(int rows, int cols, std::span<const double> x, std::span<double> y) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const auto offset = static_cast<std::size_t>(r) * cols;
    serial::softmax_rows(1, cols, x.subspan(offset, cols), y.subspan(offset, cols));
  }
}

void attention_forward(const AttentionDims& dims, std::span<const double> q,
                       std::span<const double> k, std::span<const double> v,
                       std::span<double> probs, std::span<double> out) {
  const auto [batch, n, m, d, kv_batch] = dims;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const int total = batch * n;
#pragma omp parallel
  {
    std::vector<double> scores(m);
#pragma omp for schedule(static)
    for (int bi = 0; bi < total; ++bi) {
      const int kb = (bi / n) % kv_batch;
      const double* qi = q.data() + static_cast<std::ptrdiff_t>(bi) * d;
      const double* kbase = k.data() + static_cast<std::ptrdiff_t>(kb) * m * d;
      const double* vbase = v.data() + static_cast<std::ptrdiff_t>(kb) * m * d;
      for (int j = 0; j < m; ++j) {
        const double* kj = kbase + static_cast<std::ptrdiff_t>(j) * d;
        double dot = 0.0;
        for (int p = 0; p < d; ++p) dot += qi[p] * kj[p];
        scores[j] = dot * scale;
      }
      double* pi = probs.data() + static_cast<std::ptrdiff_t>(bi) * m;
      serial::softmax_rows(1, m, scores, std::span<double>(pi, m));
      double* oi = out.data() + static_cast<std::ptrdiff_t>(bi) * d;
      std::fill(oi, oi + d, 0.0);
      for (int j = 0; j < m; ++j) {
        const double w = pi[j];
        const double* vj = vbase + static_cast<std::ptrdiff_t>(j) * d;
        for (int p = 0; p < d; ++p) oi[p] += w * vj[p];
      }
    }
  }
}

void attention_backward(const AttentionDims& dims, std::span<const double> q,
                        std::span<const double> k, std::span<const double> v,
                        std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv) {
  const auto [batch, n, m, d, kv_batch] = dims;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const int total = batch * n;
  std::vector<double> ds(static_cast<std::size_t>(total) * m);

#pragma omp parallel
  {
    std::vector<double> dp(m);
#pragma omp for schedule(static)
    for (int bi = 0; bi < total; ++bi) {
      const int kb = (bi / n) % kv_batch;
      const double* pi = probs.data() + static_cast<std::ptrdiff_t>(bi) * m;
      const double* gi = dout.data() + static_cast<std::ptrdiff_t>(bi) * d;
      double weighted = 0.0;
      for (int j = 0; j < m; ++j) {
        const double* vj = v.data() + (static_cast<std::ptrdiff_t>(kb) * m + j) * d;
        double s = 0.0;
        for (int p = 0; p < d; ++p) s += gi[p] * vj[p];
        dp[j] = s;
        weighted += pi[j] * s;
      }
      double* dsi = ds.data() + static_cast<std::ptrdiff_t>(bi) * m;
      for (int j = 0; j < m; ++j) dsi[j] = pi[j] * (dp[j] - weighted) * scale;
      if (!dq.empty()) {
        double* dqi = dq.data() + static_cast<std::ptrdiff_t>(bi) * d;
        for (int j = 0; j < m; ++j) {
          const double* kj = k.data() + (static_cast<std::ptrdiff_t>(kb) * m + j) * d;
          for (int p = 0; p < d; ++p) dqi[p] += dsi[j] * kj[p];
        }
      }
    }
  }

  if (dk.empty() && dv.empty()) return;
  const int kv_rows = kv_batch * m;
#pragma omp parallel for schedule(static)
  for (int kj = 0; kj < kv_rows; ++kj) {
    const int kb = kj / m, j = kj % m;
    double* dkj = dk.empty() ? nullptr : dk.data() + static_cast<std::ptrdiff_t>(kj) * d;
    double* dvj = dv.empty() ? nullptr : dv.data() + static_cast<std::ptrdiff_t>(kj) * d;
    for (int b = kb; b < batch; b += kv_batch) {
      for (int i = 0; i < n; ++i) {
        const std::ptrdiff_t bi = static_cast<std::ptrdiff_t>(b) * n + i;
        const double dsv = ds[bi * m + j];
        const double pv = probs[bi * m + j];
        const double* qi = q.data() + bi * d;
        const double* gi = dout.data() + bi * d;
        for (int p = 0; p < d; ++p) {
          if (dkj) dkj[p] += dsv * qi[p];
          if (dvj) dvj[p] += pv * gi[p];
        }
      }
    }
  }
}

void conv3x3_forward(const ConvDims& dims, std::span<const double> x,
                     std::span<const double> weight, std::span<const double> bias,
                     std::span<double> out) {
  const int plane = dims.out_h() * dims.out_w();
  const auto cols = im2col(dims, x);
  gemm(Trans::kNo, Trans::kNo, dims.c_out, plane, dims.c_in * 9, weight, cols, out, false);
  if (bias.empty()) return;
#pragma omp parallel for schedule(static)
  for (int co = 0; co < dims.c_out; ++co) {
    double* o = out.data() + static_cast<std::ptrdiff_t>(co) * plane;
    for (int p = 0; p < plane; ++p) o[p] += bias[co];
  }
}

void conv3x3_backward_input(const ConvDims& dims, std::span<const double> weight,
                            std::span<const double> dout, std::span<double> dx) {
  const int ho = dims.out_h(), wo = dims.out_w();
  const int plane = ho * wo;
  std::vector<double> dcols(static_cast<std::size_t>(dims.c_in) * 9 * plane);
  gemm(Trans::kYes, Trans::kNo, dims.c_in * 9, plane, dims.c_out, weight, dout, dcols, false);
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < dims.c_in; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* row =
            dcols.data() + static_cast<std::ptrdiff_t>((ci * 3 + ky) * 3 + kx) * plane;
        for (int y = 0; y < ho; ++y) {
          const int iy = y * dims.stride + ky - 1;
          if (iy < 0 || iy >= dims.h) continue;
          for (int xo = 0; xo < wo; ++xo) {
            const int ix = xo * dims.stride + kx - 1;
            if (ix < 0 || ix >= dims.w) continue;
            dx[(ci * dims.h + iy) * dims.w + ix] += row[y * wo + xo];
          }
        }
      }
    }
  }
}

void conv3x3_backward_weight(const ConvDims& dims, std::span<const double> x,
                             std::span<const double> dout, std::span<double> dweight) {
  const int plane = dims.out_h() * dims.out_w();
  const auto cols = im2col(dims, x);
  gemm(Trans::kNo, Trans::kYes, dims.c_out, dims.c_in * 9, plane, dout, cols, dweight, true);
}

}  // namespace skattn::kernels::parallel
