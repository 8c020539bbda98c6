#include "skattn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace skattn::kernels {

namespace {
thread_local MacCounters* tls_counters = nullptr;
}

CountingScope::CountingScope(MacCounters& counters) : previous_(tls_counters) {
  tls_counters = &counters;
}

CountingScope::~CountingScope() { tls_counters = previous_; }

MacCounters* active_counters() { return tls_counters; }

namespace serial {

void gemm(Trans ta, Trans tb, int m, int n, int k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double sum = 0.0;
      for (int p = 0; p < k; ++p) {
        const double av = ta == Trans::kNo ? a[i * k + p] : a[p * m + i];
        const double bv = tb == Trans::kNo ? b[p * n + j] : b[j * k + p];
        sum += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
    }
  }
}

void softmax_rows(int rows, int cols, std::span<const double> x, std::span<double> y) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.data() + static_cast<std::ptrdiff_t>(r) * cols;
    double* yr = y.data() + static_cast<std::ptrdiff_t>(r) * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, xr[c]);
    double total = 0.0;
    for (int c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      total += yr[c];
    }
    for (int c = 0; c < cols; ++c) yr[c] /= total;
  }
}

void attention_forward(const AttentionDims& dims, std::span<const double> q,
                       std::span<const double> k, std::span<const double> v,
                       std::span<double> probs, std::span<double> out,
                       MacCounters* counters) {
  const auto [batch, n, m, d, kv_batch] = dims;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> scores(m);
  for (int b = 0; b < batch; ++b) {
    const int kb = b % kv_batch;
    for (int i = 0; i < n; ++i) {
      const double* qi = q.data() + (static_cast<std::ptrdiff_t>(b) * n + i) * d;
      for (int j = 0; j < m; ++j) {
        const double* kj = k.data() + (static_cast<std::ptrdiff_t>(kb) * m + j) * d;
        double dot = 0.0;
        for (int p = 0; p < d; ++p) {
          dot += qi[p] * kj[p];
          if (counters) ++counters->score;
        }
        scores[j] = dot * scale;
      }
      double* pi = probs.data() + (static_cast<std::ptrdiff_t>(b) * n + i) * m;
      softmax_rows(1, m, scores, std::span<double>(pi, m));
      double* oi = out.data() + (static_cast<std::ptrdiff_t>(b) * n + i) * d;
      std::fill(oi, oi + d, 0.0);
      for (int j = 0; j < m; ++j) {
        const double* vj = v.data() + (static_cast<std::ptrdiff_t>(kb) * m + j) * d;
        for (int p = 0; p < d; ++p) {
          oi[p] += pi[j] * vj[p];
          if (counters) ++counters->value;
        }
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
  std::vector<double> dp(m), ds(m);
  for (int b = 0; b < batch; ++b) {
    const int kb = b % kv_batch;
    for (int i = 0; i < n; ++i) {
      const std::ptrdiff_t qi = static_cast<std::ptrdiff_t>(b) * n + i;
      const double* pi = probs.data() + qi * m;
      const double* gi = dout.data() + qi * d;
      double weighted = 0.0;
      for (int j = 0; j < m; ++j) {
        const double* vj = v.data() + (static_cast<std::ptrdiff_t>(kb) * m + j) * d;
        double s = 0.0;
        for (int p = 0; p < d; ++p) s += gi[p] * vj[p];
        dp[j] = s;
        weighted += pi[j] * s;
      }
      for (int j = 0; j < m; ++j) ds[j] = pi[j] * (dp[j] - weighted) * scale;
      for (int j = 0; j < m; ++j) {
        const std::ptrdiff_t kj = (static_cast<std::ptrdiff_t>(kb) * m + j) * d;
        for (int p = 0; p < d; ++p) {
          if (!dq.empty()) dq[qi * d + p] += ds[j] * k[kj + p];
          if (!dk.empty()) dk[kj + p] += ds[j] * q[qi * d + p];
          if (!dv.empty()) dv[kj + p] += pi[j] * gi[p];
        }
      }
    }
  }
}

void conv3x3_forward(const ConvDims& dims, std::span<const double> x,
                     std::span<const double> weight, std::span<const double> bias,
                     std::span<double> out) {
  const int ho = dims.out_h(), wo = dims.out_w();
  for (int co = 0; co < dims.c_out; ++co) {
    for (int y = 0; y < ho; ++y) {
      for (int xo = 0; xo < wo; ++xo) {
        double sum = bias.empty() ? 0.0 : bias[co];
        for (int ci = 0; ci < dims.c_in; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = y * dims.stride + ky - 1;
            if (iy < 0 || iy >= dims.h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = xo * dims.stride + kx - 1;
              if (ix < 0 || ix >= dims.w) continue;
              sum += weight[((co * dims.c_in + ci) * 3 + ky) * 3 + kx] *
                     x[(ci * dims.h + iy) * dims.w + ix];
            }
          }
        }
        out[(co * ho + y) * wo + xo] = sum;
      }
    }
  }
}

void conv3x3_backward_input(const ConvDims& dims, std::span<const double> weight,
                            std::span<const double> dout, std::span<double> dx) {
  const int ho = dims.out_h(), wo = dims.out_w();
  for (int co = 0; co < dims.c_out; ++co) {
    for (int y = 0; y < ho; ++y) {
      for (int xo = 0; xo < wo; ++xo) {
        const double g = dout[(co * ho + y) * wo + xo];
        for (int ci = 0; ci < dims.c_in; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = y * dims.stride + ky - 1;
            if (iy < 0 || iy >= dims.h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = xo * dims.stride + kx - 1;
              if (ix < 0 || ix >= dims.w) continue;
              dx[(ci * dims.h + iy) * dims.w + ix] +=
                  g * weight[((co * dims.c_in + ci) * 3 + ky) * 3 + kx];
            }
          }
        }
      }
    }
  }
}

void conv3x3_backward_weight(const ConvDims& dims, std::span<const double> x,
                             std::span<const double> dout, std::span<double> dweight) {
  const int ho = dims.out_h(), wo = dims.out_w();
  for (int co = 0; co < dims.c_out; ++co) {
    for (int y = 0; y < ho; ++y) {
      for (int xo = 0; xo < wo; ++xo) {
        const double g = dout[(co * ho + y) * wo + xo];
        for (int ci = 0; ci < dims.c_in; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = y * dims.stride + ky - 1;
            if (iy < 0 || iy >= dims.h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = xo * dims.stride + kx - 1;
              if (ix < 0 || ix >= dims.w) continue;
              dweight[((co * dims.c_in + ci) * 3 + ky) * 3 + kx] +=
                  g * x[(ci * dims.h + iy) * dims.w + ix];
            }
          }
        }
      }
    }
  }
}

}  // namespace serial
}  // namespace skattn::kernels
