#pragma once

// Raw dense kernels in two flavours:
//   serial::   direct loop nests, written for clarity; used as the test oracle
//              and, for attention, as the instrumented MAC-counting path.
//   parallel:: OpenMP versions used by the autodiff ops. Work is split over
//              independent outputs only, so results do not depend on the
//              thread count.
//
// All buffers are row-major float64.

#include <cstdint>
#include <span>

namespace skattn::kernels {

struct MacCounters {
  std::uint64_t score = 0;  // Q.K^T multiply-accumulates
  std::uint64_t value = 0;  // P.V multiply-accumulates
};

/// Installs `counters` for the current thread. While installed, attention ops
/// route through serial::attention_forward which increments them once per MAC.
class CountingScope {
 public:
  explicit CountingScope(MacCounters& counters);
  ~CountingScope();
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  MacCounters* previous_;
};

MacCounters* active_counters();

enum class Trans { kNo, kYes };

/// Batched attention geometry. Query batch b reads key/value batch b % kv_batch,
/// which lets one key sequence serve every row of a feature map.
struct AttentionDims {
  int batch = 1;
  int n = 1;  // queries per batch
  int m = 1;  // keys per batch
  int d = 1;  // width
  int kv_batch = 1;
};

struct ConvDims {
  int c_in = 1, h = 1, w = 1;
  int c_out = 1;
  int stride = 1;
  int out_h() const { return (h - 1) / stride + 1; }
  int out_w() const { return (w - 1) / stride + 1; }
};

namespace serial {

// C[m,n] (+)= op(A) . op(B), op(A) is [m,k], op(B) is [k,n].
void gemm(Trans ta, Trans tb, int m, int n, int k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate);

void softmax_rows(int rows, int cols, std::span<const double> x, std::span<double> y);

// probs: [batch, n, m]; out: [batch, n, d]. Scale is 1/sqrt(d).
void attention_forward(const AttentionDims& dims, std::span<const double> q,
                       std::span<const double> k, std::span<const double> v,
                       std::span<double> probs, std::span<double> out,
                       MacCounters* counters = nullptr);

// Accumulates into dq, dk, dv (any may be empty to skip).
void attention_backward(const AttentionDims& dims, std::span<const double> q,
                        std::span<const double> k, std::span<const double> v,
                        std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv);

// 3x3 convolution, zero padding 1. weight [c_out, c_in, 3, 3], bias [c_out] or empty.
void conv3x3_forward(const ConvDims& dims, std::span<const double> x,
                     std::span<const double> weight, std::span<const double> bias,
                     std::span<double> out);
void conv3x3_backward_input(const ConvDims& dims, std::span<const double> weight,
                            std::span<const double> dout, std::span<double> dx);
void conv3x3_backward_weight(const ConvDims& dims, std::span<const double> x,
                             std::span<const double> dout, std::span<double> dweight);

}  // namespace serial

namespace parallel {

void gemm(Trans ta, Trans tb, int m, int n, int k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate);

void softmax_rows(int rows, int cols, std::span<const double> x, std::span<double> y);

void attention_forward(const AttentionDims& dims, std::span<const double> q,
                       std::span<const double> k, std::span<const double> v,
                       std::span<double> probs, std::span<double> out);

void attention_backward(const AttentionDims& dims, std::span<const double> q,
                        std::span<const double> k, std::span<const double> v,
                        std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv);

void conv3x3_forward(const ConvDims& dims, std::span<const double> x,
                     std::span<const double> weight, std::span<const double> bias,
                     std::span<double> out);
void conv3x3_backward_input(const ConvDims& dims, std::span<const double> weight,
                            std::span<const double> dout, std::span<double> dx);
void conv3x3_backward_weight(const ConvDims& dims, std::span<const double> x,
                             std::span<const double> dout, std::span<double> dweight);

}  // namespace parallel

}  // namespace skattn::kernels
