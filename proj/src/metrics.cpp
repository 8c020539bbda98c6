#include "skattn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "skattn/error.hpp"

namespace skattn {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Summed-area table with a zero border: s[(y+1)*(w+1) + x+1] = sum over [0,y]x[0,x].
std::vector<double> integral(const double* p, int h, int w) {
  std::vector<double> s(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += p[static_cast<std::size_t>(y) * w + x];
      s[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] = s[static_cast<std::size_t>(y) * (w + 1) + x + 1] + row;
    }
  }
  return s;
}

double box(const std::vector<double>& s, int w, int y, int x, int k) {
  const auto at = [&](int yy, int xx) { return s[static_cast<std::size_t>(yy) * (w + 1) + xx]; };
  return at(y + k, x + k) - at(y, x + k) - at(y + k, x) + at(y, x);
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  require_same(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(a.numel()) / se);
}

double ssim(const Tensor& a, const Tensor& b, int window, double k1, double k2) {
  require_same(a, b, "ssim");
  if (a.rank() != 3) throw ShapeMismatch("ssim: expected [C,H,W]");
  if (window < 1) throw InvalidArgument("ssim: window must be positive");
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  const int k = std::min({window, h, w});
  const double c1 = k1 * k1, c2 = k2 * k2;
  const double n = static_cast<double>(k) * k;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> aa(plane), bb(plane), ab(plane);
  double total = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    const double* pa = a.data().data() + ch * plane;
    const double* pb = b.data().data() + ch * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto sa = integral(pa, h, w), sb = integral(pb, h, w);
    const auto saa = integral(aa.data(), h, w), sbb = integral(bb.data(), h, w), sab = integral(ab.data(), h, w);
    for (int y = 0; y + k <= h; ++y) {
      for (int x = 0; x + k <= w; ++x) {
        const double ma = box(sa, w, y, x, k) / n, mb = box(sb, w, y, x, k) / n;
        const double va = box(saa, w, y, x, k) / n - ma * ma;
        const double vb = box(sbb, w, y, x, k) / n - mb * mb;
        const double cov = box(sab, w, y, x, k) / n - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    }
  }
  return total / (static_cast<double>(c) * (h - k + 1) * (w - k + 1));
}

}  // namespace skattn
