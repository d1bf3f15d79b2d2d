#include "dm3d/fft.hpp"

#include <cmath>
#include <numbers>

namespace dm3d {

namespace {

using cplx = std::complex<double>;

// Iterative Cooley-Tukey, in place. sign = -1 forward, +1 inverse (no scaling).
void fft_radix2(std::vector<cplx>& a, int sign) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
    const cplx wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const cplx u = a[i + k];
        const cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

std::vector<cplx> dft_dispatch(const std::vector<cplx>& x, int sign) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  if (is_power_of_two(n)) {
    std::vector<cplx> a = x;
    fft_radix2(a, sign);
    return a;
  }
  std::vector<cplx> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    cplx acc(0.0, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = sign * 2.0 * std::numbers::pi *
                         static_cast<double>(k) * static_cast<double>(t) /
                         static_cast<double>(n);
      acc += x[t] * cplx(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

}  // namespace

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::vector<cplx> dft(const std::vector<cplx>& x) { return dft_dispatch(x, -1); }

std::vector<cplx> idft(const std::vector<cplx>& x) {
  std::vector<cplx> out = dft_dispatch(x, +1);
  const double inv = x.empty() ? 1.0 : 1.0 / static_cast<double>(x.size());
  for (cplx& v : out) v *= inv;
  return out;
}

std::vector<cplx> dft_direct(const std::vector<cplx>& x) {
  const std::size_t n = x.size();
  std::vector<cplx> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    cplx acc(0.0, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) *
                         static_cast<double>(t) / static_cast<double>(n);
      acc += x[t] * cplx(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

}  // namespace dm3d
