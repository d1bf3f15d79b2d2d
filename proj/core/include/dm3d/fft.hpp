#pragma once

#include <complex>
#include <vector>

namespace dm3d {

/// Discrete Fourier transform, unnormalized forward:
///   X[k] = sum_t x[t] * exp(-2*pi*i*k*t/N).
/// Dispatches to an iterative radix-2 FFT when N is a power of two and to the
/// direct O(N^2) evaluation otherwise. The direct path doubles as the test
/// oracle for the fast one.
std::vector<std::complex<double>> dft(const std::vector<std::complex<double>>& x);

/// Inverse transform with 1/N normalization: idft(dft(x)) == x.
std::vector<std::complex<double>> idft(const std::vector<std::complex<double>>& x);

/// Direct O(N^2) DFT, always.
std::vector<std::complex<double>> dft_direct(const std::vector<std::complex<double>>& x);

bool is_power_of_two(std::size_t n);

}  // namespace dm3d
