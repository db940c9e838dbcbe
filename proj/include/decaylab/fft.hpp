#pragma once

#include <complex>
#include <vector>

#include "decaylab/common.hpp"

namespace decaylab {

// In-place radix-2 complex FFT. n must be a power of two.
// Forward: X_k = sum_j x_j exp(-2*pi*i*j*k/n).  Inverse divides by n.
class Fft {
 public:
  explicit Fft(std::size_t n);

  std::size_t size() const { return n_; }
  void forward(Complex* data) const;
  void inverse(Complex* data) const;

  static bool is_pow2(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

 private:
  void transform(Complex* data, bool inverse) const;

  std::size_t n_;
  std::vector<std::size_t> rev_;
  std::vector<Complex> tw_;      // forward twiddles
  std::vector<Complex> tw_inv_;  // conjugate twiddles
};

}  // namespace decaylab
