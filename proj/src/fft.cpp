#include "decaylab/fft.hpp"

namespace decaylab {

Fft::Fft(std::size_t n) : n_(n) {
  if (!is_pow2(n)) throw DomainError("Fft: size must be a power of two");
  rev_.resize(n);
  std::size_t bits = 0;
  while ((std::size_t{1} << bits) < n) ++bits;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < bits; ++b)
      if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
    rev_[i] = r;
  }
  tw_.resize(n / 2);
  tw_inv_.resize(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    double ang = -kTwoPi * static_cast<double>(k) / static_cast<double>(n);
    tw_[k] = Complex(std::cos(ang), std::sin(ang));
    tw_inv_[k] = std::conj(tw_[k]);
  }
}

void Fft::transform(Complex* a, bool inverse) const {
  for (std::size_t i = 0; i < n_; ++i)
    if (rev_[i] > i) std::swap(a[i], a[rev_[i]]);
  const std::vector<Complex>& tw = inverse ? tw_inv_ : tw_;
  for (std::size_t len = 2; len <= n_; len <<= 1) {
    std::size_t stride = n_ / len;
    for (std::size_t blk = 0; blk < n_; blk += len) {
      for (std::size_t j = 0; j < len / 2; ++j) {
        Complex w = tw[j * stride];
        Complex u = a[blk + j];
        Complex v = a[blk + j + len / 2] * w;
        a[blk + j] = u + v;
        a[blk + j + len / 2] = u - v;
      }
    }
  }
}

void Fft::forward(Complex* data) const { transform(data, false); }

void Fft::inverse(Complex* data) const {
  transform(data, true);
  double inv = 1.0 / static_cast<double>(n_);
  for (std::size_t i = 0; i < n_; ++i) data[i] *= inv;
}

}  // namespace decaylab
