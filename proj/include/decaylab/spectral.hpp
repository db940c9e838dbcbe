#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "decaylab/common.hpp"
#include "decaylab/evolution.hpp"

namespace decaylab {

// ---------------------------------------------------------------------------
// Semigroup generator on X = H^1 x L^2
// ---------------------------------------------------------------------------

// Block operator A = [[0, I], [-(L_h + I), -a]] acting on states (u, v),
// with the X inner product <U, V>_X = <K u1, u2>_w + <v1, v2>_w where
// K = L_h + I and w is the discrete theta-weighted measure. The adjoint with
// respect to X is A* = [[0, -I], [K, -a]]. Resolvent applications reduce to
// scalar solves with P(sigma) = K + sigma a + sigma^2: direct per-mode
// tridiagonal solves when the damping is angularly uniform (any angular
// scheme), and a sparse factorization otherwise (stencil angular scheme
// required, since the trigonometric angular operator is dense per row).
class GeneratorOperator {
 public:
  GeneratorOperator(const Discretization& disc, std::vector<double> damping);

  const Discretization& disc() const { return *disc_; }
  const std::vector<double>& damping() const { return damping_; }
  bool mode_diagonal() const { return mode_diagonal_; }
  std::size_t field_size() const { return disc_->size(); }

  void apply(const StateVector& in, StateVector& out) const;          // A U
  void adjoint_apply(const StateVector& in, StateVector& out) const;  // A* U
  // conjugate-linear in the first argument
  Complex x_dot(const StateVector& a, const StateVector& b) const;
  double x_norm_sq(const StateVector& a) const;
  double x_norm(const StateVector& a) const;

  // (A - sigma)^{-1} rhs and ((A - sigma)^*)^{-1} rhs; throws NumericsError
  // when the shifted operator is numerically singular
  void resolvent_apply(Complex sigma, const StateVector& rhs,
                       StateVector& out) const;
  void adjoint_resolvent_apply(Complex sigma, const StateVector& rhs,
                               StateVector& out) const;

 private:
  void apply_k(const std::vector<Complex>& in, std::vector<Complex>& out) const;

  const Discretization* disc_;
  std::vector<double> damping_;
  bool mode_diagonal_;
};

// ---------------------------------------------------------------------------
// Resolvent norms along the imaginary axis
// ---------------------------------------------------------------------------

struct ResolventEstimate {
  double value = 0.0;  // ||(A - i mu)^{-1}||_{X -> X}
  bool infinite = false;
  bool converged = true;
  int iterations = 0;
  double rel_change = 0.0;  // last relative update of the estimate
};

// 1/sigma_min(A - i mu) via power iteration on T T* with T the resolvent,
// in the X inner product; each iteration is one adjoint solve and one
// forward solve. Norms beyond 1e14 (or singular solves) report infinite.
ResolventEstimate resolvent_norm(const GeneratorOperator& op, double mu,
                                 double tol = 1e-6, int max_iter = 600,
                                 std::uint64_t seed = 0x5EC7ULL);

enum class StabilityClass { uniformly_bounded, exponential_growth,
                            inconclusive };
std::string to_string(StabilityClass c);

struct SweepOptions {
  double bounded_factor = 30.0;  // max/median gate for uniform boundedness
  double tau_max = 0.2;          // Kendall trend gate on peaks
  double r2_min = 0.9;           // envelope fit gate for growth
  double tol = 1e-6;
  int max_iter = 600;
  std::uint64_t seed = 0x5EC7ULL;
};

struct SweepPoint {
  double mu = 0.0;
  double norm = 0.0;
  bool infinite = false;
  bool converged = true;
};

struct EnvelopeFit {
  double c = 0.0;          // log norm ~ c * mu + log_const
  double log_const = 0.0;
  double r2 = 0.0;
};

struct ResolventSweep {
  std::vector<SweepPoint> points;
  StabilityClass classification = StabilityClass::inconclusive;
  double max_norm = 0.0;
  double median_norm = 0.0;
  double peak_ratio = 0.0;  // max / median over finite points
  double kendall_tau = 0.0;
  EnvelopeFit growth_fit;   // always reported
  std::string note;
  std::string to_json() const;
};

ResolventSweep resolvent_sweep(const GeneratorOperator& op,
                               const std::vector<double>& mu_grid,
                               const SweepOptions& opts = {});
// columns mu, norm, flag (flag: "ok", "infinite", or "unconverged")
void write_sweep_csv(const std::string& path, const ResolventSweep& sweep);

// ---------------------------------------------------------------------------
// Eigenvalues near the imaginary axis
// ---------------------------------------------------------------------------

struct SpectrumOptions {
  double re_lo = -1.0;   // strip of accepted real parts
  double re_hi = 0.05;
  double mu_max = 10.0;  // imaginary range scanned
  int n_shifts = 15;
  int krylov = 40;
  double tol = 1e-8;      // accepted relative residual ||A w - lambda w||/||w||
  double shift_re = 0.1;  // real part of the shift ladder
  std::uint64_t seed = 0xE16ULL;
};

struct EigenvalueEntry {
  Complex lambda;
  double residual = 0.0;
};

struct SpectrumWindowResult {
  std::vector<EigenvalueEntry> values;  // sorted by descending real part
  bool complete = true;                 // false when a shift produced nothing
  std::vector<std::string> notes;
  double abscissa = -std::numeric_limits<double>::infinity();
  double min_abs_real = std::numeric_limits<double>::infinity();
};

// Shift-invert Arnoldi (X-orthonormal basis, reorthogonalized) on a ladder
// of shifts shift_re + i mu covering [0, mu_max]; conjugates are added by
// the real symmetry of A. Only eigenvalues with residual <= tol are kept.
SpectrumWindowResult spectrum_window(const GeneratorOperator& op,
                                     const SpectrumOptions& opts = {});
// columns re, im, residual
void write_spectrum_csv(const std::string& path,
                        const SpectrumWindowResult& result);

}  // namespace decaylab
