#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "decaylab/common.hpp"
#include "decaylab/control.hpp"
#include "decaylab/fft.hpp"
#include "decaylab/geometry.hpp"

namespace decaylab {

// ---------------------------------------------------------------------------
// Grid and state
// ---------------------------------------------------------------------------

enum class BoundaryKind { reflecting, sponge };

// Tensor grid on [-r_max, r_max] x [0, 2pi): radial nodes r_i = -r_max + i*dr
// with dr = 2 r_max / (n_r - 1); angular nodes theta_j = j * dtheta with
// dtheta = 2pi / n_theta. n_theta must be a power of two (the angular
// transform is a radix-2 FFT). Fields are stored row-major: index = i *
// n_theta + j.
struct Grid {
  int n_r = 129;
  int n_theta = 64;
  double r_max = 6.0;
  BoundaryKind boundary = BoundaryKind::reflecting;
  double sponge_width = 1.0;     // used when boundary == sponge
  double sponge_strength = 1.0;  // quadratic ramp peak value

  double dr() const { return 2.0 * r_max / (n_r - 1); }
  double dtheta() const { return kTwoPi / n_theta; }
};

struct StateVector {
  std::vector<Complex> u;  // field
  std::vector<Complex> v;  // time derivative
  double t = 0.0;
};

enum class AngularScheme { spectral, stencil2 };
enum class TimeScheme { trapezoidal, leapfrog };

// ---------------------------------------------------------------------------
// Spatial discretization
// ---------------------------------------------------------------------------

// Flux-form second-order radial stencil weighted by the profile at half
// nodes, with reflecting (even-extension / Neumann) ends, plus an angular
// multiplier per Fourier mode: exact symbol k^2 for the spectral scheme,
// (2 - 2cos(k dtheta))/dtheta^2 for the stencil fallback. The operator is
// the positive Laplacian, self-adjoint and nonnegative with respect to the
// discrete measure theta_i * dr * dtheta (half weights at the radial ends).
class Discretization {
 public:
  Discretization(const SurfaceModel& model, const Grid& grid,
                 AngularScheme angular = AngularScheme::spectral);

  const Grid& grid() const { return grid_; }
  const SurfaceModel& model() const { return *model_; }
  AngularScheme angular() const { return angular_; }
  int n_r() const { return grid_.n_r; }
  int n_theta() const { return grid_.n_theta; }
  std::size_t size() const {
    return static_cast<std::size_t>(grid_.n_r) * grid_.n_theta;
  }
  double r_node(int i) const { return -grid_.r_max + i * grid_.dr(); }
  double theta_node(int i) const { return theta_[i]; }
  double theta_half(int i) const { return theta_half_[i]; }
  // quadrature weight of node (i, j): theta_i * dr * dtheta, halved at the
  // radial boundary rows
  double weight(int i) const { return weight_[i]; }
  // angular symbol of Fourier mode index k (0..n_theta-1, aliased to the
  // symmetric range)
  double symbol(int k) const { return symbol_[k]; }

  // in-place angular transform of a row-major field (per radial row)
  void to_modes(std::vector<Complex>& field) const;
  void to_physical(std::vector<Complex>& field) const;

  // positive Laplacian applied in physical space (round trip through modes)
  void apply_laplacian(const std::vector<Complex>& u,
                       std::vector<Complex>& out) const;
  // radial tridiagonal system of the mode-k block (angular multiplier
  // included on the diagonal); sub/super have length n_r - 1
  void mode_laplacian(int k, std::vector<double>& sub,
                      std::vector<double>& diag,
                      std::vector<double>& super) const;

  // <L_h u, u> with the discrete measure: the squared gradient norm
  double gradient_form(const std::vector<Complex>& u) const;
  // sum of weight * |u|^2: the squared L^2 norm
  double mass_form(const std::vector<Complex>& u) const;
  // gradient + mass forms restricted to |r| <= r_cut (radial faces must have
  // both endpoints inside); used for sponge-excluded balance checks
  double gradient_form_within(const std::vector<Complex>& u,
                              double r_cut) const;
  double mass_form_within(const std::vector<Complex>& u, double r_cut) const;

  // additional damping from the sponge layer (zero for reflecting grids);
  // indexed by radial node
  const std::vector<double>& sponge_profile() const { return sponge_; }
  // radius below which the sponge vanishes (r_max for reflecting grids)
  double physical_radius() const;

  // largest eigenvalue of L_h + I, estimated by power iteration (cached)
  double max_eigenvalue() const;

 private:
  const SurfaceModel* model_;
  Grid grid_;
  AngularScheme angular_;
  std::vector<double> theta_, theta_half_, weight_, symbol_, sponge_;
  Fft fft_;
  mutable double max_eig_ = -1.0;
};

// Real tridiagonal solve (Thomas algorithm) on a complex right-hand side;
// sub and super have length n-1. Throws NumericsError on a vanishing pivot.
void solve_tridiagonal(const std::vector<double>& sub,
                       const std::vector<double>& diag,
                       const std::vector<double>& super,
                       std::vector<Complex>& rhs);

// ---------------------------------------------------------------------------
// Time stepping
// ---------------------------------------------------------------------------

// Advances (u, v) through v' = -(L_h + I)u - a v, u' = v.
//  - trapezoidal: implicit midpoint / Crank-Nicolson, unconditionally
//    stable, preserves the dissipation balance of the discrete quadratic
//    form exactly (up to linear-solver tolerance). Damping that is constant
//    in the angle uses direct per-mode tridiagonal solves; general damping
//    uses conjugate gradients preconditioned by the angular-mean tridiagonal
//    solve.
//  - leapfrog: explicit kick-drift-kick splitting bracketed by exact
//    pointwise damping half-steps, order 2, stable for dt < 2/sqrt(max
//    eigenvalue).
class Stepper {
 public:
  Stepper(const Discretization& disc, std::vector<double> damping,
          TimeScheme scheme, double dt);

  double dt() const { return dt_; }
  TimeScheme scheme() const { return scheme_; }
  // true when the damping is angularly uniform and the trapezoidal scheme
  // runs on the direct per-mode path
  bool mode_diagonal() const { return mode_diagonal_; }
  // explicit-scheme step-size bound 2/sqrt(lambda_max)
  double stability_limit() const;
  const std::vector<double>& damping() const { return damping_; }

  // one step in place; throws NumericsError when the state stops being
  // finite (message carries the step index derived from state.t)
  void advance(StateVector& state) const;

 private:
  void advance_trapezoidal(StateVector& state) const;
  void advance_leapfrog(StateVector& state) const;
  void apply_k(const std::vector<Complex>& in, std::vector<Complex>& out) const;
  void solve_mass_matrix(std::vector<Complex>& rhs) const;  // M = I+Ha+H^2K

  const Discretization* disc_;
  std::vector<double> damping_;
  TimeScheme scheme_;
  double dt_;
  bool mode_diagonal_;
  // factored per-mode tridiagonals of M for the direct path, and of the
  // angular-mean preconditioner for the CG path
  struct ModeFactor {
    std::vector<double> sub, diag, super;
  };
  std::vector<ModeFactor> factors_;
  std::vector<double> exp_half_damping_;  // leapfrog: exp(-dt/2 * a)
};

// ---------------------------------------------------------------------------
// Observables
// ---------------------------------------------------------------------------

struct EnergyReport {
  double energy = 0.0;   // (grad_sq + v_sq) / 2
  double x_sq = 0.0;     // grad_sq + u_sq + v_sq
  double grad_sq = 0.0;  // <L_h u, u>
  double u_sq = 0.0;
  double v_sq = 0.0;
};

EnergyReport energy(const Discretization& disc, const StateVector& state);

// Max over consecutive sample pairs of
//   |(X^2_{n+1} - X^2_n) / (2 dt) + sum a |v_{n+1/2}|^2|
// with v_{n+1/2} = (v_n + v_{n+1})/2. For sponge grids both the norm and
// the damping sum are restricted to the physical window |r| <=
// physical_radius(). Samples must be one integrator step apart.
double dissipation_residual(const Discretization& disc,
                            const std::vector<double>& damping,
                            const std::vector<StateVector>& samples,
                            double dt);

// ---------------------------------------------------------------------------
// Decay experiments
// ---------------------------------------------------------------------------

struct InitialData {
  enum class Kind { gaussian, mode };
  Kind kind = Kind::gaussian;
  double amplitude = 1.0;
  double r0 = 0.0;
  double theta0 = 0.0;
  double sigma = 0.6;
  int mode_k = 0;  // Kind::mode: radial Gaussian times e^{ik theta}
};

StateVector make_initial_state(const Discretization& disc,
                               const InitialData& init);

struct SeriesSample {
  double t = 0.0;
  double energy = 0.0;
  double x_sq = 0.0;
  double residual = 0.0;  // dissipation residual of the preceding step
};

struct DecayFit {
  struct Exponential {
    double amplitude = 0.0;  // X(t) ~ amplitude * exp(-rate * t)
    double rate = 0.0;
    double rms = 0.0;  // log-space residual RMS
  };
  struct LogPower {
    double constant = 0.0;  // X(t) ~ constant / log(2 + t)^power
    double power = 0.0;
    double rms = 0.0;
  };
  Exponential exponential;
  LogPower log_power;
  std::string selected;  // "exponential", "log-power", or "indeterminate"
  double t_lo = 0.0, t_hi = 0.0;
  bool truncated = false;  // fit window shortened at the round-off floor
  std::string to_json() const;
};

// Least-squares fits of X(t) = sqrt(x_sq) on samples with t >= t_lo:
// log-linear for the exponential model, fixed-power log-power model.
// Selection: exponential when its log RMS is no worse and its rate is
// positive; log-power when strictly better; otherwise indeterminate.
DecayFit fit_decay(const std::vector<SeriesSample>& series, double t_lo,
                   double log_power_exponent);

struct EvolutionConfig {
  Grid grid;
  AngularScheme angular = AngularScheme::spectral;
  TimeScheme scheme = TimeScheme::trapezoidal;
  double dt = 5e-3;
  double horizon = 40.0;
  int cadence = 10;  // record every this many steps
  InitialData init;
  double fit_fraction = 0.5;      // tail fraction of the horizon fitted
  double log_power_exponent = 2.0;
};

// Damping source for an experiment: a structured field, plus a constant
// background (used alone when field is null).
struct DampingSpec {
  const DampingField* field = nullptr;
  double uniform = 0.0;
};

struct DecayExperiment {
  std::vector<SeriesSample> series;
  DecayFit fit;
  EnergyReport initial_energy;
  EnergyReport final_energy;
  std::vector<std::string> warnings;  // coarse-grid and sponge notes
  double max_residual = 0.0;
};

DecayExperiment run_decay_experiment(const SurfaceModel& model,
                                     const DampingSpec& damping,
                                     const EvolutionConfig& config);

// time series CSV with columns t, E, X2, residual
void write_series_csv(const std::string& path,
                      const std::vector<SeriesSample>& series);

// checkpoint: magic line, one JSON header line (dimensions, radius, time),
// then raw little-endian doubles (u then v, re/im interleaved)
void save_checkpoint(const std::string& path, const Discretization& disc,
                     const StateVector& state);
StateVector load_checkpoint(const std::string& path,
                            const Discretization& disc);

}  // namespace decaylab
