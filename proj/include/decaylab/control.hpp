#pragma once

#include <string>
#include <vector>

#include "decaylab/geometry.hpp"

namespace decaylab {

// ---------------------------------------------------------------- damping

// Nonnegative C^2 damping coefficient: a smooth background plus plateau
// bumps on metric balls plus rotation-invariant radial bands.
//
// Each bump is a function of the chart distance
//   d_m(p) = sqrt((r - r_m)^2 + theta_g(r_m)^2 * dtheta^2)
// (the warp factor frozen at the bump center) and equals `level` for
// d <= omega, 0 for d >= omega_out.
class DampingField {
 public:
  struct Band {
    double r_center = 0.0;
    double inner_half_width = 0.5;
    double outer_half_width = 1.0;
    double level = 0.1;
  };

  struct Config {
    std::vector<Point> centers;
    double omega = 0.5;      // inner plateau radius
    double omega_out = 1.0;  // support radius
    double two_beta = 0.0;   // declared floor on the inner balls
    double level = 0.1;      // bump height
    double background = 0.0;
    std::vector<Band> bands;
    // continuous derivatives of the transition profile (2, 3 or 4);
    // phase-space differentiation diagnostics need the smoother orders
    int smoothness = 2;
  };

  DampingField(const SurfaceModel& model, Config cfg);

  double value(double r, double theta) const;
  double value(const Point& p) const { return value(p.r, p.theta); }
  double d_r(double r, double theta) const;
  double d_theta(double r, double theta) const;

  const Config& config() const { return cfg_; }
  const SurfaceModel& model() const { return *model_; }

  // analytic scalar-field view (first-order partials supplied)
  ScalarField as_scalar_field() const;

  // crude upper bound for sup a (bump overlaps included by summation)
  double sup_bound() const;

 private:
  const SurfaceModel* model_;
  Config cfg_;
  std::vector<double> center_theta_;  // theta_g frozen at each center
};

struct DampingEval {
  double value = 0.0;
  GradientResult grad;
};

DampingEval damping_eval(const SurfaceModel& model, const DampingField& field,
                         const Point& p);

// smoothness / sign proxy over a sampling grid
struct DampingValidation {
  double min_value = 0.0;
  double max_value = 0.0;
  double max_grad = 0.0;       // max |grad a|_g over the grid
  double max_second = 0.0;     // max finite-difference second derivative
  double min_center_value = 0.0;
  bool ok = false;
};

DampingValidation damping_validate(const SurfaceModel& model,
                                   const DampingField& field, double r_lo,
                                   double r_hi, int n_r = 129,
                                   int n_theta = 64);

// ---------------------------------------------------------------- reports

enum class ControlCondition { NCC, GCC };

struct ControlReport {
  ControlCondition condition = ControlCondition::NCC;
  bool pass = false;
  double margin = 0.0;  // min slack over all checks; negative iff fail

  // NCC parameters
  double L = 0.0;
  double omega = 0.0;
  double two_beta = 0.0;

  // GCC parameters
  double T = 0.0;
  double alpha = 0.0;

  Point worst_point;         // witness base point
  double worst_zeta = 0.0;   // witness launch angle (GCC)
  double worst_value = 0.0;  // offending distance / damping / average
  bool any_truncated = false;
  std::string note;

  std::string to_json() const;
};

// ---------------------------------------------------------------- NCC

struct NccSampling {
  double r_lo = 0.0;
  double r_hi = 0.0;
  int n_r = 129;
  int n_theta = 128;
};

// Network control condition: every sampled point lies within L of the
// center set, and a >= two_beta on every sampled inner ball.
ControlReport ncc_check(const SurfaceModel& model, const DampingField& field,
                        double L, double omega, double two_beta,
                        const NccSampling& sampling);

// ---------------------------------------------------------------- GCC

struct AverageResult {
  double value = 0.0;
  bool truncated = false;
  double covered_time = 0.0;  // flow time before truncation
};

// time average of the damping along the Hamiltonian flow (trapezoid rule);
// the start covector is normalized to the unit shell first.  Trajectories
// that leave the window freeze the integrand: boundary value on a bounded
// (cylindrical-type) end, zero on an expanding end.
AverageResult gcc_average(const SurfaceModel& model, const DampingField& field,
                          const CotangentPoint& start, double T,
                          double dt = 1e-3);

struct SigmaSampling {
  double r_lo = 0.0;
  double r_hi = 0.0;
  int n_r = 16;
  int n_theta = 8;
  int n_zeta = 12;
  double dt = 2e-3;
};

struct SigmaSample {
  double r = 0.0;
  double theta = 0.0;
  double zeta = 0.0;
  double average = 0.0;
  bool truncated = false;
};

// geometric control condition over a finite sample of the unit shell:
// pass iff min sampled average >= alpha
ControlReport gcc_check(const SurfaceModel& model, const DampingField& field,
                        double T, double alpha, const SigmaSampling& sampling,
                        std::vector<SigmaSample>* sweep = nullptr);

// ---------------------------------------------------------------- NCC from GCC

struct DerivedNcc {
  double L = 0.0;
  double omega = 0.0;
  double two_beta = 0.0;
  std::vector<Point> centers;
  ControlReport ncc;
};

// derives network-control parameters (L = 2T, two_beta = alpha/2, omega by
// a continuity scan around sampled high-damping points) and closes the loop
// by running ncc_check on them; requires a passing GCC report
DerivedNcc gcc_implies_ncc(const SurfaceModel& model, const DampingField& field,
                           double T, double alpha, const ControlReport& gcc,
                           const NccSampling& sampling);

// ---------------------------------------------------------------- escape

struct EscapeResult {
  double c = 0.0;        // (2/T) int_0^T (T-s) a(phi_s) ds
  double b = 1.0;        // e^c
  double g_value = 0.0;  // 2 a b + {|xi|^2, b} evaluated as 2 e^c <a>_T
  double average = 0.0;  // Simpson <a>_T along the same trajectory
  bool truncated = false;
};

// escape-function diagnostic along one trajectory; the start covector is
// normalized to the unit shell
EscapeResult escape_function(const SurfaceModel& model,
                             const DampingField& field,
                             const CotangentPoint& start, double T,
                             double dt = 1e-3);

// Residual |(2 a b + {|xi|^2, b}) - 2 e^c <a>_T| with the Poisson bracket
// {|xi|^2, b} = d/dt b(phi_t X)|_{t=0} evaluated by a fourth-order centered
// difference in flow time (offset delta). Small residuals certify the escape
// identity independently of the quadrature shortcut used by escape_function.
double escape_identity_residual(const SurfaceModel& model,
                                const DampingField& field,
                                const CotangentPoint& start, double T,
                                double delta = 1e-3, double dt = 5e-4);

}  // namespace decaylab
