#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "decaylab/common.hpp"

namespace decaylab {

// ---------------------------------------------------------------- profiles

enum class ProfileKind { Cylindrical, Conic, Power, PerturbedCylinder, Custom };

std::string to_string(ProfileKind kind);
ProfileKind profile_kind_from_string(const std::string& s);

struct ProfileEval {
  double theta = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
};

// Warp profile theta(s) of one end, parameterized by the distance coordinate
// s >= window_lo of that end.  theta must stay positive on the window.
struct ScalingProfile {
  ProfileKind kind = ProfileKind::Cylindrical;
  double power = 1.0;       // Power: theta = s^power, power in (0, 1]
  double amplitude = 1.0;   // PerturbedCylinder: theta = 2 + A cos(f s)
  double frequency = 1.0;
  double window_lo = 1.0;
  double window_hi = 64.0;
  // declared bound on |theta'|, |theta''|, |theta'''| over the window
  double deriv_bound = 1.0;

  // Custom: caller supplies value and first two derivatives
  std::function<double(double)> custom_theta;
  std::function<double(double)> custom_d1;
  std::function<double(double)> custom_d2;
  bool custom_expanding = false;

  static ScalingProfile cylindrical(double window_hi = 64.0);
  static ScalingProfile conic(double window_hi = 64.0);
  static ScalingProfile power_law(double p, double window_hi = 64.0);
  static ScalingProfile perturbed_cylinder(double amplitude, double frequency,
                                           double window_hi = 64.0);

  bool expanding() const;  // theta -> infinity along the end
  double min_theta() const;
};

// (theta, theta', theta'') at s; throws DomainError outside the window
ProfileEval profile_eval(const ScalingProfile& profile, double s);

// samples finite-difference estimates of theta', theta'', theta''' and
// checks them against profile.deriv_bound; throws DomainError on failure
void validate_profile_derivatives(const ScalingProfile& profile,
                                  int samples = 257);

// ---------------------------------------------------------------- model

struct Point {
  double r = 0.0;
  double theta = 0.0;  // stored wrapped to [0, 2pi)
};

struct CotangentPoint {
  Point x;
  double xi_r = 0.0;
  double xi_theta = 0.0;
};

struct MetricData {
  double g_rr = 1.0;
  double g_thth = 1.0;       // = theta_g^2
  double inv_g_rr = 1.0;
  double inv_g_thth = 1.0;
  double density = 1.0;      // sqrt(det g) = theta_g
};

// Two-ended surface of revolution S^1 x [r_lo, r_hi]:
//   g = dr^2 + theta_g(r)^2 dtheta^2,  theta_g = (circumference/2pi) * theta
// theta(r) equals the right profile at r >= 1, the mirrored left profile at
// r <= -1, and a quintic blend matching value and two derivatives on |r| < 1.
class SurfaceModel {
 public:
  SurfaceModel(ScalingProfile left, ScalingProfile right,
               double circumference = kTwoPi);

  const ScalingProfile& left() const { return left_; }
  const ScalingProfile& right() const { return right_; }
  double circumference() const { return circumference_; }
  double r_lo() const { return -left_.window_hi; }
  double r_hi() const { return right_.window_hi; }

  double theta(double r) const;       // raw glued profile
  double theta_d(double r) const;
  double theta_dd(double r) const;

  double theta_g(double r) const { return scale_ * theta(r); }
  double theta_g_d(double r) const { return scale_ * theta_d(r); }
  double theta_g_dd(double r) const { return scale_ * theta_dd(r); }

  const std::array<double, 6>& spline_coeffs() const { return spline_; }

 private:
  void check_window(double r) const;

  ScalingProfile left_;
  ScalingProfile right_;
  double circumference_;
  double scale_;                  // circumference / 2pi
  std::array<double, 6> spline_;  // blend polynomial coefficients, |r| < 1
};

MetricData metric_at(const SurfaceModel& model, const Point& p);

// squared g-norm of a covector
double cotangent_norm_sq(const SurfaceModel& model, const CotangentPoint& cp);

// unit covector at p with launch angle zeta: xi_r = cos zeta,
// xi_theta = theta_g(r) sin zeta, so |xi|_g = 1
CotangentPoint unit_covector(const SurfaceModel& model, const Point& p,
                             double zeta);

// ---------------------------------------------------------------- fields

enum class FieldMode { Analytic, FiniteDifference };

// Scalar function on the surface.  Either analytic partials are supplied or
// they are approximated by central differences of `value`.
struct ScalarField {
  std::function<double(double, double)> value;  // (r, theta)
  std::function<double(double, double)> d_r;
  std::function<double(double, double)> d_theta;
  std::function<double(double, double)> d_rr;
  std::function<double(double, double)> d_thth;
  double fd_step = 1e-5;

  FieldMode mode() const {
    return (d_r && d_theta) ? FieldMode::Analytic : FieldMode::FiniteDifference;
  }
  FieldMode second_order_mode() const {
    return (d_rr && d_thth) ? FieldMode::Analytic
                            : FieldMode::FiniteDifference;
  }

  double eval(double r, double theta) const { return value(r, theta); }
  double eval_d_r(double r, double theta) const;
  double eval_d_theta(double r, double theta) const;
  double eval_d_rr(double r, double theta) const;
  double eval_d_thth(double r, double theta) const;
};

struct GradientResult {
  double contra_r = 0.0;      // (grad f)^r = df/dr
  double contra_theta = 0.0;  // (grad f)^theta = theta_g^{-2} df/dtheta
  double norm = 0.0;          // |grad f|_g
};

GradientResult gradient(const SurfaceModel& model, const ScalarField& field,
                        const Point& p);

// positive Laplacian: -theta^{-1} d_r(theta d_r f) - theta^{-2} d_theta^2 f
double laplacian(const SurfaceModel& model, const ScalarField& field,
                 const Point& p);

// ---------------------------------------------------------------- flow

struct FlowSample {
  double t = 0.0;
  CotangentPoint state;
  double hamiltonian = 0.0;
};

struct FlowResult {
  std::vector<FlowSample> samples;
  double h_drift = 0.0;         // max |H - H(0)|
  double clairaut_drift = 0.0;  // max |xi_theta - xi_theta(0)|
  bool truncated = false;
  double exit_time = 0.0;  // time of window exit when truncated
};

// Hamiltonian flow of H = |xi|_g^2 integrated with classical RK4.
// Stops (flagging truncation) if r leaves [r_lo, r_hi] of the model.
FlowResult geodesic_flow(const SurfaceModel& model, const CotangentPoint& start,
                         double T, double dt);

// ---------------------------------------------------------------- distance

struct DistanceOptions {
  int n_r = 257;
  int n_theta = 256;
  // region; when NaN the region is derived from the query points
  double r_lo = std::nan("");
  double r_hi = std::nan("");
};

// Grid shortest-path distances: nodes on an (r, theta) lattice, edges over a
// 16-neighborhood with metric segment lengths (Simpson).  Converges to the
// geodesic distance from above as the lattice is refined.
class DistanceGraph {
 public:
  DistanceGraph(const SurfaceModel& model, double r_lo, double r_hi, int n_r,
                int n_theta);

  double distance(const Point& a, const Point& b) const;
  // distance field from a source set, evaluated at all lattice nodes
  std::vector<double> multi_source(const std::vector<Point>& sources) const;

  int n_r() const { return n_r_; }
  int n_theta() const { return n_theta_; }
  Point node_point(int ir, int it) const;
  double max_edge_length() const { return max_edge_; }

 private:
  int index(int ir, int it) const { return ir * n_theta_ + it; }
  double segment_length(const Point& a, const Point& b) const;
  std::vector<double> run_dijkstra(
      const std::vector<std::pair<int, double>>& seeds) const;

  const SurfaceModel& model_;
  double r_lo_, r_hi_, dr_, dth_;
  int n_r_, n_theta_;
  std::vector<std::pair<int, int>> offsets_;
  // adjacency: per node, list of (neighbor, length)
  std::vector<std::vector<std::pair<int, double>>> adj_;
  double max_edge_ = 0.0;
};

double distance(const SurfaceModel& model, const Point& a, const Point& b,
                const DistanceOptions& opts = {});

}  // namespace decaylab
