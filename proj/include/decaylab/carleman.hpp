#pragma once

#include <array>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "decaylab/control.hpp"
#include "decaylab/evolution.hpp"
#include "decaylab/geometry.hpp"

namespace decaylab {

// ---------------------------------------------------------------- fields

// Coordinate partials of a scalar weight at a point.
struct WeightGrad {
  double d_r = 0.0;
  double d_theta = 0.0;
};

// Scalar weight on the surface with an evaluable gradient.  Second
// derivatives default to central differences of the gradient.
class WeightField {
 public:
  virtual ~WeightField() = default;
  virtual double value(const Point& p) const = 0;
  virtual WeightGrad gradient(const Point& p) const = 0;
  // (d_rr, d_rtheta, d_thth); default differentiates gradient()
  virtual std::array<double, 3> hessian(const Point& p) const;
  virtual double fd_step() const { return 1e-5; }
};

// weight backed by closures; gradient closures are required
class AnalyticWeight : public WeightField {
 public:
  using Fn = std::function<double(double, double)>;  // (r, theta)
  AnalyticWeight(Fn value, Fn d_r, Fn d_theta);

  double value(const Point& p) const override { return value_(p.r, p.theta); }
  WeightGrad gradient(const Point& p) const override {
    return {d_r_(p.r, p.theta), d_theta_(p.r, p.theta)};
  }

 private:
  Fn value_, d_r_, d_theta_;
};

// |grad psi|_g = sqrt(psi_r^2 + psi_theta^2 / theta_g^2)
double metric_gradient_norm(const SurfaceModel& model, const WeightField& w,
                            const Point& p);

// ---------------------------------------------------------------- moves

// Compactly supported smooth translation of the plane:
//   T(z) = z + s(|z - c|) v,   s = 1 on [0, inner], smooth descent to 0
// at `outer`, identity outside.  The constructor rejects displacements
// whose perturbation Lipschitz constant exceeds 0.9, so T is always a
// diffeomorphism with analytic Jacobian determinant 1 + s'(d) <v, z-c>/d.
class DiffeoMove {
 public:
  DiffeoMove(double cx, double cy, double inner, double outer, double vx,
             double vy);

  void apply(double& x, double& y) const;
  // applies the move and accumulates d(out)/d(in) into the row-major 2x2 J
  void apply_with_jacobian(double& x, double& y,
                           std::array<double, 4>& jac) const;
  double det_jacobian(double x, double y) const;
  bool identity_at(double x, double y) const;

  double cx() const { return cx_; }
  double cy() const { return cy_; }
  double inner() const { return inner_; }
  double outer() const { return outer_; }
  double vx() const { return vx_; }
  double vy() const { return vy_; }

 private:
  double cx_, cy_, inner_, outer_, vx_, vy_;
};

// chain of moves walking a point from `from` to `to` along the segment;
// every move is centred on the tracked point, so the endpoint is exact
std::vector<DiffeoMove> make_move_chain(double from_x, double from_y,
                                        double to_x, double to_y, double inner,
                                        double outer);

// ---------------------------------------------------------------- family

// Rectangular scan lattice.  The angular range defaults to the full
// circle (exclusive right endpoint); a proper sub-window samples both
// endpoints inclusively.
struct ScanGrid {
  double r_lo = -6.0;
  double r_hi = 6.0;
  int n_r = 257;
  int n_theta = 64;
  double theta_lo = 0.0;
  double theta_hi = kTwoPi;

  bool full_circle() const {
    return std::abs(theta_hi - theta_lo - kTwoPi) < 1e-12;
  }
  double r_node(int i) const {
    return r_lo + (r_hi - r_lo) * i / (n_r - 1);
  }
  double theta_node(int j) const {
    if (full_circle()) return theta_lo + kTwoPi * j / n_theta;
    return theta_lo + (theta_hi - theta_lo) * j / (n_theta - 1);
  }
  // coarse grid whose nodes are a subset of this one
  ScanGrid subsample(int stride_r, int stride_theta) const;
};

struct WeightFamily {
  std::vector<std::shared_ptr<const WeightField>> weights;
  std::vector<std::string> labels;
  double two_rho = 0.0;   // strong-gradient threshold
  double tau = 0.0;       // value gap at weak points
  double lambda = 8.0;    // default exponent for phi = exp(lambda psi)
  double beta = 0.0;      // observation region is {a > beta}
  double two_beta = 0.0;  // points with a > two_beta are exempt
  std::shared_ptr<const DampingField> damping;
};

struct CompatibilityViolation {
  Point x;
  int k = -1;       // weak weight
  int best_l = -1;  // strongest certifying candidate (-1: none strong)
  double best_gap = 0.0;  // max over strong l of psi_l - psi_k - tau
};

struct CompatibilityReport {
  ScanGrid grid;
  bool pass = false;
  long checked = 0;
  long skipped = 0;
  double two_rho = 0.0;
  double tau = 0.0;
  // min over checked points of (max_l |grad psi_l| - two_rho)
  double min_gradient_margin = 0.0;
  // min over weak instances of best_gap (+inf when nothing is weak)
  double min_gap_margin = 0.0;
  long violation_count = 0;
  std::vector<CompatibilityViolation> violations;  // capped sample

  std::string to_json() const;
};

// Pointwise certificate: at every grid node off {a > two_beta}, each
// weight with |grad|_g < two_rho must be dominated by a weight with
// |grad|_g >= two_rho and value >= psi_k + tau.
CompatibilityReport compatibility_check(const SurfaceModel& model,
                                        const WeightFamily& family,
                                        const ScanGrid& grid,
                                        int max_recorded = 512);

// range/finiteness scan: all weights within [0, 3] and finite on the grid
struct FamilyRangeReport {
  double min_value = 0.0;
  double max_value = 0.0;
  bool ok = false;
};
FamilyRangeReport family_range_check(const WeightFamily& family,
                                     const ScanGrid& grid);

// ---------------------------------------------------------------- ends

enum class Side { left, right };

// weights covering one end, valid for end coordinate s >= start_r away
// from the damped balls
struct EndWeightSet {
  Side side = Side::right;
  double start_r = 1.0;
  std::vector<std::shared_ptr<const WeightField>> weights;
  std::vector<std::string> labels;
  double floor_rho1 = 0.0;  // strong-gradient floor
  double gap = 0.5;         // certified value gap at weak points
};

// ------------------------------------------------ cylindrical end

struct CylindricalWeightParams {
  Side side = Side::right;
  double L = 0.45;
  double omega = 0.1;
  double two_beta = 0.5;
  double epsilon = 0.0;  // <= 0: min(0.05, (L + 4 omega) / 10)
  // construction scan (end coordinates, off the damped balls)
  int scan_n_r = 513;
  int scan_n_theta = 256;
};

struct CylindricalWeightResult {
  EndWeightSet set;
  double epsilon = 0.0;
  double spacing = 0.0;          // L + 4 omega
  std::vector<Point> lattice;    // critical lattice before relocation
  std::vector<Point> criticals;  // critical positions after relocation
  double two_rho = 0.0;          // min |grad|_g off balls over the scan
  ScanGrid scan;
  double min_value = 0.0;
  double max_value = 0.0;
};

// Single Morse-product weight on a constant-profile end: an angular
// cosine bump times a radial cosine ladder, rescaled to [1, 3], with the
// critical lattice carried onto the damped ball centres by move chains.
CylindricalWeightResult build_cylindrical_weight(
    const SurfaceModel& model, const DampingField& damping,
    const CylindricalWeightParams& params);

// ------------------------------------------------ expanding end

// Region of an expanding end where the chart weights are materialised
// (relocation chains built) and scanned.  Far out the critical lattice is
// angularly dense, so certification patches there use narrow angular
// windows; use_for_c0 marks patches feeding the gradient-floor sample.
struct SubconicPatch {
  double s_lo = 0.0;
  double s_hi = 0.0;
  double theta_lo = 0.0;
  double theta_hi = kTwoPi;
  bool use_for_c0 = true;
};

struct SubconicWeightParams {
  Side side = Side::right;
  double L = 0.2;
  double omega = 0.08;
  double two_beta = 0.5;
  double epsilon = 0.0;  // <= 0: min(0.05, (L + 4 omega) / 10); must be < 1/12
  // empty: one default full-angle patch of two lattice periods at the
  // chart structure start
  std::vector<SubconicPatch> patches;
  int patch_n_r = 129;
  int patch_n_theta = 256;
};

struct SubconicWeightResult {
  EndWeightSet set;  // two chart weights
  double epsilon = 0.0;
  double spacing = 0.0;  // L + 4 omega
  // chart/flattening constants, sampled over the patches
  double C1_minus = 1.0, C1_plus = 1.0;
  double C2_minus = 1.0, C2_plus = 1.0;
  double C_minus = 1.0, C_plus = 1.0;
  double C0 = 0.0;      // gradient floor of the chart weights on the core
  double R0 = 0.0;      // chart structure start
  double R = 0.0;       // validity start (= set.start_r)
  double two_rho = 0.0;  // C0 * C1_minus / 24
  double chi_max_slope = 0.0;        // dense 1d scan of |chi'(y)|
  double chi_slope_margin = 0.0;     // (C0/72) / max |grad chi|_g at s >= R
  int criticals_total = 0;
  int saddles_total = 0;
  int relocated = 0;
  std::vector<SubconicPatch> patches;  // resolved materialised patches
  std::vector<Point> criticals;        // relocated positions (global coords)
};

// Two overlapping angular charts on an expanding end; in each chart the
// weight is a flattened cosine-product lattice with all critical points
// (extrema and saddles) carried into damped regions, cut off by a collar
// profile so the chart weights extend by zero across the chart edge.
SubconicWeightResult build_subconic_weights(const SurfaceModel& model,
                                            const DampingField& damping,
                                            const SubconicWeightParams& params);

// ------------------------------------------------ glue

struct GlueParams {
  // certificate window (construction scan; the certificate subsamples it)
  double scan_r_lo = -6.0;
  double scan_r_hi = 6.0;
  int scan_n_r = 511;
  int scan_n_theta = 512;
  int cert_stride_r = 2;
  int cert_stride_theta = 2;
  double lambda = 8.0;
  // overrides; <= 0 means "measure" (rho0) / "min of end floors" (rho1)
  double rho0 = 0.0;
  double rho1 = 0.0;
  // demand the cutoff profiles complete inside the model window
  bool require_full_cutoffs = false;
};

struct GlueResult {
  WeightFamily family;
  double rho0 = 0.0;
  double rho1 = 0.0;
  double R = 0.0;  // uniform end-validity radius
  double I = 0.0;  // cutoff stage length 432 / rho1
  double tau = 0.0;
  double two_rho = 0.0;
  Point core_ball;           // damped ball holding the core criticals
  double core_min = 0.0;     // core weight range over the scan
  double core_max = 0.0;
  double chi1_max_slope = 0.0;   // dense 1d scan of |chi1'|
  double chi1_slope_bound = 0.0;  // rho1 / 216
  double chi0_max_slope = 0.0;
  CompatibilityReport certificate;
};

// Joins a compact-core weight (ramp plus a dimple anchored in a damped
// ball, rescaled to [1/3, 2/3]) with the end weight sets through slow
// radial cutoffs; records the thresholds two_rho = min(rho0, rho1/72)
// and tau = 1/72 and certifies compatibility on the scan window.
GlueResult glue_weights(const SurfaceModel& model, const DampingField& damping,
                        const std::vector<EndWeightSet>& ends,
                        const GlueParams& params);

// ---------------------------------------------------------------- probes

struct ConjugationResult {
  std::vector<Complex> direct;    // exp(phi/h) P (exp(-phi/h) u)
  std::vector<Complex> expanded;  // assembled first-order form
  double discrepancy = 0.0;       // sup |direct - expanded| off the mask
  int masked = 0;                 // nodes with (phi - min phi)/h too large
  double shift = 0.0;             // min phi subtracted before exponentials
};

// Compares the conjugation exp(phi/h) (h^2 Lap_g - V) exp(-phi/h) applied
// to u against the expanded operator
//   (h^2 Lap_g - |grad phi|^2 - V) u + 2 h grad phi . grad u - h (Lap phi) u
// with phi = exp(lambda psi); the discrepancy converges at second order.
ConjugationResult conjugated_apply(const Discretization& disc,
                                   const WeightField& psi, double lambda,
                                   double h, double V,
                                   const std::vector<Complex>& u);

struct BracketSample {
  CotangentPoint zeta;
  double bracket = 0.0;    // {p_re, p_im} at the sample
  double term_quad = 0.0;  // 4 lambda^2 phi <d psi, xi>_g^2  (nonnegative)
  double envelope = 0.0;   // 2 rho^4 lambda^4 exp(3 lambda psi)
};

struct BracketReport {
  double min_bracket = 0.0;
  double min_ratio = 0.0;  // min of bracket / envelope
  std::vector<BracketSample> samples;
};

// Poisson bracket of the real/imaginary conjugated symbols
//   p_re = |xi|_g^2 - |grad phi|_g^2 - V0,  p_im = 2 <d phi, xi>_g
// evaluated on the characteristic shell; each sample must satisfy the
// shell bounds 1/4 (|grad phi|^2 + V0) <= |xi|^2 <= 4 (|grad phi|^2 + V0)
// and |grad psi|_g >= rho, otherwise a DomainError names the failure.
BracketReport bracket_positivity(const SurfaceModel& model,
                                 const WeightField& psi, double lambda,
                                 double rho, double V0,
                                 const std::vector<CotangentPoint>& sample);

// covector at x with direction zeta and |xi|_g = scale * sqrt(|grad
// phi|_g^2 + V0): a convenient shell member
CotangentPoint shell_covector(const SurfaceModel& model, const WeightField& psi,
                              double lambda, double V0, const Point& x,
                              double zeta, double scale = 1.0);

enum class ProbeOperator { semiclassical, fixed_mu };

struct ProbeParams {
  ProbeOperator op = ProbeOperator::semiclassical;
  std::vector<double> h_grid = {1.0 / 8, 1.0 / 16, 1.0 / 32, 1.0 / 64};
  double mu = 0.0;  // fixed_mu operator Lap_g + i mu a - (mu^2 - 1)
  double beta = 0.25;
  std::string tag;
};

struct CarlemanProbeResult {
  std::string tag;
  std::vector<double> h_values;  // effective h per row
  std::vector<double> nominal_h;
  std::vector<int> mode_index;   // angular mode used (semiclassical rows)
  std::vector<double> ratios;    // ||u|| / (||P u|| + ||u||_{a > beta})
  std::vector<double> log_ratios;
  std::vector<double> per_point_c;  // h * log ratio
  double fitted_c = 0.0;            // slope of log ratio against 1/h
  double fitted_offset = 0.0;

  std::string to_csv() const;  // columns h, ratio, log_ratio, fitted_C
};

// Observability-shape probe.  The semiclassical path manufactures, for
// each nominal h, a trapped quasimode of the angular mode k ~ theta(0)/h,
// snaps the effective h to the mode energy so the real part of the
// operator vanishes exactly, and measures ||u|| / (||P u|| + ||u||_Omega).
// The fixed_mu path applies Lap_g + i mu a - (mu^2 - 1) to the supplied
// test functions.  Test functions must be nonzero.
CarlemanProbeResult carleman_ratio_probe(
    const Discretization& disc, const DampingField& damping,
    const ProbeParams& params,
    const std::vector<std::vector<Complex>>& test_set = {});

// ---------------------------------------------------------------- io

// portable sampled form: header (grid, thresholds, lambda) plus value and
// gradient arrays per weight
void write_weight_family(std::ostream& os, const SurfaceModel& model,
                         const WeightFamily& family, const ScanGrid& grid);
// reads the sampled form back; weights interpolate bilinearly
WeightFamily read_weight_family(std::istream& is);

}  // namespace decaylab
