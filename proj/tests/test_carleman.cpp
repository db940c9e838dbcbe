#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "decaylab/carleman.hpp"
#include "decaylab/control.hpp"
#include "decaylab/evolution.hpp"
#include "decaylab/geometry.hpp"

#include <cmath>
#include <complex>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

using namespace decaylab;

namespace {

SurfaceModel flat_cylinder(double window = 16.0, double circumference = kTwoPi) {
  return SurfaceModel(ScalingProfile::cylindrical(window),
                      ScalingProfile::cylindrical(window), circumference);
}

// two-ended mixed reference surface: flat left end, cone-like right end
SurfaceModel reference_surface(double left_window = 40.0,
                               double right_window = 1.0e6) {
  return SurfaceModel(ScalingProfile::cylindrical(left_window),
                      ScalingProfile::conic(right_window));
}

SurfaceModel wavy(double window = 32.0) {
  return SurfaceModel(ScalingProfile::perturbed_cylinder(1.0, 1.0, window),
                      ScalingProfile::perturbed_cylinder(1.0, 1.0, window));
}

// ladder of damped balls matching the flat-end critical lattice rows,
// offset so every critical needs an actual relocation
std::vector<Point> ladder_centers(int rows, int sgn) {
  std::vector<Point> centers;
  for (int t = 0; t < rows; ++t) {
    double home = 1.1 + 5.1 * t;
    centers.push_back({sgn * (home + 0.3), wrap_angle(0.125)});
    centers.push_back({sgn * (home + 1.7 + 0.3), wrap_angle(kPi + 0.125)});
  }
  return centers;
}

DampingField ladder_damping(const SurfaceModel& model,
                            std::vector<Point> centers,
                            double level = 0.65) {
  DampingField::Config c;
  c.centers = std::move(centers);
  c.omega = 0.1;
  c.omega_out = 0.2;
  c.two_beta = 0.5;
  c.level = level;
  c.background = 0.02;
  return DampingField(model, c);
}

void add_comb(std::vector<DampingField::Band>& bands, double lo, double hi,
              double step, int sgn, double inner = 0.14, double outer = 0.2,
              double level = 0.6) {
  for (double s = lo; s <= hi + 1e-9; s += step)
    bands.push_back({sgn * s, inner, outer, level});
}

std::shared_ptr<const AnalyticWeight> radial_cos_weight(int sgn,
                                                        double phase) {
  double k = 36.0;
  return std::make_shared<const AnalyticWeight>(
      [=](double r, double) { return 2.0 + std::cos(k * sgn * r - phase); },
      [=](double r, double) { return -k * sgn * std::sin(k * sgn * r - phase); },
      [](double, double) { return 0.0; });
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

}  // namespace

// --------------------------------------------------------------- moves

TEST_CASE("diffeomorphism moves stay orientation preserving and local") {
  DiffeoMove mv(0.5, -0.2, 0.04, 0.1, 0.02, -0.015);
  for (int i = 0; i < 200; ++i) {
    double ang = kTwoPi * i / 200.0;
    for (double rad : {0.01, 0.05, 0.07, 0.09, 0.11, 0.5}) {
      double x = 0.5 + rad * std::cos(ang), y = -0.2 + rad * std::sin(ang);
      CHECK(mv.det_jacobian(x, y) > 0.1);
      if (rad >= 0.1) {
        double xx = x, yy = y;
        mv.apply(xx, yy);
        CHECK(xx == x);
        CHECK(yy == y);
        CHECK(mv.identity_at(x, y));
      }
    }
  }
  // analytic jacobian against finite differences of the map
  double x0 = 0.55, y0 = -0.14;
  std::array<double, 4> jac{1.0, 0.0, 0.0, 1.0};
  double ax = x0, ay = y0;
  mv.apply_with_jacobian(ax, ay, jac);
  double h = 1e-6;
  double xp = x0 + h, yp0 = y0;
  mv.apply(xp, yp0);
  double xm = x0 - h, ym0 = y0;
  mv.apply(xm, ym0);
  CHECK(jac[0] == doctest::Approx((xp - xm) / (2 * h)).epsilon(1e-4));
  CHECK(jac[2] == doctest::Approx((yp0 - ym0) / (2 * h)).epsilon(1e-4));
  double x1 = x0, yp = y0 + h;
  mv.apply(x1, yp);
  double x2 = x0, ym = y0 - h;
  mv.apply(x2, ym);
  CHECK(jac[1] == doctest::Approx((x1 - x2) / (2 * h)).epsilon(1e-4));
  CHECK(jac[3] == doctest::Approx((yp - ym) / (2 * h)).epsilon(1e-4));

  CHECK_THROWS_AS(DiffeoMove(0.0, 0.0, 0.01, 0.02, 0.05, 0.0),
                  ConstructionError);
}

TEST_CASE("move chains carry a point to its destination and nowhere else") {
  double fx = 0.3, fy = -0.2, tx = 1.1, ty = 0.7;
  auto chain = make_move_chain(fx, fy, tx, ty, 0.02, 0.05);
  REQUIRE(chain.size() > 10);
  double x = fx, y = fy;
  for (const auto& m : chain) m.apply(x, y);
  CHECK(std::hypot(x - tx, y - ty) < 1e-9);
  // a point far from the path capsule is untouched
  double px = 0.7, py = 5.0;
  for (const auto& m : chain) {
    CHECK(m.identity_at(px, py));
    m.apply(px, py);
  }
  CHECK(px == 0.7);
  CHECK(py == 5.0);
  CHECK(make_move_chain(1.0, 1.0, 1.0, 1.0, 0.02, 0.05).empty());
}

TEST_CASE("scan grid subsampling keeps node coordinates bit exact") {
  ScanGrid g;
  g.r_lo = -5.0;
  g.r_hi = 7.0;
  g.n_r = 9;
  g.n_theta = 8;  // full circle
  ScanGrid s = g.subsample(2, 2);
  CHECK(s.n_r == 5);
  CHECK(s.n_theta == 4);
  for (int i = 0; i < s.n_r; ++i) CHECK(s.r_node(i) == g.r_node(2 * i));
  for (int j = 0; j < s.n_theta; ++j)
    CHECK(s.theta_node(j) == g.theta_node(2 * j));

  ScanGrid w = g;
  w.theta_lo = 0.3;
  w.theta_hi = 1.1;
  w.n_theta = 9;  // windowed: inclusive nodes
  ScanGrid ws = w.subsample(1, 2);
  CHECK(ws.n_theta == 5);
  for (int j = 0; j < ws.n_theta; ++j)
    CHECK(ws.theta_node(j) == w.theta_node(2 * j));

  CHECK_THROWS_AS(g.subsample(3, 1), SchemaError);
  CHECK_THROWS_AS(g.subsample(1, 3), SchemaError);
}

TEST_CASE("default hessian matches analytic second derivatives") {
  AnalyticWeight w(
      [](double r, double th) { return std::sin(r) * std::cos(2.0 * th); },
      [](double r, double th) { return std::cos(r) * std::cos(2.0 * th); },
      [](double r, double th) {
        return -2.0 * std::sin(r) * std::sin(2.0 * th);
      });
  Point x{0.7, 1.3};
  auto hs = w.hessian(x);
  CHECK(hs[0] == doctest::Approx(-std::sin(0.7) * std::cos(2.6)).epsilon(1e-5));
  CHECK(hs[1] ==
        doctest::Approx(-2.0 * std::cos(0.7) * std::sin(2.6)).epsilon(1e-5));
  CHECK(hs[2] ==
        doctest::Approx(-4.0 * std::sin(0.7) * std::cos(2.6)).epsilon(1e-5));
}

// --------------------------------------------------- flat end construction

TEST_CASE("flat end weight: ladder lattice, relocation, measured floor") {
  SurfaceModel model = flat_cylinder(30.0);
  DampingField damping = ladder_damping(model, ladder_centers(6, 1));
  CylindricalWeightParams params;
  params.side = Side::right;
  params.epsilon = 0.05;
  auto res = build_cylindrical_weight(model, damping, params);

  CHECK(res.lattice.size() == 12);
  CHECK(res.criticals.size() == 12);
  CHECK(res.spacing == doctest::Approx(0.85));
  CHECK(res.epsilon == 0.05);
  CHECK(res.min_value >= 1.0 - 1e-9);
  CHECK(res.max_value <= 3.0 + 1e-9);
  // the measured floor is positive but tiny: the relocation chains pass
  // their carried points through long narrow tapers whose composed
  // jacobians compress gradients by several orders of magnitude
  CHECK(res.two_rho > 0.0);
  CHECK(res.two_rho < 1e-2);
  CHECK(res.set.floor_rho1 == res.two_rho);
  CHECK(res.set.start_r == 1.0);
  REQUIRE(res.set.weights.size() == 1);

  // relocated critical points coincide with their damped balls: the
  // gradient vanishes there and the value hits the designed ladder level
  const WeightField& w = *res.set.weights[0];
  for (std::size_t i = 0; i < res.criticals.size(); ++i) {
    WeightGrad g = w.gradient(res.criticals[i]);
    CHECK(std::hypot(g.d_r, g.d_theta) < 1e-7);
    double v = w.value(res.criticals[i]);
    CHECK(v >= 1.0 - 1e-9);
    CHECK(v <= 3.0 + 1e-9);
  }

  // single-weight family: every undamped point is strong, so the
  // compatibility certificate passes vacuously
  WeightFamily fam;
  fam.weights = res.set.weights;
  fam.labels = res.set.labels;
  fam.two_rho = res.two_rho;
  fam.tau = 1.0 / 72.0;
  fam.two_beta = 0.5;
  fam.beta = 0.25;
  fam.damping = std::make_shared<const DampingField>(damping);
  auto rep = compatibility_check(model, fam, res.scan.subsample(4, 4));
  CHECK(rep.pass);
  CHECK(rep.violation_count == 0);
  CHECK(rep.checked > 0);
  CHECK(rep.skipped > 0);
  CHECK(rep.min_gradient_margin >= 0.0);
  CHECK(std::isinf(rep.min_gap_margin));  // no weak points at all
  std::string js = rep.to_json();
  CHECK(contains(js, "\"pass\": true"));
  CHECK(contains(js, "\"violation_count\": 0"));

  FamilyRangeReport rr = family_range_check(fam, res.scan.subsample(4, 4));
  CHECK(rr.ok);
  CHECK(rr.min_value >= 1.0 - 1e-12);
  CHECK(rr.max_value <= 3.0 + 1e-12);
}

TEST_CASE("flat end weight failure modes name the offending geometry") {
  SurfaceModel model = flat_cylinder(30.0);
  CylindricalWeightParams params;
  params.side = Side::right;
  params.epsilon = 0.05;

  SUBCASE("missing ball leaves an orphan critical point") {
    auto centers = ladder_centers(6, 1);
    // remove the ball serving the third ladder row in the first column
    centers.erase(centers.begin() + 4);
    DampingField damping = ladder_damping(model, centers);
    try {
      build_cylindrical_weight(model, damping, params);
      FAIL("expected a construction error");
    } catch (const ConstructionError& e) {
      CHECK(contains(e.what(), "no damped ball within reach"));
      CHECK(contains(e.what(), "(r=11.3"));
    }
  }
  SUBCASE("under-powered damping is rejected at the matched ball") {
    DampingField damping = ladder_damping(model, ladder_centers(6, 1), 0.3);
    try {
      build_cylindrical_weight(model, damping, params);
      FAIL("expected a construction error");
    } catch (const ConstructionError& e) {
      CHECK(contains(e.what(), "does not reach level"));
    }
  }
  SUBCASE("varying profile is rejected") {
    SurfaceModel mixed = reference_surface(30.0, 30.0);
    DampingField damping = ladder_damping(mixed, ladder_centers(6, 1));
    try {
      build_cylindrical_weight(mixed, damping, params);
      FAIL("expected a construction error");
    } catch (const ConstructionError& e) {
      CHECK(contains(e.what(), "constant-width"));
    }
  }
  SUBCASE("narrow circumference cannot hold two columns") {
    SurfaceModel thin = flat_cylinder(30.0, 3.0);
    DampingField damping = ladder_damping(thin, ladder_centers(6, 1));
    try {
      build_cylindrical_weight(thin, damping, params);
      FAIL("expected a construction error");
    } catch (const ConstructionError& e) {
      CHECK(contains(e.what(), "end too narrow"));
    }
  }
  SUBCASE("window cutting through a staggered row is refused") {
    SurfaceModel shortm = flat_cylinder(27.5);
    DampingField damping = ladder_damping(shortm, ladder_centers(5, 1));
    try {
      build_cylindrical_weight(shortm, damping, params);
      FAIL("expected a construction error");
    } catch (const ConstructionError& e) {
      CHECK(contains(e.what(), "truncates a staggered critical row"));
    }
  }
}

// ----------------------------------------------- expanding end construction

TEST_CASE("expanding end weights: constants and relocation mechanics") {
  SurfaceModel model = reference_surface(40.0, 1.0e6);
  const double A = 0.75 * kPi;

  SubconicWeightParams params;
  params.side = Side::right;
  params.L = 0.2;
  params.omega = 0.08;
  params.epsilon = 0.06;

  // damping comb deliberately offset from the critical rows of the
  // weight lattice, so most critical points must be carried to a band
  DampingField::Config cfg;
  cfg.two_beta = 0.5;
  cfg.level = 0.65;
  cfg.omega = 0.1;
  cfg.omega_out = 0.2;
  add_comb(cfg.bands, 10.0, 25.0, 0.5, 1);
  DampingField damping(model, cfg);

  auto res = build_subconic_weights(model, damping, params);

  // distortion constants against the closed form at the largest shear
  double sig = A;  // cone slope one, chart half-width A, |y| <= 1
  double sp = std::sqrt(1.0 + 0.5 * sig * sig +
                        std::sqrt(sig * sig + 0.25 * sig * sig * sig * sig));
  CHECK(res.C1_minus == 1.0);
  CHECK(res.C1_plus == 1.0);
  CHECK(res.C2_plus == doctest::Approx(sp).epsilon(1e-9));
  CHECK(res.C2_minus == doctest::Approx(1.0 / sp).epsilon(1e-9));
  CHECK(res.C_plus == res.C2_plus);
  double S = params.L + 4.0 * params.omega;
  CHECK(res.spacing == doctest::Approx(S));
  double q = res.C_plus * S;
  CHECK(res.R0 == doctest::Approx(q / (params.epsilon * A)).epsilon(1e-6));

  // the measured floor patch sits just past the admissible radius
  REQUIRE(res.patches.size() == 1);
  double reach = res.C_plus * (params.L + 2.0 * params.omega);
  double row0 = 2.0 * q * std::ceil((res.R0 + reach) / (2.0 * q));
  CHECK(res.patches[0].s_lo == doctest::Approx(row0).epsilon(1e-12));
  CHECK(res.patches[0].s_hi ==
        doctest::Approx(row0 + 8.0 * q).epsilon(1e-12));

  CHECK(res.criticals_total > 0);
  CHECK(res.saddles_total > 0);
  CHECK(res.relocated > 0);
  CHECK(int(res.criticals.size()) <= res.criticals_total);
  CHECK(res.relocated <= int(res.criticals.size()));

  // the gradient floor carries the imprint of the relocation tapers:
  // far below the clean lattice value, still well clear of degenerate
  CHECK(res.C0 > 1e-4);
  CHECK(res.C0 < 1e-2);
  CHECK(res.two_rho == res.C0 / 24.0);
  CHECK(res.set.floor_rho1 == res.two_rho);
  REQUIRE(res.set.weights.size() == 2);
  CHECK(res.set.labels[0] == "subconic_right_0");
  CHECK(res.set.labels[1] == "subconic_right_pi");

  // the validity radius solves the collar slope budget on the cone,
  // where the flattened chart width grows like A * s
  CHECK(res.chi_max_slope ==
        doctest::Approx(1.875 * (11.0 / 12.0) / params.epsilon)
            .epsilon(1e-9));
  CHECK(res.R > res.R0);
  CHECK(A * res.R ==
        doctest::Approx(72.0 * res.chi_max_slope / res.C0).epsilon(1e-6));
  CHECK(res.chi_slope_margin == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(res.set.start_r == res.R);
  CHECK(res.chi_max_slope * (1.0 / (A * res.R)) <=
        res.C0 / 72.0 + 1e-12);  // measured collar slope under the budget
}

TEST_CASE("expanding end weights: certification windows at the validity radius") {
  SurfaceModel model = reference_surface(40.0, 1.5e5);
  const double A = 0.75 * kPi;

  SubconicWeightParams params;
  params.side = Side::right;
  params.L = 0.2;
  params.omega = 0.08;
  params.epsilon = 0.06;

  double S = params.L + 4.0 * params.omega;
  double sig = A;
  double sp = std::sqrt(1.0 + 0.5 * sig * sig +
                        std::sqrt(sig * sig + 0.25 * sig * sig * sig * sig));
  double q = sp * S;  // lattice half-period, known before the build

  // damping bands centred exactly on the critical rows of the lattice:
  // every critical point is born inside a damped band, nothing needs
  // relocation, and the measured gradient floor stays at the clean
  // lattice value, which keeps the validity radius small enough to
  // place certification windows on it
  DampingField::Config cfg;
  cfg.two_beta = 0.5;
  cfg.level = 0.65;
  cfg.omega = 0.1;
  cfg.omega_out = 0.2;
  for (int j = 4; j <= 8; ++j)
    cfg.bands.push_back({2.0 * q * j, 0.14, 0.2, 0.6});
  DampingField damping1(model, cfg);

  auto res1 = build_subconic_weights(model, damping1, params);
  CHECK(res1.criticals_total > 0);
  CHECK(res1.relocated == 0);
  CHECK(res1.C0 > 0.015);
  CHECK(res1.C0 < 0.10);
  CHECK(A * res1.R ==
        doctest::Approx(72.0 * res1.chi_max_slope / res1.C0).epsilon(1e-6));

  // second pass: same floor patch plus narrow certification windows at
  // the validity radius, one deep in a chart and one across the collar
  // seam where the chart weight fades out
  double sA = 2.0 * q * std::ceil(res1.R / (2.0 * q));
  double thD_A = A * sA;  // flattened chart half-width at the window
  SubconicPatch slab = res1.patches[0];
  SubconicPatch winA;
  winA.s_lo = sA;
  winA.s_hi = sA + 8.0 * q;
  winA.theta_lo = -3.5 * 2.0 * q / thD_A * A;
  winA.theta_hi = 3.5 * 2.0 * q / thD_A * A;
  winA.use_for_c0 = false;
  SubconicPatch winB;
  winB.s_lo = sA;
  winB.s_hi = sA + 4.0 * q;
  winB.theta_lo = A * 0.805;
  winB.theta_hi = A * 1.0001;  // the far chart stays interior through here
  winB.use_for_c0 = false;

  SubconicWeightParams params2 = params;
  params2.patches = {slab, winA, winB};
  DampingField::Config cfg2 = cfg;
  for (int j = 0; j <= 4; ++j)
    cfg2.bands.push_back({sA + 2.0 * q * j, 0.14, 0.2, 0.6});
  DampingField damping2(model, cfg2);
  auto res2 = build_subconic_weights(model, damping2, params2);

  // the floor patch is unchanged and the extra bands vanish on it, so
  // the measured floor and validity radius reproduce exactly
  CHECK(res2.C0 == res1.C0);
  CHECK(res2.R == res1.R);
  CHECK(res2.relocated == 0);
  CHECK(res2.criticals_total > res1.criticals_total);

  WeightFamily fam;
  fam.weights = res2.set.weights;
  fam.labels = res2.set.labels;
  fam.two_rho = res2.two_rho;
  fam.tau = 1.0 / 72.0;
  fam.two_beta = 0.5;
  fam.beta = 0.25;
  fam.damping = std::make_shared<const DampingField>(damping2);

  // window A hugs the near chart's axis: the far chart is beyond its
  // collar there, so it contributes weight zero and every node must be
  // certified through the near chart's value lead
  ScanGrid gridA;
  gridA.r_lo = winA.s_lo;
  gridA.r_hi = winA.s_hi;
  gridA.n_r = 97;
  gridA.theta_lo = winA.theta_lo;
  gridA.theta_hi = winA.theta_hi;
  gridA.n_theta = 33;
  auto repA = compatibility_check(model, fam, gridA);
  CHECK(repA.pass);
  CHECK(repA.violation_count == 0);
  CHECK(repA.checked > 0);
  CHECK(repA.skipped > 0);  // band strips are damped and skipped
  CHECK(repA.min_gradient_margin >= 0.0);
  CHECK(std::isfinite(repA.min_gap_margin));  // the far chart is weak here
  CHECK(repA.min_gap_margin > 0.5);

  // window B crosses the near chart's collar: its weight decays to zero
  // across the seam and the far chart takes over the certificate
  ScanGrid gridB;
  gridB.r_lo = winB.s_lo;
  gridB.r_hi = winB.s_hi;
  gridB.n_r = 65;
  gridB.theta_lo = A * 0.81;
  gridB.theta_hi = A * 0.9999;  // runs past the collar into the zero zone
  gridB.n_theta = 33;
  auto repB = compatibility_check(model, fam, gridB);
  CHECK(repB.pass);
  CHECK(repB.violation_count == 0);
  CHECK(repB.min_gap_margin >= 0.1);

  // pushing the separation demand past the best possible value lead
  // must surface explicit violations, reported as data
  WeightFamily sab = fam;
  sab.tau = 2.5;
  auto repS = compatibility_check(model, sab, gridA);
  CHECK(!repS.pass);
  CHECK(repS.violation_count > 0);
  REQUIRE(!repS.violations.empty());
  CHECK(repS.violations[0].best_gap < 0.0);
  CHECK(contains(repS.to_json(), "\"pass\": false"));

  // value range stays within the design band across the collar seam
  FamilyRangeReport rr = family_range_check(fam, gridB);
  CHECK(rr.ok);
}

TEST_CASE("expanding end failure modes") {
  SubconicWeightParams params;
  params.side = Side::right;
  params.epsilon = 0.06;

  SUBCASE("flat profile is rejected") {
    SurfaceModel model = flat_cylinder(30.0);
    DampingField damping = ladder_damping(model, {});
    CHECK_THROWS_AS(build_subconic_weights(model, damping, params),
                    ConstructionError);
  }
  SUBCASE("short cone cannot host the structure") {
    SurfaceModel model = reference_surface(40.0, 15.0);
    DampingField::Config cfg;
    cfg.two_beta = 0.5;
    add_comb(cfg.bands, 10.0, 14.0, 0.5, 1);
    DampingField damping(model, cfg);
    try {
      build_subconic_weights(model, damping, params);
      FAIL("expected a construction error");
    } catch (const ConstructionError& e) {
      CHECK(contains(e.what(),
                     "end too short for subconic construction at these "
                     "parameters"));
    }
  }
  SUBCASE("collar width must stay below the chart overlap") {
    SurfaceModel model = reference_surface(40.0, 1.0e6);
    DampingField damping = ladder_damping(model, {});
    SubconicWeightParams bad = params;
    bad.epsilon = 0.1;
    CHECK_THROWS_AS(build_subconic_weights(model, damping, bad), DomainError);
  }
  SUBCASE("patch below the admissible radius is refused") {
    SurfaceModel model = reference_surface(40.0, 1.0e6);
    DampingField::Config cfg;
    cfg.two_beta = 0.5;
    add_comb(cfg.bands, 4.0, 21.0, 0.5, 1);
    DampingField damping(model, cfg);
    SubconicWeightParams bad = params;
    SubconicPatch p;
    p.s_lo = 5.0;
    p.s_hi = 20.0;
    bad.patches = {p};
    try {
      build_subconic_weights(model, damping, bad);
      FAIL("expected a construction error");
    } catch (const ConstructionError& e) {
      CHECK(contains(e.what(), "certification patch starts before"));
    }
  }
  SUBCASE("orphan chart critical names its position") {
    SurfaceModel model = reference_surface(40.0, 1.0e6);
    DampingField::Config cfg;  // no damping at all near the structure
    cfg.two_beta = 0.5;
    cfg.centers = {{38.0, 0.0}};
    cfg.omega = 0.1;
    cfg.omega_out = 0.2;
    cfg.level = 0.65;
    DampingField damping(model, cfg);
    try {
      build_subconic_weights(model, damping, params);
      FAIL("expected a construction error");
    } catch (const ConstructionError& e) {
      CHECK(contains(e.what(), "no damped region within reach"));
    }
  }
}

// ------------------------------------------------------------------ glue

TEST_CASE("glue of analytic end families certifies the full case split") {
  SurfaceModel model = flat_cylinder(100.0);
  const double rho1 = 36.0 / std::sqrt(2.0);
  const double I = 432.0 / rho1;
  const double R = 1.0;

  DampingField::Config cfg;
  cfg.two_beta = 0.5;
  cfg.level = 0.65;
  cfg.background = 0.0;
  cfg.omega = 0.1;
  cfg.omega_out = 0.2;
  cfg.centers = {{0.4, 1.0}};
  double lo = R + 2.0 * I - 0.6, hi = 95.0;
  for (int m = 0; m < 600; ++m) {
    for (double s : {kPi * m / 18.0, kPi / 72.0 + kPi * m / 18.0}) {
      if (s < lo || s > hi) continue;
      cfg.bands.push_back({s, 0.023, 0.04, 0.6});
      cfg.bands.push_back({-s, 0.023, 0.04, 0.6});
    }
  }
  DampingField damping(model, cfg);

  std::vector<EndWeightSet> ends(2);
  ends[0].side = Side::right;
  ends[0].start_r = 1.0;
  ends[0].weights = {radial_cos_weight(1, 0.0),
                     radial_cos_weight(1, 0.5 * kPi)};
  ends[0].labels = {"comb_a", "comb_b"};
  ends[0].floor_rho1 = rho1;
  ends[1].side = Side::left;
  ends[1].start_r = 1.0;
  ends[1].weights = {radial_cos_weight(-1, 0.0),
                     radial_cos_weight(-1, 0.5 * kPi)};
  ends[1].labels = {"comb_a", "comb_b"};
  ends[1].floor_rho1 = rho1;

  GlueParams gp;
  gp.scan_r_lo = -95.0;
  gp.scan_r_hi = 95.0;
  gp.scan_n_r = 511;
  gp.scan_n_theta = 64;
  gp.require_full_cutoffs = true;
  auto res = glue_weights(model, damping, ends, gp);

  CHECK(res.tau == 1.0 / 72.0);
  CHECK(res.rho1 == doctest::Approx(rho1));
  CHECK(res.I == 432.0 / res.rho1);
  CHECK(res.R == 1.0);
  CHECK(res.two_rho == std::min(res.rho0, res.rho1 / 72.0));
  CHECK(res.rho0 == doctest::Approx(1.0 / 600.0).epsilon(0.02));
  CHECK(res.chi1_slope_bound == res.rho1 / 216.0);
  CHECK(res.chi1_max_slope <= res.chi1_slope_bound);
  CHECK(res.chi1_max_slope >= 0.9 * res.chi1_slope_bound);
  CHECK(res.chi0_max_slope <= 1.876 / res.I);
  CHECK(res.core_min >= 0.0);
  CHECK(res.core_max <= 2.0 / 3.0 + 1e-12);
  CHECK(res.core_ball.r == doctest::Approx(0.4));

  REQUIRE(res.family.weights.size() == 5);
  REQUIRE(res.family.labels.size() == 5);
  CHECK(res.family.labels[0] == "core");
  CHECK(contains(res.family.labels[1], "comb_a"));
  CHECK(res.family.two_beta == 0.5);
  CHECK(res.family.two_rho == res.two_rho);

  CHECK(res.certificate.pass);
  CHECK(res.certificate.violation_count == 0);
  CHECK(res.certificate.checked > 0);
  CHECK(res.certificate.min_gradient_margin >= 0.0);
  CHECK(std::isfinite(res.certificate.min_gap_margin));
  CHECK(res.certificate.min_gap_margin >= 0.0);
  CHECK(res.certificate.grid.n_r == 256);
  CHECK(res.certificate.grid.n_theta == 32);

  // cutoffs must fit inside the declared windows when demanded
  SurfaceModel shortm = flat_cylinder(80.0);
  DampingField::Config cfg80 = cfg;
  cfg80.bands.clear();
  for (const auto& b : cfg.bands)
    if (std::abs(b.r_center) < 79.0) cfg80.bands.push_back(b);
  DampingField damping80(shortm, cfg80);
  try {
    glue_weights(shortm, damping80, ends, gp);
    FAIL("expected a construction error");
  } catch (const ConstructionError& e) {
    CHECK(contains(e.what(), "need the window to extend to r = "));
  }
}

TEST_CASE("glued reference family certifies clean on the mixed surface") {
  SurfaceModel model = reference_surface();

  DampingField::Config cfg;
  cfg.two_beta = 0.5;
  cfg.level = 0.65;
  cfg.background = 0.0;
  cfg.omega = 0.1;
  cfg.omega_out = 0.2;
  cfg.centers.push_back({0.3, 1.0});  // compact-core ball, listed first
  for (const Point& c : ladder_centers(8, -1)) cfg.centers.push_back(c);
  add_comb(cfg.bands, 10.0, 25.0, 0.5, 1);
  DampingField damping(model, cfg);

  CylindricalWeightParams cyl;
  cyl.side = Side::left;
  cyl.epsilon = 0.05;
  auto left = build_cylindrical_weight(model, damping, cyl);
  CHECK(left.lattice.size() == 16);

  SubconicWeightParams sub;
  sub.side = Side::right;
  sub.L = 0.2;
  sub.omega = 0.08;
  sub.epsilon = 0.06;
  auto right = build_subconic_weights(model, damping, sub);
  CHECK(right.R > right.R0);
  CHECK(right.R + 5.0 * 432.0 / std::min(left.set.floor_rho1,
                                         right.set.floor_rho1) >
        1.0e6);  // far cutoffs genuinely exceed the window here

  GlueParams gp;
  gp.scan_r_lo = -6.0;
  gp.scan_r_hi = 6.0;
  gp.scan_n_r = 511;
  gp.scan_n_theta = 512;
  gp.cert_stride_r = 2;
  gp.cert_stride_theta = 2;
  auto res = glue_weights(model, damping, {left.set, right.set}, gp);

  CHECK(res.certificate.grid.n_r == 256);
  CHECK(res.certificate.grid.n_theta == 256);
  CHECK(res.certificate.pass);
  CHECK(res.certificate.violation_count == 0);
  CHECK(res.certificate.checked > 0);
  CHECK(res.tau == 1.0 / 72.0);
  CHECK(res.two_rho == std::min(res.rho0, res.rho1 / 72.0));
  CHECK(res.rho1 ==
        std::min(left.set.floor_rho1, right.set.floor_rho1));
  CHECK(res.chi1_max_slope <= res.chi1_slope_bound);
  CHECK(res.core_ball.r == doctest::Approx(0.3));
  CHECK(res.core_min >= 0.0);
  CHECK(res.core_max <= 2.0 / 3.0 + 1e-12);

  // demanding full cutoff windows on this surface must fail loudly
  GlueParams strict = gp;
  strict.require_full_cutoffs = true;
  CHECK_THROWS_AS(glue_weights(model, damping, {left.set, right.set}, strict),
                  ConstructionError);

  // the family serialises and reloads; reloaded families carry no damping
  std::ostringstream os;
  ScanGrid io_grid;
  io_grid.r_lo = -6.0;
  io_grid.r_hi = 6.0;
  io_grid.n_r = 65;
  io_grid.n_theta = 32;
  write_weight_family(os, model, res.family, io_grid);
  std::istringstream is(os.str());
  WeightFamily loaded = read_weight_family(is);
  CHECK(loaded.weights.size() == res.family.weights.size());
  CHECK(loaded.two_rho == res.family.two_rho);
  CHECK_THROWS_AS(compatibility_check(model, loaded, io_grid), DomainError);
}

// ------------------------------------------------------------ conjugation

TEST_CASE("conjugated application: identities, symbols, convergence") {
  SurfaceModel model = flat_cylinder(16.0);

  SUBCASE("constant weight conjugates away exactly") {
    Grid g;
    g.n_r = 65;
    g.n_theta = 16;
    g.r_max = 6.0;
    Discretization disc(model, g);
    AnalyticWeight psi([](double, double) { return 0.7; },
                       [](double, double) { return 0.0; },
                       [](double, double) { return 0.0; });
    std::vector<Complex> u(disc.size());
    for (std::size_t i = 0; i < u.size(); ++i)
      u[i] = Complex(std::cos(0.1 * i), std::sin(0.05 * i));
    auto res = conjugated_apply(disc, psi, 2.0, 0.5, 0.9, u);
    CHECK(res.masked == 0);
    CHECK(res.discrepancy < 1e-12);
  }

  SUBCASE("plane wave reproduces the conjugated symbol") {
    Grid g;
    g.n_r = 129;
    g.n_theta = 32;
    g.r_max = 8.0;
    Discretization disc(model, g);
    double lam = 0.8, h = 0.7, V = 0.9, a = 2.0;
    int k = 3;
    AnalyticWeight psi([](double r, double) { return 0.02 * r * r; },
                       [](double r, double) { return 0.04 * r; },
                       [](double, double) { return 0.0; });
    std::vector<Complex> u(disc.size());
    for (int i = 0; i < disc.n_r(); ++i)
      for (int j = 0; j < disc.n_theta(); ++j)
        u[std::size_t(i) * disc.n_theta() + j] =
            std::exp(Complex(0.0, a * disc.r_node(i) + k * (j * g.dtheta())));
    auto res = conjugated_apply(disc, psi, lam, h, V, u);
    double dr = g.dr();
    double sym_r = (2.0 - 2.0 * std::cos(a * dr)) / (dr * dr);
    for (int i = 2; i < disc.n_r() - 2; ++i) {
      double r = disc.r_node(i);
      if (std::abs(r) > 5.0) continue;
      double psv = 0.02 * r * r, psd = 0.04 * r;
      double phi = std::exp(lam * psv);
      double gphi2 = lam * lam * phi * phi * psd * psd;
      double lap_phi = lam * phi * (-0.04 - lam * psd * psd);
      double re_expect =
          h * h * (sym_r + double(k) * double(k)) - gphi2 - V - h * lap_phi;
      double im_expect =
          2.0 * h * lam * phi * psd * std::sin(a * dr) / dr;
      std::size_t id = std::size_t(i) * disc.n_theta() + 5;
      Complex ratio = res.expanded[id] / u[id];
      CHECK(ratio.real() == doctest::Approx(re_expect).epsilon(1e-7));
      CHECK(ratio.imag() == doctest::Approx(im_expect).epsilon(1e-7));
    }
  }

  SUBCASE("direct and expanded forms agree at second order") {
    auto psi = std::make_shared<AnalyticWeight>(
        [](double r, double th) {
          return 0.3 * std::exp(-0.5 * (r - 0.4) * (r - 0.4)) *
                 (1.0 + 0.2 * std::cos(th));
        },
        [](double r, double th) {
          return -0.3 * (r - 0.4) * std::exp(-0.5 * (r - 0.4) * (r - 0.4)) *
                 (1.0 + 0.2 * std::cos(th));
        },
        [](double r, double th) {
          return 0.3 * std::exp(-0.5 * (r - 0.4) * (r - 0.4)) *
                 (-0.2 * std::sin(th));
        });
    // refine both directions together: the expanded form's angular
    // cross term carries its own second-order difference error, which
    // would otherwise saturate the radial refinement
    std::vector<double> discrepancies;
    for (auto [nr, nth] : {std::pair{65, 16}, {129, 32}, {257, 64}}) {
      Grid g;
      g.n_r = nr;
      g.n_theta = nth;
      g.r_max = 6.0;
      Discretization disc(model, g);
      std::vector<Complex> u(disc.size());
      for (int i = 0; i < disc.n_r(); ++i)
        for (int j = 0; j < disc.n_theta(); ++j) {
          double r = disc.r_node(i), th = j * g.dtheta();
          u[std::size_t(i) * disc.n_theta() + j] =
              std::exp(-(r - 0.6) * (r - 0.6)) *
              Complex(std::cos(th), 0.5 * std::sin(2.0 * th));
        }
      auto res = conjugated_apply(disc, *psi, 1.2, 0.6, 0.5, u);
      CHECK(res.masked == 0);
      discrepancies.push_back(res.discrepancy);
    }
    CHECK(discrepancies[0] / discrepancies[1] > 2.5);
    CHECK(discrepancies[1] / discrepancies[2] > 2.5);
    CHECK(discrepancies[2] < 0.02);
  }

  SUBCASE("steep weights mask the unreachable sector") {
    Grid g;
    g.n_r = 65;
    g.n_theta = 16;
    g.r_max = 6.0;
    Discretization disc(model, g);
    AnalyticWeight psi(
        [](double r, double) { return 0.9 * std::exp(-0.1 * r * r); },
        [](double r, double) { return -0.18 * r * std::exp(-0.1 * r * r); },
        [](double, double) { return 0.0; });
    std::vector<Complex> u(disc.size(), Complex(1.0, 0.0));
    auto res = conjugated_apply(disc, psi, 6.0, 0.2, 0.5, u);
    CHECK(res.masked > 0);
    CHECK(res.masked < long(disc.size()));
    CHECK(std::isfinite(res.discrepancy));
  }
}

// ---------------------------------------------------------------- bracket

TEST_CASE("bracket positivity: oracle, quadratic piece, doubling law") {
  SurfaceModel model = flat_cylinder(8.0);
  auto psi = std::make_shared<AnalyticWeight>(
      [](double r, double) { return 1.0 + 0.3 * r + 0.05 * r * r; },
      [](double r, double) { return 0.3 + 0.1 * r; },
      [](double, double) { return 0.0; });
  const double V0 = 1.0, rho = 0.1;

  SUBCASE("radial reduction matches the one-dimensional bracket") {
    double lam = 8.0;
    for (double r : {-1.0, 0.0, 0.5, 1.5}) {
      Point x{r, 0.7};
      for (double zeta : {0.0, kPi}) {
        auto zc = shell_covector(model, *psi, lam, V0, x, zeta, 1.3);
        auto rep = bracket_positivity(model, *psi, lam, rho, V0, {zc});
        double psd = 0.3 + 0.1 * r;
        double psv = 1.0 + 0.3 * r + 0.05 * r * r;
        double phi = std::exp(lam * psv);
        double f1 = lam * phi * psd;
        double f2 = lam * phi * (lam * psd * psd + 0.1);
        double oracle = 4.0 * f2 * (zc.xi_r * zc.xi_r + f1 * f1);
        CHECK(rep.min_bracket == doctest::Approx(oracle).epsilon(1e-9));
      }
    }
  }

  SUBCASE("positivity holds across the sweep with margin") {
    for (double lam : {4.0, 8.0, 16.0}) {
      std::vector<CotangentPoint> sample;
      for (double r : {-1.0, 0.0, 0.5, 1.5})
        for (double zeta : {0.0, 0.6, 0.5 * kPi, 2.2, kPi})
          for (double scale : {0.6, 1.0, 1.9})
            sample.push_back(
                shell_covector(model, *psi, lam, V0, {r, 0.7}, zeta, scale));
      auto rep = bracket_positivity(model, *psi, lam, rho, V0, sample);
      CHECK(rep.min_bracket > 0.0);
      CHECK(rep.min_ratio > 1.0);
      for (const auto& s : rep.samples) {
        CHECK(s.term_quad >= 0.0);
        CHECK(s.envelope > 0.0);
      }
    }
  }

  SUBCASE("covectors orthogonal to the weight kill the quadratic piece") {
    double lam = 8.0;
    Point x{0.5, 0.7};
    auto zc = shell_covector(model, *psi, lam, V0, x, 0.5 * kPi, 1.0);
    auto rep = bracket_positivity(model, *psi, lam, rho, V0, {zc});
    REQUIRE(rep.samples.size() == 1);
    CHECK(rep.samples[0].term_quad < 1e-15 * rep.samples[0].envelope);
  }

  SUBCASE("doubling the spectral parameter scales by the cubic envelope") {
    Point x{0.5, 0.7};
    double psv = 1.0 + 0.15 + 0.05 * 0.25;
    auto z8 = shell_covector(model, *psi, 8.0, V0, x, 0.6, 1.0);
    auto z16 = shell_covector(model, *psi, 16.0, V0, x, 0.6, 1.0);
    auto r8 = bracket_positivity(model, *psi, 8.0, rho, V0, {z8});
    auto r16 = bracket_positivity(model, *psi, 16.0, rho, V0, {z16});
    double expect = 16.0 * std::exp(3.0 * 8.0 * psv);
    CHECK(r16.min_bracket / r8.min_bracket ==
          doctest::Approx(expect).epsilon(0.2));
  }

  SUBCASE("off-shell covectors are rejected with the admissible range") {
    auto zc = shell_covector(model, *psi, 8.0, V0, {0.5, 0.7}, 0.6, 1.0);
    CotangentPoint far = zc;
    far.xi_r *= 10.0;
    far.xi_theta *= 10.0;
    try {
      bracket_positivity(model, *psi, 8.0, rho, V0, {far});
      FAIL("expected a domain error");
    } catch (const DomainError& e) {
      CHECK(contains(e.what(), "characteristic shell"));
      CHECK(contains(e.what(), "admissible range"));
    }
  }

  SUBCASE("weight slope below the declared floor is rejected") {
    auto zc = shell_covector(model, *psi, 8.0, V0, {-1.0, 0.7}, 0.0, 1.0);
    try {
      bracket_positivity(model, *psi, 8.0, 0.5, V0, {zc});
      FAIL("expected a domain error");
    } catch (const DomainError& e) {
      CHECK(contains(e.what(), "below rho"));
    }
  }

  SUBCASE("empty samples are rejected") {
    CHECK_THROWS_AS(bracket_positivity(model, *psi, 8.0, rho, V0, {}),
                    DomainError);
  }
}

// ------------------------------------------------------------------ probe

TEST_CASE("quantitative unique continuation probe") {
  SurfaceModel model = wavy(40.0);
  DampingField::Config cfg;
  cfg.two_beta = 0.5;
  cfg.bands = {{-3.0, 0.8, 1.6, 0.6}, {3.0, 0.8, 1.6, 0.6}};
  DampingField damping(model, cfg);

  SUBCASE("trapped-mode constants stay within a factor two across scales") {
    Grid g;
    g.n_r = 193;
    g.n_theta = 512;
    g.r_max = 6.0;
    Discretization disc(model, g);
    ProbeParams params;
    auto res = carleman_ratio_probe(disc, damping, params);
    REQUIRE(res.h_values.size() == 4);
    REQUIRE(res.per_point_c.size() == 4);
    CHECK(res.mode_index.front() >= 1);
    CHECK(res.mode_index.back() > res.mode_index.front());
    double cmin = res.per_point_c[0], cmax = res.per_point_c[0];
    for (double c : res.per_point_c) {
      CHECK(c > 0.0);  // the trapped mode defeats the observation region
      cmin = std::min(cmin, c);
      cmax = std::max(cmax, c);
    }
    CHECK(cmax / cmin <= 2.5);
    CHECK(res.fitted_c > 0.0);
    for (double rat : res.ratios) CHECK(rat > 1.0);

    std::string csv = res.to_csv();
    CHECK(contains(csv, "h,ratio,log_ratio,fitted_C"));
    int lines = 0;
    for (char ch : csv)
      if (ch == '\n') ++lines;
    CHECK(lines == 5);
  }

  SUBCASE("fixed-frequency ratios are resolution independent") {
    ProbeParams params;
    params.op = ProbeOperator::fixed_mu;
    params.mu = 0.0;
    std::vector<double> ratios;
    for (int scale : {0, 1}) {
      Grid g;
      g.n_r = scale == 0 ? 129 : 193;
      g.n_theta = scale == 0 ? 256 : 512;
      g.r_max = 6.0;
      Discretization disc(model, g);
      std::vector<Complex> u(disc.size());
      for (int i = 0; i < disc.n_r(); ++i)
        for (int j = 0; j < disc.n_theta(); ++j) {
          double r = disc.r_node(i), th = j * g.dtheta();
          u[std::size_t(i) * disc.n_theta() + j] =
              std::exp(-r * r) * (1.0 + 0.3 * std::cos(th));
        }
      auto res = carleman_ratio_probe(disc, damping, params, {u});
      REQUIRE(res.ratios.size() == 1);
      ratios.push_back(res.ratios[0]);
    }
    CHECK(std::abs(ratios[0] / ratios[1] - 1.0) <= 0.10);
  }

  SUBCASE("states inside the observation region never beat the bound") {
    Grid g;
    g.n_r = 129;
    g.n_theta = 256;
    g.r_max = 6.0;
    Discretization disc(model, g);
    ProbeParams params;
    params.op = ProbeOperator::fixed_mu;
    params.mu = 2.0;
    std::vector<Complex> u(disc.size());
    for (int i = 0; i < disc.n_r(); ++i)
      for (int j = 0; j < disc.n_theta(); ++j) {
        double r = disc.r_node(i);
        u[std::size_t(i) * disc.n_theta() + j] =
            Complex(0.0, std::exp(-4.0 * (r - 3.0) * (r - 3.0)));
      }
    auto res = carleman_ratio_probe(disc, damping, params, {u});
    REQUIRE(res.ratios.size() == 1);
    CHECK(res.ratios[0] <= 1.0);
    CHECK(res.mode_index[0] == -1);
  }

  SUBCASE("degenerate inputs are rejected") {
    Grid g;
    g.n_r = 65;
    g.n_theta = 16;
    g.r_max = 6.0;
    Discretization disc(model, g);
    ProbeParams params;
    params.op = ProbeOperator::fixed_mu;
    CHECK_THROWS_AS(carleman_ratio_probe(disc, damping, params),
                    DomainError);
    std::vector<Complex> zero(disc.size(), Complex(0.0, 0.0));
    try {
      carleman_ratio_probe(disc, damping, params, {zero});
      FAIL("expected a domain error");
    } catch (const DomainError& e) {
      CHECK(contains(e.what(), "zero mass"));
    }
    ProbeParams semi;
    semi.h_grid = {1.0 / 64.0};
    CHECK_THROWS_AS(carleman_ratio_probe(disc, damping, semi),
                    NumericsError);
    ProbeParams empty_h;
    empty_h.h_grid = {};
    CHECK_THROWS_AS(carleman_ratio_probe(disc, damping, empty_h),
                    DomainError);
  }
}

// -------------------------------------------------------------------- io

TEST_CASE("weight family serialisation round-trips byte for byte") {
  SurfaceModel model = flat_cylinder(30.0);
  DampingField damping = ladder_damping(model, ladder_centers(6, 1));
  CylindricalWeightParams params;
  params.side = Side::right;
  params.epsilon = 0.05;
  auto res = build_cylindrical_weight(model, damping, params);

  WeightFamily fam;
  fam.weights = res.set.weights;
  fam.labels = res.set.labels;
  fam.two_rho = res.two_rho;
  fam.tau = 1.0 / 72.0;
  fam.two_beta = 0.5;
  fam.beta = 0.25;

  ScanGrid grid;
  grid.r_lo = 2.0;
  grid.r_hi = 8.0;
  grid.n_r = 65;
  grid.n_theta = 32;

  std::ostringstream os1;
  write_weight_family(os1, model, fam, grid);
  std::istringstream is(os1.str());
  WeightFamily loaded = read_weight_family(is);
  REQUIRE(loaded.weights.size() == 1);
  CHECK(loaded.two_rho == fam.two_rho);
  CHECK(loaded.tau == fam.tau);
  CHECK(loaded.labels == fam.labels);
  CHECK(loaded.damping == nullptr);

  // sampled values reproduce the original field exactly at the nodes
  for (int i = 0; i < grid.n_r; i += 7)
    for (int j = 0; j < grid.n_theta; j += 5) {
      Point x{grid.r_node(i), grid.theta_node(j)};
      CHECK(loaded.weights[0]->value(x) == fam.weights[0]->value(x));
      CHECK(loaded.weights[0]->gradient(x).d_r ==
            fam.weights[0]->gradient(x).d_r);
    }

  std::ostringstream os2;
  write_weight_family(os2, model, loaded, grid);
  CHECK(os1.str() == os2.str());
}

TEST_CASE("weight family reader rejects malformed input precisely") {
  {
    std::istringstream is("this is not json");
    try {
      read_weight_family(is);
      FAIL("expected a schema error");
    } catch (const SchemaError& e) {
      CHECK(contains(e.what(), "not valid JSON"));
    }
  }
  {
    std::istringstream is("{\"format\":\"weight-family/1\"}");
    try {
      read_weight_family(is);
      FAIL("expected a schema error");
    } catch (const SchemaError& e) {
      CHECK(contains(e.what(), "missing field 'grid'"));
    }
  }
  {
    std::istringstream is("{\"format\":\"something-else\"}");
    try {
      read_weight_family(is);
      FAIL("expected a schema error");
    } catch (const SchemaError& e) {
      CHECK(contains(e.what(), "unknown format tag"));
    }
  }
  {
    std::istringstream is(
        "{\"format\":\"weight-family/1\",\"grid\":{\"r_lo\":0.0,\"r_hi\":1.0,"
        "\"n_r\":3,\"n_theta\":4,\"theta_lo\":0.0,\"theta_hi\":6.283185307179"
        "586},\"two_rho\":0.1,\"tau\":0.01,\"lambda\":8.0,\"beta\":0.25,"
        "\"two_beta\":0.5,\"weights\":[{\"label\":\"w\",\"values\":[1.0],"
        "\"grad_r\":[0.0],\"grad_theta\":[0.0]}]}");
    try {
      read_weight_family(is);
      FAIL("expected a schema error");
    } catch (const SchemaError& e) {
      CHECK(contains(e.what(), "wrong length"));
    }
  }
}

TEST_CASE("family range check flags out-of-band values") {
  WeightFamily fam;
  fam.weights.push_back(std::make_shared<const AnalyticWeight>(
      [](double, double) { return 3.5; }, [](double, double) { return 0.0; },
      [](double, double) { return 0.0; }));
  ScanGrid grid;
  grid.r_lo = -1.0;
  grid.r_hi = 1.0;
  grid.n_r = 5;
  grid.n_theta = 8;
  auto rep = family_range_check(fam, grid);
  CHECK(!rep.ok);
  CHECK(rep.max_value == 3.5);
}
