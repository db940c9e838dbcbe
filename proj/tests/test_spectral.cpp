#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "decaylab/spectral.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <vector>

#include "decaylab/control.hpp"

using namespace decaylab;

namespace {

SurfaceModel flat_cylinder(double window = 16.0) {
  return SurfaceModel(ScalingProfile::cylindrical(window),
                      ScalingProfile::cylindrical(window));
}

SurfaceModel wavy(double window = 32.0) {
  return SurfaceModel(ScalingProfile::perturbed_cylinder(1.0, 1.0, window),
                      ScalingProfile::perturbed_cylinder(1.0, 1.0, window));
}

std::vector<double> uniform_damping(const Discretization& disc, double c) {
  return std::vector<double>(disc.size(), c);
}

// angularly varying but nonnegative synthetic profile
std::vector<double> swirl_damping(const Discretization& disc) {
  std::vector<double> a(disc.size());
  for (int i = 0; i < disc.n_r(); ++i)
    for (int j = 0; j < disc.n_theta(); ++j) {
      double th = j * disc.grid().dtheta();
      a[static_cast<std::size_t>(i) * disc.n_theta() + j] =
          0.4 + 0.2 * std::sin(th) + 0.1 * std::cos(disc.r_node(i));
    }
  return a;
}

StateVector random_state(const Discretization& disc, Rng& rng) {
  StateVector s;
  s.u.resize(disc.size());
  s.v.resize(disc.size());
  for (std::size_t i = 0; i < disc.size(); ++i) {
    s.u[i] = Complex(rng.normal(), rng.normal());
    s.v[i] = Complex(rng.normal(), rng.normal());
  }
  return s;
}

// exact discrete mode frequencies of the flat-cylinder operator K = L + I:
// nu = k^2 + 2(1 - cos(m pi / (n_r - 1)))/dr^2 + 1
std::vector<double> flat_mode_values(const Discretization& disc) {
  std::vector<double> nus;
  double dr = disc.grid().dr();
  for (int k = 0; k < disc.n_theta(); ++k) {
    double sym = disc.symbol(k);
    for (int m = 0; m < disc.n_r(); ++m) {
      double lam = 2.0 * (1.0 - std::cos(m * kPi / (disc.n_r() - 1))) /
                   (dr * dr);
      nus.push_back(sym + lam + 1.0);
    }
  }
  std::sort(nus.begin(), nus.end());
  return nus;
}

// smallest singular value of the similarity-reduced mode block
// [[-i mu, sqrt(nu)], [-sqrt(nu), -c - i mu]]
double block_sigma_min(double nu, double c, double mu) {
  Eigen::Matrix2cd b;
  double rt = std::sqrt(nu);
  b << Complex(0.0, -mu), Complex(rt, 0.0), Complex(-rt, 0.0),
      Complex(-c, -mu);
  Eigen::JacobiSVD<Eigen::Matrix2cd> svd(b);
  return svd.singularValues()(1);
}

// closed-form resolvent norm of the uniformly damped flat-cylinder system:
// the operator is the X-orthogonal sum of the mode blocks
double oracle_resolvent_norm(const Discretization& disc, double c, double mu) {
  double smin = std::numeric_limits<double>::infinity();
  for (double nu : flat_mode_values(disc))
    smin = std::min(smin, block_sigma_min(nu, c, mu));
  return 1.0 / smin;
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST_CASE("generator: block action and inner product consistency") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  GeneratorOperator op(disc, uniform_damping(disc, 0.4));
  CHECK(op.mode_diagonal());

  Rng rng(0xA11CE5ULL);
  StateVector s = random_state(disc, rng);

  StateVector half = s, out;
  std::fill(half.v.begin(), half.v.end(), Complex(0.0));
  op.apply(half, out);
  std::vector<Complex> lap;
  disc.apply_laplacian(half.u, lap);
  double err = 0.0;
  for (std::size_t i = 0; i < disc.size(); ++i) {
    err = std::max(err, std::abs(out.u[i]));
    err = std::max(err, std::abs(out.v[i] + lap[i] + half.u[i]));
  }
  CHECK(err < 1e-13);

  half = s;
  std::fill(half.u.begin(), half.u.end(), Complex(0.0));
  op.apply(half, out);
  err = 0.0;
  for (std::size_t i = 0; i < disc.size(); ++i) {
    err = std::max(err, std::abs(out.u[i] - half.v[i]));
    err = std::max(err, std::abs(out.v[i] + 0.4 * half.v[i]));
  }
  CHECK(err < 1e-13);

  Complex self = op.x_dot(s, s);
  double form = op.x_norm_sq(s);
  CHECK(std::abs(self.imag()) < 1e-12 * form);
  CHECK(std::abs(self.real() - form) < 1e-11 * form);

  CHECK_THROWS_AS(GeneratorOperator(disc, std::vector<double>(3, 0.1)),
                  DomainError);
  auto bad = uniform_damping(disc, 0.4);
  bad[5] = -0.1;
  CHECK_THROWS_AS(GeneratorOperator(disc, bad), DomainError);
  CHECK_THROWS_AS(op.apply(s, s), DomainError);
  StateVector wrong = s;
  wrong.u.resize(7);
  CHECK_THROWS_AS(op.apply(wrong, out), DomainError);
}

TEST_CASE("generator: random states dissipate exactly through the damping") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  std::vector<double> a = swirl_damping(disc);
  GeneratorOperator op(disc, a);
  CHECK_FALSE(op.mode_diagonal());

  Rng rng(0xD155ULL);
  for (int trial = 0; trial < 100; ++trial) {
    StateVector s = random_state(disc, rng), as;
    op.apply(s, as);
    double damp = 0.0;
    for (int i = 0; i < disc.n_r(); ++i)
      for (int j = 0; j < disc.n_theta(); ++j) {
        std::size_t idx = static_cast<std::size_t>(i) * disc.n_theta() + j;
        damp += disc.weight(i) * a[idx] * std::norm(s.v[idx]);
      }
    double re = op.x_dot(as, s).real();
    double scale = op.x_norm_sq(s) + damp;
    CHECK(re <= 1e-12 * scale);
    CHECK(std::abs(re + damp) < 1e-12 * scale);
  }
}

TEST_CASE("generator: adjoint matches the inner-product transpose") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  GeneratorOperator op(disc, swirl_damping(disc));

  Rng rng(0xADA7ULL);
  for (int trial = 0; trial < 20; ++trial) {
    StateVector x = random_state(disc, rng), y = random_state(disc, rng);
    StateVector ax, aty;
    op.apply(x, ax);
    op.adjoint_apply(y, aty);
    Complex lhs = op.x_dot(ax, y), rhs = op.x_dot(x, aty);
    double scale = op.x_norm(x) * op.x_norm(y);
    CHECK(std::abs(lhs - rhs) < 1e-12 * scale);
  }
}

TEST_CASE("resolvent: forward and adjoint solves invert the shifted blocks") {
  Complex sigma(0.2, 1.7);
  Rng rng(0x50F7ULL);

  auto run_roundtrip = [&](const Discretization& disc,
                           const GeneratorOperator& op) {
    StateVector f = random_state(const_cast<Discretization&>(disc), rng);
    StateVector u, au;
    op.resolvent_apply(sigma, f, u);
    op.apply(u, au);
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < disc.size(); ++i) {
      err = std::max(err, std::abs(au.u[i] - sigma * u.u[i] - f.u[i]));
      err = std::max(err, std::abs(au.v[i] - sigma * u.v[i] - f.v[i]));
      scale = std::max(scale, std::abs(f.u[i]));
      scale = std::max(scale, std::abs(f.v[i]));
    }
    CHECK(err < 1e-10 * scale);

    StateVector v, atv;
    op.adjoint_resolvent_apply(sigma, f, v);
    op.adjoint_apply(v, atv);
    Complex sb = std::conj(sigma);
    err = 0.0;
    for (std::size_t i = 0; i < disc.size(); ++i) {
      err = std::max(err, std::abs(atv.u[i] - sb * v.u[i] - f.u[i]));
      err = std::max(err, std::abs(atv.v[i] - sb * v.v[i] - f.v[i]));
    }
    CHECK(err < 1e-10 * scale);
  };

  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  SUBCASE("per-mode path for angularly uniform damping") {
    Discretization disc(cyl, g);
    GeneratorOperator op(disc, uniform_damping(disc, 0.35));
    run_roundtrip(disc, op);
  }
  SUBCASE("sparse path for angularly varying damping") {
    auto model = wavy();
    Discretization disc(model, g, AngularScheme::stencil2);
    GeneratorOperator op(disc, swirl_damping(disc));
    CHECK_FALSE(op.mode_diagonal());
    run_roundtrip(disc, op);
  }
  SUBCASE("varying damping on the trigonometric scheme is rejected") {
    Discretization disc(cyl, g, AngularScheme::spectral);
    GeneratorOperator op(disc, swirl_damping(disc));
    StateVector f = random_state(disc, rng), u;
    CHECK_THROWS_AS(op.resolvent_apply(sigma, f, u), DomainError);
  }
}

TEST_CASE("resolvent norm: uniform damping matches the mode-block reduction") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 33;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  double c = 0.3;
  GeneratorOperator op(disc, uniform_damping(disc, c));

  for (double mu : {2.5, 0.0}) {
    ResolventEstimate est = resolvent_norm(op, mu, 1e-8, 3000);
    CHECK(est.converged);
    CHECK_FALSE(est.infinite);
    double oracle = oracle_resolvent_norm(disc, c, mu);
    CHECK(rel_diff(est.value, oracle) < 1e-4);
  }
}

TEST_CASE("resolvent norm: undamped frequencies are flagged as singular") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  GeneratorOperator op(disc, uniform_damping(disc, 0.0));

  // the lowest mode of K = L + I sits exactly at nu = 1
  ResolventEstimate hit = resolvent_norm(op, 1.0);
  CHECK(hit.infinite);
  CHECK(std::isinf(hit.value));

  ResolventEstimate off = resolvent_norm(op, 0.37, 1e-8, 3000);
  CHECK(off.converged);
  CHECK_FALSE(off.infinite);
  double oracle = oracle_resolvent_norm(disc, 0.0, 0.37);
  CHECK(rel_diff(off.value, oracle) < 1e-4);
}

TEST_CASE("resolvent norm: static limit is stable under grid refinement") {
  auto cyl = flat_cylinder();
  double values[2];
  int idx = 0;
  for (int nr : {17, 33}) {
    Grid g;
    g.n_r = nr;
    g.n_theta = 8;
    Discretization disc(cyl, g);
    GeneratorOperator op(disc, uniform_damping(disc, 0.2));
    ResolventEstimate est = resolvent_norm(op, 0.0, 1e-8, 3000);
    CHECK(est.converged);
    CHECK(rel_diff(est.value, oracle_resolvent_norm(disc, 0.2, 0.0)) < 1e-4);
    values[idx++] = est.value;
  }
  CHECK(rel_diff(values[0], values[1]) < 0.05);
}

TEST_CASE("sparse and per-mode solvers agree on a shared configuration") {
  auto model = wavy();
  Grid g;
  g.n_r = 33;
  g.n_theta = 16;
  Discretization disc(model, g, AngularScheme::stencil2);

  std::vector<double> radial(disc.size());
  for (int i = 0; i < disc.n_r(); ++i) {
    double v = 0.25 + 0.15 * std::pow(std::cos(disc.r_node(i)), 2);
    for (int j = 0; j < disc.n_theta(); ++j)
      radial[static_cast<std::size_t>(i) * disc.n_theta() + j] = v;
  }
  std::vector<double> tickled = radial;
  tickled[0] += 1e-9;  // flips the solver off the per-mode fast path

  GeneratorOperator mode_op(disc, radial);
  GeneratorOperator sparse_op(disc, tickled);
  CHECK(mode_op.mode_diagonal());
  CHECK_FALSE(sparse_op.mode_diagonal());

  for (double mu : {0.6, 1.3}) {
    ResolventEstimate a = resolvent_norm(mode_op, mu, 1e-8, 2000);
    ResolventEstimate b = resolvent_norm(sparse_op, mu, 1e-8, 2000);
    CHECK(a.converged);
    CHECK(b.converged);
    CHECK(rel_diff(a.value, b.value) < 1e-5);
  }
}

TEST_CASE("sweep: uniform damping is classified uniformly bounded") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  GeneratorOperator op(disc, uniform_damping(disc, 0.3));

  std::vector<double> mus;
  for (int i = 0; i <= 40; ++i) mus.push_back(0.3 + 0.15 * i);
  ResolventSweep sweep = resolvent_sweep(op, mus);

  CHECK(sweep.classification == StabilityClass::uniformly_bounded);
  CHECK(sweep.points.size() == mus.size());
  for (const SweepPoint& p : sweep.points) {
    CHECK_FALSE(p.infinite);
    CHECK(p.converged);
  }
  CHECK(sweep.peak_ratio <= 30.0);
  // the boundedness gate is one-sided: decreasing peaks are fine
  CHECK(sweep.kendall_tau <= 0.2);
  // the growth diagnostics are reported even for the bounded outcome
  CHECK(std::isfinite(sweep.growth_fit.c));
  CHECK(std::isfinite(sweep.growth_fit.r2));

  nlohmann::json j = nlohmann::json::parse(sweep.to_json());
  CHECK(j["classification"] == "uniformly-bounded");
  CHECK(j["points"].size() == mus.size());
  CHECK(j["growth_fit"].contains("r2"));

  std::string path = "spectral_sweep_roundtrip.csv";
  write_sweep_csv(path, sweep);
  std::string text = read_text_file(path);
  CHECK(text.rfind("mu,norm,flag\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') ==
        static_cast<long>(mus.size()) + 1);
  std::remove(path.c_str());
}

TEST_CASE("sweep: undamped spectrum on the axis disables classification") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  GeneratorOperator op(disc, uniform_damping(disc, 0.0));

  ResolventSweep sweep = resolvent_sweep(op, {0.5, 1.0, 1.5});
  CHECK(sweep.classification == StabilityClass::inconclusive);
  CHECK(sweep.points[1].infinite);
  CHECK(sweep.note.find("singularity") != std::string::npos);

  nlohmann::json j = nlohmann::json::parse(sweep.to_json());
  CHECK(j["points"][1]["norm"].is_null());
  CHECK(j["points"][1]["flag"] == "infinite");
  CHECK(j["max_norm"].is_null());

  std::string path = "spectral_sweep_singular.csv";
  write_sweep_csv(path, sweep);
  std::string text = read_text_file(path);
  CHECK(text.find("inf") != std::string::npos);
  std::remove(path.c_str());
}

TEST_CASE("spectrum window: undamped flat cylinder reproduces closed forms") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  GeneratorOperator op(disc, uniform_damping(disc, 0.0));

  SpectrumOptions opts;
  opts.re_lo = -0.1;
  opts.re_hi = 0.12;
  opts.mu_max = 2.2;
  opts.n_shifts = 6;
  opts.krylov = 48;
  SpectrumWindowResult win = spectrum_window(op, opts);

  REQUIRE(!win.values.empty());
  for (const EigenvalueEntry& e : win.values) {
    CHECK(std::abs(e.lambda.real()) < 1e-7);
    CHECK(e.residual <= opts.tol);
  }
  CHECK(win.min_abs_real < 1e-7);

  // every mode frequency below 2 must be matched by a conjugate pair
  std::vector<double> nus = flat_mode_values(disc);
  nus.erase(std::unique(nus.begin(), nus.end(),
                        [](double a, double b) { return std::abs(a - b) <
                                                        1e-9; }),
            nus.end());
  int checked = 0;
  for (double nu : nus) {
    double freq = std::sqrt(nu);
    if (freq > 2.0) break;
    for (double s : {1.0, -1.0}) {
      bool found = false;
      for (const EigenvalueEntry& e : win.values)
        if (std::abs(e.lambda - Complex(0.0, s * freq)) < 1e-6) found = true;
      CHECK_MESSAGE(found, "missing eigenvalue at frequency ", s * freq);
    }
    ++checked;
  }
  CHECK(checked >= 10);

  // returned sorted by descending real part
  for (std::size_t i = 1; i < win.values.size(); ++i)
    CHECK(win.values[i - 1].lambda.real() >= win.values[i].lambda.real());
}

TEST_CASE("spectrum window: uniform damping shifts every mode half a rate") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  double c = 0.25;
  GeneratorOperator op(disc, uniform_damping(disc, c));

  SpectrumOptions opts;
  opts.re_lo = -0.3;
  opts.re_hi = 0.02;
  opts.mu_max = 2.2;
  opts.n_shifts = 6;
  opts.krylov = 48;
  SpectrumWindowResult win = spectrum_window(op, opts);

  REQUIRE(!win.values.empty());
  for (const EigenvalueEntry& e : win.values)
    CHECK(std::abs(e.lambda.real() + 0.5 * c) < 1e-6);
  CHECK(std::abs(win.abscissa + 0.5 * c) < 1e-6);
  CHECK(std::abs(win.min_abs_real - 0.5 * c) < 1e-6);

  std::vector<double> nus = flat_mode_values(disc);
  int matched = 0;
  for (double nu : nus) {
    double im = std::sqrt(nu - 0.25 * c * c);
    if (im > 2.0) continue;
    bool found = false;
    for (const EigenvalueEntry& e : win.values)
      if (std::abs(e.lambda - Complex(-0.5 * c, im)) < 1e-6) found = true;
    CHECK_MESSAGE(found, "missing damped eigenvalue at frequency ", im);
    ++matched;
  }
  CHECK(matched >= 10);

  std::string path = "spectral_window_roundtrip.csv";
  write_spectrum_csv(path, win);
  std::string text = read_text_file(path);
  CHECK(text.rfind("re,im,residual\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') ==
        static_cast<long>(win.values.size()) + 1);
  std::remove(path.c_str());
}

TEST_CASE("resolvent norm dominates the inverse spectral distance") {
  auto cyl = flat_cylinder();
  Grid g;
  g.n_r = 17;
  g.n_theta = 8;
  Discretization disc(cyl, g);
  double c = 0.25;
  GeneratorOperator op(disc, uniform_damping(disc, c));

  SpectrumOptions opts;
  opts.re_lo = -0.3;
  opts.re_hi = 0.02;
  opts.mu_max = 2.6;
  opts.n_shifts = 7;
  opts.krylov = 48;
  SpectrumWindowResult win = spectrum_window(op, opts);
  REQUIRE(win.values.size() > 4);

  for (double mu : {0.4, 1.6}) {
    double dist = std::numeric_limits<double>::infinity();
    for (const EigenvalueEntry& e : win.values)
      dist = std::min(dist, std::abs(Complex(0.0, mu) - e.lambda));
    ResolventEstimate est = resolvent_norm(op, mu, 1e-8, 3000);
    CHECK(est.converged);
    CHECK(est.value >= (1.0 - 1e-3) / dist);
  }
}

TEST_CASE("trapped well: resolvent peaks grow and boundedness is rejected") {
  auto model = wavy();
  Grid g;
  g.n_r = 65;
  g.n_theta = 16;
  Discretization disc(model, g);

  // radial damping bands away from the well at r = 0; the closed rotational
  // orbit at the profile maximum stays undamped
  DampingField::Config fc;
  fc.background = 0.0;
  fc.bands = {{-3.0, 0.8, 1.6, 0.6}, {3.0, 0.8, 1.6, 0.6}};
  DampingField field(model, fc);
  std::vector<double> a(disc.size());
  for (int i = 0; i < disc.n_r(); ++i)
    for (int j = 0; j < disc.n_theta(); ++j)
      a[static_cast<std::size_t>(i) * disc.n_theta() + j] =
          field.value(disc.r_node(i), j * g.dtheta());
  GeneratorOperator op(disc, a);
  CHECK(op.mode_diagonal());

  SpectrumOptions sopt;
  sopt.re_lo = -0.5;
  sopt.re_hi = 1e-3;
  sopt.mu_max = 2.9;
  sopt.n_shifts = 8;
  sopt.krylov = 48;
  SpectrumWindowResult win = spectrum_window(op, sopt);

  std::vector<double> trapped;
  for (const EigenvalueEntry& e : win.values)
    if (std::abs(e.lambda.real()) < 0.02 && e.lambda.imag() > 1.05 &&
        e.lambda.imag() < 2.9)
      trapped.push_back(e.lambda.imag());
  std::sort(trapped.begin(), trapped.end());
  REQUIRE(trapped.size() >= 3);

  std::vector<double> mus;
  for (int i = 0; i <= 20; ++i) mus.push_back(1.1 + 0.09 * i);
  mus.insert(mus.end(), trapped.begin(), trapped.end());
  std::sort(mus.begin(), mus.end());
  mus.erase(std::unique(mus.begin(), mus.end(),
                        [](double x, double y) { return y - x < 1e-4; }),
            mus.end());

  ResolventSweep sweep = resolvent_sweep(op, mus);
  CHECK(sweep.classification != StabilityClass::uniformly_bounded);
  CHECK(sweep.max_norm > 50.0);
  bool trend = sweep.peak_ratio > 30.0 || sweep.kendall_tau > 0.2;
  CHECK(trend);
  CHECK(std::isfinite(sweep.growth_fit.c));
}
