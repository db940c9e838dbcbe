#include "decaylab/evolution.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <utility>

#include <json.hpp>

namespace decaylab {

namespace {

Grid validate_grid(const SurfaceModel& model, const Grid& grid) {
  if (grid.n_r < 8) throw DomainError("grid: need at least 8 radial nodes");
  if (grid.n_theta < 4 || grid.n_theta % 2 != 0)
    throw DomainError("grid: angular node count must be even and >= 4");
  if (!Fft::is_pow2(static_cast<std::size_t>(grid.n_theta)))
    throw DomainError(
        "grid: angular node count must be a power of two for the radix-2 "
        "angular transform");
  if (!(grid.r_max > 0.0)) throw DomainError("grid: r_max must be positive");
  if (-grid.r_max < model.r_lo() || grid.r_max > model.r_hi())
    throw DomainError("grid: truncation radius exceeds the model window");
  if (grid.boundary == BoundaryKind::sponge) {
    if (!(grid.sponge_width > 0.0) || grid.sponge_width >= grid.r_max / 4.0)
      throw DomainError("grid: sponge width must lie in (0, r_max/4)");
    if (!(grid.sponge_strength >= 0.0))
      throw DomainError("grid: sponge strength must be nonnegative");
  }
  return grid;
}

}  // namespace

// ------------------------------------------------------------ discretization

Discretization::Discretization(const SurfaceModel& model, const Grid& grid,
                               AngularScheme angular)
    : model_(&model),
      grid_(validate_grid(model, grid)),
      angular_(angular),
      fft_(static_cast<std::size_t>(grid_.n_theta)) {
  int nr = grid_.n_r, nt = grid_.n_theta;
  double dr = grid_.dr(), dth = grid_.dtheta();
  theta_.resize(nr);
  weight_.resize(nr);
  for (int i = 0; i < nr; ++i) {
    theta_[i] = model.theta_g(r_node(i));
    if (!(theta_[i] > 0.0))
      throw ConstructionError("grid: profile not positive on a node");
    double half = (i == 0 || i == nr - 1) ? 0.5 : 1.0;
    weight_[i] = theta_[i] * dr * dth * half;
  }
  theta_half_.resize(nr - 1);
  for (int i = 0; i + 1 < nr; ++i)
    theta_half_[i] = model.theta_g(r_node(i) + 0.5 * dr);

  symbol_.resize(nt);
  for (int k = 0; k < nt; ++k) {
    int ks = (k <= nt / 2) ? k : k - nt;
    if (angular_ == AngularScheme::spectral) {
      symbol_[k] = static_cast<double>(ks) * ks;
    } else {
      symbol_[k] = (2.0 - 2.0 * std::cos(ks * dth)) / (dth * dth);
    }
  }

  sponge_.assign(nr, 0.0);
  if (grid_.boundary == BoundaryKind::sponge) {
    double cut = grid_.r_max - grid_.sponge_width;
    for (int i = 0; i < nr; ++i) {
      double excess = std::abs(r_node(i)) - cut;
      if (excess > 0.0) {
        double s = excess / grid_.sponge_width;
        sponge_[i] = grid_.sponge_strength * s * s;
      }
    }
  }
}

double Discretization::physical_radius() const {
  return grid_.boundary == BoundaryKind::sponge
             ? grid_.r_max - grid_.sponge_width
             : grid_.r_max;
}

void Discretization::to_modes(std::vector<Complex>& field) const {
  int nt = grid_.n_theta;
  parallel_for(static_cast<std::size_t>(grid_.n_r), [&](std::size_t i) {
    fft_.forward(field.data() + i * nt);
  });
}

void Discretization::to_physical(std::vector<Complex>& field) const {
  int nt = grid_.n_theta;
  parallel_for(static_cast<std::size_t>(grid_.n_r), [&](std::size_t i) {
    fft_.inverse(field.data() + i * nt);
  });
}

void Discretization::mode_laplacian(int k, std::vector<double>& sub,
                                    std::vector<double>& diag,
                                    std::vector<double>& super) const {
  int nr = grid_.n_r;
  double dr2 = grid_.dr() * grid_.dr();
  double sym = symbol_[k];
  sub.assign(nr - 1, 0.0);
  super.assign(nr - 1, 0.0);
  diag.assign(nr, 0.0);
  // reflecting ends: ghost node mirrored through the boundary, which doubles
  // the single interior flux
  diag[0] = 2.0 * theta_half_[0] / (theta_[0] * dr2) +
            sym / (theta_[0] * theta_[0]);
  super[0] = -2.0 * theta_half_[0] / (theta_[0] * dr2);
  for (int i = 1; i + 1 < nr; ++i) {
    double ti = theta_[i];
    sub[i - 1] = -theta_half_[i - 1] / (ti * dr2);
    super[i] = -theta_half_[i] / (ti * dr2);
    diag[i] = (theta_half_[i - 1] + theta_half_[i]) / (ti * dr2) +
              sym / (ti * ti);
  }
  double tl = theta_[nr - 1];
  sub[nr - 2] = -2.0 * theta_half_[nr - 2] / (tl * dr2);
  diag[nr - 1] = 2.0 * theta_half_[nr - 2] / (tl * dr2) + sym / (tl * tl);
}

void Discretization::apply_laplacian(const std::vector<Complex>& u,
                                     std::vector<Complex>& out) const {
  if (u.size() != size()) throw DomainError("apply_laplacian: size mismatch");
  int nr = grid_.n_r, nt = grid_.n_theta;
  double dr2 = grid_.dr() * grid_.dr();
  std::vector<Complex> modes = u;
  to_modes(modes);
  out.assign(size(), Complex(0.0, 0.0));
  for (int k = 0; k < nt; ++k) {
    double sym = symbol_[k];
    auto at = [&](int i) -> const Complex& {
      return modes[static_cast<std::size_t>(i) * nt + k];
    };
    auto res = [&](int i) -> Complex& {
      return out[static_cast<std::size_t>(i) * nt + k];
    };
    res(0) = 2.0 * theta_half_[0] * (at(0) - at(1)) / (theta_[0] * dr2) +
             sym / (theta_[0] * theta_[0]) * at(0);
    for (int i = 1; i + 1 < nr; ++i) {
      double ti = theta_[i];
      res(i) = (-theta_half_[i - 1] * (at(i - 1) - at(i)) -
                theta_half_[i] * (at(i + 1) - at(i))) /
                   (ti * dr2) +
               sym / (ti * ti) * at(i);
    }
    double tl = theta_[nr - 1];
    res(nr - 1) =
        2.0 * theta_half_[nr - 2] * (at(nr - 1) - at(nr - 2)) / (tl * dr2) +
        sym / (tl * tl) * at(nr - 1);
  }
  to_physical(out);
}

double Discretization::gradient_form_within(const std::vector<Complex>& u,
                                            double r_cut) const {
  if (u.size() != size()) throw DomainError("gradient_form: size mismatch");
  int nr = grid_.n_r, nt = grid_.n_theta;
  double dr = grid_.dr(), dth = grid_.dtheta();
  double cut = r_cut + 1e-12;
  double radial = 0.0;
  for (int i = 0; i + 1 < nr; ++i) {
    if (std::abs(r_node(i)) > cut || std::abs(r_node(i + 1)) > cut) continue;
    double w_face = theta_half_[i] * dth / dr;
    double acc = 0.0;
    const Complex* a = u.data() + static_cast<std::size_t>(i) * nt;
    const Complex* b = u.data() + static_cast<std::size_t>(i + 1) * nt;
    for (int j = 0; j < nt; ++j) acc += std::norm(b[j] - a[j]);
    radial += w_face * acc;
  }
  std::vector<Complex> modes = u;
  to_modes(modes);
  double angular = 0.0;
  for (int i = 0; i < nr; ++i) {
    if (std::abs(r_node(i)) > cut) continue;
    double scale = weight_[i] / (theta_[i] * theta_[i] * nt);
    const Complex* row = modes.data() + static_cast<std::size_t>(i) * nt;
    double acc = 0.0;
    for (int k = 0; k < nt; ++k) acc += symbol_[k] * std::norm(row[k]);
    angular += scale * acc;
  }
  return radial + angular;
}

double Discretization::gradient_form(const std::vector<Complex>& u) const {
  return gradient_form_within(u, grid_.r_max);
}

double Discretization::mass_form_within(const std::vector<Complex>& u,
                                        double r_cut) const {
  if (u.size() != size()) throw DomainError("mass_form: size mismatch");
  int nr = grid_.n_r, nt = grid_.n_theta;
  double cut = r_cut + 1e-12;
  double total = 0.0;
  for (int i = 0; i < nr; ++i) {
    if (std::abs(r_node(i)) > cut) continue;
    const Complex* row = u.data() + static_cast<std::size_t>(i) * nt;
    double acc = 0.0;
    for (int j = 0; j < nt; ++j) acc += std::norm(row[j]);
    total += weight_[i] * acc;
  }
  return total;
}

double Discretization::mass_form(const std::vector<Complex>& u) const {
  return mass_form_within(u, grid_.r_max);
}

double Discretization::max_eigenvalue() const {
  if (max_eig_ > 0.0) return max_eig_;
  Rng rng(0xD15C0ULL);
  std::vector<Complex> v(size()), w(size());
  for (auto& z : v) z = Complex(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
  double lambda = 1.0;
  for (int it = 0; it < 80; ++it) {
    apply_laplacian(v, w);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < grid_.n_r; ++i) {
      const Complex* rv = v.data() + static_cast<std::size_t>(i) * grid_.n_theta;
      const Complex* rw = w.data() + static_cast<std::size_t>(i) * grid_.n_theta;
      for (int j = 0; j < grid_.n_theta; ++j) {
        num += weight_[i] * (std::conj(rv[j]) * rw[j]).real();
        den += weight_[i] * std::norm(rv[j]);
      }
    }
    lambda = num / den + 1.0;  // +1 for the mass term of K = L + I
    double norm = 0.0;
    for (auto& z : w) norm += std::norm(z);
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) break;
    for (std::size_t idx = 0; idx < v.size(); ++idx) {
      v[idx] = w[idx] / norm + 1e-14 * v[idx];
    }
  }
  max_eig_ = lambda;
  return max_eig_;
}

void solve_tridiagonal(const std::vector<double>& sub,
                       const std::vector<double>& diag,
                       const std::vector<double>& super,
                       std::vector<Complex>& rhs) {
  std::size_t n = diag.size();
  if (sub.size() != n - 1 || super.size() != n - 1 || rhs.size() != n)
    throw DomainError("solve_tridiagonal: inconsistent sizes");
  std::vector<double> c(n - 1);
  std::vector<Complex> d(n);
  double beta = diag[0];
  if (beta == 0.0) throw NumericsError("solve_tridiagonal: zero pivot");
  c[0] = super[0] / beta;
  d[0] = rhs[0] / beta;
  for (std::size_t i = 1; i < n; ++i) {
    beta = diag[i] - sub[i - 1] * c[i - 1];
    if (beta == 0.0) throw NumericsError("solve_tridiagonal: zero pivot");
    if (i < n - 1) c[i] = super[i] / beta;
    d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / beta;
  }
  rhs[n - 1] = d[n - 1];
  for (std::size_t i = n - 1; i-- > 0;) rhs[i] = d[i] - c[i] * rhs[i + 1];
}

// ------------------------------------------------------------------ stepper

Stepper::Stepper(const Discretization& disc, std::vector<double> damping,
                 TimeScheme scheme, double dt)
    : disc_(&disc), damping_(std::move(damping)), scheme_(scheme), dt_(dt) {
  if (!(dt_ > 0.0)) throw DomainError("stepper: dt must be positive");
  if (damping_.size() != disc.size())
    throw DomainError("stepper: damping size mismatch");
  for (double a : damping_)
    if (!std::isfinite(a) || a < 0.0)
      throw DomainError("stepper: damping must be finite and nonnegative");

  int nr = disc.n_r(), nt = disc.n_theta();
  mode_diagonal_ = true;
  for (int i = 0; i < nr && mode_diagonal_; ++i) {
    const double* row = damping_.data() + static_cast<std::size_t>(i) * nt;
    double lo = row[0], hi = row[0];
    for (int j = 1; j < nt; ++j) {
      lo = std::min(lo, row[j]);
      hi = std::max(hi, row[j]);
    }
    if (hi - lo > 1e-13 * (1.0 + std::abs(hi))) mode_diagonal_ = false;
  }

  if (scheme_ == TimeScheme::trapezoidal) {
    // factor M_k = I + H a + H^2 K_k per mode; off the direct path the same
    // structure with the angular-mean damping serves as the preconditioner
    double H = 0.5 * dt_;
    std::vector<double> abar(nr);
    for (int i = 0; i < nr; ++i) {
      const double* row = damping_.data() + static_cast<std::size_t>(i) * nt;
      double acc = 0.0;
      for (int j = 0; j < nt; ++j) acc += row[j];
      abar[i] = acc / nt;
    }
    factors_.resize(nt);
    std::vector<double> sub, diag, super;
    for (int k = 0; k < nt; ++k) {
      disc.mode_laplacian(k, sub, diag, super);
      ModeFactor f;
      f.sub.resize(nr - 1);
      f.super.resize(nr - 1);
      f.diag.resize(nr);
      for (int i = 0; i + 1 < nr; ++i) {
        f.sub[i] = H * H * sub[i];
        f.super[i] = H * H * super[i];
      }
      for (int i = 0; i < nr; ++i)
        f.diag[i] = 1.0 + H * abar[i] + H * H * (diag[i] + 1.0);
      factors_[k] = std::move(f);
    }
  } else {
    exp_half_damping_.resize(damping_.size());
    for (std::size_t i = 0; i < damping_.size(); ++i)
      exp_half_damping_[i] = std::exp(-0.5 * dt_ * damping_[i]);
  }
}

double Stepper::stability_limit() const {
  return 2.0 / std::sqrt(disc_->max_eigenvalue());
}

void Stepper::apply_k(const std::vector<Complex>& in,
                      std::vector<Complex>& out) const {
  disc_->apply_laplacian(in, out);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] += in[i];
}

void Stepper::solve_mass_matrix(std::vector<Complex>& rhs) const {
  // preconditioner solve: modes, per-mode Thomas, back
  int nr = disc_->n_r(), nt = disc_->n_theta();
  disc_->to_modes(rhs);
  std::vector<Complex> col(nr);
  for (int k = 0; k < nt; ++k) {
    for (int i = 0; i < nr; ++i)
      col[i] = rhs[static_cast<std::size_t>(i) * nt + k];
    solve_tridiagonal(factors_[k].sub, factors_[k].diag, factors_[k].super,
                      col);
    for (int i = 0; i < nr; ++i)
      rhs[static_cast<std::size_t>(i) * nt + k] = col[i];
  }
  disc_->to_physical(rhs);
}

void Stepper::advance(StateVector& state) const {
  if (state.u.size() != disc_->size() || state.v.size() != disc_->size())
    throw DomainError("stepper: state size mismatch");
  if (scheme_ == TimeScheme::trapezoidal) {
    advance_trapezoidal(state);
  } else {
    advance_leapfrog(state);
  }
  for (const Complex& z : state.u)
    if (!std::isfinite(z.real()) || !std::isfinite(z.imag()))
      throw NumericsError("stepper: non-finite state at t = " +
                          format_double(state.t, 6) + " (step " +
                          std::to_string(std::lround(state.t / dt_)) + ")");
  state.t += dt_;
}

void Stepper::advance_trapezoidal(StateVector& state) const {
  int nr = disc_->n_r(), nt = disc_->n_theta();
  double H = 0.5 * dt_;
  if (mode_diagonal_) {
    std::vector<Complex>& u = state.u;
    std::vector<Complex>& v = state.v;
    disc_->to_modes(u);
    disc_->to_modes(v);
    std::vector<double> sub, diag, super;
    std::vector<Complex> ku(nr), kv(nr), rhs(nr);
    for (int k = 0; k < nt; ++k) {
      disc_->mode_laplacian(k, sub, diag, super);
      auto idx = [&](int i) { return static_cast<std::size_t>(i) * nt + k; };
      auto mul = [&](const std::vector<Complex>& x, std::vector<Complex>& y) {
        for (int i = 0; i < nr; ++i) {
          Complex acc = (diag[i] + 1.0) * x[i];  // K = L + I
          if (i > 0) acc += sub[i - 1] * x[i - 1];
          if (i + 1 < nr) acc += super[i] * x[i + 1];
          y[i] = acc;
        }
      };
      std::vector<Complex> uc(nr), vc(nr);
      for (int i = 0; i < nr; ++i) {
        uc[i] = u[idx(i)];
        vc[i] = v[idx(i)];
      }
      mul(uc, ku);
      mul(vc, kv);
      for (int i = 0; i < nr; ++i) {
        double a = damping_[idx(i)];
        rhs[i] = vc[i] - H * a * vc[i] - H * H * kv[i] - 2.0 * H * ku[i];
      }
      solve_tridiagonal(factors_[k].sub, factors_[k].diag, factors_[k].super,
                        rhs);
      for (int i = 0; i < nr; ++i) {
        v[idx(i)] = rhs[i];
        u[idx(i)] = uc[i] + H * (vc[i] + rhs[i]);
      }
    }
    disc_->to_physical(u);
    disc_->to_physical(v);
    return;
  }

  // general damping: preconditioned conjugate gradients on
  // M x = (I + H a + H^2 K) x = rhs in the weighted inner product
  std::size_t n = disc_->size();
  std::vector<Complex> ku(n), kv(n), rhs(n), x(n), r(n), z(n), p(n), mp(n);
  apply_k(state.u, ku);
  apply_k(state.v, kv);
  for (std::size_t i = 0; i < n; ++i)
    rhs[i] = state.v[i] - H * damping_[i] * state.v[i] - H * H * kv[i] -
             2.0 * H * ku[i];

  auto weighted_dot = [&](const std::vector<Complex>& a,
                          const std::vector<Complex>& b) {
    double re = 0.0, im = 0.0;
    for (int i = 0; i < nr; ++i) {
      double w = disc_->weight(i);
      const Complex* ra = a.data() + static_cast<std::size_t>(i) * nt;
      const Complex* rb = b.data() + static_cast<std::size_t>(i) * nt;
      for (int j = 0; j < nt; ++j) {
        Complex t = std::conj(ra[j]) * rb[j];
        re += w * t.real();
        im += w * t.imag();
      }
    }
    return Complex(re, im);
  };
  auto apply_m = [&](const std::vector<Complex>& in,
                     std::vector<Complex>& out) {
    apply_k(in, out);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = in[i] + H * damping_[i] * in[i] + H * H * out[i];
  };

  x = state.v;  // warm start
  apply_m(x, mp);
  for (std::size_t i = 0; i < n; ++i) r[i] = rhs[i] - mp[i];
  double rhs_norm = std::sqrt(weighted_dot(rhs, rhs).real());
  double tol = 1e-12 * std::max(rhs_norm, 1e-300);
  z = r;
  solve_mass_matrix(z);
  p = z;
  Complex rz = weighted_dot(r, z);
  int it = 0;
  for (; it < 400; ++it) {
    double rnorm = std::sqrt(weighted_dot(r, r).real());
    if (rnorm <= tol) break;
    apply_m(p, mp);
    Complex alpha = rz / weighted_dot(p, mp);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * mp[i];
    }
    z = r;
    solve_mass_matrix(z);
    Complex rz_new = weighted_dot(r, z);
    Complex beta = rz_new / rz;
    rz = rz_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  if (it >= 400)
    throw NumericsError("stepper: conjugate gradients failed to converge");
  for (std::size_t i = 0; i < n; ++i) {
    Complex vold = state.v[i];
    state.v[i] = x[i];
    state.u[i] += H * (vold + x[i]);
  }
}

void Stepper::advance_leapfrog(StateVector& state) const {
  // palindromic splitting: exact half-step damping, velocity kick, drift,
  // kick, damping — order 2, exact on pure damping
  std::size_t n = disc_->size();
  double H = 0.5 * dt_;
  std::vector<Complex> ku(n);
  std::vector<Complex>& v = state.v;
  for (std::size_t i = 0; i < n; ++i) v[i] *= exp_half_damping_[i];
  apply_k(state.u, ku);
  for (std::size_t i = 0; i < n; ++i) v[i] -= H * ku[i];
  for (std::size_t i = 0; i < n; ++i) state.u[i] += dt_ * v[i];
  apply_k(state.u, ku);
  for (std::size_t i = 0; i < n; ++i) v[i] -= H * ku[i];
  for (std::size_t i = 0; i < n; ++i) v[i] *= exp_half_damping_[i];
}

// -------------------------------------------------------------- observables

EnergyReport energy(const Discretization& disc, const StateVector& state) {
  EnergyReport rep;
  rep.grad_sq = disc.gradient_form(state.u);
  rep.u_sq = disc.mass_form(state.u);
  rep.v_sq = disc.mass_form(state.v);
  rep.energy = 0.5 * (rep.grad_sq + rep.v_sq);
  rep.x_sq = rep.grad_sq + rep.u_sq + rep.v_sq;
  return rep;
}

double dissipation_residual(const Discretization& disc,
                            const std::vector<double>& damping,
                            const std::vector<StateVector>& samples,
                            double dt) {
  if (samples.size() < 2)
    throw DomainError("dissipation_residual: need at least two samples");
  if (damping.size() != disc.size())
    throw DomainError("dissipation_residual: damping size mismatch");
  double cut = disc.physical_radius();
  int nr = disc.n_r(), nt = disc.n_theta();

  auto x_sq = [&](const StateVector& s) {
    return disc.gradient_form_within(s.u, cut) +
           disc.mass_form_within(s.u, cut) + disc.mass_form_within(s.v, cut);
  };

  double worst = 0.0;
  double prev_x = x_sq(samples[0]);
  for (std::size_t m = 0; m + 1 < samples.size(); ++m) {
    const StateVector& a = samples[m];
    const StateVector& b = samples[m + 1];
    if (std::abs(b.t - a.t - dt) > 1e-9 * (1.0 + std::abs(a.t)))
      throw DomainError(
          "dissipation_residual: samples must be one step apart");
    double next_x = x_sq(b);
    double sink = 0.0;
    for (int i = 0; i < nr; ++i) {
      if (std::abs(disc.r_node(i)) > cut + 1e-12) continue;
      double w = disc.weight(i);
      const Complex* va = a.v.data() + static_cast<std::size_t>(i) * nt;
      const Complex* vb = b.v.data() + static_cast<std::size_t>(i) * nt;
      const double* da = damping.data() + static_cast<std::size_t>(i) * nt;
      for (int j = 0; j < nt; ++j)
        sink += w * da[j] * std::norm(0.5 * (va[j] + vb[j]));
    }
    double residual = std::abs((next_x - prev_x) / (2.0 * dt) + sink);
    worst = std::max(worst, residual);
    prev_x = next_x;
  }
  return worst;
}

// ---------------------------------------------------------------- experiment

StateVector make_initial_state(const Discretization& disc,
                               const InitialData& init) {
  if (!(init.sigma > 0.0))
    throw DomainError("initial data: sigma must be positive");
  StateVector state;
  state.u.assign(disc.size(), Complex(0.0, 0.0));
  state.v.assign(disc.size(), Complex(0.0, 0.0));
  int nr = disc.n_r(), nt = disc.n_theta();
  double tc = disc.model().theta_g(init.r0);
  double s2 = 2.0 * init.sigma * init.sigma;
  for (int i = 0; i < nr; ++i) {
    double dr = disc.r_node(i) - init.r0;
    double radial = std::exp(-dr * dr / s2);
    for (int j = 0; j < nt; ++j) {
      double th = j * disc.grid().dtheta();
      Complex val;
      if (init.kind == InitialData::Kind::gaussian) {
        // wrapped images keep the bump smooth across the angular seam
        double ang = 0.0;
        double base = th - init.theta0;
        base -= kTwoPi * std::round(base / kTwoPi);
        for (int m = -1; m <= 1; ++m) {
          double d = tc * (base + kTwoPi * m);
          ang += std::exp(-d * d / s2);
        }
        val = Complex(init.amplitude * radial * ang, 0.0);
      } else {
        val = init.amplitude * radial *
              std::exp(Complex(0.0, init.mode_k * th));
      }
      state.u[static_cast<std::size_t>(i) * nt + j] = val;
    }
  }
  return state;
}

DecayFit fit_decay(const std::vector<SeriesSample>& series, double t_lo,
                   double log_power_exponent) {
  DecayFit fit;
  fit.t_lo = t_lo;
  std::vector<double> ts, ys;  // (t, log X)
  bool floored = false;
  for (const SeriesSample& s : series) {
    if (s.t < t_lo) continue;
    if (!(s.x_sq > 1e-280)) {
      floored = true;
      continue;
    }
    ts.push_back(s.t);
    ys.push_back(0.5 * std::log(s.x_sq));
  }
  fit.truncated = floored;
  if (ts.size() < 3) {
    fit.selected = "indeterminate";
    fit.truncated = true;
    return fit;
  }
  fit.t_hi = ts.back();

  std::size_t n = ts.size();
  double tm = 0.0, ym = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    tm += ts[i];
    ym += ys[i];
  }
  tm /= n;
  ym /= n;
  double stt = 0.0, sty = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    stt += (ts[i] - tm) * (ts[i] - tm);
    sty += (ts[i] - tm) * (ys[i] - ym);
  }
  double slope = stt > 0.0 ? sty / stt : 0.0;
  fit.exponential.rate = -slope;
  fit.exponential.amplitude = std::exp(ym - slope * tm);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double e = ys[i] - (ym + slope * (ts[i] - tm));
    acc += e * e;
  }
  fit.exponential.rms = std::sqrt(acc / n);

  double k = log_power_exponent;
  double cm = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    cm += ys[i] + k * std::log(std::log(2.0 + ts[i]));
  cm /= n;
  fit.log_power.power = k;
  fit.log_power.constant = std::exp(cm);
  acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double e = ys[i] - (cm - k * std::log(std::log(2.0 + ts[i])));
    acc += e * e;
  }
  fit.log_power.rms = std::sqrt(acc / n);

  if (fit.exponential.rms <= fit.log_power.rms &&
      fit.exponential.rate > 0.0) {
    fit.selected = "exponential";
  } else if (fit.log_power.rms < fit.exponential.rms) {
    fit.selected = "log-power";
  } else {
    fit.selected = "indeterminate";
  }
  return fit;
}

std::string DecayFit::to_json() const {
  nlohmann::json j;
  j["exponential"] = {{"amplitude", exponential.amplitude},
                      {"rate", exponential.rate},
                      {"rms", exponential.rms}};
  j["log_power"] = {{"constant", log_power.constant},
                    {"power", log_power.power},
                    {"rms", log_power.rms}};
  j["selected"] = selected;
  j["window"] = {t_lo, t_hi};
  j["truncated"] = truncated;
  return j.dump(2);
}

DecayExperiment run_decay_experiment(const SurfaceModel& model,
                                     const DampingSpec& damping,
                                     const EvolutionConfig& config) {
  if (!(config.horizon > 0.0))
    throw DomainError("experiment: horizon must be positive");
  if (config.cadence < 1)
    throw DomainError("experiment: cadence must be at least 1");
  Discretization disc(model, config.grid, config.angular);
  int nr = disc.n_r(), nt = disc.n_theta();

  DecayExperiment out;

  std::vector<double> a(disc.size(), 0.0);
  for (int i = 0; i < nr; ++i) {
    double r = disc.r_node(i);
    for (int j = 0; j < nt; ++j) {
      double val = damping.uniform + disc.sponge_profile()[i];
      if (damping.field)
        val += damping.field->value({r, j * config.grid.dtheta()});
      a[static_cast<std::size_t>(i) * nt + j] = val;
    }
  }

  if (damping.field) {
    const DampingField::Config& fc = damping.field->config();
    double dr = config.grid.dr(), dth = config.grid.dtheta();
    if (!fc.centers.empty()) {
      if (8.0 * dr > fc.omega)
        out.warnings.push_back(
            "radial spacing resolves the bump radius with fewer than 8 "
            "points");
      double worst_arc = 0.0;
      for (const auto& c : fc.centers)
        worst_arc = std::max(worst_arc, model.theta_g(c.r) * dth);
      if (8.0 * worst_arc > fc.omega)
        out.warnings.push_back(
            "angular spacing resolves the bump radius with fewer than 8 "
            "points");
    }
    for (const auto& band : fc.bands) {
      if (8.0 * dr > band.inner_half_width)
        out.warnings.push_back(
            "radial spacing resolves a damping band with fewer than 8 "
            "points");
    }
  }
  if (config.grid.boundary == BoundaryKind::sponge) {
    out.warnings.push_back(
        "sponge layer included in the effective damping (strength " +
        format_double(config.grid.sponge_strength, 6) + ", width " +
        format_double(config.grid.sponge_width, 6) +
        "); dissipation balance restricted to |r| <= " +
        format_double(disc.physical_radius(), 6));
  }

  Stepper stepper(disc, a, config.scheme, config.dt);
  StateVector state = make_initial_state(disc, config.init);
  out.initial_energy = energy(disc, state);

  long total = std::lround(config.horizon / config.dt);
  if (total < 1) total = 1;

  EnergyReport e0 = out.initial_energy;
  out.series.push_back({0.0, e0.energy, e0.x_sq, 0.0});
  StateVector prev;
  for (long step = 0; step < total; ++step) {
    bool record = ((step + 1) % config.cadence == 0) || (step + 1 == total);
    if (record) prev = state;
    stepper.advance(state);
    if (record) {
      EnergyReport e = energy(disc, state);
      double res = dissipation_residual(disc, a, {prev, state}, config.dt);
      out.series.push_back({state.t, e.energy, e.x_sq, res});
      out.max_residual = std::max(out.max_residual, res);
    }
  }
  out.final_energy = energy(disc, state);
  out.fit = fit_decay(out.series,
                      config.horizon * (1.0 - config.fit_fraction),
                      config.log_power_exponent);
  return out;
}

void write_series_csv(const std::string& path,
                      const std::vector<SeriesSample>& series) {
  CsvWriter csv({"t", "E", "X2", "residual"});
  for (const SeriesSample& s : series)
    csv.row_values({s.t, s.energy, s.x_sq, s.residual});
  csv.save(path);
}

// --------------------------------------------------------------- checkpoint

namespace {
constexpr const char* kCheckpointMagic = "DKGCHK1";
}

void save_checkpoint(const std::string& path, const Discretization& disc,
                     const StateVector& state) {
  if (state.u.size() != disc.size() || state.v.size() != disc.size())
    throw DomainError("checkpoint: state size mismatch");
  nlohmann::json header = {{"n_r", disc.n_r()},
                           {"n_theta", disc.n_theta()},
                           {"r_max", disc.grid().r_max},
                           {"t", state.t}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("checkpoint: cannot open " + path);
  out << kCheckpointMagic << "\n" << header.dump() << "\n";
  auto dump = [&](const std::vector<Complex>& field) {
    for (const Complex& z : field) {
      double re = z.real(), im = z.imag();
      out.write(reinterpret_cast<const char*>(&re), sizeof(double));
      out.write(reinterpret_cast<const char*>(&im), sizeof(double));
    }
  };
  dump(state.u);
  dump(state.v);
  if (!out) throw DomainError("checkpoint: write failed for " + path);
}

StateVector load_checkpoint(const std::string& path,
                            const Discretization& disc) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("checkpoint: cannot open " + path);
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic)
    throw SchemaError("checkpoint: unrecognized header in " + path);
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint: bad header: ") + e.what());
  }
  if (header.value("n_r", -1) != disc.n_r() ||
      header.value("n_theta", -1) != disc.n_theta())
    throw SchemaError("checkpoint: grid dimensions do not match");
  if (std::abs(header.value("r_max", 0.0) - disc.grid().r_max) > 1e-12)
    throw SchemaError("checkpoint: truncation radius does not match");
  StateVector state;
  state.t = header.value("t", 0.0);
  auto slurp = [&](std::vector<Complex>& field) {
    field.resize(disc.size());
    for (Complex& z : field) {
      double re = 0.0, im = 0.0;
      in.read(reinterpret_cast<char*>(&re), sizeof(double));
      in.read(reinterpret_cast<char*>(&im), sizeof(double));
      z = Complex(re, im);
    }
  };
  slurp(state.u);
  slurp(state.v);
  if (!in) throw SchemaError("checkpoint: truncated data in " + path);
  return state;
}

}  // namespace decaylab
