#include "decaylab/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <utility>

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <Eigen/SparseLU>
#include <json.hpp>

namespace decaylab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNormCeiling = 1e14;  // beyond this the norm reports infinite

std::size_t check_field(const Discretization& disc,
                        const std::vector<Complex>& f, const char* what) {
  if (f.size() != disc.size())
    throw DomainError(std::string("generator: ") + what +
                      " size does not match the grid");
  return f.size();
}

// Tridiagonal solve with complex coefficients, no pivoting; rhs must be
// contiguous. Near-singular pivots abort so callers can flag the shift.
void thomas_complex(const std::vector<Complex>& sub,
                    const std::vector<Complex>& diag,
                    const std::vector<Complex>& sup, Complex* x,
                    std::vector<Complex>& scratch) {
  int n = static_cast<int>(diag.size());
  scratch.resize(diag.size());
  Complex piv = diag[0];
  if (std::abs(piv) < 1e-300)
    throw NumericsError("shifted mode system is singular");
  scratch[0] = (n > 1) ? sup[0] / piv : Complex(0.0);
  x[0] /= piv;
  for (int i = 1; i < n; ++i) {
    piv = diag[i] - sub[i - 1] * scratch[i - 1];
    if (std::abs(piv) < 1e-300)
      throw NumericsError("shifted mode system is singular");
    scratch[i] = (i < n - 1) ? sup[i] / piv : Complex(0.0);
    x[i] = (x[i] - sub[i - 1] * x[i - 1]) / piv;
  }
  for (int i = n - 2; i >= 0; --i) x[i] -= scratch[i] * x[i + 1];
}

// One shifted solve backend P(sigma) = K + sigma a + sigma^2 shared by all
// resolvent applications at a fixed shift. The adjoint solve needs P(conj
// sigma) = conj(P(sigma)), obtained by conjugating the right-hand side and
// the solution, so a single factorization serves both directions.
class ShiftSolver {
 public:
  ShiftSolver(const GeneratorOperator& op, Complex sigma)
      : op_(&op), sigma_(sigma) {
    const Discretization& disc = op.disc();
    int nr = disc.n_r(), nt = disc.n_theta();
    if (op.mode_diagonal()) {
      mode_path_ = true;
      std::vector<double> abar(nr);
      for (int i = 0; i < nr; ++i) {
        const double* row = op.damping().data() +
                            static_cast<std::size_t>(i) * nt;
        double acc = 0.0;
        for (int j = 0; j < nt; ++j) acc += row[j];
        abar[i] = acc / nt;
      }
      std::vector<double> sub, diag, sup;
      csub_.resize(nt);
      cdiag_.resize(nt);
      csup_.resize(nt);
      Complex s2 = sigma * sigma;
      for (int k = 0; k < nt; ++k) {
        disc.mode_laplacian(k, sub, diag, sup);
        csub_[k].assign(sub.begin(), sub.end());
        csup_[k].assign(sup.begin(), sup.end());
        cdiag_[k].resize(diag.size());
        for (int i = 0; i < nr; ++i)
          cdiag_[k][i] = diag[i] + 1.0 + sigma * abar[i] + s2;
      }
    } else {
      mode_path_ = false;
      if (disc.angular() != AngularScheme::stencil2)
        throw DomainError(
            "resolvent solves with angularly varying damping need the "
            "stencil angular scheme (the trigonometric angular operator is "
            "dense)");
      std::vector<double> sub, diag, sup;
      disc.mode_laplacian(0, sub, diag, sup);
      double dth = disc.grid().dtheta();
      std::size_t n = disc.size();
      std::vector<Eigen::Triplet<Complex>> trips;
      trips.reserve(5 * n);
      Complex s2 = sigma * sigma;
      for (int i = 0; i < nr; ++i) {
        double inv_t2 = 1.0 / (disc.theta_node(i) * disc.theta_node(i));
        double ang = inv_t2 / (dth * dth);
        for (int j = 0; j < nt; ++j) {
          int idx = i * nt + j;
          Complex d = diag[i] + 2.0 * ang + 1.0 +
                      sigma * op.damping()[idx] + s2;
          trips.emplace_back(idx, idx, d);
          if (i > 0) trips.emplace_back(idx, idx - nt, Complex(sub[i - 1]));
          if (i < nr - 1) trips.emplace_back(idx, idx + nt, Complex(sup[i]));
          int jm = (j + nt - 1) % nt, jp = (j + 1) % nt;
          trips.emplace_back(idx, i * nt + jm, Complex(-ang));
          trips.emplace_back(idx, i * nt + jp, Complex(-ang));
        }
      }
      Eigen::SparseMatrix<Complex> p(static_cast<int>(n),
                                     static_cast<int>(n));
      p.setFromTriplets(trips.begin(), trips.end());
      p.makeCompressed();
      lu_.compute(p);
      if (lu_.info() != Eigen::Success)
        throw NumericsError("shifted operator factorization failed");
    }
  }

  // out = (A - sigma)^{-1} rhs
  void solve(const StateVector& rhs, StateVector& out) const {
    std::size_t n = op_->field_size();
    buf_.resize(n);
    const std::vector<double>& a = op_->damping();
    for (std::size_t i = 0; i < n; ++i)
      buf_[i] = -rhs.v[i] - (a[i] + sigma_) * rhs.u[i];
    solve_p(buf_, false);
    out.u = buf_;
    out.v.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      out.v[i] = rhs.u[i] + sigma_ * buf_[i];
    out.t = rhs.t;
  }

  // out = ((A - sigma)^*)^{-1} rhs
  void adjoint_solve(const StateVector& rhs, StateVector& out) const {
    std::size_t n = op_->field_size();
    buf_.resize(n);
    const std::vector<double>& a = op_->damping();
    Complex sb = std::conj(sigma_);
    for (std::size_t i = 0; i < n; ++i)
      buf_[i] = rhs.v[i] - (a[i] + sb) * rhs.u[i];
    solve_p(buf_, true);
    out.u = buf_;
    out.v.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      out.v[i] = -rhs.u[i] - sb * buf_[i];
    out.t = rhs.t;
  }

 private:
  // P(sigma) b = rhs in place; conj_shift solves with P(conj sigma)
  void solve_p(std::vector<Complex>& b, bool conj_shift) const {
    if (conj_shift)
      for (Complex& z : b) z = std::conj(z);
    if (mode_path_) {
      const Discretization& disc = op_->disc();
      int nr = disc.n_r(), nt = disc.n_theta();
      disc.to_modes(b);
      std::vector<Complex> line(nr), scratch;
      for (int k = 0; k < nt; ++k) {
        for (int i = 0; i < nr; ++i) line[i] = b[i * nt + k];
        thomas_complex(csub_[k], cdiag_[k], csup_[k], line.data(), scratch);
        for (int i = 0; i < nr; ++i) b[i * nt + k] = line[i];
      }
      disc.to_physical(b);
    } else {
      Eigen::Map<Eigen::VectorXcd> bm(b.data(),
                                      static_cast<Eigen::Index>(b.size()));
      Eigen::VectorXcd x = lu_.solve(bm);
      std::memcpy(b.data(), x.data(), b.size() * sizeof(Complex));
    }
    if (conj_shift)
      for (Complex& z : b) z = std::conj(z);
  }

  const GeneratorOperator* op_;
  Complex sigma_;
  bool mode_path_ = false;
  std::vector<std::vector<Complex>> csub_, cdiag_, csup_;
  Eigen::SparseLU<Eigen::SparseMatrix<Complex>, Eigen::COLAMDOrdering<int>>
      lu_;
  mutable std::vector<Complex> buf_;
};

std::uint64_t mix_seed(std::uint64_t seed, double mu) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &mu, sizeof(bits));
  return seed ^ (bits * 0x9E3779B97F4A7C15ULL + 0x7F4A7C15ULL);
}

void random_state(Rng& rng, std::size_t n, StateVector& z) {
  z.u.resize(n);
  z.v.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    z.u[i] = Complex(rng.normal(), rng.normal());
    z.v[i] = Complex(rng.normal(), rng.normal());
  }
  z.t = 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// GeneratorOperator
// ---------------------------------------------------------------------------

GeneratorOperator::GeneratorOperator(const Discretization& disc,
                                     std::vector<double> damping)
    : disc_(&disc), damping_(std::move(damping)) {
  if (damping_.size() != disc.size())
    throw DomainError("generator: damping vector size does not match the grid");
  for (double a : damping_)
    if (!std::isfinite(a) || a < 0.0)
      throw DomainError("generator: damping must be finite and nonnegative");
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
}

void GeneratorOperator::apply_k(const std::vector<Complex>& in,
                                std::vector<Complex>& out) const {
  disc_->apply_laplacian(in, out);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] += in[i];
}

void GeneratorOperator::apply(const StateVector& in, StateVector& out) const {
  if (&in == &out) throw DomainError("generator: in-place apply not supported");
  std::size_t n = check_field(*disc_, in.u, "state u");
  check_field(*disc_, in.v, "state v");
  out.u = in.v;
  apply_k(in.u, out.v);
  for (std::size_t i = 0; i < n; ++i)
    out.v[i] = -out.v[i] - damping_[i] * in.v[i];
  out.t = in.t;
}

void GeneratorOperator::adjoint_apply(const StateVector& in,
                                      StateVector& out) const {
  if (&in == &out) throw DomainError("generator: in-place apply not supported");
  std::size_t n = check_field(*disc_, in.u, "state u");
  check_field(*disc_, in.v, "state v");
  out.u.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.u[i] = -in.v[i];
  apply_k(in.u, out.v);
  for (std::size_t i = 0; i < n; ++i) out.v[i] -= damping_[i] * in.v[i];
  out.t = in.t;
}

Complex GeneratorOperator::x_dot(const StateVector& a,
                                 const StateVector& b) const {
  check_field(*disc_, a.u, "state u");
  check_field(*disc_, b.u, "state u");
  std::vector<Complex> ka;
  apply_k(a.u, ka);
  int nr = disc_->n_r(), nt = disc_->n_theta();
  Complex acc(0.0);
  for (int i = 0; i < nr; ++i) {
    double w = disc_->weight(i);
    Complex row(0.0);
    for (int j = 0; j < nt; ++j) {
      std::size_t idx = static_cast<std::size_t>(i) * nt + j;
      row += std::conj(ka[idx]) * b.u[idx] + std::conj(a.v[idx]) * b.v[idx];
    }
    acc += w * row;
  }
  return acc;
}

double GeneratorOperator::x_norm_sq(const StateVector& a) const {
  check_field(*disc_, a.u, "state u");
  check_field(*disc_, a.v, "state v");
  return disc_->gradient_form(a.u) + disc_->mass_form(a.u) +
         disc_->mass_form(a.v);
}

double GeneratorOperator::x_norm(const StateVector& a) const {
  return std::sqrt(x_norm_sq(a));
}

void GeneratorOperator::resolvent_apply(Complex sigma, const StateVector& rhs,
                                        StateVector& out) const {
  check_field(*disc_, rhs.u, "rhs u");
  check_field(*disc_, rhs.v, "rhs v");
  ShiftSolver(*this, sigma).solve(rhs, out);
}

void GeneratorOperator::adjoint_resolvent_apply(Complex sigma,
                                                const StateVector& rhs,
                                                StateVector& out) const {
  check_field(*disc_, rhs.u, "rhs u");
  check_field(*disc_, rhs.v, "rhs v");
  ShiftSolver(*this, sigma).adjoint_solve(rhs, out);
}

// ---------------------------------------------------------------------------
// Resolvent norm at one frequency
// ---------------------------------------------------------------------------

ResolventEstimate resolvent_norm(const GeneratorOperator& op, double mu,
                                 double tol, int max_iter,
                                 std::uint64_t seed) {
  if (!(tol > 0.0)) throw DomainError("resolvent norm: tolerance not positive");
  if (max_iter < 1) throw DomainError("resolvent norm: max_iter not positive");
  ResolventEstimate est;
  try {
    ShiftSolver solver(op, Complex(0.0, mu));
    std::size_t n = op.field_size();
    Rng rng(mix_seed(seed, mu));
    StateVector z, y, w;
    random_state(rng, n, z);
    double nz = op.x_norm(z);
    if (!(nz > 0.0)) throw NumericsError("resolvent norm: empty start");
    for (std::size_t i = 0; i < n; ++i) {
      z.u[i] /= nz;
      z.v[i] /= nz;
    }
    // power iteration on T T* in the X inner product, T the resolvent:
    // rho -> ||T||^2 and <z, T T* z>_X = ||T* z||_X^2
    double rho_prev = 0.0;
    for (int it = 1; it <= max_iter; ++it) {
      solver.adjoint_solve(z, y);
      double rho = op.x_norm_sq(y);
      if (!std::isfinite(rho) || rho > kNormCeiling * kNormCeiling) {
        est.infinite = true;
        est.value = kInf;
        est.iterations = it;
        return est;
      }
      solver.solve(y, w);
      double nw = op.x_norm(w);
      if (!std::isfinite(nw) || nw > kNormCeiling * kNormCeiling) {
        est.infinite = true;
        est.value = kInf;
        est.iterations = it;
        return est;
      }
      for (std::size_t i = 0; i < n; ++i) {
        z.u[i] = w.u[i] / nw;
        z.v[i] = w.v[i] / nw;
      }
      est.iterations = it;
      est.rel_change = std::abs(rho - rho_prev) / rho;
      if (it > 1 && est.rel_change <= tol) {
        est.value = std::sqrt(rho);
        est.converged = true;
        if (est.value > kNormCeiling) {
          est.infinite = true;
          est.value = kInf;
        }
        return est;
      }
      rho_prev = rho;
    }
    est.value = std::sqrt(rho_prev);
    est.converged = false;
    if (est.value > kNormCeiling) {
      est.infinite = true;
      est.value = kInf;
    }
  } catch (const NumericsError&) {
    est.infinite = true;
    est.converged = true;
    est.value = kInf;
  }
  return est;
}

// ---------------------------------------------------------------------------
// Sweep and classification
// ---------------------------------------------------------------------------

std::string to_string(StabilityClass c) {
  switch (c) {
    case StabilityClass::uniformly_bounded: return "uniformly-bounded";
    case StabilityClass::exponential_growth: return "exponential-growth";
    default: return "inconclusive";
  }
}

namespace {

double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  std::size_t m = x.size();
  if (m < 2) return 0.0;
  long concordant_minus_discordant = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      double s = (x[j] - x[i]) * (y[j] - y[i]);
      if (s > 0) ++concordant_minus_discordant;
      else if (s < 0) --concordant_minus_discordant;
    }
  return 2.0 * concordant_minus_discordant / (double(m) * (m - 1));
}

EnvelopeFit fit_envelope(const std::vector<double>& mu,
                         const std::vector<double>& norm) {
  EnvelopeFit fit;
  std::size_t m = mu.size();
  if (m < 2) return fit;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < m; ++i) {
    double y = std::log(norm[i]);
    sx += mu[i];
    sy += y;
    sxx += mu[i] * mu[i];
    sxy += mu[i] * y;
  }
  double det = m * sxx - sx * sx;
  if (std::abs(det) < 1e-300) return fit;
  fit.c = (m * sxy - sx * sy) / det;
  fit.log_const = (sy - fit.c * sx) / m;
  double ss_res = 0, ss_tot = 0, ybar = sy / m;
  for (std::size_t i = 0; i < m; ++i) {
    double y = std::log(norm[i]);
    double pred = fit.c * mu[i] + fit.log_const;
    ss_res += (y - pred) * (y - pred);
    ss_tot += (y - ybar) * (y - ybar);
  }
  fit.r2 = (ss_tot > 0.0) ? 1.0 - ss_res / ss_tot : 0.0;
  return fit;
}

const char* point_flag(const SweepPoint& p) {
  if (p.infinite) return "infinite";
  if (!p.converged) return "unconverged";
  return "ok";
}

}  // namespace

ResolventSweep resolvent_sweep(const GeneratorOperator& op,
                               const std::vector<double>& mu_grid,
                               const SweepOptions& opts) {
  if (mu_grid.empty()) throw DomainError("sweep: empty frequency grid");
  for (std::size_t i = 1; i < mu_grid.size(); ++i)
    if (!(mu_grid[i] > mu_grid[i - 1]))
      throw DomainError("sweep: frequency grid must be strictly increasing");

  ResolventSweep sweep;
  sweep.points.resize(mu_grid.size());
  parallel_for(mu_grid.size(), [&](std::size_t i) {
    ResolventEstimate est = resolvent_norm(op, mu_grid[i], opts.tol,
                                           opts.max_iter, opts.seed);
    sweep.points[i] = {mu_grid[i], est.value, est.infinite, est.converged};
  });

  bool any_infinite = false, any_unconverged = false;
  std::vector<double> fmu, fnorm;
  for (const SweepPoint& p : sweep.points) {
    if (p.infinite) {
      any_infinite = true;
      continue;
    }
    if (!p.converged) any_unconverged = true;
    fmu.push_back(p.mu);
    fnorm.push_back(p.norm);
  }

  if (any_unconverged)
    sweep.note = "some resolvent estimates did not converge; ";
  if (any_infinite) {
    sweep.classification = StabilityClass::inconclusive;
    sweep.note +=
        "imaginary-axis singularity on the sweep range; boundedness "
        "classification not applicable";
    sweep.max_norm = kInf;
    sweep.peak_ratio = kInf;
    if (!fnorm.empty()) {
      std::vector<double> tmp = fnorm;
      std::nth_element(tmp.begin(), tmp.begin() + tmp.size() / 2, tmp.end());
      sweep.median_norm = tmp[tmp.size() / 2];
    }
    return sweep;
  }

  sweep.max_norm = *std::max_element(fnorm.begin(), fnorm.end());
  {
    std::vector<double> tmp = fnorm;
    std::nth_element(tmp.begin(), tmp.begin() + tmp.size() / 2, tmp.end());
    sweep.median_norm = tmp[tmp.size() / 2];
  }
  sweep.peak_ratio =
      (sweep.median_norm > 0.0) ? sweep.max_norm / sweep.median_norm : kInf;

  // local maxima carry the trend; fall back to every sample when the curve
  // has too few of them
  std::vector<double> pmu, pnorm;
  for (std::size_t i = 1; i + 1 < fnorm.size(); ++i)
    if (fnorm[i] > fnorm[i - 1] && fnorm[i] > fnorm[i + 1]) {
      pmu.push_back(fmu[i]);
      pnorm.push_back(fnorm[i]);
    }
  if (pmu.size() < 4) {
    pmu = fmu;
    pnorm = fnorm;
  }

  sweep.kendall_tau = kendall_tau(pmu, pnorm);
  sweep.growth_fit = fit_envelope(pmu, pnorm);

  if (sweep.peak_ratio <= opts.bounded_factor &&
      sweep.kendall_tau <= opts.tau_max)
    sweep.classification = StabilityClass::uniformly_bounded;
  else if (sweep.growth_fit.c > 0.0 && sweep.growth_fit.r2 >= opts.r2_min)
    sweep.classification = StabilityClass::exponential_growth;
  else
    sweep.classification = StabilityClass::inconclusive;
  return sweep;
}

std::string ResolventSweep::to_json() const {
  nlohmann::json j;
  j["classification"] = decaylab::to_string(classification);
  auto finite_or_null = [](double x) -> nlohmann::json {
    if (std::isfinite(x)) return x;
    return nullptr;
  };
  j["max_norm"] = finite_or_null(max_norm);
  j["median_norm"] = finite_or_null(median_norm);
  j["peak_ratio"] = finite_or_null(peak_ratio);
  j["kendall_tau"] = kendall_tau;
  j["growth_fit"] = {{"c", growth_fit.c},
                     {"log_const", growth_fit.log_const},
                     {"r2", growth_fit.r2}};
  j["note"] = note;
  nlohmann::json pts = nlohmann::json::array();
  for (const SweepPoint& p : points)
    pts.push_back({{"mu", p.mu},
                   {"norm", finite_or_null(p.norm)},
                   {"flag", point_flag(p)}});
  j["points"] = std::move(pts);
  return j.dump(2);
}

void write_sweep_csv(const std::string& path, const ResolventSweep& sweep) {
  CsvWriter csv({"mu", "norm", "flag"});
  for (const SweepPoint& p : sweep.points)
    csv.row({g17(p.mu), g17(p.norm), point_flag(p)});
  csv.save(path);
}

// ---------------------------------------------------------------------------
// Eigenvalues near the imaginary axis
// ---------------------------------------------------------------------------

namespace {

void axpy(Complex alpha, const StateVector& x, StateVector& y) {
  for (std::size_t i = 0; i < x.u.size(); ++i) {
    y.u[i] += alpha * x.u[i];
    y.v[i] += alpha * x.v[i];
  }
}

// X inner product against a basis vector whose K-image is cached
Complex xdot_cached(const Discretization& disc,
                    const std::vector<Complex>& ka, const StateVector& a,
                    const StateVector& b) {
  int nr = disc.n_r(), nt = disc.n_theta();
  Complex acc(0.0);
  for (int i = 0; i < nr; ++i) {
    double w = disc.weight(i);
    Complex row(0.0);
    for (int j = 0; j < nt; ++j) {
      std::size_t idx = static_cast<std::size_t>(i) * nt + j;
      row += std::conj(ka[idx]) * b.u[idx] + std::conj(a.v[idx]) * b.v[idx];
    }
    acc += w * row;
  }
  return acc;
}

struct Candidate {
  Complex lambda;
  double residual;
};

}  // namespace

SpectrumWindowResult spectrum_window(const GeneratorOperator& op,
                                     const SpectrumOptions& opts) {
  if (!(opts.re_lo < opts.re_hi))
    throw DomainError("spectrum window: empty real strip");
  if (!(opts.mu_max >= 0.0))
    throw DomainError("spectrum window: negative frequency range");
  if (opts.n_shifts < 1)
    throw DomainError("spectrum window: need at least one shift");
  if (opts.krylov < 4)
    throw DomainError("spectrum window: Krylov dimension too small");
  if (!(opts.tol > 0.0))
    throw DomainError("spectrum window: tolerance not positive");

  const Discretization& disc = op.disc();
  std::size_t n = op.field_size();
  int m = std::min<int>(opts.krylov, static_cast<int>(2 * n));

  SpectrumWindowResult result;
  std::vector<Candidate> found;

  for (int s = 0; s < opts.n_shifts; ++s) {
    double mu = (opts.n_shifts == 1)
                    ? 0.0
                    : opts.mu_max * s / (opts.n_shifts - 1);
    Complex sigma(opts.shift_re, mu);
    std::unique_ptr<ShiftSolver> solver;
    try {
      solver = std::make_unique<ShiftSolver>(op, sigma);
    } catch (const NumericsError&) {
      result.complete = false;
      result.notes.push_back("shift at frequency " + format_double(mu, 6) +
                             " is singular; skipped");
      continue;
    }

    std::vector<StateVector> basis;
    std::vector<std::vector<Complex>> kimg;  // K u of each basis vector
    basis.reserve(m + 1);
    kimg.reserve(m + 1);

    Rng rng(opts.seed + 0x9E3779B97F4A7C15ULL * (s + 1));
    StateVector v0;
    random_state(rng, n, v0);
    double nv = op.x_norm(v0);
    for (std::size_t i = 0; i < n; ++i) {
      v0.u[i] /= nv;
      v0.v[i] /= nv;
    }
    basis.push_back(std::move(v0));
    {
      std::vector<Complex> ka;
      disc.apply_laplacian(basis.back().u, ka);
      for (std::size_t i = 0; i < n; ++i) ka[i] += basis.back().u[i];
      kimg.push_back(std::move(ka));
    }

    Eigen::MatrixXcd h = Eigen::MatrixXcd::Zero(m + 1, m);
    int steps = 0;
    bool solver_failed = false;
    StateVector w;
    for (int k = 0; k < m; ++k) {
      try {
        solver->solve(basis[k], w);
      } catch (const NumericsError&) {
        solver_failed = true;
        break;
      }
      if (!std::isfinite(op.x_norm_sq(w))) {
        solver_failed = true;
        break;
      }
      // classical Gram-Schmidt, two passes
      for (int pass = 0; pass < 2; ++pass)
        for (int j = 0; j <= k; ++j) {
          Complex hij = xdot_cached(disc, kimg[j], basis[j], w);
          axpy(-hij, basis[j], w);
          h(j, k) += hij;
        }
      double beta = op.x_norm(w);
      steps = k + 1;
      if (!(beta > 1e-12)) break;  // invariant subspace reached
      h(k + 1, k) = beta;
      StateVector vnext = w;
      for (std::size_t i = 0; i < n; ++i) {
        vnext.u[i] /= beta;
        vnext.v[i] /= beta;
      }
      std::vector<Complex> ka;
      disc.apply_laplacian(vnext.u, ka);
      for (std::size_t i = 0; i < n; ++i) ka[i] += vnext.u[i];
      basis.push_back(std::move(vnext));
      kimg.push_back(std::move(ka));
    }
    if (solver_failed && steps == 0) {
      result.complete = false;
      result.notes.push_back("no Krylov progress at frequency " +
                             format_double(mu, 6));
      continue;
    }

    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> eig(
        h.topLeftCorner(steps, steps));
    if (eig.info() != Eigen::Success) {
      result.complete = false;
      result.notes.push_back("Ritz extraction failed at frequency " +
                             format_double(mu, 6));
      continue;
    }

    double spacing =
        (opts.n_shifts > 1) ? opts.mu_max / (opts.n_shifts - 1) : opts.mu_max;
    int accepted = 0;
    StateVector ritz, image;
    for (int l = 0; l < steps; ++l) {
      Complex theta = eig.eigenvalues()(l);
      if (std::abs(theta) < 1e-14) continue;
      Complex lambda = sigma + 1.0 / theta;
      if (lambda.real() < opts.re_lo - 1e-12 ||
          lambda.real() > opts.re_hi + 1e-12)
        continue;
      if (std::abs(lambda.imag()) >
          opts.mu_max + spacing + 1e-12 * (1.0 + opts.mu_max))
        continue;
      ritz.u.assign(n, Complex(0.0));
      ritz.v.assign(n, Complex(0.0));
      ritz.t = 0.0;
      for (int j = 0; j < steps; ++j)
        axpy(eig.eigenvectors()(j, l), basis[j], ritz);
      double nr_ = op.x_norm(ritz);
      if (!(nr_ > 0.0)) continue;
      op.apply(ritz, image);
      axpy(-lambda, ritz, image);
      double residual = op.x_norm(image) / nr_;
      if (residual <= opts.tol) {
        found.push_back({lambda, residual});
        ++accepted;
      }
    }
    if (accepted == 0) {
      result.complete = false;
      result.notes.push_back("no converged eigenvalue at frequency " +
                             format_double(mu, 6));
    }
  }

  // the operator is real, so the spectrum is symmetric under conjugation
  std::size_t direct = found.size();
  for (std::size_t i = 0; i < direct; ++i)
    if (std::abs(found[i].lambda.imag()) > 1e-10)
      found.push_back({std::conj(found[i].lambda), found[i].residual});

  std::sort(found.begin(), found.end(), [](const Candidate& a,
                                           const Candidate& b) {
    if (a.lambda.real() != b.lambda.real())
      return a.lambda.real() > b.lambda.real();
    return a.lambda.imag() < b.lambda.imag();
  });
  for (const Candidate& c : found) {
    bool dup = false;
    for (EigenvalueEntry& kept : result.values)
      if (std::abs(c.lambda - kept.lambda) <=
          1e-7 * (1.0 + std::abs(c.lambda))) {
        dup = true;
        kept.residual = std::min(kept.residual, c.residual);
        break;
      }
    if (!dup) result.values.push_back({c.lambda, c.residual});
  }
  std::sort(result.values.begin(), result.values.end(),
            [](const EigenvalueEntry& a, const EigenvalueEntry& b) {
              if (a.lambda.real() != b.lambda.real())
                return a.lambda.real() > b.lambda.real();
              return a.lambda.imag() < b.lambda.imag();
            });
  for (const EigenvalueEntry& e : result.values) {
    result.abscissa = std::max(result.abscissa, e.lambda.real());
    result.min_abs_real =
        std::min(result.min_abs_real, std::abs(e.lambda.real()));
  }
  return result;
}

void write_spectrum_csv(const std::string& path,
                        const SpectrumWindowResult& result) {
  CsvWriter csv({"re", "im", "residual"});
  for (const EigenvalueEntry& e : result.values)
    csv.row_values({e.lambda.real(), e.lambda.imag(), e.residual});
  csv.save(path);
}

}  // namespace decaylab
