#include "decaylab/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <queue>

namespace decaylab {

// ---------------------------------------------------------------- profiles

std::string to_string(ProfileKind kind) {
  switch (kind) {
    case ProfileKind::Cylindrical: return "cylindrical";
    case ProfileKind::Conic: return "conic";
    case ProfileKind::Power: return "power";
    case ProfileKind::PerturbedCylinder: return "perturbed-cylinder";
    case ProfileKind::Custom: return "custom";
  }
  return "?";
}

ProfileKind profile_kind_from_string(const std::string& s) {
  if (s == "cylindrical") return ProfileKind::Cylindrical;
  if (s == "conic") return ProfileKind::Conic;
  if (s == "power") return ProfileKind::Power;
  if (s == "perturbed-cylinder") return ProfileKind::PerturbedCylinder;
  if (s == "custom") return ProfileKind::Custom;
  throw SchemaError("unknown profile kind: " + s);
}

ScalingProfile ScalingProfile::cylindrical(double window_hi) {
  ScalingProfile p;
  p.kind = ProfileKind::Cylindrical;
  p.window_lo = 0.0;
  p.window_hi = window_hi;
  p.deriv_bound = 1e-12;
  return p;
}

ScalingProfile ScalingProfile::conic(double window_hi) {
  ScalingProfile p;
  p.kind = ProfileKind::Conic;
  p.window_hi = window_hi;
  p.deriv_bound = 1.0 + 1e-9;
  return p;
}

ScalingProfile ScalingProfile::power_law(double pw, double window_hi) {
  if (!(pw > 0.0 && pw <= 1.0))
    throw DomainError("power profile exponent must lie in (0, 1]");
  ScalingProfile p;
  p.kind = ProfileKind::Power;
  p.power = pw;
  p.window_hi = window_hi;
  // |theta'''| at the window start dominates for p < 1
  p.deriv_bound = std::max(1.0, std::abs(pw * (pw - 1.0) * (pw - 2.0))) + 1e-9;
  return p;
}

ScalingProfile ScalingProfile::perturbed_cylinder(double amplitude,
                                                  double frequency,
                                                  double window_hi) {
  if (std::abs(amplitude) >= 2.0)
    throw DomainError("perturbed-cylinder amplitude must satisfy |A| < 2");
  ScalingProfile p;
  p.kind = ProfileKind::PerturbedCylinder;
  p.amplitude = amplitude;
  p.frequency = frequency;
  p.window_lo = 0.0;
  p.window_hi = window_hi;
  double af = std::abs(amplitude);
  double f = std::abs(frequency);
  p.deriv_bound = af * std::max({f, f * f, f * f * f}) + 1e-9;
  return p;
}

bool ScalingProfile::expanding() const {
  switch (kind) {
    case ProfileKind::Conic:
    case ProfileKind::Power:
      return true;
    case ProfileKind::Custom:
      return custom_expanding;
    default:
      return false;
  }
}

double ScalingProfile::min_theta() const {
  switch (kind) {
    case ProfileKind::Cylindrical: return 1.0;
    case ProfileKind::Conic: return window_lo;
    case ProfileKind::Power: return std::pow(window_lo, power);
    case ProfileKind::PerturbedCylinder: return 2.0 - std::abs(amplitude);
    case ProfileKind::Custom: {
      double m = custom_theta(window_lo);
      int n = 1024;
      for (int i = 0; i <= n; ++i) {
        double s = window_lo + (window_hi - window_lo) * i / n;
        m = std::min(m, custom_theta(s));
      }
      return m;
    }
  }
  return 0.0;
}

ProfileEval profile_eval(const ScalingProfile& profile, double s) {
  double tol = 1e-9 * std::max(1.0, std::abs(profile.window_hi));
  if (s < profile.window_lo - tol || s > profile.window_hi + tol)
    throw DomainError("profile evaluation outside declared window: s=" +
                      g17(s));
  s = std::clamp(s, profile.window_lo, profile.window_hi);
  ProfileEval e;
  switch (profile.kind) {
    case ProfileKind::Cylindrical:
      e.theta = 1.0;
      break;
    case ProfileKind::Conic:
      e.theta = s;
      e.d1 = 1.0;
      break;
    case ProfileKind::Power: {
      double p = profile.power;
      e.theta = std::pow(s, p);
      e.d1 = p * std::pow(s, p - 1.0);
      e.d2 = p * (p - 1.0) * std::pow(s, p - 2.0);
      break;
    }
    case ProfileKind::PerturbedCylinder: {
      double a = profile.amplitude, f = profile.frequency;
      e.theta = 2.0 + a * std::cos(f * s);
      e.d1 = -a * f * std::sin(f * s);
      e.d2 = -a * f * f * std::cos(f * s);
      break;
    }
    case ProfileKind::Custom:
      if (!profile.custom_theta)
        throw DomainError("custom profile missing value function");
      e.theta = profile.custom_theta(s);
      e.d1 = profile.custom_d1 ? profile.custom_d1(s) : 0.0;
      e.d2 = profile.custom_d2 ? profile.custom_d2(s) : 0.0;
      break;
  }
  if (!(e.theta > 0.0))
    throw DomainError("profile is nonpositive at s=" + g17(s));
  return e;
}

void validate_profile_derivatives(const ScalingProfile& profile, int samples) {
  double lo = profile.window_lo, hi = profile.window_hi;
  double h = 1e-4 * std::max(1.0, (hi - lo) / samples);
  // keep the 5-point stencil inside the window
  double margin = 2.5 * h;
  double worst = 0.0;
  for (int i = 0; i < samples; ++i) {
    double s = lo + margin + (hi - lo - 2 * margin) * i / (samples - 1);
    auto th = [&](double x) { return profile_eval(profile, x).theta; };
    double f1 = (th(s + h) - th(s - h)) / (2 * h);
    double f2 = (th(s + h) - 2 * th(s) + th(s - h)) / (h * h);
    double f3 =
        (th(s + 2 * h) - 2 * th(s + h) + 2 * th(s - h) - th(s - 2 * h)) /
        (2 * h * h * h);
    worst = std::max({worst, std::abs(f1), std::abs(f2), std::abs(f3)});
  }
  // allow the finite-difference noise floor on top of the declared bound
  double fd_noise = 1e-4 + 1e-10 / (h * h * h);
  if (worst > profile.deriv_bound + fd_noise)
    throw DomainError("sampled profile derivatives exceed declared bound: " +
                      g17(worst) + " > " + g17(profile.deriv_bound));
}

// ---------------------------------------------------------------- model

SurfaceModel::SurfaceModel(ScalingProfile left, ScalingProfile right,
                           double circumference)
    : left_(std::move(left)),
      right_(std::move(right)),
      circumference_(circumference),
      scale_(circumference / kTwoPi) {
  if (!(circumference > 0.0))
    throw DomainError("circumference must be positive");
  if (left_.window_lo > 1.0 || right_.window_lo > 1.0)
    throw DomainError("end profile windows must contain s = 1");

  // quintic blend on [-1, 1]: match value and two derivatives of both ends
  ProfileEval el = profile_eval(left_, 1.0);
  ProfileEval er = profile_eval(right_, 1.0);
  Eigen::Matrix<double, 6, 6> M;
  Eigen::Matrix<double, 6, 1> rhs;
  auto fill = [&M](int row, double r, int order) {
    for (int k = 0; k < 6; ++k) {
      double c = 1.0;
      int e = k;
      for (int d = 0; d < order; ++d) {
        c *= e;
        e -= 1;
      }
      M(row, k) = (e >= 0) ? c * std::pow(r, e) : 0.0;
    }
  };
  fill(0, -1.0, 0);
  fill(1, -1.0, 1);
  fill(2, -1.0, 2);
  fill(3, 1.0, 0);
  fill(4, 1.0, 1);
  fill(5, 1.0, 2);
  // left profile mirrored: d/dr theta_L(-r) = -theta_L'(-r)
  rhs << el.theta, -el.d1, el.d2, er.theta, er.d1, er.d2;
  Eigen::Matrix<double, 6, 1> a = M.fullPivLu().solve(rhs);
  for (int k = 0; k < 6; ++k) spline_[k] = a(k);

  // positivity across the blend
  for (int i = 0; i <= 2000; ++i) {
    double r = -1.0 + 2.0 * i / 2000.0;
    if (!(theta(r) > 0.0))
      throw DomainError("glued profile is nonpositive at r=" + g17(r));
  }
  if (!(left_.min_theta() > 0.0) || !(right_.min_theta() > 0.0))
    throw DomainError("end profile is nonpositive on its window");
}

void SurfaceModel::check_window(double r) const {
  double tol = 1e-9 * std::max({1.0, left_.window_hi, right_.window_hi});
  if (r < -left_.window_hi - tol || r > right_.window_hi + tol)
    throw DomainError("r outside model window: r=" + g17(r));
}

double SurfaceModel::theta(double r) const {
  check_window(r);
  if (r >= 1.0) return profile_eval(right_, r).theta;
  if (r <= -1.0) return profile_eval(left_, -r).theta;
  double v = 0.0;
  for (int k = 5; k >= 0; --k) v = v * r + spline_[k];
  return v;
}

double SurfaceModel::theta_d(double r) const {
  check_window(r);
  if (r >= 1.0) return profile_eval(right_, r).d1;
  if (r <= -1.0) return -profile_eval(left_, -r).d1;
  double v = 0.0;
  for (int k = 5; k >= 1; --k) v = v * r + k * spline_[k];
  return v;
}

double SurfaceModel::theta_dd(double r) const {
  check_window(r);
  if (r >= 1.0) return profile_eval(right_, r).d2;
  if (r <= -1.0) return profile_eval(left_, -r).d2;
  double v = 0.0;
  for (int k = 5; k >= 2; --k) v = v * r + k * (k - 1) * spline_[k];
  return v;
}

MetricData metric_at(const SurfaceModel& model, const Point& p) {
  double th = model.theta_g(p.r);
  MetricData m;
  m.g_rr = 1.0;
  m.g_thth = th * th;
  m.inv_g_rr = 1.0;
  m.inv_g_thth = 1.0 / (th * th);
  m.density = th;
  return m;
}

double cotangent_norm_sq(const SurfaceModel& model, const CotangentPoint& cp) {
  double th = model.theta_g(cp.x.r);
  return cp.xi_r * cp.xi_r + cp.xi_theta * cp.xi_theta / (th * th);
}

CotangentPoint unit_covector(const SurfaceModel& model, const Point& p,
                             double zeta) {
  CotangentPoint cp;
  cp.x = p;
  cp.x.theta = wrap_angle(p.theta);
  cp.xi_r = std::cos(zeta);
  cp.xi_theta = model.theta_g(p.r) * std::sin(zeta);
  return cp;
}

// ---------------------------------------------------------------- fields

double ScalarField::eval_d_r(double r, double theta) const {
  if (d_r) return d_r(r, theta);
  double h = fd_step;
  return (value(r + h, theta) - value(r - h, theta)) / (2 * h);
}

double ScalarField::eval_d_theta(double r, double theta) const {
  if (d_theta) return d_theta(r, theta);
  double h = fd_step;
  return (value(r, theta + h) - value(r, theta - h)) / (2 * h);
}

double ScalarField::eval_d_rr(double r, double theta) const {
  if (d_rr) return d_rr(r, theta);
  double h = std::sqrt(fd_step);
  return (value(r + h, theta) - 2 * value(r, theta) + value(r - h, theta)) /
         (h * h);
}

double ScalarField::eval_d_thth(double r, double theta) const {
  if (d_thth) return d_thth(r, theta);
  double h = std::sqrt(fd_step);
  return (value(r, theta + h) - 2 * value(r, theta) + value(r, theta - h)) /
         (h * h);
}

GradientResult gradient(const SurfaceModel& model, const ScalarField& field,
                        const Point& p) {
  double th = model.theta_g(p.r);
  double fr = field.eval_d_r(p.r, p.theta);
  double ft = field.eval_d_theta(p.r, p.theta);
  GradientResult g;
  g.contra_r = fr;
  g.contra_theta = ft / (th * th);
  g.norm = std::sqrt(fr * fr + ft * ft / (th * th));
  return g;
}

double laplacian(const SurfaceModel& model, const ScalarField& field,
                 const Point& p) {
  double th = model.theta_g(p.r);
  double thd = model.theta_g_d(p.r);
  double fr = field.eval_d_r(p.r, p.theta);
  double frr = field.eval_d_rr(p.r, p.theta);
  double ftt = field.eval_d_thth(p.r, p.theta);
  return -(frr + (thd / th) * fr + ftt / (th * th));
}

// ---------------------------------------------------------------- flow

namespace {

struct FlowState {
  double r, th, xr, xt;
};

FlowState flow_deriv(const SurfaceModel& model, const FlowState& s) {
  double th = model.theta_g(s.r);
  double thd = model.theta_g_d(s.r);
  FlowState d;
  d.r = 2.0 * s.xr;
  d.th = 2.0 * s.xt / (th * th);
  d.xr = 2.0 * s.xt * s.xt * thd / (th * th * th);
  d.xt = 0.0;
  return d;
}

FlowState axpy(const FlowState& a, double c, const FlowState& b) {
  return {a.r + c * b.r, a.th + c * b.th, a.xr + c * b.xr, a.xt + c * b.xt};
}

}  // namespace

FlowResult geodesic_flow(const SurfaceModel& model, const CotangentPoint& start,
                         double T, double dt) {
  if (!(dt > 0.0) || !(T >= 0.0))
    throw DomainError("geodesic_flow: need dt > 0 and T >= 0");
  FlowResult out;
  FlowState s{start.x.r, start.x.theta, start.xi_r, start.xi_theta};
  double H0 = cotangent_norm_sq(model, start);
  double lo = model.r_lo(), hi = model.r_hi();
  auto inside = [&](double r) { return r >= lo && r <= hi; };

  auto record = [&](double t, const FlowState& st) {
    CotangentPoint cp;
    cp.x = {st.r, wrap_angle(st.th)};
    cp.xi_r = st.xr;
    cp.xi_theta = st.xt;
    double H = cotangent_norm_sq(model, cp);
    out.samples.push_back({t, cp, H});
    out.h_drift = std::max(out.h_drift, std::abs(H - H0));
    out.clairaut_drift =
        std::max(out.clairaut_drift, std::abs(st.xt - start.xi_theta));
  };

  record(0.0, s);
  long nsteps = std::lround(T / dt);
  for (long n = 0; n < nsteps; ++n) {
    double t = n * dt;
    FlowState k1 = flow_deriv(model, s);
    FlowState s2 = axpy(s, 0.5 * dt, k1);
    if (!inside(s2.r)) { out.truncated = true; out.exit_time = t; break; }
    FlowState k2 = flow_deriv(model, s2);
    FlowState s3 = axpy(s, 0.5 * dt, k2);
    if (!inside(s3.r)) { out.truncated = true; out.exit_time = t; break; }
    FlowState k3 = flow_deriv(model, s3);
    FlowState s4 = axpy(s, dt, k3);
    if (!inside(s4.r)) { out.truncated = true; out.exit_time = t; break; }
    FlowState k4 = flow_deriv(model, s4);
    FlowState next = s;
    next.r += dt / 6.0 * (k1.r + 2 * k2.r + 2 * k3.r + k4.r);
    next.th += dt / 6.0 * (k1.th + 2 * k2.th + 2 * k3.th + k4.th);
    next.xr += dt / 6.0 * (k1.xr + 2 * k2.xr + 2 * k3.xr + k4.xr);
    next.xt += dt / 6.0 * (k1.xt + 2 * k2.xt + 2 * k3.xt + k4.xt);
    if (!inside(next.r)) { out.truncated = true; out.exit_time = t + dt; break; }
    s = next;
    record((n + 1) * dt, s);
  }
  if (out.truncated && !out.samples.empty() && out.exit_time == 0.0)
    out.exit_time = out.samples.back().t;
  return out;
}

// ---------------------------------------------------------------- distance

DistanceGraph::DistanceGraph(const SurfaceModel& model, double r_lo,
                             double r_hi, int n_r, int n_theta)
    : model_(model), r_lo_(r_lo), r_hi_(r_hi), n_r_(n_r), n_theta_(n_theta) {
  if (n_r < 2 || n_theta < 4)
    throw DomainError("distance grid too small");
  if (!(r_hi > r_lo))
    throw DomainError("distance region empty");
  if (r_lo < model.r_lo() || r_hi > model.r_hi())
    throw DomainError("distance region exceeds model window");
  dr_ = (r_hi_ - r_lo_) / (n_r_ - 1);
  dth_ = kTwoPi / n_theta_;
  offsets_ = {{1, 0}, {0, 1}, {1, 1}, {1, -1}, {1, 2}, {2, 1}, {1, -2}, {2, -1}};
  adj_.assign(static_cast<std::size_t>(n_r_) * n_theta_, {});
  for (int ir = 0; ir < n_r_; ++ir) {
    for (int it = 0; it < n_theta_; ++it) {
      Point a = node_point(ir, it);
      for (auto [oi, oj] : offsets_) {
        int jr = ir + oi;
        if (jr < 0 || jr >= n_r_) continue;
        int jt = (it + oj % n_theta_ + n_theta_) % n_theta_;
        Point b = node_point(jr, jt);
        // shortest representative of the angular difference
        b.theta = a.theta + oj * dth_;
        double len = segment_length(a, b);
        max_edge_ = std::max(max_edge_, len);
        adj_[index(ir, it)].push_back({index(jr, jt), len});
        adj_[index(jr, jt)].push_back({index(ir, it), len});
      }
    }
  }
}

Point DistanceGraph::node_point(int ir, int it) const {
  return {r_lo_ + ir * dr_, wrap_angle(it * dth_)};
}

double DistanceGraph::segment_length(const Point& a, const Point& b) const {
  double dr = b.r - a.r;
  double dth = b.theta - a.theta;
  auto f = [&](double s) {
    double th = model_.theta_g(a.r + s * dr);
    return std::sqrt(dr * dr + th * th * dth * dth);
  };
  return (f(0.0) + 4.0 * f(0.5) + f(1.0)) / 6.0;
}

std::vector<double> DistanceGraph::run_dijkstra(
    const std::vector<std::pair<int, double>>& seeds) const {
  std::vector<double> dist(adj_.size(),
                           std::numeric_limits<double>::infinity());
  using Entry = std::pair<double, int>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> pq;
  for (auto [node, d] : seeds) {
    if (d < dist[node]) {
      dist[node] = d;
      pq.push({d, node});
    }
  }
  while (!pq.empty()) {
    auto [d, u] = pq.top();
    pq.pop();
    if (d > dist[u]) continue;
    for (auto [v, w] : adj_[u]) {
      double nd = d + w;
      if (nd < dist[v]) {
        dist[v] = nd;
        pq.push({nd, v});
      }
    }
  }
  return dist;
}

namespace {

// anchor nodes around an off-lattice point: the 4x4 block surrounding it
std::vector<std::pair<int, int>> anchor_cells(double r, double th, double r_lo,
                                              double dr, double dth, int n_r,
                                              int n_theta) {
  int ir0 = static_cast<int>(std::floor((r - r_lo) / dr));
  int it0 = static_cast<int>(std::floor(th / dth));
  std::vector<std::pair<int, int>> cells;
  for (int di = -1; di <= 2; ++di) {
    int ir = std::clamp(ir0 + di, 0, n_r - 1);
    for (int dj = -1; dj <= 2; ++dj) {
      int it = ((it0 + dj) % n_theta + n_theta) % n_theta;
      cells.push_back({ir, it});
    }
  }
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  return cells;
}

}  // namespace

double DistanceGraph::distance(const Point& a, const Point& b) const {
  Point wa{a.r, wrap_angle(a.theta)};
  Point wb{b.r, wrap_angle(b.theta)};
  for (const Point& p : {wa, wb})
    if (p.r < r_lo_ - 1e-12 || p.r > r_hi_ + 1e-12)
      throw DomainError("distance query outside graph region");
  std::vector<std::pair<int, double>> seeds;
  for (auto [ir, it] : anchor_cells(wa.r, wa.theta, r_lo_, dr_, dth_, n_r_,
                                    n_theta_)) {
    Point n = node_point(ir, it);
    n.theta = wa.theta + angle_diff(n.theta, wa.theta);
    seeds.push_back({index(ir, it), segment_length(wa, n)});
  }
  std::vector<double> dist = run_dijkstra(seeds);
  double best = std::numeric_limits<double>::infinity();
  for (auto [ir, it] : anchor_cells(wb.r, wb.theta, r_lo_, dr_, dth_, n_r_,
                                    n_theta_)) {
    Point n = node_point(ir, it);
    n.theta = wb.theta + angle_diff(n.theta, wb.theta);
    best = std::min(best, dist[index(ir, it)] + segment_length(wb, n));
  }
  return best;
}

std::vector<double> DistanceGraph::multi_source(
    const std::vector<Point>& sources) const {
  std::vector<std::pair<int, double>> seeds;
  for (const Point& src : sources) {
    Point w{src.r, wrap_angle(src.theta)};
    if (w.r < r_lo_ - 1e-12 || w.r > r_hi_ + 1e-12)
      throw DomainError("distance source outside graph region");
    for (auto [ir, it] :
         anchor_cells(w.r, w.theta, r_lo_, dr_, dth_, n_r_, n_theta_)) {
      Point n = node_point(ir, it);
      n.theta = w.theta + angle_diff(n.theta, w.theta);
      seeds.push_back({index(ir, it), segment_length(w, n)});
    }
  }
  return run_dijkstra(seeds);
}

double distance(const SurfaceModel& model, const Point& a, const Point& b,
                const DistanceOptions& opts) {
  double r_lo = opts.r_lo, r_hi = opts.r_hi;
  if (std::isnan(r_lo) || std::isnan(r_hi)) {
    double lo = std::min(a.r, b.r), hi = std::max(a.r, b.r);
    double pad = 2.0 + 0.5 * (hi - lo);
    r_lo = std::max(model.r_lo(), lo - pad);
    r_hi = std::min(model.r_hi(), hi + pad);
  }
  DistanceGraph graph(model, r_lo, r_hi, opts.n_r, opts.n_theta);
  return graph.distance(a, b);
}

}  // namespace decaylab
