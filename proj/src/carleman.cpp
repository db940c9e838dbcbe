#include "decaylab/carleman.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <utility>

#include <Eigen/Dense>
#include <json.hpp>

namespace decaylab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// parallel_for with exception capture: worker exceptions are stashed per
// row and rethrown (first row wins) after the joins, so throwing field
// evaluations stay safe under threading
void run_rows(std::size_t n, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errs(n);
  parallel_for(n, [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errs[i] = std::current_exception();
    }
  });
  for (std::size_t i = 0; i < n; ++i)
    if (errs[i]) std::rethrow_exception(errs[i]);
}

double point_segment_dist(double px, double py, double ax, double ay,
                          double bx, double by) {
  double abx = bx - ax, aby = by - ay;
  double len2 = abx * abx + aby * aby;
  double t = 0.0;
  if (len2 > 0.0) t = ((px - ax) * abx + (py - ay) * aby) / len2;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * abx), py - (ay + t * aby));
}

double orient2(double ax, double ay, double bx, double by, double cx,
               double cy) {
  return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
}

// proper crossings only: touching or collinear contact leaves an endpoint
// of one segment at distance zero from the other, which the caller's
// endpoint distances already detect
bool segments_cross(double ax, double ay, double bx, double by, double cx,
                    double cy, double dx, double dy) {
  double o1 = orient2(ax, ay, bx, by, cx, cy);
  double o2 = orient2(ax, ay, bx, by, dx, dy);
  double o3 = orient2(cx, cy, dx, dy, ax, ay);
  double o4 = orient2(cx, cy, dx, dy, bx, by);
  return o1 * o2 < 0.0 && o3 * o4 < 0.0;
}

double segment_segment_dist(double ax, double ay, double bx, double by,
                            double cx, double cy, double dx, double dy) {
  if (segments_cross(ax, ay, bx, by, cx, cy, dx, dy)) return 0.0;
  double d1 = point_segment_dist(ax, ay, cx, cy, dx, dy);
  double d2 = point_segment_dist(bx, by, cx, cy, dx, dy);
  double d3 = point_segment_dist(cx, cy, ax, ay, bx, by);
  double d4 = point_segment_dist(dx, dy, ax, ay, bx, by);
  return std::min(std::min(d1, d2), std::min(d3, d4));
}

// A relocation path: the composed move chain walking `a` to `b`, together
// with its support capsule (the segment fattened by the move support).
struct MoveChain {
  std::vector<DiffeoMove> moves;
  double ax = 0.0, ay = 0.0, bx = 0.0, by = 0.0;
  double radius = 0.0;

  bool contains(double x, double y) const {
    return point_segment_dist(x, y, ax, ay, bx, by) <= radius;
  }
  void apply(double& x, double& y, std::array<double, 4>* jac) const {
    if (jac) {
      for (const auto& m : moves) m.apply_with_jacobian(x, y, *jac);
    } else {
      for (const auto& m : moves) m.apply(x, y);
    }
  }
  double x_mid() const { return 0.5 * (ax + bx); }
  double x_span() const { return 0.5 * std::abs(bx - ax) + radius; }
};

MoveChain build_move_chain(double fx, double fy, double tx, double ty,
                           double inner, double outer) {
  MoveChain c;
  c.moves = make_move_chain(fx, fy, tx, ty, inner, outer);
  c.ax = fx;
  c.ay = fy;
  c.bx = tx;
  c.by = ty;
  c.radius = outer;
  return c;
}

// chart-distance ball probe: damping level at the center and on two rings,
// offsets taken with the warp frozen at the center
bool ball_ok(const SurfaceModel& model, const DampingField& damping,
             double two_beta, const Point& center, double radius) {
  if (center.r < model.r_lo() || center.r > model.r_hi()) return false;
  double tg = model.theta_g(center.r);
  const double tol = 1e-12;
  if (damping.value(center.r, center.theta) < two_beta - tol) return false;
  for (double frac : {0.55, 1.0}) {
    double rho = frac * radius;
    for (int a = 0; a < 16; ++a) {
      double ang = kTwoPi * a / 16.0;
      double r = center.r + rho * std::cos(ang);
      double th = center.theta + rho * std::sin(ang) / tg;
      if (r < model.r_lo() || r > model.r_hi()) return false;
      if (damping.value(r, wrap_angle(th)) < two_beta - tol) return false;
    }
  }
  return true;
}

// two-piece collar ramp of the chart-edge distance d: zero collar, a low
// shelf reaching 1/12, then the rise to 1
struct Collar {
  double eps = 0.05;

  double value(double d) const {
    if (d <= eps) return 0.0;
    if (d <= 2.0 * eps) return smoothstep5((d - eps) / eps) / 12.0;
    if (d <= 3.0 * eps)
      return 1.0 / 12.0 + (11.0 / 12.0) * smoothstep5((d - 2.0 * eps) / eps);
    return 1.0;
  }
  double deriv(double d) const {
    if (d <= eps || d >= 3.0 * eps) return 0.0;
    if (d <= 2.0 * eps) return smoothstep5_d((d - eps) / eps) / (12.0 * eps);
    return (11.0 / 12.0) * smoothstep5_d((d - 2.0 * eps) / eps) / eps;
  }
};

// ------------------------------------------------------------ cylindrical

struct CylFrame {
  int sgn = 1;
  double theta_gc = 1.0;
  double r0 = 0.0;  // radial phase origin
  double S = 0.0;   // ladder quarter-period scale
  std::vector<MoveChain> relocation;  // applied first
  std::vector<double> relocation_anchor;
  std::vector<MoveChain> stagger;  // applied second
  std::vector<double> stagger_anchor;
};

class CylindricalWeight final : public WeightField {
 public:
  explicit CylindricalWeight(CylFrame f) : f_(std::move(f)) {}

  double value(const Point& p) const override {
    double th = 0.0, s = 0.0;
    map_point(p, th, s, nullptr);
    return base_value(th, s);
  }

  WeightGrad gradient(const Point& p) const override {
    double th = 0.0, s = 0.0;
    std::array<double, 4> jac{1.0, 0.0, 0.0, 1.0};
    map_point(p, th, s, &jac);
    double bth = 0.0, bs = 0.0;
    base_grad(th, s, bth, bs);
    double d_th = bth * jac[0] + bs * jac[2];
    double d_s = bth * jac[1] + bs * jac[3];
    return {f_.sgn * d_s, d_th};
  }

 private:
  void map_point(const Point& p, double& th, double& s,
                 std::array<double, 4>* jac) const {
    th = p.theta;
    s = f_.sgn * p.r;
    apply_stage(f_.relocation, f_.relocation_anchor, th, s, jac);
    apply_stage(f_.stagger, f_.stagger_anchor, th, s, jac);
  }

  void apply_stage(const std::vector<MoveChain>& stage,
                   const std::vector<double>& anchors, double& th, double& s,
                   std::array<double, 4>* jac) const {
    for (std::size_t i = 0; i < stage.size(); ++i) {
      double ux = f_.theta_gc * angle_diff(th, anchors[i]);
      double uy = s;
      if (!stage[i].contains(ux, uy)) continue;
      if (jac) {
        std::array<double, 4> jf{1.0, 0.0, 0.0, 1.0};
        stage[i].apply(ux, uy, &jf);
        double a00 = jf[0], a01 = jf[1] / f_.theta_gc;
        double a10 = f_.theta_gc * jf[2], a11 = jf[3];
        double a = (*jac)[0], b = (*jac)[1], c = (*jac)[2], e = (*jac)[3];
        (*jac)[0] = a00 * a + a01 * c;
        (*jac)[1] = a00 * b + a01 * e;
        (*jac)[2] = a10 * a + a11 * c;
        (*jac)[3] = a10 * b + a11 * e;
      } else {
        stage[i].apply(ux, uy, nullptr);
      }
      th = wrap_angle(anchors[i] + ux / f_.theta_gc);
      s = uy;
    }
  }

  double base_value(double th, double s) const {
    double p0 = 2.0 + std::cos(th);
    double p1 = 2.0 + std::cos(kPi * (s - f_.r0) / (6.0 * f_.S));
    return 1.0 + (p0 * p1 - 1.0) / 4.0;
  }
  void base_grad(double th, double s, double& d_th, double& d_s) const {
    double arg = kPi * (s - f_.r0) / (6.0 * f_.S);
    double p0 = 2.0 + std::cos(th);
    double p1 = 2.0 + std::cos(arg);
    d_th = -std::sin(th) * p1 / 4.0;
    d_s = -p0 * std::sin(arg) * (kPi / (6.0 * f_.S)) / 4.0;
  }

  CylFrame f_;
};

// -------------------------------------------------------------- expanding

struct SubconicShared {
  const SurfaceModel* model = nullptr;
  int sgn = 1;
  double A = 0.75 * kPi;  // chart angular half-width
  double q = 0.0;         // flattened cell parameter
  double eps = 0.05;
  Collar collar;
  std::vector<SubconicPatch> patches;

  double thD(double s) const { return A * model->theta_g(sgn * s); }
  double thD_d(double s) const {
    return A * sgn * model->theta_g_d(sgn * s);
  }
  bool in_patch(double s, double theta) const {
    for (const auto& p : patches) {
      if (s < p.s_lo - 1e-12 || s > p.s_hi + 1e-12) continue;
      double width = p.theta_hi - p.theta_lo;
      if (width >= kTwoPi - 1e-12) return true;
      double mid = 0.5 * (p.theta_lo + p.theta_hi);
      if (std::abs(angle_diff(theta, mid)) <= 0.5 * width + 1e-12) return true;
    }
    return false;
  }
};

struct SubChartData {
  int chart = 0;       // 0 or 1
  double center = 0.0;  // chart center angle
  std::vector<MoveChain> chains;  // sorted by x_mid in flattened coords
  double max_span = 0.0;          // largest chain x-extent (for the lookup)
};

class SubconicChartWeight final : public WeightField {
 public:
  SubconicChartWeight(std::shared_ptr<const SubconicShared> sh,
                      SubChartData chart)
      : sh_(std::move(sh)), ch_(std::move(chart)) {}

  double value(const Point& p) const override {
    double s = 0.0, y = 0.0;
    if (!prepare(p, s, y)) return 0.0;
    double w = 0.0;
    chart_eval(s, p.theta, &w, nullptr, nullptr);
    return sh_->collar.value(1.0 - std::abs(y)) * w;
  }

  WeightGrad gradient(const Point& p) const override {
    double s = 0.0, y = 0.0;
    if (!prepare(p, s, y)) return {0.0, 0.0};
    double w = 0.0, wy = 0.0, ws = 0.0;
    chart_eval(s, p.theta, &w, &wy, &ws);
    double d = 1.0 - std::abs(y);
    double chi = sh_->collar.value(d);
    double chi_y = (y >= 0.0 ? -1.0 : 1.0) * sh_->collar.deriv(d);
    double d_r = sh_->sgn * chi * ws;
    double d_theta = (chi * wy + chi_y * w) / sh_->A;
    return {d_r, d_theta};
  }

  // cosine-lattice field before the collar, with chart-frame partials;
  // feeds the gradient-floor sample
  void pre_collar(double s, double theta, double* val, double* d_y,
                  double* d_s) const {
    chart_eval(s, theta, val, d_y, d_s);
  }
  double chart_y(double theta) const {
    return angle_diff(theta, ch_.center) / sh_->A;
  }

 private:
  bool prepare(const Point& p, double& s, double& y) const {
    s = sh_->sgn * p.r;
    y = chart_y(p.theta);
    if (std::abs(y) >= 1.0 - sh_->eps) return false;  // collar zero zone
    if (!sh_->in_patch(s, p.theta))
      throw DomainError(
          "chart weight evaluated outside its materialised patches at (r=" +
          g17(p.r) + ", theta=" + g17(p.theta) + ")");
    return true;
  }

  void chart_eval(double s, double theta, double* val, double* d_y,
                  double* d_s) const {
    double y = chart_y(theta);
    double thd = sh_->thD(s);
    double thdd = sh_->thD_d(s);
    double z1 = thd * y, z2 = s;
    std::array<double, 4> jac{1.0, 0.0, 0.0, 1.0};
    if (!ch_.chains.empty()) {
      double lo = z1 - ch_.max_span, hi = z1 + ch_.max_span;
      auto first = std::lower_bound(
          ch_.chains.begin(), ch_.chains.end(), lo,
          [](const MoveChain& c, double v) { return c.x_mid() < v; });
      for (auto it = first; it != ch_.chains.end() && it->x_mid() <= hi; ++it) {
        if (it->contains(z1, z2)) it->apply(z1, z2, d_y ? &jac : nullptr);
      }
    }
    double q = sh_->q;
    double arg_s = kPi * (z2 - 2.0 * q * ch_.chart) / (4.0 * q);
    double arg_a = kPi * z1 / (2.0 * q);
    double cs = std::cos(arg_s), ca = std::cos(arg_a);
    *val = cs * ca + 2.0;
    if (d_y) {
      double dz1 = -cs * std::sin(arg_a) * (kPi / (2.0 * q));
      double dz2 = -std::sin(arg_s) * ca * (kPi / (4.0 * q));
      double g1 = dz1 * jac[0] + dz2 * jac[2];
      double g2 = dz1 * jac[1] + dz2 * jac[3];
      *d_y = g1 * thd;
      *d_s = g1 * thdd * y + g2;
    }
  }

  std::shared_ptr<const SubconicShared> sh_;
  SubChartData ch_;
};

// ------------------------------------------------------------------ glue

struct CutoffRamp {  // descent 1 -> 0 across [R + 4I, R + 5I]
  double R = 0.0, I = 1.0;
  double value(double t) const {
    if (t <= R + 4.0 * I) return 1.0;
    if (t >= R + 5.0 * I) return 0.0;
    return 1.0 - smoothstep5((t - R - 4.0 * I) / I);
  }
  double deriv(double t) const {
    if (t <= R + 4.0 * I || t >= R + 5.0 * I) return 0.0;
    return -smoothstep5_d((t - R - 4.0 * I) / I) / I;
  }
};

struct CutoffRise {  // 0 -> 1/36 across [R + I, R + 2I], then to 1 at R + 3I
  double R = 0.0, I = 1.0;
  double value(double t) const {
    if (t <= R + I) return 0.0;
    if (t <= R + 2.0 * I)
      return smoothstep5((t - R - I) / I) / 36.0;
    if (t <= R + 3.0 * I)
      return 1.0 / 36.0 +
             (35.0 / 36.0) * smoothstep5((t - R - 2.0 * I) / I);
    return 1.0;
  }
  double deriv(double t) const {
    if (t <= R + I || t >= R + 3.0 * I) return 0.0;
    if (t <= R + 2.0 * I) return smoothstep5_d((t - R - I) / I) / (36.0 * I);
    return (35.0 / 36.0) * smoothstep5_d((t - R - 2.0 * I) / I) / I;
  }
};

// compact-core weight: radial ramp with a dimple anchored in a damped
// ball, rescaled into [1/3, 2/3], all times the outer descent cutoff
class GluedCore final : public WeightField {
 public:
  struct Data {
    CutoffRamp chi0;
    double band_lo = 0.0, band_hi = 1.0;
    Point x0;
    double theta0 = 1.0;     // warp frozen at the ball center
    double depth = 0.0;
    double dimple_in = 0.0, dimple_out = 0.0;
    double f_min = 0.0, f_max = 1.0;
  };
  explicit GluedCore(Data d) : d_(std::move(d)) {}

  double raw(double r, double theta) const {
    double f = (r - d_.band_lo) / (d_.band_hi - d_.band_lo);
    return f - d_.depth * plateau(dist(r, theta), d_.dimple_in, d_.dimple_out);
  }

  double inner_value(double r, double theta) const {
    return 1.0 / 3.0 +
           (raw(r, theta) - d_.f_min) / (3.0 * (d_.f_max - d_.f_min));
  }

  double value(const Point& p) const override {
    double c = d_.chi0.value(std::abs(p.r));
    if (c == 0.0) return 0.0;
    return c * inner_value(p.r, p.theta);
  }

  WeightGrad gradient(const Point& p) const override {
    double t = std::abs(p.r);
    double c = d_.chi0.value(t);
    if (c == 0.0) return {0.0, 0.0};
    double scale = 1.0 / (3.0 * (d_.f_max - d_.f_min));
    double fr = 1.0 / (d_.band_hi - d_.band_lo);
    double fth = 0.0;
    double dd = dist(p.r, p.theta);
    if (dd > 1e-12) {
      double pd = plateau_d(dd, d_.dimple_in, d_.dimple_out);
      if (pd != 0.0) {
        double ad = angle_diff(p.theta, d_.x0.theta);
        fr += -d_.depth * pd * (p.r - d_.x0.r) / dd;
        fth += -d_.depth * pd * d_.theta0 * d_.theta0 * ad / dd;
      }
    }
    double val = inner_value(p.r, p.theta);
    double sign_r = p.r >= 0.0 ? 1.0 : -1.0;
    double cd = d_.chi0.deriv(t) * sign_r;
    return {cd * val + c * scale * fr, c * scale * fth};
  }

 private:
  double dist(double r, double theta) const {
    double ad = angle_diff(theta, d_.x0.theta);
    return std::hypot(r - d_.x0.r, d_.theta0 * ad);
  }
  Data d_;
};

// end weight behind the slow rise cutoff; identically zero (value and
// gradient) wherever the cutoff vanishes, so far ends stay untouched
class GluedEnd final : public WeightField {
 public:
  GluedEnd(CutoffRise chi1, int sgn, std::shared_ptr<const WeightField> w)
      : chi1_(chi1), sgn_(sgn), w_(std::move(w)) {}

  double value(const Point& p) const override {
    double c = chi1_.value(sgn_ * p.r);
    if (c == 0.0) return 0.0;
    return c * w_->value(p);
  }
  WeightGrad gradient(const Point& p) const override {
    double s = sgn_ * p.r;
    double c = chi1_.value(s);
    if (c == 0.0) return {0.0, 0.0};
    WeightGrad g = w_->gradient(p);
    double cd = chi1_.deriv(s);
    return {sgn_ * cd * w_->value(p) + c * g.d_r, c * g.d_theta};
  }

 private:
  CutoffRise chi1_;
  int sgn_;
  std::shared_ptr<const WeightField> w_;
};

// ------------------------------------------------------------ sampled io

class SampledWeight final : public WeightField {
 public:
  SampledWeight(ScanGrid grid, std::vector<double> vals,
                std::vector<double> gr, std::vector<double> gt)
      : grid_(grid),
        vals_(std::move(vals)),
        gr_(std::move(gr)),
        gt_(std::move(gt)) {}

  double value(const Point& p) const override { return interp(vals_, p); }
  WeightGrad gradient(const Point& p) const override {
    return {interp(gr_, p), interp(gt_, p)};
  }

 private:
  static double snap(double t) {
    double r = std::round(t);
    return std::abs(t - r) < 1e-9 ? r : t;
  }

  double interp(const std::vector<double>& a, const Point& p) const {
    int nr = grid_.n_r, nt = grid_.n_theta;
    double tr = snap((p.r - grid_.r_lo) / (grid_.r_hi - grid_.r_lo) *
                     (nr - 1));
    tr = std::clamp(tr, 0.0, double(nr - 1));
    int i0 = std::min(int(tr), nr - 2);
    double fr = tr - i0;
    int j0 = 0, j1 = 0;
    double ft = 0.0;
    if (grid_.full_circle()) {
      double tt = snap(wrap_angle(p.theta - grid_.theta_lo) / kTwoPi * nt);
      if (tt >= nt) tt -= nt;
      j0 = std::min(int(tt), nt - 1);
      ft = tt - j0;
      j1 = (j0 + 1) % nt;
    } else {
      double tt = snap((p.theta - grid_.theta_lo) /
                       (grid_.theta_hi - grid_.theta_lo) * (nt - 1));
      tt = std::clamp(tt, 0.0, double(nt - 1));
      j0 = std::min(int(tt), nt - 2);
      ft = tt - j0;
      j1 = j0 + 1;
    }
    auto at = [&](int i, int j) { return a[std::size_t(i) * nt + j]; };
    double v0 = at(i0, j0) * (1.0 - ft) + at(i0, j1) * ft;
    double v1 = at(i0 + 1, j0) * (1.0 - ft) + at(i0 + 1, j1) * ft;
    return v0 * (1.0 - fr) + v1 * fr;
  }

  ScanGrid grid_;
  std::vector<double> vals_, gr_, gt_;
};

const nlohmann::json& need(const nlohmann::json& j, const char* key) {
  if (!j.contains(key))
    throw SchemaError(std::string("weight family file missing field '") +
                      key + "'");
  return j.at(key);
}

}  // namespace

// ---------------------------------------------------------------- fields

std::array<double, 3> WeightField::hessian(const Point& p) const {
  double h = fd_step();
  WeightGrad rp = gradient({p.r + h, p.theta});
  WeightGrad rm = gradient({p.r - h, p.theta});
  WeightGrad tp = gradient({p.r, wrap_angle(p.theta + h)});
  WeightGrad tm = gradient({p.r, wrap_angle(p.theta - h)});
  double d_rr = (rp.d_r - rm.d_r) / (2.0 * h);
  double d_rt = 0.5 * ((rp.d_theta - rm.d_theta) / (2.0 * h) +
                       (tp.d_r - tm.d_r) / (2.0 * h));
  double d_tt = (tp.d_theta - tm.d_theta) / (2.0 * h);
  return {d_rr, d_rt, d_tt};
}

AnalyticWeight::AnalyticWeight(Fn value, Fn d_r, Fn d_theta)
    : value_(std::move(value)), d_r_(std::move(d_r)),
      d_theta_(std::move(d_theta)) {
  if (!value_ || !d_r_ || !d_theta_)
    throw DomainError("analytic weight needs value and both gradients");
}

double metric_gradient_norm(const SurfaceModel& model, const WeightField& w,
                            const Point& p) {
  WeightGrad g = w.gradient(p);
  double tg = model.theta_g(p.r);
  return std::hypot(g.d_r, g.d_theta / tg);
}

// ---------------------------------------------------------------- moves

DiffeoMove::DiffeoMove(double cx, double cy, double inner, double outer,
                       double vx, double vy)
    : cx_(cx), cy_(cy), inner_(inner), outer_(outer), vx_(vx), vy_(vy) {
  if (!(outer > inner && inner > 0.0))
    throw DomainError("diffeomorphism move needs 0 < inner < outer");
  double lip = std::hypot(vx, vy) * 1.875 / (outer - inner);
  if (!(lip <= 0.9))
    throw ConstructionError(
        "diffeomorphism move displacement too large for its support: "
        "perturbation Lipschitz bound " +
        g17(lip) + " exceeds 0.9");
}

void DiffeoMove::apply(double& x, double& y) const {
  double dx = x - cx_, dy = y - cy_;
  double d = std::hypot(dx, dy);
  if (d >= outer_) return;
  double s = 1.0;
  if (d > inner_) s = 1.0 - smoothstep5((d - inner_) / (outer_ - inner_));
  x += s * vx_;
  y += s * vy_;
}

void DiffeoMove::apply_with_jacobian(double& x, double& y,
                                     std::array<double, 4>& jac) const {
  double dx = x - cx_, dy = y - cy_;
  double d = std::hypot(dx, dy);
  if (d >= outer_) return;
  if (d <= inner_) {
    x += vx_;
    y += vy_;
    return;
  }
  double t = (d - inner_) / (outer_ - inner_);
  double s = 1.0 - smoothstep5(t);
  double sd = -smoothstep5_d(t) / (outer_ - inner_);
  double gx = sd * dx / d, gy = sd * dy / d;
  double m00 = 1.0 + vx_ * gx, m01 = vx_ * gy;
  double m10 = vy_ * gx, m11 = 1.0 + vy_ * gy;
  double a = jac[0], b = jac[1], c = jac[2], e = jac[3];
  jac[0] = m00 * a + m01 * c;
  jac[1] = m00 * b + m01 * e;
  jac[2] = m10 * a + m11 * c;
  jac[3] = m10 * b + m11 * e;
  x += s * vx_;
  y += s * vy_;
}

double DiffeoMove::det_jacobian(double x, double y) const {
  double dx = x - cx_, dy = y - cy_;
  double d = std::hypot(dx, dy);
  if (d >= outer_ || d <= inner_) return 1.0;
  double t = (d - inner_) / (outer_ - inner_);
  double sd = -smoothstep5_d(t) / (outer_ - inner_);
  return 1.0 + sd * (vx_ * dx + vy_ * dy) / d;
}

bool DiffeoMove::identity_at(double x, double y) const {
  return std::hypot(x - cx_, y - cy_) >= outer_;
}

std::vector<DiffeoMove> make_move_chain(double from_x, double from_y,
                                        double to_x, double to_y, double inner,
                                        double outer) {
  if (!(outer > inner && inner > 0.0))
    throw DomainError("move chain needs 0 < inner < outer");
  double dx = to_x - from_x, dy = to_y - from_y;
  double dist = std::hypot(dx, dy);
  std::vector<DiffeoMove> chain;
  if (dist == 0.0) return chain;
  double step_max = 0.95 * 0.48 * (outer - inner);
  int n = std::max(1, int(std::ceil(dist / step_max)));
  double vx = dx / n, vy = dy / n;
  chain.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i)
    chain.emplace_back(from_x + i * vx, from_y + i * vy, inner, outer, vx, vy);
  return chain;
}

// ---------------------------------------------------------------- family

ScanGrid ScanGrid::subsample(int stride_r, int stride_theta) const {
  if (stride_r < 1 || stride_theta < 1)
    throw SchemaError("subsample strides must be positive");
  if ((n_r - 1) % stride_r != 0)
    throw SchemaError("radial stride must divide the scan interval count");
  ScanGrid out = *this;
  out.n_r = (n_r - 1) / stride_r + 1;
  if (full_circle()) {
    if (n_theta % stride_theta != 0)
      throw SchemaError("angular stride must divide the angular node count");
    out.n_theta = n_theta / stride_theta;
  } else {
    if ((n_theta - 1) % stride_theta != 0)
      throw SchemaError("angular stride must divide the scan interval count");
    out.n_theta = (n_theta - 1) / stride_theta + 1;
  }
  return out;
}

CompatibilityReport compatibility_check(const SurfaceModel& model,
                                        const WeightFamily& family,
                                        const ScanGrid& grid,
                                        int max_recorded) {
  if (family.weights.empty())
    throw DomainError("compatibility check needs at least one weight");
  if (!family.damping)
    throw DomainError(
        "compatibility check needs the family's damping field; sampled "
        "families do not carry one");
  if (grid.n_r < 2 || grid.n_theta < 1)
    throw DomainError("compatibility grid is degenerate");

  const int nw = int(family.weights.size());
  struct RowPartial {
    long checked = 0, skipped = 0;
    double min_gm = kInf, min_gap = kInf;
    long violation_count = 0;
    std::vector<CompatibilityViolation> violations;
  };
  std::vector<RowPartial> rows(std::size_t(grid.n_r));

  run_rows(std::size_t(grid.n_r), [&](std::size_t ii) {
    RowPartial& part = rows[ii];
    int i = int(ii);
    double r = grid.r_node(i);
    double tg = model.theta_g(r);
    std::vector<double> val(static_cast<std::size_t>(nw));
    std::vector<double> nrm(static_cast<std::size_t>(nw));
    for (int j = 0; j < grid.n_theta; ++j) {
      Point x{r, wrap_angle(grid.theta_node(j))};
      if (family.damping->value(x.r, x.theta) > family.two_beta) {
        ++part.skipped;
        continue;
      }
      ++part.checked;
      double max_nrm = -kInf;
      for (int k = 0; k < nw; ++k) {
        val[std::size_t(k)] = family.weights[std::size_t(k)]->value(x);
        WeightGrad g = family.weights[std::size_t(k)]->gradient(x);
        nrm[std::size_t(k)] = std::hypot(g.d_r, g.d_theta / tg);
        max_nrm = std::max(max_nrm, nrm[std::size_t(k)]);
      }
      part.min_gm = std::min(part.min_gm, max_nrm - family.two_rho);
      for (int k = 0; k < nw; ++k) {
        if (nrm[std::size_t(k)] >= family.two_rho) continue;
        double best_gap = -kInf;
        int best_l = -1;
        for (int l = 0; l < nw; ++l) {
          if (nrm[std::size_t(l)] < family.two_rho) continue;
          double gap = val[std::size_t(l)] - val[std::size_t(k)] - family.tau;
          if (gap > best_gap) {
            best_gap = gap;
            best_l = l;
          }
        }
        if (best_gap < 0.0) {
          ++part.violation_count;
          part.violations.push_back({x, k, best_l, best_gap});
        } else {
          part.min_gap = std::min(part.min_gap, best_gap);
        }
      }
    }
  });

  CompatibilityReport rep;
  rep.grid = grid;
  rep.two_rho = family.two_rho;
  rep.tau = family.tau;
  rep.min_gradient_margin = kInf;
  rep.min_gap_margin = kInf;
  for (const RowPartial& part : rows) {
    rep.checked += part.checked;
    rep.skipped += part.skipped;
    rep.min_gradient_margin = std::min(rep.min_gradient_margin, part.min_gm);
    rep.min_gap_margin = std::min(rep.min_gap_margin, part.min_gap);
    rep.violation_count += part.violation_count;
    for (const auto& v : part.violations) {
      if (int(rep.violations.size()) < max_recorded) rep.violations.push_back(v);
    }
  }
  rep.pass = rep.violation_count == 0;
  return rep;
}

std::string CompatibilityReport::to_json() const {
  nlohmann::json j;
  j["grid"] = {{"r_lo", grid.r_lo},         {"r_hi", grid.r_hi},
               {"n_r", grid.n_r},           {"n_theta", grid.n_theta},
               {"theta_lo", grid.theta_lo}, {"theta_hi", grid.theta_hi}};
  j["pass"] = pass;
  j["checked"] = checked;
  j["skipped"] = skipped;
  j["two_rho"] = two_rho;
  j["tau"] = tau;
  j["min_gradient_margin"] = min_gradient_margin;
  j["min_gap_margin"] = min_gap_margin;
  j["violation_count"] = violation_count;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& v : violations)
    arr.push_back({{"r", v.x.r},
                   {"theta", v.x.theta},
                   {"weak", v.k},
                   {"best_partner", v.best_l},
                   {"best_gap", v.best_gap}});
  j["violations"] = arr;
  return j.dump(2);
}

FamilyRangeReport family_range_check(const WeightFamily& family,
                                     const ScanGrid& grid) {
  if (family.weights.empty())
    throw DomainError("range check needs at least one weight");
  FamilyRangeReport rep;
  rep.min_value = kInf;
  rep.max_value = -kInf;
  std::vector<double> row_min(std::size_t(grid.n_r), kInf);
  std::vector<double> row_max(std::size_t(grid.n_r), -kInf);
  run_rows(std::size_t(grid.n_r), [&](std::size_t ii) {
    double r = grid.r_node(int(ii));
    for (int j = 0; j < grid.n_theta; ++j) {
      Point x{r, wrap_angle(grid.theta_node(j))};
      for (const auto& w : family.weights) {
        double v = w->value(x);
        row_min[ii] = std::min(row_min[ii], v);
        row_max[ii] = std::max(row_max[ii], v);
      }
    }
  });
  for (std::size_t i = 0; i < row_min.size(); ++i) {
    rep.min_value = std::min(rep.min_value, row_min[i]);
    rep.max_value = std::max(rep.max_value, row_max[i]);
  }
  rep.ok = std::isfinite(rep.min_value) && std::isfinite(rep.max_value) &&
           rep.min_value >= -1e-12 && rep.max_value <= 3.0 + 1e-9;
  return rep;
}

// ------------------------------------------------ cylindrical end builder

CylindricalWeightResult build_cylindrical_weight(
    const SurfaceModel& model, const DampingField& damping,
    const CylindricalWeightParams& params) {
  const bool right = params.side == Side::right;
  const int sgn = right ? 1 : -1;
  const ScalingProfile& prof = right ? model.right() : model.left();
  const double s_start = 1.0;
  const double s_end = prof.window_hi;
  if (!(params.L > 0.0) || !(params.omega > 0.0) ||
      params.omega > params.L)
    throw DomainError("cylindrical weight needs 0 < omega <= L");

  for (int i = 0; i <= 64; ++i) {
    double s = s_start + (s_end - s_start) * i / 64.0;
    if (std::abs(model.theta_g_d(sgn * s)) > 1e-9)
      throw ConstructionError(
          "cylindrical weight construction needs a constant-width end; the "
          "profile varies at r = " +
          g17(sgn * s));
  }
  const double tgc = model.theta_g(sgn * 0.5 * (s_start + s_end));
  const double S = params.L + 4.0 * params.omega;
  double eps = params.epsilon > 0.0 ? params.epsilon : std::min(0.05, S / 10.0);
  if (!(eps > 0.0) || eps >= S)
    throw DomainError("cylindrical weight epsilon out of range");
  if (kPi * tgc < 2.0 * S)
    throw ConstructionError(
        "end too narrow for two angular columns: need pi * theta_g >= " +
        g17(2.0 * S) + ", have " + g17(kPi * tgc));
  const double r0 = 1.0 + 2.0 * eps;

  struct Lat {
    double th = 0.0, s = 0.0, home_s = 0.0;
    int col = 0;
  };
  std::vector<Lat> lattice;
  int n0 = 0, n1 = 0;
  for (int t = 0;; ++t) {
    double home = r0 + 6.0 * S * t;
    double s1 = home + 2.0 * S;
    bool any = false;
    if (home <= s_end) {
      lattice.push_back({0.0, home, home, 0});
      ++n0;
      any = true;
      if (s1 > s_end)
        throw ConstructionError(
            "end window truncates a staggered critical row: extend the "
            "window past r = " +
            g17(sgn * s1) + " or shorten it below r = " + g17(sgn * home));
    }
    if (s1 <= s_end) {
      lattice.push_back({kPi, s1, home, 1});
      ++n1;
      any = true;
    }
    if (!any) break;
  }
  if (n0 < 2 || n1 < 2)
    throw ConstructionError(
        "end too short: the cylindrical weight needs at least two critical "
        "rows per angular column beyond r = " +
        g17(sgn * r0));

  const auto& centers = damping.config().centers;
  std::vector<char> claimed(centers.size(), 0);
  CylFrame frame;
  frame.sgn = sgn;
  frame.theta_gc = tgc;
  frame.r0 = r0;
  frame.S = S;
  std::vector<Point> criticals;
  const double reach = params.L + params.omega;

  for (const Lat& lat : lattice) {
    int best = -1;
    double best_d = kInf;
    for (std::size_t ci = 0; ci < centers.size(); ++ci) {
      if (claimed[ci]) continue;
      double sc = sgn * centers[ci].r;
      double du = tgc * angle_diff(centers[ci].theta, lat.th);
      double d = std::hypot(du, sc - lat.s);
      if (d <= reach && d < best_d) {
        best_d = d;
        best = int(ci);
      }
    }
    if (best < 0)
      throw ConstructionError(
          "no damped ball within reach " + g17(reach) +
          " of the weight critical point at (r=" + g17(sgn * lat.s) +
          ", theta=" + g17(wrap_angle(lat.th)) + ")");
    claimed[std::size_t(best)] = 1;
    Point c = centers[std::size_t(best)];
    c.theta = wrap_angle(c.theta);
    if (!ball_ok(model, damping, params.two_beta, c, 0.99 * params.omega))
      throw ConstructionError(
          "the damped ball at (r=" + g17(c.r) + ", theta=" + g17(c.theta) +
          ") does not reach level " + g17(params.two_beta) +
          " needed by the weight critical point at (r=" + g17(sgn * lat.s) +
          ", theta=" + g17(wrap_angle(lat.th)) + ")");
    criticals.push_back(c);
    double fu = tgc * angle_diff(c.theta, lat.th);
    double fs = sgn * c.r;
    if (std::hypot(fu, fs - lat.s) > 1e-12) {
      frame.relocation.push_back(build_move_chain(
          fu, fs, 0.0, lat.s, params.omega / 4.0, params.omega / 2.0));
      frame.relocation_anchor.push_back(lat.th);
    }
    if (lat.col == 1) {
      frame.stagger.push_back(build_move_chain(0.0, lat.s, 0.0, lat.home_s,
                                               eps / 2.0, eps));
      frame.stagger_anchor.push_back(lat.th);
    }
  }

  auto check_disjoint = [&](const std::vector<MoveChain>& stage,
                            const std::vector<double>& anchors) {
    for (std::size_t i = 0; i < stage.size(); ++i) {
      for (std::size_t j = i + 1; j < stage.size(); ++j) {
        // chain j endpoints re-expressed in chain i's flat frame
        double shift = tgc * angle_diff(anchors[j], anchors[i]);
        double d = segment_segment_dist(
            stage[i].ax, stage[i].ay, stage[i].bx, stage[i].by,
            stage[j].ax + shift, stage[j].ay, stage[j].bx + shift,
            stage[j].by);
        if (d <= stage[i].radius + stage[j].radius)
          throw ConstructionError(
              "relocation paths overlap near (r=" + g17(sgn * stage[i].by) +
              ", theta=" + g17(wrap_angle(anchors[i])) + ")");
      }
    }
  };
  check_disjoint(frame.relocation, frame.relocation_anchor);
  check_disjoint(frame.stagger, frame.stagger_anchor);

  auto weight = std::make_shared<const CylindricalWeight>(std::move(frame));

  ScanGrid sc;
  sc.r_lo = right ? s_start : -s_end;
  sc.r_hi = right ? s_end : -s_start;
  sc.n_r = params.scan_n_r;
  sc.n_theta = params.scan_n_theta;

  std::vector<double> row_rho(std::size_t(sc.n_r), kInf);
  std::vector<double> row_min(std::size_t(sc.n_r), kInf);
  std::vector<double> row_max(std::size_t(sc.n_r), -kInf);
  run_rows(std::size_t(sc.n_r), [&](std::size_t ii) {
    double r = sc.r_node(int(ii));
    double tg = model.theta_g(r);
    for (int j = 0; j < sc.n_theta; ++j) {
      Point x{r, wrap_angle(sc.theta_node(j))};
      double v = weight->value(x);
      row_min[ii] = std::min(row_min[ii], v);
      row_max[ii] = std::max(row_max[ii], v);
      bool in_ball = false;
      for (const Point& c : criticals) {
        double d = std::hypot(r - c.r, tgc * angle_diff(x.theta, c.theta));
        if (d <= params.omega) {
          in_ball = true;
          break;
        }
      }
      if (in_ball) continue;
      WeightGrad g = weight->gradient(x);
      row_rho[ii] = std::min(row_rho[ii], std::hypot(g.d_r, g.d_theta / tg));
    }
  });
  double two_rho = kInf, vmin = kInf, vmax = -kInf;
  for (std::size_t i = 0; i < row_rho.size(); ++i) {
    two_rho = std::min(two_rho, row_rho[i]);
    vmin = std::min(vmin, row_min[i]);
    vmax = std::max(vmax, row_max[i]);
  }
  if (!(two_rho > 1e-12))
    throw ConstructionError(
        "cylindrical weight gradient floor degenerated over the scan");

  CylindricalWeightResult res;
  res.set.side = params.side;
  res.set.start_r = s_start;
  res.set.weights = {weight};
  res.set.labels = {right ? std::string("cylindrical_right")
                          : std::string("cylindrical_left")};
  res.set.floor_rho1 = two_rho;
  res.set.gap = 0.5;
  res.epsilon = eps;
  res.spacing = S;
  for (const Lat& lat : lattice)
    res.lattice.push_back({sgn * lat.s, wrap_angle(lat.th)});
  res.criticals = criticals;
  res.two_rho = two_rho;
  res.scan = sc;
  res.min_value = vmin;
  res.max_value = vmax;
  return res;
}

// ------------------------------------------------- expanding end builder

SubconicWeightResult build_subconic_weights(
    const SurfaceModel& model, const DampingField& damping,
    const SubconicWeightParams& params) {
  const bool right = params.side == Side::right;
  const int sgn = right ? 1 : -1;
  const ScalingProfile& prof = right ? model.right() : model.left();
  if (!prof.expanding())
    throw ConstructionError(
        "subconic weight construction needs an expanding end profile");
  if (!(params.L > 0.0) || !(params.omega > 0.0) || params.omega > params.L)
    throw DomainError("subconic weight needs 0 < omega <= L");
  const double S = params.L + 4.0 * params.omega;
  double eps = params.epsilon > 0.0 ? params.epsilon : std::min(0.05, S / 10.0);
  if (!(eps > 0.0) || eps >= 1.0 / 12.0)
    throw DomainError(
        "subconic weight epsilon must lie in (0, 1/12) so the chart collars "
        "overlap");

  auto shared = std::make_shared<SubconicShared>();
  shared->model = &model;
  shared->sgn = sgn;
  shared->A = 0.75 * kPi;
  shared->eps = eps;
  shared->collar.eps = eps;

  const double s_lo = std::max(1.0, prof.window_lo);
  const double s_hi = prof.window_hi;
  // flattening distortion over a geometric radial sample of the shear
  double C2p = 1.0, C2m = 1.0;
  for (int i = 0; i < 64; ++i) {
    double s = s_lo * std::pow(s_hi / s_lo, i / 63.0);
    double base = shared->thD_d(s);
    for (int j = 0; j <= 32; ++j) {
      double y = -1.0 + 2.0 * j / 32.0;
      double sig = base * y;
      double s2 = sig * sig;
      double sp = std::sqrt(1.0 + 0.5 * s2 +
                            std::sqrt(s2 + 0.25 * s2 * s2));
      C2p = std::max(C2p, sp);
      C2m = std::min(C2m, 1.0 / sp);
    }
  }
  const double C1m = 1.0, C1p = 1.0;  // charts are isometric by construction
  const double Cp = C2p * C1p;
  const double Cm = C2m * C1m;
  const double q = Cp * S;
  shared->q = q;
  const double reach = Cp * (params.L + 2.0 * params.omega);

  auto theta_radius_at_least = [&](double target, const char* /*what*/) {
    if (shared->thD(s_hi) < target)
      throw ConstructionError(
          "end too short for subconic construction at these parameters");
    double lo = s_lo, hi = s_hi;
    if (shared->thD(lo) >= target) return lo;
    for (int it = 0; it < 200; ++it) {
      double mid = 0.5 * (lo + hi);
      if (shared->thD(mid) >= target)
        hi = mid;
      else
        lo = mid;
    }
    return hi;
  };
  const double R0 = theta_radius_at_least(q / eps, "structure start");

  std::vector<SubconicPatch> patches = params.patches;
  if (patches.empty()) {
    long j0 = long(std::ceil((R0 + reach) / (2.0 * q)));
    SubconicPatch p;
    p.s_lo = 2.0 * q * j0;
    p.s_hi = p.s_lo + 8.0 * q;
    patches.push_back(p);
  }
  for (const auto& p : patches) {
    if (!(p.s_lo < p.s_hi) || !(p.theta_lo < p.theta_hi) ||
        p.theta_hi - p.theta_lo > kTwoPi + 1e-9)
      throw DomainError("subconic patch window is malformed");
    if (p.s_lo < R0 + reach - 1e-9)
      throw ConstructionError(
          "certification patch starts before the chart structure admits "
          "relocation: s_lo must be at least " +
          g17(R0 + reach));
    if (p.s_hi + reach > s_hi)
      throw ConstructionError(
          "end too short for subconic construction at these parameters");
  }
  shared->patches = patches;

  const auto& centers = damping.config().centers;
  const auto& bands = damping.config().bands;
  std::vector<char> claimed(centers.size(), 0);
  std::array<SubChartData, 2> chart_data;
  std::vector<Point> crit_out;
  int criticals_total = 0, saddles_total = 0, relocated = 0;
  const double y_lim = 1.0 - 1.6 * eps;

  for (int k = 0; k < 2; ++k) {
    SubChartData& cd = chart_data[k];
    cd.chart = k;
    cd.center = k == 0 ? 0.0 : kPi;
    std::set<std::pair<long, long>> seen;
    for (const auto& p : patches) {
      bool full = p.theta_hi - p.theta_lo >= kTwoPi - 1e-12;
      double mid = 0.5 * (p.theta_lo + p.theta_hi);
      double half = 0.5 * (p.theta_hi - p.theta_lo);
      long j_lo = long(std::ceil((p.s_lo - reach) / (2.0 * q)));
      long j_hi = long(std::floor((p.s_hi + reach) / (2.0 * q)));
      for (long j = j_lo; j <= j_hi; ++j) {
        double z2 = 2.0 * q * j;
        if (z2 < R0 - 1e-9) continue;
        double thd = shared->thD(z2);
        bool extrema = ((j - k) % 2 == 0);
        long m_max = long(std::floor(thd / (extrema ? 2.0 * q : q))) + 1;
        for (long m = -m_max; m <= m_max; ++m) {
          double z1 = extrema ? 2.0 * q * m : q * (2.0 * m + 1);
          double y = z1 / thd;
          if (std::abs(y) > 1.0 + 1e-12) continue;
          double th_c = wrap_angle(cd.center + shared->A * y);
          if (!full) {
            double slack = shared->A * reach / thd;
            if (std::abs(angle_diff(th_c, mid)) > half + slack + 1e-12)
              continue;
          }
          long col_key = extrema ? 2 * m : 2 * m + 1;
          if (!seen.insert({j, col_key}).second) continue;
          ++criticals_total;
          if (!extrema) ++saddles_total;
          if (std::abs(y) >= y_lim) continue;  // rim critical stays put

          // candidate damped anchors: the critical itself, then provided
          // ball centres, then a radial snap onto each damping band
          struct Cand {
            double fx = 0.0, fy = 0.0;
            Point global;
            double d = 0.0;
            int center_index = -1;
          };
          std::vector<Cand> cands;
          cands.push_back({z1, z2, Point{sgn * z2, th_c}, 0.0, -1});
          std::vector<Cand> ranked;
          for (std::size_t ci = 0; ci < centers.size(); ++ci) {
            if (claimed[ci]) continue;
            double sc = sgn * centers[ci].r;
            if (sc < s_lo || sc > s_hi) continue;
            double yc = angle_diff(centers[ci].theta, cd.center) / shared->A;
            if (std::abs(yc) > 1.0) continue;
            double fx = shared->thD(sc) * yc, fy = sc;
            double d = std::hypot(fx - z1, fy - z2);
            if (d <= Cp * (params.L + params.omega))
              ranked.push_back({fx, fy,
                                Point{centers[ci].r,
                                      wrap_angle(centers[ci].theta)},
                                d, int(ci)});
          }
          for (const auto& b : bands) {
            double sb = sgn * b.r_center;
            if (sb < s_lo || sb > s_hi) continue;
            double fx = shared->thD(sb) * y, fy = sb;
            double d = std::hypot(fx - z1, fy - z2);
            if (d <= Cp * (params.L + params.omega))
              ranked.push_back({fx, fy, Point{b.r_center, th_c}, d, -1});
          }
          std::stable_sort(ranked.begin(), ranked.end(),
                           [](const Cand& a, const Cand& b) {
                             return a.d < b.d;
                           });
          cands.insert(cands.end(), ranked.begin(), ranked.end());

          const Cand* winner = nullptr;
          for (const Cand& c : cands) {
            if (ball_ok(model, damping, params.two_beta, c.global,
                        0.9 * params.omega)) {
              winner = &c;
              break;
            }
          }
          if (!winner)
            throw ConstructionError(
                "no damped region within reach of the chart critical point "
                "at (r=" +
                g17(sgn * z2) + ", theta=" + g17(th_c) + ")");
          if (winner->center_index >= 0)
            claimed[std::size_t(winner->center_index)] = 1;
          crit_out.push_back(winner->global);
          if (winner->d > 1e-12) {
            cd.chains.push_back(build_move_chain(winner->fx, winner->fy, z1,
                                                 z2, Cp * params.omega / 4.0,
                                                 Cp * params.omega / 2.0));
            ++relocated;
          }
        }
      }
    }
    std::stable_sort(cd.chains.begin(), cd.chains.end(),
                     [](const MoveChain& a, const MoveChain& b) {
                       return a.x_mid() < b.x_mid();
                     });
    for (const auto& c : cd.chains)
      cd.max_span = std::max(cd.max_span, c.x_span());
    // neighbour-limited capsule disjointness
    for (std::size_t i = 0; i < cd.chains.size(); ++i) {
      for (std::size_t jj = i + 1; jj < cd.chains.size(); ++jj) {
        if (cd.chains[jj].x_mid() - cd.chains[i].x_mid() >
            2.0 * cd.max_span)
          break;
        double d = segment_segment_dist(
            cd.chains[i].ax, cd.chains[i].ay, cd.chains[i].bx,
            cd.chains[i].by, cd.chains[jj].ax, cd.chains[jj].ay,
            cd.chains[jj].bx, cd.chains[jj].by);
        if (d <= cd.chains[i].radius + cd.chains[jj].radius)
          throw ConstructionError(
              "relocation paths overlap in the chart near s = " +
              g17(cd.chains[i].by));
      }
    }
  }

  auto w0 = std::make_shared<const SubconicChartWeight>(shared,
                                                        chart_data[0]);
  auto w1 = std::make_shared<const SubconicChartWeight>(shared,
                                                        chart_data[1]);

  // gradient floor of the pre-collar fields over the marked patches,
  // away from the damped set and off the chart rims
  double C0 = kInf;
  for (const auto& p : patches) {
    if (!p.use_for_c0) continue;
    bool full = p.theta_hi - p.theta_lo >= kTwoPi - 1e-12;
    int nt = params.patch_n_theta;
    std::vector<double> row_c0(std::size_t(params.patch_n_r), kInf);
    run_rows(std::size_t(params.patch_n_r), [&](std::size_t ii) {
      double s =
          p.s_lo + (p.s_hi - p.s_lo) * double(ii) / (params.patch_n_r - 1);
      for (int j = 0; j < nt; ++j) {
        double th = full ? p.theta_lo + kTwoPi * j / nt
                         : p.theta_lo +
                               (p.theta_hi - p.theta_lo) * j / (nt - 1);
        th = wrap_angle(th);
        if (damping.value(sgn * s, th) > params.two_beta) continue;
        for (const auto* cw : {w0.get(), w1.get()}) {
          double y = cw->chart_y(th);
          if (std::abs(y) > 1.0 - 2.0 * eps) continue;
          double wv = 0.0, wy = 0.0, ws = 0.0;
          cw->pre_collar(s, th, &wv, &wy, &ws);
          double g = std::hypot(wy / shared->thD(s), ws);
          row_c0[ii] = std::min(row_c0[ii], g);
        }
      }
    });
    for (double v : row_c0) C0 = std::min(C0, v);
  }
  if (!std::isfinite(C0) || C0 <= 1e-12)
    throw ConstructionError(
        "chart weight gradient floor degenerated over the certification "
        "patches");

  // collar slope ceiling and the radius where the warp absorbs it
  double chi_max_slope = 0.0;
  for (int i = 0; i <= 20000; ++i) {
    double d = 4.0 * eps * i / 20000.0;
    chi_max_slope = std::max(chi_max_slope, shared->collar.deriv(d));
  }
  const double R =
      std::max(R0, theta_radius_at_least(72.0 * chi_max_slope / C0,
                                         "collar validity"));

  SubconicWeightResult res;
  res.set.side = params.side;
  res.set.start_r = R;
  res.set.weights = {w0, w1};
  std::string side_name = right ? "right" : "left";
  res.set.labels = {"subconic_" + side_name + "_0",
                    "subconic_" + side_name + "_pi"};
  res.set.floor_rho1 = C0 * C1m / 24.0;
  res.set.gap = 0.5;
  res.epsilon = eps;
  res.spacing = S;
  res.C1_minus = C1m;
  res.C1_plus = C1p;
  res.C2_minus = C2m;
  res.C2_plus = C2p;
  res.C_minus = Cm;
  res.C_plus = Cp;
  res.C0 = C0;
  res.R0 = R0;
  res.R = R;
  res.two_rho = res.set.floor_rho1;
  res.chi_max_slope = chi_max_slope;
  res.chi_slope_margin = (C0 / 72.0) / (chi_max_slope / shared->thD(R));
  res.criticals_total = criticals_total;
  res.saddles_total = saddles_total;
  res.relocated = relocated;
  res.patches = patches;
  res.criticals = crit_out;
  return res;
}

// ------------------------------------------------------------ glue

GlueResult glue_weights(const SurfaceModel& model, const DampingField& damping,
                        const std::vector<EndWeightSet>& ends,
                        const GlueParams& params) {
  if (ends.empty() || ends.size() > 2)
    throw DomainError("glue needs one or two end weight sets");
  if (ends.size() == 2 && ends[0].side == ends[1].side)
    throw DomainError("glue needs end weight sets on distinct sides");
  for (const auto& e : ends)
    if (e.weights.empty())
      throw DomainError("an end weight set carries no weights");

  double R = 1.0;
  for (const auto& e : ends) R = std::max(R, e.start_r);
  double rho1 = params.rho1;
  if (rho1 <= 0.0) {
    rho1 = kInf;
    for (const auto& e : ends) rho1 = std::min(rho1, e.floor_rho1);
    if (!(rho1 > 0.0) || !std::isfinite(rho1))
      throw ConstructionError(
          "glue needs a positive end gradient floor (rho1)");
  }
  const double I = 432.0 / rho1;
  const double tau = 1.0 / 72.0;

  if (params.require_full_cutoffs) {
    for (const auto& e : ends) {
      bool er = e.side == Side::right;
      double window = er ? model.right().window_hi : model.left().window_hi;
      if (window < R + 5.0 * I)
        throw ConstructionError(
            std::string("the glue cutoffs on the ") +
            (er ? "right" : "left") + " end need the window to extend to r = " +
            g17(R + 5.0 * I) + "; the profile window ends at " + g17(window));
    }
  }

  const double band_lo = std::max(model.r_lo(), -(R + 7.0 * I));
  const double band_hi = std::min(model.r_hi(), R + 7.0 * I);
  const auto& cfg = damping.config();
  const double wd = cfg.omega;
  const double lo_x0 = std::max(band_lo, -(R + 4.0 * I)) + cfg.omega_out;
  const double hi_x0 = std::min(band_hi, R + 4.0 * I) - cfg.omega_out;
  const Point* x0 = nullptr;
  for (const auto& c : cfg.centers) {
    if (c.r < lo_x0 || c.r > hi_x0) continue;
    if (ball_ok(model, damping, cfg.two_beta, c, 0.9 * wd)) {
      x0 = &c;
      break;
    }
  }
  if (!x0)
    throw ConstructionError(
        "no damped ball available to anchor the core weight: need a center "
        "with r in [" +
        g17(lo_x0) + ", " + g17(hi_x0) + "] damped to level " +
        g17(cfg.two_beta));

  GluedCore::Data core;
  core.chi0 = CutoffRamp{R, I};
  core.band_lo = band_lo;
  core.band_hi = band_hi;
  core.x0 = {x0->r, wrap_angle(x0->theta)};
  core.theta0 = model.theta_g(x0->r);
  core.dimple_in = 0.45 * wd;
  core.dimple_out = 0.9 * wd;
  core.depth = 0.48 * wd / (band_hi - band_lo);
  core.f_min = 0.0;
  core.f_max = 1.0;
  {
    GluedCore probe(core);
    double fmin = 0.0;
    for (int i = 0; i <= 20000; ++i) {
      double r = band_lo + (band_hi - band_lo) * i / 20000.0;
      fmin = std::min(fmin, probe.raw(r, core.x0.theta));
    }
    core.f_min = fmin;
  }
  auto core_w = std::make_shared<const GluedCore>(core);

  WeightFamily family;
  family.weights.push_back(core_w);
  family.labels.push_back("core");
  for (const auto& e : ends) {
    int sgn = e.side == Side::right ? 1 : -1;
    for (std::size_t i = 0; i < e.weights.size(); ++i) {
      family.weights.push_back(std::make_shared<const GluedEnd>(
          CutoffRise{R, I}, sgn, e.weights[i]));
      std::string lab = i < e.labels.size()
                            ? e.labels[i]
                            : std::string("end_") + std::to_string(i);
      family.labels.push_back("glued_" + lab);
    }
  }

  ScanGrid sc;
  sc.r_lo = params.scan_r_lo;
  sc.r_hi = params.scan_r_hi;
  sc.n_r = params.scan_n_r;
  sc.n_theta = params.scan_n_theta;

  // gradient floor of the core over the plateau region of the descent
  // cutoff, and the core range, measured on the construction scan
  std::vector<double> row_rho(std::size_t(sc.n_r), kInf);
  std::vector<double> row_min(std::size_t(sc.n_r), kInf);
  std::vector<double> row_max(std::size_t(sc.n_r), -kInf);
  run_rows(std::size_t(sc.n_r), [&](std::size_t ii) {
    double r = sc.r_node(int(ii));
    double tg = model.theta_g(r);
    bool plateau_row = std::abs(r) <= R + 4.0 * I;
    for (int j = 0; j < sc.n_theta; ++j) {
      Point x{r, wrap_angle(sc.theta_node(j))};
      double v = core_w->value(x);
      row_min[ii] = std::min(row_min[ii], v);
      row_max[ii] = std::max(row_max[ii], v);
      if (!plateau_row) continue;
      if (damping.value(x.r, x.theta) > cfg.two_beta) continue;
      WeightGrad g = core_w->gradient(x);
      row_rho[ii] = std::min(row_rho[ii], std::hypot(g.d_r, g.d_theta / tg));
    }
  });
  double rho0 = params.rho0, core_min = kInf, core_max = -kInf;
  double measured_rho0 = kInf;
  for (std::size_t i = 0; i < row_rho.size(); ++i) {
    measured_rho0 = std::min(measured_rho0, row_rho[i]);
    core_min = std::min(core_min, row_min[i]);
    core_max = std::max(core_max, row_max[i]);
  }
  if (rho0 <= 0.0) {
    if (!std::isfinite(measured_rho0))
      throw ConstructionError(
          "the scan window misses the core plateau; cannot measure rho0");
    rho0 = measured_rho0;
  }
  if (!(rho0 > 0.0))
    throw ConstructionError("core gradient floor rho0 degenerated");

  family.two_rho = std::min(rho0, rho1 / 72.0);
  family.tau = tau;
  family.lambda = params.lambda;
  family.two_beta = cfg.two_beta;
  family.beta = 0.5 * cfg.two_beta;
  family.damping = std::make_shared<const DampingField>(damping);

  GlueResult res;
  res.rho0 = rho0;
  res.rho1 = rho1;
  res.R = R;
  res.I = I;
  res.tau = tau;
  res.two_rho = family.two_rho;
  res.core_ball = core.x0;
  res.core_min = core_min;
  res.core_max = core_max;
  CutoffRise c1{R, I};
  CutoffRamp c0{R, I};
  for (int i = 0; i <= 20000; ++i) {
    double t = R + 6.0 * I * i / 20000.0;
    res.chi1_max_slope = std::max(res.chi1_max_slope, std::abs(c1.deriv(t)));
    res.chi0_max_slope = std::max(res.chi0_max_slope, std::abs(c0.deriv(t)));
  }
  res.chi1_slope_bound = rho1 / 216.0;
  res.certificate = compatibility_check(
      model, family,
      sc.subsample(params.cert_stride_r, params.cert_stride_theta));
  res.family = std::move(family);
  return res;
}

// ---------------------------------------------------------------- probes

ConjugationResult conjugated_apply(const Discretization& disc,
                                   const WeightField& psi, double lambda,
                                   double h, double V,
                                   const std::vector<Complex>& u) {
  if (!(h > 0.0)) throw DomainError("conjugation needs h > 0");
  const std::size_t n = disc.size();
  if (u.size() != n)
    throw DomainError("conjugation field size does not match the grid");
  const int nr = disc.n_r(), nt = disc.n_theta();
  const double dr = disc.grid().dr(), dth = disc.grid().dtheta();

  std::vector<double> psiv(n), p_r(n), p_t(n), p_rr(n), p_tt(n);
  run_rows(std::size_t(nr), [&](std::size_t ii) {
    int i = int(ii);
    double r = disc.r_node(i);
    for (int j = 0; j < nt; ++j) {
      std::size_t id = ii * std::size_t(nt) + std::size_t(j);
      Point x{r, j * dth};
      psiv[id] = psi.value(x);
      WeightGrad g = psi.gradient(x);
      p_r[id] = g.d_r;
      p_t[id] = g.d_theta;
      auto hs = psi.hessian(x);
      p_rr[id] = hs[0];
      p_tt[id] = hs[2];
    }
  });
  double max_exp = -kInf;
  for (double v : psiv) max_exp = std::max(max_exp, lambda * v);
  if (max_exp > 300.0)
    throw NumericsError(
        "conjugation weight overflow: lambda * psi reaches " + g17(max_exp) +
        " (limit 300)");

  std::vector<double> phi(n);
  double phi_min = kInf;
  for (std::size_t id = 0; id < n; ++id) {
    phi[id] = std::exp(lambda * psiv[id]);
    phi_min = std::min(phi_min, phi[id]);
  }

  ConjugationResult res;
  res.shift = phi_min;
  std::vector<char> mask(n, 0);
  std::vector<Complex> v(n);
  for (std::size_t id = 0; id < n; ++id) {
    double ex = (phi[id] - phi_min) / h;
    if (ex > 500.0) {
      mask[id] = 1;
      v[id] = Complex(0.0, 0.0);
      ++res.masked;
    } else {
      v[id] = std::exp(-ex) * u[id];
    }
  }
  std::vector<Complex> lap_v(n), lap_u(n);
  disc.apply_laplacian(v, lap_v);
  disc.apply_laplacian(u, lap_u);

  res.direct.assign(n, Complex(0.0, 0.0));
  res.expanded.assign(n, Complex(0.0, 0.0));
  double sup_diff = 0.0, sup_exp = 0.0;
  for (int i = 0; i < nr; ++i) {
    double r = disc.r_node(i);
    double tg = disc.model().theta_g(r);
    double tgd = disc.model().theta_g_d(r);
    for (int j = 0; j < nt; ++j) {
      std::size_t id = std::size_t(i) * std::size_t(nt) + std::size_t(j);
      // reflecting radial ends: even extension; periodic in theta
      Complex u_r;
      if (i == 0 || i == nr - 1)
        u_r = Complex(0.0, 0.0);
      else
        u_r = (u[id + std::size_t(nt)] - u[id - std::size_t(nt)]) /
              (2.0 * dr);
      std::size_t jp = std::size_t(i) * std::size_t(nt) +
                       std::size_t((j + 1) % nt);
      std::size_t jm = std::size_t(i) * std::size_t(nt) +
                       std::size_t((j + nt - 1) % nt);
      Complex u_t = (u[jp] - u[jm]) / (2.0 * dth);

      double gp2 = lambda * lambda * phi[id] * phi[id] *
                   (p_r[id] * p_r[id] + p_t[id] * p_t[id] / (tg * tg));
      double lap_psi =
          -p_rr[id] - (tgd / tg) * p_r[id] - p_tt[id] / (tg * tg);
      double lap_phi =
          lambda * phi[id] *
          (lap_psi - lambda * (p_r[id] * p_r[id] +
                               p_t[id] * p_t[id] / (tg * tg)));
      Complex cross = 2.0 * h * lambda * phi[id] *
                      (p_r[id] * u_r + p_t[id] * u_t / (tg * tg));
      res.expanded[id] = h * h * lap_u[id] - (gp2 + V) * u[id] + cross -
                         h * lap_phi * u[id];
      sup_exp = std::max(sup_exp, std::abs(res.expanded[id]));
      if (mask[id]) continue;
      double back = std::exp((phi[id] - phi_min) / h);
      res.direct[id] = back * (h * h * lap_v[id] - V * v[id]);
      sup_diff = std::max(sup_diff,
                          std::abs(res.direct[id] - res.expanded[id]));
    }
  }
  res.discrepancy = sup_diff / std::max(sup_exp, 1e-300);
  return res;
}

BracketReport bracket_positivity(const SurfaceModel& model,
                                 const WeightField& psi, double lambda,
                                 double rho, double V0,
                                 const std::vector<CotangentPoint>& sample) {
  if (sample.empty())
    throw DomainError("bracket check needs at least one sample");
  if (!(lambda > 0.0) || !(rho > 0.0))
    throw DomainError("bracket check needs lambda > 0 and rho > 0");
  BracketReport rep;
  rep.min_bracket = kInf;
  rep.min_ratio = kInf;
  rep.samples.reserve(sample.size());
  for (const CotangentPoint& zeta : sample) {
    const Point& x = zeta.x;
    double tg = model.theta_g(x.r);
    double tgd = model.theta_g_d(x.r);
    double pv = psi.value(x);
    WeightGrad g = psi.gradient(x);
    auto hs = psi.hessian(x);
    double grad_norm = std::hypot(g.d_r, g.d_theta / tg);
    if (grad_norm < rho - 1e-12)
      throw DomainError("bracket sample at (r=" + g17(x.r) + ", theta=" +
                        g17(x.theta) + ") has |grad psi|_g = " +
                        g17(grad_norm) + " below rho = " + g17(rho));
    if (3.0 * lambda * pv > 690.0)
      throw NumericsError("bracket envelope overflow: 3 lambda psi = " +
                          g17(3.0 * lambda * pv) + " (limit 690)");
    double phi = std::exp(lambda * pv);
    double f_r = lambda * phi * g.d_r;
    double f_t = lambda * phi * g.d_theta;
    double f_rr = lambda * phi * (lambda * g.d_r * g.d_r + hs[0]);
    double f_rt = lambda * phi * (lambda * g.d_r * g.d_theta + hs[1]);
    double f_tt = lambda * phi * (lambda * g.d_theta * g.d_theta + hs[2]);
    double gphi2 = f_r * f_r + f_t * f_t / (tg * tg);
    double shell = gphi2 + V0;
    double xi2 = zeta.xi_r * zeta.xi_r +
                 zeta.xi_theta * zeta.xi_theta / (tg * tg);
    double tol = 1e-9 * std::max(shell, 1e-300);
    if (xi2 < 0.25 * shell - tol || xi2 > 4.0 * shell + tol)
      throw DomainError(
          "bracket sample covector lies outside the characteristic shell: "
          "|xi|_g^2 = " +
          g17(xi2) + ", admissible range [" + g17(0.25 * shell) + ", " +
          g17(4.0 * shell) + "]");

    double xr = zeta.xi_r, xt = zeta.xi_theta;
    double tg2 = tg * tg, tg3 = tg2 * tg;
    double pR_xr = 2.0 * xr;
    double pR_xt = 2.0 * xt / tg2;
    double pR_r = -2.0 * tgd * xt * xt / tg3 - 2.0 * f_r * f_rr -
                  2.0 * f_t * f_rt / tg2 + 2.0 * f_t * f_t * tgd / tg3;
    double pR_t = -2.0 * f_r * f_rt - 2.0 * f_t * f_tt / tg2;
    double pI_xr = 2.0 * f_r;
    double pI_xt = 2.0 * f_t / tg2;
    double pI_r = 2.0 * (f_rr * xr + f_rt * xt / tg2 -
                         2.0 * f_t * xt * tgd / tg3);
    double pI_t = 2.0 * (f_rt * xr + f_tt * xt / tg2);
    double bracket =
        pR_xr * pI_r + pR_xt * pI_t - (pR_r * pI_xr + pR_t * pI_xt);
    double pair_ps = g.d_r * xr + g.d_theta * xt / tg2;
    double term_quad = 4.0 * lambda * lambda * phi * pair_ps * pair_ps;
    double envelope = 2.0 * std::pow(rho, 4) * std::pow(lambda, 4) *
                      std::exp(3.0 * lambda * pv);
    rep.samples.push_back({zeta, bracket, term_quad, envelope});
    rep.min_bracket = std::min(rep.min_bracket, bracket);
    rep.min_ratio = std::min(rep.min_ratio, bracket / envelope);
  }
  return rep;
}

CotangentPoint shell_covector(const SurfaceModel& model, const WeightField& psi,
                              double lambda, double V0, const Point& x,
                              double zeta, double scale) {
  double pv = psi.value(x);
  if (2.0 * lambda * pv > 600.0)
    throw NumericsError("shell covector overflow: 2 lambda psi = " +
                        g17(2.0 * lambda * pv) + " (limit 600)");
  double tg = model.theta_g(x.r);
  WeightGrad g = psi.gradient(x);
  double phi = std::exp(lambda * pv);
  double gphi2 = lambda * lambda * phi * phi *
                 (g.d_r * g.d_r + g.d_theta * g.d_theta / (tg * tg));
  double mag = scale * std::sqrt(gphi2 + V0);
  CotangentPoint uc = unit_covector(model, x, zeta);
  return {x, mag * uc.xi_r, mag * uc.xi_theta};
}

CarlemanProbeResult carleman_ratio_probe(
    const Discretization& disc, const DampingField& damping,
    const ProbeParams& params,
    const std::vector<std::vector<Complex>>& test_set) {
  CarlemanProbeResult res;
  res.tag = params.tag;
  const int nr = disc.n_r(), nt = disc.n_theta();
  const std::size_t n = disc.size();

  // radial reductions of the damping: mean square over the circle and the
  // observed fraction {a > beta}
  std::vector<double> a_sq(std::size_t(nr), 0.0), frac(std::size_t(nr), 0.0);
  std::vector<double> a_full(n, 0.0);
  const double dth = disc.grid().dtheta();
  for (int i = 0; i < nr; ++i) {
    double r = disc.r_node(i);
    double sq_sum = 0.0;
    int hits = 0;
    for (int j = 0; j < nt; ++j) {
      double a = damping.value(r, j * dth);
      a_full[std::size_t(i) * std::size_t(nt) + std::size_t(j)] = a;
      sq_sum += a * a;
      if (a > params.beta) ++hits;
    }
    a_sq[std::size_t(i)] = sq_sum / nt;
    frac[std::size_t(i)] = double(hits) / nt;
  }

  if (params.op == ProbeOperator::semiclassical) {
    if (params.h_grid.empty())
      throw DomainError("probe needs a nonempty h grid");
    double theta0 = disc.model().theta_g(0.0);
    std::vector<double> sub, diag, super;
    for (double h : params.h_grid) {
      if (!(h > 0.0)) throw DomainError("probe h values must be positive");
      int k = std::max(1, int(std::lround(theta0 / h)));
      if (2 * k >= nt)
        throw NumericsError(
            "angular grid too coarse for the probe mode at h = " + g17(h) +
            " (needs mode " + std::to_string(k) + ")");
      disc.mode_laplacian(k, sub, diag, super);
      Eigen::MatrixXd M = Eigen::MatrixXd::Zero(nr, nr);
      for (int i = 0; i < nr; ++i) M(i, i) = diag[std::size_t(i)];
      for (int i = 0; i + 1 < nr; ++i) {
        double wi = disc.weight(i), wi1 = disc.weight(i + 1);
        double off = 0.5 * (super[std::size_t(i)] * std::sqrt(wi / wi1) +
                            sub[std::size_t(i)] * std::sqrt(wi1 / wi));
        M(i, i + 1) = off;
        M(i + 1, i) = off;
      }
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
      if (es.info() != Eigen::Success)
        throw NumericsError("probe mode eigensolve failed");
      double nu = es.eigenvalues()(0);
      Eigen::VectorXd vec = es.eigenvectors().col(0);
      // back to the plain radial profile; weighted norm stays one
      std::vector<double> v(static_cast<std::size_t>(nr));
      for (int i = 0; i < nr; ++i)
        v[std::size_t(i)] = vec(i) / std::sqrt(disc.weight(i));
      double h_eff = 1.0 / std::sqrt(nu + 1.0);
      double rho_c = h_eff * h_eff * (nu + 1.0) - 1.0;
      double nu2 = 0.0, na2 = 0.0, nom2 = 0.0;
      for (int i = 0; i < nr; ++i) {
        double wv = disc.weight(i) * v[std::size_t(i)] * v[std::size_t(i)];
        nu2 += wv;
        na2 += wv * a_sq[std::size_t(i)];
        nom2 += wv * frac[std::size_t(i)];
      }
      double p_rel = std::sqrt(rho_c * rho_c + h_eff * h_eff * na2 / nu2);
      double om_rel = std::sqrt(nom2 / nu2);
      double ratio = 1.0 / (p_rel + om_rel + 1e-300);
      res.h_values.push_back(h_eff);
      res.nominal_h.push_back(h);
      res.mode_index.push_back(k);
      res.ratios.push_back(ratio);
      res.log_ratios.push_back(std::log(ratio));
      res.per_point_c.push_back(h_eff * std::log(ratio));
    }
  } else {
    if (test_set.empty())
      throw DomainError(
          "fixed-frequency probe requires explicit test functions");
    double mu = params.mu;
    double h_eq = 1.0 / std::sqrt(mu * mu + 1.0);
    std::vector<Complex> pu(n);
    for (const auto& u : test_set) {
      if (u.size() != n)
        throw DomainError("probe test function size does not match the grid");
      double mass = disc.mass_form(u);
      if (!(mass > 1e-280) || !std::isfinite(mass))
        throw DomainError("probe test function has zero mass");
      disc.apply_laplacian(u, pu);
      const Complex imu(0.0, mu);
      for (std::size_t id = 0; id < n; ++id)
        pu[id] += imu * a_full[id] * u[id] - (mu * mu - 1.0) * u[id];
      double pn = std::sqrt(disc.mass_form(pu) / mass);
      double om2 = 0.0;
      for (int i = 0; i < nr; ++i)
        for (int j = 0; j < nt; ++j) {
          std::size_t id = std::size_t(i) * std::size_t(nt) + std::size_t(j);
          if (a_full[id] > params.beta)
            om2 += disc.weight(i) * std::norm(u[id]);
        }
      double om_rel = std::sqrt(om2 / mass);
      double ratio = 1.0 / (pn + om_rel + 1e-300);
      res.h_values.push_back(h_eq);
      res.nominal_h.push_back(h_eq);
      res.mode_index.push_back(-1);
      res.ratios.push_back(ratio);
      res.log_ratios.push_back(std::log(ratio));
      res.per_point_c.push_back(h_eq * std::log(ratio));
    }
  }

  // least-squares slope of log ratio against 1/h
  std::size_t m = res.h_values.size();
  if (m >= 2) {
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double xv = 1.0 / res.h_values[i];
      sx += xv;
      sy += res.log_ratios[i];
      sxx += xv * xv;
      sxy += xv * res.log_ratios[i];
    }
    double denom = m * sxx - sx * sx;
    if (std::abs(denom) > 1e-300) {
      res.fitted_c = (m * sxy - sx * sy) / denom;
      res.fitted_offset = (sy - res.fitted_c * sx) / m;
    }
  } else if (m == 1) {
    res.fitted_offset = res.log_ratios[0];
  }
  return res;
}

std::string CarlemanProbeResult::to_csv() const {
  CsvWriter csv({"h", "ratio", "log_ratio", "fitted_C"});
  for (std::size_t i = 0; i < h_values.size(); ++i)
    csv.row_values({h_values[i], ratios[i], log_ratios[i], fitted_c});
  return csv.str();
}

// ------------------------------------------------------------------ io

void write_weight_family(std::ostream& os, const SurfaceModel& model,
                         const WeightFamily& family, const ScanGrid& grid) {
  (void)model;
  if (family.weights.empty())
    throw DomainError("cannot serialise an empty weight family");
  nlohmann::json j;
  j["format"] = "weight-family/1";
  j["grid"] = {{"r_lo", grid.r_lo},         {"r_hi", grid.r_hi},
               {"n_r", grid.n_r},           {"n_theta", grid.n_theta},
               {"theta_lo", grid.theta_lo}, {"theta_hi", grid.theta_hi}};
  j["two_rho"] = family.two_rho;
  j["tau"] = family.tau;
  j["lambda"] = family.lambda;
  j["beta"] = family.beta;
  j["two_beta"] = family.two_beta;
  nlohmann::json warr = nlohmann::json::array();
  for (std::size_t k = 0; k < family.weights.size(); ++k) {
    std::vector<double> vals, gr, gt;
    vals.reserve(std::size_t(grid.n_r) * std::size_t(grid.n_theta));
    gr.reserve(vals.capacity());
    gt.reserve(vals.capacity());
    // canonical zero: -0.0 would round-trip to +0.0 through the sampled
    // field's interpolation blend, breaking byte-identical re-emission
    auto san = [](double x) { return x == 0.0 ? 0.0 : x; };
    for (int i = 0; i < grid.n_r; ++i) {
      for (int jj = 0; jj < grid.n_theta; ++jj) {
        Point x{grid.r_node(i), wrap_angle(grid.theta_node(jj))};
        vals.push_back(san(family.weights[k]->value(x)));
        WeightGrad g = family.weights[k]->gradient(x);
        gr.push_back(san(g.d_r));
        gt.push_back(san(g.d_theta));
      }
    }
    nlohmann::json w;
    w["label"] = k < family.labels.size() ? family.labels[k]
                                          : "weight_" + std::to_string(k);
    w["values"] = vals;
    w["grad_r"] = gr;
    w["grad_theta"] = gt;
    warr.push_back(std::move(w));
  }
  j["weights"] = std::move(warr);
  os << j.dump();
}

WeightFamily read_weight_family(std::istream& is) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("weight family file is not valid JSON: ") +
                      e.what());
  }
  try {
    if (need(j, "format").get<std::string>() != "weight-family/1")
      throw SchemaError("weight family file has an unknown format tag");
    const auto& jg = need(j, "grid");
    ScanGrid grid;
    grid.r_lo = need(jg, "r_lo").get<double>();
    grid.r_hi = need(jg, "r_hi").get<double>();
    grid.n_r = need(jg, "n_r").get<int>();
    grid.n_theta = need(jg, "n_theta").get<int>();
    grid.theta_lo = need(jg, "theta_lo").get<double>();
    grid.theta_hi = need(jg, "theta_hi").get<double>();
    if (grid.n_r < 2 || grid.n_theta < 2 || !(grid.r_lo < grid.r_hi))
      throw SchemaError("weight family grid is degenerate");
    WeightFamily fam;
    fam.two_rho = need(j, "two_rho").get<double>();
    fam.tau = need(j, "tau").get<double>();
    fam.lambda = need(j, "lambda").get<double>();
    fam.beta = need(j, "beta").get<double>();
    fam.two_beta = need(j, "two_beta").get<double>();
    const auto& warr = need(j, "weights");
    if (!warr.is_array() || warr.empty())
      throw SchemaError("weight family file carries no weights");
    std::size_t expect = std::size_t(grid.n_r) * std::size_t(grid.n_theta);
    for (const auto& w : warr) {
      fam.labels.push_back(need(w, "label").get<std::string>());
      auto vals = need(w, "values").get<std::vector<double>>();
      auto gr = need(w, "grad_r").get<std::vector<double>>();
      auto gt = need(w, "grad_theta").get<std::vector<double>>();
      if (vals.size() != expect || gr.size() != expect || gt.size() != expect)
        throw SchemaError("weight family arrays have the wrong length");
      fam.weights.push_back(std::make_shared<const SampledWeight>(
          grid, std::move(vals), std::move(gr), std::move(gt)));
    }
    return fam;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("weight family file malformed: ") +
                      e.what());
  }
}

}  // namespace decaylab
