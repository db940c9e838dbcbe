#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace decaylab {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

using Complex = std::complex<double>;

// ---------------------------------------------------------------- errors

// parameter or point outside a declared domain / window
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// scenario / input file violates the schema
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// a geometric construction could not be completed (missing damped ball, ...)
struct ConstructionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// numerical failure that must abort (NaN state, singular solve, ...)
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- angles

inline double wrap_angle(double th) {
  double w = std::fmod(th, kTwoPi);
  if (w < 0) w += kTwoPi;
  return w;
}

// signed angular difference a-b wrapped to (-pi, pi]
inline double angle_diff(double a, double b) {
  double d = std::fmod(a - b, kTwoPi);
  if (d <= -kPi) d += kTwoPi;
  if (d > kPi) d -= kTwoPi;
  return d;
}

// ---------------------------------------------------------------- smoothstep

// quintic smoothstep: C^2 on all of R after clamping, s(0)=0, s(1)=1
inline double smoothstep5(double t) {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  return t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
}

inline double smoothstep5_d(double t) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  return 30.0 * t * t * (1.0 - t) * (1.0 - t);
}

inline double smoothstep5_dd(double t) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  return 60.0 * t * (1.0 - 3.0 * t + 2.0 * t * t);
}

// septic smoothstep: C^3 on all of R after clamping
inline double smoothstep7(double t) {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  return t * t * t * t * (35.0 + t * (-84.0 + t * (70.0 - 20.0 * t)));
}

inline double smoothstep7_d(double t) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  double u = t * (1.0 - t);
  return 140.0 * u * u * u;
}

// nonic smoothstep: C^4 on all of R after clamping
inline double smoothstep9(double t) {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  double t5 = t * t * t * t * t;
  return t5 * (126.0 + t * (-420.0 + t * (540.0 + t * (-315.0 + 70.0 * t))));
}

inline double smoothstep9_d(double t) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  double u = t * (1.0 - t);
  return 630.0 * u * u * u * u;
}

// smoothstep with configurable smoothness order: n continuous derivatives
inline double smoothstep_n(double t, int n) {
  switch (n) {
    case 3: return smoothstep7(t);
    case 4: return smoothstep9(t);
    default: return smoothstep5(t);
  }
}

inline double smoothstep_n_d(double t, int n) {
  switch (n) {
    case 3: return smoothstep7_d(t);
    case 4: return smoothstep9_d(t);
    default: return smoothstep5_d(t);
  }
}

// plateau bump profile of the distance d: 1 on [0, r_in], 0 on [r_out, inf)
inline double plateau(double d, double r_in, double r_out, int smoothness = 2) {
  return 1.0 - smoothstep_n((d - r_in) / (r_out - r_in), smoothness);
}

inline double plateau_d(double d, double r_in, double r_out,
                        int smoothness = 2) {
  return -smoothstep_n_d((d - r_in) / (r_out - r_in), smoothness) /
         (r_out - r_in);
}

// ---------------------------------------------------------------- hashing

inline std::uint64_t fnv1a(std::string_view bytes,
                           std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------- rng

// Deterministic stream: splitmix64-expanded seed feeding xoshiro256**.
// Distribution transforms are written out so results do not depend on the
// standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // independent stream derived from a stable name
  Rng substream(std::string_view name) const {
    return Rng(seed_ ^ fnv1a(name));
  }

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  double normal();   // standard normal, Box-Muller
  std::uint64_t integer(std::uint64_t n);  // [0, n), rejection sampled

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------- parallel

// Runs fn(i) for i in [0, n). Results must be written to preallocated
// per-index slots so the outcome is independent of the worker count.
// Worker count: explicit argument, else DECAYLAB_WORKERS, else hardware.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  int workers = 0);

int effective_worker_count(int requested = 0);

// ---------------------------------------------------------------- text io

std::string g17(double x);  // shortest round-trip decimal, %.17g
std::string format_double(double x, int prec);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// CSV with fixed formatting; writes are buffered and flushed on save()
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void row(const std::vector<std::string>& cells);
  void row_values(const std::vector<double>& values);
  std::string str() const;
  void save(const std::string& path) const;

 private:
  std::size_t ncols_;
  std::string buf_;
};

}  // namespace decaylab
