#pragma once

// Dense f64 linear algebra primitives, seeded randomness, and the
// finite-difference machinery the analytical results are checked against.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace palmlab {

// Row-major double matrix; the universal numeric carrier of the project.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Thrown when an iterative routine fails to converge; carries the best
// estimate reached so far.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double best)
      : std::runtime_error(what), best_estimate(best) {}
  double best_estimate;
};

// Deterministic 64-bit generator (splitmix64). Identical seeds produce
// identical u64 streams on every platform; floating-point mappings are
// exact arithmetic on those draws.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  // Standard normal via Box-Muller; consumes two uniform draws per call.
  double normal() {
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

// Standard matrix product with f64 accumulation. Throws on inner-dimension
// mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

// Row-wise softmax with max-subtraction. Entries equal to -inf map to exact
// zeros; a row whose entries are all -inf throws "fully masked row".
// NaN or +inf anywhere in the input throws.
Matrix softmax_rows(const Matrix& m);

// Largest singular value via power iteration on m^T m (or m m^T, whichever
// is smaller). Relative convergence `tol`; throws ConvergenceError carrying
// the best estimate after `max_iter` non-converged iterations.
double spectral_norm(const Matrix& m, double tol = 1e-10, int max_iter = 10000);

double frobenius_norm(const Matrix& m);

// Entries i.i.d. uniform in [-bound, bound], deterministic per rng state.
Matrix init_uniform(int rows, int cols, double bound, SeededRng& rng);

// Glorot-style default bound for a rows x cols weight.
inline double glorot_bound(int rows, int cols) {
  return std::sqrt(6.0 / static_cast<double>(rows + cols));
}

// Central-difference Jacobian of a vector-to-vector map: column j is
// (f(x + h e_j) - f(x - h e_j)) / (2h). Throws if f returns non-finite
// values.
Matrix finite_difference_jacobian(const std::function<Vector(const Vector&)>& f,
                                  const Vector& x, double h = 1e-6);

}  // namespace palmlab
