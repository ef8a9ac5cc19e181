#pragma once

// Closed-form Jacobians of attention outputs with respect to source rows,
// the sensitivity measure built on them, the analytic upper bound, and the
// perturbation harness used by the sensitivity experiments.

#include "palmlab/attention.hpp"
#include "palmlab/core.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace palmlab {

enum class SensitivityMode { encoder_attention, cross_unidirectional };

enum class NormKind { spectral, frobenius };

// One (i, j) query against a fixed attention instance. Indices are
// 1-based, mirroring the written analysis; storage stays 0-based.
//   encoder_attention:    Z = ATT(Y, X, X), row i of Z against row j of X.
//   cross_unidirectional: Z = ATT(Y, [X;Y], [X;Y]) with a causal mask over
//                         the concatenation; row N+i against row j (j <= N).
struct SensitivityQuery {
  Matrix X;  // N x d source rows
  Matrix Y;  // t x d target rows, i <= t
  Matrix A;  // d x d combined attention matrix (W_Q W_K^T)^T
  Matrix W;  // d x d value projection
  int i = 1;
  int j = 1;
  SensitivityMode mode = SensitivityMode::encoder_attention;

  void validate() const;
};

// d/dx_j of z_i for Z = Softmax(Y A~^T X^T) X W, where A~ = A / sqrt(d)
// folds the attention scaling into A so the closed form matches the
// executable attention. Returns the exact d x d Jacobian.
Matrix encoder_attention_jacobian(const SensitivityQuery& q);

// d/dq_j of z_i for self attention Z = Softmax(Q A~^T Q^T) Q W, including
// the delta term when i = j. Pass a mask to differentiate the masked
// softmax; the default full mask recovers the unmasked form.
Matrix self_attention_jacobian(const Matrix& Q, const Matrix& A, const Matrix& W, int i, int j);
Matrix self_attention_jacobian(const Matrix& Q, const Matrix& A, const Matrix& W, int i, int j,
                               const AttentionMask& mask);

// Cross-unidirectional Jacobian: delegates to self_attention_jacobian on
// the concatenation [X; Y] at query row N+i under a causal mask. Requires
// j <= N; target-row sensitivity is out of scope.
Matrix cross_attention_jacobian(const SensitivityQuery& q);

// S_ij = ||J_ij||: operator 2-norm by default, Frobenius on request.
double sensitivity(const Matrix& jac, NormKind norm = NormKind::spectral);

// c3 * (1/(N+i) + sqrt(ln(1/delta))); the encoder case is step = 0.
// Monotone decreasing in both step and n_source.
double theorem_bound(int n_source, int step, double delta, double c3);

// Empirical check of the E(p_ij) = 1/d_X assumption: softmax rows of
// Q K^T / sqrt(d) for Gaussian Q, K, column means accumulated over
// `trials` draws. Returns the maximum relative deviation from 1/d_X.
double expected_attention_check(SeededRng& rng, int d, int d_x, int trials);

// Draws a perturbation with ||dx|| = eps, applies it to source row j,
// recomputes attention output row i, and returns ||dz_i|| / ||dx_j||.
double perturbation_ratio(const SensitivityQuery& q, double eps, SeededRng& rng);

// Per-step aggregate of sensitivities, the fitted bound, and measured
// perturbation ratios; the data behind the decay plots.
struct SensitivityReport {
  std::vector<int> steps;
  std::vector<double> mean_sensitivity;
  std::vector<double> std_sensitivity;
  std::vector<double> bound;
  std::vector<double> perturbation_ratio;
  std::string mode;
  std::vector<std::uint64_t> seeds;
};

// For each step i in 1..i_max, averages sensitivity and perturbation ratio
// over all j in 1..N and all seeds, with fresh U[-1,1] X, Y, A, W per seed.
// The bound column uses c3 fitted from the step-1 mean (delta = 0.5).
SensitivityReport sensitivity_curve(int d, int n_source, int i_max, SensitivityMode mode,
                                    const std::vector<std::uint64_t>& seeds,
                                    NormKind norm = NormKind::spectral,
                                    double perturb_eps = 1e-4);

// Same protocol through the partial-attention path: output row N+i of
// ATT(Q, P, P) with P built from the source slice only. The sensitivity
// column is a central-difference Jacobian norm; the bound column is the
// fixed-key-count bound (step 0 for every i).
SensitivityReport palm_sensitivity_curve(int d, int n_source, int i_max,
                                         const std::vector<std::uint64_t>& seeds,
                                         NormKind norm = NormKind::spectral,
                                         double perturb_eps = 1e-4);

// CSV schema: step,mean_sensitivity,std_sensitivity,bound,perturbation_ratio
// with floats printed to 17 significant digits.
void write_sensitivity_csv(const SensitivityReport& report, std::ostream& out);

// Spearman rank correlation with average ranks on ties.
double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace palmlab
