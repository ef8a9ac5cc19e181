#include "palmlab/jacobian.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>

namespace palmlab {

namespace {

constexpr double kCurveDelta = 0.5;

// Masked softmax probabilities of Q A~^T K^T with A~ = A/sqrt(d).
Matrix scaled_probs(const Matrix& q, const Matrix& k, const Matrix& a, const AttentionMask& mask) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix logits = q * (a.transpose() * scale) * k.transpose();
  const double ninf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.rows(); ++i)
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      if (!mask.allowed(static_cast<int>(i), static_cast<int>(j))) logits(i, j) = ninf;
  return softmax_rows(logits);
}

Matrix concat_rows(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  return out;
}

}  // namespace

void SensitivityQuery::validate() const {
  const int n = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());
  if (n < 1 || d < 1) throw std::invalid_argument("SensitivityQuery: X must be non-empty");
  if (Y.cols() != d) throw std::invalid_argument("SensitivityQuery: X and Y widths differ");
  if (A.rows() != d || A.cols() != d || W.rows() != d || W.cols() != d) {
    throw std::invalid_argument("SensitivityQuery: A and W must be d x d");
  }
  if (j < 1 || j > n) throw std::out_of_range("SensitivityQuery: source index j out of range");
  if (i < 1 || i > Y.rows()) throw std::out_of_range("SensitivityQuery: step index i out of range");
}

Matrix encoder_attention_jacobian(const SensitivityQuery& q) {
  if (q.mode != SensitivityMode::encoder_attention) {
    throw std::invalid_argument("encoder_attention_jacobian: wrong mode");
  }
  q.validate();
  const int n = static_cast<int>(q.X.rows());
  const int d = static_cast<int>(q.X.cols());
  const Matrix a_scaled = q.A / std::sqrt(static_cast<double>(d));
  const Matrix probs =
      scaled_probs(q.Y, q.X, q.A, AttentionMask::full(static_cast<int>(q.Y.rows()), n));
  const Vector p_i = probs.row(q.i - 1).transpose();
  const double p_ij = p_i(q.j - 1);
  // e_ji Y A~^T: zero except row j, which carries row i of Y A~^T.
  Matrix e_term = Matrix::Zero(n, d);
  e_term.row(q.j - 1) = (q.Y * a_scaled.transpose()).row(q.i - 1);
  const Matrix softmax_jac = Matrix(p_i.asDiagonal()) - p_i * p_i.transpose();
  const Matrix inner = q.X.transpose() * softmax_jac * e_term + p_ij * Matrix::Identity(d, d);
  return q.W.transpose() * inner;
}

Matrix self_attention_jacobian(const Matrix& Q, const Matrix& A, const Matrix& W, int i, int j) {
  return self_attention_jacobian(Q, A, W, i, j,
                                 AttentionMask::full(static_cast<int>(Q.rows()),
                                                     static_cast<int>(Q.rows())));
}

Matrix self_attention_jacobian(const Matrix& Q, const Matrix& A, const Matrix& W, int i, int j,
                               const AttentionMask& mask) {
  const int n = static_cast<int>(Q.rows());
  const int d = static_cast<int>(Q.cols());
  if (i < 1 || i > n || j < 1 || j > n) {
    throw std::out_of_range("self_attention_jacobian: index out of range");
  }
  if (A.rows() != d || A.cols() != d || W.rows() != d || W.cols() != d) {
    throw std::invalid_argument("self_attention_jacobian: A and W must be d x d");
  }
  if (mask.rows() != n || mask.cols() != n) {
    throw std::invalid_argument("self_attention_jacobian: mask must be Q.rows square");
  }
  const Matrix a_scaled = A / std::sqrt(static_cast<double>(d));
  const Matrix probs = scaled_probs(Q, Q, A, mask);
  const Vector p_i = probs.row(i - 1).transpose();
  const double p_ij = p_i(j - 1);
  Matrix d_logits = Matrix::Zero(n, d);
  d_logits.row(j - 1) = (Q * a_scaled.transpose()).row(i - 1);
  if (i == j) d_logits += Q * a_scaled;
  const Matrix softmax_jac = Matrix(p_i.asDiagonal()) - p_i * p_i.transpose();
  const Matrix inner = Q.transpose() * softmax_jac * d_logits + p_ij * Matrix::Identity(d, d);
  return W.transpose() * inner;
}

Matrix cross_attention_jacobian(const SensitivityQuery& q) {
  if (q.mode != SensitivityMode::cross_unidirectional) {
    throw std::invalid_argument("cross_attention_jacobian: wrong mode");
  }
  q.validate();
  const int n = static_cast<int>(q.X.rows());
  if (q.j > n) throw std::out_of_range("cross_attention_jacobian: target-row sensitivity out of scope");
  const Matrix qc = concat_rows(q.X, q.Y);
  const AttentionMask mask = make_causal_mask(static_cast<int>(qc.rows()));
  return self_attention_jacobian(qc, q.A, q.W, n + q.i, q.j, mask);
}

double sensitivity(const Matrix& jac, NormKind norm) {
  if (jac.rows() == 0 || jac.cols() == 0) throw std::invalid_argument("sensitivity: empty Jacobian");
  return norm == NormKind::spectral ? spectral_norm(jac) : frobenius_norm(jac);
}

double theorem_bound(int n_source, int step, double delta, double c3) {
  if (n_source < 1) throw std::invalid_argument("theorem_bound: N must be >= 1");
  if (step < 0) throw std::invalid_argument("theorem_bound: step must be >= 0");
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("theorem_bound: delta must be in (0, 1)");
  if (c3 <= 0.0) throw std::invalid_argument("theorem_bound: c3 must be positive");
  return c3 * (1.0 / static_cast<double>(n_source + step) + std::sqrt(std::log(1.0 / delta)));
}

double expected_attention_check(SeededRng& rng, int d, int d_x, int trials) {
  if (trials < 1000) throw std::invalid_argument("expected_attention_check: trials must be >= 1000");
  if (d < 1 || d_x < 1) throw std::invalid_argument("expected_attention_check: bad dimensions");
  const int query_rows = 4;
  Vector col_sums = Vector::Zero(d_x);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (int t = 0; t < trials; ++t) {
    Matrix q(query_rows, d);
    Matrix k(d_x, d);
    for (Eigen::Index r = 0; r < q.rows(); ++r)
      for (Eigen::Index c = 0; c < q.cols(); ++c) q(r, c) = rng.normal();
    for (Eigen::Index r = 0; r < k.rows(); ++r)
      for (Eigen::Index c = 0; c < k.cols(); ++c) k(r, c) = rng.normal();
    const Matrix probs = softmax_rows(q * k.transpose() * scale);
    col_sums += probs.colwise().sum().transpose();
  }
  const double samples = static_cast<double>(trials) * query_rows;
  const double expected = 1.0 / static_cast<double>(d_x);
  double worst = 0.0;
  for (int c = 0; c < d_x; ++c) {
    worst = std::max(worst, std::abs(col_sums(c) / samples - expected) / expected);
  }
  return worst;
}

double perturbation_ratio(const SensitivityQuery& q, double eps, SeededRng& rng) {
  if (eps <= 0.0) throw std::invalid_argument("perturbation_ratio: eps must be positive");
  q.validate();
  const int n = static_cast<int>(q.X.rows());
  const int d = static_cast<int>(q.X.cols());
  if (q.mode == SensitivityMode::cross_unidirectional && q.j > n) {
    throw std::out_of_range("perturbation_ratio: target-row sensitivity out of scope");
  }
  Vector delta(d);
  for (int c = 0; c < d; ++c) delta(c) = rng.normal();
  const double norm = delta.norm();
  if (norm == 0.0) return 0.0;
  delta *= eps / norm;

  const auto output_row = [&](const Matrix& x_src) -> Vector {
    if (q.mode == SensitivityMode::encoder_attention) {
      const Matrix probs =
          scaled_probs(q.Y, x_src, q.A, AttentionMask::full(static_cast<int>(q.Y.rows()), n));
      return (probs * x_src * q.W).row(q.i - 1).transpose();
    }
    const Matrix qc = concat_rows(x_src, q.Y);
    const AttentionMask mask = make_causal_mask(static_cast<int>(qc.rows()));
    const Matrix probs = scaled_probs(qc, qc, q.A, mask);
    return (probs * qc * q.W).row(n + q.i - 1).transpose();
  };

  const Vector base = output_row(q.X);
  Matrix perturbed = q.X;
  perturbed.row(q.j - 1) += delta.transpose();
  const Vector moved = output_row(perturbed);
  return (moved - base).norm() / eps;
}

namespace {

struct StepAccumulator {
  std::vector<double> sens_samples;
  std::vector<double> ratio_samples;
};

SensitivityReport assemble_report(std::vector<StepAccumulator>& acc, int n_source, int i_max,
                                  const std::string& mode, const std::vector<std::uint64_t>& seeds,
                                  bool fixed_key_count) {
  SensitivityReport rep;
  rep.mode = mode;
  rep.seeds = seeds;
  for (int i = 1; i <= i_max; ++i) {
    const auto& a = acc[static_cast<std::size_t>(i - 1)];
    const double n_samples = static_cast<double>(a.sens_samples.size());
    const double mean =
        std::accumulate(a.sens_samples.begin(), a.sens_samples.end(), 0.0) / n_samples;
    double var = 0.0;
    for (double s : a.sens_samples) var += (s - mean) * (s - mean);
    var /= n_samples;
    const double ratio =
        std::accumulate(a.ratio_samples.begin(), a.ratio_samples.end(), 0.0) /
        static_cast<double>(a.ratio_samples.size());
    rep.steps.push_back(i);
    rep.mean_sensitivity.push_back(mean);
    rep.std_sensitivity.push_back(std::sqrt(var));
    rep.perturbation_ratio.push_back(ratio);
  }
  // c3 fitted so the bound passes through the step-1 mean; shape reference only.
  const double base_term = std::sqrt(std::log(1.0 / kCurveDelta));
  const int first_step = fixed_key_count ? 0 : 1;
  const double denom = 1.0 / static_cast<double>(n_source + first_step) + base_term;
  const double c3 = std::max(rep.mean_sensitivity.front() / denom, 1e-12);
  for (int i = 1; i <= i_max; ++i) {
    rep.bound.push_back(theorem_bound(n_source, fixed_key_count ? 0 : i, kCurveDelta, c3));
  }
  return rep;
}

}  // namespace

SensitivityReport sensitivity_curve(int d, int n_source, int i_max, SensitivityMode mode,
                                    const std::vector<std::uint64_t>& seeds, NormKind norm,
                                    double perturb_eps) {
  if (i_max < 1) throw std::invalid_argument("sensitivity_curve: i_max must be >= 1");
  if (seeds.empty()) throw std::invalid_argument("sensitivity_curve: at least one seed required");
  std::vector<StepAccumulator> acc(static_cast<std::size_t>(i_max));
  for (const std::uint64_t seed : seeds) {
    SeededRng rng(seed);
    const Matrix x = init_uniform(n_source, d, 1.0, rng);
    const Matrix y = init_uniform(i_max, d, 1.0, rng);
    const Matrix a = init_uniform(d, d, 1.0, rng);
    const Matrix w = init_uniform(d, d, 1.0, rng);
    for (int i = 1; i <= i_max; ++i) {
      SensitivityQuery q;
      q.X = x;
      q.Y = y.topRows(i);
      q.A = a;
      q.W = w;
      q.i = i;
      q.mode = mode;
      for (int j = 1; j <= n_source; ++j) {
        q.j = j;
        const Matrix jac = (mode == SensitivityMode::encoder_attention)
                               ? encoder_attention_jacobian(q)
                               : cross_attention_jacobian(q);
        acc[static_cast<std::size_t>(i - 1)].sens_samples.push_back(sensitivity(jac, norm));
        acc[static_cast<std::size_t>(i - 1)].ratio_samples.push_back(
            perturbation_ratio(q, perturb_eps, rng));
      }
    }
  }
  const std::string name =
      mode == SensitivityMode::encoder_attention ? "encoder" : "cross";
  return assemble_report(acc, n_source, i_max, name, seeds, false);
}

SensitivityReport palm_sensitivity_curve(int d, int n_source, int i_max,
                                         const std::vector<std::uint64_t>& seeds, NormKind norm,
                                         double perturb_eps) {
  if (i_max < 1) throw std::invalid_argument("palm_sensitivity_curve: i_max must be >= 1");
  if (seeds.empty()) throw std::invalid_argument("palm_sensitivity_curve: at least one seed required");
  std::vector<StepAccumulator> acc(static_cast<std::size_t>(i_max));
  SeededRng dropout_rng(0);  // dropout disabled; placeholder stream
  for (const std::uint64_t seed : seeds) {
    SeededRng rng(seed);
    const Matrix x = init_uniform(n_source, d, 1.0, rng);
    const Matrix y = init_uniform(i_max, d, 1.0, rng);
    PartialAttentionParams params;
    params.w_p1 = init_uniform(d, d, 1.0, rng);
    params.w_p2 = init_uniform(d, d, 1.0, rng);
    params.b_p1 = init_uniform(1, d, 1.0, rng);
    params.b_p2 = init_uniform(1, d, 1.0, rng);
    params.inner = {init_uniform(d, d, 1.0, rng), init_uniform(d, d, 1.0, rng),
                    init_uniform(d, d, 1.0, rng)};
    for (int i = 1; i <= i_max; ++i) {
      const Matrix q_l = concat_rows(x, y.topRows(i));
      const int out_row = n_source + i - 1;
      for (int j = 1; j <= n_source; ++j) {
        // Row out_row of the block output as a function of source row j.
        const auto f = [&](const Vector& xj) -> Vector {
          Matrix q_mod = q_l;
          q_mod.row(j - 1) = xj.transpose();
          return partial_attention_block(q_mod, n_source, params, dropout_rng, false)
              .row(out_row)
              .transpose();
        };
        const Vector xj = q_l.row(j - 1).transpose();
        const Matrix jac = finite_difference_jacobian(f, xj, 1e-6);
        acc[static_cast<std::size_t>(i - 1)].sens_samples.push_back(sensitivity(jac, norm));

        Vector delta(d);
        for (int c = 0; c < d; ++c) delta(c) = rng.normal();
        if (delta.norm() > 0.0) delta *= perturb_eps / delta.norm();
        const Vector base = f(xj);
        const Vector moved = f(xj + delta);
        acc[static_cast<std::size_t>(i - 1)].ratio_samples.push_back((moved - base).norm() /
                                                                     perturb_eps);
      }
    }
  }
  return assemble_report(acc, n_source, i_max, "palm", seeds, true);
}

void write_sensitivity_csv(const SensitivityReport& report, std::ostream& out) {
  const std::size_t n = report.steps.size();
  if (report.mean_sensitivity.size() != n || report.std_sensitivity.size() != n ||
      report.bound.size() != n || report.perturbation_ratio.size() != n) {
    throw std::invalid_argument("write_sensitivity_csv: series lengths differ");
  }
  out << "step,mean_sensitivity,std_sensitivity,bound,perturbation_ratio\n";
  char buf[512];
  for (std::size_t r = 0; r < n; ++r) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", report.steps[r],
                  report.mean_sensitivity[r], report.std_sensitivity[r], report.bound[r],
                  report.perturbation_ratio[r]);
    out << buf;
  }
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n);
  std::size_t pos = 0;
  while (pos < n) {
    std::size_t end = pos + 1;
    while (end < n && xs[order[end]] == xs[order[pos]]) ++end;
    const double rank = 0.5 * static_cast<double>(pos + end - 1) + 1.0;
    for (std::size_t k = pos; k < end; ++k) ranks[order[k]] = rank;
    pos = end;
  }
  return ranks;
}

}  // namespace

double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw std::invalid_argument("spearman_rho: need two equal-length series");
  }
  const std::vector<double> rx = average_ranks(xs);
  const std::vector<double> ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double num = 0.0, dx = 0.0, dy = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    num += (rx[k] - mx) * (ry[k] - my);
    dx += (rx[k] - mx) * (rx[k] - mx);
    dy += (ry[k] - my) * (ry[k] - my);
  }
  if (dx == 0.0 || dy == 0.0) return 0.0;
  return num / std::sqrt(dx * dy);
}

}  // namespace palmlab
