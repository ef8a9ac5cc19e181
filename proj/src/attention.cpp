#include "palmlab/attention.hpp"

#include <cmath>
#include <limits>

namespace palmlab {

AttentionMask AttentionMask::slice_rows(int begin, int count) const {
  if (begin < 0 || count < 0 || begin + count > rows_) {
    throw std::invalid_argument("AttentionMask::slice_rows: window out of range");
  }
  AttentionMask out(count, cols_);
  for (int r = 0; r < count; ++r)
    for (int c = 0; c < cols_; ++c) out.set(r, c, allowed(begin + r, c));
  return out;
}

void AttentionMask::validate() const {
  for (int r = 0; r < rows_; ++r) {
    bool any = false;
    for (int c = 0; c < cols_ && !any; ++c) any = allowed(r, c);
    if (!any) throw std::invalid_argument("AttentionMask: fully masked row " + std::to_string(r));
  }
}

AttentionMask make_causal_mask(int n) {
  if (n < 1) throw std::invalid_argument("make_causal_mask: n must be >= 1");
  AttentionMask m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

AttentionMask make_cross_unidirectional_mask(int s_len, int t_len) {
  if (s_len < 1) throw std::invalid_argument("make_cross_unidirectional_mask: s_len must be >= 1");
  return make_causal_mask(s_len + t_len);
}

AttentionMask make_prefix_mask(int s_len, int t_len) {
  if (s_len < 1) throw std::invalid_argument("make_prefix_mask: s_len must be >= 1");
  const int n = s_len + t_len;
  AttentionMask m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m.set(i, j, j < s_len || j <= i);
  return m;
}

AttentionResult attend(const Matrix& q, const Matrix& k, const Matrix& v,
                       const AttentionWeights& w, const AttentionMask& mask) {
  const int d = w.width();
  if (q.cols() != d || k.cols() != d || v.cols() != d) {
    throw std::invalid_argument("attend: q/k/v column count must equal model width");
  }
  if (k.rows() != v.rows()) throw std::invalid_argument("attend: k and v row counts differ");
  if (mask.rows() != q.rows() || mask.cols() != k.rows()) {
    throw std::invalid_argument("attend: mask dimensions must be (q.rows, k.rows)");
  }
  Matrix logits = (q * w.w_q) * (k * w.w_k).transpose() / std::sqrt(static_cast<double>(d));
  const double ninf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.rows(); ++i)
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      if (!mask.allowed(static_cast<int>(i), static_cast<int>(j))) logits(i, j) = ninf;
  AttentionResult res;
  res.probs = softmax_rows(logits);
  res.output = res.probs * (v * w.w_v);
  return res;
}

PartialAttentionParams PartialAttentionParams::random(int d, SeededRng& rng, double dropout) {
  const double b = glorot_bound(d, d);
  PartialAttentionParams p;
  p.w_p1 = init_uniform(d, d, b, rng);
  p.w_p2 = init_uniform(d, d, b, rng);
  p.b_p1 = Matrix::Zero(1, d);
  p.b_p2 = Matrix::Zero(1, d);
  p.inner = AttentionWeights::random(d, rng);
  p.dropout_rate = dropout;
  return p;
}

PartialAttentionParams PartialAttentionParams::zero(int d) {
  PartialAttentionParams p;
  p.w_p1 = Matrix::Zero(d, d);
  p.w_p2 = Matrix::Zero(d, d);
  p.b_p1 = Matrix::Zero(1, d);
  p.b_p2 = Matrix::Zero(1, d);
  p.inner = AttentionWeights::zero(d);
  p.dropout_rate = 0.0;
  return p;
}

Matrix dropout_matrix(const Matrix& m, double rate, SeededRng& rng, bool train_mode) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!train_mode || rate == 0.0) return m;
  Matrix out = m;
  const double scale = 1.0 / (1.0 - rate);
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cols(); ++c)
      out(r, c) = (rng.next_double() < rate) ? 0.0 : out(r, c) * scale;
  return out;
}

Matrix partial_attention_block(const Matrix& q_l, int s_len, const PartialAttentionParams& p,
                               SeededRng& rng, bool train_mode) {
  if (s_len < 1) throw std::invalid_argument("partial_attention_block: s_len must be >= 1");
  if (s_len > q_l.rows()) {
    throw std::invalid_argument("partial_attention_block: s_len exceeds q_l row count");
  }
  const Matrix src = q_l.topRows(s_len);
  const Matrix ones = Matrix::Ones(s_len, 1);
  Matrix p1 = (src * p.w_p1 + ones * p.b_p1).array().tanh().matrix();
  p1 = dropout_matrix(p1, p.dropout_rate, rng, train_mode);
  Matrix p2 = p1 * p.w_p2 + ones * p.b_p2;
  p2 = dropout_matrix(p2, p.dropout_rate, rng, train_mode);
  const Matrix pl = p2 + p1;
  return attend(q_l, pl, pl, p.inner, AttentionMask::full(static_cast<int>(q_l.rows()), s_len))
      .output;
}

}  // namespace palmlab
