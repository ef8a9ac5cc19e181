#pragma once

// Masked scaled dot-product attention, the mask constructors that
// distinguish the model variants, and the partial-attention block.

#include "palmlab/core.hpp"

#include <cstdint>
#include <vector>

namespace palmlab {

// Single-head attention parameters W_Q, W_K, W_V, all d x d.
struct AttentionWeights {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;

  int width() const { return static_cast<int>(w_q.rows()); }

  // A^T = W_Q W_K^T, recomputed on demand so it can never go stale.
  Matrix a_transposed() const { return w_q * w_k.transpose(); }

  static AttentionWeights random(int d, SeededRng& rng) {
    const double b = glorot_bound(d, d);
    return {init_uniform(d, d, b, rng), init_uniform(d, d, b, rng), init_uniform(d, d, b, rng)};
  }
  static AttentionWeights zero(int d) {
    return {Matrix::Zero(d, d), Matrix::Zero(d, d), Matrix::Zero(d, d)};
  }
};

// Boolean allow-grid: rows index query positions, cols index key positions.
// Every query row must keep at least one allowed key.
class AttentionMask {
 public:
  AttentionMask(int rows, int cols, bool allow_all = false)
      : rows_(rows), cols_(cols), allowed_(static_cast<std::size_t>(rows) * cols, allow_all ? 1 : 0) {}

  static AttentionMask full(int rows, int cols) { return AttentionMask(rows, cols, true); }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool allowed(int r, int c) const { return allowed_[static_cast<std::size_t>(r) * cols_ + c] != 0; }
  void set(int r, int c, bool v) { allowed_[static_cast<std::size_t>(r) * cols_ + c] = v ? 1 : 0; }

  // Row-window view [begin, begin+count), used for cross-attention queries.
  AttentionMask slice_rows(int begin, int count) const;

  // Throws unless every query row keeps at least one allowed key.
  void validate() const;

 private:
  int rows_;
  int cols_;
  std::vector<std::uint8_t> allowed_;
};

// allowed(i, j) iff j <= i.
AttentionMask make_causal_mask(int n);

// Causal mask over the concatenation [source; target]; the named constructor
// documents the cross-unidirectional reading used by the decoder.
AttentionMask make_cross_unidirectional_mask(int s_len, int t_len);

// Source block fully visible to every position, target part causal:
// allowed(i, j) iff j < s_len or j <= i.
AttentionMask make_prefix_mask(int s_len, int t_len);

struct AttentionResult {
  Matrix output;  // q.rows x d
  Matrix probs;   // post-softmax P, q.rows x k.rows
};

// Z = Softmax(Q W_Q W_K^T K^T / sqrt(d)) V W_V with disallowed logits set to
// -inf before the row softmax. Exposes P for analysis callers.
AttentionResult attend(const Matrix& q, const Matrix& k, const Matrix& v,
                       const AttentionWeights& w, const AttentionMask& mask);

// Parameters of the partial-attention feedforward F_P plus its inner
// attention.
struct PartialAttentionParams {
  Matrix w_p1;  // d x d
  Matrix w_p2;  // d x d
  Matrix b_p1;  // 1 x d
  Matrix b_p2;  // 1 x d
  AttentionWeights inner;
  double dropout_rate = 0.0;

  static PartialAttentionParams random(int d, SeededRng& rng, double dropout = 0.0);
  static PartialAttentionParams zero(int d);
};

// Inverted dropout: keeps entries with probability 1-rate and rescales by
// 1/(1-rate). Identity when train_mode is off or rate is 0.
Matrix dropout_matrix(const Matrix& m, double rate, SeededRng& rng, bool train_mode);

// P1 = Dropout(tanh(Q[0:s] W_p1 + 1 b_p1)); P2 = Dropout(P1 W_p2 + 1 b_p2);
// P = P2 + P1; returns ATT(Q, P, P) under a full (q.rows x s_len) mask.
// The key/value length is s_len no matter how many target rows Q carries.
Matrix partial_attention_block(const Matrix& q_l, int s_len, const PartialAttentionParams& p,
                               SeededRng& rng, bool train_mode);

}  // namespace palmlab
