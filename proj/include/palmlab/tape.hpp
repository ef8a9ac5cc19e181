#pragma once

// Minimal reverse-mode autodiff over Matrix values. A Tape records ops in
// creation order; backward() replays them in reverse, accumulating grads.
// Covers exactly the ops the model forward passes need.

#include "palmlab/attention.hpp"
#include "palmlab/core.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace palmlab {

class Tape {
 public:
  using Var = int;

  // Leaf node; grads accumulate here.
  Var input(Matrix value);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }
  const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].grad; }

  Var add(Var a, Var b);
  Var scale(Var a, double s);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add_row_vector(Var a, Var bias);  // bias is 1 x cols, broadcast over rows
  Var relu(Var a);
  Var tanh(Var a);
  Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);
  Var masked_softmax_rows(Var logits, const AttentionMask& mask);
  Var dropout(Var a, double rate, SeededRng& rng, bool train_mode);
  Var concat_rows(Var a, Var b);
  Var slice_rows(Var a, int begin, int count);
  Var slice_cols(Var a, int begin, int count);
  Var concat_cols(const std::vector<Var>& parts);
  Var gather_rows(Var table, std::vector<int> ids);
  // Sum over rows r with weight[r] != 0 of weight[r] * nll(logits_r, targets[r]);
  // result is 1 x 1.
  Var nll_sum(Var logits, std::vector<int> targets, std::vector<double> weights);

  // Seeds d(root)/d(root) = 1 and propagates; root must be 1 x 1.
  void backward(Var root);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&)> backprop;  // empty for leaves
  };

  Var emplace(Matrix value, std::function<void(Tape&)> backprop);
  Matrix& grad_ref(Var v);

  std::vector<Node> nodes_;
};

}  // namespace palmlab
