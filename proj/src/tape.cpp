#include "palmlab/tape.hpp"

#include <cmath>
#include <limits>

namespace palmlab {

Tape::Var Tape::emplace(Matrix value, std::function<void(Tape&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

Matrix& Tape::grad_ref(Var v) { return nodes_[static_cast<std::size_t>(v)].grad; }

Tape::Var Tape::input(Matrix value) { return emplace(std::move(value), {}); }

Tape::Var Tape::add(Var a, Var b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
    throw std::invalid_argument("tape add: shape mismatch");
  }
  Var out = emplace(value(a) + value(b), {});
  nodes_.back().backprop = [a, b, out](Tape& t) {
    t.grad_ref(a) += t.grad(out);
    t.grad_ref(b) += t.grad(out);
  };
  return out;
}

Tape::Var Tape::scale(Var a, double s) {
  Var out = emplace(value(a) * s, {});
  nodes_.back().backprop = [a, out, s](Tape& t) { t.grad_ref(a) += s * t.grad(out); };
  return out;
}

Tape::Var Tape::matmul(Var a, Var b) {
  if (value(a).cols() != value(b).rows()) throw std::invalid_argument("tape matmul: shape mismatch");
  Var out = emplace(value(a) * value(b), {});
  nodes_.back().backprop = [a, b, out](Tape& t) {
    t.grad_ref(a) += t.grad(out) * t.value(b).transpose();
    t.grad_ref(b) += t.value(a).transpose() * t.grad(out);
  };
  return out;
}

Tape::Var Tape::transpose(Var a) {
  Var out = emplace(value(a).transpose(), {});
  nodes_.back().backprop = [a, out](Tape& t) { t.grad_ref(a) += t.grad(out).transpose(); };
  return out;
}

Tape::Var Tape::add_row_vector(Var a, Var bias) {
  if (value(bias).rows() != 1 || value(bias).cols() != value(a).cols()) {
    throw std::invalid_argument("tape add_row_vector: bias must be 1 x cols");
  }
  Matrix v = value(a);
  v.rowwise() += value(bias).row(0);
  Var out = emplace(std::move(v), {});
  nodes_.back().backprop = [a, bias, out](Tape& t) {
    t.grad_ref(a) += t.grad(out);
    t.grad_ref(bias).row(0) += t.grad(out).colwise().sum();
  };
  return out;
}

Tape::Var Tape::relu(Var a) {
  Matrix v = value(a).cwiseMax(0.0);
  Var out = emplace(std::move(v), {});
  nodes_.back().backprop = [a, out](Tape& t) {
    const Matrix& x = t.value(a);
    Matrix masked = t.grad(out);
    for (Eigen::Index r = 0; r < masked.rows(); ++r)
      for (Eigen::Index c = 0; c < masked.cols(); ++c)
        if (x(r, c) <= 0.0) masked(r, c) = 0.0;
    t.grad_ref(a) += masked;
  };
  return out;
}

Tape::Var Tape::tanh(Var a) {
  Matrix v = value(a).array().tanh().matrix();
  Var out = emplace(std::move(v), {});
  nodes_.back().backprop = [a, out](Tape& t) {
    const Matrix& y = t.value(out);
    t.grad_ref(a) += (t.grad(out).array() * (1.0 - y.array().square())).matrix();
  };
  return out;
}

Tape::Var Tape::layer_norm(Var a, Var gain, Var bias, double eps) {
  const Matrix& x = value(a);
  const Eigen::Index rows = x.rows(), cols = x.cols();
  if (value(gain).rows() != 1 || value(gain).cols() != cols || value(bias).rows() != 1 ||
      value(bias).cols() != cols) {
    throw std::invalid_argument("tape layer_norm: gain/bias must be 1 x cols");
  }
  auto xhat = std::make_shared<Matrix>(rows, cols);
  auto inv_std = std::make_shared<Vector>(rows);
  Matrix y(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / static_cast<double>(cols);
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)(r) = istd;
    xhat->row(r) = (x.row(r).array() - mean).matrix() * istd;
    y.row(r) =
        (xhat->row(r).array() * value(gain).row(0).array() + value(bias).row(0).array()).matrix();
  }
  Var out = emplace(std::move(y), {});
  nodes_.back().backprop = [a, gain, bias, out, xhat, inv_std](Tape& t) {
    const Matrix& dy = t.grad(out);
    const Eigen::Index cols_n = dy.cols();
    t.grad_ref(bias).row(0) += dy.colwise().sum();
    t.grad_ref(gain).row(0) += (dy.array() * xhat->array()).colwise().sum().matrix();
    const Matrix g = t.value(gain);
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const auto dxhat = (dy.row(r).array() * g.row(0).array()).eval();
      const double m1 = dxhat.sum() / static_cast<double>(cols_n);
      const double m2 =
          (dxhat * xhat->row(r).array()).sum() / static_cast<double>(cols_n);
      t.grad_ref(a).row(r) +=
          ((dxhat - m1 - xhat->row(r).array() * m2) * (*inv_std)(r)).matrix();
    }
  };
  return out;
}

Tape::Var Tape::masked_softmax_rows(Var logits, const AttentionMask& mask) {
  const Matrix& x = value(logits);
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) {
    throw std::invalid_argument("tape masked_softmax_rows: mask shape mismatch");
  }
  Matrix masked = x;
  const double ninf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < masked.rows(); ++r)
    for (Eigen::Index c = 0; c < masked.cols(); ++c)
      if (!mask.allowed(static_cast<int>(r), static_cast<int>(c))) masked(r, c) = ninf;
  Var out = emplace(softmax_rows(masked), {});
  nodes_.back().backprop = [logits, out](Tape& t) {
    const Matrix& p = t.value(out);
    const Matrix& dy = t.grad(out);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      const double dot = (dy.row(r).array() * p.row(r).array()).sum();
      t.grad_ref(logits).row(r) += (p.row(r).array() * (dy.row(r).array() - dot)).matrix();
    }
  };
  return out;
}

Tape::Var Tape::dropout(Var a, double rate, SeededRng& rng, bool train_mode) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("tape dropout: rate must be in [0, 1)");
  if (!train_mode || rate == 0.0) return a;
  const Matrix& x = value(a);
  auto keep = std::make_shared<Matrix>(x.rows(), x.cols());
  const double scale = 1.0 / (1.0 - rate);
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      (*keep)(r, c) = (rng.next_double() < rate) ? 0.0 : scale;
  Var out = emplace((x.array() * keep->array()).matrix(), {});
  nodes_.back().backprop = [a, out, keep](Tape& t) {
    t.grad_ref(a) += (t.grad(out).array() * keep->array()).matrix();
  };
  return out;
}

Tape::Var Tape::concat_rows(Var a, Var b) {
  if (value(a).cols() != value(b).cols()) {
    throw std::invalid_argument("tape concat_rows: column mismatch");
  }
  Matrix v(value(a).rows() + value(b).rows(), value(a).cols());
  v.topRows(value(a).rows()) = value(a);
  v.bottomRows(value(b).rows()) = value(b);
  const Eigen::Index split = value(a).rows();
  Var out = emplace(std::move(v), {});
  nodes_.back().backprop = [a, b, out, split](Tape& t) {
    t.grad_ref(a) += t.grad(out).topRows(split);
    t.grad_ref(b) += t.grad(out).bottomRows(t.grad(out).rows() - split);
  };
  return out;
}

Tape::Var Tape::slice_rows(Var a, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > value(a).rows()) {
    throw std::invalid_argument("tape slice_rows: window out of range");
  }
  Var out = emplace(value(a).middleRows(begin, count), {});
  nodes_.back().backprop = [a, out, begin, count](Tape& t) {
    t.grad_ref(a).middleRows(begin, count) += t.grad(out);
  };
  return out;
}

Tape::Var Tape::slice_cols(Var a, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > value(a).cols()) {
    throw std::invalid_argument("tape slice_cols: window out of range");
  }
  Var out = emplace(value(a).middleCols(begin, count), {});
  nodes_.back().backprop = [a, out, begin, count](Tape& t) {
    t.grad_ref(a).middleCols(begin, count) += t.grad(out);
  };
  return out;
}

Tape::Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("tape concat_cols: no parts");
  Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw std::invalid_argument("tape concat_cols: row mismatch");
    cols += value(p).cols();
  }
  Matrix v(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    v.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  auto part_list = std::make_shared<std::vector<Var>>(parts);
  Var out = emplace(std::move(v), {});
  nodes_.back().backprop = [part_list, out](Tape& t) {
    Eigen::Index at2 = 0;
    for (Var p : *part_list) {
      const Eigen::Index w = t.value(p).cols();
      t.grad_ref(p) += t.grad(out).middleCols(at2, w);
      at2 += w;
    }
  };
  return out;
}

Tape::Var Tape::gather_rows(Var table, std::vector<int> ids) {
  const Matrix& tab = value(table);
  Matrix v(static_cast<Eigen::Index>(ids.size()), tab.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= tab.rows()) {
      throw std::invalid_argument("tape gather_rows: id out of range");
    }
    v.row(static_cast<Eigen::Index>(r)) = tab.row(ids[r]);
  }
  auto id_list = std::make_shared<std::vector<int>>(std::move(ids));
  Var out = emplace(std::move(v), {});
  nodes_.back().backprop = [table, out, id_list](Tape& t) {
    for (std::size_t r = 0; r < id_list->size(); ++r) {
      t.grad_ref(table).row((*id_list)[r]) += t.grad(out).row(static_cast<Eigen::Index>(r));
    }
  };
  return out;
}

Tape::Var Tape::nll_sum(Var logits, std::vector<int> targets, std::vector<double> weights) {
  const Matrix& x = value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != x.rows() || targets.size() != weights.size()) {
    throw std::invalid_argument("tape nll_sum: targets/weights must match logits rows");
  }
  double total = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (weights[static_cast<std::size_t>(r)] == 0.0) continue;
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= x.cols()) throw std::invalid_argument("tape nll_sum: target out of range");
    const double mx = x.row(r).maxCoeff();
    const double lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    total += weights[static_cast<std::size_t>(r)] * (lse - x(r, tgt));
  }
  Matrix v(1, 1);
  v(0, 0) = total;
  auto tgt_list = std::make_shared<std::vector<int>>(std::move(targets));
  auto w_list = std::make_shared<std::vector<double>>(std::move(weights));
  Var out = emplace(std::move(v), {});
  nodes_.back().backprop = [logits, out, tgt_list, w_list](Tape& t) {
    const double g = t.grad(out)(0, 0);
    const Matrix& x2 = t.value(logits);
    for (Eigen::Index r = 0; r < x2.rows(); ++r) {
      const double w = (*w_list)[static_cast<std::size_t>(r)];
      if (w == 0.0) continue;
      const double mx = x2.row(r).maxCoeff();
      const auto ex = (x2.row(r).array() - mx).exp().eval();
      auto drow = (ex / ex.sum()).eval();
      drow(static_cast<Eigen::Index>((*tgt_list)[static_cast<std::size_t>(r)])) -= 1.0;
      t.grad_ref(logits).row(r) += (g * w) * drow.matrix();
    }
  };
  return out;
}

void Tape::backward(Var root) {
  Node& r = nodes_[static_cast<std::size_t>(root)];
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw std::invalid_argument("tape backward: root must be 1 x 1");
  }
  r.grad(0, 0) = 1.0;
  for (std::size_t k = nodes_.size(); k-- > 0;) {
    if (nodes_[k].backprop && nodes_[k].grad.cwiseAbs().sum() != 0.0) nodes_[k].backprop(*this);
  }
}

}  // namespace palmlab
