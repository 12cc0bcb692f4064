// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/autodiff.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "dqoforge/error.hpp"

namespace dqoforge::ad {

namespace {

constexpr double kGeluC = 0.79788456080286535588;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InputError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

Var Tape::push(Matrix value, bool needs_grad, std::string_view op, Backward back) {
  if (!value.allFinite()) {
    throw NumericError(std::string(op) + "#" + std::to_string(nodes_.size()),
                       "non-finite value in forward pass");
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs_grad ? std::move(back) : Backward(), op,
                        needs_grad});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Matrix& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::constant(Matrix value, std::string_view label) {
  return push(std::move(value), false, label, {});
}

Var Tape::leaf(Matrix value, std::string_view label) {
  return push(std::move(value), true, label, {});
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  if (av.cols() != bv.rows()) throw InputError("matmul: inner dimensions differ");
  Matrix out = av * bv;
  return push(std::move(out), needs(a) || needs(b), "matmul", [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (t.needs(a)) t.grad_ref(a.id).noalias() += g * t.value(b).transpose();
    if (t.needs(b)) t.grad_ref(b.id).noalias() += t.value(a).transpose() * g;
  });
}

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Matrix out = value(a) + value(b);
  return push(std::move(out), needs(a) || needs(b), "add", [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (t.needs(a)) t.grad_ref(a.id) += g;
    if (t.needs(b)) t.grad_ref(b.id) += g;
  });
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  Matrix out = value(a) - value(b);
  return push(std::move(out), needs(a) || needs(b), "sub", [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (t.needs(a)) t.grad_ref(a.id) += g;
    if (t.needs(b)) t.grad_ref(b.id) -= g;
  });
}

Var Tape::add_row(Var a, Var row) {
  const Matrix& av = value(a);
  const Matrix& rv = value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw InputError("add_row: bias shape mismatch");
  Matrix out = av.rowwise() + rv.row(0);
  return push(std::move(out), needs(a) || needs(row), "add_row", [a, row](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (t.needs(a)) t.grad_ref(a.id) += g;
    if (t.needs(row)) t.grad_ref(row.id) += g.colwise().sum();
  });
}

Var Tape::scale(Var a, double c) {
  Matrix out = value(a) * c;
  return push(std::move(out), needs(a), "scale", [a, c](Tape& t, int self) {
    t.grad_ref(a.id) += c * t.upstream(self);
  });
}

Var Tape::gelu(Var a) {
  const Matrix& x = value(a);
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return push(std::move(out), needs(a), "gelu", [a](Tape& t, int self) {
    const Matrix& x = t.value(a);
    const Matrix& g = t.upstream(self);
    Matrix& ga = t.grad_ref(a.id);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      ga.data()[i] += g.data()[i] * d;
    }
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = value(x);
  const Eigen::Index n = xv.rows();
  const Eigen::Index d = xv.cols();
  if (value(gain).cols() != d || value(bias).cols() != d) throw InputError("layer_norm: width mismatch");
  auto xhat = std::make_shared<Matrix>(n, d);
  auto rstd = std::make_shared<Eigen::VectorXd>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    (*rstd)(i) = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = (xv.row(i).array() - mu) * (*rstd)(i);
  }
  Matrix out = (xhat->array().rowwise() * value(gain).row(0).array()).rowwise() + value(bias).row(0).array();
  const bool ng = needs(x) || needs(gain) || needs(bias);
  return push(std::move(out), ng, "layer_norm", [x, gain, bias, xhat, rstd](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (t.needs(gain)) t.grad_ref(gain.id) += (g.array() * xhat->array()).colwise().sum().matrix();
    if (t.needs(bias)) t.grad_ref(bias.id) += g.colwise().sum();
    if (t.needs(x)) {
      Matrix dxhat = g.array().rowwise() * t.value(gain).row(0).array();
      Matrix& gx = t.grad_ref(x.id);
      for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = (dxhat.row(i).array() * xhat->row(i).array()).mean();
        gx.row(i).array() += (*rstd)(i) * (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2);
      }
    }
  });
}

Var Tape::attention(Var q, Var k, Var v, int heads, bool causal) {
  const Matrix& qv = value(q);
  const Matrix& kv = value(k);
  const Matrix& vv = value(v);
  const Eigen::Index n = qv.rows();
  const Eigen::Index m = kv.rows();
  const Eigen::Index d = qv.cols();
  if (heads < 1 || d % heads != 0 || kv.cols() != d || vv.cols() != d || vv.rows() != m) {
    throw InputError("attention: incompatible shapes or head count");
  }
  const Eigen::Index dh = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index offset = m - n;
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(heads));
  Matrix out(n, d);
  for (int h = 0; h < heads; ++h) {
    Matrix scores = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * s;
    Matrix& p = (*probs)[static_cast<std::size_t>(h)];
    p.resize(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index visible = causal ? std::min(m, i + offset + 1) : m;
      const double mx = scores.row(i).head(visible).maxCoeff();
      double z = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        const double e = j < visible ? std::exp(scores(i, j) - mx) : 0.0;
        p(i, j) = e;
        z += e;
      }
      p.row(i) /= z;
    }
    out.middleCols(h * dh, dh).noalias() = p * vv.middleCols(h * dh, dh);
  }
  const bool ng = needs(q) || needs(k) || needs(v);
  return push(std::move(out), ng, "attention", [q, k, v, heads, dh, s, probs](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = (*probs)[static_cast<std::size_t>(h)];
      const auto go = g.middleCols(h * dh, dh);
      if (t.needs(v)) t.grad_ref(v.id).middleCols(h * dh, dh).noalias() += p.transpose() * go;
      if (!t.needs(q) && !t.needs(k)) continue;
      Matrix dp = go * vv.middleCols(h * dh, dh).transpose();
      Eigen::VectorXd rs = (dp.array() * p.array()).rowwise().sum();
      Matrix ds = (p.array() * (dp.array().colwise() - rs.array())).matrix() * s;
      if (t.needs(q)) t.grad_ref(q.id).middleCols(h * dh, dh).noalias() += ds * kv.middleCols(h * dh, dh);
      if (t.needs(k)) t.grad_ref(k.id).middleCols(h * dh, dh).noalias() += ds.transpose() * qv.middleCols(h * dh, dh);
    }
  });
}

Var Tape::rows(Var table, std::span<const TokenId> ids) {
  const Matrix& tv = value(table);
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw InputError("embedding lookup: token id " + std::to_string(ids[i]) + " out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return push(std::move(out), needs(table), "rows", [table, saved = std::move(saved)](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    Matrix& gt = t.grad_ref(table.id);
    for (std::size_t i = 0; i < saved.size(); ++i) gt.row(saved[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var Tape::target_log_prob(Var logits, std::span<const TokenId> targets, double floor) {
  const Matrix& lv = value(logits);
  if (lv.rows() != static_cast<Eigen::Index>(targets.size())) {
    throw InputError("target_log_prob: one logit row per target position required");
  }
  auto soft = std::make_shared<Matrix>(lv.rows(), lv.cols());
  auto live = std::make_shared<std::vector<bool>>(targets.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < lv.rows(); ++i) {
    const TokenId y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= lv.cols()) throw InputError("target_log_prob: target id out of range");
    const double mx = lv.row(i).maxCoeff();
    soft->row(i) = (lv.row(i).array() - mx).exp();
    const double z = soft->row(i).sum();
    soft->row(i) /= z;
    const double lp = lv(i, y) - mx - std::log(z);
    (*live)[static_cast<std::size_t>(i)] = lp > floor;
    total += std::max(lp, floor);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  std::vector<TokenId> saved(targets.begin(), targets.end());
  return push(std::move(out), needs(logits), "target_log_prob",
              [logits, soft, live, saved = std::move(saved)](Tape& t, int self) {
                const double g = t.upstream(self)(0, 0);
                Matrix& gl = t.grad_ref(logits.id);
                for (std::size_t i = 0; i < saved.size(); ++i) {
                  if (!(*live)[i]) continue;
                  const auto r = static_cast<Eigen::Index>(i);
                  gl.row(r) -= g * soft->row(r);
                  gl(r, saved[i]) += g;
                }
              });
}

Var Tape::log_sigmoid(Var a) {
  const Matrix& x = value(a);
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v)));
  }
  return push(std::move(out), needs(a), "log_sigmoid", [a](Tape& t, int self) {
    const Matrix& x = t.value(a);
    const Matrix& g = t.upstream(self);
    Matrix& ga = t.grad_ref(a.id);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      // d/dv log sigmoid(v) = sigmoid(-v)
      const double sig_neg = v >= 0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
      ga.data()[i] += g.data()[i] * sig_neg;
    }
  });
}

Var Tape::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  return push(std::move(out), needs(a), "sum", [a](Tape& t, int self) {
    t.grad_ref(a.id).array() += t.upstream(self)(0, 0);
  });
}

void Tape::backward(std::span<const Seed> seeds) {
  if (swept_) throw InputError("Tape::backward called twice");
  swept_ = true;
  for (const Seed& s : seeds) {
    if (!needs(s.var)) continue;
    Matrix& g = grad_ref(s.var.id);
    if (g.size() != 1) throw InputError("backward seeds must be scalar nodes");
    g(0, 0) += s.grad;
  }
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.back || node.grad.size() == 0) continue;
    if (!node.grad.allFinite()) {
      throw NumericError(std::string(node.op) + "#" + std::to_string(id), "non-finite gradient in backward pass");
    }
    node.back(*this, id);
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& node = nodes_[id];
    if (node.needs_grad && !node.back && node.grad.size() != 0 && !node.grad.allFinite()) {
      throw NumericError(std::string(node.op) + "#" + std::to_string(id), "non-finite gradient at leaf");
    }
  }
}

}  // namespace dqoforge::ad
