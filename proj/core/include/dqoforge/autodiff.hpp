// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// A small reverse-mode tape over row-major Eigen matrices. It records exactly
// the operations the encoder-decoder and the preference losses need, each with
// a hand-written adjoint. Every forward value is checked for finiteness when
// it is recorded, and a NumericError names the offending op.

#pragma once

#include <Eigen/Core>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "dqoforge/vocab.hpp"

namespace dqoforge::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
  int id = -1;
};

/// Upstream gradient injected at a scalar node when backward() starts.
struct Seed {
  Var var;
  double grad = 1.0;
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  /// Value that never receives a gradient.
  Var constant(Matrix value, std::string_view label = "constant");
  /// Value that accumulates a gradient (a parameter block).
  Var leaf(Matrix value, std::string_view label = "leaf");

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  double scalar(Var v) const { return value(v)(0, 0); }
  /// Accumulated gradient; an empty matrix if nothing flowed into `v`.
  const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  /// a (n x d) plus a broadcast 1 x d row.
  Var add_row(Var a, Var row);
  Var scale(Var a, double c);
  /// tanh-approximated GELU; smooth everywhere, which keeps finite-difference
  /// checks honest.
  Var gelu(Var a);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  /// Multi-head scaled dot-product attention. With `causal`, query i sees keys
  /// 0..i + (m - n) where n, m are the query and key counts.
  Var attention(Var q, Var k, Var v, int heads, bool causal);
  /// Gathers rows of an embedding table.
  Var rows(Var table, std::span<const TokenId> ids);
  /// Sum over positions of log softmax(logits[t])[targets[t]], each term
  /// clamped from below at `floor` (clamped terms carry no gradient). 1 x 1.
  Var target_log_prob(Var logits, std::span<const TokenId> targets, double floor);
  /// Elementwise log(sigmoid(a)), computed without overflow.
  Var log_sigmoid(Var a);
  /// Sum of all entries, 1 x 1.
  Var sum(Var a);

  /// Runs the adjoint sweep. May be called once per tape.
  void backward(std::span<const Seed> seeds);

 private:
  using Backward = std::function<void(Tape&, int)>;
  struct Node {
    Matrix value;
    Matrix grad;
    Backward back;
    std::string_view op;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs_grad, std::string_view op, Backward back);
  bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  Matrix& grad_ref(int id);
  const Matrix& upstream(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  std::vector<Node> nodes_;
  bool swept_ = false;
};

}  // namespace dqoforge::ad
