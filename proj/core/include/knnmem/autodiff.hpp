#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive evaluated in a forward pass together with a
// closure that propagates the output gradient to the inputs. Parameters live
// in a ParameterSet outside the tape; backward() accumulates their gradients
// into a Gradients buffer keyed by ParamId so several tapes (one per minibatch
// element) can be merged in a fixed order.

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "knnmem/tensor.hpp"

namespace knnmem {

using ParamId = std::size_t;

struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;
  /// Optional per-row freeze mask for matrices (pretrained embedding rows).
  std::vector<bool> frozen_rows;

  bool row_frozen(std::size_t row) const { return frozen || (row < frozen_rows.size() && frozen_rows[row]); }
};

/// Ordered collection of named trainable tensors.
class ParameterSet {
 public:
  ParamId add(std::string name, Tensor value, bool frozen = false, std::vector<bool> frozen_rows = {});

  Parameter& operator[](ParamId id) { return params_.at(id); }
  const Parameter& operator[](ParamId id) const { return params_.at(id); }
  std::optional<ParamId> find(std::string_view name) const;
  ParamId require(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, ParamId> by_name_;
};

/// Gradient buffers aligned with a ParameterSet. Untouched slots stay empty
/// and read as zero.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ParameterSet& params);

  std::size_t size() const { return grads_.size(); }
  bool has(ParamId id) const { return !grads_.at(id).empty(); }
  /// Gradient slot, allocated as zeros on first access.
  Tensor& at(ParamId id);
  const Tensor& get(ParamId id) const { return grads_.at(id); }

  /// this += other, slot by slot in ParamId order.
  void add(const Gradients& other);
  void scale(Real factor);
  Real global_norm() const;
  /// Rescales so the global L2 norm is at most max_norm. Returns the norm
  /// measured before clipping. max_norm <= 0 disables clipping.
  Real clip_global_norm(Real max_norm);
  void clear();

 private:
  std::vector<Shape> shapes_;
  std::vector<Tensor> grads_;
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Propagates the gradient of one recorded node to its inputs.
/// Arguments: the tape, the node's forward value, the gradient arriving at it.
using BackwardFn = std::function<void(Tape&, const Tensor&, const Tensor&)>;

class Tape {
 public:
  explicit Tape(const ParameterSet* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a whole parameter tensor; one leaf per parameter per tape.
  Var parameter(ParamId id);
  /// Leaf holding one row of a matrix parameter (embedding lookup).
  Var parameter_row(ParamId id, std::size_t row);

  /// Records a new node. `op` names the primitive in error messages; the
  /// value must be finite. `backward` may be empty for non-differentiable
  /// outputs.
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value(); }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  /// Adds `delta` into the gradient of node `id` (no-op for constants).
  void accumulate(std::uint32_t id, const Tensor& delta);
  /// Mutable gradient of node `id`, allocated as zeros; nullptr for constants.
  Tensor* grad_slot(std::uint32_t id);

  /// Reverse sweep from a scalar loss; parameter gradients are added to `out`.
  void backward(Var loss, Gradients& out);

  std::size_t node_count() const { return nodes_.size(); }
  const ParameterSet* parameters() const { return params_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    std::optional<ParamId> param;
    std::optional<std::size_t> param_row;

    const Tensor& value() const { return external ? *external : owned; }
  };

  const ParameterSet* params_;
  // deque: value() references stay valid while later nodes are recorded.
  std::deque<Node> nodes_;
  std::unordered_map<ParamId, std::uint32_t> param_leaves_;
};

// Primitives. Each checks shapes (ShapeError naming the primitive) and
// rejects non-finite outputs (NumericError).

/// A{m,n} x B{n,p} -> {m,p}; A{m,n} x v{n} -> {m}.
Var matmul(Var a, Var b);
/// Same-shape addition.
Var add(Var a, Var b);
/// Same-shape product, or A{r,c} * v{c} broadcast over rows.
Var elementwise_mul(Var a, Var b);
/// Concatenation of rank-1 inputs (axis 0) or rank-2 inputs (axis 0 or 1).
Var concat(std::span<const Var> parts, std::size_t axis = 0);
Var tanh(Var x);
Var sigmoid(Var x);
/// Rank-1: sum to {1}. Rank-2: axis 0 -> {cols}, axis 1 -> {rows}.
Var sum(Var x, std::size_t axis = 0);
Var scalar_mul(Var x, Real factor);
/// Row-wise L2 norms of a rank-2 input (a vector counts as one row) -> {rows}.
Var l2_norm_rows(Var x);
/// Row-wise cosine similarity of equally shaped inputs -> {rows}. Rows where
/// either side has norm below kCosineEpsilon yield 0 with zero gradient.
Var cosine_rows(Var a, Var b);
/// Fused log-softmax + negative log-likelihood for logits {c} -> {1}.
Var softmax_cross_entropy(Var logits, std::size_t target);

/// Contiguous slice [begin, begin+length) of a vector.
Var slice(Var x, std::size_t begin, std::size_t length);
/// Same data, new shape.
Var reshape(Var x, Shape shape);
Var transpose(Var x);
/// LSTM over a sequence of {D} inputs (in reverse order when asked), starting
/// from zero state -> final hidden {H}. weight is {4H, D+H} acting on [x ; h],
/// bias is {4H}; gate order input, forget, cell, output.
Var lstm_sequence(Var weight, Var bias, std::span<const Var> inputs, bool reverse = false);
/// Copies the value into a constant; gradients stop here.
Var detach(Var x);

inline constexpr Real kCosineEpsilon = 1e-12;

}  // namespace knnmem
