#include "knnmem/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>

#include "knnmem/error.hpp"

namespace knnmem {

namespace {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>>;
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>;

ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
ConstVectorMap as_vector(const Tensor& t) {
  return ConstVectorMap(t.data().data(), static_cast<Eigen::Index>(t.size()));
}
VectorMap as_vector(Tensor& t) { return VectorMap(t.data().data(), static_cast<Eigen::Index>(t.size())); }

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

Tape& common_tape(std::string_view op, Var a, Var b) {
  if (!a.valid() || !b.valid()) shape_error(op, "input is not bound to a tape");
  if (&a.tape() != &b.tape()) shape_error(op, "inputs live on different tapes");
  return a.tape();
}

Tape& tape_of(std::string_view op, Var a) {
  if (!a.valid()) shape_error(op, "input is not bound to a tape");
  return a.tape();
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

Real stable_sigmoid(Real x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------- parameters

ParamId ParameterSet::add(std::string name, Tensor value, bool frozen, std::vector<bool> frozen_rows) {
  if (!frozen_rows.empty() && (value.rank() != 2 || frozen_rows.size() != value.rows())) {
    throw ShapeError("row freeze mask for " + name + " does not match its row count");
  }
  if (by_name_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  const ParamId id = params_.size();
  by_name_.emplace(name, id);
  params_.push_back(Parameter{std::move(name), std::move(value), frozen, std::move(frozen_rows)});
  return id;
}

std::optional<ParamId> ParameterSet::find(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

ParamId ParameterSet::require(std::string_view name) const {
  auto id = find(name);
  if (!id) throw DataError("missing parameter: " + std::string(name));
  return *id;
}

Gradients::Gradients(const ParameterSet& params) : grads_(params.size()) {
  shapes_.reserve(params.size());
  for (const auto& p : params) shapes_.push_back(p.value.shape());
}

Tensor& Gradients::at(ParamId id) {
  Tensor& g = grads_.at(id);
  if (g.empty() && element_count(shapes_[id]) > 0) g = Tensor(shapes_[id]);
  return g;
}

void Gradients::add(const Gradients& other) {
  if (other.grads_.size() != grads_.size()) throw ShapeError("gradient buffers cover different parameter sets");
  for (ParamId id = 0; id < grads_.size(); ++id) {
    if (other.grads_[id].empty()) continue;
    add_into(at(id), other.grads_[id]);
  }
}

void Gradients::scale(Real factor) {
  for (auto& g : grads_) {
    for (Real& v : g.data()) v *= factor;
  }
}

Real Gradients::global_norm() const {
  Real sq = 0.0;
  for (const auto& g : grads_) {
    for (Real v : g.data()) sq += v * v;
  }
  return std::sqrt(sq);
}

Real Gradients::clip_global_norm(Real max_norm) {
  const Real norm = global_norm();
  if (max_norm > 0 && norm > max_norm) scale(max_norm / norm);
  return norm;
}

void Gradients::clear() {
  for (auto& g : grads_) g = Tensor();
}

// ---------------------------------------------------------------------- tape

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("constant: non-finite value");
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::parameter(ParamId id) {
  if (!params_) throw ConfigError("tape has no parameter set");
  if (auto it = param_leaves_.find(id); it != param_leaves_.end()) return Var(this, it->second);
  const Parameter& p = (*params_)[id];
  Node node;
  node.external = &p.value;
  node.requires_grad = !p.frozen;
  node.param = id;
  nodes_.push_back(std::move(node));
  const auto node_id = static_cast<std::uint32_t>(nodes_.size() - 1);
  param_leaves_.emplace(id, node_id);
  return Var(this, node_id);
}

Var Tape::parameter_row(ParamId id, std::size_t row) {
  if (!params_) throw ConfigError("tape has no parameter set");
  const Parameter& p = (*params_)[id];
  if (p.value.rank() != 2 || row >= p.value.rows()) {
    shape_error("parameter_row", p.name + " has no row " + std::to_string(row));
  }
  auto r = p.value.row(row);
  Node node;
  node.owned = Tensor::vector(std::vector<Real>(r.begin(), r.end()));
  node.requires_grad = !p.row_frozen(row);
  node.param = id;
  node.param_row = row;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
  Node node;
  node.owned = std::move(value);
  for (const Var& in : inputs) {
    if (in.valid() && &in.tape() == this && nodes_[in.id()].requires_grad) node.requires_grad = true;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor* Tape::grad_slot(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty() && n.value().size() > 0) n.grad = Tensor(n.value().shape());
  return &n.grad;
}

void Tape::accumulate(std::uint32_t id, const Tensor& delta) {
  if (Tensor* g = grad_slot(id)) add_into(*g, delta);
}

void Tape::backward(Var loss, Gradients& out) {
  if (!loss.valid() || &loss.tape() != this) throw ShapeError("backward: loss is not on this tape");
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  if (params_ && out.size() != params_->size()) throw ShapeError("backward: gradient buffer does not match parameters");
  if (Tensor* g = grad_slot(loss.id())) (*g)[0] = 1.0;

  for (std::int64_t i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.value(), n.grad);
    if (n.param) {
      Tensor& pg = out.at(*n.param);
      if (n.param_row) {
        auto dst = pg.row(*n.param_row);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
      } else {
        add_into(pg, n.grad);
      }
    }
  }
}

// ---------------------------------------------------------------- primitives

Var matmul(Var a, Var b) {
  Tape& tape = common_tape("matmul", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2) shape_error("matmul", "left operand must be a matrix, got " + to_string(A.shape()));
  if (B.rank() == 2) {
    if (A.cols() != B.rows()) shape_error("matmul", to_string(A.shape()) + " x " + to_string(B.shape()));
    Tensor out(Shape{A.rows(), B.cols()});
    as_matrix(out).noalias() = as_matrix(A) * as_matrix(B);
    const Var ins[] = {a, b};
    return tape.record("matmul", std::move(out), ins, [ia = a.id(), ib = b.id()](Tape& t, const Tensor&, const Tensor& g) {
      if (Tensor* ga = t.grad_slot(ia)) as_matrix(*ga).noalias() += as_matrix(g) * as_matrix(t.value(ib)).transpose();
      if (Tensor* gb = t.grad_slot(ib)) as_matrix(*gb).noalias() += as_matrix(t.value(ia)).transpose() * as_matrix(g);
    });
  }
  if (B.rank() != 1 || A.cols() != B.size()) {
    shape_error("matmul", to_string(A.shape()) + " x " + to_string(B.shape()));
  }
  Tensor out(Shape{A.rows()});
  as_vector(out).noalias() = as_matrix(A) * as_vector(B);
  const Var ins[] = {a, b};
  return tape.record("matmul", std::move(out), ins, [ia = a.id(), ib = b.id()](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_slot(ia)) as_matrix(*ga).noalias() += as_vector(g) * as_vector(t.value(ib)).transpose();
    if (Tensor* gb = t.grad_slot(ib)) as_vector(*gb).noalias() += as_matrix(t.value(ia)).transpose() * as_vector(g);
  });
}

Var add(Var a, Var b) {
  Tape& tape = common_tape("add", a, b);
  if (a.shape() != b.shape()) shape_error("add", to_string(a.shape()) + " + " + to_string(b.shape()));
  Tensor out = a.value();
  add_into(out, b.value());
  const Var ins[] = {a, b};
  return tape.record("add", std::move(out), ins, [ia = a.id(), ib = b.id()](Tape& t, const Tensor&, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var elementwise_mul(Var a, Var b) {
  Tape& tape = common_tape("elementwise_mul", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Var ins[] = {a, b};
  if (A.shape() == B.shape()) {
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
    return tape.record("elementwise_mul", std::move(out), ins, [ia = a.id(), ib = b.id()](Tape& t, const Tensor&, const Tensor& g) {
      const Tensor& av = t.value(ia);
      const Tensor& bv = t.value(ib);
      if (Tensor* ga = t.grad_slot(ia)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
      }
      if (Tensor* gb = t.grad_slot(ib)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
      }
    });
  }
  if (A.rank() != 2 || B.rank() != 1 || A.cols() != B.size()) {
    shape_error("elementwise_mul", to_string(A.shape()) + " * " + to_string(B.shape()));
  }
  const std::size_t rows = A.rows();
  const std::size_t cols = A.cols();
  Tensor out(A.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = A.at(r, c) * B[c];
  }
  return tape.record("elementwise_mul", std::move(out), ins,
                     [ia = a.id(), ib = b.id(), rows, cols](Tape& t, const Tensor&, const Tensor& g) {
                       const Tensor& av = t.value(ia);
                       const Tensor& bv = t.value(ib);
                       if (Tensor* ga = t.grad_slot(ia)) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < cols; ++c) ga->at(r, c) += g.at(r, c) * bv[c];
                         }
                       }
                       if (Tensor* gb = t.grad_slot(ib)) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g.at(r, c) * av.at(r, c);
                         }
                       }
                     });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  Tape& tape = tape_of("concat", parts.front());
  const std::size_t rank = parts.front().value().rank();
  for (const Var& p : parts) {
    if (&tape_of("concat", p) != &tape) shape_error("concat", "inputs live on different tapes");
    if (p.value().rank() != rank) shape_error("concat", "mixed ranks");
  }
  std::vector<std::uint32_t> ids;
  ids.reserve(parts.size());
  for (const Var& p : parts) ids.push_back(p.id());

  if (rank == 1) {
    if (axis != 0) shape_error("concat", "vectors concatenate along axis 0 only");
    std::vector<Real> data;
    for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    return tape.record("concat", Tensor::vector(std::move(data)), parts, [ids](Tape& t, const Tensor&, const Tensor& g) {
      std::size_t offset = 0;
      for (auto id : ids) {
        const std::size_t n = t.value(id).size();
        if (Tensor* gi = t.grad_slot(id)) {
          for (std::size_t j = 0; j < n; ++j) (*gi)[j] += g[offset + j];
        }
        offset += n;
      }
    });
  }
  if (rank != 2 || axis > 1) shape_error("concat", "unsupported rank/axis");

  if (axis == 0) {
    const std::size_t cols = parts.front().value().cols();
    std::size_t rows = 0;
    std::vector<Real> data;
    for (const Var& p : parts) {
      if (p.value().cols() != cols) shape_error("concat", "column count mismatch along axis 0");
      rows += p.value().rows();
      data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    }
    return tape.record("concat", Tensor(Shape{rows, cols}, std::move(data)), parts, [ids](Tape& t, const Tensor&, const Tensor& g) {
      std::size_t offset = 0;
      for (auto id : ids) {
        const std::size_t n = t.value(id).size();
        if (Tensor* gi = t.grad_slot(id)) {
          for (std::size_t j = 0; j < n; ++j) (*gi)[j] += g[offset + j];
        }
        offset += n;
      }
    });
  }

  const std::size_t rows = parts.front().value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != rows) shape_error("concat", "row count mismatch along axis 1");
    cols += p.value().cols();
  }
  Tensor out(Shape{rows, cols});
  std::size_t col0 = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < v.cols(); ++c) out.at(r, col0 + c) = v.at(r, c);
    }
    col0 += v.cols();
  }
  return tape.record("concat", std::move(out), parts, [ids, rows, cols](Tape& t, const Tensor&, const Tensor& g) {
    std::size_t c0 = 0;
    for (auto id : ids) {
      const std::size_t w = t.value(id).cols();
      if (Tensor* gi = t.grad_slot(id)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < w; ++c) gi->at(r, c) += g[r * cols + c0 + c];
        }
      }
      c0 += w;
    }
  });
}

Var tanh(Var x) {
  Tape& tape = tape_of("tanh", x);
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  const Var ins[] = {x};
  return tape.record("tanh", std::move(out), ins, [ix = x.id()](Tape& t, const Tensor& y, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (1.0 - y[i] * y[i]);
    }
  });
}

Var sigmoid(Var x) {
  Tape& tape = tape_of("sigmoid", x);
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(xv[i]);
  const Var ins[] = {x};
  return tape.record("sigmoid", std::move(out), ins, [ix = x.id()](Tape& t, const Tensor& y, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i] * (1.0 - y[i]);
    }
  });
}

Var sum(Var x, std::size_t axis) {
  Tape& tape = tape_of("sum", x);
  const Tensor& xv = x.value();
  const Var ins[] = {x};
  if (xv.rank() <= 1) {
    if (axis != 0) shape_error("sum", "vectors reduce along axis 0 only");
    Real total = 0.0;
    for (Real v : xv.data()) total += v;
    return tape.record("sum", Tensor::scalar(total), ins, [ix = x.id()](Tape& t, const Tensor&, const Tensor& g) {
      if (Tensor* gx = t.grad_slot(ix)) {
        for (Real& v : gx->data()) v += g[0];
      }
    });
  }
  if (axis > 1) shape_error("sum", "axis out of range for a matrix");
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  Tensor out(Shape{axis == 0 ? cols : rows});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[axis == 0 ? c : r] += xv.at(r, c);
  }
  return tape.record("sum", std::move(out), ins,
                     [ix = x.id(), axis, rows, cols](Tape& t, const Tensor&, const Tensor& g) {
                       if (Tensor* gx = t.grad_slot(ix)) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < cols; ++c) gx->at(r, c) += g[axis == 0 ? c : r];
                         }
                       }
                     });
}

Var scalar_mul(Var x, Real factor) {
  Tape& tape = tape_of("scalar_mul", x);
  Tensor out = x.value();
  for (Real& v : out.data()) v *= factor;
  const Var ins[] = {x};
  return tape.record("scalar_mul", std::move(out), ins, [ix = x.id(), factor](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += factor * g[i];
    }
  });
}

Var l2_norm_rows(Var x) {
  Tape& tape = tape_of("l2_norm_rows", x);
  const Tensor& xv = x.value();
  if (xv.rank() == 0) shape_error("l2_norm_rows", "scalar input");
  const std::size_t rows = xv.rows();
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    Real sq = 0.0;
    for (Real v : xv.row(r)) sq += v * v;
    out[r] = std::sqrt(sq);
  }
  const Var ins[] = {x};
  return tape.record("l2_norm_rows", std::move(out), ins, [ix = x.id()](Tape& t, const Tensor& norms, const Tensor& g) {
    Tensor* gx = t.grad_slot(ix);
    if (!gx) return;
    const Tensor& xv = t.value(ix);
    for (std::size_t r = 0; r < norms.size(); ++r) {
      if (norms[r] < kCosineEpsilon) continue;
      auto src = xv.row(r);
      auto dst = gx->row(r);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += g[r] * src[c] / norms[r];
    }
  });
}

Var cosine_rows(Var a, Var b) {
  Tape& tape = common_tape("cosine_rows", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape() || A.rank() == 0) {
    shape_error("cosine_rows", to_string(A.shape()) + " vs " + to_string(B.shape()));
  }
  const std::size_t rows = A.rows();
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    auto ar = A.row(r);
    auto br = B.row(r);
    Real dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < ar.size(); ++c) {
      dot += ar[c] * br[c];
      na += ar[c] * ar[c];
      nb += br[c] * br[c];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    out[r] = (na < kCosineEpsilon || nb < kCosineEpsilon) ? 0.0 : std::clamp(dot / (na * nb), -1.0, 1.0);
  }
  const Var ins[] = {a, b};
  return tape.record("cosine_rows", std::move(out), ins, [ia = a.id(), ib = b.id()](Tape& t, const Tensor& cos, const Tensor& g) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    Tensor* ga = t.grad_slot(ia);
    Tensor* gb = t.grad_slot(ib);
    for (std::size_t r = 0; r < cos.size(); ++r) {
      auto ar = A.row(r);
      auto br = B.row(r);
      Real na = 0.0, nb = 0.0;
      for (std::size_t c = 0; c < ar.size(); ++c) {
        na += ar[c] * ar[c];
        nb += br[c] * br[c];
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      if (na < kCosineEpsilon || nb < kCosineEpsilon) continue;
      const Real inv = 1.0 / (na * nb);
      if (ga) {
        auto dst = ga->row(r);
        for (std::size_t c = 0; c < ar.size(); ++c) dst[c] += g[r] * (br[c] * inv - cos[r] * ar[c] / (na * na));
      }
      if (gb) {
        auto dst = gb->row(r);
        for (std::size_t c = 0; c < br.size(); ++c) dst[c] += g[r] * (ar[c] * inv - cos[r] * br[c] / (nb * nb));
      }
    }
  });
}

Var softmax_cross_entropy(Var logits, std::size_t target) {
  Tape& tape = tape_of("softmax_cross_entropy", logits);
  const Tensor& z = logits.value();
  if (z.rank() != 1 || z.size() == 0) shape_error("softmax_cross_entropy", "logits must be a non-empty vector");
  if (target >= z.size()) {
    shape_error("softmax_cross_entropy", "target " + std::to_string(target) + " out of range for " +
                                             std::to_string(z.size()) + " classes");
  }
  const Real shift = *std::max_element(z.data().begin(), z.data().end());
  Real denom = 0.0;
  for (Real v : z.data()) denom += std::exp(v - shift);
  const Real log_partition = shift + std::log(denom);
  const Var ins[] = {logits};
  return tape.record("softmax_cross_entropy", Tensor::scalar(log_partition - z[target]), ins,
                     [iz = logits.id(), target, log_partition](Tape& t, const Tensor&, const Tensor& g) {
                       Tensor* gz = t.grad_slot(iz);
                       if (!gz) return;
                       const Tensor& z = t.value(iz);
                       for (std::size_t i = 0; i < z.size(); ++i) {
                         const Real p = std::exp(z[i] - log_partition);
                         (*gz)[i] += g[0] * (p - (i == target ? 1.0 : 0.0));
                       }
                     });
}

Var slice(Var x, std::size_t begin, std::size_t length) {
  Tape& tape = tape_of("slice", x);
  const Tensor& xv = x.value();
  if (xv.rank() != 1 || begin + length > xv.size()) {
    shape_error("slice", "[" + std::to_string(begin) + ", +" + std::to_string(length) + ") of " + to_string(xv.shape()));
  }
  auto src = xv.data().subspan(begin, length);
  const Var ins[] = {x};
  return tape.record("slice", Tensor::vector(std::vector<Real>(src.begin(), src.end())), ins,
                     [ix = x.id(), begin](Tape& t, const Tensor&, const Tensor& g) {
                       if (Tensor* gx = t.grad_slot(ix)) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*gx)[begin + i] += g[i];
                       }
                     });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of("reshape", x);
  if (element_count(shape) != x.size()) shape_error("reshape", to_string(x.shape()) + " -> " + to_string(shape));
  const Var ins[] = {x};
  return tape.record("reshape", Tensor(std::move(shape), x.value().values()), ins,
                     [ix = x.id()](Tape& t, const Tensor&, const Tensor& g) {
                       if (Tensor* gx = t.grad_slot(ix)) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                       }
                     });
}

Var transpose(Var x) {
  Tape& tape = tape_of("transpose", x);
  const Tensor& xv = x.value();
  if (xv.rank() != 2) shape_error("transpose", "expects a matrix, got " + to_string(xv.shape()));
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  Tensor out(Shape{cols, rows});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.at(c, r) = xv.at(r, c);
  }
  const Var ins[] = {x};
  return tape.record("transpose", std::move(out), ins, [ix = x.id(), rows, cols](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* gx = t.grad_slot(ix)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gx->at(r, c) += g[c * rows + r];
      }
    }
  });
}

Var lstm_sequence(Var weight, Var bias, std::span<const Var> inputs, bool reverse) {
  Tape& tape = common_tape("lstm_sequence", weight, bias);
  const Tensor& W = weight.value();
  const Tensor& b = bias.value();
  if (W.rank() != 2 || b.rank() != 1 || b.size() % 4 != 0 || W.rows() != b.size()) {
    shape_error("lstm_sequence", "weight " + to_string(W.shape()) + " and bias " + to_string(b.shape()) +
                                     " do not form a {4H, D+H} / {4H} pair");
  }
  const std::size_t H = b.size() / 4;
  if (W.cols() <= H) shape_error("lstm_sequence", "weight " + to_string(W.shape()) + " has no input columns");
  const std::size_t D = W.cols() - H;
  const std::size_t T = inputs.size();
  const auto ei = [](std::size_t n) { return static_cast<Eigen::Index>(n); };

  // Row t of every cache is the t-th step in processing order.
  struct Cache {
    RowMatrix x, gates, cell, tanh_cell, h_prev;
    std::vector<std::uint32_t> ids;
  };
  auto cache = std::make_shared<Cache>();
  cache->x.resize(ei(T), ei(D));
  cache->ids.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    const Var& in = inputs[reverse ? T - 1 - t : t];
    if (!in.valid() || &in.tape() != &tape) shape_error("lstm_sequence", "input is not bound to this tape");
    if (in.value().rank() != 1 || in.size() != D) {
      shape_error("lstm_sequence", "input of shape " + to_string(in.shape()) + ", expected {" + std::to_string(D) + "}");
    }
    cache->x.row(ei(t)) = as_vector(in.value()).transpose();
    cache->ids[t] = in.id();
  }
  const ConstMatrixMap Wm = as_matrix(W);
  const auto Wx = Wm.leftCols(ei(D));
  const auto Wh = Wm.rightCols(ei(H));

  RowMatrix& z = cache->gates;
  z.noalias() = cache->x * Wx.transpose();
  z.rowwise() += as_vector(b).transpose();
  cache->cell.resize(ei(T), ei(H));
  cache->tanh_cell.resize(ei(T), ei(H));
  cache->h_prev.setZero(ei(T), ei(H));
  Eigen::Matrix<Real, Eigen::Dynamic, 1> h = Eigen::Matrix<Real, Eigen::Dynamic, 1>::Zero(ei(H));
  Eigen::Matrix<Real, Eigen::Dynamic, 1> c = h;
  for (std::size_t t = 0; t < T; ++t) {
    const auto r = ei(t);
    cache->h_prev.row(r) = h.transpose();
    if (t > 0) z.row(r).noalias() += (Wh * h).transpose();
    for (std::size_t j = 0; j < H; ++j) {
      const auto J = ei(j), Hi = ei(H);
      const Real ig = stable_sigmoid(z(r, J));
      const Real fg = stable_sigmoid(z(r, Hi + J));
      const Real gg = std::tanh(z(r, 2 * Hi + J));
      const Real og = stable_sigmoid(z(r, 3 * Hi + J));
      z(r, J) = ig;
      z(r, Hi + J) = fg;
      z(r, 2 * Hi + J) = gg;
      z(r, 3 * Hi + J) = og;
      c(J) = fg * c(J) + ig * gg;
      const Real tc = std::tanh(c(J));
      cache->cell(r, J) = c(J);
      cache->tanh_cell(r, J) = tc;
      h(J) = og * tc;
    }
  }
  Tensor out(Shape{H});
  as_vector(out) = h;

  std::vector<Var> ins(inputs.begin(), inputs.end());
  ins.push_back(weight);
  ins.push_back(bias);
  return tape.record(
      "lstm_sequence", std::move(out), ins,
      [cache, iw = weight.id(), ib = bias.id(), D, H, T, ei](Tape& tp, const Tensor&, const Tensor& g) {
        const Cache& k = *cache;
        const Tensor& Wv = tp.value(iw);
        const ConstMatrixMap Wm = as_matrix(Wv);
        const auto Hi = ei(H);
        RowMatrix dz(ei(T), 4 * Hi);
        Eigen::Matrix<Real, Eigen::Dynamic, 1> dh = as_vector(g);
        Eigen::Matrix<Real, Eigen::Dynamic, 1> dc = Eigen::Matrix<Real, Eigen::Dynamic, 1>::Zero(Hi);
        for (std::size_t s = T; s-- > 0;) {
          const auto r = ei(s);
          for (Eigen::Index j = 0; j < Hi; ++j) {
            const Real ig = k.gates(r, j), fg = k.gates(r, Hi + j);
            const Real gg = k.gates(r, 2 * Hi + j), og = k.gates(r, 3 * Hi + j);
            const Real tc = k.tanh_cell(r, j);
            const Real c_prev = s > 0 ? k.cell(r - 1, j) : 0.0;
            const Real dct = dc(j) + dh(j) * og * (1.0 - tc * tc);
            dz(r, j) = dct * gg * ig * (1.0 - ig);
            dz(r, Hi + j) = dct * c_prev * fg * (1.0 - fg);
            dz(r, 2 * Hi + j) = dct * ig * (1.0 - gg * gg);
            dz(r, 3 * Hi + j) = dh(j) * tc * og * (1.0 - og);
            dc(j) = dct * fg;
          }
          if (s > 0) dh.noalias() = Wm.rightCols(Hi).transpose() * dz.row(r).transpose();
        }
        if (Tensor* gw = tp.grad_slot(iw)) {
          MatrixMap G = as_matrix(*gw);
          G.leftCols(ei(D)).noalias() += dz.transpose() * k.x;
          G.rightCols(Hi).noalias() += dz.transpose() * k.h_prev;
        }
        if (Tensor* gb = tp.grad_slot(ib)) as_vector(*gb) += dz.colwise().sum().transpose();
        bool any_input = false;
        for (auto id : k.ids) any_input = any_input || tp.grad_slot(id) != nullptr;
        if (!any_input) return;
        const RowMatrix dx = dz * Wm.leftCols(ei(D));
        for (std::size_t s = 0; s < T; ++s) {
          if (Tensor* gx = tp.grad_slot(k.ids[s])) as_vector(*gx) += dx.row(ei(s)).transpose();
        }
      });
}

Var detach(Var x) { return tape_of("detach", x).constant(x.value()); }

}  // namespace knnmem
