#include "knnmem/knn_memory.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "knnmem/error.hpp"

namespace knnmem {

std::string_view to_string(MatchMode mode) {
  return mode == MatchMode::vanilla_cosine ? "vanilla_cosine" : "multi_perspective";
}

// ------------------------------------------------------- feature presets

FeatureConfig FeatureConfig::preset(int index) {
  switch (index) {
    case 1: return {true, false, false};
    case 2: return {false, true, false};
    case 3: return {false, false, true};
    case 4: return {false, true, true};
    case 5: return {true, true, false};
    case 6: return {true, false, true};
    case 7: return {true, true, true};
    default: throw ConfigError("feature preset must be M1..M7, got M" + std::to_string(index));
  }
}

FeatureConfig FeatureConfig::parse(std::string_view name) {
  if (name.size() == 2 && (name[0] == 'M' || name[0] == 'm') && std::isdigit(static_cast<unsigned char>(name[1]))) {
    return preset(name[1] - '0');
  }
  throw ConfigError("unknown feature preset '" + std::string(name) + "' (expected M1..M7)");
}

std::string FeatureConfig::name() const {
  for (int i = 1; i <= 7; ++i) {
    if (preset(i) == *this) return "M" + std::to_string(i);
  }
  return "none";
}

void FeatureConfig::validate() const {
  if (!use_text_embedding && !use_attn_label && !use_attn_text) {
    throw ConfigError("feature configuration enables no features");
  }
}

std::size_t FeatureConfig::width(std::size_t embed_dim, std::size_t perspectives, std::size_t neighbor_classes) const {
  return (use_text_embedding ? embed_dim : 0) + (use_attn_label ? perspectives * neighbor_classes : 0) +
         (use_attn_text ? perspectives * embed_dim : 0);
}

// -------------------------------------------------------------- matching

namespace {

void check_pair(Var h, Var neighbor) {
  if (!h.valid() || !neighbor.valid() || h.value().rank() != 1 || h.shape() != neighbor.shape()) {
    throw ShapeError("match_multi_perspective: dimension mismatch between " +
                     (h.valid() ? to_string(h.shape()) : std::string("<none>")) + " and " +
                     (neighbor.valid() ? to_string(neighbor.shape()) : std::string("<none>")));
  }
}

void check_weights(Var h, Var weights) {
  if (!weights.valid() || weights.value().rank() != 2 || weights.value().cols() != h.size() ||
      weights.value().rows() == 0) {
    throw ShapeError("match_multi_perspective: weights must be {I, " + std::to_string(h.size()) + "}");
  }
}

/// Row-broadcast W * v, or v as a single row in vanilla mode.
Var weighted(Var v, Var weights, MatchMode mode) {
  if (mode == MatchMode::vanilla_cosine) return reshape(v, Shape{1, v.size()});
  return elementwise_mul(weights, v);
}

/// out[i*d + j] = sum_k S[k][i] * V[k][j]. Each sum adds its terms in
/// ascending |term| order, so any permutation of the K rows gives a
/// bitwise-identical result.
Var attention_weighted_sum(Var attention, Var values) {
  Tape& tape = attention.tape();
  const Tensor& S = attention.value();
  const Tensor& V = values.value();
  const std::size_t K = S.rows();
  const std::size_t I = S.cols();
  const std::size_t d = V.cols();
  if (V.rows() != K) {
    throw ShapeError("attention_weighted_sum: " + std::to_string(K) + " attention rows vs " +
                     std::to_string(V.rows()) + " value rows");
  }
  Tensor out(Shape{I * d});
  std::vector<Real> terms(K);
  auto by_magnitude = [](Real a, Real b) {
    const Real fa = std::abs(a), fb = std::abs(b);
    return fa != fb ? fa < fb : a < b;
  };
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t k = 0; k < K; ++k) terms[k] = S.at(k, i) * V.at(k, j);
      std::sort(terms.begin(), terms.end(), by_magnitude);
      Real total = 0.0;
      for (Real t : terms) total += t;
      out[i * d + j] = total;
    }
  }
  const Var ins[] = {attention, values};
  return tape.record("attention_weighted_sum", std::move(out), ins,
                     [is = attention.id(), iv = values.id(), K, I, d](Tape& t, const Tensor&, const Tensor& g) {
                       const Tensor& S = t.value(is);
                       const Tensor& V = t.value(iv);
                       if (Tensor* gs = t.grad_slot(is)) {
                         for (std::size_t k = 0; k < K; ++k) {
                           for (std::size_t i = 0; i < I; ++i) {
                             Real acc = 0.0;
                             for (std::size_t j = 0; j < d; ++j) acc += g[i * d + j] * V.at(k, j);
                             gs->at(k, i) += acc;
                           }
                         }
                       }
                       if (Tensor* gv = t.grad_slot(iv)) {
                         for (std::size_t k = 0; k < K; ++k) {
                           for (std::size_t j = 0; j < d; ++j) {
                             Real acc = 0.0;
                             for (std::size_t i = 0; i < I; ++i) acc += g[i * d + j] * S.at(k, i);
                             gv->at(k, j) += acc;
                           }
                         }
                       }
                     });
}

}  // namespace

Var match_multi_perspective(Var h, Var neighbor, Var weights, MatchMode mode) {
  check_pair(h, neighbor);
  if (mode == MatchMode::multi_perspective) check_weights(h, weights);
  return cosine_rows(weighted(h, weights, mode), weighted(neighbor, weights, mode));
}

Var neighbor_attention(Var h, std::span<const Var> neighbors, Var weights, MatchMode mode) {
  if (neighbors.empty()) return Var();
  if (mode == MatchMode::multi_perspective) check_weights(h, weights);
  const Var wh = weighted(h, weights, mode);
  std::vector<Var> rows;
  rows.reserve(neighbors.size());
  for (const Var& n : neighbors) {
    check_pair(h, n);
    const Var s = cosine_rows(wh, weighted(n, weights, mode));
    rows.push_back(reshape(s, Shape{1, s.size()}));
  }
  return concat(rows, 0);
}

Var attentive_label_distribution(Tape& tape, Var attention, std::span<const Label> neighbor_labels,
                                 std::size_t num_classes, std::size_t perspectives) {
  for (Label y : neighbor_labels) {
    if (y >= num_classes) {
      throw DataError("neighbor label " + std::to_string(y) + " outside " + std::to_string(num_classes) + " classes");
    }
  }
  if (!attention.valid() || neighbor_labels.empty()) {
    if (attention.valid() || !neighbor_labels.empty()) {
      throw ShapeError("attentive_label_distribution: attention rows do not match label count");
    }
    return tape.constant(Tensor(Shape{perspectives * num_classes}));
  }
  if (attention.value().rank() != 2 || attention.value().rows() != neighbor_labels.size()) {
    throw ShapeError("attentive_label_distribution: attention rows do not match label count");
  }
  Tensor onehot(Shape{neighbor_labels.size(), num_classes});
  for (std::size_t k = 0; k < neighbor_labels.size(); ++k) onehot.at(k, neighbor_labels[k]) = 1.0;
  return attention_weighted_sum(attention, tape.constant(std::move(onehot)));
}

Var attentive_text_embedding(Tape& tape, Var attention, std::span<const Var> neighbor_embeddings,
                             std::size_t embed_dim, std::size_t perspectives) {
  if (!attention.valid() || neighbor_embeddings.empty()) {
    if (attention.valid() || !neighbor_embeddings.empty()) {
      throw ShapeError("attentive_text_embedding: attention rows do not match embedding count");
    }
    return tape.constant(Tensor(Shape{perspectives * embed_dim}));
  }
  if (attention.value().rank() != 2 || attention.value().rows() != neighbor_embeddings.size()) {
    throw ShapeError("attentive_text_embedding: attention rows do not match embedding count");
  }
  std::vector<Var> rows;
  rows.reserve(neighbor_embeddings.size());
  for (const Var& e : neighbor_embeddings) {
    if (e.value().rank() != 1 || e.size() != embed_dim) {
      throw ShapeError("attentive_text_embedding: embedding of shape " + to_string(e.shape()) + ", expected {" +
                       std::to_string(embed_dim) + "}");
    }
    rows.push_back(reshape(e, Shape{1, embed_dim}));
  }
  return attention_weighted_sum(attention, concat(rows, 0));
}

Var assemble_features(std::optional<Var> text, std::optional<Var> attn_label, std::optional<Var> attn_text,
                      const FeatureConfig& config) {
  config.validate();
  std::vector<Var> parts;
  auto take = [&](bool enabled, const std::optional<Var>& part, const char* what) {
    if (!enabled) return;
    if (!part || !part->valid()) throw ShapeError(std::string("assemble_features: missing ") + what);
    parts.push_back(*part);
  };
  take(config.use_text_embedding, text, "text embedding");
  take(config.use_attn_label, attn_label, "attentive label distribution");
  take(config.use_attn_text, attn_text, "attentive text embedding");
  if (parts.size() == 1) return parts.front();
  return concat(parts);
}

// ------------------------------------------------------------ classifier

Prediction predict_from_logits(std::span<const Real> logits) {
  if (logits.empty()) throw ShapeError("predict: no logits");
  Prediction out;
  const Real shift = *std::max_element(logits.begin(), logits.end());
  Real denom = 0.0;
  out.probabilities.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.probabilities[i] = std::exp(logits[i] - shift);
    denom += out.probabilities[i];
  }
  for (Real& p : out.probabilities) p /= denom;
  out.label = static_cast<Label>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  return out;
}

Prediction predict(std::span<const Real> features, const Tensor& weights, const Tensor& bias) {
  if (weights.rank() != 2 || weights.cols() != features.size() || bias.size() != weights.rows()) {
    throw ShapeError("predict: classifier " + to_string(weights.shape()) + " cannot take " +
                     std::to_string(features.size()) + " features");
  }
  std::vector<Real> logits(weights.rows());
  for (std::size_t r = 0; r < weights.rows(); ++r) {
    Real acc = bias[r];
    auto w = weights.row(r);
    for (std::size_t c = 0; c < features.size(); ++c) acc += w[c] * features[c];
    logits[r] = acc;
  }
  return predict_from_logits(logits);
}

}  // namespace knnmem
