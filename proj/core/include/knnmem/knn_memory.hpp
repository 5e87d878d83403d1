#pragma once

// kNN memory head: multi-perspective cosine attention between the input text
// embedding and each retrieved neighbor, attention-weighted sums of neighbor
// labels and embeddings, feature assembly, and the softmax classifier.
//
// For neighbor k and perspective i with weight row W_i:
//   s_k^i   = cosine(W_i * h, W_i * h'_k)        (element-wise products)
//   yhat_i  = sum_k s_k^i * onehot(y'_k)
//   hhat_i  = sum_k s_k^i * h'_k
// Attention scores are raw cosines; there is no normalization across
// neighbors. Missing neighbors contribute nothing.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnmem/autodiff.hpp"
#include "knnmem/corpus.hpp"

namespace knnmem {

enum class MatchMode { multi_perspective, vanilla_cosine };

std::string_view to_string(MatchMode mode);

struct FeatureConfig {
  bool use_text_embedding = true;
  bool use_attn_label = true;
  bool use_attn_text = true;

  /// Presets M1..M7: text; label; attn-text; label+attn-text; text+label;
  /// text+attn-text; all three.
  static FeatureConfig preset(int index);
  /// "M1".."M7" (case-insensitive).
  static FeatureConfig parse(std::string_view name);
  /// Preset name, or a "custom" flag string when no preset matches.
  std::string name() const;
  bool uses_memory() const { return use_attn_label || use_attn_text; }
  void validate() const;

  /// Length of the assembled feature vector.
  std::size_t width(std::size_t embed_dim, std::size_t perspectives, std::size_t neighbor_classes) const;

  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

/// Similarities of `h` and `neighbor` under each perspective -> {I}.
/// `weights` is the {I, l} matrix W; it is ignored (may be invalid) in
/// vanilla mode, which returns the single unweighted cosine -> {1}.
Var match_multi_perspective(Var h, Var neighbor, Var weights, MatchMode mode);

/// Stacks per-neighbor matches into the {K, I} attention matrix. K = 0 gives
/// an invalid Var.
Var neighbor_attention(Var h, std::span<const Var> neighbors, Var weights, MatchMode mode);

/// concat_i(sum_k s_k^i onehot(y'_k)) -> {I*c}. `attention` is {K, I}.
/// With K = 0 pass an invalid attention Var and `perspectives` > 0.
Var attentive_label_distribution(Tape& tape, Var attention, std::span<const Label> neighbor_labels,
                                 std::size_t num_classes, std::size_t perspectives);

/// concat_i(sum_k s_k^i h'_k) -> {I*l}.
Var attentive_text_embedding(Tape& tape, Var attention, std::span<const Var> neighbor_embeddings,
                             std::size_t embed_dim, std::size_t perspectives);

/// [h ; yhat ; hhat] restricted to the enabled parts, in that order.
Var assemble_features(std::optional<Var> text, std::optional<Var> attn_label, std::optional<Var> attn_text,
                      const FeatureConfig& config);

struct Prediction {
  Label label = 0;
  std::vector<Real> probabilities;
};

/// Softmax over logits; argmax with ties to the lowest class index.
Prediction predict_from_logits(std::span<const Real> logits);
/// Affine classifier + softmax over a feature vector. weights is {c, F}.
Prediction predict(std::span<const Real> features, const Tensor& weights, const Tensor& bias);

}  // namespace knnmem
