#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "knnmem/autodiff.hpp"
#include "knnmem/corpus.hpp"
#include "knnmem/encoder.hpp"
#include "knnmem/knn_memory.hpp"

namespace knnmem {

struct ModelConfig {
  EncoderConfig encoder;
  /// Perspective count I; 0 selects the vanilla cosine baseline.
  std::size_t perspectives = 5;
  FeatureConfig features;
  std::size_t num_classes = 2;
  /// One-hot width for neighbor labels; 0 means num_classes. A transfer setup
  /// sets it to the external task's class count.
  std::size_t neighbor_classes = 0;
  /// Treat neighbor embeddings as constants (no gradient through them).
  bool stop_neighbor_gradient = false;

  MatchMode match_mode() const {
    return perspectives == 0 ? MatchMode::vanilla_cosine : MatchMode::multi_perspective;
  }
  std::size_t effective_perspectives() const { return perspectives == 0 ? 1 : perspectives; }
  std::size_t label_width() const { return neighbor_classes == 0 ? num_classes : neighbor_classes; }
  std::size_t feature_width() const {
    return features.width(encoder.output_dim(), effective_perspectives(), label_width());
  }
  void validate() const;
};

/// Tape values produced by one forward pass.
struct ModelOutput {
  Var logits;
  Var loss;       ///< valid when a target label was given
  Var attention;  ///< {K, I}; invalid when the memory is unused or K = 0
  Var features;
  std::size_t neighbor_count = 0;
};

/// The text encoder shared by the input and its neighbors, the kNN memory,
/// and a single affine softmax classifier.
class KnnModel {
 public:
  /// Fresh model. Every tensor is drawn from its own stream of `seed`, so
  /// presets that share tensors initialise them identically.
  KnnModel(ModelConfig config, Vocabulary vocab, EmbeddingTable words, std::uint64_t seed);
  /// Restores a model from saved tensors.
  KnnModel(ModelConfig config, Vocabulary vocab, ParameterSet params);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  TextEncoder encoder() const { return TextEncoder(config_.encoder, &vocab_, encoder_params_); }
  std::optional<ParamId> matching_weights() const { return matching_; }

  /// Neighbors are consumed in the given (retrieval) order; the memory ignores
  /// them entirely when the feature configuration does not use it.
  ModelOutput forward(Tape& tape, const Document& input, std::span<const Document* const> neighbors,
                      std::optional<Label> target = std::nullopt) const;

  Prediction predict(const Document& input, std::span<const Document* const> neighbors) const;

 private:
  void bind();

  ModelConfig config_;
  Vocabulary vocab_;
  ParameterSet params_;
  EncoderParams encoder_params_;
  std::optional<ParamId> matching_;
  ParamId classifier_weight_ = 0;
  ParamId classifier_bias_ = 0;
};

}  // namespace knnmem
