#include "knnmem/model.hpp"

#include "knnmem/error.hpp"
#include "knnmem/rng.hpp"

namespace knnmem {

namespace {

constexpr Real kClassifierRange = 0.08;
constexpr Real kMatchingNoise = 0.01;

}  // namespace

void ModelConfig::validate() const {
  encoder.validate();
  features.validate();
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
}

KnnModel::KnnModel(ModelConfig config, Vocabulary vocab, EmbeddingTable words, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  if (words.matrix.rows() != vocab_.word_count()) {
    throw ShapeError("word table has " + std::to_string(words.matrix.rows()) + " rows for " +
                     std::to_string(vocab_.word_count()) + " vocabulary entries");
  }
  config_.encoder.word_dim = words.dim();
  encoder_params_ = add_encoder_params(params_, config_.encoder, std::move(words), vocab_.char_count(), seed);

  const std::size_t l = config_.encoder.output_dim();
  if (config_.features.uses_memory() && config_.match_mode() == MatchMode::multi_perspective) {
    Rng rng = Rng::derive(seed, "memory.W");
    Tensor w(Shape{config_.perspectives, l});
    for (Real& v : w.data()) v = 1.0 + rng.uniform(-kMatchingNoise, kMatchingNoise);
    params_.add("memory.W", std::move(w));
  }
  add_uniform_param(params_, "classifier.weight", Shape{config_.num_classes, config_.feature_width()},
                    kClassifierRange, seed);
  params_.add("classifier.bias", Tensor(Shape{config_.num_classes}));
  bind();
}

KnnModel::KnnModel(ModelConfig config, Vocabulary vocab, ParameterSet params)
    : config_(config), vocab_(std::move(vocab)), params_(std::move(params)) {
  config_.validate();
  bind();
}

void KnnModel::bind() {
  const auto& words = params_[params_.require("word_embedding")].value;
  if (words.rank() != 2 || words.rows() != vocab_.word_count() || words.cols() != config_.encoder.word_dim) {
    throw DataError("word_embedding has shape " + to_string(words.shape()) + ", expected [" +
                    std::to_string(vocab_.word_count()) + ", " + std::to_string(config_.encoder.word_dim) + "]");
  }
  const auto& chars = params_[params_.require("char_embedding")].value;
  if (chars.rank() != 2 || chars.rows() != vocab_.char_count() || chars.cols() != config_.encoder.char_dim) {
    throw DataError("char_embedding has shape " + to_string(chars.shape()));
  }
  encoder_params_ = find_encoder_params(params_, config_.encoder);

  matching_ = params_.find("memory.W");
  const bool needs_matching =
      config_.features.uses_memory() && config_.match_mode() == MatchMode::multi_perspective;
  if (needs_matching != matching_.has_value()) throw DataError("memory.W presence does not match the configuration");
  if (matching_ && params_[*matching_].value.shape() != Shape{config_.perspectives, config_.encoder.output_dim()}) {
    throw DataError("memory.W has shape " + to_string(params_[*matching_].value.shape()));
  }
  classifier_weight_ = params_.require("classifier.weight");
  classifier_bias_ = params_.require("classifier.bias");
  if (params_[classifier_weight_].value.shape() != Shape{config_.num_classes, config_.feature_width()}) {
    throw DataError("classifier.weight has shape " + to_string(params_[classifier_weight_].value.shape()) +
                    ", expected [" + std::to_string(config_.num_classes) + ", " +
                    std::to_string(config_.feature_width()) + "]");
  }
  if (params_[classifier_bias_].value.shape() != Shape{config_.num_classes}) {
    throw DataError("classifier.bias has shape " + to_string(params_[classifier_bias_].value.shape()));
  }
}

ModelOutput KnnModel::forward(Tape& tape, const Document& input, std::span<const Document* const> neighbors,
                              std::optional<Label> target) const {
  const TextEncoder enc = encoder();
  const FeatureConfig& fc = config_.features;
  const std::size_t l = config_.encoder.output_dim();
  const std::size_t persp = config_.effective_perspectives();
  WordCache cache;

  ModelOutput out;
  const Var h = enc.encode(tape, input.tokens, &cache);

  std::optional<Var> attn_label;
  std::optional<Var> attn_text;
  if (fc.uses_memory()) {
    std::vector<Var> embeddings;
    std::vector<Label> labels;
    embeddings.reserve(neighbors.size());
    for (const Document* n : neighbors) {
      Var e = enc.encode(tape, n->tokens, &cache);
      embeddings.push_back(config_.stop_neighbor_gradient ? detach(e) : e);
      labels.push_back(n->label);
    }
    const Var weights = matching_ ? tape.parameter(*matching_) : Var();
    out.attention = neighbor_attention(h, embeddings, weights, config_.match_mode());
    out.neighbor_count = neighbors.size();
    if (fc.use_attn_label) {
      attn_label = attentive_label_distribution(tape, out.attention, labels, config_.label_width(), persp);
    }
    if (fc.use_attn_text) attn_text = attentive_text_embedding(tape, out.attention, embeddings, l, persp);
  }

  out.features = assemble_features(h, attn_label, attn_text, fc);
  out.logits = add(matmul(tape.parameter(classifier_weight_), out.features), tape.parameter(classifier_bias_));
  if (target) {
    if (*target >= config_.num_classes) throw DataError("target label out of range");
    out.loss = softmax_cross_entropy(out.logits, *target);
  }
  return out;
}

Prediction KnnModel::predict(const Document& input, std::span<const Document* const> neighbors) const {
  Tape tape(&params_);
  const ModelOutput out = forward(tape, input, neighbors);
  return predict_from_logits(out.logits.value().data());
}

}  // namespace knnmem
