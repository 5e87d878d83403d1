#pragma once

// Text encoder: word vectors (frozen table) concatenated with a character
// LSTM composition, fed through a BiLSTM whose final states form the text
// embedding.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "knnmem/autodiff.hpp"
#include "knnmem/corpus.hpp"
#include "knnmem/rng.hpp"

namespace knnmem {

struct EncoderConfig {
  std::size_t word_dim = 300;
  std::size_t char_dim = 20;
  std::size_t char_lstm_dim = 50;
  std::size_t hidden = 100;
  std::size_t max_tokens = 256;

  /// Width of one word representation.
  std::size_t word_repr_dim() const { return word_dim + char_lstm_dim; }
  /// Width of a text embedding.
  std::size_t output_dim() const { return 2 * hidden; }
  void validate() const;
};

/// |V| x word_dim matrix. Rows listed in `pretrained` came from a vector file.
struct EmbeddingTable {
  Tensor matrix;
  std::vector<bool> pretrained;
  bool frozen = true;

  std::size_t dim() const { return matrix.cols(); }
};

/// Every row drawn from U(-0.05, 0.05).
EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, Rng& rng);

/// Reads `token v1 ... vD` lines. Rows of vocabulary words found in the file
/// copy the file vector; all other rows stay random. The width is taken from
/// the file (`default_dim` when the file is empty). Mismatched widths throw.
EmbeddingTable load_pretrained_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                                          std::size_t default_dim, Rng& rng);

/// Gate order inside the stacked weight: input, forget, cell, output.
struct LstmLayer {
  ParamId weight = 0;  // {4H, input + H}
  ParamId bias = 0;    // {4H}
  std::size_t input = 0;
  std::size_t hidden = 0;
};

struct LstmState {
  Var h;
  Var c;
};

ParamId add_uniform_param(ParameterSet& params, std::string name, Shape shape, Real range, std::uint64_t seed);
LstmLayer add_lstm_layer(ParameterSet& params, const std::string& prefix, std::size_t input, std::size_t hidden,
                         std::uint64_t seed);
LstmState lstm_initial_state(Tape& tape, const LstmLayer& layer);
LstmState lstm_step(Tape& tape, const LstmLayer& layer, Var x, const LstmState& state);
/// Final hidden state after running over `inputs` (in reverse when asked).
Var lstm_final(Tape& tape, const LstmLayer& layer, std::span<const Var> inputs, bool reverse = false);

struct EncoderParams {
  ParamId word_embedding = 0;
  ParamId char_embedding = 0;
  LstmLayer char_lstm;
  LstmLayer forward;
  LstmLayer backward;
};

/// Registers the encoder tensors. The word table must have word_dim columns.
/// Each tensor is initialised from its own named random stream of `seed`.
EncoderParams add_encoder_params(ParameterSet& params, const EncoderConfig& config, EmbeddingTable words,
                                 std::size_t char_count, std::uint64_t seed);
/// Looks the encoder tensors up by name (checkpoint reload).
EncoderParams find_encoder_params(const ParameterSet& params, const EncoderConfig& config);

/// Per-tape memo of word representations, keyed by token text.
using WordCache = std::unordered_map<std::string, Var>;

class TextEncoder {
 public:
  TextEncoder(EncoderConfig config, const Vocabulary* vocab, EncoderParams params);

  const EncoderConfig& config() const { return config_; }
  const EncoderParams& params() const { return params_; }

  /// Final state of the character LSTM over the word's characters.
  Var char_compose(Tape& tape, std::string_view word) const;
  /// [word embedding ; character composition].
  Var word_represent(Tape& tape, std::string_view token, WordCache* cache = nullptr) const;
  /// [forward state at the last token ; backward state at the first token].
  /// Only the first max_tokens tokens are read.
  Var encode(Tape& tape, std::span<const std::string> tokens, WordCache* cache = nullptr) const;

 private:
  EncoderConfig config_;
  const Vocabulary* vocab_;
  EncoderParams params_;
};

}  // namespace knnmem
