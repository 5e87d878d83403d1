#include "knnmem/encoder.hpp"

#include <fstream>
#include <sstream>

#include "knnmem/error.hpp"

namespace knnmem {

namespace {

constexpr Real kWeightRange = 0.08;
constexpr Real kEmbeddingRange = 0.05;
constexpr Real kForgetBias = 1.0;

}  // namespace

void EncoderConfig::validate() const {
  if (word_dim == 0 || char_dim == 0 || char_lstm_dim == 0 || hidden == 0 || max_tokens == 0) {
    throw ConfigError("encoder dimensions and max_tokens must all be >= 1");
  }
}

EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, Rng& rng) {
  if (dim == 0) throw ConfigError("embedding width must be >= 1");
  EmbeddingTable table;
  table.matrix = Tensor(Shape{vocab.word_count(), dim});
  for (Real& v : table.matrix.data()) v = rng.uniform(-kEmbeddingRange, kEmbeddingRange);
  table.pretrained.assign(vocab.word_count(), false);
  return table;
}

EmbeddingTable load_pretrained_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                                          std::size_t default_dim, Rng& rng) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embeddings " + path.string());

  struct Row {
    std::uint32_t id;
    std::vector<Real> values;
  };
  std::vector<Row> found;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    std::vector<Real> values;
    std::string num;
    while (fields >> num) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(num, &used));
        if (used != num.size()) throw std::invalid_argument(num);
      } catch (const std::exception&) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad number '" + num + "'");
      }
    }
    if (values.empty()) throw DataError(path.string() + ":" + std::to_string(line_no) + ": no vector components");
    if (width == 0) {
      width = values.size();
    } else if (values.size() != width) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": vector width " +
                      std::to_string(values.size()) + " differs from " + std::to_string(width));
    }
    const std::uint32_t id = vocab.word_id(token);
    if (id != Vocabulary::kUnknown) found.push_back(Row{id, std::move(values)});
  }

  // Random fill first so the draws do not depend on which words the file covers.
  EmbeddingTable table = random_embeddings(vocab, width == 0 ? default_dim : width, rng);
  for (auto& row : found) {
    auto dst = table.matrix.row(row.id);
    std::copy(row.values.begin(), row.values.end(), dst.begin());
    table.pretrained[row.id] = true;
  }
  return table;
}

ParamId add_uniform_param(ParameterSet& params, std::string name, Shape shape, Real range, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, name);
  Tensor value(std::move(shape));
  for (Real& v : value.data()) v = rng.uniform(-range, range);
  return params.add(std::move(name), std::move(value));
}

LstmLayer add_lstm_layer(ParameterSet& params, const std::string& prefix, std::size_t input, std::size_t hidden,
                         std::uint64_t seed) {
  LstmLayer layer;
  layer.input = input;
  layer.hidden = hidden;
  layer.weight = add_uniform_param(params, prefix + ".weight", Shape{4 * hidden, input + hidden}, kWeightRange, seed);
  Tensor bias(Shape{4 * hidden});
  for (std::size_t j = hidden; j < 2 * hidden; ++j) bias[j] = kForgetBias;
  layer.bias = params.add(prefix + ".bias", std::move(bias));
  return layer;
}

LstmState lstm_initial_state(Tape& tape, const LstmLayer& layer) {
  return LstmState{tape.constant(Tensor(Shape{layer.hidden})), tape.constant(Tensor(Shape{layer.hidden}))};
}

LstmState lstm_step(Tape& tape, const LstmLayer& layer, Var x, const LstmState& state) {
  const std::size_t h = layer.hidden;
  const Var xh[] = {x, state.h};
  const Var z = add(matmul(tape.parameter(layer.weight), concat(xh)), tape.parameter(layer.bias));
  const Var in_gate = sigmoid(slice(z, 0, h));
  const Var forget_gate = sigmoid(slice(z, h, h));
  const Var candidate = tanh(slice(z, 2 * h, h));
  const Var out_gate = sigmoid(slice(z, 3 * h, h));
  const Var c = add(elementwise_mul(forget_gate, state.c), elementwise_mul(in_gate, candidate));
  return LstmState{elementwise_mul(out_gate, tanh(c)), c};
}

Var lstm_final(Tape& tape, const LstmLayer& layer, std::span<const Var> inputs, bool reverse) {
  if (inputs.empty()) return lstm_initial_state(tape, layer).h;
  return lstm_sequence(tape.parameter(layer.weight), tape.parameter(layer.bias), inputs, reverse);
}

EncoderParams add_encoder_params(ParameterSet& params, const EncoderConfig& config, EmbeddingTable words,
                                 std::size_t char_count, std::uint64_t seed) {
  config.validate();
  if (words.matrix.rank() != 2 || words.dim() != config.word_dim) {
    throw ShapeError("word embedding width " + std::to_string(words.dim()) + " does not match word_dim " +
                     std::to_string(config.word_dim));
  }
  EncoderParams p;
  const bool frozen = words.frozen;
  std::vector<bool> row_mask = frozen ? std::vector<bool>{} : words.pretrained;
  p.word_embedding = params.add("word_embedding", std::move(words.matrix), frozen, std::move(row_mask));
  p.char_embedding =
      add_uniform_param(params, "char_embedding", Shape{char_count, config.char_dim}, kWeightRange, seed);
  p.char_lstm = add_lstm_layer(params, "char_lstm", config.char_dim, config.char_lstm_dim, seed);
  p.forward = add_lstm_layer(params, "bilstm.forward", config.word_repr_dim(), config.hidden, seed);
  p.backward = add_lstm_layer(params, "bilstm.backward", config.word_repr_dim(), config.hidden, seed);
  return p;
}

EncoderParams find_encoder_params(const ParameterSet& params, const EncoderConfig& config) {
  auto layer = [&](const std::string& prefix, std::size_t input, std::size_t hidden) {
    LstmLayer l;
    l.weight = params.require(prefix + ".weight");
    l.bias = params.require(prefix + ".bias");
    l.input = input;
    l.hidden = hidden;
    if (params[l.weight].value.shape() != Shape{4 * hidden, input + hidden}) {
      throw DataError(prefix + ".weight has shape " + to_string(params[l.weight].value.shape()));
    }
    return l;
  };
  EncoderParams p;
  p.word_embedding = params.require("word_embedding");
  p.char_embedding = params.require("char_embedding");
  p.char_lstm = layer("char_lstm", config.char_dim, config.char_lstm_dim);
  p.forward = layer("bilstm.forward", config.word_repr_dim(), config.hidden);
  p.backward = layer("bilstm.backward", config.word_repr_dim(), config.hidden);
  return p;
}

TextEncoder::TextEncoder(EncoderConfig config, const Vocabulary* vocab, EncoderParams params)
    : config_(config), vocab_(vocab), params_(params) {
  config_.validate();
}

Var TextEncoder::char_compose(Tape& tape, std::string_view word) const {
  const auto ids = vocab_->char_ids(word);
  if (ids.empty()) throw DataError("cannot compose an empty word");
  std::vector<Var> chars;
  chars.reserve(ids.size());
  for (auto id : ids) chars.push_back(tape.parameter_row(params_.char_embedding, id));
  return lstm_final(tape, params_.char_lstm, chars);
}

Var TextEncoder::word_represent(Tape& tape, std::string_view token, WordCache* cache) const {
  if (cache) {
    if (auto it = cache->find(std::string(token)); it != cache->end() && &it->second.tape() == &tape) {
      return it->second;
    }
  }
  const Var parts[] = {tape.parameter_row(params_.word_embedding, vocab_->word_id(token)), char_compose(tape, token)};
  Var repr = concat(parts);
  if (cache) (*cache)[std::string(token)] = repr;
  return repr;
}

Var TextEncoder::encode(Tape& tape, std::span<const std::string> tokens, WordCache* cache) const {
  if (tokens.empty()) throw DataError("cannot encode an empty token sequence");
  const std::size_t n = std::min(tokens.size(), config_.max_tokens);
  std::vector<Var> reps;
  reps.reserve(n);
  for (std::size_t i = 0; i < n; ++i) reps.push_back(word_represent(tape, tokens[i], cache));
  const Var states[] = {lstm_final(tape, params_.forward, reps), lstm_final(tape, params_.backward, reps, true)};
  return concat(states);
}

}  // namespace knnmem
