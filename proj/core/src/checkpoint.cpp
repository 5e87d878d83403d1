#include "knnmem/checkpoint.hpp"

#include <fstream>
#include <json.hpp>

#include "binary_io.hpp"
#include "knnmem/error.hpp"

namespace knnmem {

namespace {

constexpr char kMagic[9] = "KNNTXT01";
constexpr std::uint8_t kFloatWidth = sizeof(Real);

using nlohmann::json;

std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

json model_json(const ModelConfig& c) {
  return {{"word_dim", c.encoder.word_dim},
          {"char_dim", c.encoder.char_dim},
          {"char_lstm_dim", c.encoder.char_lstm_dim},
          {"hidden", c.encoder.hidden},
          {"max_tokens", c.encoder.max_tokens},
          {"perspectives", c.perspectives},
          {"use_text_embedding", c.features.use_text_embedding},
          {"use_attn_label", c.features.use_attn_label},
          {"use_attn_text", c.features.use_attn_text},
          {"num_classes", c.num_classes},
          {"neighbor_classes", c.neighbor_classes},
          {"stop_neighbor_gradient", c.stop_neighbor_gradient}};
}

template <typename T>
T field(const json& obj, const char* name) {
  auto it = obj.find(name);
  if (it == obj.end()) throw DataError(std::string("checkpoint manifest lacks '") + name + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw DataError(std::string("checkpoint manifest field '") + name + "' has the wrong type");
  }
}

ModelConfig model_from_json(const json& m) {
  ModelConfig c;
  c.encoder.word_dim = field<std::size_t>(m, "word_dim");
  c.encoder.char_dim = field<std::size_t>(m, "char_dim");
  c.encoder.char_lstm_dim = field<std::size_t>(m, "char_lstm_dim");
  c.encoder.hidden = field<std::size_t>(m, "hidden");
  c.encoder.max_tokens = field<std::size_t>(m, "max_tokens");
  c.perspectives = field<std::size_t>(m, "perspectives");
  c.features.use_text_embedding = field<bool>(m, "use_text_embedding");
  c.features.use_attn_label = field<bool>(m, "use_attn_label");
  c.features.use_attn_text = field<bool>(m, "use_attn_text");
  c.num_classes = field<std::size_t>(m, "num_classes");
  c.neighbor_classes = field<std::size_t>(m, "neighbor_classes");
  c.stop_neighbor_gradient = field<bool>(m, "stop_neighbor_gradient");
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, std::ostream& out) {
  const KnnModel& model = checkpoint.model;
  const Vocabulary& vocab = model.vocab();

  json chars = json::array();
  for (char32_t c : vocab.chars()) chars.push_back(static_cast<std::uint32_t>(c));
  json tensors = json::array();
  for (const Parameter& p : model.params()) {
    json rows = json::array();
    for (std::size_t r = 0; r < p.frozen_rows.size(); ++r) {
      if (p.frozen_rows[r]) rows.push_back(r);
    }
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"frozen", p.frozen}, {"frozen_rows", rows}});
  }
  json run = checkpoint.run_config.empty() ? json(nullptr) : json::parse(checkpoint.run_config);
  const json manifest = {{"format_version", 1},
                         {"model", model_json(model.config())},
                         {"vocab", {{"hash", hex64(vocab.hash())}, {"words", vocab.words()}, {"chars", chars}}},
                         {"epoch", checkpoint.epoch},
                         {"dev_accuracy", checkpoint.dev_accuracy},
                         {"run_config", run},
                         {"tensors", tensors}};

  detail::write_magic(out, kMagic);
  detail::write_le<std::uint8_t>(out, kFloatWidth);
  detail::write_blob(out, manifest.dump());
  for (const Parameter& p : model.params()) {
    for (Real v : p.value.data()) detail::write_le<Real>(out, v);
  }
  if (!out) throw DataError("failed writing checkpoint");
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  save_checkpoint(checkpoint, out);
}

Checkpoint load_checkpoint(std::istream& in) {
  detail::expect_magic(in, kMagic, "checkpoint");
  const auto width = detail::read_le<std::uint8_t>(in, "checkpoint float width");
  if (width != kFloatWidth) {
    throw DataError("checkpoint stores " + std::to_string(width * 8) + "-bit floats; this build reads " +
                    std::to_string(kFloatWidth * 8) + "-bit");
  }
  json manifest;
  try {
    manifest = json::parse(detail::read_blob(in, "checkpoint manifest"));
  } catch (const json::parse_error& e) {
    throw DataError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  if (field<int>(manifest, "format_version") != 1) throw DataError("unsupported checkpoint format_version");

  const ModelConfig config = model_from_json(field<json>(manifest, "model"));
  const json vj = field<json>(manifest, "vocab");
  std::u32string chars;
  for (auto c : field<std::vector<std::uint32_t>>(vj, "chars")) chars.push_back(static_cast<char32_t>(c));
  Vocabulary vocab(field<std::vector<std::string>>(vj, "words"), std::move(chars));
  if (hex64(vocab.hash()) != field<std::string>(vj, "hash")) {
    throw DataError("checkpoint vocabulary does not match its recorded hash");
  }

  ParameterSet params;
  for (const json& t : field<json>(manifest, "tensors")) {
    const auto shape = field<Shape>(t, "shape");
    if (shape.empty() || shape.size() > 2) throw DataError("checkpoint tensor with unsupported rank");
    Tensor value(shape);
    const std::string name = field<std::string>(t, "name");
    for (Real& v : value.data()) v = detail::read_le<Real>(in, name.c_str());
    std::vector<bool> rows;
    for (auto r : field<std::vector<std::size_t>>(t, "frozen_rows")) {
      if (r >= value.rows()) throw DataError("frozen row outside tensor " + name);
      rows.resize(value.rows(), false);
      rows[r] = true;
    }
    params.add(name, std::move(value), field<bool>(t, "frozen"), std::move(rows));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes after checkpoint tensors");

  Checkpoint out{KnnModel(config, std::move(vocab), std::move(params)), field<std::size_t>(manifest, "epoch"),
                 field<double>(manifest, "dev_accuracy"), std::string()};
  const json& run = manifest.at("run_config");
  if (!run.is_null()) out.run_config = run.dump();
  return out;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

void check_vocabulary(const Checkpoint& checkpoint, const Vocabulary& vocab) {
  const auto expected = checkpoint.model.vocab().hash();
  if (vocab.hash() != expected) {
    throw DataError("vocabulary hash mismatch: checkpoint " + hex64(expected) + ", data " + hex64(vocab.hash()));
  }
}

}  // namespace knnmem
