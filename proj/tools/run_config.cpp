#include "run_config.hpp"

#include <fstream>

#include "knnmem/error.hpp"

namespace knnmem::cli {

using nlohmann::json;

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = {
      {"train", KeyType::text, "", "training CSV (class,title,body)"},
      {"dev", KeyType::text, "", "dev CSV; empty holds out dev_per_class documents per class from train"},
      {"classes", KeyType::text, "", "class names file; empty tries classes.txt next to train"},
      {"num_classes", KeyType::integer, 0, "class count when no class names file exists"},
      {"dev_per_class", KeyType::integer, 500, "dev documents held out per class"},
      {"external", KeyType::text, "", "external CSV used as the neighbor source"},
      {"external_classes", KeyType::text, "", "class names file of the external corpus"},
      {"external_num_classes", KeyType::integer, 0, "external class count when no names file exists"},
      {"out_dir", KeyType::text, "knnmem-out", "directory for written artifacts"},
      {"setup", KeyType::text, "", "full, low_resource, unbalanced, semi_supervised or transfer; empty trains one model"},
      {"low_resource_fraction", KeyType::real, 0.1, "per-class fraction kept by low_resource"},
      {"unbalanced_counts", KeyType::integer_list, json::array({2000, 4000, 8000, 16000}),
       "per-class training counts for unbalanced"},
      {"epochs", KeyType::integer, 15, "passes over the training set"},
      {"lr", KeyType::real, 1e-4, "Adam learning rate"},
      {"batch_size", KeyType::integer, 32, "minibatch size"},
      {"k", KeyType::integer, 5, "neighbors per document"},
      {"perspectives", KeyType::integer, 5, "matching perspectives I; 0 uses plain cosine"},
      {"seed", KeyType::integer, 1, "random seed"},
      {"preset", KeyType::text, "M7", "feature preset M1..M7"},
      {"self_exclude", KeyType::boolean, true, "drop a training document from its own neighbors"},
      {"clip_norm", KeyType::real, 5.0, "global gradient norm clip; 0 disables"},
      {"word_dim", KeyType::integer, 300, "word vector width (taken from the file when embeddings is set)"},
      {"char_dim", KeyType::integer, 20, "character embedding width"},
      {"char_lstm_dim", KeyType::integer, 50, "character LSTM state width"},
      {"hidden", KeyType::integer, 100, "BiLSTM state width per direction"},
      {"max_tokens", KeyType::integer, 256, "tokens read per document"},
      {"bm25_k1", KeyType::real, 1.2, "BM25 k1"},
      {"bm25_b", KeyType::real, 0.75, "BM25 b"},
      {"min_count", KeyType::integer, 1, "minimum training count for a vocabulary word"},
      {"embeddings", KeyType::text, "", "pretrained word vectors (token v1 ... vD per line)"},
      {"train_oov_embeddings", KeyType::boolean, false, "train word rows missing from the embeddings file"},
      {"stop_neighbor_gradient", KeyType::boolean, false, "no gradient through neighbor encodings"},
      {"threads", KeyType::integer, 1, "worker threads"},
  };
  return keys;
}

const ConfigKey* find_key(std::string_view name) {
  for (const auto& k : config_schema()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

namespace {

bool type_matches(KeyType type, const json& v) {
  switch (type) {
    case KeyType::integer: return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    case KeyType::real: return v.is_number();
    case KeyType::boolean: return v.is_boolean();
    case KeyType::text: return v.is_string();
    case KeyType::integer_list:
      if (!v.is_array()) return false;
      for (const auto& e : v) {
        if (!type_matches(KeyType::integer, e)) return false;
      }
      return true;
  }
  return false;
}

}  // namespace

json RunConfig::defaults() {
  json out = json::object();
  for (const auto& k : config_schema()) out[k.name] = k.default_value;
  return out;
}

void merge_config(json& base, const json& patch, std::string_view source) {
  if (!patch.is_object()) throw ConfigError(std::string(source) + ": configuration must be a JSON object");
  for (const auto& [key, value] : patch.items()) {
    const ConfigKey* k = find_key(key);
    if (k == nullptr) throw ConfigError(std::string(source) + ": unknown configuration key '" + key + "'");
    if (!type_matches(k->type, value)) {
      throw ConfigError(std::string(source) + ": key '" + key + "' has the wrong type");
    }
    base[key] = value;
  }
}

json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

RunConfig RunConfig::from_json(const json& object) {
  json full = defaults();
  merge_config(full, object, "config");
  RunConfig c;
  c.train = full["train"];
  c.dev = full["dev"];
  c.classes = full["classes"];
  c.num_classes = full["num_classes"];
  c.dev_per_class = full["dev_per_class"];
  c.external = full["external"];
  c.external_classes = full["external_classes"];
  c.external_num_classes = full["external_num_classes"];
  c.out_dir = full["out_dir"];
  c.setup = full["setup"];
  c.low_resource_fraction = full["low_resource_fraction"];
  c.unbalanced_counts = full["unbalanced_counts"].get<std::vector<std::size_t>>();
  TrainConfig& t = c.trainer;
  t.epochs = full["epochs"];
  t.lr = full["lr"];
  t.batch_size = full["batch_size"];
  t.k = full["k"];
  t.perspectives = full["perspectives"];
  t.seed = full["seed"];
  t.preset = full["preset"];
  t.self_exclude = full["self_exclude"];
  t.clip_norm = full["clip_norm"];
  t.encoder.word_dim = full["word_dim"];
  t.encoder.char_dim = full["char_dim"];
  t.encoder.char_lstm_dim = full["char_lstm_dim"];
  t.encoder.hidden = full["hidden"];
  t.encoder.max_tokens = full["max_tokens"];
  t.bm25.k1 = full["bm25_k1"];
  t.bm25.b = full["bm25_b"];
  t.min_count = full["min_count"];
  t.embeddings_path = full["embeddings"];
  t.train_oov_embeddings = full["train_oov_embeddings"];
  t.stop_neighbor_gradient = full["stop_neighbor_gradient"];
  t.threads = full["threads"];
  t.validate();
  if (!c.setup.empty()) parse_setup(c.setup);
  return c;
}

json RunConfig::to_json() const {
  const TrainConfig& t = trainer;
  return {{"train", train},
          {"dev", dev},
          {"classes", classes},
          {"num_classes", num_classes},
          {"dev_per_class", dev_per_class},
          {"external", external},
          {"external_classes", external_classes},
          {"external_num_classes", external_num_classes},
          {"out_dir", out_dir},
          {"setup", setup},
          {"low_resource_fraction", low_resource_fraction},
          {"unbalanced_counts", unbalanced_counts},
          {"epochs", t.epochs},
          {"lr", t.lr},
          {"batch_size", t.batch_size},
          {"k", t.k},
          {"perspectives", t.perspectives},
          {"seed", t.seed},
          {"preset", t.preset},
          {"self_exclude", t.self_exclude},
          {"clip_norm", t.clip_norm},
          {"word_dim", t.encoder.word_dim},
          {"char_dim", t.encoder.char_dim},
          {"char_lstm_dim", t.encoder.char_lstm_dim},
          {"hidden", t.encoder.hidden},
          {"max_tokens", t.encoder.max_tokens},
          {"bm25_k1", t.bm25.k1},
          {"bm25_b", t.bm25.b},
          {"min_count", t.min_count},
          {"embeddings", t.embeddings_path},
          {"train_oov_embeddings", t.train_oov_embeddings},
          {"stop_neighbor_gradient", t.stop_neighbor_gradient},
          {"threads", t.threads}};
}

}  // namespace knnmem::cli
