#include "knnmem/trainer.hpp"

#include <cmath>
#include <json.hpp>
#include <numeric>
#include <ostream>

#include "knnmem/adam.hpp"
#include "knnmem/error.hpp"
#include "knnmem/rng.hpp"
#include "parallel.hpp"

namespace knnmem {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a positive number");
  if (threads == 0) throw ConfigError("threads must be >= 1");
  if (min_count == 0) throw ConfigError("min_count must be >= 1");
  FeatureConfig::parse(preset);
  encoder.validate();
  bm25.validate();
}

std::string train_config_json(const TrainConfig& c) {
  const json j = {{"epochs", c.epochs},
                  {"lr", c.lr},
                  {"batch_size", c.batch_size},
                  {"k", c.k},
                  {"perspectives", c.perspectives},
                  {"seed", c.seed},
                  {"preset", c.preset},
                  {"self_exclude", c.self_exclude},
                  {"clip_norm", c.clip_norm},
                  {"word_dim", c.encoder.word_dim},
                  {"char_dim", c.encoder.char_dim},
                  {"char_lstm_dim", c.encoder.char_lstm_dim},
                  {"hidden", c.encoder.hidden},
                  {"max_tokens", c.encoder.max_tokens},
                  {"bm25_k1", c.bm25.k1},
                  {"bm25_b", c.bm25.b},
                  {"min_count", c.min_count},
                  {"embeddings", c.embeddings_path},
                  {"train_oov_embeddings", c.train_oov_embeddings},
                  {"stop_neighbor_gradient", c.stop_neighbor_gradient}};
  return j.dump();
}

void write_epoch_metrics(const EpochMetrics& m, std::ostream& out) {
  json j = {{"epoch", m.epoch}, {"train_loss", m.train_loss}, {"dev_accuracy", m.dev_accuracy}};
  if (m.train_accuracy) j["train_accuracy"] = *m.train_accuracy;
  out << j.dump() << '\n';
}

void write_summary(const TrainResult& r, std::ostream& out) {
  const json j = {{"summary", true},
                  {"best_epoch", r.best.epoch},
                  {"best_dev_accuracy", r.best.dev_accuracy},
                  {"epochs", r.history.size()}};
  out << j.dump() << '\n';
}

// ------------------------------------------------------------- neighbors

std::vector<const Document*> resolve_neighbors(const NeighborSet& set, const DocumentStore& docs) {
  std::vector<const Document*> out;
  out.reserve(set.neighbors.size());
  for (const Neighbor& n : set.neighbors) out.push_back(&docs.at(n.doc));
  return out;
}

namespace {

const NeighborSet& neighbors_of(const SplitView& split, const Document& doc) {
  static const NeighborSet kNone;
  if (split.neighbors == nullptr) return kNone;
  auto it = split.neighbors->find(doc.id);
  if (it == split.neighbors->end()) {
    throw DataError("neighbor cache has no entry for document " + std::to_string(doc.id));
  }
  return it->second;
}

void check_split(const SplitView& split, const char* what) {
  if (split.docs == nullptr) throw ConfigError(std::string(what) + " split has no documents");
}

/// Gradient of one training example, computed on its own tape.
struct ExampleResult {
  Gradients grads;
  Real loss = 0.0;
};

ExampleResult example_gradient(const KnnModel& model, const Document& doc, const NeighborSet& set,
                               const DocumentStore& store) {
  const auto neighbors = resolve_neighbors(set, store);
  Tape tape(&model.params());
  const ModelOutput out = model.forward(tape, doc, neighbors, doc.label);
  ExampleResult r{Gradients(model.params()), out.loss.value()[0]};
  tape.backward(out.loss, r.grads);
  return r;
}

}  // namespace

// -------------------------------------------------------------- training

TrainResult train(KnnModel model, const TrainConfig& config, SplitView train_split, SplitView dev_split,
                  const DocumentStore& neighbor_docs, const EpochCallback& on_epoch) {
  config.validate();
  check_split(train_split, "training");
  check_split(dev_split, "dev");
  const Corpus& docs = *train_split.docs;
  if (docs.empty()) throw DataError("training split is empty");

  AdamState adam(model.params(), AdamConfig{config.lr});
  Rng shuffle_rng = Rng::derive(config.seed, "trainer.shuffle");
  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::optional<Checkpoint> best;
  std::vector<EpochMetrics> history;
  std::vector<ExampleResult> results;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    EpochMetrics metrics;
    metrics.epoch = epoch;
    Real epoch_loss = 0.0;

    for (std::size_t start = 0, batch = 1; start < order.size(); start += config.batch_size, ++batch) {
      const std::size_t size = std::min(config.batch_size, order.size() - start);
      const auto where = [&] { return "epoch " + std::to_string(epoch) + " batch " + std::to_string(batch); };
      results.assign(size, ExampleResult{});
      try {
        detail::parallel_for(size, config.threads, [&](std::size_t i) {
          const Document& doc = docs[order[start + i]];
          results[i] = example_gradient(model, doc, neighbors_of(train_split, doc), neighbor_docs);
        });
      } catch (const NumericError& e) {
        throw NumericError(where() + ": " + e.what());
      }

      Gradients total(model.params());
      Real batch_loss = 0.0;
      for (const ExampleResult& r : results) {
        total.add(r.grads);
        batch_loss += r.loss;
      }
      epoch_loss += batch_loss;
      batch_loss /= static_cast<Real>(size);
      if (!std::isfinite(batch_loss)) throw NumericError(where() + ": non-finite loss");
      total.scale(1.0 / static_cast<Real>(size));
      const Real norm = total.clip_global_norm(config.clip_norm);
      if (!std::isfinite(norm)) throw NumericError(where() + ": non-finite gradient norm");
      adam_step(model.params(), total, adam);
      metrics.batch_losses.push_back(batch_loss);
    }

    metrics.train_loss = epoch_loss / static_cast<Real>(docs.size());
    metrics.dev_accuracy = evaluate(model, dev_split, neighbor_docs, config.threads).accuracy;
    if (config.track_train_accuracy) {
      metrics.train_accuracy = evaluate(model, train_split, neighbor_docs, config.threads).accuracy;
    }
    if (!best || metrics.dev_accuracy > best->dev_accuracy) {
      best.emplace(Checkpoint{model, epoch, metrics.dev_accuracy, train_config_json(config)});
    }
    if (on_epoch) on_epoch(metrics);
    history.push_back(std::move(metrics));
  }
  return TrainResult{std::move(*best), std::move(history)};
}

// ------------------------------------------------------------ evaluation

ProvenanceRecord explain(const KnnModel& model, const Document& doc, const NeighborSet& set,
                         const DocumentStore& neighbor_docs) {
  const auto neighbors = resolve_neighbors(set, neighbor_docs);
  Tape tape(&model.params());
  const ModelOutput out = model.forward(tape, doc, neighbors);
  const Prediction p = predict_from_logits(out.logits.value().data());

  ProvenanceRecord r;
  r.id = doc.id;
  r.gold = doc.label;
  r.predicted = p.label;
  r.probabilities = p.probabilities;
  r.neighbors = set.neighbors;
  for (const Document* n : neighbors) r.neighbor_labels.push_back(n->label);
  if (out.attention.valid()) {
    const Tensor& a = out.attention.value();
    for (std::size_t k = 0; k < a.rows(); ++k) {
      const auto row = a.row(k);
      r.attention.emplace_back(row.begin(), row.end());
    }
  }
  return r;
}

void write_provenance(const ProvenanceRecord& r, std::ostream& out) {
  json neighbors = json::array();
  for (std::size_t k = 0; k < r.neighbors.size(); ++k) {
    json n = {{"id", r.neighbors[k].doc}, {"bm25", r.neighbors[k].score}};
    if (k < r.neighbor_labels.size()) n["label"] = r.neighbor_labels[k];
    n["attention"] = k < r.attention.size() ? json(r.attention[k]) : json::array();
    neighbors.push_back(std::move(n));
  }
  json j = {{"id", r.id},
            {"gold", r.gold ? json(*r.gold) : json(nullptr)},
            {"pred", r.predicted},
            {"probs", r.probabilities},
            {"neighbors", std::move(neighbors)}};
  out << j.dump() << '\n';
}

ProvenanceRecord read_provenance_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    ProvenanceRecord r;
    r.id = j.at("id").get<DocId>();
    if (!j.at("gold").is_null()) r.gold = j.at("gold").get<Label>();
    r.predicted = j.at("pred").get<Label>();
    r.probabilities = j.at("probs").get<std::vector<Real>>();
    for (const json& n : j.at("neighbors")) {
      r.neighbors.push_back(Neighbor{n.at("id").get<DocId>(), n.at("bm25").get<double>()});
      if (n.contains("label")) r.neighbor_labels.push_back(n.at("label").get<Label>());
      r.attention.push_back(n.at("attention").get<std::vector<Real>>());
    }
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("bad provenance record: ") + e.what());
  }
}

EvalReport evaluate(const KnnModel& model, SplitView split, const DocumentStore& neighbor_docs, std::size_t threads,
                    std::ostream* provenance) {
  check_split(split, "evaluation");
  const Corpus& docs = *split.docs;
  const std::size_t c = model.config().num_classes;
  std::vector<ProvenanceRecord> records(docs.size());
  detail::parallel_for(docs.size(), threads, [&](std::size_t i) {
    records[i] = explain(model, docs[i], neighbors_of(split, docs[i]), neighbor_docs);
  });

  EvalReport report;
  report.total = docs.size();
  report.confusion.assign(c, std::vector<std::size_t>(c, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const Label gold = docs[i].label;
    if (gold >= c) throw DataError("document " + std::to_string(docs[i].id) + " has label outside the model's classes");
    ++report.confusion[gold][records[i].predicted];
    correct += gold == records[i].predicted;
    report.predictions.push_back(records[i].predicted);
    if (provenance) write_provenance(records[i], *provenance);
  }
  report.accuracy = docs.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(docs.size());
  for (std::size_t y = 0; y < c; ++y) {
    const auto support = std::accumulate(report.confusion[y].begin(), report.confusion[y].end(), std::size_t{0});
    report.per_class_accuracy.push_back(support == 0 ? 0.0 : static_cast<double>(report.confusion[y][y]) /
                                                                 static_cast<double>(support));
  }
  return report;
}

// ----------------------------------------------------------- experiments

Vocabulary experiment_vocabulary(const ExperimentData& data, std::size_t min_count) {
  if (data.train == nullptr) throw ConfigError("experiment needs a training corpus");
  if (data.external == nullptr) return build_vocab(*data.train, min_count);
  Corpus all = *data.train;
  all.insert(all.end(), data.external->begin(), data.external->end());
  return build_vocab(all, min_count);
}

ExperimentResult run_experiment(const ExperimentData& data, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (data.train == nullptr || data.dev == nullptr) throw ConfigError("experiment needs train and dev corpora");
  if (data.external && data.external_classes < 2) throw ConfigError("external corpus needs its class count");

  ModelConfig mc;
  mc.encoder = config.encoder;
  mc.perspectives = config.perspectives;
  mc.features = FeatureConfig::parse(config.preset);
  mc.num_classes = data.num_classes;
  mc.neighbor_classes = data.external ? data.external_classes : 0;
  mc.stop_neighbor_gradient = config.stop_neighbor_gradient;

  Vocabulary vocab = experiment_vocabulary(data, config.min_count);
  Rng embed_rng = Rng::derive(config.seed, "word_embedding");
  EmbeddingTable table = config.embeddings_path.empty()
                             ? random_embeddings(vocab, config.encoder.word_dim, embed_rng)
                             : load_pretrained_embeddings(config.embeddings_path, vocab, config.encoder.word_dim,
                                                          embed_rng);
  table.frozen = !config.train_oov_embeddings;

  const Corpus& source = data.external ? *data.external : *data.train;
  const std::size_t source_classes = data.external ? data.external_classes : data.num_classes;
  DocumentStore store(&source, source_classes);

  KnnModel model(mc, vocab, std::move(table), config.seed);
  ExperimentResult stats{TrainResult{Checkpoint{model, 0, 0.0, {}}, {}}};
  NeighborCache train_neighbors;
  NeighborCache dev_neighbors;
  const bool with_neighbors = mc.features.uses_memory();
  if (with_neighbors && config.k > 0) {
    const InvertedIndex index = build_index(source);
    stats.index_docs = index.doc_count();
    stats.index_terms = index.term_count();
    stats.index_avg_doc_len = index.avg_doc_len();
    // Ids of an external corpus are unrelated to training ids, so only a
    // training-set index excludes the query itself.
    const bool self_exclude = config.self_exclude && data.external == nullptr;
    train_neighbors = precompute_neighbors(index, *data.train, config.k, self_exclude, config.bm25, config.threads);
    dev_neighbors = precompute_neighbors(index, *data.dev, config.k, false, config.bm25, config.threads);
  } else if (with_neighbors) {
    for (const Document& d : *data.train) train_neighbors[d.id] = NeighborSet{d.id, {}};
    for (const Document& d : *data.dev) dev_neighbors[d.id] = NeighborSet{d.id, {}};
  }
  stats.training = train(std::move(model), config, SplitView{data.train, with_neighbors ? &train_neighbors : nullptr},
                         SplitView{data.dev, with_neighbors ? &dev_neighbors : nullptr}, store, on_epoch);
  return stats;
}

Setup parse_setup(std::string_view name) {
  if (name == "full") return Setup::full;
  if (name == "low_resource") return Setup::low_resource;
  if (name == "unbalanced") return Setup::unbalanced;
  if (name == "semi_supervised") return Setup::semi_supervised;
  if (name == "transfer") return Setup::transfer;
  throw ConfigError("unknown setup '" + std::string(name) +
                    "' (expected full, low_resource, unbalanced, semi_supervised or transfer)");
}

std::string_view to_string(Setup setup) {
  switch (setup) {
    case Setup::full: return "full";
    case Setup::low_resource: return "low_resource";
    case Setup::unbalanced: return "unbalanced";
    case Setup::semi_supervised: return "semi_supervised";
    case Setup::transfer: return "transfer";
  }
  return "?";
}

SetupReport run_setup(Setup setup, const ExperimentData& data, const TrainConfig& config, const SetupOptions& options,
                      const EpochCallback& on_epoch) {
  if (data.train == nullptr || data.dev == nullptr) throw ConfigError("setup needs train and dev corpora");
  const bool external = setup == Setup::semi_supervised || setup == Setup::transfer;
  if (external && data.external == nullptr) {
    throw ConfigError(std::string(to_string(setup)) + " setup requires an external neighbor corpus");
  }

  Corpus train_docs;
  if (setup == Setup::low_resource) {
    train_docs = subsample(*data.train, data.num_classes, LowResource{options.low_resource_fraction}, config.seed);
  } else if (setup == Setup::unbalanced) {
    train_docs = subsample(*data.train, data.num_classes, Unbalanced{options.unbalanced_counts}, config.seed);
  } else {
    train_docs = *data.train;
  }

  struct Variant {
    std::string model;
    std::string preset;
    bool external;
  };
  std::vector<Variant> variants = {{"BiLSTM", "M1", false}};
  switch (setup) {
    case Setup::full:
    case Setup::low_resource:
    case Setup::unbalanced: variants.push_back({"BiLSTM with kNN", config.preset, false}); break;
    case Setup::semi_supervised: variants.push_back({"BiLSTM with kNN (semi-supervised)", "M6", true}); break;
    case Setup::transfer:
      variants.push_back({"BiLSTM with kNN (transfer)", "M5", true});
      variants.push_back({"BiLSTM with kNN (transfer)", "M7", true});
      break;
  }

  SetupReport report;
  report.setup = setup;
  for (const Variant& v : variants) {
    TrainConfig vc = config;
    vc.preset = v.preset;
    ExperimentData vd{&train_docs, data.dev, data.num_classes, v.external ? data.external : nullptr,
                      v.external ? data.external_classes : 0};
    ExperimentResult r = run_experiment(vd, vc, on_epoch);
    const ModelConfig& mc = r.training.best.model.config();
    SetupRow row;
    row.model = v.model;
    row.preset = v.preset;
    row.class_sizes = class_counts(train_docs, data.num_classes);
    row.dev_accuracy = r.training.best.dev_accuracy;
    row.best_epoch = r.training.best.epoch;
    row.label_block_width = mc.features.use_attn_label ? mc.effective_perspectives() * mc.label_width() : 0;
    report.rows.push_back(std::move(row));
    report.checkpoints.push_back(std::move(r.training.best));
  }
  return report;
}

}  // namespace knnmem
