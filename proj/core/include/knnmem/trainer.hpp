#pragma once

// Training loop, evaluation and the experiment setups (full, low-resource,
// unbalanced, semi-supervised, transfer).

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "knnmem/checkpoint.hpp"
#include "knnmem/corpus.hpp"
#include "knnmem/model.hpp"
#include "knnmem/retrieval.hpp"

namespace knnmem {

struct TrainConfig {
  std::size_t epochs = 15;
  Real lr = 1e-4;
  std::size_t batch_size = 32;
  /// Neighbors per input.
  std::size_t k = 5;
  /// Perspectives; 0 runs the vanilla cosine baseline.
  std::size_t perspectives = 5;
  std::uint64_t seed = 1;
  std::string preset = "M7";
  bool self_exclude = true;
  /// Global gradient-norm clip; <= 0 disables it.
  Real clip_norm = 5.0;
  EncoderConfig encoder;
  Bm25Params bm25;
  std::size_t min_count = 1;
  /// Pretrained vectors; empty uses random U(-0.05, 0.05) rows of encoder.word_dim.
  std::string embeddings_path;
  /// Let rows not found in the pretrained file train (pretrained rows stay frozen).
  bool train_oov_embeddings = false;
  bool stop_neighbor_gradient = false;
  /// Also measure training-set accuracy after every epoch.
  bool track_train_accuracy = false;
  std::size_t threads = 1;

  void validate() const;
};

/// A corpus paired with its precomputed neighbors.
struct SplitView {
  const Corpus* docs = nullptr;
  const NeighborCache* neighbors = nullptr;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
  /// Only when TrainConfig::track_train_accuracy is set.
  std::optional<double> train_accuracy;
  /// Mean loss of every minibatch, in order.
  std::vector<double> batch_losses;
};


struct TrainResult {
  Checkpoint best;
  std::vector<EpochMetrics> history;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// TrainConfig as a JSON object (echoed into checkpoints).
std::string train_config_json(const TrainConfig& config);

// Metrics file: one JSON object per line,
// {"epoch":1,"train_loss":..,"dev_accuracy":..[,"train_accuracy":..]}, then a
// final {"summary":true,"best_epoch":..,"best_dev_accuracy":..,"epochs":..}.
void write_epoch_metrics(const EpochMetrics& metrics, std::ostream& out);
void write_summary(const TrainResult& result, std::ostream& out);

/// Runs exactly config.epochs passes (seeded reshuffle each epoch, mean loss
/// per minibatch, clipped Adam steps) and returns the parameters of the epoch
/// with the best dev accuracy, earliest on ties.
TrainResult train(KnnModel model, const TrainConfig& config, SplitView train_split, SplitView dev_split,
                  const DocumentStore& neighbor_docs, const EpochCallback& on_epoch = {});

struct EvalReport {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  /// confusion[gold][predicted]
  std::vector<std::vector<std::size_t>> confusion;
  std::vector<Label> predictions;
  std::size_t total = 0;
};

/// One line of the prediction provenance dump.
struct ProvenanceRecord {
  DocId id = 0;
  std::optional<Label> gold;
  Label predicted = 0;
  std::vector<Real> probabilities;
  std::vector<Neighbor> neighbors;
  std::vector<Label> neighbor_labels;
  /// attention[k][i]
  std::vector<std::vector<Real>> attention;
};

/// JSON object per line: {"id","gold","pred","probs","neighbors":[{"id","label","bm25","attention":[..]}]}.
void write_provenance(const ProvenanceRecord& record, std::ostream& out);
ProvenanceRecord read_provenance_line(const std::string& line);

std::vector<const Document*> resolve_neighbors(const NeighborSet& set, const DocumentStore& docs);

/// Forward pass plus provenance for one document.
ProvenanceRecord explain(const KnnModel& model, const Document& doc, const NeighborSet& neighbors,
                         const DocumentStore& neighbor_docs);

EvalReport evaluate(const KnnModel& model, SplitView split, const DocumentStore& neighbor_docs,
                    std::size_t threads = 1, std::ostream* provenance = nullptr);

/// Datasets for one experiment. Neighbors come from `external` when set,
/// otherwise from `train`; dev neighbors always come from the same index.
struct ExperimentData {
  const Corpus* train = nullptr;
  const Corpus* dev = nullptr;
  std::size_t num_classes = 0;
  const Corpus* external = nullptr;
  std::size_t external_classes = 0;
};

struct ExperimentResult {
  TrainResult training;
  std::size_t index_docs = 0;
  std::size_t index_terms = 0;
  double index_avg_doc_len = 0.0;
};

/// Vocabulary of an experiment: training words plus the external corpus,
/// whose texts pass through the same encoder.
Vocabulary experiment_vocabulary(const ExperimentData& data, std::size_t min_count);

/// Vocabulary, embeddings, index, neighbor caches, model and training.
ExperimentResult run_experiment(const ExperimentData& data, const TrainConfig& config,
                                const EpochCallback& on_epoch = {});

enum class Setup { full, low_resource, unbalanced, semi_supervised, transfer };
Setup parse_setup(std::string_view name);
std::string_view to_string(Setup setup);

struct SetupOptions {
  double low_resource_fraction = 0.1;
  std::vector<std::size_t> unbalanced_counts = {2000, 4000, 8000, 16000};
};

struct SetupRow {
  std::string model;
  std::string preset;
  std::vector<std::size_t> class_sizes;
  double dev_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::size_t label_block_width = 0;
};

struct SetupReport {
  Setup setup = Setup::full;
  std::vector<SetupRow> rows;
  std::vector<Checkpoint> checkpoints;
};

/// Trains the BiLSTM baseline (M1) next to the kNN variants of a setup:
/// full/low_resource/unbalanced use config.preset after subsampling the
/// training set; semi_supervised uses M6 and transfer uses M5 and M7 with
/// neighbors drawn from the external corpus.
SetupReport run_setup(Setup setup, const ExperimentData& data, const TrainConfig& config,
                      const SetupOptions& options = {}, const EpochCallback& on_epoch = {});

}  // namespace knnmem
