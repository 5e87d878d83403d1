#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "knnmem/error.hpp"
#include "knnmem/trainer.hpp"
#include "synthetic.hpp"

namespace knnmem {
namespace {

TrainConfig small_config(const std::string& preset = "M7") {
  TrainConfig c;
  c.encoder = testing::tiny_encoder();
  c.preset = preset;
  c.perspectives = 2;
  c.k = 3;
  c.epochs = 3;
  c.batch_size = 8;
  c.lr = 1e-2;
  c.seed = 4;
  return c;
}

struct Data {
  Corpus train = testing::topic_corpus(6, 4, 31);
  Corpus dev = testing::topic_corpus(3, 4, 32, 1000);

  ExperimentData view() const { return ExperimentData{&train, &dev, 4}; }
};

/// Model, store and neighbor caches for calling train() directly.
struct Direct {
  const Data& data;
  TrainConfig config;
  Vocabulary vocab = experiment_vocabulary(data.view(), 1);
  InvertedIndex index = build_index(data.train);
  NeighborCache train_nb = precompute_neighbors(index, data.train, config.k, true);
  NeighborCache dev_nb = precompute_neighbors(index, data.dev, config.k, false);
  DocumentStore store{&data.train, 4};

  KnnModel model() const {
    ModelConfig mc;
    mc.encoder = config.encoder;
    mc.perspectives = config.perspectives;
    mc.features = FeatureConfig::parse(config.preset);
    mc.num_classes = 4;
    Rng rng = Rng::derive(config.seed, "word_embedding");
    return KnnModel(mc, vocab, random_embeddings(vocab, mc.encoder.word_dim, rng), config.seed);
  }
  SplitView train_view() const { return {&data.train, &train_nb}; }
  SplitView dev_view() const { return {&data.dev, &dev_nb}; }
};

std::vector<double> dev_curve(const TrainResult& r) {
  std::vector<double> out;
  for (const auto& m : r.history) out.push_back(m.dev_accuracy);
  return out;
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.preset = "M9";
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainConfig, DefaultsFollowTheExperimentSettings) {
  const TrainConfig c;
  EXPECT_EQ(c.epochs, 15u);
  EXPECT_EQ(c.lr, 1e-4);
  EXPECT_EQ(c.k, 5u);
  EXPECT_EQ(c.perspectives, 5u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.clip_norm, 5.0);
  EXPECT_EQ(c.encoder.max_tokens, 256u);
}

TEST(Train, SingleEpochReturnsEpochOne) {
  Data d;
  TrainConfig c = small_config();
  c.epochs = 1;
  const ExperimentResult r = run_experiment(d.view(), c);
  EXPECT_EQ(r.training.best.epoch, 1u);
  ASSERT_EQ(r.training.history.size(), 1u);
  EXPECT_EQ(r.training.history[0].batch_losses.size(), 3u);
}

TEST(Train, RunsExactlyTheConfiguredEpochs) {
  Data d;
  std::vector<std::size_t> seen;
  const ExperimentResult r = run_experiment(d.view(), small_config(), [&](const EpochMetrics& m) {
    seen.push_back(m.epoch);
  });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(r.index_docs, d.train.size());
}

TEST(Train, SameSeedGivesIdenticalTrajectories) {
  Data d;
  const ExperimentResult a = run_experiment(d.view(), small_config());
  const ExperimentResult b = run_experiment(d.view(), small_config());
  ASSERT_EQ(a.training.history.size(), b.training.history.size());
  for (std::size_t e = 0; e < a.training.history.size(); ++e) {
    EXPECT_EQ(a.training.history[e].batch_losses, b.training.history[e].batch_losses);
    EXPECT_EQ(a.training.history[e].dev_accuracy, b.training.history[e].dev_accuracy);
  }
}

TEST(Train, ThreadCountDoesNotChangeResults) {
  Data d;
  TrainConfig one = small_config();
  TrainConfig many = small_config();
  many.threads = 3;
  const ExperimentResult a = run_experiment(d.view(), one);
  const ExperimentResult b = run_experiment(d.view(), many);
  for (std::size_t e = 0; e < a.training.history.size(); ++e) {
    EXPECT_EQ(a.training.history[e].batch_losses, b.training.history[e].batch_losses);
  }
  for (const auto& p : a.training.best.model.params()) {
    const auto& q = b.training.best.model.params();
    EXPECT_EQ(p.value, q[q.require(p.name)].value) << p.name;
  }
}

TEST(Train, BestCheckpointIsTheEarliestMaximum) {
  Data d;
  TrainConfig c = small_config();
  c.epochs = 6;
  const ExperimentResult r = run_experiment(d.view(), c);
  const auto curve = dev_curve(r.training);
  const auto best = std::max_element(curve.begin(), curve.end());
  EXPECT_EQ(r.training.best.dev_accuracy, *best);
  EXPECT_EQ(r.training.best.epoch, static_cast<std::size_t>(best - curve.begin()) + 1);
}

TEST(Train, BestCheckpointReproducesItsDevAccuracy) {
  Data d;
  Direct direct{d, small_config()};
  const TrainResult r = train(direct.model(), direct.config, direct.train_view(), direct.dev_view(), direct.store);
  EXPECT_EQ(evaluate(r.best.model, direct.dev_view(), direct.store).accuracy, r.best.dev_accuracy);
  const auto parsed = nlohmann::json::parse(r.best.run_config);
  EXPECT_EQ(parsed.at("preset"), "M7");
}

TEST(Train, FrozenTensorsAreUnchanged) {
  Data d;
  Direct direct{d, small_config()};
  const KnnModel before = direct.model();
  const TrainResult r = train(before, direct.config, direct.train_view(), direct.dev_view(), direct.store);
  const auto& p = r.best.model.params();
  const auto& q = before.params();
  EXPECT_EQ(p[p.require("word_embedding")].value, q[q.require("word_embedding")].value);
  EXPECT_NE(p[p.require("classifier.weight")].value, q[q.require("classifier.weight")].value);
  EXPECT_NE(p[p.require("memory.W")].value, q[q.require("memory.W")].value);
}

TEST(Train, LossFallsOnAnEasyTask) {
  Data d;
  TrainConfig c = small_config();
  c.epochs = 12;
  c.track_train_accuracy = true;
  const ExperimentResult r = run_experiment(d.view(), c);
  EXPECT_LT(r.training.history.back().train_loss, r.training.history.front().train_loss);
  EXPECT_GT(*r.training.history.back().train_accuracy, 0.9);
}

TEST(Train, NoNeighborsStillTrains) {
  Data d;
  TrainConfig c = small_config();
  c.k = 0;
  c.epochs = 1;
  EXPECT_NO_THROW(run_experiment(d.view(), c));
}

TEST(Train, NonFiniteValuesReportTheirLocation) {
  Data d;
  Direct direct{d, small_config()};
  KnnModel m = direct.model();
  auto& chars = m.params()[m.params().require("char_embedding")].value;
  for (Real& v : chars.data()) v = std::numeric_limits<Real>::quiet_NaN();
  try {
    train(m, direct.config, direct.train_view(), direct.dev_view(), direct.store);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1 batch 1"), std::string::npos) << e.what();
  }
}

TEST(Train, MissingNeighborEntryIsAnError) {
  Data d;
  Direct direct{d, small_config()};
  direct.train_nb.erase(d.train[3].id);
  EXPECT_THROW(train(direct.model(), direct.config, direct.train_view(), direct.dev_view(), direct.store), DataError);
}

TEST(Evaluate, ConfusionMatrixInvariants) {
  Data d;
  Direct direct{d, small_config()};
  const EvalReport r = evaluate(direct.model(), direct.dev_view(), direct.store);
  ASSERT_EQ(r.confusion.size(), 4u);
  std::size_t trace = 0;
  const auto support = class_counts(d.dev, 4);
  for (std::size_t y = 0; y < 4; ++y) {
    std::size_t row = 0;
    for (std::size_t v : r.confusion[y]) row += v;
    EXPECT_EQ(row, support[y]);
    trace += r.confusion[y][y];
    EXPECT_DOUBLE_EQ(r.per_class_accuracy[y], static_cast<double>(r.confusion[y][y]) / support[y]);
  }
  EXPECT_EQ(r.total, d.dev.size());
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(trace) / r.total);
}

TEST(Evaluate, MajorityClassifierScoresOneQuarter) {
  Data d;
  TrainConfig c = small_config("M1");
  Direct direct{d, c};
  KnnModel m = direct.model();
  auto& p = m.params();
  for (Real& v : p[p.require("classifier.weight")].value.data()) v = 0.0;
  p[p.require("classifier.bias")].value[2] = 1.0;
  const EvalReport r = evaluate(m, SplitView{&d.dev, nullptr}, direct.store);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.25);
  for (std::size_t y = 0; y < 4; ++y) EXPECT_EQ(r.confusion[y][2], 3u);
}

TEST(Evaluate, PerfectPredictorGivesDiagonalConfusion) {
  Data d;
  TrainConfig c = small_config("M1");
  c.epochs = 80;
  const ExperimentData same{&d.train, &d.train, 4};
  const ExperimentResult r = run_experiment(same, c);
  ASSERT_EQ(r.training.best.dev_accuracy, 1.0);
  const EvalReport e = evaluate(r.training.best.model, SplitView{&d.train, nullptr}, DocumentStore(&d.train, 4));
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t p = 0; p < 4; ++p) EXPECT_EQ(e.confusion[y][p], y == p ? 6u : 0u);
  }
}

TEST(Evaluate, ThreadCountDoesNotChangePredictions) {
  Data d;
  Direct direct{d, small_config()};
  const KnnModel m = direct.model();
  EXPECT_EQ(evaluate(m, direct.dev_view(), direct.store, 1).predictions,
            evaluate(m, direct.dev_view(), direct.store, 4).predictions);
}

TEST(Evaluate, AccuracyMatchesProvenanceRecount) {
  Data d;
  Direct direct{d, small_config()};
  const TrainResult t = train(direct.model(), direct.config, direct.train_view(), direct.dev_view(), direct.store);
  std::ostringstream dump;
  const EvalReport r = evaluate(t.best.model, direct.dev_view(), direct.store, 2, &dump);
  std::istringstream lines(dump.str());
  std::string line;
  std::size_t count = 0, correct = 0;
  while (std::getline(lines, line)) {
    const ProvenanceRecord rec = read_provenance_line(line);
    const Document& doc = d.dev[count];
    EXPECT_EQ(rec.id, doc.id);
    EXPECT_EQ(rec.neighbors, direct.dev_nb.at(doc.id).neighbors);
    ASSERT_EQ(rec.attention.size(), rec.neighbors.size());
    for (std::size_t k = 0; k < rec.neighbors.size(); ++k) {
      EXPECT_EQ(rec.attention[k].size(), 2u);
      EXPECT_EQ(rec.neighbor_labels[k], d.train[rec.neighbors[k].doc].label);
    }
    correct += rec.gold == rec.predicted;
    ++count;
  }
  EXPECT_EQ(count, d.dev.size());
  EXPECT_DOUBLE_EQ(static_cast<double>(correct) / count, r.accuracy);
}

TEST(Provenance, RoundTrip) {
  ProvenanceRecord r;
  r.id = 17;
  r.gold = 2;
  r.predicted = 1;
  r.probabilities = {0.25, 0.5, 0.25};
  r.neighbors = {{4, 3.5}, {9, 1.25}};
  r.neighbor_labels = {1, 2};
  r.attention = {{0.5, -0.25}, {0.125, 1.0}};
  std::ostringstream out;
  write_provenance(r, out);
  const ProvenanceRecord back = read_provenance_line(out.str());
  EXPECT_EQ(back.id, r.id);
  EXPECT_EQ(back.gold, r.gold);
  EXPECT_EQ(back.predicted, r.predicted);
  EXPECT_EQ(back.probabilities, r.probabilities);
  EXPECT_EQ(back.neighbors, r.neighbors);
  EXPECT_EQ(back.neighbor_labels, r.neighbor_labels);
  EXPECT_EQ(back.attention, r.attention);
  EXPECT_THROW(read_provenance_line("{\"id\":1}"), DataError);
}

TEST(Metrics, JsonLines) {
  Data d;
  TrainConfig c = small_config();
  c.epochs = 2;
  std::ostringstream out;
  const ExperimentResult r = run_experiment(d.view(), c, [&](const EpochMetrics& m) { write_epoch_metrics(m, out); });
  write_summary(r.training, out);
  std::istringstream in(out.str());
  std::vector<nlohmann::json> rows;
  for (std::string line; std::getline(in, line);) rows.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].at("epoch"), 1);
  EXPECT_EQ(rows[1].at("dev_accuracy").get<double>(), r.training.history[1].dev_accuracy);
  EXPECT_EQ(rows[2].at("summary"), true);
  EXPECT_EQ(rows[2].at("best_epoch"), r.training.best.epoch);
  EXPECT_EQ(rows[2].at("epochs"), 2);
}

TEST(Setup, Parse) {
  for (const char* name : {"full", "low_resource", "unbalanced", "semi_supervised", "transfer"}) {
    EXPECT_EQ(to_string(parse_setup(name)), name);
  }
  EXPECT_THROW(parse_setup("rare"), ConfigError);
}

TEST(Setup, UnbalancedSubsamplesPerClass) {
  Data d;
  TrainConfig c = small_config();
  c.epochs = 1;
  const SetupReport r = run_setup(Setup::unbalanced, d.view(), c, SetupOptions{0.1, {2, 3, 4, 5}});
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].preset, "M1");
  EXPECT_EQ(r.rows[1].preset, "M7");
  for (const auto& row : r.rows) EXPECT_EQ(row.class_sizes, (std::vector<std::size_t>{2, 3, 4, 5}));
  EXPECT_EQ(r.checkpoints.size(), 2u);
}

TEST(Setup, LowResourceKeepsAFraction) {
  Data d;
  TrainConfig c = small_config();
  c.epochs = 1;
  const SetupReport r = run_setup(Setup::low_resource, d.view(), c, SetupOptions{0.5, {}});
  EXPECT_EQ(r.rows[0].class_sizes, (std::vector<std::size_t>{3, 3, 3, 3}));
}

TEST(Setup, SemiSupervisedUsesTextOnlyNeighborFeatures) {
  Data d;
  const Corpus external = testing::topic_corpus(3, 6, 33, 5000);
  ExperimentData view = d.view();
  view.external = &external;
  view.external_classes = 6;
  TrainConfig c = small_config();
  c.epochs = 1;
  const SetupReport r = run_setup(Setup::semi_supervised, view, c);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[1].preset, "M6");
  EXPECT_EQ(r.rows[1].label_block_width, 0u);
  EXPECT_FALSE(r.checkpoints[1].model.config().features.use_attn_label);
}

TEST(Setup, TransferUsesTheExternalLabelSpace) {
  Data d;
  Corpus external;
  for (std::size_t c = 0; c < 14; ++c) {
    Corpus part = testing::topic_corpus(1, 6, 40 + c, static_cast<DocId>(9000 + 10 * c));
    for (Document& doc : part) doc.label = static_cast<Label>(c);
    external.insert(external.end(), part.begin(), part.end());
  }
  ExperimentData view = d.view();
  view.external = &external;
  view.external_classes = 14;
  TrainConfig c = small_config();
  c.epochs = 1;
  const SetupReport r = run_setup(Setup::transfer, view, c);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[1].preset, "M5");
  EXPECT_EQ(r.rows[2].preset, "M7");
  EXPECT_EQ(r.rows[1].label_block_width, 2u * 14);
  EXPECT_EQ(r.rows[2].label_block_width, 2u * 14);
  const ModelConfig& mc = r.checkpoints[2].model.config();
  EXPECT_EQ(mc.num_classes, 4u);
  EXPECT_EQ(mc.feature_width(), 16u + 2 * 14 + 2 * 16);
}

TEST(Setup, ExternalCorpusIsRequired) {
  Data d;
  EXPECT_THROW(run_setup(Setup::semi_supervised, d.view(), small_config()), ConfigError);
  EXPECT_THROW(run_setup(Setup::transfer, d.view(), small_config()), ConfigError);
}

}  // namespace
}  // namespace knnmem
