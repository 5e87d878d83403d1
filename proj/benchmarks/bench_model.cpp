#include <benchmark/benchmark.h>

#include "knnmem/model.hpp"
#include "knnmem/rng.hpp"

namespace {

using namespace knnmem;

struct Setup {
  Corpus docs;
  Vocabulary vocab;
  KnnModel model;

  static Setup make(const std::string& preset, std::size_t hidden, std::size_t tokens) {
    Rng rng(7);
    Corpus docs;
    for (std::size_t i = 0; i < 6; ++i) {
      Document d;
      d.id = static_cast<DocId>(i);
      d.label = static_cast<Label>(i % 4);
      for (std::size_t j = 0; j < tokens; ++j) d.tokens.push_back("word" + std::to_string(rng.uniform_index(500)));
      docs.push_back(std::move(d));
    }
    Vocabulary vocab = build_vocab(docs, 1);
    ModelConfig config;
    config.encoder.hidden = hidden;
    config.features = FeatureConfig::parse(preset);
    config.num_classes = 4;
    Rng words(8);
    KnnModel model(config, vocab, random_embeddings(vocab, config.encoder.word_dim, words), 9);
    return Setup{std::move(docs), std::move(vocab), std::move(model)};
  }

  std::vector<const Document*> neighbors() const {
    std::vector<const Document*> out;
    for (std::size_t i = 1; i < docs.size(); ++i) out.push_back(&docs[i]);
    return out;
  }
};

void BM_EncodeText(benchmark::State& state) {
  const Setup s = Setup::make("M1", 100, static_cast<std::size_t>(state.range(0)));
  const TextEncoder encoder = s.model.encoder();
  for (auto _ : state) {
    Tape tape(&s.model.params());
    benchmark::DoNotOptimize(encoder.encode(tape, s.docs[0].tokens).value());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EncodeText)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void model_step(benchmark::State& state, const char* preset, bool backward) {
  const Setup s = Setup::make(preset, 100, 32);
  const auto neighbors = s.neighbors();
  for (auto _ : state) {
    Tape tape(&s.model.params());
    const ModelOutput out = s.model.forward(tape, s.docs[0], neighbors, s.docs[0].label);
    if (backward) {
      Gradients grads(s.model.params());
      tape.backward(out.loss, grads);
      benchmark::DoNotOptimize(grads.global_norm());
    } else {
      benchmark::DoNotOptimize(out.loss.value());
    }
  }
}
BENCHMARK_CAPTURE(model_step, forward_M1, "M1", false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(model_step, forward_M7, "M7", false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(model_step, forward_backward_M1, "M1", true)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(model_step, forward_backward_M7, "M7", true)->Unit(benchmark::kMillisecond);

}  // namespace
