#include <benchmark/benchmark.h>

#include "knnmem/retrieval.hpp"
#include "knnmem/rng.hpp"

namespace {

using namespace knnmem;

/// Zipf-like documents: low word ids are much more frequent.
Corpus synthetic(std::size_t docs, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  Corpus out;
  for (std::size_t i = 0; i < docs; ++i) {
    Document d;
    d.id = static_cast<DocId>(i);
    const std::size_t len = 20 + rng.uniform_index(30);
    for (std::size_t j = 0; j < len; ++j) {
      const double u = rng.uniform(0.0, 1.0);
      d.tokens.push_back("w" + std::to_string(static_cast<std::size_t>(static_cast<double>(vocab) * u * u * u)));
    }
    out.push_back(std::move(d));
  }
  return out;
}

void BM_BuildIndex(benchmark::State& state) {
  const Corpus corpus = synthetic(static_cast<std::size_t>(state.range(0)), 20000, 1);
  for (auto _ : state) benchmark::DoNotOptimize(build_index(corpus));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_BuildIndex)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

void BM_SearchKnn(benchmark::State& state) {
  const Corpus corpus = synthetic(static_cast<std::size_t>(state.range(0)), 20000, 2);
  const InvertedIndex index = build_index(corpus);
  const Corpus queries = synthetic(64, 20000, 3);
  std::size_t q = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(search_knn(index, queries[q++ % queries.size()], 5));
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_SearchKnn)->Arg(1000)->Arg(10000)->Arg(50000)->Unit(benchmark::kMicrosecond);

void BM_PrecomputeNeighbors(benchmark::State& state) {
  const Corpus corpus = synthetic(5000, 20000, 4);
  const InvertedIndex index = build_index(corpus);
  for (auto _ : state) {
    benchmark::DoNotOptimize(precompute_neighbors(index, corpus, 5, true, {}, static_cast<std::size_t>(state.range(0))));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(corpus.size()));
}
BENCHMARK(BM_PrecomputeNeighbors)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();

}  // namespace
