#include <benchmark/benchmark.h>

#include <random>
#include <string>
#include <vector>

#include "grouprag/evaluation.hpp"
#include "grouprag/retrieval.hpp"
#include "grouprag/wif_policy.hpp"

using namespace grouprag;

namespace {

const std::vector<std::string> kWords = {"heart", "lung", "fever", "rash", "pain", "acid", "renal", "liver",
                                         "node", "cell", "blood", "iron", "sugar", "gland", "nerve", "bone",
                                         "skin", "thyroid", "insulin", "cough", "murmur", "anemia", "edema",
                                         "sepsis", "ulcer", "stone", "tumor", "virus", "fungus", "spleen"};

retrieval::Index random_index(int docs, int words_per_doc, std::mt19937_64& rng) {
  retrieval::Corpus corpus;
  for (int d = 0; d < docs; ++d) {
    std::string body;
    for (int w = 0; w < words_per_doc; ++w) body += kWords[rng() % kWords.size()] + std::to_string(rng() % 50) + " ";
    auto chunks = retrieval::chunk_document("d" + std::to_string(d), body, corpus.chunking);
    corpus.chunks.insert(corpus.chunks.end(), chunks.begin(), chunks.end());
  }
  return retrieval::build_index(corpus);
}

policy::SelectionInstance random_instance(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  policy::SelectionInstance inst;
  inst.question_id = "bench";
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(8);
    for (auto& x : row) x = unit(rng);
    inst.features.push_back(row);
    (i % 3 == 0 ? inst.labels.core : i % 3 == 1 ? inst.labels.support : inst.labels.noise).insert(i);
  }
  return inst;
}

}  // namespace

static void BM_BuildIndex(benchmark::State& state) {
  for (auto _ : state) {
    std::mt19937_64 rng(1);
    benchmark::DoNotOptimize(random_index(static_cast<int>(state.range(0)), 200, rng));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_BuildIndex)->Arg(100)->Arg(1000);

static void BM_Retrieve(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const auto index = random_index(static_cast<int>(state.range(0)), 200, rng);
  std::vector<std::string> queries;
  for (int q = 0; q < 64; ++q) {
    queries.push_back(kWords[rng() % kWords.size()] + std::to_string(rng() % 50) + " " +
                      kWords[rng() % kWords.size()] + std::to_string(rng() % 50));
  }
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(index.retrieve(queries[i++ % queries.size()], 5));
}
BENCHMARK(BM_Retrieve)->Arg(100)->Arg(1000)->Arg(10000);

static void BM_WifScore(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const auto inst = random_instance(static_cast<int>(state.range(0)), rng);
  policy::Selection sel(inst.size());
  for (auto& s : sel) s = rng() & 1U;
  for (auto _ : state) benchmark::DoNotOptimize(policy::wif_score(sel, inst.labels));
}
BENCHMARK(BM_WifScore)->Arg(8)->Arg(64);

static void BM_PolicyStep(benchmark::State& state) {
  std::mt19937_64 rng(4);
  const auto inst = random_instance(static_cast<int>(state.range(0)), rng);
  auto params = policy::PolicyParams::zeros(8);
  std::uint64_t seed = 0;
  for (auto _ : state) params = policy::policy_gradient_step(params, inst, 8, 0.1, seed++).params;
}
BENCHMARK(BM_PolicyStep)->Arg(4)->Arg(12);

static void BM_Bcubed(benchmark::State& state) {
  std::mt19937_64 rng(5);
  eval::Partition pred, gold;
  for (int i = 0; i < state.range(0); ++i) {
    pred["k" + std::to_string(i)] = std::to_string(rng() % 4);
    gold["k" + std::to_string(i)] = std::to_string(rng() % 4);
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval::bcubed(pred, gold));
}
BENCHMARK(BM_Bcubed)->Arg(15)->Arg(100);

BENCHMARK_MAIN();
