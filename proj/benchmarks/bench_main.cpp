#include <benchmark/benchmark.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <unistd.h>

#include "nsbuild/digest.hpp"
#include "nsbuild/dockerfile.hpp"
#include "nsbuild/idmap.hpp"
#include "nsbuild/image.hpp"
#include "nsbuild/ownerdb.hpp"

namespace fs = std::filesystem;
using namespace nsbuild;

static void BM_ParseDockerfile(benchmark::State& state) {
  std::string text = "FROM debian:buster\nARG V=1\nENV P=/opt/$V\n";
  for (int i = 0; i < state.range(0); ++i) text += "RUN apt-get install -y pkg" + std::to_string(i) + " \\\n  && true\n";
  for (auto _ : state) benchmark::DoNotOptimize(dockerfile::parse(text, "Dockerfile"));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ParseDockerfile)->Arg(10)->Arg(1000);

static void BM_Translate(benchmark::State& state) {
  // The invoker alone plus one subordinate range.
  const idmap::IdMap map({{0, 1234, 1}, {1, 200000, 65536}});
  std::mt19937 rng(1);
  std::uniform_int_distribution<idmap::Id> pick(0, 70000);
  std::vector<idmap::Id> ids(4096);
  for (auto& id : ids) id = pick(rng);
  for (auto _ : state)
    for (auto id : ids) benchmark::DoNotOptimize(idmap::translate(map, id, idmap::Direction::NsToHost));
  state.SetItemsProcessed(state.iterations() * ids.size());
}
BENCHMARK(BM_Translate);

static void BM_Sha256(benchmark::State& state) {
  const std::string data(static_cast<std::size_t>(state.range(0)), 'x');
  for (auto _ : state) benchmark::DoNotOptimize(sha256_digest(data));
  state.SetBytesProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Sha256)->Arg(4 << 10)->Arg(4 << 20);

static void BM_OwnerdbUpsert(benchmark::State& state) {
  ownerdb::Session session;
  std::uint64_t ino = 0;
  for (auto _ : state) session.upsert({1, ++ino % 100000}, {0, 0, 0644, ownerdb::FileKind::Regular, std::nullopt});
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_OwnerdbUpsert);

static void BM_ExportLayer(benchmark::State& state) {
  const fs::path root = fs::temp_directory_path() / ("nsbuild-bench-" + std::to_string(::getpid()));
  for (int i = 0; i < state.range(0); ++i) {
    fs::create_directories(root / ("d" + std::to_string(i % 16)));
    std::ofstream(root / ("d" + std::to_string(i % 16)) / ("f" + std::to_string(i))) << std::string(512, 'a' + i % 26);
  }
  for (auto _ : state) {
    std::ostringstream out;
    image::export_layer(root, nullptr, out);
    benchmark::DoNotOptimize(out.str().size());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
  image::remove_tree(root);
}
BENCHMARK(BM_ExportLayer)->Arg(1000);
BENCHMARK_MAIN();
