// Microbenchmarks over the pipeline's hot paths: serialization, sampling,
// resampling, reordering, the scan, fusion, and the assembled model. Sizes
// are chosen so a full run finishes in well under a minute.
#include <benchmark/benchmark.h>

#include <cstdint>
#include <string>
#include <vector>

#include "dm3d/autodiff.hpp"
#include "dm3d/gaussian_deform.hpp"
#include "dm3d/geometry.hpp"
#include "dm3d/hilbert.hpp"
#include "dm3d/pipeline.hpp"
#include "dm3d/rng.hpp"
#include "dm3d/ssm.hpp"
#include "dm3d/tpff.hpp"

namespace ad = dm3d::ad;
using dm3d::Tensor;

namespace {

Tensor random_tensor(std::uint64_t seed, const std::string& name,
                     std::int64_t rows, std::int64_t cols, double sd = 1.0) {
  dm3d::SplitMix64 gen(dm3d::named_seed(seed, name));
  Tensor t(rows, cols);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = gen.normal() * sd;
  return t;
}

Tensor random_uniform(std::uint64_t seed, const std::string& name,
                      std::int64_t rows, std::int64_t cols) {
  dm3d::SplitMix64 gen(dm3d::named_seed(seed, name));
  Tensor t(rows, cols);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = gen.next_double();
  return t;
}

void bm_serialize(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  const Tensor pts = random_uniform(1, "bench.serialize", n, 3);
  const auto cfg = dm3d::bbox_config(pts, 9);
  for (auto _ : state) benchmark::DoNotOptimize(dm3d::serialize(pts, cfg));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(bm_serialize)->Arg(1024)->Arg(8192);

void bm_fps(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  const Tensor pts = random_uniform(2, "bench.fps", n, 3);
  for (auto _ : state)
    benchmark::DoNotOptimize(dm3d::farthest_point_sample(pts, 128));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(bm_fps)->Arg(1024)->Arg(4096);

void bm_knn(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  const Tensor pts = random_uniform(3, "bench.knn", n, 3);
  const Tensor centers = random_uniform(3, "bench.knn.centers", 128, 3);
  for (auto _ : state)
    benchmark::DoNotOptimize(dm3d::knn(centers, pts, 16));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(bm_knn)->Arg(1024)->Arg(4096);

void bm_gkr(benchmark::State& state) {
  const std::int64_t n = state.range(0), d = 64;
  ad::NoGradGuard off;
  const ad::Var feats = ad::make_constant(random_tensor(4, "bench.gkr.f", n, d));
  const Tensor centers = random_uniform(4, "bench.gkr.c", n, 3);
  const ad::Var dp =
      ad::make_constant(random_tensor(4, "bench.gkr.dp", n, 3, 0.05));
  const ad::Var sigma = ad::make_constant(Tensor::scalar(0.5));
  for (auto _ : state)
    benchmark::DoNotOptimize(dm3d::gkr(feats, centers, dp, 3, sigma));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(bm_gkr)->Arg(128)->Arg(512);

void bm_gdr(benchmark::State& state) {
  const std::int64_t n = state.range(0), d = 64;
  ad::NoGradGuard off;
  std::vector<std::int64_t> base(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) base[static_cast<std::size_t>(i)] = i;
  const Tensor dt = random_tensor(5, "bench.gdr.dt", n, 1, 0.1);
  const ad::Var feats = ad::make_constant(random_tensor(5, "bench.gdr.f", n, d));
  for (auto _ : state) {
    const auto w = dm3d::gdr_weights(base, dt, 0.2);
    benchmark::DoNotOptimize(dm3d::gdr_apply(w, feats));
  }
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(bm_gdr)->Arg(64)->Arg(128)->Arg(256);

dm3d::SsmBranchParams bench_branch(std::int64_t d_inner, std::int64_t d_state,
                                   std::int64_t dt_rank, std::int64_t width) {
  dm3d::SsmBranchParams p;
  p.conv_kernel =
      ad::make_constant(random_tensor(6, "bench.br.k", width, d_inner, 0.3));
  p.conv_bias = ad::make_constant(random_tensor(6, "bench.br.kb", 1, d_inner, 0.1));
  p.x_proj_w = ad::make_constant(
      random_tensor(6, "bench.br.xp", dt_rank + 2 * d_state, d_inner, 0.3));
  p.dt_proj_w =
      ad::make_constant(random_tensor(6, "bench.br.dp", d_inner, dt_rank, 0.3));
  p.dt_bias = ad::make_constant(random_tensor(6, "bench.br.db", 1, d_inner, 0.1));
  Tensor a_log(d_inner, d_state);
  dm3d::SplitMix64 gen(dm3d::named_seed(6, "bench.br.a"));
  for (std::int64_t i = 0; i < a_log.size(); ++i)
    a_log[i] = std::log(gen.uniform(0.5, 2.0));
  p.a_log = ad::make_constant(a_log);
  p.skip = ad::make_constant(random_tensor(6, "bench.br.s", 1, d_inner, 0.3));
  return p;
}

void bm_scan_branch(benchmark::State& state) {
  const std::int64_t len = state.range(0), d_inner = 64, d_state = 16;
  ad::NoGradGuard off;
  const auto params = bench_branch(d_inner, d_state, 4, 4);
  const ad::Var u =
      ad::make_constant(random_tensor(7, "bench.scan.u", len, d_inner, 0.5));
  for (auto _ : state)
    benchmark::DoNotOptimize(
        dm3d::ssm_branch(u, params, 3, dm3d::BranchAct::kSilu));
  state.SetItemsProcessed(state.iterations() * len * d_inner * d_state);
}
BENCHMARK(bm_scan_branch)->Arg(129)->Arg(513);

void bm_tpff(benchmark::State& state) {
  const std::int64_t len = state.range(0), c = 64, groups = 32;
  ad::NoGradGuard off;
  dm3d::TpffParams params;
  params.fuse_w =
      ad::make_constant(random_tensor(8, "bench.tpff.fuse", c, 3 * c / groups, 0.3));
  params.freq_w =
      ad::make_constant(random_tensor(8, "bench.tpff.fw", 2 * c, 2 * c / groups, 0.3));
  params.freq_b = ad::make_constant(random_tensor(8, "bench.tpff.fb", 1, 2 * c, 0.1));
  params.groups = groups;
  const dm3d::TriPathBundle bundle{
      ad::make_constant(random_tensor(8, "bench.tpff.f", len, c, 0.5)),
      ad::make_constant(random_tensor(8, "bench.tpff.c", len, c, 0.5)),
      ad::make_constant(random_tensor(8, "bench.tpff.d", len, c, 0.5))};
  for (auto _ : state)
    benchmark::DoNotOptimize(dm3d::tpff(bundle, params));
  state.SetItemsProcessed(state.iterations() * len * c);
}
BENCHMARK(bm_tpff)->Arg(128)->Arg(512);

dm3d::ModelConfig bench_config() {
  dm3d::ModelConfig cfg;
  cfg.n_groups = 64;
  cfg.group_size = 16;
  cfg.feat_dim = 32;
  cfg.n_stages = 2;
  cfg.d_state = 8;
  cfg.k_q = 8;
  cfg.k_r = 3;
  cfg.radius = 0.2;
  cfg.hilbert_order = 6;
  return cfg;
}

void bm_model_forward(benchmark::State& state) {
  const auto cfg = bench_config();
  auto params = dm3d::init_model_params(cfg, 9);
  dm3d::PointCloud cloud;
  cloud.coords = random_uniform(9, "bench.model.cloud", state.range(0), 3);
  ad::NoGradGuard off;
  for (auto _ : state)
    benchmark::DoNotOptimize(dm3d::model_forward(cloud, cfg, params));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_model_forward)->Arg(512)->Unit(benchmark::kMillisecond);

void bm_model_backward(benchmark::State& state) {
  const auto cfg = bench_config();
  auto params = dm3d::init_model_params(cfg, 10);
  dm3d::PointCloud cloud;
  cloud.coords = random_uniform(10, "bench.model.cloud", state.range(0), 3);
  auto named = dm3d::named_params(params);
  for (auto _ : state) {
    for (auto& [name, var] : named) var->clear_grad();
    const auto out = dm3d::model_forward(cloud, cfg, params);
    ad::Var loss = ad::sum_all(out.tokens);
    ad::backward(loss);
    benchmark::DoNotOptimize(loss.value()(0, 0));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(bm_model_backward)->Arg(512)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
