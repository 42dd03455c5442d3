#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "prescope/experiment.hpp"

using namespace prescope;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Trace small_trace(int batch = 12, std::uint64_t seed = 8) {
  ModelSpec spec = desk_scale(deepseek_spec(), 4, 8, 16);
  TraceGenConfig cfg;
  cfg.middle.zipf_s = 1.0;
  cfg.middle.kappa = 0.4;
  return generate_trace(cfg, spec, batch, seed);
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("predictor choices parse and round-trip") {
  CHECK(PredictorChoice::parse("perfect").kind == PredictorChoice::Kind::Perfect);
  CHECK(PredictorChoice::parse("stats").kind == PredictorChoice::Kind::Stats);
  CHECK(PredictorChoice::parse("gate").kind == PredictorChoice::Kind::Gate);
  PredictorChoice noise = PredictorChoice::parse("oracle_noise:0.75");
  CHECK(noise.kind == PredictorChoice::Kind::OracleNoise);
  CHECK(noise.hit_rate == doctest::Approx(0.75));
  PredictorChoice ck = PredictorChoice::parse("llapor:model.ckpt");
  CHECK(ck.kind == PredictorChoice::Kind::LLaPorCkpt);
  CHECK(ck.checkpoint == "model.ckpt");
  for (const char* name : {"perfect", "stats", "gate", "oracle_noise:0.75", "llapor:m.ckpt"})
    CHECK(PredictorChoice::parse(name).name() == name);
  CHECK_THROWS_AS(PredictorChoice::parse("psychic"), std::invalid_argument);
  CHECK_THROWS_AS(PredictorChoice::parse("oracle_noise:1.5"), std::invalid_argument);
  CHECK_THROWS_AS(PredictorChoice::parse("llapor:"), std::invalid_argument);
}

TEST_CASE("perfect predictions reproduce the gating truth") {
  Trace trace = small_trace();
  PredictFn fn = make_predict_fn(PredictorChoice::parse("perfect"), nullptr, nullptr,
                                 trace.spec.top_k, 0);
  std::vector<std::map<int, int>> loads = predict_loads(trace, fn);
  REQUIRE(loads.size() == 4u);
  for (int l = 0; l < 4; ++l) CHECK(loads[l] == aggregate_layer_loads(trace, l));

  std::vector<double> acc =
      per_layer_accuracy(trace, fn, trace.spec.top_k, AccuracyMode::Exact);
  for (double a : acc) CHECK(a == doctest::Approx(1.0));
}

TEST_CASE("oracle-noise accuracy tracks the configured hit rate") {
  Trace trace = small_trace(64);
  HotExpertTable table = build_hot_table({trace});
  PredictFn sure = make_predict_fn(PredictorChoice::parse("oracle_noise:1.0"), nullptr,
                                   &table, trace.spec.top_k, 3);
  for (double a : per_layer_accuracy(trace, sure, trace.spec.top_k, AccuracyMode::Exact))
    CHECK(a == doctest::Approx(1.0));

  PredictFn never = make_predict_fn(PredictorChoice::parse("oracle_noise:0.0"), nullptr,
                                    &table, trace.spec.top_k, 3);
  std::vector<double> acc =
      per_layer_accuracy(trace, never, trace.spec.top_k, AccuracyMode::Exact);
  for (size_t l = 1; l < acc.size(); ++l) CHECK(acc[l] < 0.2);
}

TEST_CASE("stats and gate predictors produce valid, bounded accuracy") {
  Trace trace = small_trace(32);
  HotExpertTable table = build_hot_table({trace});
  for (const char* name : {"stats", "gate"}) {
    PredictFn fn = make_predict_fn(PredictorChoice::parse(name), nullptr, &table,
                                   trace.spec.top_k, 0);
    std::vector<double> acc =
        per_layer_accuracy(trace, fn, trace.spec.top_k, AccuracyMode::Sliding);
    for (size_t l = 1; l < acc.size(); ++l) {
      CHECK(acc[l] >= 0.0);
      CHECK(acc[l] <= 1.0);
    }
  }
}

TEST_CASE("experiment config loads from json and validates") {
  fs::path dir = fresh_dir("prescope_cfg_test");
  fs::path cfg_path = dir / "config.json";
  std::ofstream(cfg_path) << R"({
    "preset": "deepseek",
    "desk": {"num_layers": 4, "experts_per_layer": 8, "hidden_dim": 16},
    "trace": {"middle": {"kappa": 0.4, "zipf_s": 1.0}},
    "cost": {"t_io": 14, "t_g": 2, "t_attn": 3, "beta": 3.0, "startup": 2},
    "policies": ["presched", "greedy", "ondemand"],
    "predictor": "perfect",
    "batch_sizes": [4],
    "seeds": [1, 2],
    "gpu_budget_mib": 33,
    "sim": {"prefetch_slots": 8},
    "out_dir": ")" << (dir / "out").string() << R"("
  })";

  ExperimentConfig cfg = load_experiment_config(cfg_path.string());
  CHECK(cfg.preset == "deepseek-desk");
  CHECK(cfg.spec.num_layers == 4);
  CHECK(cfg.spec.experts_per_layer == 8);
  CHECK(cfg.gen.middle.kappa == doctest::Approx(0.4));
  CHECK(cfg.params.t_io == 14);
  REQUIRE(cfg.policies.size() == 3u);
  CHECK(cfg.batch_sizes == std::vector<int>{4});
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(cfg.gpu_budget_bytes == 33ull << 20);
  CHECK_NOTHROW(cfg.validate());

  SUBCASE("missing cost block is rejected") {
    std::ofstream(cfg_path) << R"({"policies": ["presched"], "batch_sizes": [1], "seeds": [0]})";
    CHECK_THROWS(load_experiment_config(cfg_path.string()));
  }
  SUBCASE("empty policy list is rejected") {
    ExperimentConfig bad = cfg;
    bad.policies.clear();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }
  SUBCASE("missing checkpoint is rejected up front") {
    std::ofstream(cfg_path) << R"({
      "preset": "deepseek",
      "desk": {"num_layers": 4, "experts_per_layer": 8, "hidden_dim": 16},
      "cost": {"t_io": 14, "t_g": 2, "t_attn": 3, "beta": 3.0, "startup": 2},
      "policies": ["presched"], "predictor": "llapor:/nonexistent.ckpt",
      "batch_sizes": [4], "seeds": [1], "out_dir": "x"})";
    CHECK_THROWS(load_experiment_config(cfg_path.string()));
  }
  fs::remove_all(dir);
}

TEST_CASE("experiment grid writes per-cell metrics and a summary") {
  fs::path dir = fresh_dir("prescope_grid_test");
  ExperimentConfig cfg;
  cfg.spec = desk_scale(deepseek_spec(), 4, 8, 16);
  cfg.preset = "deepseek-desk";
  cfg.gen.middle.zipf_s = 1.0;
  cfg.params = {14, 2, 3, 3.0, 2, 0};
  cfg.policies = {SchedulerPolicy::parse("presched"), SchedulerPolicy::parse("greedy"),
                  SchedulerPolicy::parse("ondemand")};
  cfg.batch_sizes = {4};
  cfg.seeds = {1, 2};
  cfg.out_dir = (dir / "out").string();

  ExperimentResult result = run_experiment(cfg);
  CHECK(result.failed_cells == 0);
  REQUIRE(result.cells.size() == 6u);
  for (const CellResult& c : result.cells) {
    CHECK(c.ok);
    CHECK(c.metrics.makespan > 0);
  }
  // One metrics file per cell plus the summary.
  int metrics_files = 0;
  for (const auto& e : fs::directory_iterator(cfg.out_dir))
    if (e.path().filename().string().rfind("metrics_", 0) == 0) ++metrics_files;
  CHECK(metrics_files == 6);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "summary.csv"));
  CHECK(result.summary_csv.find("makespan_presched") != std::string::npos);
  CHECK(result.summary_csv.find("gain_vs_greedy") != std::string::npos);
  CHECK(result.summary_csv.find("gain_vs_ondemand") != std::string::npos);
  CHECK(result.summary_csv.find("error") == std::string::npos);

  // Report aggregation over the written cells.
  ReportResult rep = report(cfg.out_dir);
  CHECK(rep.errors.empty());
  CHECK(rep.latency_csv.find("presched,4,") != std::string::npos);
  CHECK(rep.gap_csv.find("greedy,4,1,") != std::string::npos);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "latency_vs_batch.csv"));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "gap_distribution.csv"));

  // A corrupt metrics file is isolated as an error, not a crash.
  std::ofstream(fs::path(cfg.out_dir) / "metrics_zzz_b1_s1.json") << "{broken";
  ReportResult rep2 = report(cfg.out_dir);
  REQUIRE(rep2.errors.size() == 1u);
  CHECK(rep2.errors.front().find("metrics_zzz") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("a failing cell is recorded without aborting the grid") {
  fs::path dir = fresh_dir("prescope_fail_test");
  ExperimentConfig cfg;
  cfg.spec = desk_scale(deepseek_spec(), 4, 8, 16);
  cfg.params = {14, 2, 3, 3.0, 2, 0};
  // fixed:9 overflows a 1-slot prefetch buffer only when predictions exist.
  cfg.policies = {SchedulerPolicy::parse("fixed:9"), SchedulerPolicy::parse("ondemand")};
  cfg.sim.prefetch_slots = 1;
  cfg.batch_sizes = {4};
  cfg.seeds = {1};
  cfg.out_dir = (dir / "out").string();

  ExperimentResult result = run_experiment(cfg);
  CHECK(result.failed_cells == 1);
  REQUIRE(result.cells.size() == 2u);
  CHECK_FALSE(result.cells[0].ok);
  CHECK(result.cells[1].ok);
  CHECK(result.summary_csv.find("error") != std::string::npos);
  ReportResult rep = report(cfg.out_dir);
  CHECK(rep.errors.size() == 1u);
  fs::remove_all(dir);
}

TEST_CASE("report on a missing directory yields empty series") {
  ReportResult rep = report("/nonexistent/prescope/metrics");
  CHECK(rep.errors.empty());
  CHECK(rep.latency_csv == "policy,batch,mean_makespan,mean_throughput,runs\n");
}

TEST_CASE("atomic writes leave no temp file behind") {
  fs::path dir = fresh_dir("prescope_atomic_test");
  fs::path target = dir / "note.txt";
  write_file_atomic(target.string(), "hello\n");
  std::ifstream in(target);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(content == "hello\n");
  CHECK_FALSE(fs::exists(target.string() + ".tmp"));
  fs::remove_all(dir);
}

TEST_CASE("random instance and cost generators stay in bounds") {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 200; ++i) {
    PipelineInstance inst = random_two_layer_instance(rng);
    REQUIRE(inst.num_layers() == 2);
    CHECK(inst.layers[0].truth.size() >= 1u);
    CHECK(inst.layers[0].truth.size() <= 8u);
    CHECK(inst.layers[1].predicted == inst.layers[1].truth);
    CostParams p = random_cost_params(rng);
    CHECK_NOTHROW(p.validate());
  }
}

}  // TEST_SUITE
