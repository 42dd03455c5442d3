#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "prescope/predictor.hpp"
#include "prescope/simulator.hpp"

namespace prescope {

struct PredictorChoice {
  enum class Kind { Perfect, Stats, Gate, OracleNoise, LLaPorCkpt };
  Kind kind = Kind::Perfect;
  std::string checkpoint;  // LLaPorCkpt
  double hit_rate = 1.0;   // OracleNoise

  // "perfect" | "stats" | "gate" | "oracle_noise:<rate>" | "llapor:<path>"
  static PredictorChoice parse(const std::string& text);
  std::string name() const;
};

/// Per-(token, layer) expert prediction. All non-perfect kinds derive the
/// prediction from the previous layer's step, so layer must be >= 1.
using PredictFn = std::function<std::vector<int>(const Trace&, int token, int layer)>;

PredictFn make_predict_fn(const PredictorChoice& choice, const LLaPor* model,
                          const HotExpertTable* table, int k, std::uint64_t seed);

/// Aggregates per-token predictions into per-layer predicted token loads.
/// Index 0 mirrors the gating truth (layer 0 has no predecessor).
std::vector<std::map<int, int>> predict_loads(const Trace& trace, const PredictFn& fn);

/// Hit fraction per target layer. Index 0 is fixed to 1.0 (gating truth).
std::vector<double> per_layer_accuracy(const Trace& trace, const PredictFn& fn,
                                       int true_k, AccuracyMode mode);

struct ExperimentConfig {
  ModelSpec spec;
  std::string preset = "custom";
  TraceGenConfig gen;
  CostParams params;
  std::vector<SchedulerPolicy> policies;
  PredictorChoice predictor;
  std::vector<int> batch_sizes;
  std::vector<std::uint64_t> seeds;
  std::uint64_t gpu_budget_bytes = 0;  // 0 disables resident planning
  SimOptions sim;
  std::string out_dir;

  void validate() const;
};

ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_schema();

struct CellResult {
  std::string policy;
  int batch = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  Metrics metrics;
};

struct ExperimentResult {
  std::vector<CellResult> cells;
  std::string summary_csv;
  int failed_cells = 0;
};

/// Runs the (policy x batch x seed) grid; one metrics file per cell plus
/// summary.csv in out_dir. A failing cell is recorded and the grid proceeds.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

struct ReportResult {
  std::string latency_csv;  // policy, batch, mean makespan/throughput
  std::string gap_csv;      // per-layer CPU/GPU finish gap distribution
  std::vector<std::string> errors;
};

/// Aggregates metrics files from a previous run; writes the CSV series into
/// the same directory and returns them.
ReportResult report(const std::string& metrics_dir);

void write_file_atomic(const std::string& path, const std::string& content);

/// Random 2-layer instance with perfect next-layer prediction; used by the
/// oracle-gap and property suites. Draws busy layers (max_experts-2 to
/// max_experts active experts) with small token counts so that per-expert CPU
/// cost stays below one transfer -- the PCIe-bound regime the scheduler
/// targets.
PipelineInstance random_two_layer_instance(std::mt19937_64& rng, int max_experts = 8,
                                           int max_tokens = 8);
CostParams random_cost_params(std::mt19937_64& rng);

}  // namespace prescope
