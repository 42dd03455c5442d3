#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "prescope/scheduler.hpp"
#include "prescope/workload.hpp"

namespace prescope {

enum class Resource { Gpu = 0, Cpu = 1, IoChannel = 2 };
enum class EventKind { Attention, GpuExpert, CpuExpert, Load, Prefetch, Idle };

const char* to_string(Resource r);
const char* to_string(EventKind k);

struct TimelineEvent {
  Ticks t_start = 0;
  Ticks t_end = 0;
  Resource resource = Resource::Gpu;
  EventKind kind = EventKind::Attention;
  int layer = 0;   // for Load/Prefetch: the layer the expert belongs to
  int expert = -1;
  int tokens = 0;

  bool operator==(const TimelineEvent&) const = default;
};

struct Timeline {
  std::vector<TimelineEvent> events;  // ordered by (resource, t_start)
  std::vector<Ticks> layer_start;     // attention start per layer
  std::vector<Ticks> layer_end;       // last compute end per layer
  Ticks makespan = 0;

  bool operator==(const Timeline&) const = default;
};

/// Token loads of one layer: gating truth plus the prediction available to
/// the scheduler of the previous layer.
struct LayerLoads {
  std::map<int, int> truth;      // expert -> tokens
  std::map<int, int> predicted;  // expert -> predicted tokens
};

struct PipelineInstance {
  std::vector<LayerLoads> layers;
  std::set<std::pair<int, int>> resident;  // (layer, expert) pinned in GPU memory
  std::vector<LayerGroup> groups;          // per layer; empty -> all Middle

  LayerGroup group_of(int layer) const {
    return groups.empty() ? LayerGroup::Middle : groups.at(layer);
  }
  int num_layers() const { return static_cast<int>(layers.size()); }
};

struct SimOptions {
  int cpu_slots = 1;
  int prefetch_slots = 8;        // per buffer group
  double initial_hit_rate = 1.0; // seeds the R_hit EWMA
  int hit_window = 32;
};

using PlanFn = std::function<LayerPlan(const LayerInputs&, int layer)>;

struct SimResult {
  Timeline timeline;
  std::vector<LayerPlan> plans;
};

SimResult simulate_pipeline(const PipelineInstance& instance, const PlanFn& plan_fn,
                            const CostParams& params, const SimOptions& options = {});

/// Convenience wrapper dispatching on a named policy (Oracle resolves through
/// enumeration_oracle and replays the optimal plan).
SimResult simulate_policy(const PipelineInstance& instance, const SchedulerPolicy& policy,
                          const CostParams& params, const SimOptions& options = {});

/// Builds a pipeline instance from a routing trace plus per-layer predicted
/// loads (index l holds the prediction for layer l).
PipelineInstance build_instance(const Trace& trace,
                                const std::vector<std::map<int, int>>& predicted,
                                const std::set<std::pair<int, int>>& resident);

struct LayerDecision {
  int split_index = 0;
  int prefetch_count = 0;
};

struct OracleResult {
  Ticks makespan = 0;
  std::vector<LayerDecision> decisions;
  SimResult best;
};

/// Exhaustive (i', c) enumeration over a two-layer instance (<= 8 experts per
/// layer); ground truth optimum for acceptance tests.
OracleResult enumeration_oracle(const PipelineInstance& instance,
                                const CostParams& params,
                                const SimOptions& options = {});

/// Replays an explicit per-layer decision list.
SimResult simulate_decisions(const PipelineInstance& instance,
                             const std::vector<LayerDecision>& decisions,
                             const CostParams& params, const SimOptions& options = {});

std::vector<std::string> verify_timeline(const Timeline& timeline,
                                         const PipelineInstance& instance,
                                         const CostParams& params);

struct Metrics {
  std::vector<Ticks> per_layer_latency;
  std::vector<Ticks> cpu_gpu_gap;  // |finish_CPU - finish_GPU| per layer
  Ticks makespan = 0;
  Ticks decode_latency = 0;        // per output token, == makespan of one pass
  double throughput_tokens_per_s = 0.0;
  double io_busy_fraction = 0.0;
  double gpu_idle_fraction = 0.0;
};

Metrics compute_metrics(const Timeline& timeline, int output_tokens);

// Line-delimited export: one header line with the tick unit, then
// "t_start t_end resource kind layer expert tokens" per event.
std::string export_timeline(const Timeline& timeline);
std::string export_metrics_json(const Metrics& metrics);

}  // namespace prescope
