#pragma once

#include <string>
#include <variant>
#include <vector>

#include "prescope/cost_model.hpp"

namespace prescope {

/// Scheduler inputs for one layer. Lists hold only Host experts (resident and
/// in-flight entries are excluded by the caller) sorted ascending by tokens.
struct LayerInputs {
  std::vector<ExpertLoad> e_cur;    // gating truth, current layer
  std::vector<ExpertLoad> e_next;   // predicted next layer
  std::vector<ExpertLoad> e_next2;  // predicted next-next layer (widened window)
  CostParams params;
  HitStats stats;

  void validate() const;  // throws on unsorted lists or non-Host entries
};

/// Entry of the merged cross-layer list, tagged with its origin.
struct MergedExpert {
  ExpertLoad load;
  bool current = false;    // true when drawn from e_cur
  int index_in_list = 0;   // index within its source list
};

struct DecisionTrace {
  std::vector<Ticks> sweep_gpu;  // T_G_all per merged index
  std::vector<Ticks> sweep_cpu;  // T_C_all per merged index
  Ticks t_g_at_split = 0;
  Ticks t_c_at_split = 0;
  Ticks t_gap = 0;
  double f = 0.0;
  int f_int = 0;
  double xi = 0.0;
  bool widened_window = false;    // depth-2 prefetch path taken
  bool all_gpu_fallback = false;  // split replaced by the all-GPU split
};

struct LayerPlan {
  std::vector<ExpertLoad> cpu_set;       // E_cur[0..i'-1], ascending tokens
  std::vector<ExpertLoad> ondemand_seq;  // E_cur[i'..n], load order
  std::vector<ExpertLoad> prefetch_seq;  // hottest-first (nonincreasing tokens)
  bool prefetch_from_widened = false;    // prefetch_seq targets layer l+2
  int split_index = 0;                   // i'; e_cur.size()+? see ondemand_split
  int issued_prefetches = 0;
  DecisionTrace trace;
};

struct SchedulerPolicy {
  enum class Kind { PreSched, LayerGreedy, OnDemandOnly, FixedPrefetch, Oracle };
  Kind kind = Kind::PreSched;
  int fixed_prefetch = 0;  // c for FixedPrefetch

  static SchedulerPolicy parse(const std::string& text);  // "presched"|"greedy"|...
  std::string name() const;
};

/// Merge e_cur and e_next ascending by tokens; ties put the current layer
/// first, then the lower expert index.
std::vector<MergedExpert> merge_cross_layer(const std::vector<ExpertLoad>& e_cur,
                                            const std::vector<ExpertLoad>& e_next);

/// GPU-queue membership: keep merged element k iff T_G_all(k) < T_C_all(k).
/// Returned in merged (ascending-token) order. Fills trace sweep columns when given.
std::vector<MergedExpert> build_cross_layer_queue(const LayerInputs& inputs,
                                                  DecisionTrace* trace = nullptr);

/// On-demand split scan: smallest current-layer index i' in GPU_Q with
/// T_G(i') < T_C(i'); returns e_cur.size() + 1 encoded as n+1 when none
/// qualifies (all-CPU layer). n is e_cur.size()-1, so the sentinel equals
/// e_cur.size().
int ondemand_split(const LayerInputs& inputs, const std::vector<MergedExpert>& gpu_q,
                   DecisionTrace* trace = nullptr);

struct PrefetchDecisionResult {
  int count = 0;
  std::vector<ExpertLoad> seq;  // hottest-first
  bool widened = false;
};

/// Gap-window prefetch decision, with the single-recursion widened window.
PrefetchDecisionResult prefetch_decision(const LayerInputs& inputs,
                                         const std::vector<MergedExpert>& gpu_q,
                                         int i_prime, DecisionTrace* trace = nullptr);

/// Full PreSched pass for one layer.
LayerPlan schedule_layer(const LayerInputs& inputs);

/// Layer-local greedy baseline: suffix split minimizing max(T_C, T_G), ties to fewer GPU
/// loads, then greedy PCIe fill with next-layer prefetches.
LayerPlan greedy_layer_baseline(const LayerInputs& inputs);

/// All experts on demand, no prefetch.
LayerPlan ondemand_only_plan(const LayerInputs& inputs);

/// Greedy split plus exactly c prefetches (clamped to n').
LayerPlan fixed_prefetch_plan(const LayerInputs& inputs, int c);

/// Dispatch on policy kind. Oracle policies are resolved by the simulator
/// layer (enumeration needs full-pipeline simulation) and are rejected here.
LayerPlan plan_layer(const LayerInputs& inputs, const SchedulerPolicy& policy);

}  // namespace prescope
