#include "prescope/scheduler.hpp"

#include <algorithm>
#include <cmath>

namespace prescope {

void LayerInputs::validate() const {
  params.validate();
  stats.validate();
  for (const std::vector<ExpertLoad>* list : {&e_cur, &e_next, &e_next2}) {
    for (size_t i = 0; i < list->size(); ++i) {
      if ((*list)[i].location != ExpertLocation::Host)
        throw std::invalid_argument("LayerInputs: lists must contain Host experts only");
      if ((*list)[i].tokens < 1)
        throw std::invalid_argument("LayerInputs: schedulable experts need tokens >= 1");
      if (i > 0 && (*list)[i - 1].tokens > (*list)[i].tokens)
        throw std::invalid_argument("LayerInputs: lists must be sorted ascending by tokens");
    }
  }
}

SchedulerPolicy SchedulerPolicy::parse(const std::string& text) {
  SchedulerPolicy p;
  if (text == "presched") {
    p.kind = Kind::PreSched;
  } else if (text == "greedy") {
    p.kind = Kind::LayerGreedy;
  } else if (text == "ondemand") {
    p.kind = Kind::OnDemandOnly;
  } else if (text == "oracle") {
    p.kind = Kind::Oracle;
  } else if (text.rfind("fixed:", 0) == 0) {
    p.kind = Kind::FixedPrefetch;
    p.fixed_prefetch = std::stoi(text.substr(6));
    if (p.fixed_prefetch < 0) throw std::invalid_argument("fixed:<c> needs c >= 0");
  } else {
    throw std::invalid_argument("unknown policy: " + text);
  }
  return p;
}

std::string SchedulerPolicy::name() const {
  switch (kind) {
    case Kind::PreSched: return "presched";
    case Kind::LayerGreedy: return "greedy";
    case Kind::OnDemandOnly: return "ondemand";
    case Kind::FixedPrefetch: return "fixed:" + std::to_string(fixed_prefetch);
    case Kind::Oracle: return "oracle";
  }
  return "?";
}

std::vector<MergedExpert> merge_cross_layer(const std::vector<ExpertLoad>& e_cur,
                                            const std::vector<ExpertLoad>& e_next) {
  std::vector<MergedExpert> merged;
  merged.reserve(e_cur.size() + e_next.size());
  for (size_t i = 0; i < e_cur.size(); ++i)
    merged.push_back({e_cur[i], true, static_cast<int>(i)});
  for (size_t i = 0; i < e_next.size(); ++i)
    merged.push_back({e_next[i], false, static_cast<int>(i)});
  std::stable_sort(merged.begin(), merged.end(),
                   [](const MergedExpert& a, const MergedExpert& b) {
                     if (a.load.tokens != b.load.tokens) return a.load.tokens < b.load.tokens;
                     if (a.current != b.current) return a.current;  // current first
                     return a.load.expert < b.load.expert;
                   });
  return merged;
}

namespace {

std::vector<ExpertLoad> loads_of(const std::vector<MergedExpert>& merged) {
  std::vector<ExpertLoad> out;
  out.reserve(merged.size());
  for (const MergedExpert& m : merged) out.push_back(m.load);
  return out;
}

std::vector<MergedExpert> queue_for(const std::vector<ExpertLoad>& e_cur,
                                    const std::vector<ExpertLoad>& e_next,
                                    const CostParams& params, DecisionTrace* trace) {
  std::vector<MergedExpert> merged = merge_cross_layer(e_cur, e_next);
  std::vector<ExpertLoad> e_all = loads_of(merged);
  std::vector<MergedExpert> gpu_q;
  for (size_t k = 0; k < merged.size(); ++k) {
    CostPair c = cross_layer_costs(static_cast<int>(k), e_all, params);
    if (trace) {
      trace->sweep_gpu.push_back(c.gpu);
      trace->sweep_cpu.push_back(c.cpu);
    }
    if (c.gpu < c.cpu) gpu_q.push_back(merged[k]);
  }
  return gpu_q;
}

// Completion estimate of a suffix split, one layer in isolation. The
// sentinel split s == e_cur.size() means no on-demand loads at all.
Ticks split_estimate(int s, const std::vector<ExpertLoad>& e_cur,
                     const CostParams& params) {
  Ticks t_c = cpu_cost_list(std::span(e_cur).subspan(0, s), params);
  if (static_cast<size_t>(s) == e_cur.size()) return t_c;
  Ticks t_g = params.alpha +
              static_cast<Ticks>(e_cur.size() - s) * params.t_io + params.t_g;
  return std::max(t_c, t_g);
}

std::vector<ExpertLoad> hottest_first(const std::vector<ExpertLoad>& list, int c) {
  std::vector<ExpertLoad> seq(list.end() - c, list.end());
  std::reverse(seq.begin(), seq.end());
  return seq;
}

void fill_plan_sets(LayerPlan& plan, const LayerInputs& inputs, int i_prime) {
  plan.split_index = i_prime;
  plan.cpu_set.assign(inputs.e_cur.begin(), inputs.e_cur.begin() + i_prime);
  plan.ondemand_seq.assign(inputs.e_cur.begin() + i_prime, inputs.e_cur.end());
}

}  // namespace

std::vector<MergedExpert> build_cross_layer_queue(const LayerInputs& inputs,
                                                  DecisionTrace* trace) {
  return queue_for(inputs.e_cur, inputs.e_next, inputs.params, trace);
}

int ondemand_split(const LayerInputs& inputs, const std::vector<MergedExpert>& gpu_q,
                   DecisionTrace* trace) {
  const int sentinel = static_cast<int>(inputs.e_cur.size());  // "i' = n+1"
  int chosen = sentinel;
  for (const MergedExpert& m : gpu_q) {
    if (!m.current) continue;
    CostPair c = current_layer_costs(m.index_in_list, inputs.e_cur, inputs.params);
    if (c.gpu < c.cpu) {
      chosen = m.index_in_list;
      break;  // GPU_Q is token-ascending, so this is the smallest qualifying i'
    }
  }
  if (trace) {
    CostPair c = current_layer_costs(chosen, inputs.e_cur, inputs.params);
    trace->t_g_at_split = c.gpu;
    trace->t_c_at_split = c.cpu;
  }
  return chosen;
}

PrefetchDecisionResult prefetch_decision(const LayerInputs& inputs,
                                         const std::vector<MergedExpert>& gpu_q,
                                         int i_prime, DecisionTrace* trace) {
  bool queue_has_next = std::any_of(gpu_q.begin(), gpu_q.end(),
                                    [](const MergedExpert& m) { return !m.current; });
  const std::vector<ExpertLoad>* target = &inputs.e_next;
  PrefetchDecisionResult res;

  if (!queue_has_next) {
    // Q4: widen the prediction window by one layer and retry once.
    res.widened = true;
    if (trace) trace->widened_window = true;
    if (inputs.e_next2.empty()) return res;
    std::vector<MergedExpert> gpu_q2 =
        queue_for(inputs.e_cur, inputs.e_next2, inputs.params, nullptr);
    bool has_next2 = std::any_of(gpu_q2.begin(), gpu_q2.end(),
                                 [](const MergedExpert& m) { return !m.current; });
    if (!has_next2) return res;
    target = &inputs.e_next2;
  }

  const CostParams& p = inputs.params;
  Ticks loads = static_cast<Ticks>(inputs.e_cur.size()) - i_prime;
  Ticks t_gap = cpu_cost_list(std::span(inputs.e_cur).subspan(0, i_prime), p) -
                p.alpha - loads * p.t_io;
  PrefetchCount pc = overlap_prefetch_count(t_gap, p);
  double xi = prefetch_gain(inputs.stats, pc.f, pc.f_int, p);
  int c = xi > 0 ? pc.f_int : std::max(pc.f_int - 1, 0);
  c = std::min<int>(c, static_cast<int>(target->size()));

  if (trace) {
    trace->t_gap = t_gap;
    trace->f = pc.f;
    trace->f_int = pc.f_int;
    trace->xi = xi;
  }
  res.count = c;
  res.seq = hottest_first(*target, c);
  return res;
}

LayerPlan schedule_layer(const LayerInputs& inputs) {
  inputs.validate();
  LayerPlan plan;
  std::vector<MergedExpert> gpu_q = build_cross_layer_queue(inputs, &plan.trace);
  int i_prime = ondemand_split(inputs, gpu_q, &plan.trace);

  // The split scan cannot select i' = 0 (T_C over an empty prefix is 0),
  // so a split whose CPU prefix is slower than loading everything would lose
  // to a pure on-demand plan. Fall back to the all-GPU split in that case.
  if (!inputs.e_cur.empty() &&
      split_estimate(0, inputs.e_cur, inputs.params) <
          split_estimate(i_prime, inputs.e_cur, inputs.params)) {
    i_prime = 0;
    plan.trace.all_gpu_fallback = true;
    CostPair c = current_layer_costs(0, inputs.e_cur, inputs.params);
    plan.trace.t_g_at_split = c.gpu;
    plan.trace.t_c_at_split = c.cpu;
  }

  fill_plan_sets(plan, inputs, i_prime);
  PrefetchDecisionResult pf = prefetch_decision(inputs, gpu_q, i_prime, &plan.trace);
  plan.issued_prefetches = pf.count;
  plan.prefetch_seq = std::move(pf.seq);
  plan.prefetch_from_widened = pf.widened && pf.count > 0;
  return plan;
}

LayerPlan greedy_layer_baseline(const LayerInputs& inputs) {
  inputs.validate();
  const CostParams& p = inputs.params;
  const int size = static_cast<int>(inputs.e_cur.size());

  int best = size;
  Ticks best_cost = split_estimate(size, inputs.e_cur, p);
  for (int s = size - 1; s >= 0; --s) {
    Ticks cost = split_estimate(s, inputs.e_cur, p);
    if (cost < best_cost) {  // ties keep the larger s (fewer GPU loads)
      best_cost = cost;
      best = s;
    }
  }

  LayerPlan plan;
  fill_plan_sets(plan, inputs, best);
  CostPair c = current_layer_costs(best, inputs.e_cur, p);
  plan.trace.t_g_at_split = c.gpu;
  plan.trace.t_c_at_split = c.cpu;

  // Greedy PCIe fill: keep issuing prefetches while the channel frees up
  // before the next layer's on-demand traffic would start.
  Ticks t_free = p.alpha + static_cast<Ticks>(size - best) * p.t_io;
  Ticks window_end = best_cost + p.t_attn;
  int cnt = 0;
  if (t_free < window_end) {
    cnt = static_cast<int>((window_end - t_free + p.t_io - 1) / p.t_io);
    cnt = std::min<int>(cnt, static_cast<int>(inputs.e_next.size()));
  }
  plan.issued_prefetches = cnt;
  plan.prefetch_seq = hottest_first(inputs.e_next, cnt);
  plan.trace.t_gap = plan.trace.t_c_at_split - t_free;
  plan.trace.f_int = cnt;
  return plan;
}

LayerPlan ondemand_only_plan(const LayerInputs& inputs) {
  inputs.validate();
  LayerPlan plan;
  fill_plan_sets(plan, inputs, 0);
  CostPair c = current_layer_costs(0, inputs.e_cur, inputs.params);
  plan.trace.t_g_at_split = c.gpu;
  plan.trace.t_c_at_split = c.cpu;
  return plan;
}

LayerPlan fixed_prefetch_plan(const LayerInputs& inputs, int c) {
  LayerPlan plan = greedy_layer_baseline(inputs);
  int cnt = std::min<int>(c, static_cast<int>(inputs.e_next.size()));
  plan.issued_prefetches = cnt;
  plan.prefetch_seq = hottest_first(inputs.e_next, cnt);
  plan.trace.f_int = cnt;
  return plan;
}

LayerPlan plan_layer(const LayerInputs& inputs, const SchedulerPolicy& policy) {
  switch (policy.kind) {
    case SchedulerPolicy::Kind::PreSched: return schedule_layer(inputs);
    case SchedulerPolicy::Kind::LayerGreedy: return greedy_layer_baseline(inputs);
    case SchedulerPolicy::Kind::OnDemandOnly: return ondemand_only_plan(inputs);
    case SchedulerPolicy::Kind::FixedPrefetch:
      return fixed_prefetch_plan(inputs, policy.fixed_prefetch);
    case SchedulerPolicy::Kind::Oracle:
      throw std::invalid_argument("oracle policy requires the pipeline enumerator");
  }
  throw std::logic_error("unreachable");
}

}  // namespace prescope
