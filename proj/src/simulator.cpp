#include "prescope/simulator.hpp"

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace prescope {

const char* to_string(Resource r) {
  switch (r) {
    case Resource::Gpu: return "gpu";
    case Resource::Cpu: return "cpu";
    case Resource::IoChannel: return "io";
  }
  return "?";
}

const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::Attention: return "attention";
    case EventKind::GpuExpert: return "gpu_expert";
    case EventKind::CpuExpert: return "cpu_expert";
    case EventKind::Load: return "load";
    case EventKind::Prefetch: return "prefetch";
    case EventKind::Idle: return "idle";
  }
  return "?";
}

namespace {

struct PendingPrefetch {
  Ticks start = 0;
  Ticks end = 0;
  int target_layer = 0;
  int expert = 0;
  int tokens = 0;
  bool critical = false;
  LayerGroup issue_group = LayerGroup::Middle;
};

std::vector<ExpertLoad> sorted_loads(const std::map<int, int>& loads, int layer,
                                     const std::function<bool(int)>& exclude) {
  std::vector<ExpertLoad> out;
  for (auto [e, m] : loads) {
    if (m < 1 || exclude(e)) continue;
    out.push_back({e, layer, m, ExpertLocation::Host});
  }
  std::sort(out.begin(), out.end(), [](const ExpertLoad& a, const ExpertLoad& b) {
    if (a.tokens != b.tokens) return a.tokens < b.tokens;
    return a.expert < b.expert;
  });
  return out;
}

}  // namespace

SimResult simulate_pipeline(const PipelineInstance& instance, const PlanFn& plan_fn,
                            const CostParams& params, const SimOptions& options) {
  params.validate();
  const int L = instance.num_layers();

  SimResult result;
  std::vector<TimelineEvent>& events = result.timeline.events;
  result.timeline.layer_start.resize(L);
  result.timeline.layer_end.resize(L);

  Ticks io_free = 0;
  Ticks io_free_base = 0;  // channel busy-until excluding the pending batch
  std::vector<PendingPrefetch> pending;
  std::map<std::pair<int, int>, Ticks> prefetched;  // (layer, expert) -> ready tick
  std::map<int, int> prefetch_slot_use;             // target layer -> occupied slots
  std::map<LayerGroup, HitStats> stats;
  for (LayerGroup g : {LayerGroup::Input, LayerGroup::Middle, LayerGroup::Output}) {
    HitStats h;
    h.r_hit = options.initial_hit_rate;
    h.r_miss = 1.0 - h.r_hit;
    h.window = options.hit_window;
    stats[g] = h;
  }

  Ticks prev_layer_end = 0;
  for (int l = 0; l < L; ++l) {
    const Ticks attn_start = prev_layer_end;
    const Ticks t0 = attn_start + params.t_attn;
    events.push_back({attn_start, t0, Resource::Gpu, EventKind::Attention, l, -1, 0});
    result.timeline.layer_start[l] = attn_start;

    // Resolve the pending prefetch batch: jobs already started run to
    // completion (prefetches are non-interruptible), the rest are cancelled
    // and degrade to on-demand work.
    for (const PendingPrefetch& p : pending) {
      if (p.start < t0) {
        events.push_back({p.start, p.end, Resource::IoChannel, EventKind::Prefetch,
                          p.target_layer, p.expert, p.tokens});
        prefetched[{p.target_layer, p.expert}] = p.end;
        io_free_base = std::max(io_free_base, p.end);
        if (p.critical) {
          bool hit = p.target_layer < L &&
                     instance.layers[p.target_layer].truth.count(p.expert) > 0;
          stats[p.issue_group].record(hit);
        }
      } else {
        prefetch_slot_use[p.target_layer]--;
      }
    }
    pending.clear();
    io_free = io_free_base;
    // Buffer groups rotate: slots for layers already behind us are free.
    std::erase_if(prefetch_slot_use, [&](const auto& kv) { return kv.first <= l; });

    const std::map<int, int>& truth = instance.layers[l].truth;
    auto is_resident = [&](int layer, int e) {
      return instance.resident.count({layer, e}) > 0;
    };

    LayerInputs inputs;
    inputs.e_cur = sorted_loads(truth, l, [&](int e) {
      return is_resident(l, e) || prefetched.count({l, e}) > 0;
    });
    if (l + 1 < L)
      inputs.e_next = sorted_loads(instance.layers[l + 1].predicted, l + 1, [&](int e) {
        return is_resident(l + 1, e) || prefetched.count({l + 1, e}) > 0;
      });
    if (l + 2 < L)
      inputs.e_next2 = sorted_loads(instance.layers[l + 2].predicted, l + 2, [&](int e) {
        return is_resident(l + 2, e) || prefetched.count({l + 2, e}) > 0;
      });
    inputs.params = params;
    inputs.params.alpha = std::max<Ticks>(0, io_free - t0);
    inputs.stats = stats[instance.group_of(l)];

    LayerPlan plan = plan_fn(inputs, l);

    // CPU jobs, earliest-free slot.
    std::vector<Ticks> cpu_free(std::max(1, options.cpu_slots), t0);
    for (const ExpertLoad& e : plan.cpu_set) {
      auto slot = std::min_element(cpu_free.begin(), cpu_free.end());
      Ticks dur = cpu_cost(e.tokens, params);
      events.push_back({*slot, *slot + dur, Resource::Cpu, EventKind::CpuExpert, l,
                        e.expert, e.tokens});
      *slot += dur;
    }

    // GPU jobs whose weights are already on device.
    struct AvailJob {
      Ticks ready;
      int expert;
      int tokens;
    };
    std::vector<AvailJob> avail;
    for (auto [e, m] : truth) {
      if (is_resident(l, e)) {
        avail.push_back({t0, e, m});
      } else if (auto it = prefetched.find({l, e}); it != prefetched.end()) {
        avail.push_back({std::max(t0, it->second), e, m});
      }
    }
    std::sort(avail.begin(), avail.end(), [](const AvailJob& a, const AvailJob& b) {
      if (a.ready != b.ready) return a.ready < b.ready;
      return a.expert < b.expert;
    });

    Ticks gpu_free = t0;
    size_t ai = 0;
    auto run_avail_until = [&](Ticks ready_bound) {
      while (ai < avail.size() && avail[ai].ready <= ready_bound) {
        Ticks s = std::max(gpu_free, avail[ai].ready);
        events.push_back({s, s + params.t_g, Resource::Gpu, EventKind::GpuExpert, l,
                          avail[ai].expert, avail[ai].tokens});
        gpu_free = s + params.t_g;
        ++ai;
      }
    };

    // On-demand loads pipelined with GPU compute; two alternating on-demand
    // buffer slots, a slot is reusable once its expert's compute finished.
    std::vector<Ticks> compute_end(plan.ondemand_seq.size(), 0);
    for (size_t j = 0; j < plan.ondemand_seq.size(); ++j) {
      const ExpertLoad& e = plan.ondemand_seq[j];
      Ticks slot_free = j >= 2 ? compute_end[j - 2] : 0;
      Ticks start = std::max({io_free, t0, slot_free});
      Ticks end = start + params.t_io;
      io_free = end;
      events.push_back({start, end, Resource::IoChannel, EventKind::Load, l, e.expert,
                        e.tokens});
      run_avail_until(end);
      Ticks cs = std::max(gpu_free, end);
      Ticks ce = cs + params.t_g;
      events.push_back({cs, ce, Resource::Gpu, EventKind::GpuExpert, l, e.expert,
                        e.tokens});
      gpu_free = ce;
      compute_end[j] = ce;
    }
    run_avail_until(std::numeric_limits<Ticks>::max());

    Ticks layer_end = std::max(t0, gpu_free);
    for (Ticks c : cpu_free) layer_end = std::max(layer_end, c);
    result.timeline.layer_end[l] = layer_end;

    // Prefetch dispatch: queued on the channel behind the loads; the batch is
    // resolved (commit or cancel) at the next scheduling point.
    io_free_base = io_free;
    if (!plan.prefetch_seq.empty()) {
      int target = plan.prefetch_from_widened ? l + 2 : l + 1;
      int& used = prefetch_slot_use[target];
      if (used + static_cast<int>(plan.prefetch_seq.size()) > options.prefetch_slots)
        throw std::runtime_error("simulate_pipeline: prefetch buffer overflow for layer " +
                                 std::to_string(target));
      for (size_t j = 0; j < plan.prefetch_seq.size(); ++j) {
        const ExpertLoad& e = plan.prefetch_seq[j];
        PendingPrefetch p;
        p.start = std::max(io_free, t0);
        p.end = p.start + params.t_io;
        p.target_layer = target;
        p.expert = e.expert;
        p.tokens = e.tokens;
        p.critical = j + 1 == plan.prefetch_seq.size();
        p.issue_group = instance.group_of(l);
        io_free = p.end;
        pending.push_back(p);
        ++used;
      }
    }

    result.plans.push_back(std::move(plan));
    prev_layer_end = layer_end;
  }

  std::stable_sort(events.begin(), events.end(),
                   [](const TimelineEvent& a, const TimelineEvent& b) {
                     if (a.resource != b.resource) return a.resource < b.resource;
                     if (a.t_start != b.t_start) return a.t_start < b.t_start;
                     return a.t_end < b.t_end;
                   });
  for (const TimelineEvent& e : events)
    result.timeline.makespan = std::max(result.timeline.makespan, e.t_end);
  return result;
}

SimResult simulate_policy(const PipelineInstance& instance, const SchedulerPolicy& policy,
                          const CostParams& params, const SimOptions& options) {
  if (policy.kind == SchedulerPolicy::Kind::Oracle)
    return enumeration_oracle(instance, params, options).best;
  return simulate_pipeline(
      instance,
      [&](const LayerInputs& in, int) { return plan_layer(in, policy); }, params,
      options);
}

PipelineInstance build_instance(const Trace& trace,
                                const std::vector<std::map<int, int>>& predicted,
                                const std::set<std::pair<int, int>>& resident) {
  PipelineInstance inst;
  inst.resident = resident;
  const int L = trace.spec.num_layers;
  inst.layers.resize(L);
  inst.groups.resize(L);
  for (int l = 0; l < L; ++l) {
    inst.layers[l].truth = aggregate_layer_loads(trace, l);
    if (l < static_cast<int>(predicted.size())) inst.layers[l].predicted = predicted[l];
    inst.groups[l] = trace.spec.group_of(l);
  }
  return inst;
}

SimResult simulate_decisions(const PipelineInstance& instance,
                             const std::vector<LayerDecision>& decisions,
                             const CostParams& params, const SimOptions& options) {
  return simulate_pipeline(
      instance,
      [&](const LayerInputs& in, int l) {
        LayerPlan plan;
        int size = static_cast<int>(in.e_cur.size());
        LayerDecision d = l < static_cast<int>(decisions.size()) ? decisions[l]
                                                                 : LayerDecision{size, 0};
        int split = std::clamp(d.split_index, 0, size);
        plan.split_index = split;
        plan.cpu_set.assign(in.e_cur.begin(), in.e_cur.begin() + split);
        plan.ondemand_seq.assign(in.e_cur.begin() + split, in.e_cur.end());
        int c = std::clamp(d.prefetch_count, 0, static_cast<int>(in.e_next.size()));
        plan.issued_prefetches = c;
        plan.prefetch_seq.assign(in.e_next.end() - c, in.e_next.end());
        std::reverse(plan.prefetch_seq.begin(), plan.prefetch_seq.end());
        return plan;
      },
      params, options);
}

OracleResult enumeration_oracle(const PipelineInstance& instance,
                                const CostParams& params, const SimOptions& options) {
  if (instance.num_layers() != 2)
    throw std::invalid_argument("enumeration_oracle: expects a 2-layer instance");
  for (const LayerLoads& l : instance.layers)
    if (l.truth.size() > 8 || l.predicted.size() > 8)
      throw std::invalid_argument("enumeration_oracle: instance too large (> 8 experts)");

  const int n0 = static_cast<int>(instance.layers[0].truth.size());
  const int np = static_cast<int>(instance.layers[1].predicted.size());
  const int n1 = static_cast<int>(instance.layers[1].truth.size());

  OracleResult best;
  bool have = false;
  for (int i0 = 0; i0 <= n0; ++i0) {
    for (int c0 = 0; c0 <= np; ++c0) {
      for (int i1 = 0; i1 <= n1; ++i1) {
        SimResult r = simulate_decisions(instance, {{i0, c0}, {i1, 0}}, params, options);
        if (!have || r.timeline.makespan < best.makespan) {
          have = true;
          best.makespan = r.timeline.makespan;
          best.decisions = {{i0, c0}, {i1, 0}};
          best.best = std::move(r);
        }
      }
    }
  }
  return best;
}

std::vector<std::string> verify_timeline(const Timeline& timeline,
                                         const PipelineInstance& instance,
                                         const CostParams& params) {
  std::vector<std::string> violations;
  auto add = [&](const std::string& s) { violations.push_back(s); };

  // Serial I/O: channel events must not overlap.
  std::vector<const TimelineEvent*> io;
  for (const TimelineEvent& e : timeline.events)
    if (e.resource == Resource::IoChannel) io.push_back(&e);
  std::sort(io.begin(), io.end(),
            [](auto* a, auto* b) { return a->t_start < b->t_start; });
  for (size_t i = 1; i < io.size(); ++i)
    if (io[i]->t_start < io[i - 1]->t_end)
      add("serial-io: overlapping transfers at t=" + std::to_string(io[i]->t_start));

  // Non-interruptibility: each transfer is one atomic t_io interval.
  for (const TimelineEvent* e : io)
    if (e->t_end - e->t_start != params.t_io)
      add("non-interruptible: transfer of expert " + std::to_string(e->expert) +
          " is not an atomic t_io interval");

  // Conservation: every activated (layer, expert) computed exactly once.
  std::map<std::pair<int, int>, int> computed;
  for (const TimelineEvent& e : timeline.events)
    if (e.kind == EventKind::GpuExpert || e.kind == EventKind::CpuExpert)
      computed[{e.layer, e.expert}]++;
  for (int l = 0; l < instance.num_layers(); ++l)
    for (auto [e, m] : instance.layers[l].truth)
      if (computed[{l, e}] != 1)
        add("conservation: (" + std::to_string(l) + "," + std::to_string(e) +
            ") computed " + std::to_string(computed[{l, e}]) + " times");
  for (auto [key, cnt] : computed)
    if (instance.layers[key.first].truth.count(key.second) == 0)
      add("conservation: non-activated (" + std::to_string(key.first) + "," +
          std::to_string(key.second) + ") computed");

  // Causality: non-resident GPU compute needs a completed transfer first.
  for (const TimelineEvent& e : timeline.events) {
    if (e.kind != EventKind::GpuExpert) continue;
    if (instance.resident.count({e.layer, e.expert})) continue;
    bool ok = false;
    for (const TimelineEvent* t : io)
      if (t->layer == e.layer && t->expert == e.expert && t->t_end <= e.t_start) ok = true;
    if (!ok)
      add("causality: gpu compute of (" + std::to_string(e.layer) + "," +
          std::to_string(e.expert) + ") without completed transfer");
  }

  // Dual on-demand buffer: load j+2 must not start before compute of load j ends.
  for (int l = 0; l < instance.num_layers(); ++l) {
    std::vector<const TimelineEvent*> loads;
    for (const TimelineEvent* t : io)
      if (t->kind == EventKind::Load && t->layer == l) loads.push_back(t);
    for (size_t j = 2; j < loads.size(); ++j) {
      Ticks prev_compute_end = 0;
      for (const TimelineEvent& e : timeline.events)
        if (e.kind == EventKind::GpuExpert && e.layer == l &&
            e.expert == loads[j - 2]->expert)
          prev_compute_end = e.t_end;
      if (loads[j]->t_start < prev_compute_end)
        add("buffer: load of expert " + std::to_string(loads[j]->expert) +
            " overwrites a slot before its compute finished");
    }
  }

  // Per-resource ordering sanity.
  for (const TimelineEvent& e : timeline.events)
    if (e.t_start > e.t_end) add("event with t_start > t_end");

  return violations;
}

Metrics compute_metrics(const Timeline& timeline, int output_tokens) {
  Metrics m;
  m.makespan = timeline.makespan;
  m.decode_latency = timeline.makespan;
  if (timeline.makespan > 0)
    m.throughput_tokens_per_s = output_tokens * 1e6 / static_cast<double>(timeline.makespan);

  const int L = static_cast<int>(timeline.layer_start.size());
  m.per_layer_latency.resize(L, 0);
  m.cpu_gpu_gap.resize(L, 0);
  std::vector<Ticks> cpu_fin(L, -1), gpu_fin(L, -1), attn_end(L, 0);
  Ticks io_busy = 0, gpu_busy = 0;
  for (const TimelineEvent& e : timeline.events) {
    if (e.resource == Resource::IoChannel) io_busy += e.t_end - e.t_start;
    if (e.resource == Resource::Gpu) gpu_busy += e.t_end - e.t_start;
    if (e.kind == EventKind::Attention) attn_end[e.layer] = e.t_end;
    if (e.kind == EventKind::CpuExpert) cpu_fin[e.layer] = std::max(cpu_fin[e.layer], e.t_end);
    if (e.kind == EventKind::GpuExpert) gpu_fin[e.layer] = std::max(gpu_fin[e.layer], e.t_end);
  }
  for (int l = 0; l < L; ++l) {
    m.per_layer_latency[l] = timeline.layer_end[l] - timeline.layer_start[l];
    Ticks fc = cpu_fin[l] >= 0 ? cpu_fin[l] : attn_end[l];
    Ticks fg = gpu_fin[l] >= 0 ? gpu_fin[l] : attn_end[l];
    m.cpu_gpu_gap[l] = std::abs(fc - fg);
  }
  if (timeline.makespan > 0) {
    m.io_busy_fraction = static_cast<double>(io_busy) / timeline.makespan;
    m.gpu_idle_fraction = 1.0 - static_cast<double>(gpu_busy) / timeline.makespan;
  }
  return m;
}

std::string export_timeline(const Timeline& timeline) {
  std::ostringstream out;
  out << "# tick_unit=us makespan=" << timeline.makespan << '\n';
  for (const TimelineEvent& e : timeline.events)
    out << e.t_start << ' ' << e.t_end << ' ' << to_string(e.resource) << ' '
        << to_string(e.kind) << ' ' << e.layer << ' ' << e.expert << ' ' << e.tokens
        << '\n';
  return out.str();
}

std::string export_metrics_json(const Metrics& m) {
  nlohmann::json j = {{"makespan", m.makespan},
                      {"decode_latency", m.decode_latency},
                      {"throughput_tokens_per_s", m.throughput_tokens_per_s},
                      {"io_busy_fraction", m.io_busy_fraction},
                      {"gpu_idle_fraction", m.gpu_idle_fraction},
                      {"per_layer_latency", m.per_layer_latency},
                      {"cpu_gpu_gap", m.cpu_gpu_gap}};
  return j.dump(2);
}

}  // namespace prescope
