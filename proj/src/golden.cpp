#include "prescope/golden.hpp"

#include <map>
#include <sstream>
#include <stdexcept>

namespace prescope {

namespace {

// All scenarios share one calibration point so the cases stay comparable:
// t_io = 14, t_g = 2, t_attn = 3, cpu(m) = 3m + 2.
CostParams golden_params() {
  CostParams p;
  p.t_io = 14;
  p.t_g = 2;
  p.t_attn = 3;
  p.beta = 3.0;
  p.startup = 2;
  p.alpha = 0;
  return p;
}

PipelineInstance two_layer(const std::map<int, int>& truth0,
                           const std::map<int, int>& truth1,
                           const std::map<int, int>& predicted1) {
  PipelineInstance inst;
  inst.layers.resize(2);
  inst.layers[0].truth = truth0;
  inst.layers[1].truth = truth1;
  inst.layers[1].predicted = predicted1;
  return inst;
}

TimelineEvent ev(Ticks s, Ticks e, Resource r, EventKind k, int layer, int expert,
                 int tokens) {
  return {s, e, r, k, layer, expert, tokens};
}

Timeline timeline(std::vector<TimelineEvent> events, std::vector<Ticks> layer_start,
                  std::vector<Ticks> layer_end) {
  Timeline t;
  t.events = std::move(events);
  t.layer_start = std::move(layer_start);
  t.layer_end = std::move(layer_end);
  for (const TimelineEvent& e : t.events) t.makespan = std::max(t.makespan, e.t_end);
  return t;
}

constexpr auto Gpu = Resource::Gpu;
constexpr auto Cpu = Resource::Cpu;
constexpr auto Io = Resource::IoChannel;
constexpr auto Attn = EventKind::Attention;
constexpr auto GpuX = EventKind::GpuExpert;
constexpr auto CpuX = EventKind::CpuExpert;
constexpr auto Load = EventKind::Load;
constexpr auto Pref = EventKind::Prefetch;

// Shared instance for the four prefetching variants: layer 0 activates
// experts {0:4, 1:5, 2:9} tokens, layer 1 activates {3:6, 4:8}.
std::vector<GoldenScenario> build_scenarios() {
  std::vector<GoldenScenario> all;
  CostParams p = golden_params();

  std::map<int, int> l0 = {{0, 4}, {1, 5}, {2, 9}};
  std::map<int, int> l1 = {{3, 6}, {4, 8}};

  {
    // Everything loaded on demand: five serialized transfers, makespan 80.
    GoldenScenario s;
    s.id = "prefetch-case1-ondemand";
    s.description = "on-demand only; every expert waits for its own transfer";
    s.instance = two_layer(l0, l1, l1);
    s.params = p;
    s.policy = SchedulerPolicy::parse("ondemand");
    s.expected = timeline(
        {
            ev(0, 3, Gpu, Attn, 0, -1, 0),
            ev(17, 19, Gpu, GpuX, 0, 0, 4),
            ev(31, 33, Gpu, GpuX, 0, 1, 5),
            ev(45, 47, Gpu, GpuX, 0, 2, 9),
            ev(47, 50, Gpu, Attn, 1, -1, 0),
            ev(64, 66, Gpu, GpuX, 1, 3, 6),
            ev(78, 80, Gpu, GpuX, 1, 4, 8),
            ev(3, 17, Io, Load, 0, 0, 4),
            ev(17, 31, Io, Load, 0, 1, 5),
            ev(31, 45, Io, Load, 0, 2, 9),
            ev(50, 64, Io, Load, 1, 3, 6),
            ev(64, 78, Io, Load, 1, 4, 8),
        },
        {0, 47}, {47, 80});
    all.push_back(std::move(s));
  }

  {
    // Mispredicted prefetch: the wasted transfer of expert 5 blocks the
    // channel and pushes layer 1's on-demand load from 36 to 45.
    GoldenScenario s;
    s.id = "prefetch-case2-mispredicted";
    s.description = "one prefetch of a never-activated expert wastes bandwidth";
    s.instance = two_layer(l0, l1, {{5, 8}});
    s.params = p;
    s.policy = SchedulerPolicy::parse("fixed:1");
    s.expected = timeline(
        {
            ev(0, 3, Gpu, Attn, 0, -1, 0),
            ev(17, 19, Gpu, GpuX, 0, 1, 5),
            ev(31, 33, Gpu, GpuX, 0, 2, 9),
            ev(33, 36, Gpu, Attn, 1, -1, 0),
            ev(59, 61, Gpu, GpuX, 1, 4, 8),
            ev(3, 17, Cpu, CpuX, 0, 0, 4),
            ev(36, 56, Cpu, CpuX, 1, 3, 6),
            ev(3, 17, Io, Load, 0, 1, 5),
            ev(17, 31, Io, Load, 0, 2, 9),
            ev(31, 45, Io, Pref, 1, 5, 8),
            ev(45, 59, Io, Load, 1, 4, 8),
        },
        {0, 33}, {33, 61});
    all.push_back(std::move(s));
  }

  {
    // Layer-by-layer: two on-demand loads in layer 0, so the accurate
    // prefetch of expert 4 only starts at 31 and lands at 45.
    GoldenScenario s;
    s.id = "prefetch-case3-layerwise";
    s.description = "greedy per-layer split with accurate prediction";
    s.instance = two_layer(l0, l1, l1);
    s.params = p;
    s.policy = SchedulerPolicy::parse("greedy");
    s.expected = timeline(
        {
            ev(0, 3, Gpu, Attn, 0, -1, 0),
            ev(17, 19, Gpu, GpuX, 0, 1, 5),
            ev(31, 33, Gpu, GpuX, 0, 2, 9),
            ev(33, 36, Gpu, Attn, 1, -1, 0),
            ev(45, 47, Gpu, GpuX, 1, 4, 8),
            ev(3, 17, Cpu, CpuX, 0, 0, 4),
            ev(36, 56, Cpu, CpuX, 1, 3, 6),
            ev(3, 17, Io, Load, 0, 1, 5),
            ev(17, 31, Io, Load, 0, 2, 9),
            ev(31, 45, Io, Pref, 1, 4, 8),
        },
        {0, 33}, {33, 56});
    all.push_back(std::move(s));
  }

  {
    // Cross-layer: one extra CPU expert in layer 0 frees an I/O slot, the
    // prefetch of expert 4 starts at 17 instead of 31. Layer-0 latency grows
    // (34 vs 33) but the total drops to 53.
    GoldenScenario s;
    s.id = "prefetch-case4-crosslayer";
    s.description = "cross-layer split trades layer-0 latency for total latency";
    s.instance = two_layer(l0, l1, l1);
    s.params = p;
    s.policy = SchedulerPolicy::parse("presched");
    s.expected = timeline(
        {
            ev(0, 3, Gpu, Attn, 0, -1, 0),
            ev(17, 19, Gpu, GpuX, 0, 2, 9),
            ev(34, 37, Gpu, Attn, 1, -1, 0),
            ev(37, 39, Gpu, GpuX, 1, 4, 8),
            ev(51, 53, Gpu, GpuX, 1, 3, 6),
            ev(3, 17, Cpu, CpuX, 0, 0, 4),
            ev(17, 34, Cpu, CpuX, 0, 1, 5),
            ev(3, 17, Io, Load, 0, 2, 9),
            ev(17, 31, Io, Pref, 1, 4, 8),
            ev(37, 51, Io, Load, 1, 3, 6),
        },
        {0, 34}, {34, 53});
    all.push_back(std::move(s));
  }

  {
    // GPU-bound previous layer: its on-demand load holds the channel until
    // 17, the prefetch runs [17,31) and overhangs attention by 9 ticks, so
    // layer 1's on-demand load starts at 31 instead of 22.
    GoldenScenario s;
    s.id = "greedy-case1-gpu-bound";
    s.description = "on-demand traffic preempts the prefetch window";
    s.instance = two_layer({{0, 1}, {1, 1}, {2, 1}, {3, 1}}, {{4, 10}, {5, 4}},
                           {{5, 4}});
    s.params = p;
    s.policy = SchedulerPolicy::parse("greedy");
    s.expected = timeline(
        {
            ev(0, 3, Gpu, Attn, 0, -1, 0),
            ev(17, 19, Gpu, GpuX, 0, 3, 1),
            ev(19, 22, Gpu, Attn, 1, -1, 0),
            ev(31, 33, Gpu, GpuX, 1, 5, 4),
            ev(45, 47, Gpu, GpuX, 1, 4, 10),
            ev(3, 8, Cpu, CpuX, 0, 0, 1),
            ev(8, 13, Cpu, CpuX, 0, 1, 1),
            ev(13, 18, Cpu, CpuX, 0, 2, 1),
            ev(3, 17, Io, Load, 0, 3, 1),
            ev(17, 31, Io, Pref, 1, 5, 4),
            ev(31, 45, Io, Load, 1, 4, 10),
        },
        {0, 19}, {19, 47});
    all.push_back(std::move(s));
  }

  {
    // CPU-bound previous layer: greedy fills the pipe with both predicted
    // experts, including the one-token expert 4 that is cheaper on the CPU;
    // its transfer lands at 59 and stretches the makespan to 61.
    GoldenScenario s;
    s.id = "greedy-case2-cpu-bound";
    s.description = "greedy over-prefetches an expert that belongs on the CPU";
    s.instance = two_layer({{0, 14}, {1, 15}, {2, 16}}, {{4, 1}, {5, 20}},
                           {{4, 1}, {5, 20}});
    s.params = p;
    s.policy = SchedulerPolicy::parse("greedy");
    s.expected = timeline(
        {
            ev(0, 3, Gpu, Attn, 0, -1, 0),
            ev(17, 19, Gpu, GpuX, 0, 1, 15),
            ev(31, 33, Gpu, GpuX, 0, 2, 16),
            ev(47, 50, Gpu, Attn, 1, -1, 0),
            ev(50, 52, Gpu, GpuX, 1, 5, 20),
            ev(59, 61, Gpu, GpuX, 1, 4, 1),
            ev(3, 47, Cpu, CpuX, 0, 0, 14),
            ev(3, 17, Io, Load, 0, 1, 15),
            ev(17, 31, Io, Load, 0, 2, 16),
            ev(31, 45, Io, Pref, 1, 5, 20),
            ev(45, 59, Io, Pref, 1, 4, 1),
        },
        {0, 47}, {47, 61});
    all.push_back(std::move(s));
  }

  return all;
}

const std::vector<GoldenScenario>& scenarios() {
  static const std::vector<GoldenScenario> all = build_scenarios();
  return all;
}

std::string describe(const TimelineEvent& e) {
  std::ostringstream out;
  out << to_string(e.resource) << ' ' << to_string(e.kind) << " l" << e.layer << " e"
      << e.expert << " [" << e.t_start << ',' << e.t_end << ") m=" << e.tokens;
  return out.str();
}

}  // namespace

std::vector<std::string> golden_ids() {
  std::vector<std::string> ids;
  for (const GoldenScenario& s : scenarios()) ids.push_back(s.id);
  return ids;
}

const GoldenScenario& golden_scenario(const std::string& id) {
  for (const GoldenScenario& s : scenarios())
    if (s.id == id) return s;
  throw std::invalid_argument("unknown golden scenario: " + id);
}

GoldenDiff replay_golden(const std::string& id) {
  const GoldenScenario& s = golden_scenario(id);
  SimResult result = simulate_policy(s.instance, s.policy, s.params, s.options);
  const Timeline& got = result.timeline;

  GoldenDiff diff;
  diff.id = id;
  diff.expected_makespan = s.expected.makespan;
  diff.actual_makespan = got.makespan;

  size_t n = std::max(s.expected.events.size(), got.events.size());
  for (size_t i = 0; i < n; ++i) {
    if (i >= s.expected.events.size()) {
      diff.mismatches.push_back("extra event: " + describe(got.events[i]));
    } else if (i >= got.events.size()) {
      diff.mismatches.push_back("missing event: " + describe(s.expected.events[i]));
    } else if (!(s.expected.events[i] == got.events[i])) {
      diff.mismatches.push_back("event " + std::to_string(i) + ": expected " +
                                describe(s.expected.events[i]) + ", got " +
                                describe(got.events[i]));
    }
  }
  if (s.expected.layer_start != got.layer_start || s.expected.layer_end != got.layer_end)
    diff.mismatches.push_back("layer boundaries differ");
  if (s.expected.makespan != got.makespan)
    diff.mismatches.push_back("makespan: expected " +
                              std::to_string(s.expected.makespan) + ", got " +
                              std::to_string(got.makespan));
  diff.pass = diff.mismatches.empty();
  return diff;
}

std::string format_diff(const GoldenDiff& diff) {
  std::ostringstream out;
  out << diff.id << ": " << (diff.pass ? "PASS" : "FAIL") << " (makespan "
      << diff.actual_makespan << '/' << diff.expected_makespan << ")";
  for (const std::string& m : diff.mismatches) out << "\n  " << m;
  return out.str();
}

}  // namespace prescope
