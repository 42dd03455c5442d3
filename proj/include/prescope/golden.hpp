#pragma once

#include <string>
#include <vector>

#include "prescope/simulator.hpp"

namespace prescope {

/// A registered replay scenario: a small fixed instance, a policy, and the
/// hand-derived timeline the simulator must reproduce tick-exactly.
struct GoldenScenario {
  std::string id;
  std::string description;
  PipelineInstance instance;
  CostParams params;
  SimOptions options;
  SchedulerPolicy policy;
  Timeline expected;
};

std::vector<std::string> golden_ids();

/// Throws std::invalid_argument on an unknown id.
const GoldenScenario& golden_scenario(const std::string& id);

struct GoldenDiff {
  std::string id;
  bool pass = false;
  Ticks expected_makespan = 0;
  Ticks actual_makespan = 0;
  std::vector<std::string> mismatches;
};

GoldenDiff replay_golden(const std::string& id);

std::string format_diff(const GoldenDiff& diff);

}  // namespace prescope
