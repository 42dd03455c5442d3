#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace prescope {

enum class LayerGroup { Input = 0, Middle = 1, Output = 2 };

const char* to_string(LayerGroup g);

/// Static shape of an MoE model. Layers are split into input/middle/output
/// groups by [0, begin_middle) / [begin_middle, begin_output) / [begin_output, num_layers).
struct ModelSpec {
  int num_layers = 0;
  int experts_per_layer = 0;
  int top_k = 0;
  std::uint64_t expert_bytes = 0;
  int hidden_dim = 0;
  int group_begin_middle = 0;
  int group_begin_output = 0;

  void validate() const;  // throws std::invalid_argument
  LayerGroup group_of(int layer) const;

  bool operator==(const ModelSpec&) const = default;
};

// Presets matching the published model shapes (layers, routed experts,
// activated experts, expert memory).
ModelSpec mixtral_spec();
ModelSpec qwen3_spec();
ModelSpec deepseek_spec();
ModelSpec moonlight_spec();
ModelSpec spec_preset(const std::string& name);  // throws on unknown name

// Shrinks a preset to a CPU-friendly size while keeping the expert count /
// top-k ratio recognizable. Group bounds are rescaled.
ModelSpec desk_scale(const ModelSpec& full, int num_layers, int experts_per_layer,
                     int hidden_dim);

/// One (token, layer) routing record.
struct TraceStep {
  int layer = 0;
  std::vector<double> hidden;           // gating input a at this layer
  std::vector<double> gate_weights;     // softmax output, sums to 1
  std::vector<int> active_experts;      // top_k indices, weight-desc, tie lower index
  std::map<int, int> tokens_per_expert; // expert -> pending token count

  bool operator==(const TraceStep&) const = default;
};

struct Trace {
  ModelSpec spec;
  int batch_size = 0;
  std::uint64_t seed = 0;
  std::vector<TraceStep> steps;  // ordered by (token, layer)

  bool operator==(const Trace&) const = default;

  const TraceStep& step(int token, int layer) const;
};

/// Per-group knobs of the synthetic routing generator.
struct GroupGenParams {
  double rho = 0.9;     // adjacent-layer hidden-state cosine target, [0,1]
  double kappa = 0.0;   // probability top-1 follows the fixed expert map, [0,1]
  double zipf_s = 0.0;  // hot-expert skew exponent, >= 0
};

struct TraceGenConfig {
  GroupGenParams input;
  GroupGenParams middle;
  GroupGenParams output;
  double noise_scale = 1.0;

  const GroupGenParams& for_group(LayerGroup g) const;
  void validate() const;
};

/// Fixed deterministic expert-to-expert map used by the kappa correlation knob.
int routing_map(const ModelSpec& spec, int expert);

Trace generate_trace(const TraceGenConfig& config, const ModelSpec& spec,
                     int batch_size, std::uint64_t seed);

struct GroupStats {
  std::optional<double> cosine_similarity;  // absent when the group has no adjacent pair
  std::optional<double> routing_correlation;
  double hot_expert_share = 0.0;
  long pair_count = 0;
};

std::map<LayerGroup, GroupStats> measure_group_stats(const Trace& trace);

/// Tokens per expert for one layer, summed over the batch.
std::map<int, int> aggregate_layer_loads(const Trace& trace, int layer);

/// Indices of the k largest weights, weight-desc, ties broken by lower index.
std::vector<int> topk_indices(const std::vector<double>& weights, int k);

struct TraceFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TraceChecksumError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_trace(const Trace& trace, const std::string& path);
Trace read_trace(const std::string& path);

std::uint64_t fnv1a64(const std::string& data);

}  // namespace prescope
