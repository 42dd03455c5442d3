#include "prescope/workload.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace prescope {

const char* to_string(LayerGroup g) {
  switch (g) {
    case LayerGroup::Input: return "input";
    case LayerGroup::Middle: return "middle";
    case LayerGroup::Output: return "output";
  }
  return "?";
}

void ModelSpec::validate() const {
  if (num_layers < 1 || experts_per_layer < 1 || top_k < 1 || hidden_dim < 1)
    throw std::invalid_argument("ModelSpec: all counts must be >= 1");
  if (top_k > experts_per_layer)
    throw std::invalid_argument("ModelSpec: top_k exceeds experts_per_layer");
  if (!(0 <= group_begin_middle && group_begin_middle < group_begin_output &&
        group_begin_output <= num_layers))
    throw std::invalid_argument("ModelSpec: group bounds must be strictly increasing in [0, num_layers]");
}

LayerGroup ModelSpec::group_of(int layer) const {
  if (layer < 0 || layer >= num_layers)
    throw std::out_of_range("ModelSpec::group_of: layer out of range");
  if (layer < group_begin_middle) return LayerGroup::Input;
  if (layer < group_begin_output) return LayerGroup::Middle;
  return LayerGroup::Output;
}

namespace {
ModelSpec make_spec(int layers, int experts, int k, std::uint64_t bytes, int hidden) {
  ModelSpec s;
  s.num_layers = layers;
  s.experts_per_layer = experts;
  s.top_k = k;
  s.expert_bytes = bytes;
  s.hidden_dim = hidden;
  // First 4 layers input, last 4 output; shrink for short stacks.
  int edge = std::min(4, std::max(1, layers / 3));
  s.group_begin_middle = edge;
  s.group_begin_output = layers - edge;
  s.validate();
  return s;
}
constexpr std::uint64_t kMiB = 1ull << 20;
}  // namespace

ModelSpec mixtral_spec() { return make_spec(32, 8, 2, 336 * kMiB, 4096); }
ModelSpec qwen3_spec() { return make_spec(48, 128, 8, 9 * kMiB, 2048); }
ModelSpec deepseek_spec() { return make_spec(26, 64, 6, kMiB * 33 / 2, 2048); }
ModelSpec moonlight_spec() { return make_spec(26, 64, 6, kMiB * 33 / 2, 2048); }

ModelSpec spec_preset(const std::string& name) {
  if (name == "mixtral") return mixtral_spec();
  if (name == "qwen3") return qwen3_spec();
  if (name == "deepseek") return deepseek_spec();
  if (name == "moonlight") return moonlight_spec();
  throw std::invalid_argument("unknown model preset: " + name);
}

ModelSpec desk_scale(const ModelSpec& full, int num_layers, int experts_per_layer,
                     int hidden_dim) {
  ModelSpec s = make_spec(num_layers, experts_per_layer,
                          std::min(full.top_k, experts_per_layer),
                          full.expert_bytes, hidden_dim);
  return s;
}

const TraceStep& Trace::step(int token, int layer) const {
  return steps.at(static_cast<size_t>(token) * spec.num_layers + layer);
}

const GroupGenParams& TraceGenConfig::for_group(LayerGroup g) const {
  switch (g) {
    case LayerGroup::Input: return input;
    case LayerGroup::Output: return output;
    default: return middle;
  }
}

void TraceGenConfig::validate() const {
  for (const GroupGenParams* p : {&input, &middle, &output}) {
    if (p->rho < 0.0 || p->rho > 1.0)
      throw std::invalid_argument("TraceGenConfig: rho must be in [0,1]");
    if (p->kappa < 0.0 || p->kappa > 1.0)
      throw std::invalid_argument("TraceGenConfig: kappa must be in [0,1]");
    if (p->zipf_s < 0.0)
      throw std::invalid_argument("TraceGenConfig: zipf_s must be >= 0");
  }
  if (noise_scale < 0.0)
    throw std::invalid_argument("TraceGenConfig: noise_scale must be >= 0");
}

int routing_map(const ModelSpec& spec, int expert) {
  return (expert + 1) % spec.experts_per_layer;
}

std::vector<int> topk_indices(const std::vector<double>& weights, int k) {
  std::vector<int> idx(weights.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (weights[a] != weights[b]) return weights[a] > weights[b];
    return a < b;
  });
  idx.resize(std::min<size_t>(k, idx.size()));
  return idx;
}

namespace {

void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

Trace generate_trace(const TraceGenConfig& config, const ModelSpec& spec,
                     int batch_size, std::uint64_t seed) {
  config.validate();
  spec.validate();
  if (batch_size < 1) throw std::invalid_argument("generate_trace: batch_size must be >= 1");
  if (spec.hidden_dim < 4) throw std::invalid_argument("generate_trace: hidden_dim must be >= 4");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const int L = spec.num_layers;
  const int E = spec.experts_per_layer;
  const int D = spec.hidden_dim;

  // Fixed per-layer gating matrices.
  std::vector<std::vector<double>> gate(L);
  const double wscale = 1.0 / std::sqrt(static_cast<double>(D));
  for (int l = 0; l < L; ++l) {
    gate[l].resize(static_cast<size_t>(E) * D);
    for (double& w : gate[l]) w = gauss(rng) * wscale;
  }

  Trace trace;
  trace.spec = spec;
  trace.batch_size = batch_size;
  trace.seed = seed;
  trace.steps.reserve(static_cast<size_t>(batch_size) * L);

  std::vector<double> a(D), noise(D), logits(E);
  for (int tok = 0; tok < batch_size; ++tok) {
    for (double& x : a) x = gauss(rng);
    normalize(a);
    int prev_top1 = -1;
    for (int l = 0; l < L; ++l) {
      const GroupGenParams& gp = config.for_group(spec.group_of(l));

      for (int e = 0; e < E; ++e) {
        double s = 0.0;
        const double* row = gate[l].data() + static_cast<size_t>(e) * D;
        for (int d = 0; d < D; ++d) s += row[d] * a[d];
        logits[e] = s * std::sqrt(static_cast<double>(D))  // unit-variance logits
                    - gp.zipf_s * std::log(e + 1.0);
      }
      bool follow = prev_top1 >= 0 && unif(rng) < gp.kappa;
      if (follow) {
        int target = routing_map(spec, prev_top1);
        double mx = *std::max_element(logits.begin(), logits.end());
        logits[target] = mx + 1.0;
      }

      // Softmax.
      double mx = *std::max_element(logits.begin(), logits.end());
      std::vector<double> w(E);
      double z = 0.0;
      for (int e = 0; e < E; ++e) z += (w[e] = std::exp(logits[e] - mx));
      for (int e = 0; e < E; ++e) w[e] /= z;

      TraceStep step;
      step.layer = l;
      step.hidden = a;
      step.gate_weights = w;
      step.active_experts = topk_indices(w, spec.top_k);
      for (int e : step.active_experts) step.tokens_per_expert[e] = 1;
      prev_top1 = step.active_experts.front();
      trace.steps.push_back(std::move(step));

      if (l + 1 < L) {
        // a_{l+1} = rho * a_hat + noise_scale * sqrt(1 - rho^2) * n_perp, renormalized.
        for (double& x : noise) x = gauss(rng);
        double proj = dot(noise, a);
        for (int d = 0; d < D; ++d) noise[d] -= proj * a[d];
        normalize(noise);
        double nw = config.noise_scale * std::sqrt(std::max(0.0, 1.0 - gp.rho * gp.rho));
        for (int d = 0; d < D; ++d) a[d] = gp.rho * a[d] + nw * noise[d];
        normalize(a);
      }
    }
  }
  return trace;
}

std::map<LayerGroup, GroupStats> measure_group_stats(const Trace& trace) {
  if (trace.steps.empty()) throw std::invalid_argument("measure_group_stats: empty trace");
  const ModelSpec& spec = trace.spec;
  struct Acc {
    double cos_sum = 0;
    long cos_n = 0;
    long follow = 0;
    long follow_n = 0;
  };
  std::map<LayerGroup, Acc> acc;
  // Activation counts per (layer, expert).
  std::vector<std::vector<long>> counts(spec.num_layers,
                                        std::vector<long>(spec.experts_per_layer, 0));

  for (int tok = 0; tok < trace.batch_size; ++tok) {
    for (int l = 0; l < spec.num_layers; ++l) {
      const TraceStep& s = trace.step(tok, l);
      for (auto [e, m] : s.tokens_per_expert) counts[l][e] += m;
      if (l + 1 < spec.num_layers) {
        const TraceStep& nxt = trace.step(tok, l + 1);
        Acc& a = acc[spec.group_of(l)];
        double d = dot(s.hidden, nxt.hidden);
        double na = std::sqrt(dot(s.hidden, s.hidden));
        double nb = std::sqrt(dot(nxt.hidden, nxt.hidden));
        if (na > 0 && nb > 0) {
          a.cos_sum += d / (na * nb);
          a.cos_n++;
        }
        a.follow_n++;
        if (nxt.active_experts.front() == routing_map(spec, s.active_experts.front()))
          a.follow++;
      }
    }
  }

  std::map<LayerGroup, GroupStats> out;
  std::map<LayerGroup, std::pair<double, long>> hot;  // sum of per-layer top shares
  for (int l = 0; l < spec.num_layers; ++l) {
    long total = std::accumulate(counts[l].begin(), counts[l].end(), 0L);
    if (total == 0) continue;
    long top = *std::max_element(counts[l].begin(), counts[l].end());
    auto& h = hot[spec.group_of(l)];
    h.first += static_cast<double>(top) / total;
    h.second++;
  }
  for (LayerGroup g : {LayerGroup::Input, LayerGroup::Middle, LayerGroup::Output}) {
    GroupStats gs;
    auto it = acc.find(g);
    if (it != acc.end() && it->second.cos_n > 0) {
      gs.cosine_similarity = it->second.cos_sum / it->second.cos_n;
      gs.routing_correlation =
          static_cast<double>(it->second.follow) / it->second.follow_n;
      gs.pair_count = it->second.cos_n;
    }
    auto ht = hot.find(g);
    if (ht != hot.end() && ht->second.second > 0)
      gs.hot_expert_share = ht->second.first / ht->second.second;
    out[g] = gs;
  }
  return out;
}

std::map<int, int> aggregate_layer_loads(const Trace& trace, int layer) {
  std::map<int, int> loads;
  for (int tok = 0; tok < trace.batch_size; ++tok)
    for (auto [e, m] : trace.step(tok, layer).tokens_per_expert) loads[e] += m;
  return loads;
}

std::uint64_t fnv1a64(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

constexpr int kTraceFormatVersion = 1;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string serialize_step(const TraceStep& s) {
  std::string line = std::to_string(s.layer);
  line += '\t';
  for (size_t i = 0; i < s.hidden.size(); ++i) {
    if (i) line += ' ';
    line += fmt_double(s.hidden[i]);
  }
  line += '\t';
  for (size_t i = 0; i < s.gate_weights.size(); ++i) {
    if (i) line += ' ';
    line += fmt_double(s.gate_weights[i]);
  }
  line += '\t';
  for (size_t i = 0; i < s.active_experts.size(); ++i) {
    if (i) line += ' ';
    line += std::to_string(s.active_experts[i]);
  }
  line += '\t';
  bool first = true;
  for (auto [e, m] : s.tokens_per_expert) {
    if (!first) line += ' ';
    first = false;
    line += std::to_string(e);
    line += ':';
    line += std::to_string(m);
  }
  return line;
}

TraceStep parse_step(const std::string& line) {
  TraceStep s;
  std::vector<std::string> fields;
  size_t pos = 0;
  while (true) {
    size_t tab = line.find('\t', pos);
    fields.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
    if (tab == std::string::npos) break;
    pos = tab + 1;
  }
  if (fields.size() != 5) throw TraceFormatError("trace body line: expected 5 fields");
  s.layer = std::stoi(fields[0]);
  std::istringstream hs(fields[1]);
  for (double v; hs >> v;) s.hidden.push_back(v);
  std::istringstream gs(fields[2]);
  for (double v; gs >> v;) s.gate_weights.push_back(v);
  std::istringstream as(fields[3]);
  for (int v; as >> v;) s.active_experts.push_back(v);
  std::istringstream ts(fields[4]);
  std::string pair;
  while (ts >> pair) {
    size_t colon = pair.find(':');
    if (colon == std::string::npos) throw TraceFormatError("trace body line: bad token map");
    s.tokens_per_expert[std::stoi(pair.substr(0, colon))] = std::stoi(pair.substr(colon + 1));
  }
  return s;
}

nlohmann::json spec_to_json(const ModelSpec& s) {
  return {{"num_layers", s.num_layers},
          {"experts_per_layer", s.experts_per_layer},
          {"top_k", s.top_k},
          {"expert_bytes", s.expert_bytes},
          {"hidden_dim", s.hidden_dim},
          {"group_begin_middle", s.group_begin_middle},
          {"group_begin_output", s.group_begin_output}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.num_layers = j.at("num_layers").get<int>();
  s.experts_per_layer = j.at("experts_per_layer").get<int>();
  s.top_k = j.at("top_k").get<int>();
  s.expert_bytes = j.at("expert_bytes").get<std::uint64_t>();
  s.hidden_dim = j.at("hidden_dim").get<int>();
  s.group_begin_middle = j.at("group_begin_middle").get<int>();
  s.group_begin_output = j.at("group_begin_output").get<int>();
  s.validate();
  return s;
}

}  // namespace

void write_trace(const Trace& trace, const std::string& path) {
  std::string body;
  for (const TraceStep& s : trace.steps) {
    body += serialize_step(s);
    body += '\n';
  }
  nlohmann::json header = {{"format_version", kTraceFormatVersion},
                           {"spec", spec_to_json(trace.spec)},
                           {"batch_size", trace.batch_size},
                           {"seed", trace.seed},
                           {"checksum", fnv1a64(body)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_trace: cannot open " + path);
  out << header.dump() << '\n' << body;
  if (!out) throw std::runtime_error("write_trace: write failed on " + path);
}

Trace read_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_trace: cannot open " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) throw TraceFormatError("read_trace: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw TraceFormatError(std::string("read_trace: bad header: ") + e.what());
  }
  if (header.at("format_version").get<int>() != kTraceFormatVersion)
    throw TraceFormatError("read_trace: unsupported format version");

  Trace trace;
  trace.spec = spec_from_json(header.at("spec"));
  trace.batch_size = header.at("batch_size").get<int>();
  trace.seed = header.at("seed").get<std::uint64_t>();

  std::string body, line;
  while (std::getline(in, line)) {
    body += line;
    body += '\n';
    trace.steps.push_back(parse_step(line));
  }
  if (fnv1a64(body) != header.at("checksum").get<std::uint64_t>())
    throw TraceChecksumError("read_trace: checksum mismatch in " + path);
  return trace;
}

}  // namespace prescope
