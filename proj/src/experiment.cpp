#include "prescope/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "json.hpp"
#include "prescope/cost_model.hpp"

namespace fs = std::filesystem;

namespace prescope {

PredictorChoice PredictorChoice::parse(const std::string& text) {
  PredictorChoice c;
  if (text == "perfect") {
    c.kind = Kind::Perfect;
  } else if (text == "stats") {
    c.kind = Kind::Stats;
  } else if (text == "gate") {
    c.kind = Kind::Gate;
  } else if (text.rfind("oracle_noise:", 0) == 0) {
    c.kind = Kind::OracleNoise;
    c.hit_rate = std::stod(text.substr(13));
    if (c.hit_rate < 0.0 || c.hit_rate > 1.0)
      throw std::invalid_argument("oracle_noise:<rate> needs rate in [0,1]");
  } else if (text.rfind("llapor:", 0) == 0) {
    c.kind = Kind::LLaPorCkpt;
    c.checkpoint = text.substr(7);
    if (c.checkpoint.empty())
      throw std::invalid_argument("llapor:<path> needs a checkpoint path");
  } else {
    throw std::invalid_argument("unknown predictor: " + text);
  }
  return c;
}

std::string PredictorChoice::name() const {
  switch (kind) {
    case Kind::Perfect: return "perfect";
    case Kind::Stats: return "stats";
    case Kind::Gate: return "gate";
    case Kind::OracleNoise: {
      std::ostringstream out;
      out << "oracle_noise:" << hit_rate;
      return out.str();
    }
    case Kind::LLaPorCkpt: return "llapor:" + checkpoint;
  }
  return "?";
}

PredictFn make_predict_fn(const PredictorChoice& choice, const LLaPor* model,
                          const HotExpertTable* table, int k, std::uint64_t seed) {
  switch (choice.kind) {
    case PredictorChoice::Kind::Perfect:
      return [](const Trace& t, int token, int layer) {
        return t.step(token, layer).active_experts;
      };
    case PredictorChoice::Kind::Stats: {
      if (!table) throw std::invalid_argument("stats predictor needs a hot-expert table");
      HotExpertTable tbl = *table;
      return [tbl, k](const Trace& t, int, int layer) {
        return stats_predict(tbl, layer, k, t.spec.experts_per_layer);
      };
    }
    case PredictorChoice::Kind::Gate:
      return [k](const Trace& t, int token, int layer) {
        if (layer < 1) throw std::invalid_argument("gate predictor needs layer >= 1");
        return gate_reuse_predict(t.step(token, layer - 1).gate_weights, k);
      };
    case PredictorChoice::Kind::OracleNoise: {
      auto rng = std::make_shared<std::mt19937_64>(seed);
      double rate = choice.hit_rate;
      return [rng, rate, k](const Trace& t, int token, int layer) {
        return oracle_noise_predict(t.step(token, layer).active_experts, rate, *rng, k,
                                    t.spec.experts_per_layer);
      };
    }
    case PredictorChoice::Kind::LLaPorCkpt: {
      if (!model) throw std::invalid_argument("llapor predictor needs a loaded model");
      auto m = std::make_shared<LLaPor>(*model);
      return [m, k](const Trace& t, int token, int layer) {
        if (layer < 1) throw std::invalid_argument("llapor predictor needs layer >= 1");
        const LLaPorNet& net = m->nets.at(layer);
        if (net.blocks.empty())
          throw std::runtime_error("llapor net for layer " + std::to_string(layer) +
                                   " is untrained");
        const TraceStep& prev = t.step(token, layer - 1);
        PredictorFeatures feat;
        feat.hidden_reduced = pca_apply(net.pca, prev.hidden);
        feat.active_onehot.assign(net.experts_per_layer, 0.0);
        for (int e : prev.active_experts) feat.active_onehot.at(e) = 1.0;
        feat.gate_weights_prev = prev.gate_weights;
        return predict_topk(net, feat, k);
      };
    }
  }
  throw std::logic_error("unreachable");
}

std::vector<std::map<int, int>> predict_loads(const Trace& trace, const PredictFn& fn) {
  const int L = trace.spec.num_layers;
  std::vector<std::map<int, int>> loads(L);
  loads[0] = aggregate_layer_loads(trace, 0);
  for (int l = 1; l < L; ++l)
    for (int tok = 0; tok < trace.batch_size; ++tok)
      for (int e : fn(trace, tok, l)) loads[l][e] += 1;
  return loads;
}

std::vector<double> per_layer_accuracy(const Trace& trace, const PredictFn& fn,
                                       int true_k, AccuracyMode mode) {
  const int L = trace.spec.num_layers;
  std::vector<double> acc(L, 1.0);
  for (int l = 1; l < L; ++l) {
    long hits = 0;
    for (int tok = 0; tok < trace.batch_size; ++tok) {
      const TraceStep& s = trace.step(tok, l);
      std::vector<int> truth = topk_indices(s.gate_weights, true_k);
      if (prediction_hit(fn(trace, tok, l), truth, mode)) ++hits;
    }
    acc[l] = static_cast<double>(hits) / trace.batch_size;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  spec.validate();
  gen.validate();
  params.validate();
  if (policies.empty()) throw std::invalid_argument("config: need at least one policy");
  if (seeds.empty()) throw std::invalid_argument("config: need at least one seed");
  if (batch_sizes.empty()) throw std::invalid_argument("config: need at least one batch size");
  for (int b : batch_sizes)
    if (b < 1) throw std::invalid_argument("config: batch sizes must be >= 1");
}

namespace {

GroupGenParams group_from_json(const nlohmann::json& j, GroupGenParams def) {
  if (j.contains("rho")) def.rho = j.at("rho").get<double>();
  if (j.contains("kappa")) def.kappa = j.at("kappa").get<double>();
  if (j.contains("zipf_s")) def.zipf_s = j.at("zipf_s").get<double>();
  return def;
}

CostParams cost_from_json(const nlohmann::json& j) {
  if (j.contains("calibration")) return read_calibration(j.at("calibration").get<std::string>());
  CostParams p;
  p.t_io = j.at("t_io").get<Ticks>();
  p.t_g = j.at("t_g").get<Ticks>();
  p.t_attn = j.at("t_attn").get<Ticks>();
  p.beta = j.at("beta").get<double>();
  p.startup = j.at("startup").get<Ticks>();
  return p;
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config parse error in " + path + ": " + e.what());
  }

  ExperimentConfig cfg;
  if (j.contains("preset")) {
    cfg.preset = j.at("preset").get<std::string>();
    cfg.spec = spec_preset(cfg.preset);
  }
  if (j.contains("desk")) {
    const auto& d = j.at("desk");
    cfg.spec = desk_scale(cfg.spec, d.at("num_layers").get<int>(),
                          d.at("experts_per_layer").get<int>(),
                          d.at("hidden_dim").get<int>());
    cfg.preset += "-desk";
  }
  if (j.contains("spec")) {
    const auto& s = j.at("spec");
    cfg.spec.num_layers = s.at("num_layers").get<int>();
    cfg.spec.experts_per_layer = s.at("experts_per_layer").get<int>();
    cfg.spec.top_k = s.at("top_k").get<int>();
    cfg.spec.expert_bytes = s.at("expert_bytes").get<std::uint64_t>();
    cfg.spec.hidden_dim = s.at("hidden_dim").get<int>();
    cfg.spec.group_begin_middle = s.at("group_begin_middle").get<int>();
    cfg.spec.group_begin_output = s.at("group_begin_output").get<int>();
    cfg.preset = "custom";
  }

  if (j.contains("trace")) {
    const auto& t = j.at("trace");
    if (t.contains("input")) cfg.gen.input = group_from_json(t.at("input"), cfg.gen.input);
    if (t.contains("middle")) cfg.gen.middle = group_from_json(t.at("middle"), cfg.gen.middle);
    if (t.contains("output")) cfg.gen.output = group_from_json(t.at("output"), cfg.gen.output);
    if (t.contains("noise_scale")) cfg.gen.noise_scale = t.at("noise_scale").get<double>();
  }

  cfg.params = cost_from_json(j.at("cost"));
  for (const auto& p : j.at("policies"))
    cfg.policies.push_back(SchedulerPolicy::parse(p.get<std::string>()));
  if (j.contains("predictor"))
    cfg.predictor = PredictorChoice::parse(j.at("predictor").get<std::string>());
  for (const auto& b : j.at("batch_sizes")) cfg.batch_sizes.push_back(b.get<int>());
  for (const auto& s : j.at("seeds")) cfg.seeds.push_back(s.get<std::uint64_t>());
  if (j.contains("gpu_budget_mib"))
    cfg.gpu_budget_bytes = j.at("gpu_budget_mib").get<std::uint64_t>() * (1ull << 20);
  if (j.contains("sim")) {
    const auto& s = j.at("sim");
    if (s.contains("cpu_slots")) cfg.sim.cpu_slots = s.at("cpu_slots").get<int>();
    if (s.contains("prefetch_slots")) cfg.sim.prefetch_slots = s.at("prefetch_slots").get<int>();
    if (s.contains("initial_hit_rate"))
      cfg.sim.initial_hit_rate = s.at("initial_hit_rate").get<double>();
    if (s.contains("hit_window")) cfg.sim.hit_window = s.at("hit_window").get<int>();
  }
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();

  if (cfg.predictor.kind == PredictorChoice::Kind::LLaPorCkpt &&
      !fs::exists(cfg.predictor.checkpoint))
    throw std::runtime_error("config: checkpoint not found: " + cfg.predictor.checkpoint);
  cfg.validate();
  return cfg;
}

std::string experiment_config_schema() {
  return R"(Experiment config (JSON object):
  preset          string, one of mixtral|qwen3|deepseek|moonlight (optional)
  desk            object {num_layers, experts_per_layer, hidden_dim}; shrinks the
                  preset to a CPU-friendly size (optional)
  spec            object {num_layers, experts_per_layer, top_k, expert_bytes,
                  hidden_dim, group_begin_middle, group_begin_output}; overrides
                  preset entirely (optional if preset given)
  trace           object {input|middle|output: {rho, kappa, zipf_s}, noise_scale}
                  synthetic routing knobs per layer group (optional)
  cost            object {t_io, t_g, t_attn, beta, startup} in microseconds, or
                  {calibration: "<path>"} pointing at a calibration file (required)
  policies        array of "presched"|"greedy"|"ondemand"|"fixed:<c>"|"oracle" (>=1)
  predictor       "perfect"|"stats"|"gate"|"oracle_noise:<rate>"|"llapor:<ckpt>"
                  (default "perfect")
  batch_sizes     array of ints >= 1 (required)
  seeds           array of uint64 (required)
  gpu_budget_mib  number; enables hot-expert residency planning (optional)
  sim             object {cpu_slots, prefetch_slots, initial_hit_rate, hit_window}
                  (optional)
  out_dir         string; metrics and summary output directory
)";
}

// ---------------------------------------------------------------------------
// Grid runner
// ---------------------------------------------------------------------------

void write_file_atomic(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + tmp);
    out << content;
    if (!out) throw std::runtime_error("write failed on " + tmp);
  }
  fs::rename(tmp, path);
}

namespace {

std::string metrics_filename(const std::string& policy, int batch, std::uint64_t seed) {
  std::string p = policy;
  for (char& c : p)
    if (c == ':' || c == '/') c = '_';
  return "metrics_" + p + "_b" + std::to_string(batch) + "_s" + std::to_string(seed) +
         ".json";
}

nlohmann::json cell_to_json(const CellResult& c) {
  nlohmann::json j = {{"policy", c.policy}, {"batch", c.batch}, {"seed", c.seed},
                      {"ok", c.ok}};
  if (c.ok) {
    j["makespan"] = c.metrics.makespan;
    j["decode_latency"] = c.metrics.decode_latency;
    j["throughput_tokens_per_s"] = c.metrics.throughput_tokens_per_s;
    j["io_busy_fraction"] = c.metrics.io_busy_fraction;
    j["gpu_idle_fraction"] = c.metrics.gpu_idle_fraction;
    j["per_layer_latency"] = c.metrics.per_layer_latency;
    j["cpu_gpu_gap"] = c.metrics.cpu_gpu_gap;
  } else {
    j["error"] = c.error;
  }
  return j;
}

std::string fmt_gain(double g) {
  std::ostringstream out;
  out.precision(6);
  out << g;
  return out.str();
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.out_dir.empty()) throw std::invalid_argument("run_experiment: out_dir not set");
  fs::create_directories(cfg.out_dir);

  LLaPor model;
  if (cfg.predictor.kind == PredictorChoice::Kind::LLaPorCkpt)
    model = load_checkpoint(cfg.predictor.checkpoint);

  ExperimentResult result;
  for (int batch : cfg.batch_sizes) {
    for (std::uint64_t seed : cfg.seeds) {
      PipelineInstance inst;
      std::string setup_error;
      try {
        Trace trace = generate_trace(cfg.gen, cfg.spec, batch, seed);
        HotExpertTable table = build_hot_table({trace});
        std::set<std::pair<int, int>> resident;
        if (cfg.gpu_budget_bytes > 0)
          for (auto key : plan_residency(table, cfg.gpu_budget_bytes, cfg.spec.expert_bytes))
            resident.insert(key);
        PredictFn fn = make_predict_fn(cfg.predictor, &model, &table, cfg.spec.top_k,
                                       seed ^ 0xa5a5a5a5a5a5a5a5ull);
        inst = build_instance(trace, predict_loads(trace, fn), resident);
      } catch (const std::exception& e) {
        setup_error = e.what();
      }

      for (const SchedulerPolicy& policy : cfg.policies) {
        CellResult cell;
        cell.policy = policy.name();
        cell.batch = batch;
        cell.seed = seed;
        try {
          if (!setup_error.empty()) throw std::runtime_error(setup_error);
          SimResult r = simulate_policy(inst, policy, cfg.params, cfg.sim);
          auto violations = verify_timeline(r.timeline, inst, cfg.params);
          if (!violations.empty())
            throw std::runtime_error("timeline violation: " + violations.front());
          cell.metrics = compute_metrics(r.timeline, batch);
          cell.ok = true;
        } catch (const std::exception& e) {
          cell.error = e.what();
          ++result.failed_cells;
        }
        write_file_atomic(
            (fs::path(cfg.out_dir) / metrics_filename(cell.policy, batch, seed)).string(),
            cell_to_json(cell).dump(2) + "\n");
        result.cells.push_back(std::move(cell));
      }
    }
  }

  // Summary: one row per (batch, seed); a makespan column per policy plus
  // relative-gain columns of presched against every other policy.
  bool has_presched = false;
  for (const SchedulerPolicy& p : cfg.policies)
    if (p.kind == SchedulerPolicy::Kind::PreSched) has_presched = true;

  std::ostringstream csv;
  csv << "batch,seed";
  for (const SchedulerPolicy& p : cfg.policies) csv << ",makespan_" << p.name();
  if (has_presched)
    for (const SchedulerPolicy& p : cfg.policies)
      if (p.kind != SchedulerPolicy::Kind::PreSched) csv << ",gain_vs_" << p.name();
  csv << '\n';

  auto find_cell = [&](const std::string& policy, int batch,
                       std::uint64_t seed) -> const CellResult* {
    for (const CellResult& c : result.cells)
      if (c.policy == policy && c.batch == batch && c.seed == seed) return &c;
    return nullptr;
  };

  for (int batch : cfg.batch_sizes) {
    for (std::uint64_t seed : cfg.seeds) {
      csv << batch << ',' << seed;
      const CellResult* presched = nullptr;
      for (const SchedulerPolicy& p : cfg.policies) {
        const CellResult* c = find_cell(p.name(), batch, seed);
        if (c && c->ok)
          csv << ',' << c->metrics.makespan;
        else
          csv << ",error";
        if (p.kind == SchedulerPolicy::Kind::PreSched) presched = c;
      }
      if (has_presched) {
        for (const SchedulerPolicy& p : cfg.policies) {
          if (p.kind == SchedulerPolicy::Kind::PreSched) continue;
          const CellResult* c = find_cell(p.name(), batch, seed);
          if (c && c->ok && presched && presched->ok && c->metrics.makespan > 0)
            csv << ','
                << fmt_gain(static_cast<double>(c->metrics.makespan -
                                                presched->metrics.makespan) /
                            c->metrics.makespan);
          else
            csv << ",error";
        }
      }
      csv << '\n';
    }
  }

  result.summary_csv = csv.str();
  write_file_atomic((fs::path(cfg.out_dir) / "summary.csv").string(), result.summary_csv);
  return result;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

ReportResult report(const std::string& metrics_dir) {
  ReportResult rep;
  struct Row {
    std::string policy;
    int batch;
    std::uint64_t seed;
    Ticks makespan;
    double throughput;
    std::vector<Ticks> gaps;
  };
  std::vector<Row> rows;

  std::vector<fs::path> files;
  if (fs::exists(metrics_dir))
    for (const auto& entry : fs::directory_iterator(metrics_dir)) {
      std::string name = entry.path().filename().string();
      if (name.rfind("metrics_", 0) == 0 && entry.path().extension() == ".json")
        files.push_back(entry.path());
    }
  std::sort(files.begin(), files.end());

  for (const fs::path& f : files) {
    try {
      std::ifstream in(f);
      nlohmann::json j = nlohmann::json::parse(in);
      if (!j.at("ok").get<bool>()) {
        rep.errors.push_back(f.filename().string() + ": " +
                             j.value("error", std::string("cell failed")));
        continue;
      }
      Row r;
      r.policy = j.at("policy").get<std::string>();
      r.batch = j.at("batch").get<int>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.makespan = j.at("makespan").get<Ticks>();
      r.throughput = j.at("throughput_tokens_per_s").get<double>();
      for (const auto& g : j.at("cpu_gpu_gap")) r.gaps.push_back(g.get<Ticks>());
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      rep.errors.push_back(f.filename().string() + ": " + e.what());
    }
  }

  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.policy != b.policy) return a.policy < b.policy;
    if (a.batch != b.batch) return a.batch < b.batch;
    return a.seed < b.seed;
  });

  std::ostringstream lat;
  lat << "policy,batch,mean_makespan,mean_throughput,runs\n";
  for (size_t i = 0; i < rows.size();) {
    size_t j = i;
    double ms = 0, tp = 0;
    while (j < rows.size() && rows[j].policy == rows[i].policy &&
           rows[j].batch == rows[i].batch) {
      ms += static_cast<double>(rows[j].makespan);
      tp += rows[j].throughput;
      ++j;
    }
    double n = static_cast<double>(j - i);
    lat << rows[i].policy << ',' << rows[i].batch << ',' << ms / n << ',' << tp / n
        << ',' << (j - i) << '\n';
    i = j;
  }

  std::ostringstream gap;
  gap << "policy,batch,seed,layer,cpu_gpu_gap\n";
  for (const Row& r : rows)
    for (size_t l = 0; l < r.gaps.size(); ++l)
      gap << r.policy << ',' << r.batch << ',' << r.seed << ',' << l << ',' << r.gaps[l]
          << '\n';

  rep.latency_csv = lat.str();
  rep.gap_csv = gap.str();
  if (fs::exists(metrics_dir)) {
    write_file_atomic((fs::path(metrics_dir) / "latency_vs_batch.csv").string(),
                      rep.latency_csv);
    write_file_atomic((fs::path(metrics_dir) / "gap_distribution.csv").string(),
                      rep.gap_csv);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Random instances for the randomized suites
// ---------------------------------------------------------------------------

PipelineInstance random_two_layer_instance(std::mt19937_64& rng, int max_experts,
                                           int max_tokens) {
  std::uniform_int_distribution<int> count(std::max(1, max_experts - 2), max_experts);
  std::uniform_int_distribution<int> tokens(1, max_tokens);
  PipelineInstance inst;
  inst.layers.resize(2);
  int n0 = count(rng), n1 = count(rng);
  for (int e = 0; e < n0; ++e) inst.layers[0].truth[e] = tokens(rng);
  for (int e = 0; e < n1; ++e) inst.layers[1].truth[e] = tokens(rng);
  inst.layers[1].predicted = inst.layers[1].truth;
  return inst;
}

CostParams random_cost_params(std::mt19937_64& rng) {
  CostParams p;
  p.t_io = std::uniform_int_distribution<Ticks>(14, 28)(rng);
  p.t_g = std::uniform_int_distribution<Ticks>(1, std::min<Ticks>(p.t_io - 1, 8))(rng);
  p.t_attn = std::uniform_int_distribution<Ticks>(5, 20)(rng);
  p.beta = std::uniform_real_distribution<double>(0.2, 0.8)(rng);
  p.startup = std::uniform_int_distribution<Ticks>(0, 2)(rng);
  return p;
}

}  // namespace prescope
