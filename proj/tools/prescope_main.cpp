// prescope: trace generation, cost calibration, predictor training and
// evaluation, scheduling/simulation of offloaded MoE expert pipelines, and
// experiment sweeps.
//
// Exit codes: 0 success, 1 config/usage error, 2 runtime failures present,
// 3 golden-scenario mismatch.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "prescope/experiment.hpp"
#include "prescope/golden.hpp"
#include "prescope/predictor.hpp"

namespace fs = std::filesystem;
using namespace prescope;

namespace {

struct SpecOpts {
  std::string preset = "mixtral";
  int desk_layers = 0;  // > 0 enables desk scaling
  int desk_experts = 8;
  int desk_hidden = 32;

  void attach(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "model preset: mixtral|qwen3|deepseek|moonlight");
    cmd->add_option("--desk-layers", desk_layers,
                    "shrink the preset to this many layers (0 = full size)");
    cmd->add_option("--desk-experts", desk_experts, "experts per layer when desk-scaled");
    cmd->add_option("--desk-hidden", desk_hidden, "hidden dim when desk-scaled");
  }
  ModelSpec resolve() const {
    ModelSpec s = spec_preset(preset);
    if (desk_layers > 0) s = desk_scale(s, desk_layers, desk_experts, desk_hidden);
    return s;
  }
};

struct GenOpts {
  TraceGenConfig gen;

  void attach(CLI::App* cmd) {
    cmd->add_option("--input-rho", gen.input.rho, "input-group hidden-state correlation");
    cmd->add_option("--input-kappa", gen.input.kappa, "input-group routing-follow rate");
    cmd->add_option("--input-zipf", gen.input.zipf_s, "input-group hot-expert skew");
    cmd->add_option("--middle-rho", gen.middle.rho, "middle-group hidden-state correlation");
    cmd->add_option("--middle-kappa", gen.middle.kappa, "middle-group routing-follow rate");
    cmd->add_option("--middle-zipf", gen.middle.zipf_s, "middle-group hot-expert skew");
    cmd->add_option("--output-rho", gen.output.rho, "output-group hidden-state correlation");
    cmd->add_option("--output-kappa", gen.output.kappa, "output-group routing-follow rate");
    cmd->add_option("--output-zipf", gen.output.zipf_s, "output-group hot-expert skew");
    cmd->add_option("--noise-scale", gen.noise_scale, "hidden-state noise scale");
  }
};

struct CostOpts {
  std::string calibration;
  CostParams params{10, 2, 3, 1.0, 1, 0};

  void attach(CLI::App* cmd) {
    cmd->add_option("--cost", calibration, "calibration file (overrides the flags below)");
    cmd->add_option("--t-io", params.t_io, "per-expert transfer ticks");
    cmd->add_option("--t-g", params.t_g, "per-expert GPU compute ticks");
    cmd->add_option("--t-attn", params.t_attn, "attention ticks per layer");
    cmd->add_option("--beta", params.beta, "CPU ticks per token");
    cmd->add_option("--startup", params.startup, "CPU per-expert startup ticks");
  }
  CostParams resolve() const {
    CostParams p = calibration.empty() ? params : read_calibration(calibration);
    p.validate();
    return p;
  }
};

int cmd_gen_trace(const SpecOpts& spec_opts, const GenOpts& gen_opts, int batch,
                  std::uint64_t seed, const std::string& out) {
  ModelSpec spec = spec_opts.resolve();
  Trace trace = generate_trace(gen_opts.gen, spec, batch, seed);
  write_trace(trace, out);
  auto stats = measure_group_stats(trace);
  std::cout << "wrote " << out << " (" << trace.steps.size() << " steps)\n";
  for (const auto& [g, gs] : stats) {
    std::cout << to_string(g) << ": hot_share=" << gs.hot_expert_share;
    if (gs.cosine_similarity) std::cout << " cosine=" << *gs.cosine_similarity;
    if (gs.routing_correlation) std::cout << " routing=" << *gs.routing_correlation;
    std::cout << '\n';
  }
  return 0;
}

int cmd_calibrate(const std::string& samples_path, const std::string& out, Ticks t_io,
                  Ticks t_g, Ticks t_attn) {
  std::ifstream in(samples_path);
  if (!in) throw std::runtime_error("cannot open samples: " + samples_path);
  std::vector<CostSample> samples;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("tokens", 0) == 0) continue;
    std::istringstream ls(line);
    std::string tok, tick;
    if (!std::getline(ls, tok, ',') || !std::getline(ls, tick, ','))
      throw std::runtime_error("bad samples line: " + line);
    samples.push_back({std::stoi(tok), static_cast<Ticks>(std::stoll(tick))});
  }
  CostFit fit = fit_cost_params(samples);
  CostParams p;
  p.t_io = t_io;
  p.t_g = t_g;
  p.t_attn = t_attn;
  p.beta = fit.beta;
  p.startup = to_ticks(fit.startup);
  p.validate();
  write_calibration(p, out);
  std::cout << "beta=" << fit.beta << " startup=" << fit.startup
            << " r_squared=" << fit.r_squared << " -> " << out << '\n';
  return 0;
}

int cmd_train(const std::vector<std::string>& trace_paths, const std::string& out,
              int epochs, std::uint64_t seed, double lambda, double gamma) {
  std::vector<Trace> traces;
  std::uint64_t checksum = 0;
  for (const std::string& path : trace_paths) {
    traces.push_back(read_trace(path));
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    checksum ^= fnv1a64(buf.str());
  }
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.warmup_epochs = std::min(cfg.warmup_epochs, epochs);
  cfg.seed = seed;
  cfg.lambda = lambda;
  cfg.gamma = gamma;
  LLaPor model = make_llapor(traces.front().spec, cfg);
  TrainReport rep = train(model, traces);
  save_checkpoint(model, checksum, out);
  std::cout << "trained " << traces.front().spec.num_layers - 1 << " nets, loss "
            << rep.initial_loss << " -> " << rep.final_loss << ", saved " << out << '\n';
  return 0;
}

int cmd_eval(const std::string& trace_path, const std::string& predictor, int k,
             int true_k, const std::string& mode_name, std::uint64_t seed,
             const std::string& out) {
  Trace trace = read_trace(trace_path);
  PredictorChoice choice = PredictorChoice::parse(predictor);
  LLaPor model;
  if (choice.kind == PredictorChoice::Kind::LLaPorCkpt)
    model = load_checkpoint(choice.checkpoint);
  HotExpertTable table = build_hot_table({trace});
  AccuracyMode mode;
  if (mode_name == "exact")
    mode = AccuracyMode::Exact;
  else if (mode_name == "sliding")
    mode = AccuracyMode::Sliding;
  else
    throw std::invalid_argument("mode must be exact|sliding");

  PredictFn fn = make_predict_fn(choice, &model, &table, k, seed);
  std::vector<double> acc = per_layer_accuracy(trace, fn, true_k, mode);
  std::ostringstream csv;
  csv << "layer,accuracy\n";
  for (size_t l = 1; l < acc.size(); ++l) csv << l << ',' << acc[l] << '\n';
  if (out.empty())
    std::cout << csv.str();
  else
    write_file_atomic(out, csv.str());
  return 0;
}

PipelineInstance instance_for(const Trace& trace, const std::string& predictor,
                              std::uint64_t budget_mib, std::uint64_t seed) {
  PredictorChoice choice = PredictorChoice::parse(predictor);
  LLaPor model;
  if (choice.kind == PredictorChoice::Kind::LLaPorCkpt)
    model = load_checkpoint(choice.checkpoint);
  HotExpertTable table = build_hot_table({trace});
  std::set<std::pair<int, int>> resident;
  if (budget_mib > 0)
    for (auto key : plan_residency(table, budget_mib << 20, trace.spec.expert_bytes))
      resident.insert(key);
  PredictFn fn = make_predict_fn(choice, &model, &table, trace.spec.top_k, seed);
  return build_instance(trace, predict_loads(trace, fn), resident);
}

int cmd_schedule(const std::string& trace_path, int layer, const std::string& policy_name,
                 const CostOpts& cost, const std::string& predictor, std::uint64_t seed) {
  Trace trace = read_trace(trace_path);
  if (layer < 0 || layer >= trace.spec.num_layers)
    throw std::invalid_argument("layer out of range");
  PipelineInstance inst = instance_for(trace, predictor, 0, seed);

  auto host_loads = [&](const std::map<int, int>& loads, int l) {
    std::vector<ExpertLoad> out;
    for (auto [e, m] : loads)
      if (m >= 1) out.push_back({e, l, m, ExpertLocation::Host});
    std::sort(out.begin(), out.end(), [](const ExpertLoad& a, const ExpertLoad& b) {
      if (a.tokens != b.tokens) return a.tokens < b.tokens;
      return a.expert < b.expert;
    });
    return out;
  };

  LayerInputs inputs;
  inputs.e_cur = host_loads(inst.layers[layer].truth, layer);
  if (layer + 1 < inst.num_layers())
    inputs.e_next = host_loads(inst.layers[layer + 1].predicted, layer + 1);
  if (layer + 2 < inst.num_layers())
    inputs.e_next2 = host_loads(inst.layers[layer + 2].predicted, layer + 2);
  inputs.params = cost.resolve();

  LayerPlan plan = plan_layer(inputs, SchedulerPolicy::parse(policy_name));
  auto print_seq = [](const char* name, const std::vector<ExpertLoad>& seq) {
    std::cout << name << ':';
    for (const ExpertLoad& e : seq) std::cout << " e" << e.expert << "(m=" << e.tokens << ')';
    std::cout << '\n';
  };
  std::cout << "split_index=" << plan.split_index
            << " prefetches=" << plan.issued_prefetches
            << (plan.prefetch_from_widened ? " (widened window)" : "") << '\n';
  print_seq("cpu_set", plan.cpu_set);
  print_seq("ondemand_seq", plan.ondemand_seq);
  print_seq("prefetch_seq", plan.prefetch_seq);
  std::cout << "t_gap=" << plan.trace.t_gap << " f=" << plan.trace.f
            << " xi=" << plan.trace.xi
            << (plan.trace.all_gpu_fallback ? " (all-gpu fallback)" : "") << '\n';
  return 0;
}

int cmd_simulate(const std::string& trace_path, const std::string& policy_name,
                 const CostOpts& cost, const std::string& predictor,
                 std::uint64_t budget_mib, std::uint64_t seed, const std::string& out) {
  Trace trace = read_trace(trace_path);
  PipelineInstance inst = instance_for(trace, predictor, budget_mib, seed);
  CostParams params = cost.resolve();
  SimResult r = simulate_policy(inst, SchedulerPolicy::parse(policy_name), params);
  auto violations = verify_timeline(r.timeline, inst, params);
  Metrics m = compute_metrics(r.timeline, trace.batch_size);
  if (!out.empty()) {
    fs::create_directories(out);
    write_file_atomic((fs::path(out) / "timeline.txt").string(),
                      export_timeline(r.timeline));
    write_file_atomic((fs::path(out) / "metrics.json").string(),
                      export_metrics_json(m) + "\n");
  }
  std::cout << export_metrics_json(m) << '\n';
  if (!violations.empty()) {
    for (const std::string& v : violations) std::cerr << "violation: " << v << '\n';
    return 2;
  }
  return 0;
}

int cmd_run_experiment(const std::string& config_path, const std::string& out_override) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (!out_override.empty()) cfg.out_dir = out_override;
  ExperimentResult result = run_experiment(cfg);
  std::cout << result.summary_csv;
  if (result.failed_cells > 0) {
    std::cerr << result.failed_cells << " cell(s) failed\n";
    return 2;
  }
  return 0;
}

int cmd_replay_golden(const std::string& id, bool all) {
  std::vector<std::string> ids = all ? golden_ids() : std::vector<std::string>{id};
  bool failed = false;
  for (const std::string& sid : ids) {
    GoldenDiff diff = replay_golden(sid);
    std::cout << format_diff(diff) << '\n';
    failed = failed || !diff.pass;
  }
  return failed ? 3 : 0;
}

int cmd_report(const std::string& dir) {
  ReportResult rep = report(dir);
  std::cout << rep.latency_csv;
  for (const std::string& e : rep.errors) std::cerr << "report: " << e << '\n';
  return rep.errors.empty() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prefetch-aware expert offloading scheduler and simulator"};
  app.require_subcommand(1);

  // gen-trace
  SpecOpts gen_spec;
  GenOpts gen_gen;
  int gen_batch = 8;
  std::uint64_t gen_seed = 0;
  std::string gen_out = "trace.tsv";
  auto* gen = app.add_subcommand("gen-trace", "generate a synthetic routing trace");
  gen_spec.attach(gen);
  gen_gen.attach(gen);
  gen->add_option("--batch", gen_batch, "tokens per decode step");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output trace file")->required();

  // calibrate
  std::string cal_samples, cal_out = "calibration.json";
  Ticks cal_t_io = 10, cal_t_g = 2, cal_t_attn = 3;
  auto* cal = app.add_subcommand("calibrate", "fit CPU cost constants from samples");
  cal->add_option("--samples", cal_samples, "csv with tokens,ticks columns")->required();
  cal->add_option("--out", cal_out, "calibration output file");
  cal->add_option("--t-io", cal_t_io, "per-expert transfer ticks");
  cal->add_option("--t-g", cal_t_g, "per-expert GPU compute ticks");
  cal->add_option("--t-attn", cal_t_attn, "attention ticks per layer");

  // train-predictor
  std::vector<std::string> train_traces;
  std::string train_out = "llapor.ckpt";
  int train_epochs = 30;
  std::uint64_t train_seed = 0;
  double train_lambda = 1.0, train_gamma = 2.0;
  auto* tr = app.add_subcommand("train-predictor", "train the activation predictor");
  tr->add_option("--trace", train_traces, "training trace file(s)")->required();
  tr->add_option("--out", train_out, "checkpoint output file");
  tr->add_option("--epochs", train_epochs, "training epochs");
  tr->add_option("--seed", train_seed, "training seed");
  tr->add_option("--lambda", train_lambda, "focal term weight");
  tr->add_option("--gamma", train_gamma, "focal focusing parameter");

  // eval-predictor
  std::string eval_trace, eval_pred = "perfect", eval_mode = "exact", eval_out;
  int eval_k = 0, eval_true_k = 0;
  std::uint64_t eval_seed = 0;
  auto* ev = app.add_subcommand("eval-predictor", "per-layer prediction accuracy");
  ev->add_option("--trace", eval_trace, "trace file")->required();
  ev->add_option("--predictor", eval_pred,
                 "perfect|stats|gate|oracle_noise:<rate>|llapor:<ckpt>");
  ev->add_option("--k", eval_k, "predicted set size (default: model top_k)");
  ev->add_option("--true-k", eval_true_k, "reference set size (default: model top_k)");
  ev->add_option("--mode", eval_mode, "exact|sliding");
  ev->add_option("--seed", eval_seed, "noise seed");
  ev->add_option("--out", eval_out, "write csv here instead of stdout");

  // schedule
  std::string sch_trace, sch_policy = "presched", sch_pred = "perfect";
  int sch_layer = 0;
  std::uint64_t sch_seed = 0;
  CostOpts sch_cost;
  auto* sch = app.add_subcommand("schedule", "inspect one layer's plan");
  sch->add_option("--trace", sch_trace, "trace file")->required();
  sch->add_option("--layer", sch_layer, "layer index");
  sch->add_option("--policy", sch_policy, "presched|greedy|ondemand|fixed:<c>");
  sch->add_option("--predictor", sch_pred, "prediction source");
  sch->add_option("--seed", sch_seed, "noise seed");
  sch_cost.attach(sch);

  // simulate
  std::string sim_trace, sim_policy = "presched", sim_pred = "perfect", sim_out;
  std::uint64_t sim_budget = 0, sim_seed = 0;
  CostOpts sim_cost;
  auto* sim = app.add_subcommand("simulate", "run one full-pipeline simulation");
  sim->add_option("--trace", sim_trace, "trace file")->required();
  sim->add_option("--policy", sim_policy, "presched|greedy|ondemand|fixed:<c>|oracle");
  sim->add_option("--predictor", sim_pred, "prediction source");
  sim->add_option("--budget-mib", sim_budget, "GPU memory budget for resident experts");
  sim->add_option("--seed", sim_seed, "noise seed");
  sim->add_option("--out", sim_out, "directory for timeline.txt and metrics.json");
  sim_cost.attach(sim);

  // run-experiment
  std::string exp_config, exp_out;
  auto* exp = app.add_subcommand("run-experiment", "run a (policy x batch x seed) grid");
  exp->add_option("--config", exp_config, "experiment config json")->required();
  exp->add_option("--out", exp_out, "override the config's out_dir");
  auto* schema = app.add_subcommand("config-schema", "print the experiment config schema");

  // replay-golden
  std::string gold_id;
  bool gold_all = false;
  auto* gold = app.add_subcommand("replay-golden", "replay a stored scenario tick-exactly");
  gold->add_option("--id", gold_id, "scenario id");
  gold->add_flag("--all", gold_all, "replay every registered scenario");

  // report
  std::string rep_dir;
  auto* rep = app.add_subcommand("report", "aggregate metrics files into csv series");
  rep->add_option("--dir", rep_dir, "metrics directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_trace(gen_spec, gen_gen, gen_batch, gen_seed, gen_out);
    if (cal->parsed()) return cmd_calibrate(cal_samples, cal_out, cal_t_io, cal_t_g, cal_t_attn);
    if (tr->parsed())
      return cmd_train(train_traces, train_out, train_epochs, train_seed, train_lambda,
                       train_gamma);
    if (ev->parsed()) {
      Trace t = read_trace(eval_trace);  // only to default k
      int k = eval_k > 0 ? eval_k : t.spec.top_k;
      int tk = eval_true_k > 0 ? eval_true_k : t.spec.top_k;
      return cmd_eval(eval_trace, eval_pred, k, tk, eval_mode, eval_seed, eval_out);
    }
    if (sch->parsed())
      return cmd_schedule(sch_trace, sch_layer, sch_policy, sch_cost, sch_pred, sch_seed);
    if (sim->parsed())
      return cmd_simulate(sim_trace, sim_policy, sim_cost, sim_pred, sim_budget, sim_seed,
                          sim_out);
    if (exp->parsed()) return cmd_run_experiment(exp_config, exp_out);
    if (schema->parsed()) {
      std::cout << experiment_config_schema();
      return 0;
    }
    if (gold->parsed()) {
      if (!gold_all && gold_id.empty())
        throw std::invalid_argument("replay-golden needs --id or --all");
      return cmd_replay_golden(gold_id, gold_all);
    }
    if (rep->parsed()) return cmd_report(rep_dir);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
