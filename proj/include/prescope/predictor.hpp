#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "prescope/workload.hpp"

namespace prescope {

/// Small dense row-major matrix.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}
  double& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

  bool operator==(const Mat&) const = default;
};

struct PcaBasis {
  std::vector<double> mean;
  Mat components;                   // effective_dim x input_dim, orthonormal rows
  std::vector<double> eigenvalues;  // descending
  int requested_dim = 0;
  int effective_dim = 0;            // < requested_dim when rank-deficient

  bool operator==(const PcaBasis&) const = default;
};

/// Power iteration with deflation on the sample covariance.
PcaBasis pca_fit(const std::vector<std::vector<double>>& samples, int out_dim);
std::vector<double> pca_apply(const PcaBasis& basis, const std::vector<double>& v);
std::vector<double> pca_reconstruct(const PcaBasis& basis, const std::vector<double>& reduced);

struct PredictorFeatures {
  std::vector<double> hidden_reduced;
  std::vector<double> active_onehot;      // length experts_per_layer, top_k ones
  std::vector<double> gate_weights_prev;  // length experts_per_layer
};

struct LinearBlock {
  Mat w;
  std::vector<double> b;

  bool operator==(const LinearBlock&) const = default;
};

/// Per-layer predictor. Input/output-group nets are shallow; middle-group
/// nets add a residual unit whose contribution is modulated by a scalar gate
/// computed from the reduced hidden state.
struct LLaPorNet {
  int target_layer = 0;
  LayerGroup group = LayerGroup::Middle;
  int experts_per_layer = 0;
  double dropout_rate = 0.1;

  PcaBasis pca;
  std::vector<LinearBlock> blocks;           // each: linear + GELU + dropout
  std::vector<LinearBlock> residual_blocks;  // middle group only
  std::vector<double> gate_w;                // scalar gate over hidden_reduced
  double gate_b = 0.0;
  LinearBlock out;                           // width -> experts logits

  bool has_residual() const { return !residual_blocks.empty(); }
  int input_dim() const;

  bool operator==(const LLaPorNet&) const = default;
};

struct ForwardResult {
  std::vector<double> logits;
  std::vector<double> probs;  // element-wise sigmoid (multi-label)
};

ForwardResult forward(const LLaPorNet& net, const PredictorFeatures& feat,
                      bool train_mode = false, std::mt19937_64* rng = nullptr);

struct GroupHyper {
  double base_lr = 1e-3;
  double weight_decay = 1e-4;
  int pca_dim = 8;
  int width = 32;
  int num_blocks = 2;
};

struct TrainConfig {
  double lambda = 1.0;  // focal term weight
  double gamma = 2.0;   // focusing parameter
  int epochs = 30;
  int warmup_epochs = 5;
  GroupHyper input{3e-3, 1e-4, 8, 32, 2};
  GroupHyper middle{3e-3, 1e-3, 16, 48, 3};
  GroupHyper output{3e-3, 1e-4, 8, 32, 2};
  double dropout_rate = 0.1;
  double noise_rate = 0.01;  // gaussian std applied to hidden features
  double mask_rate = 0.05;   // input zeroing probability
  int batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
  const GroupHyper& for_group(LayerGroup g) const;
};

/// Linear warmup for warmup_epochs, then cosine annealing to 0.
double schedule_lr(double base_lr, int epoch, const TrainConfig& cfg);

struct LossResult {
  double loss = 0.0;
  double l_expert = 0.0;
  double l_focal = 0.0;
  std::vector<double> grad_logits;
};

/// L = L_expert + lambda * L_focal, both per-expert means; standard
/// (nonnegative) BCE with probabilities clamped at 1e-7.
LossResult hybrid_loss(const std::vector<double>& p, const std::vector<double>& y,
                       const std::vector<double>& freqs, double lambda, double gamma);

struct HotExpertTable {
  std::vector<std::pair<int, int>> ranking;  // (layer, expert), frequency-desc
  std::map<std::pair<int, int>, long> freq;
};

HotExpertTable build_hot_table(const std::vector<Trace>& traces);

/// Longest prefix of the ranking fitting the byte budget.
std::vector<std::pair<int, int>> plan_residency(const HotExpertTable& table,
                                                std::uint64_t budget_bytes,
                                                std::uint64_t expert_bytes);

/// One predictor per target layer (index 0 unused: layer 0 has no
/// predecessor features within a pass).
struct LLaPor {
  ModelSpec spec;
  TrainConfig cfg;
  std::vector<LLaPorNet> nets;
};

struct TrainReport {
  std::vector<std::vector<double>> epoch_loss;  // [target_layer][epoch]
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

LLaPor make_llapor(const ModelSpec& spec, const TrainConfig& cfg);
TrainReport train(LLaPor& model, const std::vector<Trace>& traces);

struct Sample {
  PredictorFeatures features;
  std::vector<double> labels;  // multi-hot
};

/// Supervised pairs for one target layer: features of layer l-1, labels of l.
std::vector<Sample> build_samples(const LLaPorNet& net, const std::vector<Trace>& traces);

/// Online update on freshly collected samples at a fixed learning rate.
void fine_tune(LLaPorNet& net, const std::vector<Sample>& samples, int steps,
               double lr, const TrainConfig& cfg);

std::vector<int> predict_topk(const LLaPorNet& net, const PredictorFeatures& feat, int k);
std::vector<int> stats_predict(const HotExpertTable& table, int layer, int k,
                               int experts_per_layer);
std::vector<int> gate_reuse_predict(const std::vector<double>& prev_gate_weights, int k);
std::vector<int> oracle_noise_predict(const std::vector<int>& true_set, double hit_rate,
                                      std::mt19937_64& rng, int k, int experts_per_layer);

enum class AccuracyMode { Exact, Sliding };

/// Exact: set equality. Sliding: predicted top-k within the true top-k'.
bool prediction_hit(const std::vector<int>& predicted, const std::vector<int>& truth,
                    AccuracyMode mode);

// Versioned binary checkpoint with PCA bases, parameters, TrainConfig and the
// checksum of the training trace.
void save_checkpoint(const LLaPor& model, std::uint64_t trace_checksum,
                     const std::string& path);
LLaPor load_checkpoint(const std::string& path, std::uint64_t* trace_checksum = nullptr);

}  // namespace prescope
