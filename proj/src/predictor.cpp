#include "prescope/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace prescope {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void matvec(const Mat& m, const std::vector<double>& x, std::vector<double>& out) {
  if (static_cast<int>(x.size()) != m.cols)
    throw std::invalid_argument("matvec: shape mismatch");
  out.assign(m.rows, 0.0);
  for (int r = 0; r < m.rows; ++r) {
    double s = 0.0;
    const double* row = m.a.data() + static_cast<size_t>(r) * m.cols;
    for (int c = 0; c < m.cols; ++c) s += row[c] * x[c];
    out[r] = s;
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  constexpr double inv_sqrt2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) +
         x * inv_sqrt2pi * std::exp(-0.5 * x * x);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

PcaBasis pca_fit(const std::vector<std::vector<double>>& samples, int out_dim) {
  if (samples.empty()) throw std::invalid_argument("pca_fit: no samples");
  const int d = static_cast<int>(samples[0].size());
  if (out_dim < 1 || out_dim > d)
    throw std::invalid_argument("pca_fit: out_dim must be in [1, input_dim]");
  if (static_cast<int>(samples.size()) < out_dim)
    throw std::invalid_argument("pca_fit: need at least out_dim samples");

  PcaBasis basis;
  basis.requested_dim = out_dim;
  basis.mean.assign(d, 0.0);
  for (const auto& s : samples) {
    if (static_cast<int>(s.size()) != d)
      throw std::invalid_argument("pca_fit: inconsistent sample dims");
    for (int i = 0; i < d; ++i) basis.mean[i] += s[i];
  }
  for (double& m : basis.mean) m /= static_cast<double>(samples.size());

  // Sample covariance.
  Mat cov(d, d);
  const double div = samples.size() > 1 ? samples.size() - 1.0 : 1.0;
  std::vector<double> c(d);
  for (const auto& s : samples) {
    for (int i = 0; i < d; ++i) c[i] = s[i] - basis.mean[i];
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) cov.at(i, j) += c[i] * c[j] / div;
  }

  double trace = 0.0;
  for (int i = 0; i < d; ++i) trace += cov.at(i, i);
  const double rank_eps = std::max(1e-12, 1e-10 * trace);

  std::vector<std::vector<double>> comps;
  std::vector<double> v(d), next(d);
  for (int k = 0; k < out_dim; ++k) {
    std::mt19937_64 rng(0x5ca1ab1eull + k);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (double& x : v) x = gauss(rng);
    for (int iter = 0; iter < 2000; ++iter) {
      matvec(cov, v, next);
      // Re-orthogonalize against previously extracted components.
      for (const auto& u : comps) {
        double p = dot(next, u);
        for (int i = 0; i < d; ++i) next[i] -= p * u[i];
      }
      double norm = std::sqrt(dot(next, next));
      if (norm < 1e-300) break;
      for (double& x : next) x /= norm;
      double delta = 0.0;
      for (int i = 0; i < d; ++i) delta += (next[i] - v[i]) * (next[i] - v[i]);
      v = next;
      if (delta < 1e-30) break;
    }
    matvec(cov, v, next);
    double lambda = dot(v, next);
    if (lambda <= rank_eps) break;  // remaining directions carry no variance
    comps.push_back(v);
    basis.eigenvalues.push_back(lambda);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) cov.at(i, j) -= lambda * v[i] * v[j];
  }

  basis.effective_dim = static_cast<int>(comps.size());
  basis.components = Mat(basis.effective_dim, d);
  for (int k = 0; k < basis.effective_dim; ++k)
    for (int j = 0; j < d; ++j) basis.components.at(k, j) = comps[k][j];
  return basis;
}

std::vector<double> pca_apply(const PcaBasis& basis, const std::vector<double>& v) {
  if (v.size() != basis.mean.size())
    throw std::invalid_argument("pca_apply: dimension mismatch");
  std::vector<double> centered(v.size());
  for (size_t i = 0; i < v.size(); ++i) centered[i] = v[i] - basis.mean[i];
  std::vector<double> out;
  matvec(basis.components, centered, out);
  return out;
}

std::vector<double> pca_reconstruct(const PcaBasis& basis,
                                    const std::vector<double>& reduced) {
  if (static_cast<int>(reduced.size()) != basis.effective_dim)
    throw std::invalid_argument("pca_reconstruct: dimension mismatch");
  std::vector<double> out = basis.mean;
  for (int k = 0; k < basis.effective_dim; ++k)
    for (size_t j = 0; j < out.size(); ++j)
      out[j] += reduced[k] * basis.components.at(k, static_cast<int>(j));
  return out;
}

// ---------------------------------------------------------------------------
// Network forward/backward
// ---------------------------------------------------------------------------

int LLaPorNet::input_dim() const {
  return pca.effective_dim + 2 * experts_per_layer;
}

namespace {

struct BlockCache {
  std::vector<double> x;     // block input
  std::vector<double> z;     // pre-activation
  std::vector<double> mask;  // inverted-dropout multipliers
  std::vector<double> out;
};

struct NetCache {
  std::vector<double> input;
  std::vector<double> hidden_reduced;
  std::vector<BlockCache> blocks;
  std::vector<BlockCache> res_blocks;
  std::vector<double> res_in;
  std::vector<double> res_u;
  double gate_g = 1.0;
  std::vector<double> y;  // input to the output affine map
  std::vector<double> logits;
};

void block_forward(const LinearBlock& blk, const std::vector<double>& x,
                   double dropout_rate, bool train_mode, std::mt19937_64* rng,
                   BlockCache& cache) {
  cache.x = x;
  matvec(blk.w, x, cache.z);
  for (size_t i = 0; i < cache.z.size(); ++i) cache.z[i] += blk.b[i];
  cache.out.resize(cache.z.size());
  for (size_t i = 0; i < cache.z.size(); ++i) cache.out[i] = gelu(cache.z[i]);
  if (train_mode) {
    const double keep = 1.0 - dropout_rate;
    cache.mask.resize(cache.out.size());
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (size_t i = 0; i < cache.out.size(); ++i) {
      cache.mask[i] = (keep > 0.0 && unif(*rng) < keep) ? 1.0 / keep : 0.0;
      cache.out[i] *= cache.mask[i];
    }
  }
}

// Returns gradient w.r.t. the block input; accumulates parameter grads.
std::vector<double> block_backward(const LinearBlock& blk, const BlockCache& cache,
                                   const std::vector<double>& d_out,
                                   LinearBlock& grad) {
  std::vector<double> dz(cache.z.size());
  for (size_t i = 0; i < dz.size(); ++i) {
    double dh = d_out[i];
    if (!cache.mask.empty()) dh *= cache.mask[i];
    dz[i] = dh * gelu_grad(cache.z[i]);
  }
  for (int r = 0; r < blk.w.rows; ++r) {
    grad.b[r] += dz[r];
    for (int c = 0; c < blk.w.cols; ++c) grad.w.at(r, c) += dz[r] * cache.x[c];
  }
  std::vector<double> dx(blk.w.cols, 0.0);
  for (int r = 0; r < blk.w.rows; ++r)
    for (int c = 0; c < blk.w.cols; ++c) dx[c] += blk.w.at(r, c) * dz[r];
  return dx;
}

NetCache net_forward(const LLaPorNet& net, const PredictorFeatures& feat,
                     bool train_mode, std::mt19937_64* rng) {
  if (train_mode && rng == nullptr)
    throw std::invalid_argument("forward: train_mode requires an rng");
  if (static_cast<int>(feat.hidden_reduced.size()) != net.pca.effective_dim ||
      static_cast<int>(feat.active_onehot.size()) != net.experts_per_layer ||
      static_cast<int>(feat.gate_weights_prev.size()) != net.experts_per_layer)
    throw std::invalid_argument("forward: feature shape mismatch");

  NetCache cache;
  cache.hidden_reduced = feat.hidden_reduced;
  cache.input = feat.hidden_reduced;
  cache.input.insert(cache.input.end(), feat.active_onehot.begin(),
                     feat.active_onehot.end());
  cache.input.insert(cache.input.end(), feat.gate_weights_prev.begin(),
                     feat.gate_weights_prev.end());

  std::vector<double> x = cache.input;
  cache.blocks.resize(net.blocks.size());
  for (size_t i = 0; i < net.blocks.size(); ++i) {
    block_forward(net.blocks[i], x, net.dropout_rate, train_mode, rng, cache.blocks[i]);
    x = cache.blocks[i].out;
  }

  if (net.has_residual()) {
    cache.res_in = x;
    std::vector<double> u = x;
    cache.res_blocks.resize(net.residual_blocks.size());
    for (size_t i = 0; i < net.residual_blocks.size(); ++i) {
      block_forward(net.residual_blocks[i], u, net.dropout_rate, train_mode, rng,
                    cache.res_blocks[i]);
      u = cache.res_blocks[i].out;
    }
    cache.res_u = u;
    cache.gate_g = sigmoid(dot(net.gate_w, cache.hidden_reduced) + net.gate_b);
    for (size_t i = 0; i < x.size(); ++i) x[i] = u[i] * cache.gate_g + cache.res_in[i];
  }

  cache.y = x;
  matvec(net.out.w, x, cache.logits);
  for (size_t i = 0; i < cache.logits.size(); ++i) cache.logits[i] += net.out.b[i];
  return cache;
}

LLaPorNet zero_like(const LLaPorNet& net) {
  LLaPorNet g = net;
  auto zero_block = [](LinearBlock& b) {
    std::fill(b.w.a.begin(), b.w.a.end(), 0.0);
    std::fill(b.b.begin(), b.b.end(), 0.0);
  };
  for (LinearBlock& b : g.blocks) zero_block(b);
  for (LinearBlock& b : g.residual_blocks) zero_block(b);
  std::fill(g.gate_w.begin(), g.gate_w.end(), 0.0);
  g.gate_b = 0.0;
  zero_block(g.out);
  return g;
}

void net_backward(const LLaPorNet& net, const NetCache& cache,
                  const std::vector<double>& d_logits, LLaPorNet& grad) {
  for (int r = 0; r < net.out.w.rows; ++r) {
    grad.out.b[r] += d_logits[r];
    for (int c = 0; c < net.out.w.cols; ++c)
      grad.out.w.at(r, c) += d_logits[r] * cache.y[c];
  }
  std::vector<double> dy(net.out.w.cols, 0.0);
  for (int r = 0; r < net.out.w.rows; ++r)
    for (int c = 0; c < net.out.w.cols; ++c)
      dy[c] += net.out.w.at(r, c) * d_logits[r];

  if (net.has_residual()) {
    double g = cache.gate_g;
    std::vector<double> du(dy.size());
    double dg = 0.0;
    for (size_t i = 0; i < dy.size(); ++i) {
      du[i] = dy[i] * g;
      dg += dy[i] * cache.res_u[i];
    }
    std::vector<double> dx_in = dy;  // skip connection
    for (int i = static_cast<int>(net.residual_blocks.size()) - 1; i >= 0; --i)
      du = block_backward(net.residual_blocks[i], cache.res_blocks[i], du,
                          grad.residual_blocks[i]);
    for (size_t i = 0; i < dx_in.size(); ++i) dx_in[i] += du[i];
    double dzg = dg * g * (1.0 - g);
    for (size_t i = 0; i < grad.gate_w.size(); ++i)
      grad.gate_w[i] += dzg * cache.hidden_reduced[i];
    grad.gate_b += dzg;
    dy = std::move(dx_in);
  }

  for (int i = static_cast<int>(net.blocks.size()) - 1; i >= 0; --i)
    dy = block_backward(net.blocks[i], cache.blocks[i], dy, grad.blocks[i]);
}

using ParamList = std::vector<std::pair<double*, size_t>>;

ParamList collect_params(LLaPorNet& net) {
  ParamList list;
  auto add_block = [&](LinearBlock& b) {
    list.emplace_back(b.w.a.data(), b.w.a.size());
    list.emplace_back(b.b.data(), b.b.size());
  };
  for (LinearBlock& b : net.blocks) add_block(b);
  for (LinearBlock& b : net.residual_blocks) add_block(b);
  if (!net.gate_w.empty()) list.emplace_back(net.gate_w.data(), net.gate_w.size());
  list.emplace_back(&net.gate_b, 1);
  add_block(net.out);
  return list;
}

struct AdamW {
  LLaPorNet m, v;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamW(const LLaPorNet& net) : m(zero_like(net)), v(zero_like(net)) {}

  void step(LLaPorNet& net, LLaPorNet& grad, double lr, double weight_decay) {
    ++t;
    ParamList pn = collect_params(net), pg = collect_params(grad);
    ParamList pm = collect_params(m), pv = collect_params(v);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (size_t s = 0; s < pn.size(); ++s) {
      for (size_t i = 0; i < pn[s].second; ++i) {
        double g = pg[s].first[i];
        double& mm = pm[s].first[i];
        double& vv = pv[s].first[i];
        mm = beta1 * mm + (1.0 - beta1) * g;
        vv = beta2 * vv + (1.0 - beta2) * g * g;
        double update = (mm / bc1) / (std::sqrt(vv / bc2) + eps);
        pn[s].first[i] -= lr * (update + weight_decay * pn[s].first[i]);
      }
    }
  }
};

}  // namespace

ForwardResult forward(const LLaPorNet& net, const PredictorFeatures& feat,
                      bool train_mode, std::mt19937_64* rng) {
  NetCache cache = net_forward(net, feat, train_mode, rng);
  ForwardResult r;
  r.logits = cache.logits;
  r.probs.resize(r.logits.size());
  for (size_t i = 0; i < r.logits.size(); ++i) r.probs[i] = sigmoid(r.logits[i]);
  return r;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

LossResult hybrid_loss(const std::vector<double>& p, const std::vector<double>& y,
                       const std::vector<double>& freqs, double lambda, double gamma) {
  const size_t n = p.size();
  if (y.size() != n || freqs.size() != n)
    throw std::invalid_argument("hybrid_loss: size mismatch");
  if (n == 0) throw std::invalid_argument("hybrid_loss: empty input");
  if (lambda < 0 || gamma < 0)
    throw std::invalid_argument("hybrid_loss: lambda and gamma must be >= 0");

  constexpr double eps = 1e-7;
  LossResult res;
  res.grad_logits.assign(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    if (freqs[i] <= 0.0) throw std::invalid_argument("hybrid_loss: zero expert frequency");
    const double pc = std::clamp(p[i], eps, 1.0 - eps);
    const bool pos = y[i] > 0.5;
    const double bce = pos ? -std::log(pc) : -std::log(1.0 - pc);
    const double pt = pos ? pc : 1.0 - pc;
    const double mod = gamma == 0.0 ? 1.0 : std::pow(1.0 - pt, gamma);

    res.l_expert += bce / freqs[i];
    res.l_focal += mod * bce;

    const double dbce_dz = pc - (pos ? 1.0 : 0.0);
    double dfocal_dp;
    if (pos) {
      dfocal_dp = (gamma == 0.0 ? 0.0
                                : gamma * std::pow(1.0 - pc, gamma - 1.0) * std::log(pc)) -
                  mod / pc;
    } else {
      dfocal_dp = (gamma == 0.0 ? 0.0
                                : -gamma * std::pow(pc, gamma - 1.0) * std::log(1.0 - pc)) +
                  mod / (1.0 - pc);
    }
    const double dfocal_dz = dfocal_dp * pc * (1.0 - pc);
    res.grad_logits[i] = (dbce_dz / freqs[i] + lambda * dfocal_dz) / static_cast<double>(n);
  }
  res.l_expert /= static_cast<double>(n);
  res.l_focal /= static_cast<double>(n);
  res.loss = res.l_expert + lambda * res.l_focal;
  return res;
}

// ---------------------------------------------------------------------------
// Hot-expert table and residency
// ---------------------------------------------------------------------------

HotExpertTable build_hot_table(const std::vector<Trace>& traces) {
  HotExpertTable table;
  for (const Trace& t : traces)
    for (const TraceStep& s : t.steps)
      for (auto [e, m] : s.tokens_per_expert) table.freq[{s.layer, e}] += m;
  // Every (layer, expert) pair appears in the ranking, unseen pairs last.
  if (!traces.empty()) {
    const ModelSpec& spec = traces.front().spec;
    for (int l = 0; l < spec.num_layers; ++l)
      for (int e = 0; e < spec.experts_per_layer; ++e) table.freq.try_emplace({l, e}, 0);
  }
  for (auto& [key, f] : table.freq) table.ranking.push_back(key);
  std::sort(table.ranking.begin(), table.ranking.end(),
            [&](const auto& a, const auto& b) {
              long fa = table.freq.at(a), fb = table.freq.at(b);
              if (fa != fb) return fa > fb;
              return a < b;
            });
  return table;
}

std::vector<std::pair<int, int>> plan_residency(const HotExpertTable& table,
                                                std::uint64_t budget_bytes,
                                                std::uint64_t expert_bytes) {
  if (expert_bytes == 0) throw std::invalid_argument("plan_residency: expert_bytes == 0");
  std::uint64_t count = budget_bytes / expert_bytes;
  count = std::min<std::uint64_t>(count, table.ranking.size());
  return {table.ranking.begin(), table.ranking.begin() + count};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (lambda < 0 || gamma < 0)
    throw std::invalid_argument("TrainConfig: lambda and gamma must be >= 0");
  if (epochs < 1 || warmup_epochs < 0 || warmup_epochs > epochs)
    throw std::invalid_argument("TrainConfig: need 0 <= warmup_epochs <= epochs, epochs >= 1");
  if (dropout_rate < 0 || dropout_rate >= 1 || noise_rate < 0 || mask_rate < 0 ||
      mask_rate > 1)
    throw std::invalid_argument("TrainConfig: augmentation rates out of range");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
}

const GroupHyper& TrainConfig::for_group(LayerGroup g) const {
  switch (g) {
    case LayerGroup::Input: return input;
    case LayerGroup::Output: return output;
    default: return middle;
  }
}

double schedule_lr(double base_lr, int epoch, const TrainConfig& cfg) {
  if (epoch < cfg.warmup_epochs)
    return base_lr * (epoch + 1.0) / cfg.warmup_epochs;
  if (cfg.epochs == cfg.warmup_epochs) return base_lr;
  double progress = static_cast<double>(epoch - cfg.warmup_epochs) /
                    (cfg.epochs - cfg.warmup_epochs);
  return base_lr * 0.5 * (1.0 + std::cos(progress * M_PI));
}

LLaPor make_llapor(const ModelSpec& spec, const TrainConfig& cfg) {
  spec.validate();
  cfg.validate();
  LLaPor model;
  model.spec = spec;
  model.cfg = cfg;
  model.nets.resize(spec.num_layers);
  for (int l = 1; l < spec.num_layers; ++l) {
    LLaPorNet& net = model.nets[l];
    net.target_layer = l;
    net.group = spec.group_of(l);
    net.experts_per_layer = spec.experts_per_layer;
    net.dropout_rate = cfg.dropout_rate;
  }
  return model;
}

namespace {

LinearBlock init_block(int out_dim, int in_dim, std::mt19937_64& rng) {
  LinearBlock b;
  b.w = Mat(out_dim, in_dim);
  b.b.assign(out_dim, 0.0);
  double s = std::sqrt(6.0 / (in_dim + out_dim));
  std::uniform_real_distribution<double> unif(-s, s);
  for (double& w : b.w.a) w = unif(rng);
  return b;
}

void build_net_architecture(LLaPorNet& net, const GroupHyper& hyper,
                            std::mt19937_64& rng) {
  const int in_dim = net.input_dim();
  net.blocks.clear();
  net.residual_blocks.clear();
  int d = in_dim;
  // Input/output-group nets are shallow; the middle group gets one extra
  // block plus a gated residual unit.
  for (int i = 0; i < hyper.num_blocks; ++i) {
    net.blocks.push_back(init_block(hyper.width, d, rng));
    d = hyper.width;
  }
  if (net.group == LayerGroup::Middle) {
    for (int i = 0; i < 2; ++i)
      net.residual_blocks.push_back(init_block(hyper.width, hyper.width, rng));
    net.gate_w.assign(net.pca.effective_dim, 0.0);
    std::uniform_real_distribution<double> unif(-0.1, 0.1);
    for (double& w : net.gate_w) w = unif(rng);
    net.gate_b = 0.0;
  } else {
    net.gate_w.clear();
    net.gate_b = 0.0;
  }
  net.out = init_block(net.experts_per_layer, hyper.width, rng);
}

std::vector<double> onehot(const std::vector<int>& idx, int n) {
  std::vector<double> v(n, 0.0);
  for (int i : idx) v.at(i) = 1.0;
  return v;
}

Sample augment(const Sample& s, const TrainConfig& cfg, std::mt19937_64& rng) {
  Sample a = s;
  if (cfg.noise_rate > 0) {
    std::normal_distribution<double> gauss(0.0, cfg.noise_rate);
    for (double& x : a.features.hidden_reduced) x += gauss(rng);
  }
  if (cfg.mask_rate > 0) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    auto mask = [&](std::vector<double>& v) {
      for (double& x : v)
        if (unif(rng) < cfg.mask_rate) x = 0.0;
    };
    mask(a.features.hidden_reduced);
    mask(a.features.active_onehot);
    mask(a.features.gate_weights_prev);
  }
  return a;
}

std::vector<double> expert_freqs(const std::vector<Trace>& traces, int layer, int experts) {
  std::vector<long> counts(experts, 0);
  long total = 0;
  for (const Trace& t : traces)
    for (int tok = 0; tok < t.batch_size; ++tok)
      for (int e : t.step(tok, layer).active_experts) {
        counts[e]++;
        total++;
      }
  std::vector<double> f(experts);
  for (int e = 0; e < experts; ++e)
    f[e] = static_cast<double>(counts[e] + 1) / static_cast<double>(total + experts);
  return f;
}

// One AdamW pass over the samples in minibatches.
double run_epoch(LLaPorNet& net, const std::vector<Sample>& samples,
                 const std::vector<double>& freqs, const TrainConfig& cfg,
                 double lr, double weight_decay, AdamW& opt, std::mt19937_64& rng,
                 bool do_augment) {
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  double epoch_loss = 0.0;
  size_t pos = 0;
  while (pos < order.size()) {
    size_t count = std::min<size_t>(cfg.batch_size, order.size() - pos);
    LLaPorNet grad = zero_like(net);
    for (size_t b = 0; b < count; ++b) {
      const Sample& raw = samples[order[pos + b]];
      Sample s = do_augment ? augment(raw, cfg, rng) : raw;
      NetCache cache = net_forward(net, s.features, true, &rng);
      std::vector<double> probs(cache.logits.size());
      for (size_t i = 0; i < probs.size(); ++i) probs[i] = sigmoid(cache.logits[i]);
      LossResult lr_res = hybrid_loss(probs, s.labels, freqs, cfg.lambda, cfg.gamma);
      epoch_loss += lr_res.loss;
      for (double& g : lr_res.grad_logits) g /= static_cast<double>(count);
      net_backward(net, cache, lr_res.grad_logits, grad);
    }
    opt.step(net, grad, lr, weight_decay);
    pos += count;
  }
  return samples.empty() ? 0.0 : epoch_loss / samples.size();
}

}  // namespace

std::vector<Sample> build_samples(const LLaPorNet& net, const std::vector<Trace>& traces) {
  std::vector<Sample> samples;
  const int l = net.target_layer;
  for (const Trace& t : traces) {
    for (int tok = 0; tok < t.batch_size; ++tok) {
      const TraceStep& prev = t.step(tok, l - 1);
      const TraceStep& cur = t.step(tok, l);
      Sample s;
      s.features.hidden_reduced = pca_apply(net.pca, prev.hidden);
      s.features.active_onehot = onehot(prev.active_experts, net.experts_per_layer);
      s.features.gate_weights_prev = prev.gate_weights;
      s.labels = onehot(cur.active_experts, net.experts_per_layer);
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

TrainReport train(LLaPor& model, const std::vector<Trace>& traces) {
  model.cfg.validate();
  if (traces.empty() || traces.front().steps.empty())
    throw std::invalid_argument("train: empty training set");
  for (const Trace& t : traces)
    if (!(t.spec == model.spec))
      throw std::invalid_argument("train: traces must share the model spec");

  const TrainConfig& cfg = model.cfg;
  TrainReport report;
  report.epoch_loss.resize(model.spec.num_layers);

  for (int l = 1; l < model.spec.num_layers; ++l) {
    LLaPorNet& net = model.nets[l];
    const GroupHyper& hyper = cfg.for_group(net.group);
    std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * (l + 1)));

    std::vector<std::vector<double>> hiddens;
    for (const Trace& t : traces)
      for (int tok = 0; tok < t.batch_size; ++tok)
        hiddens.push_back(t.step(tok, l - 1).hidden);
    net.pca = pca_fit(hiddens, std::min(hyper.pca_dim, model.spec.hidden_dim));
    build_net_architecture(net, hyper, rng);

    std::vector<Sample> samples = build_samples(net, traces);
    std::vector<double> freqs = expert_freqs(traces, l, model.spec.experts_per_layer);
    AdamW opt(net);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      double lr = schedule_lr(hyper.base_lr, epoch, cfg);
      double loss = run_epoch(net, samples, freqs, cfg, lr, hyper.weight_decay, opt,
                              rng, true);
      report.epoch_loss[l].push_back(loss);
    }
    if (!report.epoch_loss[l].empty()) {
      report.initial_loss += report.epoch_loss[l].front();
      report.final_loss += report.epoch_loss[l].back();
    }
  }
  return report;
}

void fine_tune(LLaPorNet& net, const std::vector<Sample>& samples, int steps,
               double lr, const TrainConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("fine_tune: empty sample set");
  std::vector<double> freqs(net.experts_per_layer, 1.0 / net.experts_per_layer);
  std::mt19937_64 rng(cfg.seed ^ 0xf1e2d3c4b5a69788ull ^ net.target_layer);
  AdamW opt(net);
  const GroupHyper& hyper = cfg.for_group(net.group);
  for (int s = 0; s < steps; ++s)
    run_epoch(net, samples, freqs, cfg, lr, hyper.weight_decay, opt, rng, false);
}

// ---------------------------------------------------------------------------
// Prediction interfaces
// ---------------------------------------------------------------------------

std::vector<int> predict_topk(const LLaPorNet& net, const PredictorFeatures& feat, int k) {
  ForwardResult r = forward(net, feat);
  return topk_indices(r.logits, k);
}

std::vector<int> stats_predict(const HotExpertTable& table, int layer, int k,
                               int experts_per_layer) {
  std::vector<int> out;
  for (const auto& [l, e] : table.ranking) {
    if (l != layer) continue;
    out.push_back(e);
    if (static_cast<int>(out.size()) == k) break;
  }
  // Pad with the lowest unused indices when the table has too few entries.
  for (int e = 0; static_cast<int>(out.size()) < k && e < experts_per_layer; ++e)
    if (std::find(out.begin(), out.end(), e) == out.end()) out.push_back(e);
  return out;
}

std::vector<int> gate_reuse_predict(const std::vector<double>& prev_gate_weights, int k) {
  return topk_indices(prev_gate_weights, k);
}

std::vector<int> oracle_noise_predict(const std::vector<int>& true_set, double hit_rate,
                                      std::mt19937_64& rng, int k, int experts_per_layer) {
  std::vector<int> pred(true_set.begin(),
                        true_set.begin() + std::min<size_t>(k, true_set.size()));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (unif(rng) < hit_rate || pred.empty()) return pred;
  // Miss: replace one member with a random non-member.
  std::uniform_int_distribution<int> pick(0, static_cast<int>(pred.size()) - 1);
  std::uniform_int_distribution<int> any(0, experts_per_layer - 1);
  int slot = pick(rng);
  for (int tries = 0; tries < 64; ++tries) {
    int cand = any(rng);
    if (std::find(pred.begin(), pred.end(), cand) == pred.end()) {
      pred[slot] = cand;
      break;
    }
  }
  return pred;
}

bool prediction_hit(const std::vector<int>& predicted, const std::vector<int>& truth,
                    AccuracyMode mode) {
  if (mode == AccuracyMode::Exact) {
    if (predicted.size() != truth.size()) return false;
    std::vector<int> a = predicted, b = truth;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return a == b;
  }
  for (int p : predicted)
    if (std::find(truth.begin(), truth.end(), p) == truth.end()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'L', 'L', 'P', 'C'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void wr(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T rd(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void wr_vec(std::ostream& out, const std::vector<double>& v) {
  wr<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> rd_vec(std::istream& in) {
  std::uint64_t n = rd<std::uint64_t>(in);
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void wr_mat(std::ostream& out, const Mat& m) {
  wr<std::int32_t>(out, m.rows);
  wr<std::int32_t>(out, m.cols);
  wr_vec(out, m.a);
}

Mat rd_mat(std::istream& in) {
  Mat m;
  m.rows = rd<std::int32_t>(in);
  m.cols = rd<std::int32_t>(in);
  m.a = rd_vec(in);
  if (m.a.size() != static_cast<size_t>(m.rows) * m.cols)
    throw std::runtime_error("checkpoint: corrupt matrix");
  return m;
}

void wr_block(std::ostream& out, const LinearBlock& b) {
  wr_mat(out, b.w);
  wr_vec(out, b.b);
}

LinearBlock rd_block(std::istream& in) {
  LinearBlock b;
  b.w = rd_mat(in);
  b.b = rd_vec(in);
  return b;
}

void wr_spec(std::ostream& out, const ModelSpec& s) {
  wr<std::int32_t>(out, s.num_layers);
  wr<std::int32_t>(out, s.experts_per_layer);
  wr<std::int32_t>(out, s.top_k);
  wr<std::uint64_t>(out, s.expert_bytes);
  wr<std::int32_t>(out, s.hidden_dim);
  wr<std::int32_t>(out, s.group_begin_middle);
  wr<std::int32_t>(out, s.group_begin_output);
}

ModelSpec rd_spec(std::istream& in) {
  ModelSpec s;
  s.num_layers = rd<std::int32_t>(in);
  s.experts_per_layer = rd<std::int32_t>(in);
  s.top_k = rd<std::int32_t>(in);
  s.expert_bytes = rd<std::uint64_t>(in);
  s.hidden_dim = rd<std::int32_t>(in);
  s.group_begin_middle = rd<std::int32_t>(in);
  s.group_begin_output = rd<std::int32_t>(in);
  return s;
}

void wr_hyper(std::ostream& out, const GroupHyper& h) {
  wr(out, h.base_lr);
  wr(out, h.weight_decay);
  wr<std::int32_t>(out, h.pca_dim);
  wr<std::int32_t>(out, h.width);
  wr<std::int32_t>(out, h.num_blocks);
}

GroupHyper rd_hyper(std::istream& in) {
  GroupHyper h;
  h.base_lr = rd<double>(in);
  h.weight_decay = rd<double>(in);
  h.pca_dim = rd<std::int32_t>(in);
  h.width = rd<std::int32_t>(in);
  h.num_blocks = rd<std::int32_t>(in);
  return h;
}

}  // namespace

void save_checkpoint(const LLaPor& model, std::uint64_t trace_checksum,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kCkptMagic, 4);
  wr(out, kCkptVersion);
  wr(out, trace_checksum);
  wr_spec(out, model.spec);

  const TrainConfig& c = model.cfg;
  wr(out, c.lambda);
  wr(out, c.gamma);
  wr<std::int32_t>(out, c.epochs);
  wr<std::int32_t>(out, c.warmup_epochs);
  wr_hyper(out, c.input);
  wr_hyper(out, c.middle);
  wr_hyper(out, c.output);
  wr(out, c.dropout_rate);
  wr(out, c.noise_rate);
  wr(out, c.mask_rate);
  wr<std::int32_t>(out, c.batch_size);
  wr(out, c.seed);

  wr<std::uint32_t>(out, static_cast<std::uint32_t>(model.nets.size()));
  for (const LLaPorNet& n : model.nets) {
    wr<std::int32_t>(out, n.target_layer);
    wr<std::uint8_t>(out, static_cast<std::uint8_t>(n.group));
    wr<std::int32_t>(out, n.experts_per_layer);
    wr(out, n.dropout_rate);
    wr_vec(out, n.pca.mean);
    wr_mat(out, n.pca.components);
    wr_vec(out, n.pca.eigenvalues);
    wr<std::int32_t>(out, n.pca.requested_dim);
    wr<std::int32_t>(out, n.pca.effective_dim);
    wr<std::uint32_t>(out, static_cast<std::uint32_t>(n.blocks.size()));
    for (const LinearBlock& b : n.blocks) wr_block(out, b);
    wr<std::uint32_t>(out, static_cast<std::uint32_t>(n.residual_blocks.size()));
    for (const LinearBlock& b : n.residual_blocks) wr_block(out, b);
    wr_vec(out, n.gate_w);
    wr(out, n.gate_b);
    wr_block(out, n.out);
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed on " + path);
}

LLaPor load_checkpoint(const std::string& path, std::uint64_t* trace_checksum) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic");
  if (rd<std::uint32_t>(in) != kCkptVersion)
    throw std::runtime_error("load_checkpoint: unsupported version");
  std::uint64_t checksum = rd<std::uint64_t>(in);
  if (trace_checksum) *trace_checksum = checksum;

  LLaPor model;
  model.spec = rd_spec(in);
  TrainConfig& c = model.cfg;
  c.lambda = rd<double>(in);
  c.gamma = rd<double>(in);
  c.epochs = rd<std::int32_t>(in);
  c.warmup_epochs = rd<std::int32_t>(in);
  c.input = rd_hyper(in);
  c.middle = rd_hyper(in);
  c.output = rd_hyper(in);
  c.dropout_rate = rd<double>(in);
  c.noise_rate = rd<double>(in);
  c.mask_rate = rd<double>(in);
  c.batch_size = rd<std::int32_t>(in);
  c.seed = rd<std::uint64_t>(in);

  std::uint32_t num = rd<std::uint32_t>(in);
  model.nets.resize(num);
  for (LLaPorNet& n : model.nets) {
    n.target_layer = rd<std::int32_t>(in);
    n.group = static_cast<LayerGroup>(rd<std::uint8_t>(in));
    n.experts_per_layer = rd<std::int32_t>(in);
    n.dropout_rate = rd<double>(in);
    n.pca.mean = rd_vec(in);
    n.pca.components = rd_mat(in);
    n.pca.eigenvalues = rd_vec(in);
    n.pca.requested_dim = rd<std::int32_t>(in);
    n.pca.effective_dim = rd<std::int32_t>(in);
    std::uint32_t nb = rd<std::uint32_t>(in);
    n.blocks.resize(nb);
    for (LinearBlock& b : n.blocks) b = rd_block(in);
    std::uint32_t nr = rd<std::uint32_t>(in);
    n.residual_blocks.resize(nr);
    for (LinearBlock& b : n.residual_blocks) b = rd_block(in);
    n.gate_w = rd_vec(in);
    n.gate_b = rd<double>(in);
    n.out = rd_block(in);
  }
  return model;
}

}  // namespace prescope
