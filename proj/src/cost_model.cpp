#include "prescope/cost_model.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

namespace prescope {

Ticks to_ticks(double x) { return static_cast<Ticks>(std::floor(x + 0.5)); }

void CostParams::validate() const {
  if (t_io < 0 || t_g < 0 || t_attn < 0 || beta < 0 || startup < 0 || alpha < 0)
    throw std::invalid_argument("CostParams: all parameters must be >= 0");
  if (!(t_g < t_io))
    throw std::invalid_argument("CostParams: requires t_g < t_io");
}

void HitStats::validate() const {
  if (r_hit < 0 || r_hit > 1 || r_miss < 0 || r_miss > 1)
    throw std::invalid_argument("HitStats: rates must be in [0,1]");
  if (std::abs(r_hit + r_miss - 1.0) > 1e-9)
    throw std::invalid_argument("HitStats: r_hit + r_miss must equal 1");
  if (window < 1) throw std::invalid_argument("HitStats: window must be >= 1");
}

void HitStats::record(bool hit) {
  double w = 1.0 / window;
  r_hit = (1.0 - w) * r_hit + (hit ? w : 0.0);
  r_miss = 1.0 - r_hit;
}

Ticks cpu_cost(int tokens, const CostParams& params) {
  if (tokens < 0) throw std::invalid_argument("cpu_cost: negative token count");
  return to_ticks(params.beta * tokens) + params.startup;
}

Ticks cpu_cost_list(std::span<const ExpertLoad> experts, const CostParams& params) {
  Ticks total = 0;
  for (const ExpertLoad& e : experts) total += cpu_cost(e.tokens, params);
  return total;
}

CostFit fit_cost_params(std::span<const CostSample> samples) {
  std::set<int> distinct;
  for (const CostSample& s : samples) distinct.insert(s.tokens);
  if (distinct.size() < 2)
    throw std::invalid_argument("fit_cost_params: need >= 2 distinct token counts");

  const double n = static_cast<double>(samples.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const CostSample& s : samples) {
    sx += s.tokens;
    sy += static_cast<double>(s.ticks);
    sxx += static_cast<double>(s.tokens) * s.tokens;
    sxy += static_cast<double>(s.tokens) * s.ticks;
  }
  double denom = n * sxx - sx * sx;
  CostFit fit;
  fit.beta = (n * sxy - sx * sy) / denom;
  fit.startup = (sy - fit.beta * sx) / n;

  double ybar = sy / n, ss_res = 0, ss_tot = 0;
  for (const CostSample& s : samples) {
    double pred = fit.beta * s.tokens + fit.startup;
    ss_res += (s.ticks - pred) * (s.ticks - pred);
    ss_tot += (s.ticks - ybar) * (s.ticks - ybar);
  }
  fit.r_squared = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

CostPair cross_layer_costs(int i, std::span<const ExpertLoad> e_all,
                           const CostParams& params) {
  if (i < 0 || static_cast<size_t>(i) >= e_all.size())
    throw std::out_of_range("cross_layer_costs: index out of range");
  CostPair c;
  c.gpu = params.alpha + static_cast<Ticks>(e_all.size() - i) * params.t_io + params.t_g;
  c.cpu = cpu_cost_list(e_all.subspan(0, i + 1), params) + params.t_attn;
  return c;
}

CostPair current_layer_costs(int i_prime, std::span<const ExpertLoad> e_cur,
                             const CostParams& params) {
  if (i_prime < 0 || static_cast<size_t>(i_prime) > e_cur.size())
    throw std::out_of_range("current_layer_costs: index out of range");
  CostPair c;
  c.gpu = params.alpha + static_cast<Ticks>(e_cur.size() - i_prime) * params.t_io + params.t_g;
  c.cpu = cpu_cost_list(e_cur.subspan(0, i_prime), params);
  return c;
}

PrefetchCount overlap_prefetch_count(Ticks t_gap, const CostParams& params) {
  if (params.t_io <= 0) throw std::invalid_argument("overlap_prefetch_count: t_io must be > 0");
  PrefetchCount pc;
  pc.f = static_cast<double>(t_gap + params.t_attn) / params.t_io;
  pc.f_int = static_cast<int>(to_ticks(std::max(pc.f, 0.0)));
  return pc;
}

double prefetch_gain(const HitStats& stats, double f, int f_int,
                     const CostParams& params) {
  double t_e = static_cast<double>(params.t_io);
  return stats.r_hit * (f - f_int + 1.0) * t_e - stats.r_miss * (f_int - f) * t_e;
}

void write_calibration(const CostParams& params, const std::string& path) {
  nlohmann::json j = {{"t_io", params.t_io},     {"t_g", params.t_g},
                      {"t_attn", params.t_attn}, {"beta", params.beta},
                      {"startup", params.startup}, {"tick_unit", "us"}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_calibration: cannot open " + path);
  out << j.dump(2) << '\n';
}

CostParams read_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_calibration: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  CostParams p;
  p.t_io = j.at("t_io").get<Ticks>();
  p.t_g = j.at("t_g").get<Ticks>();
  p.t_attn = j.at("t_attn").get<Ticks>();
  p.beta = j.at("beta").get<double>();
  p.startup = j.at("startup").get<Ticks>();
  p.validate();
  return p;
}

}  // namespace prescope
