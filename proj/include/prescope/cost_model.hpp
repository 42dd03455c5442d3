#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prescope {

// Integer ticks, 1 tick = 1 microsecond. Signed so gap/benefit arithmetic
// stays closed under subtraction.
using Ticks = std::int64_t;

/// Round-half-up to the nearest tick (floor(x + 0.5), also for negatives).
Ticks to_ticks(double x);

struct CostParams {
  Ticks t_io = 0;     // per-expert PCIe transfer time
  Ticks t_g = 0;      // per-expert GPU compute
  Ticks t_attn = 0;   // attention time per layer
  double beta = 0.0;  // CPU ticks per token
  Ticks startup = 0;  // CPU per-expert startup cost C
  Ticks alpha = 0;    // current I/O backlog delaying a new on-demand start

  void validate() const;  // throws; requires t_g < t_io
};

enum class ExpertLocation { Resident, InFlight, Host };

struct ExpertLoad {
  int expert = 0;
  int layer = 0;
  int tokens = 0;
  ExpertLocation location = ExpertLocation::Host;
};

/// Hit/miss rates of the critical prefetch, tracked as an EWMA.
struct HitStats {
  double r_hit = 1.0;
  double r_miss = 0.0;
  int window = 32;

  void validate() const;
  void record(bool hit);  // EWMA update with weight 1/window
};

/// Affine per-expert CPU cost: t_c = beta * m + C, rounded to ticks.
Ticks cpu_cost(int tokens, const CostParams& params);

/// Sum of per-expert CPU costs over a list (empty list -> 0).
Ticks cpu_cost_list(std::span<const ExpertLoad> experts, const CostParams& params);

struct CostFit {
  double beta = 0.0;
  double startup = 0.0;
  double r_squared = 0.0;
};

struct CostSample {
  int tokens = 0;
  Ticks ticks = 0;
};

/// Ordinary least squares over (tokens, ticks) samples.
CostFit fit_cost_params(std::span<const CostSample> samples);

struct CostPair {
  Ticks gpu = 0;
  Ticks cpu = 0;
};

/// Cross-layer completion estimates over the merged list E_all[0..n+n'],
/// sorted ascending
/// by tokens: T_G_all = alpha + (n+n'-i+1)*t_io + t_g;
/// T_C_all = t_c(E_all[0..i]) + t_attn.
CostPair cross_layer_costs(int i, std::span<const ExpertLoad> e_all,
                           const CostParams& params);

/// Current-layer completion estimates over the list E_cur[0..n]:
/// T_G = alpha + (n-i'+1)*t_io + t_g; T_C = t_c(E_cur[0..i'-1]).
/// i_prime may be n+1, meaning nothing is loaded (T_G degenerates to
/// alpha + t_g with zero transfers; callers treat that split as all-CPU).
CostPair current_layer_costs(int i_prime, std::span<const ExpertLoad> e_cur,
                             const CostParams& params);

struct PrefetchCount {
  double f = 0.0;  // exact (unrounded) value
  int f_int = 0;   // round-half-up of max(f, 0)
};

/// Number of next-layer transfers that fit in the idle channel window:
/// f = (T_gap + t_attn) / t_io.
PrefetchCount overlap_prefetch_count(Ticks t_gap, const CostParams& params);

/// Expected gain of the critical (last) prefetch:
/// xi = R_hit*(f - |f| + 1)*t_e - R_miss*(|f| - f)*t_e, with t_e = t_io.
double prefetch_gain(const HitStats& stats, double f, int f_int,
                     const CostParams& params);

// Calibration file: {t_io, t_g, t_attn, beta, startup, tick_unit}.
void write_calibration(const CostParams& params, const std::string& path);
CostParams read_calibration(const std::string& path);

}  // namespace prescope
