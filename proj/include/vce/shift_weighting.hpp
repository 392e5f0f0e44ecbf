#pragma once

// Per-token logit shifts between the perturbed and original pass, robust
// z-scores and the piecewise weight schedule.

#include <span>
#include <vector>

#include "vce/toy_model.hpp"

namespace vce::shifts {

inline constexpr double kMadToSigma = 1.4826;

struct ScheduleParams {
  double z0 = 1.5;
  double z1 = 3.5;
  double gamma = 2.0;
  double w_min = 0.05;
  double eps = 1e-6;

  /// Throws std::invalid_argument unless z0 < z1, gamma > 0, 0 < w_min < 1 and eps > 0.
  void validate() const;
};

struct RobustZ {
  std::vector<double> z;
  double median = 0.0;
  double mad = 0.0;
  double sigma = 0.0;          // 1.4826 * MAD
  double effective_scale = 0.0;  // denominator actually used (before eps)
  bool fallback = false;       // MAD was degenerate
};

struct ShiftRecord {
  std::vector<double> delta;
  RobustZ robust;
  std::vector<double> weights;
};

/// |logit_pert(t_i) - logit_orig(t_i)| for every response token.
std::vector<double> logit_shift(const toy::ResponseTrace& original, const toy::ResponseTrace& perturbed,
                                std::span<const int> response);

/// Median of a non-empty list; even lengths average the two central order statistics.
double median(std::vector<double> values);

/// z_t = delta_t / (sigma_rob + eps) with sigma_rob = 1.4826 * MAD.
///
/// When sigma_rob < 1e-12 * max(max(delta), 1) the standard deviation of delta
/// stands in for it; if that is also below 1e-12 every z is 0.
/// Throws std::invalid_argument on empty or non-finite input.
RobustZ robust_z(std::span<const double> delta, double eps = 1e-6);

double weight(double z, const ScheduleParams& params);
std::vector<double> weight_schedule(std::span<const double> z, const ScheduleParams& params);

ShiftRecord compute_record(std::span<const double> delta, const ScheduleParams& params);

}  // namespace vce::shifts
