#include "vce/shift_weighting.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace vce::shifts {

void ScheduleParams::validate() const {
  if (!(z0 < z1)) throw std::invalid_argument("schedule: need z0 < z1");
  if (!(gamma > 0.0)) throw std::invalid_argument("schedule: need gamma > 0");
  if (!(w_min > 0.0 && w_min < 1.0)) throw std::invalid_argument("schedule: need 0 < w_min < 1");
  if (!(eps > 0.0)) throw std::invalid_argument("schedule: need eps > 0");
}

std::vector<double> logit_shift(const toy::ResponseTrace& original, const toy::ResponseTrace& perturbed,
                                std::span<const int> response) {
  const std::size_t n = response.size();
  if (original.length() != n || perturbed.length() != n)
    throw std::invalid_argument("logit_shift: traces cover " + std::to_string(original.length()) + "/" +
                                std::to_string(perturbed.length()) + " tokens, response has " + std::to_string(n));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (original.tokens[i] != response[i] || perturbed.tokens[i] != response[i])
      throw std::invalid_argument("logit_shift: trace tokens differ from response at " + std::to_string(i));
    out[i] = std::abs(static_cast<double>(perturbed.token_logit(i)) - static_cast<double>(original.token_logit(i)));
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of empty list");
  std::ranges::sort(values);
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

RobustZ robust_z(std::span<const double> delta, double eps) {
  if (delta.empty()) throw std::invalid_argument("robust_z: empty input");
  if (!(eps >= 0.0)) throw std::invalid_argument("robust_z: eps must be >= 0");
  for (double d : delta)
    if (!std::isfinite(d)) throw std::invalid_argument("robust_z: non-finite input");

  RobustZ out;
  out.median = median(std::vector<double>(delta.begin(), delta.end()));
  std::vector<double> dev(delta.size());
  for (std::size_t i = 0; i < delta.size(); ++i) dev[i] = std::abs(delta[i] - out.median);
  out.mad = median(std::move(dev));
  out.sigma = kMadToSigma * out.mad;

  double scale = out.sigma;
  const double largest = *std::ranges::max_element(delta);
  if (scale < 1e-12 * std::max(largest, 1.0)) {
    out.fallback = true;
    double mean = 0.0;
    for (double d : delta) mean += d;
    mean /= static_cast<double>(delta.size());
    double ss = 0.0;
    for (double d : delta) ss += (d - mean) * (d - mean);
    scale = std::sqrt(ss / static_cast<double>(delta.size()));
  }
  out.effective_scale = scale;
  out.z.assign(delta.size(), 0.0);
  if (scale < 1e-12) return out;
  for (std::size_t i = 0; i < delta.size(); ++i) out.z[i] = delta[i] / (scale + eps);
  return out;
}

double weight(double z, const ScheduleParams& p) {
  if (z <= p.z0) return p.w_min;
  if (z >= p.z1) return 1.0;
  const double frac = (z - p.z0) / (p.z1 - p.z0);
  return std::clamp(p.w_min + (1.0 - p.w_min) * std::pow(frac, p.gamma), p.w_min, 1.0);
}

std::vector<double> weight_schedule(std::span<const double> z, const ScheduleParams& params) {
  std::vector<double> out(z.size());
  std::ranges::transform(z, out.begin(), [&](double v) { return weight(v, params); });
  return out;
}

ShiftRecord compute_record(std::span<const double> delta, const ScheduleParams& params) {
  params.validate();
  ShiftRecord rec;
  rec.delta.assign(delta.begin(), delta.end());
  rec.robust = robust_z(delta, params.eps);
  rec.weights = weight_schedule(rec.robust.z, params);
  return rec;
}

}  // namespace vce::shifts
