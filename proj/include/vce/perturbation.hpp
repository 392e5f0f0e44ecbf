#pragma once

// Forward-diffusion noising used to build the perturbed half of each
// contrastive pair.

#include <cstdint>
#include <span>
#include <vector>

#include "vce/tensor.hpp"

namespace vce::perturb {

/// C x H x W image with values normalized to [-1, 1].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, std::vector<float> v);

  std::size_t pixel_count() const { return channels * height * width; }
  bool same_shape(const Image& other) const {
    return channels == other.channels && height == other.height && width == other.width;
  }

  Tensor to_tensor(std::string name) const;
  static Image from_tensor(const Tensor& t);
};

struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bars;  // alpha_bars[t] = prod_{s<=t} (1 - betas[s])

  std::size_t steps() const { return betas.size(); }
  double final_alpha_bar() const { return alpha_bars.back(); }

  /// Builds alpha_bars from arbitrary betas in [0, 1]; used for degenerate schedules.
  static NoiseSchedule from_betas(std::vector<double> betas);
};

inline constexpr std::size_t kDefaultSteps = 500;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;

/// Linear betas from beta_start to beta_end inclusive.
/// Requires steps >= 1 and 0 < beta_start <= beta_end < 1.
NoiseSchedule make_linear_schedule(std::size_t steps, double beta_start, double beta_end);

inline NoiseSchedule default_schedule() {
  return make_linear_schedule(kDefaultSteps, kDefaultBetaStart, kDefaultBetaEnd);
}

/// Runs I_t = sqrt(1 - b_t) I_{t-1} + sqrt(b_t) eps_t for every step.
/// eps is drawn pixel-major within each step from GaussianRng(seed).
Image diffuse_stepwise(const Image& image, const NoiseSchedule& schedule, std::uint64_t seed);

/// One draw from the marginal: I_T = sqrt(abar_T) I_0 + sqrt(1 - abar_T) eps.
Image diffuse_closed_form(const Image& image, const NoiseSchedule& schedule, std::uint64_t seed);

struct ContrastivePair {
  std::vector<int> prompt;
  Image original;
  Image perturbed;
  std::uint64_t seed = 0;
};

/// Pair i is perturbed with seed base_seed + i using the closed-form marginal.
std::vector<ContrastivePair> build_pairs(const std::vector<std::vector<int>>& prompts,
                                         const std::vector<Image>& images, const NoiseSchedule& schedule,
                                         std::uint64_t base_seed, unsigned threads = 1);

}  // namespace vce::perturb
