#include "vce/perturbation.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "vce/parallel.hpp"
#include "vce/rng.hpp"

namespace vce::perturb {

Image::Image(std::size_t c, std::size_t h, std::size_t w, std::vector<float> v)
    : channels(c), height(h), width(w), values(std::move(v)) {
  if (values.size() != c * h * w) throw std::invalid_argument("image: value count does not match C x H x W");
  for (float x : values)
    if (!std::isfinite(x)) throw std::invalid_argument("image: non-finite pixel");
}

Tensor Image::to_tensor(std::string name) const {
  return Tensor(std::move(name), {channels, height, width}, values);
}

Image Image::from_tensor(const Tensor& t) {
  if (t.rank() != 3) throw std::invalid_argument("image tensor '" + t.name() + "' must have rank 3 (C,H,W)");
  return Image(t.dim(0), t.dim(1), t.dim(2), t.values());
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("noise schedule needs at least one step");
  NoiseSchedule s;
  s.alpha_bars.reserve(betas.size());
  double running = 1.0;
  for (double b : betas) {
    if (!(b >= 0.0 && b <= 1.0)) throw std::invalid_argument("beta outside [0, 1]: " + std::to_string(b));
    running *= (1.0 - b);
    s.alpha_bars.push_back(running);
  }
  s.betas = std::move(betas);
  return s;
}

NoiseSchedule make_linear_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(steps);
  if (steps == 1) {
    betas[0] = beta_start;
  } else {
    const double span = beta_end - beta_start;
    for (std::size_t t = 0; t < steps; ++t)
      betas[t] = beta_start + span * static_cast<double>(t) / static_cast<double>(steps - 1);
    betas.back() = beta_end;
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

Image diffuse_stepwise(const Image& image, const NoiseSchedule& schedule, std::uint64_t seed) {
  GaussianRng rng(seed);
  std::vector<double> x(image.values.begin(), image.values.end());
  for (double beta : schedule.betas) {
    const double keep = std::sqrt(1.0 - beta);
    const double noise = std::sqrt(beta);
    for (double& v : x) v = keep * v + noise * rng.normal();
  }
  Image out = image;
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = static_cast<float>(x[i]);
  return out;
}

Image diffuse_closed_form(const Image& image, const NoiseSchedule& schedule, std::uint64_t seed) {
  GaussianRng rng(seed);
  const double abar = schedule.final_alpha_bar();
  const double keep = std::sqrt(abar);
  const double noise = std::sqrt(1.0 - abar);
  Image out = image;
  for (float& v : out.values) v = static_cast<float>(keep * static_cast<double>(v) + noise * rng.normal());
  return out;
}

std::vector<ContrastivePair> build_pairs(const std::vector<std::vector<int>>& prompts,
                                         const std::vector<Image>& images, const NoiseSchedule& schedule,
                                         std::uint64_t base_seed, unsigned threads) {
  if (prompts.size() != images.size())
    throw std::invalid_argument("build_pairs: " + std::to_string(prompts.size()) + " prompts vs " +
                                std::to_string(images.size()) + " images");
  if (images.empty()) throw std::invalid_argument("build_pairs: need at least one pair");
  std::vector<ContrastivePair> pairs(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    const std::uint64_t seed = base_seed + i;
    pairs[i] = ContrastivePair{prompts[i], images[i], diffuse_closed_form(images[i], schedule, seed), seed};
  });
  return pairs;
}

}  // namespace vce::perturb
