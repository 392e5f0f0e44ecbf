#pragma once

// Miniature autoregressive vision-language model with full tracing.
//
// Sequence layout: [visual tokens | prompt | response]. Visual tokens are
// linear patch embeddings of the image. Each block is pre-activation with no
// normalization:
//
//   h += softmax_causal(h Wq (h Wk)^T / sqrt(D)) (h Wv) Wo
//   h += gelu(h W1) W2
//
// Activations are row vectors; Wo and W2 are the matrices that write into the
// residual stream. Logits are h_L * unembed.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vce/perturbation.hpp"
#include "vce/tensor.hpp"

namespace vce::toy {

using perturb::Image;

inline constexpr int kEndToken = 0;

struct ToyModelConfig {
  std::size_t vocab = 64;
  std::size_t dim = 32;
  std::size_t layers = 8;
  std::size_t hidden = 64;
  std::size_t image_channels = 1;
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t max_seq = 64;
  std::uint64_t seed = 1234;
  double init_std = 0.02;

  std::size_t patch_pixels() const { return image_channels * patch_size * patch_size; }
  std::size_t visual_tokens() const {
    const std::size_t side = image_size / patch_size;
    return side * side;
  }
  /// Throws std::invalid_argument on any inconsistency.
  void validate() const;
};

struct LayerWeights {
  Tensor wq, wk, wv, wo;  // D x D
  Tensor w1;              // D x F
  Tensor w2;              // F x D
};

struct ToyModel {
  ToyModelConfig config;
  Tensor embed_tok;    // V x D
  Tensor embed_patch;  // patch_pixels x D
  std::vector<LayerWeights> blocks;
  Tensor unembed;      // D x V

  /// All parameters under their canonical checkpoint names.
  TensorMap to_tensors() const;
  static ToyModel from_tensors(const ToyModelConfig& config, const TensorMap& tensors);

  /// Pointer to the named parameter (canonical name), or nullptr.
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
};

std::string layer_tensor_name(std::size_t layer, const std::string& which);

/// Gaussian init with std = config.init_std for every parameter; deterministic in config.seed.
ToyModel init_model(const ToyModelConfig& config);

struct ForwardTrace {
  std::size_t seq_len = 0;
  Tensor hidden;  // [L, seq, D], post-block residual stream
  Tensor logits;  // [seq, V]
  std::uint64_t multiply_adds = 0;

  std::span<const float> hidden_row(std::size_t layer, std::size_t pos) const;
};

/// Runs the model on [visual(image) | tokens]. Throws std::length_error on overflow.
ForwardTrace forward(const ToyModel& model, std::span<const int> tokens, const Image& image);

/// Greedy decoding; the end token is included in the output when produced.
/// Ties go to the lowest token id.
std::vector<int> generate_greedy(const ToyModel& model, std::span<const int> prompt, const Image& image,
                                 std::size_t max_new);

/// Compact per-response view of a teacher-forced pass: row i of each tensor
/// belongs to the position that predicts response token i.
struct ResponseTrace {
  std::vector<int> tokens;
  Tensor hidden;  // [L, N, D]
  Tensor logits;  // [N, V]

  std::size_t length() const { return tokens.size(); }
  std::size_t layers() const { return hidden.dim(0); }
  std::size_t dim() const { return hidden.dim(2); }
  float token_logit(std::size_t i) const { return logits.at(i, static_cast<std::size_t>(tokens[i])); }
  std::span<const float> hidden_row(std::size_t layer, std::size_t i) const;
  /// N x D slice for one layer.
  Tensor layer_states(std::size_t layer) const;
};

ResponseTrace teacher_forced_trace(const ToyModel& model, std::span<const int> prompt,
                                   std::span<const int> response, const Image& image);

struct PlantedPrior {
  ToyModel model;
  std::vector<float> direction;  // unit-norm r, length D
  std::size_t unit = 0;          // MLP hidden unit carrying the prior
};

/// Adds strength * e_unit r^T to layer `layer`'s W2, where `unit` is the MLP
/// hidden unit most selective for the trigger token's embedding and r is the
/// unit direction along which the unembedding favours `spurious` over the
/// average token. strength == 0 leaves the parameters untouched.
PlantedPrior plant_prior(const ToyModel& model, int trigger, int spurious, std::size_t layer, double strength);

void save_checkpoint(const ToyModel& model, const std::filesystem::path& dir);
ToyModel load_checkpoint(const std::filesystem::path& dir);

std::string config_to_json(const ToyModelConfig& config);
ToyModelConfig config_from_json(const std::string& text);

}  // namespace vce::toy
