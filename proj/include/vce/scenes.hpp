#pragma once

// Synthetic scenes and a hand-wired fixture model that describes them.
//
// A scene is a 16x16 single-channel image on a -1 background holding 1-3
// objects. Each object is an 8x8 blob occupying one quadrant; object o tiles
// its 4x4 patch with row (o + 1) of the 16x16 Sylvester-Hadamard matrix, so
// every object pattern is zero-mean and orthogonal to the others and to the
// background. Object o is named by token id `first_object_token + o`.

#include <cstdint>
#include <optional>
#include <vector>

#include "vce/perturbation.hpp"
#include "vce/rng.hpp"
#include "vce/toy_model.hpp"

namespace vce::toy {

struct SceneSpec {
  std::size_t object_count = 8;
  int first_object_token = 1;
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t max_objects = 3;

  int object_token(std::size_t object) const { return first_object_token + static_cast<int>(object); }
  bool is_object_token(int token) const {
    return token >= first_object_token && token < first_object_token + static_cast<int>(object_count);
  }
  std::vector<int> object_tokens() const;
};

struct Scene {
  std::vector<int> objects;  // object token ids, ascending
  Image image;
};

/// Patch pattern (patch_size^2 values in {-1, +1}) for an object index.
std::vector<float> object_pattern(const SceneSpec& spec, std::size_t object);

/// Renders objects (token ids) into the given quadrants (0..3, raster order).
Image render_scene(const SceneSpec& spec, const std::vector<int>& objects, const std::vector<std::size_t>& quadrants);

/// Samples 1..max_objects distinct objects in distinct quadrants. When
/// `required` is set that object token is always included; tokens listed in
/// `excluded` never appear.
Scene sample_scene(const SceneSpec& spec, GaussianRng& rng, std::optional<int> required = std::nullopt,
                   const std::vector<int>& excluded = {});

/// Fixed prompt ("describe the image") used by the fixtures: the last three vocabulary ids.
std::vector<int> default_prompt(const ToyModelConfig& config);

/// Knobs of the hand-wired scene model. Gains are in logit units.
struct SceneModelParams {
  int trigger = 0;          // token whose mention opens the prior gate
  std::size_t gate_layer = 4;
  std::size_t gate_unit = 0;
  double gate_drive = 2.0;  // gate pre-activation from the trigger mention
  double gate_damping = 1.2;  // gate suppression from clean visual evidence
  double presence_gain = 3.0;
  double mention_penalty = 6.0;
  double repeat_penalty = 2.0;
  double end_bias = 1.0;
  double filler_bias = -1.0;
};

/// Builds a model on top of init_model(config) that lists the objects of a
/// scene and then emits the end token. Residual layout (D >= 26):
///   [0, K)      visual presence of object k
///   K           constant (every text token)
///   K + 1       visual background evidence
///   [K+2, 2K+2) current-token identity for object k
///   [2K+2, 3K+2) running mention count for object k
/// Layer 0 attention is uniform and copies presence, background and mention
/// features; the gate unit in `gate_layer` fires on the trigger mention and is
/// damped by clean visual evidence, so it is strongest on perturbed images.
ToyModel make_scene_model(const ToyModelConfig& config, const SceneSpec& spec, const SceneModelParams& params);

/// Everything the end-to-end checks need about a planted fixture.
struct PlantedFixture {
  ToyModel model;
  SceneSpec scenes;
  int trigger = 0;
  int spurious = 0;
  std::size_t layer = 0;
  std::vector<float> direction;
};

inline constexpr double kDefaultPlantStrength = 12.0;

/// Desk fixture: scene model with trigger = object 2, spurious = object 5, prior planted in layer L/2.
PlantedFixture make_planted_fixture(const ToyModelConfig& config = {}, double strength = kDefaultPlantStrength);

}  // namespace vce::toy
