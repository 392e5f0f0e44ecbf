#include "vce/scenes.hpp"

#include <algorithm>
#include <bit>
#include <stdexcept>

#include "vce/rng.hpp"

namespace vce::toy {

namespace {

constexpr std::size_t kQuadrants = 4;

void zero_rows(Tensor& t, std::size_t first, std::size_t last) {
  for (std::size_t r = first; r < last; ++r) std::ranges::fill(t.row(r), 0.0f);
}

void zero_cols(Tensor& t, std::size_t first, std::size_t last) {
  for (std::size_t r = 0; r < t.dim(0); ++r)
    for (std::size_t c = first; c < last; ++c) t.at(r, c) = 0.0f;
}

}  // namespace

std::vector<int> SceneSpec::object_tokens() const {
  std::vector<int> out;
  for (std::size_t o = 0; o < object_count; ++o) out.push_back(object_token(o));
  return out;
}

std::vector<float> object_pattern(const SceneSpec& spec, std::size_t object) {
  const std::size_t n = spec.patch_size * spec.patch_size;
  if (object + 1 >= n || std::popcount(n) != 1) throw std::out_of_range("object index has no Hadamard row");
  std::vector<float> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = (std::popcount((object + 1) & j) % 2 == 0) ? 1.0f : -1.0f;
  return out;
}

Image render_scene(const SceneSpec& spec, const std::vector<int>& objects, const std::vector<std::size_t>& quadrants) {
  if (objects.size() != quadrants.size()) throw std::invalid_argument("render_scene: objects/quadrants mismatch");
  const std::size_t size = spec.image_size, p = spec.patch_size, half = size / 2;
  std::vector<float> px(size * size, -1.0f);
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (!spec.is_object_token(objects[i])) throw std::invalid_argument("render_scene: not an object token");
    if (quadrants[i] >= kQuadrants) throw std::out_of_range("render_scene: quadrant out of range");
    const auto pattern = object_pattern(spec, static_cast<std::size_t>(objects[i] - spec.first_object_token));
    const std::size_t y0 = (quadrants[i] / 2) * half, x0 = (quadrants[i] % 2) * half;
    for (std::size_t y = 0; y < half; ++y)
      for (std::size_t x = 0; x < half; ++x) px[(y0 + y) * size + x0 + x] = pattern[(y % p) * p + (x % p)];
  }
  return Image(1, size, size, std::move(px));
}

Scene sample_scene(const SceneSpec& spec, GaussianRng& rng, std::optional<int> required, const std::vector<int>& excluded) {
  std::vector<int> pool;
  for (int tok : spec.object_tokens())
    if (std::ranges::find(excluded, tok) == excluded.end() && tok != required) pool.push_back(tok);
  const std::size_t max_objects = std::min(spec.max_objects, kQuadrants);
  std::size_t count = 1 + static_cast<std::size_t>(rng.below(max_objects));

  std::vector<int> objects;
  if (required) {
    objects.push_back(*required);
    --count;
  }
  for (std::size_t i = 0; i < count && !pool.empty(); ++i) {
    const std::size_t pick = static_cast<std::size_t>(rng.below(pool.size()));
    objects.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  std::vector<std::size_t> quadrants{0, 1, 2, 3};
  for (std::size_t i = quadrants.size() - 1; i > 0; --i)
    std::swap(quadrants[i], quadrants[static_cast<std::size_t>(rng.below(i + 1))]);
  quadrants.resize(objects.size());

  Scene scene;
  scene.image = render_scene(spec, objects, quadrants);
  std::ranges::sort(objects);
  scene.objects = std::move(objects);
  return scene;
}

std::vector<int> default_prompt(const ToyModelConfig& config) {
  const int v = static_cast<int>(config.vocab);
  return {v - 3, v - 2, v - 1};
}

ToyModel make_scene_model(const ToyModelConfig& config, const SceneSpec& spec, const SceneModelParams& params) {
  const std::size_t K = spec.object_count, D = config.dim, V = config.vocab;
  const std::size_t kConst = K, kBackground = K + 1, kIdent = K + 2, kMention = 2 * K + 2, kUsed = 3 * K + 2;
  if (D < kUsed) throw std::invalid_argument("scene model needs dim >= 3 * objects + 2");
  if (static_cast<std::size_t>(spec.first_object_token) + K + 3 > V)
    throw std::invalid_argument("scene model: vocabulary too small for objects + prompt");
  if (spec.first_object_token <= kEndToken) throw std::invalid_argument("scene model: objects must follow the end token");
  if (config.image_channels != 1 || config.image_size != spec.image_size || config.patch_size != spec.patch_size ||
      spec.image_size % (2 * spec.patch_size) != 0)
    throw std::invalid_argument("scene model: image geometry mismatch");
  if (!spec.is_object_token(params.trigger)) throw std::invalid_argument("scene model: trigger must be an object");
  if (params.gate_layer >= config.layers || params.gate_unit >= config.hidden)
    throw std::out_of_range("scene model: gate layer/unit out of range");

  ToyModel m = init_model(config);
  const std::size_t P = config.visual_tokens();
  const std::size_t patches_per_object = (spec.image_size / 2 / spec.patch_size) * (spec.image_size / 2 / spec.patch_size);
  // Reference context length: visual tokens + 3 prompt tokens + first response token.
  const double n_ref = static_cast<double>(P + 4);
  const double attn_gain = n_ref / static_cast<double>(patches_per_object);  // present object reads ~1 at n_ref
  const double mention_gain = n_ref;                                          // one mention reads ~1 at n_ref

  // Text tokens: constant plus identity for object tokens.
  zero_cols(m.embed_tok, 0, kUsed);
  for (std::size_t t = 0; t < V; ++t) m.embed_tok.at(t, kConst) = 1.0f;
  for (std::size_t o = 0; o < K; ++o)
    m.embed_tok.at(static_cast<std::size_t>(spec.object_token(o)), kIdent + o) = 1.0f;

  // Patches: unit coefficient on the object's presence dim, or on background for a -1 patch.
  const std::size_t pp = config.patch_pixels();
  zero_cols(m.embed_patch, 0, kUsed);
  for (std::size_t o = 0; o < K; ++o) {
    const auto pattern = object_pattern(spec, o);
    for (std::size_t px = 0; px < pp; ++px) m.embed_patch.at(px, o) = pattern[px] / static_cast<float>(pp);
  }
  for (std::size_t px = 0; px < pp; ++px) m.embed_patch.at(px, kBackground) = -1.0f / static_cast<float>(pp);

  // Layer 0: uniform causal attention copying presence, background and mentions.
  LayerWeights& first = m.blocks[0];
  for (Tensor* t : {&first.wq, &first.wk, &first.wv, &first.wo}) std::ranges::fill(t->data(), 0.0f);
  for (std::size_t o = 0; o < K; ++o) {
    first.wv.at(o, o) = 1.0f;
    first.wo.at(o, o) = static_cast<float>(attn_gain);
    first.wv.at(kIdent + o, kIdent + o) = 1.0f;
    first.wo.at(kIdent + o, kMention + o) = static_cast<float>(mention_gain);
  }
  first.wv.at(kBackground, kBackground) = 1.0f;
  first.wo.at(kBackground, kBackground) = static_cast<float>(attn_gain);

  // Gate unit: driven by the trigger mention, damped by total clean visual evidence.
  const double clean_evidence = attn_gain * static_cast<double>(P) / n_ref;
  Tensor& w1 = m.blocks[params.gate_layer].w1;
  for (std::size_t d = 0; d < D; ++d) w1.at(d, params.gate_unit) = 0.0f;
  const std::size_t trig = static_cast<std::size_t>(params.trigger - spec.first_object_token);
  w1.at(kIdent + trig, params.gate_unit) = static_cast<float>(params.gate_drive);
  const auto damp = static_cast<float>(-params.gate_damping / clean_evidence);
  for (std::size_t o = 0; o < K; ++o) w1.at(o, params.gate_unit) = damp;
  w1.at(kBackground, params.gate_unit) = damp;

  // Readout.
  zero_rows(m.unembed, 0, kUsed);
  for (std::size_t t = 0; t < V; ++t) {
    if (static_cast<int>(t) == kEndToken)
      m.unembed.at(kConst, t) = static_cast<float>(params.end_bias);
    else if (!spec.is_object_token(static_cast<int>(t)))
      m.unembed.at(kConst, t) = static_cast<float>(params.filler_bias);
  }
  for (std::size_t o = 0; o < K; ++o) {
    const auto tok = static_cast<std::size_t>(spec.object_token(o));
    m.unembed.at(o, tok) = static_cast<float>(params.presence_gain);
    m.unembed.at(kMention + o, tok) = static_cast<float>(-params.mention_penalty);
    m.unembed.at(kIdent + o, tok) = static_cast<float>(-params.repeat_penalty);
  }
  return m;
}

PlantedFixture make_planted_fixture(const ToyModelConfig& config, double strength) {
  SceneSpec spec;
  spec.image_size = config.image_size;
  spec.patch_size = config.patch_size;
  PlantedFixture fx;
  fx.scenes = spec;
  fx.trigger = spec.object_token(2);
  fx.spurious = spec.object_token(5);
  fx.layer = config.layers / 2;
  SceneModelParams params;
  params.trigger = fx.trigger;
  params.gate_layer = fx.layer;
  const ToyModel base = make_scene_model(config, spec, params);
  PlantedPrior planted = plant_prior(base, fx.trigger, fx.spurious, fx.layer, strength);
  fx.model = std::move(planted.model);
  fx.direction = std::move(planted.direction);
  return fx;
}

}  // namespace vce::toy
