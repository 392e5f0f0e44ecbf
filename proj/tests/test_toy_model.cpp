#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "test_util.hpp"
#include "vce/scenes.hpp"
#include "vce/shift_weighting.hpp"
#include "vce/toy_model.hpp"

using namespace vce;
using namespace vce::toy;

namespace {

Image noise_image(const ToyModelConfig& c, std::uint64_t seed) {
  GaussianRng rng(seed);
  std::vector<float> v(c.image_channels * c.image_size * c.image_size);
  for (auto& x : v) x = static_cast<float>(rng.normal() * 0.5);
  return Image(c.image_channels, c.image_size, c.image_size, v);
}

bool params_equal(const ToyModel& a, const ToyModel& b) {
  const TensorMap ta = a.to_tensors(), tb = b.to_tensors();
  if (ta.size() != tb.size()) return false;
  for (const auto& [name, t] : ta)
    if (!tb.contains(name) || !tb.at(name).bit_equal(t)) return false;
  return true;
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < logits.dim(1); ++v)
    if (logits.at(row, v) > logits.at(row, best)) best = v;
  return best;
}

}  // namespace

TEST_CASE("init is deterministic and shaped by the config") {
  const ToyModelConfig c;
  const ToyModel a = init_model(c), b = init_model(c);
  CHECK(params_equal(a, b));
  CHECK(a.embed_tok.shape() == std::vector<std::size_t>{64, 32});
  CHECK(a.embed_patch.shape() == std::vector<std::size_t>{16, 32});
  CHECK(a.unembed.shape() == std::vector<std::size_t>{32, 64});
  REQUIRE(a.blocks.size() == 8);
  for (const auto& blk : a.blocks) {
    CHECK(blk.wq.shape() == std::vector<std::size_t>{32, 32});
    CHECK(blk.wo.shape() == std::vector<std::size_t>{32, 32});
    CHECK(blk.w1.shape() == std::vector<std::size_t>{32, 64});
    CHECK(blk.w2.shape() == std::vector<std::size_t>{64, 32});
  }
  const TensorMap names = a.to_tensors();
  CHECK(names.contains("embed.tok"));
  CHECK(names.contains("embed.patch"));
  CHECK(names.contains("unembed"));
  CHECK(names.contains("layer7.w2"));
  CHECK(names.size() == 3 + 6 * 8);

  ToyModelConfig other = c;
  other.seed = c.seed + 1;
  CHECK_FALSE(params_equal(a, init_model(other)));
}

TEST_CASE("config validation") {
  ToyModelConfig c;
  c.patch_size = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.dim = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.max_seq = 10;  // shorter than the 16 visual tokens
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  const std::string round = config_to_json(ToyModelConfig{});
  CHECK(config_to_json(config_from_json(round)) == round);
}

TEST_CASE("forward shapes, determinism and normalised softmax") {
  const ToyModelConfig c;
  const ToyModel m = init_model(c);
  const Image img = noise_image(c, 1);
  const std::vector<int> tokens{61, 62, 63, 4, 5};
  const ForwardTrace a = forward(m, tokens, img), b = forward(m, tokens, img);
  CHECK(a.seq_len == 16 + tokens.size());
  CHECK(a.hidden.shape() == std::vector<std::size_t>{8, a.seq_len, 32});
  CHECK(a.logits.shape() == std::vector<std::size_t>{a.seq_len, 64});
  CHECK(a.hidden.bit_equal(b.hidden));
  CHECK(a.logits.bit_equal(b.logits));
  CHECK(a.multiply_adds == b.multiply_adds);
  CHECK(a.multiply_adds > 0);
  for (std::size_t r = 0; r < a.seq_len; ++r) {
    double mx = -INFINITY;
    for (std::size_t v = 0; v < 64; ++v) mx = std::max(mx, static_cast<double>(a.logits.at(r, v)));
    double z = 0.0;
    for (std::size_t v = 0; v < 64; ++v) z += std::exp(a.logits.at(r, v) - mx);
    double total = 0.0;
    for (std::size_t v = 0; v < 64; ++v) total += std::exp(a.logits.at(r, v) - mx) / z;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("causality: later tokens do not move earlier positions") {
  const ToyModelConfig c;
  const ToyModel m = make_planted_fixture(c).model;
  const Image img = noise_image(c, 2);
  std::vector<int> tokens{61, 62, 63, 3, 6, 1, 8, 2, 0};
  const ForwardTrace base = forward(m, tokens, img);
  GaussianRng rng(33);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t j = 1 + rng.below(tokens.size() - 1);  // prompt/response index to mutate
    std::vector<int> mutated = tokens;
    mutated[j] = (mutated[j] + 17) % 64;
    const ForwardTrace other = forward(m, mutated, img);
    const std::size_t cut = 16 + j;  // first sequence position that may change
    for (std::size_t l = 0; l < 8; ++l)
      for (std::size_t p = 0; p < cut; ++p) {
        const auto x = base.hidden_row(l, p), y = other.hidden_row(l, p);
        CHECK(std::equal(x.begin(), x.end(), y.begin()));
      }
    for (std::size_t p = 0; p < cut; ++p)
      for (std::size_t v = 0; v < 64; ++v) CHECK(base.logits.at(p, v) == other.logits.at(p, v));
    bool changed = false;
    for (std::size_t v = 0; v < 64; ++v) changed = changed || base.logits.at(cut, v) != other.logits.at(cut, v);
    CHECK(changed);
  }
}

TEST_CASE("length overflow is rejected") {
  const ToyModelConfig c;
  const ToyModel m = init_model(c);
  const Image img = noise_image(c, 3);
  CHECK_THROWS_AS(forward(m, std::vector<int>(49, 1), img), std::length_error);
  CHECK_NOTHROW(forward(m, std::vector<int>(48, 1), img));
  CHECK_THROWS_AS(generate_greedy(m, std::vector<int>{1, 2, 3}, img, 46), std::length_error);
  CHECK_THROWS_AS(forward(m, std::vector<int>{64}, img), std::out_of_range);
}

TEST_CASE("greedy decoding matches step-by-step argmax") {
  const ToyModelConfig c;
  const PlantedFixture fx = make_planted_fixture(c);
  const std::vector<int> prompt = default_prompt(c);
  GaussianRng rng(4);
  for (int trial = 0; trial < 6; ++trial) {
    const Scene scene = sample_scene(fx.scenes, rng);
    const Image img = trial % 2 ? noise_image(c, 100 + trial) : scene.image;
    const std::vector<int> out = generate_greedy(fx.model, prompt, img, 16);
    CHECK(generate_greedy(fx.model, prompt, img, 16) == out);
    std::vector<int> seq = prompt;
    std::vector<int> manual;
    for (std::size_t step = 0; step < 16; ++step) {
      const ForwardTrace t = forward(fx.model, seq, img);
      const int next = static_cast<int>(argmax_row(t.logits, t.seq_len - 1));
      manual.push_back(next);
      if (next == kEndToken) break;
      seq.push_back(next);
    }
    CHECK(out == manual);
  }
  CHECK(generate_greedy(fx.model, prompt, noise_image(c, 5), 0).empty());
}

TEST_CASE("teacher forcing lines up with greedy output") {
  const ToyModelConfig c;
  const PlantedFixture fx = make_planted_fixture(c);
  const std::vector<int> prompt = default_prompt(c);
  GaussianRng rng(6);
  const Scene scene = sample_scene(fx.scenes, rng, fx.trigger);
  const std::vector<int> caption = generate_greedy(fx.model, prompt, scene.image, 16);
  REQUIRE(!caption.empty());
  const ResponseTrace t = teacher_forced_trace(fx.model, prompt, caption, scene.image);
  CHECK(t.length() == caption.size());
  CHECK(t.hidden.shape() == std::vector<std::size_t>{8, caption.size(), 32});
  CHECK(t.logits.shape() == std::vector<std::size_t>{caption.size(), 64});
  for (std::size_t i = 0; i < caption.size(); ++i) {
    float mx = -INFINITY;
    for (std::size_t v = 0; v < 64; ++v) mx = std::max(mx, t.logits.at(i, v));
    CHECK(t.token_logit(i) == mx);
  }
  // Rows are the predicting positions of the full forward pass.
  std::vector<int> seq = prompt;
  seq.insert(seq.end(), caption.begin(), caption.end());
  const ForwardTrace full = forward(fx.model, seq, scene.image);
  for (std::size_t i = 0; i < caption.size(); ++i) {
    const std::size_t pos = 16 + prompt.size() + i - 1;
    for (std::size_t l = 0; l < 8; ++l) {
      const auto a = t.hidden_row(l, i), b = full.hidden_row(l, pos);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
    CHECK(t.logits.at(i, 5) == full.logits.at(pos, 5));
  }
  const Tensor slice = t.layer_states(3);
  CHECK(slice.shape() == std::vector<std::size_t>{caption.size(), 32});

  const ResponseTrace empty = teacher_forced_trace(fx.model, prompt, std::vector<int>{}, scene.image);
  CHECK(empty.length() == 0);
  CHECK(empty.logits.dim(0) == 0);

  const ResponseTrace noisy = teacher_forced_trace(fx.model, prompt, caption, noise_image(c, 7));
  bool differs = false;
  for (std::size_t i = 0; i < caption.size(); ++i) differs = differs || noisy.token_logit(i) != t.token_logit(i);
  CHECK(differs);
}

TEST_CASE("planting with zero strength is a no-op; direction is unit norm") {
  const ToyModelConfig c;
  const ToyModel base = init_model(c);
  const PlantedPrior zero = plant_prior(base, 3, 6, 4, 0.0);
  CHECK(params_equal(zero.model, base));
  const PlantedPrior planted = plant_prior(base, 3, 6, 4, 5.0);
  double norm = 0.0;
  for (float x : planted.direction) norm += static_cast<double>(x) * x;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
  // Only layer 4's W2 moves, by a rank-1 term in row `unit`.
  const TensorMap a = base.to_tensors(), b = planted.model.to_tensors();
  for (const auto& [name, t] : a) {
    if (name == "layer4.w2") continue;
    CHECK(b.at(name).bit_equal(t));
  }
  const Tensor& w0 = a.at("layer4.w2");
  const Tensor& w1 = b.at("layer4.w2");
  for (std::size_t r = 0; r < w0.dim(0); ++r)
    for (std::size_t col = 0; col < w0.dim(1); ++col) {
      const double delta = static_cast<double>(w1.at(r, col)) - w0.at(r, col);
      const double expected = r == planted.unit ? 5.0 * planted.direction[col] : 0.0;
      CHECK(delta == doctest::Approx(expected).epsilon(1e-5).scale(1.0));
    }
  CHECK_THROWS_AS(plant_prior(base, 3, 3, 4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(plant_prior(base, 3, 6, 8, 1.0), std::out_of_range);
}

TEST_CASE("planted prior makes the trigger pull in the spurious token") {
  const ToyModelConfig c;
  const auto scan = [&](double strength) {
    const PlantedFixture fx = make_planted_fixture(c, strength);
    GaussianRng rng(8);
    std::size_t with_trigger = 0, with_spurious = 0;
    for (int i = 0; i < 20; ++i) {
      const Scene scene = sample_scene(fx.scenes, rng, fx.trigger, {fx.spurious});
      const auto cap = generate_greedy(fx.model, default_prompt(c), scene.image, 16);
      if (std::ranges::find(cap, fx.trigger) == cap.end()) continue;
      ++with_trigger;
      if (std::ranges::find(cap, fx.spurious) != cap.end()) ++with_spurious;
    }
    return std::pair{with_trigger, with_spurious};
  };
  const auto [t0, s0] = scan(0.0);
  const auto [t1, s1] = scan(kDefaultPlantStrength);
  CHECK(t0 == 20);
  CHECK(s0 == 0);
  CHECK(t1 == 20);
  CHECK(s1 == 20);
}

TEST_CASE("scene model lists exactly the objects of a clean scene") {
  const ToyModelConfig c;
  const PlantedFixture fx = make_planted_fixture(c, 0.0);
  GaussianRng rng(9);
  for (int i = 0; i < 20; ++i) {
    const Scene scene = sample_scene(fx.scenes, rng);
    auto cap = generate_greedy(fx.model, default_prompt(c), scene.image, 16);
    REQUIRE(!cap.empty());
    CHECK(cap.back() == kEndToken);
    cap.pop_back();
    std::ranges::sort(cap);
    CHECK(cap == scene.objects);
  }
}

TEST_CASE("spurious-token logit shift exceeds control tokens") {
  const ToyModelConfig c;
  const PlantedFixture fx = make_planted_fixture(c);
  const auto prompt = default_prompt(c);
  const auto schedule = perturb::default_schedule();
  GaussianRng rng(10);
  std::vector<int> controls;
  while (controls.size() < 10) {
    const int t = static_cast<int>(rng.below(64));
    if (t != fx.spurious && std::ranges::find(controls, t) == controls.end()) controls.push_back(t);
  }
  double spurious = 0.0, control = 0.0;
  std::size_t rows = 0;
  for (int i = 0; i < 32; ++i) {
    const Scene scene = sample_scene(fx.scenes, rng, fx.trigger, {fx.spurious});
    const Image pert = perturb::diffuse_closed_form(scene.image, schedule, 500 + i);
    const auto cap = generate_greedy(fx.model, prompt, scene.image, 16);
    const auto a = teacher_forced_trace(fx.model, prompt, cap, scene.image);
    const auto b = teacher_forced_trace(fx.model, prompt, cap, pert);
    for (std::size_t r = 0; r < cap.size(); ++r) {
      spurious += std::abs(static_cast<double>(b.logits.at(r, fx.spurious)) - a.logits.at(r, fx.spurious));
      for (int t : controls) control += std::abs(static_cast<double>(b.logits.at(r, t)) - a.logits.at(r, t)) / 10.0;
      ++rows;
    }
  }
  MESSAGE("spurious " << spurious / rows << " control " << control / rows);
  CHECK(spurious > control);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  testutil::TempDir dir;
  const ToyModelConfig c;
  const PlantedFixture fx = make_planted_fixture(c);
  save_checkpoint(fx.model, dir.path());
  const ToyModel back = load_checkpoint(dir.path());
  CHECK(params_equal(back, fx.model));
  CHECK(config_to_json(back.config) == config_to_json(fx.model.config));
  const Image img = noise_image(c, 11);
  const auto p = default_prompt(c);
  CHECK(forward(back, p, img).logits.bit_equal(forward(fx.model, p, img).logits));
}
