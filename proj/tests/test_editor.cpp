#include <doctest.h>

#include <cmath>
#include <random>

#include <json.hpp>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vce/editor.hpp"
#include "vce/scenes.hpp"

using namespace vce;
using namespace vce::editor;

namespace {

subspace::HalluSpace space_from(const oracle::Mat& basis, std::size_t layer = 0) {
  subspace::HalluSpace s;
  s.layer = layer;
  std::vector<float> v;
  for (const auto& row : basis)
    for (double x : row) v.push_back(static_cast<float>(x));
  s.basis = Tensor("layer" + std::to_string(layer) + ".S", {basis.size(), basis[0].size()}, v);
  s.spectrum.assign(basis[0].size(), 1.0);
  return s;
}

Tensor random_weight(std::mt19937_64& rng, std::size_t rows, std::size_t cols, std::string name = "w") {
  const oracle::Mat m = oracle::random_matrix(rng, rows, cols);
  std::vector<float> v;
  for (const auto& r : m)
    for (double x : r) v.push_back(static_cast<float>(x));
  return Tensor(std::move(name), {rows, cols}, v);
}

double frob(const Tensor& t) {
  double s = 0.0;
  for (float x : t.data()) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

double frob_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::pow(static_cast<double>(a[i]) - b[i], 2);
  return std::sqrt(s);
}

/// max_i || W s_i || computed with the oracle's float-to-double arithmetic.
double annihilation(const Tensor& w, const subspace::HalluSpace& s) {
  double worst = 0.0;
  for (std::size_t j = 0; j < s.rank(); ++j) {
    double norm = 0.0;
    for (std::size_t r = 0; r < w.dim(0); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < w.dim(1); ++c) dot += static_cast<double>(w.at(r, c)) * s.basis.at(c, j);
      norm += dot * dot;
    }
    worst = std::max(worst, std::sqrt(norm));
  }
  return worst;
}

}  // namespace

TEST_CASE("target parsing") {
  CHECK(parse_target("mlp") == Target::mlp_write);
  CHECK(parse_target("attn") == Target::attn_write);
  CHECK(target_suffix(Target::mlp_write) == "w2");
  CHECK(target_suffix(Target::attn_write) == "wo");
  CHECK(parse_targets("mlp,attn") == std::set<Target>{Target::mlp_write, Target::attn_write});
  CHECK_THROWS_AS(parse_target("w3"), std::invalid_argument);
  CHECK_THROWS_AS(parse_targets(""), std::invalid_argument);
  const EditPlan half = EditPlan::deepest_half(8);
  CHECK(half.first_layer == 4);
  CHECK(half.last_layer == 7);
}

TEST_CASE("projecting onto e_D zeroes the last column") {
  std::mt19937_64 rng(1);
  const Tensor w = random_weight(rng, 5, 4);
  oracle::Mat e = oracle::zeros(4, 1);
  e[3][0] = 1.0;
  const Tensor out = edit_weight(w, space_from(e));
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 3; ++c) CHECK(out.at(r, c) == w.at(r, c));
    CHECK(out.at(r, 3) == 0.0f);
  }
  CHECK_THROWS_AS(edit_weight(random_weight(rng, 5, 3), space_from(e)), std::invalid_argument);
}

TEST_CASE("weights already orthogonal to the subspace are fixed points") {
  std::mt19937_64 rng(2);
  const oracle::Mat s = oracle::random_orthonormal(rng, 16, 3);
  const auto space = space_from(s);
  Tensor w = random_weight(rng, 7, 16);
  w = edit_weight(w, space);
  const Tensor again = edit_weight(w, space);
  CHECK(frob_diff(again, w) <= 1e-6);
}

TEST_CASE("edit algebra on random cases") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng() % 8;
    const auto space = space_from(oracle::random_orthonormal(rng, 32, k));
    const Tensor w = random_weight(rng, 16 + rng() % 48, 32);
    const Tensor once = edit_weight(w, space);
    const Tensor twice = edit_weight(once, space);
    CHECK(frob_diff(twice, once) <= 1e-6);
    CHECK(annihilation(once, space) <= 1e-5 * frob(w));
    CHECK(frob(once) <= frob(w));
    CHECK(frob(once) < frob(w));  // random W always has a component in the subspace
  }
}

TEST_CASE("model edits touch exactly the planned tensors") {
  const toy::ToyModelConfig c;
  const toy::ToyModel model = toy::make_planted_fixture(c).model;
  std::mt19937_64 rng(4);
  SpaceMap spaces;
  for (std::size_t l = 0; l < 8; ++l) spaces[l] = space_from(oracle::random_orthonormal(rng, 32, 4), l);

  SUBCASE("deepest half, mlp only: four tensors differ") {
    const EditedModel edited = edit_model(model, spaces, EditPlan::deepest_half(8));
    const TensorMap a = model.to_tensors(), b = edited.model.to_tensors();
    std::set<std::string> changed;
    for (const auto& [name, t] : a)
      if (!b.at(name).bit_equal(t)) changed.insert(name);
    CHECK(changed == std::set<std::string>{"layer4.w2", "layer5.w2", "layer6.w2", "layer7.w2"});
    REQUIRE(edited.report.edits.size() == 4);
    for (const auto& e : edited.report.edits) {
      CHECK(e.residual <= 1e-5 * e.norm_before);
      CHECK(e.norm_after <= e.norm_before);
      CHECK(e.delta_norm > 0.0);
    }
    const EditedModel again = edit_model(edited.model, spaces, EditPlan::deepest_half(8));
    for (const auto& [name, t] : b) CHECK(frob_diff(again.model.to_tensors().at(name), t) <= 1e-6);
  }
  SUBCASE("both targets") {
    const EditedModel edited = edit_model(model, spaces, EditPlan{2, 3, {Target::mlp_write, Target::attn_write}});
    const TensorMap a = model.to_tensors(), b = edited.model.to_tensors();
    std::set<std::string> changed;
    for (const auto& [name, t] : a)
      if (!b.at(name).bit_equal(t)) changed.insert(name);
    CHECK(changed == std::set<std::string>{"layer2.w2", "layer2.wo", "layer3.w2", "layer3.wo"});
  }
  SUBCASE("empty plan is a no-op") {
    const EditedModel edited = edit_model(model, spaces, EditPlan{5, 4, {Target::mlp_write}});
    CHECK(edited.report.edits.empty());
    const TensorMap a = model.to_tensors(), b = edited.model.to_tensors();
    for (const auto& [name, t] : a) CHECK(b.at(name).bit_equal(t));
  }
  SUBCASE("errors leave the parameters untouched") {
    SpaceMap partial = spaces;
    partial.erase(6);
    TensorMap tensors = model.to_tensors();
    CHECK_THROWS_AS(edit_tensors(tensors, partial, EditPlan::deepest_half(8)), std::out_of_range);
    for (const auto& [name, t] : model.to_tensors()) CHECK(tensors.at(name).bit_equal(t));
    CHECK_THROWS_AS(edit_model(model, spaces, EditPlan{6, 8, {Target::mlp_write}}), std::out_of_range);
    TensorMap missing = model.to_tensors();
    missing.erase("layer5.wo");
    CHECK_THROWS_AS(edit_tensors(missing, spaces, EditPlan{4, 7, {Target::attn_write}}), std::out_of_range);
  }
}

TEST_CASE("editing leaves the inference cost unchanged") {
  const toy::ToyModelConfig c;
  const toy::PlantedFixture fx = toy::make_planted_fixture(c);
  std::mt19937_64 rng(5);
  SpaceMap spaces;
  for (std::size_t l = 4; l < 8; ++l) spaces[l] = space_from(oracle::random_orthonormal(rng, 32, 4), l);
  const toy::ToyModel edited = edit_model(fx.model, spaces, EditPlan::deepest_half(8)).model;
  GaussianRng srng(6);
  const toy::Scene scene = toy::sample_scene(fx.scenes, srng, fx.trigger);
  const auto prompt = toy::default_prompt(c);
  const std::vector<int> tokens{61, 62, 63, 3, 1, 2, 4, 5};
  CHECK(toy::forward(fx.model, tokens, scene.image).multiply_adds ==
        toy::forward(edited, tokens, scene.image).multiply_adds);
}

TEST_CASE("export round trip and report sidecar") {
  testutil::TempDir dir;
  const toy::ToyModelConfig c;
  const toy::PlantedFixture fx = toy::make_planted_fixture(c);
  std::mt19937_64 rng(7);
  SpaceMap spaces;
  for (std::size_t l = 4; l < 8; ++l) spaces[l] = space_from(oracle::random_orthonormal(rng, 32, 2), l);
  const EditedModel edited = edit_model(fx.model, spaces, EditPlan::deepest_half(8));

  toy::save_checkpoint(fx.model, dir / "orig");
  export_edited(edited.model, dir / "edited");
  CHECK(store::validate_bundle(dir / "edited").all_ok());
  const toy::ToyModel back = toy::load_checkpoint(dir / "edited");
  const auto prompt = toy::default_prompt(c);
  GaussianRng srng(8);
  const auto scene = toy::sample_scene(fx.scenes, srng);
  CHECK(toy::forward(back, prompt, scene.image).logits.bit_equal(toy::forward(edited.model, prompt, scene.image).logits));

  // Unedited tensors are byte-identical to the source checkpoint.
  const auto m0 = store::read_manifest(dir / "orig"), m1 = store::read_manifest(dir / "edited");
  std::map<std::string, std::string> h0, h1;
  for (const auto& e : m0.tensors) h0[e.name] = e.sha256;
  for (const auto& e : m1.tensors) h1[e.name] = e.sha256;
  std::size_t differing = 0;
  for (const auto& [name, h] : h0) differing += h1.at(name) != h;
  CHECK(differing == 4);

  const auto j = nlohmann::json::parse(edited.report.to_json());
  CHECK(j["edits"].size() == 4);
  CHECK(j["edits"][0].contains("residual"));
  CHECK(edited.report.to_text().find("layer4.w2") != std::string::npos);

  const TensorMap st = spaces_to_tensors(spaces);
  const SpaceMap back_spaces = spaces_from_tensors(st);
  REQUIRE(back_spaces.size() == spaces.size());
  for (const auto& [l, s] : spaces) CHECK(back_spaces.at(l).basis.bit_equal(s.basis));
}
