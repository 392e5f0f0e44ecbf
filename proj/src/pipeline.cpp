#include "vce/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "vce/parallel.hpp"
#include "vce/rng.hpp"
#include "vce/subspace.hpp"
#include "vce/tensor_store.hpp"

namespace vce::pipeline {

using json = nlohmann::json;

namespace {

constexpr const char* kPromptsFile = "prompts.txt";
constexpr const char* kTruthFile = "truth.txt";
constexpr const char* kCaptionsFile = "captions.txt";
constexpr const char* kFixtureFile = "fixture.json";
constexpr const char* kConfigFile = "config.json";
constexpr const char* kEditReportText = "edit_report.txt";
constexpr const char* kEditReportJson = "edit_report.json";
constexpr const char* kSpectraFile = "spectra.txt";

std::string read_text(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::trunc);
  out << text;
  out.close();
  if (!out) throw std::runtime_error("cannot write " + file.string());
}

void copy_if_present(const fs::path& from, const fs::path& to) {
  if (fs::exists(from)) fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

Tensor ids_tensor(std::string name, const std::vector<int>& ids) {
  const std::size_t n = ids.size();
  return Tensor(std::move(name), {n}, std::vector<float>(ids.begin(), ids.end()));
}

std::vector<int> tensor_ids(const Tensor& t) {
  std::vector<int> out;
  out.reserve(t.size());
  for (float x : t.data()) {
    if (x != std::floor(x) || x < 0.0f) throw std::invalid_argument("'" + t.name() + "' holds a non-integer token id");
    out.push_back(static_cast<int>(x));
  }
  return out;
}

Tensor doubles_tensor(std::string name, const std::vector<double>& values) {
  const std::size_t n = values.size();
  return Tensor(std::move(name), {n}, std::vector<float>(values.begin(), values.end()));
}

std::string pair_name(std::size_t i, const std::string& suffix) { return "pair" + std::to_string(i) + "." + suffix; }

std::size_t count_indexed(const TensorMap& tensors, const std::string& prefix, const std::string& suffix) {
  std::size_t n = 0;
  while (tensors.contains(prefix + std::to_string(n) + suffix)) ++n;
  return n;
}

std::vector<perturb::Image> read_images(const fs::path& dir) {
  const TensorMap tensors = store::read_bundle(dir);
  const std::size_t n = count_indexed(tensors, "image", "");
  std::vector<perturb::Image> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(perturb::Image::from_tensor(tensors.at("image" + std::to_string(i))));
  return out;
}

toy::ResponseTrace slice_trace(const Tensor& hidden, const Tensor& logits, const std::vector<int>& tokens) {
  toy::ResponseTrace t;
  t.tokens = tokens;
  t.hidden = hidden;
  t.logits = logits;
  if (hidden.rank() != 3 || logits.rank() != 2 || hidden.dim(1) != tokens.size() || logits.dim(0) != tokens.size())
    throw std::invalid_argument("trace tensors do not match token count");
  return t;
}

}  // namespace

// ---- text files -------------------------------------------------------------

TokenLines read_token_lines(const fs::path& file) {
  const std::string text = read_text(file);
  TokenLines out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::istringstream line(text.substr(start, end - start));
    std::vector<int> ids;
    for (std::string tok; line >> tok;) {
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v < 0)
        throw std::invalid_argument(file.string() + ": bad token id '" + tok + "' on line " + std::to_string(out.size() + 1));
      ids.push_back(v);
    }
    out.push_back(std::move(ids));
    start = end + 1;
  }
  return out;
}

void write_token_lines(const fs::path& file, const TokenLines& lines) {
  std::ostringstream os;
  for (const auto& line : lines) {
    for (std::size_t i = 0; i < line.size(); ++i) os << (i ? " " : "") << line[i];
    os << '\n';
  }
  write_text(file, os.str());
}

LayerRange parse_layer_range(const std::string& text) {
  static const std::regex kRange(R"(\s*(\d+)\s*(?:\.\.\s*(\d+))?\s*)");
  std::smatch m;
  if (!std::regex_match(text, m, kRange)) throw ConfigError("bad layer range '" + text + "' (expected a..b, 1-based)");
  const std::size_t a = std::stoul(m[1].str());
  const std::size_t b = m[2].matched ? std::stoul(m[2].str()) : a;
  if (a == 0 || b == 0) throw ConfigError("layer ranges are 1-based; got '" + text + "'");
  return LayerRange{a - 1, b - 1};
}

std::string format_layer_range(const LayerRange& r) {
  return std::to_string(r.first + 1) + ".." + std::to_string(r.last + 1);
}

// ---- fixture ----------------------------------------------------------------

void write_fixture_info(const fs::path& model_dir, const FixtureInfo& info) {
  json j{{"trigger", info.trigger},   {"spurious", info.spurious}, {"layer", info.layer},
         {"strength", info.strength}, {"objects", info.objects},   {"direction", info.direction}};
  write_text(model_dir / kFixtureFile, j.dump(2) + "\n");
}

std::optional<FixtureInfo> read_fixture_info(const fs::path& model_dir) {
  if (!fs::exists(model_dir / kFixtureFile)) return std::nullopt;
  const json j = json::parse(read_text(model_dir / kFixtureFile));
  FixtureInfo info;
  info.trigger = j.at("trigger").get<int>();
  info.spurious = j.at("spurious").get<int>();
  info.layer = j.at("layer").get<std::size_t>();
  info.strength = j.at("strength").get<double>();
  info.objects = j.at("objects").get<std::vector<int>>();
  info.direction = j.at("direction").get<std::vector<float>>();
  return info;
}

void stage_fixture(const toy::ToyModelConfig& config, double strength, const fs::path& out) {
  const toy::PlantedFixture fx = toy::make_planted_fixture(config, strength);
  toy::save_checkpoint(fx.model, out);
  write_fixture_info(out, {fx.trigger, fx.spurious, fx.layer, strength, fx.scenes.object_tokens(), fx.direction});
}

// ---- scenes -----------------------------------------------------------------

void stage_scenes(const toy::ToyModelConfig& model_config, const SceneOptions& options, const fs::path& out) {
  if (options.count == 0) throw std::invalid_argument("scenes: count must be >= 1");
  toy::SceneSpec spec;
  spec.image_size = model_config.image_size;
  spec.patch_size = model_config.patch_size;
  const std::vector<int> prompt = options.prompt.empty() ? toy::default_prompt(model_config) : options.prompt;

  GaussianRng rng(options.seed);
  TensorMap images;
  TokenLines prompts, truths;
  for (std::size_t i = 0; i < options.count; ++i) {
    const std::optional<int> required = (i % 2 == 0) ? options.include_token : std::nullopt;
    toy::Scene scene = toy::sample_scene(spec, rng, required, options.exclude_tokens);
    insert_unique(images, scene.image.to_tensor("image" + std::to_string(i)));
    prompts.push_back(prompt);
    truths.push_back(scene.objects);
  }
  store::write_bundle(images, out);
  write_token_lines(out / kPromptsFile, prompts);
  write_token_lines(out / kTruthFile, truths);
}

// ---- perturb ----------------------------------------------------------------

void stage_perturb(const fs::path& images, const fs::path& prompts, const PerturbOptions& options, const fs::path& out) {
  const perturb::NoiseSchedule schedule = perturb::make_linear_schedule(options.steps, options.beta_start, options.beta_end);
  const std::vector<perturb::Image> imgs = read_images(images);
  const TokenLines prompt_lines = read_token_lines(prompts);
  const auto pairs = perturb::build_pairs(prompt_lines, imgs, schedule, options.seed, options.threads);
  TensorMap tensors;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    insert_unique(tensors, pairs[i].original.to_tensor(pair_name(i, "orig")));
    insert_unique(tensors, pairs[i].perturbed.to_tensor(pair_name(i, "pert")));
  }
  store::write_bundle(tensors, out);
  write_token_lines(out / kPromptsFile, prompt_lines);
}

// ---- trace ------------------------------------------------------------------

void stage_trace(const fs::path& model_dir, const fs::path& pairs_dir, std::size_t max_new, unsigned threads,
                 const fs::path& out) {
  const toy::ToyModel model = toy::load_checkpoint(model_dir);
  const TensorMap pairs = store::read_bundle(pairs_dir);
  const TokenLines prompts = read_token_lines(pairs_dir / kPromptsFile);
  const std::size_t n = count_indexed(pairs, "pair", ".orig");
  if (n == 0) throw std::invalid_argument("trace: pairs bundle holds no pairs");
  if (prompts.size() != n) throw std::invalid_argument("trace: prompt count does not match pair count");

  std::vector<PairTraces> traced(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto orig = perturb::Image::from_tensor(pairs.at(pair_name(i, "orig")));
    const auto pert = perturb::Image::from_tensor(pairs.at(pair_name(i, "pert")));
    PairTraces& t = traced[i];
    t.tokens = toy::generate_greedy(model, prompts[i], orig, max_new);
    t.positive = toy::teacher_forced_trace(model, prompts[i], t.tokens, orig);
    t.negative = toy::teacher_forced_trace(model, prompts[i], t.tokens, pert);
  });

  TensorMap tensors;
  std::vector<int> layers(model.config.layers);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = static_cast<int>(l);
  insert_unique(tensors, ids_tensor("layers", layers));
  TokenLines captions;
  for (std::size_t i = 0; i < n; ++i) {
    PairTraces& t = traced[i];
    insert_unique(tensors, ids_tensor(pair_name(i, "tokens"), t.tokens));
    t.positive.hidden.set_name(pair_name(i, "pos.hidden"));
    t.positive.logits.set_name(pair_name(i, "pos.logits"));
    t.negative.hidden.set_name(pair_name(i, "neg.hidden"));
    t.negative.logits.set_name(pair_name(i, "neg.logits"));
    insert_unique(tensors, t.positive.hidden);
    insert_unique(tensors, t.positive.logits);
    insert_unique(tensors, t.negative.hidden);
    insert_unique(tensors, t.negative.logits);
    captions.push_back(t.tokens);
  }
  store::write_bundle(tensors, out);
  write_token_lines(out / kCaptionsFile, captions);
}

std::size_t TraceBundle::slice_of(std::size_t layer) const {
  const auto it = std::ranges::find(layers, layer);
  if (it == layers.end()) throw std::out_of_range("layer " + std::to_string(layer) + " is not present in the traces");
  return static_cast<std::size_t>(it - layers.begin());
}

TraceBundle load_traces(const fs::path& dir) {
  const TensorMap tensors = store::read_bundle(dir);
  TraceBundle out;
  const std::size_t n = count_indexed(tensors, "pair", ".tokens");
  if (n == 0) throw std::invalid_argument("traces bundle holds no pairs");
  for (std::size_t i = 0; i < n; ++i) {
    PairTraces p;
    p.tokens = tensor_ids(tensors.at(pair_name(i, "tokens")));
    p.positive = slice_trace(require(tensors, pair_name(i, "pos.hidden")), require(tensors, pair_name(i, "pos.logits")), p.tokens);
    p.negative = slice_trace(require(tensors, pair_name(i, "neg.hidden")), require(tensors, pair_name(i, "neg.logits")), p.tokens);
    if (p.positive.hidden.shape() != p.negative.hidden.shape())
      throw std::invalid_argument("pair " + std::to_string(i) + ": positive/negative hidden shapes differ");
    out.pairs.push_back(std::move(p));
  }
  const std::size_t slices = out.pairs.front().positive.hidden.dim(0);
  if (auto it = tensors.find("layers"); it != tensors.end()) {
    for (int l : tensor_ids(it->second)) out.layers.push_back(static_cast<std::size_t>(l));
    if (out.layers.size() != slices) throw std::invalid_argument("'layers' does not match the hidden-state slices");
  } else {
    for (std::size_t l = 0; l < slices; ++l) out.layers.push_back(l);
  }
  return out;
}

// ---- shifts -----------------------------------------------------------------

void stage_shifts(const fs::path& traces, const shifts::ScheduleParams& params, const fs::path& out) {
  params.validate();
  const TraceBundle bundle = load_traces(traces);
  TensorMap tensors;
  for (std::size_t i = 0; i < bundle.pairs.size(); ++i) {
    const PairTraces& p = bundle.pairs[i];
    const auto delta = shifts::logit_shift(p.positive, p.negative, p.tokens);
    if (delta.empty()) throw std::invalid_argument("pair " + std::to_string(i) + " has an empty response");
    const shifts::ShiftRecord rec = shifts::compute_record(delta, params);
    insert_unique(tensors, doubles_tensor(pair_name(i, "delta"), rec.delta));
    insert_unique(tensors, doubles_tensor(pair_name(i, "z"), rec.robust.z));
    insert_unique(tensors, doubles_tensor(pair_name(i, "w"), rec.weights));
    insert_unique(tensors, Tensor::scalar(pair_name(i, "m"), static_cast<float>(rec.robust.median)));
    insert_unique(tensors, Tensor::scalar(pair_name(i, "mad"), static_cast<float>(rec.robust.mad)));
    insert_unique(tensors, Tensor::scalar(pair_name(i, "sigma"), static_cast<float>(rec.robust.sigma)));
  }
  store::write_bundle(tensors, out);
}

// ---- subspace ---------------------------------------------------------------

void stage_subspace(const fs::path& traces, const fs::path& weights, const LayerRange& layers, std::size_t rank,
                    const fs::path& out, unsigned threads) {
  const TraceBundle bundle = load_traces(traces);
  const TensorMap w = store::read_bundle(weights);
  const std::size_t m = bundle.pairs.size();
  std::vector<std::vector<double>> pair_weights(m);
  for (std::size_t i = 0; i < m; ++i) {
    const Tensor& t = require(w, pair_name(i, "w"));
    pair_weights[i].assign(t.data().begin(), t.data().end());
  }
  if (count_indexed(w, "pair", ".w") != m) throw std::invalid_argument("weights bundle does not match trace pair count");

  std::vector<std::size_t> layer_list;
  for (std::size_t l = layers.first; !layers.empty() && l <= layers.last; ++l) layer_list.push_back(l);
  for (std::size_t l : layer_list) bundle.slice_of(l);

  std::vector<subspace::EditingVectorSet> sets(layer_list.size());
  std::vector<subspace::HalluSpace> spaces(layer_list.size());
  parallel_for(layer_list.size(), threads, [&](std::size_t idx) {
    const std::size_t layer = layer_list[idx];
    const std::size_t slice = bundle.slice_of(layer);
    std::vector<std::vector<double>> vectors(m);
    for (std::size_t i = 0; i < m; ++i) {
      const PairTraces& p = bundle.pairs[i];
      vectors[i] = subspace::editing_vector(p.positive.layer_states(slice), p.negative.layer_states(slice), pair_weights[i]);
    }
    sets[idx] = subspace::assemble_prior_matrix(vectors, layer);
    spaces[idx] = subspace::halluspace(sets[idx], rank);
  });

  TensorMap tensors;
  std::ostringstream report;
  report << "layer  rank  singular values (leading first)\n";
  for (std::size_t idx = 0; idx < layer_list.size(); ++idx) {
    insert_unique(tensors, sets[idx].matrix);
    editor::SpaceMap one{{layer_list[idx], spaces[idx]}};
    for (auto& [name, t] : editor::spaces_to_tensors(one)) insert_unique(tensors, t);
    report << layer_list[idx] << "  " << rank << " ";
    for (double s : spaces[idx].spectrum) report << ' ' << s;
    report << '\n';
    for (const auto& warning : spaces[idx].warnings) report << "warning: " << warning << '\n';
  }
  store::write_bundle(tensors, out);
  write_text(out / kSpectraFile, report.str());
}

// ---- edit -------------------------------------------------------------------

editor::EditReport stage_edit(const fs::path& model_dir, const fs::path& spaces_dir, const LayerRange& layers,
                              const std::set<editor::Target>& targets, const fs::path& out) {
  TensorMap tensors = store::read_bundle(model_dir);
  if (fs::exists(model_dir / kConfigFile)) {
    const auto config = toy::config_from_json(read_text(model_dir / kConfigFile));
    if (!layers.empty() && layers.last >= config.layers)
      throw std::out_of_range("layer range " + format_layer_range(layers) + " exceeds model depth " +
                              std::to_string(config.layers));
  }
  const editor::SpaceMap spaces = editor::spaces_from_tensors(store::read_bundle(spaces_dir));
  const editor::EditPlan plan{layers.first, layers.last, targets};
  editor::EditReport report = editor::edit_tensors(tensors, spaces, plan);

  store::write_bundle(tensors, out);
  copy_if_present(model_dir / kConfigFile, out / kConfigFile);
  copy_if_present(model_dir / kFixtureFile, out / kFixtureFile);
  write_text(out / kEditReportText, report.to_text());
  write_text(out / kEditReportJson, report.to_json() + "\n");
  return report;
}

// ---- eval -------------------------------------------------------------------

std::string stage_eval(const fs::path& captions, const fs::path& truth, EvalMode mode, const metrics::ObjectVocab& vocab,
                       std::string* text) {
  const TokenLines caps = read_token_lines(captions);
  const TokenLines truths = read_token_lines(truth);
  std::vector<std::vector<int>> mentions;
  for (const auto& c : caps) mentions.push_back(metrics::extract_objects(c, vocab));
  std::vector<std::set<int>> truth_sets;
  for (const auto& t : truths) truth_sets.emplace_back(t.begin(), t.end());
  if (mode == EvalMode::chair) {
    const auto r = metrics::chair(mentions, truth_sets);
    if (text) *text = metrics::to_text(r);
    return metrics::to_json(r);
  }
  const auto r = metrics::pope_from_captions(mentions, truth_sets, vocab);
  if (text) *text = metrics::to_text(r);
  return metrics::to_json(r);
}

SuppressionStats measure_suppression(const toy::ToyModel& before, const toy::ToyModel& after,
                                     const std::vector<std::vector<int>>& prompts,
                                     const std::vector<perturb::Image>& images, const TokenLines& captions, int trigger,
                                     int spurious, std::uint64_t control_seed, std::size_t control_count) {
  if (prompts.size() != images.size() || captions.size() != images.size())
    throw std::invalid_argument("measure_suppression: input lengths differ");
  const std::size_t vocab = before.config.vocab;
  SuppressionStats s;
  GaussianRng rng(control_seed);
  while (s.control_tokens.size() < std::min(control_count, vocab - 1)) {
    const int t = static_cast<int>(rng.below(vocab));
    if (t != spurious && std::ranges::find(s.control_tokens, t) == s.control_tokens.end()) s.control_tokens.push_back(t);
  }
  double drop = 0.0, control = 0.0, drift = 0.0;
  std::size_t control_n = 0, drift_n = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& cap = captions[i];
    const auto a = toy::teacher_forced_trace(before, prompts[i], cap, images[i]);
    const auto b = toy::teacher_forced_trace(after, prompts[i], cap, images[i]);
    for (std::size_t j = 0; j < cap.size(); ++j) {
      if (cap[j] != spurious) {
        drift += std::abs(static_cast<double>(a.token_logit(j)) - b.token_logit(j));
        ++drift_n;
      }
      // Row j + 1 predicts the token after position j.
      if (cap[j] != trigger || j + 1 >= cap.size()) continue;
      const std::size_t row = j + 1;
      ++s.trigger_positions;
      drop += static_cast<double>(a.logits.at(row, static_cast<std::size_t>(spurious))) -
              b.logits.at(row, static_cast<std::size_t>(spurious));
      for (int c : s.control_tokens) {
        control += std::abs(static_cast<double>(a.logits.at(row, static_cast<std::size_t>(c))) -
                            b.logits.at(row, static_cast<std::size_t>(c)));
        ++control_n;
      }
    }
  }
  if (s.trigger_positions > 0) s.spurious_drop = drop / static_cast<double>(s.trigger_positions);
  if (control_n > 0) s.control_change = control / static_cast<double>(control_n);
  if (drift_n > 0) s.clean_drift = drift / static_cast<double>(drift_n);
  return s;
}

// ---- config -----------------------------------------------------------------

LayerRange PipelineConfig::effective_layers() const {
  if (layers) return *layers;
  const auto plan = editor::EditPlan::deepest_half(model.layers);
  return LayerRange{plan.first_layer, plan.last_layer};
}

void PipelineConfig::validate() const {
  try {
    if (!checkpoint) model.validate();
    schedule.validate();
    perturb::make_linear_schedule(diffusion.steps, diffusion.beta_start, diffusion.beta_end);
  } catch (const std::exception& ex) {
    throw ConfigError(ex.what());
  }
  if (pairs == 0) throw ConfigError("pairs must be >= 1");
  if (eval_captions == 0) throw ConfigError("eval_captions must be >= 1");
  if (rank == 0) throw ConfigError("rank must be >= 1");
  if (max_new == 0) throw ConfigError("max_new must be >= 1");
  if (targets.empty()) throw ConfigError("targets must not be empty");
  if (threads == 0) throw ConfigError("threads must be >= 1");
  const LayerRange r = effective_layers();
  if (!checkpoint && !r.empty() && r.last >= model.layers)
    throw ConfigError("layer range " + format_layer_range(r) + " exceeds model depth " + std::to_string(model.layers));
}

std::string PipelineConfig::to_json() const {
  std::string target_list;
  for (auto t : targets) target_list += (target_list.empty() ? "" : ",") + std::string(t == editor::Target::mlp_write ? "mlp" : "attn");
  json j{
      {"out_dir", out_dir.string()},
      {"checkpoint", checkpoint ? json(checkpoint->string()) : json(nullptr)},
      {"model", json::parse(toy::config_to_json(model))},
      {"plant_strength", plant_strength},
      {"pairs", pairs},
      {"eval_captions", eval_captions},
      {"scene_seed", scene_seed},
      {"eval_seed", eval_seed},
      {"seed", seed},
      {"max_new", max_new},
      {"diffusion", {{"steps", diffusion.steps}, {"beta_start", diffusion.beta_start}, {"beta_end", diffusion.beta_end}}},
      {"schedule",
       {{"z0", schedule.z0}, {"z1", schedule.z1}, {"gamma", schedule.gamma}, {"w_min", schedule.w_min}, {"eps", schedule.eps}}},
      {"layers", format_layer_range(effective_layers())},
      {"rank", rank},
      {"targets", target_list},
      {"threads", threads},
      {"paths",
       {{"model", model_path.string()},
        {"scenes", scenes_path.string()},
        {"eval_scenes", eval_scenes_path.string()},
        {"pairs", pairs_path.string()},
        {"traces", traces_path.string()},
        {"shifts", shifts_path.string()},
        {"spaces", spaces_path.string()},
        {"edited", edited_path.string()},
        {"eval", eval_path.string()}}},
  };
  return j.dump(2);
}

void PipelineConfig::merge_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (j.contains("out_dir")) out_dir = j["out_dir"].get<std::string>();
    if (j.contains("checkpoint")) {
      if (j["checkpoint"].is_null()) checkpoint.reset();
      else checkpoint = fs::path(j["checkpoint"].get<std::string>());
    }
    if (j.contains("model")) {
      const json& m = j["model"];
      model.vocab = m.value("vocab", model.vocab);
      model.dim = m.value("dim", model.dim);
      model.layers = m.value("layers", model.layers);
      model.hidden = m.value("hidden", model.hidden);
      model.image_channels = m.value("image_channels", model.image_channels);
      model.image_size = m.value("image_size", model.image_size);
      model.patch_size = m.value("patch_size", model.patch_size);
      model.max_seq = m.value("max_seq", model.max_seq);
      model.seed = m.value("seed", model.seed);
      model.init_std = m.value("init_std", model.init_std);
    }
    plant_strength = j.value("plant_strength", plant_strength);
    pairs = j.value("pairs", pairs);
    eval_captions = j.value("eval_captions", eval_captions);
    scene_seed = j.value("scene_seed", scene_seed);
    eval_seed = j.value("eval_seed", eval_seed);
    seed = j.value("seed", seed);
    max_new = j.value("max_new", max_new);
    if (j.contains("diffusion")) {
      const json& d = j["diffusion"];
      diffusion.steps = d.value("steps", diffusion.steps);
      diffusion.beta_start = d.value("beta_start", diffusion.beta_start);
      diffusion.beta_end = d.value("beta_end", diffusion.beta_end);
    }
    if (j.contains("schedule")) {
      const json& s = j["schedule"];
      schedule.z0 = s.value("z0", schedule.z0);
      schedule.z1 = s.value("z1", schedule.z1);
      schedule.gamma = s.value("gamma", schedule.gamma);
      schedule.w_min = s.value("w_min", schedule.w_min);
      schedule.eps = s.value("eps", schedule.eps);
    }
    if (j.contains("layers")) {
      if (j["layers"].is_null()) layers.reset();
      else layers = parse_layer_range(j["layers"].get<std::string>());
    }
    rank = j.value("rank", rank);
    if (j.contains("targets")) targets = editor::parse_targets(j["targets"].get<std::string>());
    threads = j.value("threads", threads);
    if (j.contains("paths")) {
      const json& p = j["paths"];
      const auto path_key = [&](const char* key, fs::path& dst) {
        if (p.contains(key)) dst = p[key].get<std::string>();
      };
      path_key("model", model_path);
      path_key("scenes", scenes_path);
      path_key("eval_scenes", eval_scenes_path);
      path_key("pairs", pairs_path);
      path_key("traces", traces_path);
      path_key("shifts", shifts_path);
      path_key("spaces", spaces_path);
      path_key("edited", edited_path);
      path_key("eval", eval_path);
    }
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
}

// ---- full pipeline ----------------------------------------------------------

namespace {

bool files_exist(const std::vector<fs::path>& files) {
  return std::ranges::all_of(files, [](const fs::path& f) { return fs::exists(f); });
}

json read_json(const fs::path& file) { return json::parse(read_text(file)); }

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config) {
  config.validate();
  PipelineResult result;
  fs::create_directories(config.out_dir);
  write_text(config.out_dir / "config.effective.json", config.to_json() + "\n");

  const auto stage = [&](const std::string& name, bool outputs_ok, const auto& body) {
    if (outputs_ok && !config.force) {
      result.skipped.push_back(name);
      return;
    }
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& ex) {
      throw StageError(name, ex.what());
    }
    result.ran.push_back(name);
  };

  const fs::path model_dir = config.checkpoint ? *config.checkpoint : config.resolve(config.model_path);
  const fs::path scenes = config.resolve(config.scenes_path), eval_scenes = config.resolve(config.eval_scenes_path),
                 pairs = config.resolve(config.pairs_path), traces = config.resolve(config.traces_path),
                 shift_dir = config.resolve(config.shifts_path), spaces = config.resolve(config.spaces_path),
                 edited = config.resolve(config.edited_path), eval = config.resolve(config.eval_path);

  if (!config.checkpoint)
    stage("fixture", store::bundle_valid(model_dir) && files_exist({model_dir / kConfigFile}),
          [&] { stage_fixture(config.model, config.plant_strength, model_dir); });

  toy::ToyModelConfig model_config;
  std::optional<FixtureInfo> fixture;
  try {
    model_config = toy::config_from_json(read_text(model_dir / kConfigFile));
    fixture = read_fixture_info(model_dir);
  } catch (const std::exception& ex) {
    throw StageError("fixture", ex.what());
  }

  stage("scenes", store::bundle_valid(scenes) && files_exist({scenes / kPromptsFile, scenes / kTruthFile}), [&] {
    stage_scenes(model_config, SceneOptions{config.pairs, config.scene_seed, std::nullopt, {}, {}}, scenes);
  });
  stage("eval-scenes", store::bundle_valid(eval_scenes) && files_exist({eval_scenes / kPromptsFile, eval_scenes / kTruthFile}),
        [&] {
          SceneOptions opts{config.eval_captions, config.eval_seed, std::nullopt, {}, {}};
          if (fixture) {
            opts.include_token = fixture->trigger;
            opts.exclude_tokens = {fixture->spurious};
          }
          stage_scenes(model_config, opts, eval_scenes);
        });

  PerturbOptions diffusion = config.diffusion;
  diffusion.seed = config.seed;
  diffusion.threads = config.threads;
  stage("perturb", store::bundle_valid(pairs) && files_exist({pairs / kPromptsFile}),
        [&] { stage_perturb(scenes, scenes / kPromptsFile, diffusion, pairs); });
  stage("trace", store::bundle_valid(traces) && files_exist({traces / kCaptionsFile}),
        [&] { stage_trace(model_dir, pairs, config.max_new, config.threads, traces); });
  stage("shifts", store::bundle_valid(shift_dir), [&] { stage_shifts(traces, config.schedule, shift_dir); });

  const LayerRange layers = config.effective_layers();
  stage("subspace", store::bundle_valid(spaces),
        [&] { stage_subspace(traces, shift_dir, layers, config.rank, spaces, config.threads); });
  stage("edit", store::bundle_valid(edited) && files_exist({edited / kEditReportJson}),
        [&] { stage_edit(model_dir, spaces, layers, config.targets, edited); });

  stage("eval", files_exist({eval / "report.json", eval / "report.txt"}), [&] {
    fs::create_directories(eval);
    const toy::ToyModel before = toy::load_checkpoint(model_dir);
    const toy::ToyModel after = toy::load_checkpoint(edited);
    const std::vector<perturb::Image> images = read_images(eval_scenes);
    const TokenLines prompts = read_token_lines(eval_scenes / kPromptsFile);
    if (prompts.size() != images.size()) throw std::invalid_argument("eval scenes: prompt count mismatch");
    TokenLines pre(images.size()), post(images.size());
    parallel_for(images.size(), config.threads, [&](std::size_t i) {
      pre[i] = toy::generate_greedy(before, prompts[i], images[i], config.max_new);
      post[i] = toy::generate_greedy(after, prompts[i], images[i], config.max_new);
    });
    write_token_lines(eval / "captions_pre.txt", pre);
    write_token_lines(eval / "captions_post.txt", post);

    metrics::ObjectVocab vocab;
    if (fixture) vocab.insert(fixture->objects.begin(), fixture->objects.end());
    else for (int t : toy::SceneSpec{}.object_tokens()) vocab.insert(t);

    json report;
    report["layers"] = format_layer_range(layers);
    report["rank"] = config.rank;
    report["edit"] = read_json(edited / kEditReportJson);
    std::ostringstream text;
    text << "edited layers " << format_layer_range(layers) << " (1-based), rank " << config.rank << "\n\n"
         << read_text(edited / kEditReportText) << '\n';
    for (const auto& [label, file] : {std::pair{"before", "captions_pre.txt"}, std::pair{"after", "captions_post.txt"}}) {
      std::string chair_text, pope_text;
      report[label]["chair"] = json::parse(stage_eval(eval / file, eval_scenes / kTruthFile, EvalMode::chair, vocab, &chair_text));
      report[label]["pope"] = json::parse(stage_eval(eval / file, eval_scenes / kTruthFile, EvalMode::pope, vocab, &pope_text));
      text << "[" << label << " edit]\n" << chair_text << "POPE " << pope_text << '\n';
    }
    if (fixture) {
      const SuppressionStats s = measure_suppression(before, after, prompts, images, pre, fixture->trigger,
                                                     fixture->spurious, config.seed);
      report["suppression"] = {{"trigger", fixture->trigger},
                               {"spurious", fixture->spurious},
                               {"trigger_positions", s.trigger_positions},
                               {"spurious_logit_drop", s.spurious_drop},
                               {"control_tokens", s.control_tokens},
                               {"control_abs_change", s.control_change},
                               {"ratio", s.control_change > 0.0 ? json(s.ratio()) : json(nullptr)},
                               {"clean_token_drift", s.clean_drift}};
      text << "spurious token " << fixture->spurious << " after trigger " << fixture->trigger << ": mean logit drop "
           << s.spurious_drop << " over " << s.trigger_positions << " positions; control |change| " << s.control_change
           << "; clean-token drift " << s.clean_drift << '\n';
    }
    write_text(eval / "report.json", report.dump(2) + "\n");
    write_text(eval / "report.txt", text.str());
  });

  result.report_json = read_text(eval / "report.json");
  result.report_text = read_text(eval / "report.txt");
  return result;
}

}  // namespace vce::pipeline
