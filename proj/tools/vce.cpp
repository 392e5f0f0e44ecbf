#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "vce/pipeline.hpp"
#include "vce/tensor_store.hpp"

namespace fs = std::filesystem;
namespace pl = vce::pipeline;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  bool force = false;
  fs::path out_dir = "vce-run";
};

std::vector<int> parse_ids(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    const int v = std::stoi(item, &used);
    if (used != item.size() || v < 0) throw pl::ConfigError("bad token id '" + item + "'");
    out.push_back(v);
  }
  return out;
}

fs::path out_or_default(const std::string& out, const Globals& g, const char* name) {
  return out.empty() ? g.out_dir / name : fs::path(out);
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw pl::ConfigError("cannot read " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

vce::metrics::ObjectVocab eval_vocab(const std::string& objects, const std::string& model) {
  vce::metrics::ObjectVocab vocab;
  if (!objects.empty()) {
    for (int t : parse_ids(objects)) vocab.insert(t);
  } else if (!model.empty()) {
    const auto info = pl::read_fixture_info(model);
    if (!info) throw pl::ConfigError(model + " has no fixture.json; pass --objects");
    vocab.insert(info->objects.begin(), info->objects.end());
  } else {
    for (int t : vce::toy::SceneSpec{}.object_tokens()) vocab.insert(t);
  }
  return vocab;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual contrastive editing: locate a low-rank prior subspace and project it out of model weights"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Base seed (diffusion noise, scenes)");
  app.add_option("--threads", g.threads, "Worker thread cap")->check(CLI::Range(1u, 1024u));
  app.add_flag("--force", g.force, "Rerun stages whose outputs already validate");
  app.add_option("--out-dir", g.out_dir, "Output directory for defaults");

  // fixture
  auto* fixture = app.add_subcommand("fixture", "Build the planted scene model checkpoint");
  double strength = vce::toy::kDefaultPlantStrength;
  std::string fixture_out;
  fixture->add_option("--strength", strength, "Planted prior strength (0 disables)");
  fixture->add_option("--out", fixture_out, "Checkpoint directory");

  // scenes
  auto* scenes = app.add_subcommand("scenes", "Sample synthetic scenes (images, prompts, truth)");
  pl::SceneOptions scene_opts;
  std::string scenes_model, scenes_out, scenes_exclude, scenes_prompt;
  std::optional<int> scenes_include;
  scenes->add_option("--model", scenes_model, "Checkpoint whose config sets image geometry");
  scenes->add_option("--count", scene_opts.count, "Number of scenes")->check(CLI::PositiveNumber);
  scenes->add_option("--include", scenes_include, "Object token forced into even-indexed scenes");
  scenes->add_option("--exclude", scenes_exclude, "Comma-separated object tokens never drawn");
  scenes->add_option("--prompt", scenes_prompt, "Comma-separated prompt token ids");
  scenes->add_option("--out", scenes_out, "Output bundle");

  // perturb
  auto* perturb = app.add_subcommand("perturb", "Build contrastive pairs by forward diffusion");
  pl::PerturbOptions perturb_opts;
  std::string perturb_images, perturb_prompts, perturb_out;
  perturb->add_option("--images", perturb_images, "Image bundle")->required();
  perturb->add_option("--prompts", perturb_prompts, "Prompt file (default: prompts.txt beside the images)");
  perturb->add_option("--steps", perturb_opts.steps, "Diffusion steps T")->check(CLI::PositiveNumber);
  perturb->add_option("--beta-start", perturb_opts.beta_start, "First beta");
  perturb->add_option("--beta-end", perturb_opts.beta_end, "Last beta");
  perturb->add_option("--out", perturb_out, "Output bundle");

  // trace
  auto* trace = app.add_subcommand("trace", "Greedy captions and teacher-forced traces under both images");
  std::string trace_model, trace_pairs, trace_out;
  std::size_t max_new = 16;
  trace->add_option("--model", trace_model, "Checkpoint directory")->required();
  trace->add_option("--pairs", trace_pairs, "Pairs bundle")->required();
  trace->add_option("--max-new", max_new, "Maximum generated tokens")->check(CLI::PositiveNumber);
  trace->add_option("--out", trace_out, "Output bundle");

  // shifts
  auto* shifts = app.add_subcommand("shifts", "Per-token logit shifts, robust z-scores and weights");
  vce::shifts::ScheduleParams schedule;
  std::string shifts_traces, shifts_out;
  shifts->add_option("--traces", shifts_traces, "Traces bundle")->required();
  shifts->add_option("--eps", schedule.eps, "Denominator guard");
  shifts->add_option("--z0", schedule.z0, "Lower z knee");
  shifts->add_option("--z1", schedule.z1, "Upper z knee");
  shifts->add_option("--gamma", schedule.gamma, "Ramp exponent");
  shifts->add_option("--wmin", schedule.w_min, "Weight floor");
  shifts->add_option("--out", shifts_out, "Output bundle");

  // subspace
  auto* subspace = app.add_subcommand("subspace", "Prior matrices and their top-k right singular subspace");
  std::string sub_traces, sub_weights, sub_layers, sub_out;
  std::size_t rank = 4;
  subspace->add_option("--traces", sub_traces, "Traces bundle")->required();
  subspace->add_option("--weights", sub_weights, "Shifts bundle")->required();
  subspace->add_option("--layers", sub_layers, "1-based inclusive range a..b (default: deepest half)");
  subspace->add_option("--rank", rank, "Subspace rank k")->check(CLI::PositiveNumber);
  subspace->add_option("--out", sub_out, "Output bundle");

  // edit
  auto* edit = app.add_subcommand("edit", "Project target weights onto the null space of the subspaces");
  std::string edit_model, edit_spaces, edit_layers, edit_targets = "mlp", edit_out;
  edit->add_option("--model", edit_model, "Checkpoint directory")->required();
  edit->add_option("--spaces", edit_spaces, "Spaces bundle")->required();
  edit->add_option("--layers", edit_layers, "1-based inclusive range a..b (default: deepest half)");
  edit->add_option("--targets", edit_targets, "Comma-separated: mlp, attn");
  edit->add_option("--out", edit_out, "Edited checkpoint directory");

  // eval
  auto* eval = app.add_subcommand("eval", "CHAIR or POPE scores of captions against truth");
  std::string eval_captions, eval_truth, eval_mode = "chair", eval_objects, eval_model, eval_json;
  eval->add_option("--captions", eval_captions, "Captions file")->required();
  eval->add_option("--truth", eval_truth, "Truth file")->required();
  eval->add_option("--mode", eval_mode, "chair | pope")->check(CLI::IsMember({"chair", "pope"}));
  eval->add_option("--objects", eval_objects, "Comma-separated object token ids");
  eval->add_option("--model", eval_model, "Take object ids from this checkpoint's fixture.json");
  eval->add_option("--json", eval_json, "Also write the structured report here");

  // validate
  auto* validate = app.add_subcommand("validate", "Check a bundle's manifest, lengths and hashes");
  std::vector<std::string> validate_dirs;
  validate->add_option("bundles", validate_dirs, "Bundle directories")->required();

  // run
  auto* run = app.add_subcommand("run", "Run the whole pipeline, resuming from valid outputs");
  std::string run_config, run_checkpoint, run_layers, run_targets;
  std::optional<std::size_t> run_pairs, run_rank, run_max_new, run_steps;
  std::optional<double> run_strength;
  run->add_option("--config", run_config, "JSON config file");
  run->add_option("--checkpoint", run_checkpoint, "External checkpoint instead of the fixture");
  run->add_option("--pairs", run_pairs, "Contrastive pair count");
  run->add_option("--rank", run_rank, "Subspace rank k");
  run->add_option("--layers", run_layers, "1-based inclusive range a..b");
  run->add_option("--targets", run_targets, "Comma-separated: mlp, attn");
  run->add_option("--max-new", run_max_new, "Maximum generated tokens");
  run->add_option("--steps", run_steps, "Diffusion steps T");
  run->add_option("--strength", run_strength, "Planted prior strength");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? pl::kOk : pl::kConfigError;
  }

  const auto default_layers = [](const std::string& text, const fs::path& model_dir) {
    if (!text.empty()) return pl::parse_layer_range(text);
    const auto config = vce::toy::config_from_json(slurp(model_dir / "config.json"));
    const auto plan = vce::editor::EditPlan::deepest_half(config.layers);
    return pl::LayerRange{plan.first_layer, plan.last_layer};
  };

  const auto targets_of = [](const std::string& csv) {
    try {
      return vce::editor::parse_targets(csv);
    } catch (const std::invalid_argument& ex) {
      throw pl::ConfigError(ex.what());
    }
  };

  try {
    if (*validate) {
      bool ok = true;
      for (const auto& dir : validate_dirs) {
        const auto report = vce::store::validate_bundle(dir);
        std::cout << dir << ":\n" << report.to_text();
        ok = ok && report.all_ok();
      }
      return ok ? pl::kOk : pl::kValidationFailure;
    }

    if (*run) {
      pl::PipelineConfig config;
      if (!run_config.empty()) config.merge_json(slurp(run_config));
      if (app.get_option("--out-dir")->count() > 0) config.out_dir = g.out_dir;
      if (g.seed) config.seed = *g.seed;
      if (app.get_option("--threads")->count() > 0) config.threads = g.threads;
      config.force = g.force;
      if (!run_checkpoint.empty()) config.checkpoint = fs::path(run_checkpoint);
      if (run_pairs) config.pairs = *run_pairs;
      if (run_rank) config.rank = *run_rank;
      if (!run_layers.empty()) config.layers = pl::parse_layer_range(run_layers);
      if (!run_targets.empty()) config.targets = targets_of(run_targets);
      if (run_max_new) config.max_new = *run_max_new;
      if (run_steps) config.diffusion.steps = *run_steps;
      if (run_strength) config.plant_strength = *run_strength;

      const auto result = pl::run_pipeline(config);
      for (const auto& s : result.skipped) std::cerr << "skipped " << s << " (outputs valid)\n";
      for (const auto& s : result.ran) std::cerr << "ran " << s << '\n';
      std::cout << result.report_text;
      return pl::kOk;
    }

    // Single-stage commands: stage failures map to exit code 3.
    try {
      if (*fixture) {
        pl::stage_fixture({}, strength, out_or_default(fixture_out, g, "model"));
      } else if (*scenes) {
        vce::toy::ToyModelConfig model_config;
        if (!scenes_model.empty()) model_config = vce::toy::config_from_json(slurp(fs::path(scenes_model) / "config.json"));
        if (g.seed) scene_opts.seed = *g.seed;
        scene_opts.include_token = scenes_include;
        if (!scenes_exclude.empty()) scene_opts.exclude_tokens = parse_ids(scenes_exclude);
        if (!scenes_prompt.empty()) scene_opts.prompt = parse_ids(scenes_prompt);
        pl::stage_scenes(model_config, scene_opts, out_or_default(scenes_out, g, "scenes"));
      } else if (*perturb) {
        if (g.seed) perturb_opts.seed = *g.seed;
        perturb_opts.threads = g.threads;
        const fs::path prompts = perturb_prompts.empty() ? fs::path(perturb_images) / "prompts.txt" : fs::path(perturb_prompts);
        pl::stage_perturb(perturb_images, prompts, perturb_opts, out_or_default(perturb_out, g, "pairs"));
      } else if (*trace) {
        pl::stage_trace(trace_model, trace_pairs, max_new, g.threads, out_or_default(trace_out, g, "traces"));
      } else if (*shifts) {
        pl::stage_shifts(shifts_traces, schedule, out_or_default(shifts_out, g, "shifts"));
      } else if (*subspace) {
        pl::LayerRange layers;
        if (!sub_layers.empty()) {
          layers = pl::parse_layer_range(sub_layers);
        } else {
          const auto bundle = pl::load_traces(sub_traces);
          const auto plan = vce::editor::EditPlan::deepest_half(bundle.layers.size());
          layers = {bundle.layers[plan.first_layer], bundle.layers[plan.last_layer]};
        }
        const fs::path out = out_or_default(sub_out, g, "spaces");
        pl::stage_subspace(sub_traces, sub_weights, layers, rank, out, g.threads);
        std::cout << slurp(out / "spectra.txt");
      } else if (*edit) {
        const auto layers = default_layers(edit_layers, edit_model);
        const auto report = pl::stage_edit(edit_model, edit_spaces, layers, targets_of(edit_targets),
                                           out_or_default(edit_out, g, "edited"));
        std::cout << report.to_text();
      } else if (*eval) {
        std::string text;
        const auto json = pl::stage_eval(eval_captions, eval_truth,
                                         eval_mode == "pope" ? pl::EvalMode::pope : pl::EvalMode::chair,
                                         eval_vocab(eval_objects, eval_model), &text);
        std::cout << text;
        if (!eval_json.empty()) std::ofstream(eval_json) << json << '\n';
      }
    } catch (const pl::ConfigError&) {
      throw;
    } catch (const std::exception& ex) {
      std::cerr << "vce: stage '" << app.get_subcommands().front()->get_name() << "' failed: " << ex.what() << '\n';
      return pl::kStageFailure;
    }
    return pl::kOk;
  } catch (const pl::ConfigError& ex) {
    std::cerr << "vce: config error: " << ex.what() << '\n';
    return pl::kConfigError;
  } catch (const pl::StageError& ex) {
    std::cerr << "vce: " << ex.what() << '\n';
    return pl::kStageFailure;
  } catch (const std::exception& ex) {
    std::cerr << "vce: " << ex.what() << '\n';
    return pl::kStageFailure;
  }
}
