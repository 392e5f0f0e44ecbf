#pragma once

// Stage functions behind the `vce` executable and the resumable pipeline.
//
// Every stage reads and writes tensor bundles (plus small text sidecars), so
// running stages one by one with matching paths produces the same bytes as
// run_pipeline.
//
// Bundle layouts
//   images   image<i> (C,H,W)                       + prompts.txt / truth.txt sidecars
//   pairs    pair<i>.orig, pair<i>.pert (C,H,W)     + prompts.txt
//   traces   layers [L'] (model layer index of each hidden slice),
//            pair<i>.tokens [N], pair<i>.pos.hidden [L',N,D], pair<i>.pos.logits [N,V],
//            pair<i>.neg.hidden, pair<i>.neg.logits  + captions.txt
//   shifts   pair<i>.delta|z|w [N], pair<i>.m|mad|sigma [1]
//   spaces   layer<l>.V [M,D], layer<l>.S [D,k], layer<l>.sigma [min(M,D)] + spectra.txt
//
// Token-id text files hold one sequence per line as space-separated decimals.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vce/editor.hpp"
#include "vce/metrics.hpp"
#include "vce/perturbation.hpp"
#include "vce/scenes.hpp"
#include "vce/shift_weighting.hpp"
#include "vce/toy_model.hpp"

namespace vce::pipeline {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfigError = 2, kStageFailure = 3, kValidationFailure = 4 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

using TokenLines = std::vector<std::vector<int>>;

TokenLines read_token_lines(const fs::path& file);
void write_token_lines(const fs::path& file, const TokenLines& lines);

/// 1-based inclusive "a..b" (or "a") to a 0-based plan range. a > b is an empty range.
struct LayerRange {
  std::size_t first = 0;  // 0-based
  std::size_t last = 0;
  bool empty() const { return first > last; }
};
LayerRange parse_layer_range(const std::string& text);
std::string format_layer_range(const LayerRange& range);

// ---- fixture ----------------------------------------------------------------

struct FixtureInfo {
  int trigger = 0;
  int spurious = 0;
  std::size_t layer = 0;
  double strength = 0.0;
  std::vector<int> objects;
  std::vector<float> direction;
};

void write_fixture_info(const fs::path& model_dir, const FixtureInfo& info);
std::optional<FixtureInfo> read_fixture_info(const fs::path& model_dir);

/// Builds the planted scene model and saves it with a fixture.json sidecar.
void stage_fixture(const toy::ToyModelConfig& config, double strength, const fs::path& out);

// ---- scenes -----------------------------------------------------------------

struct SceneOptions {
  std::size_t count = 64;
  std::uint64_t seed = 99;
  std::optional<int> include_token;  // forced into every even-indexed scene
  std::vector<int> exclude_tokens;
  std::vector<int> prompt;           // empty: default prompt for the vocab
};

void stage_scenes(const toy::ToyModelConfig& model_config, const SceneOptions& options, const fs::path& out);

// ---- perturb ----------------------------------------------------------------

struct PerturbOptions {
  std::size_t steps = perturb::kDefaultSteps;
  double beta_start = perturb::kDefaultBetaStart;
  double beta_end = perturb::kDefaultBetaEnd;
  std::uint64_t seed = 7;
  unsigned threads = 1;
};

void stage_perturb(const fs::path& images, const fs::path& prompts, const PerturbOptions& options, const fs::path& out);

// ---- trace ------------------------------------------------------------------

void stage_trace(const fs::path& model_dir, const fs::path& pairs, std::size_t max_new, unsigned threads,
                 const fs::path& out);

/// One pair's traces as stored in a traces bundle.
struct PairTraces {
  std::vector<int> tokens;
  toy::ResponseTrace positive;
  toy::ResponseTrace negative;
};

struct TraceBundle {
  std::vector<std::size_t> layers;  // model layer of each hidden slice
  std::vector<PairTraces> pairs;

  /// Slice index of a model layer; throws if the layer was not traced.
  std::size_t slice_of(std::size_t layer) const;
};

TraceBundle load_traces(const fs::path& dir);

// ---- shifts -----------------------------------------------------------------

void stage_shifts(const fs::path& traces, const shifts::ScheduleParams& params, const fs::path& out);

// ---- subspace ---------------------------------------------------------------

void stage_subspace(const fs::path& traces, const fs::path& weights, const LayerRange& layers, std::size_t rank,
                    const fs::path& out, unsigned threads = 1);

// ---- edit -------------------------------------------------------------------

/// Edits a checkpoint bundle. Works on any bundle with canonical layer names;
/// config.json and fixture.json are carried over when present.
editor::EditReport stage_edit(const fs::path& model_dir, const fs::path& spaces, const LayerRange& layers,
                              const std::set<editor::Target>& targets, const fs::path& out);

// ---- eval -------------------------------------------------------------------

enum class EvalMode { chair, pope };

/// Scores a captions file against a truth file. Returns the JSON report text;
/// `text` receives the human-readable form.
std::string stage_eval(const fs::path& captions, const fs::path& truth, EvalMode mode,
                       const metrics::ObjectVocab& vocab, std::string* text = nullptr);

struct SuppressionStats {
  std::size_t trigger_positions = 0;
  double spurious_drop = 0.0;       // mean logit(before) - logit(after) of the spurious token
  double control_change = 0.0;      // mean |logit change| over control tokens
  std::vector<int> control_tokens;
  double clean_drift = 0.0;         // mean |logit change| of non-spurious caption tokens
  double ratio() const { return control_change > 0.0 ? spurious_drop / control_change : INFINITY; }
};

/// Teacher-forces the pre-edit captions through both models and measures the
/// spurious-token logit at every position right after a trigger mention.
SuppressionStats measure_suppression(const toy::ToyModel& before, const toy::ToyModel& after,
                                     const std::vector<std::vector<int>>& prompts,
                                     const std::vector<perturb::Image>& images, const TokenLines& captions,
                                     int trigger, int spurious, std::uint64_t control_seed,
                                     std::size_t control_count = 10);

// ---- full pipeline ----------------------------------------------------------

struct PipelineConfig {
  fs::path out_dir = "vce-run";
  std::optional<fs::path> checkpoint;  // external toy-format checkpoint; fixture otherwise
  toy::ToyModelConfig model;
  double plant_strength = toy::kDefaultPlantStrength;

  std::size_t pairs = 64;
  std::size_t eval_captions = 32;
  std::uint64_t scene_seed = 99;
  std::uint64_t eval_seed = 12345;
  std::uint64_t seed = 7;  // diffusion base seed and control-token seed
  std::size_t max_new = 16;

  PerturbOptions diffusion;
  shifts::ScheduleParams schedule;
  std::optional<LayerRange> layers;  // default: deepest half
  std::size_t rank = 4;
  std::set<editor::Target> targets{editor::Target::mlp_write};

  unsigned threads = 1;
  bool force = false;

  // Intermediate locations, relative to out_dir unless absolute.
  fs::path model_path = "model";
  fs::path scenes_path = "scenes";
  fs::path eval_scenes_path = "eval_scenes";
  fs::path pairs_path = "pairs";
  fs::path traces_path = "traces";
  fs::path shifts_path = "shifts";
  fs::path spaces_path = "spaces";
  fs::path edited_path = "edited";
  fs::path eval_path = "eval";

  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : out_dir / p; }
  LayerRange effective_layers() const;
  void validate() const;

  std::string to_json() const;
  /// Applies the keys present in `text` on top of the current values.
  void merge_json(const std::string& text);
};

struct PipelineResult {
  std::vector<std::string> ran;
  std::vector<std::string> skipped;
  std::string report_json;
  std::string report_text;
};

/// Runs fixture -> scenes -> perturb -> trace -> shifts -> subspace -> edit -> eval.
/// Stages whose outputs exist and validate are skipped unless config.force.
/// Throws StageError naming the failing stage; earlier outputs are kept.
PipelineResult run_pipeline(const PipelineConfig& config);

}  // namespace vce::pipeline
