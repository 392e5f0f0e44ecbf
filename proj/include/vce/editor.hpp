#pragma once

// Null-space weight edit: W <- W (I - S S^T) for residual-stream write matrices.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vce/subspace.hpp"
#include "vce/tensor_store.hpp"
#include "vce/toy_model.hpp"

namespace vce::editor {

enum class Target { mlp_write, attn_write };

/// Canonical tensor suffix: "w2" for the MLP write, "wo" for the attention write.
std::string target_suffix(Target t);
Target parse_target(const std::string& text);  // "mlp" | "attn"
std::set<Target> parse_targets(const std::string& csv);

struct EditPlan {
  // Inclusive, 0-based. first > last is an empty plan.
  std::size_t first_layer = 0;
  std::size_t last_layer = 0;
  std::set<Target> targets{Target::mlp_write};

  bool empty() const { return first_layer > last_layer; }

  /// Deepest half of an L-layer model: [L/2, L-1].
  static EditPlan deepest_half(std::size_t layers);
};

struct MatrixEdit {
  std::string name;
  double norm_before = 0.0;
  double norm_after = 0.0;
  double delta_norm = 0.0;
  double residual = 0.0;  // max_i ||W_edited s_i||
};

struct EditReport {
  std::vector<MatrixEdit> edits;
  std::vector<std::string> warnings;

  std::string to_text() const;
  std::string to_json() const;
};

using SpaceMap = std::map<std::size_t, subspace::HalluSpace>;

/// W (I - S S^T), computed in double and rounded to float. W must have D columns.
Tensor edit_weight(const Tensor& weight, const subspace::HalluSpace& space);

/// Edits `layer<l>.<suffix>` for every planned layer and target in a name-addressed
/// parameter set. Every other tensor is left untouched.
EditReport edit_tensors(TensorMap& tensors, const SpaceMap& spaces, const EditPlan& plan);

struct EditedModel {
  toy::ToyModel model;
  EditReport report;
};

EditedModel edit_model(const toy::ToyModel& model, const SpaceMap& spaces, const EditPlan& plan);

store::Manifest export_edited(const toy::ToyModel& model, const std::filesystem::path& dir);

/// Spaces bundle layout: layer<l>.S (D x k), layer<l>.sigma (spectrum), optionally layer<l>.V.
TensorMap spaces_to_tensors(const SpaceMap& spaces);
SpaceMap spaces_from_tensors(const TensorMap& tensors);

}  // namespace vce::editor
