#include "vce/editor.hpp"

#include <cmath>
#include <iomanip>
#include <regex>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace vce::editor {

std::string target_suffix(Target t) { return t == Target::mlp_write ? "w2" : "wo"; }

Target parse_target(const std::string& text) {
  if (text == "mlp") return Target::mlp_write;
  if (text == "attn") return Target::attn_write;
  throw std::invalid_argument("unknown edit target '" + text + "' (expected mlp or attn)");
}

std::set<Target> parse_targets(const std::string& csv) {
  std::set<Target> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.insert(parse_target(item));
  if (out.empty()) throw std::invalid_argument("edit targets must not be empty");
  return out;
}

EditPlan EditPlan::deepest_half(std::size_t layers) {
  if (layers == 0) throw std::invalid_argument("model has no layers");
  return EditPlan{layers / 2, layers - 1, {Target::mlp_write}};
}

Tensor edit_weight(const Tensor& weight, const subspace::HalluSpace& space) {
  if (weight.rank() != 2 || weight.dim(1) != space.dim())
    throw std::invalid_argument("edit_weight: '" + weight.name() + "' must have " + std::to_string(space.dim()) +
                                " columns");
  const subspace::Matrix w = subspace::to_matrix(weight);
  const subspace::Matrix edited = w * subspace::projector(space);
  return subspace::to_tensor(edited, weight.name());
}

namespace {

double frobenius(const Tensor& t) {
  double s = 0.0;
  for (float x : t.data()) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

double frobenius_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double annihilation_residual(const Tensor& edited, const subspace::HalluSpace& space) {
  const subspace::Matrix action = subspace::to_matrix(edited) * space.basis_matrix();
  double worst = 0.0;
  for (Eigen::Index c = 0; c < action.cols(); ++c) worst = std::max(worst, action.col(c).norm());
  return worst;
}

}  // namespace

EditReport edit_tensors(TensorMap& tensors, const SpaceMap& spaces, const EditPlan& plan) {
  EditReport report;
  if (plan.empty()) return report;
  if (plan.targets.empty()) throw std::invalid_argument("edit plan has no targets");

  // Validate everything before touching any tensor.
  for (std::size_t l = plan.first_layer; l <= plan.last_layer; ++l) {
    if (!spaces.contains(l)) throw std::out_of_range("no HalluSpace for layer " + std::to_string(l));
    for (Target t : plan.targets) {
      const std::string name = toy::layer_tensor_name(l, target_suffix(t));
      if (!tensors.contains(name)) throw std::out_of_range("edit target '" + name + "' not found");
    }
  }
  for (std::size_t l = plan.first_layer; l <= plan.last_layer; ++l) {
    const auto& space = spaces.at(l);
    report.warnings.insert(report.warnings.end(), space.warnings.begin(), space.warnings.end());
    for (Target t : plan.targets) {
      Tensor& w = tensors.at(toy::layer_tensor_name(l, target_suffix(t)));
      Tensor edited = edit_weight(w, space);
      MatrixEdit e{w.name(), frobenius(w), frobenius(edited), frobenius_diff(w, edited),
                   annihilation_residual(edited, space)};
      w = std::move(edited);
      report.edits.push_back(std::move(e));
    }
  }
  return report;
}

EditedModel edit_model(const toy::ToyModel& model, const SpaceMap& spaces, const EditPlan& plan) {
  if (!plan.empty() && plan.last_layer >= model.config.layers)
    throw std::out_of_range("edit plan exceeds model depth " + std::to_string(model.config.layers));
  TensorMap tensors = model.to_tensors();
  EditReport report = edit_tensors(tensors, spaces, plan);
  return {toy::ToyModel::from_tensors(model.config, tensors), std::move(report)};
}

store::Manifest export_edited(const toy::ToyModel& model, const std::filesystem::path& dir) {
  toy::save_checkpoint(model, dir);
  return store::read_manifest(dir);
}

std::string EditReport::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(14) << "matrix" << std::right << std::setw(14) << "|W|_F before" << std::setw(14)
     << "|W|_F after" << std::setw(14) << "|dW|_F" << std::setw(14) << "residual" << '\n';
  os << std::scientific << std::setprecision(4);
  for (const auto& e : edits)
    os << std::left << std::setw(14) << e.name << std::right << std::setw(14) << e.norm_before << std::setw(14)
       << e.norm_after << std::setw(14) << e.delta_norm << std::setw(14) << e.residual << '\n';
  for (const auto& w : warnings) os << "warning: " << w << '\n';
  return os.str();
}

std::string EditReport::to_json() const {
  nlohmann::json j{{"edits", nlohmann::json::array()}, {"warnings", warnings}};
  for (const auto& e : edits)
    j["edits"].push_back({{"name", e.name},
                          {"norm_before", e.norm_before},
                          {"norm_after", e.norm_after},
                          {"delta_norm", e.delta_norm},
                          {"residual", e.residual}});
  return j.dump(2);
}

TensorMap spaces_to_tensors(const SpaceMap& spaces) {
  TensorMap out;
  for (const auto& [layer, space] : spaces) {
    Tensor basis = space.basis;
    basis.set_name("layer" + std::to_string(layer) + ".S");
    insert_unique(out, std::move(basis));
    const std::size_t n = space.spectrum.size();
    insert_unique(out, Tensor("layer" + std::to_string(layer) + ".sigma", {n},
                              std::vector<float>(space.spectrum.begin(), space.spectrum.end())));
  }
  return out;
}

SpaceMap spaces_from_tensors(const TensorMap& tensors) {
  static const std::regex kBasis(R"(layer(\d+)\.S)");
  SpaceMap out;
  for (const auto& [name, t] : tensors) {
    std::smatch m;
    if (!std::regex_match(name, m, kBasis)) continue;
    const std::size_t layer = std::stoul(m[1].str());
    if (t.rank() != 2) throw std::invalid_argument("'" + name + "' must be D x k");
    subspace::HalluSpace space;
    space.layer = layer;
    space.basis = t;
    if (auto it = tensors.find("layer" + std::to_string(layer) + ".sigma"); it != tensors.end())
      space.spectrum.assign(it->second.data().begin(), it->second.data().end());
    out.emplace(layer, std::move(space));
  }
  return out;
}

}  // namespace vce::editor
