#include "vce/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "vce/rng.hpp"
#include "vce/tensor_store.hpp"

namespace vce::toy {

namespace {

constexpr const char* kConfigFile = "config.json";

double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

Tensor gaussian(std::string name, std::size_t rows, std::size_t cols, double std, GaussianRng& rng) {
  Tensor t(std::move(name), {rows, cols});
  for (float& v : t.data()) v = static_cast<float>(std * rng.normal());
  return t;
}

void check_shape(const Tensor& t, std::size_t rows, std::size_t cols) {
  if (t.shape() != std::vector<std::size_t>{rows, cols})
    throw std::invalid_argument("tensor '" + t.name() + "' has wrong shape for the model config");
}

// out[j] = sum_i in[i] * w(i, j), accumulated in double.
void matvec(std::span<const double> in, const Tensor& w, std::span<double> out, std::uint64_t& macs) {
  const std::size_t cols = w.dim(1);
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double x = in[i];
    const auto row = w.row(i);
    for (std::size_t j = 0; j < cols; ++j) out[j] += x * static_cast<double>(row[j]);
  }
  macs += in.size() * cols;
}

std::vector<double> patch_vectors(const ToyModelConfig& cfg, const Image& image) {
  if (image.channels != cfg.image_channels || image.height != cfg.image_size || image.width != cfg.image_size)
    throw std::invalid_argument("image shape does not match the model config");
  const std::size_t side = cfg.image_size / cfg.patch_size;
  const std::size_t p = cfg.patch_size;
  std::vector<double> out;
  out.reserve(cfg.visual_tokens() * cfg.patch_pixels());
  for (std::size_t gy = 0; gy < side; ++gy)
    for (std::size_t gx = 0; gx < side; ++gx)
      for (std::size_t c = 0; c < cfg.image_channels; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            out.push_back(image.values[(c * cfg.image_size + gy * p + y) * cfg.image_size + gx * p + x]);
  return out;
}

}  // namespace

void ToyModelConfig::validate() const {
  if (vocab == 0 || dim == 0 || layers == 0 || hidden == 0 || image_channels == 0 || image_size == 0 ||
      patch_size == 0 || max_seq == 0)
    throw std::invalid_argument("model config: all sizes must be positive");
  if (image_size % patch_size != 0) throw std::invalid_argument("model config: image size not divisible by patch");
  if (visual_tokens() * patch_pixels() != image_channels * image_size * image_size)
    throw std::invalid_argument("model config: visual tokens x patch pixels != image pixels");
  if (visual_tokens() >= max_seq) throw std::invalid_argument("model config: max_seq leaves no room for text");
  if (!(init_std >= 0.0) || !std::isfinite(init_std)) throw std::invalid_argument("model config: bad init_std");
}

std::string layer_tensor_name(std::size_t layer, const std::string& which) {
  return "layer" + std::to_string(layer) + "." + which;
}

TensorMap ToyModel::to_tensors() const {
  TensorMap out;
  insert_unique(out, embed_tok);
  insert_unique(out, embed_patch);
  insert_unique(out, unembed);
  for (const auto& b : blocks)
    for (const Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) insert_unique(out, *t);
  return out;
}

ToyModel ToyModel::from_tensors(const ToyModelConfig& config, const TensorMap& tensors) {
  config.validate();
  const std::size_t V = config.vocab, D = config.dim, F = config.hidden;
  ToyModel m;
  m.config = config;
  m.embed_tok = require(tensors, "embed.tok");
  m.embed_patch = require(tensors, "embed.patch");
  m.unembed = require(tensors, "unembed");
  check_shape(m.embed_tok, V, D);
  check_shape(m.embed_patch, config.patch_pixels(), D);
  check_shape(m.unembed, D, V);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights b{require(tensors, layer_tensor_name(l, "wq")), require(tensors, layer_tensor_name(l, "wk")),
                   require(tensors, layer_tensor_name(l, "wv")), require(tensors, layer_tensor_name(l, "wo")),
                   require(tensors, layer_tensor_name(l, "w1")), require(tensors, layer_tensor_name(l, "w2"))};
    for (const Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo}) check_shape(*t, D, D);
    check_shape(b.w1, D, F);
    check_shape(b.w2, F, D);
    m.blocks.push_back(std::move(b));
  }
  for (const auto& [name, t] : m.to_tensors())
    for (float v : t.data())
      if (!std::isfinite(v)) throw std::invalid_argument("parameter '" + name + "' is not finite");
  return m;
}

Tensor* ToyModel::find(const std::string& name) {
  if (name == "embed.tok") return &embed_tok;
  if (name == "embed.patch") return &embed_patch;
  if (name == "unembed") return &unembed;
  for (auto& b : blocks)
    for (Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2})
      if (t->name() == name) return t;
  return nullptr;
}

const Tensor* ToyModel::find(const std::string& name) const { return const_cast<ToyModel*>(this)->find(name); }

ToyModel init_model(const ToyModelConfig& config) {
  config.validate();
  GaussianRng rng(config.seed);
  const std::size_t V = config.vocab, D = config.dim, F = config.hidden;
  const double s = config.init_std;
  ToyModel m;
  m.config = config;
  m.embed_tok = gaussian("embed.tok", V, D, s, rng);
  m.embed_patch = gaussian("embed.patch", config.patch_pixels(), D, s, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights b;
    b.wq = gaussian(layer_tensor_name(l, "wq"), D, D, s, rng);
    b.wk = gaussian(layer_tensor_name(l, "wk"), D, D, s, rng);
    b.wv = gaussian(layer_tensor_name(l, "wv"), D, D, s, rng);
    b.wo = gaussian(layer_tensor_name(l, "wo"), D, D, s, rng);
    b.w1 = gaussian(layer_tensor_name(l, "w1"), D, F, s, rng);
    b.w2 = gaussian(layer_tensor_name(l, "w2"), F, D, s, rng);
    m.blocks.push_back(std::move(b));
  }
  m.unembed = gaussian("unembed", D, V, s, rng);
  return m;
}

std::span<const float> ForwardTrace::hidden_row(std::size_t layer, std::size_t pos) const {
  const std::size_t D = hidden.dim(2);
  return hidden.data().subspan((layer * seq_len + pos) * D, D);
}

ForwardTrace forward(const ToyModel& model, std::span<const int> tokens, const Image& image) {
  const auto& cfg = model.config;
  const std::size_t P = cfg.visual_tokens(), D = cfg.dim, F = cfg.hidden, V = cfg.vocab, L = cfg.layers;
  const std::size_t n = P + tokens.size();
  if (n > cfg.max_seq)
    throw std::length_error("sequence length " + std::to_string(n) + " exceeds max_seq " + std::to_string(cfg.max_seq));

  ForwardTrace trace;
  trace.seq_len = n;
  std::uint64_t& macs = trace.multiply_adds;

  // Residual stream, n x D.
  std::vector<double> h(n * D);
  const std::vector<double> patches = patch_vectors(cfg, image);
  const std::size_t pp = cfg.patch_pixels();
  for (std::size_t j = 0; j < P; ++j)
    matvec(std::span<const double>(patches).subspan(j * pp, pp), model.embed_patch,
           std::span<double>(h).subspan(j * D, D), macs);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int tok = tokens[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= V) throw std::out_of_range("token id out of range");
    const auto e = model.embed_tok.row(static_cast<std::size_t>(tok));
    std::copy(e.begin(), e.end(), h.begin() + static_cast<std::ptrdiff_t>((P + i) * D));
  }

  trace.hidden = Tensor("hidden", {L, n, D});
  std::vector<double> q(n * D), k(n * D), v(n * D), mixed(D), delta(D), act(F), scores(n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::size_t l = 0; l < L; ++l) {
    const LayerWeights& b = model.blocks[l];
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = std::span<const double>(h).subspan(i * D, D);
      matvec(row, b.wq, std::span<double>(q).subspan(i * D, D), macs);
      matvec(row, b.wk, std::span<double>(k).subspan(i * D, D), macs);
      matvec(row, b.wv, std::span<double>(v).subspan(i * D, D), macs);
    }
    for (std::size_t i = 0; i < n; ++i) {
      double peak = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) s += q[i * D + d] * k[j * D + d];
        scores[j] = s * scale;
        peak = std::max(peak, scores[j]);
      }
      macs += (i + 1) * D;
      double total = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = std::exp(scores[j] - peak);
        total += scores[j];
      }
      std::fill(mixed.begin(), mixed.end(), 0.0);
      for (std::size_t j = 0; j <= i; ++j) {
        const double p = scores[j] / total;
        for (std::size_t d = 0; d < D; ++d) mixed[d] += p * v[j * D + d];
      }
      macs += (i + 1) * D;
      matvec(mixed, b.wo, delta, macs);
      // q, k, v already hold the pre-attention stream, so in-place writes are safe.
      for (std::size_t d = 0; d < D; ++d) h[i * D + d] += delta[d];
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto row = std::span<double>(h).subspan(i * D, D);
      matvec(row, b.w1, act, macs);
      for (double& a : act) a = gelu(a);
      matvec(act, b.w2, delta, macs);
      for (std::size_t d = 0; d < D; ++d) row[d] += delta[d];
    }
    auto dst = trace.hidden.data().subspan(l * n * D, n * D);
    for (std::size_t i = 0; i < n * D; ++i) dst[i] = static_cast<float>(h[i]);
  }

  trace.logits = Tensor("logits", {n, V});
  std::vector<double> out(V);
  for (std::size_t i = 0; i < n; ++i) {
    matvec(std::span<const double>(h).subspan(i * D, D), model.unembed, out, macs);
    auto dst = trace.logits.row(i);
    for (std::size_t t = 0; t < V; ++t) dst[t] = static_cast<float>(out[t]);
  }
  return trace;
}

std::vector<int> generate_greedy(const ToyModel& model, std::span<const int> prompt, const Image& image,
                                 std::size_t max_new) {
  const auto& cfg = model.config;
  if (cfg.visual_tokens() + prompt.size() + max_new > cfg.max_seq)
    throw std::length_error("prompt + max_new exceeds max_seq");
  if (cfg.visual_tokens() + prompt.size() == 0) throw std::invalid_argument("empty context");
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> response;
  while (response.size() < max_new) {
    const ForwardTrace trace = forward(model, seq, image);
    const auto last = trace.logits.row(trace.seq_len - 1);
    // max_element returns the first maximum, i.e. the lowest id on ties.
    const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    response.push_back(next);
    seq.push_back(next);
    if (next == kEndToken) break;
  }
  return response;
}

std::span<const float> ResponseTrace::hidden_row(std::size_t layer, std::size_t i) const {
  const std::size_t N = hidden.dim(1), D = hidden.dim(2);
  return hidden.data().subspan((layer * N + i) * D, D);
}

Tensor ResponseTrace::layer_states(std::size_t layer) const {
  const std::size_t N = hidden.dim(1), D = hidden.dim(2);
  const auto src = hidden.data().subspan(layer * N * D, N * D);
  return Tensor("states", {N, D}, std::vector<float>(src.begin(), src.end()));
}

ResponseTrace teacher_forced_trace(const ToyModel& model, std::span<const int> prompt,
                                   std::span<const int> response, const Image& image) {
  const auto& cfg = model.config;
  const std::size_t context = cfg.visual_tokens() + prompt.size();
  if (context == 0) throw std::invalid_argument("empty context");
  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end());
  const ForwardTrace full = forward(model, seq, image);

  const std::size_t N = response.size(), L = cfg.layers, D = cfg.dim, V = cfg.vocab;
  ResponseTrace out;
  out.tokens.assign(response.begin(), response.end());
  out.hidden = Tensor("hidden", {L, N, D});
  out.logits = Tensor("logits", {N, V});
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t pos = context + i - 1;
    const auto lr = full.logits.row(pos);
    std::copy(lr.begin(), lr.end(), out.logits.row(i).begin());
    for (std::size_t l = 0; l < L; ++l) {
      const auto src = full.hidden_row(l, pos);
      std::copy(src.begin(), src.end(), out.hidden.data().begin() + static_cast<std::ptrdiff_t>((l * N + i) * D));
    }
  }
  return out;
}

PlantedPrior plant_prior(const ToyModel& model, int trigger, int spurious, std::size_t layer, double strength) {
  const auto& cfg = model.config;
  const std::size_t V = cfg.vocab, D = cfg.dim, F = cfg.hidden;
  if (layer >= cfg.layers) throw std::out_of_range("plant_prior: layer index out of range");
  if (trigger == spurious) throw std::invalid_argument("plant_prior: trigger and spurious must differ");
  for (int t : {trigger, spurious})
    if (t < 0 || static_cast<std::size_t>(t) >= V) throw std::out_of_range("plant_prior: token id out of range");

  // Unit selectivity: activation on the trigger embedding minus the mean over other tokens.
  const Tensor& w1 = model.blocks[layer].w1;
  std::vector<double> emb(D), pre(F), others(F, 0.0), trig(F, 0.0);
  std::uint64_t macs = 0;
  for (std::size_t t = 0; t < V; ++t) {
    const auto e = model.embed_tok.row(t);
    std::copy(e.begin(), e.end(), emb.begin());
    matvec(emb, w1, pre, macs);
    for (std::size_t f = 0; f < F; ++f) {
      const double a = gelu(pre[f]);
      if (static_cast<int>(t) == trigger)
        trig[f] = a;
      else
        others[f] += a / static_cast<double>(V - 1);
    }
  }
  std::size_t unit = 0;
  double best = -INFINITY;
  for (std::size_t f = 0; f < F; ++f) {
    const double sel = trig[f] - others[f];
    if (sel > best) {
      best = sel;
      unit = f;
    }
  }

  // r: spurious column of the unembedding minus the mean column, normalized.
  std::vector<double> r(D, 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    const auto row = model.unembed.row(d);
    double mean = 0.0;
    for (float x : row) mean += x;
    mean /= static_cast<double>(V);
    r[d] = row[static_cast<std::size_t>(spurious)] - mean;
  }
  double norm = 0.0;
  for (double x : r) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw std::invalid_argument("plant_prior: unembedding does not distinguish the spurious token");

  PlantedPrior out{model, std::vector<float>(D), unit};
  for (std::size_t d = 0; d < D; ++d) out.direction[d] = static_cast<float>(r[d] / norm);
  if (strength != 0.0) {
    auto row = out.model.blocks[layer].w2.row(unit);
    for (std::size_t d = 0; d < D; ++d)
      row[d] = static_cast<float>(static_cast<double>(row[d]) + strength * r[d] / norm);
  }
  return out;
}

std::string config_to_json(const ToyModelConfig& c) {
  nlohmann::json j{{"vocab", c.vocab},
                   {"dim", c.dim},
                   {"layers", c.layers},
                   {"hidden", c.hidden},
                   {"image_channels", c.image_channels},
                   {"image_size", c.image_size},
                   {"patch_size", c.patch_size},
                   {"max_seq", c.max_seq},
                   {"seed", c.seed},
                   {"init_std", c.init_std},
                   {"end_token", kEndToken}};
  return j.dump(2);
}

ToyModelConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ToyModelConfig c;
  c.vocab = j.at("vocab").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.image_channels = j.value("image_channels", c.image_channels);
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.seed = j.value("seed", c.seed);
  c.init_std = j.value("init_std", c.init_std);
  c.validate();
  return c;
}

void save_checkpoint(const ToyModel& model, const std::filesystem::path& dir) {
  store::write_bundle(model.to_tensors(), dir);
  std::ofstream out(dir / kConfigFile, std::ios::trunc);
  out << config_to_json(model.config) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / kConfigFile).string());
}

ToyModel load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / kConfigFile);
  if (!in) throw std::runtime_error("missing " + (dir / kConfigFile).string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ToyModel::from_tensors(config_from_json(ss.str()), store::read_bundle(dir));
}

}  // namespace vce::toy
