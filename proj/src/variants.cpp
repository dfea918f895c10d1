#include "mimic/variants.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

namespace mimic::variants {

namespace {

using attention::LayerShift;
using attention::ShiftKind;
using num::Shape;

const std::vector<std::pair<VariantKind, std::string>> kNames = {
    {VariantKind::mimic, "mimic"},
    {VariantKind::head_sharing_mu, "head_sharing_mu"},
    {VariantKind::query_sharing_mu, "query_sharing_mu"},
    {VariantKind::linear_shift, "linear_shift"},
    {VariantKind::live_style, "live_style"},
    {VariantKind::task_vector, "task_vector"},
    {VariantKind::function_vector, "function_vector"},
    {VariantKind::lora, "lora"},
    {VariantKind::mimic_plus_lora, "mimic_plus_lora"},
};

// LoRA and live-style scale learning rates relative to the shift learning rate.
constexpr double kLoraLrScale = 0.1;
constexpr double kLiveScaleLrScale = 2.0;

Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = dist(rng);
  return Tensor(Shape{rows, cols}, std::move(v));
}

ShiftKind shift_kind(VariantKind kind) {
  switch (kind) {
    case VariantKind::mimic:
    case VariantKind::mimic_plus_lora: return ShiftKind::mimic;
    case VariantKind::head_sharing_mu: return ShiftKind::head_sharing;
    case VariantKind::query_sharing_mu: return ShiftKind::query_sharing;
    case VariantKind::linear_shift: return ShiftKind::linear_shift;
    default: return ShiftKind::none;
  }
}

void require_config(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument("variant config: " + message);
}

}  // namespace

VariantKind parse_kind(const std::string& name) {
  for (const auto& [kind, n] : kNames) {
    if (n == name) return kind;
  }
  std::string known;
  for (const auto& [kind, n] : kNames) known += (known.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown variant kind '" + name + "' (expected one of " + known +
                              ")");
}

std::string to_string(VariantKind kind) {
  for (const auto& [k, n] : kNames) {
    if (k == kind) return n;
  }
  return "?";
}

std::vector<VariantKind> all_kinds() {
  std::vector<VariantKind> out;
  for (const auto& [kind, n] : kNames) out.push_back(kind);
  return out;
}

bool uses_lora(VariantKind kind) {
  return kind == VariantKind::lora || kind == VariantKind::mimic_plus_lora;
}

bool uses_patch(VariantKind kind) {
  return kind == VariantKind::task_vector || kind == VariantKind::function_vector;
}

bool is_trainable(VariantKind kind) { return !uses_patch(kind); }

VariantConfig VariantConfig::defaults(VariantKind kind) {
  VariantConfig c;
  c.kind = kind;
  if (uses_lora(kind)) c.lora = LoraSettings{};
  if (uses_patch(kind)) c.patch = PatchSettings{};
  if (kind == VariantKind::live_style) c.live_scale_init = 0.1;
  if (kind == VariantKind::linear_shift) c.gate_bias_init = 0.0;
  return c;
}

void VariantConfig::validate(const model::ModelConfig& base) const {
  const auto name = to_string(kind);
  require_config(lora.has_value() == uses_lora(kind),
                 lora ? "lora settings given for " + name : name + " needs lora settings");
  require_config(patch.has_value() == uses_patch(kind),
                 patch ? "patch settings given for " + name : name + " needs patch settings");
  require_config(live_scale_init.has_value() == (kind == VariantKind::live_style),
                 live_scale_init ? "live_scale_init given for " + name
                                 : "live_style needs live_scale_init");
  require_config(gate_bias_init.has_value() == (kind == VariantKind::linear_shift),
                 gate_bias_init ? "gate_bias_init given for " + name
                                : "linear_shift needs gate_bias_init");
  if (lora) {
    require_config(lora->rank >= 1 && lora->rank <= base.d_model,
                   "lora rank " + std::to_string(lora->rank) + " must lie in [1, d_model=" +
                       std::to_string(base.d_model) + "]");
    require_config(lora->dropout >= 0.0 && lora->dropout < 1.0, "lora dropout must lie in [0, 1)");
  }
  if (patch) {
    require_config(patch->layer < base.n_layers,
                   "patch layer " + std::to_string(patch->layer) + " exceeds " +
                       std::to_string(base.n_layers) + " layers");
    if (kind == VariantKind::function_vector) {
      for (const auto& [l, h] : patch->heads) {
        require_config(l < base.n_layers && h < base.n_heads,
                       "function-vector head (" + std::to_string(l) + ", " + std::to_string(h) +
                           ") is out of range");
      }
    } else {
      require_config(patch->heads.empty(), "task_vector takes no head list");
    }
  }
}

void to_json(nlohmann::json& j, const VariantConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)}, {"seed", c.seed}};
  if (c.lora) {
    j["lora"] = {{"rank", c.lora->rank}, {"alpha", c.lora->alpha}, {"dropout", c.lora->dropout}};
  }
  if (c.patch) j["patch"] = {{"layer", c.patch->layer}, {"heads", c.patch->heads}};
  if (c.live_scale_init) j["live_scale_init"] = *c.live_scale_init;
  if (c.gate_bias_init) j["gate_bias_init"] = *c.gate_bias_init;
}

void from_json(const nlohmann::json& j, VariantConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("variant config: expected an object");
  static const std::set<std::string> keys = {"kind", "seed", "lora", "patch", "live_scale_init",
                                             "gate_bias_init"};
  for (const auto& [key, value] : j.items()) {
    require_config(keys.count(key) > 0, "unknown key '" + key + "'");
  }
  const auto kind = parse_kind(j.at("kind").get<std::string>());
  c = VariantConfig::defaults(kind);
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("lora")) {
    require_config(uses_lora(kind), "lora settings given for " + to_string(kind));
    const auto& l = j["lora"];
    for (const auto& [key, value] : l.items()) {
      require_config(key == "rank" || key == "alpha" || key == "dropout",
                     "unknown lora key '" + key + "'");
    }
    c.lora->rank = l.value("rank", c.lora->rank);
    c.lora->alpha = l.value("alpha", 2.0 * static_cast<double>(c.lora->rank));
    c.lora->dropout = l.value("dropout", c.lora->dropout);
  }
  if (j.contains("patch")) {
    require_config(uses_patch(kind), "patch settings given for " + to_string(kind));
    const auto& p = j["patch"];
    for (const auto& [key, value] : p.items()) {
      require_config(key == "layer" || key == "heads", "unknown patch key '" + key + "'");
    }
    c.patch->layer = p.value("layer", std::size_t{0});
    c.patch->heads = p.value("heads", std::vector<HeadIndex>{});
  }
  if (j.contains("live_scale_init")) {
    require_config(kind == VariantKind::live_style, "live_scale_init given for " + to_string(kind));
    c.live_scale_init = j["live_scale_init"].get<double>();
  }
  if (j.contains("gate_bias_init")) {
    require_config(kind == VariantKind::linear_shift, "gate_bias_init given for " + to_string(kind));
    c.gate_bias_init = j["gate_bias_init"].get<double>();
  }
}

Variant::Variant(VariantConfig config, const model::ModelConfig& base)
    : config_(std::move(config)), base_(base) {
  config_.validate(base_);
  const auto n_layers = base_.n_layers, n_heads = base_.n_heads, d = base_.d_model;
  const auto dh = base_.d_head();
  std::mt19937_64 rng(config_.seed);

  const auto kind = shift_kind(config_.kind);
  shifts_.assign(n_layers, LayerShift{});
  adapters_.assign(n_layers, attention::LayerAdapters{});
  if (kind != ShiftKind::none) {
    for (auto& s : shifts_) {
      s.kind = kind;
      for (std::size_t h = 0; h < n_heads; ++h) {
        s.heads.push_back(attention::MimicHeadParams::zeros(dh));
      }
      if (kind == ShiftKind::head_sharing) {
        s.gate_w = Tensor::zeros(Shape{d});
        s.gate_b = Tensor::zeros(Shape{1});
      }
      if (kind == ShiftKind::query_sharing) {
        for (std::size_t h = 0; h < n_heads; ++h) s.coefficients.push_back(Tensor::full(Shape{1}, 0.5));
      }
      if (kind == ShiftKind::linear_shift) {
        for (std::size_t h = 0; h < n_heads; ++h) {
          s.heads[h].f_b = Tensor::full(Shape{1}, *config_.gate_bias_init);
          s.h_w.push_back(Tensor::zeros(Shape{dh, dh}));
          s.h_b.push_back(Tensor::zeros(Shape{dh}));
        }
      }
    }
  }
  if (config_.lora) {
    const auto r = config_.lora->rank;
    const double scaling = config_.lora->alpha / static_cast<double>(r);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& a : adapters_) {
      a.dropout = config_.lora->dropout;
      for (auto* slot : {&a.q, &a.k, &a.v, &a.o}) {
        *slot = attention::LoraPair{random_matrix(d, r, stddev, rng), Tensor::zeros(Shape{r, d}),
                                    scaling};
      }
    }
  }
  if (config_.kind == VariantKind::live_style) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      live_vectors_.push_back(Tensor::zeros(Shape{d}));
      live_scales_.push_back(Tensor::full(Shape{1}, *config_.live_scale_init));
    }
  }
  if (uses_patch(config_.kind)) patch_vector_ = Tensor::zeros(Shape{d});
  set_trainable(true);
}

std::vector<Tensor> Variant::parameters() const {
  std::vector<Tensor> out;
  for (const auto& s : shifts_) {
    switch (s.kind) {
      case ShiftKind::mimic:
        for (const auto& h : s.heads) {
          for (const auto& t : h.parameters()) out.push_back(t);
        }
        break;
      case ShiftKind::head_sharing:
        out.push_back(s.gate_w);
        out.push_back(s.gate_b);
        for (const auto& h : s.heads) out.push_back(h.v);
        break;
      case ShiftKind::query_sharing:
        for (std::size_t h = 0; h < s.heads.size(); ++h) {
          out.push_back(s.coefficients[h]);
          out.push_back(s.heads[h].v);
        }
        break;
      case ShiftKind::linear_shift:
        for (std::size_t h = 0; h < s.heads.size(); ++h) {
          out.push_back(s.heads[h].f_w);
          out.push_back(s.heads[h].f_b);
          out.push_back(s.h_w[h]);
          out.push_back(s.h_b[h]);
        }
        break;
      case ShiftKind::none:
        break;
    }
  }
  for (const auto& a : adapters_) {
    for (const auto* slot : {&a.q, &a.k, &a.v, &a.o}) {
      if (*slot) {
        out.push_back((*slot)->a);
        out.push_back((*slot)->b);
      }
    }
  }
  for (std::size_t l = 0; l < live_vectors_.size(); ++l) {
    out.push_back(live_vectors_[l]);
    out.push_back(live_scales_[l]);
  }
  return out;
}

std::size_t Variant::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.size();
  return n;
}

std::vector<training::ParamGroup> Variant::param_groups(double weight_decay) const {
  training::ParamGroup shift{{}, 1.0, weight_decay}, lora{{}, kLoraLrScale, weight_decay},
      live_scale{{}, kLiveScaleLrScale, weight_decay};
  std::set<const void*> adapter_storage, scale_storage;
  for (const auto& a : adapters_) {
    for (const auto* slot : {&a.q, &a.k, &a.v, &a.o}) {
      if (*slot) {
        adapter_storage.insert((*slot)->a.storage().get());
        adapter_storage.insert((*slot)->b.storage().get());
      }
    }
  }
  for (const auto& s : live_scales_) scale_storage.insert(s.storage().get());
  for (const auto& p : parameters()) {
    if (adapter_storage.count(p.storage().get())) lora.params.push_back(p);
    else if (scale_storage.count(p.storage().get())) live_scale.params.push_back(p);
    else shift.params.push_back(p);
  }
  std::vector<training::ParamGroup> out;
  for (auto* g : {&shift, &lora, &live_scale}) {
    if (!g->params.empty()) out.push_back(std::move(*g));
  }
  return out;
}

void Variant::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.set_requires_grad(trainable);
}

std::vector<model::LayerHooks> Variant::hooks() const {
  std::vector<model::LayerHooks> hooks(base_.n_layers);
  for (std::size_t l = 0; l < base_.n_layers; ++l) {
    if (shifts_[l].kind != ShiftKind::none) hooks[l].shift = &shifts_[l];
    if (config_.lora) hooks[l].adapters = &adapters_[l];
    if (!live_vectors_.empty()) {
      hooks[l].post_ffn_vector = live_vectors_[l];
      hooks[l].post_ffn_scale = live_scales_[l];
    }
  }
  return hooks;
}

model::LayerTrace Variant::forward(const model::Model& base, const std::vector<int>& query_tokens,
                                   const RunOptions& options) const {
  const auto& bc = base.config();
  if (bc.n_layers != base_.n_layers || bc.n_heads != base_.n_heads || bc.d_model != base_.d_model) {
    throw std::invalid_argument("variant was built for a different model shape");
  }
  if (uses_patch(config_.kind)) {
    return patched_forward(base, query_tokens, config_.patch->layer, patch_vector_,
                           options.align_point);
  }
  const auto layer_hooks = hooks();
  model::ForwardOptions fo;
  fo.align_point = options.align_point;
  fo.hooks = &layer_hooks;
  fo.dropout_rng = options.dropout_rng;
  fo.probes = options.probes;
  return base.forward_with_trace(query_tokens, fo);
}

void Variant::set_patch(PatchSettings patch, Tensor vector) {
  if (!uses_patch(config_.kind)) {
    throw std::invalid_argument("set_patch: " + to_string(config_.kind) + " is not a patching variant");
  }
  if (vector.size() != base_.d_model) {
    throw num::DimensionError("set_patch: vector has " + std::to_string(vector.size()) +
                              " entries, d_model is " + std::to_string(base_.d_model));
  }
  VariantConfig next = config_;
  next.patch = std::move(patch);
  next.validate(base_);
  config_ = std::move(next);
  patch_vector_ = Tensor(Shape{base_.d_model}, vector.values());
}

nlohmann::json Variant::to_json() const {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : parameters()) tensors.push_back(model::tensor_to_json(p));
  nlohmann::json j{{"format", "mimic-variant"}, {"version", 1}, {"config", config_},
                   {"tensors", std::move(tensors)}};
  if (uses_patch(config_.kind)) j["patch_vector"] = model::tensor_to_json(patch_vector_);
  return j;
}

Variant Variant::from_json(const nlohmann::json& j, const model::ModelConfig& base) {
  if (j.value("format", "") != "mimic-variant") {
    throw std::runtime_error("checkpoint: not a variant checkpoint");
  }
  if (j.value("version", 0) != 1) throw std::runtime_error("checkpoint: unsupported variant version");
  Variant v(j.at("config").get<VariantConfig>(), base);
  auto params = v.parameters();
  const auto& tensors = j.at("tensors");
  if (tensors.size() != params.size()) {
    throw std::runtime_error("checkpoint: variant expects " + std::to_string(params.size()) +
                             " tensors, found " + std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor loaded = model::tensor_from_json(tensors[i]);
    if (loaded.shape() != params[i].shape()) {
      throw std::runtime_error("checkpoint: variant tensor " + std::to_string(i) + " has shape " +
                               num::shape_str(loaded.shape()) + ", expected " +
                               num::shape_str(params[i].shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), params[i].mutable_data().begin());
  }
  if (uses_patch(v.kind())) {
    v.patch_vector_ = model::tensor_from_json(j.at("patch_vector"));
    if (v.patch_vector_.size() != base.d_model) {
      throw std::runtime_error("checkpoint: patch vector does not match d_model");
    }
  }
  return v;
}

void Variant::save(const std::filesystem::path& path, const model::Model& base) const {
  auto j = to_json();
  j["base_checksum"] = base.checksum();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write variant checkpoint " + path.string());
  out << j.dump();
  if (!out) throw std::runtime_error("failed writing variant checkpoint " + path.string());
}

Variant Variant::load(const std::filesystem::path& path, const model::Model& base) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("variant checkpoint " + path.string() +
                             " not found; run `mimic train` first");
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("variant checkpoint " + path.string() + " is corrupt: " + e.what());
  }
  if (j.contains("base_checksum") && j["base_checksum"].get<std::uint64_t>() != base.checksum()) {
    throw std::runtime_error("variant checkpoint " + path.string() +
                             " was trained against a different base model");
  }
  return from_json(j, base.config());
}

Variant build_variant(const VariantConfig& config, const model::Model& base) {
  config.validate(base.config());
  return Variant(config, base.config());
}

Tensor tv_extract(const model::Model& base, const std::vector<model::PromptContext>& prompts,
                  std::size_t layer) {
  if (prompts.empty()) throw std::invalid_argument("tv_extract: no prompts");
  if (layer >= base.config().n_layers) throw std::out_of_range("tv_extract: layer out of range");
  num::NoGradScope no_grad;
  std::vector<double> acc(base.config().d_model, 0.0);
  for (const auto& ctx : prompts) {
    ctx.validate();
    if (ctx.icd_tokens.empty()) throw std::invalid_argument("tv_extract: prompt without demonstrations");
    const auto trace = base.forward_with_trace(ctx.tokens());
    const auto row = ctx.demo_length() - 1;
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += trace.hidden[layer].at(row, c);
  }
  for (auto& a : acc) a /= static_cast<double>(prompts.size());
  const Shape shape{acc.size()};
  return Tensor(shape, std::move(acc));
}

Tensor fv_extract(const model::Model& base, const std::vector<model::PromptContext>& prompts,
                  const std::vector<HeadIndex>& heads) {
  if (prompts.empty()) throw std::invalid_argument("fv_extract: no prompts");
  const auto& cfg = base.config();
  const auto d = cfg.d_model, dh = cfg.d_head();
  for (const auto& [l, h] : heads) {
    if (l >= cfg.n_layers || h >= cfg.n_heads) throw std::out_of_range("fv_extract: head out of range");
  }
  num::NoGradScope no_grad;
  std::vector<double> acc(d, 0.0);
  for (const auto& ctx : prompts) {
    ctx.validate();
    if (ctx.icd_tokens.empty()) throw std::invalid_argument("fv_extract: prompt without demonstrations");
    std::vector<attention::AttentionProbe> probes;
    model::ForwardOptions fo;
    fo.probes = &probes;
    base.forward_with_trace(ctx.tokens(), fo);
    const auto row = ctx.demo_length() - 1;
    for (const auto& [l, h] : heads) {
      const auto& out = probes[l].head_outputs[h];
      const auto& w_o = base.layers()[l].attn.w_o;
      for (std::size_t c = 0; c < d; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < dh; ++i) s += out.at(row, i) * w_o.at(h * dh + i, c);
        acc[c] += s;
      }
    }
  }
  for (auto& a : acc) a /= static_cast<double>(prompts.size());
  return Tensor(Shape{d}, std::move(acc));
}

model::LayerTrace patched_forward(const model::Model& base, const std::vector<int>& query_tokens,
                                  std::size_t layer, const Tensor& vector,
                                  model::AlignPoint align_point) {
  if (query_tokens.empty()) throw std::invalid_argument("patched_forward: empty query");
  if (layer >= base.config().n_layers) throw std::out_of_range("patched_forward: layer out of range");
  model::ForwardOptions fo;
  fo.align_point = align_point;
  fo.interventions.push_back({layer, query_tokens.size() - 1, vector});
  return base.forward_with_trace(query_tokens, fo);
}

}  // namespace mimic::variants
