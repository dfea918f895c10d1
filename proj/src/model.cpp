#include "mimic/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mimic::model {

using num::Shape;

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || vocab_size == 0 || max_len == 0 ||
      ffn_mult == 0) {
    throw std::invalid_argument("model config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_head() % 2 != 0) {
    throw std::invalid_argument("model config: rotary encoding needs an even head dimension");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
                     {"d_model", c.d_model},     {"vocab_size", c.vocab_size},
                     {"max_len", c.max_len},     {"ffn_mult", c.ffn_mult},
                     {"seed", c.seed},           {"rope_base", c.rope_base}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const char* known[] = {"n_layers", "n_heads",  "d_model", "vocab_size",
                                "max_len",  "ffn_mult", "seed",    "rope_base"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
  }
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.max_len);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.seed = j.value("seed", c.seed);
  c.rope_base = j.value("rope_base", c.rope_base);
}

AlignPoint parse_align_point(const std::string& name) {
  if (name == "after_sa") return AlignPoint::after_sa;
  if (name == "after_ffn") return AlignPoint::after_ffn;
  throw std::invalid_argument("unknown align point '" + name + "' (after_sa | after_ffn)");
}

std::string to_string(AlignPoint p) { return p == AlignPoint::after_sa ? "after_sa" : "after_ffn"; }

std::size_t PromptContext::demo_length() const {
  std::size_t n = 0;
  for (const auto& block : icd_tokens) n += block.size();
  return n;
}

std::vector<int> PromptContext::tokens() const {
  std::vector<int> out;
  out.reserve(demo_length() + query_tokens.size());
  for (const auto& block : icd_tokens) out.insert(out.end(), block.begin(), block.end());
  out.insert(out.end(), query_tokens.begin(), query_tokens.end());
  return out;
}

void PromptContext::validate() const {
  if (query_tokens.empty()) throw std::invalid_argument("prompt context: empty query");
  if (answer_begin > answer_end || answer_end > query_tokens.size()) {
    throw std::invalid_argument("prompt context: answer span [" + std::to_string(answer_begin) +
                                ", " + std::to_string(answer_end) + ") outside query of length " +
                                std::to_string(query_tokens.size()));
  }
}

LayerTrace LayerTrace::slice(std::size_t start, std::size_t count) const {
  LayerTrace out;
  for (const auto& h : hidden) out.hidden.push_back(num::slice_rows(h, start, count));
  out.logits = num::slice_rows(logits, start, count);
  return out;
}

LayerTrace LayerTrace::detached() const {
  LayerTrace out;
  for (const auto& h : hidden) out.hidden.push_back(h.detach());
  out.logits = logits.detach();
  return out;
}

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(rows * cols);
  for (auto& v : data) v = dist(rng);
  return Tensor(Shape{rows, cols}, std::move(data));
}

}  // namespace

Model::Model(ModelConfig config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto d = config_.d_model, f = config_.ffn_mult * d;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid = proj / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  embedding_ = random_matrix(config_.vocab_size, d, 1.0, rng);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    LayerWeights w;
    w.ln1_g = Tensor::full(Shape{d}, 1.0);
    w.ln1_b = Tensor::zeros(Shape{d});
    w.attn.n_heads = config_.n_heads;
    w.attn.w_q = random_matrix(d, d, proj, rng);
    w.attn.w_k = random_matrix(d, d, proj, rng);
    w.attn.w_v = random_matrix(d, d, proj, rng);
    w.attn.w_o = random_matrix(d, d, resid, rng);
    w.ln2_g = Tensor::full(Shape{d}, 1.0);
    w.ln2_b = Tensor::zeros(Shape{d});
    w.w1 = random_matrix(d, f, proj, rng);
    w.b1 = Tensor::zeros(Shape{f});
    w.w2 = random_matrix(f, d, resid / 2.0, rng);
    w.b2 = Tensor::zeros(Shape{d});
    layers_.push_back(std::move(w));
  }
  lnf_g_ = Tensor::full(Shape{d}, 1.0);
  lnf_b_ = Tensor::zeros(Shape{d});
  unembedding_ = random_matrix(d, config_.vocab_size, proj, rng);
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out{embedding_};
  for (const auto& w : layers_) {
    for (const auto& t : {w.ln1_g, w.ln1_b, w.attn.w_q, w.attn.w_k, w.attn.w_v, w.attn.w_o,
                          w.ln2_g, w.ln2_b, w.w1, w.b1, w.w2, w.b2}) {
      out.push_back(t);
    }
  }
  out.push_back(lnf_g_);
  out.push_back(lnf_b_);
  out.push_back(unembedding_);
  return out;
}

void Model::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.set_requires_grad(trainable);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.size();
  return n;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : parameters()) {
    for (double v : p.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

LayerTrace Model::forward_with_trace(const std::vector<int>& tokens,
                                     const ForwardOptions& options) const {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (options.first_position + tokens.size() > config_.max_len) {
    throw std::length_error("forward: " + std::to_string(tokens.size()) +
                            " tokens starting at position " +
                            std::to_string(options.first_position) + " exceed max_len " +
                            std::to_string(config_.max_len));
  }
  if (options.hooks && options.hooks->size() != config_.n_layers) {
    throw std::invalid_argument("forward: hooks must cover every layer");
  }
  if (options.probes) options.probes->assign(config_.n_layers, {});

  LayerTrace trace;
  Tensor x = num::gather_rows(embedding_, tokens);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const auto& w = layers_[l];
    const LayerHooks* hooks = options.hooks ? &(*options.hooks)[l] : nullptr;

    attention::AttentionOptions attn_opts;
    attn_opts.first_position = options.first_position;
    attn_opts.shift = hooks ? hooks->shift : nullptr;
    attn_opts.adapters = hooks ? hooks->adapters : nullptr;
    attn_opts.dropout_rng = options.dropout_rng;
    attn_opts.probe = options.probes ? &(*options.probes)[l] : nullptr;

    x = num::add(x, attention::multi_head_forward(num::layer_norm(x, w.ln1_g, w.ln1_b), w.attn,
                                                  attn_opts));
    if (options.align_point == AlignPoint::after_sa) trace.hidden.push_back(x);

    const Tensor inner =
        num::gelu(num::add_row(num::matmul(num::layer_norm(x, w.ln2_g, w.ln2_b), w.w1), w.b1));
    x = num::add(x, num::add_row(num::matmul(inner, w.w2), w.b2));
    if (hooks && hooks->post_ffn_vector) {
      x = num::add_row(x, num::mul_scalar_tensor(*hooks->post_ffn_vector, *hooks->post_ffn_scale));
    }
    for (const auto& iv : options.interventions) {
      if (iv.layer == l) x = num::add_to_row(x, iv.row, iv.vector);
    }
    if (options.align_point == AlignPoint::after_ffn) trace.hidden.push_back(x);
  }
  trace.logits = num::matmul(num::layer_norm(x, lnf_g_, lnf_b_), unembedding_);
  return trace;
}

LayerTrace Model::icl_forward(const PromptContext& ctx, AlignPoint align_point) const {
  ctx.validate();
  num::NoGradScope no_grad;
  ForwardOptions options;
  options.align_point = align_point;
  const auto full = forward_with_trace(ctx.tokens(), options);
  return full.slice(ctx.demo_length(), ctx.query_tokens.size());
}

LayerTrace Model::mimic_forward(const std::vector<int>& query_tokens,
                                const std::vector<attention::LayerShift>& shifts,
                                AlignPoint align_point) const {
  if (shifts.size() != config_.n_layers) {
    throw std::invalid_argument("mimic_forward: need one shift per layer");
  }
  std::vector<LayerHooks> hooks(config_.n_layers);
  for (std::size_t l = 0; l < config_.n_layers; ++l) hooks[l].shift = &shifts[l];
  ForwardOptions options;
  options.align_point = align_point;
  options.hooks = &hooks;
  return forward_with_trace(query_tokens, options);
}

nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape()}, {"data", t.values()}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

nlohmann::json Model::to_json() const {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : parameters()) tensors.push_back(tensor_to_json(p));
  return nlohmann::json{{"format", "mimic-model"}, {"version", 1},
                        {"config", config_},       {"tensors", std::move(tensors)}};
}

Model Model::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "mimic-model") {
    throw std::runtime_error("checkpoint: not a model checkpoint");
  }
  if (j.value("version", 0) != 1) throw std::runtime_error("checkpoint: unsupported version");
  Model m(j.at("config").get<ModelConfig>());
  const auto& tensors = j.at("tensors");
  auto params = m.parameters();
  if (tensors.size() != params.size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(params.size()) +
                             " tensors, found " + std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor loaded = tensor_from_json(tensors[i]);
    if (loaded.shape() != params[i].shape()) {
      throw std::runtime_error("checkpoint: tensor " + std::to_string(i) + " has shape " +
                               num::shape_str(loaded.shape()) + ", expected " +
                               num::shape_str(params[i].shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), params[i].mutable_data().begin());
  }
  return m;
}

void Model::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << to_json().dump();
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("checkpoint " + path.string() +
                             " not found; run `mimic pretrain` first");
  }
  return from_json(nlohmann::json::parse(in));
}

}  // namespace mimic::model
