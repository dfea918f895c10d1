#include "mimic/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "mimic/numerics/grad_check.hpp"

namespace mimic::experiment {

namespace {

using num::Shape;
using num::Tensor;

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Tensor normal(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(num::shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v));
}

std::size_t uniform(std::size_t lo, std::size_t hi, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::string fmt(double x) {
  std::ostringstream s;
  s << x;
  return s.str();
}

void finish(SuiteResult& r) { r.passed = r.failures.empty(); }

class FaultGuard {
 public:
  explicit FaultGuard(const std::optional<std::string>& op) {
    if (op) num::set_adjoint_fault(*op);
  }
  ~FaultGuard() { num::clear_adjoint_fault(); }
  FaultGuard(const FaultGuard&) = delete;
  FaultGuard& operator=(const FaultGuard&) = delete;
};

using OpCase = std::pair<std::string, num::ScalarFn>;

// Every case builds a scalar from a 4 x 6 input. Contracting with fixed random
// weights keeps symmetric ops from hiding errors.
std::vector<OpCase> op_cases(std::mt19937_64& rng) {
  using namespace num;
  const auto tall = normal({6, 3}, rng), wide = normal({5, 6}, rng), other = normal({4, 6}, rng);
  const auto col = normal({4, 1}, rng), row = normal({1, 6}, rng), gain = normal({1, 6}, rng);
  const auto w46 = normal({4, 6}, rng), w64 = normal({6, 4}, rng), w43 = normal({4, 3}, rng);
  const auto keys = normal({5, 6}, rng), values = normal({8, 6}, rng), w6 = normal({6}, rng);
  const auto head = attention::MimicHeadParams{normal({6}, rng), normal({1}, rng), normal({6}, rng)};
  const auto contract = [w46](const Tensor& y) { return sum(mul(y, w46)); };
  return {
      {"matmul", [=](const Tensor& x) { return sum(mul(matmul(x, tall), w43)); }},
      {"matmul_nt", [=](const Tensor& x) { return sum(mul(matmul_nt(x, wide), slice_cols(w46, 0, 5))); }},
      {"add", [=](const Tensor& x) { return contract(add(x, mul(x, x))); }},
      {"sub", [=](const Tensor& x) { return contract(sub(other, mul(x, x))); }},
      {"mul", [=](const Tensor& x) { return contract(mul(x, other)); }},
      {"maximum", [=](const Tensor& x) { return contract(maximum(x, other)); }},
      {"scale", [=](const Tensor& x) { return contract(scale(mul(x, x), -1.3)); }},
      {"add_scalar", [=](const Tensor& x) { return contract(mul(add_scalar(x, 0.4), x)); }},
      {"add_row", [=](const Tensor& x) { return contract(mul(add_row(x, row), x)); }},
      {"add_scalar_tensor",
       [=](const Tensor& x) { return contract(mul(add_scalar_tensor(x, slice_cols(slice_rows(x, 0, 1), 0, 1)), x)); }},
      {"mul_scalar_tensor",
       [=](const Tensor& x) { return contract(mul_scalar_tensor(x, slice_cols(slice_rows(x, 1, 1), 2, 1))); }},
      {"scale_rows", [=](const Tensor& x) { return contract(scale_rows(x, slice_cols(x, 0, 1))); }},
      {"add_to_row", [=](const Tensor& x) { return contract(add_to_row(mul(x, x), 2, slice_rows(x, 0, 1))); }},
      {"sigmoid", [=](const Tensor& x) { return contract(sigmoid(x)); }},
      {"gelu", [=](const Tensor& x) { return contract(gelu(x)); }},
      {"softmax_rows", [=](const Tensor& x) { return contract(softmax_rows(x)); }},
      {"log_softmax_rows", [=](const Tensor& x) { return contract(log_softmax_rows(x)); }},
      {"logsumexp_rows", [=](const Tensor& x) { return sum(mul(logsumexp_rows(x), col)); }},
      {"log_sum_exp", [=](const Tensor& x) { return log_sum_exp(mul(x, other)); }},
      {"causal_mask", [=](const Tensor& x) { return contract(softmax_rows(causal_mask(x, 1))); }},
      {"slice_rows", [=](const Tensor& x) { return sum(mul(slice_rows(x, 1, 2), slice_rows(w46, 0, 2))); }},
      {"slice_cols", [=](const Tensor& x) { return sum(mul(slice_cols(x, 2, 3), slice_cols(w46, 1, 3))); }},
      {"concat_cols", [=](const Tensor& x) { return contract(concat_cols({slice_cols(x, 3, 3), mul(slice_cols(x, 0, 3), slice_cols(x, 0, 3))})); }},
      {"concat_rows", [=](const Tensor& x) { return contract(concat_rows({slice_rows(x, 2, 2), mul(slice_rows(x, 0, 2), slice_rows(x, 0, 2))})); }},
      {"reshape", [=](const Tensor& x) { return sum(mul(reshape(x, Shape{6, 4}), w64)); }},
      {"gather_rows", [=](const Tensor& x) { return contract(gather_rows(x, {3, 0, 3, 1})); }},
      {"layer_norm", [=](const Tensor& x) { return contract(layer_norm(x, gain, row)); }},
      {"rotary", [=](const Tensor& x) { return contract(rotary(x, 3, 5)); }},
      {"sum", [=](const Tensor& x) { return mul(sum(x), sum(mul(x, other))); }},
      {"mean", [=](const Tensor& x) { return mean(mul(x, x)); }},
      {"squared_distance", [=](const Tensor& x) { return squared_distance(x, other); }},
      {"cross_entropy", [=](const Tensor& x) { return cross_entropy(x, {0, 2, 3}, {1, 5, 0}); }},
      {"kl_divergence_rows", [=](const Tensor& x) { return kl_divergence_rows(x, other, {1, 3}); }},
      {"mimic_sa",
       [=](const Tensor& x) {
         return sum(mul(attention::mimic_sa(slice_rows(x, 0, 1), concat_rows({slice_rows(x, 1, 3), keys}),
                                            values, head),
                        w6));
       }},
  };
}

std::vector<std::string> op_names() {
  std::mt19937_64 rng(0);
  std::vector<std::string> names;
  for (const auto& [name, fn] : op_cases(rng)) names.push_back(name);
  return names;
}

model::ModelConfig probe_model(std::uint64_t seed) {
  model::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = 12;
  c.max_len = 24;
  c.ffn_mult = 2;
  c.seed = seed;
  return c;
}

}  // namespace

std::string version_string() { return "mimic " MIMIC_VERSION; }

void to_json(nlohmann::json& j, const TaskConfig& c) {
  j = nlohmann::json{{"family", tasks::to_string(c.family)},
                     {"n_train", c.n_train},
                     {"n_val", c.n_val},
                     {"n_test", c.n_test},
                     {"eval_shots", c.eval_shots},
                     {"eval_strategy", tasks::to_string(c.eval_strategy)},
                     {"extraction_prompts", c.extraction_prompts}};
}

void from_json(const nlohmann::json& j, TaskConfig& c) {
  reject_unknown(j, {"family", "n_train", "n_val", "n_test", "eval_shots", "eval_strategy", "extraction_prompts"},
                 "task config");
  TaskConfig d;
  c.family = tasks::parse_family(j.value("family", tasks::to_string(d.family)));
  c.n_train = j.value("n_train", d.n_train);
  c.n_val = j.value("n_val", d.n_val);
  c.n_test = j.value("n_test", d.n_test);
  c.eval_shots = j.value("eval_shots", d.eval_shots);
  c.eval_strategy = tasks::parse_icd_strategy(j.value("eval_strategy", tasks::to_string(d.eval_strategy)));
  c.extraction_prompts = j.value("extraction_prompts", d.extraction_prompts);
}

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  // Hidden-state gaps in the toy base are tens of units while every shift
  // parameter starts at zero; 5e-3 leaves them short after 500 steps.
  c.train.lr = 2e-2;
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  train.variant.validate(model);
  const auto& stream = pretrain.stream;
  if (std::find(stream.families.begin(), stream.families.end(), task.family) == stream.families.end()) {
    throw std::invalid_argument("experiment config: task family " + tasks::to_string(task.family) +
                                " is not in the pretraining stream");
  }
  if (tasks::symbol_token(stream.alphabet - 1) >= static_cast<int>(model.vocab_size)) {
    throw std::invalid_argument("experiment config: alphabet of " + std::to_string(stream.alphabet) +
                                " does not fit a vocabulary of " + std::to_string(model.vocab_size));
  }
  const auto shots = std::max({train.k_shots, task.eval_shots, stream.max_shots});
  if (3 * shots + 2 > model.max_len) {
    throw std::invalid_argument("experiment config: " + std::to_string(shots) +
                                "-shot prompts exceed max_len " + std::to_string(model.max_len));
  }
  if (task.n_train < std::max(train.k_shots, task.eval_shots) + 1) {
    throw std::invalid_argument("experiment config: n_train must exceed the shot count");
  }
  if (task.n_val == 0 || task.n_test == 0) {
    throw std::invalid_argument("experiment config: n_val and n_test must be positive");
  }
  if (task.eval_shots == 0) throw std::invalid_argument("experiment config: eval_shots must be positive");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"schema", kSchemaVersion}, {"seed", c.seed},         {"output_dir", c.output_dir},
                     {"model", c.model},         {"pretrain", c.pretrain}, {"train", c.train},
                     {"task", c.task}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  reject_unknown(j, {"schema", "seed", "output_dir", "model", "pretrain", "train", "task"}, "experiment config");
  if (j.contains("schema") && j["schema"].get<int>() != kSchemaVersion) {
    throw ConfigError("experiment config: schema " + j["schema"].dump() + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  // Sections are merged over the desk defaults so partial documents work.
  const nlohmann::json defaults = ExperimentConfig::desk();
  auto section = [&](const char* key) {
    auto merged = defaults.at(key);
    if (j.contains(key)) {
      if (!j[key].is_object()) throw ConfigError(std::string("experiment config: '") + key + "' must be an object");
      merged.merge_patch(j[key]);
      if (j[key].contains("variant")) merged["variant"] = j[key]["variant"];
    }
    return merged;
  };
  c = ExperimentConfig::desk();
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.model = section("model").get<model::ModelConfig>();
  c.pretrain = section("pretrain").get<training::PretrainConfig>();
  c.train = section("train").get<training::TrainConfig>();
  c.task = section("task").get<TaskConfig>();
}

ExperimentConfig parse_config(const nlohmann::json& j) {
  try {
    auto c = j.get<ExperimentConfig>();
    c.validate();
    return c;
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

std::string hash_json(const nlohmann::json& j) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = c;
  j.erase("output_dir");
  return hash_json(j);
}

std::string base_hash(const ExperimentConfig& c) {
  return hash_json({{"model", c.model}, {"pretrain", c.pretrain}});
}

std::uint64_t sub_seed(std::uint64_t root, std::string_view stream) {
  return splitmix(root ^ splitmix(fnv1a(stream)));
}

std::filesystem::path output_root() {
  const char* env = std::getenv("MIMIC_OUTPUT_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

std::filesystem::path output_dir(const ExperimentConfig& c) { return output_root() / c.output_dir; }

std::string provenance_line(const ExperimentConfig& c, std::uint64_t seed) {
  return "# " + version_string() + " config_hash=" + config_hash(c) + " seed=" + std::to_string(seed);
}

model::Model load_or_pretrain(const ExperimentConfig& c, const std::filesystem::path& cache_dir,
                              std::ostream* log, bool* from_cache, double* pretrain_seconds) {
  const auto stem = cache_dir / ("base-" + base_hash(c));
  const auto path = stem.string() + ".json", meta = stem.string() + ".meta.json";
  if (std::filesystem::exists(path)) {
    if (from_cache) *from_cache = true;
    if (pretrain_seconds) {
      std::ifstream in(meta);
      *pretrain_seconds = in ? nlohmann::json::parse(in).value("seconds", NAN) : NAN;
    }
    return model::Model::load(path);
  }
  if (from_cache) *from_cache = false;
  const auto t0 = std::chrono::steady_clock::now();
  model::Model m(c.model);
  training::pretrain(m, c.pretrain, log, 250);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (pretrain_seconds) *pretrain_seconds = seconds;
  std::filesystem::create_directories(cache_dir);
  const auto tmp = path + ".tmp";
  m.save(tmp);
  std::ofstream(meta) << nlohmann::json{{"seconds", seconds}, {"base_hash", base_hash(c)}}.dump() << '\n';
  std::filesystem::rename(tmp, path);
  return m;
}

training::TrainConfig seeded_train_config(const ExperimentConfig& c) {
  auto t = c.train;
  t.seed = sub_seed(c.seed, "train");
  t.variant.seed = sub_seed(c.seed, "variant");
  return t;
}

TaskData make_task_data(const ExperimentConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(sub_seed(seed, "task"));
  const auto& stream = c.pretrain.stream;
  TaskData d{tasks::MappingTask::sample(c.task.family, stream.alphabet, rng, stream.max_offset), {}, {}, {}};
  std::vector<std::size_t> domain(stream.alphabet);
  for (std::size_t i = 0; i < domain.size(); ++i) domain[i] = i;
  d.train = tasks::generate_task_dataset(d.task, c.task.n_train, domain, rng);
  d.val = tasks::generate_task_dataset(d.task, c.task.n_val, domain, rng);
  d.test = tasks::generate_task_dataset(d.task, c.task.n_test, domain, rng);
  return d;
}

FitResult fit_variant(const model::Model& base, variants::Variant& variant, const TaskData& data,
                      const training::TrainConfig& cfg, std::size_t extraction_prompts, std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  FitResult r;
  if (variants::uses_patch(variant.kind())) {
    std::mt19937_64 rng(cfg.seed);
    const auto prompts = tasks::extraction_prompts(data.train, cfg.k_shots, extraction_prompts, rng);
    r.sweep = variant.kind() == variants::VariantKind::task_vector
                  ? tasks::sweep_task_vector(base, prompts, data.val)
                  : tasks::sweep_function_vector(base, prompts, data.val);
    variant.set_patch(r.sweep->best, r.sweep->vector);
  } else {
    const auto runner = tasks::variant_runner(base, variant);
    training::TrainHooks hooks;
    hooks.log_sink = log;
    hooks.validate = [&](std::size_t) {
      std::mt19937_64 rng(0);
      return tasks::evaluate_accuracy(runner, data.val, {}, rng).accuracy;
    };
    r.train = training::train_loop(base, variant, data.train, cfg, hooks);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

tasks::EvalReport evaluate(const model::Model& base, const tasks::Runner& runner, const TaskData& data,
                           const ExperimentConfig& c, std::uint64_t seed, bool distances) {
  const tasks::DemoSource demos{&data.train, c.task.eval_strategy, c.task.eval_shots, &base.embedding()};
  std::mt19937_64 rng(sub_seed(seed, "eval"));
  auto report = tasks::evaluate_accuracy(runner, data.test, demos, rng);
  report.seed = seed;
  if (distances) {
    std::mt19937_64 drng(sub_seed(seed, "distance"));
    const auto d = tasks::alignment_distance_report(base, runner, data.test, demos, drng);
    report.l2_per_layer = d.l2_per_layer;
    report.cosine_per_layer = d.cosine_per_layer;
  }
  return report;
}

bool VerifyReport::passed() const {
  return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.passed; });
}

nlohmann::json VerifyReport::to_json() const {
  nlohmann::json out{{"passed", passed()}, {"suites", nlohmann::json::array()}};
  for (const auto& s : suites) {
    out["suites"].push_back({{"name", s.name},
                             {"passed", s.passed},
                             {"cases", s.cases},
                             {"max_error", s.max_error},
                             {"tolerance", s.tolerance},
                             {"failures", s.failures}});
  }
  return out;
}

SuiteResult verify_decomposition(std::uint64_t seed, std::size_t instances) {
  SuiteResult r{"decomposition_identity", false, instances, 0.0, 1e-9, {}};
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < instances; ++i) {
    const auto ld = uniform(1, 16, rng), lq = uniform(1, 8, rng), dh = uniform(1, 32, rng);
    const auto q = normal({dh}, rng), kd = normal({ld, dh}, rng), vd = normal({ld, dh}, rng);
    const auto k = normal({lq, dh}, rng), v = normal({lq, dh}, rng);
    const auto rep = attention::decomposed_icl_sa(q, kd, vd, k, v);
    const auto full = attention::standard_sa(q, num::concat_rows({kd, k}), num::concat_rows({vd, v}));
    const double diff = max_abs_diff(rep.combined, full.values());
    r.max_error = std::max(r.max_error, diff);
    if (!(diff <= r.tolerance)) {
      r.failures.push_back("instance " + std::to_string(i) + " (l_D=" + std::to_string(ld) + ", l_q=" +
                           std::to_string(lq) + ", d_h=" + std::to_string(dh) + "): " + fmt(diff));
    }
  }
  finish(r);
  return r;
}

SuiteResult verify_mu_contract(std::uint64_t seed, std::size_t instances) {
  SuiteResult r{"mu_contract", false, instances, 0.0, 1e-12, {}};
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < instances; ++i) {
    const auto ld = uniform(1, 16, rng), lq = uniform(1, 8, rng), dh = uniform(1, 32, rng);
    const auto q = normal({dh}, rng), kd = normal({ld, dh}, rng), k = normal({lq, dh}, rng);
    const std::string at = "instance " + std::to_string(i) + ": ";
    const double m = attention::mu(q, kd, k);
    if (!(m > 0.0 && m < 1.0)) r.failures.push_back(at + "mu = " + fmt(m) + " outside (0, 1)");
    if (attention::mu(q, Tensor::zeros(Shape{0, dh}), k) != 0.0) r.failures.push_back(at + "mu != 0 without demonstrations");
    // Shifting every demonstration key along q raises each demonstration score by delta.
    double qq = 0.0;
    for (double x : q.values()) qq += x * x;
    if (qq == 0.0) continue;
    const double delta = 0.5;
    auto boosted = kd.clone();
    auto b = boosted.mutable_data();
    for (std::size_t row = 0; row < ld; ++row)
      for (std::size_t c = 0; c < dh; ++c) b[row * dh + c] += delta * std::sqrt(double(dh)) * q[c] / qq;
    const double mb = attention::mu(q, boosted, k);
    const double expected = 1.0 / (1.0 + (1.0 - m) / m * std::exp(-delta));
    r.max_error = std::max(r.max_error, std::abs(mb - expected));
    if (!(mb > m)) r.failures.push_back(at + "mu did not increase under a demonstration boost");
    if (std::abs(mb - expected) > 1e-9) r.failures.push_back(at + "boosted mu off by " + fmt(mb - expected));
  }
  finish(r);
  return r;
}

SuiteResult verify_neutral_init(std::uint64_t seed) {
  SuiteResult r{"neutral_init", false, 0, 0.0, 1e-12, {}};
  model::ModelConfig mc;
  mc.seed = seed;
  const model::Model base(mc);
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> queries;
  for (std::size_t n : {1, 2, 5}) {
    std::vector<int> q(n);
    for (auto& t : q) t = static_cast<int>(uniform(0, mc.vocab_size - 1, rng));
    queries.push_back(q);
  }
  for (auto kind : variants::all_kinds()) {
    auto cfg = variants::VariantConfig::defaults(kind);
    if (kind == variants::VariantKind::linear_shift) cfg.gate_bias_init = -40.0;
    auto v = variants::build_variant(cfg, base);
    const bool patch = variants::uses_patch(kind);
    if (patch) v.set_patch(*cfg.patch, Tensor::zeros(Shape{mc.d_model}));
    for (const auto& q : queries) {
      ++r.cases;
      const auto got = v.forward(base, q), want = base.forward_with_trace(q);
      double diff = max_abs_diff(got.logits.values(), want.logits.values());
      for (std::size_t l = 0; l < want.hidden.size(); ++l)
        diff = std::max(diff, max_abs_diff(got.hidden[l].values(), want.hidden[l].values()));
      r.max_error = std::max(r.max_error, diff);
      const double tol = patch ? 0.0 : r.tolerance;
      if (!(diff <= tol)) {
        r.failures.push_back(variants::to_string(kind) + " at query length " + std::to_string(q.size()) + ": " +
                             fmt(diff));
      }
    }
  }
  finish(r);
  return r;
}

SuiteResult verify_op_gradients(std::uint64_t seed) {
  SuiteResult r{"op_gradients", false, 0, 0.0, 1e-4, {}};
  std::mt19937_64 rng(seed);
  for (const auto& [name, fn] : op_cases(rng)) {
    double worst = 0.0;
    for (int point = 0; point < 20; ++point) {
      ++r.cases;
      worst = std::max(worst, num::grad_check(fn, normal({4, 6}, rng), 1e-5));
    }
    r.max_error = std::max(r.max_error, worst);
    if (!(worst <= r.tolerance)) r.failures.push_back(name + ": relative error " + fmt(worst));
  }
  finish(r);
  return r;
}

SuiteResult verify_variant_gradients(std::uint64_t seed, std::size_t points) {
  SuiteResult r{"variant_gradients", false, 0, 0.0, 1e-4, {}};
  const model::Model base(probe_model(seed));
  const auto& mc = base.config();
  std::mt19937_64 rng(seed);
  using variants::VariantKind;
  for (auto kind : {VariantKind::mimic, VariantKind::head_sharing_mu, VariantKind::query_sharing_mu,
                    VariantKind::linear_shift, VariantKind::live_style, VariantKind::lora,
                    VariantKind::mimic_plus_lora}) {
    auto v = variants::build_variant(variants::VariantConfig::defaults(kind), base);
    v.set_trainable(true);
    double worst = 0.0;
    for (std::size_t p = 0; p < points; ++p) {
      ++r.cases;
      std::normal_distribution<double> d(0.0, 0.5);
      for (auto t : v.parameters())
        for (auto& x : t.mutable_data()) x = d(rng);
      std::vector<int> q(uniform(1, 4, rng));
      for (auto& t : q) t = static_cast<int>(uniform(0, mc.vocab_size - 1, rng));
      const auto w = normal({q.size(), mc.vocab_size}, rng);
      worst = std::max(worst, num::grad_check_params(
                                  [&] { return num::sum(num::mul(v.forward(base, q).logits, w)); },
                                  v.parameters(), 1e-5));
    }
    v.set_trainable(false);
    r.max_error = std::max(r.max_error, worst);
    if (!(worst <= r.tolerance)) r.failures.push_back(variants::to_string(kind) + ": relative error " + fmt(worst));
  }
  finish(r);
  return r;
}

VerifyReport run_verify(std::uint64_t seed, const std::optional<std::string>& corrupt_op) {
  if (corrupt_op) {
    const auto names = op_names();
    if (std::find(names.begin(), names.end(), *corrupt_op) == names.end()) {
      std::string known;
      for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
      throw std::invalid_argument("verify: cannot corrupt unknown op '" + *corrupt_op + "' (known: " + known + ")");
    }
  }
  FaultGuard guard(corrupt_op);
  VerifyReport report;
  report.suites.push_back(verify_decomposition(sub_seed(seed, "decomposition")));
  report.suites.push_back(verify_mu_contract(sub_seed(seed, "mu")));
  report.suites.push_back(verify_neutral_init(sub_seed(seed, "neutral")));
  report.suites.push_back(verify_op_gradients(sub_seed(seed, "ops")));
  report.suites.push_back(verify_variant_gradients(sub_seed(seed, "variants")));
  return report;
}

}  // namespace mimic::experiment
