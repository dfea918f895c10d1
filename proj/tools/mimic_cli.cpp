// Command-line runner: verify | pretrain | train | eval | ablate | bench | report.
// Exit codes: 0 success, 1 verification failure, 2 config error, 3 runtime abort.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mimic/experiment.hpp"

namespace fs = std::filesystem;
using namespace mimic;
using experiment::ConfigError;
using experiment::ExperimentConfig;

namespace {

constexpr int kOk = 0, kVerifyFailed = 1, kConfigError = 2, kRuntimeAbort = 3;

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::string> variant;
  std::optional<std::size_t> k_shots;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON experiment config (defaults to the desk setup)");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set train.lr=0.01 (repeatable)");
  cmd->add_option("--seed", c.seed, "Root seed");
  cmd->add_option("-o,--output-dir", c.output_dir, "Directory under the output root ($MIMIC_OUTPUT_ROOT)");
  cmd->add_option("--variant", c.variant, "Variant kind (train.variant.kind)");
  cmd->add_option("-k,--k-shots", c.k_shots, "Teacher shots (train.k_shots)");
}

nlohmann::json parse_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;
  }
}

// Precedence: flags > config file > desk defaults.
ExperimentConfig resolve(const Common& c) {
  nlohmann::json doc = nlohmann::json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw ConfigError("cannot open config file " + c.config_path);
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + c.config_path + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + s + "'");
    std::string pointer;
    std::stringstream keys(s.substr(0, eq));
    for (std::string part; std::getline(keys, part, '.');) pointer += "/" + part;
    doc[nlohmann::json::json_pointer(pointer)] = parse_value(s.substr(eq + 1));
  }
  if (c.seed) doc["seed"] = *c.seed;
  if (c.output_dir) doc["output_dir"] = *c.output_dir;
  if (c.k_shots) doc["train"]["k_shots"] = *c.k_shots;
  if (c.variant) doc["train"]["variant"] = {{"kind", *c.variant}};
  return experiment::parse_config(doc);
}

fs::path prepare_output(const ExperimentConfig& cfg) {
  const auto dir = experiment::output_dir(cfg);
  fs::create_directories(dir);
  nlohmann::json j = cfg;
  j["config_hash"] = experiment::config_hash(cfg);
  j["version"] = experiment::version_string();
  std::ofstream(dir / "config.json") << j.dump(2) << '\n';
  return dir;
}

fs::path base_path(const fs::path& dir) { return dir / "base.json"; }

model::Model load_base(const fs::path& dir) {
  const auto path = base_path(dir);
  if (!fs::exists(path)) {
    throw std::runtime_error("no base checkpoint at " + path.string() +
                             "; run `mimic pretrain` with the same config first");
  }
  return model::Model::load(path);
}

std::string run_tag(const ExperimentConfig& cfg) {
  return variants::to_string(cfg.train.variant.kind) + "-k" + std::to_string(cfg.train.k_shots) + "-seed" +
         std::to_string(cfg.seed);
}

void write_csv(const fs::path& path, const ExperimentConfig& cfg, const std::vector<tasks::EvalReport>& rows) {
  std::ofstream out(path);
  out << experiment::provenance_line(cfg, cfg.seed) << '\n';
  tasks::write_reports_csv(out, rows);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

// Trains one variant and returns its evaluation row; the checkpoint lands in dir.
tasks::EvalReport train_and_evaluate(const model::Model& base, const ExperimentConfig& cfg, const fs::path& dir,
                                     bool distances) {
  const auto data = experiment::make_task_data(cfg, cfg.seed);
  const auto tcfg = experiment::seeded_train_config(cfg);
  auto variant = variants::build_variant(tcfg.variant, base);
  const auto tag = run_tag(cfg);
  std::ofstream log(dir / ("train_log-" + tag + ".jsonl"));
  log << nlohmann::json{{"config_hash", experiment::config_hash(cfg)},
                        {"seed", cfg.seed},
                        {"version", experiment::version_string()}}
             .dump()
      << '\n';
  try {
    const auto fit = experiment::fit_variant(base, variant, data, tcfg, cfg.task.extraction_prompts, &log);
    std::cerr << tag << ": fitted in " << fit.seconds << " s";
    if (fit.train.best_epoch) std::cerr << ", best epoch " << fit.train.best_epoch << " (val " << fit.train.best_score << ")";
    std::cerr << '\n';
  } catch (const training::TrainingAborted& e) {
    std::ofstream(dir / ("abort-" + tag + ".json")) << e.diagnostic().dump(2) << '\n';
    throw;
  }
  variant.save(dir / ("variant-" + tag + ".json"), base);
  auto report = experiment::evaluate(base, tasks::variant_runner(base, variant), data, cfg, cfg.seed, distances);
  report.shots = cfg.train.k_shots;
  return report;
}

int cmd_verify(std::uint64_t seed, const std::optional<std::string>& corrupt, const std::optional<std::string>& out_dir) {
  const auto report = experiment::run_verify(seed, corrupt);
  const auto j = report.to_json();
  std::cout << j.dump(2) << '\n';
  if (out_dir) {
    const auto dir = experiment::output_root() / *out_dir;
    fs::create_directories(dir);
    std::ofstream(dir / "verify.json") << j.dump(2) << '\n';
  }
  for (const auto& s : report.suites) {
    std::cerr << (s.passed ? "PASS " : "FAIL ") << s.name << " (" << s.cases << " cases, max error " << s.max_error
              << ", tolerance " << s.tolerance << ")\n";
    for (const auto& f : s.failures) std::cerr << "  " << f << '\n';
  }
  return report.passed() ? kOk : kVerifyFailed;
}

int cmd_pretrain(const ExperimentConfig& cfg) {
  const auto dir = prepare_output(cfg);
  std::ofstream log(dir / "pretrain_log.jsonl");
  log << nlohmann::json{{"config_hash", experiment::config_hash(cfg)},
                        {"base_hash", experiment::base_hash(cfg)},
                        {"version", experiment::version_string()}}
             .dump()
      << '\n';
  model::Model m(cfg.model);
  training::pretrain(m, cfg.pretrain, &log, 250);
  const double icl = tasks::stream_icl_accuracy(m, cfg.pretrain.stream, cfg.task.eval_shots, 500,
                                                experiment::sub_seed(cfg.seed, "stream eval"));
  m.save(base_path(dir));
  std::cerr << "base written to " << base_path(dir).string() << "; " << cfg.task.eval_shots
            << "-shot stream accuracy " << icl << '\n';
  return kOk;
}

int cmd_train(const ExperimentConfig& cfg) {
  const auto dir = prepare_output(cfg);
  const auto base = load_base(dir);
  const auto report = train_and_evaluate(base, cfg, dir, false);
  std::cerr << "validation-selected variant: test accuracy " << report.accuracy << '\n';
  return kOk;
}

int cmd_eval(const ExperimentConfig& cfg) {
  const auto dir = prepare_output(cfg);
  const auto base = load_base(dir);
  const auto data = experiment::make_task_data(cfg, cfg.seed);
  std::vector<tasks::EvalReport> rows;
  rows.push_back(experiment::evaluate(base, tasks::zero_shot_runner(base), data, cfg, cfg.seed, true));
  rows.push_back(experiment::evaluate(base, tasks::icl_runner(base), data, cfg, cfg.seed, true));
  const auto variant = variants::Variant::load(dir / ("variant-" + run_tag(cfg) + ".json"), base);
  rows.push_back(experiment::evaluate(base, tasks::variant_runner(base, variant), data, cfg, cfg.seed, true));
  rows.back().shots = cfg.train.k_shots;
  const auto path = dir / ("eval-" + run_tag(cfg) + ".csv");
  write_csv(path, cfg, rows);
  std::cout << std::ifstream(path).rdbuf();
  return kOk;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, ',');)
    if (!part.empty()) out.push_back(part);
  return out;
}

int cmd_ablate(const ExperimentConfig& cfg, const std::string& kinds, const std::string& shots,
               const std::string& seeds) {
  const auto dir = prepare_output(cfg);
  const auto base = load_base(dir);
  std::vector<std::size_t> ks;
  std::vector<std::uint64_t> ss;
  try {
    for (const auto& k : split(shots)) ks.push_back(std::stoul(k));
    for (const auto& s : split(seeds)) ss.push_back(std::stoull(s));
  } catch (const std::exception&) {
    throw ConfigError("ablate: --shots and --seeds take comma-separated integers");
  }
  if (ks.empty()) ks.push_back(cfg.train.k_shots);
  if (ss.empty()) ss.push_back(cfg.seed);
  std::vector<tasks::EvalReport> rows;
  for (const auto& kind : split(kinds)) {
    for (auto k : ks) {
      for (auto seed : ss) {
        auto run = cfg;
        run.seed = seed;
        if (kind == "zero_shot" || kind == "icl") {
          run.task.eval_shots = k;
          run.validate();
          const auto data = experiment::make_task_data(run, seed);
          const auto runner = kind == "icl" ? tasks::icl_runner(base) : tasks::zero_shot_runner(base);
          rows.push_back(experiment::evaluate(base, runner, data, run, seed, false));
          rows.back().shots = k;
          continue;
        }
        run.train.k_shots = k;
        run.train.variant = variants::VariantConfig::defaults(variants::parse_kind(kind));
        try {
          run.validate();
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
        rows.push_back(train_and_evaluate(base, run, dir, true));
      }
    }
  }
  const auto path = dir / "ablate.csv";
  write_csv(path, cfg, rows);
  std::cout << std::ifstream(path).rdbuf();
  return kOk;
}

int cmd_bench(const ExperimentConfig& cfg, std::size_t n) {
  const auto dir = prepare_output(cfg);
  const auto base = load_base(dir);
  const auto data = experiment::make_task_data(cfg, cfg.seed);
  const auto ckpt = dir / ("variant-" + run_tag(cfg) + ".json");
  // Timing does not depend on the parameter values, so an untrained variant serves when none was saved.
  const auto variant = fs::exists(ckpt) ? variants::Variant::load(ckpt, base)
                                        : variants::build_variant(cfg.train.variant, base);
  const tasks::DemoSource demos{&data.train, cfg.task.eval_strategy, cfg.task.eval_shots, &base.embedding()};
  std::mt19937_64 rng(experiment::sub_seed(cfg.seed, "bench"));
  std::vector<tasks::LatencyReport> rows;
  rows.push_back(tasks::latency_bench(tasks::zero_shot_runner(base), data.test, demos, n, rng));
  rows.push_back(tasks::latency_bench(tasks::icl_runner(base), data.test, demos, n, rng));
  rows.push_back(tasks::latency_bench(tasks::variant_runner(base, variant), data.test, demos, n, rng));
  const auto path = dir / "latency.csv";
  std::ofstream out(path);
  out << experiment::provenance_line(cfg, cfg.seed) << '\n';
  tasks::write_latency_csv(out, rows);
  out.close();
  std::cout << std::ifstream(path).rdbuf();
  return kOk;
}

// Mean and spread of accuracy per (mode, k) over every report CSV in the directory.
int cmd_report(const ExperimentConfig& cfg) {
  const auto dir = experiment::output_dir(cfg);
  if (!fs::exists(dir)) throw std::runtime_error("nothing to report: " + dir.string() + " does not exist");
  std::map<std::pair<std::string, std::size_t>, std::vector<double>> acc, l2;
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() != ".csv" || name == "latency.csv") continue;
    ++files;
    std::ifstream in(entry.path());
    std::string line;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> cells;
      std::stringstream row(line);
      for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
      if (header.empty()) {
        header = cells;
        continue;
      }
      if (cells.size() < 6) throw std::runtime_error("malformed row in " + entry.path().string());
      const auto key = std::make_pair(cells[0], static_cast<std::size_t>(std::stoul(cells[1])));
      acc[key].push_back(std::stod(cells[3]));
      l2[key].push_back(std::stod(cells[4]));
    }
  }
  if (files == 0) throw std::runtime_error("no report CSVs in " + dir.string() + "; run eval or ablate first");
  std::ostringstream md;
  md << "| mode | k | runs | accuracy mean | accuracy std | mean L2 |\n|---|---|---|---|---|---|\n";
  for (const auto& [key, values] : acc) {
    double mean = 0.0, var = 0.0, dist = 0.0;
    for (double v : values) mean += v / values.size();
    for (double v : values) var += (v - mean) * (v - mean) / values.size();
    for (double v : l2[key]) dist += v / values.size();
    md << "| " << key.first << " | " << key.second << " | " << values.size() << " | " << std::fixed
       << std::setprecision(3) << mean << " | " << std::sqrt(var) << " | " << dist << " |\n";
    md.unsetf(std::ios::fixed);
  }
  std::ofstream(dir / "report.md") << md.str();
  std::cout << md.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shift-vector distillation experiments on a toy transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", experiment::version_string());

  std::uint64_t verify_seed = 0;
  std::optional<std::string> corrupt, verify_out;
  auto* verify = app.add_subcommand("verify", "Run the identity, mu, neutral-init and gradient suites");
  verify->add_option("--seed", verify_seed, "Seed for the random instances");
  verify->add_option("--corrupt-op", corrupt, "Scale one op's adjoint by 1.5 (negative control)");
  verify->add_option("-o,--output-dir", verify_out, "Also write verify.json under the output root");

  Common common;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the base model on the episode stream");
  auto* train = app.add_subcommand("train", "Train one variant against the pretrained base");
  auto* eval = app.add_subcommand("eval", "Evaluate zero-shot, k-shot ICL and the trained variant");
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate a (variant, k, seed) grid");
  auto* bench = app.add_subcommand("bench", "Time zero-shot, ICL and variant inference");
  auto* report = app.add_subcommand("report", "Summarise the report CSVs of an output directory");
  for (auto* cmd : {pretrain, train, eval, ablate, bench, report}) add_common(cmd, common);
  std::string kinds = "mimic,head_sharing_mu,query_sharing_mu,live_style,icl", shots, seeds;
  ablate->add_option("--variants", kinds, "Comma-separated kinds; zero_shot and icl are baselines");
  ablate->add_option("--shots", shots, "Comma-separated k values (default train.k_shots)");
  ablate->add_option("--seeds", seeds, "Comma-separated seeds (default the root seed)");
  std::size_t bench_n = 200;
  bench->add_option("-n", bench_n, "Timed queries per mode");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (verify->parsed()) return cmd_verify(verify_seed, corrupt, verify_out);
    const auto cfg = resolve(common);
    if (pretrain->parsed()) return cmd_pretrain(cfg);
    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg);
    if (ablate->parsed()) return cmd_ablate(cfg, kinds, shots, seeds);
    if (bench->parsed()) return cmd_bench(cfg, bench_n);
    if (report->parsed()) return cmd_report(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const training::TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kRuntimeAbort;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeAbort;
  }
  return kOk;
}
