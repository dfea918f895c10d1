#include "mimic/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mimic::tasks {

Family parse_family(const std::string& name) {
  if (name == "permutation") return Family::permutation;
  if (name == "modular_offset") return Family::modular_offset;
  throw std::invalid_argument("unknown task family '" + name + "'");
}

std::string to_string(Family f) {
  return f == Family::permutation ? "permutation" : "modular_offset";
}

MappingTask MappingTask::sample(Family family, std::size_t alphabet, std::mt19937_64& rng,
                                std::size_t max_offset) {
  if (alphabet < 2) throw std::invalid_argument("mapping task: alphabet needs at least 2 symbols");
  if (max_offset >= alphabet) {
    throw std::invalid_argument("mapping task: max_offset must be below the alphabet size");
  }
  if (family == Family::modular_offset) {
    std::uniform_int_distribution<std::size_t> pick(max_offset ? 1 : 0, max_offset ? max_offset : alphabet - 1);
    return modular_offset(alphabet, pick(rng));
  }
  std::vector<std::size_t> table(alphabet);
  std::iota(table.begin(), table.end(), 0);
  std::shuffle(table.begin(), table.end(), rng);
  return permutation(std::move(table));
}

MappingTask MappingTask::from_seed(Family family, std::size_t alphabet, std::uint64_t seed,
                                   std::size_t max_offset) {
  std::mt19937_64 rng(seed);
  return sample(family, alphabet, rng, max_offset);
}

MappingTask MappingTask::modular_offset(std::size_t alphabet, std::size_t offset) {
  MappingTask t;
  t.family_ = Family::modular_offset;
  t.table_.resize(alphabet);
  for (std::size_t x = 0; x < alphabet; ++x) t.table_[x] = (x + offset) % alphabet;
  return t;
}

MappingTask MappingTask::permutation(std::vector<std::size_t> table) {
  std::vector<std::size_t> sorted(table);
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != i) throw std::invalid_argument("permutation table is not a bijection");
  }
  MappingTask t;
  t.family_ = Family::permutation;
  t.table_ = std::move(table);
  return t;
}

std::string MappingTask::id() const {
  if (family_ == Family::modular_offset) {
    return "offset" + std::to_string(table_.size()) + "+" + std::to_string(table_[0]);
  }
  std::string s = "perm" + std::to_string(table_.size()) + ":";
  for (std::size_t i = 0; i < table_.size(); ++i) {
    if (i) s += '.';
    s += std::to_string(table_[i]);
  }
  return s;
}

model::PromptContext render(const Episode& episode, bool include_answer) {
  model::PromptContext ctx;
  for (const auto& d : episode.demos) ctx.icd_tokens.push_back({d.x, d.y, kSeparator});
  ctx.query_tokens = {episode.query.x};
  if (include_answer) {
    ctx.query_tokens.push_back(episode.query.y);
    ctx.answer_begin = 1;
    ctx.answer_end = 2;
  } else {
    ctx.answer_begin = ctx.answer_end = 1;
  }
  return ctx;
}

Episode parse(const model::PromptContext& ctx) {
  Episode e;
  for (const auto& block : ctx.icd_tokens) {
    if (block.size() != 3 || block[2] != kSeparator) {
      throw std::invalid_argument("parse: demonstration block is not [x, y, SEP]");
    }
    e.demos.push_back({block[0], block[1], {}});
  }
  if (ctx.query_tokens.empty() || ctx.query_tokens.size() > 2) {
    throw std::invalid_argument("parse: query must be [x] or [x, y]");
  }
  e.query.x = ctx.query_tokens[0];
  e.query.y = ctx.query_tokens.size() == 2 ? ctx.query_tokens[1] : -1;
  return e;
}

QueryPlacement parse_query_placement(const std::string& name) {
  if (name == "disjoint") return QueryPlacement::disjoint;
  if (name == "unconstrained") return QueryPlacement::unconstrained;
  if (name == "demonstrated") return QueryPlacement::demonstrated;
  throw std::invalid_argument("unknown query placement '" + name +
                              "' (expected disjoint, unconstrained or demonstrated)");
}

std::string to_string(QueryPlacement p) {
  switch (p) {
    case QueryPlacement::disjoint: return "disjoint";
    case QueryPlacement::unconstrained: return "unconstrained";
    case QueryPlacement::demonstrated: return "demonstrated";
  }
  return "?";
}

Episode make_episode(const MappingTask& task, std::size_t shots, QueryPlacement placement,
                     std::mt19937_64& rng) {
  const auto m = task.alphabet();
  const bool disjoint = placement == QueryPlacement::disjoint;
  if (disjoint && m < 2) {
    throw std::invalid_argument("make_episode: disjoint demonstrations need an alphabet of at least 2");
  }
  if (placement == QueryPlacement::demonstrated && shots == 0) {
    throw std::invalid_argument("make_episode: cannot demonstrate the query with zero shots");
  }
  std::uniform_int_distribution<std::size_t> pick(0, m - 1);
  const auto id = task.id();
  Episode e;
  const std::size_t query = pick(rng);
  e.query = {symbol_token(query), symbol_token(task.apply(query)), id};
  for (std::size_t i = 0; i < shots; ++i) {
    std::size_t x = pick(rng);
    while (disjoint && x == query) x = pick(rng);
    e.demos.push_back({symbol_token(x), symbol_token(task.apply(x)), id});
  }
  if (placement == QueryPlacement::demonstrated) {
    std::uniform_int_distribution<std::size_t> slot(0, shots - 1);
    e.demos[slot(rng)] = e.query;
  }
  return e;
}

PretrainingStream::PretrainingStream(StreamConfig config, std::uint64_t seed)
    : config_(std::move(config)), rng_(seed) {
  if (config_.families.empty()) throw std::invalid_argument("pretraining stream: no families");
  if (config_.min_shots > config_.max_shots) {
    throw std::invalid_argument("pretraining stream: min_shots exceeds max_shots");
  }
  if (config_.max_offset >= config_.alphabet) {
    throw std::invalid_argument("pretraining stream: max_offset must be below the alphabet size");
  }
}

Episode PretrainingStream::next() {
  std::uniform_int_distribution<std::size_t> fam(0, config_.families.size() - 1);
  std::uniform_int_distribution<std::size_t> shots(config_.min_shots, config_.max_shots);
  const Family family = config_.families[fam(rng_)];
  last_task_ = MappingTask::sample(family, config_.alphabet, rng_, config_.max_offset);
  const auto k = shots(rng_);
  return make_episode(last_task_, k, config_.placement, rng_);
}

std::vector<Sample> generate_task_dataset(const MappingTask& task, std::size_t n,
                                          const std::vector<std::size_t>& domain,
                                          std::mt19937_64& rng) {
  if (domain.empty()) throw std::invalid_argument("generate_task_dataset: empty domain");
  std::uniform_int_distribution<std::size_t> pick(0, domain.size() - 1);
  const auto id = task.id();
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = domain[pick(rng)];
    out.push_back({symbol_token(x), symbol_token(task.apply(x)), id});
  }
  return out;
}

DomainSplit split_alphabet(std::size_t alphabet, double eval_fraction, std::mt19937_64& rng) {
  if (eval_fraction < 0.0 || eval_fraction >= 1.0) {
    throw std::invalid_argument("split_alphabet: eval_fraction must lie in [0, 1)");
  }
  std::vector<std::size_t> all(alphabet);
  std::iota(all.begin(), all.end(), 0);
  DomainSplit split;
  if (eval_fraction == 0.0) {
    split.train = all;
    split.eval = all;
    return split;
  }
  std::shuffle(all.begin(), all.end(), rng);
  const auto n_eval = std::max<std::size_t>(
      1, static_cast<std::size_t>(eval_fraction * static_cast<double>(alphabet) + 0.5));
  split.eval.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_eval));
  split.train.assign(all.begin() + static_cast<std::ptrdiff_t>(n_eval), all.end());
  std::sort(split.eval.begin(), split.eval.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

IcdStrategy parse_icd_strategy(const std::string& name) {
  if (name == "random") return IcdStrategy::random;
  if (name == "nearest") return IcdStrategy::nearest;
  throw std::invalid_argument("unknown ICD strategy '" + name + "' (expected random or nearest)");
}

std::string to_string(IcdStrategy s) { return s == IcdStrategy::random ? "random" : "nearest"; }

std::vector<Sample> icd_selection(IcdStrategy strategy, const std::vector<Sample>& pool,
                                  const Sample& query, std::size_t k,
                                  const model::Tensor& embedding, std::mt19937_64& rng) {
  if (k > pool.size()) {
    throw std::invalid_argument("icd_selection: need " + std::to_string(k) +
                                " demonstrations from a pool of " + std::to_string(pool.size()));
  }
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  if (strategy == IcdStrategy::nearest) {
    const auto d = embedding.cols();
    auto row_of = [&](int token) {
      if (token < 0 || static_cast<std::size_t>(token) >= embedding.rows()) {
        throw std::out_of_range("icd_selection: token " + std::to_string(token) +
                                " outside the embedding table");
      }
      return static_cast<std::size_t>(token);
    };
    const auto qrow = row_of(query.x);
    auto cosine = [&](int token) {
      const auto r = row_of(token);
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dot += embedding.at(qrow, c) * embedding.at(r, c);
        na += embedding.at(qrow, c) * embedding.at(qrow, c);
        nb += embedding.at(r, c) * embedding.at(r, c);
      }
      return na > 0.0 && nb > 0.0 ? dot / std::sqrt(na * nb) : 0.0;
    };
    std::vector<double> sim(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) sim[i] = cosine(pool[i].x);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    order.resize(k);
    std::reverse(order.begin(), order.end());
  } else {
    order.resize(k);
  }
  std::vector<Sample> out;
  out.reserve(k);
  for (auto i : order) out.push_back(pool[i]);
  return out;
}

void write_dataset(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  for (const auto& s : samples) {
    out << nlohmann::json{{"x", s.x}, {"y", s.y}, {"task_id", s.task_id}}.dump() << '\n';
  }
}

std::vector<Sample> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read dataset " + path.string());
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("x").get<int>(), j.at("y").get<int>(), j.value("task_id", "")});
  }
  return out;
}

int table_lookup_oracle(const Episode& episode, Family family, std::size_t alphabet,
                        std::mt19937_64& rng) {
  for (const auto& d : episode.demos) {
    if (d.x == episode.query.x) return d.y;
  }
  if (family == Family::modular_offset && !episode.demos.empty()) {
    const auto& d = episode.demos.front();
    const auto offset = (token_symbol(d.y) + alphabet - token_symbol(d.x)) % alphabet;
    return symbol_token((token_symbol(episode.query.x) + offset) % alphabet);
  }
  std::set<int> used;
  for (const auto& d : episode.demos) used.insert(d.y);
  std::vector<int> candidates;
  for (std::size_t s = 0; s < alphabet; ++s) {
    if (!used.contains(symbol_token(s))) candidates.push_back(symbol_token(s));
  }
  if (candidates.empty()) {
    for (std::size_t s = 0; s < alphabet; ++s) candidates.push_back(symbol_token(s));
  }
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

}  // namespace mimic::tasks
