#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mimic/model.hpp"

// Synthetic mapping tasks. A sample is a pair of alphabet symbols (x, y) and
// renders as the block [x, y, SEP]; a query renders as [x, y] (training) or
// [x] (inference) so the answer is predicted at the row right after the final
// separator.
namespace mimic::tasks {

constexpr int kSeparator = 0;
constexpr int kFirstSymbol = 2;  // token 1 is reserved

enum class Family { permutation, modular_offset };
Family parse_family(const std::string& name);
std::string to_string(Family f);

inline int symbol_token(std::size_t symbol) { return kFirstSymbol + static_cast<int>(symbol); }
inline std::size_t token_symbol(int token) { return static_cast<std::size_t>(token - kFirstSymbol); }

// A bijection over an alphabet of m symbols.
class MappingTask {
 public:
  // max_offset > 0 draws modular offsets from 1..max_offset instead of 0..m-1.
  static MappingTask sample(Family family, std::size_t alphabet, std::mt19937_64& rng,
                            std::size_t max_offset = 0);
  static MappingTask from_seed(Family family, std::size_t alphabet, std::uint64_t seed,
                               std::size_t max_offset = 0);
  static MappingTask modular_offset(std::size_t alphabet, std::size_t offset);
  static MappingTask permutation(std::vector<std::size_t> table);

  Family family() const { return family_; }
  std::size_t alphabet() const { return table_.size(); }
  std::size_t apply(std::size_t symbol) const { return table_.at(symbol); }
  int apply_token(int token) const { return symbol_token(apply(token_symbol(token))); }
  const std::vector<std::size_t>& table() const { return table_; }
  std::string id() const;

 private:
  Family family_ = Family::permutation;
  std::vector<std::size_t> table_;
};

struct Sample {
  int x = 0;
  int y = 0;
  std::string task_id;
};

struct Episode {
  std::vector<Sample> demos;
  Sample query;
};

// include_answer=false leaves the query as [x] for inference.
model::PromptContext render(const Episode& episode, bool include_answer = true);
Episode parse(const model::PromptContext& ctx);

// Where the query symbol sits relative to the demonstrations.
enum class QueryPlacement { disjoint, unconstrained, demonstrated };
QueryPlacement parse_query_placement(const std::string& name);
std::string to_string(QueryPlacement p);

struct StreamConfig {
  std::vector<Family> families{Family::modular_offset};
  std::size_t alphabet = 16;
  std::size_t min_shots = 8;
  std::size_t max_shots = 8;
  QueryPlacement placement = QueryPlacement::disjoint;
  std::size_t max_offset = 0;
};

// Endless ICL episodes, each under a freshly sampled mapping.
class PretrainingStream {
 public:
  PretrainingStream(StreamConfig config, std::uint64_t seed);
  Episode next();
  const MappingTask& last_task() const { return last_task_; }

 private:
  StreamConfig config_;
  std::mt19937_64 rng_;
  MappingTask last_task_;
};

// Builds an episode under a fixed mapping with k demonstrations.
// `demonstrated` puts the query symbol in one uniformly chosen demo slot.
Episode make_episode(const MappingTask& task, std::size_t shots, QueryPlacement placement,
                     std::mt19937_64& rng);

// n labeled samples with x drawn uniformly from `domain` (symbol indices).
std::vector<Sample> generate_task_dataset(const MappingTask& task, std::size_t n,
                                          const std::vector<std::size_t>& domain,
                                          std::mt19937_64& rng);

// Splits the alphabet into disjoint train / eval query domains.
struct DomainSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> eval;
};
DomainSplit split_alphabet(std::size_t alphabet, double eval_fraction, std::mt19937_64& rng);

// Dataset files: one JSON object {x, y, task_id} per line.
void write_dataset(const std::filesystem::path& path, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(const std::filesystem::path& path);

enum class IcdStrategy { random, nearest };
IcdStrategy parse_icd_strategy(const std::string& name);
std::string to_string(IcdStrategy s);

// Picks k demonstrations from pool. `nearest` ranks by cosine similarity of
// the input symbols' embedding rows (ties broken at random) and places the
// most similar demonstration last, next to the query.
std::vector<Sample> icd_selection(IcdStrategy strategy, const std::vector<Sample>& pool,
                                  const Sample& query, std::size_t k,
                                  const model::Tensor& embedding, std::mt19937_64& rng);

// Answers from the demonstrations alone: exact lookup when the query symbol
// was demonstrated, otherwise the offset a modular family implies, or a
// uniform guess among undemonstrated outputs for permutations.
int table_lookup_oracle(const Episode& episode, Family family, std::size_t alphabet,
                        std::mt19937_64& rng);

}  // namespace mimic::tasks
