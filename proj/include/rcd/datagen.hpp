#pragma once

// Synthetic corpora (order-1 Markov chains, multi-digit addition), the
// character tokenizer, and the line-oriented dataset file format:
//
//   {"tokenizer":"char64","V":64,"records":N}
//   12 5 40 ...        one record per line, decimal token ids
//
// A Markov dataset keeps its generating chain in a JSON sidecar
// (<dataset>.markov.json).

#include "rcd/prob.hpp"
#include "rcd/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rcd {

using TokenSeq = std::vector<int>;

/// Character-level tokenizer over a fixed 64-symbol table. Id 0 is padding
/// ("_"), id 1 is end-of-text ("␄"); the mask id is vocab() and is never
/// produced by encode().
class Tokenizer {
public:
  Tokenizer();

  static constexpr int kPad = 0;
  static constexpr int kEot = 1;

  const std::string& name() const { return name_; }
  int vocab() const { return static_cast<int>(symbols_.size()); }
  int mask_id() const { return vocab(); }

  TokenSeq encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  int id(std::string_view symbol) const;
  const std::string& symbol(int id) const;

private:
  std::string name_ = "char64";
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

struct Dataset {
  std::string tokenizer = "char64";
  int vocab = 64;
  std::vector<TokenSeq> records;

  bool operator==(const Dataset&) const = default;
};

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct MarkovSpec {
  int states = 3;
  Mat<double> transition; // row-stochastic, states x states
  Vec<double> initial;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Token id used for chain state s (letters a, b, c, ...).
int markov_token(int state);
/// Inverse of markov_token; nullopt for other tokens.
std::optional<int> markov_state(int token);

Dataset gen_markov_corpus(const MarkovSpec& spec, int num_blocks, int block_len);

void save_markov_spec(const MarkovSpec& spec, const std::filesystem::path& path);
MarkovSpec load_markov_spec(const std::filesystem::path& path);
std::filesystem::path markov_sidecar(const std::filesystem::path& dataset_path);

struct AdditionConfig {
  int min_digits = 3;
  int max_digits = 3;
  int count = 1000;
  bool with_cot = false;
  std::uint64_t seed = 0;
};

/// "a+b=c␄", or "a+b=<column steps>=c␄" with with_cot where each column
/// (least significant first) contributes a span "x+y+carry=sum".
Dataset gen_addition_corpus(const AdditionConfig& config);

std::string addition_text(long a, long b, bool with_cot);

/// Parses "a+b=...=c" (the end-of-text symbol optional). Returns nullopt
/// when the line is not an addition record.
struct AdditionRecord {
  long a = 0, b = 0, c = 0;
};
std::optional<AdditionRecord> parse_addition(std::string_view text);

struct ReverseConfig {
  int min_len = 3;
  int max_len = 6;
  int count = 1000;
  std::uint64_t seed = 0;
};

/// "s=reverse(s)␄" over lowercase letters.
Dataset gen_reverse_corpus(const ReverseConfig& config);

/// Position one past the first occurrence of `anchor`, or 0 when absent.
std::size_t prompt_length(const TokenSeq& record, int anchor);

/// Last contiguous run of digits before the first end-of-text token.
std::optional<std::string> extract_answer(const Tokenizer& tok, std::span<const int> ids);

} // namespace rcd
