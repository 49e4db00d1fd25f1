#pragma once

// Resolved run configuration (model dims, training, decoding, data, paths,
// evaluation) loaded from a JSON file over built-in defaults, and the run
// manifest written beside every command's outputs.

#include "rcd/eval.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rcd {

inline constexpr const char* kToolName = "rcd";
inline constexpr const char* kToolVersion = "0.1.0";

struct DataConfig {
  std::string kind = "addition"; // addition | markov | reverse
  // addition
  int min_digits = 3;
  int max_digits = 3;
  int train_count = 4000;
  int heldout_count = 200;
  bool with_cot = false;
  // reverse (reuses train_count / heldout_count)
  int min_len = 3;
  int max_len = 6;
  // markov
  int states = 3;
  std::vector<std::vector<double>> transition = {{0.6, 0.3, 0.1}, {0.1, 0.2, 0.7}, {0.5, 0.1, 0.4}};
  std::vector<double> initial = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  int train_blocks = 4000;
  int heldout_blocks = 500;
  int block_len = 16;

  MarkovSpec markov_spec(std::uint64_t seed) const;
};

struct PathsConfig {
  std::string data;    // training dataset
  std::string heldout; // held-out dataset / task set
  std::string ref;     // reference checkpoint
  std::string target;  // RCD (or any decode) target checkpoint
  std::string seqd;    // SeqD control checkpoint (sweeps)
  std::string prompts; // one prompt per line (decode)
  std::string trace;   // trace.ndjson (recall)
  std::string out = "out";
};

struct EvalConfig {
  std::vector<double> thresholds = default_thresholds();
  std::vector<std::string> strategies = {"entropy", "linear:0.5", "confidence", "inverse-entropy",
                                         "inverse-confidence"};
  std::vector<int> recall_k = {1, 3, 5};
  int num_blocks = 2;  // blocks decoded per task / prompt
  int max_tasks = 0;   // 0 = all held-out records
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelDims model;
  ModelDims ref_model{64, 32, 2, 4, 128, 512};
  TrainConfig train;
  DecodeConfig decode;
  DataConfig data;
  PathsConfig paths;
  EvalConfig eval;

  /// Pushes the run seed into the training and decoding configs and
  /// validates every section.
  void resolve();
};

using Json = nlohmann::ordered_json;

Json to_json(const RunConfig& config);

/// Overlays `overrides` on `base`. Unknown keys or wrong value types raise
/// ParseError.
RunConfig merge_run_config(const RunConfig& base, const Json& overrides);

/// Defaults overlaid with the JSON file at `path`.
RunConfig load_run_config(const std::filesystem::path& path);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

struct Manifest {
  std::string tool = kToolName;
  std::string version = kToolVersion;
  std::string command;
  std::vector<std::string> args; // command-specific positional settings (e.g. kind, mode)
  Json config;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;  // path -> sha256
  std::map<std::string, std::string> outputs; // file name (relative to out dir) -> sha256
};

Json to_json(const Manifest& m);
Manifest manifest_from_json(const Json& j);

inline constexpr const char* kManifestName = "manifest.json";

void write_manifest(const Manifest& m, const std::filesystem::path& dir);
Manifest read_manifest(const std::filesystem::path& path);

} // namespace rcd
