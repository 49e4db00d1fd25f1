#pragma once

// Block-wise iterative denoising. Each block starts fully masked; every step
// runs the denoiser on [committed prefix | block], commits the most
// confident masked slots and remasks the rest. In RCD mode the remasked
// slots keep an entropy-weighted soft-token residual that is blended into
// their [M] embedding on the next step.

#include "rcd/datagen.hpp"
#include "rcd/model.hpp"

#include <string>
#include <variant>
#include <vector>

namespace rcd {

enum class DecodeMode { SeqD, RCD };
enum class WarmStart { Reference, Self, None };
enum class AlphaKind { Entropy, Linear, Confidence, InverseEntropy, InverseConfidence };

struct AlphaStrategy {
  AlphaKind kind = AlphaKind::Entropy;
  double c = 0.0; // Linear only

  /// "entropy", "linear:c", "confidence", "inverse-entropy", "inverse-confidence".
  static AlphaStrategy parse(const std::string& text);
  std::string str() const;
  bool operator==(const AlphaStrategy&) const = default;
};

struct TopM {
  int m = 1;
};
struct ConfidenceThreshold {
  double threshold = 0.85;
};
using SelectionPolicy = std::variant<TopM, ConfidenceThreshold>;

struct DecodeConfig {
  DecodeMode mode = DecodeMode::RCD;
  int block_size = 8;
  int max_steps = 0; // per block; 0 means block_size
  SelectionPolicy selection = ConfidenceThreshold{0.85};
  double sampling_temperature = 0.0; // 0 = greedy
  double t_res = 1.0;
  AlphaStrategy alpha;
  WarmStart warm_start = WarmStart::Reference;
  bool scale_delta = false; // build delta from the T_res-scaled distribution too
  int stop_token = Tokenizer::kEot;
  std::uint64_t seed = 0;

  int steps_per_block() const { return max_steps > 0 ? max_steps : block_size; }
  void validate() const;
};

std::string to_string(DecodeMode m);
std::string to_string(WarmStart w);
DecodeMode parse_mode(const std::string& s);
WarmStart parse_warm_start(const std::string& s);

/// Blend weight from a (possibly temperature-scaled) distribution.
template <class S> S compute_alpha(const Vec<S>& p_scaled, const AlphaStrategy& strategy);

inline constexpr int kTraceTopWidth = 5;

struct TopEntry {
  int id = 0;
  double prob = 0;
  bool operator==(const TopEntry&) const = default;
};

struct StepRecord {
  int step = 0;  // 1-based within the block
  int block = 0;
  std::vector<std::pair<int, int>> committed;               // (position, id)
  std::vector<std::pair<int, std::vector<TopEntry>>> top;   // per masked position
  std::vector<std::pair<int, double>> alpha;                // still-masked positions after the step
  int tokens = 0;
  bool forced = false;
  bool operator==(const StepRecord&) const = default;
};

struct DecodeTrace {
  std::vector<StepRecord> steps;
  bool operator==(const DecodeTrace&) const = default;
};

/// One record per line, fields in fixed order:
/// step, block, committed, top5, alpha, tokens, forced.
std::string trace_to_ndjson(const DecodeTrace& trace);
DecodeTrace trace_from_ndjson(const std::string& text);

template <class S> struct BlockDecodeState {
  TokenSeq prefix;
  TokenSeq tokens;
  std::vector<std::uint8_t> masked;
  std::vector<std::optional<ResidualState<S>>> residuals; // per block position
  int block_index = 0;
  int step = 0;
  std::vector<StepRecord> trace;

  static BlockDecodeState fresh(TokenSeq prefix, int block_size, int mask_id, int block_index = 0);
  std::size_t remaining() const;
};

/// Initial residuals for a fully masked block from one vanilla forward pass
/// of `source` (reference or target). Delta is built in the target's
/// codebook; alpha uses the configured strategy at temperature 1.
template <class S>
std::vector<std::optional<ResidualState<S>>> warm_start(const DenoiserParams<S>& source,
                                                        const EmbeddingCodebook<S>& target_codebook,
                                                        const BlockDecodeState<S>& state,
                                                        const AlphaStrategy& strategy);

/// alpha = 0, delta = 0 at every position.
template <class S>
std::vector<std::optional<ResidualState<S>>> zero_residuals(const BlockDecodeState<S>& state, Index dim);

template <class S>
void decode_step_seqd(const DenoiserParams<S>& params, BlockDecodeState<S>& state,
                      const DecodeConfig& config, Rng& rng);

template <class S>
void decode_step_rcd(const DenoiserParams<S>& params, BlockDecodeState<S>& state,
                     const DecodeConfig& config, Rng& rng);

template <class S> struct DecodeResult {
  TokenSeq tokens; // prompt followed by generated blocks
  DecodeTrace trace;
  int blocks = 0;
  int forced_blocks = 0;
};

/// Decodes up to num_blocks blocks after the prompt, left to right. Stops
/// after the block in which config.stop_token is committed. `ref` is only
/// used for the RCD warm start with WarmStart::Reference.
template <class S>
DecodeResult<S> decode_sequence(const DenoiserParams<S>& target, const DenoiserParams<S>* ref,
                                const TokenSeq& prompt, int num_blocks, const DecodeConfig& config,
                                std::uint64_t stream = 0);

} // namespace rcd
