#pragma once

// Masked-diffusion corruption, the 1/t-weighted masked cross-entropy, and
// the two training stages: a plain masked-objective reference model and a
// target trained on inputs blended with the frozen reference's residuals.

#include "rcd/datagen.hpp"
#include "rcd/model.hpp"

#include <functional>
#include <stdexcept>

namespace rcd {

/// Loss became non-finite during training.
class TrainingFailure : public std::runtime_error {
public:
  TrainingFailure(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

private:
  long step_;
};

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_ratio = 0.03;
  double grad_clip = 1.0; // global L2 norm; <= 0 disables
  int batch_size = 16;
  int epochs = 1;
  int grad_accum = 1;
  double t_min = 0.01;
  int block_size = 8;
  // Blocks are laid on a grid starting one past the first `anchor` token
  // of each record (record start when absent or anchor < 0).
  int anchor = -1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CorruptionSample {
  TokenSeq x0;
  double t = 1.0;
  std::vector<std::uint8_t> mask;
  TokenSeq xt;

  std::size_t masked_count() const;
};

/// Masks each position independently with probability t, resampling until
/// at least one position is masked.
CorruptionSample corrupt(std::span<const int> x0, double t, int mask_id, Rng& rng);

/// One training example: clean prefix plus a corrupted block.
struct TrainingExample {
  TokenSeq prefix;
  CorruptionSample sample;

  TokenSeq tokens() const;
  AttentionScheme scheme() const;
};

/// Picks a block on the record's grid, pads it with Tokenizer::kPad, draws
/// t ~ U(0, 1] and corrupts it.
TrainingExample draw_example(const TokenSeq& record, const TrainConfig& config, int mask_id, Rng& rng);

/// (1 / max(t, t_min)) * sum over masked i of -log softmax(logits_i)[x0_i].
template <class S>
double masked_ce_loss(const Mat<S>& logits, const CorruptionSample& sample, double t_min);

/// Loss plus d(loss)/d(logits).
template <class S>
double masked_ce_loss_grad(const Mat<S>& logits, const CorruptionSample& sample, double t_min,
                           Mat<S>& d_logits);

/// Reference distributions and entropy weights at the masked block slots,
/// computed from a vanilla (mask-embedding) forward pass of the reference.
/// The result is indexed like example.tokens(); unmasked slots are empty.
template <class S>
std::vector<std::optional<SoftResidual<S>>> reference_signal(const DenoiserParams<S>& ref,
                                                             const TrainingExample& example);

/// Residual states the target sees during training: p and alpha from the
/// frozen reference, delta built with the target's codebook. Indexed by
/// block position; only masked positions are populated.
template <class S>
std::vector<std::optional<ResidualState<S>>> make_training_residuals(
    const DenoiserParams<S>& ref, const EmbeddingCodebook<S>& target_codebook,
    const TrainingExample& example);

/// Loss of one example; accumulates scale * d(loss)/d(params) into grads
/// when given. `residuals` may be null (plain masked objective).
template <class S>
double example_loss(const DenoiserParams<S>& model, const TrainingExample& example,
                    const std::vector<std::optional<SoftResidual<S>>>* residuals, double t_min,
                    DenoiserParams<S>* grads = nullptr, S scale = S(1));

struct TrainLogRow {
  long step = 0;
  int epoch = 0;
  double loss = 0;
  double lr = 0;
  std::uint64_t seed = 0;
};
using TrainLogger = std::function<void(const TrainLogRow&)>;

/// AdamW with decoupled weight decay on matrices (not on gains or the mask row).
class AdamW {
public:
  AdamW(const ModelDims& dims, const TrainConfig& config);
  void step(DenoiserParams<float>& params, const DenoiserParams<float>& grads, double lr);

private:
  TrainConfig config_;
  DenoiserParams<float> m_, v_;
  long t_ = 0;
};

/// Trains `model` in place. With a reference, every example's masked slots
/// are blended with the reference's residual signal (the reference is only
/// read). Throws TrainingFailure on a non-finite loss.
void train_denoiser(DenoiserParams<float>& model, const Dataset& data, const TrainConfig& config,
                    const DenoiserParams<float>* ref = nullptr, const TrainLogger& log = {});

DenoiserParams<float> train_reference(const Dataset& data, const ModelDims& dims,
                                      const TrainConfig& config, const TrainLogger& log = {});

DenoiserParams<float> train_target_rcd(const DenoiserParams<float>& ref, const Dataset& data,
                                       const ModelDims& dims, const TrainConfig& config,
                                       const TrainLogger& log = {});

/// Mean per-token cross-entropy over masked positions of fixed corruptions
/// (one example per record, drawn from `seed`). With a reference the target
/// sees residual-augmented inputs, as in training.
double heldout_masked_ce(const DenoiserParams<float>& model, const Dataset& data,
                         const TrainConfig& config, std::uint64_t seed,
                         const DenoiserParams<float>* ref = nullptr);

} // namespace rcd
