#pragma once

// Small pre-norm transformer denoiser with block-causal attention and
// hand-written reverse mode.
//
// Sequence layout seen by forward(): [committed prefix | block | tail].
// Prefix rows attend to the prefix, block rows attend to prefix and block,
// tail rows (only present in tests) attend to everything and never feed the
// block. Logits are produced for block rows only.

#include "rcd/prob.hpp"
#include "rcd/rng.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace rcd {

/// Raised when an operation is called on an object in the wrong state
/// (stale forward trace, corruption sample without masks, ...).
class InvalidState : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Two models, or a model and a dataset, disagree on a shared dimension.
class DimensionMismatch : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Keeps a parameter out of template argument deduction so vectors convert
/// to spans at call sites.
template <class T> using NoDeduce = std::type_identity_t<T>;

struct ModelDims {
  int vocab = 64; // predictable tokens; [M] has id == vocab
  int dim = 64;
  int layers = 4;
  int heads = 4;
  int ff = 256;
  int max_len = 512;

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

template <class S> struct LayerParams {
  Vec<S> attn_norm; // D
  Mat<S> wq, wk, wv, wo; // D x D
  Vec<S> ff_norm;   // D
  Mat<S> w_in;      // D x F
  Mat<S> w_out;     // F x D
};

template <class S> struct DenoiserParams {
  ModelDims dims;
  EmbeddingCodebook<S> codebook;
  Mat<S> positional; // max_len x D
  std::vector<LayerParams<S>> layers;
  Vec<S> final_norm; // D
  Mat<S> lm_head;    // D x V, untied from the codebook

  // Bumped on every in-place update; forward traces record it.
  std::uint64_t version = 0;

  int mask_id() const { return dims.vocab; }
};

/// Calls f(name, tensor) for every parameter block in a fixed order. Works on
/// const and non-const params; tensors are Vec<S> or Mat<S>.
template <class P, class F> void visit_tensors(P& params, F&& f) {
  f(std::string("codebook"), params.codebook.rows);
  f(std::string("mask_row"), params.codebook.mask_row);
  f(std::string("positional"), params.positional);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& layer = params.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    f(p + "attn_norm", layer.attn_norm);
    f(p + "wq", layer.wq);
    f(p + "wk", layer.wk);
    f(p + "wv", layer.wv);
    f(p + "wo", layer.wo);
    f(p + "ff_norm", layer.ff_norm);
    f(p + "w_in", layer.w_in);
    f(p + "w_out", layer.w_out);
  }
  f(std::string("final_norm"), params.final_norm);
  f(std::string("lm_head"), params.lm_head);
}

/// Same-shape params filled with zeros (the gradient container).
template <class S> DenoiserParams<S> zeros_like(const ModelDims& dims);

/// Random init: N(0, 0.02) weights, output projections scaled by
/// 1/sqrt(2L), unit norm gains.
template <class S> DenoiserParams<S> init_params(const ModelDims& dims, std::uint64_t seed);

template <class To, class From> DenoiserParams<To> cast_params(const DenoiserParams<From>& p);

std::size_t parameter_count(const ModelDims& dims);

struct AttentionScheme {
  Index prefix_len = 0;
  Index block_len = 0;

  Index block_begin() const { return prefix_len; }
  Index block_end() const { return prefix_len + block_len; }
};

/// Per-position blend input used during target training: the reference's
/// distribution and weight. Delta is rebuilt from the live codebook so its
/// gradient reaches the codebook rows.
template <class S> struct SoftResidual {
  Vec<S> probs;
  S alpha = S(0);
};

/// Input embeddings for a token sequence. Tokens equal to mask_id() are
/// masked; a masked slot with a residual gets blend_embedding(), otherwise
/// the [M] row. Unmasked slots ignore any residual. `residuals` is either
/// empty or one entry per token.
template <class S>
Mat<S> embed(const DenoiserParams<S>& params, std::span<const int> tokens,
             NoDeduce<std::span<const std::optional<ResidualState<S>>>> residuals = {});

template <class S>
Mat<S> embed_soft(const DenoiserParams<S>& params, std::span<const int> tokens,
                  NoDeduce<std::span<const std::optional<SoftResidual<S>>>> residuals);

/// Accumulates d(loss)/d(codebook, mask_row, positional) given the gradient
/// with respect to the rows produced by embed_soft (or embed, with empty
/// residuals).
template <class S>
void embed_backward(const DenoiserParams<S>& params, std::span<const int> tokens,
                    NoDeduce<std::span<const std::optional<SoftResidual<S>>>> residuals,
                    const Mat<S>& d_embeddings, DenoiserParams<S>& grads);

template <class S> struct LayerCache {
  Mat<S> x_in, h1;
  Vec<S> inv_rms1;
  Mat<S> q, k, v;
  std::vector<Mat<S>> attn; // per head, n x n row-softmax
  Mat<S> heads_out;          // n x D, concatenated head outputs
  Mat<S> x_mid, h2;
  Vec<S> inv_rms2;
  Mat<S> pre_act, act; // n x F
};

template <class S> struct ForwardTrace {
  const DenoiserParams<S>* params = nullptr;
  std::uint64_t version = 0;
  AttentionScheme scheme;
  std::vector<LayerCache<S>> layers;
  Mat<S> x_final;
  Vec<S> inv_rms_final;
  Mat<S> h_final; // block rows only
  Mat<S> logits;  // block_len x V
};

template <class S>
ForwardTrace<S> forward(const DenoiserParams<S>& params, const Mat<S>& embeddings,
                        AttentionScheme scheme);

/// Block logits only.
template <class S>
Mat<S> logits(const DenoiserParams<S>& params, const Mat<S>& embeddings, AttentionScheme scheme);

/// Reverse mode through a recorded forward pass. Accumulates parameter
/// gradients into `grads` (embedding tables untouched; see embed_backward)
/// and returns d(loss)/d(embeddings). Throws InvalidState when the trace is
/// empty or the params changed since it was recorded.
template <class S>
Mat<S> backward(const ForwardTrace<S>& trace, const Mat<S>& d_logits, DenoiserParams<S>& grads);

} // namespace rcd
