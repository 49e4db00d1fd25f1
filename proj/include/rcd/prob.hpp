#pragma once

// Distribution kernels: tempered softmax, normalized entropy, soft-token
// residuals and the masked-slot embedding blend.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace rcd {

using Index = Eigen::Index;

template <class S> using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Input embedding table: one row per predictable token plus the [M] row.
template <class S> struct EmbeddingCodebook {
  Mat<S> rows;     // V x D
  Vec<S> mask_row; // D

  Index vocab() const { return rows.rows(); }
  Index dim() const { return rows.cols(); }
};

/// Residual carried from one denoising step to the next at a masked slot.
template <class S> struct ResidualState {
  Vec<S> delta;
  S alpha = S(0);
};

/// Index of the largest entry; ties resolve to the lowest index.
template <class Derived> Index argmax(const Eigen::DenseBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

template <class Derived> bool all_finite(const Eigen::DenseBase<Derived>& v) {
  for (Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(static_cast<double>(v(i)))) return false;
  }
  return true;
}

/// Throws unless p is a probability vector (entries >= 0, sum 1 within tol).
template <class Derived>
void check_distribution(const Eigen::MatrixBase<Derived>& p, double tol = 1e-6) {
  if (p.size() == 0) throw std::invalid_argument("distribution is empty");
  for (Index i = 0; i < p.size(); ++i) {
    if (!(p(i) >= 0)) {
      throw std::invalid_argument("distribution entry " + std::to_string(i) +
                                  " is negative or NaN");
    }
  }
  const double total = static_cast<double>(p.sum());
  if (std::abs(total - 1.0) > tol) {
    throw std::invalid_argument("distribution sums to " + std::to_string(total));
  }
}

/// softmax(z / t_res), computed with max subtraction.
template <class Derived>
Vec<typename Derived::Scalar>
softmax_with_temperature(const Eigen::MatrixBase<Derived>& logits,
                         typename Derived::Scalar t_res) {
  using S = typename Derived::Scalar;
  if (!(t_res > S(0)) || !std::isfinite(static_cast<double>(t_res))) {
    throw std::invalid_argument("residual temperature must be positive");
  }
  if (logits.size() == 0) throw std::invalid_argument("empty logits");
  if (!all_finite(logits)) throw std::invalid_argument("non-finite logit");
  const S top = logits.maxCoeff();
  Vec<S> out = ((logits.array() - top) / t_res).exp().matrix();
  out /= out.sum();
  return out;
}

template <class Derived>
Vec<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  return softmax_with_temperature(logits, typename Derived::Scalar(1));
}

/// H(p) / log V with natural logs, 0 log 0 := 0, clamped to [0, 1].
template <class Derived>
typename Derived::Scalar normalized_entropy(const Eigen::MatrixBase<Derived>& p) {
  using S = typename Derived::Scalar;
  if (p.size() < 2) {
    throw std::invalid_argument("normalized entropy needs a vocabulary of at least 2");
  }
  S h = 0;
  for (Index j = 0; j < p.size(); ++j) {
    if (p(j) > S(0)) h -= p(j) * std::log(p(j));
  }
  const S ratio = h / std::log(static_cast<S>(p.size()));
  return std::clamp(ratio, S(0), S(1));
}

/// Soft token E^T p: the probability-weighted sum of codebook rows.
template <class DerivedP, class DerivedE>
Vec<typename DerivedP::Scalar> residual_vector(const Eigen::MatrixBase<DerivedP>& p,
                                               const Eigen::MatrixBase<DerivedE>& rows) {
  if (p.size() != rows.rows()) {
    throw std::invalid_argument("distribution length " + std::to_string(p.size()) +
                                " does not match codebook rows " +
                                std::to_string(rows.rows()));
  }
  return rows.transpose() * p;
}

template <class DerivedP, class S>
Vec<S> residual_vector(const Eigen::MatrixBase<DerivedP>& p, const EmbeddingCodebook<S>& codebook) {
  return residual_vector(p, codebook.rows);
}

/// Input embedding for one slot. A masked slot interpolates its own ([M])
/// embedding toward the previous step's residual; an unmasked slot is
/// returned unchanged.
template <class Derived, class S>
Vec<S> blend_embedding(bool token_is_masked, const Eigen::MatrixBase<Derived>& token_embedding,
                       const ResidualState<S>& prev) {
  if (!(prev.alpha >= S(0) && prev.alpha <= S(1))) {
    throw std::invalid_argument("residual weight alpha outside [0, 1]");
  }
  if (!token_is_masked) return token_embedding;
  if (prev.delta.size() != token_embedding.size()) {
    throw std::invalid_argument("residual dimension does not match embedding dimension");
  }
  return (S(1) - prev.alpha) * token_embedding + prev.alpha * prev.delta;
}

} // namespace rcd
