#include "rcd/model.hpp"

#include <cmath>
#include <numbers>

namespace rcd {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kGeluC = 0.044715;

template <class S> void rms_norm(const Mat<S>& x, const Vec<S>& gain, Mat<S>& y, Vec<S>& inv_rms) {
  const Index n = x.rows();
  const Index d = x.cols();
  inv_rms.resize(n);
  y.resize(n, d);
  for (Index i = 0; i < n; ++i) {
    const S ms = x.row(i).squaredNorm() / static_cast<S>(d);
    inv_rms(i) = S(1) / std::sqrt(ms + static_cast<S>(kNormEps));
    y.row(i) = (x.row(i).array() * inv_rms(i) * gain.transpose().array()).matrix();
  }
}

// Returns dx; accumulates d gain.
template <class S>
Mat<S> rms_norm_backward(const Mat<S>& x, const Vec<S>& gain, const Vec<S>& inv_rms,
                         const Mat<S>& dy, Vec<S>& d_gain) {
  const Index n = x.rows();
  const Index d = x.cols();
  Mat<S> dx(n, d);
  for (Index i = 0; i < n; ++i) {
    const S r = inv_rms(i);
    d_gain += (dy.row(i).array() * x.row(i).array() * r).matrix().transpose();
    const auto gdy = (gain.transpose().array() * dy.row(i).array()).eval();
    const S dot = (gdy * x.row(i).array()).sum();
    dx.row(i) = (gdy * r - x.row(i).array() * (r * r * r * dot / static_cast<S>(d))).matrix();
  }
  return dx;
}

template <class S> S gelu(S u) {
  const S c = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
  return S(0.5) * u * (S(1) + std::tanh(c * (u + static_cast<S>(kGeluC) * u * u * u)));
}

template <class S> S gelu_grad(S u) {
  const S c = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
  const S th = std::tanh(c * (u + static_cast<S>(kGeluC) * u * u * u));
  return S(0.5) * (S(1) + th) +
         S(0.5) * u * (S(1) - th * th) * c * (S(1) + S(3) * static_cast<S>(kGeluC) * u * u);
}

// 0 = prefix, 1 = block, 2 = tail. Row i may attend column j iff seg(j) <= seg(i).
int segment(Index i, const AttentionScheme& s) {
  if (i < s.prefix_len) return 0;
  if (i < s.block_end()) return 1;
  return 2;
}

double normal(Rng& rng) {
  // Box-Muller on the portable uniform source.
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <class T> void fill_normal(T& t, double stddev, Rng& rng) {
  for (Index i = 0; i < t.size(); ++i) {
    t.data()[i] = static_cast<typename T::Scalar>(stddev * normal(rng));
  }
}

void check_tokens(std::span<const int> tokens, const ModelDims& dims) {
  if (static_cast<int>(tokens.size()) > dims.max_len) {
    throw std::invalid_argument("sequence length " + std::to_string(tokens.size()) +
                                " exceeds max_len " + std::to_string(dims.max_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] > dims.vocab) {
      throw std::invalid_argument("token id " + std::to_string(tokens[i]) + " at position " +
                                  std::to_string(i) + " outside vocabulary");
    }
  }
}

} // namespace

void ModelDims::validate() const {
  if (vocab < 2 || dim < 1 || layers < 0 || heads < 1 || ff < 1 || max_len < 1) {
    throw std::invalid_argument("model dimensions must be positive (vocab >= 2)");
  }
  if (dim % heads != 0) {
    throw std::invalid_argument("model dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
}

std::size_t parameter_count(const ModelDims& d) {
  const std::size_t D = d.dim;
  const std::size_t per_layer = 2 * D + 4 * D * D + 2 * D * d.ff;
  return d.vocab * D + D + d.max_len * D + d.layers * per_layer + D + D * d.vocab;
}

template <class S> DenoiserParams<S> zeros_like(const ModelDims& dims) {
  dims.validate();
  const Index V = dims.vocab, D = dims.dim, F = dims.ff;
  DenoiserParams<S> p;
  p.dims = dims;
  p.codebook.rows = Mat<S>::Zero(V, D);
  p.codebook.mask_row = Vec<S>::Zero(D);
  p.positional = Mat<S>::Zero(dims.max_len, D);
  p.layers.resize(dims.layers);
  for (auto& layer : p.layers) {
    layer.attn_norm = Vec<S>::Zero(D);
    layer.wq = Mat<S>::Zero(D, D);
    layer.wk = Mat<S>::Zero(D, D);
    layer.wv = Mat<S>::Zero(D, D);
    layer.wo = Mat<S>::Zero(D, D);
    layer.ff_norm = Vec<S>::Zero(D);
    layer.w_in = Mat<S>::Zero(D, F);
    layer.w_out = Mat<S>::Zero(F, D);
  }
  p.final_norm = Vec<S>::Zero(D);
  p.lm_head = Mat<S>::Zero(D, V);
  return p;
}

template <class S> DenoiserParams<S> init_params(const ModelDims& dims, std::uint64_t seed) {
  auto p = zeros_like<S>(dims);
  Rng rng(seed);
  constexpr double std_w = 0.02;
  const double std_out = std_w / std::sqrt(2.0 * std::max(1, dims.layers));
  fill_normal(p.codebook.rows, std_w, rng);
  fill_normal(p.codebook.mask_row, std_w, rng);
  fill_normal(p.positional, std_w, rng);
  for (auto& layer : p.layers) {
    layer.attn_norm.setOnes();
    fill_normal(layer.wq, std_w, rng);
    fill_normal(layer.wk, std_w, rng);
    fill_normal(layer.wv, std_w, rng);
    fill_normal(layer.wo, std_out, rng);
    layer.ff_norm.setOnes();
    fill_normal(layer.w_in, std_w, rng);
    fill_normal(layer.w_out, std_out, rng);
  }
  p.final_norm.setOnes();
  fill_normal(p.lm_head, std_w, rng);
  return p;
}

template <class To, class From> DenoiserParams<To> cast_params(const DenoiserParams<From>& p) {
  auto out = zeros_like<To>(p.dims);
  std::vector<const From*> src;
  visit_tensors(p, [&](const std::string&, const auto& t) { src.push_back(t.data()); });
  std::size_t k = 0;
  visit_tensors(out, [&](const std::string&, auto& t) {
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<To>(src[k][i]);
    ++k;
  });
  return out;
}

template <class S>
Mat<S> embed(const DenoiserParams<S>& params, std::span<const int> tokens,
             NoDeduce<std::span<const std::optional<ResidualState<S>>>> residuals) {
  check_tokens(tokens, params.dims);
  if (!residuals.empty() && residuals.size() != tokens.size()) {
    throw std::invalid_argument("residuals must be empty or one per token");
  }
  const Index n = static_cast<Index>(tokens.size());
  Mat<S> out(n, params.dims.dim);
  for (Index i = 0; i < n; ++i) {
    const int tok = tokens[i];
    const bool masked = tok == params.mask_id();
    if (!masked) {
      out.row(i) = params.codebook.rows.row(tok);
    } else if (!residuals.empty() && residuals[i]) {
      out.row(i) = blend_embedding(true, params.codebook.mask_row, *residuals[i]).transpose();
    } else {
      out.row(i) = params.codebook.mask_row.transpose();
    }
    out.row(i) += params.positional.row(i);
  }
  return out;
}

template <class S>
Mat<S> embed_soft(const DenoiserParams<S>& params, std::span<const int> tokens,
                  NoDeduce<std::span<const std::optional<SoftResidual<S>>>> residuals) {
  std::vector<std::optional<ResidualState<S>>> states(residuals.size());
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    if (residuals[i] && i < tokens.size() && tokens[i] == params.mask_id()) {
      states[i] = ResidualState<S>{residual_vector(residuals[i]->probs, params.codebook),
                                   residuals[i]->alpha};
    }
  }
  return embed<S>(params, tokens, states);
}

template <class S>
void embed_backward(const DenoiserParams<S>& params, std::span<const int> tokens,
                    NoDeduce<std::span<const std::optional<SoftResidual<S>>>> residuals,
                    const Mat<S>& d_embeddings, DenoiserParams<S>& grads) {
  const Index n = static_cast<Index>(tokens.size());
  if (d_embeddings.rows() != n || d_embeddings.cols() != params.dims.dim) {
    throw std::invalid_argument("embedding gradient shape mismatch");
  }
  for (Index i = 0; i < n; ++i) {
    const auto g = d_embeddings.row(i);
    grads.positional.row(i) += g;
    const int tok = tokens[i];
    if (tok != params.mask_id()) {
      grads.codebook.rows.row(tok) += g;
      continue;
    }
    if (!residuals.empty() && residuals[i]) {
      const S a = residuals[i]->alpha;
      grads.codebook.mask_row += (S(1) - a) * g.transpose();
      // d delta / d row_j = p_j
      grads.codebook.rows.noalias() += (a * residuals[i]->probs) * g;
    } else {
      grads.codebook.mask_row += g.transpose();
    }
  }
}

template <class S>
ForwardTrace<S> forward(const DenoiserParams<S>& params, const Mat<S>& embeddings,
                        AttentionScheme scheme) {
  const auto& dims = params.dims;
  const Index n = embeddings.rows();
  if (embeddings.cols() != dims.dim) {
    throw std::invalid_argument("embedding width " + std::to_string(embeddings.cols()) +
                                " != model dim " + std::to_string(dims.dim));
  }
  if (scheme.prefix_len < 0 || scheme.block_len < 1 || scheme.block_end() > n) {
    throw std::invalid_argument("attention scheme does not fit the embedding rows");
  }
  if (n > dims.max_len) throw std::invalid_argument("sequence longer than max_len");

  const Index D = dims.dim;
  const Index H = dims.heads;
  const Index hd = D / H;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));

  ForwardTrace<S> tr;
  tr.params = &params;
  tr.version = params.version;
  tr.scheme = scheme;
  tr.layers.resize(params.layers.size());

  Mat<S> x = embeddings;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& W = params.layers[l];
    auto& c = tr.layers[l];
    c.x_in = x;
    rms_norm(x, W.attn_norm, c.h1, c.inv_rms1);
    c.q.noalias() = c.h1 * W.wq;
    c.k.noalias() = c.h1 * W.wk;
    c.v.noalias() = c.h1 * W.wv;
    c.heads_out.resize(n, D);
    c.attn.resize(H);
    for (Index h = 0; h < H; ++h) {
      Mat<S> scores = (c.q.middleCols(h * hd, hd) * c.k.middleCols(h * hd, hd).transpose()) * scale;
      for (Index i = 0; i < n; ++i) {
        const int si = segment(i, scheme);
        S top = -std::numeric_limits<S>::infinity();
        for (Index j = 0; j < n; ++j) {
          if (segment(j, scheme) > si) {
            scores(i, j) = -std::numeric_limits<S>::infinity();
          } else {
            top = std::max(top, scores(i, j));
          }
        }
        S total = 0;
        for (Index j = 0; j < n; ++j) {
          const S e = std::isinf(scores(i, j)) ? S(0) : std::exp(scores(i, j) - top);
          scores(i, j) = e;
          total += e;
        }
        scores.row(i) /= total;
      }
      c.heads_out.middleCols(h * hd, hd).noalias() = scores * c.v.middleCols(h * hd, hd);
      c.attn[h] = std::move(scores);
    }
    c.x_mid = x;
    c.x_mid.noalias() += c.heads_out * W.wo;
    rms_norm(c.x_mid, W.ff_norm, c.h2, c.inv_rms2);
    c.pre_act.noalias() = c.h2 * W.w_in;
    c.act = c.pre_act.unaryExpr([](S u) { return gelu(u); });
    x = c.x_mid;
    x.noalias() += c.act * W.w_out;
  }
  tr.x_final = std::move(x);
  Mat<S> h_all;
  rms_norm(tr.x_final, params.final_norm, h_all, tr.inv_rms_final);
  tr.h_final = h_all.middleRows(scheme.prefix_len, scheme.block_len);
  tr.logits.noalias() = tr.h_final * params.lm_head;
  return tr;
}

template <class S>
Mat<S> logits(const DenoiserParams<S>& params, const Mat<S>& embeddings, AttentionScheme scheme) {
  return forward(params, embeddings, scheme).logits;
}

template <class S>
Mat<S> backward(const ForwardTrace<S>& tr, const Mat<S>& d_logits, DenoiserParams<S>& grads) {
  if (tr.params == nullptr) throw InvalidState("backward called with an empty trace");
  const auto& params = *tr.params;
  if (tr.version != params.version) {
    throw InvalidState("forward trace is stale: params changed since it was recorded");
  }
  if (d_logits.rows() != tr.logits.rows() || d_logits.cols() != tr.logits.cols()) {
    throw std::invalid_argument("logit gradient shape mismatch");
  }
  if (!(grads.dims == params.dims)) throw std::invalid_argument("gradient container shape mismatch");

  const Index n = tr.x_final.rows();
  const Index D = params.dims.dim;
  const Index H = params.dims.heads;
  const Index hd = D / H;
  const S scale = S(1) / std::sqrt(static_cast<S>(hd));
  const auto& scheme = tr.scheme;

  grads.lm_head.noalias() += tr.h_final.transpose() * d_logits;
  Mat<S> dh_all = Mat<S>::Zero(n, D);
  dh_all.middleRows(scheme.prefix_len, scheme.block_len).noalias() =
      d_logits * params.lm_head.transpose();
  Mat<S> dx = rms_norm_backward(tr.x_final, params.final_norm, tr.inv_rms_final, dh_all,
                                grads.final_norm);

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& W = params.layers[li];
    const auto& c = tr.layers[li];
    auto& G = grads.layers[li];

    // feed-forward branch: x = x_mid + gelu(h2 W_in) W_out
    G.w_out.noalias() += c.act.transpose() * dx;
    Mat<S> d_act = dx * W.w_out.transpose();
    Mat<S> d_pre = d_act.cwiseProduct(c.pre_act.unaryExpr([](S u) { return gelu_grad(u); }));
    G.w_in.noalias() += c.h2.transpose() * d_pre;
    Mat<S> dh2 = d_pre * W.w_in.transpose();
    Mat<S> dx_mid = dx + rms_norm_backward(c.x_mid, W.ff_norm, c.inv_rms2, dh2, G.ff_norm);

    // attention branch: x_mid = x_in + heads_out W_o
    G.wo.noalias() += c.heads_out.transpose() * dx_mid;
    Mat<S> d_heads = dx_mid * W.wo.transpose();
    Mat<S> dq(n, D), dk(n, D), dv(n, D);
    for (Index h = 0; h < H; ++h) {
      const Mat<S>& P = c.attn[h];
      const auto dO = d_heads.middleCols(h * hd, hd);
      dv.middleCols(h * hd, hd).noalias() = P.transpose() * dO;
      Mat<S> dP = dO * c.v.middleCols(h * hd, hd).transpose();
      Vec<S> row_dot = (dP.cwiseProduct(P)).rowwise().sum();
      Mat<S> dS = P.cwiseProduct(dP.colwise() - row_dot) * scale;
      dq.middleCols(h * hd, hd).noalias() = dS * c.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd).noalias() = dS.transpose() * c.q.middleCols(h * hd, hd);
    }
    G.wq.noalias() += c.h1.transpose() * dq;
    G.wk.noalias() += c.h1.transpose() * dk;
    G.wv.noalias() += c.h1.transpose() * dv;
    Mat<S> dh1 = dq * W.wq.transpose();
    dh1.noalias() += dk * W.wk.transpose();
    dh1.noalias() += dv * W.wv.transpose();
    dx = dx_mid + rms_norm_backward(c.x_in, W.attn_norm, c.inv_rms1, dh1, G.attn_norm);
  }
  return dx;
}

#define RCD_INSTANTIATE_MODEL(S)                                                                  \
  template DenoiserParams<S> zeros_like<S>(const ModelDims&);                                     \
  template DenoiserParams<S> init_params<S>(const ModelDims&, std::uint64_t);                     \
  template Mat<S> embed<S>(const DenoiserParams<S>&, std::span<const int>,                        \
                           NoDeduce<std::span<const std::optional<ResidualState<S>>>>);                     \
  template Mat<S> embed_soft<S>(const DenoiserParams<S>&, std::span<const int>,                   \
                                NoDeduce<std::span<const std::optional<SoftResidual<S>>>>);                 \
  template void embed_backward<S>(const DenoiserParams<S>&, std::span<const int>,                 \
                                  NoDeduce<std::span<const std::optional<SoftResidual<S>>>>,                \
                                  const Mat<S>&, DenoiserParams<S>&);                             \
  template ForwardTrace<S> forward<S>(const DenoiserParams<S>&, const Mat<S>&, AttentionScheme);  \
  template Mat<S> logits<S>(const DenoiserParams<S>&, const Mat<S>&, AttentionScheme);            \
  template Mat<S> backward<S>(const ForwardTrace<S>&, const Mat<S>&, DenoiserParams<S>&);

RCD_INSTANTIATE_MODEL(float)
RCD_INSTANTIATE_MODEL(double)

template DenoiserParams<float> cast_params<float, double>(const DenoiserParams<double>&);
template DenoiserParams<double> cast_params<double, float>(const DenoiserParams<float>&);
template DenoiserParams<float> cast_params<float, float>(const DenoiserParams<float>&);
template DenoiserParams<double> cast_params<double, double>(const DenoiserParams<double>&);

} // namespace rcd
