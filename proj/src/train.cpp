#include "rcd/train.hpp"

#include <cmath>
#include <algorithm>
#include <numeric>

namespace rcd {

void TrainConfig::validate() const {
  if (!(lr > 0) || !(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1) || !(adam_eps > 0)) {
    throw std::invalid_argument("optimizer settings must be positive (betas in (0, 1))");
  }
  if (weight_decay < 0 || warmup_ratio < 0 || warmup_ratio >= 1) {
    throw std::invalid_argument("weight decay / warmup ratio out of range");
  }
  if (batch_size < 1 || epochs < 0 || grad_accum < 1 || block_size < 1) {
    throw std::invalid_argument("batch size, accumulation and block size must be positive");
  }
  if (!(t_min > 0 && t_min < 0.5)) throw std::invalid_argument("t_min must lie in (0, 0.5)");
}

std::size_t CorruptionSample::masked_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

CorruptionSample corrupt(std::span<const int> x0, double t, int mask_id, Rng& rng) {
  if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("corruption level t must lie in (0, 1]");
  if (x0.empty()) throw std::invalid_argument("cannot corrupt an empty block");
  CorruptionSample s;
  s.x0.assign(x0.begin(), x0.end());
  s.t = t;
  s.mask.assign(x0.size(), 0);
  do {
    for (auto& m : s.mask) m = uniform01(rng) < t ? 1 : 0;
  } while (s.masked_count() == 0);
  s.xt = s.x0;
  for (std::size_t i = 0; i < s.xt.size(); ++i) {
    if (s.mask[i]) s.xt[i] = mask_id;
  }
  return s;
}

TokenSeq TrainingExample::tokens() const {
  TokenSeq all = prefix;
  all.insert(all.end(), sample.xt.begin(), sample.xt.end());
  return all;
}

AttentionScheme TrainingExample::scheme() const {
  return {static_cast<Index>(prefix.size()), static_cast<Index>(sample.xt.size())};
}

TrainingExample draw_example(const TokenSeq& record, const TrainConfig& config, int mask_id, Rng& rng) {
  const std::size_t b = static_cast<std::size_t>(config.block_size);
  const std::size_t origin = config.anchor >= 0 ? prompt_length(record, config.anchor) : 0;
  const std::size_t tail = record.size() > origin ? record.size() - origin : 0;
  const std::size_t blocks = std::max<std::size_t>(1, (tail + b - 1) / b);
  const std::size_t start = origin + b * uniform_index(rng, blocks);

  TokenSeq block(b, Tokenizer::kPad);
  for (std::size_t i = 0; i < b && start + i < record.size(); ++i) block[i] = record[start + i];
  const double t = 1.0 - uniform01(rng);

  TrainingExample ex;
  ex.prefix.assign(record.begin(), record.begin() + static_cast<std::ptrdiff_t>(std::min(start, record.size())));
  ex.sample = corrupt(block, t, mask_id, rng);
  return ex;
}

template <class S>
double masked_ce_loss_grad(const Mat<S>& logits, const CorruptionSample& sample, double t_min,
                           Mat<S>& d_logits) {
  if (logits.rows() != static_cast<Index>(sample.x0.size())) {
    throw std::invalid_argument("logits do not cover the corrupted block");
  }
  if (sample.masked_count() == 0) throw InvalidState("masked loss needs at least one masked position");
  const double weight = 1.0 / std::max(sample.t, t_min);
  d_logits = Mat<S>::Zero(logits.rows(), logits.cols());
  double loss = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    if (!sample.mask[i]) continue;
    const int target = sample.x0[i];
    if (target < 0 || target >= logits.cols()) throw std::invalid_argument("target outside logit range");
    const auto row = logits.row(i);
    const S top = row.maxCoeff();
    const Vec<S> e = (row.array() - top).exp().matrix().transpose();
    const S total = e.sum();
    loss += -(static_cast<double>(row(target) - top) - std::log(static_cast<double>(total)));
    d_logits.row(i) = (e / total).transpose() * static_cast<S>(weight);
    d_logits(i, target) -= static_cast<S>(weight);
  }
  return weight * loss;
}

template <class S>
double masked_ce_loss(const Mat<S>& logits, const CorruptionSample& sample, double t_min) {
  Mat<S> unused;
  return masked_ce_loss_grad(logits, sample, t_min, unused);
}

template <class S>
std::vector<std::optional<SoftResidual<S>>> reference_signal(const DenoiserParams<S>& ref,
                                                             const TrainingExample& example) {
  const TokenSeq tokens = example.tokens();
  const auto scheme = example.scheme();
  const Mat<S> z = logits(ref, embed<S>(ref, tokens), scheme);
  std::vector<std::optional<SoftResidual<S>>> out(tokens.size());
  for (Index i = 0; i < scheme.block_len; ++i) {
    if (!example.sample.mask[i]) continue;
    SoftResidual<S> r;
    r.probs = softmax(z.row(i).transpose());
    r.alpha = normalized_entropy(r.probs);
    out[scheme.prefix_len + i] = std::move(r);
  }
  return out;
}

template <class S>
std::vector<std::optional<ResidualState<S>>> make_training_residuals(
    const DenoiserParams<S>& ref, const EmbeddingCodebook<S>& target_codebook,
    const TrainingExample& example) {
  if (ref.dims.vocab != target_codebook.vocab()) {
    throw DimensionMismatch("reference vocabulary " + std::to_string(ref.dims.vocab) +
                                " != target vocabulary " + std::to_string(target_codebook.vocab()));
  }
  if (example.sample.masked_count() == 0) throw InvalidState("corrupted block has no masked position");
  const auto signal = reference_signal(ref, example);
  const std::size_t offset = example.prefix.size();
  std::vector<std::optional<ResidualState<S>>> out(example.sample.xt.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (const auto& s = signal[offset + i]) {
      out[i] = ResidualState<S>{residual_vector(s->probs, target_codebook), s->alpha};
    }
  }
  return out;
}

template <class S>
double example_loss(const DenoiserParams<S>& model, const TrainingExample& example,
                    const std::vector<std::optional<SoftResidual<S>>>* residuals, double t_min,
                    DenoiserParams<S>* grads, S scale) {
  const TokenSeq tokens = example.tokens();
  const std::vector<std::optional<SoftResidual<S>>> none;
  const auto& res = residuals ? *residuals : none;
  const Mat<S> emb = embed_soft<S>(model, tokens, res);
  const auto tr = forward(model, emb, example.scheme());
  Mat<S> d_logits;
  const double loss = masked_ce_loss_grad(tr.logits, example.sample, t_min, d_logits);
  if (grads) {
    d_logits *= scale;
    const Mat<S> d_emb = backward(tr, d_logits, *grads);
    embed_backward<S>(model, tokens, res, d_emb, *grads);
  }
  return loss;
}

namespace {

template <class F> void for_each_pair(DenoiserParams<float>& a, const DenoiserParams<float>& b, F&& f) {
  std::vector<const float*> src;
  visit_tensors(b, [&](const std::string&, const auto& t) { src.push_back(t.data()); });
  std::size_t k = 0;
  visit_tensors(a, [&](const std::string& name, auto& t) {
    const bool vector_like = std::decay_t<decltype(t)>::ColsAtCompileTime == 1;
    f(name, t.data(), src[k++], static_cast<std::size_t>(t.size()), vector_like);
  });
}

double global_norm(const DenoiserParams<float>& g) {
  double sq = 0;
  visit_tensors(g, [&](const std::string&, const auto& t) {
    for (Index i = 0; i < t.size(); ++i) sq += static_cast<double>(t.data()[i]) * t.data()[i];
  });
  return std::sqrt(sq);
}

void scale_all(DenoiserParams<float>& g, float s) {
  visit_tensors(g, [&](const std::string&, auto& t) { t *= s; });
}

} // namespace

AdamW::AdamW(const ModelDims& dims, const TrainConfig& config)
    : config_(config), m_(zeros_like<float>(dims)), v_(zeros_like<float>(dims)) {}

void AdamW::step(DenoiserParams<float>& params, const DenoiserParams<float>& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const float b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
  std::vector<float*> m_ptr, v_ptr;
  visit_tensors(m_, [&](const std::string&, auto& t) { m_ptr.push_back(t.data()); });
  visit_tensors(v_, [&](const std::string&, auto& t) { v_ptr.push_back(t.data()); });
  std::size_t k = 0;
  for_each_pair(params, grads, [&](const std::string&, float* p, const float* g, std::size_t n, bool vector_like) {
    float* m = m_ptr[k];
    float* v = v_ptr[k];
    ++k;
    const double decay = vector_like ? 0.0 : config_.weight_decay;
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] = static_cast<float>(p[i] - lr * (mhat / (std::sqrt(vhat) + config_.adam_eps) + decay * p[i]));
    }
  });
  ++params.version;
}

void train_denoiser(DenoiserParams<float>& model, const Dataset& data, const TrainConfig& config,
                    const DenoiserParams<float>* ref, const TrainLogger& log) {
  config.validate();
  if (data.vocab != model.dims.vocab) {
    throw DimensionMismatch("dataset vocabulary " + std::to_string(data.vocab) +
                                " != model vocabulary " + std::to_string(model.dims.vocab));
  }
  if (ref && ref->dims.vocab != model.dims.vocab) {
    throw DimensionMismatch("reference and target vocabularies differ");
  }
  if (data.records.empty() || config.epochs == 0) return;

  const std::size_t n = data.records.size();
  const std::size_t per_step = static_cast<std::size_t>(config.batch_size) * config.grad_accum;
  const long steps_per_epoch = static_cast<long>((n + per_step - 1) / per_step);
  const long total_steps = steps_per_epoch * config.epochs;
  const long warmup = static_cast<long>(std::ceil(config.warmup_ratio * static_cast<double>(total_steps)));

  Rng order_rng = make_rng(config.seed, "data");
  Rng corruption_rng = make_rng(config.seed, "corruption");
  AdamW opt(model.dims, config);
  auto grads = zeros_like<float>(model.dims);
  std::vector<std::size_t> order(n);

  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(order_rng, i)]);

    for (std::size_t begin = 0; begin < n; begin += per_step) {
      const std::size_t end = std::min(n, begin + per_step);
      const float scale = 1.0f / static_cast<float>(end - begin);
      visit_tensors(grads, [](const std::string&, auto& t) { t.setZero(); });
      double loss = 0;
      for (std::size_t j = begin; j < end; ++j) {
        const auto ex = draw_example(data.records[order[j]], config, model.mask_id(), corruption_rng);
        if (ref) {
          const auto res = reference_signal(*ref, ex);
          loss += example_loss(model, ex, &res, config.t_min, &grads, scale);
        } else {
          loss += example_loss<float>(model, ex, nullptr, config.t_min, &grads, scale);
        }
      }
      loss /= static_cast<double>(end - begin);
      if (!std::isfinite(loss)) {
        throw TrainingFailure("training diverged (non-finite loss) at step " + std::to_string(step), step);
      }
      if (config.grad_clip > 0) {
        const double norm = global_norm(grads);
        if (norm > config.grad_clip) scale_all(grads, static_cast<float>(config.grad_clip / norm));
      }
      const double lr = warmup > 0 && step < warmup
                            ? config.lr * static_cast<double>(step + 1) / static_cast<double>(warmup)
                            : config.lr;
      opt.step(model, grads, lr);
      if (log) log({step, epoch, loss, lr, config.seed});
      ++step;
    }
  }
}

DenoiserParams<float> train_reference(const Dataset& data, const ModelDims& dims,
                                      const TrainConfig& config, const TrainLogger& log) {
  auto model = init_params<float>(dims, stream_seed(config.seed, "init"));
  train_denoiser(model, data, config, nullptr, log);
  return model;
}

DenoiserParams<float> train_target_rcd(const DenoiserParams<float>& ref, const Dataset& data,
                                       const ModelDims& dims, const TrainConfig& config,
                                       const TrainLogger& log) {
  auto model = init_params<float>(dims, stream_seed(config.seed, "init"));
  train_denoiser(model, data, config, &ref, log);
  return model;
}

double heldout_masked_ce(const DenoiserParams<float>& model, const Dataset& data,
                         const TrainConfig& config, std::uint64_t seed,
                         const DenoiserParams<float>* ref) {
  Rng rng = make_rng(seed, "heldout");
  double total = 0;
  std::size_t count = 0;
  for (const auto& rec : data.records) {
    const auto ex = draw_example(rec, config, model.mask_id(), rng);
    std::vector<std::optional<SoftResidual<float>>> res;
    if (ref) res = reference_signal(*ref, ex);
    const Mat<float> z = logits(model, embed_soft<float>(model, ex.tokens(), res), ex.scheme());
    for (Index i = 0; i < z.rows(); ++i) {
      if (!ex.sample.mask[i]) continue;
      const Vec<double> zd = z.row(i).transpose().cast<double>();
      const double top = zd.maxCoeff();
      const double lse = top + std::log((zd.array() - top).exp().sum());
      total += lse - zd(ex.sample.x0[i]);
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

#define RCD_INSTANTIATE_TRAIN(S)                                                                    \
  template double masked_ce_loss<S>(const Mat<S>&, const CorruptionSample&, double);                \
  template double masked_ce_loss_grad<S>(const Mat<S>&, const CorruptionSample&, double, Mat<S>&);  \
  template std::vector<std::optional<SoftResidual<S>>> reference_signal<S>(                         \
      const DenoiserParams<S>&, const TrainingExample&);                                            \
  template std::vector<std::optional<ResidualState<S>>> make_training_residuals<S>(                 \
      const DenoiserParams<S>&, const EmbeddingCodebook<S>&, const TrainingExample&);               \
  template double example_loss<S>(const DenoiserParams<S>&, const TrainingExample&,                 \
                                  const std::vector<std::optional<SoftResidual<S>>>*, double,       \
                                  DenoiserParams<S>*, S);

RCD_INSTANTIATE_TRAIN(float)
RCD_INSTANTIATE_TRAIN(double)

} // namespace rcd
