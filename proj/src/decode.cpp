#include "rcd/decode.hpp"

#include "json.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "rcd/checkpoint.hpp"

namespace rcd {

AlphaStrategy AlphaStrategy::parse(const std::string& text) {
  if (text == "entropy") return {AlphaKind::Entropy, 0.0};
  if (text == "confidence") return {AlphaKind::Confidence, 0.0};
  if (text == "inverse-entropy" || text == "inverse_entropy") return {AlphaKind::InverseEntropy, 0.0};
  if (text == "inverse-confidence" || text == "inverse_confidence") return {AlphaKind::InverseConfidence, 0.0};
  if (text.rfind("linear:", 0) == 0) {
    double c = -1;
    try {
      std::size_t used = 0;
      c = std::stod(text.substr(7), &used);
      if (used != text.size() - 7) c = -1;
    } catch (const std::exception&) {
      c = -1;
    }
    if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("linear alpha needs c in [0, 1]: '" + text + "'");
    return {AlphaKind::Linear, c};
  }
  throw std::invalid_argument("unknown alpha strategy '" + text + "'");
}

std::string AlphaStrategy::str() const {
  switch (kind) {
  case AlphaKind::Entropy: return "entropy";
  case AlphaKind::Confidence: return "confidence";
  case AlphaKind::InverseEntropy: return "inverse-entropy";
  case AlphaKind::InverseConfidence: return "inverse-confidence";
  case AlphaKind::Linear: {
    std::ostringstream os;
    os << "linear:" << c;
    return os.str();
  }
  }
  throw std::invalid_argument("unknown alpha strategy");
}

std::string to_string(DecodeMode m) { return m == DecodeMode::SeqD ? "seqd" : "rcd"; }

std::string to_string(WarmStart w) {
  switch (w) {
  case WarmStart::Reference: return "reference";
  case WarmStart::Self: return "self";
  case WarmStart::None: return "none";
  }
  return "none";
}

DecodeMode parse_mode(const std::string& s) {
  if (s == "seqd") return DecodeMode::SeqD;
  if (s == "rcd") return DecodeMode::RCD;
  throw std::invalid_argument("unknown decode mode '" + s + "' (expected seqd or rcd)");
}

WarmStart parse_warm_start(const std::string& s) {
  if (s == "reference") return WarmStart::Reference;
  if (s == "self") return WarmStart::Self;
  if (s == "none") return WarmStart::None;
  throw std::invalid_argument("unknown warm start '" + s + "' (expected reference, self or none)");
}

void DecodeConfig::validate() const {
  if (block_size < 1) throw std::invalid_argument("block size must be positive");
  if (max_steps < 0) throw std::invalid_argument("max steps must be non-negative");
  if (const auto* top = std::get_if<TopM>(&selection); top && top->m < 1) {
    throw std::invalid_argument("top-m needs m >= 1");
  }
  if (const auto* thr = std::get_if<ConfidenceThreshold>(&selection);
      thr && !(thr->threshold > 0.0 && thr->threshold <= 1.0)) {
    throw std::invalid_argument("confidence threshold must lie in (0, 1]");
  }
  if (!(sampling_temperature >= 0.0)) throw std::invalid_argument("sampling temperature must be >= 0");
  if (!(t_res > 0.0)) throw std::invalid_argument("residual temperature must be positive");
  if (alpha.kind == AlphaKind::Linear && !(alpha.c >= 0.0 && alpha.c <= 1.0)) {
    throw std::invalid_argument("linear alpha needs c in [0, 1]");
  }
}

template <class S> S compute_alpha(const Vec<S>& p, const AlphaStrategy& strategy) {
  switch (strategy.kind) {
  case AlphaKind::Entropy: return normalized_entropy(p);
  case AlphaKind::Linear: return static_cast<S>(strategy.c);
  case AlphaKind::Confidence: return std::clamp(p.maxCoeff(), S(0), S(1));
  case AlphaKind::InverseEntropy: return S(1) - normalized_entropy(p);
  case AlphaKind::InverseConfidence: return std::clamp(S(1) - p.maxCoeff(), S(0), S(1));
  }
  throw std::invalid_argument("unknown alpha strategy");
}

// ---------------------------------------------------------------------------
// trace serialization

std::string trace_to_ndjson(const DecodeTrace& trace) {
  using ojson = nlohmann::ordered_json;
  std::string out;
  for (const auto& r : trace.steps) {
    ojson j;
    j["step"] = r.step;
    j["block"] = r.block;
    ojson committed = ojson::array();
    for (const auto& [pos, id] : r.committed) committed.push_back({pos, id});
    j["committed"] = committed;
    ojson top = ojson::array();
    for (const auto& [pos, entries] : r.top) {
      ojson list = ojson::array();
      for (const auto& e : entries) list.push_back({e.id, e.prob});
      top.push_back({pos, list});
    }
    j["top5"] = top;
    ojson alpha = ojson::array();
    for (const auto& [pos, a] : r.alpha) alpha.push_back({pos, a});
    j["alpha"] = alpha;
    j["tokens"] = r.tokens;
    j["forced"] = r.forced;
    out += j.dump();
    out += '\n';
  }
  return out;
}

DecodeTrace trace_from_ndjson(const std::string& text) {
  DecodeTrace trace;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      StepRecord r;
      r.step = j.at("step").get<int>();
      r.block = j.at("block").get<int>();
      for (const auto& c : j.at("committed")) r.committed.emplace_back(c.at(0).get<int>(), c.at(1).get<int>());
      for (const auto& t : j.at("top5")) {
        std::vector<TopEntry> entries;
        for (const auto& e : t.at(1)) entries.push_back({e.at(0).get<int>(), e.at(1).get<double>()});
        r.top.emplace_back(t.at(0).get<int>(), std::move(entries));
      }
      for (const auto& a : j.at("alpha")) r.alpha.emplace_back(a.at(0).get<int>(), a.at(1).get<double>());
      r.tokens = j.at("tokens").get<int>();
      r.forced = j.at("forced").get<bool>();
      trace.steps.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// block state

template <class S>
BlockDecodeState<S> BlockDecodeState<S>::fresh(TokenSeq prefix, int block_size, int mask_id, int block_index) {
  BlockDecodeState<S> s;
  s.prefix = std::move(prefix);
  s.tokens.assign(block_size, mask_id);
  s.masked.assign(block_size, 1);
  s.residuals.assign(block_size, std::nullopt);
  s.block_index = block_index;
  return s;
}

template <class S> std::size_t BlockDecodeState<S>::remaining() const {
  return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), std::uint8_t{1}));
}

namespace {

template <class S> TokenSeq full_tokens(const BlockDecodeState<S>& state) {
  TokenSeq all = state.prefix;
  all.insert(all.end(), state.tokens.begin(), state.tokens.end());
  return all;
}

template <class S> AttentionScheme scheme_of(const BlockDecodeState<S>& state) {
  return {static_cast<Index>(state.prefix.size()), static_cast<Index>(state.tokens.size())};
}

template <class S> std::vector<TopEntry> top_entries(const Vec<S>& p, int width) {
  std::vector<int> ids(static_cast<std::size_t>(p.size()));
  std::iota(ids.begin(), ids.end(), 0);
  const int k = std::min<int>(width, static_cast<int>(p.size()));
  std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
    return p(a) > p(b) || (p(a) == p(b) && a < b);
  });
  std::vector<TopEntry> out;
  for (int i = 0; i < k; ++i) out.push_back({ids[i], static_cast<double>(p(ids[i]))});
  return out;
}

template <class S> int sample_token(const Vec<S>& logits_row, double temperature, Rng& rng) {
  const Vec<S> q = softmax_with_temperature(logits_row, static_cast<S>(temperature));
  const double u = uniform01(rng);
  double acc = 0;
  for (Index j = 0; j < q.size(); ++j) {
    acc += static_cast<double>(q(j));
    if (u < acc) return static_cast<int>(j);
  }
  return static_cast<int>(argmax(q));
}

// Shared prediction/selection/update sub-steps. Returns the block logits.
template <class S>
Mat<S> predict_and_commit(const DenoiserParams<S>& params, BlockDecodeState<S>& state,
                          const DecodeConfig& config, Rng& rng, const Mat<S>& embeddings) {
  if (state.remaining() == 0) throw InvalidState("decode step on a block with no masked position");
  ++state.step;
  const Mat<S> z = logits(params, embeddings, scheme_of(state));

  StepRecord rec;
  rec.step = state.step;
  rec.block = state.block_index;

  const Index b = static_cast<Index>(state.tokens.size());
  std::vector<Vec<S>> probs(static_cast<std::size_t>(b));
  std::vector<std::pair<double, int>> candidates; // (confidence, position)
  for (Index i = 0; i < b; ++i) {
    if (!state.masked[i]) continue;
    probs[i] = softmax(z.row(i).transpose());
    candidates.emplace_back(static_cast<double>(probs[i].maxCoeff()), static_cast<int>(i));
    rec.top.emplace_back(static_cast<int>(i), top_entries(probs[i], kTraceTopWidth));
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& c) {
    return a.first > c.first || (a.first == c.first && a.second < c.second);
  });

  std::vector<int> selected;
  if (const auto* top = std::get_if<TopM>(&config.selection)) {
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(top->m), candidates.size());
    for (std::size_t i = 0; i < m; ++i) selected.push_back(candidates[i].second);
  } else {
    const double thr = std::get<ConfidenceThreshold>(config.selection).threshold;
    for (const auto& [conf, pos] : candidates) {
      if (conf >= thr) selected.push_back(pos);
    }
    if (selected.empty()) selected.push_back(candidates.front().second);
  }
  std::sort(selected.begin(), selected.end());

  for (int pos : selected) {
    const int id = config.sampling_temperature > 0.0
                       ? sample_token<S>(z.row(pos).transpose(), config.sampling_temperature, rng)
                       : static_cast<int>(argmax(probs[pos]));
    state.tokens[pos] = id;
    state.masked[pos] = 0;
    rec.committed.emplace_back(pos, id);
  }

  if (state.step >= config.steps_per_block() && state.remaining() > 0) {
    rec.forced = true;
    for (Index i = 0; i < b; ++i) {
      if (!state.masked[i]) continue;
      const int id = static_cast<int>(argmax(probs[i]));
      state.tokens[i] = id;
      state.masked[i] = 0;
      rec.committed.emplace_back(static_cast<int>(i), id);
    }
    std::sort(rec.committed.begin(), rec.committed.end());
  }
  rec.tokens = static_cast<int>(rec.committed.size());
  state.trace.push_back(std::move(rec));
  return z;
}

} // namespace

template <class S>
std::vector<std::optional<ResidualState<S>>> warm_start(const DenoiserParams<S>& source,
                                                        const EmbeddingCodebook<S>& target_codebook,
                                                        const BlockDecodeState<S>& state,
                                                        const AlphaStrategy& strategy) {
  if (state.remaining() != state.tokens.size()) {
    throw InvalidState("warm start expects a fully masked block");
  }
  if (source.dims.vocab != target_codebook.vocab()) {
    throw DimensionMismatch("warm-start model vocabulary differs from the target's");
  }
  TokenSeq tokens = state.prefix;
  tokens.insert(tokens.end(), state.tokens.size(), source.mask_id());
  const Mat<S> z = logits(source, embed<S>(source, tokens), scheme_of(state));
  std::vector<std::optional<ResidualState<S>>> out(state.tokens.size());
  for (Index i = 0; i < z.rows(); ++i) {
    const Vec<S> p = softmax(z.row(i).transpose());
    out[i] = ResidualState<S>{residual_vector(p, target_codebook), compute_alpha(p, strategy)};
  }
  return out;
}

template <class S>
std::vector<std::optional<ResidualState<S>>> zero_residuals(const BlockDecodeState<S>& state, Index dim) {
  std::vector<std::optional<ResidualState<S>>> out(state.tokens.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (state.masked[i]) out[i] = ResidualState<S>{Vec<S>::Zero(dim), S(0)};
  }
  return out;
}

template <class S>
void decode_step_seqd(const DenoiserParams<S>& params, BlockDecodeState<S>& state,
                      const DecodeConfig& config, Rng& rng) {
  predict_and_commit(params, state, config, rng, embed<S>(params, full_tokens(state)));
  std::fill(state.residuals.begin(), state.residuals.end(), std::nullopt);
}

template <class S>
void decode_step_rcd(const DenoiserParams<S>& params, BlockDecodeState<S>& state,
                     const DecodeConfig& config, Rng& rng) {
  std::vector<std::optional<ResidualState<S>>> inputs(state.prefix.size());
  inputs.insert(inputs.end(), state.residuals.begin(), state.residuals.end());
  const Mat<S> z = predict_and_commit(params, state, config, rng, embed<S>(params, full_tokens(state), inputs));

  auto& rec = state.trace.back();
  const S t_res = static_cast<S>(config.t_res);
  for (std::size_t i = 0; i < state.tokens.size(); ++i) {
    if (!state.masked[i]) {
      state.residuals[i].reset();
      continue;
    }
    const Vec<S> zi = z.row(static_cast<Index>(i)).transpose();
    const Vec<S> p_scaled = softmax_with_temperature(zi, t_res);
    const S alpha = compute_alpha(p_scaled, config.alpha);
    const Vec<S> delta = config.scale_delta ? residual_vector(p_scaled, params.codebook)
                                            : residual_vector(softmax(zi), params.codebook);
    state.residuals[i] = ResidualState<S>{delta, alpha};
    rec.alpha.emplace_back(static_cast<int>(i), static_cast<double>(alpha));
  }
}

template <class S>
DecodeResult<S> decode_sequence(const DenoiserParams<S>& target, const DenoiserParams<S>* ref,
                                const TokenSeq& prompt, int num_blocks, const DecodeConfig& config,
                                std::uint64_t stream) {
  config.validate();
  if (num_blocks < 0) throw std::invalid_argument("negative block count");
  const long needed = static_cast<long>(prompt.size()) + static_cast<long>(num_blocks) * config.block_size;
  if (needed > target.dims.max_len) {
    throw std::invalid_argument("prompt plus " + std::to_string(num_blocks) + " blocks exceeds max_len " +
                                std::to_string(target.dims.max_len));
  }
  const bool rcd = config.mode == DecodeMode::RCD;
  if (rcd && config.warm_start == WarmStart::Reference && ref == nullptr) {
    throw std::invalid_argument("reference warm start requested without a reference model");
  }

  Rng rng = make_rng(config.seed, "sampling", stream);
  DecodeResult<S> result;
  result.tokens = prompt;
  for (int blk = 0; blk < num_blocks; ++blk) {
    auto state = BlockDecodeState<S>::fresh(result.tokens, config.block_size, target.mask_id(), blk);
    if (rcd) {
      switch (config.warm_start) {
      case WarmStart::Reference: state.residuals = warm_start(*ref, target.codebook, state, config.alpha); break;
      case WarmStart::Self: state.residuals = warm_start(target, target.codebook, state, config.alpha); break;
      case WarmStart::None: state.residuals = zero_residuals(state, target.dims.dim); break;
      }
    }
    while (state.remaining() > 0) {
      if (rcd) {
        decode_step_rcd(target, state, config, rng);
      } else {
        decode_step_seqd(target, state, config, rng);
      }
    }
    bool forced = false;
    for (auto& r : state.trace) {
      forced = forced || r.forced;
      result.trace.steps.push_back(std::move(r));
    }
    result.forced_blocks += forced ? 1 : 0;
    ++result.blocks;
    result.tokens.insert(result.tokens.end(), state.tokens.begin(), state.tokens.end());
    if (std::find(state.tokens.begin(), state.tokens.end(), config.stop_token) != state.tokens.end()) break;
  }
  return result;
}

#define RCD_INSTANTIATE_DECODE(S)                                                                      \
  template S compute_alpha<S>(const Vec<S>&, const AlphaStrategy&);                                    \
  template struct BlockDecodeState<S>;                                                                 \
  template std::vector<std::optional<ResidualState<S>>> warm_start<S>(                                 \
      const DenoiserParams<S>&, const EmbeddingCodebook<S>&, const BlockDecodeState<S>&,               \
      const AlphaStrategy&);                                                                           \
  template std::vector<std::optional<ResidualState<S>>> zero_residuals<S>(const BlockDecodeState<S>&,  \
                                                                          Index);                      \
  template void decode_step_seqd<S>(const DenoiserParams<S>&, BlockDecodeState<S>&,                    \
                                    const DecodeConfig&, Rng&);                                        \
  template void decode_step_rcd<S>(const DenoiserParams<S>&, BlockDecodeState<S>&,                     \
                                   const DecodeConfig&, Rng&);                                         \
  template DecodeResult<S> decode_sequence<S>(const DenoiserParams<S>&, const DenoiserParams<S>*,      \
                                              const TokenSeq&, int, const DecodeConfig&, std::uint64_t);

RCD_INSTANTIATE_DECODE(float)
RCD_INSTANTIATE_DECODE(double)

} // namespace rcd
