#include "rcd/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace rcd {

std::map<std::pair<int, int>, int> final_tokens(const DecodeTrace& trace) {
  std::map<std::pair<int, int>, int> out;
  for (const auto& rec : trace.steps) {
    for (const auto& [pos, id] : rec.committed) out[{rec.block, pos}] = id;
  }
  return out;
}

RecallCurve recall_at_k(const DecodeTrace& trace, const std::map<std::pair<int, int>, int>& finals, int k) {
  if (k < 1) throw std::invalid_argument("recall@k needs k >= 1");
  std::size_t width = static_cast<std::size_t>(kTraceTopWidth);
  bool any_top = false;
  for (const auto& rec : trace.steps) {
    for (const auto& [pos, entries] : rec.top) {
      width = any_top ? std::min(width, entries.size()) : entries.size();
      any_top = true;
    }
  }
  if (static_cast<std::size_t>(k) > width) {
    throw std::invalid_argument("k = " + std::to_string(k) + " exceeds recorded top width " +
                                std::to_string(width));
  }

  // Per block: last step and the step at which each position was committed.
  std::map<int, int> last_step;
  std::map<std::pair<int, int>, int> commit_step;
  for (const auto& rec : trace.steps) {
    last_step[rec.block] = std::max(last_step[rec.block], rec.step);
    for (const auto& [pos, id] : rec.committed) commit_step[{rec.block, pos}] = rec.step;
  }
  std::map<std::pair<int, int>, const StepRecord*> by_step;
  for (const auto& rec : trace.steps) by_step[{rec.block, rec.step}] = &rec;

  RecallCurve curve;
  curve.k = k;
  for (const auto& [b, s] : last_step) curve.k_max = std::max(curve.k_max, s);
  if (finals.empty()) return curve;

  for (int s = 1; s <= curve.k_max; ++s) {
    long hits = 0;
    for (const auto& [key, id] : finals) {
      const auto cs = commit_step.find(key);
      if (cs != commit_step.end() && cs->second < s) {
        ++hits;
        continue;
      }
      const auto rec = by_step.find({key.first, s});
      if (rec == by_step.end()) {
        ++hits; // block already finished
        continue;
      }
      for (const auto& [pos, entries] : rec->second->top) {
        if (pos != key.second) continue;
        for (int j = 0; j < k && j < static_cast<int>(entries.size()); ++j) {
          if (entries[j].id == id) {
            ++hits;
            break;
          }
        }
        break;
      }
    }
    curve.values.push_back(static_cast<double>(hits) / static_cast<double>(finals.size()));
  }
  return curve;
}

RecallCurve recall_at_k(const DecodeTrace& trace, int k) { return recall_at_k(trace, final_tokens(trace), k); }

// ---------------------------------------------------------------------------

namespace {

void check_chain(const Mat<double>& transition, const Vec<double>& initial,
                 const std::vector<std::optional<int>>& observed) {
  const Index n = transition.rows();
  if (n < 1 || transition.cols() != n) throw std::invalid_argument("transition matrix must be square");
  for (Index r = 0; r < n; ++r) {
    try {
      check_distribution(transition.row(r).transpose(), 1e-9);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("transition row " + std::to_string(r) + " is not stochastic: " + e.what());
    }
  }
  if (initial.size() != n) throw std::invalid_argument("initial distribution has the wrong size");
  check_distribution(initial, 1e-9);
  for (const auto& o : observed) {
    if (o && (*o < 0 || *o >= n)) throw std::invalid_argument("observed state out of range");
  }
}

Vec<double> evidence(const std::optional<int>& o, Index n) {
  if (!o) return Vec<double>::Ones(n);
  Vec<double> e = Vec<double>::Zero(n);
  e(*o) = 1.0;
  return e;
}

} // namespace

std::map<int, Vec<double>> markov_posterior_oracle(const Mat<double>& transition, const Vec<double>& initial,
                                                   const std::vector<std::optional<int>>& observed) {
  check_chain(transition, initial, observed);
  const Index n = transition.rows();
  const std::size_t len = observed.size();
  std::map<int, Vec<double>> out;
  if (len == 0) return out;

  // Scaled forward / backward messages.
  std::vector<Vec<double>> fwd(len), bwd(len);
  fwd[0] = initial.cwiseProduct(evidence(observed[0], n));
  for (std::size_t i = 0; i < len; ++i) {
    if (i > 0) fwd[i] = (transition.transpose() * fwd[i - 1]).cwiseProduct(evidence(observed[i], n));
    const double z = fwd[i].sum();
    if (!(z > 0)) throw std::invalid_argument("observations have zero probability under the chain");
    fwd[i] /= z;
  }
  bwd[len - 1] = Vec<double>::Ones(n);
  for (std::size_t i = len - 1; i-- > 0;) {
    bwd[i] = transition * bwd[i + 1].cwiseProduct(evidence(observed[i + 1], n));
    bwd[i] /= bwd[i].sum();
  }
  for (std::size_t i = 0; i < len; ++i) {
    if (observed[i]) continue;
    Vec<double> post = fwd[i].cwiseProduct(bwd[i]);
    post /= post.sum();
    out[static_cast<int>(i)] = post;
  }
  return out;
}

std::map<int, Vec<double>> markov_posterior_bruteforce(const Mat<double>& transition, const Vec<double>& initial,
                                                       const std::vector<std::optional<int>>& observed) {
  check_chain(transition, initial, observed);
  const Index n = transition.rows();
  std::vector<int> holes;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (!observed[i]) holes.push_back(static_cast<int>(i));
  }
  std::map<int, Vec<double>> out;
  for (int h : holes) out[h] = Vec<double>::Zero(n);
  if (holes.empty()) return out;

  std::vector<int> states(observed.size());
  for (std::size_t i = 0; i < observed.size(); ++i) states[i] = observed[i].value_or(0);
  std::vector<int> digits(holes.size(), 0);
  double total = 0;
  while (true) {
    for (std::size_t h = 0; h < holes.size(); ++h) states[holes[h]] = digits[h];
    double p = initial(states[0]);
    for (std::size_t i = 1; i < states.size(); ++i) p *= transition(states[i - 1], states[i]);
    total += p;
    for (int h : holes) out[h](states[h]) += p;
    std::size_t d = 0;
    while (d < digits.size() && ++digits[d] == n) digits[d++] = 0;
    if (d == digits.size()) break;
  }
  if (!(total > 0)) throw std::invalid_argument("observations have zero probability under the chain");
  for (auto& [h, v] : out) v /= total;
  return out;
}

KlReport single_mask_kl(const DenoiserParams<float>& model, const MarkovSpec& spec, const Dataset& heldout,
                        int contexts, int block_size, std::uint64_t seed,
                        const DenoiserParams<float>* ref) {
  spec.validate();
  if (ref && ref->dims.vocab != model.dims.vocab) throw DimensionMismatch("reference and model vocabularies differ");
  if (block_size < 3) throw std::invalid_argument("single-mask contexts need a block of at least 3");
  if (heldout.records.empty()) throw std::invalid_argument("no held-out records");
  Rng rng = make_rng(seed, "kl");
  KlReport report;
  double total = 0;
  for (int c = 0; c < contexts; ++c) {
    const TokenSeq& rec = heldout.records[static_cast<std::size_t>(c) % heldout.records.size()];
    if (rec.size() < static_cast<std::size_t>(block_size)) {
      throw std::invalid_argument("held-out record shorter than the block");
    }
    const std::size_t blocks = rec.size() / static_cast<std::size_t>(block_size);
    const std::size_t start = static_cast<std::size_t>(block_size) * uniform_index(rng, blocks);
    const std::size_t hole = 1 + uniform_index(rng, static_cast<std::size_t>(block_size - 2));

    TokenSeq tokens(rec.begin(), rec.begin() + static_cast<std::ptrdiff_t>(start + block_size));
    std::vector<std::optional<int>> observed(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      observed[i] = markov_state(tokens[i]);
      if (!observed[i]) throw std::invalid_argument("held-out record contains a non-chain token");
    }
    tokens[start + hole] = model.mask_id();
    observed[start + hole].reset();

    const Vec<double> truth =
        markov_posterior_oracle(spec.transition, spec.initial, observed).at(static_cast<int>(start + hole));
    const AttentionScheme scheme{static_cast<Index>(start), static_cast<Index>(block_size)};
    std::vector<std::optional<ResidualState<float>>> residuals;
    if (ref) {
      const Mat<float> zr = logits(*ref, embed<float>(*ref, tokens), scheme);
      const Vec<float> pr = softmax(Vec<float>(zr.row(static_cast<Index>(hole)).transpose()));
      residuals.resize(tokens.size());
      residuals[start + hole] = ResidualState<float>{residual_vector(pr, model.codebook), normalized_entropy(pr)};
    }
    const Mat<float> z = logits(model, embed<float>(model, tokens, residuals), scheme);
    const Vec<double> q = softmax(Vec<double>(z.row(static_cast<Index>(hole)).transpose().cast<double>()));

    double kl = 0;
    for (Index s = 0; s < truth.size(); ++s) {
      if (truth(s) > 0) kl += truth(s) * (std::log(truth(s)) - std::log(q(markov_token(static_cast<int>(s)))));
    }
    total += kl;
    report.max_kl = std::max(report.max_kl, kl);
    ++report.contexts;
  }
  report.mean_kl = report.contexts ? total / report.contexts : 0.0;
  return report;
}

// ---------------------------------------------------------------------------

std::vector<Task> addition_tasks(const Dataset& data) {
  const Tokenizer tok;
  const int eq = tok.id("=");
  std::vector<Task> tasks;
  for (const auto& rec : data.records) {
    const std::size_t cut = prompt_length(rec, eq);
    if (cut == 0) throw std::invalid_argument("addition record has no '='");
    const auto parsed = parse_addition(tok.decode(rec));
    if (!parsed) throw std::invalid_argument("record is not an addition problem: " + tok.decode(rec));
    const std::string want = std::to_string(parsed->a + parsed->b);
    Task t;
    t.prompt.assign(rec.begin(), rec.begin() + static_cast<std::ptrdiff_t>(cut));
    t.check = [tok, want](std::span<const int> generated) {
      const auto got = extract_answer(tok, generated);
      return got && *got == want;
    };
    tasks.push_back(std::move(t));
  }
  return tasks;
}

std::vector<Task> reverse_tasks(const Dataset& data) {
  const Tokenizer tok;
  const int eq = tok.id("=");
  std::vector<Task> tasks;
  for (const auto& rec : data.records) {
    const std::size_t cut = prompt_length(rec, eq);
    if (cut < 2) throw std::invalid_argument("reverse record has no '=' after the source string");
    TokenSeq want(rec.begin(), rec.begin() + static_cast<std::ptrdiff_t>(cut - 1));
    std::reverse(want.begin(), want.end());
    Task t;
    t.prompt.assign(rec.begin(), rec.begin() + static_cast<std::ptrdiff_t>(cut));
    t.check = [want](std::span<const int> generated) {
      const auto eot = std::find(generated.begin(), generated.end(), Tokenizer::kEot);
      return eot != generated.end() && std::equal(generated.begin(), eot, want.begin(), want.end());
    };
    tasks.push_back(std::move(t));
  }
  return tasks;
}

int worker_threads() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("RCD_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = cap;
  }
  return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(worker_threads()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

AccuracyResult task_accuracy(const DenoiserParams<float>& target, const DenoiserParams<float>* ref,
                             const DecodeConfig& config, const std::vector<Task>& tasks, int num_blocks) {
  config.validate();
  AccuracyResult r;
  r.tasks = static_cast<long>(tasks.size());
  if (tasks.empty()) {
    r.empty = true;
    return r;
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto out = decode_sequence<float>(target, ref, tasks[i].prompt, num_blocks, config, i);
    const std::span<const int> generated(out.tokens.data() + tasks[i].prompt.size(),
                                         out.tokens.size() - tasks[i].prompt.size());
    if (tasks[i].check(generated)) ++r.correct;
    r.total_tokens += static_cast<long>(generated.size());
    r.total_steps += static_cast<long>(out.trace.steps.size());
    for (const auto& s : out.trace.steps) r.committed_sum += s.tokens;
    r.forced_blocks += out.forced_blocks;
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.tasks);
  return r;
}

std::vector<double> default_thresholds() { return {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}; }

std::vector<ParetoPoint> pareto_sweep(const DenoiserParams<float>& seqd, const DenoiserParams<float>& rcd,
                                      const DenoiserParams<float>* ref, const std::vector<Task>& tasks,
                                      const std::vector<double>& thresholds, const DecodeConfig& base,
                                      int num_blocks) {
  std::vector<ParetoPoint> points;
  std::vector<DecodeConfig> configs;
  for (const DecodeMode mode : {DecodeMode::SeqD, DecodeMode::RCD}) {
    for (double th : thresholds) {
      DecodeConfig c = base;
      c.mode = mode;
      c.selection = ConfidenceThreshold{th};
      c.validate();
      configs.push_back(c);
      ParetoPoint p;
      p.variant = to_string(mode);
      p.threshold = th;
      points.push_back(p);
    }
  }
  parallel_for(points.size(), [&](std::size_t i) {
    const bool is_rcd = configs[i].mode == DecodeMode::RCD;
    const auto r = task_accuracy(is_rcd ? rcd : seqd, is_rcd ? ref : nullptr, configs[i], tasks, num_blocks);
    points[i].accuracy = r.accuracy;
    points[i].tokens_per_step = r.tokens_per_step();
    points[i].total_steps = r.total_steps;
    points[i].total_tokens = r.total_tokens;
    points[i].committed_sum = r.committed_sum;
  });
  return points;
}

std::vector<AblationRow> alpha_ablation(const DenoiserParams<float>& rcd, const DenoiserParams<float>* ref,
                                        const std::vector<Task>& tasks,
                                        const std::vector<AlphaStrategy>& strategies,
                                        const DecodeConfig& base, int num_blocks) {
  std::vector<AblationRow> rows(strategies.size());
  parallel_for(strategies.size(), [&](std::size_t i) {
    DecodeConfig c = base;
    c.mode = DecodeMode::RCD;
    c.alpha = strategies[i];
    const auto r = task_accuracy(rcd, ref, c, tasks, num_blocks);
    rows[i].strategy = strategies[i].str();
    rows[i].threshold = std::holds_alternative<ConfidenceThreshold>(c.selection)
                            ? std::get<ConfidenceThreshold>(c.selection).threshold
                            : 0.0;
    rows[i].accuracy = r.accuracy;
    rows[i].tokens_per_step = r.tokens_per_step();
    rows[i].total_steps = r.total_steps;
    rows[i].total_tokens = r.total_tokens;
  });
  return rows;
}

BudgetReport matched_budget_report(const std::vector<BudgetEntry>& entries, const std::vector<Task>& tasks,
                                   const Dataset& heldout, const TrainConfig& train, const DecodeConfig& base,
                                   int num_blocks) {
  BudgetReport report;
  report.rows.resize(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const auto& e = entries[i];
    if (!e.seqd || !e.rcd || !e.ref) throw std::invalid_argument("budget entry is missing a checkpoint");
    DecodeConfig cs = base, cr = base;
    cs.mode = DecodeMode::SeqD;
    cr.mode = DecodeMode::RCD;
    BudgetRow& row = report.rows[i];
    row.seed = e.seed;
    row.seqd_accuracy = task_accuracy(*e.seqd, nullptr, cs, tasks, num_blocks).accuracy;
    row.rcd_accuracy = task_accuracy(*e.rcd, e.ref, cr, tasks, num_blocks).accuracy;
    row.seqd_ce = heldout_masked_ce(*e.seqd, heldout, train, e.seed);
    row.rcd_ce = heldout_masked_ce(*e.rcd, heldout, train, e.seed, e.ref);
  });
  if (!report.rows.empty()) {
    const double n = static_cast<double>(report.rows.size());
    for (const auto& r : report.rows) {
      report.mean_seqd_accuracy += r.seqd_accuracy / n;
      report.mean_rcd_accuracy += r.rcd_accuracy / n;
      report.mean_seqd_ce += r.seqd_ce / n;
      report.mean_rcd_ce += r.rcd_ce / n;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

std::ostringstream csv_stream() {
  std::ostringstream out;
  out << std::setprecision(10);
  return out;
}

} // namespace

std::string recall_csv(const std::vector<RecallCurve>& curves) {
  auto out = csv_stream();
  out << "curve,k,step,recall\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    for (std::size_t s = 0; s < curves[c].values.size(); ++s) {
      out << c << ',' << curves[c].k << ',' << s + 1 << ',' << curves[c].values[s] << '\n';
    }
  }
  return out.str();
}

std::string pareto_csv(const std::vector<ParetoPoint>& points) {
  auto out = csv_stream();
  out << "variant,threshold,accuracy,tokens_per_step,total_steps,total_tokens,committed_tokens\n";
  for (const auto& p : points) {
    out << p.variant << ',' << p.threshold << ',' << p.accuracy << ',' << p.tokens_per_step << ','
        << p.total_steps << ',' << p.total_tokens << ',' << p.committed_sum << '\n';
  }
  return out.str();
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  auto out = csv_stream();
  out << "strategy,threshold,accuracy,tokens_per_step,total_steps,total_tokens\n";
  for (const auto& r : rows) {
    out << r.strategy << ',' << r.threshold << ',' << r.accuracy << ',' << r.tokens_per_step << ','
        << r.total_steps << ',' << r.total_tokens << '\n';
  }
  return out.str();
}

std::string budget_csv(const BudgetReport& report) {
  auto out = csv_stream();
  out << "seed,seqd_accuracy,rcd_accuracy,seqd_ce,rcd_ce\n";
  for (const auto& r : report.rows) {
    out << r.seed << ',' << r.seqd_accuracy << ',' << r.rcd_accuracy << ',' << r.seqd_ce << ',' << r.rcd_ce
        << '\n';
  }
  out << "mean," << report.mean_seqd_accuracy << ',' << report.mean_rcd_accuracy << ','
      << report.mean_seqd_ce << ',' << report.mean_rcd_ce << '\n';
  return out.str();
}

} // namespace rcd
