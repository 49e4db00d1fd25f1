#pragma once

// Measurement: recall@k over decode traces, accuracy and tokens-per-step on
// task sets, threshold sweeps, alpha ablations, matched-budget comparisons,
// and the exact posterior of an order-1 Markov chain used as a ground-truth
// oracle for single-mask predictions.

#include "rcd/datagen.hpp"
#include "rcd/decode.hpp"
#include "rcd/train.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rcd {

// ---------------------------------------------------------------------------
// recall@k

struct RecallCurve {
  int k = 5;
  int k_max = 0;             // number of steps covered
  std::vector<double> values; // values[s - 1] = recall at step s
};

/// (block, position) -> committed id, read off the trace's commit lists.
std::map<std::pair<int, int>, int> final_tokens(const DecodeTrace& trace);

/// Fraction of final tokens found in the step-s top-k list at their
/// position. Positions committed before step s (and every position of a
/// block that already finished) count as hits. Throws when k exceeds the
/// narrowest top list recorded in the trace.
RecallCurve recall_at_k(const DecodeTrace& trace, const std::map<std::pair<int, int>, int>& finals, int k);
RecallCurve recall_at_k(const DecodeTrace& trace, int k);

// ---------------------------------------------------------------------------
// Markov oracle

/// Exact conditional of every unobserved slot given the observed ones
/// (forward-backward). `observed[i]` is the chain state or nullopt when
/// masked. Returns one distribution over states per masked slot, keyed by
/// position.
std::map<int, Vec<double>> markov_posterior_oracle(const Mat<double>& transition, const Vec<double>& initial,
                                                   const std::vector<std::optional<int>>& observed);

/// Same quantity by enumerating every assignment of the masked slots.
std::map<int, Vec<double>> markov_posterior_bruteforce(const Mat<double>& transition, const Vec<double>& initial,
                                                       const std::vector<std::optional<int>>& observed);

struct KlReport {
  double mean_kl = 0;
  double max_kl = 0;
  int contexts = 0;
};

/// Mean KL(exact posterior || model) over single-mask contexts drawn from
/// held-out records: block on the config grid, one masked slot strictly
/// inside it, model sees prefix and block only. With `ref`, the masked slot
/// carries the reference's residual (as an RCD target sees it in decoding).
KlReport single_mask_kl(const DenoiserParams<float>& model, const MarkovSpec& spec, const Dataset& heldout,
                        int contexts, int block_size, std::uint64_t seed,
                        const DenoiserParams<float>* ref = nullptr);

// ---------------------------------------------------------------------------
// tasks

struct Task {
  TokenSeq prompt;
  std::function<bool(std::span<const int> generated)> check;
};

/// Addition tasks from "a+b=...c␄" records: prompt through the first '=',
/// accepted when the extracted answer equals a+b.
std::vector<Task> addition_tasks(const Dataset& data);

/// Reverse tasks from "s=reverse(s)␄" records: prompt through '=', accepted
/// when the text before the first end-of-text equals reverse(s).
std::vector<Task> reverse_tasks(const Dataset& data);

struct AccuracyResult {
  double accuracy = 0;
  bool empty = false; // task set was empty; accuracy defined as 0
  long correct = 0;
  long tasks = 0;
  long total_tokens = 0;   // generated block tokens
  long total_steps = 0;    // denoising iterations
  long committed_sum = 0;  // sum of per-step commit counts from the traces
  int forced_blocks = 0;

  double tokens_per_step() const {
    return total_steps ? static_cast<double>(total_tokens) / static_cast<double>(total_steps) : 0.0;
  }
};

AccuracyResult task_accuracy(const DenoiserParams<float>& target, const DenoiserParams<float>* ref,
                             const DecodeConfig& config, const std::vector<Task>& tasks, int num_blocks);

struct ParetoPoint {
  std::string variant;
  double threshold = 0;
  double accuracy = 0;
  double tokens_per_step = 0;
  long total_steps = 0;
  long total_tokens = 0;
  long committed_sum = 0;
};

std::vector<double> default_thresholds(); // 0.5, 0.6, ..., 1.0

/// Runs every (variant, threshold) point. SeqD uses `seqd` with the SeqD
/// loop; RCD uses `rcd` (and `ref` for warm start) with the RCD loop. Points
/// come back ordered by variant then threshold as given.
std::vector<ParetoPoint> pareto_sweep(const DenoiserParams<float>& seqd, const DenoiserParams<float>& rcd,
                                      const DenoiserParams<float>* ref, const std::vector<Task>& tasks,
                                      const std::vector<double>& thresholds, const DecodeConfig& base,
                                      int num_blocks);

struct AblationRow {
  std::string strategy;
  double threshold = 0;
  double accuracy = 0;
  double tokens_per_step = 0;
  long total_steps = 0;
  long total_tokens = 0;
};

std::vector<AblationRow> alpha_ablation(const DenoiserParams<float>& rcd, const DenoiserParams<float>* ref,
                                        const std::vector<Task>& tasks,
                                        const std::vector<AlphaStrategy>& strategies,
                                        const DecodeConfig& base, int num_blocks);

struct BudgetRow {
  std::uint64_t seed = 0;
  double seqd_accuracy = 0;
  double rcd_accuracy = 0;
  double seqd_ce = 0;
  double rcd_ce = 0;
};

struct BudgetReport {
  std::vector<BudgetRow> rows;
  double mean_seqd_accuracy = 0;
  double mean_rcd_accuracy = 0;
  double mean_seqd_ce = 0;
  double mean_rcd_ce = 0;
};

/// One seed's checkpoints: extended-SeqD control, RCD target and its reference.
struct BudgetEntry {
  std::uint64_t seed = 0;
  const DenoiserParams<float>* seqd = nullptr;
  const DenoiserParams<float>* rcd = nullptr;
  const DenoiserParams<float>* ref = nullptr;
};

/// Side-by-side accuracy (SeqD loop vs RCD loop at `base`) and held-out
/// masked CE (RCD target sees its reference's residuals) per seed.
BudgetReport matched_budget_report(const std::vector<BudgetEntry>& entries, const std::vector<Task>& tasks,
                                   const Dataset& heldout, const TrainConfig& train, const DecodeConfig& base,
                                   int num_blocks);

// ---------------------------------------------------------------------------
// CSV output

std::string recall_csv(const std::vector<RecallCurve>& curves);
std::string pareto_csv(const std::vector<ParetoPoint>& points);
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string budget_csv(const BudgetReport& report);

/// Worker count for sweeps: RCD_THREADS when set, else hardware concurrency.
int worker_threads();

/// Runs fn(i) for i in [0, n) on up to worker_threads() threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace rcd
