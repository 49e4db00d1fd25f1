#include "doctest.h"

#include "rcd/eval.hpp"

#include <cmath>

using namespace rcd;

namespace {

Mat<double> chain3() {
  Mat<double> t(3, 3);
  t << 0.6, 0.3, 0.1, 0.1, 0.2, 0.7, 0.5, 0.1, 0.4;
  return t;
}

Vec<double> uniform3() { return Vec<double>::Constant(3, 1.0 / 3); }

// Every observation pattern over n slots with states from the chain; masks
// are the bits of `mask`, observed values cycle through the states.
std::vector<std::optional<int>> pattern(int n, unsigned mask, int shift) {
  std::vector<std::optional<int>> o(n);
  for (int i = 0; i < n; ++i) {
    if (!(mask >> i & 1u)) o[i] = (i + shift) % 3;
  }
  return o;
}

const ModelDims kDims{64, 8, 1, 2, 16, 64};

} // namespace

TEST_CASE("markov oracle matches brute force on every mask up to length 8") {
  const Mat<double> t = chain3();
  const Vec<double> init = uniform3();
  double worst = 0;
  for (int n = 1; n <= 8; ++n) {
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
      const auto obs = pattern(n, mask, static_cast<int>(mask % 3));
      const auto fb = markov_posterior_oracle(t, init, obs);
      const auto bf = markov_posterior_bruteforce(t, init, obs);
      REQUIRE(fb.size() == bf.size());
      for (const auto& [pos, p] : fb) {
        CHECK(std::abs(p.sum() - 1.0) < 1e-12);
        worst = std::max(worst, (p - bf.at(pos)).cwiseAbs().maxCoeff());
      }
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("markov oracle closed forms") {
  const Mat<double> t = chain3();
  const Vec<double> init = uniform3();
  // interior hole: proportional to T[l, s] * T[s, r]
  for (int l = 0; l < 3; ++l) {
    for (int r = 0; r < 3; ++r) {
      const auto post = markov_posterior_oracle(t, init, {l, std::nullopt, r}).at(1);
      Vec<double> want = t.row(l).transpose().cwiseProduct(t.col(r));
      want /= want.sum();
      CHECK((post - want).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  // trailing hole: next-state row
  const auto last = markov_posterior_oracle(t, init, {0, 2, std::nullopt}).at(2);
  CHECK((last - t.row(2).transpose()).cwiseAbs().maxCoeff() < 1e-12);

  // deterministic permutation chain: the hole is forced
  Mat<double> perm = Mat<double>::Zero(3, 3);
  perm(0, 1) = perm(1, 2) = perm(2, 0) = 1;
  const auto forced = markov_posterior_oracle(perm, init, {0, std::nullopt, std::nullopt, 0});
  CHECK(forced.at(1)(1) == doctest::Approx(1.0));
  CHECK(forced.at(2)(2) == doctest::Approx(1.0));

  // iid rows: conditioning is irrelevant
  Mat<double> iid(3, 3);
  iid.rowwise() = Vec<double>((Vec<double>(3) << 0.2, 0.5, 0.3).finished()).transpose();
  const auto p = markov_posterior_oracle(iid, init, {2, std::nullopt, 0}).at(1);
  CHECK((p - iid.row(0).transpose()).cwiseAbs().maxCoeff() < 1e-12);

  Mat<double> bad = t;
  bad(0, 0) = 0.7;
  CHECK_THROWS_AS(markov_posterior_oracle(bad, init, {0, std::nullopt}), std::invalid_argument);
  CHECK_THROWS_AS(markov_posterior_oracle(perm, init, {0, 0}), std::invalid_argument); // impossible
  CHECK_THROWS_AS(markov_posterior_oracle(t, init, {0, 5}), std::invalid_argument);
}

TEST_CASE("recall@k on a hand-built trace") {
  DecodeTrace trace;
  StepRecord s1;
  s1.step = 1;
  s1.top = {{0, {{5, 0.9}, {6, 0.1}}}, {1, {{7, 0.6}, {8, 0.4}}}};
  s1.committed = {{0, 5}};
  s1.tokens = 1;
  StepRecord s2;
  s2.step = 2;
  s2.top = {{1, {{3, 0.5}, {8, 0.5}}}};
  s2.committed = {{1, 8}};
  s2.tokens = 1;
  trace.steps = {s1, s2};

  const auto r1 = recall_at_k(trace, 1);
  CHECK(r1.k_max == 2);
  REQUIRE(r1.values.size() == 2);
  CHECK(r1.values[0] == 0.5);
  CHECK(r1.values[1] == 0.5);
  const auto r2 = recall_at_k(trace, 2);
  CHECK(r2.values[0] == 1.0);
  CHECK(r2.values[1] == 1.0);
  CHECK_THROWS_AS(recall_at_k(trace, 3), std::invalid_argument);
  CHECK_THROWS_AS(recall_at_k(trace, 0), std::invalid_argument);

  CHECK(recall_csv({r1}) == "curve,k,step,recall\n0,1,1,0.5\n0,1,2,0.5\n");
}

TEST_CASE("recall@k on real traces: monotone in k, complete lists give 1") {
  const auto p = init_params<double>(ModelDims{4, 8, 1, 2, 16, 32}, 3);
  DecodeConfig c;
  c.block_size = 6;
  c.selection = TopM{1};
  c.warm_start = WarmStart::Self;
  c.stop_token = -1;
  const auto out = decode_sequence<double>(p, nullptr, {0, 1}, 2, c);
  const auto full = recall_at_k(out.trace, 4);
  for (double v : full.values) CHECK(v == 1.0);
  const auto a = recall_at_k(out.trace, 1), b = recall_at_k(out.trace, 2), d = recall_at_k(out.trace, 3);
  for (std::size_t s = 0; s < a.values.size(); ++s) {
    CHECK(a.values[s] <= b.values[s]);
    CHECK(b.values[s] <= d.values[s]);
  }
  CHECK(a.values.back() == 1.0); // greedy: the final step's argmax is what gets committed
}

TEST_CASE("task accuracy, sweeps and accounting") {
  const auto model = init_params<float>(kDims, 11);
  AdditionConfig ac;
  ac.count = 6;
  ac.seed = 2;
  const auto tasks = addition_tasks(gen_addition_corpus(ac));
  REQUIRE(tasks.size() == 6);
  const Tokenizer tok;
  CHECK(tok.decode(tasks[0].prompt).back() == '=');

  DecodeConfig base;
  base.block_size = 4;
  base.warm_start = WarmStart::Self;
  base.stop_token = -1;

  const auto empty = task_accuracy(model, nullptr, base, {}, 2);
  CHECK(empty.empty);
  CHECK(empty.accuracy == 0.0);

  std::vector<Task> yes = tasks;
  for (auto& t : yes) t.check = [](std::span<const int>) { return true; };
  const auto all = task_accuracy(model, nullptr, base, yes, 2);
  CHECK(all.accuracy == 1.0);
  CHECK(all.committed_sum == all.total_tokens);
  CHECK(all.total_tokens == 6 * 8);

  // a correct continuation is accepted
  const auto answer = tok.encode("579␄");
  CHECK(addition_tasks(Dataset{"char64", 64, {tok.encode("123+456=579␄")}})[0].check(answer));

  const auto points = pareto_sweep(model, model, nullptr, tasks, {0.5, 0.5, 1.0}, base, 2);
  REQUIRE(points.size() == 6);
  CHECK(points[0].variant == "seqd");
  CHECK(points[3].variant == "rcd");
  CHECK(points[0].accuracy == points[1].accuracy);
  CHECK(points[0].total_steps == points[1].total_steps);
  for (const auto& pt : points) {
    CHECK(pt.committed_sum == pt.total_tokens);
    CHECK(pt.tokens_per_step >= 1.0);
  }
  CHECK(points[2].total_steps == 2 * 4 * 6); // threshold 1.0 on a random model: one commit per step
  const auto again = pareto_sweep(model, model, nullptr, tasks, {0.5, 0.5, 1.0}, base, 2);
  CHECK(pareto_csv(points) == pareto_csv(again));
  CHECK(pareto_csv(points).rfind("variant,threshold,accuracy,tokens_per_step,total_steps,total_tokens,committed_tokens\n", 0) == 0);

  const auto rows = alpha_ablation(model, nullptr, tasks, {AlphaStrategy::parse("entropy"),
                                                           AlphaStrategy::parse("linear:0")}, base, 2);
  CHECK(rows[0].strategy == "entropy");
  CHECK(rows[1].strategy == "linear:0");
}

TEST_CASE("matched budget report on identical checkpoints") {
  const auto model = init_params<float>(kDims, 12);
  AdditionConfig ac;
  ac.count = 4;
  const auto data = gen_addition_corpus(ac);
  TrainConfig tc;
  tc.anchor = Tokenizer().id("=");
  DecodeConfig base;
  base.block_size = 4;
  base.warm_start = WarmStart::None;
  base.alpha = AlphaStrategy::parse("linear:0");
  const BudgetEntry e{3, &model, &model, &model};
  const auto rep = matched_budget_report({e, e}, addition_tasks(data), data, tc, base, 2);
  REQUIRE(rep.rows.size() == 2);
  CHECK(rep.rows[0].seqd_accuracy == rep.rows[0].rcd_accuracy);
  CHECK(rep.rows[0].seqd_ce > 0);
  CHECK(rep.rows[0].seqd_ce == rep.rows[1].seqd_ce);
  CHECK(budget_csv(rep).find("mean,") != std::string::npos);
  CHECK_THROWS_AS(matched_budget_report({BudgetEntry{}}, {}, data, tc, base, 1), std::invalid_argument);
}

TEST_CASE("parallel_for covers every index and propagates errors") {
  std::vector<int> hit(100, 0);
  parallel_for(hit.size(), [&](std::size_t i) { hit[i]++; });
  for (int h : hit) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) {
                    if (i == 7) throw std::runtime_error("boom");
                  }),
                  std::runtime_error);
}
