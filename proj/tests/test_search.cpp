#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <tuple>

#include "expected_8b.hpp"
#include "support.hpp"
#include "trimkit/pipeline.hpp"
#include "trimkit/search.hpp"

using namespace trimkit;
using namespace oracle;

namespace {

SearchSpace toy_space() {
  SearchSpace s;
  s.layer_range = {2, 3};
  s.head_choices = {4, 8};
  s.mlp_expansion_factors = {2, 4};
  s.embedding_choices = {32, 64};
  s.d_head = 8;
  s.vocab = 256;
  s.query_groups = 2;
  s.hidden_multiple = 16;
  s.max_seq_len = 128;
  return s;
}

// every grid point counted from scratch, filtered and ordered
std::vector<ModelConfig> brute_force(const SearchSpace& s, double budget, double tol, CountMode mode) {
  using Key = std::tuple<long, long, long, long>;
  std::map<Key, ModelConfig> keep;
  for (std::size_t l = s.layer_range.first; l <= s.layer_range.second; ++l)
    for (auto h : s.head_choices)
      for (double f : s.mlp_expansion_factors)
        for (auto e : s.embedding_choices) {
          ModelConfig c;
          c.num_layers = l;
          c.num_heads = h;
          c.num_query_groups = std::gcd(h, s.query_groups);
          c.d_head = s.d_head;
          c.d_model = e;
          c.d_hidden = static_cast<std::size_t>(std::llround(f * e / s.hidden_multiple)) * s.hidden_multiple;
          c.vocab_size = s.vocab;
          c.max_seq_len = s.max_seq_len;
          c.tie_embeddings = s.tie_embeddings;
          const double d = c.d_model, q = double(h) * c.d_head, kv = double(c.num_query_groups) * c.d_head;
          const double layer = 2 * q * d + 2 * kv * d + 2 * double(c.d_hidden) * d + 4 * d;
          const double emb = double(c.vocab_size) * d * (c.tie_embeddings ? 1 : 2);
          const double non_emb = double(l) * layer + 2 * d;
          const double count = mode == CountMode::total ? non_emb + emb : non_emb;
          if (std::abs(count - budget) <= tol * budget)
            keep[{-long(l), long(h), -long(e), long(c.d_hidden)}] = c;
        }
  std::vector<ModelConfig> out;
  for (auto& [k, c] : keep) out.push_back(c);
  return out;
}

std::vector<ModelConfig> configs(const CandidateSet& set) {
  std::vector<ModelConfig> out;
  for (const auto& c : set.candidates) out.push_back(c.config);
  return out;
}

}  // namespace

TEST_CASE("hidden width snapping") {
  CHECK(snap_hidden(2.5, 4608, 128) == 11520);
  CHECK(snap_hidden(3.5, 4608, 128) == 16128);
  CHECK(snap_hidden(2.5, 5120, 128) == 12800);
  CHECK(snap_hidden(0.001, 64, 16) == 16);
}

TEST_CASE("enumeration equals the exhaustive filter") {
  const auto space = toy_space();
  std::vector<double> counts;
  for (const auto& c : brute_force(space, 1e6, 1.0, CountMode::total))
    counts.push_back(static_cast<double>(count_params(c).total));
  CHECK(counts.size() == 16);
  std::sort(counts.begin(), counts.end());
  for (auto mode : {CountMode::total, CountMode::non_embedding}) {
    for (double budget : {counts[3], counts[8], counts[12], 50000.0}) {
      for (double tol : {0.01, 0.05, 0.2}) {
        const auto set = enumerate_candidates(space, budget, tol, mode);
        CHECK(configs(set) == brute_force(space, budget, tol, mode));
        for (const auto& c : set.candidates) {
          CHECK(std::abs(double(counted_params(c.config, mode)) - budget) <= tol * budget);
          CHECK(c.params.total == count_params(c.config).total);
        }
        CHECK(configs(enumerate_candidates(space, budget, tol, mode)) == configs(set));
      }
    }
  }
}

TEST_CASE("a single feasible config") {
  const auto space = toy_space();
  const auto all = brute_force(space, 1e6, 1.0, CountMode::total);
  const auto& only = all[5];
  const double count = static_cast<double>(count_params(only).total);
  const auto set = enumerate_candidates(space, count, 1e-9);
  REQUIRE(set.candidates.size() == 1);
  CHECK(set.candidates[0].config == only);
  CHECK(enumerate_candidates(space, 10.0, 0.01).candidates.empty());
  CHECK_THROWS(enumerate_candidates(space, count, 0.0));
  CHECK_THROWS(enumerate_candidates(space, count, 1.0));
}

TEST_CASE("the 8B search grid yields the 15 expected candidates") {
  const auto set = enumerate_candidates(reference_8b_space(), kCalibrated8bBudget, kCalibrated8bTolerance);
  REQUIRE(set.candidates.size() == kExpected8b.size());
  for (std::size_t i = 0; i < kExpected8b.size(); ++i) {
    const auto& c = set.candidates[i].config;
    const auto& e = kExpected8b[i];
    CAPTURE(i);
    CHECK(c.num_layers == e.layers);
    CHECK(c.num_heads == e.heads);
    CHECK(c.d_hidden == e.hidden);
    CHECK(c.d_model == e.emb);
    CHECK(c.d_head == 128);
    CHECK(c.num_query_groups == 8);
  }
}

TEST_CASE("manifest round trip") {
  auto set = enumerate_candidates(toy_space(), 120000, 0.3);
  REQUIRE(!set.candidates.empty());
  set.candidates[0].eval_loss = 1.25;
  set.candidates[0].trajectory = {{10, 2.5}, {20, 1.25}};
  const auto back = candidate_set_from_json(to_json(set));
  CHECK(to_json(back).dump() == to_json(set).dump());
  CHECK(to_json(search_space_from_json(to_json(toy_space()))).dump() == to_json(toy_space()).dump());
}

TEST_CASE("candidate ranking") {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.d_model = 32;
  cfg.num_heads = 4;
  cfg.num_query_groups = 2;
  cfg.d_head = 8;
  cfg.d_hidden = 64;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 32;
  const auto ds = make_bigram_corpus(64, 3, 60, 200, 3);
  const auto evals = fixed_batches(ds, Split::val, 2, 4, 17, 4);
  const auto source = window_source(ds, Split::train, 4, 17, 5);
  TrainConfig pre;
  pre.steps = 120;
  pre.batch_size = 4;
  pre.seq_len = 17;
  pre.lr_max = 3e-3;
  pre.lr_min = 3e-4;
  const Model teacher = conventional_loop(build_model(cfg, 6), source, evals, pre).student;
  const auto report = compute_importance(teacher, evals);

  auto make = [&](std::size_t layers, std::size_t d_model, std::size_t hidden) {
    Candidate c;
    c.config = cfg;
    c.config.num_layers = layers;
    c.config.d_model = d_model;
    c.config.d_hidden = hidden;
    c.params = count_params(c.config);
    return c;
  };
  CandidateSet set{0, 0.1, CountMode::total, {make(2, 32, 64), make(1, 16, 32), make(2, 16, 32), make(1, 32, 48)}};
  RankOptions opts;
  opts.train = pre;
  opts.train.steps = 12;
  opts.train.eval_every = 6;
  const auto ranked = rank_candidates(teacher, set, report, source, evals, opts);
  // the unpruned model needs no recovery
  CHECK(ranked.candidates[0].config == cfg);
  for (std::size_t i = 1; i < ranked.candidates.size(); ++i)
    CHECK(*ranked.candidates[i - 1].eval_loss <= *ranked.candidates[i].eval_loss);
  CHECK(ranked.candidates[0].trajectory.size() == 2);
  CHECK(ranking_at(ranked, 12) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK_THROWS(ranking_at(ranked, 7));

  CandidateSet reversed = set;
  std::reverse(reversed.candidates.begin(), reversed.candidates.end());
  CHECK(configs(rank_candidates(teacher, reversed, report, source, evals, opts)) == configs(ranked));

  CandidateSet one{0, 0.1, CountMode::total, {make(1, 16, 32)}};
  const auto single = rank_candidates(teacher, one, report, source, evals, opts);
  CHECK(single.candidates.size() == 1);
  CHECK(single.candidates[0].eval_loss.has_value());
  opts.train.steps = 0;
  CHECK_THROWS(rank_candidates(teacher, one, report, source, evals, opts));
}
