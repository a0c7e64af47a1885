#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

using namespace trimkit;
using namespace oracle;

namespace {

const Reduction kAll[] = {Reduction::mean_abs, Reduction::l2, Reduction::variance};

ModelConfig mha_config() {
  auto c = tiny_config();
  c.num_query_groups = c.num_heads;
  return c;
}

std::vector<TokenBatch> calib_for(const ModelConfig& c, std::uint64_t seed, std::size_t batch = 4) {
  return {random_tokens(batch, 12, c.vocab_size, seed)};
}

bool close(double a, double b, double rel = 1e-4) {
  return std::abs(a - b) <= rel * std::max({1.0, std::abs(a), std::abs(b)});
}

Mat column_grid(const Mat& rows, std::size_t col, std::size_t batch, std::size_t seq) {
  Mat g(batch, std::vector<double>(seq));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < seq; ++s) g[b][s] = rows[b * seq + s][col];
  return g;
}

void set_slice_rows(Tensor& t, std::size_t first, std::size_t count, Real value) {
  for (std::size_t r = first; r < first + count; ++r)
    for (std::size_t c = 0; c < t.dim(1); ++c) t.mutable_data()[r * t.dim(1) + c] = value;
}

}  // namespace

TEST_CASE("aggregation hand examples") {
  const std::vector<double> s = {1, -2, 2};
  CHECK(aggregate(s, 1, 3, {Reduction::l2, Reduction::mean_abs}) == doctest::Approx(5.0 / 3));
  CHECK(aggregate(s, 1, 3, {Reduction::l2, Reduction::l2}) == doctest::Approx(3.0));
  CHECK(aggregate(s, 1, 3, {Reduction::l2, Reduction::variance}) == doctest::Approx(26.0 / 9));
  const std::vector<double> zeros(12, 0.0), constant(12, 4.0);
  for (auto b : kAll)
    for (auto q : kAll) CHECK(aggregate(zeros, 3, 4, {b, q}) == 0);
  for (auto b : kAll) CHECK(aggregate(constant, 3, 4, {b, Reduction::variance}) == 0);
  CHECK_THROWS(aggregate(std::vector<double>{}, 0, 0, {}));
}

TEST_CASE("aggregation matches the brute-force oracle for every spec") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = dim(rng), s = dim(rng);
    Mat m(b, std::vector<double>(s));
    std::vector<double> flat;
    for (auto& row : m)
      for (auto& v : row) flat.push_back(v = n(rng));
    for (auto bf : kAll)
      for (auto sf : kAll) {
        const double want = brute_aggregate(m, bf, sf), got = aggregate(flat, b, s, {bf, sf});
        CHECK(std::abs(got - want) <= 1e-6 * std::max(1e-12, std::abs(want)));
      }
  }
}

TEST_CASE("width scores match direct recomputation") {
  const auto cfg = tiny_config();
  const Model m = random_model(cfg, 1, 5.0);
  const auto calib = calib_for(cfg, 2);
  const auto ref = reference_forward(m, calib[0]);
  const std::size_t B = calib[0].batch, S = calib[0].seq;
  for (auto bf : kAll)
    for (auto sf : kAll) {
      const AggregationSpec spec{bf, sf};
      const auto heads = head_importance(m, calib, spec);
      const auto neurons = neuron_importance(m, calib, spec);
      const auto emb = emb_importance(m, calib, spec);
      for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        Mat norms(B * S, std::vector<double>(cfg.num_heads));
        for (std::size_t r = 0; r < B * S; ++r)
          for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            double q = 0;
            for (std::size_t d = 0; d < cfg.d_head; ++d) q += std::pow(ref.layers[l].heads[r][h * cfg.d_head + d], 2);
            norms[r][h] = std::sqrt(q);
          }
        for (std::size_t h = 0; h < cfg.num_heads; ++h)
          CHECK(close(heads[l][h], brute_aggregate(column_grid(norms, h, B, S), bf, sf)));
        for (std::size_t i = 0; i < cfg.d_hidden; ++i)
          CHECK(close(neurons[l][i], brute_aggregate(column_grid(ref.layers[l].pre, i, B, S), bf, sf)));
      }
      for (std::size_t c = 0; c < cfg.d_model; ++c) {
        double want = brute_aggregate(column_grid(ref.final_ln, c, B, S), bf, sf);
        for (const auto& lo : ref.layers)
          want += brute_aggregate(column_grid(lo.ln1, c, B, S), bf, sf) +
                  brute_aggregate(column_grid(lo.ln2, c, B, S), bf, sf);
        CHECK(close(emb[c], want));
      }
    }
}

TEST_CASE("dead heads, neurons and channels score zero") {
  SUBCASE("head with zeroed value slice") {
    const auto cfg = mha_config();
    Model m = random_model(cfg, 3, 5.0);
    set_slice_rows(m.layers[1].wv, 2 * cfg.d_head, cfg.d_head, 0);
    const auto s = head_importance(m, calib_for(cfg, 4));
    CHECK(s[1][2] == 0);
    CHECK(rank_descending(s[1]).back() == 2);
  }
  SUBCASE("grouped value slice silences every head of the group") {
    const auto cfg = tiny_config();
    Model m = random_model(cfg, 3, 5.0);
    set_slice_rows(m.layers[0].wv, cfg.d_head, cfg.d_head, 0);
    const auto s = head_importance(m, calib_for(cfg, 4));
    CHECK(s[0][2] == 0);
    CHECK(s[0][3] == 0);
    CHECK(s[0][0] > 0);
  }
  SUBCASE("zero row of W1") {
    const auto cfg = tiny_config();
    Model m = random_model(cfg, 5, 5.0);
    set_slice_rows(m.layers[0].w1, 7, 1, 0);
    for (auto spec : {AggregationSpec{}, AggregationSpec{Reduction::variance, Reduction::l2}})
      CHECK(neuron_importance(m, calib_for(cfg, 6), spec)[0][7] == 0);
  }
  SUBCASE("channel with zero gamma and beta everywhere") {
    const auto cfg = tiny_config();
    Model m = random_model(cfg, 7, 5.0);
    auto kill = [](Tensor& t) { t.mutable_data()[3] = 0; };
    for (auto& l : m.layers) {
      kill(l.ln1_gamma), kill(l.ln1_beta), kill(l.ln2_gamma), kill(l.ln2_beta);
    }
    kill(m.lnf_gamma), kill(m.lnf_beta);
    const auto s = emb_importance(m, calib_for(cfg, 8));
    CHECK(s[3] == 0);
    CHECK(rank_descending(s).back() == 3);
  }
}

TEST_CASE("scores are non-negative") {
  const auto cfg = tiny_config();
  const Model m = random_model(cfg, 9, 5.0);
  const auto calib = calib_for(cfg, 10);
  for (auto bf : kAll)
    for (auto sf : kAll) {
      ImportanceOptions o;
      o.agg = {bf, sf};
      o.ppl = true;
      const auto r = compute_importance(m, calib, o);
      for (const auto& l : r.head_scores)
        for (double v : l) CHECK(v >= 0);
      for (const auto& l : r.neuron_scores)
        for (double v : l) CHECK(v >= 0);
      for (double v : r.emb_scores) CHECK(v >= 0);
      for (double v : r.layer_scores_bi) CHECK(v >= 0);
    }
}

TEST_CASE("duplicated heads score identically") {
  const auto cfg = mha_config();
  Model m = random_model(cfg, 11, 5.0);
  const std::size_t dh = cfg.d_head;
  for (auto* t : {&m.layers[0].wq, &m.layers[0].wk, &m.layers[0].wv}) {
    auto d = t->mutable_data();
    for (std::size_t r = 0; r < dh; ++r)
      for (std::size_t c = 0; c < cfg.d_model; ++c) d[(3 * dh + r) * cfg.d_model + c] = d[(1 * dh + r) * cfg.d_model + c];
  }
  const auto s = head_importance(m, calib_for(cfg, 12));
  CHECK(s[0][1] == s[0][3]);
}

TEST_CASE("neuron scores are homogeneous in the W1 row") {
  const auto cfg = tiny_config();
  Model m = random_model(cfg, 13, 5.0);
  const auto calib = calib_for(cfg, 14);
  for (auto spec : {AggregationSpec{Reduction::l2, Reduction::mean_abs}, AggregationSpec{Reduction::mean_abs, Reduction::l2}}) {
    const auto before = neuron_importance(m, calib, spec);
    Model scaled = m;
    auto d = scaled.layers[1].w1.mutable_data();
    for (std::size_t c = 0; c < cfg.d_model; ++c) d[5 * cfg.d_model + c] *= 4;
    const auto after = neuron_importance(scaled, calib, spec);
    CHECK(close(after[1][5], 4 * before[1][5], 1e-5));
    for (std::size_t i = 0; i < cfg.d_hidden; ++i)
      if (i != 5) CHECK(after[1][i] == before[1][i]);
  }
}

TEST_CASE("rankings are permutation-equivariant") {
  const auto cfg = mha_config();
  const Model m = random_model(cfg, 15, 5.0);
  const auto calib = calib_for(cfg, 16);
  const auto base = compute_importance(m, calib);

  // swap heads 0 and 2 and neurons 1 and 9 of layer 1, channels 2 and 5 everywhere
  Model p = m;
  const std::size_t dh = cfg.d_head;
  auto swap_rows = [](Tensor& t, std::size_t a, std::size_t b, std::size_t block) {
    auto d = t.mutable_data();
    const std::size_t w = t.dim(1);
    for (std::size_t r = 0; r < block; ++r)
      for (std::size_t c = 0; c < w; ++c) std::swap(d[(a * block + r) * w + c], d[(b * block + r) * w + c]);
  };
  auto swap_cols = [](Tensor& t, std::size_t a, std::size_t b) {
    auto d = t.mutable_data();
    if (t.shape().size() == 1) return std::swap(d[a], d[b]);
    for (std::size_t r = 0; r < t.dim(0); ++r) std::swap(d[r * t.dim(1) + a], d[r * t.dim(1) + b]);
  };
  auto& l1 = p.layers[1];
  for (auto* t : {&l1.wq, &l1.wk, &l1.wv, &l1.wo}) swap_rows(*t, 0, 2, dh);
  swap_rows(l1.w1, 1, 9, 1);
  swap_rows(l1.w2, 1, 9, 1);
  for (auto& [name, t] : p.named_tensors()) swap_cols(*t, 2, 5);

  const auto perm = compute_importance(p, calib);
  auto heads = base.head_scores[1];
  std::swap(heads[0], heads[2]);
  auto neurons = base.neuron_scores[1];
  std::swap(neurons[1], neurons[9]);
  auto emb = base.emb_scores;
  std::swap(emb[2], emb[5]);
  for (std::size_t h = 0; h < heads.size(); ++h) CHECK(close(perm.head_scores[1][h], heads[h]));
  for (std::size_t i = 0; i < neurons.size(); ++i) CHECK(close(perm.neuron_scores[1][i], neurons[i]));
  for (std::size_t c = 0; c < emb.size(); ++c) CHECK(close(perm.emb_scores[c], emb[c]));
  CHECK(rank_descending(perm.head_scores[1]) == [&] {
    auto r = rank_descending(heads);
    return r;
  }());
  CHECK(rank_descending(perm.emb_scores) == rank_descending(emb));
}

TEST_CASE("duplicating the calibration set") {
  const auto cfg = tiny_config();
  const Model m = random_model(cfg, 17, 5.0);
  const auto once = calib_for(cfg, 18);
  const std::vector<TokenBatch> twice = {once[0], once[0]};
  for (auto sf : kAll) {
    for (auto bf : {Reduction::mean_abs, Reduction::variance}) {
      const auto a = neuron_importance(m, once, {bf, sf}), b = neuron_importance(m, twice, {bf, sf});
      for (std::size_t i = 0; i < cfg.d_hidden; ++i) CHECK(close(a[0][i], b[0][i]));
    }
    const auto a = head_importance(m, once, {Reduction::l2, sf}), b = head_importance(m, twice, {Reduction::l2, sf});
    for (std::size_t h = 0; h < cfg.num_heads; ++h) CHECK(close(b[1][h], std::sqrt(2.0) * a[1][h]));
    CHECK(rank_descending(a[1]) == rank_descending(b[1]));
  }
}

TEST_CASE("layer importance by perplexity") {
  const auto cfg = toy_config();
  Model m = random_model(cfg, 19, 3.0);
  for (auto& v : m.layers[2].wo.mutable_data()) v = 0;
  for (auto& v : m.layers[2].w2.mutable_data()) v = 0;
  const auto calib = calib_for(cfg, 20);
  const auto s = layer_importance_ppl(m, calib);
  CHECK(s[2] == perplexity(m, calib));
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != 2) CHECK(s[i] > s[2]);
    const std::vector<std::size_t> drop = {i};
    CHECK(close(s[i], perplexity(prune_depth(m, drop), calib), 1e-6));
  }
  CHECK(layer_importance_ppl(Model(m), calib) == s);
  auto one = cfg;
  one.num_layers = 1;
  CHECK_THROWS(layer_importance_ppl(build_model(one, 0), calib));
}

TEST_CASE("block importance") {
  SUBCASE("cosine distance extremes") {
    const auto a = random_tensor({5, 6}, 21);
    CHECK(mean_cosine_distance(a, a) == doctest::Approx(0).epsilon(1e-7));
    CHECK(mean_cosine_distance(a, scale(a, -1)) == doctest::Approx(2.0).epsilon(1e-7));
    CHECK(mean_cosine_distance(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})) == 0);
  }
  const auto cfg = toy_config();
  Model m = random_model(cfg, 22, 3.0);
  for (auto& v : m.layers[1].wo.mutable_data()) v = 0;
  for (auto& v : m.layers[1].w2.mutable_data()) v = 0;
  const auto calib = calib_for(cfg, 23);
  const auto bi = layer_importance_bi(m, calib);
  CHECK(std::abs(bi[1]) < 1e-6);
  for (double v : bi) {
    CHECK(v >= 0);
    CHECK(v <= 2);
  }
  const auto ref = reference_forward(m, calib[0]);
  auto cosine_oracle = [&](std::size_t a, std::size_t b) {
    double total = 0;
    const auto& x = ref.block_inputs[a];
    const auto& y = ref.block_inputs[b];
    for (std::size_t r = 0; r < x.size(); ++r) {
      double dot = 0, nx = 0, ny = 0;
      for (std::size_t c = 0; c < x[r].size(); ++c) {
        dot += x[r][c] * y[r][c];
        nx += x[r][c] * x[r][c];
        ny += y[r][c] * y[r][c];
      }
      total += 1 - dot / std::sqrt(nx * ny);
    }
    return total / static_cast<double>(x.size());
  };
  for (std::size_t i = 0; i < cfg.num_layers; ++i) CHECK(std::abs(bi[i] - cosine_oracle(i, i + 1)) < 1e-5);
  CHECK(std::abs(block_bi(m, calib, 1, 2) - cosine_oracle(1, 3)) < 1e-5);
  CHECK(std::abs(block_bi(m, calib, 0, 4) - cosine_oracle(0, 4)) < 1e-5);
  CHECK_THROWS(block_bi(m, calib, 2, 3));
  CHECK_THROWS(block_bi(m, calib, 0, 0));
}

TEST_CASE("importance never builds a gradient tape") {
  Model m = random_model(toy_config(), 24, 3.0);
  m.set_trainable(true);
  ImportanceOptions o;
  o.ppl = true;
  o.blocks = {{0, 2}, {1, 3}};
  const auto before = Tape::constructed_count();
  const auto r = compute_importance(m, calib_for(m.config, 25), o);
  CHECK(Tape::constructed_count() == before);
  CHECK(r.block_bi.size() == 2);
  CHECK(r.calibration_tokens == 4 * 12);
}

TEST_CASE("rank_descending breaks ties by index") {
  const std::vector<double> s = {1, 3, 3, 0, 1};
  CHECK(rank_descending(s) == std::vector<std::size_t>{1, 2, 0, 4, 3});
}

TEST_CASE("iterative pruning") {
  const auto cfg = toy_config();
  const Model m = random_model(cfg, 26, 3.0);
  const auto calib = calib_for(cfg, 27);

  SUBCASE("one round is single-shot") {
    WidthTargets t{4, 128, 48};
    auto target = cfg;
    target.num_heads = 4;
    target.d_hidden = 128;
    target.d_model = 48;
    target.num_query_groups = fit_query_groups(4, cfg.num_query_groups);
    ImportanceOptions o;
    o.bi = false;
    const auto single = prune_width(m, target, compute_importance(m, calib, o));
    CHECK(models_bit_equal(iterative_importance(m, calib, t, 1), single));
  }
  SUBCASE("two rounds remove both dead sets") {
    Model d = m;
    auto dim = [](Model& x, std::size_t c, Real g) {
      for (auto& l : x.layers)
        for (auto* t : {&l.ln1_gamma, &l.ln1_beta, &l.ln2_gamma, &l.ln2_beta}) t->mutable_data()[c] = g;
      x.lnf_gamma.mutable_data()[c] = g;
      x.lnf_beta.mutable_data()[c] = g;
    };
    const std::vector<std::size_t> first = {3, 17, 30, 41, 50, 63, 8, 22};
    const std::vector<std::size_t> second = {1, 12, 27, 36, 44, 55, 59, 60};
    for (auto c : first) dim(d, c, 0);
    for (auto c : second) dim(d, c, 1e-3f);
    const auto out = iterative_importance(d, calib, {std::nullopt, std::nullopt, 48}, 2);
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < cfg.d_model; ++c)
      if (std::find(first.begin(), first.end(), c) == first.end() &&
          std::find(second.begin(), second.end(), c) == second.end())
        keep.push_back(c);
    auto target = cfg;
    target.d_model = 48;
    std::vector<std::vector<std::size_t>> heads(cfg.num_layers, all_idx(cfg.num_heads));
    std::vector<std::vector<std::size_t>> groups(cfg.num_layers, all_idx(cfg.num_query_groups));
    std::vector<std::vector<std::size_t>> neurons(cfg.num_layers, all_idx(cfg.d_hidden));
    CHECK(models_bit_equal(out, sliced_model(d, target, keep, heads, groups, neurons)));
  }
  SUBCASE("schedule errors") {
    CHECK_THROWS(iterative_importance(m, calib, {std::nullopt, std::nullopt, 47}, 2));
    CHECK_THROWS(iterative_importance(m, calib, {std::nullopt, std::nullopt, 80}, 1));
    CHECK_THROWS(iterative_importance(m, calib, {std::nullopt, std::nullopt, 48}, 0));
  }
}
