// Independent oracles and fixtures shared by the unit, property and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "trimkit/importance.hpp"
#include "trimkit/model.hpp"
#include "trimkit/pruner.hpp"

namespace oracle {

using namespace trimkit;

inline ModelConfig toy_config() { return ModelConfig{}; }

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 8;
  c.num_heads = 4;
  c.num_query_groups = 2;
  c.d_head = 4;
  c.d_hidden = 12;
  c.vocab_size = 11;
  c.max_seq_len = 16;
  return c;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(n(rng));
  return Tensor(std::move(shape), std::move(v), grad);
}

inline TokenBatch random_tokens(std::size_t batch, std::size_t seq, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> d(0, static_cast<std::uint32_t>(vocab - 1));
  TokenBatch b{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(d(rng));
  return b;
}

/// Scales every weight of a freshly built model so activations are not tiny.
inline Model random_model(const ModelConfig& c, std::uint64_t seed, double scale = 10.0) {
  Model m = build_model(c, seed);
  std::mt19937_64 rng(seed ^ 0xabcdefULL);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& [name, t] : m.named_tensors()) {
    auto d = t->mutable_data();
    const bool ln = name.find(".gamma") != std::string::npos || name.find(".beta") != std::string::npos;
    for (auto& v : d) v = ln ? static_cast<Real>(v + jitter(rng)) : static_cast<Real>(v * scale);
  }
  return m;
}

// ---- straight-line double-precision math ----------------------------------

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Mat naive_matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// x W^T
inline Mat naive_linear(const Mat& x, const Mat& w) {
  Mat c(x.size(), std::vector<double>(w.size(), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w.size(); ++j)
      for (std::size_t k = 0; k < x[0].size(); ++k) c[i][j] += x[i][k] * w[j][k];
  return c;
}

inline Mat naive_layer_norm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b,
                            double eps = 1e-5) {
  Mat out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double n = static_cast<double>(x[r].size());
    double mu = 0, var = 0;
    for (double v : x[r]) mu += v;
    mu /= n;
    for (double v : x[r]) var += (v - mu) * (v - mu);
    var /= n;
    for (std::size_t c = 0; c < x[r].size(); ++c) out[r][c] = (x[r][c] - mu) / std::sqrt(var + eps) * g[c] + b[c];
  }
  return out;
}

inline void naive_rope(Mat& x, std::size_t seq, std::size_t heads, std::size_t dh) {
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double pos = static_cast<double>(r % seq);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t m = 0; m < dh / 2; ++m) {
        const double theta = pos * std::pow(10000.0, -2.0 * static_cast<double>(m) / static_cast<double>(dh));
        const double a = x[r][h * dh + 2 * m], b = x[r][h * dh + 2 * m + 1];
        x[r][h * dh + 2 * m] = a * std::cos(theta) - b * std::sin(theta);
        x[r][h * dh + 2 * m + 1] = a * std::sin(theta) + b * std::cos(theta);
      }
    }
  }
}

struct RefLayerOut {
  Mat heads, pre, ln1, ln2, q, k, v;
};

struct RefForward {
  Mat logits;
  std::vector<RefLayerOut> layers;
  std::vector<Mat> block_inputs;
  Mat final_ln;
};

/// Reference forward: pre-norm blocks, RoPE on q/k, causal softmax attention
/// with query head h reading group h / (H/G), squared-ReLU MLP.
inline RefForward reference_forward(const Model& m, const TokenBatch& t) {
  const auto& c = m.config;
  const std::size_t n = t.batch * t.seq;
  RefForward out;
  Mat x(n, std::vector<double>(c.d_model));
  const Mat emb = to_mat(m.embedding);
  for (std::size_t r = 0; r < n; ++r) x[r] = emb[t.ids[r]];
  const std::size_t per = c.num_heads / c.num_query_groups;
  for (const auto& w : m.layers) {
    out.block_inputs.push_back(x);
    RefLayerOut lo;
    lo.ln1 = naive_layer_norm(x, to_vec(w.ln1_gamma), to_vec(w.ln1_beta));
    lo.q = naive_linear(lo.ln1, to_mat(w.wq));
    lo.k = naive_linear(lo.ln1, to_mat(w.wk));
    lo.v = naive_linear(lo.ln1, to_mat(w.wv));
    Mat q = lo.q, k = lo.k;
    naive_rope(q, t.seq, c.num_heads, c.d_head);
    naive_rope(k, t.seq, c.num_query_groups, c.d_head);
    Mat att(n, std::vector<double>(c.num_heads * c.d_head, 0.0));
    for (std::size_t b = 0; b < t.batch; ++b) {
      for (std::size_t h = 0; h < c.num_heads; ++h) {
        const std::size_t g = h / per;
        for (std::size_t i = 0; i < t.seq; ++i) {
          std::vector<double> s(i + 1);
          for (std::size_t j = 0; j <= i; ++j) {
            double dot = 0;
            for (std::size_t d = 0; d < c.d_head; ++d)
              dot += q[b * t.seq + i][h * c.d_head + d] * k[b * t.seq + j][g * c.d_head + d];
            s[j] = dot / std::sqrt(static_cast<double>(c.d_head));
          }
          const double mx = *std::max_element(s.begin(), s.end());
          double z = 0;
          for (auto& v : s) z += (v = std::exp(v - mx));
          for (std::size_t j = 0; j <= i; ++j)
            for (std::size_t d = 0; d < c.d_head; ++d)
              att[b * t.seq + i][h * c.d_head + d] += s[j] / z * lo.v[b * t.seq + j][g * c.d_head + d];
        }
      }
    }
    lo.heads = att;
    const Mat o = naive_matmul(att, to_mat(w.wo));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c.d_model; ++j) x[r][j] += o[r][j];
    lo.ln2 = naive_layer_norm(x, to_vec(w.ln2_gamma), to_vec(w.ln2_beta));
    lo.pre = naive_linear(lo.ln2, to_mat(w.w1));
    Mat post = lo.pre;
    for (auto& row : post)
      for (auto& v : row) v = v > 0 ? v * v : 0.0;
    const Mat mo = naive_matmul(post, to_mat(w.w2));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c.d_model; ++j) x[r][j] += mo[r][j];
    out.layers.push_back(lo);
  }
  out.block_inputs.push_back(x);
  out.final_ln = naive_layer_norm(x, to_vec(m.lnf_gamma), to_vec(m.lnf_beta));
  out.logits = naive_linear(out.final_ln, to_mat(m.head()));
  return out;
}

inline double max_abs_diff(const Tensor& a, const Mat& b) {
  double d = 0;
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b[i].size(); ++j) d = std::max(d, std::abs(a.at(i, j) - b[i][j]));
  return d;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

inline bool models_bit_equal(const Model& a, const Model& b) {
  if (!(a.config == b.config)) return false;
  auto na = a.named_tensors();
  auto nb = b.named_tensors();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (na[i].first != nb[i].first || !bit_equal(*na[i].second, *nb[i].second)) return false;
  }
  return true;
}

// ---- aggregation oracle ----------------------------------------------------

inline double brute_reduce(const std::vector<double>& v, Reduction r) {
  const double n = static_cast<double>(v.size());
  if (r == Reduction::mean_abs) {
    double s = 0;
    for (double x : v) s += std::fabs(x);
    return s / n;
  }
  if (r == Reduction::l2) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  }
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / n;
}

inline double brute_aggregate(const Mat& scores, Reduction batch, Reduction seq) {
  std::vector<double> rows;
  for (const auto& row : scores) rows.push_back(brute_reduce(row, seq));
  return brute_reduce(rows, batch);
}

// ---- slicing oracle --------------------------------------------------------

inline std::vector<std::size_t> top_k_ascending(const std::vector<double>& s, std::size_t k) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] > s[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline Tensor slice(const Tensor& t, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
  std::vector<Real> v;
  for (auto r : rows)
    for (auto c : cols) v.push_back(t.at(r, c));
  return Tensor({rows.size(), cols.size()}, v);
}

inline Tensor slice_vec(const Tensor& t, const std::vector<std::size_t>& idx) {
  std::vector<Real> v;
  for (auto i : idx) v.push_back(t.data()[i]);
  return Tensor({idx.size()}, v);
}

inline std::vector<std::size_t> all_idx(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

inline std::vector<std::size_t> expand(const std::vector<std::size_t>& units, std::size_t block) {
  std::vector<std::size_t> v;
  for (auto u : units)
    for (std::size_t r = 0; r < block; ++r) v.push_back(u * block + r);
  return v;
}

/// Assembles a pruned model directly from kept indices (no merge).
inline Model sliced_model(const Model& m, const ModelConfig& target, const std::vector<std::size_t>& channels,
                          const std::vector<std::vector<std::size_t>>& heads,
                          const std::vector<std::vector<std::size_t>>& groups,
                          const std::vector<std::vector<std::size_t>>& neurons) {
  Model out(target);
  const auto vocab = all_idx(m.config.vocab_size);
  out.embedding = slice(m.embedding, vocab, channels);
  if (!target.tie_embeddings) out.output_head = slice(m.output_head, vocab, channels);
  out.lnf_gamma = slice_vec(m.lnf_gamma, channels);
  out.lnf_beta = slice_vec(m.lnf_beta, channels);
  const auto dh = m.config.d_head;
  for (std::size_t l = 0; l < target.num_layers; ++l) {
    const auto& w = m.layers[l];
    auto& o = out.layers[l];
    o.ln1_gamma = slice_vec(w.ln1_gamma, channels);
    o.ln1_beta = slice_vec(w.ln1_beta, channels);
    o.ln2_gamma = slice_vec(w.ln2_gamma, channels);
    o.ln2_beta = slice_vec(w.ln2_beta, channels);
    o.wq = slice(w.wq, expand(heads[l], dh), channels);
    o.wo = slice(w.wo, expand(heads[l], dh), channels);
    o.wk = slice(w.wk, expand(groups[l], dh), channels);
    o.wv = slice(w.wv, expand(groups[l], dh), channels);
    o.w1 = slice(w.w1, neurons[l], channels);
    o.w2 = slice(w.w2, neurons[l], channels);
  }
  return out;
}

/// Kept (groups, heads) per the documented GQA rule: groups by summed head
/// score, then heads within each kept group.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> gqa_keep(const std::vector<double>& scores,
                                                                              std::size_t src_groups,
                                                                              std::size_t dst_groups,
                                                                              std::size_t dst_heads) {
  const std::size_t per = scores.size() / src_groups;
  std::vector<double> gs(src_groups, 0.0);
  for (std::size_t h = 0; h < scores.size(); ++h) gs[h / per] += scores[h];
  const auto groups = top_k_ascending(gs, dst_groups);
  std::vector<std::size_t> heads;
  for (auto g : groups) {
    std::vector<double> within(scores.begin() + g * per, scores.begin() + (g + 1) * per);
    for (auto i : top_k_ascending(within, dst_heads / dst_groups)) heads.push_back(g * per + i);
  }
  return {groups, heads};
}

/// Norm-wise relative error ||numeric - analytic|| / max(||numeric||, ||analytic||)
/// of central differences over (a sample of) the elements of `param`.
template <typename F>
double max_fd_rel_error(Tensor& param, std::span<const Real> analytic, F&& f, double h = 1e-3,
                        std::size_t max_checks = 64, std::uint64_t seed = 0) {
  auto data = param.mutable_data();
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() > max_checks) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_checks);
  }
  double diff = 0, nn = 0, na = 0;
  for (auto i : idx) {
    const Real orig = data[i];
    data[i] = orig + h;
    const double up = f();
    data[i] = orig - h;
    const double down = f();
    data[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.empty() ? 0.0 : analytic[i];
    diff += (numeric - a) * (numeric - a);
    nn += numeric * numeric;
    na += a * a;
  }
  const double scale = std::sqrt(std::max(nn, na));
  return scale == 0 ? 0.0 : std::sqrt(diff) / scale;
}

}  // namespace oracle
