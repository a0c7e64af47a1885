#include "trimkit/pruner.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

namespace trimkit::inline TRIMKIT_NS {

namespace {

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Top `keep` indices by descending score, returned in ascending index order.
std::vector<std::size_t> top_sorted(std::span<const double> scores, std::size_t keep) {
  auto order = rank_descending(scores);
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

// Expand unit indices into the row indices of `block`-row slices.
std::vector<std::size_t> expand_blocks(std::span<const std::size_t> units, std::size_t block) {
  std::vector<std::size_t> rows;
  rows.reserve(units.size() * block);
  for (auto u : units) {
    for (std::size_t r = 0; r < block; ++r) rows.push_back(u * block + r);
  }
  return rows;
}

Tensor gather(const Tensor& t, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  const auto width = t.dim(1);
  const auto src = t.data();
  std::vector<Real> out(rows.size() * cols.size());
  std::size_t k = 0;
  for (auto r : rows) {
    for (auto c : cols) out[k++] = src[r * width + c];
  }
  return Tensor({rows.size(), cols.size()}, std::move(out), t.requires_grad());
}

Tensor gather_vector(const Tensor& t, std::span<const std::size_t> idx) {
  const auto src = t.data();
  std::vector<Real> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(src[i]);
  return Tensor({idx.size()}, std::move(out), t.requires_grad());
}

void check_report_axis(std::size_t have, std::size_t need, const std::string& what) {
  if (have != need) {
    throw std::invalid_argument("importance report lacks " + what + " (have " +
                                std::to_string(have) + ", need " + std::to_string(need) + ")");
  }
}

// dst_rows <- 2 * dst_rows - src_rows for a block of rows in a [rows, cols] tensor.
void merge_rows(Tensor& t, std::size_t dst, std::size_t src, std::size_t block) {
  const auto width = t.dim(1);
  auto data = t.mutable_data();
  for (std::size_t r = 0; r < block; ++r) {
    Real* d = data.data() + (dst * block + r) * width;
    const Real* s = data.data() + (src * block + r) * width;
    for (std::size_t c = 0; c < width; ++c) d[c] = d[c] + (d[c] - s[c]);
  }
}

}  // namespace

void merge_residual_heads(LayerWeights& layer, std::size_t d_head,
                          std::span<const std::size_t> ranked_heads, std::size_t keep, bool mha) {
  const std::size_t total = ranked_heads.size();
  if (keep >= total) {
    throw std::invalid_argument("residual head merge needs K < L (K=" + std::to_string(keep) +
                                ", L=" + std::to_string(total) + ")");
  }
  if (keep == 0) return;
  const std::size_t first = 2 * keep + 1 > total ? 2 * keep + 1 - total : 1;
  for (std::size_t i = first; i <= keep; ++i) {
    const std::size_t partner = 2 * keep - i + 1;  // 1-based, in (K, min(2K, L)]
    if (partner > total || partner <= keep) {
      throw std::out_of_range("residual head merge partner out of range");
    }
    const auto dst = ranked_heads[i - 1];
    const auto src = ranked_heads[partner - 1];
    merge_rows(layer.wq, dst, src, d_head);
    if (mha) {
      merge_rows(layer.wk, dst, src, d_head);
      merge_rows(layer.wv, dst, src, d_head);
      merge_rows(layer.wo, dst, src, d_head);
    }
  }
}

Model prune_width(const Model& model, const ModelConfig& target, const ImportanceReport& report,
                  const PruneOptions& options) {
  const auto& src = model.config;
  target.validate();
  if (target.num_layers != src.num_layers || target.vocab_size != src.vocab_size ||
      target.d_head != src.d_head || target.tie_embeddings != src.tie_embeddings) {
    throw std::invalid_argument("width pruning cannot change layers, vocabulary, d_head or tying");
  }
  if (target.d_model > src.d_model || target.d_hidden > src.d_hidden ||
      target.num_heads > src.num_heads || target.num_query_groups > src.num_query_groups) {
    throw std::invalid_argument("target exceeds source: " + describe(target) + " vs " +
                                describe(src));
  }
  if (target.heads_per_group() > src.heads_per_group()) {
    throw std::invalid_argument("target needs more heads per query group than the source has");
  }
  if (target == src && !options.merge_residual_heads) return model;

  const bool prune_emb = target.d_model < src.d_model;
  const bool prune_heads = target.num_heads < src.num_heads;
  const bool prune_neurons = target.d_hidden < src.d_hidden;
  if (prune_emb) check_report_axis(report.emb_scores.size(), src.d_model, "embedding scores");
  if (prune_heads) {
    check_report_axis(report.head_scores.size(), src.num_layers, "head scores");
    for (const auto& h : report.head_scores) check_report_axis(h.size(), src.num_heads, "head scores");
  }
  if (prune_neurons) {
    check_report_axis(report.neuron_scores.size(), src.num_layers, "neuron scores");
    for (const auto& n : report.neuron_scores) check_report_axis(n.size(), src.d_hidden, "neuron scores");
  }

  const auto channels = prune_emb ? top_sorted(report.emb_scores, target.d_model) : iota_vec(src.d_model);
  const bool mha = src.num_query_groups == src.num_heads;

  Model out;
  out.config = target;
  out.embedding = gather(model.embedding, iota_vec(src.vocab_size), channels);
  out.lnf_gamma = gather_vector(model.lnf_gamma, channels);
  out.lnf_beta = gather_vector(model.lnf_beta, channels);
  if (!src.tie_embeddings) out.output_head = gather(model.output_head, iota_vec(src.vocab_size), channels);

  const std::size_t src_per_group = src.heads_per_group();
  const std::size_t dst_per_group = target.heads_per_group();
  for (std::size_t l = 0; l < src.num_layers; ++l) {
    LayerWeights w = model.layers[l];
    if (options.merge_residual_heads && prune_heads) {
      // merge mutates; work on private copies of the attention weights
      w.wq = w.wq.clone();
      w.wk = w.wk.clone();
      w.wv = w.wv.clone();
      w.wo = w.wo.clone();
    }
    std::vector<std::size_t> heads = iota_vec(src.num_heads);
    std::vector<std::size_t> groups = iota_vec(src.num_query_groups);
    if (prune_heads) {
      const auto& scores = report.head_scores[l];
      std::vector<double> group_scores(src.num_query_groups, 0.0);
      for (std::size_t h = 0; h < src.num_heads; ++h) group_scores[h / src_per_group] += scores[h];
      groups = top_sorted(group_scores, target.num_query_groups);
      heads.clear();
      if (mha) {
        // Every head is its own group: a single global ranking.
        heads = groups;
        if (options.merge_residual_heads && target.num_heads < src.num_heads) {
          merge_residual_heads(w, src.d_head, rank_descending(scores), target.num_heads, true);
        }
      } else {
        for (auto g : groups) {
          std::vector<double> within(scores.begin() + g * src_per_group,
                                     scores.begin() + (g + 1) * src_per_group);
          auto ranked_local = rank_descending(within);
          if (options.merge_residual_heads && dst_per_group < src_per_group) {
            std::vector<std::size_t> ranked_global;
            for (auto r : ranked_local) ranked_global.push_back(g * src_per_group + r);
            merge_residual_heads(w, src.d_head, ranked_global, dst_per_group, false);
          }
          ranked_local.resize(dst_per_group);
          std::sort(ranked_local.begin(), ranked_local.end());
          for (auto r : ranked_local) heads.push_back(g * src_per_group + r);
        }
      }
    }
    const auto neurons =
        prune_neurons ? top_sorted(report.neuron_scores[l], target.d_hidden) : iota_vec(src.d_hidden);
    const auto head_rows = expand_blocks(heads, src.d_head);
    const auto group_rows = expand_blocks(groups, src.d_head);

    LayerWeights n;
    n.ln1_gamma = gather_vector(w.ln1_gamma, channels);
    n.ln1_beta = gather_vector(w.ln1_beta, channels);
    n.wq = gather(w.wq, head_rows, channels);
    n.wk = gather(w.wk, group_rows, channels);
    n.wv = gather(w.wv, group_rows, channels);
    n.wo = gather(w.wo, head_rows, channels);
    n.ln2_gamma = gather_vector(w.ln2_gamma, channels);
    n.ln2_beta = gather_vector(w.ln2_beta, channels);
    n.w1 = gather(w.w1, neurons, channels);
    n.w2 = gather(w.w2, neurons, channels);
    out.layers.push_back(std::move(n));
  }
  out.validate();
  return out;
}

Model prune_depth(const Model& model, std::span<const std::size_t> layer_indices) {
  const auto n = model.config.num_layers;
  std::set<std::size_t> remove(layer_indices.begin(), layer_indices.end());
  if (remove.size() != layer_indices.size()) throw std::invalid_argument("duplicate layer index");
  for (auto i : remove) {
    if (i >= n) {
      throw std::out_of_range("layer " + std::to_string(i) + " outside " + std::to_string(n) +
                              " layers");
    }
  }
  if (remove.size() >= n) throw std::invalid_argument("depth pruning must keep at least one layer");
  if (remove.empty()) return model;
  Model out = model;
  std::vector<LayerWeights> kept;
  for (std::size_t i = 0; i < n; ++i) {
    if (!remove.contains(i)) kept.push_back(out.layers[i]);
  }
  out.layers = std::move(kept);
  out.config.num_layers = out.layers.size();
  return out;
}

std::vector<std::size_t> least_important_layers(const ImportanceReport& report,
                                                std::size_t count, DepthMetric metric) {
  const auto& scores = metric == DepthMetric::ppl ? report.layer_scores_ppl : report.layer_scores_bi;
  if (count > scores.size()) {
    throw std::invalid_argument(std::string("importance report lacks ") +
                                (metric == DepthMetric::ppl ? "PPL" : "BI") + " layer scores");
  }
  auto order = rank_descending(scores);
  std::vector<std::size_t> out(order.end() - static_cast<std::ptrdiff_t>(count), order.end());
  std::sort(out.begin(), out.end());
  return out;
}

Model apply_candidate(const Model& model, const ModelConfig& candidate,
                      const ImportanceReport& report, const CandidateOptions& options) {
  candidate.validate();
  const auto& src = model.config;
  if (candidate.num_layers > src.num_layers) {
    throw std::invalid_argument("candidate has more layers than the source model");
  }
  Model depth_pruned = model;
  ImportanceReport width_report = report;
  if (candidate.num_layers < src.num_layers) {
    const auto removed =
        least_important_layers(report, src.num_layers - candidate.num_layers, options.depth_metric);
    depth_pruned = prune_depth(model, removed);
    auto keep_rows = [&](std::vector<std::vector<double>>& per_layer) {
      if (per_layer.empty()) return;
      std::vector<std::vector<double>> kept;
      for (std::size_t i = 0; i < per_layer.size(); ++i) {
        if (!std::binary_search(removed.begin(), removed.end(), i)) kept.push_back(per_layer[i]);
      }
      per_layer = std::move(kept);
    };
    keep_rows(width_report.head_scores);
    keep_rows(width_report.neuron_scores);
  }
  return prune_width(depth_pruned, candidate, width_report, {options.merge_residual_heads});
}

Model iterative_importance(const Model& model, std::span<const TokenBatch> calib,
                           const WidthTargets& targets, std::size_t rounds,
                           const AggregationSpec& spec, const PruneOptions& options) {
  if (rounds == 0) throw std::invalid_argument("iterative pruning needs T >= 1");
  const auto& src = model.config;
  auto step_for = [&](std::optional<std::size_t> target, std::size_t source, const char* axis) {
    if (!target) return std::size_t{0};
    if (*target > source) {
      throw std::invalid_argument(std::string("target ") + axis + " exceeds source");
    }
    if ((source - *target) % rounds != 0) {
      throw std::invalid_argument(std::string("(source - target) ") + axis +
                                  " is not divisible by T=" + std::to_string(rounds));
    }
    return (source - *target) / rounds;
  };
  const auto head_step = step_for(targets.heads, src.num_heads, "heads");
  const auto hidden_step = step_for(targets.d_hidden, src.d_hidden, "d_hidden");
  const auto emb_step = step_for(targets.d_model, src.d_model, "d_model");

  Model current = model;
  ImportanceOptions opts;
  opts.agg = spec;
  opts.bi = false;
  for (std::size_t i = 0; i < rounds; ++i) {
    ModelConfig next = current.config;
    next.num_heads = src.num_heads - (i + 1) * head_step;
    next.d_hidden = src.d_hidden - (i + 1) * hidden_step;
    next.d_model = src.d_model - (i + 1) * emb_step;
    next.num_query_groups = fit_query_groups(next.num_heads, current.config.num_query_groups);
    const auto report = compute_importance(current, calib, opts);
    current = prune_width(current, next, report, options);
  }
  return current;
}

}  // namespace trimkit
