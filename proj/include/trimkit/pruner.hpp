#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "trimkit/importance.hpp"
#include "trimkit/model.hpp"

namespace trimkit::inline TRIMKIT_NS {

struct PruneOptions {
  bool merge_residual_heads = false;
};

/// Keeps the top-ranked embedding channels (one global set), the top-ranked
/// query groups and heads within groups, and the top-ranked MLP neurons of
/// every layer. Kept units stay in their original relative order.
/// `target` must match the source on layers, vocabulary, d_head and tying.
Model prune_width(const Model& model, const ModelConfig& target, const ImportanceReport& report,
                  const PruneOptions& options = {});

/// Folds pruned-head residuals into kept heads. `ranked_heads` lists L head
/// indices by descending importance, of which the first K survive; for
/// i in [max(1, 2K-L+1), K] (1-based) head i becomes 2*W_i - W_{2K-i+1}.
/// Only W^Q slices change unless `mha` is set, in which case the matching
/// W^K/W^V slices and W^O rows are merged the same way.
void merge_residual_heads(LayerWeights& layer, std::size_t d_head,
                          std::span<const std::size_t> ranked_heads, std::size_t keep, bool mha);

/// Removes the listed blocks; the residual stream runs straight through.
Model prune_depth(const Model& model, std::span<const std::size_t> layer_indices);

enum class DepthMetric { ppl, bi };

struct CandidateOptions {
  DepthMetric depth_metric = DepthMetric::bi;
  bool merge_residual_heads = false;
};

/// Layers with the lowest scores under `metric`, ascending index order.
std::vector<std::size_t> least_important_layers(const ImportanceReport& report,
                                                std::size_t count, DepthMetric metric);

/// prune_depth (least important layers) followed by prune_width to `candidate`.
Model apply_candidate(const Model& model, const ModelConfig& candidate,
                      const ImportanceReport& report, const CandidateOptions& options = {});

/// Per-axis width targets for iterative pruning; unset axes are left alone.
struct WidthTargets {
  std::optional<std::size_t> heads;
  std::optional<std::size_t> d_hidden;
  std::optional<std::size_t> d_model;
};

/// T rounds of (score on the current model, prune one step-size on each axis),
/// stepping d_s - (i+1)(d_s - d_t)/T. T=1 is single-shot pruning.
Model iterative_importance(const Model& model, std::span<const TokenBatch> calib,
                           const WidthTargets& targets, std::size_t rounds,
                           const AggregationSpec& spec = {}, const PruneOptions& options = {});

}  // namespace trimkit
