#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>

#include "trimkit/dataset.hpp"
#include "trimkit/distill.hpp"
#include "trimkit/search.hpp"

namespace trimkit::inline TRIMKIT_NS {

/// Training batches keyed by step: batch(step) depends only on (seed, step).
/// `ds` must outlive the returned source.
BatchSource window_source(const TokenDataset& ds, Split split, std::size_t batch, std::size_t seq_len,
                          std::uint64_t seed);

/// The declarative experiment file shared by every CLI command.
struct PipelineConfig {
  ModelConfig model{};
  TrainConfig train{};
  DistillConfig distill{};
  bool distill_defaults = true;  // derive is_components/layer_map from the teacher/student depth
  AggregationSpec agg{};
  std::size_t calib_samples = 64;
  std::size_t eval_batches = 4;
  CandidateOptions prune{};
  std::optional<SearchSpace> search;
  double budget = 0;
  double tolerance = 0.05;
  CountMode count_mode = CountMode::total;
  std::size_t search_retrain_steps = 100;

  bool operator==(const PipelineConfig&) const;
};

Json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const Json& j);

/// Applies "a.b.c=value" overrides to a JSON document; value is parsed as JSON
/// when possible, else taken as a string.
void apply_override(Json& doc, const std::string& assignment);

}  // namespace trimkit
