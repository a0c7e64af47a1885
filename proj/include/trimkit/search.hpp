#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "trimkit/distill.hpp"
#include "trimkit/importance.hpp"
#include "trimkit/pruner.hpp"
#include "trimkit/serialize.hpp"

namespace trimkit::inline TRIMKIT_NS {

struct SearchSpace {
  std::pair<std::size_t, std::size_t> layer_range{1, 1};  // inclusive
  std::vector<std::size_t> head_choices;
  std::vector<double> mlp_expansion_factors;
  std::vector<std::size_t> embedding_choices;
  std::size_t d_head = 128;
  std::size_t vocab = 256000;
  bool tie_embeddings = false;
  std::size_t query_groups = 8;
  std::size_t hidden_multiple = 128;  // d_hidden snaps to the nearest multiple
  std::size_t max_seq_len = 4096;

  void validate() const;
};

enum class CountMode { total, non_embedding };
std::string to_string(CountMode m);
CountMode count_mode_from_string(const std::string& s);

struct Candidate {
  ModelConfig config;
  ParamCount params;
  std::optional<double> eval_loss;  // set by rank_candidates
  std::vector<EvalPoint> trajectory;
};

struct CandidateSet {
  double budget = 0;
  double tolerance = 0;
  CountMode mode = CountMode::total;
  std::vector<Candidate> candidates;
};

/// round(factor * embedding) snapped to the nearest multiple (never below one multiple).
std::size_t snap_hidden(double factor, std::size_t embedding, std::size_t multiple);

/// Model config for one grid point.
ModelConfig candidate_config(const SearchSpace& space, std::size_t layers, std::size_t heads,
                             double factor, std::size_t embedding);

std::uint64_t counted_params(const ModelConfig& config, CountMode mode);

/// Every grid point with |count - budget| <= tolerance * budget, ordered by
/// layers desc, heads asc, embedding desc, d_hidden asc. Duplicates after
/// snapping are dropped.
CandidateSet enumerate_candidates(const SearchSpace& space, double budget, double tolerance,
                                  CountMode mode = CountMode::total);

struct RankOptions {
  CandidateOptions prune{};
  DistillConfig distill{};
  TrainConfig train{};  // train.steps is the retraining length; eval_every sets the trajectory
};

/// Prunes each candidate from `model`, retrains it identically and sorts by the
/// final eval loss (ties: lower count, then config order).
CandidateSet rank_candidates(const Model& model, CandidateSet candidates, const ImportanceReport& report,
                             const BatchSource& data, std::span<const TokenBatch> eval_set,
                             const RankOptions& options);

/// Candidate indices sorted by eval loss at trajectory step `step`.
std::vector<std::size_t> ranking_at(const CandidateSet& set, std::size_t step);

/// Lexicographic key used for deterministic ordering.
bool config_less(const ModelConfig& a, const ModelConfig& b);

Json to_json(const SearchSpace& s);
SearchSpace search_space_from_json(const Json& j);
Json to_json(const CandidateSet& set);
CandidateSet candidate_set_from_json(const Json& j);

/// The published 8B search grid (embedding "4680" read as 4608) under the calibrated counting assumptions.
SearchSpace reference_8b_space();
inline constexpr double kCalibrated8bBudget = 8.15e9;
inline constexpr double kCalibrated8bTolerance = 0.045;

}  // namespace trimkit
