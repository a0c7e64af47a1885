#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "trimkit/model.hpp"

namespace trimkit::inline TRIMKIT_NS {

enum class Reduction { mean_abs, l2, variance };

std::string to_string(Reduction r);
Reduction reduction_from_string(const std::string& name);

/// How per-token scores collapse to one value per unit: `seq` reduces each
/// batch row over the sequence, then `batch` reduces the resulting B values.
struct AggregationSpec {
  Reduction batch = Reduction::l2;
  Reduction seq = Reduction::mean_abs;
  bool operator==(const AggregationSpec&) const = default;
};

double reduce(std::span<const double> values, Reduction r);

/// scores is row-major [batch, seq].
double aggregate(std::span<const double> scores, std::size_t batch, std::size_t seq,
                 const AggregationSpec& spec);

struct CaptureMissing : std::logic_error {
  using std::logic_error::logic_error;
};

// Width scores from an already-captured record. Heads and neurons are scored
// per layer; embedding channels are summed over all LayerNorm sites.
std::vector<std::vector<double>> head_scores(const Model& model, const ActivationRecord& rec,
                                             const AggregationSpec& spec);
std::vector<std::vector<double>> neuron_scores(const Model& model, const ActivationRecord& rec,
                                               const AggregationSpec& spec);
std::vector<double> emb_scores(const Model& model, const ActivationRecord& rec,
                               const AggregationSpec& spec);

/// Calibration batches are concatenated along the batch axis (all must share seq).
ActivationRecord capture_calibration(const Model& model, std::span<const TokenBatch> calib,
                                     const CaptureSpec& capture);

std::vector<std::vector<double>> head_importance(const Model& model,
                                                 std::span<const TokenBatch> calib,
                                                 const AggregationSpec& spec = {});
std::vector<std::vector<double>> neuron_importance(const Model& model,
                                                   std::span<const TokenBatch> calib,
                                                   const AggregationSpec& spec = {});
std::vector<double> emb_importance(const Model& model, std::span<const TokenBatch> calib,
                                   const AggregationSpec& spec = {});

/// score[i] = perplexity with layer i removed (higher = more important).
std::vector<double> layer_importance_ppl(const Model& model, std::span<const TokenBatch> calib);
/// BI_i = 1 - E[cos(X_i, X_{i+1})] over every (sample, token) row.
std::vector<double> layer_importance_bi(const Model& model, std::span<const TokenBatch> calib);
double block_bi(const Model& model, std::span<const TokenBatch> calib, std::size_t start,
                std::size_t length);
/// Mean cosine distance between corresponding rows of two [N, d] states.
/// A zero row against a zero row counts as identical; against a non-zero row as orthogonal.
double mean_cosine_distance(const Tensor& a, const Tensor& b);

struct ImportanceOptions {
  AggregationSpec agg{};
  bool width = true;
  bool ppl = false;
  bool bi = true;
  /// (start, length) blocks to score with block BI.
  std::vector<std::pair<std::size_t, std::size_t>> blocks{};
};

struct ImportanceReport {
  std::vector<std::vector<double>> head_scores;    // [layer][head]
  std::vector<std::vector<double>> neuron_scores;  // [layer][channel]
  std::vector<double> emb_scores;                  // [channel]
  std::vector<double> layer_scores_ppl;            // [layer]
  std::vector<double> layer_scores_bi;             // [layer]
  std::map<std::pair<std::size_t, std::size_t>, double> block_bi;
  AggregationSpec agg_used{};
  std::uint64_t calibration_checksum = 0;
  std::size_t calibration_tokens = 0;
};

/// One capture pass for all width axes and BI; PPL adds one sweep per layer.
ImportanceReport compute_importance(const Model& model, std::span<const TokenBatch> calib,
                                    const ImportanceOptions& options = {});

/// Indices sorted by descending score; ties keep the lower index first.
std::vector<std::size_t> rank_descending(std::span<const double> scores);

/// FNV-1a over the calibration token ids.
std::uint64_t calibration_checksum(std::span<const TokenBatch> calib);

}  // namespace trimkit
