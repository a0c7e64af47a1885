#include "trimkit/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace trimkit::inline TRIMKIT_NS {

std::string to_string(Reduction r) {
  switch (r) {
    case Reduction::mean_abs: return "mean";
    case Reduction::l2: return "l2";
    case Reduction::variance: return "var";
  }
  return "?";
}

Reduction reduction_from_string(const std::string& name) {
  if (name == "mean" || name == "mean_abs") return Reduction::mean_abs;
  if (name == "l2") return Reduction::l2;
  if (name == "var" || name == "variance") return Reduction::variance;
  throw std::invalid_argument("unknown aggregation function '" + name + "'");
}

double reduce(std::span<const double> values, Reduction r) {
  if (values.empty()) throw std::invalid_argument("aggregation over an empty axis");
  const double n = static_cast<double>(values.size());
  switch (r) {
    case Reduction::mean_abs: {
      double acc = 0;
      for (double v : values) acc += std::abs(v);
      return acc / n;
    }
    case Reduction::l2: {
      double acc = 0;
      for (double v : values) acc += v * v;
      return std::sqrt(acc);
    }
    case Reduction::variance: {
      double mu = 0;
      for (double v : values) mu += v;
      mu /= n;
      double acc = 0;
      for (double v : values) acc += (v - mu) * (v - mu);
      return acc / n;
    }
  }
  throw std::invalid_argument("bad reduction");
}

double aggregate(std::span<const double> scores, std::size_t batch, std::size_t seq,
                 const AggregationSpec& spec) {
  if (batch == 0 || seq == 0) throw std::invalid_argument("aggregation over an empty axis");
  if (scores.size() != batch * seq) throw std::invalid_argument("aggregate: size != batch*seq");
  std::vector<double> per_row(batch);
  for (std::size_t b = 0; b < batch; ++b) per_row[b] = reduce(scores.subspan(b * seq, seq), spec.seq);
  return reduce(per_row, spec.batch);
}

namespace {

void require_captured(const Tensor& t, const char* what) {
  if (!t.defined()) throw CaptureMissing(std::string("activation record lacks ") + what);
}

// Aggregates column `col` of an [N, width] tensor.
double aggregate_column(const Tensor& t, std::size_t col, std::size_t batch, std::size_t seq,
                        const AggregationSpec& spec, std::vector<double>& scratch) {
  const auto width = t.dim(1);
  const auto data = t.data();
  scratch.resize(batch * seq);
  for (std::size_t n = 0; n < batch * seq; ++n) scratch[n] = data[n * width + col];
  return aggregate(scratch, batch, seq, spec);
}

}  // namespace

std::vector<std::vector<double>> head_scores(const Model& model, const ActivationRecord& rec,
                                             const AggregationSpec& spec) {
  const auto& cfg = model.config;
  std::vector<std::vector<double>> out(cfg.num_layers, std::vector<double>(cfg.num_heads));
  std::vector<double> per_token(rec.batch * rec.seq);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& t = rec.layers.at(l).head_out;
    require_captured(t, "per-head attention outputs");
    const auto width = t.dim(1);
    const auto data = t.data();
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      for (std::size_t n = 0; n < per_token.size(); ++n) {
        double sq = 0;
        const Real* row = data.data() + n * width + h * cfg.d_head;
        for (std::size_t d = 0; d < cfg.d_head; ++d) sq += static_cast<double>(row[d]) * row[d];
        per_token[n] = std::sqrt(sq);
      }
      out[l][h] = aggregate(per_token, rec.batch, rec.seq, spec);
    }
  }
  return out;
}

std::vector<std::vector<double>> neuron_scores(const Model& model, const ActivationRecord& rec,
                                               const AggregationSpec& spec) {
  const auto& cfg = model.config;
  std::vector<std::vector<double>> out(cfg.num_layers, std::vector<double>(cfg.d_hidden));
  std::vector<double> scratch;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& t = rec.layers.at(l).mlp_pre;
    require_captured(t, "MLP pre-activations");
    for (std::size_t i = 0; i < cfg.d_hidden; ++i) {
      out[l][i] = aggregate_column(t, i, rec.batch, rec.seq, spec, scratch);
    }
  }
  return out;
}

std::vector<double> emb_scores(const Model& model, const ActivationRecord& rec,
                               const AggregationSpec& spec) {
  const auto& cfg = model.config;
  std::vector<const Tensor*> sites;
  for (const auto& l : rec.layers) {
    sites.push_back(&l.ln1_out);
    sites.push_back(&l.ln2_out);
  }
  sites.push_back(&rec.final_ln_out);
  std::vector<double> out(cfg.d_model, 0.0);
  std::vector<double> scratch;
  for (const Tensor* site : sites) {
    require_captured(*site, "post-LayerNorm states");
    for (std::size_t c = 0; c < cfg.d_model; ++c) {
      out[c] += aggregate_column(*site, c, rec.batch, rec.seq, spec, scratch);
    }
  }
  return out;
}

namespace {

TokenBatch concat_batches(std::span<const TokenBatch> calib) {
  if (calib.empty()) throw std::invalid_argument("calibration set is empty");
  TokenBatch all{0, calib.front().seq, {}};
  for (const auto& b : calib) {
    if (b.seq != all.seq) throw std::invalid_argument("calibration batches differ in length");
    all.batch += b.batch;
    all.ids.insert(all.ids.end(), b.ids.begin(), b.ids.end());
  }
  return all;
}

}  // namespace

ActivationRecord capture_calibration(const Model& model, std::span<const TokenBatch> calib,
                                     const CaptureSpec& capture) {
  return forward(model, concat_batches(calib), {capture, {}});
}

std::vector<std::vector<double>> head_importance(const Model& model,
                                                 std::span<const TokenBatch> calib,
                                                 const AggregationSpec& spec) {
  CaptureSpec cap;
  cap.heads = true;
  return head_scores(model, capture_calibration(model, calib, cap), spec);
}

std::vector<std::vector<double>> neuron_importance(const Model& model,
                                                   std::span<const TokenBatch> calib,
                                                   const AggregationSpec& spec) {
  CaptureSpec cap;
  cap.mlp = true;
  return neuron_scores(model, capture_calibration(model, calib, cap), spec);
}

std::vector<double> emb_importance(const Model& model, std::span<const TokenBatch> calib,
                                   const AggregationSpec& spec) {
  CaptureSpec cap;
  cap.post_ln = true;
  return emb_scores(model, capture_calibration(model, calib, cap), spec);
}

std::vector<double> layer_importance_ppl(const Model& model, std::span<const TokenBatch> calib) {
  if (model.config.num_layers < 2) {
    throw std::invalid_argument("PPL layer importance needs at least two layers");
  }
  std::vector<double> out(model.config.num_layers);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = perplexity(model, calib, {i});
  return out;
}

double mean_cosine_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw ShapeError("cosine distance needs equal rank-2 shapes");
  }
  const auto rows = a.dim(0), cols = a.dim(1);
  const auto ad = a.data(), bd = b.data();
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = ad[r * cols + c], y = bd[r * cols + c];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    double cosine;
    if (na == 0 && nb == 0) {
      cosine = 1;
    } else if (na == 0 || nb == 0) {
      cosine = 0;
    } else {
      cosine = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
    }
    total += 1 - cosine;
  }
  return total / static_cast<double>(rows);
}

namespace {

ActivationRecord capture_block_inputs(const Model& model, std::span<const TokenBatch> calib) {
  CaptureSpec cap;
  cap.block_inputs = true;
  return capture_calibration(model, calib, cap);
}

}  // namespace

std::vector<double> layer_importance_bi(const Model& model, std::span<const TokenBatch> calib) {
  const auto rec = capture_block_inputs(model, calib);
  std::vector<double> out(model.config.num_layers);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = mean_cosine_distance(rec.block_inputs[i], rec.block_inputs[i + 1]);
  }
  return out;
}

double block_bi(const Model& model, std::span<const TokenBatch> calib, std::size_t start,
                std::size_t length) {
  if (length == 0 || start + length > model.config.num_layers) {
    throw std::out_of_range("block [" + std::to_string(start) + ", " +
                            std::to_string(start + length) + ") outside " +
                            std::to_string(model.config.num_layers) + " layers");
  }
  const auto rec = capture_block_inputs(model, calib);
  return mean_cosine_distance(rec.block_inputs[start], rec.block_inputs[start + length]);
}

std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

std::uint64_t calibration_checksum(std::span<const TokenBatch> calib) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& b : calib) {
    for (auto id : b.ids) {
      for (int byte = 0; byte < 4; ++byte) {
        h ^= (id >> (8 * byte)) & 0xffU;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

ImportanceReport compute_importance(const Model& model, std::span<const TokenBatch> calib,
                                    const ImportanceOptions& options) {
  ImportanceReport report;
  report.agg_used = options.agg;
  report.calibration_checksum = calibration_checksum(calib);
  for (const auto& b : calib) report.calibration_tokens += b.ids.size();

  CaptureSpec cap;
  cap.heads = cap.mlp = cap.post_ln = options.width;
  cap.block_inputs = options.bi || !options.blocks.empty();
  const auto rec = capture_calibration(model, calib, cap);
  if (options.width) {
    report.head_scores = head_scores(model, rec, options.agg);
    report.neuron_scores = neuron_scores(model, rec, options.agg);
    report.emb_scores = emb_scores(model, rec, options.agg);
  }
  if (options.bi) {
    for (std::size_t i = 0; i < model.config.num_layers; ++i) {
      report.layer_scores_bi.push_back(
          mean_cosine_distance(rec.block_inputs[i], rec.block_inputs[i + 1]));
    }
  }
  for (auto [start, length] : options.blocks) {
    if (length == 0 || start + length > model.config.num_layers) {
      throw std::out_of_range("block BI range outside the model");
    }
    report.block_bi[{start, length}] =
        mean_cosine_distance(rec.block_inputs[start], rec.block_inputs[start + length]);
  }
  if (options.ppl) report.layer_scores_ppl = layer_importance_ppl(model, calib);
  return report;
}

}  // namespace trimkit
