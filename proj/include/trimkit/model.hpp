#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "trimkit/tensor.hpp"

namespace trimkit::inline TRIMKIT_NS {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Architecture hyperparameters. The attention inner width is num_heads * d_head,
/// independent of d_model.
struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t d_model = 64;
  std::size_t num_heads = 8;
  std::size_t num_query_groups = 2;
  std::size_t d_head = 8;
  std::size_t d_hidden = 256;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;
  bool tie_embeddings = false;

  void validate() const;
  std::size_t heads_per_group() const { return num_heads / num_query_groups; }
  bool operator==(const ModelConfig&) const = default;
};

std::string describe(const ModelConfig& config);

/// Largest divisor of `heads` that is <= `preferred`.
std::size_t fit_query_groups(std::size_t heads, std::size_t preferred);

struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;  // [d_model]
  Tensor wq;                   // [heads*d_head, d_model]
  Tensor wk, wv;               // [groups*d_head, d_model]
  Tensor wo;                   // [heads*d_head, d_model]
  Tensor ln2_gamma, ln2_beta;  // [d_model]
  Tensor w1;                   // [d_hidden, d_model]
  Tensor w2;                   // [d_hidden, d_model]
};

/// Pre-norm decoder-only transformer:
///   x += MHA(LN1(x)) ; x += MLP(LN2(x)) ; logits = LNf(x) * head^T
/// with MLP(h) = relu(h W1^T)^2 W2 and rotary positions on queries/keys.
class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig config);  // zero-filled, shapes only
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  ModelConfig config;
  Tensor embedding;  // [vocab, d_model]
  std::vector<LayerWeights> layers;
  Tensor lnf_gamma, lnf_beta;
  Tensor output_head;  // [vocab, d_model]; undefined when tied

  const Tensor& head() const { return config.tie_embeddings ? embedding : output_head; }

  /// Every tensor with a stable name, in checkpoint order.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<Tensor> parameters() const;
  void set_trainable(bool trainable);
  void zero_grad();
  /// Throws ConfigError if any tensor extent disagrees with `config`.
  void validate() const;
};

/// Weights ~ N(0, 0.02) for embeddings and projections, LN gamma=1 beta=0.
Model build_model(const ModelConfig& config, std::uint64_t seed);

/// Row-major [batch, seq] token ids.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint32_t> ids;

  std::uint32_t at(std::size_t b, std::size_t s) const { return ids[b * seq + s]; }
  /// Inputs tokens[:, :-1] and targets tokens[:, 1:].
  std::pair<TokenBatch, std::vector<std::uint32_t>> shifted() const;
};

struct CaptureSpec {
  bool heads = false;         // per-head attention outputs before W^O
  bool mlp = false;           // X W1^T before and after the nonlinearity
  bool post_ln = false;       // every LayerNorm output
  bool block_inputs = false;  // residual stream entering each block (+ final)
  bool qkv = false;           // query/key/value projections (before rotary)

  static CaptureSpec all() { return {true, true, true, true, true}; }
};

struct LayerRecord {
  Tensor head_out;           // [N, heads*d_head]
  Tensor mlp_pre, mlp_post;  // [N, d_hidden]
  Tensor ln1_out, ln2_out;   // [N, d_model]
  Tensor q, k, v;
};

/// Activations of one forward pass; N = batch*seq rows.
struct ActivationRecord {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<LayerRecord> layers;
  std::vector<Tensor> block_inputs;  // num_layers + 1 entries when captured
  Tensor final_ln_out;               // captured with post_ln
  Tensor logits;                     // [N, vocab]
};

struct ForwardOptions {
  CaptureSpec capture{};
  /// Layers treated as absent (residual passes straight through).
  std::vector<std::size_t> skip_layers{};
};

ActivationRecord forward(const Model& model, const TokenBatch& tokens,
                         const ForwardOptions& options = {});

/// Mean next-token cross-entropy over the batch.
Tensor lm_loss(const Model& model, const TokenBatch& batch,
               const std::vector<std::size_t>& skip_layers = {});

struct EvalResult {
  double mean_nll = 0;
  std::size_t tokens = 0;
  double perplexity() const;
};

/// Token-weighted next-token NLL over a set of batches; no gradient state.
EvalResult evaluate(const Model& model, std::span<const TokenBatch> data,
                    const std::vector<std::size_t>& skip_layers = {});
double perplexity(const Model& model, std::span<const TokenBatch> data,
                  const std::vector<std::size_t>& skip_layers = {});

struct ParamCount {
  std::uint64_t total = 0;
  std::uint64_t non_embedding = 0;
};

/// Embedding tables (input, plus output head when untied) are the only
/// embedding parameters; LayerNorm parameters count as non-embedding.
ParamCount count_params(const ModelConfig& config);

/// 6 * parameters * tokens training-step estimate.
double count_flops_per_step(const ModelConfig& config, std::size_t batch, std::size_t seq);

}  // namespace trimkit
