#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trimkit/model.hpp"

namespace trimkit::inline TRIMKIT_NS {

enum class LogitLoss { kld, rkld, mse, cosine };
enum class StateLoss { cosine, mse };
/// emb: embedding output; o: block output; i: MLP input; att: q/k/v self-relations.
enum class StateComponent { emb, o, i, att };

std::string to_string(LogitLoss v);
std::string to_string(StateLoss v);
std::string to_string(StateComponent v);
LogitLoss logit_loss_from_string(const std::string& s);
StateLoss state_loss_from_string(const std::string& s);
StateComponent state_component_from_string(const std::string& s);

struct LayerPair {
  std::size_t teacher = 0;
  std::size_t student = 0;
  bool operator==(const LayerPair&) const = default;
};

struct AlphaMode {
  bool dynamic = true;
  double constant = 1.0;
  static AlphaMode fixed(double c) { return {false, c}; }
  bool operator==(const AlphaMode&) const = default;
};

struct DistillConfig {
  bool use_logits = true;
  LogitLoss logit_loss = LogitLoss::kld;
  double temperature = 1.0;
  std::optional<std::size_t> top_k;
  bool use_clm = false;
  std::vector<StateComponent> is_components;
  std::vector<LayerPair> layer_map;
  StateLoss is_loss = StateLoss::cosine;
  AlphaMode alpha{};

  void validate(const ModelConfig& teacher, const ModelConfig& student) const;
  bool operator==(const DistillConfig&) const = default;
};

/// Defaults: logit-only KLD at tau=1; when the student drops more than a quarter
/// of the teacher's layers, add L_o on the (last-2):(last-2) pair and L_emb.
DistillConfig default_distill_config(const ModelConfig& teacher, const ModelConfig& student);

struct DistillError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Row-wise softmax(logits / tau).
Tensor softmax_t(const Tensor& logits, double tau);

/// Per-token divergence between teacher and student distributions, averaged
/// over rows. The teacher side is treated as a constant.
Tensor logit_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                  const DistillConfig& cfg);

/// Trainable student -> teacher width map shared by every intermediate state.
struct SharedProjection {
  Tensor weight;  // [d_student, d_teacher]

  /// Student channel j maps to teacher channel j.
  static SharedProjection identity(std::size_t d_student, std::size_t d_teacher);
  /// Student channel j maps to teacher channel `teacher_channel[j]`.
  static SharedProjection from_channels(std::span<const std::size_t> teacher_channel,
                                        std::size_t d_teacher);
  Tensor apply(const Tensor& student_state) const;
};

CaptureSpec distill_capture(const DistillConfig& cfg);

/// Mean over rows of (1 - cos(a_r, b_r)); b is constant.
Tensor row_cosine_distance(const Tensor& a, const Tensor& b);
/// Mean over rows of mean squared channel error; b is constant.
Tensor row_mse(const Tensor& a, const Tensor& b);
/// Self-relation distillation: for each of `heads` contiguous channel slices
/// and each sequence, rows of softmax(A A^T / sqrt(width)) over visible (causal)
/// positions; KL(teacher || student) averaged over rows and heads.
Tensor relation_kld(const Tensor& student_state, const Tensor& teacher_state, std::size_t batch,
                    std::size_t seq, std::size_t heads);

std::size_t relation_heads(const ModelConfig& teacher, const ModelConfig& student);

/// Sum over components and mapped layer pairs of per-token losses between the
/// projected student state and the teacher state (all post-LayerNorm).
Tensor intermediate_loss(const ActivationRecord& teacher, const ActivationRecord& student,
                         const SharedProjection& projection, const DistillConfig& cfg,
                         const ModelConfig& teacher_config, const ModelConfig& student_config);

struct LossBreakdown {
  Tensor total;
  double clm = 0;
  double logits = 0;
  double is = 0;
  double alpha = 0;
  double weighted_is = 0;  // the alpha * L_is term as it enters the total
  bool alpha_forced_zero = false;
};

/// L = L_CLM + L_logits + alpha * L_is. Dynamic alpha = L_logits / L_is is a
/// per-step constant; the weighted term's value is exactly L_logits.
LossBreakdown total_loss(const Model& teacher, const Model& student, const TokenBatch& batch,
                         const DistillConfig& cfg, const SharedProjection& projection);

/// alpha * x with the forward value pinned to `target` (= alpha * x up to rounding).
Tensor rescale_to(const Tensor& x, double alpha, double target);

// ---- training --------------------------------------------------------------

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::size_t seq_len = 33;  // tokens per sample, before the next-token shift
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  std::size_t warmup_steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: evaluate only after the last step
  std::string divergence_dump;  // checkpoint path written when loss turns non-finite

  bool operator==(const TrainConfig&) const = default;
};

/// Linear warmup, then cosine decay from lr_max to lr_min over the remaining steps.
class CosineSchedule {
 public:
  CosineSchedule(double lr_max, double lr_min, std::size_t total_steps, std::size_t warmup = 0);
  double lr(std::size_t step) const;

 private:
  double lr_max_, lr_min_;
  std::size_t total_, warmup_;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay);
  /// Applies one update from the accumulated grads, then clears them.
  void step(double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
};

/// Scales grads so their global L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0;
  double total = 0;
  double clm = 0;
  double logits = 0;
  double is = 0;
  double alpha = 0;
  double weighted_is = 0;
  std::uint64_t tokens = 0;
};

struct EvalPoint {
  std::size_t step = 0;
  double loss = 0;
};

struct TrainResult {
  Model student;
  SharedProjection projection;
  std::vector<StepMetrics> metrics;
  std::vector<EvalPoint> evals;
  double final_eval_loss() const { return evals.empty() ? 0.0 : evals.back().loss; }
};

struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& what, StepMetrics last) : std::runtime_error(what), last(last) {}
  StepMetrics last;
};

/// Returns the training batch for a step.
using BatchSource = std::function<TokenBatch(std::size_t step)>;
using MetricsSink = std::function<void(const StepMetrics&)>;

/// Trains `student` against the frozen `teacher` with Adam and cosine decay.
TrainResult distill_loop(const Model& teacher, Model student, const BatchSource& data,
                         std::span<const TokenBatch> eval_set, const DistillConfig& cfg,
                         const TrainConfig& train,
                         std::optional<SharedProjection> projection = std::nullopt,
                         const MetricsSink& sink = {});

/// The same loop driven by L_CLM only.
TrainResult conventional_loop(Model student, const BatchSource& data,
                              std::span<const TokenBatch> eval_set, const TrainConfig& train,
                              const MetricsSink& sink = {});

}  // namespace trimkit
