#include "trimkit/distill.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "trimkit/checkpoint.hpp"

namespace trimkit::inline TRIMKIT_NS {

std::string to_string(LogitLoss v) {
  switch (v) {
    case LogitLoss::kld: return "kld";
    case LogitLoss::rkld: return "rkld";
    case LogitLoss::mse: return "mse";
    case LogitLoss::cosine: return "cosine";
  }
  return "?";
}

std::string to_string(StateLoss v) { return v == StateLoss::cosine ? "cosine" : "mse"; }

std::string to_string(StateComponent v) {
  switch (v) {
    case StateComponent::emb: return "emb";
    case StateComponent::o: return "o";
    case StateComponent::i: return "i";
    case StateComponent::att: return "att";
  }
  return "?";
}

LogitLoss logit_loss_from_string(const std::string& s) {
  if (s == "kld") return LogitLoss::kld;
  if (s == "rkld") return LogitLoss::rkld;
  if (s == "mse") return LogitLoss::mse;
  if (s == "cosine") return LogitLoss::cosine;
  throw DistillError("unknown logit loss '" + s + "'");
}

StateLoss state_loss_from_string(const std::string& s) {
  if (s == "cosine") return StateLoss::cosine;
  if (s == "mse") return StateLoss::mse;
  throw DistillError("unknown intermediate-state loss '" + s + "'");
}

StateComponent state_component_from_string(const std::string& s) {
  if (s == "emb") return StateComponent::emb;
  if (s == "o") return StateComponent::o;
  if (s == "i") return StateComponent::i;
  if (s == "att") return StateComponent::att;
  throw DistillError("unknown intermediate-state component '" + s + "'");
}

void DistillConfig::validate(const ModelConfig& teacher, const ModelConfig& student) const {
  if (!(temperature > 0)) throw DistillError("temperature must be > 0");
  if (top_k && (*top_k == 0 || *top_k > student.vocab_size)) {
    throw DistillError("top_k must be in [1, vocab]");
  }
  if (teacher.vocab_size != student.vocab_size) {
    throw DistillError("teacher and student vocabularies differ");
  }
  if (!alpha.dynamic && !(alpha.constant >= 0)) throw DistillError("constant alpha must be >= 0");
  for (auto c : is_components) {
    if (c != StateComponent::emb && layer_map.empty()) {
      throw DistillError("component '" + to_string(c) + "' requested without a layer mapping");
    }
  }
  for (const auto& p : layer_map) {
    if (p.teacher >= teacher.num_layers || p.student >= student.num_layers) {
      throw DistillError("layer mapping " + std::to_string(p.teacher) + ":" +
                         std::to_string(p.student) + " outside the models");
    }
  }
  if (!use_logits && !use_clm && is_components.empty()) {
    throw DistillError("no loss term enabled");
  }
}

DistillConfig default_distill_config(const ModelConfig& teacher, const ModelConfig& student) {
  DistillConfig cfg;
  const auto dropped = teacher.num_layers - std::min(teacher.num_layers, student.num_layers);
  if (4 * dropped > teacher.num_layers) {
    cfg.is_components = {StateComponent::o, StateComponent::emb};
    const auto t = teacher.num_layers >= 3 ? teacher.num_layers - 3 : 0;
    const auto s = student.num_layers >= 3 ? student.num_layers - 3 : 0;
    cfg.layer_map = {{t, s}};
  }
  return cfg;
}

Tensor softmax_t(const Tensor& logits, double tau) {
  if (!(tau > 0)) throw DistillError("temperature must be > 0");
  return softmax(scale(logits, static_cast<Real>(1.0 / tau)));
}

// ---- logit losses ----------------------------------------------------------

namespace {

// Row-wise log-softmax of z/tau restricted to `idx`.
void log_softmax_subset(const Real* z, std::span<const std::size_t> idx, double tau,
                        std::vector<double>& out) {
  out.resize(idx.size());
  double mx = -1e300;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    out[k] = z[idx[k]] / tau;
    mx = std::max(mx, out[k]);
  }
  double total = 0;
  for (double v : out) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  for (auto& v : out) v -= lse;
}

}  // namespace

Tensor logit_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                  const DistillConfig& cfg) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ShapeError("logit loss: teacher " + shape_string(teacher_logits.shape()) +
                     " vs student " + shape_string(student_logits.shape()));
  }
  if (!(cfg.temperature > 0)) throw DistillError("temperature must be > 0");
  const std::size_t vocab = student_logits.shape().back();
  const std::size_t rows = student_logits.numel() / vocab;
  const std::size_t k = cfg.top_k.value_or(vocab);
  if (k == 0 || k > vocab) throw DistillError("top_k must be in [1, vocab]");
  const double tau = cfg.temperature;
  const auto kind = cfg.logit_loss;

  const auto td = teacher_logits.data();
  const auto sd = student_logits.data();
  // Per-row dL/dz_s for backward.
  auto dz = std::make_shared<std::vector<Real>>(rows * vocab, Real(0));
  double total = 0;
  std::vector<std::size_t> idx(vocab);
  std::vector<double> lt, ls, gp;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* zt = td.data() + r * vocab;
    const Real* zs = sd.data() + r * vocab;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (k < vocab) {
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return zt[a] > zt[b]; });
      idx.resize(k);
      std::sort(idx.begin(), idx.end());
    }
    log_softmax_subset(zt, idx, tau, lt);
    log_softmax_subset(zs, idx, tau, ls);
    const std::size_t n = idx.size();
    double row_loss = 0;
    gp.assign(n, 0.0);  // dL/dp_s, except kld which goes straight to logits
    Real* dzr = dz->data() + r * vocab;
    switch (kind) {
      case LogitLoss::kld: {
        for (std::size_t j = 0; j < n; ++j) {
          const double pt = std::exp(lt[j]);
          if (pt > 0) row_loss += pt * (lt[j] - ls[j]);
          dzr[idx[j]] = static_cast<Real>((std::exp(ls[j]) - pt) / tau);
        }
        break;
      }
      case LogitLoss::rkld: {
        for (std::size_t j = 0; j < n; ++j) {
          const double ps = std::exp(ls[j]);
          if (ps > 0) row_loss += ps * (ls[j] - lt[j]);
          gp[j] = ls[j] - lt[j] + 1.0;
        }
        break;
      }
      case LogitLoss::mse: {
        for (std::size_t j = 0; j < n; ++j) {
          const double diff = std::exp(ls[j]) - std::exp(lt[j]);
          row_loss += diff * diff / static_cast<double>(n);
          gp[j] = 2.0 * diff / static_cast<double>(n);
        }
        break;
      }
      case LogitLoss::cosine: {
        double dot = 0, nt = 0, ns = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const double pt = std::exp(lt[j]), ps = std::exp(ls[j]);
          dot += pt * ps;
          nt += pt * pt;
          ns += ps * ps;
        }
        const double norm_t = std::sqrt(nt), norm_s = std::sqrt(ns);
        const double cosine = dot / (norm_t * norm_s);
        row_loss = 1.0 - cosine;
        for (std::size_t j = 0; j < n; ++j) {
          const double pt = std::exp(lt[j]), ps = std::exp(ls[j]);
          gp[j] = -(pt / (norm_t * norm_s) - cosine * ps / ns);
        }
        break;
      }
    }
    if (kind != LogitLoss::kld) {
      // softmax backward: dz_j = p_j (g_j - sum_k p_k g_k) / tau
      double weighted = 0;
      for (std::size_t j = 0; j < n; ++j) weighted += std::exp(ls[j]) * gp[j];
      for (std::size_t j = 0; j < n; ++j) {
        dzr[idx[j]] = static_cast<Real>(std::exp(ls[j]) * (gp[j] - weighted) / tau);
      }
    }
    total += row_loss;
  }
  return make_op_result({1}, {static_cast<Real>(total / static_cast<double>(rows))},
                        {student_logits},
                        [dz, rows](detail::Node& node) {
                          auto* g = input_grad(node, 0);
                          if (!g) return;
                          const Real s = node.grad[0] / static_cast<Real>(rows);
                          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * (*dz)[i];
                        },
                        "logit_loss");
}

// ---- intermediate states ---------------------------------------------------

SharedProjection SharedProjection::identity(std::size_t d_student, std::size_t d_teacher) {
  if (d_student > d_teacher) throw DistillError("student wider than teacher");
  std::vector<Real> w(d_student * d_teacher, Real(0));
  for (std::size_t j = 0; j < d_student; ++j) w[j * d_teacher + j] = 1;
  return {Tensor({d_student, d_teacher}, std::move(w), true)};
}

SharedProjection SharedProjection::from_channels(std::span<const std::size_t> teacher_channel,
                                                 std::size_t d_teacher) {
  std::vector<Real> w(teacher_channel.size() * d_teacher, Real(0));
  for (std::size_t j = 0; j < teacher_channel.size(); ++j) {
    if (teacher_channel[j] >= d_teacher) throw DistillError("channel map outside teacher width");
    w[j * d_teacher + teacher_channel[j]] = 1;
  }
  return {Tensor({teacher_channel.size(), d_teacher}, std::move(w), true)};
}

Tensor SharedProjection::apply(const Tensor& student_state) const {
  if (student_state.dim(1) != weight.dim(0)) {
    throw DistillError("student state width " + std::to_string(student_state.dim(1)) +
                       " does not match projection " + shape_string(weight.shape()));
  }
  return matmul(student_state, weight);
}

CaptureSpec distill_capture(const DistillConfig& cfg) {
  CaptureSpec cap;
  for (auto c : cfg.is_components) {
    if (c == StateComponent::att) {
      cap.qkv = true;
    } else {
      cap.post_ln = true;
    }
  }
  return cap;
}

Tensor row_cosine_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw DistillError("dimension mismatch after projection: " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
  }
  const auto rows = a.dim(0), cols = a.dim(1);
  const auto ad = a.data(), bd = b.data();
  auto grad = std::make_shared<std::vector<Real>>(a.numel());
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* x = ad.data() + r * cols;
    const Real* y = bd.data() + r * cols;
    double dot = 0, nx = 0, ny = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      dot += static_cast<double>(x[c]) * y[c];
      nx += static_cast<double>(x[c]) * x[c];
      ny += static_cast<double>(y[c]) * y[c];
    }
    if (nx == 0 || ny == 0) {
      total += 1.0;  // orthogonal by convention; no gradient
      continue;
    }
    const double norm_x = std::sqrt(nx), norm_y = std::sqrt(ny);
    const double cosine = dot / (norm_x * norm_y);
    total += 1.0 - cosine;
    for (std::size_t c = 0; c < cols; ++c) {
      (*grad)[r * cols + c] = static_cast<Real>(-(y[c] / (norm_x * norm_y) - cosine * x[c] / nx));
    }
  }
  return make_op_result({1}, {static_cast<Real>(total / static_cast<double>(rows))}, {a},
                        [grad, rows](detail::Node& node) {
                          auto* g = input_grad(node, 0);
                          if (!g) return;
                          const Real s = node.grad[0] / static_cast<Real>(rows);
                          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * (*grad)[i];
                        },
                        "row_cosine_distance");
}

Tensor row_mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw DistillError("dimension mismatch after projection: " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
  }
  const Tensor diff = sub(a, b.detach());
  return scale(sum_squares(diff), static_cast<Real>(1.0 / static_cast<double>(a.numel())));
}

std::size_t relation_heads(const ModelConfig& teacher, const ModelConfig& student) {
  return std::gcd(teacher.num_query_groups, student.num_query_groups);
}

Tensor relation_kld(const Tensor& student_state, const Tensor& teacher_state, std::size_t batch,
                    std::size_t seq, std::size_t heads) {
  const auto rows = batch * seq;
  if (student_state.rank() != 2 || teacher_state.rank() != 2 || student_state.dim(0) != rows ||
      teacher_state.dim(0) != rows) {
    throw DistillError("relation loss: states do not match batch*seq rows");
  }
  const auto ws = student_state.dim(1), wt = teacher_state.dim(1);
  if (heads == 0 || ws % heads != 0 || wt % heads != 0) {
    throw DistillError("relation loss: widths not divisible by relation head count");
  }
  const auto hs = ws / heads, ht = wt / heads;
  const double cs = 1.0 / std::sqrt(static_cast<double>(hs));
  const double ct = 1.0 / std::sqrt(static_cast<double>(ht));
  const auto sd = student_state.data(), td = teacher_state.data();
  // dL/dz_ij per (batch, head, i, j), dense S x S.
  auto dz = std::make_shared<std::vector<Real>>(batch * heads * seq * seq, Real(0));
  double total = 0;
  std::vector<double> zs(seq), zt(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      Real* dz_bh = dz->data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const Real* si = sd.data() + (b * seq + i) * ws + h * hs;
        const Real* ti = td.data() + (b * seq + i) * wt + h * ht;
        double ms = -1e300, mt = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          const Real* sj = sd.data() + (b * seq + j) * ws + h * hs;
          const Real* tj = td.data() + (b * seq + j) * wt + h * ht;
          double a = 0, c = 0;
          for (std::size_t d = 0; d < hs; ++d) a += static_cast<double>(si[d]) * sj[d];
          for (std::size_t d = 0; d < ht; ++d) c += static_cast<double>(ti[d]) * tj[d];
          zs[j] = a * cs;
          zt[j] = c * ct;
          ms = std::max(ms, zs[j]);
          mt = std::max(mt, zt[j]);
        }
        double ss = 0, st = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          ss += std::exp(zs[j] - ms);
          st += std::exp(zt[j] - mt);
        }
        const double lse_s = ms + std::log(ss), lse_t = mt + std::log(st);
        for (std::size_t j = 0; j <= i; ++j) {
          const double lps = zs[j] - lse_s, lpt = zt[j] - lse_t;
          const double pt = std::exp(lpt);
          total += pt * (lpt - lps);
          dz_bh[i * seq + j] = static_cast<Real>(std::exp(lps) - pt);
        }
      }
    }
  }
  const double count = static_cast<double>(rows * heads);
  return make_op_result(
      {1}, {static_cast<Real>(total / count)}, {student_state},
      [dz, batch, seq, heads, ws, hs, cs, count](detail::Node& node) {
        auto* g = input_grad(node, 0);
        if (!g) return;
        const auto& sd = node.inputs[0]->data;
        const double s = node.grad[0] / count * cs;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const Real* dz_bh = dz->data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const std::size_t ri = (b * seq + i) * ws + h * hs;
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t rj = (b * seq + j) * ws + h * hs;
                const Real w = static_cast<Real>(s * dz_bh[i * seq + j]);
                for (std::size_t d = 0; d < hs; ++d) {
                  (*g)[ri + d] += w * sd[rj + d];
                  (*g)[rj + d] += w * sd[ri + d];
                }
              }
            }
          }
        }
      },
      "relation_kld");
}

namespace {

const Tensor& block_output_state(const ActivationRecord& rec, std::size_t layer) {
  return layer + 1 < rec.layers.size() ? rec.layers[layer + 1].ln1_out : rec.final_ln_out;
}

Tensor state_loss(const Tensor& student_projected, const Tensor& teacher, StateLoss kind) {
  return kind == StateLoss::cosine ? row_cosine_distance(student_projected, teacher)
                                   : row_mse(student_projected, teacher);
}

Tensor accumulate(const Tensor& acc, const Tensor& term) { return acc.defined() ? add(acc, term) : term; }

}  // namespace

Tensor intermediate_loss(const ActivationRecord& teacher, const ActivationRecord& student,
                         const SharedProjection& projection, const DistillConfig& cfg,
                         const ModelConfig& teacher_config, const ModelConfig& student_config) {
  Tensor total;
  auto require = [](const Tensor& t, const char* what) -> const Tensor& {
    if (!t.defined()) throw DistillError(std::string("intermediate state not captured: ") + what);
    return t;
  };
  for (auto component : cfg.is_components) {
    switch (component) {
      case StateComponent::emb: {
        const auto& t = require(teacher.layers.at(0).ln1_out, "teacher embedding output");
        const auto& s = require(student.layers.at(0).ln1_out, "student embedding output");
        total = accumulate(total, state_loss(projection.apply(s), t, cfg.is_loss));
        break;
      }
      case StateComponent::o:
      case StateComponent::i: {
        if (cfg.layer_map.empty()) {
          throw DistillError("component '" + to_string(component) + "' requires a layer mapping");
        }
        for (const auto& p : cfg.layer_map) {
          const bool out = component == StateComponent::o;
          const auto& t = require(out ? block_output_state(teacher, p.teacher)
                                      : teacher.layers.at(p.teacher).ln2_out,
                                  "teacher state");
          const auto& s = require(out ? block_output_state(student, p.student)
                                      : student.layers.at(p.student).ln2_out,
                                  "student state");
          total = accumulate(total, state_loss(projection.apply(s), t, cfg.is_loss));
        }
        break;
      }
      case StateComponent::att: {
        if (cfg.layer_map.empty()) throw DistillError("component 'att' requires a layer mapping");
        const auto heads = relation_heads(teacher_config, student_config);
        for (const auto& p : cfg.layer_map) {
          const auto& tl = teacher.layers.at(p.teacher);
          const auto& sl = student.layers.at(p.student);
          for (auto [s, t] : {std::pair{&sl.q, &tl.q}, std::pair{&sl.k, &tl.k}, std::pair{&sl.v, &tl.v}}) {
            require(*s, "student q/k/v");
            require(*t, "teacher q/k/v");
            total = accumulate(total, relation_kld(*s, *t, student.batch, student.seq, heads));
          }
        }
        break;
      }
    }
  }
  if (!total.defined()) throw DistillError("no intermediate-state component selected");
  return total;
}

Tensor rescale_to(const Tensor& x, double alpha, double target) {
  return make_op_result({1}, {static_cast<Real>(target)}, {x},
                        [alpha](detail::Node& node) {
                          if (auto* g = input_grad(node, 0)) {
                            (*g)[0] += static_cast<Real>(alpha * node.grad[0]);
                          }
                        },
                        "rescale_to");
}

namespace {

LossBreakdown total_loss_impl(const Model* teacher, const Model& student, const TokenBatch& batch,
                              const DistillConfig& cfg, const SharedProjection* projection) {
  auto [inputs, targets] = batch.shifted();
  const bool needs_teacher = cfg.use_logits || !cfg.is_components.empty();
  if (needs_teacher && teacher == nullptr) throw DistillError("distillation terms need a teacher");
  const auto cap = distill_capture(cfg);

  ActivationRecord teacher_rec;
  if (needs_teacher) teacher_rec = forward(*teacher, inputs, {cap, {}});
  const auto student_rec = forward(student, inputs, {cap, {}});

  LossBreakdown out;
  Tensor total;
  if (cfg.use_clm) {
    Tensor clm = cross_entropy(student_rec.logits, targets);
    out.clm = clm.item();
    total = accumulate(total, clm);
  }
  Tensor logits;
  if (cfg.use_logits) {
    logits = logit_loss(teacher_rec.logits.detach(), student_rec.logits, cfg);
    out.logits = logits.item();
    total = accumulate(total, logits);
  }
  if (!cfg.is_components.empty()) {
    if (projection == nullptr) throw DistillError("intermediate-state loss needs a projection");
    Tensor is = intermediate_loss(teacher_rec, student_rec, *projection, cfg, teacher->config,
                                  student.config);
    out.is = is.item();
    Tensor weighted;
    if (cfg.alpha.dynamic) {
      if (out.is == 0) {
        out.alpha = 0;
        out.alpha_forced_zero = true;
        std::cerr << "warning: L_is is zero; dynamic alpha forced to 0\n";
        weighted = scale(is, 0);
      } else {
        out.alpha = out.logits / out.is;
        weighted = rescale_to(is, out.alpha, out.logits);
      }
    } else {
      out.alpha = cfg.alpha.constant;
      weighted = scale(is, static_cast<Real>(out.alpha));
    }
    out.weighted_is = weighted.item();
    total = accumulate(total, weighted);
  }
  out.total = total;
  return out;
}

}  // namespace

LossBreakdown total_loss(const Model& teacher, const Model& student, const TokenBatch& batch,
                         const DistillConfig& cfg, const SharedProjection& projection) {
  cfg.validate(teacher.config, student.config);
  return total_loss_impl(&teacher, student, batch, cfg, &projection);
}

// ---- optimisation ----------------------------------------------------------

CosineSchedule::CosineSchedule(double lr_max, double lr_min, std::size_t total_steps,
                               std::size_t warmup)
    : lr_max_(lr_max), lr_min_(lr_min), total_(total_steps), warmup_(warmup) {
  if (lr_min > lr_max || lr_min < 0) throw std::invalid_argument("need 0 <= lr_min <= lr_max");
}

double CosineSchedule::lr(std::size_t step) const {
  if (step < warmup_) {
    return lr_min_ + (lr_max_ - lr_min_) * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  }
  const std::size_t span = total_ > warmup_ + 1 ? total_ - warmup_ - 1 : 1;
  const double progress = std::min(1.0, static_cast<double>(step - warmup_) / static_cast<double>(span));
  return lr_min_ + 0.5 * (lr_max_ - lr_min_) * (1.0 + std::cos(M_PI * progress));
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const auto g = p.grad();
    if (g.empty()) continue;
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1 - beta2_) * static_cast<double>(g[j]) * g[j];
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_) + wd_ * w[j];
      w[j] = static_cast<Real>(w[j] - lr * update);
    }
    p.zero_grad();
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (Real g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (p.grad().empty()) continue;
      auto& g = p.node()->grad;
      for (auto& v : g) v = static_cast<Real>(v * factor);
    }
  }
  return norm;
}

// ---- loops -----------------------------------------------------------------

namespace {

TrainResult train_impl(const Model* teacher_in, Model student, const BatchSource& data,
                       std::span<const TokenBatch> eval_set, const DistillConfig& cfg,
                       const TrainConfig& train, std::optional<SharedProjection> projection,
                       const MetricsSink& sink) {
  if (teacher_in) cfg.validate(teacher_in->config, student.config);
  std::optional<Model> teacher;
  if (teacher_in && (cfg.use_logits || !cfg.is_components.empty())) {
    teacher.emplace(*teacher_in);
    teacher->set_trainable(false);
  }
  student.set_trainable(true);

  const bool uses_projection = std::any_of(cfg.is_components.begin(), cfg.is_components.end(),
                                           [](StateComponent c) { return c != StateComponent::att; });
  if (!projection && teacher) {
    projection = SharedProjection::identity(student.config.d_model, teacher->config.d_model);
  }
  std::vector<Tensor> params = student.parameters();
  if (projection) {
    projection->weight.set_requires_grad(uses_projection);
    if (uses_projection) params.push_back(projection->weight);
  }
  Adam opt(params, train.beta1, train.beta2, train.adam_eps, train.weight_decay);
  const CosineSchedule schedule(train.lr_max, train.lr_min, train.steps, train.warmup_steps);

  TrainResult result;
  std::uint64_t tokens = 0;
  auto run_eval = [&](std::size_t step) {
    if (!eval_set.empty()) result.evals.push_back({step, evaluate(student, eval_set).mean_nll});
  };
  for (std::size_t step = 0; step < train.steps; ++step) {
    const double lr = schedule.lr(step);
    const TokenBatch batch = data(step);
    StepMetrics m;
    m.step = step + 1;
    m.lr = lr;
    try {
      Tape tape;
      auto loss = total_loss_impl(teacher ? &*teacher : nullptr, student, batch, cfg,
                                  projection ? &*projection : nullptr);
      m.total = loss.total.item();
      m.clm = loss.clm;
      m.logits = loss.logits;
      m.is = loss.is;
      m.alpha = loss.alpha;
      m.weighted_is = loss.weighted_is;
      tape.backward(loss.total);
      clip_grad_norm(params, train.grad_clip);
      opt.step(lr);
    } catch (const NumericError& e) {
      if (!train.divergence_dump.empty()) save_checkpoint(student, train.divergence_dump);
      throw DivergenceError(std::string("training diverged at step ") + std::to_string(step + 1) +
                                ": " + e.what(),
                            result.metrics.empty() ? m : result.metrics.back());
    }
    tokens += batch.batch * (batch.seq - 1);
    m.tokens = tokens;
    result.metrics.push_back(m);
    if (sink) sink(m);
    if (train.eval_every > 0 && (step + 1) % train.eval_every == 0) run_eval(step + 1);
  }
  if (train.steps == 0 || result.evals.empty() || result.evals.back().step != train.steps) {
    run_eval(train.steps);
  }
  student.set_trainable(false);
  if (projection) projection->weight.set_requires_grad(false);
  result.student = std::move(student);
  if (projection) result.projection = *projection;
  return result;
}

}  // namespace

TrainResult distill_loop(const Model& teacher, Model student, const BatchSource& data,
                         std::span<const TokenBatch> eval_set, const DistillConfig& cfg,
                         const TrainConfig& train, std::optional<SharedProjection> projection,
                         const MetricsSink& sink) {
  return train_impl(&teacher, std::move(student), data, eval_set, cfg, train, std::move(projection),
                    sink);
}

TrainResult conventional_loop(Model student, const BatchSource& data,
                              std::span<const TokenBatch> eval_set, const TrainConfig& train,
                              const MetricsSink& sink) {
  DistillConfig cfg;
  cfg.use_logits = false;
  cfg.use_clm = true;
  return train_impl(nullptr, std::move(student), data, eval_set, cfg, train, std::nullopt, sink);
}

}  // namespace trimkit
