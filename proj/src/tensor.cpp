#include "trimkit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace trimkit::inline TRIMKIT_NS {

namespace {

thread_local Tape* g_current_tape = nullptr;
std::atomic<std::uint64_t> g_tapes_constructed{0};

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

void require_rank2(const Tensor& t, const char* op) {
  require(t.defined() && t.rank() == 2, std::string(op) + ": expected a rank-2 tensor, got " +
                                            (t.defined() ? shape_string(t.shape()) : "undefined"));
}

// Rows x last-axis view of any tensor with rank >= 1.
std::pair<std::size_t, std::size_t> as_rows(const Shape& shape) {
  const std::size_t cols = shape.back();
  return {cols == 0 ? 0 : shape_numel(shape) / cols, cols};
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<Real>& detail::Node::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  return grad;
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<Real> data, bool requires_grad) {
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive: " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::scalar(Real value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis out of range for " + shape_string(shape()));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const Real> Tensor::data() const {
  if (!node_) return {};
  return node_->data;
}

std::span<Real> Tensor::mutable_data() {
  if (!node_) return {};
  return node_->data;
}

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_string(shape()));
  return node_->data[0];
}

Real Tensor::at(std::size_t row, std::size_t col) const {
  require_rank2(*this, "at");
  return node_->data[row * shape()[1] + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_) throw ShapeError("undefined tensor");
  node_->requires_grad = value;
}

std::span<const Real> Tensor::grad() const {
  if (!node_) return {};
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::clone() const {
  if (!node_) return {};
  return Tensor(node_->shape, node_->data, node_->requires_grad);
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_string(this->shape()) + " to " + shape_string(shape));
  }
  auto parent = *this;
  return make_op_result(std::move(shape), node_->data, {parent},
                        [](detail::Node& out) {
                          if (auto* g = input_grad(out, 0)) {
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
                          }
                        },
                        "reshape");
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : previous_(g_current_tape) {
  g_current_tape = this;
  ++g_tapes_constructed;
}

Tape::~Tape() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

std::uint64_t Tape::constructed_count() { return g_tapes_constructed.load(); }

void Tape::record(detail::NodePtr node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) throw TapeError("backward: loss must be a scalar");
  if (!loss.requires_grad()) {
    throw TapeError("backward: loss was not produced under an active tape from trainable inputs");
  }
  auto& seed = loss.node()->grad_buffer();
  seed[0] = 1;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& node = **it;
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
  }
  // Consume: intermediate grads and history are released.
  for (auto& node : nodes_) {
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->inputs.clear();
    node->backward = nullptr;
  }
  nodes_.clear();
}

void backward(const Tensor& loss) {
  auto* tape = Tape::current();
  if (tape == nullptr) throw TapeError("backward called without an active tape");
  tape->backward(loss);
}

Tensor make_op_result(Shape shape, std::vector<Real> data, std::vector<Tensor> inputs,
                      detail::BackwardFn backward, const char* op_name) {
  for (Real v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op_name) + ": non-finite value produced");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  auto* tape = Tape::current();
  const bool needs_grad =
      tape != nullptr &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

std::vector<Real>* input_grad(detail::Node& out, std::size_t index) {
  auto& in = out.inputs.at(index);
  if (!in || !in->requires_grad) return nullptr;
  return &in->grad_buffer();
}

// ---- kernels ---------------------------------------------------------------

void kernels::gemm(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b,
                   Real* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, Real(0));
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    const Real* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = arow[p];
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void kernels::transpose(std::size_t rows, std::size_t cols, const Real* src, Real* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const auto i1 = std::min(rows, i0 + kBlock);
      const auto j1 = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
      }
    }
  }
}

namespace {

std::vector<Real> transposed(std::size_t rows, std::size_t cols, std::span<const Real> src) {
  std::vector<Real> out(rows * cols);
  kernels::transpose(rows, cols, src.data(), out.data());
  return out;
}

}  // namespace

// ---- primitives ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner extents differ: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
  std::vector<Real> out(m * n);
  kernels::gemm(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return make_op_result({m, n}, std::move(out), {a, b},
                        [m, n, k](detail::Node& node) {
                          const auto& a_data = node.inputs[0]->data;
                          const auto& b_data = node.inputs[1]->data;
                          if (auto* ga = input_grad(node, 0)) {
                            // dA = dC * B^T
                            auto bt = transposed(k, n, b_data);
                            kernels::gemm(m, k, n, node.grad.data(), bt.data(), ga->data(), true);
                          }
                          if (auto* gb = input_grad(node, 1)) {
                            // dB = A^T * dC
                            auto at = transposed(m, k, a_data);
                            kernels::gemm(k, n, m, at.data(), node.grad.data(), gb->data(), true);
                          }
                        },
                        "matmul");
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const auto m = x.dim(0), k = x.dim(1), n = w.dim(0);
  require(w.dim(1) == k, "linear: input width " + std::to_string(k) + " does not match weight " +
                             shape_string(w.shape()));
  auto wt = transposed(n, k, w.data());
  std::vector<Real> out(m * n);
  kernels::gemm(m, n, k, x.data().data(), wt.data(), out.data(), false);
  return make_op_result({m, n}, std::move(out), {x, w},
                        [m, n, k](detail::Node& node) {
                          const auto& x_data = node.inputs[0]->data;
                          const auto& w_data = node.inputs[1]->data;
                          if (auto* gx = input_grad(node, 0)) {
                            // dX = dY * W
                            kernels::gemm(m, k, n, node.grad.data(), w_data.data(), gx->data(), true);
                          }
                          if (auto* gw = input_grad(node, 1)) {
                            // dW = dY^T * X
                            auto gyt = transposed(m, n, node.grad);
                            kernels::gemm(n, k, m, gyt.data(), x_data.data(), gw->data(), true);
                          }
                        },
                        "linear");
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd, const char* name) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          std::string(name) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<Real> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [bwd](detail::Node& node) { bwd(node); }, name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, [](Real x, Real y) { return x + y; },
      [](detail::Node& node) {
        for (std::size_t idx = 0; idx < 2; ++idx) {
          if (auto* g = input_grad(node, idx)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i];
          }
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, [](Real x, Real y) { return x - y; },
      [](detail::Node& node) {
        if (auto* g = input_grad(node, 0)) {
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i];
        }
        if (auto* g = input_grad(node, 1)) {
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= node.grad[i];
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, [](Real x, Real y) { return x * y; },
      [](detail::Node& node) {
        const auto& ad = node.inputs[0]->data;
        const auto& bd = node.inputs[1]->data;
        if (auto* g = input_grad(node, 0)) {
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i] * bd[i];
        }
        if (auto* g = input_grad(node, 1)) {
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i] * ad[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, Real factor) {
  const auto ad = a.data();
  std::vector<Real> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
  return make_op_result(a.shape(), std::move(out), {a},
                        [factor](detail::Node& node) {
                          if (auto* g = input_grad(node, 0)) {
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i] * factor;
                          }
                        },
                        "scale");
}

Tensor sum(const Tensor& a) {
  double acc = 0;
  for (Real v : a.data()) acc += v;
  return make_op_result({1}, {static_cast<Real>(acc)}, {a},
                        [](detail::Node& node) {
                          if (auto* g = input_grad(node, 0)) {
                            for (auto& v : *g) v += node.grad[0];
                          }
                        },
                        "sum");
}

Tensor mean(const Tensor& a) { return scale(sum(a), Real(1) / static_cast<Real>(a.numel())); }

Tensor sum_squares(const Tensor& a) {
  double acc = 0;
  for (Real v : a.data()) acc += static_cast<double>(v) * v;
  return make_op_result({1}, {static_cast<Real>(acc)}, {a},
                        [](detail::Node& node) {
                          const auto& ad = node.inputs[0]->data;
                          if (auto* g = input_grad(node, 0)) {
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2 * ad[i] * node.grad[0];
                          }
                        },
                        "sum_squares");
}

Tensor squared_relu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<Real> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0 ? xd[i] * xd[i] : Real(0);
  return make_op_result(x.shape(), std::move(out), {x},
                        [](detail::Node& node) {
                          const auto& xd = node.inputs[0]->data;
                          if (auto* g = input_grad(node, 0)) {
                            for (std::size_t i = 0; i < g->size(); ++i) {
                              if (xd[i] > 0) (*g)[i] += 2 * xd[i] * node.grad[i];
                            }
                          }
                        },
                        "squared_relu");
}

Tensor softmax(const Tensor& x) {
  const auto [rows, cols] = as_rows(x.shape());
  const auto xd = x.data();
  std::vector<Real> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xd.data() + r * cols;
    Real* o = out.data() + r * cols;
    const Real mx = *std::max_element(in, in + cols);
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = std::exp(static_cast<double>(in[c]) - mx);
      o[c] = static_cast<Real>(e);
      total += e;
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] = static_cast<Real>(o[c] / total);
  }
  return make_op_result(x.shape(), std::move(out), {x},
                        [rows, cols](detail::Node& node) {
                          auto* g = input_grad(node, 0);
                          if (!g) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const Real* p = node.data.data() + r * cols;
                            const Real* gy = node.grad.data() + r * cols;
                            double dot = 0;
                            for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(p[c]) * gy[c];
                            for (std::size_t c = 0; c < cols; ++c) {
                              (*g)[r * cols + c] += static_cast<Real>(p[c] * (gy[c] - dot));
                            }
                          }
                        },
                        "softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const auto [rows, cols] = as_rows(x.shape());
  require(gamma.numel() == cols && beta.numel() == cols,
          "layer_norm: gamma/beta width does not match input " + shape_string(x.shape()));
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<Real> out(xd.size());
  // Saved per-row statistics for backward.
  auto xhat = std::make_shared<std::vector<Real>>(xd.size());
  auto rstd = std::make_shared<std::vector<Real>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xd.data() + r * cols;
    double mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = static_cast<Real>(inv);
    for (std::size_t c = 0; c < cols; ++c) {
      const Real h = static_cast<Real>((in[c] - mu) * inv);
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * gd[c] + bd[c];
    }
  }
  return make_op_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, cols, xhat, rstd](detail::Node& node) {
        const auto& gd = node.inputs[1]->data;
        if (auto* gg = input_grad(node, 1)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
              (*gg)[c] += node.grad[r * cols + c] * (*xhat)[r * cols + c];
            }
          }
        }
        if (auto* gb = input_grad(node, 2)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += node.grad[r * cols + c];
          }
        }
        if (auto* gx = input_grad(node, 0)) {
          for (std::size_t r = 0; r < rows; ++r) {
            const Real* gy = node.grad.data() + r * cols;
            const Real* h = xhat->data() + r * cols;
            double mean_d = 0, mean_dh = 0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double d = static_cast<double>(gy[c]) * gd[c];
              mean_d += d;
              mean_dh += d * h[c];
            }
            mean_d /= static_cast<double>(cols);
            mean_dh /= static_cast<double>(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              const double d = static_cast<double>(gy[c]) * gd[c];
              (*gx)[r * cols + c] += static_cast<Real>((*rstd)[r] * (d - mean_d - h[c] * mean_dh));
            }
          }
        }
      },
      "layer_norm");
}

Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids) {
  require_rank2(table, "embedding");
  const auto vocab = table.dim(0), width = table.dim(1);
  std::vector<Real> out(ids.size() * width);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(td.data() + ids[i] * width, width, out.data() + i * width);
  }
  std::vector<std::uint32_t> saved(ids.begin(), ids.end());
  return make_op_result({ids.size(), width}, std::move(out), {table},
                        [saved = std::move(saved), width](detail::Node& node) {
                          auto* g = input_grad(node, 0);
                          if (!g) return;
                          for (std::size_t i = 0; i < saved.size(); ++i) {
                            Real* dst = g->data() + saved[i] * width;
                            const Real* src = node.grad.data() + i * width;
                            for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                          }
                        },
                        "embedding");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets) {
  const auto [rows, vocab] = as_rows(logits.shape());
  require(rows == targets.size(), "cross_entropy: " + std::to_string(targets.size()) +
                                      " targets for " + std::to_string(rows) + " rows");
  const auto ld = logits.data();
  auto probs = std::make_shared<std::vector<Real>>(ld.size());
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= vocab) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(targets[r]) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    const Real* z = ld.data() + r * vocab;
    const Real mx = *std::max_element(z, z + vocab);
    double denom = 0;
    for (std::size_t c = 0; c < vocab; ++c) denom += std::exp(static_cast<double>(z[c]) - mx);
    const double log_denom = std::log(denom) + mx;
    total += log_denom - z[targets[r]];
    for (std::size_t c = 0; c < vocab; ++c) {
      (*probs)[r * vocab + c] = static_cast<Real>(std::exp(z[c] - log_denom));
    }
  }
  std::vector<std::uint32_t> saved(targets.begin(), targets.end());
  return make_op_result({1}, {static_cast<Real>(total / static_cast<double>(rows))}, {logits},
                        [probs, saved = std::move(saved), rows, vocab](detail::Node& node) {
                          auto* g = input_grad(node, 0);
                          if (!g) return;
                          const Real s = node.grad[0] / static_cast<Real>(rows);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < vocab; ++c) {
                              const Real onehot = c == saved[r] ? Real(1) : Real(0);
                              (*g)[r * vocab + c] += s * ((*probs)[r * vocab + c] - onehot);
                            }
                          }
                        },
                        "cross_entropy");
}

Tensor rope(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads,
            std::size_t head_dim, Real base) {
  require_rank2(x, "rope");
  require(head_dim % 2 == 0, "rope: head_dim must be even");
  require(x.dim(0) == batch * seq && x.dim(1) == heads * head_dim,
          "rope: shape " + shape_string(x.shape()) + " inconsistent with layout");
  const std::size_t half = head_dim / 2;
  auto cos_t = std::make_shared<std::vector<Real>>(seq * half);
  auto sin_t = std::make_shared<std::vector<Real>>(seq * half);
  for (std::size_t s = 0; s < seq; ++s) {
    for (std::size_t m = 0; m < half; ++m) {
      const double freq = std::pow(static_cast<double>(base), -2.0 * m / head_dim);
      (*cos_t)[s * half + m] = static_cast<Real>(std::cos(s * freq));
      (*sin_t)[s * half + m] = static_cast<Real>(std::sin(s * freq));
    }
  }
  const std::size_t width = heads * head_dim;
  const auto xd = x.data();
  std::vector<Real> out(xd.size());
  for (std::size_t row = 0; row < batch * seq; ++row) {
    const std::size_t s = row % seq;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t m = 0; m < half; ++m) {
        const std::size_t i0 = row * width + h * head_dim + 2 * m;
        const Real c = (*cos_t)[s * half + m], sn = (*sin_t)[s * half + m];
        out[i0] = xd[i0] * c - xd[i0 + 1] * sn;
        out[i0 + 1] = xd[i0] * sn + xd[i0 + 1] * c;
      }
    }
  }
  return make_op_result(x.shape(), std::move(out), {x},
                        [=](detail::Node& node) {
                          auto* g = input_grad(node, 0);
                          if (!g) return;
                          for (std::size_t row = 0; row < batch * seq; ++row) {
                            const std::size_t s = row % seq;
                            for (std::size_t h = 0; h < heads; ++h) {
                              for (std::size_t m = 0; m < half; ++m) {
                                const std::size_t i0 = row * width + h * head_dim + 2 * m;
                                const Real c = (*cos_t)[s * half + m], sn = (*sin_t)[s * half + m];
                                const Real g0 = node.grad[i0], g1 = node.grad[i0 + 1];
                                (*g)[i0] += g0 * c + g1 * sn;
                                (*g)[i0 + 1] += -g0 * sn + g1 * c;
                              }
                            }
                          }
                        },
                        "rope");
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionShape& a) {
  require_rank2(q, "causal_attention");
  require_rank2(k, "causal_attention");
  require_rank2(v, "causal_attention");
  require(a.groups > 0 && a.heads % a.groups == 0, "causal_attention: heads % groups != 0");
  const std::size_t rows = a.batch * a.seq;
  const std::size_t qw = a.heads * a.head_dim, kw = a.groups * a.head_dim;
  require(q.dim(0) == rows && q.dim(1) == qw, "causal_attention: bad query shape " +
                                                  shape_string(q.shape()));
  require(k.shape() == Shape{rows, kw} && v.shape() == Shape{rows, kw},
          "causal_attention: bad key/value shape");
  const std::size_t per_group = a.heads / a.groups;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(a.head_dim));
  // probs[b][h][i][j] for j <= i, stored densely as S x S.
  auto probs = std::make_shared<std::vector<Real>>(a.batch * a.heads * a.seq * a.seq, Real(0));
  std::vector<Real> out(rows * qw, Real(0));
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> scores(a.seq);
  for (std::size_t b = 0; b < a.batch; ++b) {
    for (std::size_t h = 0; h < a.heads; ++h) {
      const std::size_t g = h / per_group;
      Real* p_bh = probs->data() + (b * a.heads + h) * a.seq * a.seq;
      for (std::size_t i = 0; i < a.seq; ++i) {
        const Real* qi = qd.data() + (b * a.seq + i) * qw + h * a.head_dim;
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          const Real* kj = kd.data() + (b * a.seq + j) * kw + g * a.head_dim;
          double dot = 0;
          for (std::size_t d = 0; d < a.head_dim; ++d) dot += static_cast<double>(qi[d]) * kj[d];
          scores[j] = dot * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double total = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          total += scores[j];
        }
        Real* oi = out.data() + (b * a.seq + i) * qw + h * a.head_dim;
        for (std::size_t j = 0; j <= i; ++j) {
          const Real pij = static_cast<Real>(scores[j] / total);
          p_bh[i * a.seq + j] = pij;
          const Real* vj = vd.data() + (b * a.seq + j) * kw + g * a.head_dim;
          for (std::size_t d = 0; d < a.head_dim; ++d) oi[d] += pij * vj[d];
        }
      }
    }
  }
  return make_op_result(
      {rows, qw}, std::move(out), {q, k, v},
      [a, probs, qw, kw, per_group, inv_sqrt](detail::Node& node) {
        auto* gq = input_grad(node, 0);
        auto* gk = input_grad(node, 1);
        auto* gv = input_grad(node, 2);
        const auto& qd = node.inputs[0]->data;
        const auto& kd = node.inputs[1]->data;
        const auto& vd = node.inputs[2]->data;
        std::vector<double> dp(a.seq);
        for (std::size_t b = 0; b < a.batch; ++b) {
          for (std::size_t h = 0; h < a.heads; ++h) {
            const std::size_t g = h / per_group;
            const Real* p_bh = probs->data() + (b * a.heads + h) * a.seq * a.seq;
            for (std::size_t i = 0; i < a.seq; ++i) {
              const Real* go = node.grad.data() + (b * a.seq + i) * qw + h * a.head_dim;
              double weighted = 0;
              for (std::size_t j = 0; j <= i; ++j) {
                const Real* vj = vd.data() + (b * a.seq + j) * kw + g * a.head_dim;
                double dot = 0;
                for (std::size_t d = 0; d < a.head_dim; ++d) dot += static_cast<double>(go[d]) * vj[d];
                dp[j] = dot;
                weighted += p_bh[i * a.seq + j] * dot;
                if (gv) {
                  Real* gvj = gv->data() + (b * a.seq + j) * kw + g * a.head_dim;
                  const Real pij = p_bh[i * a.seq + j];
                  for (std::size_t d = 0; d < a.head_dim; ++d) gvj[d] += pij * go[d];
                }
              }
              if (!gq && !gk) continue;
              const Real* qi = qd.data() + (b * a.seq + i) * qw + h * a.head_dim;
              for (std::size_t j = 0; j <= i; ++j) {
                const Real ds =
                    static_cast<Real>(p_bh[i * a.seq + j] * (dp[j] - weighted) * inv_sqrt);
                const Real* kj = kd.data() + (b * a.seq + j) * kw + g * a.head_dim;
                if (gq) {
                  Real* gqi = gq->data() + (b * a.seq + i) * qw + h * a.head_dim;
                  for (std::size_t d = 0; d < a.head_dim; ++d) gqi[d] += ds * kj[d];
                }
                if (gk) {
                  Real* gkj = gk->data() + (b * a.seq + j) * kw + g * a.head_dim;
                  for (std::size_t d = 0; d < a.head_dim; ++d) gkj[d] += ds * qi[d];
                }
              }
            }
          }
        }
      },
      "causal_attention");
}

}  // namespace trimkit
