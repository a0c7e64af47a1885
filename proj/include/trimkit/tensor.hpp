#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// The library is compiled twice: float for training paths, double (TRIMKIT_DOUBLE)
// for gradient checking. The inline namespace keeps both linkable into one binary.
#ifdef TRIMKIT_DOUBLE
#define TRIMKIT_NS f64
#else
#define TRIMKIT_NS f32
#endif

namespace trimkit::inline TRIMKIT_NS {

#ifdef TRIMKIT_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN or Inf.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Propagates `out.grad` into the grads of `out.inputs`.
using BackwardFn = std::function<void(Node& out)>;

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  // Grad buffer of a node, allocated (zeroed) on first use.
  std::vector<Real>& grad_buffer();
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> data() const;
  /// Direct write access. Only for parameter owners (initialisation, optimiser,
  /// pruning) and never while a tape holds the tensor.
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  /// Empty span if no gradient has been accumulated.
  std::span<const Real> grad() const;
  void zero_grad();

  Tensor clone() const;
  /// Same data, no graph history, requires_grad=false.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

/// Ordered record of differentiable ops. Constructing a Tape makes it the
/// thread's active tape until destruction. Ops only record when a tape is
/// active and at least one input requires grad.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds d(loss)=1, runs every recorded backward once in reverse order and
  /// clears the tape.
  void backward(const Tensor& loss);
  std::size_t size() const { return nodes_.size(); }

  static Tape* current();
  /// Count of tapes ever constructed in this process.
  static std::uint64_t constructed_count();

  void record(detail::NodePtr node);

 private:
  std::vector<detail::NodePtr> nodes_;
  Tape* previous_ = nullptr;
};

/// backward() on the active tape; throws TapeError when none is active.
void backward(const Tensor& loss);

/// Builds an op result. Records `backward` on the active tape when any input
/// requires grad. Throws NumericError if `data` contains NaN/Inf.
Tensor make_op_result(Shape shape, std::vector<Real> data, std::vector<Tensor> inputs,
                      detail::BackwardFn backward, const char* op_name);

/// Accumulates into input `index` of `out` if that input requires grad.
/// Returns nullptr otherwise.
std::vector<Real>* input_grad(detail::Node& out, std::size_t index);

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor linear(const Tensor& x, const Tensor& w);  // [m,k] x [n,k]^T
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_squares(const Tensor& a);
Tensor squared_relu(const Tensor& x);
Tensor softmax(const Tensor& x);  // over the last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);
Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids);
/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
/// logits may be [N,V] or [B,S,V].
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets);

/// Rotary position encoding over consecutive pairs within each head;
/// x is [batch*seq, heads*head_dim], position = index within the sequence.
Tensor rope(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads,
            std::size_t head_dim, Real base = 10000);

struct AttentionShape {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 0;
  std::size_t groups = 0;  // key/value heads; heads % groups == 0
  std::size_t head_dim = 0;
};

/// Causal scaled dot-product attention with grouped key/value heads.
/// q: [B*S, H*dh], k,v: [B*S, G*dh] -> per-head outputs [B*S, H*dh].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionShape& shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, Real c) { return scale(a, c); }

namespace kernels {
// C[m,n] (+)= A[m,k] * B[k,n], all row-major.
void gemm(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
          bool accumulate);
void transpose(std::size_t rows, std::size_t cols, const Real* src, Real* dst);
}  // namespace kernels

}  // namespace trimkit
