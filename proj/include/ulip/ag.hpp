#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A BasicGraph records operations as they execute (define-by-run). Leaves
// either bind to an externally owned tensor, whose `grad` receives the
// adjoint on backward(), or hold a private constant copy. All ops work on
// rank-2 tensors; a scalar is a 1x1 tensor.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ulip::ag {

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatMul,
  kAdd,
  kSubtract,
  kMul,
  kRelu,
  kMaxAxis,
  kMeanAxis,
  kTranspose,
  kConcatRows,
  kL2NormalizeRows,
  kScaleByScalar,
  kExpScalar,
  kLogSoftmaxRows,
  kNllDiagonal,
  kSumAll,
};

/// Every differentiable op (everything but kLeaf).
std::span<const OpKind> op_catalog();
std::string_view op_name(OpKind kind);
std::optional<OpKind> parse_op(std::string_view name);

template <class T>
struct BasicTensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;

  static BasicTensor zeros(std::size_t rows, std::size_t cols);
  static BasicTensor from(std::size_t rows, std::size_t cols, std::vector<T> values);
  static BasicTensor scalar(T value) { return from(1, 1, {value}); }

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  std::size_t size() const { return data.size(); }
  bool is_scalar() const { return data.size() == 1; }

  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data).subspan(r * cols(), cols());
  }

  /// Turns on gradient tracking and allocates a zeroed accumulator.
  void set_requires_grad(bool on = true);
  void zero_grad();

  template <class U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    if (requires_grad) out.grad.assign(data.size(), U{0});
    return out;
  }
};

using Tensor = BasicTensor<float>;

/// Handle to a node inside one graph.
struct Var {
  std::size_t id = 0;
};

template <class T>
class BasicGraph {
 public:
  BasicGraph() = default;
  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;

  /// Binds `t` without copying; `t` must outlive the graph.
  Var leaf(BasicTensor<T>& t);
  Var constant(BasicTensor<T> t);

  /// Generic dispatcher. `axis` is used by the axis reductions only.
  Var forward(OpKind kind, std::span<const Var> inputs, int axis = 0);

  Var matmul(Var a, Var b);
  // add/subtract accept equal shapes or a 1xC rhs broadcast over rows.
  Var add(Var a, Var b);
  Var subtract(Var a, Var b);
  Var mul(Var a, Var b);
  Var relu(Var x);
  Var max_axis(Var x, int axis);
  Var mean_axis(Var x, int axis);
  Var transpose(Var x);
  Var concat_rows(std::span<const Var> parts);
  Var l2_normalize_rows(Var x);
  Var scale(Var x, Var s);
  Var exp_scalar(Var s);
  Var log_softmax_rows(Var x);
  // -sum_i x[i][i] for a square matrix.
  Var nll_diagonal(Var x);
  Var sum_all(Var x);

  const BasicTensor<T>& value(Var v) const;
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  std::size_t size() const { return nodes_.size(); }

  /// Accumulates d(loss)/d(leaf) into every bound leaf with requires_grad.
  void backward(Var loss);

  /// Sign pattern of every relu input (-1/0/+1) followed by every max-axis
  /// argmax. Two evaluations on the same side of all kinks produce equal
  /// signatures.
  std::vector<std::int64_t> kink_signature() const;

  /// Scales the input adjoints produced by `kind` (fault-injection hook for
  /// validating gradient checks).
  void set_grad_fault(OpKind kind, T factor) { fault_ = {kind, factor}; }

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    BasicTensor<T> own;
    BasicTensor<T>* bound = nullptr;
    int axis = 0;
    std::vector<std::uint32_t> index;  // argmax for kMaxAxis
    std::vector<T> adj;
  };

  Var push(Node node);
  const BasicTensor<T>& val(std::size_t id) const;
  std::vector<T>& adj_of(std::size_t id);
  void backprop_node(std::size_t id);

  std::vector<Node> nodes_;
  std::vector<char> needs_;
  std::optional<std::pair<OpKind, T>> fault_;
};

using Graph = BasicGraph<float>;

template <class T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> tensor;
};

using Parameter = BasicParameter<float>;

/// Row-independent kernel: out[i] = a[i] * b, each row computed by the same
/// instruction sequence regardless of its position.
void matmul_rows(const float* a, const float* b, float* out, std::size_t m,
                 std::size_t k, std::size_t n);
void matmul_rows(const double* a, const double* b, double* out, std::size_t m,
                 std::size_t k, std::size_t n);

}  // namespace ulip::ag
