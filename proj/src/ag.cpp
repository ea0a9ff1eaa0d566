#include "ulip/ag.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <sstream>

#include "ulip/errors.hpp"

namespace ulip::ag {

namespace {

constexpr std::array<OpKind, 15> kCatalog = {
    OpKind::kMatMul,        OpKind::kAdd,           OpKind::kSubtract,
    OpKind::kMul,           OpKind::kRelu,          OpKind::kMaxAxis,
    OpKind::kMeanAxis,      OpKind::kTranspose,     OpKind::kConcatRows,
    OpKind::kL2NormalizeRows, OpKind::kScaleByScalar, OpKind::kExpScalar,
    OpKind::kLogSoftmaxRows, OpKind::kNllDiagonal,  OpKind::kSumAll,
};

constexpr std::array<std::pair<OpKind, std::string_view>, 16> kNames = {{
    {OpKind::kLeaf, "leaf"},
    {OpKind::kMatMul, "matmul"},
    {OpKind::kAdd, "add"},
    {OpKind::kSubtract, "subtract"},
    {OpKind::kMul, "mul"},
    {OpKind::kRelu, "relu"},
    {OpKind::kMaxAxis, "max_axis"},
    {OpKind::kMeanAxis, "mean_axis"},
    {OpKind::kTranspose, "transpose"},
    {OpKind::kConcatRows, "concat_rows"},
    {OpKind::kL2NormalizeRows, "l2_normalize_rows"},
    {OpKind::kScaleByScalar, "scale"},
    {OpKind::kExpScalar, "exp_scalar"},
    {OpKind::kLogSoftmaxRows, "log_softmax_rows"},
    {OpKind::kNllDiagonal, "nll_diagonal"},
    {OpKind::kSumAll, "sum_all"},
}};

template <class T>
std::string shape_str(const BasicTensor<T>& t) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) os << 'x';
    os << t.shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
[[noreturn]] void shape_fail(OpKind kind, const BasicTensor<T>& a,
                             const BasicTensor<T>* b = nullptr,
                             std::string_view detail = {}) {
  std::string msg = std::string(op_name(kind)) + ": bad operand shape " + shape_str(a);
  if (b) msg += " and " + shape_str(*b);
  if (!detail.empty()) msg += " (" + std::string(detail) + ")";
  throw ShapeError(msg);
}

template <class T>
void require_matrix(OpKind kind, const BasicTensor<T>& t) {
  if (t.shape.size() != 2) shape_fail(kind, t, static_cast<const BasicTensor<T>*>(nullptr), "rank must be 2");
}

template <class T>
void require_scalar(OpKind kind, const BasicTensor<T>& t) {
  if (t.shape.size() != 2 || t.rows() != 1 || t.cols() != 1) {
    shape_fail(kind, t, static_cast<const BasicTensor<T>*>(nullptr), "expected 1x1 scalar");
  }
}

template <class T>
bool row_is_zero(const T* p, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    if (p[j] != T{0}) return false;
  }
  return true;
}

// 8-row register tile over 64-byte vector lanes. Every row, including a
// short final block (which is zero padded), runs through `matmul_tile`, so a
// row's result never depends on its position.
constexpr std::size_t kTileRows = 8;

template <class T>
using Lane [[gnu::vector_size(64)]] = T;

template <class T>
[[gnu::noinline]] void matmul_tile(const T* a, const T* b, T* out, std::size_t k,
                                   std::size_t n) {
  constexpr std::size_t w = 64 / sizeof(T);
  std::size_t j0 = 0;
  for (; j0 + w <= n; j0 += w) {
    Lane<T> acc[kTileRows] = {};
    for (std::size_t p = 0; p < k; ++p) {
      Lane<T> bv;
      std::memcpy(&bv, b + p * n + j0, sizeof(bv));
      for (std::size_t r = 0; r < kTileRows; ++r) acc[r] += a[r * k + p] * bv;
    }
    for (std::size_t r = 0; r < kTileRows; ++r) std::memcpy(out + r * n + j0, &acc[r], sizeof(acc[r]));
  }
  if (j0 == n) return;
  for (std::size_t r = 0; r < kTileRows; ++r) {
    T* c = out + r * n;
    std::fill(c + j0, c + n, T{0});
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[r * k + p];
      const T* br = b + p * n;
      for (std::size_t j = j0; j < n; ++j) c[j] += av * br[j];
    }
  }
}

template <class T>
void matmul_rows_impl(const T* a, const T* b, T* out, std::size_t m,
                      std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + kTileRows <= m; i += kTileRows) matmul_tile(a + i * k, b, out + i * n, k, n);
  if (i == m) return;
  std::vector<T> pa(kTileRows * k, T{0});
  std::vector<T> po(kTileRows * n);
  std::copy(a + i * k, a + m * k, pa.begin());
  matmul_tile(pa.data(), b, po.data(), k, n);
  std::copy(po.begin(), po.begin() + static_cast<std::ptrdiff_t>((m - i) * n), out + i * n);
}

}  // namespace

void matmul_rows(const float* a, const float* b, float* out, std::size_t m,
                 std::size_t k, std::size_t n) {
  matmul_rows_impl(a, b, out, m, k, n);
}

void matmul_rows(const double* a, const double* b, double* out, std::size_t m,
                 std::size_t k, std::size_t n) {
  matmul_rows_impl(a, b, out, m, k, n);
}

std::span<const OpKind> op_catalog() { return kCatalog; }

std::string_view op_name(OpKind kind) {
  for (const auto& [k, n] : kNames) {
    if (k == kind) return n;
  }
  return "unknown";
}

std::optional<OpKind> parse_op(std::string_view name) {
  for (const auto& [k, n] : kNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// BasicTensor

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(std::size_t rows, std::size_t cols) {
  BasicTensor t;
  t.shape = {rows, cols};
  t.data.assign(rows * cols, T{0});
  return t;
}

template <class T>
BasicTensor<T> BasicTensor<T>::from(std::size_t rows, std::size_t cols,
                                    std::vector<T> values) {
  if (rows == 0 || cols == 0 || values.size() != rows * cols) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape [" + std::to_string(rows) + "x" +
                     std::to_string(cols) + "]");
  }
  BasicTensor t;
  t.shape = {rows, cols};
  t.data = std::move(values);
  return t;
}

template <class T>
void BasicTensor<T>::set_requires_grad(bool on) {
  requires_grad = on;
  if (on) {
    grad.assign(data.size(), T{0});
  } else {
    grad.clear();
  }
}

template <class T>
void BasicTensor<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T{0});
}

// ---------------------------------------------------------------------------
// BasicGraph

template <class T>
Var BasicGraph<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <class T>
const BasicTensor<T>& BasicGraph<T>::val(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.bound ? *n.bound : n.own;
}

template <class T>
const BasicTensor<T>& BasicGraph<T>::value(Var v) const {
  return val(v.id);
}

template <class T>
Var BasicGraph<T>::leaf(BasicTensor<T>& t) {
  require_matrix(OpKind::kLeaf, t);
  Node n;
  n.bound = &t;
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::constant(BasicTensor<T> t) {
  require_matrix(OpKind::kLeaf, t);
  t.requires_grad = false;
  t.grad.clear();
  Node n;
  n.own = std::move(t);
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::forward(OpKind kind, std::span<const Var> in, int axis) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " +
                       std::to_string(n) + " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::kMatMul: arity(2); return matmul(in[0], in[1]);
    case OpKind::kAdd: arity(2); return add(in[0], in[1]);
    case OpKind::kSubtract: arity(2); return subtract(in[0], in[1]);
    case OpKind::kMul: arity(2); return mul(in[0], in[1]);
    case OpKind::kRelu: arity(1); return relu(in[0]);
    case OpKind::kMaxAxis: arity(1); return max_axis(in[0], axis);
    case OpKind::kMeanAxis: arity(1); return mean_axis(in[0], axis);
    case OpKind::kTranspose: arity(1); return transpose(in[0]);
    case OpKind::kConcatRows: return concat_rows(in);
    case OpKind::kL2NormalizeRows: arity(1); return l2_normalize_rows(in[0]);
    case OpKind::kScaleByScalar: arity(2); return scale(in[0], in[1]);
    case OpKind::kExpScalar: arity(1); return exp_scalar(in[0]);
    case OpKind::kLogSoftmaxRows: arity(1); return log_softmax_rows(in[0]);
    case OpKind::kNllDiagonal: arity(1); return nll_diagonal(in[0]);
    case OpKind::kSumAll: arity(1); return sum_all(in[0]);
    case OpKind::kLeaf: break;
  }
  throw ShapeError("unknown op kind " + std::to_string(static_cast<int>(kind)));
}

template <class T>
Var BasicGraph<T>::matmul(Var a, Var b) {
  const auto& A = val(a.id);
  const auto& B = val(b.id);
  require_matrix(OpKind::kMatMul, A);
  require_matrix(OpKind::kMatMul, B);
  if (A.cols() != B.rows()) shape_fail(OpKind::kMatMul, A, &B);
  Node n;
  n.kind = OpKind::kMatMul;
  n.inputs = {a.id, b.id};
  n.own = BasicTensor<T>::zeros(A.rows(), B.cols());
  matmul_rows(A.data.data(), B.data.data(), n.own.data.data(), A.rows(), A.cols(),
              B.cols());
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::add(Var a, Var b) {
  const auto& A = val(a.id);
  const auto& B = val(b.id);
  require_matrix(OpKind::kAdd, A);
  require_matrix(OpKind::kAdd, B);
  const bool same = A.shape == B.shape;
  const bool bcast = B.rows() == 1 && B.cols() == A.cols();
  if (!same && !bcast) shape_fail(OpKind::kAdd, A, &B);
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a.id, b.id};
  n.own = A;
  n.own.requires_grad = false;
  n.own.grad.clear();
  const std::size_t c = A.cols();
  for (std::size_t i = 0; i < A.rows(); ++i) {
    const T* br = same ? &B.data[i * c] : B.data.data();
    T* o = &n.own.data[i * c];
    for (std::size_t j = 0; j < c; ++j) o[j] += br[j];
  }
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::subtract(Var a, Var b) {
  const auto& A = val(a.id);
  const auto& B = val(b.id);
  require_matrix(OpKind::kSubtract, A);
  require_matrix(OpKind::kSubtract, B);
  const bool same = A.shape == B.shape;
  const bool bcast = B.rows() == 1 && B.cols() == A.cols();
  if (!same && !bcast) shape_fail(OpKind::kSubtract, A, &B);
  Node n;
  n.kind = OpKind::kSubtract;
  n.inputs = {a.id, b.id};
  n.own = BasicTensor<T>::zeros(A.rows(), A.cols());
  const std::size_t c = A.cols();
  for (std::size_t i = 0; i < A.rows(); ++i) {
    const T* br = same ? &B.data[i * c] : B.data.data();
    for (std::size_t j = 0; j < c; ++j) n.own.data[i * c + j] = A.data[i * c + j] - br[j];
  }
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::mul(Var a, Var b) {
  const auto& A = val(a.id);
  const auto& B = val(b.id);
  require_matrix(OpKind::kMul, A);
  if (A.shape != B.shape) shape_fail(OpKind::kMul, A, &B);
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a.id, b.id};
  n.own = BasicTensor<T>::zeros(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) n.own.data[i] = A.data[i] * B.data[i];
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::relu(Var x) {
  const auto& X = val(x.id);
  require_matrix(OpKind::kRelu, X);
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {x.id};
  n.own = BasicTensor<T>::zeros(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) {
    n.own.data[i] = X.data[i] > T{0} ? X.data[i] : T{0};
  }
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::max_axis(Var x, int axis) {
  const auto& X = val(x.id);
  require_matrix(OpKind::kMaxAxis, X);
  if (axis != 0 && axis != 1) shape_fail(OpKind::kMaxAxis, X, static_cast<const BasicTensor<T>*>(nullptr), "axis must be 0 or 1");
  const std::size_t r = X.rows(), c = X.cols();
  Node n;
  n.kind = OpKind::kMaxAxis;
  n.inputs = {x.id};
  n.axis = axis;
  if (axis == 0) {
    n.own = BasicTensor<T>::zeros(1, c);
    n.index.assign(c, 0);
    for (std::size_t j = 0; j < c; ++j) n.own.data[j] = X.data[j];
    for (std::size_t i = 1; i < r; ++i) {
      const T* xr = &X.data[i * c];
      for (std::size_t j = 0; j < c; ++j) {
        if (xr[j] > n.own.data[j]) {
          n.own.data[j] = xr[j];
          n.index[j] = static_cast<std::uint32_t>(i);
        }
      }
    }
  } else {
    n.own = BasicTensor<T>::zeros(r, 1);
    n.index.assign(r, 0);
    for (std::size_t i = 0; i < r; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j) {
        if (X.data[i * c + j] > X.data[i * c + best]) best = j;
      }
      n.own.data[i] = X.data[i * c + best];
      n.index[i] = static_cast<std::uint32_t>(best);
    }
  }
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::mean_axis(Var x, int axis) {
  const auto& X = val(x.id);
  require_matrix(OpKind::kMeanAxis, X);
  if (axis != 0 && axis != 1) shape_fail(OpKind::kMeanAxis, X, static_cast<const BasicTensor<T>*>(nullptr), "axis must be 0 or 1");
  const std::size_t r = X.rows(), c = X.cols();
  Node n;
  n.kind = OpKind::kMeanAxis;
  n.inputs = {x.id};
  n.axis = axis;
  if (axis == 0) {
    n.own = BasicTensor<T>::zeros(1, c);
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < r; ++i) s += X.data[i * c + j];
      n.own.data[j] = static_cast<T>(s / static_cast<double>(r));
    }
  } else {
    n.own = BasicTensor<T>::zeros(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < c; ++j) s += X.data[i * c + j];
      n.own.data[i] = static_cast<T>(s / static_cast<double>(c));
    }
  }
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::transpose(Var x) {
  const auto& X = val(x.id);
  require_matrix(OpKind::kTranspose, X);
  const std::size_t r = X.rows(), c = X.cols();
  Node n;
  n.kind = OpKind::kTranspose;
  n.inputs = {x.id};
  n.own = BasicTensor<T>::zeros(c, r);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) n.own.data[j * r + i] = X.data[i * c + j];
  }
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const auto& first = val(parts[0].id);
  require_matrix(OpKind::kConcatRows, first);
  std::size_t rows = 0;
  for (auto p : parts) {
    const auto& P = val(p.id);
    require_matrix(OpKind::kConcatRows, P);
    if (P.cols() != first.cols()) shape_fail(OpKind::kConcatRows, first, &P);
    rows += P.rows();
  }
  Node n;
  n.kind = OpKind::kConcatRows;
  n.own = BasicTensor<T>::zeros(rows, first.cols());
  std::size_t off = 0;
  for (auto p : parts) {
    const auto& P = val(p.id);
    std::copy(P.data.begin(), P.data.end(), n.own.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += P.size();
    n.inputs.push_back(p.id);
  }
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::l2_normalize_rows(Var x) {
  const auto& X = val(x.id);
  require_matrix(OpKind::kL2NormalizeRows, X);
  const std::size_t r = X.rows(), c = X.cols();
  Node n;
  n.kind = OpKind::kL2NormalizeRows;
  n.inputs = {x.id};
  n.own = BasicTensor<T>::zeros(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = X.data[i * c + j];
      s += v * v;
    }
    if (!(s > 0) || !std::isfinite(s)) {
      throw NumericalError("l2_normalize_rows: row " + std::to_string(i) +
                           " has zero or non-finite norm");
    }
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < c; ++j) {
      n.own.data[i * c + j] = static_cast<T>(X.data[i * c + j] * inv);
    }
  }
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::scale(Var x, Var s) {
  const auto& X = val(x.id);
  const auto& S = val(s.id);
  require_matrix(OpKind::kScaleByScalar, X);
  require_scalar(OpKind::kScaleByScalar, S);
  Node n;
  n.kind = OpKind::kScaleByScalar;
  n.inputs = {x.id, s.id};
  n.own = BasicTensor<T>::zeros(X.rows(), X.cols());
  const T sv = S.data[0];
  for (std::size_t i = 0; i < X.size(); ++i) n.own.data[i] = X.data[i] * sv;
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::exp_scalar(Var s) {
  const auto& S = val(s.id);
  require_scalar(OpKind::kExpScalar, S);
  Node n;
  n.kind = OpKind::kExpScalar;
  n.inputs = {s.id};
  n.own = BasicTensor<T>::scalar(static_cast<T>(std::exp(static_cast<double>(S.data[0]))));
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::log_softmax_rows(Var x) {
  const auto& X = val(x.id);
  require_matrix(OpKind::kLogSoftmaxRows, X);
  const std::size_t r = X.rows(), c = X.cols();
  Node n;
  n.kind = OpKind::kLogSoftmaxRows;
  n.inputs = {x.id};
  n.own = BasicTensor<T>::zeros(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = &X.data[i * c];
    double mx = xr[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(xr[j]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      n.own.data[i * c + j] = static_cast<T>(static_cast<double>(xr[j]) - lse);
    }
  }
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::nll_diagonal(Var x) {
  const auto& X = val(x.id);
  require_matrix(OpKind::kNllDiagonal, X);
  if (X.rows() != X.cols()) shape_fail(OpKind::kNllDiagonal, X, static_cast<const BasicTensor<T>*>(nullptr), "expected square matrix");
  double s = 0;
  for (std::size_t i = 0; i < X.rows(); ++i) s += X.at(i, i);
  Node n;
  n.kind = OpKind::kNllDiagonal;
  n.inputs = {x.id};
  n.own = BasicTensor<T>::scalar(static_cast<T>(-s));
  return push(std::move(n));
}

template <class T>
Var BasicGraph<T>::sum_all(Var x) {
  const auto& X = val(x.id);
  require_matrix(OpKind::kSumAll, X);
  double s = 0;
  for (auto v : X.data) s += v;
  Node n;
  n.kind = OpKind::kSumAll;
  n.inputs = {x.id};
  n.own = BasicTensor<T>::scalar(static_cast<T>(s));
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward

template <class T>
std::vector<T>& BasicGraph<T>::adj_of(std::size_t id) {
  Node& n = nodes_[id];
  if (n.adj.empty()) n.adj.assign(val(id).size(), T{0});
  return n.adj;
}

template <class T>
void BasicGraph<T>::backward(Var loss) {
  const auto& L = val(loss.id);
  if (L.shape.size() != 2 || L.size() != 1) {
    throw ShapeError("backward: loss must be a 1x1 scalar, got " + shape_str(L));
  }
  // Which nodes lead to a trainable leaf.
  needs_.assign(nodes_.size(), 0);
  auto& needs = needs_;
  for (std::size_t i = 0; i <= loss.id; ++i) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::kLeaf) {
      needs[i] = n.bound && n.bound->requires_grad;
    } else {
      for (auto in : n.inputs) needs[i] |= needs[in];
    }
  }
  for (auto& n : nodes_) n.adj.clear();
  adj_of(loss.id)[0] = T{1};
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (!needs[id] || nodes_[id].adj.empty()) continue;
    Node& n = nodes_[id];
    if (n.kind == OpKind::kLeaf) {
      auto& g = n.bound->grad;
      if (g.size() != n.adj.size()) g.assign(n.adj.size(), T{0});
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.adj[i];
      continue;
    }
    // Inputs that do not lead to a trainable leaf get no adjoint.
    backprop_node(id);
    for (auto in : n.inputs) {
      if (!needs[in]) nodes_[in].adj.clear();
    }
  }
  for (auto& n : nodes_) {
    n.adj.clear();
    n.adj.shrink_to_fit();
  }
}

template <class T>
void BasicGraph<T>::backprop_node(std::size_t id) {
  Node& n = nodes_[id];
  const auto& Y = val(id);
  const T f = (fault_ && fault_->first == n.kind) ? fault_->second : T{1};
  std::vector<T> scaled;
  if (f != T{1}) {
    scaled = n.adj;
    for (auto& v : scaled) v *= f;
  }
  const std::vector<T>& g = f != T{1} ? scaled : n.adj;

  switch (n.kind) {
    case OpKind::kMatMul: {
      const auto& A = val(n.inputs[0]);
      const auto& B = val(n.inputs[1]);
      const std::size_t m = A.rows(), k = A.cols(), c = B.cols();
      const bool want_a = needs_[n.inputs[0]];
      const bool want_b = needs_[n.inputs[1]];
      // Only rows with a nonzero adjoint contribute (max pooling leaves most
      // rows zero). They are packed so both products use the tiled kernel.
      std::vector<std::size_t> live;
      for (std::size_t i = 0; i < m; ++i) {
        if (!row_is_zero(&g[i * c], c)) live.push_back(i);
      }
      const std::size_t r = live.size();
      if (r == 0) break;
      std::vector<T> G(r * c);
      for (std::size_t i = 0; i < r; ++i) {
        std::copy_n(&g[live[i] * c], c, &G[i * c]);
      }
      if (want_a) {
        std::vector<T> bt(c * k);
        for (std::size_t p = 0; p < k; ++p) {
          for (std::size_t j = 0; j < c; ++j) bt[j * k + p] = B.data[p * c + j];
        }
        std::vector<T> ga(r * k);
        matmul_rows(G.data(), bt.data(), ga.data(), r, c, k);
        auto& dA = adj_of(n.inputs[0]);
        for (std::size_t i = 0; i < r; ++i) {
          T* da = &dA[live[i] * k];
          const T* src = &ga[i * k];
          for (std::size_t p = 0; p < k; ++p) da[p] += src[p];
        }
      }
      if (want_b) {
        std::vector<T> at(k * r);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t p = 0; p < k; ++p) at[p * r + i] = A.data[live[i] * k + p];
        }
        std::vector<T> gb(k * c);
        matmul_rows(at.data(), G.data(), gb.data(), k, r, c);
        auto& dB = adj_of(n.inputs[1]);
        for (std::size_t i = 0; i < gb.size(); ++i) dB[i] += gb[i];
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kSubtract: {
      const auto& A = val(n.inputs[0]);
      const auto& B = val(n.inputs[1]);
      const T sign = n.kind == OpKind::kAdd ? T{1} : T{-1};
      const std::size_t c = A.cols();
      const bool same = A.shape == B.shape;
      auto& dA = adj_of(n.inputs[0]);
      auto& dB = adj_of(n.inputs[1]);
      for (std::size_t i = 0; i < A.rows(); ++i) {
        const T* gr = &g[i * c];
        if (row_is_zero(gr, c)) continue;
        T* da = &dA[i * c];
        T* db = same ? &dB[i * c] : dB.data();
        for (std::size_t j = 0; j < c; ++j) da[j] += gr[j];
        for (std::size_t j = 0; j < c; ++j) db[j] += sign * gr[j];
      }
      break;
    }
    case OpKind::kMul: {
      const auto& A = val(n.inputs[0]);
      const auto& B = val(n.inputs[1]);
      auto& dA = adj_of(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * B.data[i];
      auto& dB = adj_of(n.inputs[1]);
      for (std::size_t i = 0; i < g.size(); ++i) dB[i] += g[i] * A.data[i];
      break;
    }
    case OpKind::kRelu: {
      const auto& X = val(n.inputs[0]);
      auto& dX = adj_of(n.inputs[0]);
      const std::size_t c = X.cols();
      for (std::size_t r = 0; r < X.rows(); ++r) {
        if (row_is_zero(&g[r * c], c)) continue;
        for (std::size_t i = r * c; i < (r + 1) * c; ++i) {
          if (X.data[i] > T{0}) dX[i] += g[i];
        }
      }
      break;
    }
    case OpKind::kMaxAxis: {
      const auto& X = val(n.inputs[0]);
      auto& dX = adj_of(n.inputs[0]);
      const std::size_t c = X.cols();
      if (n.axis == 0) {
        for (std::size_t j = 0; j < c; ++j) dX[n.index[j] * c + j] += g[j];
      } else {
        for (std::size_t i = 0; i < X.rows(); ++i) dX[i * c + n.index[i]] += g[i];
      }
      break;
    }
    case OpKind::kMeanAxis: {
      const auto& X = val(n.inputs[0]);
      auto& dX = adj_of(n.inputs[0]);
      const std::size_t r = X.rows(), c = X.cols();
      if (n.axis == 0) {
        const T inv = T{1} / static_cast<T>(r);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) dX[i * c + j] += g[j] * inv;
        }
      } else {
        const T inv = T{1} / static_cast<T>(c);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) dX[i * c + j] += g[i] * inv;
        }
      }
      break;
    }
    case OpKind::kTranspose: {
      const auto& X = val(n.inputs[0]);
      auto& dX = adj_of(n.inputs[0]);
      const std::size_t r = X.rows(), c = X.cols();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) dX[i * c + j] += g[j * r + i];
      }
      break;
    }
    case OpKind::kConcatRows: {
      std::size_t off = 0;
      for (auto in : n.inputs) {
        auto& dP = adj_of(in);
        for (std::size_t i = 0; i < dP.size(); ++i) dP[i] += g[off + i];
        off += dP.size();
      }
      break;
    }
    case OpKind::kL2NormalizeRows: {
      const auto& X = val(n.inputs[0]);
      auto& dX = adj_of(n.inputs[0]);
      const std::size_t r = X.rows(), c = X.cols();
      for (std::size_t i = 0; i < r; ++i) {
        double norm2 = 0, yg = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const double x = X.data[i * c + j];
          norm2 += x * x;
          yg += static_cast<double>(Y.data[i * c + j]) * g[i * c + j];
        }
        const double inv = 1.0 / std::sqrt(norm2);
        for (std::size_t j = 0; j < c; ++j) {
          dX[i * c + j] += static_cast<T>(
              (g[i * c + j] - static_cast<double>(Y.data[i * c + j]) * yg) * inv);
        }
      }
      break;
    }
    case OpKind::kScaleByScalar: {
      const auto& X = val(n.inputs[0]);
      const auto& S = val(n.inputs[1]);
      auto& dX = adj_of(n.inputs[0]);
      double ds = 0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        dX[i] += g[i] * S.data[0];
        ds += static_cast<double>(g[i]) * X.data[i];
      }
      adj_of(n.inputs[1])[0] += static_cast<T>(ds);
      break;
    }
    case OpKind::kExpScalar: {
      adj_of(n.inputs[0])[0] += g[0] * Y.data[0];
      break;
    }
    case OpKind::kLogSoftmaxRows: {
      auto& dX = adj_of(n.inputs[0]);
      const std::size_t r = Y.rows(), c = Y.cols();
      for (std::size_t i = 0; i < r; ++i) {
        double gs = 0;
        for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          const double p = std::exp(static_cast<double>(Y.data[i * c + j]));
          dX[i * c + j] += static_cast<T>(g[i * c + j] - p * gs);
        }
      }
      break;
    }
    case OpKind::kNllDiagonal: {
      const auto& X = val(n.inputs[0]);
      auto& dX = adj_of(n.inputs[0]);
      for (std::size_t i = 0; i < X.rows(); ++i) dX[i * X.cols() + i] -= g[0];
      break;
    }
    case OpKind::kSumAll: {
      auto& dX = adj_of(n.inputs[0]);
      for (auto& v : dX) v += g[0];
      break;
    }
    case OpKind::kLeaf:
      break;
  }
}

template <class T>
std::vector<std::int64_t> BasicGraph<T>::kink_signature() const {
  std::vector<std::int64_t> sig;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.kind == OpKind::kRelu) {
      for (auto v : val(n.inputs[0]).data) sig.push_back(v > T{0} ? 1 : (v < T{0} ? -1 : 0));
    } else if (n.kind == OpKind::kMaxAxis) {
      sig.insert(sig.end(), n.index.begin(), n.index.end());
    }
  }
  return sig;
}

template struct BasicTensor<float>;
template struct BasicTensor<double>;
template class BasicGraph<float>;
template class BasicGraph<double>;

}  // namespace ulip::ag
