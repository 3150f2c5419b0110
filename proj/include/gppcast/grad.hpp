#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Graph is built once (define-then-run): leaves for parameters and inputs,
// then ops that reference earlier nodes. forward() evaluates every node in
// insertion order, which is a topological order by construction, reusing the
// value buffers from the previous evaluation. Nodes none of whose inputs
// changed since their last evaluation are skipped. backward() propagates the
// adjoint of a scalar root back to every leaf.
//
// All ops work on rank-2 arrays; a scalar is a 1x1 array. The scalar type is
// a template parameter so the same graph code can be evaluated in extended
// precision when checking gradients numerically.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gppcast/errors.hpp"

namespace gppcast::grad {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Array {
 public:
  using value_type = T;

  Array() = default;

  explicit Array(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    data_.assign(element_count(shape_), fill);
  }

  Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("array data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Array matrix(std::size_t rows, std::size_t cols, T fill = T{0}) {
    return Array(Shape{rows, cols}, fill);
  }

  static Array scalar(T v) { return Array(Shape{1, 1}, v); }

  static Array identity(std::size_t n) {
    Array a = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) a(i, i) = T{1};
    return a;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar array " + to_string(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Reshape in place, keeping capacity. Contents are unspecified afterwards.
  void resize(std::size_t rows, std::size_t cols) {
    if (shape_.size() != 2 || shape_[0] != rows || shape_[1] != cols) {
      shape_ = Shape{rows, cols};
      data_.resize(rows * cols);
    }
  }

  template <class U>
  Array<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Array<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    using std::isfinite;
    for (const T& v : data_) {
      if (!isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Array& a, const Array& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("array dimensions must be positive, got " + to_string(shape));
      n *= d;
    }
    return n;
  }

  Shape shape_;
  std::vector<T> data_;
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatMul,     // a[m,k] * b[k,n]
  kMatMulNT,   // a[m,k] * b[n,k]^T
  kAdd,
  kAddRow,     // a[m,n] + b[1,n] broadcast over rows
  kSub,
  kMul,
  kMulRow,     // a[m,n] * b[1,n] broadcast over rows
  kScale,      // a * constant
  kSigmoid,
  kTanh,
  kGelu,       // tanh approximation
  kSoftmax,    // row-wise; optional causal mask (row i sees columns <= i)
  kConcat,     // along axis 0 or 1
  kSlice,      // [begin, end) along axis 0 or 1
  kSelectRows,
  kMean,       // all elements -> 1x1
  kSum,        // all elements -> 1x1
  kAbs,
  kLayerNorm,  // row-wise standardization, no affine
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatMul: return "matmul";
    case Op::kMatMulNT: return "matmul_nt";
    case Op::kAdd: return "add";
    case Op::kAddRow: return "add_row";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMulRow: return "mul_row";
    case Op::kScale: return "scale";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kGelu: return "gelu";
    case Op::kSoftmax: return "softmax";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kSelectRows: return "select_rows";
    case Op::kMean: return "mean";
    case Op::kSum: return "sum";
    case Op::kAbs: return "abs";
    case Op::kLayerNorm: return "layer_norm";
  }
  return "?";
}

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(NodeId, NodeId) = default;
};

template <class T>
class Graph {
 public:
  // A leaf holding trainable values. Gradients are reported for these.
  NodeId parameter(std::string name, std::size_t rows, std::size_t cols) {
    Node& n = push(Op::kLeaf, {}, rows, cols);
    n.name = std::move(name);
    n.is_parameter = true;
    n.requires_grad = true;
    return last();
  }

  // A leaf holding data (inputs, targets, masks). No gradient is reported.
  NodeId input(std::string name, std::size_t rows, std::size_t cols) {
    Node& n = push(Op::kLeaf, {}, rows, cols);
    n.name = std::move(name);
    return last();
  }

  // An input leaf bound once, at construction.
  NodeId constant(const Array<T>& value) {
    const NodeId id = input("const", value.rows(), value.cols());
    set(id, value);
    return id;
  }

  NodeId matmul(NodeId a, NodeId b) {
    require(cols(a) == rows(b), "matmul", a, b);
    return push_op(Op::kMatMul, {a, b}, rows(a), cols(b));
  }

  NodeId matmul_nt(NodeId a, NodeId b) {
    require(cols(a) == cols(b), "matmul_nt", a, b);
    return push_op(Op::kMatMulNT, {a, b}, rows(a), rows(b));
  }

  NodeId add(NodeId a, NodeId b) {
    require(same_shape(a, b), "add", a, b);
    return push_op(Op::kAdd, {a, b}, rows(a), cols(a));
  }

  NodeId add_row(NodeId a, NodeId row) {
    require(rows(row) == 1 && cols(row) == cols(a), "add_row", a, row);
    return push_op(Op::kAddRow, {a, row}, rows(a), cols(a));
  }

  NodeId sub(NodeId a, NodeId b) {
    require(same_shape(a, b), "sub", a, b);
    return push_op(Op::kSub, {a, b}, rows(a), cols(a));
  }

  NodeId mul(NodeId a, NodeId b) {
    require(same_shape(a, b), "mul", a, b);
    return push_op(Op::kMul, {a, b}, rows(a), cols(a));
  }

  NodeId mul_row(NodeId a, NodeId row) {
    require(rows(row) == 1 && cols(row) == cols(a), "mul_row", a, row);
    return push_op(Op::kMulRow, {a, row}, rows(a), cols(a));
  }

  NodeId scale(NodeId a, T factor) {
    const NodeId id = push_op(Op::kScale, {a}, rows(a), cols(a));
    nodes_[id.index].factor = factor;
    return id;
  }

  NodeId sigmoid(NodeId a) { return push_op(Op::kSigmoid, {a}, rows(a), cols(a)); }
  NodeId tanh(NodeId a) { return push_op(Op::kTanh, {a}, rows(a), cols(a)); }
  NodeId gelu(NodeId a) { return push_op(Op::kGelu, {a}, rows(a), cols(a)); }
  NodeId abs(NodeId a) { return push_op(Op::kAbs, {a}, rows(a), cols(a)); }
  NodeId mean(NodeId a) { return push_op(Op::kMean, {a}, 1, 1); }
  NodeId sum(NodeId a) { return push_op(Op::kSum, {a}, 1, 1); }

  NodeId softmax(NodeId a, bool causal = false) {
    if (causal && cols(a) < rows(a)) {
      throw ShapeError("causal softmax needs at least as many columns as rows, got " +
                       to_string(shape(a)));
    }
    const NodeId id = push_op(Op::kSoftmax, {a}, rows(a), cols(a));
    nodes_[id.index].causal = causal;
    return id;
  }

  NodeId layer_norm(NodeId a, T epsilon = T(1e-5)) {
    const NodeId id = push_op(Op::kLayerNorm, {a}, rows(a), cols(a));
    nodes_[id.index].factor = epsilon;
    return id;
  }

  NodeId concat(const std::vector<NodeId>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero arrays");
    if (axis != 0 && axis != 1) throw ShapeError("concat axis must be 0 or 1");
    std::size_t r = rows(parts[0]), c = cols(parts[0]);
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const bool ok = axis == 0 ? cols(parts[i]) == c : rows(parts[i]) == r;
      require(ok, "concat", parts[0], parts[i]);
      (axis == 0 ? r : c) += axis == 0 ? rows(parts[i]) : cols(parts[i]);
    }
    const NodeId id = push_op(Op::kConcat, parts, r, c);
    nodes_[id.index].axis = axis;
    return id;
  }

  NodeId slice(NodeId a, int axis, std::size_t begin, std::size_t end) {
    if (axis != 0 && axis != 1) throw ShapeError("slice axis must be 0 or 1");
    const std::size_t extent = axis == 0 ? rows(a) : cols(a);
    if (begin >= end || end > extent) {
      throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                       ") out of range for axis of length " + std::to_string(extent));
    }
    const NodeId id = axis == 0 ? push_op(Op::kSlice, {a}, end - begin, cols(a))
                                : push_op(Op::kSlice, {a}, rows(a), end - begin);
    Node& n = nodes_[id.index];
    n.axis = axis;
    n.begin = begin;
    return id;
  }

  NodeId select_rows(NodeId a, std::vector<std::size_t> indices) {
    if (indices.empty()) throw ShapeError("select_rows with no indices");
    for (std::size_t i : indices) {
      if (i >= rows(a)) throw ShapeError("select_rows index out of range");
    }
    const NodeId id = push_op(Op::kSelectRows, {a}, indices.size(), cols(a));
    nodes_[id.index].indices = std::move(indices);
    return id;
  }

  // --- evaluation -------------------------------------------------------

  void set(NodeId leaf, const Array<T>& value) {
    Node& n = leaf_node(leaf);
    if (value.rank() != 2 || value.rows() != n.rows || value.cols() != n.cols) {
      throw ShapeError("binding " + to_string(value.shape()) + " to leaf '" + n.name +
                       "' of shape " + to_string({n.rows, n.cols}));
    }
    n.value = value;
    n.bound = true;
    n.stamp = ++clock_;
  }

  template <class U>
  void set_from(NodeId leaf, std::span<const U> values) {
    Node& n = leaf_node(leaf);
    if (values.size() != n.rows * n.cols) {
      throw ShapeError("binding " + std::to_string(values.size()) + " values to leaf '" +
                       n.name + "' of shape " + to_string({n.rows, n.cols}));
    }
    n.value.resize(n.rows, n.cols);
    auto dst = n.value.data();
    for (std::size_t i = 0; i < values.size(); ++i) dst[i] = static_cast<T>(values[i]);
    n.bound = true;
    n.stamp = ++clock_;
  }

  // Mutable access to a bound leaf's buffer, for callers that fill it in
  // place (packing inputs, drawing dropout masks).
  Array<T>& leaf_buffer(NodeId leaf) {
    Node& n = leaf_node(leaf);
    n.value.resize(n.rows, n.cols);
    n.bound = true;
    n.stamp = ++clock_;
    return n.value;
  }

  // Evaluates nodes [0, upto] in order. Throws NumericError on the first op
  // that produces a non-finite value.
  void forward(NodeId upto) {
    check_node(upto);
    for (std::uint32_t i = 0; i <= upto.index; ++i) evaluate(i);
  }

  void forward() {
    if (nodes_.empty()) return;
    forward(last());
  }

  using Bindings = std::vector<std::pair<NodeId, Array<T>>>;

  const Array<T>& forward(NodeId root, const Bindings& bindings) {
    for (const auto& [leaf, value] : bindings) set(leaf, value);
    forward(root);
    return value(root);
  }

  const Array<T>& value(NodeId id) const {
    check_node(id);
    return nodes_[id.index].value;
  }

  // Accumulates d(root)/d(node) for every node upstream of root. root must
  // be 1x1 and forward() must have been run through root.
  void backward(NodeId root) {
    check_node(root);
    Node& r = nodes_[root.index];
    if (r.rows != 1 || r.cols != 1) {
      throw ShapeError("backward root must be scalar, got " + to_string({r.rows, r.cols}));
    }
    for (std::uint32_t i = 0; i <= root.index; ++i) {
      Node& n = nodes_[i];
      n.reached = false;
      if (n.requires_grad) {
        n.grad.resize(n.rows, n.cols);
        n.grad.fill(T{0});
      }
    }
    if (!r.requires_grad) return;
    r.grad[0] = T{1};
    r.reached = true;
    for (std::uint32_t i = root.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.reached || n.op == Op::kLeaf) continue;
      propagate(n);
    }
  }

  // Gradient of the last backward() root w.r.t. a node (zero if the node
  // does not influence it).
  const Array<T>& grad(NodeId id) const {
    check_node(id);
    const Node& n = nodes_[id.index];
    if (!n.requires_grad) throw ShapeError("node '" + n.name + "' does not carry a gradient");
    return n.grad;
  }

  std::map<std::string, Array<T>> parameter_gradients() const {
    std::map<std::string, Array<T>> out;
    for (const Node& n : nodes_) {
      if (n.is_parameter) out.emplace(n.name, n.grad);
    }
    return out;
  }

  std::vector<std::pair<std::string, NodeId>> parameters() const {
    std::vector<std::pair<std::string, NodeId>> out;
    for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].is_parameter) out.emplace_back(nodes_[i].name, NodeId{i});
    }
    return out;
  }

  Shape shape(NodeId id) const { return {rows(id), cols(id)}; }
  std::size_t rows(NodeId id) const { return nodes_.at(id.index).rows; }
  std::size_t cols(NodeId id) const { return nodes_.at(id.index).cols; }
  std::size_t size() const { return nodes_.size(); }
  Op op(NodeId id) const { return nodes_.at(id.index).op; }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<std::uint32_t> inputs;
    std::size_t rows = 0;
    std::size_t cols = 0;
    Array<T> value;
    Array<T> grad;
    std::vector<T> aux;  // per-row cache (layer norm inverse std)
    std::vector<std::size_t> indices;
    std::string name;
    T factor = T{1};
    std::size_t begin = 0;
    int axis = 0;
    bool causal = false;
    bool is_parameter = false;
    bool requires_grad = false;
    bool bound = false;
    bool reached = false;
    bool evaluated = false;
    // Logical time of the last change to value; a node is stale when an
    // input's stamp is newer than its own.
    std::uint64_t stamp = 0;
  };

  NodeId last() const { return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)}; }

  Node& push(Op op, const std::vector<NodeId>& inputs, std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) throw ShapeError("node dimensions must be positive");
    Node n;
    n.op = op;
    n.rows = rows;
    n.cols = cols;
    n.inputs.reserve(inputs.size());
    for (NodeId in : inputs) {
      check_node(in);
      n.inputs.push_back(in.index);
      n.requires_grad = n.requires_grad || nodes_[in.index].requires_grad;
    }
    nodes_.push_back(std::move(n));
    return nodes_.back();
  }

  NodeId push_op(Op op, const std::vector<NodeId>& inputs, std::size_t rows, std::size_t cols) {
    push(op, inputs, rows, cols);
    return last();
  }

  void check_node(NodeId id) const {
    if (id.index >= nodes_.size()) throw ShapeError("unknown node id");
  }

  Node& leaf_node(NodeId id) {
    check_node(id);
    Node& n = nodes_[id.index];
    if (n.op != Op::kLeaf) throw ShapeError("only leaves can be bound");
    return n;
  }

  bool same_shape(NodeId a, NodeId b) const { return rows(a) == rows(b) && cols(a) == cols(b); }

  void require(bool ok, const char* what, NodeId a, NodeId b) const {
    if (!ok) {
      throw ShapeError(std::string(what) + ": incompatible shapes " + to_string(shape(a)) +
                       " and " + to_string(shape(b)));
    }
  }

  static T gelu_value(T x) {
    using std::tanh;
    const T c = static_cast<T>(std::numbers::sqrt2 * std::numbers::inv_sqrtpi);  // sqrt(2/pi)
    return T(0.5) * x * (T(1) + tanh(c * (x + T(0.044715) * x * x * x)));
  }

  static T gelu_derivative(T x) {
    using std::tanh;
    const T c = static_cast<T>(std::numbers::sqrt2 * std::numbers::inv_sqrtpi);
    const T u = c * (x + T(0.044715) * x * x * x);
    const T th = tanh(u);
    const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
  }

  void evaluate(std::uint32_t index) {
    using std::exp;
    using std::sqrt;
    using std::tanh;
    Node& n = nodes_[index];
    if (n.op == Op::kLeaf) {
      if (!n.bound) throw ShapeError("leaf '" + n.name + "' is not bound");
      return;
    }
    if (n.evaluated) {
      bool stale = false;
      for (std::uint32_t in : n.inputs) stale = stale || nodes_[in].stamp > n.stamp;
      if (!stale) return;
    }
    n.evaluated = false;
    n.value.resize(n.rows, n.cols);
    T* out = n.value.data().data();
    const std::size_t count = n.rows * n.cols;
    const Array<T>& a = nodes_[n.inputs[0]].value;
    const T* av = a.data().data();
    switch (n.op) {
      case Op::kMatMul: {
        const Array<T>& b = nodes_[n.inputs[1]].value;
        const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
        const T* bv = b.data().data();
        std::fill(out, out + count, T{0});
        for (std::size_t i = 0; i < m; ++i) {
          T* orow = out + i * p;
          for (std::size_t j = 0; j < k; ++j) {
            const T aij = av[i * k + j];
            const T* brow = bv + j * p;
            for (std::size_t c = 0; c < p; ++c) orow[c] += aij * brow[c];
          }
        }
        break;
      }
      case Op::kMatMulNT: {
        const Array<T>& b = nodes_[n.inputs[1]].value;
        const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
        const T* bv = b.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < p; ++j) {
            T acc{0};
            for (std::size_t c = 0; c < k; ++c) acc += av[i * k + c] * bv[j * k + c];
            out[i * p + j] = acc;
          }
        }
        break;
      }
      case Op::kAdd: {
        const T* bv = nodes_[n.inputs[1]].value.data().data();
        for (std::size_t i = 0; i < count; ++i) out[i] = av[i] + bv[i];
        break;
      }
      case Op::kAddRow: {
        const T* bv = nodes_[n.inputs[1]].value.data().data();
        for (std::size_t i = 0; i < n.rows; ++i)
          for (std::size_t j = 0; j < n.cols; ++j) out[i * n.cols + j] = av[i * n.cols + j] + bv[j];
        break;
      }
      case Op::kSub: {
        const T* bv = nodes_[n.inputs[1]].value.data().data();
        for (std::size_t i = 0; i < count; ++i) out[i] = av[i] - bv[i];
        break;
      }
      case Op::kMul: {
        const T* bv = nodes_[n.inputs[1]].value.data().data();
        for (std::size_t i = 0; i < count; ++i) out[i] = av[i] * bv[i];
        break;
      }
      case Op::kMulRow: {
        const T* bv = nodes_[n.inputs[1]].value.data().data();
        for (std::size_t i = 0; i < n.rows; ++i)
          for (std::size_t j = 0; j < n.cols; ++j) out[i * n.cols + j] = av[i * n.cols + j] * bv[j];
        break;
      }
      case Op::kScale:
        for (std::size_t i = 0; i < count; ++i) out[i] = av[i] * n.factor;
        break;
      case Op::kSigmoid:
        for (std::size_t i = 0; i < count; ++i) {
          if (av[i] >= T{0}) {
            out[i] = T(1) / (T(1) + exp(-av[i]));
          } else {
            const T e = exp(av[i]);
            out[i] = e / (T(1) + e);
          }
        }
        break;
      case Op::kTanh:
        for (std::size_t i = 0; i < count; ++i) out[i] = tanh(av[i]);
        break;
      case Op::kGelu:
        for (std::size_t i = 0; i < count; ++i) out[i] = gelu_value(av[i]);
        break;
      case Op::kAbs:
        for (std::size_t i = 0; i < count; ++i) out[i] = av[i] < T{0} ? -av[i] : av[i];
        break;
      case Op::kSoftmax: {
        for (std::size_t i = 0; i < n.rows; ++i) {
          const std::size_t width = n.causal ? i + 1 : n.cols;
          const T* in = av + i * n.cols;
          T* o = out + i * n.cols;
          T mx = in[0];
          for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
          T total{0};
          for (std::size_t j = 0; j < width; ++j) {
            o[j] = exp(in[j] - mx);
            total += o[j];
          }
          for (std::size_t j = 0; j < width; ++j) o[j] /= total;
          for (std::size_t j = width; j < n.cols; ++j) o[j] = T{0};
        }
        break;
      }
      case Op::kLayerNorm: {
        n.aux.resize(n.rows);
        const T inv_cols = T(1) / static_cast<T>(n.cols);
        for (std::size_t i = 0; i < n.rows; ++i) {
          const T* in = av + i * n.cols;
          T mu{0};
          for (std::size_t j = 0; j < n.cols; ++j) mu += in[j];
          mu *= inv_cols;
          T var{0};
          for (std::size_t j = 0; j < n.cols; ++j) var += (in[j] - mu) * (in[j] - mu);
          var *= inv_cols;
          const T inv_std = T(1) / sqrt(var + n.factor);
          n.aux[i] = inv_std;
          for (std::size_t j = 0; j < n.cols; ++j) out[i * n.cols + j] = (in[j] - mu) * inv_std;
        }
        break;
      }
      case Op::kConcat: {
        std::size_t offset = 0;
        for (std::uint32_t in : n.inputs) {
          const Array<T>& part = nodes_[in].value;
          if (n.axis == 0) {
            std::copy(part.data().begin(), part.data().end(), out + offset * n.cols);
            offset += part.rows();
          } else {
            for (std::size_t i = 0; i < n.rows; ++i) {
              auto src = part.row(i);
              std::copy(src.begin(), src.end(), out + i * n.cols + offset);
            }
            offset += part.cols();
          }
        }
        break;
      }
      case Op::kSlice: {
        const std::size_t ac = a.cols();
        if (n.axis == 0) {
          std::copy(av + n.begin * ac, av + (n.begin + n.rows) * ac, out);
        } else {
          for (std::size_t i = 0; i < n.rows; ++i)
            std::copy(av + i * ac + n.begin, av + i * ac + n.begin + n.cols, out + i * n.cols);
        }
        break;
      }
      case Op::kSelectRows:
        for (std::size_t i = 0; i < n.indices.size(); ++i)
          std::copy(av + n.indices[i] * n.cols, av + (n.indices[i] + 1) * n.cols, out + i * n.cols);
        break;
      case Op::kMean:
      case Op::kSum: {
        T acc{0};
        for (std::size_t i = 0; i < a.size(); ++i) acc += av[i];
        out[0] = n.op == Op::kMean ? acc / static_cast<T>(a.size()) : acc;
        break;
      }
      case Op::kLeaf:
        break;
    }
    if (!n.value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op_name(n.op) +
                         " (node " + std::to_string(index) + ")");
    }
    n.evaluated = true;
    n.stamp = ++clock_;
  }

  // Accumulates n.grad into the gradients of n's inputs.
  void propagate(Node& n) {
    const T* g = n.grad.data().data();
    const std::size_t count = n.rows * n.cols;
    Node& na = nodes_[n.inputs[0]];
    const T* av = na.value.data().data();
    T* ga = na.requires_grad ? na.grad.data().data() : nullptr;
    if (ga != nullptr) na.reached = true;
    auto second = [&]() -> Node& { return nodes_[n.inputs[1]]; };
    T* gb = nullptr;
    if (n.inputs.size() > 1 && n.op != Op::kConcat) {
      Node& nb = second();
      if (nb.requires_grad) {
        gb = nb.grad.data().data();
        nb.reached = true;
      }
    }
    const T* yv = n.value.data().data();
    switch (n.op) {
      case Op::kMatMul: {
        const Array<T>& b = second().value;
        const std::size_t m = na.rows, k = na.cols, p = b.cols();
        const T* bv = b.data().data();
        if (ga) {  // dA = dC * B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              T acc{0};
              for (std::size_t c = 0; c < p; ++c) acc += g[i * p + c] * bv[j * p + c];
              ga[i * k + j] += acc;
            }
        }
        if (gb) {  // dB = A^T * dC
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const T aij = av[i * k + j];
              for (std::size_t c = 0; c < p; ++c) gb[j * p + c] += aij * g[i * p + c];
            }
        }
        break;
      }
      case Op::kMatMulNT: {
        const Array<T>& b = second().value;
        const std::size_t m = na.rows, k = na.cols, p = b.rows();
        const T* bv = b.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            const T gij = g[i * p + j];
            if (ga)
              for (std::size_t c = 0; c < k; ++c) ga[i * k + c] += gij * bv[j * k + c];
            if (gb)
              for (std::size_t c = 0; c < k; ++c) gb[j * k + c] += gij * av[i * k + c];
          }
        break;
      }
      case Op::kAdd:
        if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += g[i];
        if (gb) for (std::size_t i = 0; i < count; ++i) gb[i] += g[i];
        break;
      case Op::kSub:
        if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += g[i];
        if (gb) for (std::size_t i = 0; i < count; ++i) gb[i] -= g[i];
        break;
      case Op::kAddRow:
        if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += g[i];
        if (gb)
          for (std::size_t i = 0; i < n.rows; ++i)
            for (std::size_t j = 0; j < n.cols; ++j) gb[j] += g[i * n.cols + j];
        break;
      case Op::kMul: {
        const T* bv = second().value.data().data();
        if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * bv[i];
        if (gb) for (std::size_t i = 0; i < count; ++i) gb[i] += g[i] * av[i];
        break;
      }
      case Op::kMulRow: {
        const T* bv = second().value.data().data();
        for (std::size_t i = 0; i < n.rows; ++i)
          for (std::size_t j = 0; j < n.cols; ++j) {
            const std::size_t idx = i * n.cols + j;
            if (ga) ga[idx] += g[idx] * bv[j];
            if (gb) gb[j] += g[idx] * av[idx];
          }
        break;
      }
      case Op::kScale:
        if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * n.factor;
        break;
      case Op::kSigmoid:
        if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * yv[i] * (T(1) - yv[i]);
        break;
      case Op::kTanh:
        if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * (T(1) - yv[i] * yv[i]);
        break;
      case Op::kGelu:
        if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * gelu_derivative(av[i]);
        break;
      case Op::kAbs:
        // Subgradient 0 at the kink.
        if (ga)
          for (std::size_t i = 0; i < count; ++i)
            ga[i] += av[i] > T{0} ? g[i] : (av[i] < T{0} ? -g[i] : T{0});
        break;
      case Op::kSoftmax:
        if (ga)
          for (std::size_t i = 0; i < n.rows; ++i) {
            const T* y = yv + i * n.cols;
            const T* gy = g + i * n.cols;
            T dot{0};
            for (std::size_t j = 0; j < n.cols; ++j) dot += gy[j] * y[j];
            for (std::size_t j = 0; j < n.cols; ++j) ga[i * n.cols + j] += y[j] * (gy[j] - dot);
          }
        break;
      case Op::kLayerNorm:
        if (ga) {
          const T inv_cols = T(1) / static_cast<T>(n.cols);
          for (std::size_t i = 0; i < n.rows; ++i) {
            const T* y = yv + i * n.cols;
            const T* gy = g + i * n.cols;
            T mean_g{0}, mean_gy{0};
            for (std::size_t j = 0; j < n.cols; ++j) {
              mean_g += gy[j];
              mean_gy += gy[j] * y[j];
            }
            mean_g *= inv_cols;
            mean_gy *= inv_cols;
            for (std::size_t j = 0; j < n.cols; ++j)
              ga[i * n.cols + j] += n.aux[i] * (gy[j] - mean_g - y[j] * mean_gy);
          }
        }
        break;
      case Op::kConcat: {
        std::size_t offset = 0;
        for (std::uint32_t in : n.inputs) {
          Node& part = nodes_[in];
          const std::size_t pr = part.rows, pc = part.cols;
          if (part.requires_grad) {
            part.reached = true;
            T* gp = part.grad.data().data();
            if (n.axis == 0) {
              for (std::size_t i = 0; i < pr * pc; ++i) gp[i] += g[offset * n.cols + i];
            } else {
              for (std::size_t i = 0; i < pr; ++i)
                for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * n.cols + offset + j];
            }
          }
          offset += n.axis == 0 ? pr : pc;
        }
        break;
      }
      case Op::kSlice:
        if (ga) {
          const std::size_t ac = na.cols;
          if (n.axis == 0) {
            for (std::size_t i = 0; i < count; ++i) ga[n.begin * ac + i] += g[i];
          } else {
            for (std::size_t i = 0; i < n.rows; ++i)
              for (std::size_t j = 0; j < n.cols; ++j) ga[i * ac + n.begin + j] += g[i * n.cols + j];
          }
        }
        break;
      case Op::kSelectRows:
        if (ga)
          for (std::size_t i = 0; i < n.indices.size(); ++i)
            for (std::size_t j = 0; j < n.cols; ++j) ga[n.indices[i] * n.cols + j] += g[i * n.cols + j];
        break;
      case Op::kMean:
        if (ga) {
          const T d = g[0] / static_cast<T>(na.rows * na.cols);
          for (std::size_t i = 0; i < na.rows * na.cols; ++i) ga[i] += d;
        }
        break;
      case Op::kSum:
        if (ga) for (std::size_t i = 0; i < na.rows * na.cols; ++i) ga[i] += g[0];
        break;
      case Op::kLeaf:
        break;
    }
  }

  std::vector<Node> nodes_;
  std::uint64_t clock_ = 0;
};

// Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-12).
// value_fn maps an Array to a scalar; analytic is its gradient at x.
template <class T, class ValueFn>
double finite_diff_check(ValueFn&& value_fn, const Array<T>& x, const Array<T>& analytic, T step) {
  using std::abs;
  using std::isfinite;
  if (analytic.shape() != x.shape()) throw ShapeError("gradient shape does not match input");
  Array<T> probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T original = probe[i];
    probe[i] = original + step;
    const T up = value_fn(probe);
    probe[i] = original - step;
    const T down = value_fn(probe);
    probe[i] = original;
    if (!isfinite(up) || !isfinite(down)) {
      throw NumericError("non-finite function value near coordinate " + std::to_string(i));
    }
    const T numeric = (up - down) / (T(2) * step);
    const double denom = std::max(static_cast<double>(abs(analytic[i])), 1e-12);
    worst = std::max(worst, static_cast<double>(abs(analytic[i] - numeric)) / denom);
  }
  return worst;
}

}  // namespace gppcast::grad
