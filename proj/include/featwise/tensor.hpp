#pragma once

// Dense 64-bit tensors with a tape-based reverse-mode differentiation graph.
//
// A Tensor is an immutable value (shape + row-major data). When any input of
// an op is attached to a Graph, the result is appended to that graph as an
// OpRecord, so `backward` can walk the records in reverse. Every backward rule
// is itself written in terms of the public ops, which means a gradient pass run
// with `create_graph = true` records its own computation and the returned
// gradients can be differentiated again.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "featwise/errors.hpp"

namespace featwise {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  div,
  matmul,
  transpose,
  relu,
  tanh,
  exp,
  log,
  softplus,
  sigmoid,
  square,
  sqrt,
  scale,
  sum,
  sum_to,
  broadcast,
  max,
  concat,
  slice,
  gather_rows,
  scatter_rows,
  reshape,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::softplus: return "softplus";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::square: return "square";
    case OpKind::sqrt: return "sqrt";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::sum_to: return "sum_to";
    case OpKind::broadcast: return "broadcast";
    case OpKind::max: return "max";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::scatter_rows: return "scatter_rows";
    case OpKind::reshape: return "reshape";
  }
  return "unknown";
}

class Graph;

class Tensor {
 public:
  static constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> values)
      : data_(std::make_shared<const std::vector<double>>(std::move(values))), shape_(std::move(shape)) {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    if (data_->size() != shape_numel(shape_)) {
      throw DimensionError("tensor of shape " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                           " values, got " + std::to_string(data_->size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor full(Shape shape, double v) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("from_rows: ragged rows");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_->size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::span<const double> values() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * shape_.back() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  bool attached() const { return graph_ != nullptr; }
  std::size_t node() const { return node_; }
  const std::shared_ptr<Graph>& graph() const { return graph_; }
  const std::shared_ptr<const std::vector<double>>& storage() const { return data_; }

  Tensor detach() const { return Tensor(data_, shape_, nullptr, kNoNode); }

  // Same shape and bit-identical values.
  bool identical(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return std::equal(data_->begin(), data_->end(), other.data_->begin(),
                      [](double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); });
  }

 private:
  friend class Graph;
  friend std::vector<Tensor> backward(const Tensor&, std::span<const Tensor>, bool);

  Tensor(std::shared_ptr<const std::vector<double>> data, Shape shape, std::shared_ptr<Graph> graph, std::size_t node)
      : data_(std::move(data)), shape_(std::move(shape)), graph_(std::move(graph)), node_(node) {}

  std::shared_ptr<const std::vector<double>> data_;
  Shape shape_;
  std::shared_ptr<Graph> graph_;
  std::size_t node_ = kNoNode;
};

struct BackwardContext {
  std::span<const Tensor> inputs;
  const Tensor& output;
  const Tensor& grad;
  std::span<const char> needs;  // needs[i] != 0 when input i wants a gradient
};

// Returns one gradient per input; entries for inputs that do not need one are ignored.
using BackwardFn = std::function<std::vector<Tensor>(const BackwardContext&)>;

struct OpRecord {
  OpKind kind = OpKind::leaf;
  std::vector<Tensor> inputs;            // detached input values
  std::vector<std::size_t> input_nodes;  // Tensor::kNoNode for constants
  Tensor output;                         // detached output value
  BackwardFn backward;
};

// Ordered op records. Ids are indices into the record list and every input id
// precedes its consumer.
class Graph : public std::enable_shared_from_this<Graph> {
 public:
  static std::shared_ptr<Graph> create() { return std::make_shared<Graph>(); }

  // Registers `value` as a differentiable leaf and returns the attached handle.
  Tensor leaf(const Tensor& value) {
    OpRecord rec;
    rec.kind = OpKind::leaf;
    rec.output = value.detach();
    records_.push_back(std::move(rec));
    return Tensor(value.storage(), value.shape(), shared_from_this(), records_.size() - 1);
  }

  std::size_t size() const { return records_.size(); }
  const OpRecord& record(std::size_t id) const { return records_.at(id); }

  Tensor append(OpKind kind, std::span<const Tensor> inputs, const Tensor& output, BackwardFn fn) {
    OpRecord rec;
    rec.kind = kind;
    rec.inputs.reserve(inputs.size());
    rec.input_nodes.reserve(inputs.size());
    for (const Tensor& in : inputs) {
      rec.inputs.push_back(in.detach());
      rec.input_nodes.push_back(in.attached() ? in.node() : Tensor::kNoNode);
    }
    rec.output = output.detach();
    rec.backward = std::move(fn);
    records_.push_back(std::move(rec));
    return Tensor(output.storage(), output.shape(), shared_from_this(), records_.size() - 1);
  }

 private:
  // deque: references stay valid while backward passes append new records.
  std::deque<OpRecord> records_;
};

namespace detail {

inline thread_local bool g_recording = true;

}  // namespace detail

// Scoped switch for op recording. Ops executed while recording is off return
// detached tensors even if their inputs are attached.
class RecordingGuard {
 public:
  explicit RecordingGuard(bool enabled) : previous_(detail::g_recording) { detail::g_recording = enabled; }
  ~RecordingGuard() { detail::g_recording = previous_; }
  RecordingGuard(const RecordingGuard&) = delete;
  RecordingGuard& operator=(const RecordingGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public RecordingGuard {
 public:
  NoGradGuard() : RecordingGuard(false) {}
};

namespace detail {

inline std::shared_ptr<Graph> common_graph(std::span<const Tensor> inputs, OpKind kind) {
  std::shared_ptr<Graph> graph;
  for (const Tensor& t : inputs) {
    if (!t.attached()) continue;
    if (graph && graph != t.graph()) {
      throw ContractError(std::string(op_name(kind)) + ": inputs belong to different graphs");
    }
    graph = t.graph();
  }
  return graph;
}

inline Tensor finish(OpKind kind, std::vector<Tensor> inputs, Shape shape, std::vector<double> values, BackwardFn fn) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name(kind)) + ": produced a non-finite value");
    }
  }
  Tensor out(std::move(shape), std::move(values));
  if (!g_recording) return out;
  auto graph = common_graph(inputs, kind);
  if (!graph) return out;
  return graph->append(kind, inputs, out, std::move(fn));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, OpKind kind) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op_name(kind)) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` laid over `out` (trailing alignment); broadcast dims get stride 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls visit(out_index, in_offsets...) for every element of `out`.
template <std::size_t N, class Visit>
void for_each_broadcast(const Shape& out, const std::array<const Shape*, N>& ins, Visit&& visit) {
  std::array<std::vector<std::size_t>, N> strides;
  for (std::size_t j = 0; j < N; ++j) strides[j] = broadcast_strides(*ins[j], out);
  const std::size_t total = shape_numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::array<std::size_t, N> offs{};
  for (std::size_t n = 0; n < total; ++n) {
    visit(n, offs);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      for (std::size_t j = 0; j < N; ++j) offs[j] += strides[j][d];
      if (idx[d] < out[d]) break;
      for (std::size_t j = 0; j < N; ++j) offs[j] -= strides[j][d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class F>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, F f, BackwardFn fn) {
  Shape out = broadcast_shape(a.shape(), b.shape(), kind);
  std::vector<double> values(shape_numel(out));
  const auto av = a.values();
  const auto bv = b.values();
  if (a.shape() == out && b.shape() == out) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = f(av[i], bv[i]);
  } else {
    for_each_broadcast<2>(out, {&a.shape(), &b.shape()},
                          [&](std::size_t n, const std::array<std::size_t, 2>& o) { values[n] = f(av[o[0]], bv[o[1]]); });
  }
  return finish(kind, {a, b}, std::move(out), std::move(values), std::move(fn));
}

template <class F>
Tensor unary(OpKind kind, const Tensor& x, F f, BackwardFn fn) {
  std::vector<double> values(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = f(xv[i]);
  return finish(kind, {x}, x.shape(), std::move(values), std::move(fn));
}

inline double softplus_value(double x) { return x > 30.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Splits shape around `axis` into (outer, axis extent, inner).
inline std::array<std::size_t, 3> axis_split(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor sum_to(const Tensor& x, const Shape& target);
Tensor broadcast_to(const Tensor& x, const Shape& target);
Tensor sum(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);
Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& rows, std::size_t row_count);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor sigmoid(const Tensor& x);

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(OpKind::add, a, b, [](double x, double y) { return x + y; }, [](const BackwardContext& c) {
    return std::vector<Tensor>{sum_to(c.grad, c.inputs[0].shape()), sum_to(c.grad, c.inputs[1].shape())};
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(OpKind::sub, a, b, [](double x, double y) { return x - y; }, [](const BackwardContext& c) {
    std::vector<Tensor> g(2);
    if (c.needs[0]) g[0] = sum_to(c.grad, c.inputs[0].shape());
    if (c.needs[1]) g[1] = sum_to(scale(c.grad, -1.0), c.inputs[1].shape());
    return g;
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(OpKind::mul, a, b, [](double x, double y) { return x * y; }, [](const BackwardContext& c) {
    std::vector<Tensor> g(2);
    if (c.needs[0]) g[0] = sum_to(mul(c.grad, c.inputs[1]), c.inputs[0].shape());
    if (c.needs[1]) g[1] = sum_to(mul(c.grad, c.inputs[0]), c.inputs[1].shape());
    return g;
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(OpKind::div, a, b, [](double x, double y) { return x / y; }, [](const BackwardContext& c) {
    std::vector<Tensor> g(2);
    if (c.needs[0]) g[0] = sum_to(div(c.grad, c.inputs[1]), c.inputs[0].shape());
    if (c.needs[1]) {
      // d(a/b)/db = -(a/b)/b
      g[1] = sum_to(scale(mul(c.grad, div(c.output, c.inputs[1])), -1.0), c.inputs[1].shape());
    }
    return g;
  });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return detail::finish(OpKind::matmul, {a, b}, Shape{m, n}, std::move(out), [](const BackwardContext& c) {
    std::vector<Tensor> g(2);
    if (c.needs[0]) g[0] = matmul(c.grad, transpose(c.inputs[1]));
    if (c.needs[1]) g[1] = matmul(transpose(c.inputs[0]), c.grad);
    return g;
  });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), cols = x.dim(1);
  std::vector<double> out(r * cols);
  const auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * r + i] = xv[i * cols + j];
  return detail::finish(OpKind::transpose, {x}, Shape{cols, r}, std::move(out),
                        [](const BackwardContext& c) { return std::vector<Tensor>{transpose(c.grad)}; });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(OpKind::scale, x, [factor](double v) { return factor * v; }, [factor](const BackwardContext& c) {
    return std::vector<Tensor>{scale(c.grad, factor)};
  });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(OpKind::relu, x, [](double v) { return v > 0.0 ? v : 0.0; }, [](const BackwardContext& c) {
    const auto xv = c.inputs[0].values();
    std::vector<double> mask(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) mask[i] = xv[i] > 0.0 ? 1.0 : 0.0;
    return std::vector<Tensor>{mul(c.grad, Tensor(c.inputs[0].shape(), std::move(mask)))};
  });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(OpKind::tanh, x, [](double v) { return std::tanh(v); }, [](const BackwardContext& c) {
    // 1 - y^2
    return std::vector<Tensor>{sub(c.grad, mul(c.grad, mul(c.output, c.output)))};
  });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(OpKind::exp, x, [](double v) { return std::exp(v); },
                       [](const BackwardContext& c) { return std::vector<Tensor>{mul(c.grad, c.output)}; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(OpKind::log, x, [](double v) { return std::log(v); },
                       [](const BackwardContext& c) { return std::vector<Tensor>{div(c.grad, c.inputs[0])}; });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(OpKind::softplus, x, detail::softplus_value,
                       [](const BackwardContext& c) { return std::vector<Tensor>{mul(c.grad, sigmoid(c.inputs[0]))}; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(OpKind::sigmoid, x, detail::sigmoid_value, [](const BackwardContext& c) {
    // y (1 - y)
    return std::vector<Tensor>{mul(c.grad, sub(c.output, mul(c.output, c.output)))};
  });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(OpKind::square, x, [](double v) { return v * v; }, [](const BackwardContext& c) {
    return std::vector<Tensor>{scale(mul(c.grad, c.inputs[0]), 2.0)};
  });
}

inline Tensor sqrt(const Tensor& x) {
  for (double v : x.values()) {
    if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
  }
  return detail::unary(OpKind::sqrt, x, [](double v) { return std::sqrt(v); }, [](const BackwardContext& c) {
    return std::vector<Tensor>{scale(div(c.grad, c.output), 0.5)};
  });
}

// Reduces `x` onto `target`, the inverse of broadcasting `target` up to x's shape.
inline Tensor sum_to(const Tensor& x, const Shape& target) {
  if (x.shape() == target) return x;
  if (detail::broadcast_shape(target, x.shape(), OpKind::sum_to) != x.shape()) {
    throw DimensionError("sum_to: cannot reduce " + shape_str(x.shape()) + " onto " + shape_str(target));
  }
  std::vector<double> out(shape_numel(target), 0.0);
  const auto xv = x.values();
  detail::for_each_broadcast<1>(x.shape(), {&target},
                                [&](std::size_t n, const std::array<std::size_t, 1>& o) { out[o[0]] += xv[n]; });
  return detail::finish(OpKind::sum_to, {x}, target, std::move(out), [](const BackwardContext& c) {
    return std::vector<Tensor>{broadcast_to(c.grad, c.inputs[0].shape())};
  });
}

inline Tensor broadcast_to(const Tensor& x, const Shape& target) {
  if (x.shape() == target) return x;
  if (detail::broadcast_shape(x.shape(), target, OpKind::broadcast) != target) {
    throw DimensionError("broadcast: cannot expand " + shape_str(x.shape()) + " to " + shape_str(target));
  }
  std::vector<double> out(shape_numel(target));
  const auto xv = x.values();
  detail::for_each_broadcast<1>(target, {&x.shape()},
                                [&](std::size_t n, const std::array<std::size_t, 1>& o) { out[n] = xv[o[0]]; });
  return detail::finish(OpKind::broadcast, {x}, target, std::move(out), [](const BackwardContext& c) {
    return std::vector<Tensor>{sum_to(c.grad, c.inputs[0].shape())};
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::finish(OpKind::sum, {x}, Shape{}, {s}, [](const BackwardContext& c) {
    return std::vector<Tensor>{broadcast_to(c.grad, c.inputs[0].shape())};
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// Maximum over the last axis, keeping it as extent 1. Ties route the gradient
// to the first maximal entry.
inline Tensor max(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("max: needs at least one axis");
  const std::size_t inner = x.shape().back();
  const std::size_t outer = x.numel() / inner;
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  std::vector<double> out(outer);
  std::vector<double> mask(x.numel(), 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < outer; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < inner; ++j)
      if (xv[r * inner + j] > xv[r * inner + best]) best = j;
    out[r] = xv[r * inner + best];
    mask[r * inner + best] = 1.0;
  }
  Tensor mask_t(x.shape(), std::move(mask));
  return detail::finish(OpKind::max, {x}, std::move(out_shape), std::move(out), [mask_t](const BackwardContext& c) {
    return std::vector<Tensor>{mul(broadcast_to(c.grad, mask_t.shape()), mask_t)};
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) throw DimensionError("concat: rank mismatch " + shape_str(p.shape()));
    out_shape[axis] += probe[axis];
    probe[axis] = first[axis];
    if (probe != first) {
      throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(p.shape()));
    }
  }
  const auto [outer, out_extent, inner] = detail::axis_split(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> extents;
  for (const Tensor& p : parts) {
    const std::size_t ext = p.shape()[axis];
    const auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * ext * inner, ext * inner, out.data() + (o * out_extent + offset) * inner);
    }
    offset += ext;
    extents.push_back(ext);
  }
  return detail::finish(OpKind::concat, parts, std::move(out_shape), std::move(out),
                        [axis, extents](const BackwardContext& c) {
                          std::vector<Tensor> g(extents.size());
                          std::size_t begin = 0;
                          for (std::size_t i = 0; i < extents.size(); ++i) {
                            if (c.needs[i]) g[i] = slice(c.grad, axis, begin, begin + extents[i]);
                            begin += extents[i];
                          }
                          return g;
                        });
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  if (begin == 0 && end == x.dim(axis)) return x;
  const auto [outer, extent, inner] = detail::axis_split(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  std::vector<double> out(shape_numel(out_shape));
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + (o * extent + begin) * inner, (end - begin) * inner,
                out.data() + o * (end - begin) * inner);
  }
  return detail::finish(OpKind::slice, {x}, std::move(out_shape), std::move(out),
                        [axis, begin, end](const BackwardContext& c) {
                          const Shape& in = c.inputs[0].shape();
                          std::vector<Tensor> pieces;
                          if (begin > 0) {
                            Shape s = in;
                            s[axis] = begin;
                            pieces.push_back(Tensor::zeros(s));
                          }
                          pieces.push_back(c.grad);
                          if (end < in[axis]) {
                            Shape s = in;
                            s[axis] = in[axis] - end;
                            pieces.push_back(Tensor::zeros(s));
                          }
                          return std::vector<Tensor>{concat(pieces, axis)};
                        });
}

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() == 0 || rows.empty()) throw DimensionError("gather_rows: needs a non-scalar input and indices");
  const std::size_t width = x.numel() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * width);
  const auto xv = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(xv.data() + rows[i] * width, width, out.data() + i * width);
  }
  return detail::finish(OpKind::gather_rows, {x}, std::move(out_shape), std::move(out),
                        [rows](const BackwardContext& c) {
                          return std::vector<Tensor>{scatter_rows(c.grad, rows, c.inputs[0].dim(0))};
                        });
}

// out[rows[i]] += x[i]; the adjoint of gather_rows.
inline Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& rows, std::size_t row_count) {
  if (x.rank() == 0 || x.dim(0) != rows.size()) throw DimensionError("scatter_rows: index count must match rows");
  const std::size_t width = x.numel() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = row_count;
  std::vector<double> out(row_count * width, 0.0);
  const auto xv = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= row_count) throw DimensionError("scatter_rows: row index out of range");
    for (std::size_t j = 0; j < width; ++j) out[rows[i] * width + j] += xv[i * width + j];
  }
  return detail::finish(OpKind::scatter_rows, {x}, std::move(out_shape), std::move(out),
                        [rows](const BackwardContext& c) { return std::vector<Tensor>{gather_rows(c.grad, rows)}; });
}

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) + " changes element count");
  }
  if (shape == x.shape()) return x;
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::finish(OpKind::reshape, {x}, shape, std::move(out), [](const BackwardContext& c) {
    return std::vector<Tensor>{reshape(c.grad, c.inputs[0].shape())};
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }
inline Tensor operator+(const Tensor& x, double c) { return add(x, Tensor::scalar(c)); }
inline Tensor operator-(const Tensor& x, double c) { return sub(x, Tensor::scalar(c)); }

// ---------------------------------------------------------------------------
// Reverse pass

// Gradients of the scalar `loss` with respect to each tensor in `wrt`.
// Tensors on the graph that `loss` does not depend on receive zeros. With
// `create_graph` the pass is recorded, so the results are attached and can be
// differentiated again.
inline std::vector<Tensor> backward(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph = false) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.attached()) throw ContractError("backward: loss is not attached to a graph");
  const std::shared_ptr<Graph>& graph = loss.graph();
  for (const Tensor& w : wrt) {
    if (!w.attached() || w.graph() != graph) {
      throw LookupError("backward: tensor of shape " + shape_str(w.shape()) + " is not on the loss graph");
    }
  }

  RecordingGuard recording(create_graph);
  std::vector<std::optional<Tensor>> grads(loss.node() + 1);
  grads[loss.node()] = Tensor::full(loss.shape(), 1.0);

  for (std::size_t id = loss.node() + 1; id-- > 0;) {
    if (!grads[id]) continue;
    const OpRecord& rec = graph->record(id);
    if (rec.kind == OpKind::leaf) continue;

    const std::size_t n = rec.inputs.size();
    std::vector<char> needs(n, 0);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      needs[i] = rec.input_nodes[i] != Tensor::kNoNode;
      any = any || needs[i];
    }
    if (!any) continue;

    std::vector<Tensor> inputs;
    inputs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor& in = rec.inputs[i];
      inputs.push_back(create_graph && needs[i] ? Tensor(in.storage(), in.shape(), graph, rec.input_nodes[i]) : in);
    }
    const Tensor output = create_graph ? Tensor(rec.output.storage(), rec.output.shape(), graph, id) : rec.output;
    const Tensor grad = *grads[id];
    const BackwardFn fn = rec.backward;

    const std::vector<Tensor> input_grads = fn(BackwardContext{inputs, output, grad, needs});
    for (std::size_t i = 0; i < n; ++i) {
      if (!needs[i]) continue;
      const std::size_t target = rec.input_nodes[i];
      if (input_grads[i].shape() != inputs[i].shape()) {
        throw DimensionError(std::string("backward: ") + std::string(op_name(rec.kind)) + " returned gradient " +
                             shape_str(input_grads[i].shape()) + " for input " + shape_str(inputs[i].shape()));
      }
      grads[target] = grads[target] ? add(*grads[target], input_grads[i]) : input_grads[i];
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    if (w.node() < grads.size() && grads[w.node()]) {
      result.push_back(*grads[w.node()]);
    } else {
      result.push_back(Tensor::zeros(w.shape()));
    }
  }
  return result;
}

inline Tensor backward(const Tensor& loss, const Tensor& wrt, bool create_graph = false) {
  return backward(loss, std::span<const Tensor>(&wrt, 1), create_graph).front();
}

}  // namespace featwise
