#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ptsr::diff {

// Dense row-major matrix. Vectors are m x 1 or 1 x m, scalars 1 x 1.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
  }
  static Tensor row(std::vector<double> v) {
    Tensor t;
    t.rows = 1;
    t.cols = static_cast<int>(v.size());
    t.data = std::move(v);
    return t;
  }
  static Tensor column(std::vector<double> v) {
    Tensor t;
    t.rows = static_cast<int>(v.size());
    t.cols = 1;
    t.data = std::move(v);
    return t;
  }

  int size() const { return rows * cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  bool same_shape(const Tensor& o) const {
    return rows == o.rows && cols == o.cols;
  }
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
};

// Named parameter slots. Gradient maps mirror this layout slot for slot.
class ParamStore {
 public:
  int add(std::string name, Tensor value);
  int count() const { return static_cast<int>(entries_.size()); }
  const std::string& name(int slot) const { return entries_[slot].name; }
  Tensor& value(int slot) { return entries_[slot].value; }
  const Tensor& value(int slot) const { return entries_[slot].value; }
  std::int64_t coordinate_count() const;

 private:
  struct Entry {
    std::string name;
    Tensor value;
  };
  std::vector<Entry> entries_;
};

struct GradientMap {
  std::vector<Tensor> grads;  // aligned with ParamStore slots

  static GradientMap zeros_like(const ParamStore& store);
  void zero();
  void add_scaled(const GradientMap& other, double scale);
  void scale(double s);
};

// Expression tape. Forward values are computed eagerly as nodes are
// appended; backward walks the nodes once in reverse topological order.
// A tape is single-writer during construction; backward is const and the
// same tape may be replayed for several seeds.
class Tape {
 public:
  using NodeId = std::int32_t;
  static constexpr NodeId kNone = -1;

  explicit Tape(const ParamStore* params = nullptr) : params_(params) {}

  void clear() { nodes_.clear(); }

  // Leaves
  NodeId param(int slot);  // binds the parameter's current value
  NodeId constant(Tensor value);
  NodeId constant_scalar(double v);

  // Elementwise; operands must share a shape, except that a 1x1 operand
  // broadcasts against any shape.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);  // elementwise product
  NodeId div(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId log(NodeId a);
  NodeId exp(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId tanh(NodeId a);
  NodeId softplus(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId log_sigmoid(NodeId a);
  NodeId lgamma(NodeId a);
  NodeId digamma(NodeId a);  // adjoint uses trigamma
  NodeId clamp_min(NodeId a, double floor);

  // Structure
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId concat_cols(std::span<const NodeId> parts);
  NodeId block(NodeId a, int r0, int rows, int c0, int cols);
  NodeId reshape(NodeId a, int rows, int cols);
  NodeId gather_rows(NodeId a, std::vector<int> indices);
  NodeId broadcast_rows(NodeId a, int rows);  // 1 x c -> rows x c

  // Reductions and linear maps
  NodeId sum(NodeId a);       // all entries -> scalar
  NodeId row_sums(NodeId a);  // m x c -> m x 1
  NodeId col_sums(NodeId a);  // m x c -> 1 x c
  // x: m x k, w: out x k, bias: 1 x out or kNone; returns m x out.
  NodeId linear(NodeId x, NodeId w, NodeId bias);
  NodeId matvec(NodeId w, NodeId x) { return linear(x, w, kNone); }
  // Softmax over rows, independently per column (max-shifted).
  NodeId softmax_cols(NodeId a);

  const Tensor& value(NodeId id) const { return nodes_[id].val; }
  double scalar_value(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }
  const ParamStore* params() const { return params_; }

  // Reverse pass from a scalar seed node. The fresh-map overload returns
  // d seed / d theta for every parameter slot; the accumulate overload adds
  // seed_scale times that into an existing map.
  GradientMap backward(NodeId seed) const;
  void backward_accumulate(NodeId seed, double seed_scale,
                           GradientMap& into) const;

 private:
  enum class Op : std::uint8_t {
    Param, Const,
    Add, Sub, Mul, Div, Neg,
    Log, Exp, Sqrt, Tanh, Softplus, Sigmoid, LogSigmoid,
    Lgamma, Digamma, ClampMin,
    ConcatRows, ConcatCols, Block, Reshape, GatherRows, BroadcastRows,
    Sum, RowSums, ColSums, Linear, SoftmaxCols,
  };

  struct Node {
    Op op;
    NodeId a = kNone, b = kNone, c = kNone;
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0;
    double x0 = 0.0;
    std::vector<int> list;  // gather indices / concat parts
    Tensor val;
  };

  NodeId push(Node n);
  const Tensor& val(NodeId id) const { return nodes_[id].val; }
  void check_node(NodeId id, const char* fn) const;

  const ParamStore* params_ = nullptr;
  std::vector<Node> nodes_;
};

// Central-difference verification of analytic gradients.
//
// loss_fn must be a deterministic function of the parameter values; when
// called with a non-null map pointer it must also fill the analytic
// gradient. Returns max over coordinates of |analytic - numeric| /
// max(1, |numeric|). Non-determinism (value drift between two base
// evaluations) and step <= 0 are rejected.
double finite_difference_check(
    ParamStore& params,
    const std::function<double(GradientMap* grad_out)>& loss_fn,
    double step);

}  // namespace ptsr::diff
