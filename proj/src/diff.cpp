#include "ptsr/diff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ptsr/errors.hpp"
#include "ptsr/specfn.hpp"

namespace ptsr::diff {
namespace {

[[noreturn]] void graph_error(const std::string& msg) {
  throw Error(ErrorKind::Usage, "diff: " + msg);
}

void ensure_shape(Tensor& t, int rows, int cols) {
  if (t.rows != rows || t.cols != cols) {
    t.rows = rows;
    t.cols = cols;
    t.data.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  }
}

}  // namespace

int ParamStore::add(std::string name, Tensor value) {
  entries_.push_back({std::move(name), std::move(value)});
  return static_cast<int>(entries_.size()) - 1;
}

std::int64_t ParamStore::coordinate_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

GradientMap GradientMap::zeros_like(const ParamStore& store) {
  GradientMap g;
  g.grads.reserve(store.count());
  for (int s = 0; s < store.count(); ++s) {
    const Tensor& v = store.value(s);
    g.grads.emplace_back(v.rows, v.cols);
  }
  return g;
}

void GradientMap::zero() {
  for (auto& t : grads) std::fill(t.data.begin(), t.data.end(), 0.0);
}

void GradientMap::add_scaled(const GradientMap& other, double scale) {
  for (std::size_t s = 0; s < grads.size(); ++s) {
    const auto& src = other.grads[s].data;
    auto& dst = grads[s].data;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  }
}

void GradientMap::scale(double s) {
  for (auto& t : grads)
    for (double& x : t.data) x *= s;
}

Tape::NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

void Tape::check_node(NodeId id, const char* fn) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
    graph_error(std::string(fn) + ": node id out of range");
  }
}

Tape::NodeId Tape::param(int slot) {
  if (params_ == nullptr) graph_error("param: tape has no parameter store");
  if (slot < 0 || slot >= params_->count()) graph_error("param: bad slot");
  Node n;
  n.op = Op::Param;
  n.i0 = slot;
  n.val = params_->value(slot);
  return push(std::move(n));
}

Tape::NodeId Tape::constant(Tensor value) {
  Node n;
  n.op = Op::Const;
  n.val = std::move(value);
  return push(std::move(n));
}

Tape::NodeId Tape::constant_scalar(double v) {
  return constant(Tensor::scalar(v));
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

// Applies op(a, b) with 1x1 broadcast on either side.
template <class F>
Tensor binary_forward(const Tensor& a, const Tensor& b, F f, const char* fn) {
  if (a.same_shape(b)) {
    Tensor out(a.rows, a.cols);
    for (int i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    return out;
  }
  if (a.is_scalar()) {
    Tensor out(b.rows, b.cols);
    for (int i = 0; i < b.size(); ++i) out.data[i] = f(a.data[0], b.data[i]);
    return out;
  }
  if (b.is_scalar()) {
    Tensor out(a.rows, a.cols);
    for (int i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[0]);
    return out;
  }
  graph_error(std::string(fn) + ": shape mismatch");
}

}  // namespace

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  check_node(a, "add");
  check_node(b, "add");
  Node n;
  n.op = Op::Add;
  n.a = a;
  n.b = b;
  n.val = binary_forward(val(a), val(b), [](double x, double y) { return x + y; }, "add");
  return push(std::move(n));
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
  check_node(a, "sub");
  check_node(b, "sub");
  Node n;
  n.op = Op::Sub;
  n.a = a;
  n.b = b;
  n.val = binary_forward(val(a), val(b), [](double x, double y) { return x - y; }, "sub");
  return push(std::move(n));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  check_node(a, "mul");
  check_node(b, "mul");
  Node n;
  n.op = Op::Mul;
  n.a = a;
  n.b = b;
  n.val = binary_forward(val(a), val(b), [](double x, double y) { return x * y; }, "mul");
  return push(std::move(n));
}

Tape::NodeId Tape::div(NodeId a, NodeId b) {
  check_node(a, "div");
  check_node(b, "div");
  for (double y : val(b).data) {
    if (y == 0.0) throw Error(ErrorKind::Numeric, "diff: division by zero");
  }
  Node n;
  n.op = Op::Div;
  n.a = a;
  n.b = b;
  n.val = binary_forward(val(a), val(b), [](double x, double y) { return x / y; }, "div");
  return push(std::move(n));
}

namespace {

template <class F>
Tensor unary_forward(const Tensor& a, F f) {
  Tensor out(a.rows, a.cols);
  for (int i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

}  // namespace

Tape::NodeId Tape::neg(NodeId a) {
  check_node(a, "neg");
  Node n;
  n.op = Op::Neg;
  n.a = a;
  n.val = unary_forward(val(a), [](double x) { return -x; });
  return push(std::move(n));
}

Tape::NodeId Tape::log(NodeId a) {
  check_node(a, "log");
  for (double x : val(a).data) {
    if (!(x > 0.0)) throw Error(ErrorKind::Numeric, "diff: log of non-positive value");
  }
  Node n;
  n.op = Op::Log;
  n.a = a;
  n.val = unary_forward(val(a), [](double x) { return std::log(x); });
  return push(std::move(n));
}

Tape::NodeId Tape::exp(NodeId a) {
  check_node(a, "exp");
  Node n;
  n.op = Op::Exp;
  n.a = a;
  n.val = unary_forward(val(a), [](double x) { return std::exp(x); });
  return push(std::move(n));
}

Tape::NodeId Tape::sqrt(NodeId a) {
  check_node(a, "sqrt");
  for (double x : val(a).data) {
    if (!(x > 0.0)) throw Error(ErrorKind::Numeric, "diff: sqrt of non-positive value");
  }
  Node n;
  n.op = Op::Sqrt;
  n.a = a;
  n.val = unary_forward(val(a), [](double x) { return std::sqrt(x); });
  return push(std::move(n));
}

Tape::NodeId Tape::tanh(NodeId a) {
  check_node(a, "tanh");
  Node n;
  n.op = Op::Tanh;
  n.a = a;
  n.val = unary_forward(val(a), [](double x) { return std::tanh(x); });
  return push(std::move(n));
}

Tape::NodeId Tape::softplus(NodeId a) {
  check_node(a, "softplus");
  Node n;
  n.op = Op::Softplus;
  n.a = a;
  n.val = unary_forward(val(a), specfn::softplus);
  return push(std::move(n));
}

Tape::NodeId Tape::sigmoid(NodeId a) {
  check_node(a, "sigmoid");
  Node n;
  n.op = Op::Sigmoid;
  n.a = a;
  n.val = unary_forward(val(a), specfn::sigmoid);
  return push(std::move(n));
}

Tape::NodeId Tape::log_sigmoid(NodeId a) {
  check_node(a, "log_sigmoid");
  Node n;
  n.op = Op::LogSigmoid;
  n.a = a;
  n.val = unary_forward(val(a), specfn::log_sigmoid);
  return push(std::move(n));
}

Tape::NodeId Tape::lgamma(NodeId a) {
  check_node(a, "lgamma");
  Node n;
  n.op = Op::Lgamma;
  n.a = a;
  n.val = unary_forward(val(a), specfn::lgamma);
  return push(std::move(n));
}

Tape::NodeId Tape::digamma(NodeId a) {
  check_node(a, "digamma");
  Node n;
  n.op = Op::Digamma;
  n.a = a;
  n.val = unary_forward(val(a), specfn::digamma);
  return push(std::move(n));
}

Tape::NodeId Tape::clamp_min(NodeId a, double floor) {
  check_node(a, "clamp_min");
  Node n;
  n.op = Op::ClampMin;
  n.a = a;
  n.x0 = floor;
  n.val = unary_forward(val(a), [floor](double x) { return x < floor ? floor : x; });
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// structure

Tape::NodeId Tape::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) graph_error("concat_rows: no inputs");
  int rows = 0;
  const int cols = val(parts[0]).cols;
  for (NodeId p : parts) {
    check_node(p, "concat_rows");
    if (val(p).cols != cols) graph_error("concat_rows: column mismatch");
    rows += val(p).rows;
  }
  Node n;
  n.op = Op::ConcatRows;
  n.list.assign(parts.begin(), parts.end());
  n.val = Tensor(rows, cols);
  double* dst = n.val.data.data();
  for (NodeId p : parts) {
    const Tensor& t = val(p);
    std::memcpy(dst, t.data.data(), sizeof(double) * t.data.size());
    dst += t.data.size();
  }
  return push(std::move(n));
}

Tape::NodeId Tape::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) graph_error("concat_cols: no inputs");
  const int rows = val(parts[0]).rows;
  int cols = 0;
  for (NodeId p : parts) {
    check_node(p, "concat_cols");
    if (val(p).rows != rows) graph_error("concat_cols: row mismatch");
    cols += val(p).cols;
  }
  Node n;
  n.op = Op::ConcatCols;
  n.list.assign(parts.begin(), parts.end());
  n.val = Tensor(rows, cols);
  int c0 = 0;
  for (NodeId p : parts) {
    const Tensor& t = val(p);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < t.cols; ++c) n.val.at(r, c0 + c) = t.at(r, c);
    c0 += t.cols;
  }
  return push(std::move(n));
}

Tape::NodeId Tape::block(NodeId a, int r0, int rows, int c0, int cols) {
  check_node(a, "block");
  const Tensor& t = val(a);
  if (r0 < 0 || c0 < 0 || rows < 1 || cols < 1 || r0 + rows > t.rows ||
      c0 + cols > t.cols) {
    graph_error("block: range out of bounds");
  }
  Node n;
  n.op = Op::Block;
  n.a = a;
  n.i0 = r0;
  n.i1 = rows;
  n.i2 = c0;
  n.i3 = cols;
  n.val = Tensor(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) n.val.at(r, c) = t.at(r0 + r, c0 + c);
  return push(std::move(n));
}

Tape::NodeId Tape::reshape(NodeId a, int rows, int cols) {
  check_node(a, "reshape");
  const Tensor& t = val(a);
  if (rows * cols != t.size()) graph_error("reshape: size mismatch");
  Node n;
  n.op = Op::Reshape;
  n.a = a;
  n.i0 = rows;
  n.i1 = cols;
  n.val = t;
  n.val.rows = rows;
  n.val.cols = cols;
  return push(std::move(n));
}

Tape::NodeId Tape::gather_rows(NodeId a, std::vector<int> indices) {
  check_node(a, "gather_rows");
  const Tensor& t = val(a);
  for (int i : indices) {
    if (i < 0 || i >= t.rows) graph_error("gather_rows: index out of range");
  }
  Node n;
  n.op = Op::GatherRows;
  n.a = a;
  n.val = Tensor(static_cast<int>(indices.size()), t.cols);
  for (std::size_t r = 0; r < indices.size(); ++r)
    for (int c = 0; c < t.cols; ++c)
      n.val.at(static_cast<int>(r), c) = t.at(indices[r], c);
  n.list = std::move(indices);
  return push(std::move(n));
}

Tape::NodeId Tape::broadcast_rows(NodeId a, int rows) {
  check_node(a, "broadcast_rows");
  const Tensor& t = val(a);
  if (t.rows != 1) graph_error("broadcast_rows: input must have one row");
  if (rows < 1) graph_error("broadcast_rows: bad row count");
  Node n;
  n.op = Op::BroadcastRows;
  n.a = a;
  n.i0 = rows;
  n.val = Tensor(rows, t.cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < t.cols; ++c) n.val.at(r, c) = t.at(0, c);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// reductions / linear maps

Tape::NodeId Tape::sum(NodeId a) {
  check_node(a, "sum");
  double s = 0.0;
  for (double x : val(a).data) s += x;
  Node n;
  n.op = Op::Sum;
  n.a = a;
  n.val = Tensor::scalar(s);
  return push(std::move(n));
}

Tape::NodeId Tape::row_sums(NodeId a) {
  check_node(a, "row_sums");
  const Tensor& t = val(a);
  Node n;
  n.op = Op::RowSums;
  n.a = a;
  n.val = Tensor(t.rows, 1);
  for (int r = 0; r < t.rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < t.cols; ++c) s += t.at(r, c);
    n.val.at(r, 0) = s;
  }
  return push(std::move(n));
}

Tape::NodeId Tape::col_sums(NodeId a) {
  check_node(a, "col_sums");
  const Tensor& t = val(a);
  Node n;
  n.op = Op::ColSums;
  n.a = a;
  n.val = Tensor(1, t.cols);
  for (int r = 0; r < t.rows; ++r)
    for (int c = 0; c < t.cols; ++c) n.val.at(0, c) += t.at(r, c);
  return push(std::move(n));
}

Tape::NodeId Tape::linear(NodeId x, NodeId w, NodeId bias) {
  check_node(x, "linear");
  check_node(w, "linear");
  const Tensor& xv = val(x);
  const Tensor& wv = val(w);
  if (xv.cols != wv.cols) graph_error("linear: inner dimension mismatch");
  const int m = xv.rows;
  const int out = wv.rows;
  const Tensor* bv = nullptr;
  if (bias != kNone) {
    check_node(bias, "linear");
    bv = &val(bias);
    if (bv->rows != 1 || bv->cols != out) graph_error("linear: bias shape mismatch");
  }
  Node n;
  n.op = Op::Linear;
  n.a = x;
  n.b = w;
  n.c = bias;
  n.val = Tensor(m, out);
  for (int r = 0; r < m; ++r) {
    const double* xrow = &xv.data[static_cast<std::size_t>(r) * xv.cols];
    for (int o = 0; o < out; ++o) {
      const double* wrow = &wv.data[static_cast<std::size_t>(o) * wv.cols];
      double s = bv ? bv->data[o] : 0.0;
      for (int k = 0; k < xv.cols; ++k) s += xrow[k] * wrow[k];
      n.val.at(r, o) = s;
    }
  }
  return push(std::move(n));
}

Tape::NodeId Tape::softmax_cols(NodeId a) {
  check_node(a, "softmax_cols");
  const Tensor& t = val(a);
  Node n;
  n.op = Op::SoftmaxCols;
  n.a = a;
  n.val = Tensor(t.rows, t.cols);
  for (int c = 0; c < t.cols; ++c) {
    double hi = t.at(0, c);
    for (int r = 1; r < t.rows; ++r) hi = std::max(hi, t.at(r, c));
    if (!std::isfinite(hi)) {
      throw Error(ErrorKind::Numeric, "diff: softmax over non-finite input");
    }
    double sum = 0.0;
    for (int r = 0; r < t.rows; ++r) {
      const double e = std::exp(t.at(r, c) - hi);
      n.val.at(r, c) = e;
      sum += e;
    }
    for (int r = 0; r < t.rows; ++r) n.val.at(r, c) /= sum;
  }
  return push(std::move(n));
}

double Tape::scalar_value(NodeId id) const {
  check_node(id, "scalar_value");
  if (!val(id).is_scalar()) graph_error("scalar_value: node is not scalar");
  return val(id).data[0];
}

// ---------------------------------------------------------------------------
// backward

namespace {

// Accumulates the adjoint of one operand of a binary op, reducing over the
// broadcast when the operand was 1x1.
void accumulate_matched(Tensor& dst, const Tensor& grad,
                        const std::function<double(int)>& term) {
  if (dst.is_scalar() && grad.size() > 1) {
    double s = 0.0;
    for (int i = 0; i < grad.size(); ++i) s += term(i);
    dst.data[0] += s;
  } else {
    for (int i = 0; i < dst.size(); ++i) dst.data[i] += term(i);
  }
}

double pick(const Tensor& t, int i) {
  return t.is_scalar() ? t.data[0] : t.data[i];
}

}  // namespace

GradientMap Tape::backward(NodeId seed) const {
  if (params_ == nullptr) graph_error("backward: tape has no parameter store");
  GradientMap g = GradientMap::zeros_like(*params_);
  backward_accumulate(seed, 1.0, g);
  return g;
}

void Tape::backward_accumulate(NodeId seed, double seed_scale,
                               GradientMap& into) const {
  check_node(seed, "backward");
  if (!val(seed).is_scalar()) graph_error("backward: seed must be scalar");
  if (params_ == nullptr) graph_error("backward: tape has no parameter store");
  if (into.grads.size() != static_cast<std::size_t>(params_->count())) {
    graph_error("backward: gradient map does not match the parameter store");
  }

  std::vector<Tensor> adj(nodes_.size());
  ensure_shape(adj[seed], 1, 1);
  adj[seed].data[0] = seed_scale;

  auto touch = [&](NodeId id) -> Tensor& {
    Tensor& t = adj[id];
    ensure_shape(t, val(id).rows, val(id).cols);
    return t;
  };

  for (NodeId i = seed; i >= 0; --i) {
    const Node& n = nodes_[i];
    const Tensor& g = adj[i];
    if (g.size() == 0) continue;  // node not on the path to the seed

    switch (n.op) {
      case Op::Param: {
        auto& dst = into.grads[n.i0].data;
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g.data[k];
        break;
      }
      case Op::Const:
        break;
      case Op::Add: {
        const Tensor& gg = g;
        accumulate_matched(touch(n.a), gg, [&](int k) { return gg.data[k]; });
        accumulate_matched(touch(n.b), gg, [&](int k) { return gg.data[k]; });
        break;
      }
      case Op::Sub: {
        const Tensor& gg = g;
        accumulate_matched(touch(n.a), gg, [&](int k) { return gg.data[k]; });
        accumulate_matched(touch(n.b), gg, [&](int k) { return -gg.data[k]; });
        break;
      }
      case Op::Mul: {
        const Tensor& av = val(n.a);
        const Tensor& bv = val(n.b);
        accumulate_matched(touch(n.a), g,
                           [&](int k) { return g.data[k] * pick(bv, k); });
        accumulate_matched(touch(n.b), g,
                           [&](int k) { return g.data[k] * pick(av, k); });
        break;
      }
      case Op::Div: {
        const Tensor& av = val(n.a);
        const Tensor& bv = val(n.b);
        accumulate_matched(touch(n.a), g,
                           [&](int k) { return g.data[k] / pick(bv, k); });
        accumulate_matched(touch(n.b), g, [&](int k) {
          const double b = pick(bv, k);
          return -g.data[k] * pick(av, k) / (b * b);
        });
        break;
      }
      case Op::Neg: {
        Tensor& da = touch(n.a);
        for (int k = 0; k < da.size(); ++k) da.data[k] -= g.data[k];
        break;
      }
      case Op::Log: {
        Tensor& da = touch(n.a);
        const Tensor& av = val(n.a);
        for (int k = 0; k < da.size(); ++k) da.data[k] += g.data[k] / av.data[k];
        break;
      }
      case Op::Exp: {
        Tensor& da = touch(n.a);
        for (int k = 0; k < da.size(); ++k) da.data[k] += g.data[k] * n.val.data[k];
        break;
      }
      case Op::Sqrt: {
        Tensor& da = touch(n.a);
        for (int k = 0; k < da.size(); ++k)
          da.data[k] += g.data[k] * 0.5 / n.val.data[k];
        break;
      }
      case Op::Tanh: {
        Tensor& da = touch(n.a);
        for (int k = 0; k < da.size(); ++k) {
          const double y = n.val.data[k];
          da.data[k] += g.data[k] * (1.0 - y * y);
        }
        break;
      }
      case Op::Softplus: {
        Tensor& da = touch(n.a);
        const Tensor& av = val(n.a);
        for (int k = 0; k < da.size(); ++k)
          da.data[k] += g.data[k] * specfn::sigmoid(av.data[k]);
        break;
      }
      case Op::Sigmoid: {
        Tensor& da = touch(n.a);
        for (int k = 0; k < da.size(); ++k) {
          const double y = n.val.data[k];
          da.data[k] += g.data[k] * y * (1.0 - y);
        }
        break;
      }
      case Op::LogSigmoid: {
        Tensor& da = touch(n.a);
        const Tensor& av = val(n.a);
        for (int k = 0; k < da.size(); ++k)
          da.data[k] += g.data[k] * specfn::sigmoid(-av.data[k]);
        break;
      }
      case Op::Lgamma: {
        Tensor& da = touch(n.a);
        const Tensor& av = val(n.a);
        for (int k = 0; k < da.size(); ++k)
          da.data[k] += g.data[k] * specfn::digamma(av.data[k]);
        break;
      }
      case Op::Digamma: {
        Tensor& da = touch(n.a);
        const Tensor& av = val(n.a);
        for (int k = 0; k < da.size(); ++k)
          da.data[k] += g.data[k] * specfn::trigamma(av.data[k]);
        break;
      }
      case Op::ClampMin: {
        Tensor& da = touch(n.a);
        const Tensor& av = val(n.a);
        for (int k = 0; k < da.size(); ++k)
          if (av.data[k] > n.x0) da.data[k] += g.data[k];
        break;
      }
      case Op::ConcatRows: {
        const double* src = g.data.data();
        for (int part : n.list) {
          Tensor& dp = touch(part);
          for (int k = 0; k < dp.size(); ++k) dp.data[k] += src[k];
          src += dp.size();
        }
        break;
      }
      case Op::ConcatCols: {
        int c0 = 0;
        for (int part : n.list) {
          Tensor& dp = touch(part);
          for (int r = 0; r < dp.rows; ++r)
            for (int c = 0; c < dp.cols; ++c) dp.at(r, c) += g.at(r, c0 + c);
          c0 += dp.cols;
        }
        break;
      }
      case Op::Block: {
        Tensor& da = touch(n.a);
        for (int r = 0; r < n.i1; ++r)
          for (int c = 0; c < n.i3; ++c) da.at(n.i0 + r, n.i2 + c) += g.at(r, c);
        break;
      }
      case Op::Reshape: {
        Tensor& da = touch(n.a);
        for (int k = 0; k < da.size(); ++k) da.data[k] += g.data[k];
        break;
      }
      case Op::GatherRows: {
        Tensor& da = touch(n.a);
        for (std::size_t r = 0; r < n.list.size(); ++r)
          for (int c = 0; c < da.cols; ++c)
            da.at(n.list[r], c) += g.at(static_cast<int>(r), c);
        break;
      }
      case Op::BroadcastRows: {
        Tensor& da = touch(n.a);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) da.at(0, c) += g.at(r, c);
        break;
      }
      case Op::Sum: {
        Tensor& da = touch(n.a);
        const double s = g.data[0];
        for (int k = 0; k < da.size(); ++k) da.data[k] += s;
        break;
      }
      case Op::RowSums: {
        Tensor& da = touch(n.a);
        for (int r = 0; r < da.rows; ++r) {
          const double s = g.at(r, 0);
          for (int c = 0; c < da.cols; ++c) da.at(r, c) += s;
        }
        break;
      }
      case Op::ColSums: {
        Tensor& da = touch(n.a);
        for (int r = 0; r < da.rows; ++r)
          for (int c = 0; c < da.cols; ++c) da.at(r, c) += g.at(0, c);
        break;
      }
      case Op::Linear: {
        const Tensor& xv = val(n.a);
        const Tensor& wv = val(n.b);
        Tensor& dx = touch(n.a);
        Tensor& dw = touch(n.b);
        // dx = g * w, dw = g^T * x, db = column sums of g
        for (int r = 0; r < xv.rows; ++r) {
          for (int o = 0; o < wv.rows; ++o) {
            const double go = g.at(r, o);
            if (go == 0.0) continue;
            const double* wrow = &wv.data[static_cast<std::size_t>(o) * wv.cols];
            const double* xrow = &xv.data[static_cast<std::size_t>(r) * xv.cols];
            double* dxrow = &dx.data[static_cast<std::size_t>(r) * dx.cols];
            double* dwrow = &dw.data[static_cast<std::size_t>(o) * dw.cols];
            for (int k = 0; k < xv.cols; ++k) {
              dxrow[k] += go * wrow[k];
              dwrow[k] += go * xrow[k];
            }
          }
        }
        if (n.c != kNone) {
          Tensor& db = touch(n.c);
          for (int r = 0; r < g.rows; ++r)
            for (int o = 0; o < g.cols; ++o) db.at(0, o) += g.at(r, o);
        }
        break;
      }
      case Op::SoftmaxCols: {
        Tensor& da = touch(n.a);
        for (int c = 0; c < n.val.cols; ++c) {
          double dot = 0.0;
          for (int r = 0; r < n.val.rows; ++r) dot += g.at(r, c) * n.val.at(r, c);
          for (int r = 0; r < n.val.rows; ++r)
            da.at(r, c) += n.val.at(r, c) * (g.at(r, c) - dot);
        }
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// finite differences

double finite_difference_check(
    ParamStore& params,
    const std::function<double(GradientMap* grad_out)>& loss_fn,
    double step) {
  if (!(step > 0.0)) {
    throw Error(ErrorKind::Usage, "finite_difference_check: step must be > 0");
  }
  GradientMap analytic = GradientMap::zeros_like(params);
  const double base = loss_fn(&analytic);
  const double base_again = loss_fn(nullptr);
  if (base != base_again) {
    throw Error(ErrorKind::Numeric,
                "finite_difference_check: loss function is not deterministic");
  }

  double worst = 0.0;
  for (int slot = 0; slot < params.count(); ++slot) {
    Tensor& value = params.value(slot);
    for (int k = 0; k < value.size(); ++k) {
      const double saved = value.data[k];
      value.data[k] = saved + step;
      const double up = loss_fn(nullptr);
      value.data[k] = saved - step;
      const double down = loss_fn(nullptr);
      value.data[k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(analytic.grads[slot].data[k] - numeric) /
                         std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ptsr::diff
