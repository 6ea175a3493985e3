#include "fvp/tape.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>

#include "fvp/errors.hpp"

namespace fvp::ad {

namespace {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EMat>;
using MapConstMat = Eigen::Map<const EMat>;

struct AxisSplit {
  int64_t outer = 1;
  int64_t k = 1;
  int64_t inner = 1;
};

AxisSplit split_axis(const std::vector<int>& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  s.k = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw ValidationError(std::string(op) + ": " + msg);
}

real stable_softplus(real x) {
  // log(1 + e^x) without overflow on either tail
  if (x > real(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

real stable_sigmoid(real x) {
  if (x >= real(0)) {
    const real z = std::exp(-x);
    return real(1) / (real(1) + z);
  }
  const real z = std::exp(x);
  return z / (real(1) + z);
}

}  // namespace

const Tensor& Value::tensor() const { return tape->value(id); }

int Tape::push(Node n) {
  if (backward_done_) throw ValidationError("Tape: cannot record ops after backward()");
  check_finite(n);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_finite(const Node& n) const {
  if (!finite_checks_) return;
  if (!n.value.all_finite()) {
    throw NumericalError("Tape: non-finite value produced by op " + std::to_string(static_cast<int>(n.op)) +
                         " with shape " + n.value.shape_str());
  }
}

Value Tape::leaf(Tensor v) {
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = true;
  n.value = std::move(v);
  return Value{this, push(std::move(n))};
}

Value Tape::constant(Tensor v) {
  Node n;
  n.op = Op::kConstant;
  n.requires_grad = false;
  n.value = std::move(v);
  return Value{this, push(std::move(n))};
}

Tensor Tape::grad(Value v) const {
  if (v.tape != this) throw ValidationError("Tape::grad: value belongs to a different tape");
  if (!backward_done_) throw ValidationError("Tape::grad: backward() has not run");
  const auto idx = static_cast<size_t>(v.id);
  if (idx < touched_.size() && touched_[idx]) return grads_[idx];
  return Tensor::zeros(nodes_[idx].value.shape());
}

void Tape::backward(Value output) {
  if (output.tape != this) throw ValidationError("Tape::backward: output from a different tape");
  if (backward_done_) throw ValidationError("Tape::backward: may only run once per tape");
  const Node& out = nodes_[static_cast<size_t>(output.id)];
  if (out.value.size() != 1) {
    throw ValidationError("Tape::backward: output must be scalar, got shape " + out.value.shape_str());
  }
  grads_.assign(nodes_.size(), Tensor());
  touched_.assign(nodes_.size(), 0);
  grads_[static_cast<size_t>(output.id)] = Tensor::full(out.value.shape(), real(1));
  touched_[static_cast<size_t>(output.id)] = 1;

  for (int id = output.id; id >= 0; --id) {
    const auto idx = static_cast<size_t>(id);
    if (!touched_[idx] || !nodes_[idx].requires_grad) continue;
    vjp(id, grads_, touched_);
  }
  backward_done_ = true;
}

namespace {

// Ensures an adjoint buffer exists for `id` and returns it.
Tensor& acc(std::vector<Tensor>& grads, std::vector<char>& touched, const std::vector<int>& shape, int id) {
  auto& g = grads[static_cast<size_t>(id)];
  if (!touched[static_cast<size_t>(id)]) {
    g = Tensor::zeros(shape);
    touched[static_cast<size_t>(id)] = 1;
  }
  return g;
}

}  // namespace

void Tape::vjp(int id, std::vector<Tensor>& grads, std::vector<char>& touched) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  const Tensor& g = grads[static_cast<size_t>(id)];
  auto parent_needs = [&](int pid) { return pid >= 0 && nodes_[static_cast<size_t>(pid)].requires_grad; };
  auto pval = [&](int pid) -> const Tensor& { return nodes_[static_cast<size_t>(pid)].value; };
  auto padj = [&](int pid) -> Tensor& { return acc(grads, touched, pval(pid).shape(), pid); };

  const int64_t sz = n.value.size();
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
    case Op::kStopGradient:
      break;
    case Op::kAdd: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i];
      }
      if (parent_needs(n.b)) {
        Tensor& db = padj(n.b);
        for (int64_t i = 0; i < sz; ++i) db[i] += g[i];
      }
      break;
    }
    case Op::kSub: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i];
      }
      if (parent_needs(n.b)) {
        Tensor& db = padj(n.b);
        for (int64_t i = 0; i < sz; ++i) db[i] -= g[i];
      }
      break;
    }
    case Op::kMul: {
      const Tensor& a = pval(n.a);
      const Tensor& b = pval(n.b);
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i] * b[i];
      }
      if (parent_needs(n.b)) {
        Tensor& db = padj(n.b);
        for (int64_t i = 0; i < sz; ++i) db[i] += g[i] * a[i];
      }
      break;
    }
    case Op::kDiv: {
      const Tensor& a = pval(n.a);
      const Tensor& b = pval(n.b);
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i] / b[i];
      }
      if (parent_needs(n.b)) {
        Tensor& db = padj(n.b);
        for (int64_t i = 0; i < sz; ++i) db[i] -= g[i] * a[i] / (b[i] * b[i]);
      }
      break;
    }
    case Op::kNeg: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] -= g[i];
      }
      break;
    }
    case Op::kAddScalar: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i];
      }
      break;
    }
    case Op::kMulScalar: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i] * n.scalar;
      }
      break;
    }
    case Op::kMatMul: {
      const Tensor& a = pval(n.a);
      const Tensor& b = pval(n.b);
      const int64_t rows = a.dim(0), k = a.dim(1), cols = b.dim(1);
      MapConstMat ga(g.data(), rows, cols);
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        MapMat(da.data(), rows, k).noalias() += ga * MapConstMat(b.data(), k, cols).transpose();
      }
      if (parent_needs(n.b)) {
        Tensor& db = padj(n.b);
        MapMat(db.data(), k, cols).noalias() += MapConstMat(a.data(), rows, k).transpose() * ga;
      }
      break;
    }
    case Op::kTranspose: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        const int64_t rows = a.dim(0), cols = a.dim(1);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c) da[r * cols + c] += g[c * rows + r];
      }
      break;
    }
    case Op::kAddRowVec: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i];
      }
      if (parent_needs(n.b)) {
        Tensor& db = padj(n.b);
        const int64_t m = pval(n.b).size();
        const int64_t rows = sz / m;
        for (int64_t r = 0; r < rows; ++r) {
          const real* gr = g.data() + r * m;
          for (int64_t c = 0; c < m; ++c) db[c] += gr[c];
        }
      }
      break;
    }
    case Op::kRelu: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += a[i] > real(0) ? g[i] : real(0);
      }
      break;
    }
    case Op::kSoftplus: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i] * stable_sigmoid(a[i]);
      }
      break;
    }
    case Op::kSigmoid: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        const Tensor& y = n.value;
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i] * y[i] * (real(1) - y[i]);
      }
      break;
    }
    case Op::kExp: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        const Tensor& y = n.value;
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i] * y[i];
      }
      break;
    }
    case Op::kLog: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i] / a[i];
      }
      break;
    }
    case Op::kSqrt: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        const Tensor& y = n.value;
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i] / (real(2) * y[i]);
      }
      break;
    }
    case Op::kAbs: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) {
          if (a[i] > real(0)) da[i] += g[i];
          else if (a[i] < real(0)) da[i] -= g[i];
        }
      }
      break;
    }
    case Op::kSquare: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += real(2) * a[i] * g[i];
      }
      break;
    }
    case Op::kSin: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i] * std::cos(a[i]);
      }
      break;
    }
    case Op::kCos: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] -= g[i] * std::sin(a[i]);
      }
      break;
    }
    case Op::kMaximum: {
      const Tensor& a = pval(n.a);
      const Tensor& b = pval(n.b);
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += a[i] >= b[i] ? g[i] : real(0);
      }
      if (parent_needs(n.b)) {
        Tensor& db = padj(n.b);
        for (int64_t i = 0; i < sz; ++i) db[i] += a[i] < b[i] ? g[i] : real(0);
      }
      break;
    }
    case Op::kSum: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        const real gs = g[0];
        for (int64_t i = 0; i < da.size(); ++i) da[i] += gs;
      }
      break;
    }
    case Op::kSumAxis: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        const AxisSplit s = split_axis(a.shape(), n.axis);
        for (int64_t o = 0; o < s.outer; ++o)
          for (int64_t j = 0; j < s.k; ++j) {
            const real* gp = g.data() + o * s.inner;
            real* dp = da.data() + (o * s.k + j) * s.inner;
            for (int64_t i = 0; i < s.inner; ++i) dp[i] += gp[i];
          }
      }
      break;
    }
    case Op::kCumSum: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        const AxisSplit s = split_axis(a.shape(), n.axis);
        // Adjoint is the reverse cumulative sum along the axis; exclusive
        // forward shifts by one position.
        for (int64_t o = 0; o < s.outer; ++o) {
          for (int64_t i = 0; i < s.inner; ++i) {
            real run = 0;
            for (int64_t j = s.k - 1; j >= 0; --j) {
              const int64_t at = (o * s.k + j) * s.inner + i;
              if (n.flag) {  // exclusive: dL/dx_j = sum_{m > j} g_m
                da[at] += run;
                run += g[at];
              } else {  // inclusive: dL/dx_j = sum_{m >= j} g_m
                run += g[at];
                da[at] += run;
              }
            }
          }
        }
      }
      break;
    }
    case Op::kConcat: {
      const AxisSplit so = split_axis(n.value.shape(), n.axis);
      int64_t offset = 0;
      for (int pid : n.extra) {
        const Tensor& p = pval(pid);
        const int64_t pk = p.dim(n.axis);
        if (parent_needs(pid)) {
          Tensor& dp = acc(grads, touched, p.shape(), pid);
          for (int64_t o = 0; o < so.outer; ++o) {
            const real* gp = g.data() + (o * so.k + offset) * so.inner;
            real* dd = dp.data() + o * pk * so.inner;
            for (int64_t i = 0; i < pk * so.inner; ++i) dd[i] += gp[i];
          }
        }
        offset += pk;
      }
      break;
    }
    case Op::kSlice: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        const AxisSplit s = split_axis(a.shape(), n.axis);
        const int64_t span = n.i1 - n.i0;
        for (int64_t o = 0; o < s.outer; ++o) {
          real* dp = da.data() + (o * s.k + n.i0) * s.inner;
          const real* gp = g.data() + o * span * s.inner;
          for (int64_t i = 0; i < span * s.inner; ++i) dp[i] += gp[i];
        }
      }
      break;
    }
    case Op::kReshape: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[i] += g[i];
      }
      break;
    }
    case Op::kBroadcast: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        const AxisSplit s = split_axis(n.value.shape(), n.axis);
        for (int64_t o = 0; o < s.outer; ++o)
          for (int64_t j = 0; j < s.k; ++j) {
            const real* gp = g.data() + (o * s.k + j) * s.inner;
            real* dp = da.data() + o * s.inner;
            for (int64_t i = 0; i < s.inner; ++i) dp[i] += gp[i];
          }
        (void)a;
      }
      break;
    }
    case Op::kTakeRows: {
      if (parent_needs(n.a)) {
        const Tensor& a = pval(n.a);
        Tensor& da = padj(n.a);
        const int64_t m = a.dim(1);
        for (size_t r = 0; r < n.extra.size(); ++r) {
          const real* gp = g.data() + static_cast<int64_t>(r) * m;
          real* dp = da.data() + static_cast<int64_t>(n.extra[r]) * m;
          for (int64_t c = 0; c < m; ++c) dp[c] += gp[c];
        }
      }
      break;
    }
    case Op::kGatherFlat: {
      if (parent_needs(n.a)) {
        Tensor& da = padj(n.a);
        for (int64_t i = 0; i < sz; ++i) da[n.gather[static_cast<size_t>(i)]] += g[i];
      }
      break;
    }
  }
}

// ---- forward op builders ----------------------------------------------------

namespace {

Tape* same_tape(Value a, Value b, const char* op) {
  require(a.valid() && b.valid(), op, "invalid operand");
  require(a.tape == b.tape, op, "operands from different tapes");
  return a.tape;
}

struct NodeAccess;

}  // namespace

// OpBuilder is a friend of Tape that exposes push() to the free functions.
class OpBuilder {
 public:
  static Value make(Tape& tape, Tape::Node n) { return Value{&tape, tape.push(std::move(n))}; }
  static const Tape::Node& node(const Value& v) {
    return v.tape->nodes_[static_cast<size_t>(v.id)];
  }
  static bool requires_grad(const Value& v) { return node(v).requires_grad; }
};

namespace {

Tape::Node unary(Op op, Value a) {
  Tape::Node n;
  n.op = op;
  n.a = a.id;
  n.requires_grad = OpBuilder::requires_grad(a);
  return n;
}

Tape::Node binary(Op op, Value a, Value b) {
  Tape::Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = OpBuilder::requires_grad(a) || OpBuilder::requires_grad(b);
  return n;
}

Value elementwise_binary(Op op, Value a, Value b, const char* name) {
  Tape* t = same_tape(a, b, name);
  require(a.tensor().same_shape(b.tensor()), name,
          "shape mismatch " + a.tensor().shape_str() + " vs " + b.tensor().shape_str());
  Tape::Node n = binary(op, a, b);
  const Tensor& x = a.tensor();
  const Tensor& y = b.tensor();
  Tensor out(x.shape());
  const int64_t sz = x.size();
  switch (op) {
    case Op::kAdd: for (int64_t i = 0; i < sz; ++i) out[i] = x[i] + y[i]; break;
    case Op::kSub: for (int64_t i = 0; i < sz; ++i) out[i] = x[i] - y[i]; break;
    case Op::kMul: for (int64_t i = 0; i < sz; ++i) out[i] = x[i] * y[i]; break;
    case Op::kDiv: for (int64_t i = 0; i < sz; ++i) out[i] = x[i] / y[i]; break;
    case Op::kMaximum: for (int64_t i = 0; i < sz; ++i) out[i] = x[i] >= y[i] ? x[i] : y[i]; break;
    default: require(false, name, "bad elementwise op");
  }
  n.value = std::move(out);
  return OpBuilder::make(*t, std::move(n));
}

Value elementwise_unary(Op op, Value a, const char* name) {
  require(a.valid(), name, "invalid operand");
  Tape::Node n = unary(op, a);
  const Tensor& x = a.tensor();
  Tensor out(x.shape());
  const int64_t sz = x.size();
  switch (op) {
    case Op::kNeg: for (int64_t i = 0; i < sz; ++i) out[i] = -x[i]; break;
    case Op::kRelu: for (int64_t i = 0; i < sz; ++i) out[i] = x[i] > real(0) ? x[i] : real(0); break;
    case Op::kSoftplus: for (int64_t i = 0; i < sz; ++i) out[i] = stable_softplus(x[i]); break;
    case Op::kSigmoid: for (int64_t i = 0; i < sz; ++i) out[i] = stable_sigmoid(x[i]); break;
    case Op::kExp: for (int64_t i = 0; i < sz; ++i) out[i] = std::exp(x[i]); break;
    case Op::kLog: for (int64_t i = 0; i < sz; ++i) out[i] = std::log(x[i]); break;
    case Op::kSqrt: for (int64_t i = 0; i < sz; ++i) out[i] = std::sqrt(x[i]); break;
    case Op::kAbs: for (int64_t i = 0; i < sz; ++i) out[i] = std::abs(x[i]); break;
    case Op::kSquare: for (int64_t i = 0; i < sz; ++i) out[i] = x[i] * x[i]; break;
    case Op::kSin: for (int64_t i = 0; i < sz; ++i) out[i] = std::sin(x[i]); break;
    case Op::kCos: for (int64_t i = 0; i < sz; ++i) out[i] = std::cos(x[i]); break;
    default: require(false, name, "bad unary op");
  }
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

}  // namespace

Value add(Value a, Value b) { return elementwise_binary(Op::kAdd, a, b, "add"); }
Value sub(Value a, Value b) { return elementwise_binary(Op::kSub, a, b, "sub"); }
Value mul(Value a, Value b) { return elementwise_binary(Op::kMul, a, b, "mul"); }
Value div(Value a, Value b) { return elementwise_binary(Op::kDiv, a, b, "div"); }
Value maximum(Value a, Value b) { return elementwise_binary(Op::kMaximum, a, b, "maximum"); }
Value neg(Value a) { return elementwise_unary(Op::kNeg, a, "neg"); }
Value relu(Value a) { return elementwise_unary(Op::kRelu, a, "relu"); }
Value softplus(Value a) { return elementwise_unary(Op::kSoftplus, a, "softplus"); }
Value sigmoid(Value a) { return elementwise_unary(Op::kSigmoid, a, "sigmoid"); }
Value exp(Value a) { return elementwise_unary(Op::kExp, a, "exp"); }
Value log(Value a) { return elementwise_unary(Op::kLog, a, "log"); }
Value sqrt(Value a) { return elementwise_unary(Op::kSqrt, a, "sqrt"); }
Value abs(Value a) { return elementwise_unary(Op::kAbs, a, "abs"); }
Value square(Value a) { return elementwise_unary(Op::kSquare, a, "square"); }
Value sin(Value a) { return elementwise_unary(Op::kSin, a, "sin"); }
Value cos(Value a) { return elementwise_unary(Op::kCos, a, "cos"); }

Value add_scalar(Value a, real s) {
  Tape::Node n = unary(Op::kAddScalar, a);
  n.scalar = s;
  const Tensor& x = a.tensor();
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) out[i] = x[i] + s;
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value mul_scalar(Value a, real s) {
  Tape::Node n = unary(Op::kMulScalar, a);
  n.scalar = s;
  const Tensor& x = a.tensor();
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value matmul(Value a, Value b) {
  Tape* t = same_tape(a, b, "matmul");
  const Tensor& x = a.tensor();
  const Tensor& y = b.tensor();
  require(x.rank() == 2 && y.rank() == 2, "matmul", "expects 2-d operands");
  require(x.dim(1) == y.dim(0), "matmul",
          "inner dims differ: " + x.shape_str() + " x " + y.shape_str());
  Tape::Node n = binary(Op::kMatMul, a, b);
  Tensor out({x.dim(0), y.dim(1)});
  MapMat(out.data(), x.dim(0), y.dim(1)).noalias() =
      MapConstMat(x.data(), x.dim(0), x.dim(1)) * MapConstMat(y.data(), y.dim(0), y.dim(1));
  n.value = std::move(out);
  return OpBuilder::make(*t, std::move(n));
}

Value transpose(Value a) {
  const Tensor& x = a.tensor();
  require(x.rank() == 2, "transpose", "expects 2-d operand");
  Tape::Node n = unary(Op::kTranspose, a);
  Tensor out({x.dim(1), x.dim(0)});
  for (int r = 0; r < x.dim(0); ++r)
    for (int c = 0; c < x.dim(1); ++c) out[static_cast<int64_t>(c) * x.dim(0) + r] = x.at(r, c);
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value add_rowvec(Value a, Value b) {
  Tape* t = same_tape(a, b, "add_rowvec");
  const Tensor& x = a.tensor();
  const Tensor& y = b.tensor();
  require(x.rank() == 2 && y.rank() == 1 && x.dim(1) == y.dim(0), "add_rowvec",
          "expects [n,m] + [m], got " + x.shape_str() + " + " + y.shape_str());
  Tape::Node n = binary(Op::kAddRowVec, a, b);
  Tensor out(x.shape());
  const int64_t m = y.size();
  for (int64_t r = 0; r < x.dim(0); ++r) {
    const real* xr = x.data() + r * m;
    real* or_ = out.data() + r * m;
    for (int64_t c = 0; c < m; ++c) or_[c] = xr[c] + y[c];
  }
  n.value = std::move(out);
  return OpBuilder::make(*t, std::move(n));
}

Value sum(Value a) {
  Tape::Node n = unary(Op::kSum, a);
  const Tensor& x = a.tensor();
  real s = 0;
  for (int64_t i = 0; i < x.size(); ++i) s += x[i];
  n.value = Tensor::scalar(s);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value sum_axis(Value a, int axis, bool keepdim) {
  const Tensor& x = a.tensor();
  require(axis >= 0 && axis < x.rank(), "sum_axis", "axis out of range");
  Tape::Node n = unary(Op::kSumAxis, a);
  n.axis = axis;
  n.flag = keepdim;
  std::vector<int> out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.dim(i));
    }
  }
  Tensor out(out_shape);
  const AxisSplit s = split_axis(x.shape(), axis);
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t j = 0; j < s.k; ++j) {
      const real* xp = x.data() + (o * s.k + j) * s.inner;
      real* op = out.data() + o * s.inner;
      for (int64_t i = 0; i < s.inner; ++i) op[i] += xp[i];
    }
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value cumsum(Value a, int axis, bool exclusive) {
  const Tensor& x = a.tensor();
  require(axis >= 0 && axis < x.rank(), "cumsum", "axis out of range");
  Tape::Node n = unary(Op::kCumSum, a);
  n.axis = axis;
  n.flag = exclusive;
  Tensor out(x.shape());
  const AxisSplit s = split_axis(x.shape(), axis);
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t i = 0; i < s.inner; ++i) {
      real run = 0;
      for (int64_t j = 0; j < s.k; ++j) {
        const int64_t at = (o * s.k + j) * s.inner + i;
        if (exclusive) {
          out[at] = run;
          run += x[at];
        } else {
          run += x[at];
          out[at] = run;
        }
      }
    }
  }
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value concat(const std::vector<Value>& parts, int axis) {
  require(!parts.empty(), "concat", "no operands");
  Tape* t = parts[0].tape;
  const int rank = parts[0].tensor().rank();
  require(axis >= 0 && axis < rank, "concat", "axis out of range");
  int total = 0;
  for (const Value& p : parts) {
    require(p.tape == t, "concat", "operands from different tapes");
    require(p.tensor().rank() == rank, "concat", "rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis) {
        require(p.tensor().dim(i) == parts[0].tensor().dim(i), "concat",
                "non-axis extent mismatch");
      }
    }
    total += p.tensor().dim(axis);
  }
  Tape::Node n;
  n.op = Op::kConcat;
  n.axis = axis;
  for (const Value& p : parts) {
    n.extra.push_back(p.id);
    n.requires_grad = n.requires_grad || OpBuilder::requires_grad(p);
  }
  std::vector<int> out_shape = parts[0].tensor().shape();
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor out(out_shape);
  const AxisSplit so = split_axis(out_shape, axis);
  int64_t offset = 0;
  for (const Value& p : parts) {
    const Tensor& x = p.tensor();
    const int64_t pk = x.dim(axis);
    for (int64_t o = 0; o < so.outer; ++o) {
      real* dst = out.data() + (o * so.k + offset) * so.inner;
      const real* src = x.data() + o * pk * so.inner;
      std::memcpy(dst, src, static_cast<size_t>(pk * so.inner) * sizeof(real));
    }
    offset += pk;
  }
  n.value = std::move(out);
  return OpBuilder::make(*t, std::move(n));
}

Value slice(Value a, int axis, int begin, int end) {
  const Tensor& x = a.tensor();
  require(axis >= 0 && axis < x.rank(), "slice", "axis out of range");
  require(begin >= 0 && begin < end && end <= x.dim(axis), "slice", "bad range");
  Tape::Node n = unary(Op::kSlice, a);
  n.axis = axis;
  n.i0 = begin;
  n.i1 = end;
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = end - begin;
  Tensor out(out_shape);
  const AxisSplit s = split_axis(x.shape(), axis);
  const int64_t span = end - begin;
  for (int64_t o = 0; o < s.outer; ++o) {
    const real* src = x.data() + (o * s.k + begin) * s.inner;
    real* dst = out.data() + o * span * s.inner;
    std::memcpy(dst, src, static_cast<size_t>(span * s.inner) * sizeof(real));
  }
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value reshape(Value a, std::vector<int> shape) {
  Tape::Node n = unary(Op::kReshape, a);
  n.value = a.tensor().reshaped(std::move(shape));
  return OpBuilder::make(*a.tape, std::move(n));
}

Value broadcast(Value a, int axis, int extent) {
  const Tensor& x = a.tensor();
  require(axis >= 0 && axis < x.rank(), "broadcast", "axis out of range");
  require(x.dim(axis) == 1, "broadcast", "axis extent must be 1, got " + x.shape_str());
  require(extent >= 1, "broadcast", "bad extent");
  Tape::Node n = unary(Op::kBroadcast, a);
  n.axis = axis;
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = extent;
  Tensor out(out_shape);
  const AxisSplit s = split_axis(out_shape, axis);
  for (int64_t o = 0; o < s.outer; ++o) {
    const real* src = x.data() + o * s.inner;
    for (int64_t j = 0; j < s.k; ++j) {
      std::memcpy(out.data() + (o * s.k + j) * s.inner, src,
                  static_cast<size_t>(s.inner) * sizeof(real));
    }
  }
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value stop_gradient(Value a) {
  Tape::Node n = unary(Op::kStopGradient, a);
  n.requires_grad = false;
  n.value = a.tensor();
  return OpBuilder::make(*a.tape, std::move(n));
}

Value take_rows(Value a, std::vector<int> rows) {
  const Tensor& x = a.tensor();
  require(x.rank() == 2, "take_rows", "expects 2-d operand");
  for (int r : rows) require(r >= 0 && r < x.dim(0), "take_rows", "row index out of range");
  Tape::Node n = unary(Op::kTakeRows, a);
  n.extra = std::move(rows);
  const int64_t m = x.dim(1);
  Tensor out({static_cast<int>(n.extra.size()), x.dim(1)});
  for (size_t r = 0; r < n.extra.size(); ++r) {
    std::memcpy(out.data() + static_cast<int64_t>(r) * m, x.data() + static_cast<int64_t>(n.extra[r]) * m,
                static_cast<size_t>(m) * sizeof(real));
  }
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value gather_flat(Value a, std::vector<int64_t> idx, std::vector<int> out_shape) {
  const Tensor& x = a.tensor();
  require(shape_product(out_shape) == static_cast<int64_t>(idx.size()), "gather_flat",
          "index count does not match output shape");
  for (int64_t i : idx) require(i >= 0 && i < x.size(), "gather_flat", "flat index out of range");
  Tape::Node n = unary(Op::kGatherFlat, a);
  n.gather = std::move(idx);
  Tensor out(std::move(out_shape));
  for (int64_t i = 0; i < out.size(); ++i) out[i] = x[n.gather[static_cast<size_t>(i)]];
  n.value = std::move(out);
  return OpBuilder::make(*a.tape, std::move(n));
}

Value mean(Value a) {
  const int64_t sz = a.tensor().size();
  require(sz > 0, "mean", "empty tensor");
  return mul_scalar(sum(a), real(1) / static_cast<real>(sz));
}

Value dot(Value a, Value b) { return sum(mul(a, b)); }

}  // namespace fvp::ad
