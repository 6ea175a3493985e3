#pragma once

#include <cstdint>
#include <vector>

#include "fvp/tensor.hpp"

namespace fvp::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& tensor() const;
  const std::vector<int>& shape() const { return tensor().shape(); }
  real scalar_value() const { return tensor()[0]; }
};

enum class Op : uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kAddScalar,
  kMulScalar,
  kMatMul,
  kTranspose,
  kAddRowVec,
  kRelu,
  kSoftplus,
  kSigmoid,
  kExp,
  kLog,
  kSqrt,
  kAbs,
  kSquare,
  kSin,
  kCos,
  kMaximum,
  kSum,
  kSumAxis,
  kCumSum,
  kConcat,
  kSlice,
  kReshape,
  kBroadcast,
  kStopGradient,
  kTakeRows,
  kGatherFlat,
};

// Reverse-mode tape over Tensor values. Forward values are computed eagerly as
// nodes are recorded; backward() walks the records in reverse. Single-threaded
// per instance; independent tapes may run on separate threads.
class Tape {
 public:
  explicit Tape(bool finite_checks = true) : finite_checks_(finite_checks) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value leaf(Tensor v);
  Value constant(Tensor v);
  Value constant_scalar(real v) { return constant(Tensor::scalar(v)); }

  // Computes d(output)/d(node) for every node reachable from `output`, which
  // must be scalar-valued. May be called once per tape.
  void backward(Value output);

  // Gradient accumulated at `v` by the last backward(); zeros if untouched.
  Tensor grad(Value v) const;

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  size_t node_count() const { return nodes_.size(); }
  bool finite_checks() const { return finite_checks_; }
  void reserve(size_t n) { nodes_.reserve(n); }

  struct Node {
    Op op = Op::kConstant;
    int a = -1;
    int b = -1;
    std::vector<int> extra;       // concat parents / take_rows row indices
    std::vector<int64_t> gather;  // gather_flat flat indices
    int axis = 0;
    int i0 = 0;
    int i1 = 0;
    real scalar = 0;
    bool flag = false;  // cumsum exclusive / sum_axis keepdim
    bool requires_grad = false;
    Tensor value;
  };

  int push(Node n);
  void check_finite(const Node& n) const;
  void vjp(int id, std::vector<Tensor>& grads, std::vector<char>& touched) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> touched_;
  bool finite_checks_ = true;
  bool backward_done_ = false;
};

// ---- op builders ------------------------------------------------------------

Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value div(Value a, Value b);
Value neg(Value a);
Value add_scalar(Value a, real s);
Value mul_scalar(Value a, real s);
Value matmul(Value a, Value b);          // [n,k] x [k,m]
Value transpose(Value a);                // 2-d
Value add_rowvec(Value a, Value b);      // [n,m] + [m]
Value relu(Value a);
Value softplus(Value a);
Value sigmoid(Value a);
Value exp(Value a);
Value log(Value a);
Value sqrt(Value a);
Value abs(Value a);
Value square(Value a);
Value sin(Value a);
Value cos(Value a);
Value maximum(Value a, Value b);         // ties take a's subgradient
Value sum(Value a);                      // scalar result
Value sum_axis(Value a, int axis, bool keepdim = false);
Value cumsum(Value a, int axis, bool exclusive);
Value concat(const std::vector<Value>& parts, int axis);
Value slice(Value a, int axis, int begin, int end);
Value reshape(Value a, std::vector<int> shape);
Value broadcast(Value a, int axis, int extent);  // requires shape[axis] == 1
Value stop_gradient(Value a);
Value take_rows(Value a, std::vector<int> rows);                          // 2-d gather
Value gather_flat(Value a, std::vector<int64_t> idx, std::vector<int> out_shape);

Value mean(Value a);
Value dot(Value a, Value b);

}  // namespace fvp::ad
