#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// A Tape records every op applied to its Vars. Parameters live outside the
// tape and receive accumulated gradients on backward(). A tape constructed
// with record=false only evaluates forward values (inference).

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flowdrive::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  /// Dimension size; negative axes count from the back.
  std::size_t dim(int axis) const;

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool all_finite() const;
  bool operator==(const Tensor& other) const = default;
};

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Mul,
  Scale,
  Concat,
  Slice,
  Reshape,
  Transpose,
  MeanOverAxis,
  LayerNorm,
  Gelu,
  Softmax,
  MaskedSoftmax,
  Dropout,
  EmbeddingLookup,
  SinusoidalTimeEmbed,
};

std::string_view op_name(OpKind op);

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf without gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is kept on the tape (read with grad()).
  Var leaf(Tensor value, bool requires_grad = true);
  /// Leaf aliasing an external parameter; backward() accumulates into
  /// param.grad. The parameter must outlive the tape.
  Var param(Parameter& p);

  const Tensor& value(Var v) const;
  /// Gradient of the last backward() w.r.t. a leaf; zero tensor if the leaf
  /// did not influence the loss.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  /// Propagates d(loss)/d(.) to every requires_grad node. `loss` must hold a
  /// single element.
  void backward(Var loss);

  /// Drops all nodes. Outstanding Vars become invalid.
  void reset();

  bool recording() const { return record_; }

  // Dropout configuration: identity unless training.
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  void set_step(std::uint64_t step) { step_ = step; }
  std::uint64_t step() const { return step_; }

  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

  std::size_t size() const { return nodes_.size(); }
  OpKind op_at(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs_at(std::size_t id) const { return nodes_[id].inputs; }

  // Used by op implementations.
  using BackwardFn = std::function<void(const Tensor& out_grad, Tape& tape)>;
  Var push(OpKind op, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn);
  /// Adds `g` into the gradient slot of node `id` (allocating it if needed).
  void accumulate(std::size_t id, const Tensor& g);
  /// Mutable gradient slot, zero-initialized on first access.
  Tensor& grad_slot(std::size_t id);

 private:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool record_;
  bool training_ = false;
  bool check_finite_ = true;
  std::uint64_t step_ = 0;
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Op vocabulary. Shape errors throw flowdrive::Error naming the op.

/// a[..., m, k] x b[k, n] (shared) or b[..., k, n] (same batch dims).
Var matmul(Var a, Var b);
/// Elementwise a + b; b broadcasts into a (dims equal or 1, rank <= a's).
Var add(Var a, Var b);
/// Elementwise a * b with the same broadcast rule as add.
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var concat(std::span<const Var> xs, int axis);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
Var reshape(Var a, Shape shape);
/// Swaps two axes.
Var transpose(Var a, int axis0, int axis1);
/// Mean over one axis; the axis is removed from the output shape.
Var mean_over_axis(Var a, int axis);
/// Normalizes the last axis to zero mean / unit variance (no affine).
Var layer_norm(Var a, double eps = 1e-5);
/// Exact GELU, x * Phi(x).
Var gelu(Var a);
/// Softmax over the last axis.
Var softmax(Var a);
/// Softmax over the last axis where mask==0 entries get weight 0. Rows with
/// no unmasked entry produce all zeros. `mask` broadcasts like add().
Var masked_softmax(Var a, const Tensor& mask);
/// Inverted dropout keyed by (tape step, layer). Identity unless the tape is
/// in training mode or p == 0.
Var dropout(Var a, double p, std::uint64_t layer);
/// Rows of table[V, d] gathered by index -> [indices.size(), d].
Var embedding_lookup(Var table, std::span<const int> indices);
/// t[B] -> [B, dim] = [cos(scale*t*f_i), sin(scale*t*f_i)], f_i = 10000^(-i/half).
Var sinusoidal_time_embed(Var t, std::size_t dim, double scale = 1000.0);

// Composites built from the vocabulary.
Var sub(Var a, Var b);
/// Mean of all elements as a [1] tensor.
Var mean_all(Var a);

/// Generic dispatcher over the op vocabulary.
struct OpAttrs {
  int axis = -1;
  int axis2 = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  double scalar = 1.0;
  double prob = 0.0;
  std::uint64_t layer = 0;
  std::size_t dim = 0;
  Shape shape;
  Tensor mask;
  std::vector<int> indices;
};
Var apply_op(OpKind op, std::span<const Var> inputs, const OpAttrs& attrs = {});

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
/// with central differences of step eps. Throws if f is non-finite nearby.
double grad_check(const ScalarFn& f, const Tensor& point, double eps = 1e-4);

}  // namespace flowdrive::ad
