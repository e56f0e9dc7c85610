#include "flowdrive/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "flowdrive/error.hpp"
#include "flowdrive/random.hpp"

namespace flowdrive::ad {

namespace {

// Row-major products that accumulate every output element in a fixed order
// over the inner index, so a row's result never depends on its neighbours.

// C[m, n] += A[m, k] B[k, n]
void gemm_nn(double* __restrict c, const double* __restrict a, const double* __restrict b,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[k, n] += A[m, k]^T G[m, n]
void gemm_tn(double* __restrict c, const double* __restrict a, const double* __restrict g,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

// out[n, k] = in[k, n]^T
void transpose(double* __restrict out, const double* __restrict in, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) out[j * k + p] = in[p * n + j];
}

std::size_t norm_axis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  FD_CHECK(a >= 0 && a < r, "{}: axis {} out of range for rank {}", op, axis, rank);
  return static_cast<std::size_t>(a);
}

// Product of dims in [from, to).
std::size_t span_numel(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

bool needs_grad(const Tape& tape, std::span<const Var> xs) {
  if (!tape.recording()) return false;
  return std::any_of(xs.begin(), xs.end(), [&](Var v) { return tape.requires_grad(v); });
}

Tape& tape_of(Var v) {
  FD_CHECK(v.tape() != nullptr, "op applied to an unbound Var");
  return *v.tape();
}

void check_same_tape(Var a, Var b, std::string_view op) {
  FD_CHECK(a.tape() == b.tape(), "{}: inputs live on different tapes", op);
}

// Layout of b broadcast into a's shape.
struct Broadcast {
  enum class Mode { Identity, Suffix, Prefix, General } mode = Mode::Identity;
  std::size_t period = 1;  // Suffix: i % period; Prefix: i / period
  std::vector<std::size_t> b_index;

  std::size_t operator()(std::size_t i) const {
    switch (mode) {
      case Mode::Identity: return i;
      case Mode::Suffix: return i % period;
      case Mode::Prefix: return i / period;
      case Mode::General: return b_index[i];
    }
    return i;
  }
};

Broadcast make_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  FD_CHECK(b.size() <= a.size(), "{}: cannot broadcast {} into {}", op, shape_str(b), shape_str(a));
  Broadcast br;
  const std::size_t r = a.size();
  Shape bp(r, 1);
  std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  for (std::size_t i = 0; i < r; ++i) {
    FD_CHECK(bp[i] == a[i] || bp[i] == 1, "{}: shape mismatch {} vs {}", op, shape_str(a),
             shape_str(b));
  }
  if (bp == a) return br;
  // Suffix: leading ones then a matching tail.
  std::size_t lead = 0;
  while (lead < r && bp[lead] == 1) ++lead;
  if (std::equal(bp.begin() + static_cast<std::ptrdiff_t>(lead), bp.end(),
                 a.begin() + static_cast<std::ptrdiff_t>(lead))) {
    br.mode = Broadcast::Mode::Suffix;
    br.period = span_numel(a, lead, r);
    return br;
  }
  // Prefix: matching head then trailing ones.
  std::size_t head = r;
  while (head > 0 && bp[head - 1] == 1) --head;
  if (std::equal(bp.begin(), bp.begin() + static_cast<std::ptrdiff_t>(head), a.begin())) {
    br.mode = Broadcast::Mode::Prefix;
    br.period = span_numel(a, head, r);
    return br;
  }
  br.mode = Broadcast::Mode::General;
  std::vector<std::size_t> bstride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    bstride[i] = bp[i] == 1 ? 0 : s;
    s *= bp[i];
  }
  const std::size_t n = shape_numel(a);
  br.b_index.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    br.b_index[lin] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += bstride[d];
      if (idx[d] < a[d]) break;
      off -= bstride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return br;
}

// Calls f(i, j) for every output index i and its broadcast source j, with
// the mode dispatch hoisted out of the loop.
template <class F>
void for_each_broadcast(const Broadcast& br, std::size_t n, F&& f) {
  switch (br.mode) {
    case Broadcast::Mode::Identity:
      for (std::size_t i = 0; i < n; ++i) f(i, i);
      return;
    case Broadcast::Mode::Suffix:
      for (std::size_t base = 0; base < n; base += br.period)
        for (std::size_t k = 0; k < br.period; ++k) f(base + k, k);
      return;
    case Broadcast::Mode::Prefix:
      for (std::size_t base = 0, j = 0; base < n; base += br.period, ++j)
        for (std::size_t k = 0; k < br.period; ++k) f(base + k, j);
      return;
    case Broadcast::Mode::General:
      for (std::size_t i = 0; i < n; ++i) f(i, br.b_index[i]);
      return;
  }
}

void ensure_finite(const Tape& tape, const Tensor& t, OpKind op) {
  if (tape.check_finite() && !t.all_finite()) {
    throw NonFiniteError(fmt::format("{}: produced non-finite values (shape {})", op_name(op),
                                     shape_str(t.shape)));
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  FD_CHECK(shape_numel(shape) == data.size(), "tensor: shape {} holds {} elements, got {}",
           shape_str(shape), shape_numel(shape), data.size());
}

std::size_t Tensor::dim(int axis) const { return shape[norm_axis(axis, rank(), "dim")]; }

bool Tensor::all_finite() const {
  // Non-finite iff the exponent bits are all ones; the OR-reduction vectorizes.
  constexpr std::uint64_t kExp = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : data) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExp) == kExp);
  return bad == 0;
}

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Reshape: return "reshape";
    case OpKind::Transpose: return "transpose";
    case OpKind::MeanOverAxis: return "mean_over_axis";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Gelu: return "gelu";
    case OpKind::Softmax: return "softmax";
    case OpKind::MaskedSoftmax: return "masked_softmax";
    case OpKind::Dropout: return "dropout";
    case OpKind::EmbeddingLookup: return "embedding_lookup";
    case OpKind::SinusoidalTimeEmbed: return "sinusoidal_time_embed";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id());
  return n.external ? *n.external : n.value;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.shape.empty()) return Tensor(value(v).shape, 0.0);
  return n.grad;
}

Var Tape::push(OpKind op, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn) {
  ensure_finite(*this, value, op);
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (record_ && fn) {
    n.requires_grad = std::any_of(n.inputs.begin(), n.inputs.end(),
                                  [&](std::size_t i) { return nodes_[i].requires_grad; });
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape.empty()) n.grad = Tensor(value(Var(this, id)).shape, 0.0);
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  Tensor& slot = grad_slot(id);
  for (std::size_t i = 0; i < g.data.size(); ++i) slot.data[i] += g.data[i];
}

void Tape::backward(Var loss) {
  FD_CHECK(loss.tape() == this, "backward: loss belongs to another tape");
  const Tensor& lv = value(loss);
  FD_CHECK(lv.numel() == 1, "backward: loss must be scalar, got shape {}", shape_str(lv.shape));
  for (Node& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_slot(loss.id()).data[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.shape.empty()) continue;
    if (n.backward) {
      n.backward(n.grad, *this);
    } else if (n.param != nullptr) {
      Tensor& pg = n.param->grad;
      if (pg.shape != n.external->shape) pg = Tensor(n.external->shape, 0.0);
      for (std::size_t i = 0; i < pg.data.size(); ++i) pg.data[i] += n.grad.data[i];
    }
  }
}

void Tape::reset() { nodes_.clear(); }

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  FD_CHECK(A.rank() >= 2 && B.rank() >= 2, "matmul: need rank >= 2, got {} x {}",
           shape_str(A.shape), shape_str(B.shape));
  const std::size_t m = A.dim(-2), k = A.dim(-1);
  const std::size_t kb = B.dim(-2), n = B.dim(-1);
  FD_CHECK(k == kb, "matmul: inner dims differ {} x {}", shape_str(A.shape), shape_str(B.shape));
  const bool shared = B.rank() == 2;
  const std::size_t batch = span_numel(A.shape, 0, A.rank() - 2);
  if (!shared) {
    FD_CHECK(A.rank() == B.rank() &&
                 std::equal(A.shape.begin(), A.shape.end() - 2, B.shape.begin()),
             "matmul: batch dims differ {} x {}", shape_str(A.shape), shape_str(B.shape));
  }
  Shape out_shape(A.shape.begin(), A.shape.end() - 1);
  out_shape.push_back(n);
  Tensor out(out_shape, 0.0);
  const std::size_t bstride = shared ? 0 : k * n;
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nn(out.data.data() + i * m * n, A.data.data() + i * m * k, B.data.data() + i * bstride, m,
            k, n);
  }
  const std::size_t ia = a.id(), ib = b.id();
  std::vector<Var> ins{a, b};
  return tape.push(OpKind::MatMul, {ia, ib}, std::move(out),
                   needs_grad(tape, ins) ? Tape::BackwardFn([=](const Tensor& g, Tape& t) {
                     const Tensor& Av = t.value(Var(&t, ia));
                     const Tensor& Bv = t.value(Var(&t, ib));
                     if (t.requires_grad(Var(&t, ia))) {
                       Tensor& ga = t.grad_slot(ia);
                       std::vector<double> bt(k * n);
                       for (std::size_t i = 0; i < batch; ++i) {
                         if (i == 0 || !shared) transpose(bt.data(), Bv.data.data() + i * bstride, k, n);
                         gemm_nn(ga.data.data() + i * m * k, g.data.data() + i * m * n, bt.data(), m,
                                 n, k);
                       }
                     }
                     if (t.requires_grad(Var(&t, ib))) {
                       Tensor& gb = t.grad_slot(ib);
                       for (std::size_t i = 0; i < batch; ++i) {
                         gemm_tn(gb.data.data() + i * bstride, Av.data.data() + i * m * k,
                                 g.data.data() + i * m * n, m, k, n);
                       }
                     }
                   })
                                           : nullptr);
}

namespace {

Var binary_elementwise(Var a, Var b, OpKind op) {
  const std::string_view name = op_name(op);
  check_same_tape(a, b, name);
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Broadcast br = make_broadcast(A.shape, B.shape, name);
  Tensor out(A.shape, 0.0);
  const std::size_t n = A.numel();
  const bool is_add = op == OpKind::Add;
  if (is_add) {
    for_each_broadcast(br, n, [&](std::size_t i, std::size_t j) { out.data[i] = A.data[i] + B.data[j]; });
  } else {
    for_each_broadcast(br, n, [&](std::size_t i, std::size_t j) { out.data[i] = A.data[i] * B.data[j]; });
  }
  const std::size_t ia = a.id(), ib = b.id();
  std::vector<Var> ins{a, b};
  auto fn = [=, br = std::move(br)](const Tensor& g, Tape& t) {
    const bool ga_on = t.requires_grad(Var(&t, ia));
    const bool gb_on = t.requires_grad(Var(&t, ib));
    if (ga_on) {
      Tensor& ga = t.grad_slot(ia);
      if (is_add) {
        for (std::size_t i = 0; i < n; ++i) ga.data[i] += g.data[i];
      } else {
        const Tensor& Bv = t.value(Var(&t, ib));
        for_each_broadcast(br, n, [&](std::size_t i, std::size_t j) {
          ga.data[i] += g.data[i] * Bv.data[j];
        });
      }
    }
    if (gb_on) {
      Tensor& gb = t.grad_slot(ib);
      if (is_add) {
        for_each_broadcast(br, n, [&](std::size_t i, std::size_t j) { gb.data[j] += g.data[i]; });
      } else {
        const Tensor& Av = t.value(Var(&t, ia));
        for_each_broadcast(br, n, [&](std::size_t i, std::size_t j) {
          gb.data[j] += g.data[i] * Av.data[i];
        });
      }
    }
  };
  return tape.push(op, {ia, ib}, std::move(out),
                   needs_grad(tape, ins) ? Tape::BackwardFn(std::move(fn)) : nullptr);
}

}  // namespace

Var add(Var a, Var b) { return binary_elementwise(a, b, OpKind::Add); }
Var mul(Var a, Var b) { return binary_elementwise(a, b, OpKind::Mul); }

Var scale(Var a, double s) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  const std::size_t ia = a.id();
  return tape.push(OpKind::Scale, {ia}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&a, 1))
                       ? Tape::BackwardFn([=](const Tensor& g, Tape& t) {
                           Tensor& ga = t.grad_slot(ia);
                           for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
                         })
                       : nullptr);
}

Var concat(std::span<const Var> xs, int axis) {
  FD_CHECK(!xs.empty(), "concat: no inputs");
  Tape& tape = tape_of(xs[0]);
  const Shape& s0 = xs[0].shape();
  const std::size_t ax = norm_axis(axis, s0.size(), "concat");
  std::vector<std::size_t> widths;
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (Var v : xs) {
    check_same_tape(xs[0], v, "concat");
    const Shape& s = v.shape();
    FD_CHECK(s.size() == s0.size(), "concat: rank mismatch {} vs {}", shape_str(s0), shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d) {
      FD_CHECK(d == ax || s[d] == s0[d], "concat: shape mismatch {} vs {} on axis {}",
               shape_str(s0), shape_str(s), axis);
    }
    const std::size_t w = s[ax] * span_numel(s, ax + 1, s.size());
    widths.push_back(w);
    ids.push_back(v.id());
    total += s[ax];
  }
  Shape out_shape = s0;
  out_shape[ax] = total;
  const std::size_t outer = span_numel(s0, 0, ax);
  const std::size_t row = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  Tensor out(out_shape, 0.0);
  std::size_t col = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor& v = xs[k].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.data.begin() + static_cast<std::ptrdiff_t>(o * row + col));
    }
    col += widths[k];
  }
  return tape.push(OpKind::Concat, ids, std::move(out),
                   needs_grad(tape, xs) ? Tape::BackwardFn([=](const Tensor& g, Tape& t) {
                     std::size_t c = 0;
                     for (std::size_t k = 0; k < ids.size(); ++k) {
                       if (t.requires_grad(Var(&t, ids[k]))) {
                         Tensor& gk = t.grad_slot(ids[k]);
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t j = 0; j < widths[k]; ++j)
                             gk.data[o * widths[k] + j] += g.data[o * row + c + j];
                       }
                       c += widths[k];
                     }
                   })
                                         : nullptr);
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  const std::size_t ax = norm_axis(axis, A.rank(), "slice");
  FD_CHECK(begin < end && end <= A.shape[ax], "slice: range [{}, {}) invalid for {} axis {}", begin,
           end, shape_str(A.shape), axis);
  const std::size_t outer = span_numel(A.shape, 0, ax);
  const std::size_t inner = span_numel(A.shape, ax + 1, A.rank());
  const std::size_t len = A.shape[ax];
  Shape out_shape = A.shape;
  out_shape[ax] = end - begin;
  Tensor out(out_shape, 0.0);
  const std::size_t w = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(A.data.begin() + static_cast<std::ptrdiff_t>((o * len + begin) * inner), w,
                out.data.begin() + static_cast<std::ptrdiff_t>(o * w));
  }
  const std::size_t ia = a.id();
  return tape.push(OpKind::Slice, {ia}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&a, 1))
                       ? Tape::BackwardFn([=](const Tensor& g, Tape& t) {
                           Tensor& ga = t.grad_slot(ia);
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t j = 0; j < w; ++j)
                               ga.data[(o * len + begin) * inner + j] += g.data[o * w + j];
                         })
                       : nullptr);
}

Var reshape(Var a, Shape shape) {
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  FD_CHECK(shape_numel(shape) == A.numel(), "reshape: cannot view {} as {}", shape_str(A.shape),
           shape_str(shape));
  Tensor out(std::move(shape), A.data);
  const std::size_t ia = a.id();
  return tape.push(OpKind::Reshape, {ia}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&a, 1))
                       ? Tape::BackwardFn([=](const Tensor& g, Tape& t) {
                           Tensor& ga = t.grad_slot(ia);
                           for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
                         })
                       : nullptr);
}

Var transpose(Var a, int axis0, int axis1) {
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  std::size_t x0 = norm_axis(axis0, A.rank(), "transpose");
  std::size_t x1 = norm_axis(axis1, A.rank(), "transpose");
  if (x0 > x1) std::swap(x0, x1);
  // View as [outer, n0, mid, n1, inner] and swap n0 <-> n1.
  const std::size_t outer = span_numel(A.shape, 0, x0);
  const std::size_t n0 = A.shape[x0];
  const std::size_t mid = span_numel(A.shape, x0 + 1, x1);
  const std::size_t n1 = A.shape[x1];
  const std::size_t inner = span_numel(A.shape, x1 + 1, A.rank());
  Shape out_shape = A.shape;
  std::swap(out_shape[x0], out_shape[x1]);
  // Maps output linear index -> input linear index.
  auto src_index = [=](std::size_t o, std::size_t i1, std::size_t m, std::size_t i0,
                       std::size_t in) {
    return (((o * n0 + i0) * mid + m) * n1 + i1) * inner + in;
  };
  Tensor out(out_shape, 0.0);
  std::size_t dst = 0;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i1 = 0; i1 < n1; ++i1)
      for (std::size_t m = 0; m < mid; ++m)
        for (std::size_t i0 = 0; i0 < n0; ++i0)
          for (std::size_t in = 0; in < inner; ++in) out.data[dst++] = A.data[src_index(o, i1, m, i0, in)];
  const std::size_t ia = a.id();
  return tape.push(OpKind::Transpose, {ia}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&a, 1))
                       ? Tape::BackwardFn([=](const Tensor& g, Tape& t) {
                           Tensor& ga = t.grad_slot(ia);
                           std::size_t d = 0;
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i1 = 0; i1 < n1; ++i1)
                               for (std::size_t m = 0; m < mid; ++m)
                                 for (std::size_t i0 = 0; i0 < n0; ++i0)
                                   for (std::size_t in = 0; in < inner; ++in)
                                     ga.data[src_index(o, i1, m, i0, in)] += g.data[d++];
                         })
                       : nullptr);
}

Var mean_over_axis(Var a, int axis) {
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  const std::size_t ax = norm_axis(axis, A.rank(), "mean_over_axis");
  const std::size_t outer = span_numel(A.shape, 0, ax);
  const std::size_t len = A.shape[ax];
  const std::size_t inner = span_numel(A.shape, ax + 1, A.rank());
  Shape out_shape;
  for (std::size_t d = 0; d < A.rank(); ++d)
    if (d != ax) out_shape.push_back(A.shape[d]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape, 0.0);
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t in = 0; in < inner; ++in)
        out.data[o * inner + in] += A.data[(o * len + l) * inner + in] * inv;
  const std::size_t ia = a.id();
  return tape.push(OpKind::MeanOverAxis, {ia}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&a, 1))
                       ? Tape::BackwardFn([=](const Tensor& g, Tape& t) {
                           Tensor& ga = t.grad_slot(ia);
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t l = 0; l < len; ++l)
                               for (std::size_t in = 0; in < inner; ++in)
                                 ga.data[(o * len + l) * inner + in] += g.data[o * inner + in] * inv;
                         })
                       : nullptr);
}

Var layer_norm(Var a, double eps) {
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  FD_CHECK(A.rank() >= 1, "layer_norm: rank-0 input");
  const std::size_t d = A.dim(-1);
  const std::size_t rows = A.numel() / d;
  Tensor out(A.shape, 0.0);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = A.data.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) out.data[r * d + j] = (x[j] - mu) * is;
  }
  const std::size_t ia = a.id();
  const std::size_t self = tape.size();
  return tape.push(OpKind::LayerNorm, {ia}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&a, 1))
                       ? Tape::BackwardFn([=, inv_std = std::move(inv_std)](const Tensor& g, Tape& t) {
                           const Tensor& y = t.value(Var(&t, self));
                           Tensor& ga = t.grad_slot(ia);
                           const double dn = static_cast<double>(d);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* gy = g.data.data() + r * d;
                             const double* yy = y.data.data() + r * d;
                             double mg = 0.0, mgy = 0.0;
                             for (std::size_t j = 0; j < d; ++j) {
                               mg += gy[j];
                               mgy += gy[j] * yy[j];
                             }
                             mg /= dn;
                             mgy /= dn;
                             for (std::size_t j = 0; j < d; ++j)
                               ga.data[r * d + j] += inv_std[r] * (gy[j] - mg - yy[j] * mgy);
                           }
                         })
                       : nullptr);
}

Var gelu(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  Tensor out(A.shape, 0.0);
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < A.numel(); ++i) {
    const double x = A.data[i];
    out.data[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  const std::size_t ia = a.id();
  return tape.push(OpKind::Gelu, {ia}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&a, 1))
                       ? Tape::BackwardFn([=](const Tensor& g, Tape& t) {
                           const Tensor& x = t.value(Var(&t, ia));
                           Tensor& ga = t.grad_slot(ia);
                           const double k = 1.0 / std::sqrt(2.0 * std::numbers::pi);
                           for (std::size_t i = 0; i < x.numel(); ++i) {
                             const double v = x.data[i];
                             const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                             const double pdf = k * std::exp(-0.5 * v * v);
                             ga.data[i] += g.data[i] * (cdf + v * pdf);
                           }
                         })
                       : nullptr);
}

namespace {

Var softmax_impl(Var a, const Tensor* mask, OpKind op) {
  Tape& tape = tape_of(a);
  const Tensor& A = a.value();
  const std::size_t d = A.dim(-1);
  const std::size_t rows = A.numel() / d;
  Broadcast br;
  if (mask) br = make_broadcast(A.shape, mask->shape, op_name(op));
  auto valid = [&](std::size_t i) {
    if (!mask) return true;
    return mask->data[br(i)] != 0.0;
  };
  Tensor out(A.shape, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j)
      if (valid(base + j)) mx = std::max(mx, A.data[base + j]);
    if (!std::isfinite(mx)) continue;  // fully masked row stays zero
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (!valid(base + j)) continue;
      const double e = std::exp(A.data[base + j] - mx);
      out.data[base + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < d; ++j) out.data[base + j] /= z;
  }
  const std::size_t ia = a.id();
  const std::size_t self = tape.size();
  return tape.push(op, {ia}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&a, 1))
                       ? Tape::BackwardFn([=](const Tensor& g, Tape& t) {
                           const Tensor& y = t.value(Var(&t, self));
                           Tensor& ga = t.grad_slot(ia);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const std::size_t base = r * d;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < d; ++j) dot += g.data[base + j] * y.data[base + j];
                             for (std::size_t j = 0; j < d; ++j)
                               ga.data[base + j] += y.data[base + j] * (g.data[base + j] - dot);
                           }
                         })
                       : nullptr);
}

}  // namespace

Var softmax(Var a) { return softmax_impl(a, nullptr, OpKind::Softmax); }

Var masked_softmax(Var a, const Tensor& mask) { return softmax_impl(a, &mask, OpKind::MaskedSoftmax); }

Var dropout(Var a, double p, std::uint64_t layer) {
  Tape& tape = tape_of(a);
  FD_CHECK(p >= 0.0 && p < 1.0, "dropout: probability {} outside [0, 1)", p);
  if (!tape.training() || p == 0.0) return a;
  const Tensor& A = a.value();
  std::mt19937_64 rng(splitmix64(tape.step() * 0x100000001B3ull ^ splitmix64(layer + 1)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> keep(A.numel());
  const double s = 1.0 / (1.0 - p);
  Tensor out(A.shape, 0.0);
  for (std::size_t i = 0; i < A.numel(); ++i) {
    keep[i] = u(rng) >= p ? s : 0.0;
    out.data[i] = A.data[i] * keep[i];
  }
  const std::size_t ia = a.id();
  return tape.push(OpKind::Dropout, {ia}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&a, 1))
                       ? Tape::BackwardFn([=, keep = std::move(keep)](const Tensor& g, Tape& t) {
                           Tensor& ga = t.grad_slot(ia);
                           for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * keep[i];
                         })
                       : nullptr);
}

Var embedding_lookup(Var table, std::span<const int> indices) {
  Tape& tape = tape_of(table);
  const Tensor& T = table.value();
  FD_CHECK(T.rank() == 2, "embedding_lookup: table must be rank 2, got {}", shape_str(T.shape));
  const std::size_t rows = T.shape[0], d = T.shape[1];
  std::vector<int> idx(indices.begin(), indices.end());
  Tensor out({idx.size(), d}, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    FD_CHECK(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < rows,
             "embedding_lookup: index {} out of range for table {}", idx[i], shape_str(T.shape));
    std::copy_n(T.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const std::size_t it = table.id();
  return tape.push(OpKind::EmbeddingLookup, {it}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&table, 1))
                       ? Tape::BackwardFn([=, idx = std::move(idx)](const Tensor& g, Tape& t) {
                           Tensor& gt = t.grad_slot(it);
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < d; ++j)
                               gt.data[static_cast<std::size_t>(idx[i]) * d + j] += g.data[i * d + j];
                         })
                       : nullptr);
}

Var sinusoidal_time_embed(Var t, std::size_t dim, double scale) {
  Tape& tape = tape_of(t);
  const Tensor& T = t.value();
  FD_CHECK(T.rank() == 1, "sinusoidal_time_embed: expected [B], got {}", shape_str(T.shape));
  FD_CHECK(dim >= 2 && dim % 2 == 0, "sinusoidal_time_embed: dim {} must be even", dim);
  const std::size_t half = dim / 2;
  const std::size_t B = T.shape[0];
  std::vector<double> freq(half);
  for (std::size_t i = 0; i < half; ++i)
    freq[i] = scale * std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
  Tensor out({B, dim}, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double arg = T.data[b] * freq[i];
      out.data[b * dim + i] = std::cos(arg);
      out.data[b * dim + half + i] = std::sin(arg);
    }
  const std::size_t it = t.id();
  return tape.push(OpKind::SinusoidalTimeEmbed, {it}, std::move(out),
                   needs_grad(tape, std::span<const Var>(&t, 1))
                       ? Tape::BackwardFn([=, freq = std::move(freq)](const Tensor& g, Tape& tp) {
                           const Tensor& tv = tp.value(Var(&tp, it));
                           Tensor& gt = tp.grad_slot(it);
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t i = 0; i < half; ++i) {
                               const double arg = tv.data[b] * freq[i];
                               gt.data[b] += freq[i] * (-std::sin(arg) * g.data[b * dim + i] +
                                                        std::cos(arg) * g.data[b * dim + half + i]);
                             }
                         })
                       : nullptr);
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mean_all(Var a) {
  const std::size_t n = a.value().numel();
  return mean_over_axis(reshape(a, {n}), 0);
}

Var apply_op(OpKind op, std::span<const Var> in, const OpAttrs& at) {
  auto need = [&](std::size_t n) {
    FD_CHECK(in.size() == n, "{}: expected {} inputs, got {}", op_name(op), n, in.size());
  };
  switch (op) {
    case OpKind::MatMul: need(2); return matmul(in[0], in[1]);
    case OpKind::Add: need(2); return add(in[0], in[1]);
    case OpKind::Mul: need(2); return mul(in[0], in[1]);
    case OpKind::Scale: need(1); return scale(in[0], at.scalar);
    case OpKind::Concat: return concat(in, at.axis);
    case OpKind::Slice: need(1); return slice(in[0], at.axis, at.begin, at.end);
    case OpKind::Reshape: need(1); return reshape(in[0], at.shape);
    case OpKind::Transpose: need(1); return transpose(in[0], at.axis, at.axis2);
    case OpKind::MeanOverAxis: need(1); return mean_over_axis(in[0], at.axis);
    case OpKind::LayerNorm: need(1); return layer_norm(in[0]);
    case OpKind::Gelu: need(1); return gelu(in[0]);
    case OpKind::Softmax: need(1); return softmax(in[0]);
    case OpKind::MaskedSoftmax: need(1); return masked_softmax(in[0], at.mask);
    case OpKind::Dropout: need(1); return dropout(in[0], at.prob, at.layer);
    case OpKind::EmbeddingLookup: need(1); return embedding_lookup(in[0], at.indices);
    case OpKind::SinusoidalTimeEmbed: need(1); return sinusoidal_time_embed(in[0], at.dim, at.scalar);
    case OpKind::Leaf: break;
  }
  throw Error(fmt::format("apply_op: {} is not an op", op_name(op)));
}

// ---------------------------------------------------------------------------

double grad_check(const ScalarFn& f, const Tensor& point, double eps) {
  FD_CHECK(eps > 0.0, "grad_check: eps must be positive, got {}", eps);
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.leaf(point, true);
    Var y = f(tape, x);
    tape.backward(y);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor& p) {
    Tape tape(false);
    Var x = tape.constant(p);
    const double v = f(tape, x).value().data.at(0);
    FD_CHECK(std::isfinite(v), "grad_check: f is non-finite near the point");
    return v;
  };
  double worst = 0.0;
  Tensor p = point;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double orig = p.data[i];
    // Five-point stencil: truncation error O(eps^4), so small gradients under
    // strong curvature are not misread as mismatches.
    auto at = [&](double d) {
      p.data[i] = orig + d;
      return eval(p);
    };
    const double numeric = (at(-2.0 * eps) - 8.0 * at(-eps) + 8.0 * at(eps) - at(2.0 * eps)) / (12.0 * eps);
    p.data[i] = orig;
    const double a = analytic.data[i];
    const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace flowdrive::ad
