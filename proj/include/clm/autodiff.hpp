#pragma once

#include <cstdint>
#include <deque>
#include <type_traits>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "clm/tensor.hpp"

namespace clm {
class Rng;
}

namespace clm::ad {

template <class Real>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// tape that produced it is alive.
template <class Real>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, std::int32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  std::int32_t id() const { return id_; }
  Tape<Real>& tape() const { return *tape_; }
  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const;

 private:
  Tape<Real>* tape_ = nullptr;
  std::int32_t id_ = -1;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Execution-ordered record of primitive operations. Node ids increase in
// execution order, so reverse id order is a valid topological order for the
// backward sweep. Backward rules are themselves written with recorded
// primitives, which is what makes gradient-of-gradient (and hence
// Hessian-vector products) available.
template <class Real>
class Tape {
 public:
  // Receives the upstream gradient and the node's own output, and returns one
  // gradient per input (an invalid Var where no gradient flows).
  using BackwardFn = std::function<std::vector<Var<Real>>(const Var<Real>& grad_out, const Var<Real>& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> leaf(Tensor<Real> value, bool requires_grad = true);
  Var<Real> constant(Tensor<Real> value) { return leaf(std::move(value), false); }

  // Records a primitive. Gradient tracking is switched off when no input
  // requires it or when the tape is not recording.
  Var<Real> record(Tensor<Real> value, std::vector<Var<Real>> inputs, BackwardFn backward);

  // Reverse sweep from a scalar `loss`. Returns d loss / d w for every w in
  // `wrt` (zeros where w does not influence loss). With `create_graph` the
  // returned gradients are themselves differentiable.
  std::vector<Var<Real>> gradients(const Var<Real>& loss, std::span<const Var<Real>> wrt,
                                   bool create_graph = false);

  const Tensor<Real>& value(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  bool recording() const { return recording_; }
  // Training mode enables dropout.
  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }

 private:
  struct Node {
    Tensor<Real> value;
    std::vector<std::int32_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool recording_ = true;
  bool training_ = false;
};

template <class Real>
const Tensor<Real>& Var<Real>::value() const {
  return tape_->value(id_);
}

template <class Real>
bool Var<Real>::requires_grad() const {
  return tape_->requires_grad(id_);
}

// ---- primitives -----------------------------------------------------------
// Tensors of rank > 2 are viewed as [rows, cols] with cols = last dimension
// wherever an operation is row-wise.

template <class Real> Var<Real> add(const Var<Real>& a, const Var<Real>& b);
template <class Real> Var<Real> sub(const Var<Real>& a, const Var<Real>& b);
template <class Real> Var<Real> mul(const Var<Real>& a, const Var<Real>& b);
template <class Real> Var<Real> scale(const Var<Real>& a, std::type_identity_t<Real> c);
template <class Real> Var<Real> add_scalar(const Var<Real>& a, std::type_identity_t<Real> c);
template <class Real> Var<Real> exp(const Var<Real>& a);
template <class Real> Var<Real> log(const Var<Real>& a);
template <class Real> Var<Real> tanh(const Var<Real>& a);
template <class Real> Var<Real> erf(const Var<Real>& a);
template <class Real> Var<Real> rsqrt(const Var<Real>& a);
template <class Real> Var<Real> reciprocal(const Var<Real>& a);
template <class Real> Var<Real> reshape(const Var<Real>& a, Shape shape);

// Matrix product of optionally transposed operands. Both operands are rank 2,
// or both rank 3 with a shared leading batch dimension.
template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b, bool trans_a = false, bool trans_b = false);

// a[r, n] + b[n] broadcast over rows.
template <class Real> Var<Real> add_row(const Var<Real>& a, const Var<Real>& b);
// Sum over rows: [r, n] -> [n].
template <class Real> Var<Real> sum_rows(const Var<Real>& a);
// [n] -> [rows, n].
template <class Real> Var<Real> broadcast_rows(const Var<Real>& b, std::size_t rows);
// Sum along the last dimension: [r, n] -> [r].
template <class Real> Var<Real> row_sum(const Var<Real>& a);
// [r] -> `shape` (whose row count is r), each row filled with its value.
template <class Real> Var<Real> broadcast_cols(const Var<Real>& v, Shape shape);
// Picks a[r, idx[r]] -> [r].
template <class Real> Var<Real> gather_cols(const Var<Real>& a, std::span<const std::int32_t> idx);
// Inverse of gather_cols: places g[r] at (r, idx[r]) of a zero [r, n].
template <class Real> Var<Real> scatter_cols(const Var<Real>& g, std::span<const std::int32_t> idx, std::size_t n);
// Rows of table[V, d] selected by ids -> [len(ids), d].
template <class Real> Var<Real> embedding(const Var<Real>& table, std::span<const std::int32_t> ids);
// Adjoint of embedding: accumulates rows of g into a zero [vocab, d].
template <class Real>
Var<Real> embedding_adjoint(const Var<Real>& g, std::span<const std::int32_t> ids, std::size_t vocab);
// [B*T, H*dh] -> [B*H, T, dh].
template <class Real> Var<Real> split_heads(const Var<Real>& x, std::size_t batch, std::size_t heads);
// [B*H, T, dh] -> [B*T, H*dh].
template <class Real> Var<Real> merge_heads(const Var<Real>& x, std::size_t batch, std::size_t heads);
// Sum of all entries -> scalar.
template <class Real> Var<Real> sum(const Var<Real>& a);
// Scalar -> tensor of `shape`.
template <class Real> Var<Real> broadcast_scalar(const Var<Real>& s, Shape shape);
// Copy with no gradient path.
template <class Real> Var<Real> detach(const Var<Real>& a);

// ---- composites (differentiable to any order) ------------------------------

template <class Real> Var<Real> dot(const Var<Real>& a, const Var<Real>& b);
template <class Real> Var<Real> mean(const Var<Real>& a);
template <class Real> Var<Real> gelu(const Var<Real>& a);
// Softmax along the last dimension.
template <class Real> Var<Real> softmax(const Var<Real>& a);
// log-softmax along the last dimension.
template <class Real> Var<Real> log_softmax(const Var<Real>& a);
// Normalizes each row to zero mean and unit variance: (x - mu) / sqrt(var + eps).
template <class Real> Var<Real> layer_norm(const Var<Real>& x, std::type_identity_t<Real> eps = Real(1e-5));
// Row-wise cross-entropy of logits[r, V] against targets -> [r].
template <class Real>
Var<Real> cross_entropy_rows(const Var<Real>& logits, std::span<const std::int32_t> targets);
// Mean cross-entropy over all rows.
template <class Real>
Var<Real> cross_entropy(const Var<Real>& logits, std::span<const std::int32_t> targets);
// Inverted dropout; identity unless the tape is in training mode.
template <class Real> Var<Real> dropout(const Var<Real>& a, std::type_identity_t<Real> rate, Rng& rng);

template <class Real> inline Var<Real> operator+(const Var<Real>& a, const Var<Real>& b) { return add(a, b); }
template <class Real> inline Var<Real> operator-(const Var<Real>& a, const Var<Real>& b) { return sub(a, b); }
template <class Real> inline Var<Real> operator*(const Var<Real>& a, const Var<Real>& b) { return mul(a, b); }

// ---- second order ---------------------------------------------------------

// Builds a scalar loss on `tape` from parameter leaves.
template <class Real>
using LossFn = std::function<Var<Real>(Tape<Real>& tape, std::span<const Var<Real>> params)>;

// Gradient of `loss_fn` at `params`.
template <class Real>
std::vector<Tensor<Real>> gradient(const LossFn<Real>& loss_fn, std::span<const Tensor<Real>> params);

// H v where H is the Hessian of `loss_fn` at `params`, computed as the
// gradient of (g . v). `v` holds one tensor per parameter with matching shape.
// `params` are not modified.
template <class Real>
std::vector<Tensor<Real>> hvp(const LossFn<Real>& loss_fn, std::span<const Tensor<Real>> params,
                              std::span<const Tensor<Real>> v);

// Flat-vector convenience form: `params` and `v` are concatenated in order.
template <class Real>
std::vector<Real> hvp_flat(const LossFn<Real>& loss_fn, std::span<const Tensor<Real>> params,
                           std::span<const Real> v);

}  // namespace clm::ad
