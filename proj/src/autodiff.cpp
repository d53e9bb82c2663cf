#include "clm/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "clm/rng.hpp"

namespace clm::ad {

// ---- tape -----------------------------------------------------------------

template <class Real>
Var<Real> Tape<Real>::leaf(Tensor<Real> value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var<Real>(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

template <class Real>
Var<Real> Tape<Real>::record(Tensor<Real> value, std::vector<Var<Real>> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (recording_ && any) {
    node.requires_grad = true;
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) node.inputs.push_back(in.id());
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var<Real>(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

template <class Real>
std::vector<Var<Real>> Tape<Real>::gradients(const Var<Real>& loss, std::span<const Var<Real>> wrt,
                                             bool create_graph) {
  if (loss.numel() != 1) {
    throw ShapeError("gradients() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const auto top = static_cast<std::size_t>(loss.id());
  std::vector<char> needed(top + 1, 0);
  for (const auto& w : wrt) {
    if (static_cast<std::size_t>(w.id()) <= top && w.requires_grad()) needed[static_cast<std::size_t>(w.id())] = 1;
  }
  for (std::size_t i = 0; i <= top; ++i) {
    if (needed[i] || !nodes_[i].requires_grad) continue;
    for (auto in : nodes_[i].inputs) {
      if (needed[static_cast<std::size_t>(in)]) {
        needed[i] = 1;
        break;
      }
    }
  }

  const bool saved = recording_;
  recording_ = create_graph;
  std::vector<Var<Real>> grads(top + 1);
  if (needed[top]) grads[top] = constant(Tensor<Real>::full(loss.shape(), Real(1)));
  for (std::size_t i = top + 1; i-- > 0;) {
    if (!needed[i] || !grads[i].valid() || !nodes_[i].backward) continue;
    // Backward rules append nodes; deque storage keeps this reference stable.
    const Node& node = nodes_[i];
    auto in_grads = node.backward(grads[i], Var<Real>(this, static_cast<std::int32_t>(i)));
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const auto in = static_cast<std::size_t>(node.inputs[k]);
      if (!needed[in] || k >= in_grads.size() || !in_grads[k].valid()) continue;
      grads[in] = grads[in].valid() ? add(grads[in], in_grads[k]) : in_grads[k];
    }
  }
  recording_ = saved;

  std::vector<Var<Real>> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    const auto id = static_cast<std::size_t>(w.id());
    if (id <= top && grads[id].valid()) {
      out.push_back(grads[id]);
    } else {
      out.push_back(constant(Tensor<Real>(w.shape())));
    }
  }
  return out;
}

namespace {

template <class Real>
void require_same_shape(const Var<Real>& a, const Var<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class Real, class F>
Tensor<Real> map_unary(const Tensor<Real>& a, F f) {
  Tensor<Real> out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

template <class Real>
using Grads = std::vector<Var<Real>>;

}  // namespace

// ---- elementwise ----------------------------------------------------------

template <class Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  require_same_shape(a, b, "add");
  Tensor<Real> out(a.shape());
  const auto& a_data = a.value().data;
  const auto& b_data = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a_data[i] + b_data[i];
  return a.tape().record(std::move(out), {a, b},
                         [](const Var<Real>& g, const Var<Real>&) { return Grads<Real>{g, g}; });
}

template <class Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
  require_same_shape(a, b, "sub");
  Tensor<Real> out(a.shape());
  const auto& a_data = a.value().data;
  const auto& b_data = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a_data[i] - b_data[i];
  return a.tape().record(std::move(out), {a, b},
                         [](const Var<Real>& g, const Var<Real>&) { return Grads<Real>{g, scale(g, Real(-1))}; });
}

template <class Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
  require_same_shape(a, b, "mul");
  Tensor<Real> out(a.shape());
  const auto& a_data = a.value().data;
  const auto& b_data = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a_data[i] * b_data[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{a.requires_grad() ? mul(g, b) : Var<Real>(), b.requires_grad() ? mul(g, a) : Var<Real>()};
  });
}

template <class Real>
Var<Real> scale(const Var<Real>& a, std::type_identity_t<Real> c) {
  auto out = map_unary(a.value(), [c](Real x) { return x * c; });
  return a.tape().record(std::move(out), {a},
                         [c](const Var<Real>& g, const Var<Real>&) { return Grads<Real>{scale(g, c)}; });
}

template <class Real>
Var<Real> add_scalar(const Var<Real>& a, std::type_identity_t<Real> c) {
  auto out = map_unary(a.value(), [c](Real x) { return x + c; });
  return a.tape().record(std::move(out), {a}, [](const Var<Real>& g, const Var<Real>&) { return Grads<Real>{g}; });
}

template <class Real>
Var<Real> exp(const Var<Real>& a) {
  auto out = map_unary(a.value(), [](Real x) { return std::exp(x); });
  return a.tape().record(std::move(out), {a},
                         [](const Var<Real>& g, const Var<Real>& y) { return Grads<Real>{mul(g, y)}; });
}

template <class Real>
Var<Real> log(const Var<Real>& a) {
  auto out = map_unary(a.value(), [](Real x) { return std::log(x); });
  return a.tape().record(std::move(out), {a},
                         [a](const Var<Real>& g, const Var<Real>&) { return Grads<Real>{mul(g, reciprocal(a))}; });
}

template <class Real>
Var<Real> tanh(const Var<Real>& a) {
  auto out = map_unary(a.value(), [](Real x) { return std::tanh(x); });
  return a.tape().record(std::move(out), {a}, [](const Var<Real>& g, const Var<Real>& y) {
    return Grads<Real>{sub(g, mul(g, mul(y, y)))};
  });
}

template <class Real>
Var<Real> erf(const Var<Real>& a) {
  auto out = map_unary(a.value(), [](Real x) { return std::erf(x); });
  return a.tape().record(std::move(out), {a}, [a](const Var<Real>& g, const Var<Real>&) {
    const Real c = Real(2) / std::sqrt(std::numbers::pi_v<Real>);
    return Grads<Real>{mul(g, scale(exp(scale(mul(a, a), Real(-1))), c))};
  });
}

template <class Real>
Var<Real> rsqrt(const Var<Real>& a) {
  auto out = map_unary(a.value(), [](Real x) { return Real(1) / std::sqrt(x); });
  return a.tape().record(std::move(out), {a}, [](const Var<Real>& g, const Var<Real>& y) {
    return Grads<Real>{mul(g, scale(mul(y, mul(y, y)), Real(-0.5)))};
  });
}

template <class Real>
Var<Real> reciprocal(const Var<Real>& a) {
  auto out = map_unary(a.value(), [](Real x) { return Real(1) / x; });
  return a.tape().record(std::move(out), {a}, [](const Var<Real>& g, const Var<Real>& y) {
    return Grads<Real>{mul(g, scale(mul(y, y), Real(-1)))};
  });
}

template <class Real>
Var<Real> reshape(const Var<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<Real> out(std::move(shape), a.value().data);
  return a.tape().record(std::move(out), {a}, [a](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{reshape(g, a.shape())};
  });
}

// ---- matmul ---------------------------------------------------------------

namespace {

// c[m, n] = op(a) op(b) for one batch slice; op(a) is [m, k], op(b) is [k, n].
template <class Real>
void gemm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t n, std::size_t k, bool ta, bool tb) {
  // Row-major views; Eigen is used single-threaded, so results are reproducible.
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat> C(c, M, N);
  if (!ta && !tb) C.noalias() = CMap(a, M, K) * CMap(b, K, N);
  else if (!ta && tb) C.noalias() = CMap(a, M, K) * CMap(b, N, K).transpose();
  else if (ta && !tb) C.noalias() = CMap(a, K, M).transpose() * CMap(b, K, N);
  else C.noalias() = CMap(a, K, M).transpose() * CMap(b, N, K).transpose();
}

}  // namespace

template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b, bool trans_a, bool trans_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0]))) {
    throw ShapeError("matmul: incompatible operand ranks " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t ar = sa[sa.size() - 2], ac = sa[sa.size() - 1];
  const std::size_t br = sb[sb.size() - 2], bc = sb[sb.size() - 1];
  const std::size_t m = trans_a ? ac : ar;
  const std::size_t k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br;
  const std::size_t n = trans_b ? br : bc;
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(sa) + (trans_a ? "^T" : "") + " x " +
                     shape_str(sb) + (trans_b ? "^T" : ""));
  }
  Tensor<Real> out(batched ? Shape{batch, m, n} : Shape{m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    gemm(a.value().data.data() + s * ar * ac, b.value().data.data() + s * br * bc, out.data.data() + s * m * n, m, n,
         k, trans_a, trans_b);
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, trans_a, trans_b](const Var<Real>& g, const Var<Real>&) {
    Var<Real> ga, gb;
    const bool need_a = a.requires_grad(), need_b = b.requires_grad();
    if (!trans_a && !trans_b) {
      if (need_a) ga = matmul(g, b, false, true);
      if (need_b) gb = matmul(a, g, true, false);
    } else if (trans_a && !trans_b) {
      if (need_a) ga = matmul(b, g, false, true);
      if (need_b) gb = matmul(a, g, false, false);
    } else if (!trans_a && trans_b) {
      if (need_a) ga = matmul(g, b, false, false);
      if (need_b) gb = matmul(g, a, true, false);
    } else {
      if (need_a) ga = matmul(b, g, true, true);
      if (need_b) gb = matmul(g, a, true, true);
    }
    return Grads<Real>{ga, gb};
  });
}

// ---- row / column broadcasting ---------------------------------------------

template <class Real>
Var<Real> add_row(const Var<Real>& a, const Var<Real>& b) {
  const std::size_t n = a.value().cols();
  if (b.shape().size() != 1 || b.shape()[0] != n) {
    throw ShapeError("add_row: bias " + shape_str(b.shape()) + " does not match rows of " + shape_str(a.shape()));
  }
  Tensor<Real> out = a.value();
  const std::size_t rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& b_data = b.value().data;
    for (std::size_t j = 0; j < n; ++j) out.data[r * n + j] += b_data[j];
  }
  return a.tape().record(std::move(out), {a, b}, [](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{g, sum_rows(g)};
  });
}

template <class Real>
Var<Real> sum_rows(const Var<Real>& a) {
  const std::size_t n = a.value().cols();
  const std::size_t rows = a.value().rows();
  Tensor<Real> out(Shape{n});
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& a_data = a.value().data;
    for (std::size_t j = 0; j < n; ++j) out.data[j] += a_data[r * n + j];
  }
  return a.tape().record(std::move(out), {a}, [a](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{reshape(broadcast_rows(g, a.value().rows()), a.shape())};
  });
}

template <class Real>
Var<Real> broadcast_rows(const Var<Real>& b, std::size_t rows) {
  if (b.shape().size() != 1) throw ShapeError("broadcast_rows: expected a vector, got " + shape_str(b.shape()));
  const std::size_t n = b.shape()[0];
  Tensor<Real> out(Shape{rows, n});
  for (std::size_t r = 0; r < rows; ++r) std::copy(b.value().data.begin(), b.value().data.end(), out.data.begin() + r * n);
  return b.tape().record(std::move(out), {b}, [](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{sum_rows(g)};
  });
}

template <class Real>
Var<Real> row_sum(const Var<Real>& a) {
  const std::size_t n = a.value().cols();
  const std::size_t rows = a.value().rows();
  Shape s = a.shape();
  if (!s.empty()) s.pop_back();
  Tensor<Real> out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    Real acc = 0;
    const auto& a_data = a.value().data;
    for (std::size_t j = 0; j < n; ++j) acc += a_data[r * n + j];
    out.data[r] = acc;
  }
  return a.tape().record(std::move(out), {a}, [a](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{broadcast_cols(g, a.shape())};
  });
}

template <class Real>
Var<Real> broadcast_cols(const Var<Real>& v, Shape shape) {
  const std::size_t n = shape.empty() ? 1 : shape.back();
  const std::size_t rows = n == 0 ? 0 : shape_numel(shape) / n;
  if (v.numel() != rows) {
    throw ShapeError("broadcast_cols: " + shape_str(v.shape()) + " cannot fill rows of " + shape_str(shape));
  }
  Tensor<Real> out(shape);
  const auto& v_data = v.value().data;
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.data.begin() + r * n, n, v_data[r]);
  return v.tape().record(std::move(out), {v}, [v](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{reshape(row_sum(g), v.shape())};
  });
}

template <class Real>
Var<Real> gather_cols(const Var<Real>& a, std::span<const std::int32_t> idx) {
  const std::size_t n = a.value().cols();
  const std::size_t rows = a.value().rows();
  if (idx.size() != rows) {
    throw ShapeError("gather_cols: " + std::to_string(idx.size()) + " indices for " + shape_str(a.shape()));
  }
  Tensor<Real> out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n) throw std::out_of_range("gather_cols: index out of range");
    out.data[r] = a.value().data[r * n + static_cast<std::size_t>(idx[r])];
  }
  std::vector<std::int32_t> keep(idx.begin(), idx.end());
  return a.tape().record(std::move(out), {a}, [keep = std::move(keep), n](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{scatter_cols(g, std::span<const std::int32_t>(keep), n)};
  });
}

template <class Real>
Var<Real> scatter_cols(const Var<Real>& g, std::span<const std::int32_t> idx, std::size_t n) {
  const std::size_t rows = g.numel();
  if (idx.size() != rows) throw ShapeError("scatter_cols: index count mismatch");
  Tensor<Real> out(Shape{rows, n});
  const auto& g_data = g.value().data;
  for (std::size_t r = 0; r < rows; ++r) out.data[r * n + static_cast<std::size_t>(idx[r])] = g_data[r];
  std::vector<std::int32_t> keep(idx.begin(), idx.end());
  return g.tape().record(std::move(out), {g}, [keep = std::move(keep), shape = g.shape()](const Var<Real>& gg,
                                                                                          const Var<Real>&) {
    return Grads<Real>{reshape(gather_cols(gg, std::span<const std::int32_t>(keep)), shape)};
  });
}

template <class Real>
Var<Real> embedding(const Var<Real>& table, std::span<const std::int32_t> ids) {
  if (table.shape().size() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  Tensor<Real> out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[r]) + " outside table of " + std::to_string(vocab));
    }
    std::copy_n(table.value().data.begin() + static_cast<std::size_t>(ids[r]) * d, d, out.data.begin() + r * d);
  }
  std::vector<std::int32_t> keep(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table},
                             [keep = std::move(keep), vocab](const Var<Real>& g, const Var<Real>&) {
                               return Grads<Real>{embedding_adjoint(g, std::span<const std::int32_t>(keep), vocab)};
                             });
}

template <class Real>
Var<Real> embedding_adjoint(const Var<Real>& g, std::span<const std::int32_t> ids, std::size_t vocab) {
  const std::size_t d = g.value().cols();
  if (g.value().rows() != ids.size()) throw ShapeError("embedding_adjoint: row count mismatch");
  Tensor<Real> out(Shape{vocab, d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    Real* dst = out.data.data() + static_cast<std::size_t>(ids[r]) * d;
    const Real* src = g.value().data.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
  }
  std::vector<std::int32_t> keep(ids.begin(), ids.end());
  return g.tape().record(std::move(out), {g}, [keep = std::move(keep), shape = g.shape()](const Var<Real>& gg,
                                                                                          const Var<Real>&) {
    return Grads<Real>{reshape(embedding(gg, std::span<const std::int32_t>(keep)), shape)};
  });
}

template <class Real>
Var<Real> split_heads(const Var<Real>& x, std::size_t batch, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 2 || batch == 0 || s[0] % batch != 0 || heads == 0 || s[1] % heads != 0) {
    throw ShapeError("split_heads: cannot split " + shape_str(s) + " into batch " + std::to_string(batch) + ", heads " +
                     std::to_string(heads));
  }
  const std::size_t t = s[0] / batch, dh = s[1] / heads, width = s[1];
  Tensor<Real> out(Shape{batch * heads, t, dh});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i)
        std::copy_n(x.value().data.begin() + (b * t + i) * width + h * dh, dh,
                    out.data.begin() + ((b * heads + h) * t + i) * dh);
  return x.tape().record(std::move(out), {x}, [batch, heads](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{merge_heads(g, batch, heads)};
  });
}

template <class Real>
Var<Real> merge_heads(const Var<Real>& x, std::size_t batch, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] != batch * heads) {
    throw ShapeError("merge_heads: cannot merge " + shape_str(s) + " with batch " + std::to_string(batch) +
                     ", heads " + std::to_string(heads));
  }
  const std::size_t t = s[1], dh = s[2], width = heads * dh;
  Tensor<Real> out(Shape{batch * t, width});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i)
        std::copy_n(x.value().data.begin() + ((b * heads + h) * t + i) * dh, dh,
                    out.data.begin() + (b * t + i) * width + h * dh);
  return x.tape().record(std::move(out), {x}, [batch, heads](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{split_heads(g, batch, heads)};
  });
}

template <class Real>
Var<Real> sum(const Var<Real>& a) {
  Real acc = 0;
  for (Real x : a.value().data) acc += x;
  return a.tape().record(Tensor<Real>::scalar(acc), {a}, [a](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{broadcast_scalar(g, a.shape())};
  });
}

template <class Real>
Var<Real> broadcast_scalar(const Var<Real>& s, Shape shape) {
  if (s.numel() != 1) throw ShapeError("broadcast_scalar: expected a scalar, got " + shape_str(s.shape()));
  auto out = Tensor<Real>::full(std::move(shape), s.value().data[0]);
  return s.tape().record(std::move(out), {s}, [s](const Var<Real>& g, const Var<Real>&) {
    return Grads<Real>{reshape(sum(g), s.shape())};
  });
}

template <class Real>
Var<Real> detach(const Var<Real>& a) {
  return a.tape().constant(a.value());
}

// ---- composites -----------------------------------------------------------

template <class Real>
Var<Real> dot(const Var<Real>& a, const Var<Real>& b) {
  return sum(mul(a, b));
}

template <class Real>
Var<Real> mean(const Var<Real>& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

template <class Real>
Var<Real> gelu(const Var<Real>& a) {
  const Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  return mul(scale(a, Real(0.5)), add_scalar(erf(scale(a, inv_sqrt2)), Real(1)));
}

namespace {

// x minus its (constant) row maximum; shifts do not change softmax.
template <class Real>
Var<Real> shift_rows(const Var<Real>& a) {
  const std::size_t n = a.value().cols(), rows = a.value().rows();
  Shape s = a.shape();
  if (!s.empty()) s.pop_back();
  Tensor<Real> mx(s);
  for (std::size_t r = 0; r < rows; ++r) {
    Real m = -std::numeric_limits<Real>::infinity();
    const auto& a_data = a.value().data;
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, a_data[r * n + j]);
    mx.data[r] = m;
  }
  return sub(a, broadcast_cols(a.tape().constant(std::move(mx)), a.shape()));
}

}  // namespace

template <class Real>
Var<Real> softmax(const Var<Real>& a) {
  auto e = exp(shift_rows(a));
  return mul(e, broadcast_cols(reciprocal(row_sum(e)), a.shape()));
}

template <class Real>
Var<Real> log_softmax(const Var<Real>& a) {
  auto z = shift_rows(a);
  return sub(z, broadcast_cols(log(row_sum(exp(z))), a.shape()));
}

template <class Real>
Var<Real> layer_norm(const Var<Real>& x, std::type_identity_t<Real> eps) {
  const Real inv_n = Real(1) / static_cast<Real>(x.value().cols());
  auto mu = scale(row_sum(x), inv_n);
  auto xc = sub(x, broadcast_cols(mu, x.shape()));
  auto var = scale(row_sum(mul(xc, xc)), inv_n);
  return mul(xc, broadcast_cols(rsqrt(add_scalar(var, eps)), x.shape()));
}

template <class Real>
Var<Real> cross_entropy_rows(const Var<Real>& logits, std::span<const std::int32_t> targets) {
  return scale(gather_cols(log_softmax(logits), targets), Real(-1));
}

template <class Real>
Var<Real> cross_entropy(const Var<Real>& logits, std::span<const std::int32_t> targets) {
  return mean(cross_entropy_rows(logits, targets));
}

template <class Real>
Var<Real> dropout(const Var<Real>& a, std::type_identity_t<Real> rate, Rng& rng) {
  if (!a.tape().training() || rate <= Real(0)) return a;
  if (rate >= Real(1)) throw std::invalid_argument("dropout rate must be below 1");
  Tensor<Real> mask(a.shape());
  const Real keep_scale = Real(1) / (Real(1) - rate);
  for (auto& m : mask.data) m = rng.uniform() < static_cast<double>(rate) ? Real(0) : keep_scale;
  return mul(a, a.tape().constant(std::move(mask)));
}

// ---- second order ---------------------------------------------------------

template <class Real>
std::vector<Tensor<Real>> gradient(const LossFn<Real>& loss_fn, std::span<const Tensor<Real>> params) {
  Tape<Real> tape;
  std::vector<Var<Real>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  auto loss = loss_fn(tape, leaves);
  auto grads = tape.gradients(loss, leaves);
  std::vector<Tensor<Real>> out;
  out.reserve(grads.size());
  for (const auto& g : grads) out.push_back(g.value());
  return out;
}

template <class Real>
std::vector<Tensor<Real>> hvp(const LossFn<Real>& loss_fn, std::span<const Tensor<Real>> params,
                              std::span<const Tensor<Real>> v) {
  if (v.size() != params.size()) {
    throw ShapeError("hvp: " + std::to_string(v.size()) + " direction tensors for " + std::to_string(params.size()) +
                     " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (v[i].shape != params[i].shape) {
      throw ShapeError("hvp: direction " + shape_str(v[i].shape) + " vs parameter " + shape_str(params[i].shape));
    }
  }
  Tape<Real> tape;
  std::vector<Var<Real>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  auto loss = loss_fn(tape, leaves);
  auto grads = tape.gradients(loss, leaves, /*create_graph=*/true);
  Var<Real> gv = tape.constant(Tensor<Real>::scalar(0));
  for (std::size_t i = 0; i < grads.size(); ++i) gv = add(gv, dot(grads[i], tape.constant(v[i])));
  auto hv = tape.gradients(gv, leaves);
  std::vector<Tensor<Real>> out;
  out.reserve(hv.size());
  for (const auto& h : hv) out.push_back(h.value());
  return out;
}

template <class Real>
std::vector<Real> hvp_flat(const LossFn<Real>& loss_fn, std::span<const Tensor<Real>> params,
                           std::span<const Real> v) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.numel();
  if (v.size() != total) {
    throw ShapeError("hvp: direction has " + std::to_string(v.size()) + " entries, parameters have " +
                     std::to_string(total));
  }
  std::vector<Tensor<Real>> dirs;
  dirs.reserve(params.size());
  std::size_t off = 0;
  for (const auto& p : params) {
    dirs.emplace_back(p.shape, std::vector<Real>(v.begin() + static_cast<std::ptrdiff_t>(off),
                                                 v.begin() + static_cast<std::ptrdiff_t>(off + p.numel())));
    off += p.numel();
  }
  auto hv = hvp(loss_fn, params, std::span<const Tensor<Real>>(dirs));
  std::vector<Real> out;
  out.reserve(total);
  for (const auto& t : hv) out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

#define CLM_INSTANTIATE(R)                                                                                  \
  template class Tape<R>;                                                                                   \
  template Var<R> add(const Var<R>&, const Var<R>&);                                                        \
  template Var<R> sub(const Var<R>&, const Var<R>&);                                                        \
  template Var<R> mul(const Var<R>&, const Var<R>&);                                                        \
  template Var<R> scale(const Var<R>&, R);                                                                  \
  template Var<R> add_scalar(const Var<R>&, R);                                                             \
  template Var<R> exp(const Var<R>&);                                                                       \
  template Var<R> log(const Var<R>&);                                                                       \
  template Var<R> tanh(const Var<R>&);                                                                      \
  template Var<R> erf(const Var<R>&);                                                                       \
  template Var<R> rsqrt(const Var<R>&);                                                                     \
  template Var<R> reciprocal(const Var<R>&);                                                                \
  template Var<R> reshape(const Var<R>&, Shape);                                                            \
  template Var<R> matmul(const Var<R>&, const Var<R>&, bool, bool);                                         \
  template Var<R> add_row(const Var<R>&, const Var<R>&);                                                    \
  template Var<R> sum_rows(const Var<R>&);                                                                  \
  template Var<R> broadcast_rows(const Var<R>&, std::size_t);                                               \
  template Var<R> row_sum(const Var<R>&);                                                                   \
  template Var<R> broadcast_cols(const Var<R>&, Shape);                                                     \
  template Var<R> gather_cols(const Var<R>&, std::span<const std::int32_t>);                                \
  template Var<R> scatter_cols(const Var<R>&, std::span<const std::int32_t>, std::size_t);                  \
  template Var<R> embedding(const Var<R>&, std::span<const std::int32_t>);                                  \
  template Var<R> embedding_adjoint(const Var<R>&, std::span<const std::int32_t>, std::size_t);             \
  template Var<R> split_heads(const Var<R>&, std::size_t, std::size_t);                                     \
  template Var<R> merge_heads(const Var<R>&, std::size_t, std::size_t);                                     \
  template Var<R> sum(const Var<R>&);                                                                       \
  template Var<R> broadcast_scalar(const Var<R>&, Shape);                                                   \
  template Var<R> detach(const Var<R>&);                                                                    \
  template Var<R> dot(const Var<R>&, const Var<R>&);                                                        \
  template Var<R> mean(const Var<R>&);                                                                      \
  template Var<R> gelu(const Var<R>&);                                                                      \
  template Var<R> softmax(const Var<R>&);                                                                   \
  template Var<R> log_softmax(const Var<R>&);                                                               \
  template Var<R> layer_norm(const Var<R>&, R);                                                             \
  template Var<R> cross_entropy_rows(const Var<R>&, std::span<const std::int32_t>);                         \
  template Var<R> cross_entropy(const Var<R>&, std::span<const std::int32_t>);                              \
  template Var<R> dropout(const Var<R>&, R, Rng&);                                                          \
  template std::vector<Tensor<R>> gradient(const LossFn<R>&, std::span<const Tensor<R>>);                   \
  template std::vector<Tensor<R>> hvp(const LossFn<R>&, std::span<const Tensor<R>>, std::span<const Tensor<R>>); \
  template std::vector<R> hvp_flat(const LossFn<R>&, std::span<const Tensor<R>>, std::span<const R>);

CLM_INSTANTIATE(float)
CLM_INSTANTIATE(double)

#undef CLM_INSTANTIATE

}  // namespace clm::ad
