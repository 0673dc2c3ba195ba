#pragma once

#include <cstddef>
#include <vector>

#include "dseq/tensor.hpp"

DSEQ_BEGIN_NAMESPACE

// Differentiable primitives. No implicit broadcasting: binary elementwise ops
// require equal shapes, or one operand of shape [] (scalar). Row-vector
// broadcasting is spelled out as add_rows.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
/// x[T,D] + b[D] added to every row.
Tensor add_rows(const Tensor& x, const Tensor& b);
Tensor transpose(const Tensor& a);  // rank 2 only
Tensor reshape(const Tensor& a, Shape shape);

/// Rows of `a` (along axis 0) at the given indices, in order. Repeats allowed.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows);
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
  return gather_rows(table, ids);
}
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);

Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes along `axis`, then applies per-feature gain and bias of length shape[axis].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t axis,
                  Real eps = Real(1e-6));
Tensor gelu(const Tensor& x);  // exact (erf) form

/// Multi-head scaled dot-product attention. q is [T,D], k and v are [S,D];
/// D must be divisible by heads. Returns [T,D].
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over one axis; that axis is removed from the shape.
Tensor mean(const Tensor& x, std::size_t axis);

/// Elementwise Huber function: x^2/2 for |x| < delta, delta*(|x| - delta/2) otherwise.
Tensor huber(const Tensor& x, Real delta);

DSEQ_END_NAMESPACE
