#include "dseq/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

DSEQ_BEGIN_NAMESPACE

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void check_finite(const char* op, const Tensor& t) {
  if constexpr (kCheckFinite) {
    for (Real v : t.data()) {
      if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite input value");
    }
  }
}

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

Tensor empty_like_shape(Shape shape) { return Tensor::zeros(std::move(shape)); }

// Gradient buffer of `t` if it participates in differentiation.
Real* grad_of(const Tensor& t) { return t.requires_grad() ? t.grad_buffer().data() : nullptr; }

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    shape_error(op, "axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(const char* op, Binary kind, const Tensor& a, const Tensor& b) {
  check_finite(op, a);
  check_finite(op, b);
  const bool sa = is_scalar(a) && !is_scalar(b);
  const bool sb = is_scalar(b) && !is_scalar(a);
  if (!sa && !sb && a.shape() != b.shape()) {
    shape_error(op, "shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  Tensor out = empty_like_shape(sa ? b.shape() : a.shape());
  const std::size_t n = out.numel();
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    Real x = av[sa ? 0 : i];
    Real y = bv[sb ? 0 : i];
    switch (kind) {
      case Binary::kAdd: ov[i] = x + y; break;
      case Binary::kSub: ov[i] = x - y; break;
      case Binary::kMul: ov[i] = x * y; break;
    }
  }
  Tape::current().record(op, {&a, &b}, out, [a, b, out, sa, sb, kind, n]() mutable {
    const Real* go = out.grad().data();
    Real* ga = grad_of(a);
    Real* gb = grad_of(b);
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < n; ++i) {
      const Real g = go[i];
      if (ga) {
        Real d = kind == Binary::kMul ? g * bv[sb ? 0 : i] : g;
        ga[sa ? 0 : i] += d;
      }
      if (gb) {
        Real d = kind == Binary::kMul ? g * av[sa ? 0 : i] : (kind == Binary::kSub ? -g : g);
        gb[sb ? 0 : i] += d;
      }
    }
  });
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_finite("matmul", a);
  check_finite("matmul", b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", "cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Tensor out = empty_like_shape({a.dim(0), b.dim(1)});
  MatMap(out.mutable_data().data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  Tape::current().record("matmul", {&a, &b}, out, [a, b, out, m, k, n]() mutable {
    ConstMatMap go(out.grad().data(), m, n);
    if (Real* ga = grad_of(a)) MatMap(ga, m, k).noalias() += go * ConstMatMap(b.data().data(), k, n).transpose();
    if (Real* gb = grad_of(b)) MatMap(gb, k, n).noalias() += ConstMatMap(a.data().data(), m, k).transpose() * go;
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", Binary::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", Binary::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", Binary::kMul, a, b); }

Tensor scale(const Tensor& a, Real factor) {
  check_finite("scale", a);
  Tensor out = empty_like_shape(a.shape());
  auto av = a.data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * factor;
  Tape::current().record("scale", {&a}, out, [a, out, factor]() mutable {
    auto go = out.grad();
    Real* ga = grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
  });
  return out;
}

Tensor add_rows(const Tensor& x, const Tensor& b) {
  check_finite("add_rows", x);
  check_finite("add_rows", b);
  if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    shape_error("add_rows", "expected [T,D] and [D], got " + to_string(x.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = empty_like_shape(x.shape());
  auto xv = x.data();
  auto bv = b.data();
  auto ov = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) ov[r * cols + c] = xv[r * cols + c] + bv[c];
  }
  Tape::current().record("add_rows", {&x, &b}, out, [x, b, out, rows, cols]() mutable {
    auto go = out.grad();
    if (Real* gx = grad_of(x)) {
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (Real* gb = grad_of(b)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += go[r * cols + c];
      }
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_error("transpose", "expected rank 2, got " + to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = empty_like_shape({n, m});
  auto av = a.data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  }
  Tape::current().record("transpose", {&a}, out, [a, out, m, n]() mutable {
    auto go = out.grad();
    Real* ga = grad_of(a);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    }
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    shape_error("reshape", "cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  Tensor out = Tensor::from(std::move(shape), std::vector<Real>(a.data().begin(), a.data().end()));
  Tape::current().record("reshape", {&a}, out, [a, out]() mutable {
    auto go = out.grad();
    Real* ga = grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  if (a.rank() < 1) shape_error("gather_rows", "expected rank >= 1");
  const std::size_t count = a.dim(0);
  const std::size_t width = count == 0 ? 0 : a.numel() / count;
  for (auto r : rows) {
    if (r >= count) shape_error("gather_rows", "row " + std::to_string(r) + " out of range for " + to_string(a.shape()));
  }
  Shape shape = a.shape();
  shape[0] = rows.size();
  Tensor out = empty_like_shape(shape);
  auto av = a.data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                ov.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  Tape::current().record("gather_rows", {&a}, out, [a, out, rows, width]() mutable {
    auto go = out.grad();
    Real* ga = grad_of(a);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t c = 0; c < width; ++c) ga[rows[i] * width + c] += go[i * width + c];
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() < 1 || begin > end || end > a.dim(0)) {
    shape_error("slice_rows", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                                  to_string(a.shape()));
  }
  std::vector<std::size_t> rows(end - begin);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = begin + i;
  return gather_rows(a, rows);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_error("concat_rows", "no inputs");
  Shape shape = parts.front().shape();
  if (shape.empty()) shape_error("concat_rows", "scalar input");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      shape_error("concat_rows", "trailing dims of " + to_string(p.shape()) + " do not match " + to_string(shape));
    }
    total += p.dim(0);
  }
  shape[0] = total;
  Tensor out = empty_like_shape(shape);
  auto ov = out.mutable_data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), ov.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.numel();
  }
  Tape::current().record("concat_rows", parts, out, [parts, out]() mutable {
    auto go = out.grad();
    std::size_t offset = 0;
    for (auto& p : parts) {
      if (Real* gp = grad_of(p)) {
        for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += go[offset + i];
      }
      offset += p.numel();
    }
  });
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_finite("softmax", x);
  const AxisSplit s = split_axis("softmax", x.shape(), axis);
  Tensor out = empty_like_shape(x.shape());
  auto xv = x.data();
  auto ov = out.mutable_data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      Real mx = xv[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      Real total = 0;
      for (std::size_t j = 0; j < s.n; ++j) {
        Real e = std::exp(xv[base + j * s.inner] - mx);
        ov[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) ov[base + j * s.inner] /= total;
    }
  }
  Tape::current().record("softmax", {&x}, out, [x, out, s]() mutable {
    auto go = out.grad();
    auto y = out.data();
    Real* gx = grad_of(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        Real dot = 0;
        for (std::size_t j = 0; j < s.n; ++j) dot += go[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          gx[i] += y[i] * (go[i] - dot);
        }
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::size_t axis, Real eps) {
  check_finite("layer_norm", x);
  check_finite("layer_norm", gain);
  check_finite("layer_norm", bias);
  const AxisSplit s = split_axis("layer_norm", x.shape(), axis);
  if (gain.shape() != Shape{s.n} || bias.shape() != Shape{s.n}) {
    shape_error("layer_norm", "gain/bias must be [" + std::to_string(s.n) + "], got " + to_string(gain.shape()) +
                                  " and " + to_string(bias.shape()));
  }
  Tensor out = empty_like_shape(x.shape());
  RealBuffer xhat(x.numel());
  RealBuffer inv_std(s.outer * s.inner);
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  auto ov = out.mutable_data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      Real mu = 0;
      for (std::size_t j = 0; j < s.n; ++j) mu += xv[base + j * s.inner];
      mu /= Real(s.n);
      Real var = 0;
      for (std::size_t j = 0; j < s.n; ++j) {
        Real d = xv[base + j * s.inner] - mu;
        var += d * d;
      }
      var /= Real(s.n);
      const Real r = Real(1) / std::sqrt(var + eps);
      inv_std[o * s.inner + in] = r;
      for (std::size_t j = 0; j < s.n; ++j) {
        const std::size_t i = base + j * s.inner;
        xhat[i] = (xv[i] - mu) * r;
        ov[i] = xhat[i] * gv[j] + bv[j];
      }
    }
  }
  Tape::current().record("layer_norm", {&x, &gain, &bias}, out,
                         [x, gain, bias, out, s, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
                           auto go = out.grad();
                           auto gv = gain.data();
                           Real* gx = grad_of(x);
                           Real* gg = grad_of(gain);
                           Real* gb = grad_of(bias);
                           for (std::size_t o = 0; o < s.outer; ++o) {
                             for (std::size_t in = 0; in < s.inner; ++in) {
                               const std::size_t base = o * s.n * s.inner + in;
                               Real mean_d = 0, mean_dx = 0;
                               for (std::size_t j = 0; j < s.n; ++j) {
                                 const std::size_t i = base + j * s.inner;
                                 const Real d = go[i] * gv[j];
                                 mean_d += d;
                                 mean_dx += d * xhat[i];
                                 if (gg) gg[j] += go[i] * xhat[i];
                                 if (gb) gb[j] += go[i];
                               }
                               if (!gx) continue;
                               mean_d /= Real(s.n);
                               mean_dx /= Real(s.n);
                               const Real r = inv_std[o * s.inner + in];
                               for (std::size_t j = 0; j < s.n; ++j) {
                                 const std::size_t i = base + j * s.inner;
                                 gx[i] += r * (go[i] * gv[j] - mean_d - xhat[i] * mean_dx);
                               }
                             }
                           }
                         });
  return out;
}

Tensor gelu(const Tensor& x) {
  check_finite("gelu", x);
  Tensor out = empty_like_shape(x.shape());
  auto xv = x.data();
  auto ov = out.mutable_data();
  const Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = Real(0.5) * xv[i] * (Real(1) + std::erf(xv[i] * inv_sqrt2));
  Tape::current().record("gelu", {&x}, out, [x, out, inv_sqrt2]() mutable {
    auto go = out.grad();
    auto xv = x.data();
    Real* gx = grad_of(x);
    const Real inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<Real> * inv_sqrt2;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const Real v = xv[i];
      const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
      const Real pdf = inv_sqrt_2pi * std::exp(Real(-0.5) * v * v);
      gx[i] += go[i] * (cdf + v * pdf);
    }
  });
  return out;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  check_finite("scaled_dot_attention", q);
  check_finite("scaled_dot_attention", k);
  check_finite("scaled_dot_attention", v);
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() || q.dim(1) != k.dim(1)) {
    shape_error("scaled_dot_attention", "incompatible q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                                            ", v " + to_string(v.shape()));
  }
  const std::size_t width = q.dim(1);
  if (heads == 0 || width % heads != 0) {
    shape_error("scaled_dot_attention", "width " + std::to_string(width) + " not divisible by " +
                                            std::to_string(heads) + " heads");
  }
  const auto T = static_cast<Eigen::Index>(q.dim(0));
  const auto S = static_cast<Eigen::Index>(k.dim(0));
  const auto D = static_cast<Eigen::Index>(width);
  const auto dh = static_cast<Eigen::Index>(width / heads);
  const Real scale_factor = Real(1) / std::sqrt(Real(dh));
  const Eigen::OuterStride<> stride(D);

  Tensor out = empty_like_shape({q.dim(0), width});
  RealBuffer probs(heads * static_cast<std::size_t>(T * S));
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    ConstStridedMap qh(q.data().data() + off, T, dh, stride);
    ConstStridedMap kh(k.data().data() + off, S, dh, stride);
    ConstStridedMap vh(v.data().data() + off, S, dh, stride);
    MatMap p(probs.data() + h * static_cast<std::size_t>(T * S), T, S);
    p.noalias() = (qh * kh.transpose()) * scale_factor;
    for (Eigen::Index r = 0; r < T; ++r) {
      const Real mx = p.row(r).maxCoeff();
      p.row(r) = (p.row(r).array() - mx).exp();
      p.row(r) /= p.row(r).sum();
    }
    StridedMap oh(out.mutable_data().data() + off, T, dh, stride);
    oh.noalias() = p * vh;
  }
  Tape::current().record(
      "scaled_dot_attention", {&q, &k, &v}, out,
      [q, k, v, out, heads, T, S, D, dh, scale_factor, probs = std::move(probs)]() mutable {
        const Eigen::OuterStride<> stride(D);
        Real* gq = grad_of(q);
        Real* gk = grad_of(k);
        Real* gv = grad_of(v);
        RowMat dp(T, S);
        for (std::size_t h = 0; h < heads; ++h) {
          const auto off = static_cast<Eigen::Index>(h) * dh;
          ConstStridedMap go(out.grad().data() + off, T, dh, stride);
          ConstStridedMap qh(q.data().data() + off, T, dh, stride);
          ConstStridedMap kh(k.data().data() + off, S, dh, stride);
          ConstStridedMap vh(v.data().data() + off, S, dh, stride);
          ConstMatMap p(probs.data() + h * static_cast<std::size_t>(T * S), T, S);
          if (gv) StridedMap(gv + off, S, dh, stride).noalias() += p.transpose() * go;
          if (!gq && !gk) continue;
          dp.noalias() = go * vh.transpose();
          for (Eigen::Index r = 0; r < T; ++r) {
            const Real dot = dp.row(r).dot(p.row(r));
            dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)) * scale_factor;
          }
          if (gq) StridedMap(gq + off, T, dh, stride).noalias() += dp * kh;
          if (gk) StridedMap(gk + off, S, dh, stride).noalias() += dp.transpose() * qh;
        }
      });
  return out;
}

Tensor sum(const Tensor& x) {
  check_finite("sum", x);
  Real total = 0;
  for (Real v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  Tape::current().record("sum", {&x}, out, [x, out]() mutable {
    const Real g = out.grad()[0];
    auto gx = x.grad_buffer();
    for (auto& v : gx) v += g;
  });
  return out;
}

Tensor mean(const Tensor& x) {
  check_finite("mean", x);
  if (x.numel() == 0) shape_error("mean", "empty tensor");
  Real total = 0;
  for (Real v : x.data()) total += v;
  const Real inv = Real(1) / Real(x.numel());
  Tensor out = Tensor::scalar(total * inv);
  Tape::current().record("mean", {&x}, out, [x, out, inv]() mutable {
    const Real g = out.grad()[0] * inv;
    auto gx = x.grad_buffer();
    for (auto& v : gx) v += g;
  });
  return out;
}

Tensor mean(const Tensor& x, std::size_t axis) {
  check_finite("mean", x);
  const AxisSplit s = split_axis("mean", x.shape(), axis);
  if (s.n == 0) shape_error("mean", "empty axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out = empty_like_shape(shape);
  auto xv = x.data();
  auto ov = out.mutable_data();
  const Real inv = Real(1) / Real(s.n);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      Real total = 0;
      for (std::size_t j = 0; j < s.n; ++j) total += xv[(o * s.n + j) * s.inner + in];
      ov[o * s.inner + in] = total * inv;
    }
  }
  Tape::current().record("mean_axis", {&x}, out, [x, out, s, inv]() mutable {
    auto go = out.grad();
    Real* gx = grad_of(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < s.n; ++j) {
        for (std::size_t in = 0; in < s.inner; ++in) gx[(o * s.n + j) * s.inner + in] += go[o * s.inner + in] * inv;
      }
    }
  });
  return out;
}

Tensor huber(const Tensor& x, Real delta) {
  check_finite("huber", x);
  if (!(delta > 0)) throw ConfigError("huber: delta must be positive");
  Tensor out = empty_like_shape(x.shape());
  auto xv = x.data();
  auto ov = out.mutable_data();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const Real a = std::abs(xv[i]);
    ov[i] = a < delta ? Real(0.5) * xv[i] * xv[i] : delta * (a - Real(0.5) * delta);
  }
  Tape::current().record("huber", {&x}, out, [x, out, delta]() mutable {
    auto go = out.grad();
    auto xv = x.data();
    Real* gx = grad_of(x);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const Real d = std::abs(xv[i]) < delta ? xv[i] : (xv[i] > 0 ? delta : -delta);
      gx[i] += go[i] * d;
    }
  });
  return out;
}

DSEQ_END_NAMESPACE
