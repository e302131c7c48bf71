#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>

#include "regmae/autodiff/tape.hpp"

namespace regmae::ad {

using IndexList = std::shared_ptr<const std::vector<std::int64_t>>;

inline IndexList make_index(std::vector<std::int64_t> v) {
  return std::make_shared<const std::vector<std::int64_t>>(std::move(v));
}

namespace detail {

enum class Bcast { Same, Trailing };

/// Equal shapes, or `b` matching the trailing dimensions of `a`.
inline Bcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::Same;
  const bool trailing = b.size() <= a.size() && numel(b) > 0 &&
                        std::equal(b.rbegin(), b.rend(), a.rbegin());
  require(trailing, ErrorKind::Validation,
          std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
  return Bcast::Trailing;
}

template <class S>
Eigen::Map<const RowArray<S>> rows_view(const Vec<S>& v, std::int64_t cols) {
  return {v.data(), v.size() / cols, cols};
}

template <class S>
Eigen::Map<RowArray<S>> rows_view(Vec<S>& v, std::int64_t cols) {
  return {v.data(), v.size() / cols, cols};
}

template <class S>
void same_tape(const Var<S>& a, const Var<S>& b) {
  require(a.tape == b.tape && a.tape != nullptr, ErrorKind::Validation, "operands live on different tapes");
}

template <class S>
S sigmoid(S x) {
  return x >= 0 ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

template <class S>
S softplus(S x) {
  return x > S(20) ? x : std::log1p(std::exp(x));
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av.shape, bv.shape, "add");
  Tensor<S> out = av;
  const std::int64_t bn = bv.size();
  if (kind == detail::Bcast::Same) out.data += bv.data;
  else detail::rows_view(out.data, bn).rowwise() += bv.data.transpose();
  return a.tape->record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, kind, bn](Tape<S>& t, std::size_t self) {
    const Vec<S>& g = t.grad(self);
    if (t.needs_grad(ai)) t.grad(ai) += g;
    if (t.needs_grad(bi)) {
      if (kind == detail::Bcast::Same) t.grad(bi) += g;
      else t.grad(bi) += detail::rows_view(g, bn).colwise().sum().transpose();
    }
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av.shape, bv.shape, "sub");
  Tensor<S> out = av;
  const std::int64_t bn = bv.size();
  if (kind == detail::Bcast::Same) out.data -= bv.data;
  else detail::rows_view(out.data, bn).rowwise() -= bv.data.transpose();
  return a.tape->record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, kind, bn](Tape<S>& t, std::size_t self) {
    const Vec<S>& g = t.grad(self);
    if (t.needs_grad(ai)) t.grad(ai) += g;
    if (t.needs_grad(bi)) {
      if (kind == detail::Bcast::Same) t.grad(bi) -= g;
      else t.grad(bi) -= detail::rows_view(g, bn).colwise().sum().transpose();
    }
  });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av.shape, bv.shape, "mul");
  Tensor<S> out = av;
  const std::int64_t bn = bv.size();
  if (kind == detail::Bcast::Same) out.data *= bv.data;
  else detail::rows_view(out.data, bn).rowwise() *= bv.data.transpose();
  return a.tape->record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, kind, bn](Tape<S>& t, std::size_t self) {
    const Vec<S>& g = t.grad(self);
    const Vec<S>& x = t.value(ai).data;
    const Vec<S>& y = t.value(bi).data;
    if (kind == detail::Bcast::Same) {
      if (t.needs_grad(ai)) t.grad(ai) += g * y;
      if (t.needs_grad(bi)) t.grad(bi) += g * x;
    } else {
      if (t.needs_grad(ai)) detail::rows_view(t.grad(ai), bn) += detail::rows_view(g, bn).rowwise() * y.transpose();
      if (t.needs_grad(bi))
        t.grad(bi) += (detail::rows_view(g, bn) * detail::rows_view(x, bn)).colwise().sum().transpose();
    }
  });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tensor<S> out = a.value();
  out.data *= c;
  return a.tape->record(std::move(out), {a.id}, [ai = a.id, c](Tape<S>& t, std::size_t self) {
    t.grad(ai) += c * t.grad(self);
  });
}

/// Elementwise map with derivative `df(x, y)` evaluated from input and output.
template <class S, class F, class DF>
Var<S> unary(Var<S> a, F f, DF df) {
  Tensor<S> out = a.value();
  out.data = out.data.unaryExpr(f);
  return a.tape->record(std::move(out), {a.id}, [ai = a.id, df](Tape<S>& t, std::size_t self) {
    const Vec<S>& g = t.grad(self);
    const Vec<S>& x = t.value(ai).data;
    const Vec<S>& y = t.value(self).data;
    Vec<S>& gx = t.grad(ai);
    for (Eigen::Index i = 0; i < g.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
  });
}

template <class S>
Var<S> neg(Var<S> a) {
  return scale(a, S(-1));
}

template <class S>
Var<S> exp(Var<S> a) {
  return unary(a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  return unary(a, [](S x) { return detail::sigmoid(x); }, [](S, S y) { return y * (S(1) - y); });
}

template <class S>
Var<S> silu(Var<S> a) {
  return unary(
      a, [](S x) { return x * detail::sigmoid(x); },
      [](S x, S) {
        const S s = detail::sigmoid(x);
        return s * (S(1) + x * (S(1) - s));
      });
}

template <class S>
Var<S> softplus(Var<S> a) {
  return unary(a, [](S x) { return detail::softplus(x); }, [](S x, S) { return detail::sigmoid(x); });
}

template <class S>
Var<S> gelu(Var<S> a) {
  return unary(
      a, [](S x) { return S(0.5) * x * (S(1) + std::erf(x / std::sqrt(S(2)))); },
      [](S x, S) {
        const S cdf = S(0.5) * (S(1) + std::erf(x / std::sqrt(S(2))));
        const S pdf = std::exp(S(-0.5) * x * x) / std::sqrt(S(2) * S(M_PI));
        return cdf + x * pdf;
      });
}

// ---- linear algebra --------------------------------------------------------

/// [N,K] x [K,M] -> [N,M].
template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), ErrorKind::Validation,
          "matmul: incompatible shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  Tensor<S> out({av.dim(0), bv.dim(1)});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  return a.tape->record(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape<S>& t, std::size_t self) {
    const auto& av = t.value(ai);
    const auto& bv = t.value(bi);
    Eigen::Map<const RowMatrix<S>> g(t.grad(self).data(), av.dim(0), bv.dim(1));
    if (t.needs_grad(ai)) {
      Eigen::Map<RowMatrix<S>> ga(t.grad(ai).data(), av.dim(0), av.dim(1));
      ga.noalias() += g * bv.matrix().transpose();
    }
    if (t.needs_grad(bi)) {
      Eigen::Map<RowMatrix<S>> gb(t.grad(bi).data(), bv.dim(0), bv.dim(1));
      gb.noalias() += av.matrix().transpose() * g;
    }
  });
}

/// x[..., in] W[in, out] + b[out] over the last axis.
template <class S>
Var<S> linear(Var<S> x, Var<S> w, std::optional<Var<S>> b = std::nullopt) {
  detail::same_tape(x, w);
  const auto& xv = x.value();
  const auto& wv = w.value();
  require(wv.rank() == 2 && xv.cols() == wv.dim(0), ErrorKind::Validation,
          "linear: input " + shape_str(xv.shape) + " does not match weight " + shape_str(wv.shape));
  if (b) require(b->value().size() == wv.dim(1), ErrorKind::Validation, "linear: bias size mismatch");
  Shape shape = xv.shape;
  shape.back() = wv.dim(1);
  Tensor<S> out(shape);
  out.matrix().noalias() = xv.matrix() * wv.matrix();
  if (b) out.matrix().rowwise() += b->value().data.matrix().transpose();
  const std::size_t bi = b ? b->id : std::size_t(-1);
  auto bw = [xi = x.id, wi = w.id, bi](Tape<S>& t, std::size_t self) {
    const auto& xv = t.value(xi);
    const auto& wv = t.value(wi);
    Eigen::Map<const RowMatrix<S>> g(t.grad(self).data(), xv.rows(), wv.dim(1));
    if (t.needs_grad(xi)) {
      Eigen::Map<RowMatrix<S>> gx(t.grad(xi).data(), xv.rows(), xv.cols());
      gx.noalias() += g * wv.matrix().transpose();
    }
    if (t.needs_grad(wi)) {
      Eigen::Map<RowMatrix<S>> gw(t.grad(wi).data(), wv.dim(0), wv.dim(1));
      gw.noalias() += xv.matrix().transpose() * g;
    }
    if (bi != std::size_t(-1) && t.needs_grad(bi)) t.grad(bi) += g.colwise().sum().transpose().array();
  };
  if (b) return x.tape->record(std::move(out), {x.id, w.id, b->id}, bw);
  return x.tape->record(std::move(out), {x.id, w.id}, bw);
}

template <class S>
Var<S> transpose(Var<S> a) {
  const auto& av = a.value();
  require(av.rank() == 2, ErrorKind::Validation, "transpose expects a 2D tensor");
  Tensor<S> out({av.dim(1), av.dim(0)});
  out.matrix() = av.matrix().transpose();
  return a.tape->record(std::move(out), {a.id}, [ai = a.id](Tape<S>& t, std::size_t self) {
    const auto& av = t.value(ai);
    Eigen::Map<const RowMatrix<S>> g(t.grad(self).data(), av.dim(1), av.dim(0));
    Eigen::Map<RowMatrix<S>> ga(t.grad(ai).data(), av.dim(0), av.dim(1));
    ga += g.transpose();
  });
}

template <class S>
Var<S> reshape(Var<S> a, Shape shape) {
  require(numel(shape) == a.size(), ErrorKind::Validation,
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes the element count");
  Tensor<S> out(std::move(shape), a.value().data);
  return a.tape->record(std::move(out), {a.id}, [ai = a.id](Tape<S>& t, std::size_t self) {
    t.grad(ai) += t.grad(self);
  });
}

// ---- normalization ---------------------------------------------------------

template <class S>
Var<S> softmax(Var<S> a, int axis = -1) {
  const auto& av = a.value();
  const int r = av.rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, ErrorKind::Validation, "softmax: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= av.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= av.dim(i);
  const std::int64_t n = av.dim(axis);
  Tensor<S> out(av.shape);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      S m = -std::numeric_limits<S>::infinity();
      for (std::int64_t j = 0; j < n; ++j) m = std::max(m, av.data[base + j * inner]);
      S sum = 0;
      for (std::int64_t j = 0; j < n; ++j) sum += out.data[base + j * inner] = std::exp(av.data[base + j * inner] - m);
      for (std::int64_t j = 0; j < n; ++j) out.data[base + j * inner] /= sum;
    }
  return a.tape->record(std::move(out), {a.id}, [ai = a.id, outer, inner, n](Tape<S>& t, std::size_t self) {
    const Vec<S>& g = t.grad(self);
    const Vec<S>& y = t.value(self).data;
    Vec<S>& gx = t.grad(ai);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * n * inner + i;
        S dot = 0;
        for (std::int64_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::int64_t j = 0; j < n; ++j) gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
      }
  });
}

/// Normalizes over the last axis; optional elementwise affine (gamma, beta).
template <class S>
Var<S> layernorm(Var<S> x, std::optional<Var<S>> gamma = std::nullopt, std::optional<Var<S>> beta = std::nullopt,
                 S eps = S(1e-5)) {
  const auto& xv = x.value();
  const std::int64_t n = xv.cols(), rows = xv.rows();
  if (gamma) require(gamma->size() == n, ErrorKind::Validation, "layernorm: gamma size mismatch");
  if (beta) require(beta->size() == n, ErrorKind::Validation, "layernorm: beta size mismatch");
  auto xhat = std::make_shared<Tensor<S>>(xv.shape);
  auto rstd = std::make_shared<Vec<S>>(rows);
  Tensor<S> out(xv.shape);
  auto xa = xv.array2d();
  auto xh = xhat->array2d();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S mu = xa.row(r).mean();
    const S var = (xa.row(r) - mu).square().mean();
    (*rstd)[r] = S(1) / std::sqrt(var + eps);
    xh.row(r) = (xa.row(r) - mu) * (*rstd)[r];
  }
  auto oa = out.array2d();
  oa = xh;
  if (gamma) oa.rowwise() *= gamma->value().data.transpose();
  if (beta) oa.rowwise() += beta->value().data.transpose();

  const std::size_t gi = gamma ? gamma->id : std::size_t(-1);
  const std::size_t bi = beta ? beta->id : std::size_t(-1);
  auto bw = [xi = x.id, gi, bi, xhat, rstd, n](Tape<S>& t, std::size_t self) {
    auto g = detail::rows_view(t.grad(self), n);
    auto xh = xhat->array2d();
    RowArray<S> gxh = g;
    if (gi != std::size_t(-1)) {
      if (t.needs_grad(gi)) t.grad(gi) += (g * xh).colwise().sum().transpose();
      gxh.rowwise() *= t.value(gi).data.transpose();
    }
    if (bi != std::size_t(-1) && t.needs_grad(bi)) t.grad(bi) += g.colwise().sum().transpose();
    if (t.needs_grad(xi)) {
      auto gx = detail::rows_view(t.grad(xi), n);
      for (Eigen::Index r = 0; r < gx.rows(); ++r) {
        const S m1 = gxh.row(r).mean();
        const S m2 = (gxh.row(r) * xh.row(r)).mean();
        gx.row(r) += (*rstd)[r] * (gxh.row(r) - m1 - xh.row(r) * m2);
      }
    }
  };
  if (gamma && beta) return x.tape->record(std::move(out), {x.id, gamma->id, beta->id}, bw);
  if (gamma) return x.tape->record(std::move(out), {x.id, gamma->id}, bw);
  if (beta) return x.tape->record(std::move(out), {x.id, beta->id}, bw);
  return x.tape->record(std::move(out), {x.id}, bw);
}

// ---- indexing --------------------------------------------------------------

/// out.flat[i] = x.flat[index[i]]; backward scatter-adds.
template <class S>
Var<S> gather(Var<S> x, IndexList index, Shape out_shape) {
  require(std::int64_t(index->size()) == numel(out_shape), ErrorKind::Validation,
          "gather: index length does not match output shape");
  const auto& xv = x.value();
  Tensor<S> out(std::move(out_shape));
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto src = (*index)[i];
    require(src >= 0 && src < xv.size(), ErrorKind::Validation, "gather: index out of range");
    out.data[Eigen::Index(i)] = xv.data[src];
  }
  return x.tape->record(std::move(out), {x.id}, [xi = x.id, index](Tape<S>& t, std::size_t self) {
    const Vec<S>& g = t.grad(self);
    Vec<S>& gx = t.grad(xi);
    for (std::size_t i = 0; i < index->size(); ++i) gx[(*index)[i]] += g[Eigen::Index(i)];
  });
}

/// Selects rows of a [N, D] tensor: out[i] = x[rows[i]].
template <class S>
Var<S> gather_rows(Var<S> x, IndexList rows) {
  const auto& xv = x.value();
  const std::int64_t d = xv.cols();
  Tensor<S> out({std::int64_t(rows->size()), d});
  auto xa = xv.matrix();
  auto oa = out.matrix();
  for (std::size_t i = 0; i < rows->size(); ++i) {
    const auto r = (*rows)[i];
    require(r >= 0 && r < xv.rows(), ErrorKind::Validation, "gather_rows: index out of range");
    oa.row(Eigen::Index(i)) = xa.row(r);
  }
  return x.tape->record(std::move(out), {x.id}, [xi = x.id, rows, d](Tape<S>& t, std::size_t self) {
    auto g = detail::rows_view(t.grad(self), d);
    auto gx = detail::rows_view(t.grad(xi), d);
    for (std::size_t i = 0; i < rows->size(); ++i) gx.row((*rows)[i]) += g.row(Eigen::Index(i));
  });
}

/// Inverse placement: out has `n_rows` rows, out[rows[i]] += x[i].
template <class S>
Var<S> scatter_rows(Var<S> x, IndexList rows, std::int64_t n_rows) {
  const auto& xv = x.value();
  require(xv.rows() == std::int64_t(rows->size()), ErrorKind::Validation, "scatter_rows: index length mismatch");
  const std::int64_t d = xv.cols();
  Tensor<S> out({n_rows, d});
  auto oa = out.matrix();
  auto xa = xv.matrix();
  for (std::size_t i = 0; i < rows->size(); ++i) {
    const auto r = (*rows)[i];
    require(r >= 0 && r < n_rows, ErrorKind::Validation, "scatter_rows: index out of range");
    oa.row(r) += xa.row(Eigen::Index(i));
  }
  return x.tape->record(std::move(out), {x.id}, [xi = x.id, rows, d](Tape<S>& t, std::size_t self) {
    auto g = detail::rows_view(t.grad(self), d);
    auto gx = detail::rows_view(t.grad(xi), d);
    for (std::size_t i = 0; i < rows->size(); ++i) gx.row(Eigen::Index(i)) += g.row((*rows)[i]);
  });
}

/// Rows flagged in `mask` are replaced by the shared row `fill` [D].
template <class S>
Var<S> replace_rows(Var<S> x, Var<S> fill, std::shared_ptr<const std::vector<bool>> mask) {
  detail::same_tape(x, fill);
  const auto& xv = x.value();
  const std::int64_t d = xv.cols();
  require(fill.size() == d, ErrorKind::Validation, "replace_rows: fill width mismatch");
  require(std::int64_t(mask->size()) == xv.rows(), ErrorKind::Validation, "replace_rows: mask length mismatch");
  Tensor<S> out = xv;
  auto oa = out.array2d();
  for (std::int64_t r = 0; r < xv.rows(); ++r)
    if ((*mask)[std::size_t(r)]) oa.row(r) = fill.value().data.transpose();
  return x.tape->record(std::move(out), {x.id, fill.id}, [xi = x.id, fi = fill.id, mask, d](Tape<S>& t, std::size_t self) {
    auto g = detail::rows_view(t.grad(self), d);
    const bool gx_needed = t.needs_grad(xi), gf_needed = t.needs_grad(fi);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if ((*mask)[std::size_t(r)]) {
        if (gf_needed) t.grad(fi) += g.row(r).transpose();
      } else if (gx_needed) {
        detail::rows_view(t.grad(xi), d).row(r) += g.row(r);
      }
    }
  });
}

// ---- reductions ------------------------------------------------------------

template <class S>
Var<S> sum(Var<S> a) {
  Tensor<S> out({1});
  out.data[0] = a.value().data.sum();
  return a.tape->record(std::move(out), {a.id}, [ai = a.id](Tape<S>& t, std::size_t self) {
    t.grad(ai) += t.grad(self)[0];
  });
}

template <class S>
Var<S> mean(Var<S> a) {
  return scale(sum(a), S(1) / S(a.size()));
}

template <class S>
Var<S> sum_sq(Var<S> a) {
  Tensor<S> out({1});
  out.data[0] = a.value().data.square().sum();
  return a.tape->record(std::move(out), {a.id}, [ai = a.id](Tape<S>& t, std::size_t self) {
    t.grad(ai) += S(2) * t.grad(self)[0] * t.value(ai).data;
  });
}

/// Mean over rows of [N, D] -> [D].
template <class S>
Var<S> mean_rows(Var<S> a) {
  const auto& av = a.value();
  const std::int64_t d = av.cols(), n = av.rows();
  Tensor<S> out({d});
  out.data = av.array2d().colwise().mean().transpose();
  return a.tape->record(std::move(out), {a.id}, [ai = a.id, d, n](Tape<S>& t, std::size_t self) {
    detail::rows_view(t.grad(ai), d).rowwise() += t.grad(self).transpose() / S(n);
  });
}

// ---- fused model kernels ---------------------------------------------------

/// Multi-head softmax attention restricted to consecutive groups of
/// `window_len` rows. With `groups`, a query only attends to keys of the same
/// group id inside its window (shifted-window masking).
template <class S>
Var<S> window_attention(Var<S> q, Var<S> k, Var<S> v, std::int64_t window_len, int heads,
                        std::shared_ptr<const std::vector<int>> groups = nullptr,
                        std::vector<RowMatrix<S>>* probe = nullptr) {
  detail::same_tape(q, k);
  detail::same_tape(q, v);
  const auto& qv = q.value();
  require(qv.rank() == 2 && k.shape() == qv.shape && v.shape() == qv.shape, ErrorKind::Validation,
          "window_attention: q, k, v must share a 2D shape");
  const std::int64_t n = qv.dim(0), d = qv.dim(1);
  require(window_len > 0 && n % window_len == 0, ErrorKind::Validation, "window_attention: rows not divisible by window");
  require(heads > 0 && d % heads == 0, ErrorKind::Validation, "window_attention: dim not divisible by heads");
  require(!groups || std::int64_t(groups->size()) == n, ErrorKind::Validation, "window_attention: group ids length");
  const std::int64_t dh = d / heads, n_windows = n / window_len;
  const S scl = S(1) / std::sqrt(S(dh));

  auto probs = std::make_shared<std::vector<RowMatrix<S>>>(std::size_t(n_windows * heads));
  Tensor<S> out(qv.shape);
  auto Q = qv.matrix();
  auto K = k.value().matrix();
  auto V = v.value().matrix();
  auto O = out.matrix();
  for (std::int64_t w = 0; w < n_windows; ++w)
    for (int h = 0; h < heads; ++h) {
      const std::int64_t r0 = w * window_len, c0 = h * dh;
      RowMatrix<S> sc = (Q.block(r0, c0, window_len, dh) * K.block(r0, c0, window_len, dh).transpose()) * scl;
      for (std::int64_t i = 0; i < window_len; ++i) {
        S m = -std::numeric_limits<S>::infinity();
        for (std::int64_t j = 0; j < window_len; ++j)
          if (!groups || (*groups)[r0 + i] == (*groups)[r0 + j]) m = std::max(m, sc(i, j));
        S sum = 0;
        for (std::int64_t j = 0; j < window_len; ++j) {
          const bool allowed = !groups || (*groups)[r0 + i] == (*groups)[r0 + j];
          sc(i, j) = allowed ? std::exp(sc(i, j) - m) : S(0);
          sum += sc(i, j);
        }
        sc.row(i) /= sum;
      }
      O.block(r0, c0, window_len, dh).noalias() = sc * V.block(r0, c0, window_len, dh);
      (*probs)[std::size_t(w * heads + h)] = std::move(sc);
    }
  if (probe) *probe = *probs;

  return q.tape->record(
      std::move(out), {q.id, k.id, v.id},
      [qi = q.id, ki = k.id, vi = v.id, probs, window_len, heads, n, d, dh, scl, n_windows](Tape<S>& t, std::size_t self) {
        Eigen::Map<const RowMatrix<S>> G(t.grad(self).data(), n, d);
        auto Q = t.value(qi).matrix();
        auto K = t.value(ki).matrix();
        auto V = t.value(vi).matrix();
        Eigen::Map<RowMatrix<S>> gQ(t.grad(qi).data(), n, d);
        Eigen::Map<RowMatrix<S>> gK(t.grad(ki).data(), n, d);
        Eigen::Map<RowMatrix<S>> gV(t.grad(vi).data(), n, d);
        for (std::int64_t w = 0; w < n_windows; ++w)
          for (int h = 0; h < heads; ++h) {
            const std::int64_t r0 = w * window_len, c0 = h * dh;
            const RowMatrix<S>& P = (*probs)[std::size_t(w * heads + h)];
            const auto g = G.block(r0, c0, window_len, dh);
            gV.block(r0, c0, window_len, dh).noalias() += P.transpose() * g;
            RowMatrix<S> dP = g * V.block(r0, c0, window_len, dh).transpose();
            const Eigen::Matrix<S, Eigen::Dynamic, 1> rowdot = (dP.array() * P.array()).rowwise().sum();
            RowMatrix<S> dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * scl;
            gQ.block(r0, c0, window_len, dh).noalias() += dS * K.block(r0, c0, window_len, dh);
            gK.block(r0, c0, window_len, dh).noalias() += dS.transpose() * Q.block(r0, c0, window_len, dh);
          }
      });
}

namespace detail {

/// Zero-order-hold input factor (exp(dt*a) - 1) / a and its partials.
template <class S>
struct ZohFactor {
  S value, d_dt, d_a;
};

template <class S>
ZohFactor<S> zoh_factor(S dt, S a) {
  const S z = dt * a;
  const S e = std::exp(z);
  if (std::abs(z) < S(1e-4)) {
    return {dt * (S(1) + z / S(2) + z * z / S(6)), e, dt * dt * (S(0.5) + z / S(3))};
  }
  const S phi = std::expm1(z) / a;
  return {phi, e, (dt * e - phi) / a};
}

}  // namespace detail

/// Selective state-space scan along the row axis.
///   h_t = exp(dt_t * A) h_{t-1} + zoh(dt_t, A) * B_t * u_t
///   y_t = sum_n C_t[n] h_t[:, n] + Dskip * u_t
/// Shapes: u, dt [L, Di]; A [Di, N]; B, C [L, N]; Dskip [Di].
template <class S>
Var<S> selective_scan(Var<S> u, Var<S> dt, Var<S> A, Var<S> B, Var<S> C, Var<S> Dskip) {
  const auto& uv = u.value();
  const std::int64_t L = uv.dim(0), Di = uv.dim(1), N = A.value().dim(1);
  require(dt.shape() == uv.shape && A.value().dim(0) == Di && B.shape() == Shape{L, N} && C.shape() == Shape{L, N} &&
              Dskip.size() == Di,
          ErrorKind::Validation, "selective_scan: inconsistent shapes");

  auto states = std::make_shared<Vec<S>>(L * Di * N);
  Tensor<S> out({L, Di});
  {
    const auto& dtv = dt.value().data;
    const auto& Av = A.value().data;
    const auto& Bv = B.value().data;
    const auto& Cv = C.value().data;
    const auto& Dv = Dskip.value().data;
    Vec<S> h = Vec<S>::Zero(Di * N);
    for (std::int64_t t = 0; t < L; ++t) {
      for (std::int64_t c = 0; c < Di; ++c) {
        const S x = uv.data[t * Di + c];
        const S step = dtv[t * Di + c];
        S y = Dv[c] * x;
        for (std::int64_t s = 0; s < N; ++s) {
          const S a = Av[c * N + s];
          const auto zoh = detail::zoh_factor(step, a);
          S& hs = h[c * N + s];
          hs = zoh.d_dt * hs + zoh.value * Bv[t * N + s] * x;
          y += Cv[t * N + s] * hs;
        }
        out.data[t * Di + c] = y;
      }
      states->segment(t * Di * N, Di * N) = h;
    }
  }

  return u.tape->record(
      std::move(out), {u.id, dt.id, A.id, B.id, C.id, Dskip.id},
      [ui = u.id, dti = dt.id, Ai = A.id, Bi = B.id, Ci = C.id, Di_ = Dskip.id, states, L, Di, N](Tape<S>& t,
                                                                                                    std::size_t self) {
        const Vec<S>& gy = t.grad(self);
        const auto& uv = t.value(ui).data;
        const auto& dtv = t.value(dti).data;
        const auto& Av = t.value(Ai).data;
        const auto& Bv = t.value(Bi).data;
        const auto& Cv = t.value(Ci).data;
        const auto& Dv = t.value(Di_).data;
        Vec<S>& gu = t.grad(ui);
        Vec<S>& gdt = t.grad(dti);
        Vec<S>& gA = t.grad(Ai);
        Vec<S>& gB = t.grad(Bi);
        Vec<S>& gC = t.grad(Ci);
        Vec<S>& gD = t.grad(Di_);
        Vec<S> carry = Vec<S>::Zero(Di * N);
        for (std::int64_t tt = L; tt-- > 0;) {
          for (std::int64_t c = 0; c < Di; ++c) {
            const S x = uv[tt * Di + c];
            const S step = dtv[tt * Di + c];
            const S g = gy[tt * Di + c];
            gu[tt * Di + c] += g * Dv[c];
            gD[c] += g * x;
            for (std::int64_t s = 0; s < N; ++s) {
              const std::int64_t cs = c * N + s;
              const S h_t = (*states)[tt * Di * N + cs];
              const S h_prev = tt > 0 ? (*states)[(tt - 1) * Di * N + cs] : S(0);
              const S a = Av[cs];
              const auto zoh = detail::zoh_factor(step, a);
              const S gh = g * Cv[tt * N + s] + carry[cs];
              gC[tt * N + s] += g * h_t;
              const S g_decay = gh * h_prev;
              const S b = Bv[tt * N + s];
              gu[tt * Di + c] += gh * zoh.value * b;
              gB[tt * N + s] += gh * zoh.value * x;
              const S g_phi = gh * b * x;
              // d decay/d dt = a * decay, d decay/d a = dt * decay.
              gdt[tt * Di + c] += g_decay * a * zoh.d_dt + g_phi * zoh.d_dt;
              gA[cs] += g_decay * step * zoh.d_dt + g_phi * zoh.d_a;
              carry[cs] = zoh.d_dt * gh;
            }
          }
        }
      });
}

// ---- losses ----------------------------------------------------------------

/// Mean binary cross-entropy on logits against fixed 0/1 targets.
template <class S>
Var<S> bce_with_logits(Var<S> logits, const Vec<S>& targets) {
  const auto& z = logits.value().data;
  require(z.size() == targets.size(), ErrorKind::Validation, "bce: logits/targets length mismatch");
  Tensor<S> out({1});
  S total = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) total += detail::softplus(z[i]) - targets[i] * z[i];
  out.data[0] = total / S(z.size());
  return logits.tape->record(std::move(out), {logits.id}, [li = logits.id, targets](Tape<S>& t, std::size_t self) {
    const auto& z = t.value(li).data;
    const S g = t.grad(self)[0] / S(z.size());
    Vec<S>& gz = t.grad(li);
    for (Eigen::Index i = 0; i < z.size(); ++i) gz[i] += g * (detail::sigmoid(z[i]) - targets[i]);
  });
}

}  // namespace regmae::ad
