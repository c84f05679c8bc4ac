// Differentiable operations over [channels x time] tensors.
//
// Broadcasting is limited to one case: a [C x 1] right operand repeated along
// the time axis of a [C x T] left operand. Padding is always explicit.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "spexplus/tape.hpp"
#include "spexplus/tensor.hpp"

namespace spexplus {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + ": expected a [C x T] tensor, got " +
                     shape_str(t.shape()));
}

// 0: same shape, 1: b is [C x 1] broadcast along time.
template <typename T>
int broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return 0;
  if (a.rank() == 2 && b.rank() == 2 && b.dim(0) == a.dim(0) && b.dim(1) == 1)
    return 1;
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " are not broadcastable");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const int kind = detail::broadcast_kind(av, bv, "add");
  Tensor<T> out(av.shape());
  const std::size_t cols = av.cols();
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = av[i] + (kind == 0 ? bv[i] : bv[i / cols]);
  return a.tape->record(std::move(out), {a, b}, [a, b, kind, cols](Tape<T>& t, std::span<const T> g) {
    if (auto ga = t.grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = t.grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[kind == 0 ? i : i / cols] += g[i];
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const int kind = detail::broadcast_kind(av, bv, "sub");
  Tensor<T> out(av.shape());
  const std::size_t cols = av.cols();
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = av[i] - (kind == 0 ? bv[i] : bv[i / cols]);
  return a.tape->record(std::move(out), {a, b}, [a, b, kind, cols](Tape<T>& t, std::span<const T> g) {
    if (auto ga = t.grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = t.grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[kind == 0 ? i : i / cols] -= g[i];
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const int kind = detail::broadcast_kind(av, bv, "mul");
  Tensor<T> out(av.shape());
  const std::size_t cols = av.cols();
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = av[i] * (kind == 0 ? bv[i] : bv[i / cols]);
  return a.tape->record(std::move(out), {a, b}, [a, b, kind, cols](Tape<T>& t, std::span<const T> g) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (auto ga = t.grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * (kind == 0 ? bv[i] : bv[i / cols]);
    if (auto gb = t.grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[kind == 0 ? i : i / cols] += g[i] * av[i];
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  return a.tape->record(std::move(out), {a}, [a, factor](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

// Sum of all elements, shape {1}.
template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
  return a.tape->record(Tensor<T>({1}, T(acc)), {a}, [a](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (auto& v : ga) v += g[0];
  });
}

// <a, w> for a constant weight tensor w, shape {1}.
template <typename T>
Var<T> dot_const(Var<T> a, const Tensor<T>& w) {
  const auto& av = a.value();
  if (av.size() != w.size()) throw ShapeError("dot_const: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += double(av[i]) * double(w[i]);
  return a.tape->record(Tensor<T>({1}, T(acc)), {a}, [a, w](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * w[i];
  });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Var<T> relu(Var<T> a) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] < T(0) ? T(0) : av[i];  // NaN passes through
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, std::span<const T> g) {
    const auto& av = t.value(a);
    auto ga = t.grad_sink(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > T(0)) ga[i] += g[i];
  });
}

// slope has one element (shared) or one per channel ([C x 1]).
template <typename T>
Var<T> prelu(Var<T> a, Var<T> slope) {
  const auto& av = a.value();
  const auto& sv = slope.value();
  detail::require_rank2(av, "prelu");
  const std::size_t cols = av.cols();
  const bool shared = sv.size() == 1;
  if (!shared && sv.size() != av.rows())
    throw ShapeError("prelu: slope must have 1 or C elements");
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T s = sv[shared ? 0 : i / cols];
    out[i] = av[i] > T(0) ? av[i] : s * av[i];
  }
  return a.tape->record(std::move(out), {a, slope}, [a, slope, cols, shared](Tape<T>& t, std::span<const T> g) {
    const auto& av = t.value(a);
    const auto& sv = t.value(slope);
    if (auto ga = t.grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += av[i] > T(0) ? g[i] : g[i] * sv[shared ? 0 : i / cols];
    if (auto gs = t.grad_sink(slope); !gs.empty()) {
      std::vector<double> acc(gs.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(av[i] > T(0))) acc[shared ? 0 : i / cols] += double(g[i]) * double(av[i]);
      for (std::size_t c = 0; c < gs.size(); ++c) gs[c] += T(acc[c]);
    }
  });
}

// Softmax over all elements of a class-score vector ([N x 1] or {N}).
template <typename T>
Var<T> softmax(Var<T> a) {
  const auto& av = a.value();
  const T mx = *std::max_element(av.values().begin(), av.values().end());
  Tensor<T> out(av.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) z += std::exp(double(av[i] - mx));
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = T(std::exp(double(av[i] - mx)) / z);
  Tensor<T> probs = out;
  return a.tape->record(std::move(out), {a}, [a, probs](Tape<T>& t, std::span<const T> g) {
    double gp = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) gp += double(g[i]) * double(probs[i]);
    auto ga = t.grad_sink(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T(probs[i] * (g[i] - gp));
  });
}

// ---------------------------------------------------------------------------
// Dense products

// [M x K] * [K x N] -> [M x N]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(av.shape()) +
                     " x " + shape_str(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> out({m, n});
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(av.data(), m, k) * detail::ConstMatMap<T>(bv.data(), k, n);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, std::span<const T> g) {
    detail::ConstMatMap<T> G(g.data(), m, n);
    if (auto ga = t.grad_sink(a); !ga.empty())
      detail::MatMap<T>(ga.data(), m, k).noalias() +=
          G * detail::ConstMatMap<T>(t.value(b).data(), k, n).transpose();
    if (auto gb = t.grad_sink(b); !gb.empty())
      detail::MatMap<T>(gb.data(), k, n).noalias() +=
          detail::ConstMatMap<T>(t.value(a).data(), m, k).transpose() * G;
  });
}

// ---------------------------------------------------------------------------
// Convolutions

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
};

// Output frame count of a 1-D convolution.
inline std::size_t conv_output_length(std::size_t input_len, std::size_t kernel,
                                      const ConvOptions& o) {
  if (o.stride == 0 || o.dilation == 0)
    throw ShapeError("conv1d: stride and dilation must be positive");
  const std::size_t padded = input_len + o.pad_left + o.pad_right;
  const std::size_t span = (kernel - 1) * o.dilation + 1;
  if (span > padded)
    throw ShapeError("conv1d: kernel span " + std::to_string(span) +
                     " exceeds padded input length " + std::to_string(padded));
  return (padded - span) / o.stride + 1;
}

// Output length of a transposed convolution (overlap-add).
inline std::size_t conv_transpose_output_length(std::size_t frames, std::size_t kernel,
                                                std::size_t stride) {
  if (stride == 0) throw ShapeError("conv1d_transpose: stride must be positive");
  return (frames - 1) * stride + kernel;
}

// input [C_in x T], weight [C_out x C_in/groups x L] -> [C_out x K]
template <typename T>
Var<T> conv1d(Var<T> input, Var<T> weight, ConvOptions o = {}) {
  const auto& x = input.value();
  const auto& w = weight.value();
  detail::require_rank2(x, "conv1d");
  if (w.rank() != 3) throw ShapeError("conv1d: weight must be [C_out x C_in/g x L]");
  const std::size_t cin = x.rows(), len = x.cols();
  const std::size_t cout = w.dim(0), cin_g = w.dim(1), kw = w.dim(2);
  if (o.groups == 0 || cin % o.groups != 0 || cout % o.groups != 0 || cin / o.groups != cin_g)
    throw ShapeError("conv1d: channel counts " + std::to_string(cin) + " -> " +
                     std::to_string(cout) + " incompatible with weight " +
                     shape_str(w.shape()) + " and groups " + std::to_string(o.groups));
  const std::size_t frames = conv_output_length(len, kw, o);
  Tensor<T> out({cout, frames});

  const bool pointwise = kw == 1 && o.stride == 1 && o.pad_left == 0 && o.pad_right == 0;
  if (o.groups == 1 && pointwise) {
    detail::MatMap<T>(out.data(), cout, frames).noalias() =
        detail::ConstMatMap<T>(w.data(), cout, cin) * detail::ConstMatMap<T>(x.data(), cin, len);
    return input.tape->record(std::move(out), {input, weight},
        [input, weight, cin, cout, len](Tape<T>& t, std::span<const T> g) {
          detail::ConstMatMap<T> G(g.data(), cout, len);
          if (auto gx = t.grad_sink(input); !gx.empty())
            detail::MatMap<T>(gx.data(), cin, len).noalias() +=
                detail::ConstMatMap<T>(t.value(weight).data(), cout, cin).transpose() * G;
          if (auto gw = t.grad_sink(weight); !gw.empty())
            detail::MatMap<T>(gw.data(), cout, cin).noalias() +=
                G * detail::ConstMatMap<T>(t.value(input).data(), cin, len).transpose();
        });
  }

  const std::ptrdiff_t pl = static_cast<std::ptrdiff_t>(o.pad_left);
  if (o.groups == 1) {
    // im2col: row (c * L + l), column k holds x[c, k*stride + l*dilation - pad_left].
    const std::size_t rows = cin * kw;
    detail::RowMat<T> cols = detail::RowMat<T>::Zero(rows, frames);
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t l = 0; l < kw; ++l) {
        T* dst = cols.data() + (c * kw + l) * frames;
        const T* src = x.data() + c * len;
        for (std::size_t k = 0; k < frames; ++k) {
          const std::ptrdiff_t j = std::ptrdiff_t(k * o.stride + l * o.dilation) - pl;
          if (j >= 0 && j < std::ptrdiff_t(len)) dst[k] = src[j];
        }
      }
    detail::MatMap<T>(out.data(), cout, frames).noalias() =
        detail::ConstMatMap<T>(w.data(), cout, rows) * cols;
    return input.tape->record(std::move(out), {input, weight},
        [input, weight, cols = std::move(cols), cin, cout, kw, len, frames, o, pl](
            Tape<T>& t, std::span<const T> g) {
          const std::size_t rows = cin * kw;
          detail::ConstMatMap<T> G(g.data(), cout, frames);
          if (auto gw = t.grad_sink(weight); !gw.empty())
            detail::MatMap<T>(gw.data(), cout, rows).noalias() += G * cols.transpose();
          if (auto gx = t.grad_sink(input); !gx.empty()) {
            detail::RowMat<T> dcols =
                detail::ConstMatMap<T>(t.value(weight).data(), cout, rows).transpose() * G;
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t l = 0; l < kw; ++l) {
                const T* src = dcols.data() + (c * kw + l) * frames;
                T* dst = gx.data() + c * len;
                for (std::size_t k = 0; k < frames; ++k) {
                  const std::ptrdiff_t j = std::ptrdiff_t(k * o.stride + l * o.dilation) - pl;
                  if (j >= 0 && j < std::ptrdiff_t(len)) dst[j] += src[k];
                }
              }
          }
        });
  }

  // Grouped (including depthwise) convolution: direct loops.
  const std::size_t cout_g = cout / o.groups;
  auto valid_range = [o, len, frames](std::ptrdiff_t offset) {
    // k such that 0 <= k*stride + offset < len
    const std::ptrdiff_t s = std::ptrdiff_t(o.stride);
    std::ptrdiff_t k0 = offset >= 0 ? 0 : (-offset + s - 1) / s;
    std::ptrdiff_t k1 = std::ptrdiff_t(len) - offset <= 0
                            ? 0
                            : (std::ptrdiff_t(len) - offset + s - 1) / s;
    k1 = std::min<std::ptrdiff_t>(k1, std::ptrdiff_t(frames));
    return std::pair{std::size_t(std::max<std::ptrdiff_t>(k0, 0)),
                     std::size_t(std::max<std::ptrdiff_t>(k1, 0))};
  };
  for (std::size_t co = 0; co < cout; ++co) {
    const std::size_t grp = co / cout_g;
    T* dst = out.data() + co * frames;
    for (std::size_t c = 0; c < cin_g; ++c) {
      const T* src = x.data() + (grp * cin_g + c) * len;
      for (std::size_t l = 0; l < kw; ++l) {
        const T wv = w.data()[(co * cin_g + c) * kw + l];
        const std::ptrdiff_t off = std::ptrdiff_t(l * o.dilation) - pl;
        const auto [k0, k1] = valid_range(off);
        for (std::size_t k = k0; k < k1; ++k) dst[k] += wv * src[std::ptrdiff_t(k * o.stride) + off];
      }
    }
  }
  return input.tape->record(std::move(out), {input, weight},
      [input, weight, cin_g, cout, cout_g, kw, len, frames, o, pl, valid_range](
          Tape<T>& t, std::span<const T> g) {
        const auto& x = t.value(input);
        const auto& w = t.value(weight);
        auto gx = t.grad_sink(input);
        auto gw = t.grad_sink(weight);
        for (std::size_t co = 0; co < cout; ++co) {
          const std::size_t grp = co / cout_g;
          const T* go = g.data() + co * frames;
          for (std::size_t c = 0; c < cin_g; ++c) {
            const std::size_t ci = grp * cin_g + c;
            for (std::size_t l = 0; l < kw; ++l) {
              const std::size_t widx = (co * cin_g + c) * kw + l;
              const std::ptrdiff_t off = std::ptrdiff_t(l * o.dilation) - pl;
              const auto [k0, k1] = valid_range(off);
              if (!gx.empty()) {
                const T wv = w.data()[widx];
                T* dx = gx.data() + ci * len;
                for (std::size_t k = k0; k < k1; ++k) dx[std::ptrdiff_t(k * o.stride) + off] += wv * go[k];
              }
              if (!gw.empty()) {
                const T* src = x.data() + ci * len;
                T acc = 0;
                for (std::size_t k = k0; k < k1; ++k) acc += go[k] * src[std::ptrdiff_t(k * o.stride) + off];
                gw[widx] += acc;
              }
            }
          }
        }
      });
}

// input [C_in x K], weight [C_in x C_out x L] -> [C_out x (K-1)*stride + L].
// Overlap-add; the adjoint of conv1d with the same kernel and stride.
template <typename T>
Var<T> conv1d_transpose(Var<T> input, Var<T> weight, std::size_t stride) {
  const auto& x = input.value();
  const auto& w = weight.value();
  detail::require_rank2(x, "conv1d_transpose");
  if (w.rank() != 3 || w.dim(0) != x.rows())
    throw ShapeError("conv1d_transpose: weight must be [C_in x C_out x L], got " +
                     shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  const std::size_t cin = x.rows(), frames = x.cols();
  const std::size_t cout = w.dim(1), kw = w.dim(2);
  const std::size_t len = conv_transpose_output_length(frames, kw, stride);
  const std::size_t rows = cout * kw;
  detail::RowMat<T> cols =
      detail::ConstMatMap<T>(w.data(), cin, rows).transpose() *
      detail::ConstMatMap<T>(x.data(), cin, frames);
  Tensor<T> out({cout, len});
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t l = 0; l < kw; ++l) {
      const T* src = cols.data() + (co * kw + l) * frames;
      T* dst = out.data() + co * len + l;
      for (std::size_t k = 0; k < frames; ++k) dst[k * stride] += src[k];
    }
  return input.tape->record(std::move(out), {input, weight},
      [input, weight, cin, cout, kw, frames, len, stride, rows](Tape<T>& t, std::span<const T> g) {
        detail::RowMat<T> dcols(rows, frames);
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t l = 0; l < kw; ++l) {
            T* dst = dcols.data() + (co * kw + l) * frames;
            const T* src = g.data() + co * len + l;
            for (std::size_t k = 0; k < frames; ++k) dst[k] = src[k * stride];
          }
        if (auto gx = t.grad_sink(input); !gx.empty())
          detail::MatMap<T>(gx.data(), cin, frames).noalias() +=
              detail::ConstMatMap<T>(t.value(weight).data(), cin, rows) * dcols;
        if (auto gw = t.grad_sink(weight); !gw.empty())
          detail::MatMap<T>(gw.data(), cin, rows).noalias() +=
              detail::ConstMatMap<T>(t.value(input).data(), cin, frames) * dcols.transpose();
      });
}

// ---------------------------------------------------------------------------
// Reductions, pooling and time-axis reshaping

// [C x T] -> [C x 1]
template <typename T>
Var<T> mean_time(Var<T> a) {
  const auto& av = a.value();
  detail::require_rank2(av, "mean_time");
  const std::size_t c = av.rows(), n = av.cols();
  Tensor<T> out({c, 1});
  for (std::size_t r = 0; r < c; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) acc += av(r, k);
    out[r] = T(acc / double(n));
  }
  return a.tape->record(std::move(out), {a}, [a, c, n](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t r = 0; r < c; ++r) {
      const T v = g[r] / T(n);
      for (std::size_t k = 0; k < n; ++k) ga[r * n + k] += v;
    }
  });
}

// Non-overlapping-capable max pooling over time; output length
// floor((T - kernel) / stride) + 1, which is floor(T/3) for kernel = stride = 3.
template <typename T>
Var<T> max_pool1d(Var<T> a, std::size_t kernel = 3, std::size_t stride = 3) {
  const auto& av = a.value();
  detail::require_rank2(av, "max_pool1d");
  const std::size_t c = av.rows(), n = av.cols();
  if (kernel == 0 || stride == 0) throw ShapeError("max_pool1d: kernel and stride must be positive");
  if (n < kernel)
    throw ShapeError("max_pool1d: time axis " + std::to_string(n) +
                     " shorter than kernel " + std::to_string(kernel));
  const std::size_t frames = (n - kernel) / stride + 1;
  Tensor<T> out({c, frames});
  std::vector<std::size_t> argmax(c * frames);
  for (std::size_t r = 0; r < c; ++r)
    for (std::size_t k = 0; k < frames; ++k) {
      std::size_t best = k * stride;
      for (std::size_t j = best + 1; j < k * stride + kernel; ++j)
        if (av(r, j) > av(r, best)) best = j;
      argmax[r * frames + k] = best;
      out(r, k) = av(r, best);
    }
  return a.tape->record(std::move(out), {a}, [a, c, n, frames, argmax = std::move(argmax)](
                                                 Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t k = 0; k < frames; ++k) ga[r * n + argmax[r * frames + k]] += g[r * frames + k];
  });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p.value(), "concat_channels");
    if (p.cols() != n) throw ShapeError("concat_channels: time lengths differ");
    total += p.rows();
  }
  Tensor<T> out({total, n});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.size(), out.data() + offset);
    offset += p.size();
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts, [inputs](Tape<T>& t, std::span<const T> g) {
    std::size_t offset = 0;
    for (const auto& p : inputs) {
      const std::size_t sz = t.value(p).size();
      if (auto gp = t.grad_sink(p); !gp.empty())
        for (std::size_t i = 0; i < sz; ++i) gp[i] += g[offset + i];
      offset += sz;
    }
  });
}

template <typename T>
Var<T> concat_channels(std::initializer_list<Var<T>> parts) {
  return concat_channels(std::span<const Var<T>>(parts.begin(), parts.size()));
}

// [C x T] -> [C x length] starting at `start`.
template <typename T>
Var<T> slice_time(Var<T> a, std::size_t start, std::size_t length) {
  const auto& av = a.value();
  detail::require_rank2(av, "slice_time");
  const std::size_t c = av.rows(), n = av.cols();
  if (length == 0 || start + length > n)
    throw ShapeError("slice_time: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside length " + std::to_string(n));
  Tensor<T> out({c, length});
  for (std::size_t r = 0; r < c; ++r)
    std::copy(av.data() + r * n + start, av.data() + r * n + start + length, out.data() + r * length);
  return a.tape->record(std::move(out), {a}, [a, c, n, start, length](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t k = 0; k < length; ++k) ga[r * n + start + k] += g[r * length + k];
  });
}

// Zero padding on the time axis.
template <typename T>
Var<T> pad_time(Var<T> a, std::size_t left, std::size_t right) {
  const auto& av = a.value();
  detail::require_rank2(av, "pad_time");
  if (left == 0 && right == 0) return a;
  const std::size_t c = av.rows(), n = av.cols(), m = n + left + right;
  Tensor<T> out({c, m});
  for (std::size_t r = 0; r < c; ++r)
    std::copy(av.data() + r * n, av.data() + (r + 1) * n, out.data() + r * m + left);
  return a.tape->record(std::move(out), {a}, [a, c, n, m, left](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t k = 0; k < n; ++k) ga[r * n + k] += g[r * m + left + k];
  });
}

// Trims or zero-pads the tail so the time axis is exactly `length`.
template <typename T>
Var<T> fit_time(Var<T> a, std::size_t length) {
  const std::size_t n = a.cols();
  if (n == length) return a;
  return n > length ? slice_time(a, 0, length) : pad_time(a, 0, length - n);
}

// [D x 1] -> [D x frames]
template <typename T>
Var<T> repeat_time(Var<T> a, std::size_t frames) {
  const auto& av = a.value();
  if (av.rank() != 2 || av.cols() != 1)
    throw ShapeError("repeat_time: expected [D x 1], got " + shape_str(av.shape()));
  const std::size_t d = av.rows();
  Tensor<T> out({d, frames});
  for (std::size_t r = 0; r < d; ++r) std::fill_n(out.data() + r * frames, frames, av[r]);
  return a.tape->record(std::move(out), {a}, [a, d, frames](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t r = 0; r < d; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < frames; ++k) acc += g[r * frames + k];
      ga[r] += T(acc);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization cores (affine gain/bias are applied separately with mul/add).

namespace detail {

// y = (x - mean) / sqrt(var + eps) over `count` contiguous elements starting at
// `offset`; backward dx = (g - mean(g) - y * mean(g * y)) / sqrt(var + eps).
template <typename T>
void normalize_block(const T* x, T* y, std::size_t count, double eps, double& mean, double& var) {
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i) s += x[i];
  mean = s / double(count);
  double ss = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d = double(x[i]) - mean;
    ss += d * d;
  }
  var = ss / double(count);
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < count; ++i) y[i] = T((double(x[i]) - mean) * inv);
}

template <typename T>
void normalize_block_backward(const T* y, const T* g, T* dx, std::size_t count, double inv_std) {
  double gm = 0.0, gy = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    gm += g[i];
    gy += double(g[i]) * double(y[i]);
  }
  gm /= double(count);
  gy /= double(count);
  for (std::size_t i = 0; i < count; ++i)
    dx[i] += T((double(g[i]) - gm - double(y[i]) * gy) * inv_std);
}

}  // namespace detail

// Statistics over all channels and time steps (the gLN core).
template <typename T>
Var<T> normalize_global(Var<T> a, double eps) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  double mean = 0.0, var = 0.0;
  detail::normalize_block(av.data(), out.data(), av.size(), eps, mean, var);
  const double inv_std = 1.0 / std::sqrt(var + eps);
  Tensor<T> y = out;
  return a.tape->record(std::move(out), {a}, [a, y, inv_std](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    detail::normalize_block_backward(y.data(), g.data(), ga.data(), y.size(), inv_std);
  });
}

// Per-channel statistics over time (batch-norm training core). The batch
// mean/variance of each channel are written to `mean_out` / `var_out`.
template <typename T>
Var<T> normalize_channels(Var<T> a, double eps, std::vector<double>* mean_out = nullptr,
                          std::vector<double>* var_out = nullptr) {
  const auto& av = a.value();
  detail::require_rank2(av, "normalize_channels");
  const std::size_t c = av.rows(), n = av.cols();
  Tensor<T> out(av.shape());
  std::vector<double> means(c), vars(c), inv(c);
  for (std::size_t r = 0; r < c; ++r) {
    detail::normalize_block(av.data() + r * n, out.data() + r * n, n, eps, means[r], vars[r]);
    inv[r] = 1.0 / std::sqrt(vars[r] + eps);
  }
  if (mean_out) *mean_out = means;
  if (var_out) *var_out = vars;
  Tensor<T> y = out;
  return a.tape->record(std::move(out), {a}, [a, y, inv, c, n](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t r = 0; r < c; ++r)
      detail::normalize_block_backward(y.data() + r * n, g.data() + r * n, ga.data() + r * n, n, inv[r]);
  });
}

// (x - mean[c]) / sqrt(var[c] + eps) with fixed statistics (batch-norm eval core).
template <typename T>
Var<T> normalize_channels_fixed(Var<T> a, std::span<const T> mean, std::span<const T> var,
                                double eps) {
  const auto& av = a.value();
  detail::require_rank2(av, "normalize_channels_fixed");
  const std::size_t c = av.rows(), n = av.cols();
  if (mean.size() != c || var.size() != c)
    throw ShapeError("normalize_channels_fixed: statistics length differs from channel count");
  std::vector<T> inv(c), shift(c);
  for (std::size_t r = 0; r < c; ++r) {
    inv[r] = T(1.0 / std::sqrt(double(var[r]) + eps));
    shift[r] = mean[r];
  }
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < c; ++r)
    for (std::size_t k = 0; k < n; ++k) out(r, k) = (av(r, k) - shift[r]) * inv[r];
  return a.tape->record(std::move(out), {a}, [a, inv, c, n](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_sink(a);
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t k = 0; k < n; ++k) ga[r * n + k] += g[r * n + k] * inv[r];
  });
}

}  // namespace spexplus
