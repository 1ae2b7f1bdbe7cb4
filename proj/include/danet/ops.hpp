// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "danet/errors.hpp"
#include "danet/parallel.hpp"
#include "danet/tape.hpp"
#include "danet/tensor.hpp"

namespace danet {

// ---------------------------------------------------------------------------
// Tape-free kernels. Convolution is cross-correlation (no kernel flip) with
// zero padding, lowered to im2col + GEMM per batch item.

namespace kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t stride, pad;
  std::size_t ho, wo;

  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return ho * wo; }
  Shape out_shape() const { return {n, cout, ho, wo}; }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& kernel, std::size_t stride,
                                  std::size_t pad) {
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  if (kernel.c != in.c)
    throw ShapeError("conv2d: kernel " + kernel.str() + " expects " + std::to_string(kernel.c) +
                     " input channels but input is " + in.str());
  if (kernel.h == 0 || kernel.w == 0 || in.h + 2 * pad < kernel.h || in.w + 2 * pad < kernel.w)
    throw ShapeError("conv2d: kernel " + kernel.str() + " does not fit input " + in.str() +
                     " with padding " + std::to_string(pad));
  ConvGeometry g{in.n, in.c, in.h, in.w, kernel.n, kernel.h, kernel.w, stride, pad, 0, 0};
  g.ho = (in.h + 2 * pad - kernel.h) / stride + 1;
  g.wo = (in.w + 2 * pad - kernel.w) / stride + 1;
  return g;
}

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t P = g.p();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = img + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.w)) ? T(0)
                                                               : src[static_cast<std::size_t>(iw)];
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t P = g.p();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          T* dst = img + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          const T* src = row + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.w)) dst[iw] += src[ow];
          }
        }
      }
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& in, const Tensor<T>& kernel, const Tensor<T>* bias,
                         std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(in.shape(), kernel.shape(), stride, pad);
  if (bias && bias->size() != g.cout)
    throw ShapeError("conv2d: bias " + bias->shape().str() + " does not match kernel " +
                     kernel.shape().str());
  Tensor<T> out(g.out_shape());
  const std::size_t K = g.k(), P = g.p();
  ConstMatMap<T> W(kernel.raw(), static_cast<long>(g.cout), static_cast<long>(K));
  parallel_for(g.n, [&](std::size_t n) {
    const T* img = in.raw() + n * in.shape().item();
    std::vector<T> col;
    const T* colp = img;
    if (!is_pointwise(g)) {
      col.resize(K * P);
      im2col(img, g, col.data());
      colp = col.data();
    }
    MatMap<T> Y(out.raw() + n * g.cout * P, static_cast<long>(g.cout), static_cast<long>(P));
    Y.noalias() = W * ConstMatMap<T>(colp, static_cast<long>(K), static_cast<long>(P));
    if (bias)
      for (std::size_t co = 0; co < g.cout; ++co) Y.row(static_cast<long>(co)).array() += (*bias)[co];
  });
  return out;
}

template <class T>
void conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& kernel, const ConvGeometry& g,
                           Tensor<T>& grad_in) {
  const std::size_t K = g.k(), P = g.p();
  ConstMatMap<T> W(kernel.raw(), static_cast<long>(g.cout), static_cast<long>(K));
  parallel_for(g.n, [&](std::size_t n) {
    ConstMatMap<T> dY(grad_out.raw() + n * g.cout * P, static_cast<long>(g.cout),
                      static_cast<long>(P));
    T* dimg = grad_in.raw() + n * g.cin * g.h * g.w;
    if (is_pointwise(g)) {
      MatMap<T> dX(dimg, static_cast<long>(K), static_cast<long>(P));
      RowMat<T> tmp = W.transpose() * dY;
      dX += tmp;
      return;
    }
    RowMat<T> dcol = W.transpose() * dY;
    col2im_add(dcol.data(), g, dimg);
  });
}

template <class T>
void conv2d_backward_params(const Tensor<T>& grad_out, const Tensor<T>& in, const ConvGeometry& g,
                            Tensor<T>* grad_kernel, Tensor<T>* grad_bias) {
  const std::size_t K = g.k(), P = g.p();
  if (grad_kernel) {
    std::vector<RowMat<T>> partial(g.n);
    parallel_for(g.n, [&](std::size_t n) {
      const T* img = in.raw() + n * in.shape().item();
      std::vector<T> col;
      const T* colp = img;
      if (!is_pointwise(g)) {
        col.resize(K * P);
        im2col(img, g, col.data());
        colp = col.data();
      }
      ConstMatMap<T> dY(grad_out.raw() + n * g.cout * P, static_cast<long>(g.cout),
                        static_cast<long>(P));
      partial[n] = dY * ConstMatMap<T>(colp, static_cast<long>(K), static_cast<long>(P)).transpose();
    });
    MatMap<T> dW(grad_kernel->raw(), static_cast<long>(g.cout), static_cast<long>(K));
    for (const auto& p : partial) dW += p;
  }
  if (grad_bias) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t co = 0; co < g.cout; ++co) {
        const T* row = grad_out.raw() + (n * g.cout + co) * P;
        T s = 0;
        for (std::size_t i = 0; i < P; ++i) s += row[i];
        (*grad_bias)[co] += s;
      }
  }
}

/// Normalized isotropic Gaussian weights, row-major size x size.
inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  if (size == 0 || size % 2 == 0)
    throw ParameterError("gaussian kernel size must be odd and positive, got " +
                         std::to_string(size));
  if (!(sigma > 0.0)) throw ParameterError("gaussian kernel sigma must be positive");
  const long r = static_cast<long>(size / 2);
  std::vector<double> k(size * size);
  for (long i = -r; i <= r; ++i)
    for (long j = -r; j <= r; ++j)
      k[static_cast<std::size_t>((i + r) * static_cast<long>(size) + (j + r))] =
          std::exp(-static_cast<double>(i * i + j * j) / (2.0 * sigma * sigma));
  const double total = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& v : k) v /= total;
  return k;
}

/// Mirror index without edge repetition: -1 -> 1, n -> n-2.
inline std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<long>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

template <class T>
Tensor<T> gaussian_filter_forward(const Tensor<T>& in, const std::vector<double>& k,
                                  std::size_t size) {
  const Shape& s = in.shape();
  const long r = static_cast<long>(size / 2);
  Tensor<T> out(s);
  std::vector<std::size_t> rows(s.h * size), cols(s.w * size);
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t a = 0; a < size; ++a)
      rows[y * size + a] = reflect_index(static_cast<long>(y) + static_cast<long>(a) - r, s.h);
  for (std::size_t x = 0; x < s.w; ++x)
    for (std::size_t b = 0; b < size; ++b)
      cols[x * size + b] = reflect_index(static_cast<long>(x) + static_cast<long>(b) - r, s.w);
  parallel_for(s.n * s.c, [&](std::size_t nc) {
    const T* src = in.raw() + nc * s.plane();
    T* dst = out.raw() + nc * s.plane();
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        double acc = 0.0;
        for (std::size_t a = 0; a < size; ++a) {
          const T* srow = src + rows[y * size + a] * s.w;
          const double* krow = k.data() + a * size;
          for (std::size_t b = 0; b < size; ++b) acc += krow[b] * srow[cols[x * size + b]];
        }
        dst[y * s.w + x] = static_cast<T>(acc);
      }
  });
  return out;
}

template <class T>
void gaussian_filter_backward(const Tensor<T>& grad_out, const std::vector<double>& k,
                              std::size_t size, Tensor<T>& grad_in) {
  const Shape& s = grad_out.shape();
  const long r = static_cast<long>(size / 2);
  parallel_for(s.n * s.c, [&](std::size_t nc) {
    const T* g = grad_out.raw() + nc * s.plane();
    T* dst = grad_in.raw() + nc * s.plane();
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        const T gv = g[y * s.w + x];
        for (std::size_t a = 0; a < size; ++a) {
          const std::size_t yy = reflect_index(static_cast<long>(y) + static_cast<long>(a) - r, s.h);
          for (std::size_t b = 0; b < size; ++b) {
            const std::size_t xx =
                reflect_index(static_cast<long>(x) + static_cast<long>(b) - r, s.w);
            dst[yy * s.w + xx] += static_cast<T>(k[a * size + b]) * gv;
          }
        }
      }
  });
}

} // namespace kernels

// ---------------------------------------------------------------------------
// Differentiable ops.

namespace detail {
template <class T>
Tape<T>* common_tape(const char* op, std::initializer_list<Var<T>> vars) {
  Tape<T>* tape = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw ContractError(std::string(op) + ": invalid operand");
    if (tape && v.tape() != tape) throw ContractError(std::string(op) + ": operands on different tapes");
    tape = v.tape();
  }
  return tape;
}
} // namespace detail

template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride,
              std::size_t padding) {
  Tape<T>* tape = detail::common_tape("conv2d", {input, kernel, bias});
  Tensor<T> out =
      kernels::conv2d_forward(input.value(), kernel.value(), &bias.value(), stride, padding);
  const auto g = kernels::conv_geometry(input.shape(), kernel.shape(), stride, padding);
  return tape->record("conv2d", std::move(out), {input, kernel, bias},
                      [input, kernel, g](const Tensor<T>& dy, GradSink<T>& sink) {
                        if (auto* dx = sink[0]) kernels::conv2d_backward_input(dy, kernel.value(), g, *dx);
                        kernels::conv2d_backward_params(dy, input.value(), g, sink[1], sink[2]);
                      });
}

/// Bias-free convolution.
template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, std::size_t stride, std::size_t padding) {
  Tape<T>* tape = detail::common_tape("conv2d", {input, kernel});
  Tensor<T> out = kernels::conv2d_forward<T>(input.value(), kernel.value(), nullptr, stride, padding);
  const auto g = kernels::conv_geometry(input.shape(), kernel.shape(), stride, padding);
  return tape->record("conv2d", std::move(out), {input, kernel},
                      [input, kernel, g](const Tensor<T>& dy, GradSink<T>& sink) {
                        if (auto* dx = sink[0]) kernels::conv2d_backward_input(dy, kernel.value(), g, *dx);
                        kernels::conv2d_backward_params<T>(dy, input.value(), g, sink[1], nullptr);
                      });
}

/// Fully connected layer over the flattened (C,H,W) extent of each item.
/// weight: (out, C*H*W, 1, 1); bias: (1, out, 1, 1); result: (N, out, 1, 1).
namespace detail {
template <class T>
Var<T> linear_impl(const Var<T>& input, const Var<T>& weight, const Var<T>* bias) {
  Tape<T>* tape = detail::common_tape("linear", {input, weight});
  const Shape& s = input.shape();
  const Shape& ws = weight.shape();
  const std::size_t F = s.item(), O = ws.n;
  if (ws.c * ws.h * ws.w != F)
    throw ShapeError("linear: weight " + ws.str() + " does not match input " + s.str());
  if (bias && bias->value().size() != O)
    throw ShapeError("linear: bias " + bias->shape().str() + " does not match weight " + ws.str());
  using M = kernels::ConstMatMap<T>;
  Tensor<T> out(Shape{s.n, O, 1, 1});
  M X(input.value().raw(), static_cast<long>(s.n), static_cast<long>(F));
  M W(weight.value().raw(), static_cast<long>(O), static_cast<long>(F));
  kernels::MatMap<T> Y(out.raw(), static_cast<long>(s.n), static_cast<long>(O));
  Y.noalias() = X * W.transpose();
  if (bias)
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t o = 0; o < O; ++o) out[n * O + o] += bias->value()[o];
  std::vector<Var<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return tape->record("linear", std::move(out), inputs,
                      [input, weight, F, O, has_bias = bias != nullptr](const Tensor<T>& dy,
                                                                        GradSink<T>& sink) {
                        const std::size_t N = input.shape().n;
                        M dY(dy.raw(), static_cast<long>(N), static_cast<long>(O));
                        if (auto* dx = sink[0]) {
                          M W(weight.value().raw(), static_cast<long>(O), static_cast<long>(F));
                          kernels::MatMap<T>(dx->raw(), static_cast<long>(N), static_cast<long>(F)) +=
                              kernels::RowMat<T>(dY * W);
                        }
                        if (auto* dw = sink[1]) {
                          M X(input.value().raw(), static_cast<long>(N), static_cast<long>(F));
                          kernels::MatMap<T>(dw->raw(), static_cast<long>(O), static_cast<long>(F)) +=
                              kernels::RowMat<T>(dY.transpose() * X);
                        }
                        if (has_bias)
                          if (auto* db = sink[2])
                            for (std::size_t n = 0; n < N; ++n)
                              for (std::size_t o = 0; o < O; ++o) (*db)[o] += dy[n * O + o];
                      });
}
} // namespace detail

template <class T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  return detail::linear_impl(input, weight, &bias);
}

/// Bias-free fully connected layer.
template <class T>
Var<T> linear(const Var<T>& input, const Var<T>& weight) {
  return detail::linear_impl<T>(input, weight, nullptr);
}

template <class T>
Var<T> upsample_nearest(const Var<T>& input, std::size_t factor) {
  if (factor == 0) throw ParameterError("upsample_nearest: factor must be >= 1");
  const Shape s = input.shape();
  const Shape o{s.n, s.c, s.h * factor, s.w * factor};
  Tensor<T> out(o);
  const Tensor<T>& in = input.value();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
    for (std::size_t y = 0; y < o.h; ++y)
      for (std::size_t x = 0; x < o.w; ++x)
        out[nc * o.plane() + y * o.w + x] = in[nc * s.plane() + (y / factor) * s.w + x / factor];
  return input.tape()->record("upsample_nearest", std::move(out), {input},
                              [s, o, factor](const Tensor<T>& dy, GradSink<T>& sink) {
                                auto* dx = sink[0];
                                if (!dx) return;
                                for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
                                  for (std::size_t y = 0; y < o.h; ++y)
                                    for (std::size_t x = 0; x < o.w; ++x)
                                      (*dx)[nc * s.plane() + (y / factor) * s.w + x / factor] +=
                                          dy[nc * o.plane() + y * o.w + x];
                              });
}

/// Non-overlapping factor x factor average pooling.
template <class T>
Var<T> avg_pool(const Var<T>& input, std::size_t factor) {
  if (factor == 0) throw ParameterError("avg_pool: factor must be >= 1");
  const Shape s = input.shape();
  if (s.h % factor != 0 || s.w % factor != 0)
    throw ShapeError("avg_pool: extents of " + s.str() + " not divisible by " + std::to_string(factor));
  const Shape o{s.n, s.c, s.h / factor, s.w / factor};
  const T inv = T(1) / static_cast<T>(factor * factor);
  Tensor<T> out(o);
  const Tensor<T>& in = input.value();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x)
        out[nc * o.plane() + (y / factor) * o.w + x / factor] += in[nc * s.plane() + y * s.w + x];
  for (auto& v : out.data()) v *= inv;
  return input.tape()->record("avg_pool", std::move(out), {input},
                              [s, o, factor, inv](const Tensor<T>& dy, GradSink<T>& sink) {
                                auto* dx = sink[0];
                                if (!dx) return;
                                for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
                                  for (std::size_t y = 0; y < s.h; ++y)
                                    for (std::size_t x = 0; x < s.w; ++x)
                                      (*dx)[nc * s.plane() + y * s.w + x] +=
                                          inv * dy[nc * o.plane() + (y / factor) * o.w + x / factor];
                              });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>* tape = detail::common_tape("add", {a, b});
  require_same_shape("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return tape->record("add", std::move(out), {a, b}, [](const Tensor<T>& dy, GradSink<T>& sink) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* d = sink[k])
        for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>* tape = detail::common_tape("sub", {a, b});
  require_same_shape("sub", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return tape->record("sub", std::move(out), {a, b}, [](const Tensor<T>& dy, GradSink<T>& sink) {
    if (auto* d = sink[0])
      for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i];
    if (auto* d = sink[1])
      for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] -= dy[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>* tape = detail::common_tape("mul", {a, b});
  require_same_shape("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return tape->record("mul", std::move(out), {a, b}, [a, b](const Tensor<T>& dy, GradSink<T>& sink) {
    if (auto* d = sink[0])
      for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i] * b.value()[i];
    if (auto* d = sink[1])
      for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i] * a.value()[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a.value()[i];
  return a.tape()->record("scale", std::move(out), {a},
                          [factor](const Tensor<T>& dy, GradSink<T>& sink) {
                            if (auto* d = sink[0])
                              for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += factor * dy[i];
                          });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = a.value()[i];
    out[i] = v >= T(0) ? v : slope * v;
  }
  return a.tape()->record("leaky_relu", std::move(out), {a},
                          [a, slope](const Tensor<T>& dy, GradSink<T>& sink) {
                            auto* d = sink[0];
                            if (!d) return;
                            for (std::size_t i = 0; i < dy.size(); ++i)
                              (*d)[i] += a.value()[i] >= T(0) ? dy[i] : slope * dy[i];
                          });
}

template <class T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a.value()[i]);
  return a.tape()->record("abs", std::move(out), {a}, [a](const Tensor<T>& dy, GradSink<T>& sink) {
    auto* d = sink[0];
    if (!d) return;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const T v = a.value()[i];
      (*d)[i] += v > T(0) ? dy[i] : (v < T(0) ? -dy[i] : T(0));
    }
  });
}

template <class T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * a.value()[i];
  return a.tape()->record("square", std::move(out), {a}, [a](const Tensor<T>& dy, GradSink<T>& sink) {
    if (auto* d = sink[0])
      for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += T(2) * a.value()[i] * dy[i];
  });
}

/// Concatenation along the channel axis, blocks in argument order.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no operands");
  const Shape first = parts.front().shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw shape_mismatch("concat_channels", first, s);
    if (p.tape() != parts.front().tape()) throw ContractError("concat_channels: operands on different tapes");
    channels += s.c;
  }
  const Shape o{first.n, channels, first.h, first.w};
  Tensor<T> out(o);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Shape& s = p.shape();
    for (std::size_t n = 0; n < s.n; ++n)
      std::copy_n(p.value().raw() + n * s.item(), s.item(), out.raw() + n * o.item() + off * o.plane());
    off += s.c;
  }
  std::vector<Shape> shapes;
  for (const auto& p : parts) shapes.push_back(p.shape());
  return parts.front().tape()->record(
      "concat_channels", std::move(out), parts,
      [o, offsets, shapes](const Tensor<T>& dy, GradSink<T>& sink) {
        for (std::size_t k = 0; k < shapes.size(); ++k) {
          auto* d = sink[k];
          if (!d) continue;
          const Shape& s = shapes[k];
          for (std::size_t n = 0; n < s.n; ++n) {
            const T* src = dy.raw() + n * o.item() + offsets[k] * o.plane();
            T* dst = d->raw() + n * s.item();
            for (std::size_t i = 0; i < s.item(); ++i) dst[i] += src[i];
          }
        }
      });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return a.tape()->record("sum", Tensor<T>::scalar(s), {a}, [](const Tensor<T>& dy, GradSink<T>& sink) {
    if (auto* d = sink[0])
      for (auto& v : d->data()) v += dy[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  if (a.value().size() == 0) throw ShapeError("mean: empty tensor");
  T s = 0;
  for (T v : a.value().data()) s += v;
  const T inv = T(1) / static_cast<T>(a.value().size());
  return a.tape()->record("mean", Tensor<T>::scalar(s * inv), {a},
                          [inv](const Tensor<T>& dy, GradSink<T>& sink) {
                            if (auto* d = sink[0])
                              for (auto& v : d->data()) v += dy[0] * inv;
                          });
}

/// Depthwise Gaussian smoothing with reflect padding; output shape equals
/// input shape.
template <class T>
Var<T> gaussian_filter(const Var<T>& input, std::size_t kernel_size, double sigma) {
  auto k = kernels::gaussian_kernel(kernel_size, sigma);
  Tensor<T> out = kernels::gaussian_filter_forward(input.value(), k, kernel_size);
  return input.tape()->record("gaussian_filter", std::move(out), {input},
                              [k = std::move(k), kernel_size](const Tensor<T>& dy, GradSink<T>& sink) {
                                if (auto* d = sink[0])
                                  kernels::gaussian_filter_backward(dy, k, kernel_size, *d);
                              });
}

/// Tape-free Gaussian smoothing, for metrics.
template <class T>
Tensor<T> gaussian_filter(const Tensor<T>& input, std::size_t kernel_size, double sigma) {
  return kernels::gaussian_filter_forward(input, kernels::gaussian_kernel(kernel_size, sigma),
                                          kernel_size);
}

} // namespace danet
