#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include "cavinet/common.hpp"
#include "cavinet/rng.hpp"
#include "cavinet/tensor.hpp"

namespace cavinet {

// Differentiable layer kernels. Each kernel is a plain value type holding its
// hyperparameters and parameter tensors; forward/backward are free functions.
// Spatial kernels accept a single image (C,H,W) or a batch (N,C,H,W); dense
// kernels accept a vector (d) or a batch (N,d). Elementwise kernels accept any
// rank. Output spatial size follows out = floor((in + 2*pad - k) / stride) + 1.
//
// backward consumes the cache recorded by the matching forward call and the
// gradient of a downstream scalar with respect to the forward output; it
// returns the input gradient and, for parameterized kernels, appends weight
// and bias gradients (summed over the batch) to grad_params.

enum class KernelKind { kConv2D, kMaxPool2D, kReLU, kAffine, kDropout, kSigmoid, kSoftmax };

inline const char* kind_name(KernelKind k) {
  switch (k) {
    case KernelKind::kConv2D: return "conv2d";
    case KernelKind::kMaxPool2D: return "maxpool2d";
    case KernelKind::kReLU: return "relu";
    case KernelKind::kAffine: return "affine";
    case KernelKind::kDropout: return "dropout";
    case KernelKind::kSigmoid: return "sigmoid";
    case KernelKind::kSoftmax: return "softmax";
  }
  return "?";
}

template <class Scalar>
struct Conv2D {
  Index in_channels = 0, out_channels = 0;
  Index ksize = 0, stride = 1, pad = 0;
  Tensor<Scalar> weight;  // (out, in, k, k)
  Tensor<Scalar> bias;    // (out)

  static Conv2D make(Index in_c, Index out_c, Index ksize, Index stride = 1,
                     Index pad = 0) {
    if (in_c <= 0 || out_c <= 0 || ksize <= 0 || stride <= 0 || pad < 0)
      raise<ConfigError>("conv2d: bad hyperparameters");
    Conv2D c;
    c.in_channels = in_c;
    c.out_channels = out_c;
    c.ksize = ksize;
    c.stride = stride;
    c.pad = pad;
    c.weight = Tensor<Scalar>::zeros({out_c, in_c, ksize, ksize});
    c.bias = Tensor<Scalar>::zeros({out_c});
    return c;
  }
};

template <class Scalar>
struct MaxPool2D {
  Index ksize = 2, stride = 2;
};

template <class Scalar>
struct ReLU {};

template <class Scalar>
struct Affine {
  Tensor<Scalar> weight;  // (out, in)
  Tensor<Scalar> bias;    // (out)

  static Affine make(Index in_dim, Index out_dim) {
    if (in_dim <= 0 || out_dim <= 0) raise<ConfigError>("affine: bad dimensions");
    Affine a;
    a.weight = Tensor<Scalar>::zeros({out_dim, in_dim});
    a.bias = Tensor<Scalar>::zeros({out_dim});
    return a;
  }
  Index in_dim() const { return weight.dim(1); }
  Index out_dim() const { return weight.dim(0); }
};

// Inverted dropout: units are zeroed with probability p at train time and
// survivors scaled by 1/(1-p); eval mode is the identity map exactly.
template <class Scalar>
struct Dropout {
  double p = 0.5;
};

template <class Scalar>
struct Sigmoid {};

// Softmax over the last axis; leading axes are treated as batch.
template <class Scalar>
struct Softmax {};

template <class Scalar>
using LayerKernel = std::variant<Conv2D<Scalar>, MaxPool2D<Scalar>, ReLU<Scalar>,
                                 Affine<Scalar>, Dropout<Scalar>, Sigmoid<Scalar>,
                                 Softmax<Scalar>>;

template <class Scalar>
KernelKind kind(const LayerKernel<Scalar>& k) {
  return static_cast<KernelKind>(k.index());
}

// Recorded intermediates from one forward call, consumed by backward.
template <class Scalar>
struct KernelCache {
  bool valid = false;
  Tensor<Scalar> input;
  Tensor<Scalar> output;            // kept for sigmoid/softmax backward
  Tensor<Scalar> mask;              // dropout multipliers
  std::vector<Index> argmax;        // maxpool winners, flat input offsets
};

namespace detail {

template <class Scalar>
[[noreturn]] void shape_reject(const char* kernel, const Shape& expected,
                               const Shape& actual) {
  raise<ShapeError>(kernel, ": expected input shape ", shape_str(expected),
                    ", got ", shape_str(actual));
}

inline Index conv_out_extent(Index in, Index k, Index stride, Index pad) {
  Index span = in + 2 * pad - k;
  if (span < 0) return 0;
  return span / stride + 1;
}

// Splits (N,C,H,W)/(C,H,W) into a batch count plus per-image shape.
inline bool split_spatial(const Shape& s, Index& n, Index& c, Index& h, Index& w) {
  if (s.size() == 3) {
    n = 1; c = s[0]; h = s[1]; w = s[2];
    return true;
  }
  if (s.size() == 4) {
    n = s[0]; c = s[1]; h = s[2]; w = s[3];
    return true;
  }
  return false;
}

inline bool split_dense(const Shape& s, Index& n, Index& d) {
  if (s.size() == 1) {
    n = 1; d = s[0];
    return true;
  }
  if (s.size() == 2) {
    n = s[0]; d = s[1];
    return true;
  }
  return false;
}

// Gathers conv patches of one image into columns: row (c*k+ky)*k+kx, column
// oy*ow+ox. Out-of-bounds (padding) entries are zero.
template <class Scalar>
void im2col(const Scalar* x, Index c, Index h, Index w, Index k, Index stride,
            Index pad, Index oh, Index ow,
            Eigen::Ref<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> col) {
  for (Index ci = 0; ci < c; ++ci) {
    const Scalar* plane = x + ci * h * w;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        Index row = (ci * k + ky) * k + kx;
        for (Index oy = 0; oy < oh; ++oy) {
          Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            col.block(row, oy * ow, 1, ow).setZero();
            continue;
          }
          const Scalar* src = plane + iy * w;
          for (Index ox = 0; ox < ow; ++ox) {
            Index ix = ox * stride - pad + kx;
            col(row, oy * ow + ox) = (ix >= 0 && ix < w) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

// Scatter-add of column gradients back onto the image grid.
template <class Scalar>
void col2im(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& col, Index c,
            Index h, Index w, Index k, Index stride, Index pad, Index oh, Index ow,
            Scalar* gx) {
  for (Index ci = 0; ci < c; ++ci) {
    Scalar* plane = gx + ci * h * w;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        Index row = (ci * k + ky) * k + kx;
        for (Index oy = 0; oy < oh; ++oy) {
          Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          Scalar* dst = plane + iy * w;
          for (Index ox = 0; ox < ow; ++ox) {
            Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += col(row, oy * ow + ox);
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// forward_shape: output shape as a pure function of kind, hyper and input shape.

template <class Scalar>
Shape forward_shape(const Conv2D<Scalar>& k, const Shape& in) {
  Index n, c, h, w;
  if (!detail::split_spatial(in, n, c, h, w) || c != k.in_channels)
    detail::shape_reject<Scalar>("conv2d", {k.in_channels, -1, -1}, in);
  Index oh = detail::conv_out_extent(h, k.ksize, k.stride, k.pad);
  Index ow = detail::conv_out_extent(w, k.ksize, k.stride, k.pad);
  if (oh <= 0 || ow <= 0)
    raise<ShapeError>("conv2d: input ", shape_str(in), " too small for kernel ",
                      k.ksize, " stride ", k.stride, " pad ", k.pad);
  if (in.size() == 3) return {k.out_channels, oh, ow};
  return {n, k.out_channels, oh, ow};
}

template <class Scalar>
Shape forward_shape(const MaxPool2D<Scalar>& k, const Shape& in) {
  Index n, c, h, w;
  if (!detail::split_spatial(in, n, c, h, w))
    detail::shape_reject<Scalar>("maxpool2d", {-1, -1, -1}, in);
  Index oh = detail::conv_out_extent(h, k.ksize, k.stride, 0);
  Index ow = detail::conv_out_extent(w, k.ksize, k.stride, 0);
  if (oh <= 0 || ow <= 0)
    raise<ShapeError>("maxpool2d: input ", shape_str(in), " too small for window ",
                      k.ksize);
  if (in.size() == 3) return {c, oh, ow};
  return {n, c, oh, ow};
}

template <class Scalar>
Shape forward_shape(const ReLU<Scalar>&, const Shape& in) { return in; }

template <class Scalar>
Shape forward_shape(const Affine<Scalar>& k, const Shape& in) {
  Index n, d;
  if (!detail::split_dense(in, n, d) || d != k.in_dim())
    detail::shape_reject<Scalar>("affine", {k.in_dim()}, in);
  if (in.size() == 1) return {k.out_dim()};
  return {n, k.out_dim()};
}

template <class Scalar>
Shape forward_shape(const Dropout<Scalar>&, const Shape& in) { return in; }

template <class Scalar>
Shape forward_shape(const Sigmoid<Scalar>&, const Shape& in) { return in; }

template <class Scalar>
Shape forward_shape(const Softmax<Scalar>&, const Shape& in) {
  if (in.empty()) raise<ShapeError>("softmax: scalar input");
  return in;
}

template <class Scalar>
Shape forward_shape(const LayerKernel<Scalar>& k, const Shape& in) {
  return std::visit([&](const auto& kk) { return forward_shape(kk, in); }, k);
}

// ---------------------------------------------------------------------------
// forward

template <class Scalar>
Tensor<Scalar> forward(const Conv2D<Scalar>& k, const Tensor<Scalar>& x, Mode,
                       RandomStream*, KernelCache<Scalar>* cache) {
  Shape out_shape = forward_shape(k, x.shape());
  Index n, c, h, w;
  detail::split_spatial(x.shape(), n, c, h, w);
  Index oh = out_shape[out_shape.size() - 2];
  Index ow = out_shape[out_shape.size() - 1];
  Index patch = k.in_channels * k.ksize * k.ksize;

  Tensor<Scalar> y(out_shape);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> col(patch, oh * ow);
  auto wmat = k.weight.matrix(k.out_channels, patch);
  for (Index i = 0; i < n; ++i) {
    detail::im2col<Scalar>(x.data() + i * c * h * w, c, h, w, k.ksize, k.stride,
                           k.pad, oh, ow, col);
    typename Tensor<Scalar>::MatrixMap ymat(y.data() + i * k.out_channels * oh * ow,
                                            k.out_channels, oh * ow);
    ymat.noalias() = wmat * col;
    ymat.colwise() += k.bias.vector();
  }
  if (cache) {
    cache->valid = true;
    cache->input = x;
  }
  return y;
}

template <class Scalar>
Tensor<Scalar> forward(const MaxPool2D<Scalar>& k, const Tensor<Scalar>& x, Mode,
                       RandomStream*, KernelCache<Scalar>* cache) {
  Shape out_shape = forward_shape(k, x.shape());
  Index n, c, h, w;
  detail::split_spatial(x.shape(), n, c, h, w);
  Index oh = out_shape[out_shape.size() - 2];
  Index ow = out_shape[out_shape.size() - 1];

  Tensor<Scalar> y(out_shape);
  std::vector<Index> argmax(static_cast<std::size_t>(y.size()));
  Index oi = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index ci = 0; ci < c; ++ci) {
      const Scalar* plane = x.data() + (i * c + ci) * h * w;
      Index plane_off = (i * c + ci) * h * w;
      for (Index oy = 0; oy < oh; ++oy) {
        for (Index ox = 0; ox < ow; ++ox) {
          Index y0 = oy * k.stride, x0 = ox * k.stride;
          Scalar best = plane[y0 * w + x0];
          Index best_off = y0 * w + x0;
          for (Index ky = 0; ky < k.ksize; ++ky) {
            for (Index kx = 0; kx < k.ksize; ++kx) {
              Index off = (y0 + ky) * w + (x0 + kx);
              if (plane[off] > best) {  // first-seen wins ties
                best = plane[off];
                best_off = off;
              }
            }
          }
          y[oi] = best;
          argmax[static_cast<std::size_t>(oi)] = plane_off + best_off;
          ++oi;
        }
      }
    }
  }
  if (cache) {
    cache->valid = true;
    cache->input = x;
    cache->argmax = std::move(argmax);
  }
  return y;
}

template <class Scalar>
Tensor<Scalar> forward(const ReLU<Scalar>&, const Tensor<Scalar>& x, Mode,
                       RandomStream*, KernelCache<Scalar>* cache) {
  Tensor<Scalar> y = x;
  y.array() = y.array().max(Scalar(0));
  if (cache) {
    cache->valid = true;
    cache->input = x;
  }
  return y;
}

template <class Scalar>
Tensor<Scalar> forward(const Affine<Scalar>& k, const Tensor<Scalar>& x, Mode,
                       RandomStream*, KernelCache<Scalar>* cache) {
  Shape out_shape = forward_shape(k, x.shape());
  Index n, d;
  detail::split_dense(x.shape(), n, d);
  Tensor<Scalar> y(out_shape);
  auto wmat = k.weight.matrix(k.out_dim(), k.in_dim());
  auto xmat = x.matrix(n, d);
  auto ymat = y.matrix(n, k.out_dim());
  ymat.noalias() = xmat * wmat.transpose();
  ymat.rowwise() += k.bias.vector().transpose();
  if (cache) {
    cache->valid = true;
    cache->input = x;
  }
  return y;
}

template <class Scalar>
Tensor<Scalar> forward(const Dropout<Scalar>& k, const Tensor<Scalar>& x, Mode mode,
                       RandomStream* rng, KernelCache<Scalar>* cache) {
  if (k.p < 0.0 || k.p >= 1.0)
    raise<ConfigError>("dropout: p must lie in [0, 1), got ", k.p);
  if (mode == Mode::kEval) {
    if (cache) {
      cache->valid = true;
      cache->input = x;
      cache->mask = Tensor<Scalar>();  // identity
    }
    return x;
  }
  if (!rng)
    raise<UsageError>("dropout: train-mode forward requires a random stream");
  Tensor<Scalar> mask(x.shape());
  const Scalar keep_scale = Scalar(1.0 / (1.0 - k.p));
  for (Index i = 0; i < mask.size(); ++i)
    mask[i] = rng->uniform() < k.p ? Scalar(0) : keep_scale;
  Tensor<Scalar> y = x;
  y.array() *= mask.array();
  if (cache) {
    cache->valid = true;
    cache->input = x;
    cache->mask = std::move(mask);
  }
  return y;
}

template <class Scalar>
Tensor<Scalar> forward(const Sigmoid<Scalar>&, const Tensor<Scalar>& x, Mode,
                       RandomStream*, KernelCache<Scalar>* cache) {
  Tensor<Scalar> y = x;
  y.array() = Scalar(1) / (Scalar(1) + (-y.array()).exp());
  if (cache) {
    cache->valid = true;
    cache->output = y;
  }
  return y;
}

template <class Scalar>
Tensor<Scalar> forward(const Softmax<Scalar>&, const Tensor<Scalar>& x, Mode,
                       RandomStream*, KernelCache<Scalar>* cache) {
  Index width = x.dim(x.rank() - 1);
  Index rows = x.size() / width;
  Tensor<Scalar> y = x;
  auto m = y.matrix(rows, width);
  for (Index r = 0; r < rows; ++r) {
    Scalar mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
  if (cache) {
    cache->valid = true;
    cache->output = y;
  }
  return y;
}

template <class Scalar>
Tensor<Scalar> forward(const LayerKernel<Scalar>& k, const Tensor<Scalar>& x,
                       Mode mode = Mode::kEval, RandomStream* rng = nullptr,
                       KernelCache<Scalar>* cache = nullptr) {
  return std::visit(
      [&](const auto& kk) { return forward(kk, x, mode, rng, cache); }, k);
}

// ---------------------------------------------------------------------------
// backward

namespace detail {
template <class Scalar>
void require_cache(const KernelCache<Scalar>& cache, const char* kernel) {
  if (!cache.valid)
    raise<UsageError>(kernel, ": backward called without a matching forward");
}

template <class Scalar>
void require_grad_shape(const Shape& expected, const Tensor<Scalar>& g,
                        const char* kernel) {
  if (g.shape() != expected)
    raise<ShapeError>(kernel, ": grad shape ", shape_str(g.shape()),
                      " does not match forward output ", shape_str(expected));
}
}  // namespace detail

template <class Scalar>
Tensor<Scalar> backward(const Conv2D<Scalar>& k, const KernelCache<Scalar>& cache,
                        const Tensor<Scalar>& grad_out, Mode,
                        std::vector<Tensor<Scalar>>* grad_params) {
  detail::require_cache(cache, "conv2d");
  const Tensor<Scalar>& x = cache.input;
  Shape out_shape = forward_shape(k, x.shape());
  detail::require_grad_shape(out_shape, grad_out, "conv2d");

  Index n, c, h, w;
  detail::split_spatial(x.shape(), n, c, h, w);
  Index oh = out_shape[out_shape.size() - 2];
  Index ow = out_shape[out_shape.size() - 1];
  Index patch = k.in_channels * k.ksize * k.ksize;

  Tensor<Scalar> gx(x.shape());
  Tensor<Scalar> gw = Tensor<Scalar>::zeros(k.weight.shape());
  Tensor<Scalar> gb = Tensor<Scalar>::zeros(k.bias.shape());
  auto wmat = k.weight.matrix(k.out_channels, patch);
  auto gwmat = gw.matrix(k.out_channels, patch);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> col(patch, oh * ow);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> gcol(patch, oh * ow);
  for (Index i = 0; i < n; ++i) {
    detail::im2col<Scalar>(x.data() + i * c * h * w, c, h, w, k.ksize, k.stride,
                           k.pad, oh, ow, col);
    typename Tensor<Scalar>::ConstMatrixMap gymat(
        grad_out.data() + i * k.out_channels * oh * ow, k.out_channels, oh * ow);
    gwmat.noalias() += gymat * col.transpose();
    gb.vector() += gymat.rowwise().sum();
    gcol.noalias() = wmat.transpose() * gymat;
    detail::col2im<Scalar>(gcol, c, h, w, k.ksize, k.stride, k.pad, oh, ow,
                           gx.data() + i * c * h * w);
  }
  if (grad_params) {
    grad_params->push_back(std::move(gw));
    grad_params->push_back(std::move(gb));
  }
  return gx;
}

template <class Scalar>
Tensor<Scalar> backward(const MaxPool2D<Scalar>& k, const KernelCache<Scalar>& cache,
                        const Tensor<Scalar>& grad_out, Mode,
                        std::vector<Tensor<Scalar>>*) {
  detail::require_cache(cache, "maxpool2d");
  detail::require_grad_shape(forward_shape(k, cache.input.shape()), grad_out,
                             "maxpool2d");
  Tensor<Scalar> gx(cache.input.shape());
  for (Index i = 0; i < grad_out.size(); ++i)
    gx[cache.argmax[static_cast<std::size_t>(i)]] += grad_out[i];
  return gx;
}

template <class Scalar>
Tensor<Scalar> backward(const ReLU<Scalar>&, const KernelCache<Scalar>& cache,
                        const Tensor<Scalar>& grad_out, Mode,
                        std::vector<Tensor<Scalar>>*) {
  detail::require_cache(cache, "relu");
  detail::require_grad_shape(cache.input.shape(), grad_out, "relu");
  Tensor<Scalar> gx = grad_out;
  // subgradient 0 at x == 0
  gx.array() *= (cache.input.array() > Scalar(0)).template cast<Scalar>();
  return gx;
}

template <class Scalar>
Tensor<Scalar> backward(const Affine<Scalar>& k, const KernelCache<Scalar>& cache,
                        const Tensor<Scalar>& grad_out, Mode,
                        std::vector<Tensor<Scalar>>* grad_params) {
  detail::require_cache(cache, "affine");
  const Tensor<Scalar>& x = cache.input;
  detail::require_grad_shape(forward_shape(k, x.shape()), grad_out, "affine");
  Index n, d;
  detail::split_dense(x.shape(), n, d);
  auto xmat = x.matrix(n, d);
  auto gymat = grad_out.matrix(n, k.out_dim());
  auto wmat = k.weight.matrix(k.out_dim(), k.in_dim());

  Tensor<Scalar> gx(x.shape());
  gx.matrix(n, d).noalias() = gymat * wmat;
  if (grad_params) {
    Tensor<Scalar> gw(k.weight.shape());
    gw.matrix(k.out_dim(), k.in_dim()).noalias() = gymat.transpose() * xmat;
    Tensor<Scalar> gb(k.bias.shape());
    gb.vector() = gymat.colwise().sum().transpose();
    grad_params->push_back(std::move(gw));
    grad_params->push_back(std::move(gb));
  }
  return gx;
}

template <class Scalar>
Tensor<Scalar> backward(const Dropout<Scalar>&, const KernelCache<Scalar>& cache,
                        const Tensor<Scalar>& grad_out, Mode mode,
                        std::vector<Tensor<Scalar>>*) {
  detail::require_cache(cache, "dropout");
  detail::require_grad_shape(cache.input.shape(), grad_out, "dropout");
  if (mode == Mode::kEval || cache.mask.empty()) return grad_out;
  Tensor<Scalar> gx = grad_out;
  gx.array() *= cache.mask.array();
  return gx;
}

template <class Scalar>
Tensor<Scalar> backward(const Sigmoid<Scalar>&, const KernelCache<Scalar>& cache,
                        const Tensor<Scalar>& grad_out, Mode,
                        std::vector<Tensor<Scalar>>*) {
  detail::require_cache(cache, "sigmoid");
  detail::require_grad_shape(cache.output.shape(), grad_out, "sigmoid");
  Tensor<Scalar> gx = grad_out;
  gx.array() *= cache.output.array() * (Scalar(1) - cache.output.array());
  return gx;
}

template <class Scalar>
Tensor<Scalar> backward(const Softmax<Scalar>&, const KernelCache<Scalar>& cache,
                        const Tensor<Scalar>& grad_out, Mode,
                        std::vector<Tensor<Scalar>>*) {
  detail::require_cache(cache, "softmax");
  detail::require_grad_shape(cache.output.shape(), grad_out, "softmax");
  const Tensor<Scalar>& y = cache.output;
  Index width = y.dim(y.rank() - 1);
  Index rows = y.size() / width;
  Tensor<Scalar> gx(y.shape());
  auto ym = y.matrix(rows, width);
  auto gym = grad_out.matrix(rows, width);
  auto gxm = gx.matrix(rows, width);
  for (Index r = 0; r < rows; ++r) {
    Scalar dot = ym.row(r).dot(gym.row(r));
    gxm.row(r) = ym.row(r).array() * (gym.row(r).array() - dot);
  }
  return gx;
}

template <class Scalar>
Tensor<Scalar> backward(const LayerKernel<Scalar>& k, const KernelCache<Scalar>& cache,
                        const Tensor<Scalar>& grad_out, Mode mode = Mode::kEval,
                        std::vector<Tensor<Scalar>>* grad_params = nullptr) {
  return std::visit(
      [&](const auto& kk) { return backward(kk, cache, grad_out, mode, grad_params); },
      k);
}

// Mutable views of a kernel's parameter tensors, weight before bias.
template <class Scalar>
std::vector<Tensor<Scalar>*> kernel_params(LayerKernel<Scalar>& k) {
  if (auto* c = std::get_if<Conv2D<Scalar>>(&k)) return {&c->weight, &c->bias};
  if (auto* a = std::get_if<Affine<Scalar>>(&k)) return {&a->weight, &a->bias};
  return {};
}

template <class Scalar>
std::vector<const Tensor<Scalar>*> kernel_params(const LayerKernel<Scalar>& k) {
  if (const auto* c = std::get_if<Conv2D<Scalar>>(&k)) return {&c->weight, &c->bias};
  if (const auto* a = std::get_if<Affine<Scalar>>(&k)) return {&a->weight, &a->bias};
  return {};
}

// ---------------------------------------------------------------------------
// Kernel stacks: an ordered pipeline of kernels with a recorded trace. Both
// the convolutional branches and the fully-connected heads are stacks.

template <class Scalar>
using StackTrace = std::vector<KernelCache<Scalar>>;

template <class Scalar>
Shape stack_forward_shape(const std::vector<LayerKernel<Scalar>>& layers, Shape in) {
  for (const auto& k : layers) in = forward_shape(k, in);
  return in;
}

template <class Scalar>
Tensor<Scalar> stack_forward(const std::vector<LayerKernel<Scalar>>& layers,
                             Tensor<Scalar> x, Mode mode, RandomStream* rng = nullptr,
                             StackTrace<Scalar>* trace = nullptr) {
  if (trace) {
    trace->clear();
    trace->resize(layers.size());
  }
  for (std::size_t i = 0; i < layers.size(); ++i)
    x = forward(layers[i], x, mode, rng, trace ? &(*trace)[i] : nullptr);
  return x;
}

// Walks the stack in reverse; per-layer parameter gradients are appended to
// grad_params[i] in the same weight-then-bias order as kernel_params. An
// optional hook can transform the gradient flowing between layers (used by the
// rectified-saliency pass).
template <class Scalar>
Tensor<Scalar> stack_backward(
    const std::vector<LayerKernel<Scalar>>& layers, const StackTrace<Scalar>& trace,
    Tensor<Scalar> grad, Mode mode,
    std::vector<std::vector<Tensor<Scalar>>>* grad_params = nullptr,
    const std::function<void(Tensor<Scalar>&)>& hook = nullptr) {
  if (trace.size() != layers.size())
    raise<UsageError>("stack_backward: trace does not match layer count");
  if (grad_params) {
    grad_params->clear();
    grad_params->resize(layers.size());
  }
  for (std::size_t i = layers.size(); i-- > 0;) {
    grad = backward(layers[i], trace[i], grad, mode,
                    grad_params ? &(*grad_params)[i] : nullptr);
    if (hook) hook(grad);
  }
  return grad;
}

}  // namespace cavinet
