#include "spre/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace spre {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t c_in, c_out, k_h, k_w;
  std::size_t in_h, in_w, out_h, out_w;
  std::size_t stride, pad;

  std::size_t patch() const { return c_in * k_h * k_w; }
  std::size_t out_plane() const { return out_h * out_w; }
  bool is_pointwise() const {
    return k_h == 1 && k_w == 1 && stride == 1 && pad == 0;
  }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor4<T>& w, const ConvSpec& spec,
                           const FeatureMap<T>& x) {
  if (spec.stride < 1) {
    throw Error(ErrorCode::kInvalidArgument, "conv2d: stride must be >= 1");
  }
  const Shape4& s = w.shape();
  if (x.c() != s.c_in) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv2d: input has " + std::to_string(x.c()) +
                    " channels but weight " + s.to_string() + " expects " +
                    std::to_string(s.c_in));
  }
  ConvGeometry g{};
  g.c_in = s.c_in;
  g.c_out = s.c_out;
  g.k_h = s.k_h;
  g.k_w = s.k_w;
  g.in_h = x.h();
  g.in_w = x.w();
  g.stride = spec.stride;
  g.pad = spec.padding;
  g.out_h = conv_output_size(x.h(), s.k_h, spec);
  g.out_w = conv_output_size(x.w(), s.k_w, spec);
  return g;
}

// cols is (c_in*k_h*k_w) x (out_h*out_w), row-major with row stride ld.
template <typename T>
void im2col(const ConvGeometry& g, const T* img, T* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const T* src = img + c * g.in_h * g.in_w;
    for (std::size_t u = 0; u < g.k_h; ++u) {
      for (std::size_t v = 0; v < g.k_w; ++v) {
        T* row = cols + ((c * g.k_h + u) * g.k_w + v) * ld;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + u) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* line = src + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + v) -
                static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w))
                          ? T{0}
                          : line[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, std::size_t ld, T* img) {
  for (std::size_t c = 0; c < g.c_in; ++c) {
    T* dst = img + c * g.in_h * g.in_w;
    for (std::size_t u = 0; u < g.k_h; ++u) {
      for (std::size_t v = 0; v < g.k_w; ++v) {
        const T* row = cols + ((c * g.k_h + u) * g.k_w + v) * ld;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + u) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          T* line = dst + static_cast<std::size_t>(iy) * g.in_w;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + v) -
                static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            line[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_bias(std::span<const T> bias, std::size_t c_out) {
  if (!bias.empty() && bias.size() != c_out) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv2d: bias has " + std::to_string(bias.size()) +
                    " entries, expected " + std::to_string(c_out));
  }
}

template <typename T>
FeatureMap<T> conv_direct(const Tensor4<T>& w, const ConvGeometry& g,
                          const FeatureMap<T>& x, std::span<const T> bias) {
  FeatureMap<T> y(x.n(), g.c_out, g.out_h, g.out_w);
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t o = 0; o < g.c_out; ++o) {
      const T b0 = bias.empty() ? T{0} : bias[o];
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          T acc{0};
          for (std::size_t i = 0; i < g.c_in; ++i) {
            for (std::size_t u = 0; u < g.k_h; ++u) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(oy * g.stride + u) -
                  static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
              for (std::size_t v = 0; v < g.k_w; ++v) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * g.stride + v) -
                    static_cast<std::ptrdiff_t>(g.pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
                acc += w.at(o, i, u, v) *
                       x.at(b, i, static_cast<std::size_t>(iy),
                            static_cast<std::size_t>(ix));
              }
            }
          }
          y.at(b, o, oy, ox) = acc + b0;
        }
      }
    }
  }
  return y;
}

// Reused per thread; convolutions run back to back on the same shapes.
template <typename T>
RowMat<T>& scratch(int slot, std::size_t rows, std::size_t cols) {
  thread_local RowMat<T> buffers[3];
  RowMat<T>& m = buffers[slot];
  if (static_cast<std::size_t>(m.rows()) != rows ||
      static_cast<std::size_t>(m.cols()) != cols) {
    m.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }
  return m;
}

// Samples per GEMM so that the column buffer stays a few MB.
std::size_t chunk_samples(const ConvGeometry& g, std::size_t n) {
  constexpr std::size_t kMaxColumns = 8192;
  return std::clamp<std::size_t>(kMaxColumns / std::max<std::size_t>(g.out_plane(), 1),
                                 1, std::max<std::size_t>(n, 1));
}

template <typename T>
FeatureMap<T> conv_im2col(const Tensor4<T>& w, const ConvGeometry& g,
                          const FeatureMap<T>& x, std::span<const T> bias) {
  FeatureMap<T> y(x.n(), g.c_out, g.out_h, g.out_w);
  const std::size_t patch = g.patch();
  const std::size_t plane = g.out_plane();
  const std::size_t in_stride = g.c_in * g.in_h * g.in_w;
  Eigen::Map<const RowMat<T>> wm(w.data().data(), g.c_out, patch);

  if (g.is_pointwise()) {
    for (std::size_t b = 0; b < x.n(); ++b) {
      Eigen::Map<const RowMat<T>> cm(x.data().data() + b * in_stride, patch, plane);
      Eigen::Map<RowMat<T>> ym(y.data().data() + b * g.c_out * plane, g.c_out, plane);
      ym.noalias() = wm * cm;
    }
  } else {
    const std::size_t chunk = chunk_samples(g, x.n());
    RowMat<T>& cols = scratch<T>(0, patch, chunk * plane);
    RowMat<T>& out = scratch<T>(1, g.c_out, chunk * plane);
    for (std::size_t b0 = 0; b0 < x.n(); b0 += chunk) {
      const std::size_t nb = std::min(chunk, x.n() - b0);
      const std::size_t ld = nb * plane;
      for (std::size_t b = 0; b < nb; ++b) {
        im2col(g, x.data().data() + (b0 + b) * in_stride, cols.data() + b * plane, ld);
      }
      Eigen::Map<const RowMat<T>> cm(cols.data(), patch, ld);
      auto res = out.leftCols(ld);
      res.noalias() = wm * cm;
      for (std::size_t b = 0; b < nb; ++b) {
        T* dst = y.data().data() + (b0 + b) * g.c_out * plane;
        for (std::size_t o = 0; o < g.c_out; ++o) {
          std::copy_n(out.data() + o * out.cols() + b * plane, plane, dst + o * plane);
        }
      }
    }
  }
  if (!bias.empty()) {
    for (std::size_t b = 0; b < x.n(); ++b) {
      T* dst = y.data().data() + b * g.c_out * plane;
      for (std::size_t o = 0; o < g.c_out; ++o) {
        std::for_each(dst + o * plane, dst + (o + 1) * plane,
                      [v = bias[o]](T& e) { e += v; });
      }
    }
  }
  return y;
}

}  // namespace

std::size_t conv_output_size(std::size_t input, std::size_t kernel,
                             const ConvSpec& spec) {
  if (spec.stride < 1) {
    throw Error(ErrorCode::kInvalidArgument, "conv2d: stride must be >= 1");
  }
  const std::size_t padded = input + 2 * spec.padding;
  if (kernel == 0 || padded < kernel) {
    throw Error(ErrorCode::kInvalidArgument,
                "conv2d: degenerate output size (input " +
                    std::to_string(input) + ", kernel " +
                    std::to_string(kernel) + ", padding " +
                    std::to_string(spec.padding) + ")");
  }
  return (padded - kernel) / spec.stride + 1;
}

template <typename T>
FeatureMap<T> conv2d_forward(const Tensor4<T>& w, const ConvSpec& spec,
                             const FeatureMap<T>& x, std::span<const T> bias,
                             ConvAlgorithm algo) {
  const ConvGeometry g = conv_geometry(w, spec, x);
  check_bias(bias, g.c_out);
  if (algo == ConvAlgorithm::kDirect) return conv_direct(w, g, x, bias);
  return conv_im2col(w, g, x, bias);
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& w, const ConvSpec& spec,
                             const FeatureMap<T>& x,
                             const FeatureMap<T>& grad_out) {
  const ConvGeometry g = conv_geometry(w, spec, x);
  if (grad_out.n() != x.n() || grad_out.c() != g.c_out ||
      grad_out.h() != g.out_h || grad_out.w() != g.out_w) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv2d_backward: grad_out " + grad_out.shape_string() +
                    " does not match forward output (" +
                    std::to_string(x.n()) + "," + std::to_string(g.c_out) +
                    "," + std::to_string(g.out_h) + "," +
                    std::to_string(g.out_w) + ")");
  }
  const std::size_t patch = g.patch();
  const std::size_t plane = g.out_plane();
  const std::size_t in_stride = g.c_in * g.in_h * g.in_w;
  const std::size_t out_stride = g.c_out * plane;

  ConvGrads<T> out{Tensor4<T>(w.shape()), std::vector<T>(g.c_out, T{0}),
                   FeatureMap<T>(x.n(), x.c(), x.h(), x.w())};
  Eigen::Map<const RowMat<T>> wm(w.data().data(), g.c_out, patch);
  Eigen::Map<RowMat<T>> gw(out.grad_w.data().data(), g.c_out, patch);
  for (std::size_t b = 0; b < x.n(); ++b) {
    const T* go = grad_out.data().data() + b * out_stride;
    for (std::size_t o = 0; o < g.c_out; ++o) {
      T acc{0};
      for (std::size_t p = 0; p < plane; ++p) acc += go[o * plane + p];
      out.grad_bias[o] += acc;
    }
  }

  if (g.is_pointwise()) {
    for (std::size_t b = 0; b < x.n(); ++b) {
      Eigen::Map<const RowMat<T>> go(grad_out.data().data() + b * out_stride,
                                     g.c_out, plane);
      Eigen::Map<const RowMat<T>> cm(x.data().data() + b * in_stride, patch, plane);
      gw.noalias() += go * cm.transpose();
      Eigen::Map<RowMat<T>> gxm(out.grad_x.data().data() + b * in_stride, patch, plane);
      gxm.noalias() = wm.transpose() * go;
    }
    return out;
  }

  const std::size_t chunk = chunk_samples(g, x.n());
  RowMat<T>& cols = scratch<T>(0, patch, chunk * plane);
  RowMat<T>& go_all = scratch<T>(1, g.c_out, chunk * plane);
  RowMat<T>& grad_cols = scratch<T>(2, patch, chunk * plane);
  for (std::size_t b0 = 0; b0 < x.n(); b0 += chunk) {
    const std::size_t nb = std::min(chunk, x.n() - b0);
    const std::size_t ld = nb * plane;
    for (std::size_t b = 0; b < nb; ++b) {
      im2col(g, x.data().data() + (b0 + b) * in_stride, cols.data() + b * plane, ld);
      const T* src = grad_out.data().data() + (b0 + b) * out_stride;
      for (std::size_t o = 0; o < g.c_out; ++o) {
        std::copy_n(src + o * plane, plane, go_all.data() + o * go_all.cols() + b * plane);
      }
    }
    Eigen::Map<const RowMat<T>> cm(cols.data(), patch, ld);
    const auto go = go_all.leftCols(ld);
    gw.noalias() += go * cm.transpose();
    auto gc = grad_cols.leftCols(ld);
    gc.noalias() = wm.transpose() * go;
    for (std::size_t b = 0; b < nb; ++b) {
      col2im_add(g, grad_cols.data() + b * plane, grad_cols.cols(),
                 out.grad_x.data().data() + (b0 + b) * in_stride);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
BatchNormParams<T>::BatchNormParams(std::size_t channels)
    : gamma(channels, T{1}),
      beta(channels, T{0}),
      running_mean(channels, T{0}),
      running_var(channels, T{1}) {}

template <typename T>
void BatchNormParams<T>::validate() const {
  const std::size_t c = gamma.size();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c) {
    throw Error(ErrorCode::kInvalidArgument,
                "batchnorm: parameter vectors must all have length " +
                    std::to_string(c));
  }
  if (!(eps >= T{0})) {
    throw Error(ErrorCode::kInvalidArgument, "batchnorm: eps must be >= 0");
  }
  if (!(momentum > T{0} && momentum < T{1})) {
    throw Error(ErrorCode::kInvalidArgument,
                "batchnorm: momentum must lie in (0,1)");
  }
  for (T v : running_var) {
    if (!(v >= T{0})) {
      throw Error(ErrorCode::kInvalidArgument,
                  "batchnorm: running_var entries must be >= 0");
    }
  }
}

namespace {

template <typename T>
void check_bn_channels(const BatchNormParams<T>& p, const FeatureMap<T>& x) {
  p.validate();
  if (p.channels() != x.c()) {
    throw Error(ErrorCode::kShapeMismatch,
                "batchnorm: " + std::to_string(p.channels()) +
                    " channels vs input " + x.shape_string());
  }
}

}  // namespace

template <typename T>
FeatureMap<T> batchnorm_eval(const BatchNormParams<T>& p,
                             const FeatureMap<T>& x) {
  check_bn_channels(p, x);
  FeatureMap<T> y(x.n(), x.c(), x.h(), x.w());
  const std::size_t plane = x.plane();
  for (std::size_t c = 0; c < x.c(); ++c) {
    const T denom = p.running_var[c] + p.eps;
    if (!(denom > T{0})) {
      throw Error(ErrorCode::kInvalidArgument,
                  "batchnorm: running_var + eps must be positive (channel " +
                      std::to_string(c) + ")");
    }
    const T scale = p.gamma[c] / std::sqrt(denom);
    for (std::size_t b = 0; b < x.n(); ++b) {
      const T* src = x.data().data() + (b * x.c() + c) * plane;
      T* dst = y.data().data() + (b * x.c() + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        dst[i] = scale * (src[i] - p.running_mean[c]) + p.beta[c];
      }
    }
  }
  return y;
}

template <typename T>
FeatureMap<T> batchnorm_forward(BatchNormParams<T>& p, const FeatureMap<T>& x,
                                Mode mode, BatchNormCache<T>* cache) {
  if (mode == Mode::kEval) return batchnorm_eval(p, x);

  check_bn_channels(p, x);
  const std::size_t plane = x.plane();
  const std::size_t count = x.n() * plane;
  if (count < 2) {
    throw Error(ErrorCode::kInvalidArgument,
                "batchnorm: train mode needs batch*h*w >= 2, got " +
                    std::to_string(count));
  }
  if (!(p.eps > T{0})) {
    throw Error(ErrorCode::kInvalidArgument,
                "batchnorm: train mode requires eps > 0");
  }

  FeatureMap<T> y(x.n(), x.c(), x.h(), x.w());
  FeatureMap<T> x_hat(x.n(), x.c(), x.h(), x.w());
  std::vector<T> inv_std(x.c());
  const T inv_count = T{1} / static_cast<T>(count);

  for (std::size_t c = 0; c < x.c(); ++c) {
    T sum{0};
    for (std::size_t b = 0; b < x.n(); ++b) {
      const T* src = x.data().data() + (b * x.c() + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += src[i];
    }
    const T mean = sum * inv_count;
    T sq{0};
    for (std::size_t b = 0; b < x.n(); ++b) {
      const T* src = x.data().data() + (b * x.c() + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T d = src[i] - mean;
        sq += d * d;
      }
    }
    const T var = sq * inv_count;
    const T istd = T{1} / std::sqrt(var + p.eps);
    inv_std[c] = istd;
    for (std::size_t b = 0; b < x.n(); ++b) {
      const std::size_t off = (b * x.c() + c) * plane;
      const T* src = x.data().data() + off;
      T* xh = x_hat.data().data() + off;
      T* dst = y.data().data() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (src[i] - mean) * istd;
        dst[i] = p.gamma[c] * xh[i] + p.beta[c];
      }
    }
    const T unbiased = sq / static_cast<T>(count - 1);
    p.running_mean[c] = (T{1} - p.momentum) * p.running_mean[c] + p.momentum * mean;
    p.running_var[c] = (T{1} - p.momentum) * p.running_var[c] + p.momentum * unbiased;
  }
  ++p.num_batches_tracked;

  if (cache != nullptr) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->valid = true;
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormParams<T>& p,
                                     const BatchNormCache<T>& cache,
                                     const FeatureMap<T>& grad_out) {
  if (!cache.valid) {
    throw Error(ErrorCode::kMissingCache,
                "batchnorm_backward: no train-mode forward cache");
  }
  const FeatureMap<T>& xh = cache.x_hat;
  if (!xh.same_shape(grad_out) || p.channels() != xh.c()) {
    throw Error(ErrorCode::kShapeMismatch,
                "batchnorm_backward: grad_out " + grad_out.shape_string() +
                    " vs cached " + xh.shape_string());
  }
  const std::size_t plane = xh.plane();
  const T count = static_cast<T>(xh.n() * plane);
  BatchNormGrads<T> g{FeatureMap<T>(xh.n(), xh.c(), xh.h(), xh.w()),
                      std::vector<T>(xh.c(), T{0}),
                      std::vector<T>(xh.c(), T{0})};
  for (std::size_t c = 0; c < xh.c(); ++c) {
    T sum_g{0};
    T sum_gx{0};
    for (std::size_t b = 0; b < xh.n(); ++b) {
      const std::size_t off = (b * xh.c() + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += grad_out[off + i];
        sum_gx += grad_out[off + i] * xh[off + i];
      }
    }
    g.grad_beta[c] = sum_g;
    g.grad_gamma[c] = sum_gx;
    const T k = p.gamma[c] * cache.inv_std[c] / count;
    for (std::size_t b = 0; b < xh.n(); ++b) {
      const std::size_t off = (b * xh.c() + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        g.grad_x[off + i] =
            k * (count * grad_out[off + i] - sum_g - xh[off + i] * sum_gx);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
FeatureMap<T> relu_forward(const FeatureMap<T>& x) {
  FeatureMap<T> y(x.n(), x.c(), x.h(), x.w());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
FeatureMap<T> relu_backward(const FeatureMap<T>& x,
                            const FeatureMap<T>& grad_out) {
  if (!x.same_shape(grad_out)) {
    throw Error(ErrorCode::kShapeMismatch,
                "relu_backward: " + x.shape_string() + " vs " +
                    grad_out.shape_string());
  }
  FeatureMap<T> g(x.n(), x.c(), x.h(), x.w());
  for (std::size_t i = 0; i < x.size(); ++i) {
    g[i] = x[i] > T{0} ? grad_out[i] : T{0};
  }
  return g;
}

template <typename T>
Matrix<T> global_avg_pool_forward(const FeatureMap<T>& x) {
  Matrix<T> y(x.n(), x.c());
  const std::size_t plane = x.plane();
  const T inv = T{1} / static_cast<T>(plane);
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T* src = x.data().data() + (b * x.c() + c) * plane;
      T s{0};
      for (std::size_t i = 0; i < plane; ++i) s += src[i];
      y(b, c) = s * inv;
    }
  }
  return y;
}

template <typename T>
FeatureMap<T> global_avg_pool_backward(const Matrix<T>& grad_out,
                                       std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) {
    throw Error(ErrorCode::kShapeMismatch,
                "global_avg_pool_backward: empty spatial extent");
  }
  FeatureMap<T> g(grad_out.rows, grad_out.cols, h, w);
  const std::size_t plane = h * w;
  const T inv = T{1} / static_cast<T>(plane);
  for (std::size_t b = 0; b < grad_out.rows; ++b) {
    for (std::size_t c = 0; c < grad_out.cols; ++c) {
      T* dst = g.data().data() + (b * grad_out.cols + c) * plane;
      std::fill(dst, dst + plane, grad_out(b, c) * inv);
    }
  }
  return g;
}

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& weight, std::span<const T> bias,
                         const Matrix<T>& x) {
  if (x.cols != weight.cols || (!bias.empty() && bias.size() != weight.rows)) {
    throw Error(ErrorCode::kShapeMismatch,
                "linear: input width " + std::to_string(x.cols) +
                    ", weight (" + std::to_string(weight.rows) + "," +
                    std::to_string(weight.cols) + "), bias " +
                    std::to_string(bias.size()));
  }
  Matrix<T> y(x.rows, weight.rows);
  Eigen::Map<const RowMat<T>> wm(weight.data.data(), weight.rows, weight.cols);
  Eigen::Map<const RowMat<T>> xm(x.data.data(), x.rows, x.cols);
  Eigen::Map<RowMat<T>> ym(y.data.data(), y.rows, y.cols);
  ym.noalias() = xm * wm.transpose();
  if (!bias.empty()) {
    for (std::size_t r = 0; r < y.rows; ++r) {
      for (std::size_t c = 0; c < y.cols; ++c) y(r, c) += bias[c];
    }
  }
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Matrix<T>& weight, const Matrix<T>& x,
                               const Matrix<T>& grad_out) {
  if (x.cols != weight.cols || grad_out.cols != weight.rows ||
      grad_out.rows != x.rows) {
    throw Error(ErrorCode::kShapeMismatch, "linear_backward: shape mismatch");
  }
  LinearGrads<T> g{Matrix<T>(weight.rows, weight.cols),
                   std::vector<T>(weight.rows, T{0}),
                   Matrix<T>(x.rows, x.cols)};
  Eigen::Map<const RowMat<T>> wm(weight.data.data(), weight.rows, weight.cols);
  Eigen::Map<const RowMat<T>> xm(x.data.data(), x.rows, x.cols);
  Eigen::Map<const RowMat<T>> go(grad_out.data.data(), grad_out.rows,
                                 grad_out.cols);
  Eigen::Map<RowMat<T>>(g.grad_weight.data.data(), weight.rows, weight.cols)
      .noalias() = go.transpose() * xm;
  Eigen::Map<RowMat<T>>(g.grad_x.data.data(), x.rows, x.cols).noalias() =
      go * wm;
  for (std::size_t r = 0; r < grad_out.rows; ++r) {
    for (std::size_t c = 0; c < grad_out.cols; ++c) {
      g.grad_bias[c] += grad_out(r, c);
    }
  }
  return g;
}

template <typename T>
LossAndGrad<T> softmax_cross_entropy(const Matrix<T>& logits,
                                     std::span<const int> labels) {
  if (labels.size() != logits.rows || logits.rows == 0) {
    throw Error(ErrorCode::kShapeMismatch,
                "softmax_cross_entropy: " + std::to_string(labels.size()) +
                    " labels for " + std::to_string(logits.rows) + " rows");
  }
  LossAndGrad<T> out{T{0}, Matrix<T>(logits.rows, logits.cols)};
  const T inv_n = T{1} / static_cast<T>(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= logits.cols) {
      throw Error(ErrorCode::kInvalidArgument,
                  "softmax_cross_entropy: label " + std::to_string(label) +
                      " out of range");
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < logits.cols; ++c) mx = std::max(mx, logits(r, c));
    T z{0};
    for (std::size_t c = 0; c < logits.cols; ++c) z += std::exp(logits(r, c) - mx);
    const T log_z = std::log(z) + mx;
    out.loss += (log_z - logits(r, static_cast<std::size_t>(label))) * inv_n;
    for (std::size_t c = 0; c < logits.cols; ++c) {
      T prob = std::exp(logits(r, c) - log_z);
      if (c == static_cast<std::size_t>(label)) prob -= T{1};
      out.grad_logits(r, c) = prob * inv_n;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
SgdOptimizer<T>::SgdOptimizer(SgdOptions options) : options_(options) {
  set_lr(options.lr);
}

template <typename T>
void SgdOptimizer<T>::set_lr(double lr) {
  if (!(lr >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "sgd: learning rate must be >= 0");
  }
  options_.lr = lr;
}

template <typename T>
void SgdOptimizer<T>::step(std::span<const ParamSlot<T>> slots) {
  if (buffers_.empty()) {
    buffers_.reserve(slots.size());
    for (const auto& s : slots) buffers_.emplace_back(s.value.size(), T{0});
  }
  if (buffers_.size() != slots.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "sgd: parameter count changed between steps");
  }
  const T lr = static_cast<T>(options_.lr);
  const T mom = static_cast<T>(options_.momentum);
  const T wd = static_cast<T>(options_.weight_decay);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const auto& s = slots[k];
    auto& buf = buffers_[k];
    if (s.value.size() != s.grad.size() || s.value.size() != buf.size()) {
      throw Error(ErrorCode::kShapeMismatch,
                  "sgd: slot " + std::to_string(k) + " has " +
                      std::to_string(s.value.size()) + " values, " +
                      std::to_string(s.grad.size()) + " gradients");
    }
    for (std::size_t i = 0; i < s.value.size(); ++i) {
      T g = s.grad[i];
      if (s.decay) g += wd * s.value[i];
      buf[i] = mom * buf[i] + g;
      s.value[i] -= lr * buf[i];
    }
  }
}

#define SPRE_INSTANTIATE_NN(T)                                                 \
  template FeatureMap<T> conv2d_forward(const Tensor4<T>&, const ConvSpec&,    \
                                        const FeatureMap<T>&,                  \
                                        std::span<const T>, ConvAlgorithm);    \
  template ConvGrads<T> conv2d_backward(const Tensor4<T>&, const ConvSpec&,    \
                                        const FeatureMap<T>&,                  \
                                        const FeatureMap<T>&);                 \
  template struct BatchNormParams<T>;                                          \
  template FeatureMap<T> batchnorm_forward(BatchNormParams<T>&,                \
                                           const FeatureMap<T>&, Mode,         \
                                           BatchNormCache<T>*);                \
  template FeatureMap<T> batchnorm_eval(const BatchNormParams<T>&,             \
                                        const FeatureMap<T>&);                 \
  template BatchNormGrads<T> batchnorm_backward(const BatchNormParams<T>&,     \
                                                const BatchNormCache<T>&,      \
                                                const FeatureMap<T>&);         \
  template FeatureMap<T> relu_forward(const FeatureMap<T>&);                   \
  template FeatureMap<T> relu_backward(const FeatureMap<T>&,                   \
                                       const FeatureMap<T>&);                  \
  template Matrix<T> global_avg_pool_forward(const FeatureMap<T>&);            \
  template FeatureMap<T> global_avg_pool_backward(const Matrix<T>&,            \
                                                  std::size_t, std::size_t);   \
  template Matrix<T> linear_forward(const Matrix<T>&, std::span<const T>,      \
                                    const Matrix<T>&);                         \
  template LinearGrads<T> linear_backward(const Matrix<T>&, const Matrix<T>&,  \
                                          const Matrix<T>&);                   \
  template LossAndGrad<T> softmax_cross_entropy(const Matrix<T>&,              \
                                                std::span<const int>);         \
  template class SgdOptimizer<T>;

SPRE_INSTANTIATE_NN(float)
SPRE_INSTANTIATE_NN(double)

#undef SPRE_INSTANTIATE_NN

}  // namespace spre
