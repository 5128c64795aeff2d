#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spre/tensor.hpp"

namespace spre {

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Stride/padding of a 2-D cross-correlation (groups = 1, no dilation).
struct ConvSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

enum class ConvAlgorithm { kDirect, kIm2col };

/// Output spatial size; throws kInvalidArgument when it would be < 1.
std::size_t conv_output_size(std::size_t input, std::size_t kernel,
                             const ConvSpec& spec);

/// Cross-correlation of x with w; `bias` is either empty or one value per
/// output channel. Both algorithms compute the same map.
template <typename T>
FeatureMap<T> conv2d_forward(const Tensor4<T>& w, const ConvSpec& spec,
                             const FeatureMap<T>& x,
                             std::span<const T> bias = {},
                             ConvAlgorithm algo = ConvAlgorithm::kIm2col);

template <typename T>
struct ConvGrads {
  Tensor4<T> grad_w;
  std::vector<T> grad_bias;  // per output channel, always populated
  FeatureMap<T> grad_x;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& w, const ConvSpec& spec,
                             const FeatureMap<T>& x,
                             const FeatureMap<T>& grad_out);

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class Mode { kTrain, kEval };

template <typename T>
struct BatchNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
  // Number of train-mode batches folded into the running statistics.
  std::uint64_t num_batches_tracked = 0;

  BatchNormParams() = default;
  /// gamma = 1, beta = 0, running mean 0, running var 1.
  explicit BatchNormParams(std::size_t channels);

  std::size_t channels() const noexcept { return gamma.size(); }
  /// Throws kInvalidArgument when lengths disagree, eps < 0, momentum is
  /// outside (0, 1) or a variance is negative. Train mode additionally needs
  /// eps > 0.
  void validate() const;
};

/// Values cached by a train-mode forward pass for the backward pass.
template <typename T>
struct BatchNormCache {
  FeatureMap<T> x_hat;
  std::vector<T> inv_std;
  bool valid = false;
};

/// Train mode normalizes with batch statistics and updates the running stats
/// (running <- (1 - momentum) * running + momentum * batch_stat, variance
/// unbiased). Eval mode applies the running statistics.
template <typename T>
FeatureMap<T> batchnorm_forward(BatchNormParams<T>& p, const FeatureMap<T>& x,
                                Mode mode, BatchNormCache<T>* cache = nullptr);

/// Eval-mode forward that never touches the parameters.
template <typename T>
FeatureMap<T> batchnorm_eval(const BatchNormParams<T>& p,
                             const FeatureMap<T>& x);

template <typename T>
struct BatchNormGrads {
  FeatureMap<T> grad_x;
  std::vector<T> grad_gamma;
  std::vector<T> grad_beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormParams<T>& p,
                                     const BatchNormCache<T>& cache,
                                     const FeatureMap<T>& grad_out);

// ---------------------------------------------------------------------------
// Pointwise / pooling / head
// ---------------------------------------------------------------------------

template <typename T>
FeatureMap<T> relu_forward(const FeatureMap<T>& x);

/// Gradient w.r.t. the relu input; the derivative at 0 is taken as 0.
template <typename T>
FeatureMap<T> relu_backward(const FeatureMap<T>& x,
                            const FeatureMap<T>& grad_out);

/// (n, c, h, w) -> (n, c) matrix of spatial means.
template <typename T>
Matrix<T> global_avg_pool_forward(const FeatureMap<T>& x);

template <typename T>
FeatureMap<T> global_avg_pool_backward(const Matrix<T>& grad_out,
                                       std::size_t h, std::size_t w);

/// y = x * W^T + b with W of shape (out, in).
template <typename T>
Matrix<T> linear_forward(const Matrix<T>& weight, std::span<const T> bias,
                         const Matrix<T>& x);

template <typename T>
struct LinearGrads {
  Matrix<T> grad_weight;
  std::vector<T> grad_bias;
  Matrix<T> grad_x;
};

template <typename T>
LinearGrads<T> linear_backward(const Matrix<T>& weight, const Matrix<T>& x,
                               const Matrix<T>& grad_out);

template <typename T>
struct LossAndGrad {
  T loss = T{0};
  Matrix<T> grad_logits;
};

/// Mean softmax cross-entropy over the batch, with its logits gradient.
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const Matrix<T>& logits,
                                     std::span<const int> labels);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// One trainable tensor and its gradient, viewed as flat spans.
template <typename T>
struct ParamSlot {
  std::span<T> value;
  std::span<const T> grad;
  bool decay = true;  // whether weight decay applies
};

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// SGD with a per-parameter momentum buffer:
///   g' = g + wd * p;  buf = momentum * buf + g';  p -= lr * buf.
/// Buffers are created on the first step and bound to slot order.
template <typename T>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdOptions options);

  void set_lr(double lr);
  double lr() const noexcept { return options_.lr; }

  void step(std::span<const ParamSlot<T>> slots);

 private:
  SgdOptions options_;
  std::vector<std::vector<T>> buffers_;
};

}  // namespace spre
