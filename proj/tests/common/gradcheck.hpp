#pragma once

// Central finite-difference oracles for every backward pass. Each check
// draws a random problem from `seed`, computes the analytic gradient and
// compares every entry with (L(p + h) - L(p - h)) / 2h at 64-bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "spre/nn.hpp"
#include "spre/spre_block.hpp"

namespace spre::gradcheck {

struct Result {
  double max_rel = 0.0;
  std::size_t checked = 0;

  void merge(const Result& o) {
    max_rel = std::max(max_rel, o.max_rel);
    checked += o.checked;
  }
};

inline constexpr double kStep = 1e-5;

/// |a - b| / max(|a|, |b|) with a 1e-7 floor so that entries that are both
/// essentially zero compare by absolute difference.
inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({1e-7, std::abs(a), std::abs(b)});
}

/// Compares `analytic` with central differences of `loss` over `params`.
inline Result compare(std::span<double> params, std::span<const double> analytic,
                      const std::function<double()>& loss) {
  Result r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + kStep;
    const double up = loss();
    params[i] = saved - kStep;
    const double down = loss();
    params[i] = saved;
    const double numeric = (up - down) / (2 * kStep);
    r.max_rel = std::max(r.max_rel, rel_error(analytic[i], numeric));
    ++r.checked;
  }
  return r;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline void fill_uniform(std::span<double> v, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (auto& x : v) x = d(rng);
}

template <typename Map>
double dot(const Map& a, const Map& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * r[i];
  return s;
}

inline Result check_conv(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t k = pick(rng, 1, 3);
  const ConvSpec spec{pick(rng, 1, 2), pick(rng, 0, k / 2 + 1)};
  Tensor4<double> w({pick(rng, 1, 4), pick(rng, 1, 4), k, k});
  FeatureMap<double> x(pick(rng, 1, 2), w.shape().c_in, pick(rng, k, 6), pick(rng, k, 6));
  std::vector<double> bias(w.shape().c_out);
  fill_uniform(w.data(), rng);
  fill_uniform(x.data(), rng);
  fill_uniform(bias, rng);
  auto y = conv2d_forward<double>(w, spec, x, bias);
  FeatureMap<double> r(y.n(), y.c(), y.h(), y.w());
  fill_uniform(r.data(), rng);

  auto grads = conv2d_backward(w, spec, x, r);
  auto loss = [&] { return dot(conv2d_forward<double>(w, spec, x, bias), r); };
  Result out = compare(w.data(), grads.grad_w.data(), loss);
  out.merge(compare(x.data(), grads.grad_x.data(), loss));
  out.merge(compare(bias, grads.grad_bias, loss));
  return out;
}

inline Result check_batchnorm(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t c = pick(rng, 1, 4);
  FeatureMap<double> x(pick(rng, 2, 4), c, pick(rng, 1, 4), pick(rng, 1, 4));
  fill_uniform(x.data(), rng, 2.0);
  BatchNormParams<double> p(c);
  fill_uniform(p.gamma, rng, 1.5);
  fill_uniform(p.beta, rng);
  FeatureMap<double> r(x.n(), c, x.h(), x.w());
  fill_uniform(r.data(), rng);

  BatchNormParams<double> q = p;
  BatchNormCache<double> cache;
  batchnorm_forward(q, x, Mode::kTrain, &cache);
  auto grads = batchnorm_backward(p, cache, r);
  auto loss = [&] {
    BatchNormParams<double> tmp = p;
    return dot(batchnorm_forward(tmp, x, Mode::kTrain), r);
  };
  Result out = compare(x.data(), grads.grad_x.data(), loss);
  out.merge(compare(p.gamma, grads.grad_gamma, loss));
  out.merge(compare(p.beta, grads.grad_beta, loss));
  return out;
}

inline Result check_linear(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t in = pick(rng, 1, 8);
  const std::size_t outs = pick(rng, 1, 6);
  Matrix<double> w(outs, in), x(pick(rng, 1, 4), in);
  std::vector<double> b(outs);
  fill_uniform(w.data, rng);
  fill_uniform(x.data, rng);
  fill_uniform(b, rng);
  Matrix<double> r(x.rows, outs);
  fill_uniform(r.data, rng);
  auto grads = linear_backward(w, x, r);
  auto loss = [&] { return dot(linear_forward<double>(w, b, x).data, r.data); };
  Result out = compare(w.data, grads.grad_weight.data, loss);
  out.merge(compare(x.data, grads.grad_x.data, loss));
  out.merge(compare(b, grads.grad_bias, loss));
  return out;
}

inline Result check_cross_entropy(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t classes = pick(rng, 2, 8);
  Matrix<double> logits(pick(rng, 1, 5), classes);
  fill_uniform(logits.data, rng, 3.0);
  std::vector<int> labels(logits.rows);
  for (auto& l : labels) l = static_cast<int>(pick(rng, 0, classes - 1));
  auto analytic = softmax_cross_entropy<double>(logits, labels).grad_logits;
  auto loss = [&] { return softmax_cross_entropy<double>(logits, labels).loss; };
  return compare(logits.data, analytic.data, loss);
}

/// Straight-through path of a two-branch block. The analytic gradient is
/// checked against the loss sum(R * y) + lambda/2 * ||(1 - B) * W||^2 with
/// masks held fixed.
inline Result check_ste(std::uint64_t seed, double lambda) {
  std::mt19937_64 rng(seed);
  static const std::pair<std::size_t, std::size_t> patterns[] = {{1, 2}, {2, 4}, {1, 4}, {3, 4}};
  const auto [n, m] = patterns[pick(rng, 0, 3)];
  const std::size_t k = pick(rng, 0, 3) == 0 ? 1 : 3;
  Tensor4<double> w({pick(rng, 1, 3), m * pick(rng, 1, 2), k, k});
  fill_uniform(w.data(), rng);
  SpReBlockOptions opts;
  opts.pattern = NMPattern(n, m);
  opts.spec = ConvSpec{pick(rng, 1, 2), k / 2};
  const SpReVariant variants[] = {SpReVariant::kSpRe, SpReVariant::kSame,
                                  SpReVariant::kInverse, SpReVariant::kNone};
  opts.variant = variants[pick(rng, 0, 3)];
  opts.extra_init_scale = 0.5;
  auto block = make_spre_block("gc", w, opts, rng);
  fill_uniform(block.bn_main.gamma, rng, 1.5);
  fill_uniform(block.bn_main.beta, rng);
  if (block.has_extra()) {
    fill_uniform(block.bn_extra.gamma, rng, 1.5);
    fill_uniform(block.bn_extra.beta, rng);
  }
  FeatureMap<double> x(pick(rng, 2, 3), w.shape().c_in, pick(rng, 3, 5), pick(rng, 3, 5));
  fill_uniform(x.data(), rng);

  SpReBlock<double> probe = block;
  SpReCache<double> cache;
  auto y = spre_forward(probe, x, Mode::kTrain, &cache);
  FeatureMap<double> r(y.n(), y.c(), y.h(), y.w());
  fill_uniform(r.data(), rng);
  auto grads = spre_backward_ste(block, cache, r, lambda);

  auto loss = [&] {
    SpReBlock<double> tmp = block;
    double l = dot(spre_forward(tmp, x, Mode::kTrain), r);
    double pruned = 0.0;
    for (std::size_t i = 0; i < block.w_main.size(); ++i) {
      if (!block.b_main[i]) pruned += block.w_main[i] * block.w_main[i];
    }
    return l + 0.5 * lambda * pruned;
  };
  Result out = compare(block.w_main.data(), grads.grad_w_main.data(), loss);
  out.merge(compare(x.data(), grads.grad_x.data(), loss));
  out.merge(compare(block.bn_main.gamma, grads.grad_gamma_main, loss));
  out.merge(compare(block.bn_main.beta, grads.grad_beta_main, loss));
  if (block.has_extra()) {
    out.merge(compare(block.w_extra.data(), grads.grad_w_extra.data(), loss));
    out.merge(compare(block.bn_extra.gamma, grads.grad_gamma_extra, loss));
    out.merge(compare(block.bn_extra.beta, grads.grad_beta_extra, loss));
  }
  return out;
}

}  // namespace spre::gradcheck
