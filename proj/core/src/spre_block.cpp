#include "spre/spre_block.hpp"

#include <utility>

namespace spre {
namespace {

enum class Side { kDenser, kSparser };

// Copies b at every location whose reference density is on `side` of the
// N:M density. The comparison is exact in integers:
//   SS(b_u) < 1 - n/m  <=>  count * m > n * planes.
Mask4 select_locations(const Mask4& b, const Mask4& b_u,
                       const NMPattern& pattern, Side side) {
  require_same_shape(b.shape(), b_u.shape(), "build_spre_mask");
  const Shape4& s = b.shape();
  const auto counts = spatial_counts(b_u);
  const std::size_t planes = s.c_out * s.c_in;
  std::vector<bool> chosen(s.spatial());
  for (std::size_t uv = 0; uv < s.spatial(); ++uv) {
    const std::size_t lhs = counts[uv] * pattern.m();
    const std::size_t rhs = pattern.n() * planes;
    chosen[uv] = side == Side::kDenser ? lhs > rhs : lhs < rhs;
  }
  Mask4 out = Mask4::zeros(s);
  for (std::size_t pq = 0; pq < planes; ++pq) {
    for (std::size_t uv = 0; uv < s.spatial(); ++uv) {
      const std::size_t flat = pq * s.spatial() + uv;
      if (chosen[uv] && b[flat]) out.set(flat, true);
    }
  }
  return out;
}

template <typename T>
void add_into(FeatureMap<T>& acc, const FeatureMap<T>& x) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

}  // namespace

std::string_view variant_name(SpReVariant v) {
  switch (v) {
    case SpReVariant::kSpRe: return "spre";
    case SpReVariant::kSame: return "same";
    case SpReVariant::kInverse: return "inverse";
    case SpReVariant::kNone: return "none";
  }
  return "none";
}

SpReVariant parse_variant(std::string_view name) {
  if (name == "spre") return SpReVariant::kSpRe;
  if (name == "same") return SpReVariant::kSame;
  if (name == "inverse") return SpReVariant::kInverse;
  if (name == "none") return SpReVariant::kNone;
  throw Error(ErrorCode::kInvalidArgument,
              "unknown variant '" + std::string(name) +
                  "' (expected spre|same|inverse|none)");
}

std::string_view rule_name(MainMaskRule r) {
  switch (r) {
    case MainMaskRule::kNM: return "nm";
    case MainMaskRule::kMagnitude: return "magnitude";
    case MainMaskRule::kUniformSpatial: return "uniform_spatial";
    case MainMaskRule::kDense: return "dense";
  }
  return "nm";
}

MainMaskRule parse_rule(std::string_view name) {
  if (name == "nm") return MainMaskRule::kNM;
  if (name == "magnitude") return MainMaskRule::kMagnitude;
  if (name == "uniform_spatial") return MainMaskRule::kUniformSpatial;
  if (name == "dense") return MainMaskRule::kDense;
  throw Error(ErrorCode::kInvalidArgument,
              "unknown mask rule '" + std::string(name) +
                  "' (expected nm|magnitude|uniform_spatial|dense)");
}

Mask4 build_spre_mask(const Mask4& b, const Mask4& b_u, const NMPattern& pattern) {
  return select_locations(b, b_u, pattern, Side::kDenser);
}

Mask4 build_variant_mask(const Mask4& b, const Mask4& b_u,
                         const NMPattern& pattern, SpReVariant variant) {
  require_same_shape(b.shape(), b_u.shape(), "build_variant_mask");
  switch (variant) {
    case SpReVariant::kSpRe: return select_locations(b, b_u, pattern, Side::kDenser);
    case SpReVariant::kInverse: return select_locations(b, b_u, pattern, Side::kSparser);
    case SpReVariant::kSame: return b;
    case SpReVariant::kNone: return Mask4::zeros(b.shape());
  }
  return Mask4::zeros(b.shape());
}

template <typename T>
void SpReBlock<T>::check_invariants() const {
  auto fail = [this](const std::string& what) {
    throw Error(ErrorCode::kInvariant, "block '" + name + "': " + what);
  };
  require_same_shape(w_main.shape(), b_main.shape(), "SpReBlock main branch");
  switch (rule) {
    case MainMaskRule::kNM:
      if (!satisfies_nm(b_main, pattern)) {
        fail("main mask violates " + pattern.to_string());
      }
      break;
    case MainMaskRule::kMagnitude: {
      const std::size_t zeros = b_main.size() - count_nonzero(b_main);
      if (zeros != std::min(b_main.size(),
                            round_half_up(pattern.sparsity() * b_main.size()))) {
        fail("magnitude mask has " + std::to_string(zeros) + " zeros");
      }
      break;
    }
    case MainMaskRule::kUniformSpatial: {
      const Shape4& s = b_main.shape();
      const double bound = 1.0 / static_cast<double>(s.c_out * s.c_in);
      if (spatial_sparsity(b_main).spread() > bound + 1e-12) {
        fail("uniform-spatial mask spread exceeds 1/(c_out*c_in)");
      }
      break;
    }
    case MainMaskRule::kDense:
      if (count_nonzero(b_main) != b_main.size()) fail("dense mask has zeros");
      break;
  }
  if (is_pointwise() && has_extra()) fail("1x1 kernel carries an extra branch");
  if (has_extra()) {
    require_same_shape(w_extra.shape(), w_main.shape(), "SpReBlock extra branch");
    if (!subset_of(b_extra, b_main)) fail("extra mask is not a subset of main mask");
  }
}

template <typename T>
void recompute_masks(SpReBlock<T>& block) {
  const double p = block.pattern.sparsity();
  switch (block.rule) {
    case MainMaskRule::kNM:
      block.b_main = nm_project(block.w_main, block.pattern, block.name);
      break;
    case MainMaskRule::kMagnitude:
      block.b_main = magnitude_mask(block.w_main, p);
      break;
    case MainMaskRule::kUniformSpatial:
      block.b_main = uniform_spatial_mask(block.w_main, p);
      break;
    case MainMaskRule::kDense:
      block.b_main = Mask4::ones(block.w_main.shape());
      break;
  }
  block.b_ref = magnitude_mask(block.w_main, p);
  if (block.has_extra()) {
    block.b_extra =
        build_variant_mask(block.b_main, block.b_ref, block.pattern, block.variant);
  }
}

template <typename T>
SpReBlock<T> make_spre_block(std::string name, Tensor4<T> w_main,
                             const SpReBlockOptions& options,
                             std::mt19937_64& rng) {
  SpReBlock<T> block;
  block.name = std::move(name);
  block.pattern = options.pattern;
  block.spec = options.spec;
  block.rule = options.rule;
  block.schedule = options.schedule;
  if (options.refresh_period < 1) {
    throw Error(ErrorCode::kInvalidArgument, "refresh_period must be >= 1");
  }
  block.refresh_period = options.refresh_period;
  block.variant = options.variant;
  if (block.rule != MainMaskRule::kNM && block.variant != SpReVariant::kNone) {
    throw Error(ErrorCode::kInvalidArgument,
                "block '" + block.name + "': extra branch requires the nm rule");
  }
  const Shape4 shape = w_main.shape();
  if (shape.k_h == 1 && shape.k_w == 1) block.variant = SpReVariant::kNone;

  block.w_main = std::move(w_main);
  block.bn_main = BatchNormParams<T>(shape.c_out);
  if (block.has_extra()) {
    block.w_extra = Tensor4<T>(shape);
    if (options.extra_init == ExtraInit::kSmallRandom) {
      std::normal_distribution<double> dist(0.0, options.extra_init_scale);
      for (auto& v : block.w_extra.data()) v = static_cast<T>(dist(rng));
    }
    block.bn_extra = BatchNormParams<T>(shape.c_out);
    std::fill(block.bn_extra.gamma.begin(), block.bn_extra.gamma.end(),
              static_cast<T>(options.extra_bn_gamma));
  }
  recompute_masks(block);
  block.check_invariants();
  return block;
}

template <typename T>
bool refresh_masks(SpReBlock<T>& block, std::size_t step) {
  if (block.schedule == MaskSchedule::kFrozen) return false;
  if (step % block.refresh_period != 0) return false;
  recompute_masks(block);
  return true;
}

template <typename T>
FeatureMap<T> spre_forward(SpReBlock<T>& block, const FeatureMap<T>& x,
                           Mode mode, SpReCache<T>* cache) {
  if (mode == Mode::kEval) return spre_eval(block, x);

  SpReCache<T> local;
  SpReCache<T>& c = cache != nullptr ? *cache : local;
  c.valid = false;
  c.masked_main = apply_mask(block.w_main, block.b_main);
  c.conv_main = conv2d_forward(c.masked_main, block.spec, x);
  FeatureMap<T> y = batchnorm_forward(block.bn_main, c.conv_main, Mode::kTrain,
                                      &c.bn_main);
  if (block.has_extra()) {
    c.masked_extra = apply_mask(block.w_extra, block.b_extra);
    c.conv_extra = conv2d_forward(c.masked_extra, block.spec, x);
    add_into(y, batchnorm_forward(block.bn_extra, c.conv_extra, Mode::kTrain,
                                  &c.bn_extra));
  }
  if (cache != nullptr) {
    c.x = x;
    c.valid = true;
  }
  return y;
}

template <typename T>
FeatureMap<T> spre_eval(const SpReBlock<T>& block, const FeatureMap<T>& x) {
  FeatureMap<T> y = batchnorm_eval(
      block.bn_main,
      conv2d_forward(apply_mask(block.w_main, block.b_main), block.spec, x));
  if (block.has_extra()) {
    add_into(y, batchnorm_eval(block.bn_extra,
                               conv2d_forward(apply_mask(block.w_extra, block.b_extra),
                                              block.spec, x)));
  }
  return y;
}

template <typename T>
SpReGrads<T> spre_backward_ste(const SpReBlock<T>& block,
                               const SpReCache<T>& cache,
                               const FeatureMap<T>& grad_out, T decay) {
  if (!cache.valid) {
    throw Error(ErrorCode::kMissingCache,
                "spre_backward_ste: block '" + block.name +
                    "' has no train-mode forward cache");
  }
  SpReGrads<T> g;
  auto bn_m = batchnorm_backward(block.bn_main, cache.bn_main, grad_out);
  auto conv_m = conv2d_backward(cache.masked_main, block.spec, cache.x, bn_m.grad_x);
  g.grad_gamma_main = std::move(bn_m.grad_gamma);
  g.grad_beta_main = std::move(bn_m.grad_beta);
  g.grad_w_main = Tensor4<T>(block.w_main.shape());
  for (std::size_t i = 0; i < g.grad_w_main.size(); ++i) {
    g.grad_w_main[i] = block.b_main[i] ? conv_m.grad_w[i] : decay * block.w_main[i];
  }
  g.grad_x = std::move(conv_m.grad_x);

  if (block.has_extra()) {
    auto bn_e = batchnorm_backward(block.bn_extra, cache.bn_extra, grad_out);
    auto conv_e =
        conv2d_backward(cache.masked_extra, block.spec, cache.x, bn_e.grad_x);
    g.grad_gamma_extra = std::move(bn_e.grad_gamma);
    g.grad_beta_extra = std::move(bn_e.grad_beta);
    g.grad_w_extra = Tensor4<T>(block.w_extra.shape());
    for (std::size_t i = 0; i < g.grad_w_extra.size(); ++i) {
      g.grad_w_extra[i] = block.b_extra[i] ? conv_e.grad_w[i] : T{0};
    }
    add_into(g.grad_x, conv_e.grad_x);
  }
  return g;
}

#define SPRE_INSTANTIATE_BLOCK(T)                                              \
  template struct SpReBlock<T>;                                                \
  template SpReBlock<T> make_spre_block(std::string, Tensor4<T>,               \
                                        const SpReBlockOptions&,               \
                                        std::mt19937_64&);                     \
  template void recompute_masks(SpReBlock<T>&);                                \
  template bool refresh_masks(SpReBlock<T>&, std::size_t);                     \
  template FeatureMap<T> spre_forward(SpReBlock<T>&, const FeatureMap<T>&,     \
                                      Mode, SpReCache<T>*);                    \
  template FeatureMap<T> spre_eval(const SpReBlock<T>&, const FeatureMap<T>&); \
  template SpReGrads<T> spre_backward_ste(const SpReBlock<T>&,                 \
                                          const SpReCache<T>&,                 \
                                          const FeatureMap<T>&, T);

SPRE_INSTANTIATE_BLOCK(float)
SPRE_INSTANTIATE_BLOCK(double)

#undef SPRE_INSTANTIATE_BLOCK

}  // namespace spre
