#include "spre/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace spre {
namespace {

void check_sparsity(double p, const char* what) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument,
                std::string(what) + ": sparsity must lie in [0,1), got " +
                    std::to_string(p));
  }
}

// Orders candidate positions for pruning: smaller magnitude first, then
// smaller flat index.
template <typename T>
struct PruneOrder {
  std::span<const T> w;
  bool operator()(std::size_t a, std::size_t b) const {
    const T ma = std::abs(w[a]);
    const T mb = std::abs(w[b]);
    if (ma != mb) return ma < mb;
    return a < b;
  }
};

}  // namespace

NMPattern::NMPattern(std::size_t n, std::size_t m) : n_(n), m_(m) {
  if (n < 1 || n > m) {
    throw Error(ErrorCode::kInvalidArgument,
                "NMPattern: need 1 <= n <= m, got " + std::to_string(n) + ":" +
                    std::to_string(m));
  }
}

double NMPattern::sparsity() const noexcept {
  return 1.0 - static_cast<double>(n_) / static_cast<double>(m_);
}

std::string NMPattern::to_string() const {
  return std::to_string(n_) + ":" + std::to_string(m_);
}

double SparsityProfile::spread() const {
  if (values.empty()) return 0.0;
  auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return *hi - *lo;
}

std::size_t round_half_up(double x) {
  return static_cast<std::size_t>(std::floor(x + 0.5));
}

template <typename T>
Mask4 magnitude_mask(const Tensor4<T>& w, double sparsity) {
  check_sparsity(sparsity, "magnitude_mask");
  const std::size_t total = w.size();
  const std::size_t prune = std::min(total, round_half_up(sparsity * total));
  Mask4 mask = Mask4::ones(w.shape());
  if (prune == 0) return mask;

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  PruneOrder<T> cmp{w.data()};
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(prune - 1),
                   order.end(), cmp);
  // The comparator is a strict total order, so the first `prune` entries after
  // partitioning are exactly the `prune` smallest.
  for (std::size_t k = 0; k < prune; ++k) mask.set(order[k], false);
  return mask;
}

template <typename T>
Mask4 nm_project(const Tensor4<T>& w, const NMPattern& pattern,
                 const std::string& layer_name) {
  const Shape4& s = w.shape();
  const std::size_t m = pattern.m();
  const std::size_t n = pattern.n();
  if (s.c_in % m != 0) {
    throw Error(ErrorCode::kIndivisibleChannels,
                "nm_project: layer '" + layer_name + "' has c_in = " +
                    std::to_string(s.c_in) + ", not divisible by m = " +
                    std::to_string(m));
  }
  Mask4 mask = Mask4::zeros(s);
  std::vector<std::size_t> idx(m);
  for (std::size_t o = 0; o < s.c_out; ++o) {
    for (std::size_t g = 0; g < s.c_in / m; ++g) {
      for (std::size_t u = 0; u < s.k_h; ++u) {
        for (std::size_t v = 0; v < s.k_w; ++v) {
          std::iota(idx.begin(), idx.end(), std::size_t{0});
          // Largest magnitude first; lower channel first among equals.
          std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n),
                            idx.end(), [&](std::size_t a, std::size_t b) {
                              const T ma = std::abs(w.at(o, g * m + a, u, v));
                              const T mb = std::abs(w.at(o, g * m + b, u, v));
                              if (ma != mb) return ma > mb;
                              return a < b;
                            });
          for (std::size_t k = 0; k < n; ++k) mask.set(o, g * m + idx[k], u, v, true);
        }
      }
    }
  }
  return mask;
}

bool satisfies_nm(const Mask4& b, const NMPattern& pattern) {
  const Shape4& s = b.shape();
  const std::size_t m = pattern.m();
  if (s.c_in % m != 0) return false;
  for (std::size_t o = 0; o < s.c_out; ++o) {
    for (std::size_t g = 0; g < s.c_in / m; ++g) {
      for (std::size_t u = 0; u < s.k_h; ++u) {
        for (std::size_t v = 0; v < s.k_w; ++v) {
          std::size_t ones = 0;
          for (std::size_t q = 0; q < m; ++q) ones += b.at(o, g * m + q, u, v);
          if (ones != pattern.n()) return false;
        }
      }
    }
  }
  return true;
}

std::vector<std::size_t> spatial_counts(const Mask4& b) {
  const Shape4& s = b.shape();
  std::vector<std::size_t> counts(s.spatial(), 0);
  auto bits = b.bits();
  const std::size_t planes = s.c_out * s.c_in;
  for (std::size_t pq = 0; pq < planes; ++pq) {
    const std::uint8_t* kernel = bits.data() + pq * s.spatial();
    for (std::size_t uv = 0; uv < s.spatial(); ++uv) counts[uv] += kernel[uv];
  }
  return counts;
}

SparsityProfile spatial_sparsity(const Mask4& b, const std::string& layer_name) {
  const Shape4& s = b.shape();
  SparsityProfile profile{layer_name, s.k_h, s.k_w, {}};
  const auto counts = spatial_counts(b);
  const double planes = static_cast<double>(s.c_out * s.c_in);
  profile.values.reserve(counts.size());
  for (std::size_t c : counts) {
    profile.values.push_back(planes > 0 ? 1.0 - static_cast<double>(c) / planes
                                        : 0.0);
  }
  return profile;
}

template <typename T>
Mask4 uniform_spatial_mask(const Tensor4<T>& w, double sparsity) {
  check_sparsity(sparsity, "uniform_spatial_mask");
  const Shape4& s = w.shape();
  const std::size_t planes = s.c_out * s.c_in;
  const std::size_t keep = std::min(planes, round_half_up((1.0 - sparsity) * planes));
  const std::size_t prune = planes - keep;
  Mask4 mask = Mask4::ones(s);
  if (prune == 0) return mask;

  std::vector<std::size_t> order(planes);
  for (std::size_t uv = 0; uv < s.spatial(); ++uv) {
    for (std::size_t pq = 0; pq < planes; ++pq) order[pq] = pq * s.spatial() + uv;
    PruneOrder<T> cmp{w.data()};
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(prune - 1),
                     order.end(), cmp);
    for (std::size_t k = 0; k < prune; ++k) mask.set(order[k], false);
  }
  return mask;
}

template Mask4 magnitude_mask(const Tensor4<float>&, double);
template Mask4 magnitude_mask(const Tensor4<double>&, double);
template Mask4 nm_project(const Tensor4<float>&, const NMPattern&, const std::string&);
template Mask4 nm_project(const Tensor4<double>&, const NMPattern&, const std::string&);
template Mask4 uniform_spatial_mask(const Tensor4<float>&, double);
template Mask4 uniform_spatial_mask(const Tensor4<double>&, double);

}  // namespace spre
