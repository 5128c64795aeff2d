#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "spre/tensor.hpp"

namespace spre {

/// N non-zeros in every M consecutive input channels.
class NMPattern {
 public:
  /// Throws kInvalidArgument unless 1 <= n <= m.
  NMPattern(std::size_t n, std::size_t m);

  std::size_t n() const noexcept { return n_; }
  std::size_t m() const noexcept { return m_; }
  /// 1 - n/m.
  double sparsity() const noexcept;
  std::string to_string() const;

  friend bool operator==(const NMPattern&, const NMPattern&) = default;

 private:
  std::size_t n_;
  std::size_t m_;
};

/// Per-layer k_h x k_w matrix of spatial sparsity values, row-major.
struct SparsityProfile {
  std::string layer_name;
  std::size_t k_h = 0;
  std::size_t k_w = 0;
  std::vector<double> values;

  double at(std::size_t u, std::size_t v) const { return values[u * k_w + v]; }
  /// max - min over all locations.
  double spread() const;
};

/// round(x) with halves rounded up, for non-negative x.
std::size_t round_half_up(double x);

/// Unstructured magnitude pruning of one layer. Exactly round(p * size)
/// positions are cleared, smallest |w| first; equal magnitudes are pruned in
/// increasing flat index order.
template <typename T>
Mask4 magnitude_mask(const Tensor4<T>& w, double sparsity);

/// Keeps the n largest |w| in each group of m consecutive input channels at
/// every (out-channel, u, v). On equal magnitudes the lower channel wins.
template <typename T>
Mask4 nm_project(const Tensor4<T>& w, const NMPattern& pattern,
                 const std::string& layer_name = {});

/// True iff every group of m input channels holds exactly n ones.
bool satisfies_nm(const Mask4& b, const NMPattern& pattern);

/// Number of ones at location (u, v) summed over out/in channels.
std::vector<std::size_t> spatial_counts(const Mask4& b);

/// values[u][v] = 1 - mean of b[:, :, u, v].
SparsityProfile spatial_sparsity(const Mask4& b,
                                 const std::string& layer_name = {});

/// Magnitude pruning constrained to the same density at every kernel
/// location: each (u, v) keeps its top round((1 - p) * c_out * c_in) weights.
template <typename T>
Mask4 uniform_spatial_mask(const Tensor4<T>& w, double sparsity);

}  // namespace spre
