#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace modestruct {

/// Square row-major grid indexed (n_s, n_i), both 0..n_max.
template <typename T>
class Grid {
public:
  Grid() = default;
  explicit Grid(int n_max, T fill = T{})
      : n_max_(n_max), data_(static_cast<std::size_t>(n_max + 1) * static_cast<std::size_t>(n_max + 1), fill) {
    if (n_max < 0) throw std::invalid_argument("grid dimension must be >= 0");
  }

  int n_max() const { return n_max_; }
  std::size_t dim() const { return static_cast<std::size_t>(n_max_ + 1); }
  std::size_t size() const { return data_.size(); }

  T& operator()(int s, int i) { return data_[index(s, i)]; }
  const T& operator()(int s, int i) const { return data_[index(s, i)]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T{}); }

  bool operator==(const Grid&) const = default;

private:
  std::size_t index(int s, int i) const {
    return static_cast<std::size_t>(s) * dim() + static_cast<std::size_t>(i);
  }

  int n_max_ = 0;
  std::vector<T> data_{T{}};
};

/// Joint photon-number distribution P(n_s, n_i) with the probability of
/// events outside the represented square.
struct ProbMatrix {
  Grid<double> p;
  double tail_mass = 0.0;

  ProbMatrix() = default;
  explicit ProbMatrix(int n_max) : p(n_max, 0.0) {}

  int n_max() const { return p.n_max(); }
  double total() const { return p.sum(); }
  double operator()(int s, int i) const { return p(s, i); }
  double& operator()(int s, int i) { return p(s, i); }
};

inline ProbMatrix vacuum_matrix(int n_max) {
  ProbMatrix m(n_max);
  m(0, 0) = 1.0;
  return m;
}

/// Event counts N(n_s, n_i) and the number of trials. Trials whose photon
/// number fell outside the square are part of n_tot but not of the grid.
struct CountMatrix {
  Grid<std::uint64_t> counts;
  std::uint64_t n_tot = 0;

  CountMatrix() = default;
  explicit CountMatrix(int n_max) : counts(n_max, 0) {}

  int n_max() const { return counts.n_max(); }
  std::uint64_t in_range() const { return counts.sum(); }
  std::uint64_t overflow() const { return n_tot - in_range(); }
  std::uint64_t operator()(int s, int i) const { return counts(s, i); }
  std::uint64_t& operator()(int s, int i) { return counts(s, i); }

  bool operator==(const CountMatrix&) const = default;
};

} // namespace modestruct
