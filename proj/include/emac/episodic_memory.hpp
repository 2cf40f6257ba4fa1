#pragma once

// Table-based episodic memory: a fixed Gaussian random projection of
// state-action pairs, an append-only (key, Monte-Carlo return) table, and
// exhaustive k-nearest-neighbour lookup returning the distance-weighted
// return
//
//   d_i = |z - z_i|^2 + eps
//   w_k = exp(-d_k) / sum_{t in knn} exp(-d_t)
//   Q_M = sum_{k in knn} w_k q_k

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "emac/tensor_nn.hpp"

namespace emac::memory {

/// M in R^{u x v} with entries N(0, 1/u). Immutable after construction.
class ProjectionMatrix {
 public:
  ProjectionMatrix(int projected_dim, int input_dim, std::uint64_t seed)
      : rows_(projected_dim), cols_(input_dim), seed_(seed) {
    if (projected_dim < 1 || input_dim < 1) throw std::invalid_argument("projection dimensions must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(projected_dim)));
    entries_.resize(static_cast<std::size_t>(rows_) * static_cast<std::size_t>(cols_));
    for (auto& e : entries_) e = gauss(rng);
  }

  int projected_dim() const { return rows_; }
  int input_dim() const { return cols_; }
  std::uint64_t seed() const { return seed_; }
  double operator()(int r, int c) const { return entries_[static_cast<std::size_t>(r) * cols_ + c]; }

  void project_into(std::span<const double> x, std::span<double> out) const {
    if (static_cast<int>(x.size()) != cols_ || static_cast<int>(out.size()) != rows_)
      throw std::invalid_argument("project: dimension mismatch");
    for (int r = 0; r < rows_; ++r) {
      const double* row = entries_.data() + static_cast<std::size_t>(r) * cols_;
      double acc = 0.0;
      for (int c = 0; c < cols_; ++c) acc += row[c] * x[c];
      out[r] = acc;
    }
  }

  std::vector<double> project(std::span<const double> x) const {
    std::vector<double> out(static_cast<std::size_t>(rows_));
    project_into(x, out);
    return out;
  }

  /// Projects the concatenation [top; bottom] column by column. The
  /// result is u x B, row-major per query (query j occupies [j*u, (j+1)*u)).
  std::vector<double> project_columns(const nn::Matrix& top, const nn::Matrix& bottom) const {
    if (top.cols() != bottom.cols() || top.rows() + bottom.rows() != cols_)
      throw std::invalid_argument("project_columns: dimension mismatch");
    std::vector<double> x(static_cast<std::size_t>(cols_));
    std::vector<double> out(static_cast<std::size_t>(rows_ * top.cols()));
    for (Eigen::Index j = 0; j < top.cols(); ++j) {
      for (Eigen::Index i = 0; i < top.rows(); ++i) x[i] = top(i, j);
      for (Eigen::Index i = 0; i < bottom.rows(); ++i) x[top.rows() + i] = bottom(i, j);
      project_into(x, std::span<double>(out).subspan(static_cast<std::size_t>(j) * rows_, rows_));
    }
    return out;
  }

 private:
  int rows_;
  int cols_;
  std::uint64_t seed_;
  std::vector<double> entries_;  // row-major
};

enum class OverflowPolicy { error, overwrite };

class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LookupResult {
  double value = 0.0;                // Q_M
  std::vector<std::size_t> indices;  // neighbours, nearest first
  std::vector<double> distances;     // d(z, z_i) including eps
  std::vector<double> weights;
};

/// Softmax of negative distances over the retrieved set.
inline std::vector<double> neighbor_weights(std::span<const double> distances) {
  if (distances.empty()) return {};
  const double dmin = *std::min_element(distances.begin(), distances.end());
  std::vector<double> w(distances.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(-(distances[i] - dmin));
    total += w[i];
  }
  for (auto& x : w) x /= total;
  return w;
}

class MemoryTable {
 public:
  MemoryTable(int key_dim, std::size_t capacity, double epsilon = 1e-3,
              OverflowPolicy overflow = OverflowPolicy::error)
      : key_dim_(key_dim), capacity_(capacity), epsilon_(epsilon), overflow_(overflow) {
    if (key_dim < 1) throw std::invalid_argument("memory key dimension must be >= 1");
    if (capacity < 1) throw std::invalid_argument("memory capacity must be >= 1");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("memory epsilon must be > 0");
    columns_.resize(static_cast<std::size_t>(key_dim));
  }

  int key_dim() const { return key_dim_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::size_t capacity() const { return capacity_; }
  double epsilon() const { return epsilon_; }
  OverflowPolicy overflow_policy() const { return overflow_; }

  std::vector<double> key(std::size_t i) const {
    if (i >= size()) throw std::out_of_range("memory key index out of range");
    std::vector<double> k(static_cast<std::size_t>(key_dim_));
    for (int c = 0; c < key_dim_; ++c) k[c] = columns_[c][i];
    return k;
  }
  double value(std::size_t i) const { return values_.at(i); }

  /// Slots still free before an overflow would occur.
  std::size_t remaining() const { return capacity_ - values_.size(); }

  /// Appends without searching for duplicates. When full, either throws or
  /// (ring mode) overwrites the oldest slot.
  void add(std::span<const double> key, double mc_return) {
    if (static_cast<int>(key.size()) != key_dim_) throw std::invalid_argument("memory add: key dimension mismatch");
    if (!std::isfinite(mc_return)) throw std::invalid_argument("memory add: non-finite return");
    for (double k : key)
      if (!std::isfinite(k)) throw std::invalid_argument("memory add: non-finite key");
    if (values_.size() < capacity_) {
      for (int c = 0; c < key_dim_; ++c) columns_[c].push_back(key[c]);
      values_.push_back(mc_return);
      return;
    }
    if (overflow_ == OverflowPolicy::error) throw CapacityError("episodic memory is full");
    for (int c = 0; c < key_dim_; ++c) columns_[c][next_slot_] = key[c];
    values_[next_slot_] = mc_return;
    next_slot_ = (next_slot_ + 1) % capacity_;
  }

  LookupResult lookup(std::span<const double> query, int k) const {
    check_lookup(query.size(), k);
    LookupResult r;
    r.indices.resize(static_cast<std::size_t>(k));
    r.distances.resize(static_cast<std::size_t>(k));
    nearest(query.data(), 1, k, r.indices.data(), r.distances.data());
    r.weights = neighbor_weights(r.distances);
    r.value = 0.0;
    for (int i = 0; i < k; ++i) r.value += values_[r.indices[i]] * r.weights[i];
    return r;
  }

  /// Q_M for B queries packed row-major (query j at [j*u, (j+1)*u)).
  /// Elementwise identical to lookup().
  std::vector<double> batch_lookup(std::span<const double> queries, int k) const {
    if (queries.size() % static_cast<std::size_t>(key_dim_) != 0)
      throw std::invalid_argument("batch_lookup: query buffer is not a multiple of the key dimension");
    const std::size_t batch = queries.size() / key_dim_;
    std::vector<double> out(batch);
    if (batch == 0) return out;
    check_lookup(static_cast<std::size_t>(key_dim_), k);
    const auto kk = static_cast<std::size_t>(k);
    std::vector<std::size_t> idx(batch * kk);
    std::vector<double> dist(batch * kk);
    nearest(queries.data(), batch, k, idx.data(), dist.data());
    for (std::size_t j = 0; j < batch; ++j) {
      const auto w = neighbor_weights(std::span<const double>(dist).subspan(j * kk, kk));
      double q = 0.0;
      for (std::size_t i = 0; i < kk; ++i) q += values_[idx[j * kk + i]] * w[i];
      out[j] = q;
    }
    return out;
  }

  /// Snapshot: u64 key_dim, u64 count, then per record key_dim keys followed
  /// by the value, all little-endian binary64.
  void write_snapshot(std::ostream& os) const {
    nn::detail::write_u64(os, static_cast<std::uint64_t>(key_dim_));
    nn::detail::write_u64(os, static_cast<std::uint64_t>(size()));
    for (std::size_t i = 0; i < size(); ++i) {
      for (int c = 0; c < key_dim_; ++c) nn::detail::write_f64(os, columns_[c][i]);
      nn::detail::write_f64(os, values_[i]);
    }
  }

  static MemoryTable read_snapshot(std::istream& is, double epsilon = 1e-3) {
    const auto u = nn::detail::read_u64(is);
    const auto count = nn::detail::read_u64(is);
    MemoryTable table(static_cast<int>(u), std::max<std::uint64_t>(count, 1), epsilon);
    std::vector<double> key(u);
    for (std::uint64_t i = 0; i < count; ++i) {
      for (auto& x : key) x = nn::detail::read_f64(is);
      table.add(key, nn::detail::read_f64(is));
    }
    return table;
  }

 private:
  void check_lookup(std::size_t query_dim, int k) const {
    if (static_cast<int>(query_dim) != key_dim_) throw std::invalid_argument("lookup: query dimension mismatch");
    if (empty()) throw std::logic_error("lookup on an empty memory");
    if (k < 1 || static_cast<std::size_t>(k) > size())
      throw std::invalid_argument("lookup: K=" + std::to_string(k) + " outside [1, " + std::to_string(size()) + "]");
  }

  template <int U>
  void fused_distances(const double* query, std::size_t start, std::size_t len, double* __restrict d) const {
    const double* cols[U];
    for (int c = 0; c < U; ++c) cols[c] = columns_[c].data() + start;
    for (std::size_t i = 0; i < len; ++i) {
      double diff = query[0] - cols[0][i];
      double acc = diff * diff;
      for (int c = 1; c < U; ++c) {
        diff = query[c] - cols[c][i];
        acc += diff * diff;
      }
      d[i] = acc;
    }
  }

  void squared_distances(const double* query, std::size_t start, std::size_t len, double* __restrict d) const {
    switch (key_dim_) {
      case 2: return fused_distances<2>(query, start, len, d);
      case 4: return fused_distances<4>(query, start, len, d);
      case 8: return fused_distances<8>(query, start, len, d);
      default: break;
    }
    {
      const double q0 = query[0];
      const double* col = columns_[0].data() + start;
      for (std::size_t i = 0; i < len; ++i) {
        const double diff = q0 - col[i];
        d[i] = diff * diff;
      }
    }
    for (int c = 1; c < key_dim_; ++c) {
      const double qc = query[c];
      const double* col = columns_[c].data() + start;
      for (std::size_t i = 0; i < len; ++i) {
        const double diff = qc - col[i];
        d[i] += diff * diff;
      }
    }
  }

  // Exhaustive scan keeping, per query, the k smallest (distance, index)
  // pairs sorted; ties resolve to the lower index. Records are visited in
  // blocks that every query of the batch reuses while they are hot in
  // cache. Squared distances are summed in the order c = 0..u-1 whether
  // fused (small u) or accumulated one dimension at a time.
  // Outputs are nq x k, row-major.
  void nearest(const double* queries, std::size_t nq, int k, std::size_t* idx, double* dist) const {
    constexpr std::size_t block = 512;
    const std::size_t n = size();
    const std::size_t kk = static_cast<std::size_t>(k);
    std::fill(dist, dist + nq * kk, std::numeric_limits<double>::infinity());
    std::fill(idx, idx + nq * kk, std::size_t{0});
    std::vector<std::size_t> filled(nq, 0);
    std::vector<double> scratch(block);
    double* d = scratch.data();
    for (std::size_t start = 0; start < n; start += block) {
      const std::size_t len = std::min(block, n - start);
      for (std::size_t j = 0; j < nq; ++j) {
        const double* query = queries + j * key_dim_;
        double* best = dist + j * kk;
        std::size_t* best_idx = idx + j * kk;
        squared_distances(query, start, len, d);
        std::size_t& have = filled[j];
        if (have == kk) {
          const double worst = best[kk - 1];
          std::size_t below = 0;
          for (std::size_t i = 0; i < len; ++i) below += d[i] < worst ? 1 : 0;
          if (below == 0) continue;
        }
        for (std::size_t i = 0; i < len; ++i) {
          const double di = d[i];
          if (have == kk && !(di < best[kk - 1])) continue;
          std::size_t pos = have < kk ? have++ : kk - 1;
          while (pos > 0 && di < best[pos - 1]) {
            best[pos] = best[pos - 1];
            best_idx[pos] = best_idx[pos - 1];
            --pos;
          }
          best[pos] = di;
          best_idx[pos] = start + i;
        }
      }
    }
    for (std::size_t i = 0; i < nq * kk; ++i) dist[i] += epsilon_;
  }

  int key_dim_;
  std::size_t capacity_;
  double epsilon_;
  OverflowPolicy overflow_;
  std::vector<std::vector<double>> columns_;  // one column per key dimension
  std::vector<double> values_;
  std::size_t next_slot_ = 0;  // ring mode write position once full
};

}  // namespace emac::memory
