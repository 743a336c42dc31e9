#pragma once

// Pixel-wise anchor composition: N labeled forest pixels drawn uniformly
// across a whole batch. Every anchor is a negative for every other anchor.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ctreg/error.hpp"
#include "ctreg/raster.hpp"
#include "ctreg/tensor.hpp"

namespace ctreg {

struct PixelPosition {
  int patch = 0;
  int row = 0;
  int col = 0;

  friend bool operator==(const PixelPosition&, const PixelPosition&) = default;
};

template <typename T>
struct AnchorSet {
  std::vector<PixelPosition> positions;
  std::vector<T> heights;
  Mat<T> embeddings;   // N x D, unit rows
  std::vector<T> norms;  // pre-normalization row norms, for the backward pass
  std::size_t requested = 0;
  bool shortfall = false;

  std::size_t size() const { return positions.size(); }
};

/// Eligible = labeled patch, forest pixel, defined reference.
inline std::vector<PixelPosition> eligible_pixels(std::span<const PatchSample> batch) {
  std::vector<PixelPosition> pool;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PatchSample& p = batch[b];
    if (!p.labeled) continue;
    const int s = p.size();
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        if (p.valid(static_cast<std::size_t>(y) * s + x)) pool.push_back({static_cast<int>(b), y, x});
  }
  return pool;
}

/// Uniform draw without replacement (partial Fisher-Yates). Returns the
/// whole pool, in seeded order, when it is smaller than `n_anchors`.
inline std::vector<PixelPosition> sample_anchor_positions(std::span<const PatchSample> batch,
                                                          std::size_t n_anchors, std::uint64_t seed) {
  auto pool = eligible_pixels(batch);
  if (pool.size() < 2)
    throw InsufficientAnchorsError("need at least 2 eligible pixels, batch has " + std::to_string(pool.size()));
  const std::size_t n = std::min(n_anchors, pool.size());
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(n);
  return pool;
}

/// Gathers and L2-normalizes projector embeddings at the given positions.
/// `field` is batch x D x H x W and aligned with `batch`.
template <typename T>
AnchorSet<T> gather_anchors(std::span<const PatchSample> batch, const Tensor<T>& field,
                            std::vector<PixelPosition> positions) {
  if (field.n() != static_cast<int>(batch.size()))
    throw ShapeError("embedding batch size differs from patch batch");
  AnchorSet<T> a;
  const int d = field.c();
  a.embeddings.resize(static_cast<Eigen::Index>(positions.size()), d);
  a.heights.reserve(positions.size());
  a.norms.reserve(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto& pos = positions[i];
    const PatchSample& p = batch[pos.patch];
    if (pos.row >= field.h() || pos.col >= field.w()) throw ShapeError("anchor outside embedding field");
    a.heights.push_back(static_cast<T>(p.reference[static_cast<std::size_t>(pos.row) * p.size() + pos.col]));
    T sq = 0;
    for (int c = 0; c < d; ++c) {
      const T v = field.at(pos.patch, c, pos.row, pos.col);
      a.embeddings(static_cast<Eigen::Index>(i), c) = v;
      sq += v * v;
    }
    const T norm = std::sqrt(sq);
    if (!(norm > T(0))) throw DegenerateEmbeddingError("zero-norm embedding at an anchor");
    a.embeddings.row(static_cast<Eigen::Index>(i)) /= norm;
    a.norms.push_back(norm);
  }
  a.positions = std::move(positions);
  return a;
}

template <typename T>
AnchorSet<T> sample_anchors(std::span<const PatchSample> batch, const Tensor<T>& field, std::size_t n_anchors,
                            std::uint64_t seed) {
  auto positions = sample_anchor_positions(batch, n_anchors, seed);
  const bool short_pool = positions.size() < n_anchors;
  AnchorSet<T> a = gather_anchors(batch, field, std::move(positions));
  a.requested = n_anchors;
  a.shortfall = short_pool;
  return a;
}

/// Back-propagates d(loss)/d(unit embeddings) through the normalization and
/// accumulates into `d_field` (same shape as the sampled field).
template <typename T>
void scatter_anchor_gradient(const AnchorSet<T>& anchors, const Mat<T>& d_unit, Tensor<T>& d_field) {
  const auto d = anchors.embeddings.cols();
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const auto u = anchors.embeddings.row(r);
    const auto g = d_unit.row(r);
    const T proj = u.dot(g);
    const auto& pos = anchors.positions[i];
    for (Eigen::Index c = 0; c < d; ++c)
      d_field.at(pos.patch, static_cast<int>(c), pos.row, pos.col) += (g(c) - u(c) * proj) / anchors.norms[i];
  }
}

}  // namespace ctreg
