#pragma once

// Differentiable building blocks with explicit backward passes. Parameters
// live in a flat per-branch arena; each layer stores only offsets into it, so
// copying a network copies its weights and keeps offsets valid.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ctreg/error.hpp"
#include "ctreg/tensor.hpp"

namespace ctreg::nn {

/// Hands out contiguous parameter ranges during network construction.
struct ParamAllocator {
  std::size_t next = 0;
  std::size_t take(std::size_t n) {
    const std::size_t at = next;
    next += n;
    return at;
  }
};

/// Stride-1 convolution with zero padding k/2 (k = 1 or 3), via im2col + GEMM.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamAllocator& alloc, int in, int out, int kernel, bool need_input_grad = true)
      : in_(in), out_(out), k_(kernel), need_input_grad_(need_input_grad) {
    if (kernel != 1 && kernel != 3) throw ShapeError("conv kernel must be 1 or 3");
    w_off_ = alloc.take(static_cast<std::size_t>(out) * in * k_ * k_);
    b_off_ = alloc.take(static_cast<std::size_t>(out));
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  std::size_t fan_in() const { return static_cast<std::size_t>(in_) * k_ * k_; }

  /// He-normal weights, zero bias.
  void init(T* params, std::mt19937_64& rng, double gain = 2.0) const {
    std::normal_distribution<double> nd(0.0, std::sqrt(gain / static_cast<double>(fan_in())));
    for (std::size_t i = 0; i < static_cast<std::size_t>(out_) * fan_in(); ++i) params[w_off_ + i] = static_cast<T>(nd(rng));
    for (int i = 0; i < out_; ++i) params[b_off_ + i] = T(0);
  }

  T* bias(T* params) const { return params + b_off_; }

  Tensor<T> forward(const Tensor<T>& x, const T* params, bool cache) {
    if (x.c() != in_)
      throw ShapeError("conv expects " + std::to_string(in_) + " channels, got " + std::to_string(x.c()));
    const int hw = static_cast<int>(x.plane());
    Tensor<T> y(x.n(), out_, x.h(), x.w());
    Eigen::Map<const Mat<T>> wm(params + w_off_, out_, static_cast<Eigen::Index>(fan_in()));
    Eigen::Map<const Vec<T>> bias(params + b_off_, out_);
    for (int n = 0; n < x.n(); ++n) {
      Eigen::Map<Mat<T>> ym(y.sample(n), out_, hw);
      if (k_ == 1) {
        ym.noalias() = wm * Eigen::Map<const Mat<T>>(x.sample(n), in_, hw);
      } else {
        im2col(x, n);
        ym.noalias() = wm * col_;
      }
      ym.colwise() += bias;
    }
    if (cache) input_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy, const T* params, T* grads) {
    const Tensor<T>& x = input_;
    if (x.empty()) throw ContractError("conv backward without cached forward");
    const int hw = static_cast<int>(x.plane());
    Eigen::Map<const Mat<T>> wm(params + w_off_, out_, static_cast<Eigen::Index>(fan_in()));
    Eigen::Map<Mat<T>> gw(grads + w_off_, out_, static_cast<Eigen::Index>(fan_in()));
    Eigen::Map<Vec<T>> gb(grads + b_off_, out_);
    Tensor<T> gx;
    if (need_input_grad_) gx = Tensor<T>(x.n(), in_, x.h(), x.w());
    for (int n = 0; n < x.n(); ++n) {
      Eigen::Map<const Mat<T>> g(gy.sample(n), out_, hw);
      gb += g.rowwise().sum();
      if (k_ == 1) {
        Eigen::Map<const Mat<T>> xm(x.sample(n), in_, hw);
        gw.noalias() += g * xm.transpose();
        if (need_input_grad_) Eigen::Map<Mat<T>>(gx.sample(n), in_, hw).noalias() = wm.transpose() * g;
      } else {
        im2col(x, n);
        gw.noalias() += g * col_.transpose();
        if (need_input_grad_) {
          dcol_.noalias() = wm.transpose() * g;
          col2im(gx, n);
        }
      }
    }
    input_ = Tensor<T>();
    return gx;
  }

 private:
  void im2col(const Tensor<T>& x, int n) {
    const int h = x.h(), w = x.w();
    col_.resize(static_cast<Eigen::Index>(fan_in()), static_cast<Eigen::Index>(h) * w);
    for (int c = 0; c < in_; ++c) {
      const T* src = x.channel(n, c);
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T* dst = col_.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * h * w;
          const int dy = ky - 1, dx = kx - 1;
          for (int y = 0; y < h; ++y) {
            T* row = dst + static_cast<std::size_t>(y) * w;
            const int sy = y + dy;
            if (sy < 0 || sy >= h) {
              std::fill(row, row + w, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(sy) * w;
            const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int xx = 0; xx < x0; ++xx) row[xx] = T(0);
            for (int xx = x0; xx < x1; ++xx) row[xx] = srow[xx + dx];
            for (int xx = x1; xx < w; ++xx) row[xx] = T(0);
          }
        }
    }
  }

  void col2im(Tensor<T>& gx, int n) const {
    const int h = gx.h(), w = gx.w();
    for (int c = 0; c < in_; ++c) {
      T* dst = gx.channel(n, c);
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T* src = dcol_.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * h * w;
          const int dy = ky - 1, dx = kx - 1;
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            const T* row = src + static_cast<std::size_t>(y) * w;
            T* drow = dst + static_cast<std::size_t>(sy) * w;
            const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int xx = x0; xx < x1; ++xx) drow[xx + dx] += row[xx];
          }
        }
    }
  }

  int in_ = 0, out_ = 0, k_ = 3;
  bool need_input_grad_ = true;
  std::size_t w_off_ = 0, b_off_ = 0;
  Tensor<T> input_;
  Mat<T> col_, dcol_;
};

/// Group normalization with per-channel affine scale and shift.
template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParamAllocator& alloc, int channels, int groups) : channels_(channels), groups_(groups) {
    if (groups <= 0 || channels % groups != 0)
      throw ShapeError("group norm: " + std::to_string(channels) + " channels not divisible by " +
                       std::to_string(groups) + " groups");
    gamma_off_ = alloc.take(static_cast<std::size_t>(channels));
    beta_off_ = alloc.take(static_cast<std::size_t>(channels));
  }

  void init(T* params) const {
    for (int c = 0; c < channels_; ++c) {
      params[gamma_off_ + c] = T(1);
      params[beta_off_ + c] = T(0);
    }
  }

  static constexpr double kEps = 1e-5;

  Tensor<T> forward(const Tensor<T>& x, const T* params, bool cache) {
    if (x.c() != channels_) throw ShapeError("group norm channel mismatch");
    const int cpg = channels_ / groups_;
    const std::size_t hw = x.plane();
    const std::size_t m = hw * cpg;
    Tensor<T> y(x.n(), x.c(), x.h(), x.w());
    if (cache) {
      xhat_ = Tensor<T>(x.n(), x.c(), x.h(), x.w());
      inv_std_.assign(static_cast<std::size_t>(x.n()) * groups_, T(0));
    }
    for (int n = 0; n < x.n(); ++n)
      for (int g = 0; g < groups_; ++g) {
        const T* src = x.channel(n, g * cpg);
        double mean = 0;
        for (std::size_t i = 0; i < m; ++i) mean += src[i];
        mean /= static_cast<double>(m);
        double var = 0;
        for (std::size_t i = 0; i < m; ++i) {
          const double d = src[i] - mean;
          var += d * d;
        }
        var /= static_cast<double>(m);
        const double inv = 1.0 / std::sqrt(var + kEps);
        if (cache) inv_std_[static_cast<std::size_t>(n) * groups_ + g] = static_cast<T>(inv);
        for (int c = 0; c < cpg; ++c) {
          const int ch = g * cpg + c;
          const T gamma = params[gamma_off_ + ch], beta = params[beta_off_ + ch];
          const T* s = x.channel(n, ch);
          T* d = y.channel(n, ch);
          T* xh = cache ? xhat_.channel(n, ch) : nullptr;
          for (std::size_t i = 0; i < hw; ++i) {
            const T v = static_cast<T>((s[i] - mean) * inv);
            if (xh) xh[i] = v;
            d[i] = gamma * v + beta;
          }
        }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy, const T* params, T* grads) {
    if (xhat_.empty()) throw ContractError("group norm backward without cached forward");
    const int cpg = channels_ / groups_;
    const std::size_t hw = gy.plane();
    const double m = static_cast<double>(hw * cpg);
    Tensor<T> gx(gy.n(), gy.c(), gy.h(), gy.w());
    for (int n = 0; n < gy.n(); ++n)
      for (int g = 0; g < groups_; ++g) {
        double sum_d = 0, sum_dx = 0;
        for (int c = 0; c < cpg; ++c) {
          const int ch = g * cpg + c;
          const T gamma = params[gamma_off_ + ch];
          const T* go = gy.channel(n, ch);
          const T* xh = xhat_.channel(n, ch);
          double gsum = 0, gxsum = 0;
          for (std::size_t i = 0; i < hw; ++i) {
            gsum += go[i];
            gxsum += static_cast<double>(go[i]) * xh[i];
          }
          grads[beta_off_ + ch] += static_cast<T>(gsum);
          grads[gamma_off_ + ch] += static_cast<T>(gxsum);
          sum_d += gamma * gsum;
          sum_dx += gamma * gxsum;
        }
        const double inv = inv_std_[static_cast<std::size_t>(n) * groups_ + g];
        for (int c = 0; c < cpg; ++c) {
          const int ch = g * cpg + c;
          const T gamma = params[gamma_off_ + ch];
          const T* go = gy.channel(n, ch);
          const T* xh = xhat_.channel(n, ch);
          T* d = gx.channel(n, ch);
          for (std::size_t i = 0; i < hw; ++i)
            d[i] = static_cast<T>(inv / m * (m * gamma * go[i] - sum_d - xh[i] * sum_dx));
        }
      }
    xhat_ = Tensor<T>();
    return gx;
  }

 private:
  int channels_ = 0, groups_ = 4;
  std::size_t gamma_off_ = 0, beta_off_ = 0;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

/// Conv -> GroupNorm -> optional ReLU.
template <typename T>
class ConvUnit {
 public:
  ConvUnit() = default;
  ConvUnit(ParamAllocator& alloc, int in, int out, int groups, bool relu = true, bool need_input_grad = true)
      : conv_(alloc, in, out, 3, need_input_grad), norm_(alloc, out, groups), relu_(relu) {}

  void init(T* params, std::mt19937_64& rng) const {
    conv_.init(params, rng);
    norm_.init(params);
  }

  int out_channels() const { return conv_.out_channels(); }

  Tensor<T> forward(const Tensor<T>& x, const T* params, bool cache) {
    Tensor<T> y = norm_.forward(conv_.forward(x, params, cache), params, cache);
    if (relu_) {
      for (auto& v : y.values()) v = v > T(0) ? v : T(0);
      if (cache) out_ = y;
    }
    return y;
  }

  Tensor<T> backward(Tensor<T> gy, const T* params, T* grads) {
    if (relu_) {
      if (out_.empty()) throw ContractError("conv unit backward without cached forward");
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (!(out_.data()[i] > T(0))) gy.data()[i] = T(0);
      out_ = Tensor<T>();
    }
    return conv_.backward(norm_.backward(gy, params, grads), params, grads);
  }

 private:
  Conv2d<T> conv_;
  GroupNorm<T> norm_;
  bool relu_ = true;
  Tensor<T> out_;
};

/// 2x2 max pooling, stride 2.
template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool cache) {
    if (x.h() % 2 || x.w() % 2) throw ShapeError("max pool needs even spatial size");
    const int oh = x.h() / 2, ow = x.w() / 2;
    Tensor<T> y(x.n(), x.c(), oh, ow);
    if (cache) {
      argmax_.assign(y.size(), 0);
      in_shape_ = {x.n(), x.c(), x.h(), x.w()};
    }
    std::size_t o = 0;
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c) {
        const T* s = x.channel(n, c);
        for (int y0 = 0; y0 < oh; ++y0)
          for (int x0 = 0; x0 < ow; ++x0, ++o) {
            const std::uint32_t base = static_cast<std::uint32_t>(2 * y0 * x.w() + 2 * x0);
            std::uint32_t best = base;
            for (std::uint32_t cand : {base + 1, base + static_cast<std::uint32_t>(x.w()),
                                       base + static_cast<std::uint32_t>(x.w()) + 1})
              if (s[cand] > s[best]) best = cand;
            y.data()[o] = s[best];
            if (cache) argmax_[o] = best;
          }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    const std::size_t oplane = gy.plane();
    for (std::size_t o = 0; o < gy.size(); ++o) {
      const std::size_t nc = o / oplane;
      gx.data()[nc * gx.plane() + argmax_[o]] += gy.data()[o];
    }
    argmax_.clear();
    return gx;
  }

 private:
  std::vector<std::uint32_t> argmax_;
  std::array<int, 4> in_shape_{};
};

/// Transposed convolution, kernel 2, stride 2 (non-overlapping taps).
template <typename T>
class ConvTranspose2x2 {
 public:
  ConvTranspose2x2() = default;
  ConvTranspose2x2(ParamAllocator& alloc, int in, int out) : in_(in), out_(out) {
    w_off_ = alloc.take(static_cast<std::size_t>(out) * 4 * in);
    b_off_ = alloc.take(static_cast<std::size_t>(out));
  }

  void init(T* params, std::mt19937_64& rng) const {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / in_));
    for (std::size_t i = 0; i < static_cast<std::size_t>(out_) * 4 * in_; ++i) params[w_off_ + i] = static_cast<T>(nd(rng));
    for (int i = 0; i < out_; ++i) params[b_off_ + i] = T(0);
  }

  Tensor<T> forward(const Tensor<T>& x, const T* params, bool cache) {
    if (x.c() != in_) throw ShapeError("transposed conv channel mismatch");
    const int h = x.h(), w = x.w(), hw = h * w;
    Eigen::Map<const Mat<T>> wm(params + w_off_, out_ * 4, in_);
    Tensor<T> y(x.n(), out_, 2 * h, 2 * w);
    for (int n = 0; n < x.n(); ++n) {
      buf_.noalias() = wm * Eigen::Map<const Mat<T>>(x.sample(n), in_, hw);
      for (int co = 0; co < out_; ++co) {
        T* d = y.channel(n, co);
        const T b = params[b_off_ + co];
        for (int tap = 0; tap < 4; ++tap) {
          const int a = tap / 2, c = tap % 2;
          const T* src = buf_.data() + static_cast<std::size_t>(co * 4 + tap) * hw;
          for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx)
              d[static_cast<std::size_t>(2 * yy + a) * 2 * w + 2 * xx + c] = src[yy * w + xx] + b;
        }
      }
    }
    if (cache) input_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy, const T* params, T* grads) {
    const Tensor<T>& x = input_;
    if (x.empty()) throw ContractError("transposed conv backward without cached forward");
    const int h = x.h(), w = x.w(), hw = h * w;
    Eigen::Map<const Mat<T>> wm(params + w_off_, out_ * 4, in_);
    Eigen::Map<Mat<T>> gw(grads + w_off_, out_ * 4, in_);
    Tensor<T> gx(x.n(), in_, h, w);
    buf_.resize(out_ * 4, hw);
    for (int n = 0; n < x.n(); ++n) {
      for (int co = 0; co < out_; ++co) {
        const T* g = gy.channel(n, co);
        double bsum = 0;
        for (int tap = 0; tap < 4; ++tap) {
          const int a = tap / 2, c = tap % 2;
          T* dst = buf_.data() + static_cast<std::size_t>(co * 4 + tap) * hw;
          for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) {
              const T v = g[static_cast<std::size_t>(2 * yy + a) * 2 * w + 2 * xx + c];
              dst[yy * w + xx] = v;
              bsum += v;
            }
        }
        grads[b_off_ + co] += static_cast<T>(bsum);
      }
      Eigen::Map<const Mat<T>> xm(x.sample(n), in_, hw);
      gw.noalias() += buf_ * xm.transpose();
      Eigen::Map<Mat<T>>(gx.sample(n), in_, hw).noalias() = wm.transpose() * buf_;
    }
    input_ = Tensor<T>();
    return gx;
  }

 private:
  int in_ = 0, out_ = 0;
  std::size_t w_off_ = 0, b_off_ = 0;
  Tensor<T> input_;
  Mat<T> buf_;
};

/// Channel concatenation [a; b].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) throw ShapeError("concat shape mismatch");
  Tensor<T> y(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int n = 0; n < a.n(); ++n) {
    std::copy(a.sample(n), a.sample(n) + a.sample_size(), y.sample(n));
    std::copy(b.sample(n), b.sample(n) + b.sample_size(), y.sample(n) + a.sample_size());
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int first) {
  Tensor<T> a(g.n(), first, g.h(), g.w()), b(g.n(), g.c() - first, g.h(), g.w());
  for (int n = 0; n < g.n(); ++n) {
    std::copy(g.sample(n), g.sample(n) + a.sample_size(), a.sample(n));
    std::copy(g.sample(n) + a.sample_size(), g.sample(n) + g.sample_size(), b.sample(n));
  }
  return {std::move(a), std::move(b)};
}

}  // namespace ctreg::nn
