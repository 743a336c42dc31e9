#pragma once

// Dual-branch UNet regressor. Each branch has a three-level UNet backbone and
// a 1-channel predictor head; branch 1 may add a pixel-wise projector head.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctreg/error.hpp"
#include "ctreg/nn/layers.hpp"
#include "ctreg/raster.hpp"
#include "ctreg/tensor.hpp"

namespace ctreg {

struct NetworkConfig {
  int in_channels = 8;
  int base_channels = 32;      // encoder widths: base, 2*base, 4*base
  int feature_channels = 128;  // backbone output
  int embed_channels = 128;    // projector output
  int groups = 4;

  void validate() const {
    if (in_channels <= 0) throw ConfigError("network.in_channels must be positive");
    for (int c : {base_channels, 2 * base_channels, 4 * base_channels, feature_channels, embed_channels})
      if (c <= 0 || groups <= 0 || c % groups != 0)
        throw ConfigError("network widths must be positive multiples of network.groups");
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline nlohmann::json to_json(const NetworkConfig& c) {
  return {{"in_channels", c.in_channels},
          {"base_channels", c.base_channels},
          {"feature_channels", c.feature_channels},
          {"embed_channels", c.embed_channels},
          {"groups", c.groups}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.feature_channels = j.at("feature_channels").get<int>();
  c.embed_channels = j.at("embed_channels").get<int>();
  c.groups = j.at("groups").get<int>();
  return c;
}

/// Encoder base -> 2base -> 4base with two conv units per level, mirrored
/// decoder with transposed-conv upsampling and skip concatenation, ending in
/// `feature_channels` at input resolution.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(nn::ParamAllocator& a, const NetworkConfig& cfg) {
    const int b = cfg.base_channels, g = cfg.groups;
    e1a_ = {a, cfg.in_channels, b, g, true, false};
    e1b_ = {a, b, b, g};
    e2a_ = {a, b, 2 * b, g};
    e2b_ = {a, 2 * b, 2 * b, g};
    e3a_ = {a, 2 * b, 4 * b, g};
    e3b_ = {a, 4 * b, 4 * b, g};
    up2_ = {a, 4 * b, 2 * b};
    d2a_ = {a, 4 * b, 2 * b, g};
    d2b_ = {a, 2 * b, 2 * b, g};
    up1_ = {a, 2 * b, b};
    d1a_ = {a, 2 * b, b, g};
    d1b_ = {a, b, cfg.feature_channels, g};
    base_ = b;
  }

  void init(T* p, std::mt19937_64& rng) const {
    for (const auto* u : {&e1a_, &e1b_, &e2a_, &e2b_, &e3a_, &e3b_, &d2a_, &d2b_, &d1a_, &d1b_}) u->init(p, rng);
    up2_.init(p, rng);
    up1_.init(p, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const T* p, bool cache) {
    if (x.h() % 4 || x.w() % 4)
      throw ShapeError("spatial size " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                       " is not divisible by 4");
    Tensor<T> e1 = e1b_.forward(e1a_.forward(x, p, cache), p, cache);
    Tensor<T> e2 = e2b_.forward(e2a_.forward(pool1_.forward(e1, cache), p, cache), p, cache);
    Tensor<T> e3 = e3b_.forward(e3a_.forward(pool2_.forward(e2, cache), p, cache), p, cache);
    Tensor<T> d2 = d2b_.forward(d2a_.forward(nn::concat_channels(up2_.forward(e3, p, cache), e2), p, cache), p, cache);
    return d1b_.forward(d1a_.forward(nn::concat_channels(up1_.forward(d2, p, cache), e1), p, cache), p, cache);
  }

  void backward(const Tensor<T>& g, const T* p, T* gp) {
    auto [g_up1, g_e1] = nn::split_channels(d1a_.backward(d1b_.backward(g, p, gp), p, gp), base_);
    Tensor<T> g_d2 = up1_.backward(g_up1, p, gp);
    auto [g_up2, g_e2] = nn::split_channels(d2a_.backward(d2b_.backward(g_d2, p, gp), p, gp), 2 * base_);
    Tensor<T> g_e3 = up2_.backward(g_up2, p, gp);
    g_e2 += pool2_.backward(e3a_.backward(e3b_.backward(g_e3, p, gp), p, gp));
    g_e1 += pool1_.backward(e2a_.backward(e2b_.backward(g_e2, p, gp), p, gp));
    e1a_.backward(e1b_.backward(g_e1, p, gp), p, gp);
  }

 private:
  nn::ConvUnit<T> e1a_, e1b_, e2a_, e2b_, e3a_, e3b_, d2a_, d2b_, d1a_, d1b_;
  nn::ConvTranspose2x2<T> up2_, up1_;
  nn::MaxPool2<T> pool1_, pool2_;
  int base_ = 0;
};

/// Two conv units, then conv + group norm with no activation.
template <typename T>
class Projector {
 public:
  Projector() = default;
  Projector(nn::ParamAllocator& a, const NetworkConfig& cfg)
      : u1_(a, cfg.feature_channels, cfg.feature_channels, cfg.groups),
        u2_(a, cfg.feature_channels, cfg.feature_channels, cfg.groups),
        out_(a, cfg.feature_channels, cfg.embed_channels, cfg.groups, false) {}

  void init(T* p, std::mt19937_64& rng) const {
    u1_.init(p, rng);
    u2_.init(p, rng);
    out_.init(p, rng);
  }

  Tensor<T> forward(const Tensor<T>& f, const T* p, bool cache) {
    return out_.forward(u2_.forward(u1_.forward(f, p, cache), p, cache), p, cache);
  }
  Tensor<T> backward(const Tensor<T>& g, const T* p, T* gp) {
    return u1_.backward(u2_.backward(out_.backward(g, p, gp), p, gp), p, gp);
  }

 private:
  nn::ConvUnit<T> u1_, u2_, out_;
};

/// One conv unit, then a 1x1 conv to a single channel.
template <typename T>
class Predictor {
 public:
  Predictor() = default;
  Predictor(nn::ParamAllocator& a, const NetworkConfig& cfg)
      : unit_(a, cfg.feature_channels, cfg.feature_channels, cfg.groups), head_(a, cfg.feature_channels, 1, 1) {}

  void init(T* p, std::mt19937_64& rng) const {
    unit_.init(p, rng);
    head_.init(p, rng, 1.0);
  }

  T* output_bias(T* p) const { return head_.bias(p); }

  Tensor<T> forward(const Tensor<T>& f, const T* p, bool cache) {
    return head_.forward(unit_.forward(f, p, cache), p, cache);
  }
  Tensor<T> backward(const Tensor<T>& g, const T* p, T* gp) {
    return unit_.backward(head_.backward(g, p, gp), p, gp);
  }

 private:
  nn::ConvUnit<T> unit_;
  nn::Conv2d<T> head_;
};

template <typename T>
struct BranchOutputs {
  Tensor<T> prediction;               // batch x 1 x H x W, meters
  std::optional<Tensor<T>> embedding;  // batch x embed x H x W, unnormalized
};

/// Backbone + predictor (+ projector). The parameter arena is laid out as
/// [backbone | predictor | projector], so dropping the projector keeps a
/// prefix of the arena.
template <typename T>
class Branch {
 public:
  Branch() = default;
  Branch(const NetworkConfig& cfg, bool with_projector, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    build(with_projector);
    std::mt19937_64 rng(seed);
    backbone_.init(params_.data(), rng);
    predictor_.init(params_.data(), rng);
    if (projector_) projector_->init(params_.data(), rng);
  }

  const NetworkConfig& config() const { return cfg_; }
  bool has_projector() const { return projector_.has_value(); }

  std::span<T> parameters() { return params_; }
  std::span<const T> parameters() const { return params_; }
  std::span<T> gradients() { return grads_; }
  std::span<const T> gradients() const { return grads_; }
  std::size_t parameter_count() const { return params_.size(); }
  void zero_grad() { std::fill(grads_.begin(), grads_.end(), T(0)); }

  void set_output_bias(T value) { *predictor_.output_bias(params_.data()) = value; }

  /// `cache = true` keeps what backward() needs. `run_projector = false`
  /// skips the embedding head for steps without a contrastive term.
  BranchOutputs<T> forward(const Tensor<T>& x, bool cache = false, bool run_projector = true) {
    if (x.c() != cfg_.in_channels)
      throw ShapeError("branch expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                       std::to_string(x.c()));
    BranchOutputs<T> out;
    Tensor<T> f = backbone_.forward(x, params_.data(), cache);
    out.prediction = predictor_.forward(f, params_.data(), cache);
    projector_cached_ = false;
    if (projector_ && run_projector) {
      out.embedding = projector_->forward(f, params_.data(), cache);
      projector_cached_ = cache;
    }
    return out;
  }

  /// Accumulates parameter gradients. `d_embedding` may be null (no
  /// contrastive term this step) even when the projector exists.
  void backward(const Tensor<T>& d_prediction, const Tensor<T>* d_embedding = nullptr) {
    Tensor<T> g = predictor_.backward(d_prediction, params_.data(), grads_.data());
    if (projector_cached_) {
      if (d_embedding) {
        g += projector_->backward(*d_embedding, params_.data(), grads_.data());
      } else {
        Tensor<T> zero(d_prediction.n(), cfg_.embed_channels, d_prediction.h(), d_prediction.w());
        g += projector_->backward(zero, params_.data(), grads_.data());
      }
      projector_cached_ = false;
    } else if (d_embedding) {
      throw ContractError("embedding gradient given but the projector was not run with caching");
    }
    backbone_.backward(g, params_.data(), grads_.data());
  }

  /// Same backbone and predictor parameters, no projector.
  Branch without_projector() const {
    Branch b;
    b.cfg_ = cfg_;
    b.build(false);
    std::copy(params_.begin(), params_.begin() + static_cast<std::ptrdiff_t>(b.params_.size()), b.params_.begin());
    return b;
  }

  /// Replace all parameters (size must match).
  void load_parameters(std::span<const T> values) {
    if (values.size() != params_.size()) throw ContractError("parameter count mismatch");
    std::copy(values.begin(), values.end(), params_.begin());
  }

 private:
  void build(bool with_projector) {
    nn::ParamAllocator alloc;
    backbone_ = Backbone<T>(alloc, cfg_);
    predictor_ = Predictor<T>(alloc, cfg_);
    if (with_projector) projector_.emplace(alloc, cfg_);
    else projector_.reset();
    params_.assign(alloc.next, T(0));
    grads_.assign(alloc.next, T(0));
  }

  NetworkConfig cfg_;
  Backbone<T> backbone_;
  Predictor<T> predictor_;
  std::optional<Projector<T>> projector_;
  AlignedVector<T> params_, grads_;
  bool projector_cached_ = false;
};

/// Branch 1 (optionally with projector) and an optional, independently
/// initialized Branch 2 without projector.
template <typename T>
struct DualBranchModel {
  Branch<T> branch1;
  std::optional<Branch<T>> branch2;

  DualBranchModel() = default;
  DualBranchModel(const NetworkConfig& cfg, bool dual, bool projector, std::uint64_t seed)
      : branch1(cfg, projector, seed * 2 + 1) {
    if (dual) branch2.emplace(cfg, false, seed * 2 + 2);
  }

  std::size_t parameter_count() const {
    return branch1.parameter_count() + (branch2 ? branch2->parameter_count() : 0);
  }

  std::pair<BranchOutputs<T>, std::optional<BranchOutputs<T>>> forward(const Tensor<T>& x, bool cache = false) {
    auto o1 = branch1.forward(x, cache);
    std::optional<BranchOutputs<T>> o2;
    if (branch2) o2 = branch2->forward(x, cache);
    return {std::move(o1), std::move(o2)};
  }

  /// The branch that ships: Branch 2 when present, otherwise Branch 1.
  Branch<T>& deployable() { return branch2 ? *branch2 : branch1; }
  const Branch<T>& deployable() const { return branch2 ? *branch2 : branch1; }
};

/// Per-channel z-scoring of input bands.
template <typename T>
struct InputNormalizer {
  std::vector<T> mean;
  std::vector<T> scale;  // 1 / std

  int channels() const { return static_cast<int>(mean.size()); }

  static InputNormalizer identity(int channels) {
    return {std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1))};
  }

  static InputNormalizer fit(std::span<const PatchSample> patches) {
    if (patches.empty()) throw EmptyDatasetError("cannot fit input normalization on zero patches");
    const int c = patches.front().channels();
    std::vector<double> s(c, 0.0), s2(c, 0.0);
    double n = 0;
    for (const auto& p : patches) {
      if (p.channels() != c) throw ContractError("patches disagree in channel count");
      for (int b = 0; b < c; ++b)
        for (float v : p.inputs.band(b)) {
          s[b] += v;
          s2[b] += static_cast<double>(v) * v;
        }
      n += static_cast<double>(p.pixels());
    }
    InputNormalizer out;
    for (int b = 0; b < c; ++b) {
      const double m = s[b] / n;
      const double var = std::max(s2[b] / n - m * m, 0.0);
      out.mean.push_back(static_cast<T>(m));
      out.scale.push_back(static_cast<T>(var > 1e-20 ? 1.0 / std::sqrt(var) : 1.0));
    }
    return out;
  }

  /// Stacks patches into a normalized batch x C x H x W tensor.
  Tensor<T> batch(std::span<const PatchSample> patches) const {
    if (patches.empty()) throw ContractError("empty batch");
    const int s = patches.front().size();
    Tensor<T> x(static_cast<int>(patches.size()), channels(), s, s);
    for (std::size_t n = 0; n < patches.size(); ++n) {
      const PatchSample& p = patches[n];
      if (p.channels() != channels())
        throw ContractError("patch has " + std::to_string(p.channels()) + " channels, model expects " +
                            std::to_string(channels()));
      if (p.size() != s) throw ShapeError("patches in one batch must share a size");
      for (int b = 0; b < channels(); ++b) {
        auto band = p.inputs.band(b);
        T* dst = x.channel(static_cast<int>(n), b);
        for (std::size_t i = 0; i < band.size(); ++i) dst[i] = (static_cast<T>(band[i]) - mean[b]) * scale[b];
      }
    }
    return x;
  }
};

/// The deployable single-branch regressor.
template <typename T>
struct InferenceModel {
  InputNormalizer<T> normalizer;
  Branch<T> branch;

  int channels() const { return normalizer.channels(); }
  std::size_t parameter_count() const { return branch.parameter_count(); }

  /// Raw per-pixel predictions (no masking), batch x 1 x H x W.
  Tensor<T> forward(std::span<const PatchSample> patches) { return branch.forward(normalizer.batch(patches)).prediction; }
};

template <typename T>
InferenceModel<T> extract_inference_model(const DualBranchModel<T>& trained, const InputNormalizer<T>& normalizer) {
  return {normalizer, trained.deployable().without_projector()};
}

}  // namespace ctreg
