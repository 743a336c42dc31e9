#pragma once

// Training loop, inference and the anchor-count sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctreg/anchors.hpp"
#include "ctreg/checkpoint.hpp"
#include "ctreg/error.hpp"
#include "ctreg/losses.hpp"
#include "ctreg/metrics.hpp"
#include "ctreg/network.hpp"
#include "ctreg/optim.hpp"
#include "ctreg/raster.hpp"
#include "ctreg/similarity.hpp"

namespace ctreg {

/// The four ablation configurations.
enum class Variant { unet, cpr, ctrl, hybrid };

struct VariantTraits {
  bool dual = false;            // second branch + consistency term
  bool contrastive = false;     // projector head + contrastive term
  bool uses_unlabeled = false;  // unlabeled patches enter training
};

inline VariantTraits traits_of(Variant v) {
  switch (v) {
    case Variant::unet: return {false, false, false};
    case Variant::cpr: return {true, false, true};
    case Variant::ctrl: return {false, true, false};
    case Variant::hybrid: return {true, true, true};
  }
  return {};
}

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::unet: return "unet";
    case Variant::cpr: return "cpr";
    case Variant::ctrl: return "ctrl";
    case Variant::hybrid: return "hybrid";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "unet") return Variant::unet;
  if (s == "cpr") return Variant::cpr;
  if (s == "ctrl") return Variant::ctrl;
  if (s == "hybrid") return Variant::hybrid;
  throw ConfigError("unknown variant '" + s + "' (expected unet, cpr, ctrl or hybrid)");
}

struct TrainConfig {
  int epochs = 100;
  int batch_size = 4;
  double max_lr = 1e-2;
  std::size_t n_anchors = 1000;
  double pct_start = 0.3;
  LossConfig loss;
  NetworkConfig network;  // in_channels is taken from the data
  Variant variant = Variant::hybrid;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_dir;  // empty: keep everything in memory
  std::string config_hash;
  bool init_output_bias = true;  // start the predictor at the mean training label

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(max_lr > 0)) throw ConfigError("train.max_lr must be positive");
    if (n_anchors < 2) throw ConfigError("train.n_anchors must be >= 2");
    if (!(pct_start > 0 && pct_start < 1)) throw ConfigError("train.pct_start must lie in (0, 1)");
    loss.validate();
  }
};

struct StepRecord {
  int epoch = 0;
  std::size_t step = 0;
  double lr = 0;
  LossReport report;
};

struct EpochRecord {
  int epoch = 0;
  double val_loss = 0;
  bool improved = false;
};

inline nlohmann::ordered_json to_json(const StepRecord& s) {
  nlohmann::ordered_json j;
  j["epoch"] = s.epoch;
  j["step"] = s.step;
  j["lr"] = s.lr;
  j["l1"] = s.report.l1_labeled;
  j["l2"] = s.report.l2_labeled;
  j["l_c"] = s.report.l_consistency;
  j["l_ctrl"] = s.report.l_ctrl;
  j["l_wd"] = s.report.l_wd;
  j["total"] = s.report.total;
  j["n_anchors"] = s.report.n_anchors_used;
  return j;
}

inline nlohmann::ordered_json to_json(const EpochRecord& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["val_loss"] = e.val_loss;
  return j;
}

template <typename T>
struct TrainResult {
  InferenceModel<T> best;
  int best_epoch = -1;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t dual_parameter_count = 0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Evaluates the hybrid objective on one batch and, when `want_grad`,
/// leaves d(total)/d(parameters) in each branch's gradient buffer
/// (previous gradients are cleared).
template <typename T>
LossReport objective(DualBranchModel<T>& model, const Tensor<T>& x, std::span<const PatchSample> batch,
                     const LossConfig& cfg, bool contrastive, std::size_t n_anchors, std::uint64_t anchor_seed,
                     bool want_grad) {
  const DenseTargets targets = DenseTargets::from_patches(batch);

  std::optional<std::vector<PixelPosition>> positions;
  if (contrastive && model.branch1.has_projector()) {
    try {
      positions = sample_anchor_positions(batch, n_anchors, anchor_seed);
    } catch (const InsufficientAnchorsError&) {
      positions.reset();
    }
  }

  auto o1 = model.branch1.forward(x, want_grad, positions.has_value());
  std::optional<BranchOutputs<T>> o2;
  if (model.branch2) o2 = model.branch2->forward(x, want_grad);

  Tensor<T> d1(o1.prediction.n(), 1, o1.prediction.h(), o1.prediction.w());
  Tensor<T> d2;
  if (o2) d2 = Tensor<T>(d1.n(), 1, d1.h(), d1.w());

  CprTerms terms;
  terms.l1 = supervised_mse(o1.prediction, targets, want_grad ? &d1 : nullptr);
  if (o2) {
    terms.l2 = supervised_mse(o2->prediction, targets, want_grad ? &d2 : nullptr);
    terms.l_c = consistency_mse(o1.prediction, o2->prediction, targets, want_grad ? &d1 : nullptr,
                                want_grad ? &d2 : nullptr, cfg.lambda_c);
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    terms.n_labeled += targets.labeled[i];
    terms.n_forest += targets.forest[i];
  }
  terms.pure_unlabeled = terms.n_labeled == 0;

  double l_ctrl = 0;
  std::size_t used = 0;
  std::optional<Tensor<T>> d_embed;
  if (positions) {
    const AnchorSet<T> anchors = gather_anchors(batch, *o1.embedding, std::move(*positions));
    const SimilarityMatrix<T> sim = build_similarity(anchors, cfg.sigma, cfg.eps_sim);
    const CtrlResult<T> res = ctrl_loss_and_grad(sim, cfg, want_grad);
    l_ctrl = static_cast<double>(res.loss);
    used = anchors.size();
    if (want_grad) {
      const Mat<T> du = ctrl_unit_gradient(anchors, res.d_cos) * static_cast<T>(cfg.lambda_ctrl);
      const Tensor<T>& z = *o1.embedding;
      d_embed.emplace(z.n(), z.c(), z.h(), z.w());
      scatter_anchor_gradient(anchors, du, *d_embed);
    }
  }

  WeightStats ws;
  ws.add(std::span<const T>(model.branch1.parameters()));
  if (model.branch2) ws.add(std::span<const T>(model.branch2->parameters()));
  LossReport report = hybrid_loss(terms, l_ctrl, ws, cfg);
  report.n_anchors_used = used;

  if (want_grad) {
    model.branch1.zero_grad();
    model.branch1.backward(d1, d_embed ? &*d_embed : nullptr);
    if (model.branch2) {
      model.branch2->zero_grad();
      model.branch2->backward(d2);
    }
    const T k = static_cast<T>(2.0 * cfg.lambda_w / static_cast<double>(ws.count));
    auto add_decay = [k](Branch<T>& b) {
      auto p = b.parameters();
      auto g = b.gradients();
      for (std::size_t i = 0; i < p.size(); ++i) g[i] += k * p[i];
    };
    add_decay(model.branch1);
    if (model.branch2) add_decay(*model.branch2);
  }
  return report;
}

/// Per-patch H x W maps in meters; non-forest pixels are nodata.
template <typename T>
std::vector<std::vector<float>> predict(InferenceModel<T>& model, std::span<const PatchSample> patches,
                                        int batch_size = 8) {
  std::vector<std::vector<float>> out;
  out.reserve(patches.size());
  for (std::size_t start = 0; start < patches.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto chunk = patches.subspan(start, std::min<std::size_t>(batch_size, patches.size() - start));
    for (const auto& p : chunk)
      if (p.channels() != model.channels())
        throw ContractError("patch has " + std::to_string(p.channels()) + " channels, model expects " +
                            std::to_string(model.channels()));
    const Tensor<T> pred = model.forward(chunk);
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      const PatchSample& p = chunk[k];
      std::vector<float> map(p.pixels(), p.inputs.nodata);
      const T* src = pred.sample(static_cast<int>(k));
      for (std::size_t i = 0; i < p.pixels(); ++i)
        if (p.forest_mask[i]) map[i] = static_cast<float>(src[i]);
      out.push_back(std::move(map));
    }
  }
  return out;
}

/// Mean squared error of `branch` over the forest pixels with reference.
template <typename T>
double validation_loss(Branch<T>& branch, const InputNormalizer<T>& norm, std::span<const PatchSample> patches,
                       int batch_size = 8) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t start = 0; start < patches.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto chunk = patches.subspan(start, std::min<std::size_t>(batch_size, patches.size() - start));
    const Tensor<T> pred = branch.forward(norm.batch(chunk)).prediction;
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      const T* src = pred.sample(static_cast<int>(k));
      for (std::size_t i = 0; i < chunk[k].pixels(); ++i)
        if (chunk[k].valid(i)) {
          const double d = static_cast<double>(src[i]) - chunk[k].reference[i];
          sum += d * d;
          ++n;
        }
    }
  }
  if (n == 0) throw ContractError("validation set has no forest pixel with reference");
  return sum / static_cast<double>(n);
}

template <typename T = float>
TrainResult<T> train(const DatasetSplit& split, const TrainConfig& config) {
  config.validate();
  const VariantTraits traits = traits_of(config.variant);

  std::vector<PatchSample> train_set;
  for (const auto& p : split.train)
    if (traits.uses_unlabeled || p.labeled) train_set.push_back(p);
  const auto n_labeled = std::count_if(train_set.begin(), train_set.end(), [](const auto& p) { return p.labeled; });
  if (n_labeled == 0) throw ContractError("training needs at least one labeled patch");
  if (split.val.empty()) throw ContractError("training needs at least one validation patch");

  const InputNormalizer<T> norm = InputNormalizer<T>::fit(train_set);
  NetworkConfig net = config.network;
  net.in_channels = norm.channels();
  DualBranchModel<T> model(net, traits.dual, traits.contrastive, config.seed);

  if (config.init_output_bias) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& p : train_set)
      if (p.labeled)
        for (std::size_t i = 0; i < p.pixels(); ++i)
          if (p.valid(i)) {
            s += p.reference[i];
            ++n;
          }
    const T mean = n ? static_cast<T>(s / static_cast<double>(n)) : T(0);
    model.branch1.set_output_bias(mean);
    if (model.branch2) model.branch2->set_output_bias(mean);
  }

  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t batches_per_epoch = (train_set.size() + batch - 1) / batch;
  OneCycleSchedule schedule{config.max_lr, batches_per_epoch * static_cast<std::size_t>(config.epochs),
                            config.pct_start};
  Adam<T> adam(model.parameter_count());

  TrainResult<T> result;
  result.dual_parameter_count = model.parameter_count();

  std::ofstream log;
  if (!config.checkpoint_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(config.checkpoint_dir, ec);
    if (ec) throw IoError("cannot create " + config.checkpoint_dir.string() + ": " + ec.message());
    log.open(config.checkpoint_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot write training log in " + config.checkpoint_dir.string());
  }

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  std::vector<PatchSample> batch_patches;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(detail::mix_seed(config.seed, 0x5348u + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < batches_per_epoch; ++b, ++step) {
      batch_patches.clear();
      for (std::size_t k = b * batch; k < std::min(train_set.size(), (b + 1) * batch); ++k)
        batch_patches.push_back(train_set[order[k]]);
      const Tensor<T> x = norm.batch(batch_patches);
      const LossReport report =
          objective(model, x, std::span<const PatchSample>(batch_patches), config.loss, traits.contrastive,
                    config.n_anchors, detail::mix_seed(config.seed, 0xA9C0ull + step), true);
      if (!std::isfinite(report.total)) {
        if (!config.checkpoint_dir.empty()) {
          nlohmann::json dump = {{"epoch", epoch}, {"step", step}, {"report", to_json(report)}};
          nlohmann::json ids = nlohmann::json::array();
          for (const auto& p : batch_patches) ids.push_back({{"origin", p.origin}, {"transform", p.transform}});
          dump["patches"] = ids;
          detail::write_file_atomic(config.checkpoint_dir / "divergence_dump.json", dump.dump(2));
        }
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      const double lr = schedule.lr(step);
      std::vector<std::span<T>> ps{model.branch1.parameters()};
      std::vector<std::span<const T>> gs{model.branch1.gradients()};
      if (model.branch2) {
        ps.push_back(model.branch2->parameters());
        gs.push_back(std::span<const T>(model.branch2->gradients()));
      }
      adam.step(ps, gs, lr);
      result.steps.push_back({epoch, step, lr, report});
      if (log) log << to_json(result.steps.back()).dump() << "\n";
    }

    const double val = validation_loss(model.deployable(), norm, split.val);
    const bool improved = val < result.best_val_loss;
    result.epochs.push_back({epoch, val, improved});
    if (log) log << to_json(result.epochs.back()).dump() << "\n" << std::flush;
    if (improved) {
      result.best_val_loss = val;
      result.best_epoch = epoch;
      result.best = extract_inference_model(model, norm);
      if (!config.checkpoint_dir.empty())
        save_checkpoint(config.checkpoint_dir / "best", result.best,
                        {to_string(config.variant), config.config_hash, epoch, val});
    }
  }
  return result;
}

struct SweepRow {
  std::size_t n_anchors = 0;
  double val_loss = 0;
  double rrmse = 0;  // pixel level, on the test split (validation split if test is empty)
};

template <typename T = float>
std::vector<SweepRow> anchor_sweep(const DatasetSplit& split, const TrainConfig& config,
                                   std::span<const std::size_t> anchor_counts) {
  std::vector<SweepRow> rows;
  const auto& eval = split.test.empty() ? split.val : split.test;
  for (std::size_t count : anchor_counts) {
    if (count < 2) throw ConfigError("anchor counts must be >= 2");
    TrainConfig cfg = config;
    cfg.n_anchors = count;
    if (!config.checkpoint_dir.empty()) cfg.checkpoint_dir = config.checkpoint_dir / ("anchors_" + std::to_string(count));
    TrainResult<T> r = train<T>(split, cfg);
    const auto maps = predict(r.best, std::span<const PatchSample>(eval));
    rows.push_back({count, r.best_val_loss, pixel_metrics(maps, eval).rrmse});
  }
  return rows;
}

}  // namespace ctreg
