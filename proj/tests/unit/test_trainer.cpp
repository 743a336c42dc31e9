#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "ctreg/trainer.hpp"
#include "support.hpp"

using namespace ctreg;

namespace {

DatasetSplit tiny_split(double labeled_share = 0.75) {
  DatasetSplit s;
  s.train = ctreg::testing::make_patches(8, 16, 3, 11, labeled_share, 7);
  s.val = ctreg::testing::make_patches(2, 16, 3, 12, 1.0, 7);
  s.test = ctreg::testing::make_patches(2, 16, 3, 13, 1.0, 7);
  return s;
}

TrainConfig tiny_config(Variant v) {
  TrainConfig c;
  c.variant = v;
  c.epochs = 2;
  c.batch_size = 4;
  c.n_anchors = 50;
  c.seed = 3;
  c.network.base_channels = 4;
  c.network.feature_channels = 8;
  c.network.embed_channels = 8;
  return c;
}

std::vector<std::string> lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Variant, NamesRoundTrip) {
  for (Variant v : {Variant::unet, Variant::cpr, Variant::ctrl, Variant::hybrid})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("transformer"), ConfigError);
  EXPECT_TRUE(traits_of(Variant::hybrid).dual && traits_of(Variant::hybrid).contrastive);
  EXPECT_FALSE(traits_of(Variant::unet).uses_unlabeled);
  EXPECT_TRUE(traits_of(Variant::cpr).uses_unlabeled);
  EXPECT_FALSE(traits_of(Variant::ctrl).dual);
}

TEST(Trainer, AllVariantsTrainAndProduceFiniteLoss) {
  const auto split = tiny_split();
  for (Variant v : {Variant::unet, Variant::cpr, Variant::ctrl, Variant::hybrid}) {
    const auto r = train<float>(split, tiny_config(v));
    ASSERT_EQ(r.epochs.size(), 2u) << to_string(v);
    EXPECT_GE(r.best_epoch, 0);
    EXPECT_TRUE(std::isfinite(r.best_val_loss));
    const bool dual = traits_of(v).dual;
    for (const auto& s : r.steps) {
      EXPECT_EQ(s.report.l_consistency != 0.0, dual) << to_string(v);
      if (!traits_of(v).contrastive) {
        EXPECT_EQ(s.report.l_ctrl, 0.0);
      }
    }
    EXPECT_FALSE(r.best.branch.has_projector());
  }
}

TEST(Trainer, StepCountFollowsTrainingSet) {
  const auto split = tiny_split();
  // 6 labeled of 8: unet sees 6 patches (2 batches), cpr sees all 8 (2 batches), batch 3 splits them apart.
  auto c = tiny_config(Variant::unet);
  c.batch_size = 3;
  EXPECT_EQ(train<float>(split, c).steps.size(), 4u);
  c.variant = Variant::cpr;
  EXPECT_EQ(train<float>(split, c).steps.size(), 6u);
}

TEST(Trainer, UnlabeledPatchesDoNotAffectSupervisedVariants) {
  const auto split = tiny_split();
  DatasetSplit labeled_only = split;
  std::erase_if(labeled_only.train, [](const auto& p) { return !p.labeled; });
  for (Variant v : {Variant::unet, Variant::ctrl}) {
    const auto a = train<float>(split, tiny_config(v));
    const auto b = train<float>(labeled_only, tiny_config(v));
    ASSERT_EQ(a.steps.size(), b.steps.size());
    for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(a.steps[i].report.total, b.steps[i].report.total);
  }
}

TEST(Trainer, DeterministicLogs) {
  const auto split = tiny_split();
  auto c = tiny_config(Variant::hybrid);
  c.checkpoint_dir = ctreg::testing::scratch_dir("trainer_det_a");
  train<float>(split, c);
  const auto first = lines(c.checkpoint_dir / "train_log.jsonl");
  c.checkpoint_dir = ctreg::testing::scratch_dir("trainer_det_b");
  train<float>(split, c);
  EXPECT_EQ(first, lines(c.checkpoint_dir / "train_log.jsonl"));
  c.seed = 4;
  c.checkpoint_dir = ctreg::testing::scratch_dir("trainer_det_c");
  train<float>(split, c);
  EXPECT_NE(first, lines(c.checkpoint_dir / "train_log.jsonl"));
}

TEST(Trainer, LogSchemaAndCheckpoint) {
  auto c = tiny_config(Variant::hybrid);
  c.checkpoint_dir = ctreg::testing::scratch_dir("trainer_log");
  const auto r = train<float>(tiny_split(), c);
  const auto log = lines(c.checkpoint_dir / "train_log.jsonl");
  ASSERT_EQ(log.size(), r.steps.size() + r.epochs.size());
  const auto step = nlohmann::ordered_json::parse(log.front());
  std::vector<std::string> keys;
  for (const auto& [k, v] : step.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"epoch", "step", "lr", "l1", "l2", "l_c", "l_ctrl", "l_wd", "total",
                                            "n_anchors"}));
  EXPECT_GT(step["l_ctrl"].get<double>(), 0.0);
  EXPECT_GT(step["l_c"].get<double>(), 0.0);
  EXPECT_EQ(step["n_anchors"].get<std::size_t>(), 50u);
  const auto epoch = nlohmann::json::parse(log[r.steps.size() / 2]);
  EXPECT_TRUE(epoch.contains("val_loss"));

  CheckpointMeta meta;
  const auto loaded = load_checkpoint<float>(c.checkpoint_dir / "best.json", &meta);
  EXPECT_EQ(meta.variant, "hybrid");
  EXPECT_EQ(meta.epoch, r.best_epoch);
  const auto test = tiny_split().test;
  auto best = r.best;
  auto reloaded = loaded;
  const auto a = best.forward(test), b = reloaded.forward(test);
  EXPECT_TRUE(std::ranges::equal(a.values(), b.values()));
}

TEST(Trainer, NonFiniteLossRaisesAndDumps) {
  auto split = tiny_split(1.0);
  for (auto& p : split.train) p.reference[1] = std::numeric_limits<float>::quiet_NaN();
  auto c = tiny_config(Variant::unet);
  c.checkpoint_dir = ctreg::testing::scratch_dir("trainer_div");
  EXPECT_THROW(train<float>(split, c), DivergenceError);
  const auto dump = nlohmann::json::parse(detail::read_file(c.checkpoint_dir / "divergence_dump.json"));
  EXPECT_EQ(dump["step"], 0);
  EXPECT_EQ(dump["patches"].size(), 4u);
}

TEST(Trainer, RequiresLabelsAndValidation) {
  auto split = tiny_split(0.0);
  EXPECT_THROW(train<float>(split, tiny_config(Variant::cpr)), ContractError);
  split = tiny_split();
  split.val.clear();
  EXPECT_THROW(train<float>(split, tiny_config(Variant::unet)), ContractError);
  auto c = tiny_config(Variant::unet);
  c.epochs = 0;
  EXPECT_THROW(train<float>(tiny_split(), c), ConfigError);
}

TEST(Trainer, ObjectiveSkipsContrastiveWhenTooFewPixels) {
  auto patches = ctreg::testing::make_patches(1, 8, 2, 21, 1.0);
  for (std::size_t i = 1; i < patches[0].pixels(); ++i) patches[0].forest_mask[i] = 0;
  NetworkConfig net;
  net.in_channels = 2;
  net.base_channels = 4;
  net.feature_channels = 8;
  net.embed_channels = 8;
  DualBranchModel<double> model(net, true, true, 1);
  const auto x = InputNormalizer<double>::identity(2).batch(std::span<const PatchSample>(patches));
  const auto r = objective(model, x, std::span<const PatchSample>(patches), LossConfig{}, true, 10, 5, true);
  EXPECT_EQ(r.l_ctrl, 0.0);
  EXPECT_EQ(r.n_anchors_used, 0u);
  EXPECT_TRUE(std::isfinite(r.total));
}

TEST(Trainer, PredictWritesNodataOffForest) {
  const auto split = tiny_split();
  auto r = train<float>(split, tiny_config(Variant::unet));
  const auto maps = predict(r.best, std::span<const PatchSample>(split.test));
  ASSERT_EQ(maps.size(), split.test.size());
  for (std::size_t k = 0; k < maps.size(); ++k)
    for (std::size_t i = 0; i < maps[k].size(); ++i) {
      if (!split.test[k].forest_mask[i]) EXPECT_EQ(maps[k][i], split.test[k].inputs.nodata);
      else EXPECT_TRUE(std::isfinite(maps[k][i]));
    }
  auto wrong = ctreg::testing::make_patches(1, 16, 5, 30);
  EXPECT_THROW(predict(r.best, std::span<const PatchSample>(wrong)), ContractError);
}

TEST(Trainer, AnchorSweepIsDeterministic) {
  const auto split = tiny_split();
  auto c = tiny_config(Variant::hybrid);
  c.epochs = 1;
  const std::vector<std::size_t> counts{10, 40};
  const auto a = anchor_sweep<float>(split, c, counts);
  const auto b = anchor_sweep<float>(split, c, counts);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a[i].n_anchors, counts[i]);
    EXPECT_EQ(a[i].val_loss, b[i].val_loss);
    EXPECT_EQ(a[i].rrmse, b[i].rrmse);
  }
  const std::vector<std::size_t> bad{1};
  EXPECT_THROW(anchor_sweep<float>(split, c, bad), ConfigError);
}
