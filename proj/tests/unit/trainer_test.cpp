#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "json.hpp"
#include "modelmix/checkpoint.hpp"
#include "modelmix/io_util.hpp"
#include "modelmix/trainer.hpp"
#include "test_util.hpp"

using namespace modelmix;

namespace {

const std::pair<TaskDataset, TaskDataset>& tiny_pair() {
  static const auto pair = [] {
    SynthConfig c;
    c.size = 32;
    c.labeled = 2;
    c.unlabeled = 3;
    c.val = 2;
    c.test = 2;
    c.min_lesion_pixels = 10;
    return generate_task_pair(17, c);
  }();
  return pair;
}

TrainConfig tiny_config(int variant) {
  TrainConfig c;
  c.unet.depth = 2;
  c.unet.base_channels = 4;
  c.batch_size = 2;
  c.epochs = 1;
  c.variant = variant;
  c.seed = 5;
  return c;
}

Batch first_items(const TaskDataset& ds, std::size_t n) {
  Batch b = ds.split(Split::kTrain);
  b.resize(n);
  return b;
}

std::vector<Tensor4<float>> snapshot(const SegModel<float>& m) {
  std::vector<Tensor4<float>> out;
  for (const auto& p : m.parameters()) out.push_back(p.value());
  return out;
}

bool changed(const std::vector<Tensor4<float>>& before, const SegModel<float>& m) {
  const auto now = snapshot(m);
  for (std::size_t k = 0; k < now.size(); ++k)
    if (now[k] != before[k]) return true;
  return false;
}

}  // namespace

TEST(TrainStep, VariantOneIsPartialCeOnly) {
  const auto& [s, p] = tiny_pair();
  ModelMixTrainer tr(tiny_config(1), s, p);
  SeededRng rng(1);
  const StepResult r = tr.train_step(first_items(s, 2), first_items(p, 2), rng);
  EXPECT_EQ(r.breakdown.inv, 0.0);
  EXPECT_EQ(r.breakdown.vicinal_sup, 0.0);
  EXPECT_EQ(r.breakdown.vicinal_reg, 0.0);
  EXPECT_GT(r.breakdown.pce, 0.0);
  EXPECT_EQ(r.breakdown.total, r.breakdown.pce);
  EXPECT_FALSE(r.mix[0].has_value());
}

TEST(TrainStep, DisabledPartsAreExactlyZero) {
  const auto& [s, p] = tiny_pair();
  for (int v = 1; v <= 5; ++v) {
    ModelMixTrainer tr(tiny_config(v), s, p);
    SeededRng rng(2);
    const StepResult r = tr.train_step(first_items(s, 2), first_items(p, 2), rng);
    const VariantSpec spec = variant_spec(v);
    if (!spec.inv) EXPECT_EQ(r.breakdown.inv, 0.0) << v;
    if (!spec.vicinal_sup) EXPECT_EQ(r.breakdown.vicinal_sup, 0.0) << v;
    if (!spec.vicinal_reg) EXPECT_EQ(r.breakdown.vicinal_reg, 0.0) << v;
    EXPECT_TRUE(std::isfinite(r.breakdown.total));
    EXPECT_NEAR(r.breakdown.total,
                r.breakdown.pce + r.breakdown.inv + r.breakdown.vicinal_sup + r.breakdown.vicinal_reg, 1e-12);
  }
}

TEST(TrainStep, LambdaOneWithIdenticalEncodersGivesMinusTwo) {
  const auto& [s, p] = tiny_pair();
  ModelMixTrainer tr(tiny_config(4), s, p);
  for (const auto& addr : tr.model(0).enumerate_encoder_layers()) tr.model(1).set_conv(addr, tr.model(0).get_conv(addr));
  tr.forced_lambda = 1.0;
  SeededRng rng(3);
  const StepResult r = tr.train_step(first_items(s, 2), first_items(p, 2), rng);
  EXPECT_NEAR(r.breakdown.vicinal_reg, -2.0, 1e-6);
  ASSERT_TRUE(r.mix[0] && r.mix[1]);
  EXPECT_EQ(r.mix[0]->lambda, 1.0);
  EXPECT_EQ(r.mix[0]->task_i, s.name);
  EXPECT_EQ(r.mix[1]->task_i, p.name);
}

TEST(TrainStep, DeterministicForSeed) {
  const auto& [s, p] = tiny_pair();
  std::vector<LossBreakdown> runs;
  for (int k = 0; k < 2; ++k) {
    ModelMixTrainer tr(tiny_config(4), s, p);
    SeededRng rng(4);
    tr.train_step(first_items(s, 2), first_items(p, 2), rng);
    runs.push_back(tr.train_step(first_items(s, 2), first_items(p, 2), rng).breakdown);
  }
  EXPECT_EQ(runs[0], runs[1]);
}

TEST(TrainStep, MixingUpdatesBothModels) {
  const auto& [s, p] = tiny_pair();
  ModelMixTrainer tr(tiny_config(4), s, p);
  tr.forced_lambda = 0.5;
  const auto b0 = snapshot(tr.model(0)), b1 = snapshot(tr.model(1));
  SeededRng rng(5);
  tr.train_step(first_items(s, 2), first_items(p, 2), rng);
  EXPECT_TRUE(changed(b0, tr.model(0)));
  EXPECT_TRUE(changed(b1, tr.model(1)));
}

TEST(TrainStep, SharedEncoderForVariantFive) {
  const auto& [s, p] = tiny_pair();
  ModelMixTrainer tr(tiny_config(5), s, p);
  SeededRng rng(6);
  tr.train_step(first_items(s, 2), first_items(p, 2), rng);
  for (const auto& addr : tr.model(0).enumerate_encoder_layers()) {
    EXPECT_EQ(tr.model(0).get_conv(addr), tr.model(1).get_conv(addr));
  }
  ModelMixTrainer separate(tiny_config(4), s, p);
  EXPECT_NE(separate.model(0).get_conv(LayerAddress{0, 0}), separate.model(1).get_conv(LayerAddress{0, 0}));
}

TEST(Adam, ZeroGradientLeavesParametersAndAliasesUpdateOnce) {
  Var<float> a = Var<float>::leaf(Tensor4<float>(Shape4{1, 1, 1, 2}, std::vector<float>{1.0f, -2.0f}), true);
  Var<float> b = Var<float>::leaf(Tensor4<float>(Shape4{1, 1, 1, 1}, std::vector<float>{3.0f}), true);
  Adam opt({a, b, a}, 0.1);
  EXPECT_EQ(opt.parameter_count(), 2u);
  opt.step();
  EXPECT_EQ(a.value()[0], 1.0f);
  EXPECT_EQ(b.value()[0], 3.0f);

  a.node()->grad = Tensor4<float>(Shape4{1, 1, 1, 2}, std::vector<float>{0.5f, -4.0f});
  opt.step();
  // Second step, first with a gradient: |update| = lr * (0.1 / 0.19) / sqrt(0.001 / (1 - 0.999^2)).
  const double move = 0.1 * (0.1 / 0.19) / std::sqrt(0.001 / (1.0 - 0.999 * 0.999));
  EXPECT_NEAR(a.value()[0], 1.0 - move, 1e-6);
  EXPECT_NEAR(a.value()[1], -2.0 + move, 1e-6);
  EXPECT_EQ(b.value()[0], 3.0f);
  opt.zero_grad();
  EXPECT_FALSE(a.has_grad());
}

TEST(Adam, MatchesReferenceRecurrence) {
  Var<float> w = Var<float>::leaf(Tensor4<float>(Shape4{1, 1, 1, 1}, std::vector<float>{0.0f}), true);
  Adam opt({w}, 0.01);
  double m = 0.0, v = 0.0, x = 0.0;
  const double grads[] = {1.0, -0.5, 2.0, 0.25};
  for (int t = 1; t <= 4; ++t) {
    const double g = grads[t - 1];
    w.node()->grad = Tensor4<float>(Shape4{1, 1, 1, 1}, std::vector<float>{static_cast<float>(g)});
    opt.step();
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(w.value()[0], x, 1e-6);
  }
  EXPECT_EQ(opt.step_count(), 4u);
}

TEST(Sampler, SingleStreamPassesAndCycles) {
  const auto& [s, p] = tiny_pair();
  const Batch pool = s.split(Split::kTrain);  // 5 items
  SeededRng rng(7);
  BatchSampler longest(pool, 2, 0, 5);
  EXPECT_EQ(longest.steps_per_epoch(), 3u);
  for (int epoch = 0; epoch < 2; ++epoch) {
    longest.begin_epoch(rng);
    std::map<const DatasetItem*, int> seen;
    std::vector<std::size_t> sizes;
    for (std::size_t k = 0; k < 3; ++k) {
      const Batch b = longest.next(k, rng);
      sizes.push_back(b.size());
      for (auto* it : b) ++seen[it];
    }
    EXPECT_EQ(sizes, (std::vector<std::size_t>{2, 2, 1}));
    EXPECT_EQ(seen.size(), 5u);
  }
  Batch short_pool(pool.begin(), pool.begin() + 3);
  BatchSampler cycling(short_pool, 2, 0, 5);
  cycling.begin_epoch(rng);
  std::map<const DatasetItem*, int> seen;
  for (std::size_t k = 0; k < 3; ++k) {
    const Batch b = cycling.next(k, rng);
    EXPECT_EQ(b.size(), 2u);
    for (auto* it : b) ++seen[it];
  }
  for (const auto& [it, n] : seen) EXPECT_GE(n, 1);
  EXPECT_EQ(seen.size(), 3u);
}

TEST(Sampler, LabeledQuotaPerBatch) {
  const auto& [s, p] = tiny_pair();
  const Batch pool = s.split(Split::kTrain);  // 2 labeled, 3 unlabeled
  SeededRng rng(8);
  BatchSampler sampler(pool, 3, 1, 5);
  for (std::size_t k = 0; k < 10; ++k) {
    const Batch b = sampler.next(k % sampler.steps_per_epoch(), rng);
    ASSERT_EQ(b.size(), 3u);
    EXPECT_EQ(std::count_if(b.begin(), b.end(), [](const DatasetItem* it) { return it->labeled; }), 1);
  }
  Batch unlabeled_only;
  for (auto* it : pool)
    if (!it->labeled) unlabeled_only.push_back(it);
  BatchSampler fallback(unlabeled_only, 2, 1, 5);
  EXPECT_EQ(fallback.next(0, rng).size(), 2u);
  EXPECT_THROW(BatchSampler(Batch{}, 2, 0, 5), ContractViolation);
}

TEST(Train, SmokeRunWritesCheckpointsAndHistory) {
  TempDir dir;
  const auto& [s, p] = tiny_pair();
  TrainConfig cfg = tiny_config(4);
  cfg.epochs = 2;
  const TrainResult r = train(cfg, s, p, dir.path());
  ASSERT_EQ(r.checkpoints.size(), 2u);
  for (const auto& path : r.checkpoints) EXPECT_TRUE(std::filesystem::exists(path));
  EXPECT_EQ(load_checkpoint(r.checkpoints[1]).task_id(), p.name);
  EXPECT_EQ(r.history.steps.size(), 2u * 3u);
  EXPECT_EQ(r.history.epochs.size(), 2u);
  const auto j = nlohmann::json::parse(read_text_file(dir / "history.json"));
  EXPECT_EQ(j["steps"].size(), 6u);
  EXPECT_EQ(j["epochs"].size(), 2u);
  const std::string csv = read_text_file(dir / "steps.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_EQ(config_from_json(read_text_file(dir / "config.json")).variant, 4);
}

TEST(Train, DeterministicHistoriesAndCheckpoints) {
  TempDir a, b;
  const auto& [s, p] = tiny_pair();
  TrainConfig cfg = tiny_config(4);
  cfg.epochs = 2;
  const TrainResult ra = train(cfg, s, p, a.path());
  const TrainResult rb = train(cfg, s, p, b.path());
  EXPECT_EQ(ra.history.steps_csv(), rb.history.steps_csv());
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_EQ(read_file_bytes(ra.checkpoints[t]), read_file_bytes(rb.checkpoints[t]));
  }
}

TEST(Train, NoLabeledItemsWarnsAndSkipsScribbleLosses) {
  auto [s, p] = tiny_pair();
  for (auto& it : p.items) {
    it.labeled = false;
    it.scribble = ScribbleMap(it.label.h, it.label.w, p.num_classes);
  }
  TrainConfig cfg = tiny_config(3);
  const TrainResult r = train(cfg, s, p);
  ASSERT_EQ(r.history.warnings.size(), 1u);
  EXPECT_NE(r.history.warnings[0].find(p.name), std::string::npos);
  for (const auto& step : r.history.steps) EXPECT_TRUE(std::isfinite(step.loss.total));

  ModelMixTrainer tr(cfg, s, p);
  SeededRng rng(9);
  const StepResult one = tr.train_step(first_items(s, 2), first_items(p, 2), rng);
  EXPECT_EQ(one.annotated[1], 0u);
  EXPECT_GT(one.annotated[0], 0u);
}

TEST(Config, JsonRoundTripAndValidation) {
  TrainConfig c = tiny_config(3);
  c.task_pairs = {{"/data/a", "/data/b"}};
  c.beta_lambda = {2.0, 3.0};
  c.lr = 5e-4;
  c.labeled_per_batch = 1;
  c.loss_weights.vicinal_reg = 0.5;
  const TrainConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(back.beta_lambda, c.beta_lambda);
  EXPECT_EQ(back.labeled_per_batch, 1u);

  const TrainConfig rel = config_from_json(R"({"task_pairs": [["a", "b"]], "epochs": 3})", "/base");
  EXPECT_EQ(rel.task_pairs[0].first, "/base/a");
  EXPECT_EQ(rel.epochs, 3u);
  EXPECT_THROW(config_from_json(R"({"epoch": 3})"), ContractViolation);
  EXPECT_THROW(config_from_json(R"({"variant": 6})"), ContractViolation);
  EXPECT_THROW(config_from_json(R"({"lr": -1})"), ContractViolation);
  EXPECT_THROW(config_from_json(R"({"batch_size": 2, "labeled_per_batch": 3})"), ContractViolation);
  EXPECT_THROW(config_from_json("{"), ContractViolation);
}

TEST(Ablation, TableHasOneRowPerVariant) {
  TempDir dir;
  const auto& [s, p] = tiny_pair();
  const AblationTable t = run_ablation(tiny_config(4), s, p, {1, 2, 3, 4, 5}, {0}, dir.path());
  ASSERT_EQ(t.runs.size(), 5u);
  const std::string csv = t.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  const std::string header = csv.substr(0, csv.find('\n'));
  // variant + (mean, std) per foreground class + task average per task + overall average
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 2 * 2 + 1 + 2 * 1 + 1 + 1);
  EXPECT_TRUE(std::filesystem::exists(dir / "ablation.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "v3_s0" / "history.json"));
  for (const auto& run : t.runs) {
    EXPECT_NEAR(run.mean_dice, (run.test[0].mean_dice + run.test[1].mean_dice) / 2.0, 1e-12);
    EXPECT_NEAR(t.variant_mean_dice(run.variant), run.mean_dice, 1e-12);
  }
}
