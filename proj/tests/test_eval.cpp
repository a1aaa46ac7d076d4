#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "langseg/eval.hpp"
#include "test_util.hpp"

namespace langseg {
namespace {

LabelMap random_labels(Index h, Index w, int n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, n - 1);
  LabelMap m(h, w);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = pick(rng);
  return m;
}

// Brute force: for every class build both pixel sets and intersect them.
double oracle_miou(const LabelMap& gt, const LabelMap& pred, int n) {
  double sum = 0;
  int present = 0;
  for (int k = 0; k < n; ++k) {
    std::set<Index> g, p;
    for (Index i = 0; i < gt.size(); ++i) {
      if (gt.data()[i] == k) g.insert(i);
      if (pred.data()[i] == k) p.insert(i);
    }
    std::set<Index> both, either = g;
    for (Index i : p) {
      if (g.count(i)) both.insert(i);
      either.insert(i);
    }
    if (either.empty()) continue;
    sum += static_cast<double>(both.size()) / static_cast<double>(either.size());
    ++present;
  }
  return sum / present;
}

double oracle_pixacc(const LabelMap& gt, const LabelMap& pred) {
  std::int64_t hit = 0;
  for (Index i = 0; i < gt.size(); ++i) hit += gt.data()[i] == pred.data()[i];
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

ConfusionMatrix confusion(const LabelMap& gt, const LabelMap& pred, std::size_t n) {
  ConfusionMatrix cm(n);
  cm.add(gt, pred);
  return cm;
}

TEST(Miou, PerfectPredictionIsOne) {
  std::mt19937_64 rng(0);
  const auto gt = random_labels(8, 8, 4, rng);
  EXPECT_EQ(miou(confusion(gt, gt, 4)).mean, 1.0);
}

TEST(Miou, FourPixelHandCount) {
  LabelMap gt(1, 4), pred(1, 4);
  gt << 0, 0, 1, 1;
  pred << 0, 1, 1, 1;
  const auto r = miou(confusion(gt, pred, 2));
  EXPECT_DOUBLE_EQ(*r.per_class[0], 1.0 / 2.0);
  EXPECT_DOUBLE_EQ(*r.per_class[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.mean, 7.0 / 12.0);
}

TEST(Miou, MatchesSetOracleOnRandomMaps) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + trial % 6;
    const auto gt = random_labels(16, 16, n, rng);
    const auto pred = random_labels(16, 16, n, rng);
    const auto cm = confusion(gt, pred, static_cast<std::size_t>(n + 1));  // one class never occurs
    EXPECT_EQ(miou(cm).mean, oracle_miou(gt, pred, n + 1));
    EXPECT_EQ(pixacc(cm), oracle_pixacc(gt, pred));
  }
}

TEST(Miou, AbsentClassIsExcluded) {
  LabelMap gt(1, 2), pred(1, 2);
  gt << 0, 1;
  pred << 0, 1;
  const auto r = miou(confusion(gt, pred, 3));
  EXPECT_FALSE(r.per_class[2].has_value());
  EXPECT_EQ(r.mean, 1.0);
  EXPECT_THROW(miou(ConfusionMatrix(3)), UndefinedMetricError);
}

TEST(FbIou, AllBackgroundIsOne) {
  const LabelMap zeros = LabelMap::Zero(4, 4);
  EXPECT_EQ(fb_iou(confusion(zeros, zeros, 3), 0), 1.0);
}

TEST(FbIou, SwappedHalvesIsZero) {
  LabelMap gt(2, 2), pred(2, 2);
  gt << 0, 0, 2, 2;
  pred << 1, 2, 0, 0;
  EXPECT_EQ(fb_iou(confusion(gt, pred, 3), 0), 0.0);
}

TEST(FbIou, EqualsMiouOfBinarizedLabels) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto gt = random_labels(16, 16, 4, rng);
    const auto pred = random_labels(16, 16, 4, rng);
    const std::size_t bg = static_cast<std::size_t>(trial % 4);
    LabelMap gb = (gt == static_cast<int>(bg)).select(LabelMap::Zero(16, 16), 1);
    LabelMap pb = (pred == static_cast<int>(bg)).select(LabelMap::Zero(16, 16), 1);
    EXPECT_EQ(fb_iou(confusion(gt, pred, 4), bg), oracle_miou(gb, pb, 2));
  }
}

TEST(PixAcc, UniformRandomTwoClassIsHalf) {
  std::mt19937_64 rng(3);
  const auto gt = random_labels(100, 100, 2, rng);
  const auto pred = random_labels(100, 100, 2, rng);
  const double acc = pixacc(confusion(gt, pred, 2));
  EXPECT_NEAR(acc, 0.5, 0.02);
  EXPECT_EQ(acc, oracle_pixacc(gt, pred));
  EXPECT_THROW(pixacc(ConfusionMatrix(2)), UndefinedMetricError);
}

TEST(Confusion, IgnoreAndMergeAndErrors) {
  LabelMap gt(1, 3), pred(1, 3);
  gt << 0, kIgnoreLabel, 1;
  pred << 0, 1, 0;
  ConfusionMatrix a(2);
  a.add(gt, pred);
  EXPECT_EQ(a.total(), 2);
  ConfusionMatrix b = a;
  b += a;
  EXPECT_EQ(b(1, 0), 2);
  pred(0, 0) = 5;
  EXPECT_THROW(a.add(gt, pred), ValidationError);
  EXPECT_THROW(a.add(gt, LabelMap::Zero(2, 2)), ValidationError);
}

TEST(Folds, ContiguousNearEqualSplit) {
  FoldSpec spec{benchmark_classes(), 4, 1};
  const auto a = spec.assignment();
  ASSERT_EQ(a.size(), 4u);
  for (const auto& f : a) EXPECT_EQ(f.size(), 3u);
  EXPECT_EQ(spec.unseen(), (std::vector<std::string>{"chair", "dog", "bus"}));
  EXPECT_EQ(spec.seen().size(), 9u);

  auto classes = benchmark_classes();
  classes.resize(10);
  FoldSpec ten{classes, 4, 3};
  std::vector<std::size_t> sizes;
  for (const auto& f : ten.assignment()) sizes.push_back(f.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 2, 2}));
}

ZeroShotConfig tiny_zero_shot() {
  ZeroShotConfig c;
  c.classes = {"cat", "car", "tree", "chair"};
  c.fold_count = 2;
  c.image_size = 16;
  c.train_images = 6;
  c.eval_images = 4;
  c.model = testing::tiny_config(BlockKind::Bottleneck, 1, 16, 64);
  c.train.max_steps = 6;
  return c;
}

TEST(ZeroShot, FoldHoldingEveryClassIsRejected) {
  const auto table = synth_vocab(default_vocabulary(0));
  auto c = tiny_zero_shot();
  c.fold_count = 1;
  EXPECT_THROW(zero_shot_fold_eval(table, c), ValidationError);
}

TEST(ZeroShot, TrainingNeverSeesUnseenClasses) {
  const auto table = synth_vocab(default_vocabulary(0));
  auto c = tiny_zero_shot();
  int audited = 0;
  c.on_train_set = [&](std::size_t fold, std::span<const TrainSample> samples) {
    const auto unseen = FoldSpec{c.classes, c.fold_count, fold}.unseen();
    for (const auto& s : samples) {
      for (const auto& u : unseen) EXPECT_FALSE(s.label_set.index_of(u).has_value()) << u;
    }
    ++audited;
  };
  const auto report = zero_shot_fold_eval(table, c);
  EXPECT_EQ(audited, 2);
  ASSERT_EQ(report.folds.size(), 2u);
  EXPECT_EQ(report.folds[1].unseen, (std::vector<std::string>{"tree", "chair"}));
  EXPECT_GT(report.folds[0].chance_miou, 0.0);
}

TEST(ZeroShot, IdenticalSynonymsScoreIdentically) {
  const auto table = synth_vocab(default_vocabulary(0, 64, 0.0));
  auto c = tiny_zero_shot();
  c.eval_aliases = {{"cat", "kitty"}, {"car", "automobile"}};
  const auto report = zero_shot_fold_eval(table, c);
  for (const auto& f : report.folds) {
    ASSERT_TRUE(f.alias_miou.has_value());
    EXPECT_EQ(*f.alias_miou, f.miou);
  }
}

TEST(ZeroShot, ReportFormats) {
  const auto table = synth_vocab(default_vocabulary(0));
  auto c = tiny_zero_shot();
  c.folds = {0};
  const auto report = zero_shot_fold_eval(table, c);
  std::ostringstream csv;
  write_zero_shot_csv(report, csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')),
            "fold,unseen,miou,object_miou,fb_iou,pixacc,chance_miou,chance_fb_iou,alias_miou");
  EXPECT_NE(format_zero_shot_table(report).find("fold0"), std::string::npos);
}

AblationConfig tiny_ablation() {
  AblationConfig c;
  c.classes = {"cat", "car"};
  c.image_size = 16;
  c.train_images = 4;
  c.eval_images = 3;
  c.model = testing::tiny_config(BlockKind::Depthwise, 0, 16, 64);
  c.train.max_steps = 4;
  return c;
}

TEST(Ablation, DepthTableShapeAndSharedBaseline) {
  const auto table = synth_vocab(default_vocabulary(0));
  const std::vector<Index> depths{0, 1, 2, 4};
  const auto rows = ablation_depth(table, tiny_ablation(), depths);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows[0].depth, 0);
  EXPECT_EQ(rows[4].depth, 0);
  EXPECT_EQ(rows[0].kind, BlockKind::Depthwise);
  EXPECT_EQ(rows[4].kind, BlockKind::Bottleneck);
  EXPECT_EQ(rows[0].miou, rows[4].miou);
  EXPECT_EQ(rows[0].pixacc, rows[4].pixacc);

  const auto text = format_depth_table(rows);
  int lines = 0;
  for (char ch : text) lines += ch == '\n';
  EXPECT_EQ(lines, 5);  // header + 2 kinds x 2 metrics
  EXPECT_NE(text.find("BottleneckBlock"), std::string::npos);
}

TEST(Ablation, EmbedDimShapeAndDeterminism) {
  const std::vector<Index> dims{8, 16};
  const auto a = ablation_embed_dim(default_vocabulary(0), tiny_ablation(), dims);
  const auto b = ablation_embed_dim(default_vocabulary(0), tiny_ablation(), dims);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].dim, dims[i]);
    EXPECT_EQ(a[i].miou, b[i].miou);
    EXPECT_EQ(a[i].pixacc, b[i].pixacc);
  }
  std::ostringstream csv;
  write_ablation_csv(a, csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "block,depth,dim,pixacc,miou");
}

}  // namespace
}  // namespace langseg
