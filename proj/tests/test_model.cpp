#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "langseg/grad_check.hpp"
#include "langseg/model.hpp"
#include "langseg/sample.hpp"
#include "test_util.hpp"

namespace langseg {
namespace {

using testing::random_map;
using testing::TempDir;
using testing::tiny_config;

EmbeddingTable vocab(Index dim = 8) { return synth_vocab(default_vocabulary(0, dim)); }

TEST(Encoder, OutputShape) {
  ModelConfig c;
  c.encoder.height = 32;
  c.encoder.width = 32;
  c.encoder.downsample = 2;
  c.encoder.embed_dim = 64;
  ModelParameters<float> p(c, 0);
  std::mt19937_64 rng(0);
  const auto out = encode_image(p, random_map<float>(32, 32, 3, rng, 0, 1));
  EXPECT_EQ(out.shape_string(), "16x16x64");
}

TEST(Encoder, IdenticalImagesGiveIdenticalEmbeddings) {
  ModelParameters<float> p(tiny_config(), 4);
  std::mt19937_64 rng(1);
  const auto img = random_map<float>(8, 8, 3, rng, 0, 1);
  const DenseMapf copy = img;
  EXPECT_EQ(encode_image(p, img), encode_image(p, copy));
}

TEST(Encoder, RejectsWrongImageSize) {
  ModelParameters<float> p(tiny_config(), 0);
  EXPECT_THROW(encode_image(p, DenseMapf(12, 8, 3)), ShapeError);
  EXPECT_THROW(encode_image(p, DenseMapf(8, 8, 1)), ShapeError);
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
  const auto config = tiny_config(BlockKind::Depthwise, 0);
  const ModelParameters<double> p(config, 2);
  std::mt19937_64 rng(2);
  const auto image = random_map<double>(8, 8, 3, rng, 0, 1);
  const PixelMatrix<double> labels = random_map<double>(1, 3, 8, rng).matrix();
  LabelMap target(4, 4);
  std::uniform_int_distribution<int> pick(0, 2);
  for (Index i = 0; i < target.size(); ++i) target.data()[i] = pick(rng);

  // Jitter away from the init, where zero biases can leave pre-activations
  // exactly on a ReLU kink.
  std::vector<DenseMapd> params;
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  for (const auto& t : p.tensors()) {
    params.push_back(t.value);
    for (Index i = 0; i < t.value.size(); ++i) params.back().data()[i] += jitter(rng);
  }
  ScalarFunction f = [&](Tape<double>& t, std::span<const Var> vars) {
    Var pix = encode_image(t, config, vars, t.constant(image));
    return softmax_cross_entropy(t, correlate(t, pix, labels), target, 1.0);
  };
  EXPECT_LT(grad_check(f, params).max_relative_error, 1e-4);
}

TEST(Correlate, OrthonormalLabelsGiveOneHot) {
  PixelMatrix<double> t = PixelMatrix<double>::Identity(3, 3);
  DenseMapd pix(2, 2, 3);
  for (Index c = 0; c < 3; ++c) pix(1, 0, c) = t(2, c);
  const auto f = correlate(pix, t);
  EXPECT_DOUBLE_EQ(f(1, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(f(1, 0, 1), 0.0);
  EXPECT_DOUBLE_EQ(f(1, 0, 2), 1.0);
}

TEST(Correlate, RowPermutationPermutesChannels) {
  std::mt19937_64 rng(3);
  const auto pix = random_map<float>(4, 4, 6, rng);
  const PixelMatrix<float> t = random_map<float>(1, 5, 6, rng).matrix();
  const std::vector<Index> perm{3, 0, 4, 1, 2};
  PixelMatrix<float> tp(5, 6);
  for (Index k = 0; k < 5; ++k) tp.row(k) = t.row(perm[k]);
  const auto f = correlate(pix, t);
  const auto fp = correlate(pix, tp);
  for (Index p = 0; p < 16; ++p)
    for (Index k = 0; k < 5; ++k) EXPECT_EQ(fp.matrix()(p, k), f.matrix()(p, perm[k]));
}

TEST(Correlate, DimensionMismatchIsShapeError) {
  Tape<float> t;
  EXPECT_THROW(correlate(t, t.constant(DenseMapf(2, 2, 4)), PixelMatrix<float>(PixelMatrix<float>::Ones(2, 3))), ShapeError);
}

TEST(Regularizer, DepthZeroIsBitwiseIdentity) {
  std::mt19937_64 rng(4);
  const auto f = random_map<float>(4, 4, 5, rng);
  for (auto kind : {BlockKind::Depthwise, BlockKind::Bottleneck}) {
    ModelParameters<float> p(tiny_config(kind, 0), 1);
    EXPECT_EQ(regularize(f, p), f);
  }
}

void set_identity_blocks(ModelParameters<float>& p) {
  for (auto& t : p.tensors()) {
    if (t.name.rfind("reg", 0) != 0) continue;
    t.value.matrix().setZero();
    if (t.name.ends_with(".kernel")) t.value(t.value.height() / 2, t.value.width() / 2, 0) = 1.f;
  }
}

TEST(Regularizer, IdentityDepthwiseBlocksGiveRelu) {
  std::mt19937_64 rng(5);
  const auto f = random_map<float>(4, 4, 3, rng);
  DenseMapf expected = f;
  expected.matrix() = f.matrix().cwiseMax(0.f);

  ModelParameters<float> p(tiny_config(BlockKind::Depthwise, 2), 0);
  set_identity_blocks(p);
  EXPECT_EQ(regularize(f, p), expected);

  // A single block is also the last one, which keeps the raw values.
  ModelParameters<float> one(tiny_config(BlockKind::Depthwise, 1), 0);
  set_identity_blocks(one);
  EXPECT_EQ(regularize(f, one), f);
}

TEST(Regularizer, LabelPermutationEquivariance) {
  std::mt19937_64 rng(6);
  for (auto kind : {BlockKind::Depthwise, BlockKind::Bottleneck}) {
    for (int trial = 0; trial < 10; ++trial) {
      ModelParameters<float> p(tiny_config(kind, 3), static_cast<std::uint64_t>(trial));
      // Random kernels, not just the near-identity init.
      for (auto& t : p.tensors()) t.value = random_map<float>(t.value.height(), t.value.width(), t.value.channels(), rng);
      const auto f = random_map<float>(4, 4, 5, rng);
      std::vector<Index> perm(5);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      DenseMapf fp(4, 4, 5);
      for (Index k = 0; k < 5; ++k) fp.matrix().col(k) = f.matrix().col(perm[k]);
      const auto out = regularize(f, p);
      const auto outp = regularize(fp, p);
      for (Index k = 0; k < 5; ++k) {
        EXPECT_LE((outp.matrix().col(k) - out.matrix().col(perm[k])).cwiseAbs().maxCoeff(), 1e-6f)
            << to_string(kind) << " trial " << trial;
      }
    }
  }
}

TEST(Predict, SingleLabelGivesAllZeros) {
  const auto table = vocab();
  ModelParameters<float> p(tiny_config(), 7);
  std::mt19937_64 rng(7);
  const auto out = predict(p, random_map<float>(8, 8, 3, rng, 0, 1), LabelSet({"other"}), table);
  EXPECT_TRUE((out.label_map == 0).all());
  EXPECT_EQ(out.scores.channels(), 1);
}

TEST(Predict, SwappingLabelsSwapsIndices) {
  const auto table = vocab();
  std::mt19937_64 rng(8);
  for (auto kind : {BlockKind::Depthwise, BlockKind::Bottleneck}) {
    ModelParameters<float> p(tiny_config(kind, 2), 8);
    const auto img = random_map<float>(8, 8, 3, rng, 0, 1);
    const auto a = predict(p, img, LabelSet({"cat", "grass"}), table);
    const auto b = predict(p, img, LabelSet({"grass", "cat"}), table);
    EXPECT_TRUE((b.label_map == 1 - a.label_map).all()) << to_string(kind);
    EXPECT_EQ(a.scores.matrix().col(0), b.scores.matrix().col(1));
  }
}

// Without a cross-label block an appended label leaves the existing scores
// alone, so it can only take pixels whose winning score it beats.
TEST(Predict, AppendedLabelOnlyTakesPixelsItOutscores) {
  const auto table = vocab();
  std::mt19937_64 rng(9);
  for (Index depth : {0, 2}) {
    ModelParameters<float> p(tiny_config(BlockKind::Depthwise, depth), 9);
    for (int trial = 0; trial < 5; ++trial) {
      const auto img = random_map<float>(8, 8, 3, rng, 0, 1);
      const auto before = predict(p, img, LabelSet({"other", "cat", "car"}), table);
      const auto after = predict(p, img, LabelSet({"other", "cat", "car", "bread"}), table);
      const float new_max = after.scores.matrix().col(3).maxCoeff();
      for (Index px = 0; px < before.scores.pixels(); ++px) {
        const int k = before.label_map.data()[px];
        EXPECT_EQ(after.scores.matrix().row(px).head(3), before.scores.matrix().row(px));
        const float won = before.scores.matrix()(px, k);
        const float challenger = after.scores.matrix()(px, 3);
        const int expected = challenger > won ? 3 : k;
        EXPECT_EQ(after.label_map.data()[px], expected);
        if (won > new_max) EXPECT_EQ(after.label_map.data()[px], k);
      }
    }
  }
}

TEST(Predict, TableWidthMustMatchModel) {
  ModelParameters<float> p(tiny_config(), 0);
  EXPECT_THROW(predict(p, DenseMapf(8, 8, 3), LabelSet({"cat"}), vocab(16)), ShapeError);
}

TEST(Parameters, DepthDoesNotChangeEncoderInit) {
  const ModelParameters<float> a(tiny_config(BlockKind::Depthwise, 0), 3);
  const ModelParameters<float> b(tiny_config(BlockKind::Bottleneck, 4), 3);
  const auto n = encoder_tensor_count(a.config());
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(a.tensors()[i], b.tensors()[i]);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  ModelParameters<float> p(tiny_config(BlockKind::Depthwise, 3), 12);
  save_checkpoint(p, dir / "m.ckpt");
  const auto back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back, p);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(p));
}

TEST(Checkpoint, CorruptionIsDetected) {
  ModelParameters<float> p(tiny_config(), 1);
  auto bytes = serialize_checkpoint(p);
  auto bad_magic = bytes;
  bad_magic[1] ^= 0x20;
  EXPECT_THROW(parse_checkpoint(bad_magic), MagicMismatchError);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(parse_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, ConfigTextRoundTrip) {
  auto c = tiny_config(BlockKind::Depthwise, 5);
  c.normalize_embeddings = false;
  EXPECT_EQ(config_from_text(config_to_text(c)), c);
  EXPECT_THROW(config_from_text("height=8\n"), FormatError);
}

TEST(BlockKindNames, ParseAndPrint) {
  EXPECT_EQ(parse_block_kind("depthwise"), BlockKind::Depthwise);
  EXPECT_EQ(to_string(parse_block_kind(to_string(BlockKind::Bottleneck))), to_string(BlockKind::Bottleneck));
  EXPECT_THROW(parse_block_kind("dense"), ValidationError);
}

}  // namespace
}  // namespace langseg
