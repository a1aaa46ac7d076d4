#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "langseg/dense_map.hpp"
#include "langseg/embeddings.hpp"
#include "langseg/hash.hpp"
#include "langseg/ops.hpp"
#include "langseg/tape.hpp"

namespace langseg {

enum class BlockKind { Depthwise, Bottleneck };

std::string to_string(BlockKind kind);
BlockKind parse_block_kind(std::string_view s);

/// Dense image encoder: patch embedding, residual depthwise/pointwise
/// mixing, projection to the embedding width, then bilinear upsampling from
/// the patch grid to H/downsample x W/downsample.
struct EncoderConfig {
  Index height = 64;
  Index width = 64;
  Index downsample = 2;
  Index embed_dim = 64;
  Index hidden = 32;
  Index mixing_layers = 2;
  Index patch_size = 4;

  void validate() const;
  /// Throws ShapeError unless an image of this size can be encoded.
  void check_image(Index h, Index w, Index c) const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct RegularizerConfig {
  BlockKind kind = BlockKind::Bottleneck;
  Index depth = 2;
  Index kernel = 3;

  void validate() const;
  friend bool operator==(const RegularizerConfig&, const RegularizerConfig&) = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  RegularizerConfig regularizer;
  // L2-normalise pixel and label embeddings before correlating them.
  bool normalize_embeddings = true;

  void validate() const {
    encoder.validate();
    regularizer.validate();
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorSpec {
  std::string name;
  Index height;
  Index width;
  Index channels;
  // Gaussian init N(init_mean, init_std^2); `identity_center` adds 1 at the
  // kernel centre.
  double init_std;
  bool identity_center = false;
  double init_mean = 0.0;
};

/// Names, shapes and init of every trainable tensor, encoder first.
std::vector<TensorSpec> parameter_layout(const ModelConfig& config);

/// Number of leading layout entries that belong to the encoder.
std::size_t encoder_tensor_count(const ModelConfig& config);

template <typename Scalar>
struct NamedTensor {
  std::string name;
  DenseMap<Scalar> value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// All trainable weights. Every tensor is drawn from its own RNG stream keyed
/// by (seed, name), so e.g. regularizer depth does not perturb encoder init.
template <typename Scalar>
class ModelParameters {
 public:
  ModelParameters() = default;

  ModelParameters(ModelConfig config, std::uint64_t seed) : config_(config), seed_(seed) {
    config_.validate();
    for (const auto& spec : parameter_layout(config_)) {
      DenseMap<Scalar> t(spec.height, spec.width, spec.channels);
      std::mt19937_64 rng(mix_seed(seed ^ fnv1a64(spec.name)));
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(spec.init_mean + spec.init_std * gauss(rng));
      if (spec.identity_center) {
        for (Index c = 0; c < t.channels(); ++c) t(spec.height / 2, spec.width / 2, c) += Scalar(1);
      }
      tensors_.push_back({spec.name, std::move(t)});
    }
  }

  /// Adopts externally provided tensors after checking them against the layout.
  ModelParameters(ModelConfig config, std::uint64_t seed, std::vector<NamedTensor<Scalar>> tensors)
      : config_(config), seed_(seed), tensors_(std::move(tensors)) {
    config_.validate();
    const auto layout = parameter_layout(config_);
    if (layout.size() != tensors_.size()) {
      throw ShapeError("expected " + std::to_string(layout.size()) + " tensors, got " +
                       std::to_string(tensors_.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& s = layout[i];
      const auto& t = tensors_[i];
      if (t.name != s.name || t.value.height() != s.height || t.value.width() != s.width ||
          t.value.channels() != s.channels) {
        throw ShapeError("tensor '" + t.name + "' " + t.value.shape_string() + " does not match layout entry '" +
                         s.name + "'");
      }
      if (!t.value.all_finite()) throw NumericError("tensor '" + t.name + "' is not finite");
    }
  }

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  std::vector<NamedTensor<Scalar>>& tensors() { return tensors_; }
  const std::vector<NamedTensor<Scalar>>& tensors() const { return tensors_; }

  const DenseMap<Scalar>& operator[](std::string_view name) const { return tensors_[index_of(name)].value; }
  DenseMap<Scalar>& operator[](std::string_view name) { return tensors_[index_of(name)].value; }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name == name) return i;
    }
    throw ValidationError("no parameter named '" + std::string(name) + "'");
  }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& t : tensors_) n += t.value.size();
    return n;
  }

  template <typename Other>
  ModelParameters<Other> cast() const {
    std::vector<NamedTensor<Other>> out;
    for (const auto& t : tensors_) out.push_back({t.name, t.value.template cast<Other>()});
    return ModelParameters<Other>(config_, seed_, std::move(out));
  }

  friend bool operator==(const ModelParameters&, const ModelParameters&) = default;

 private:
  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<NamedTensor<Scalar>> tensors_;
};

/// Puts every parameter on `tape`, as leaves when `trainable`, in layout order.
template <typename Scalar>
std::vector<Var> bind_parameters(Tape<Scalar>& tape, const ModelParameters<Scalar>& params, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(params.tensors().size());
  for (const auto& t : params.tensors()) vars.push_back(trainable ? tape.parameter(t.value) : tape.constant(t.value));
  return vars;
}

/// Image (H x W x 3) -> pixel embeddings (H/s x W/s x C).
/// `vars` holds the bound parameters in layout order.
template <typename Scalar>
Var encode_image(Tape<Scalar>& tape, const ModelConfig& config, std::span<const Var> vars, Var image) {
  const auto& enc = config.encoder;
  const auto& img = tape.value(image);
  enc.check_image(img.height(), img.width(), img.channels());
  std::size_t i = 0;
  auto next = [&] { return vars[i++]; };

  Var patches = space_to_depth(tape, image, enc.patch_size);
  Var pw = next(), pb = next();
  Var h = relu(tape, pointwise(tape, patches, pw, pb));
  for (Index l = 0; l < enc.mixing_layers; ++l) {
    Var dk = next(), db = next(), mw = next(), mb = next();
    Var mixed = pointwise(tape, relu(tape, conv_depthwise(tape, h, dk, db)), mw, mb);
    h = add(tape, h, mixed);
  }
  Var w = next(), b = next();
  Var projected = pointwise(tape, h, w, b);
  return bilinear_upsample(tape, projected, enc.patch_size / enc.downsample);
}

/// Label-equivariant spatial regularization of the correlation volume. Each
/// block uses one k x k kernel shared by all label channels, so no weight
/// ever mixes labels. Depthwise: relu(conv(F)). Bottleneck:
/// relu(conv(F + max_k F)). The last block skips the ReLU so the logits
/// can never all be clamped to zero. Depth 0 returns `logits` unchanged.
template <typename Scalar>
Var regularize(Tape<Scalar>& tape, const ModelConfig& config, std::span<const Var> vars, Var logits) {
  const auto& reg = config.regularizer;
  std::size_t i = encoder_tensor_count(config);
  Var x = logits;
  const Index n = tape.value(logits).channels();
  for (Index d = 0; d < reg.depth; ++d) {
    Var kernel = tile_channels(tape, vars[i++], n);
    Var bias = tile_channels(tape, vars[i++], n);
    Var in = x;
    if (reg.kind == BlockKind::Bottleneck) in = add(tape, x, channel_max(tape, x));
    x = conv_depthwise(tape, in, kernel, bias);
    if (d + 1 < reg.depth) x = relu(tape, x);
  }
  return x;
}

/// Full-resolution logits H x W x N for `labels` (N x C raw label embeddings).
template <typename Scalar>
Var forward_logits(Tape<Scalar>& tape, const ModelConfig& config, std::span<const Var> vars, Var image,
                   const PixelMatrix<Scalar>& labels) {
  Var pixel = encode_image(tape, config, vars, image);
  PixelMatrix<Scalar> t = labels;
  if (config.normalize_embeddings) {
    pixel = l2_normalize(tape, pixel);
    t = normalize_rows<Scalar>(std::move(t));
  }
  Var f = correlate(tape, pixel, t);
  f = regularize(tape, config, vars, f);
  return bilinear_upsample(tape, f, config.encoder.downsample);
}

// Tape-free conveniences ------------------------------------------------------

template <typename Scalar>
DenseMap<Scalar> encode_image(const ModelParameters<Scalar>& params, const DenseMap<Scalar>& image) {
  Tape<Scalar> tape;
  const auto vars = bind_parameters(tape, params, false);
  return tape.value(encode_image(tape, params.config(), vars, tape.constant(image)));
}

template <typename Scalar>
DenseMap<Scalar> correlate(const DenseMap<Scalar>& pixel, const PixelMatrix<Scalar>& labels) {
  Tape<Scalar> tape;
  return tape.value(correlate(tape, tape.constant(pixel), labels));
}

template <typename Scalar>
DenseMap<Scalar> regularize(const DenseMap<Scalar>& logits, const ModelParameters<Scalar>& params) {
  Tape<Scalar> tape;
  const auto vars = bind_parameters(tape, params, false);
  return tape.value(regularize(tape, params.config(), vars, tape.constant(logits)));
}

/// Per-pixel index of the largest channel; ties go to the lowest index.
template <typename Scalar>
LabelMap argmax_channels(const DenseMap<Scalar>& scores) {
  LabelMap out(scores.height(), scores.width());
  const Index C = scores.channels();
  for (Index p = 0; p < scores.pixels(); ++p) {
    const Scalar* row = scores.data() + p * C;
    Index best = 0;
    for (Index c = 1; c < C; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out.data()[p] = static_cast<std::int32_t>(best);
  }
  return out;
}

struct SegmentationOutput {
  LabelMap label_map;  // H x W, argmax of scores
  DenseMapf scores;    // H x W x N logits before temperature scaling
  LabelSet legend;
};

/// encode -> correlate -> regularize -> upsample -> argmax at input resolution.
template <typename Scalar>
SegmentationOutput predict(const ModelParameters<Scalar>& params, const DenseMap<Scalar>& image,
                           const LabelSet& labels, const EmbeddingTable& table) {
  if (table.dimension() != params.config().encoder.embed_dim) {
    throw ShapeError("embedding table dimension " + std::to_string(table.dimension()) +
                     " does not match model embedding width " +
                     std::to_string(params.config().encoder.embed_dim));
  }
  const auto t = embed_labels<Scalar>(table, labels);
  Tape<Scalar> tape;
  const auto vars = bind_parameters(tape, params, false);
  const auto& logits = tape.value(forward_logits(tape, params.config(), vars, tape.constant(image), t));
  SegmentationOutput out{argmax_channels(logits), logits.template cast<float>(), labels};
  return out;
}

// Checkpoints ------------------------------------------------------------------

/// "LANGSEGCKPT1" + config text + (name, shape) manifest + f32 LE tensor data.
std::vector<unsigned char> serialize_checkpoint(const ModelParameters<float>& params);
ModelParameters<float> parse_checkpoint(std::span<const unsigned char> bytes);
void save_checkpoint(const ModelParameters<float>& params, const std::filesystem::path& path);
ModelParameters<float> load_checkpoint(const std::filesystem::path& path);

std::string config_to_text(const ModelConfig& config);
ModelConfig config_from_text(std::string_view text);

}  // namespace langseg
