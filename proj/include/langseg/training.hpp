#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "langseg/model.hpp"
#include "langseg/sample.hpp"

namespace langseg {

struct TrainConfig {
  double base_lr = 0.004;
  double momentum = 0.9;
  double poly_power = 0.9;
  double temperature = 0.07;
  std::int64_t max_steps = 240;
  std::int64_t batch_size = 1;
  std::uint64_t seed = 0;
  std::optional<std::int32_t> ignore_index = kIgnoreLabel;
  double weight_decay = 0.0;  // L2 penalty added to the gradient as wd * p
  double clip_norm = 0.0;     // rescale gradients to this global L2 norm when above it; 0 = off
  bool nesterov = false;

  void validate() const;
};

/// Flat `key = value` text, keys named exactly as the TrainConfig fields.
/// `#` starts a comment. `ignore_index = none` disables ignoring.
TrainConfig parse_train_config(std::string_view text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string to_text(const TrainConfig& cfg);

/// base_lr * (1 - step / max_steps)^poly_power.
double poly_lr(std::int64_t step, const TrainConfig& cfg);

/// Mean cross-entropy of softmax(logits / t) over non-ignored pixels, with
/// its gradient with respect to the logits.
template <typename Scalar>
Scalar pixel_ce_loss(const DenseMap<Scalar>& logits, const LabelMap& target, Scalar temperature,
                     std::optional<std::int32_t> ignore_index = std::nullopt,
                     DenseMap<Scalar>* grad = nullptr) {
  Tape<Scalar> tape;
  Var z = tape.parameter(logits);
  Var loss = softmax_cross_entropy(tape, z, target, temperature, ignore_index);
  if (grad) {
    tape.backward(loss);
    *grad = tape.grad(z);
  }
  return tape.value(loss).data()[0];
}

/// Classical momentum: v <- momentum*v + g; p <- p - lr*v.
/// With `nesterov`: p <- p - lr*(g + momentum*v_new).
/// Throws NumericError (leaving everything untouched) on non-finite grads.
template <typename Scalar>
void sgd_step(std::span<DenseMap<Scalar>> params, std::span<const DenseMap<Scalar>> grads,
              std::span<DenseMap<Scalar>> velocity, double lr, double momentum, bool nesterov = false) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_step: parameter/gradient/velocity counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i]) || !params[i].same_shape(velocity[i])) {
      throw ShapeError("sgd_step: shape mismatch at tensor " + std::to_string(i));
    }
    if (!grads[i].all_finite()) throw NumericError("sgd_step: non-finite gradient in tensor " + std::to_string(i));
  }
  const Scalar m = static_cast<Scalar>(momentum);
  const Scalar a = static_cast<Scalar>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = velocity[i].matrix();
    const auto& g = grads[i].matrix();
    v = m * v + g;
    if (nesterov) {
      params[i].matrix() -= a * (g + m * v);
    } else {
      params[i].matrix() -= a * v;
    }
  }
}

template <typename Scalar>
struct LossAndGradients {
  Scalar loss = 0;
  std::vector<DenseMap<Scalar>> grads;  // layout order
};

/// Loss of one sample and the gradients for every model tensor.
/// `labels` holds the raw N x C embeddings of the sample's label set.
template <typename Scalar>
LossAndGradients<Scalar> loss_and_gradients(const ModelParameters<Scalar>& params, const DenseMap<Scalar>& image,
                                            const LabelMap& target, const PixelMatrix<Scalar>& labels,
                                            Scalar temperature, std::optional<std::int32_t> ignore_index) {
  Tape<Scalar> tape;
  const auto vars = bind_parameters(tape, params, true);
  Var logits = forward_logits(tape, params.config(), vars, tape.constant(image), labels);
  Var loss = softmax_cross_entropy(tape, logits, target, temperature, ignore_index);
  tape.backward(loss);
  LossAndGradients<Scalar> out;
  out.loss = tape.value(loss).data()[0];
  for (Var v : vars) out.grads.push_back(tape.grad(v));
  return out;
}

struct LossRecord {
  std::int64_t step;
  double lr;
  double loss;  // batch mean
};

struct SampleLoss {
  std::int64_t step;
  std::string source;
  double loss;
};

template <typename Scalar>
struct TrainResult {
  ModelParameters<Scalar> params;
  std::vector<LossRecord> history;
  std::vector<SampleLoss> sample_losses;
};

/// SGD with momentum and poly decay on the pixelwise objective. Only the
/// model tensors are updated; `table` is read-only. Samples are visited in
/// a seeded shuffled order, reshuffled every epoch. Each sample is scored
/// against its own label set, so datasets with different label sets mix
/// freely.
template <typename Scalar>
TrainResult<Scalar> train(ModelParameters<Scalar> params, const EmbeddingTable& table,
                          std::span<const TrainSample> dataset, const TrainConfig& cfg,
                          const std::function<void(const LossRecord&)>& on_step = {}) {
  cfg.validate();
  TrainResult<Scalar> result;
  if (cfg.max_steps == 0) {
    result.params = std::move(params);
    return result;
  }
  if (dataset.empty()) throw ValidationError("training set is empty");
  if (table.dimension() != params.config().encoder.embed_dim) {
    throw ShapeError("embedding table dimension " + std::to_string(table.dimension()) +
                     " does not match model embedding width " + std::to_string(params.config().encoder.embed_dim));
  }

  // Resolve every label set up front so typos fail before any work.
  std::map<std::string, PixelMatrix<Scalar>> label_cache;
  for (const auto& s : dataset) {
    validate_sample(s);
    const std::string key = s.label_set.join('\x1f');
    if (!label_cache.count(key)) label_cache.emplace(key, embed_labels<Scalar>(table, s.label_set));
  }

  std::vector<DenseMap<Scalar>> velocity;
  for (const auto& t : params.tensors()) {
    velocity.emplace_back(t.value.height(), t.value.width(), t.value.channels());
  }

  std::mt19937_64 rng(mix_seed(cfg.seed));
  std::vector<std::size_t> order(dataset.size());
  std::size_t cursor = order.size();

  const Scalar temperature = static_cast<Scalar>(cfg.temperature);
  for (std::int64_t step = 0; step < cfg.max_steps; ++step) {
    const double lr = poly_lr(step, cfg);
    std::vector<DenseMap<Scalar>> grads;
    double batch_loss = 0;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const TrainSample& s = dataset[order[cursor++]];
      const auto& labels = label_cache.at(s.label_set.join('\x1f'));
      auto lg = loss_and_gradients<Scalar>(params, s.image.template cast<Scalar>(), s.target, labels, temperature,
                                           cfg.ignore_index);
      if (!std::isfinite(static_cast<double>(lg.loss))) {
        throw NumericError("loss became non-finite at step " + std::to_string(step));
      }
      result.sample_losses.push_back({step, s.source, static_cast<double>(lg.loss)});
      batch_loss += static_cast<double>(lg.loss);
      if (grads.empty()) {
        grads = std::move(lg.grads);
      } else {
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i].matrix() += lg.grads[i].matrix();
      }
    }
    const Scalar inv = Scalar(1) / static_cast<Scalar>(cfg.batch_size);
    for (auto& g : grads) g.matrix() *= inv;
    if (cfg.clip_norm > 0) {
      double sq = 0;
      for (const auto& g : grads) sq += static_cast<double>(g.matrix().squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > cfg.clip_norm) {
        const Scalar f = static_cast<Scalar>(cfg.clip_norm / norm);
        for (auto& g : grads) g.matrix() *= f;
      }
    }
    if (cfg.weight_decay > 0) {
      const Scalar wd = static_cast<Scalar>(cfg.weight_decay);
      for (std::size_t i = 0; i < grads.size(); ++i) grads[i].matrix() += wd * params.tensors()[i].value.matrix();
    }

    std::vector<DenseMap<Scalar>> values;
    values.reserve(grads.size());
    for (auto& t : params.tensors()) values.push_back(std::move(t.value));
    try {
      sgd_step<Scalar>(values, grads, velocity, lr, cfg.momentum, cfg.nesterov);
    } catch (...) {
      for (std::size_t i = 0; i < values.size(); ++i) params.tensors()[i].value = std::move(values[i]);
      throw;
    }
    for (std::size_t i = 0; i < values.size(); ++i) params.tensors()[i].value = std::move(values[i]);

    const LossRecord rec{step, lr, batch_loss / static_cast<double>(cfg.batch_size)};
    result.history.push_back(rec);
    if (on_step) on_step(rec);
  }
  result.params = std::move(params);
  return result;
}

/// CSV with header `step,lr,loss`.
void write_history_csv(std::span<const LossRecord> history, const std::filesystem::path& path);

}  // namespace langseg
