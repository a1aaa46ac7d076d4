#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "langseg/data.hpp"
#include "langseg/model.hpp"
#include "langseg/training.hpp"

namespace langseg {

/// A metric whose denominator is zero for every class.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// N x N pixel counts, rows = ground truth, columns = prediction.
/// Accumulation is a plain sum, so partial matrices merge with +=.
class ConfusionMatrix {
 public:
  using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

  explicit ConfusionMatrix(std::size_t num_classes);

  /// Pixels whose ground truth equals `ignore` are skipped. Throws
  /// ValidationError on shape mismatch or out-of-range indices.
  void add(const LabelMap& gt, const LabelMap& pred, std::optional<std::int32_t> ignore = kIgnoreLabel);

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

  std::size_t num_classes() const { return static_cast<std::size_t>(counts_.rows()); }
  std::int64_t operator()(std::size_t gt, std::size_t pred) const {
    return counts_(static_cast<Index>(gt), static_cast<Index>(pred));
  }
  std::int64_t total() const { return counts_.sum(); }
  const Counts& counts() const { return counts_; }

  /// 2 x 2 matrix with index 0 = `background`, 1 = every other class.
  ConfusionMatrix binarized(std::size_t background) const;

 private:
  Counts counts_;
};

struct MiouResult {
  double mean = 0.0;
  // nullopt for classes with an empty union (absent from gt and prediction);
  // those are left out of the mean.
  std::vector<std::optional<double>> per_class;
};

MiouResult miou(const ConfusionMatrix& cm);

/// Mean of the background and foreground IoUs after collapsing all object
/// classes into one foreground class. A side with an empty union is left out.
double fb_iou(const ConfusionMatrix& cm, std::size_t background);

double pixacc(const ConfusionMatrix& cm);

/// Classes split into `fold_count` contiguous folds whose sizes differ by at
/// most one (the first `size % fold_count` folds get the extra class).
struct FoldSpec {
  std::vector<std::string> classes;
  std::size_t fold_count = 4;
  std::size_t fold = 0;

  std::vector<std::vector<std::string>> assignment() const;
  std::vector<std::string> unseen() const;
  std::vector<std::string> seen() const;
};

/// Runs `params` over `samples` and accumulates predictions for `labels`.
/// `labels` must have the same size as each sample's label set; it may use
/// different (e.g. synonym) names for the same indices.
template <typename Scalar>
ConfusionMatrix evaluate_model(const ModelParameters<Scalar>& params, const EmbeddingTable& table,
                               std::span<const TrainSample> samples, const LabelSet& labels) {
  ConfusionMatrix cm(labels.size());
  for (const auto& s : samples) {
    if (s.label_set.size() != labels.size()) throw ValidationError("evaluation label count mismatch");
    const auto out = predict(params, s.image.template cast<Scalar>(), labels, table);
    cm.add(s.target, out.label_map);
  }
  return cm;
}

/// Confusion matrix of the predictor that answers `constant` everywhere.
ConfusionMatrix constant_prediction(std::span<const TrainSample> samples, std::size_t num_classes,
                                    std::int32_t constant);

struct ZeroShotConfig {
  std::vector<std::string> classes;
  std::size_t fold_count = 4;
  std::vector<std::size_t> folds;  // empty = all folds
  Index image_size = 64;
  Index tile_size = 4;
  Index train_images = 400;
  Index eval_images = 200;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;  // world (appearance) seed and base of the image streams
  // Optional class -> alias renaming applied to the evaluation label set; the
  // same trained model is then scored a second time with the aliases.
  std::map<std::string, std::string> eval_aliases;
  // Observes each fold's training set before training (for auditing).
  std::function<void(std::size_t fold, std::span<const TrainSample>)> on_train_set;
};

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::string> unseen;
  // `miou` averages over "other" and the fold classes; `object_miou` over the
  // fold classes alone, where the constant-"other" predictor scores 0.
  double miou = 0, object_miou = 0, fb_iou = 0, pixacc = 0;
  double chance_miou = 0, chance_fb_iou = 0;
  std::optional<double> alias_miou;
  std::vector<LossRecord> history;
};

struct ZeroShotReport {
  std::vector<FoldResult> folds;
  double mean_miou = 0, mean_object_miou = 0, mean_fb_iou = 0, mean_chance_miou = 0;
};

/// For each fold: train on images and label sets that contain only the
/// other folds' classes (plus "other"), then evaluate on images of the fold's
/// classes with label set {other} + fold classes, which the model has never
/// been trained on.
ZeroShotReport zero_shot_fold_eval(const EmbeddingTable& table, const ZeroShotConfig& cfg);

/// The 12 object classes of the synthetic fold benchmark, ordered so each
/// contiguous fold of three draws from three different parent concepts.
std::vector<std::string> benchmark_classes();

/// 4 folds, 64 x 64 images, 200 evaluation images per fold.
ZeroShotConfig benchmark_zero_shot_config(std::uint64_t seed = 0);

void write_zero_shot_csv(const ZeroShotReport& report, std::ostream& out);
/// Fold columns, mean, FB-IoU; values in percent.
std::string format_zero_shot_table(const ZeroShotReport& report);

struct AblationConfig {
  std::vector<std::string> classes;
  Index image_size = 32;
  Index tile_size = 4;
  Index train_images = 64;
  Index eval_images = 64;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;
};

struct AblationRow {
  BlockKind kind = BlockKind::Depthwise;
  Index depth = 0;
  Index dim = 0;
  double pixacc = 0;
  double miou = 0;
};

/// Same data, seed and schedule for every row; only the regularizer changes.
std::vector<AblationRow> ablation_depth(const EmbeddingTable& table, const AblationConfig& cfg,
                                        std::span<const Index> depths);

/// Sweeps the label embedding width; the vocabulary is re-synthesised at
/// each width and the encoder projection matches it.
std::vector<AblationRow> ablation_embed_dim(const SyntheticVocabulary& vocab, const AblationConfig& cfg,
                                            std::span<const Index> dims);

std::string format_depth_table(std::span<const AblationRow> rows);
std::string format_dim_table(std::span<const AblationRow> rows);
void write_ablation_csv(std::span<const AblationRow> rows, std::ostream& out);

}  // namespace langseg
