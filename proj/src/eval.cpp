#include "langseg/eval.hpp"

#include <iomanip>
#include <sstream>

#include "langseg/hash.hpp"

namespace langseg {

// Metrics --------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) {
  if (num_classes == 0) throw ValidationError("confusion matrix needs at least one class");
  const auto n = static_cast<Index>(num_classes);
  counts_ = Counts::Zero(n, n);
}

void ConfusionMatrix::add(const LabelMap& gt, const LabelMap& pred, std::optional<std::int32_t> ignore) {
  if (gt.rows() != pred.rows() || gt.cols() != pred.cols()) {
    throw ValidationError("ground truth and prediction sizes differ");
  }
  const auto n = static_cast<std::int32_t>(counts_.rows());
  for (Index i = 0; i < gt.size(); ++i) {
    const std::int32_t g = gt.data()[i];
    if (ignore && g == *ignore) continue;
    const std::int32_t p = pred.data()[i];
    if (g < 0 || g >= n || p < 0 || p >= n) {
      throw ValidationError("label index out of range (gt " + std::to_string(g) + ", pred " + std::to_string(p) + ")");
    }
    ++counts_(g, p);
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.counts_.rows() != counts_.rows()) throw ValidationError("cannot merge confusion matrices of different size");
  counts_ += other.counts_;
  return *this;
}

ConfusionMatrix ConfusionMatrix::binarized(std::size_t background) const {
  const auto b = static_cast<Index>(background);
  if (b >= counts_.rows()) throw ValidationError("background index out of range");
  ConfusionMatrix out(2);
  for (Index g = 0; g < counts_.rows(); ++g) {
    for (Index p = 0; p < counts_.cols(); ++p) out.counts_(g == b ? 0 : 1, p == b ? 0 : 1) += counts_(g, p);
  }
  return out;
}

MiouResult miou(const ConfusionMatrix& cm) {
  const auto& c = cm.counts();
  MiouResult r;
  double sum = 0;
  int present = 0;
  for (Index k = 0; k < c.rows(); ++k) {
    const std::int64_t tp = c(k, k);
    const std::int64_t uni = c.row(k).sum() + c.col(k).sum() - tp;
    if (uni == 0) {
      r.per_class.emplace_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    r.per_class.emplace_back(iou);
    sum += iou;
    ++present;
  }
  if (present == 0) throw UndefinedMetricError("mIoU undefined: every class has an empty union");
  r.mean = sum / present;
  return r;
}

double fb_iou(const ConfusionMatrix& cm, std::size_t background) { return miou(cm.binarized(background)).mean; }

double pixacc(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total == 0) throw UndefinedMetricError("pixAcc undefined: no evaluated pixels");
  return static_cast<double>(cm.counts().trace()) / static_cast<double>(total);
}

ConfusionMatrix constant_prediction(std::span<const TrainSample> samples, std::size_t num_classes,
                                    std::int32_t constant) {
  ConfusionMatrix cm(num_classes);
  for (const auto& s : samples) cm.add(s.target, LabelMap::Constant(s.target.rows(), s.target.cols(), constant));
  return cm;
}

// Folds ----------------------------------------------------------------------

std::vector<std::vector<std::string>> FoldSpec::assignment() const {
  if (fold_count == 0 || fold_count > classes.size()) {
    throw ValidationError("cannot split " + std::to_string(classes.size()) + " classes into " +
                          std::to_string(fold_count) + " folds");
  }
  std::vector<std::vector<std::string>> out(fold_count);
  const std::size_t base = classes.size() / fold_count;
  const std::size_t extra = classes.size() % fold_count;
  std::size_t next = 0;
  for (std::size_t f = 0; f < fold_count; ++f) {
    const std::size_t n = base + (f < extra ? 1 : 0);
    for (std::size_t i = 0; i < n; ++i) out[f].push_back(classes[next++]);
  }
  return out;
}

std::vector<std::string> FoldSpec::unseen() const {
  const auto a = assignment();
  if (fold >= a.size()) throw ValidationError("fold index " + std::to_string(fold) + " out of range");
  return a[fold];
}

std::vector<std::string> FoldSpec::seen() const {
  const auto a = assignment();
  if (fold >= a.size()) throw ValidationError("fold index " + std::to_string(fold) + " out of range");
  std::vector<std::string> out;
  for (std::size_t f = 0; f < a.size(); ++f) {
    if (f != fold) out.insert(out.end(), a[f].begin(), a[f].end());
  }
  return out;
}

// Zero-shot protocol -----------------------------------------------------------

namespace {

std::uint64_t stream_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
  return mix_seed(base ^ fnv1a64(tag)) + index;
}

// Mean IoU over every class but index 0 ("other"); classes with an empty
// union are skipped as in miou().
double object_mean(const MiouResult& m) {
  double sum = 0;
  int n = 0;
  for (std::size_t k = 1; k < m.per_class.size(); ++k) {
    if (!m.per_class[k]) continue;
    sum += *m.per_class[k];
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

}  // namespace

ZeroShotReport zero_shot_fold_eval(const EmbeddingTable& table, const ZeroShotConfig& cfg) {
  FoldSpec spec{cfg.classes, cfg.fold_count, 0};
  const auto assignment = spec.assignment();
  for (const auto& c : cfg.classes) (void)table.at(c);
  (void)table.at("other");
  if (cfg.model.encoder.embed_dim != table.dimension()) {
    throw ShapeError("model embedding width does not match the table");
  }

  std::vector<std::size_t> folds = cfg.folds;
  if (folds.empty()) {
    for (std::size_t f = 0; f < cfg.fold_count; ++f) folds.push_back(f);
  }

  ZeroShotReport report;
  for (std::size_t f : folds) {
    spec.fold = f;
    const auto unseen = spec.unseen();
    const auto seen = spec.seen();
    if (seen.empty()) throw ValidationError("fold " + std::to_string(f) + " leaves no classes for training");

    SceneSpec train_scene = grounded_scene(table, seen, cfg.seed, cfg.image_size, cfg.image_size, cfg.tile_size);
    train_scene.seed = stream_seed(cfg.seed, "train", f);
    train_scene.source = "fold" + std::to_string(f) + "-train";
    const auto train_set = generate(train_scene, cfg.train_images);
    if (cfg.on_train_set) cfg.on_train_set(f, train_set);

    SceneSpec eval_scene = grounded_scene(table, unseen, cfg.seed, cfg.image_size, cfg.image_size, cfg.tile_size);
    eval_scene.seed = stream_seed(cfg.seed, "eval", f);
    eval_scene.min_shapes = std::max<Index>(1, eval_scene.min_shapes);
    eval_scene.source = "fold" + std::to_string(f) + "-eval";
    const auto eval_set = generate(eval_scene, cfg.eval_images);

    TrainConfig tc = cfg.train;
    tc.seed = stream_seed(cfg.train.seed, "order", f);
    ModelParameters<float> init(cfg.model, stream_seed(cfg.seed, "init", f));
    auto trained = train<float>(std::move(init), table, train_set, tc);

    const LabelSet labels = eval_scene.label_set();
    const auto cm = evaluate_model(trained.params, table, eval_set, labels);
    const auto chance = constant_prediction(eval_set, labels.size(), 0);

    FoldResult r;
    r.fold = f;
    r.unseen = unseen;
    const auto m = miou(cm);
    r.miou = m.mean;
    r.object_miou = object_mean(m);
    r.fb_iou = fb_iou(cm, 0);
    r.pixacc = pixacc(cm);
    r.chance_miou = miou(chance).mean;
    r.chance_fb_iou = fb_iou(chance, 0);
    r.history = std::move(trained.history);
    if (!cfg.eval_aliases.empty()) {
      std::vector<std::string> names = labels.labels();
      for (auto& n : names) {
        if (auto it = cfg.eval_aliases.find(n); it != cfg.eval_aliases.end()) n = it->second;
      }
      const LabelSet aliased(std::move(names), labels.other_index());
      r.alias_miou = miou(evaluate_model(trained.params, table, eval_set, aliased)).mean;
    }
    report.folds.push_back(std::move(r));
  }
  for (const auto& r : report.folds) {
    report.mean_miou += r.miou;
    report.mean_object_miou += r.object_miou;
    report.mean_fb_iou += r.fb_iou;
    report.mean_chance_miou += r.chance_miou;
  }
  const auto n = static_cast<double>(report.folds.size());
  report.mean_miou /= n;
  report.mean_object_miou /= n;
  report.mean_fb_iou /= n;
  report.mean_chance_miou /= n;
  return report;
}

std::vector<std::string> benchmark_classes() {
  return {"cat", "car", "tree", "chair", "dog", "bus", "grass", "table", "horse", "bicycle", "flower", "sofa"};
}

ZeroShotConfig benchmark_zero_shot_config(std::uint64_t seed) {
  ZeroShotConfig cfg;
  cfg.classes = benchmark_classes();
  cfg.fold_count = 4;
  cfg.image_size = 64;
  cfg.tile_size = 4;
  cfg.train_images = 400;
  cfg.eval_images = 200;
  cfg.model.encoder.height = 64;
  cfg.model.encoder.width = 64;
  cfg.model.encoder.hidden = 64;
  cfg.train.max_steps = 2000;
  cfg.train.base_lr = 0.004;
  // Without decay, encoder weights along input directions that no seen class
  // exercises keep their random init and leak noise into unseen embeddings.
  cfg.train.weight_decay = 0.1;
  cfg.train.clip_norm = 1.0;
  cfg.seed = seed;
  cfg.train.seed = seed;
  return cfg;
}

void write_zero_shot_csv(const ZeroShotReport& report, std::ostream& out) {
  out << "fold,unseen,miou,object_miou,fb_iou,pixacc,chance_miou,chance_fb_iou,alias_miou\n" << std::setprecision(6);
  for (const auto& r : report.folds) {
    std::string unseen;
    for (const auto& u : r.unseen) unseen += (unseen.empty() ? "" : ";") + u;
    out << r.fold << ',' << unseen << ',' << r.miou << ',' << r.object_miou << ',' << r.fb_iou << ',' << r.pixacc << ',' << r.chance_miou
        << ',' << r.chance_fb_iou << ',';
    if (r.alias_miou) out << *r.alias_miou;
    out << '\n';
  }
  out << "mean,," << report.mean_miou << ',' << report.mean_object_miou << ',' << report.mean_fb_iou << ",,"
      << report.mean_chance_miou << ",,\n";
}

std::string format_zero_shot_table(const ZeroShotReport& report) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1);
  for (const auto& r : report.folds) s << std::setw(8) << ("fold" + std::to_string(r.fold));
  s << std::setw(8) << "mean" << std::setw(8) << "FB-IoU" << '\n';
  for (const auto& r : report.folds) s << std::setw(8) << 100.0 * r.miou;
  s << std::setw(8) << 100.0 * report.mean_miou << std::setw(8) << 100.0 * report.mean_fb_iou << '\n';
  s << "chance (constant \"other\") mean mIoU: " << 100.0 * report.mean_chance_miou << '\n';
  s << "mean mIoU over fold classes only: " << 100.0 * report.mean_object_miou << '\n';
  return s.str();
}

// Ablations ----------------------------------------------------------------------

namespace {

AblationRow run_ablation(const EmbeddingTable& table, const AblationConfig& cfg, const ModelConfig& model) {
  SceneSpec scene = grounded_scene(table, cfg.classes, cfg.seed, cfg.image_size, cfg.image_size, cfg.tile_size);
  scene.seed = stream_seed(cfg.seed, "ablation-train", 0);
  const auto train_set = generate(scene, cfg.train_images);
  scene.seed = stream_seed(cfg.seed, "ablation-eval", 0);
  const auto eval_set = generate(scene, cfg.eval_images);

  ModelParameters<float> init(model, stream_seed(cfg.seed, "ablation-init", 0));
  auto trained = train<float>(std::move(init), table, train_set, cfg.train);
  const auto cm = evaluate_model(trained.params, table, eval_set, scene.label_set());
  AblationRow row;
  row.kind = model.regularizer.kind;
  row.depth = model.regularizer.depth;
  row.dim = model.encoder.embed_dim;
  row.pixacc = pixacc(cm);
  row.miou = miou(cm).mean;
  return row;
}

}  // namespace

std::vector<AblationRow> ablation_depth(const EmbeddingTable& table, const AblationConfig& cfg,
                                        std::span<const Index> depths) {
  std::vector<AblationRow> rows;
  for (BlockKind kind : {BlockKind::Depthwise, BlockKind::Bottleneck}) {
    for (Index d : depths) {
      ModelConfig m = cfg.model;
      m.encoder.embed_dim = table.dimension();
      m.regularizer.kind = kind;
      m.regularizer.depth = d;
      rows.push_back(run_ablation(table, cfg, m));
    }
  }
  return rows;
}

std::vector<AblationRow> ablation_embed_dim(const SyntheticVocabulary& vocab, const AblationConfig& cfg,
                                            std::span<const Index> dims) {
  std::vector<AblationRow> rows;
  for (Index dim : dims) {
    SyntheticVocabulary v = vocab;
    v.dimension = dim;
    const EmbeddingTable table = synth_vocab(v);
    ModelConfig m = cfg.model;
    m.encoder.embed_dim = dim;
    rows.push_back(run_ablation(table, cfg, m));
  }
  return rows;
}

std::string format_depth_table(std::span<const AblationRow> rows) {
  std::vector<Index> depths;
  for (const auto& r : rows) {
    if (std::find(depths.begin(), depths.end(), r.depth) == depths.end()) depths.push_back(r.depth);
  }
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << std::left << std::setw(16) << "Block Type" << std::setw(12) << "Metric" << std::right;
  for (Index d : depths) s << std::setw(9) << d;
  s << '\n';
  for (BlockKind kind : {BlockKind::Depthwise, BlockKind::Bottleneck}) {
    for (int metric = 0; metric < 2; ++metric) {
      s << std::left << std::setw(16) << (metric == 0 ? (kind == BlockKind::Depthwise ? "DepthwiseBlock" : "BottleneckBlock") : "")
        << std::setw(12) << (metric == 0 ? "pixAcc [%]" : "mIoU [%]") << std::right;
      for (Index d : depths) {
        const auto it = std::find_if(rows.begin(), rows.end(), [&](const AblationRow& r) { return r.kind == kind && r.depth == d; });
        if (it == rows.end()) {
          s << std::setw(9) << "-";
        } else {
          s << std::setw(9) << 100.0 * (metric == 0 ? it->pixacc : it->miou);
        }
      }
      s << '\n';
    }
  }
  return s.str();
}

std::string format_dim_table(std::span<const AblationRow> rows) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << std::setw(20) << "embedding dimension" << std::setw(12) << "pixAcc [%]" << std::setw(10) << "mIoU [%]" << '\n';
  for (const auto& r : rows) s << std::setw(20) << r.dim << std::setw(12) << 100.0 * r.pixacc << std::setw(10) << 100.0 * r.miou << '\n';
  return s.str();
}

void write_ablation_csv(std::span<const AblationRow> rows, std::ostream& out) {
  out << "block,depth,dim,pixacc,miou\n" << std::setprecision(6);
  for (const auto& r : rows) {
    out << to_string(r.kind) << ',' << r.depth << ',' << r.dim << ',' << r.pixacc << ',' << r.miou << '\n';
  }
}

}  // namespace langseg
