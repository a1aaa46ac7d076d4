#include "langseg/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "binary_io.hpp"
#include "langseg/data.hpp"
#include "langseg/eval.hpp"
#include "langseg/model.hpp"
#include "langseg/png_io.hpp"
#include "langseg/service.hpp"
#include "langseg/training.hpp"

namespace langseg::cli {

namespace fs = std::filesystem;

namespace {

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ValidationError(std::string("missing --") + what);
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " '" + path + "' does not exist");
}

void require_dir(const std::string& path, const char* what) {
  if (!fs::is_directory(path)) throw IoError(std::string(what) + " '" + path + "' is not a directory");
}

// The parent directory of an output path must already exist.
void require_writable(const std::string& path, const char* what) {
  if (path.empty()) throw ValidationError(std::string("missing --") + what);
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    throw IoError("output directory '" + parent.string() + "' does not exist");
  }
}

std::string hex_color(const std::array<unsigned char, 3>& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

EmbeddingTable table_or_default(const std::string& path, std::uint64_t seed) {
  if (!path.empty()) return load_table(path);
  return synth_vocab(default_vocabulary(seed));
}

struct Options {
  std::string config, checkpoint, table, labels, image, out, history, fold, kind = "depth";
  std::vector<std::string> data;
  std::string classes = "cat,car,tree,chair";
  std::string block = "bottleneck";
  std::string host = "127.0.0.1";
  std::uint64_t seed = 0;
  std::int64_t steps = -1;
  Index depth = 2, dim = 64, hidden = 32, count = 64, size = 64, eval_images = -1;
  double sigma = 0.05;
  int port = 8080;
  bool other = false, no_normalize = false, strict = false;
};

TrainConfig train_config(const Options& o) {
  TrainConfig tc = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
  if (o.steps >= 0) tc.max_steps = o.steps;
  tc.seed = o.seed;
  tc.validate();
  return tc;
}

// make-vocab ---------------------------------------------------------------------

int make_vocab(const Options& o, std::ostream& out) {
  require_writable(o.out, "out");
  const auto table = synth_vocab(default_vocabulary(o.seed, o.dim, o.sigma));
  if (fs::path(o.out).extension() == ".txt") {
    save_text_table(table, o.out);
  } else {
    save_table(table, o.out);
  }
  out << "wrote " << table.size() << " labels (C=" << table.dimension() << ") to " << o.out << '\n';
  return kOk;
}

// gen-data -----------------------------------------------------------------------

int gen_data(const Options& o, std::ostream& out) {
  require_writable(o.out, "out");
  if (!o.table.empty()) require_file(o.table, "table");
  const auto table = table_or_default(o.table, o.seed);
  const auto classes = LabelSet::parse(o.classes).labels();
  SceneSpec spec = grounded_scene(table, classes, o.seed, o.size, o.size);
  spec.seed = mix_seed(o.seed + 1);
  spec.source = fs::path(o.out).filename().string();
  const auto samples = generate(spec, o.count);
  save_dataset(samples, o.out);
  out << "wrote " << samples.size() << " images with labels " << spec.label_set().join() << " to " << o.out << '\n';
  return kOk;
}

// train --------------------------------------------------------------------------

int train_cmd(const Options& o, std::ostream& out) {
  if (o.data.empty()) throw ValidationError("missing --data");
  for (const auto& d : o.data) require_dir(d, "data");
  require_file(o.table, "table");
  if (!o.config.empty()) require_file(o.config, "config");
  require_writable(o.out, "out");
  if (!o.history.empty()) require_writable(o.history, "history");

  const TrainConfig tc = train_config(o);
  const auto table = load_table(o.table);
  std::vector<TrainSample> dataset;
  for (const auto& d : o.data) {
    auto part = load_dataset(d, o.strict);
    dataset.insert(dataset.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }

  ModelConfig mc;
  mc.encoder.height = dataset.front().image.height();
  mc.encoder.width = dataset.front().image.width();
  mc.encoder.embed_dim = table.dimension();
  mc.encoder.hidden = o.hidden;
  mc.regularizer.kind = parse_block_kind(o.block);
  mc.regularizer.depth = o.depth;
  mc.normalize_embeddings = !o.no_normalize;

  const std::uint64_t table_digest = table.digest();
  const std::int64_t report_every = std::max<std::int64_t>(1, tc.max_steps / 10);
  auto result = train<float>(ModelParameters<float>(mc, o.seed), table, dataset, tc, [&](const LossRecord& r) {
    if (r.step % report_every == 0 || r.step + 1 == tc.max_steps) {
      out << "step " << r.step << " lr " << r.lr << " loss " << r.loss << '\n';
    }
  });
  if (table.digest() != table_digest) throw NumericError("embedding table changed during training");
  save_checkpoint(result.params, o.out);
  if (!o.history.empty()) write_history_csv(result.history, o.history);
  out << "saved " << o.out << " (" << result.params.scalar_count() << " parameters)\n";
  return kOk;
}

// eval ---------------------------------------------------------------------------

int zero_shot_cmd(const Options& o, std::ostream& out) {
  if (!o.table.empty()) require_file(o.table, "table");
  if (!o.out.empty()) require_writable(o.out, "out");
  if (!o.config.empty()) require_file(o.config, "config");
  auto cfg = benchmark_zero_shot_config(o.seed);
  if (!o.config.empty()) cfg.train = load_train_config(o.config);
  if (o.steps >= 0) cfg.train.max_steps = o.steps;
  cfg.train.seed = o.seed;
  if (o.eval_images > 0) cfg.eval_images = o.eval_images;
  if (o.fold != "all") {
    std::size_t f = 0;
    try {
      f = std::stoul(o.fold);
    } catch (const std::exception&) {
      throw ValidationError("--fold must be a fold index or 'all'");
    }
    cfg.folds = {f};
  }
  const auto table = table_or_default(o.table, o.seed);
  cfg.model.encoder.embed_dim = table.dimension();
  cfg.model.regularizer.kind = parse_block_kind(o.block);
  cfg.model.regularizer.depth = o.depth;
  const auto report = zero_shot_fold_eval(table, cfg);
  out << format_zero_shot_table(report);
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw IoError("cannot write '" + o.out + "'");
    write_zero_shot_csv(report, f);
  }
  return kOk;
}

int eval_cmd(const Options& o, std::ostream& out) {
  if (!o.fold.empty()) return zero_shot_cmd(o, out);
  require_file(o.checkpoint, "checkpoint");
  require_file(o.table, "table");
  if (o.data.empty()) throw ValidationError("missing --data");
  for (const auto& d : o.data) require_dir(d, "data");
  if (!o.out.empty()) require_writable(o.out, "out");

  const auto params = load_checkpoint(o.checkpoint);
  const auto table = load_table(o.table, params.config().encoder.embed_dim);
  std::vector<TrainSample> samples;
  for (const auto& d : o.data) {
    auto part = load_dataset(d, o.strict);
    samples.insert(samples.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  const LabelSet& dataset_labels = samples.front().label_set;
  for (const auto& s : samples) {
    if (!(s.label_set == dataset_labels)) throw ValidationError("evaluation datasets must share one label set");
  }
  // --labels renames the classes (same count and order) for synonym checks.
  const LabelSet labels = o.labels.empty() ? dataset_labels : LabelSet::parse(o.labels);
  if (labels.size() != dataset_labels.size()) {
    throw ValidationError("--labels has " + std::to_string(labels.size()) + " entries, the data has " +
                          std::to_string(dataset_labels.size()));
  }
  for (const auto& l : labels.labels()) (void)table.at(l);

  const auto cm = evaluate_model(params, table, samples, labels);
  const auto background = static_cast<std::int32_t>(labels.other_index().value_or(0));
  const auto chance = constant_prediction(samples, labels.size(), background);
  const auto m = miou(cm);

  std::ostringstream csv;
  csv << std::setprecision(6) << "name,value\n";
  for (std::size_t k = 0; k < labels.size(); ++k) {
    csv << "iou:" << labels[k] << ',';
    if (m.per_class[k]) csv << *m.per_class[k];
    csv << '\n';
  }
  csv << "miou," << m.mean << "\nfb_iou," << fb_iou(cm, static_cast<std::size_t>(background)) << "\npixacc,"
      << pixacc(cm) << "\nchance_miou," << miou(chance).mean << '\n';
  out << csv.str();
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw IoError("cannot write '" + o.out + "'");
    f << csv.str();
  }
  return kOk;
}

// predict ------------------------------------------------------------------------

int predict_cmd(const Options& o, std::ostream& out) {
  require_file(o.checkpoint, "checkpoint");
  require_file(o.table, "table");
  require_file(o.image, "image");
  require_writable(o.out, "out");
  if (o.labels.empty()) throw ValidationError("missing --labels");

  const auto params = load_checkpoint(o.checkpoint);
  const auto table = load_table(o.table, params.config().encoder.embed_dim);
  LabelSet labels = LabelSet::parse(o.labels);
  if (o.other) labels = LabelSet(labels.labels(), 0);
  for (const auto& l : labels.labels()) (void)table.at(l);

  const auto image = decode_png_rgb(io::read_file(o.image));
  const auto result = predict_any_size(params, image, labels, table);
  io::write_file(o.out, encode_png_rgb(colorize(result.label_map, labels)));

  std::vector<Index> counts(labels.size(), 0);
  for (Index i = 0; i < result.label_map.size(); ++i) ++counts[static_cast<std::size_t>(result.label_map.data()[i])];
  std::ostringstream legend;
  legend << std::fixed << std::setprecision(2);
  for (std::size_t k = 0; k < labels.size(); ++k) {
    legend << labels[k] << '\t' << hex_color(label_color(labels[k])) << '\t'
           << 100.0 * static_cast<double>(counts[k]) / static_cast<double>(result.label_map.size()) << '%';
    if (labels.other_index() == k) legend << "\t(other)";
    legend << '\n';
  }
  const fs::path legend_path = fs::path(o.out).replace_extension(".legend.txt");
  std::ofstream lf(legend_path);
  if (!lf) throw IoError("cannot write '" + legend_path.string() + "'");
  lf << legend.str();
  out << legend.str() << "wrote " << o.out << " and " << legend_path.string() << '\n';
  return kOk;
}

// ablate -------------------------------------------------------------------------

int ablate_cmd(const Options& o, std::ostream& out) {
  if (!o.out.empty()) require_writable(o.out, "out");
  if (!o.config.empty()) require_file(o.config, "config");
  AblationConfig cfg;
  cfg.classes = LabelSet::parse(o.classes).labels();
  cfg.seed = o.seed;
  cfg.image_size = o.size;
  cfg.train_images = o.count;
  cfg.eval_images = o.eval_images > 0 ? o.eval_images : o.count;
  cfg.model.encoder.height = o.size;
  cfg.model.encoder.width = o.size;
  cfg.model.encoder.hidden = o.hidden;
  cfg.train = train_config(o);

  std::vector<AblationRow> rows;
  std::string table_text;
  if (o.kind == "depth") {
    const std::vector<Index> depths{0, 1, 2, 4};
    rows = ablation_depth(synth_vocab(default_vocabulary(o.seed, o.dim, o.sigma)), cfg, depths);
    table_text = format_depth_table(rows);
  } else {
    const std::vector<Index> dims{8, 16, 32, 64};
    rows = ablation_embed_dim(default_vocabulary(o.seed, o.dim, o.sigma), cfg, dims);
    table_text = format_dim_table(rows);
  }
  out << table_text;
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw IoError("cannot write '" + o.out + "'");
    write_ablation_csv(rows, f);
  }
  return kOk;
}

// serve --------------------------------------------------------------------------

int serve_cmd(const Options& o, std::ostream& out) {
  require_file(o.checkpoint, "checkpoint");
  require_file(o.table, "table");
  auto params = load_checkpoint(o.checkpoint);
  auto table = load_table(o.table, params.config().encoder.embed_dim);
  const SegmentationService service(std::move(params), std::move(table));
  HttpServer server(service);
  const int port = server.bind(o.host, o.port);
  out << "serving on http://" << o.host << ':' << port << " (digest " << service.digest() << ")" << std::endl;
  server.listen();
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Language-driven semantic segmentation with frozen label embeddings", "langseg"};
  app.require_subcommand(1);
  Options o;

  auto* vocab = app.add_subcommand("make-vocab", "Write the built-in synthetic label embedding table");
  vocab->add_option("--out", o.out, "Output table (.txt = text, otherwise binary)")->required();
  vocab->add_option("--seed", o.seed, "Vocabulary seed");
  vocab->add_option("--dim", o.dim, "Embedding width")->check(CLI::Range(8, 4096));
  vocab->add_option("--sigma", o.sigma, "Synonym noise")->check(CLI::Range(0.0, 10.0));

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset grounded in a table");
  gen->add_option("--out", o.out, "Output dataset directory")->required();
  gen->add_option("--table", o.table, "Embedding table (default: built-in vocabulary)");
  gen->add_option("--labels", o.classes, "Comma-separated object classes");
  gen->add_option("--count", o.count, "Number of images")->check(CLI::PositiveNumber);
  gen->add_option("--size", o.size, "Image side in pixels")->check(CLI::PositiveNumber);
  gen->add_option("--seed", o.seed, "World and image seed");

  auto* tr = app.add_subcommand("train", "Train the image encoder and regularizer");
  tr->add_option("--data", o.data, "Dataset directory (repeatable)")->required();
  tr->add_option("--table", o.table, "Embedding table")->required();
  tr->add_option("--out", o.out, "Output checkpoint")->required();
  tr->add_option("--config", o.config, "Training config (key = value)");
  tr->add_option("--steps", o.steps, "Override max_steps")->check(CLI::NonNegativeNumber);
  tr->add_option("--seed", o.seed, "Initialization and shuffling seed");
  tr->add_option("--block", o.block, "Regularizer block")->check(CLI::IsMember({"depthwise", "bottleneck"}));
  tr->add_option("--depth", o.depth, "Regularizer depth")->check(CLI::Range(0, 16));
  tr->add_option("--hidden", o.hidden, "Encoder hidden width")->check(CLI::PositiveNumber);
  tr->add_option("--history", o.history, "Write the loss history as CSV");
  tr->add_flag("--no-normalize", o.no_normalize, "Correlate raw (unnormalized) embeddings");
  tr->add_flag("--strict", o.strict, "Reject targets whose label order differs from the manifest");

  auto* ev = app.add_subcommand("eval", "Score a checkpoint, or run the zero-shot fold benchmark with --fold");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint");
  ev->add_option("--table", o.table, "Embedding table");
  ev->add_option("--data", o.data, "Dataset directory (repeatable)");
  ev->add_option("--labels", o.labels, "Rename the dataset classes (same order)");
  ev->add_option("--out", o.out, "Write metrics as CSV");
  ev->add_option("--fold", o.fold, "Zero-shot benchmark fold index, or 'all'");
  ev->add_option("--config", o.config, "Training config for --fold");
  ev->add_option("--steps", o.steps, "Training steps per fold for --fold")->check(CLI::NonNegativeNumber);
  ev->add_option("--eval-images", o.eval_images, "Evaluation images per fold for --fold")->check(CLI::PositiveNumber);
  ev->add_option("--seed", o.seed, "Seed for --fold");
  ev->add_option("--block", o.block, "Regularizer block for --fold")->check(CLI::IsMember({"depthwise", "bottleneck"}));
  ev->add_option("--depth", o.depth, "Regularizer depth for --fold")->check(CLI::Range(0, 16));
  ev->add_flag("--strict", o.strict, "Reject targets whose label order differs from the manifest");

  auto* pr = app.add_subcommand("predict", "Segment one image with a label list given at run time");
  pr->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required();
  pr->add_option("--table", o.table, "Embedding table")->required();
  pr->add_option("--image", o.image, "Input PNG")->required();
  pr->add_option("--labels", o.labels, "Comma-separated labels, in any order")->required();
  pr->add_option("--out", o.out, "Colour-mapped output PNG; the legend goes next to it")->required();
  pr->add_flag("--other", o.other, "Treat the first label as the background label");

  auto* ab = app.add_subcommand("ablate", "Regularizer depth or embedding width sweep");
  ab->add_option("--kind", o.kind, "Sweep")->check(CLI::IsMember({"depth", "dim"}));
  ab->add_option("--labels", o.classes, "Comma-separated object classes");
  ab->add_option("--count", o.count, "Training images")->check(CLI::PositiveNumber);
  ab->add_option("--eval-images", o.eval_images, "Evaluation images")->check(CLI::PositiveNumber);
  ab->add_option("--size", o.size, "Image side in pixels")->check(CLI::PositiveNumber);
  ab->add_option("--hidden", o.hidden, "Encoder hidden width")->check(CLI::PositiveNumber);
  ab->add_option("--dim", o.dim, "Embedding width for the depth sweep")->check(CLI::Range(8, 4096));
  ab->add_option("--config", o.config, "Training config");
  ab->add_option("--steps", o.steps, "Training steps per row")->check(CLI::NonNegativeNumber);
  ab->add_option("--seed", o.seed, "Seed");
  ab->add_option("--out", o.out, "Write rows as CSV");

  auto* sv = app.add_subcommand("serve", "HTTP inference API");
  sv->add_option("--checkpoint", o.checkpoint, "Checkpoint")->envname("LANGSEG_CHECKPOINT")->required();
  sv->add_option("--table", o.table, "Embedding table")->envname("LANGSEG_TABLE")->required();
  sv->add_option("--port", o.port, "Port (0 = any free port)")->envname("LANGSEG_PORT")->check(CLI::Range(0, 65535));
  sv->add_option("--host", o.host, "Bind address");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    const std::string sub = app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name() + ": ";
    err << "usage error: " << sub << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*vocab) return make_vocab(o, out);
    if (*gen) return gen_data(o, out);
    if (*tr) return train_cmd(o, out);
    if (*ev) return eval_cmd(o, out);
    if (*pr) return predict_cmd(o, out);
    if (*ab) return ablate_cmd(o, out);
    if (*sv) return serve_cmd(o, out);
    return kUsage;
  } catch (const UnknownLabelError& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace langseg::cli
