#include "langseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "langseg/hash.hpp"
#include "langseg/png_io.hpp"

namespace langseg {

std::array<float, 3> Appearance::at(Index y, Index x) const {
  switch (texture) {
    case Texture::Flat:
      return color;
    case Texture::Checker:
      return ((y / period + x / period) % 2) ? color2 : color;
    case Texture::Stripes:
      return ((x / period) % 2) ? color2 : color;
    case Texture::Tile: {
      const Index o = ((y % tile_size) * tile_size + (x % tile_size)) * 3;
      return {tile[static_cast<std::size_t>(o)], tile[static_cast<std::size_t>(o + 1)],
              tile[static_cast<std::size_t>(o + 2)]};
    }
  }
  return color;
}

void SceneSpec::validate() const {
  if (height < 1 || width < 1) throw ValidationError("scene canvas must be non-empty");
  if (min_shapes < 0 || min_shapes > max_shapes) throw ValidationError("bad shapes-per-image range");
  if (min_size < 1 || min_size > max_size) throw ValidationError("bad shape size range");
  if (max_size > std::min(height, width)) {
    throw ValidationError("shape size " + std::to_string(max_size) + " larger than canvas " + std::to_string(height) +
                          "x" + std::to_string(width));
  }
  if (snap < 1) throw ValidationError("snap must be >= 1");
  if (max_shapes > 0 && classes.empty()) throw ValidationError("scene has shapes but no classes");
  auto check = [](const Appearance& a, const std::string& who) {
    if (a.texture == Texture::Tile &&
        (a.tile_size < 1 || a.tile.size() != static_cast<std::size_t>(a.tile_size * a.tile_size * 3))) {
      throw ValidationError("tile appearance of '" + who + "' has wrong size");
    }
    if ((a.texture == Texture::Checker || a.texture == Texture::Stripes) && a.period < 1) {
      throw ValidationError("texture period of '" + who + "' must be >= 1");
    }
  };
  check(background, background_label);
  for (const auto& c : classes) check(c.appearance, c.name);
  (void)label_set();
}

LabelSet SceneSpec::label_set() const {
  std::vector<std::string> names{background_label};
  for (const auto& c : classes) names.push_back(c.name);
  return LabelSet(std::move(names), std::size_t{0});
}

namespace {

void paint(TrainSample& s, Index y, Index x, const Appearance& a, std::int32_t label) {
  const auto rgb = a.at(y, x);
  for (Index c = 0; c < 3; ++c) s.image(y, x, c) = quantize_unit(rgb[static_cast<std::size_t>(c)]);
  s.target(y, x) = label;
}

Index snapped(Index v, Index snap) { return std::max(snap, (v / snap) * snap); }

}  // namespace

TrainSample generate_one(const SceneSpec& spec, Index index) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(mix_seed(spec.seed) + static_cast<std::uint64_t>(index)));
  const Index H = spec.height, W = spec.width;
  const Index K = static_cast<Index>(spec.classes.size());

  TrainSample s{DenseMapf(H, W, 3), LabelMap::Zero(H, W), spec.label_set(), spec.source};
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) paint(s, y, x, spec.background, 0);

  std::uniform_int_distribution<Index> count_dist(spec.min_shapes, spec.max_shapes);
  Index shapes = count_dist(rng);
  const bool forced = spec.max_shapes > 0 && index < K;
  if (forced && shapes == 0) shapes = 1;
  std::uniform_int_distribution<Index> class_dist(0, std::max<Index>(K - 1, 0));
  std::uniform_int_distribution<Index> size_dist(spec.min_size, spec.max_size);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (Index n = 0; n < shapes; ++n) {
    Index k = class_dist(rng);
    if (forced && n == 0) k = index;
    const ShapeClass& cls = spec.classes[static_cast<std::size_t>(k)];
    const auto label = static_cast<std::int32_t>(k + 1);
    const Index size = size_dist(rng);
    switch (cls.geometry) {
      case Geometry::Rectangle: {
        const Index rh = std::min(snapped(size, spec.snap), H);
        const Index rw = std::min(snapped(size_dist(rng), spec.snap), W);
        const Index y0 = std::uniform_int_distribution<Index>(0, (H - rh) / spec.snap)(rng) * spec.snap;
        const Index x0 = std::uniform_int_distribution<Index>(0, (W - rw) / spec.snap)(rng) * spec.snap;
        for (Index y = y0; y < y0 + rh; ++y)
          for (Index x = x0; x < x0 + rw; ++x) paint(s, y, x, cls.appearance, label);
        break;
      }
      case Geometry::Disk: {
        const double r = static_cast<double>(size) / 2.0;
        const double cy = r + unit(rng) * (static_cast<double>(H) - 2.0 * r);
        const double cx = r + unit(rng) * (static_cast<double>(W) - 2.0 * r);
        for (Index y = 0; y < H; ++y) {
          for (Index x = 0; x < W; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - cy;
            const double dx = static_cast<double>(x) + 0.5 - cx;
            if (dy * dy + dx * dx <= r * r) paint(s, y, x, cls.appearance, label);
          }
        }
        break;
      }
      case Geometry::Triangle: {
        const Index y0 = std::uniform_int_distribution<Index>(0, H - size)(rng);
        const Index x0 = std::uniform_int_distribution<Index>(0, W - size)(rng);
        // Apex at top centre, base along the bottom edge.
        const double ax = static_cast<double>(x0) + static_cast<double>(size) / 2.0, ay = static_cast<double>(y0);
        const double bx = static_cast<double>(x0), by = static_cast<double>(y0 + size);
        const double cx = static_cast<double>(x0 + size), cy = by;
        auto edge = [](double px, double py, double qx, double qy, double x, double y) {
          return (qx - px) * (y - py) - (qy - py) * (x - px);
        };
        for (Index y = y0; y < y0 + size; ++y) {
          for (Index x = x0; x < x0 + size; ++x) {
            const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
            const double e0 = edge(ax, ay, bx, by, px, py);
            const double e1 = edge(bx, by, cx, cy, px, py);
            const double e2 = edge(cx, cy, ax, ay, px, py);
            if ((e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0)) {
              paint(s, y, x, cls.appearance, label);
            }
          }
        }
        break;
      }
    }
  }
  return s;
}

std::vector<TrainSample> generate(const SceneSpec& spec, Index count) {
  if (count < 1) throw ValidationError("sample count must be >= 1");
  spec.validate();
  std::vector<TrainSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) out.push_back(generate_one(spec, i));
  return out;
}

Appearance grounded_appearance(const Eigen::VectorXf& embedding, Index tile_size, std::uint64_t projection_seed,
                               double gain) {
  if (tile_size < 1) throw ValidationError("tile size must be >= 1");
  const Index n = tile_size * tile_size * 3;
  std::mt19937_64 rng(mix_seed(projection_seed ^ 0x7469'6c65ULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd q(n, embedding.size());
  for (Index i = 0; i < q.rows(); ++i)
    for (Index j = 0; j < q.cols(); ++j) q(i, j) = gauss(rng);
  const Eigen::VectorXd e = embedding.cast<double>().normalized();
  const Eigen::VectorXd v = (0.5 + gain * (q * e).array()).cwiseMax(0.0).cwiseMin(1.0).matrix();
  Appearance a;
  a.texture = Texture::Tile;
  a.tile_size = tile_size;
  a.tile.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) a.tile[static_cast<std::size_t>(i)] = quantize_unit(static_cast<float>(v[i]));
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (Index i = 0; i < n; ++i) mean[i % 3] += v[i] / static_cast<double>(tile_size * tile_size);
  a.color = {static_cast<float>(mean[0]), static_cast<float>(mean[1]), static_cast<float>(mean[2])};
  return a;
}

SceneSpec grounded_scene(const EmbeddingTable& table, const std::vector<std::string>& classes,
                         std::uint64_t world_seed, Index height, Index width, Index tile_size) {
  const std::uint64_t seed = world_seed;
  SceneSpec spec;
  spec.height = height;
  spec.width = width;
  spec.seed = world_seed;
  spec.min_size = std::max<Index>(4, std::min(height, width) / 5);
  spec.max_size = std::max(spec.min_size, std::min(height, width) / 2);
  spec.background = grounded_appearance(table.at(spec.background_label), tile_size, seed);
  const Geometry kinds[] = {Geometry::Rectangle, Geometry::Disk, Geometry::Triangle};
  for (std::size_t i = 0; i < classes.size(); ++i) {
    spec.classes.push_back({classes[i], kinds[i % 3], grounded_appearance(table.at(classes[i]), tile_size, seed)});
  }
  return spec;
}

// On-disk datasets ----------------------------------------------------------

void save_dataset(const std::vector<TrainSample>& samples, const std::filesystem::path& dir) {
  if (samples.empty()) throw ValidationError("no samples to save");
  const LabelSet& labels = samples.front().label_set;
  for (const auto& s : samples) {
    if (!(s.label_set == labels)) throw ValidationError("save_dataset: samples have different label sets");
    validate_sample(s);
  }
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  std::filesystem::create_directories(dir / "targets", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream manifest;
  manifest << labels.join(',') << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream name;
    name << std::setw(5) << std::setfill('0') << i << ".png";
    const std::string img = "images/" + name.str();
    const std::string tgt = "targets/" + name.str();
    io::write_file(dir / img, encode_png_rgb(samples[i].image));
    io::write_file(dir / tgt, encode_png_labels(samples[i].target, {{"labels", labels.join(',')}}));
    manifest << img << ' ' << tgt << '\n';
  }
  const std::string m = manifest.str();
  io::write_file(dir / "manifest.txt", {reinterpret_cast<const unsigned char*>(m.data()), m.size()});
}

std::vector<TrainSample> load_dataset(const std::filesystem::path& dir, bool strict) {
  const auto raw = io::read_file(dir / "manifest.txt");
  std::istringstream manifest(std::string(raw.begin(), raw.end()));
  std::string header;
  if (!std::getline(manifest, header)) throw ValidationError(dir.string() + ": empty manifest");
  const LabelSet labels = LabelSet::parse(header);
  const std::string source = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();

  std::vector<TrainSample> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::string img, tgt, extra;
    if (!(fields >> img >> tgt) || (fields >> extra)) {
      throw ValidationError(dir.string() + ": malformed manifest line '" + line + "'");
    }
    TrainSample s;
    s.label_set = labels;
    s.source = source;
    s.image = decode_png_rgb(io::read_file(dir / img));
    PngText text;
    s.target = decode_png_labels(io::read_file(dir / tgt), &text);
    if (s.target.rows() != s.image.height() || s.target.cols() != s.image.width()) {
      throw ValidationError(tgt + ": target size does not match " + img);
    }
    if (const auto it = text.find("labels"); it != text.end() && it->second != labels.join(',')) {
      if (strict) throw ValidationError(tgt + ": label order differs from manifest");
      const LabelSet written = LabelSet::parse(it->second);
      std::vector<std::int32_t> remap(written.size());
      for (std::size_t i = 0; i < written.size(); ++i) {
        const auto j = labels.index_of(written[i]);
        if (!j) throw ValidationError(tgt + ": label '" + written[i] + "' missing from manifest");
        remap[i] = static_cast<std::int32_t>(*j);
      }
      for (Index i = 0; i < s.target.size(); ++i) {
        auto& v = s.target.data()[i];
        if (v != kIgnoreLabel && v >= 0 && static_cast<std::size_t>(v) < remap.size()) {
          v = remap[static_cast<std::size_t>(v)];
        } else if (v != kIgnoreLabel) {
          throw ValidationError(tgt + ": index " + std::to_string(v) + " out of range");
        }
      }
    }
    try {
      validate_sample(s);
    } catch (const ValidationError& e) {
      throw ValidationError(tgt + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ValidationError(dir.string() + ": manifest lists no samples");
  return out;
}

}  // namespace langseg
