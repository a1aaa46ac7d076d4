#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "langseg/embeddings.hpp"
#include "langseg/sample.hpp"

namespace langseg {

enum class Geometry { Rectangle, Disk, Triangle };
enum class Texture { Flat, Checker, Stripes, Tile };

struct Appearance {
  std::array<float, 3> color{0.5f, 0.5f, 0.5f};
  Texture texture = Texture::Flat;
  std::array<float, 3> color2{0.f, 0.f, 0.f};  // second colour of checker/stripes
  Index period = 4;                            // checker/stripe cell size in pixels
  Index tile_size = 0;                         // Tile: tile_size x tile_size x 3 values
  std::vector<float> tile;

  /// Colour of pixel (y, x); textures are anchored to the canvas origin.
  std::array<float, 3> at(Index y, Index x) const;
};

struct ShapeClass {
  std::string name;
  Geometry geometry = Geometry::Rectangle;
  Appearance appearance;
};

/// Recipe for synthetic scenes. Every image gets a random number of shapes
/// in [min_shapes, max_shapes], each of a uniformly drawn class, painted
/// back to front over the background. The per-pixel label is the class of
/// the topmost shape, or the background label ("other") at index 0.
struct SceneSpec {
  Index height = 64;
  Index width = 64;
  std::vector<ShapeClass> classes;
  std::string background_label = "other";
  Appearance background;
  Index min_shapes = 1;
  Index max_shapes = 3;
  Index min_size = 12;  // rectangle side / disk diameter / triangle side, pixels
  Index max_size = 28;
  Index snap = 1;       // rectangle corners are snapped to multiples of this
  std::uint64_t seed = 0;
  std::string source = "synthetic";

  void validate() const;
  /// background_label followed by the class names.
  LabelSet label_set() const;
};

/// Image `index` of the stream defined by `spec`; depends only on
/// (spec, index), never on other images.
TrainSample generate_one(const SceneSpec& spec, Index index);

/// `count` images. When shapes are allowed, the first shape of image i < K
/// is of class i, so with one shape per image every class is sure to appear.
std::vector<TrainSample> generate(const SceneSpec& spec, Index count);

/// A tiled texture whose pixel values are a fixed random linear projection
/// of `embedding`: tile = clamp(0.5 + gain * Q e). The same projection Q
/// (from `projection_seed`) is shared by all concepts, so appearance carries
/// the embedding geometry and semantically close labels look alike.
Appearance grounded_appearance(const Eigen::VectorXf& embedding, Index tile_size, std::uint64_t projection_seed,
                               double gain = 0.18);

/// Scene whose class and background appearances are grounded in `table`
/// through the projection drawn from `world_seed`. Scenes sharing a world
/// seed render every concept identically; set `seed` on the result to pick
/// a different image stream.
SceneSpec grounded_scene(const EmbeddingTable& table, const std::vector<std::string>& classes,
                         std::uint64_t world_seed, Index height = 64, Index width = 64, Index tile_size = 4);

/// Writes images/NNNNN.png, targets/NNNNN.png and manifest.txt. All samples
/// must share one label set. Target PNGs carry their label list in a tEXt
/// chunk so a reordered manifest can be detected.
void save_dataset(const std::vector<TrainSample>& samples, const std::filesystem::path& dir);

/// Reads a dataset written by save_dataset (or by hand). If a target's
/// embedded label list disagrees with the manifest order the indices are
/// remapped to the manifest, or, when `strict`, a ValidationError is thrown.
std::vector<TrainSample> load_dataset(const std::filesystem::path& dir, bool strict = false);

}  // namespace langseg
