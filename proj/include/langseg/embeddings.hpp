#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "langseg/dense_map.hpp"

namespace langseg {

/// Ordered list of distinct, non-empty label strings. The position of a
/// label is its class index; `other_index` marks the background label.
class LabelSet {
 public:
  LabelSet() = default;

  /// Marks a literal "other" entry, if present, as the background label.
  explicit LabelSet(std::vector<std::string> labels);
  LabelSet(std::vector<std::string> labels, std::optional<std::size_t> other_index);

  /// Parses a comma-separated list; surrounding whitespace is trimmed.
  static LabelSet parse(std::string_view comma_separated);

  std::size_t size() const { return labels_.size(); }
  const std::string& operator[](std::size_t i) const { return labels_[i]; }
  const std::vector<std::string>& labels() const { return labels_; }
  std::optional<std::size_t> other_index() const { return other_; }
  std::optional<std::size_t> index_of(std::string_view label) const;

  /// New set whose i-th label is this set's `perm[i]`-th label.
  LabelSet permuted(std::span<const std::size_t> perm) const;

  std::string join(char sep = ',') const;

  friend bool operator==(const LabelSet&, const LabelSet&) = default;

 private:
  void validate() const;

  std::vector<std::string> labels_;
  std::optional<std::size_t> other_;
};

/// Frozen label -> C-dimensional vector map (the text side of the model).
/// Entries keep insertion order, which is also their file order.
class EmbeddingTable {
 public:
  using Vector = Eigen::VectorXf;

  EmbeddingTable() = default;
  explicit EmbeddingTable(Index dimension);

  void insert(std::string label, Vector v);

  Index dimension() const { return dimension_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(std::string_view label) const;
  /// Throws UnknownLabelError.
  const Vector& at(std::string_view label) const;
  const std::string& label(std::size_t i) const { return entries_[i].first; }
  const Vector& vector(std::size_t i) const { return entries_[i].second; }
  std::vector<std::string> labels() const;

  /// True when every vector has unit L2 norm within 1e-5.
  bool normalized() const;

  /// Digest over dimension, labels and raw vector bits.
  std::uint64_t digest() const;

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b);

 private:
  Index dimension_ = 0;
  std::vector<std::pair<std::string, Vector>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// N x C matrix whose row k is the stored vector of `labels[k]`.
/// Permuting `labels` permutes the rows identically.
template <typename Scalar>
PixelMatrix<Scalar> embed_labels(const EmbeddingTable& table, const LabelSet& labels) {
  PixelMatrix<Scalar> out(static_cast<Index>(labels.size()), table.dimension());
  for (std::size_t k = 0; k < labels.size(); ++k) {
    out.row(static_cast<Index>(k)) = table.at(labels[k]).transpose().template cast<Scalar>();
  }
  return out;
}

/// Divides each row by its L2 norm. Rows are processed independently and
/// in the same order, so the result is row-permutation equivariant.
template <typename Scalar>
PixelMatrix<Scalar> normalize_rows(PixelMatrix<Scalar> m) {
  for (Index r = 0; r < m.rows(); ++r) {
    Scalar s = 0;
    for (Index c = 0; c < m.cols(); ++c) s += m(r, c) * m(r, c);
    const Scalar n = std::sqrt(s + Scalar(1e-12));
    for (Index c = 0; c < m.cols(); ++c) m(r, c) /= n;
  }
  return m;
}

/// Binary "LEMB1\0" format, little-endian.
void save_table(const EmbeddingTable& table, const std::filesystem::path& path);
/// Plain-text authoring format: one line per label, the label followed by C
/// decimal floats. A tab after the label allows labels containing spaces.
void save_text_table(const EmbeddingTable& table, const std::filesystem::path& path);

/// Loads either format: `.txt` files are parsed as text, anything else as
/// binary. When `expected_dimension` is given a different C is an error.
EmbeddingTable load_table(const std::filesystem::path& path,
                          std::optional<Index> expected_dimension = std::nullopt);
EmbeddingTable parse_binary_table(std::span<const unsigned char> bytes);
EmbeddingTable parse_text_table(std::string_view text);
std::vector<unsigned char> serialize_table(const EmbeddingTable& table);

struct Concept {
  std::string name;
  std::optional<std::string> parent;
};

struct Synonym {
  std::string alias;
  std::string of;
};

/// Deterministic stand-in for a text encoder's semantic geometry.
///
/// Root concepts get independent random directions. A child has cosine
/// exactly `child_affinity` with its parent. A synonym is its concept's
/// vector plus noise of norm `synonym_noise` in a random direction, then
/// renormalised, so it lies within `synonym_angle_bound(sigma)` of the base.
struct SyntheticVocabulary {
  std::vector<Concept> concepts;
  std::vector<Synonym> synonyms;
  std::uint64_t seed = 0;
  Index dimension = 64;
  double synonym_noise = 0.05;
  double child_affinity = 0.8;
};

/// Max angle (radians) between a synonym and its base for noise sigma.
double synonym_angle_bound(double sigma);

/// Each vector depends only on (seed, its own name, its ancestors), so
/// adding unrelated concepts does not move existing ones.
EmbeddingTable synth_vocab(const SyntheticVocabulary& spec);

/// Built-in everyday vocabulary with a small hierarchy and a few synonyms.
SyntheticVocabulary default_vocabulary(std::uint64_t seed, Index dimension = 64, double sigma = 0.05);

}  // namespace langseg
