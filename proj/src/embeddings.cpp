#include "langseg/embeddings.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "langseg/hash.hpp"

namespace langseg {

namespace {

constexpr std::string_view kTableMagic("LEMB1\0", 6);

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

// LabelSet -------------------------------------------------------------------

LabelSet::LabelSet(std::vector<std::string> labels) : labels_(std::move(labels)) {
  validate();
  other_ = index_of("other");
}

LabelSet::LabelSet(std::vector<std::string> labels, std::optional<std::size_t> other_index)
    : labels_(std::move(labels)), other_(other_index) {
  validate();
  if (other_ && *other_ >= labels_.size()) {
    throw ValidationError("other index " + std::to_string(*other_) + " out of range");
  }
}

void LabelSet::validate() const {
  if (labels_.empty()) throw ValidationError("label set is empty");
  std::set<std::string_view> seen;
  for (const auto& l : labels_) {
    if (l.empty()) throw ValidationError("label set contains an empty label");
    if (!seen.insert(l).second) throw ValidationError("duplicate label '" + l + "'");
  }
}

LabelSet LabelSet::parse(std::string_view comma_separated) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = comma_separated.find(',', start);
    out.push_back(trim(comma_separated.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                                      : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return LabelSet(std::move(out));
}

std::optional<std::size_t> LabelSet::index_of(std::string_view label) const {
  const auto it = std::find(labels_.begin(), labels_.end(), label);
  if (it == labels_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - labels_.begin());
}

LabelSet LabelSet::permuted(std::span<const std::size_t> perm) const {
  if (perm.size() != labels_.size()) throw ValidationError("permutation size mismatch");
  std::vector<std::string> out;
  std::optional<std::size_t> other;
  std::vector<bool> used(labels_.size(), false);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= labels_.size() || used[perm[i]]) throw ValidationError("not a permutation");
    used[perm[i]] = true;
    out.push_back(labels_[perm[i]]);
    if (other_ && perm[i] == *other_) other = i;
  }
  return LabelSet(std::move(out), other);
}

std::string LabelSet::join(char sep) const {
  std::string s;
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (i) s += sep;
    s += labels_[i];
  }
  return s;
}

// EmbeddingTable -------------------------------------------------------------

EmbeddingTable::EmbeddingTable(Index dimension) : dimension_(dimension) {
  if (dimension < 1) throw ValidationError("embedding dimension must be positive");
}

void EmbeddingTable::insert(std::string label, Vector v) {
  if (label.empty()) throw ValidationError("empty label");
  if (v.size() != dimension_) {
    throw DimensionMismatchError("vector for '" + label + "' has " + std::to_string(v.size()) +
                                 " entries, table dimension is " + std::to_string(dimension_));
  }
  if (!v.allFinite()) throw NumericError("vector for '" + label + "' is not finite");
  if (index_.count(label)) throw ValidationError("duplicate label '" + label + "'");
  index_.emplace(label, entries_.size());
  entries_.emplace_back(std::move(label), std::move(v));
}

bool EmbeddingTable::contains(std::string_view label) const {
  return index_.count(std::string(label)) != 0;
}

const EmbeddingTable::Vector& EmbeddingTable::at(std::string_view label) const {
  const auto it = index_.find(std::string(label));
  if (it == index_.end()) throw UnknownLabelError(std::string(label));
  return entries_[it->second].second;
}

std::vector<std::string> EmbeddingTable::labels() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

bool EmbeddingTable::normalized() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const auto& e) { return std::abs(e.second.template cast<double>().norm() - 1.0) <= 1e-5; });
}

std::uint64_t EmbeddingTable::digest() const {
  Fnv1a h;
  h.update_pod(static_cast<std::int64_t>(dimension_));
  for (const auto& [label, v] : entries_) {
    h.update(label).update_pod('\0');
    for (Index i = 0; i < v.size(); ++i) h.update_pod(std::bit_cast<std::uint32_t>(v[i]));
  }
  return h.digest();
}

bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
  if (a.dimension_ != b.dimension_ || a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    if (a.entries_[i].first != b.entries_[i].first) return false;
    // Bitwise, so -0.0 != 0.0 and NaNs cannot sneak through.
    for (Index j = 0; j < a.dimension_; ++j) {
      if (std::bit_cast<std::uint32_t>(a.entries_[i].second[j]) !=
          std::bit_cast<std::uint32_t>(b.entries_[i].second[j]))
        return false;
    }
  }
  return true;
}

// File formats ---------------------------------------------------------------

std::vector<unsigned char> serialize_table(const EmbeddingTable& table) {
  if (table.size() == 0) throw FormatError("cannot save an empty embedding table");
  io::ByteWriter w;
  w.bytes(kTableMagic);
  w.u32(static_cast<std::uint32_t>(table.dimension()));
  w.u32(static_cast<std::uint32_t>(table.size()));
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& label = table.label(i);
    if (label.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("label longer than 65535 bytes");
    }
    w.u16(static_cast<std::uint16_t>(label.size()));
    w.bytes(label);
    const auto& v = table.vector(i);
    for (Index j = 0; j < v.size(); ++j) w.f32(v[j]);
  }
  return w.buffer();
}

EmbeddingTable parse_binary_table(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes, "embedding table");
  if (bytes.size() < kTableMagic.size() ||
      std::string_view(reinterpret_cast<const char*>(bytes.data()), kTableMagic.size()) != kTableMagic) {
    throw MagicMismatchError("embedding table: bad magic");
  }
  r.bytes(kTableMagic.size());
  const std::uint32_t dim = r.u32();
  const std::uint32_t count = r.u32();
  if (dim == 0) throw DimensionMismatchError("embedding table: zero dimension");
  if (count == 0) throw FormatError("embedding table: no entries");
  EmbeddingTable table(static_cast<Index>(dim));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    std::string label(r.bytes(len));
    EmbeddingTable::Vector v(dim);
    for (std::uint32_t j = 0; j < dim; ++j) v[j] = r.f32();
    table.insert(std::move(label), std::move(v));
  }
  if (!r.done()) throw FormatError("embedding table: trailing bytes after last entry");
  return table;
}

EmbeddingTable parse_text_table(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::optional<EmbeddingTable> table;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::string label;
    std::string rest;
    if (const auto tab = t.find('\t'); tab != std::string::npos) {
      label = trim(t.substr(0, tab));
      rest = t.substr(tab + 1);
    } else {
      const auto sp = t.find_first_of(' ');
      label = t.substr(0, sp);
      rest = sp == std::string::npos ? "" : t.substr(sp + 1);
    }
    std::vector<float> values;
    std::istringstream fields(rest);
    std::string tok;
    while (fields >> tok) {
      float f = 0;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), f);
      if (ec != std::errc() || ptr != tok.data() + tok.size()) {
        throw FormatError("embedding table line " + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
      values.push_back(f);
    }
    if (values.empty()) throw FormatError("embedding table line " + std::to_string(lineno) + ": no values");
    if (!table) table.emplace(static_cast<Index>(values.size()));
    if (static_cast<Index>(values.size()) != table->dimension()) {
      throw DimensionMismatchError("embedding table line " + std::to_string(lineno) + ": expected " +
                                   std::to_string(table->dimension()) + " values, got " +
                                   std::to_string(values.size()));
    }
    table->insert(label, Eigen::Map<const EmbeddingTable::Vector>(values.data(), static_cast<Index>(values.size())));
  }
  if (!table) throw FormatError("embedding table: no entries");
  return std::move(*table);
}

void save_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  io::write_file(path, serialize_table(table));
}

void save_text_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  if (table.size() == 0) throw FormatError("cannot save an empty embedding table");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(9);
  for (std::size_t i = 0; i < table.size(); ++i) {
    out << table.label(i) << '\t';
    const auto& v = table.vector(i);
    for (Index j = 0; j < v.size(); ++j) out << (j ? " " : "") << v[j];
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

EmbeddingTable load_table(const std::filesystem::path& path, std::optional<Index> expected_dimension) {
  const auto bytes = io::read_file(path);
  EmbeddingTable table =
      path.extension() == ".txt"
          ? parse_text_table(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()))
          : parse_binary_table(bytes);
  if (expected_dimension && table.dimension() != *expected_dimension) {
    throw DimensionMismatchError(path.string() + ": embedding dimension " + std::to_string(table.dimension()) +
                                 ", expected " + std::to_string(*expected_dimension));
  }
  return table;
}

// Synthetic vocabulary -------------------------------------------------------

namespace {

Eigen::VectorXd random_unit(std::uint64_t seed, std::string_view stream, Index dim) {
  std::mt19937_64 rng(mix_seed(seed ^ fnv1a64(stream)));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (Index i = 0; i < dim; ++i) v[i] = gauss(rng);
  return v.normalized();
}

}  // namespace

double synonym_angle_bound(double sigma) {
  if (sigma >= 1.0) return std::acos(-1.0);
  return std::asin(sigma);
}

EmbeddingTable synth_vocab(const SyntheticVocabulary& spec) {
  if (spec.synonym_noise < 0) throw ValidationError("synonym noise must be >= 0");
  if (spec.dimension < 8) throw ValidationError("synthetic vocabulary needs dimension >= 8");
  if (spec.child_affinity <= 0 || spec.child_affinity >= 1) {
    throw ValidationError("child affinity must be in (0, 1)");
  }

  std::unordered_map<std::string, const Concept*> by_name;
  for (const auto& c : spec.concepts) {
    if (c.name.empty()) throw ValidationError("empty concept name");
    if (!by_name.emplace(c.name, &c).second) throw ValidationError("duplicate concept '" + c.name + "'");
  }
  for (const auto& s : spec.synonyms) {
    if (by_name.count(s.alias)) throw ValidationError("duplicate concept '" + s.alias + "'");
  }

  std::unordered_map<std::string, Eigen::VectorXd> vecs;
  std::set<std::string> visiting;
  const double a = spec.child_affinity;
  const double b = std::sqrt(1.0 - a * a);

  std::function<const Eigen::VectorXd&(const std::string&)> resolve =
      [&](const std::string& name) -> const Eigen::VectorXd& {
    if (auto it = vecs.find(name); it != vecs.end()) return it->second;
    const auto cit = by_name.find(name);
    if (cit == by_name.end()) throw ValidationError("unknown parent concept '" + name + "'");
    if (!visiting.insert(name).second) throw ValidationError("concept cycle through '" + name + "'");
    Eigen::VectorXd own = random_unit(spec.seed, "concept:" + name, spec.dimension);
    Eigen::VectorXd v;
    if (cit->second->parent) {
      const Eigen::VectorXd p = resolve(*cit->second->parent);
      // Orthogonal to the parent so the cosine is exactly `a`.
      Eigen::VectorXd u = own - own.dot(p) * p;
      u.normalize();
      v = (a * p + b * u).normalized();
    } else {
      v = own;
    }
    visiting.erase(name);
    return vecs.emplace(name, std::move(v)).first->second;
  };

  EmbeddingTable table(spec.dimension);
  for (const auto& c : spec.concepts) table.insert(c.name, resolve(c.name).cast<float>());
  for (const auto& s : spec.synonyms) {
    if (!by_name.count(s.of)) throw ValidationError("synonym '" + s.alias + "' of unknown concept '" + s.of + "'");
    const Eigen::VectorXd& base = vecs.at(s.of);
    if (spec.synonym_noise == 0.0) {
      table.insert(s.alias, table.at(s.of));
      continue;
    }
    const Eigen::VectorXd u = random_unit(spec.seed, "synonym:" + s.alias, spec.dimension);
    table.insert(s.alias, (base + spec.synonym_noise * u).normalized().cast<float>());
  }
  return table;
}

SyntheticVocabulary default_vocabulary(std::uint64_t seed, Index dimension, double sigma) {
  SyntheticVocabulary v;
  v.seed = seed;
  v.dimension = dimension;
  v.synonym_noise = sigma;
  auto root = [&](const char* n) { v.concepts.push_back({n, std::nullopt}); };
  auto child = [&](const char* n, const char* p) { v.concepts.push_back({n, std::string(p)}); };
  for (const char* r : {"other", "sky", "road", "water", "person", "animal", "vehicle", "plant", "furniture",
                        "structure", "food"}) {
    root(r);
  }
  for (const char* c : {"cat", "dog", "horse", "bird", "sheep"}) child(c, "animal");
  for (const char* c : {"car", "bus", "bicycle", "boat", "train"}) child(c, "vehicle");
  for (const char* c : {"tree", "grass", "flower"}) child(c, "plant");
  for (const char* c : {"chair", "table", "sofa"}) child(c, "furniture");
  for (const char* c : {"house", "bridge", "wall", "fence"}) child(c, "structure");
  for (const char* c : {"bread", "dessert", "fruit"}) child(c, "food");
  for (auto [alias, of] : {std::pair{"building", "house"}, {"kitty", "cat"}, {"puppy", "dog"},
                           {"automobile", "car"}, {"couch", "sofa"}, {"lawn", "grass"},
                           {"street", "road"}, {"cake", "dessert"}}) {
    v.synonyms.push_back({alias, of});
  }
  return v;
}

}  // namespace langseg
