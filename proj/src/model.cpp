#include "langseg/model.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include "binary_io.hpp"

namespace langseg {

namespace {

constexpr std::string_view kCheckpointMagic = "LANGSEGCKPT1";

}  // namespace

std::string to_string(BlockKind kind) { return kind == BlockKind::Depthwise ? "depthwise" : "bottleneck"; }

BlockKind parse_block_kind(std::string_view s) {
  if (s == "depthwise") return BlockKind::Depthwise;
  if (s == "bottleneck") return BlockKind::Bottleneck;
  throw ValidationError("unknown block kind '" + std::string(s) + "' (expected depthwise or bottleneck)");
}

void EncoderConfig::validate() const {
  if (downsample < 1 || patch_size < 1 || embed_dim < 1 || hidden < 1 || mixing_layers < 0) {
    throw ValidationError("encoder sizes must be positive");
  }
  if (patch_size % downsample != 0) {
    throw ValidationError("patch size " + std::to_string(patch_size) + " must be a multiple of downsample " +
                          std::to_string(downsample));
  }
  if (height < 1 || width < 1 || height % (downsample * patch_size) != 0 ||
      width % (downsample * patch_size) != 0) {
    throw ValidationError("input size " + std::to_string(height) + "x" + std::to_string(width) +
                          " must be divisible by downsample*patch = " + std::to_string(downsample * patch_size));
  }
}

void EncoderConfig::check_image(Index h, Index w, Index c) const {
  if (c != 3) throw ShapeError("image must have 3 channels, got " + std::to_string(c));
  const Index m = downsample * patch_size;
  if (h < 1 || w < 1 || h % m != 0 || w % m != 0) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " is not a multiple of " +
                     std::to_string(m) + " pixels");
  }
}

void RegularizerConfig::validate() const {
  if (depth < 0) throw ValidationError("regularizer depth must be >= 0");
  if (kernel < 1 || kernel % 2 == 0) throw ValidationError("regularizer kernel must be odd");
}

std::vector<TensorSpec> parameter_layout(const ModelConfig& config) {
  const auto& e = config.encoder;
  const auto& r = config.regularizer;
  const Index patch_in = e.patch_size * e.patch_size * 3;
  std::vector<TensorSpec> out;
  auto he = [](Index fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  out.push_back({"patch.weight", 1, patch_in, e.hidden, he(patch_in)});
  out.push_back({"patch.bias", 1, 1, e.hidden, 0.0});
  for (Index l = 0; l < e.mixing_layers; ++l) {
    const std::string p = "mix" + std::to_string(l);
    out.push_back({p + ".dw.kernel", 3, 3, e.hidden, he(9)});
    out.push_back({p + ".dw.bias", 1, 1, e.hidden, 0.0});
    // Small residual branch so each layer starts close to the identity.
    out.push_back({p + ".pw.weight", 1, e.hidden, e.hidden, 0.1 * he(e.hidden)});
    out.push_back({p + ".pw.bias", 1, 1, e.hidden, 0.0});
  }
  out.push_back({"proj.weight", 1, e.hidden, e.embed_dim, std::sqrt(1.0 / static_cast<double>(e.hidden * e.embed_dim))});
  out.push_back({"proj.bias", 1, 1, e.embed_dim, 0.0});
  for (Index d = 0; d < r.depth; ++d) {
    const std::string p = "reg" + std::to_string(d);
    out.push_back({p + ".kernel", r.kernel, r.kernel, 1, 0.05, true});
    // A positive start keeps the block's ReLU active; a shift shared by all
    // labels leaves the softmax unchanged.
    out.push_back({p + ".bias", 1, 1, 1, 0.0, false, 1.0});
  }
  return out;
}

std::size_t encoder_tensor_count(const ModelConfig& config) {
  return 4 + 4 * static_cast<std::size_t>(config.encoder.mixing_layers);
}

// Config text ----------------------------------------------------------------

std::string config_to_text(const ModelConfig& c) {
  std::ostringstream s;
  s << "height=" << c.encoder.height << '\n'
    << "width=" << c.encoder.width << '\n'
    << "downsample=" << c.encoder.downsample << '\n'
    << "embed_dim=" << c.encoder.embed_dim << '\n'
    << "hidden=" << c.encoder.hidden << '\n'
    << "mixing_layers=" << c.encoder.mixing_layers << '\n'
    << "patch_size=" << c.encoder.patch_size << '\n'
    << "block=" << to_string(c.regularizer.kind) << '\n'
    << "depth=" << c.regularizer.depth << '\n'
    << "kernel=" << c.regularizer.kernel << '\n'
    << "normalize=" << (c.normalize_embeddings ? 1 : 0) << '\n';
  return s.str();
}

ModelConfig config_from_text(std::string_view text) {
  std::map<std::string, std::string, std::less<>> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint config: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto integer = [&](std::string_view key) -> Index {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("checkpoint config: missing '" + std::string(key) + "'");
    Index v = 0;
    const auto& s = it->second;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw FormatError("checkpoint config: bad value for '" + std::string(key) + "'");
    }
    kv.erase(it);
    return v;
  };
  ModelConfig c;
  c.encoder.height = integer("height");
  c.encoder.width = integer("width");
  c.encoder.downsample = integer("downsample");
  c.encoder.embed_dim = integer("embed_dim");
  c.encoder.hidden = integer("hidden");
  c.encoder.mixing_layers = integer("mixing_layers");
  c.encoder.patch_size = integer("patch_size");
  c.regularizer.depth = integer("depth");
  c.regularizer.kernel = integer("kernel");
  c.normalize_embeddings = integer("normalize") != 0;
  const auto block = kv.find("block");
  if (block == kv.end()) throw FormatError("checkpoint config: missing 'block'");
  c.regularizer.kind = parse_block_kind(block->second);
  kv.erase(block);
  if (!kv.empty()) throw FormatError("checkpoint config: unknown key '" + kv.begin()->first + "'");
  c.validate();
  return c;
}

// Checkpoint -----------------------------------------------------------------

std::vector<unsigned char> serialize_checkpoint(const ModelParameters<float>& params) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  const std::string cfg = config_to_text(params.config());
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  w.u32(static_cast<std::uint32_t>(params.seed() & 0xffffffffu));
  w.u32(static_cast<std::uint32_t>(params.seed() >> 32));
  const auto& tensors = params.tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.height()));
    w.u32(static_cast<std::uint32_t>(t.value.width()));
    w.u32(static_cast<std::uint32_t>(t.value.channels()));
  }
  for (const auto& t : tensors) {
    for (Index i = 0; i < t.value.size(); ++i) w.f32(t.value.data()[i]);
  }
  return w.buffer();
}

ModelParameters<float> parse_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      std::string_view(reinterpret_cast<const char*>(bytes.data()), kCheckpointMagic.size()) != kCheckpointMagic) {
    throw MagicMismatchError("checkpoint: bad magic");
  }
  io::ByteReader r(bytes, "checkpoint");
  r.bytes(kCheckpointMagic.size());
  const std::uint32_t cfg_len = r.u32();
  const ModelConfig config = config_from_text(r.bytes(cfg_len));
  const std::uint64_t lo = r.u32();
  const std::uint64_t hi = r.u32();
  const std::uint64_t seed = lo | (hi << 32);
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor<float>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.bytes(r.u16()));
    const Index h = r.u32();
    const Index wd = r.u32();
    const Index c = r.u32();
    tensors.push_back({std::move(name), DenseMapf(h, wd, c)});
  }
  for (auto& t : tensors) {
    for (Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = r.f32();
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  try {
    return ModelParameters<float>(config, seed, std::move(tensors));
  } catch (const ShapeError& e) {
    throw DimensionMismatchError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const ModelParameters<float>& params, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(params));
}

ModelParameters<float> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::read_file(path));
}

}  // namespace langseg
