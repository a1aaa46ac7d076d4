#include "langseg/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstring>

namespace langseg {

namespace {

struct ReadCursor {
  std::span<const unsigned char> data;
  std::size_t pos = 0;
};

void read_from_memory(png_structp png, png_bytep out, png_size_t n) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->data.size() - cur->pos < n) png_error(png, "truncated PNG");
  std::memcpy(out, cur->data.data() + cur->pos, n);
  cur->pos += n;
}

void write_to_memory(png_structp png, png_bytep in, png_size_t n) {
  auto* buf = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  buf->insert(buf->end(), in, in + n);
}

void flush_noop(png_structp) {}

void error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  *err = msg;
  png_longjmp(png, 1);
}

void warning_fn(png_structp, png_const_charp) {}

// Decodes to 8-bit rows with the requested number of channels (1 or 3).
std::vector<unsigned char> decode(std::span<const unsigned char> bytes, int want_channels, png_uint_32& width,
                                  png_uint_32& height, PngText* text) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError("not a PNG image");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, error_fn, warning_fn);
  if (!png) throw FormatError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
  ReadCursor cursor{bytes, 0};
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png: " + err);
  }
  png_set_read_fn(png, &cursor, read_from_memory);
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool is_gray = (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA);
  if (want_channels == 3 && is_gray) png_set_gray_to_rgb(png);
  if (want_channels == 1 && !is_gray) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png: expected a single-channel label image");
  }
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  if (stride != static_cast<std::size_t>(width) * static_cast<std::size_t>(want_channels)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png: unexpected row layout");
  }
  pixels.resize(stride * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, info);
  if (text) {
    png_textp chunks = nullptr;
    int n = 0;
    png_get_text(png, info, &chunks, &n);
    for (int i = 0; i < n; ++i) (*text)[chunks[i].key] = std::string(chunks[i].text, chunks[i].text_length);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

std::vector<unsigned char> encode(const unsigned char* pixels, png_uint_32 width, png_uint_32 height, int channels,
                                  const PngText& text) {
  if (width == 0 || height == 0) throw ShapeError("cannot encode an empty PNG");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, error_fn, warning_fn);
  if (!png) throw IoError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> out;
  std::vector<png_text> chunks;
  std::vector<std::string> storage;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: " + err);
  }
  png_set_write_fn(png, &out, write_to_memory, flush_noop);
  png_set_IHDR(png, info, width, height, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  storage.reserve(text.size() * 2);
  for (const auto& [k, v] : text) {
    storage.push_back(k);
    storage.push_back(v);
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = storage[storage.size() - 2].data();
    t.text = storage.back().data();
    t.text_length = storage.back().size();
    chunks.push_back(t);
  }
  if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * static_cast<std::size_t>(channels);
  for (png_uint_32 y = 0; y < height; ++y) png_write_row(png, pixels + y * stride);
  png_write_end(png, info);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

std::vector<unsigned char> encode_png_rgb(const DenseMapf& image) {
  if (image.channels() != 3) throw ShapeError("encode_png_rgb: image must have 3 channels");
  std::vector<unsigned char> px(static_cast<std::size_t>(image.size()));
  for (Index i = 0; i < image.size(); ++i) {
    px[static_cast<std::size_t>(i)] = static_cast<unsigned char>(quantize_unit(image.data()[i]) * 255.f + 0.5f);
  }
  return encode(px.data(), static_cast<png_uint_32>(image.width()), static_cast<png_uint_32>(image.height()), 3, {});
}

DenseMapf decode_png_rgb(std::span<const unsigned char> bytes) {
  png_uint_32 w = 0, h = 0;
  const auto px = decode(bytes, 3, w, h, nullptr);
  DenseMapf out(h, w, 3);
  for (std::size_t i = 0; i < px.size(); ++i) out.data()[i] = static_cast<float>(px[i]) / 255.f;
  return out;
}

std::vector<unsigned char> encode_png_labels(const LabelMap& labels, const PngText& text) {
  std::vector<unsigned char> px(static_cast<std::size_t>(labels.size()));
  for (Index i = 0; i < labels.size(); ++i) {
    const std::int32_t v = labels.data()[i];
    if (v < 0 || v > 255) throw ValidationError("label " + std::to_string(v) + " does not fit in 8 bits");
    px[static_cast<std::size_t>(i)] = static_cast<unsigned char>(v);
  }
  return encode(px.data(), static_cast<png_uint_32>(labels.cols()), static_cast<png_uint_32>(labels.rows()), 1, text);
}

LabelMap decode_png_labels(std::span<const unsigned char> bytes, PngText* text) {
  png_uint_32 w = 0, h = 0;
  const auto px = decode(bytes, 1, w, h, text);
  LabelMap out(h, w);
  for (std::size_t i = 0; i < px.size(); ++i) out.data()[i] = px[i];
  return out;
}

}  // namespace langseg
