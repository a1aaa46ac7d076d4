#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "langseg/embeddings.hpp"
#include "langseg/model.hpp"

namespace langseg {

/// RGB colour of a label, derived from a hash of its name so it stays the
/// same when the label set is edited or reordered.
std::array<unsigned char, 3> label_color(std::string_view label);

/// H x W x 3 image painted with each pixel's label colour.
DenseMapf colorize(const LabelMap& labels, const LabelSet& legend);

/// predict() for images of any size: the image is edge-padded up to the
/// encoder's size multiple and the result cropped back.
SegmentationOutput predict_any_size(const ModelParameters<float>& params, const DenseMapf& image,
                                    const LabelSet& labels, const EmbeddingTable& table);

std::string base64_encode(std::span<const unsigned char> bytes);
std::vector<unsigned char> base64_decode(std::string_view text);

struct HttpReply {
  int status = 200;
  std::string body;
};

struct ServiceLimits {
  Index max_side = 1024;
  std::size_t max_labels = 256;
};

/// The JSON API behind the HTTP server. Handlers are const and keep no
/// per-request state, so one instance serves concurrent requests.
///
/// POST /segment  {"image": base64 PNG, "labels": [...],
///                 "options": {"temperature": t, "return_scores": bool}}
///   -> {"width", "height", "label_map": base64 of H*W index bytes,
///       "legend": [{"label", "color"}], "scores"?: [{"label", "min", "max", "mean"}]}
/// GET /vocabulary -> {"labels": [...]} sorted
/// GET /health     -> {"status": "ok", "digest", "config"}
class SegmentationService {
 public:
  SegmentationService(ModelParameters<float> params, EmbeddingTable table, ServiceLimits limits = {});

  HttpReply segment(std::string_view request_body) const;
  HttpReply vocabulary() const;
  HttpReply health() const;

  /// Hex FNV-1a over the serialized checkpoint and table.
  const std::string& digest() const { return digest_; }

 private:
  ModelParameters<float> params_;
  EmbeddingTable table_;
  ServiceLimits limits_;
  std::string digest_;
};

/// Thin cpp-httplib front end for a SegmentationService.
class HttpServer {
 public:
  explicit HttpServer(const SegmentationService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds without serving; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop() is called.
  void listen();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace langseg
