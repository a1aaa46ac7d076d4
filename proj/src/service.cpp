#include "langseg/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>

#include "langseg/png_io.hpp"

namespace langseg {

using nlohmann::json;

std::array<unsigned char, 3> label_color(std::string_view label) {
  const std::uint64_t h = mix_seed(fnv1a64(label));
  std::array<unsigned char, 3> rgb{};
  // Keep channels in [40, 240] so colours stay distinguishable from black/white.
  for (int c = 0; c < 3; ++c) rgb[c] = static_cast<unsigned char>(40 + ((h >> (16 * c)) & 0xffff) % 201);
  return rgb;
}

DenseMapf colorize(const LabelMap& labels, const LabelSet& legend) {
  std::vector<std::array<unsigned char, 3>> palette;
  for (const auto& l : legend.labels()) palette.push_back(label_color(l));
  DenseMapf out(labels.rows(), labels.cols(), 3);
  for (Index i = 0; i < labels.size(); ++i) {
    const auto k = static_cast<std::size_t>(labels.data()[i]);
    if (k >= palette.size()) throw ValidationError("label index outside the legend");
    for (Index c = 0; c < 3; ++c) out.data()[3 * i + c] = static_cast<float>(palette[k][c]) / 255.f;
  }
  return out;
}

SegmentationOutput predict_any_size(const ModelParameters<float>& params, const DenseMapf& image,
                                    const LabelSet& labels, const EmbeddingTable& table) {
  const auto& enc = params.config().encoder;
  if (image.channels() != 3) throw ShapeError("image must have 3 channels");
  if (image.height() < 1 || image.width() < 1) throw ShapeError("image is empty");
  const Index m = enc.downsample * enc.patch_size;
  const Index H = image.height(), W = image.width();
  const Index Hp = (H + m - 1) / m * m, Wp = (W + m - 1) / m * m;
  if (Hp == H && Wp == W) return predict(params, image, labels, table);

  DenseMapf padded(Hp, Wp, 3);
  for (Index y = 0; y < Hp; ++y) {
    for (Index x = 0; x < Wp; ++x) {
      for (Index c = 0; c < 3; ++c) padded(y, x, c) = image(std::min(y, H - 1), std::min(x, W - 1), c);
    }
  }
  auto full = predict(params, padded, labels, table);
  SegmentationOutput out{full.label_map.topLeftCorner(H, W), DenseMapf(H, W, full.scores.channels()), labels};
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) out.scores.matrix().row(y * W + x) = full.scores.matrix().row(y * Wp + x);
  }
  return out;
}

// Base64 -----------------------------------------------------------------------

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

}  // namespace

std::string base64_encode(std::span<const unsigned char> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    for (int s = 18; s >= 0; s -= 6) out += kAlphabet[(v >> s) & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    std::uint32_t v = bytes[i] << 16;
    if (rest == 2) v |= bytes[i + 1] << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<unsigned char> base64_decode(std::string_view text) {
  std::vector<unsigned char> out;
  std::uint32_t acc = 0;
  int bits = 0;
  std::size_t padding = 0;
  for (char c : text) {
    if (c == '\n' || c == '\r' || c == ' ') continue;
    if (c == '=') {
      ++padding;
      continue;
    }
    const int v = decode_char(c);
    if (v < 0 || padding > 0) throw FormatError("invalid base64 data");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<unsigned char>((acc >> bits) & 0xff));
    }
  }
  if (padding > 2) throw FormatError("invalid base64 padding");
  return out;
}

// Service ------------------------------------------------------------------------

namespace {

constexpr double kDefaultTemperature = 0.07;

HttpReply error_reply(int status, const std::string& message, const std::string& label = {}) {
  json j{{"error", message}};
  if (!label.empty()) j["label"] = label;
  return {status, j.dump()};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

SegmentationService::SegmentationService(ModelParameters<float> params, EmbeddingTable table, ServiceLimits limits)
    : params_(std::move(params)), table_(std::move(table)), limits_(limits) {
  if (table_.dimension() != params_.config().encoder.embed_dim) {
    throw ShapeError("embedding table dimension does not match the model");
  }
  Fnv1a h;
  h.update(serialize_checkpoint(params_));
  h.update(serialize_table(table_));
  digest_ = hex64(h.digest());
}

HttpReply SegmentationService::segment(std::string_view request_body) const {
  json req;
  try {
    req = json::parse(request_body);
  } catch (const json::exception& e) {
    return error_reply(400, std::string("malformed JSON: ") + e.what());
  }
  if (!req.is_object() || !req.contains("image") || !req["image"].is_string()) {
    return error_reply(400, "request needs a string field 'image' (base64 PNG)");
  }
  if (!req.contains("labels") || !req["labels"].is_array()) {
    return error_reply(400, "request needs an array field 'labels'");
  }
  std::vector<std::string> names;
  for (const auto& l : req["labels"]) {
    if (!l.is_string()) return error_reply(400, "labels must be strings");
    names.push_back(l.get<std::string>());
  }
  if (names.empty() || names.size() > limits_.max_labels) {
    return error_reply(400, "label count must be between 1 and " + std::to_string(limits_.max_labels));
  }
  double temperature = kDefaultTemperature;
  bool return_scores = false;
  if (req.contains("options")) {
    const auto& o = req["options"];
    if (!o.is_object()) return error_reply(400, "'options' must be an object");
    if (o.contains("temperature")) {
      if (!o["temperature"].is_number()) return error_reply(400, "temperature must be a number");
      temperature = o["temperature"].get<double>();
      if (!(temperature > 0) || !std::isfinite(temperature)) return error_reply(400, "temperature must be positive");
    }
    if (o.contains("return_scores")) {
      if (!o["return_scores"].is_boolean()) return error_reply(400, "return_scores must be a boolean");
      return_scores = o["return_scores"].get<bool>();
    }
  }

  try {
    const LabelSet labels(std::move(names));
    for (const auto& l : labels.labels()) (void)table_.at(l);
    const auto png = base64_decode(req["image"].get<std::string>());
    const DenseMapf image = decode_png_rgb(png);
    if (image.height() > limits_.max_side || image.width() > limits_.max_side) {
      return error_reply(413, "image " + std::to_string(image.width()) + "x" + std::to_string(image.height()) +
                                  " exceeds the " + std::to_string(limits_.max_side) + "x" +
                                  std::to_string(limits_.max_side) + " limit");
    }
    const auto out = predict_any_size(params_, image, labels, table_);
    if (!out.scores.all_finite()) throw NumericError("non-finite scores");

    std::vector<unsigned char> map(static_cast<std::size_t>(out.label_map.size()));
    for (Index i = 0; i < out.label_map.size(); ++i) map[i] = static_cast<unsigned char>(out.label_map.data()[i]);

    json legend = json::array();
    for (const auto& l : labels.labels()) {
      const auto c = label_color(l);
      legend.push_back({{"label", l}, {"color", {c[0], c[1], c[2]}}});
    }
    json resp{{"width", image.width()},
              {"height", image.height()},
              {"label_map", base64_encode(map)},
              {"legend", legend}};
    if (return_scores) {
      // Softmax probabilities at the requested temperature, summarised per label.
      const auto& s = out.scores.matrix();
      const Index N = s.cols();
      Eigen::ArrayXd mn = Eigen::ArrayXd::Constant(N, 1.0), mx = Eigen::ArrayXd::Zero(N), sum = Eigen::ArrayXd::Zero(N);
      for (Index p = 0; p < s.rows(); ++p) {
        Eigen::ArrayXd z = s.row(p).transpose().cast<double>().array() / temperature;
        z = (z - z.maxCoeff()).exp();
        z /= z.sum();
        mn = mn.min(z);
        mx = mx.max(z);
        sum += z;
      }
      json scores = json::array();
      for (Index k = 0; k < N; ++k) {
        scores.push_back({{"label", labels[static_cast<std::size_t>(k)]},
                          {"min", mn[k]},
                          {"max", mx[k]},
                          {"mean", sum[k] / static_cast<double>(s.rows())}});
      }
      resp["scores"] = scores;
    }
    return {200, resp.dump()};
  } catch (const UnknownLabelError& e) {
    return error_reply(400, e.what(), e.label());
  } catch (const NumericError& e) {
    return error_reply(500, e.what());
  } catch (const Error& e) {
    return error_reply(400, e.what());
  }
}

HttpReply SegmentationService::vocabulary() const {
  auto labels = table_.labels();
  std::sort(labels.begin(), labels.end());
  return {200, json{{"labels", labels}}.dump()};
}

HttpReply SegmentationService::health() const {
  const auto& cfg = params_.config();
  json j{{"status", "ok"},
         {"digest", digest_},
         {"config",
          {{"embed_dim", cfg.encoder.embed_dim},
           {"downsample", cfg.encoder.downsample},
           {"block", to_string(cfg.regularizer.kind)},
           {"depth", cfg.regularizer.depth},
           {"normalize", cfg.normalize_embeddings}}},
         {"labels", table_.size()}};
  return {200, j.dump()};
}

// HTTP front end ------------------------------------------------------------------

struct HttpServer::Impl {
  const SegmentationService& service;
  httplib::Server server;
};

HttpServer::HttpServer(const SegmentationService& service) : impl_(new Impl{service, {}}) {
  auto& svc = impl_->service;
  auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  impl_->server.Post("/segment", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    const auto start = std::chrono::steady_clock::now();
    send(res, svc.segment(req.body));
    const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    // Timing lives in a header so identical requests keep identical bodies.
    res.set_header("X-Inference-Ms", std::to_string(ms));
  });
  impl_->server.Get("/vocabulary", [&svc, send](const httplib::Request&, httplib::Response& res) {
    send(res, svc.vocabulary());
  });
  impl_->server.Get("/health", [&svc, send](const httplib::Request&, httplib::Response& res) {
    send(res, svc.health());
  });
  impl_->server.set_payload_max_length(64u << 20);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw IoError("cannot bind to " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) throw IoError("cannot bind to " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() {
  if (!impl_->server.listen_after_bind()) throw IoError("HTTP server stopped with an error");
}

void HttpServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

void HttpServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace langseg
