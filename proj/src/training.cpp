#include "langseg/training.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "binary_io.hpp"

namespace langseg {

void validate_sample(const TrainSample& s) {
  if (s.image.channels() != 3) throw ValidationError("sample image must have 3 channels");
  if (s.target.rows() != s.image.height() || s.target.cols() != s.image.width()) {
    throw ValidationError("sample target " + std::to_string(s.target.rows()) + "x" + std::to_string(s.target.cols()) +
                          " does not match image " + s.image.shape_string());
  }
  const auto n = static_cast<std::int32_t>(s.label_set.size());
  for (Index i = 0; i < s.target.size(); ++i) {
    const std::int32_t v = s.target.data()[i];
    if (v != kIgnoreLabel && (v < 0 || v >= n)) {
      throw ValidationError("target index " + std::to_string(v) + " out of range for " + std::to_string(n) +
                            " labels");
    }
  }
}

void TrainConfig::validate() const {
  if (!(temperature > 0)) throw ValidationError("temperature must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ValidationError("momentum must be in [0, 1)");
  if (!(base_lr > 0)) throw ValidationError("base_lr must be > 0");
  if (max_steps < 0) throw ValidationError("max_steps must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(poly_power >= 0)) throw ValidationError("poly_power must be >= 0");
  if (!(weight_decay >= 0)) throw ValidationError("weight_decay must be >= 0");
  if (!(clip_norm >= 0)) throw ValidationError("clip_norm must be >= 0");
}

double poly_lr(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.max_steps) {
    throw ValidationError("step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.max_steps) + "]");
  }
  if (step == cfg.max_steps) return 0.0;
  const double remaining = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.max_steps);
  return cfg.base_lr * std::pow(remaining, cfg.poly_power);
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T v{};
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size()) {
    throw ValidationError("config: bad value '" + value + "' for " + key);
  }
  return v;
}

}  // namespace

TrainConfig parse_train_config(std::string_view text) {
  TrainConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key == "base_lr") {
      cfg.base_lr = parse_number<double>(key, value);
    } else if (key == "momentum") {
      cfg.momentum = parse_number<double>(key, value);
    } else if (key == "poly_power") {
      cfg.poly_power = parse_number<double>(key, value);
    } else if (key == "temperature") {
      cfg.temperature = parse_number<double>(key, value);
    } else if (key == "max_steps") {
      cfg.max_steps = parse_number<std::int64_t>(key, value);
    } else if (key == "batch_size") {
      cfg.batch_size = parse_number<std::int64_t>(key, value);
    } else if (key == "seed") {
      cfg.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "ignore_index") {
      if (value == "none") {
        cfg.ignore_index.reset();
      } else {
        cfg.ignore_index = parse_number<std::int32_t>(key, value);
      }
    } else if (key == "weight_decay") {
      cfg.weight_decay = parse_number<double>(key, value);
    } else if (key == "clip_norm") {
      cfg.clip_norm = parse_number<double>(key, value);
    } else if (key == "nesterov") {
      if (value != "true" && value != "false") throw ValidationError("config: nesterov must be true or false");
      cfg.nesterov = value == "true";
    } else {
      throw ValidationError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_train_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string to_text(const TrainConfig& cfg) {
  std::ostringstream s;
  s << std::setprecision(17);
  s << "base_lr = " << cfg.base_lr << '\n'
    << "momentum = " << cfg.momentum << '\n'
    << "poly_power = " << cfg.poly_power << '\n'
    << "temperature = " << cfg.temperature << '\n'
    << "max_steps = " << cfg.max_steps << '\n'
    << "batch_size = " << cfg.batch_size << '\n'
    << "seed = " << cfg.seed << '\n'
    << "ignore_index = " << (cfg.ignore_index ? std::to_string(*cfg.ignore_index) : "none") << '\n'
    << "weight_decay = " << cfg.weight_decay << '\n'
    << "clip_norm = " << cfg.clip_norm << '\n'
    << "nesterov = " << (cfg.nesterov ? "true" : "false") << '\n';
  return s.str();
}

void write_history_csv(std::span<const LossRecord> history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,lr,loss\n" << std::setprecision(9);
  for (const auto& r : history) out << r.step << ',' << r.lr << ',' << r.loss << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace langseg
