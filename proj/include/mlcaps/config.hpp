#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "mlcaps/data.hpp"
#include "mlcaps/model.hpp"
#include "mlcaps/train.hpp"

namespace mlcaps {

struct RunConfig {
  DatasetKind dataset = DatasetKind::mnist;
  std::string profile = "full";
  ModelConfig model;
  TrainSchedule schedule;
  std::size_t train_limit = 0;  // 0 = whole split
  std::size_t test_limit = 0;
};

inline std::vector<LambdaStage> default_lambda_schedule(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::mnist: return {{0, {0.90, 0.10}}, {5, {0.10, 0.90}}, {10, {0.02, 0.98}}};
    case DatasetKind::fashion_mnist:
      return {{0, {0.98, 0.01, 0.01}},
              {5, {0.10, 0.70, 0.20}},
              {10, {0.07, 0.10, 0.83}},
              {15, {0.05, 0.05, 0.90}},
              {25, {0.01, 0.01, 0.98}}};
    case DatasetKind::cifar10:
      return {{0, {0.90, 0.05, 0.05}},
              {5, {0.10, 0.70, 0.20}},
              {11, {0.07, 0.20, 0.73}},
              {17, {0.05, 0.15, 0.80}},
              {24, {0.05, 0.10, 0.85}}};
    case DatasetKind::cifar100:
      return {{0, {0.90, 0.08, 0.02}},
              {7, {0.20, 0.70, 0.10}},
              {15, {0.15, 0.30, 0.55}},
              {22, {0.10, 0.15, 0.75}},
              {33, {0.05, 0.15, 0.80}}};
  }
  return {};
}

inline std::string default_hierarchy_file(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::mnist: return "mnist.hier";
    case DatasetKind::fashion_mnist: return "fashion_mnist.hier";
    case DatasetKind::cifar10: return "cifar10.hier";
    case DatasetKind::cifar100: return "cifar100.hier";
  }
  return {};
}

// The architecture and schedule used for each dataset in the reported experiments.
inline RunConfig default_config(DatasetKind kind) {
  RunConfig c;
  c.dataset = kind;
  const bool gray = kind == DatasetKind::mnist || kind == DatasetKind::fashion_mnist;
  c.model.channels = gray ? 1 : 3;
  c.model.height = c.model.width = gray ? 28 : 32;
  c.model.conv_filters = kind == DatasetKind::mnist ? std::vector<std::size_t>{32, 64}
                                                    : std::vector<std::size_t>{32, 64, 128, 256, 512};
  c.schedule.lambda_schedule = default_lambda_schedule(kind);
  switch (kind) {
    case DatasetKind::mnist: c.schedule.epochs = 15; break;
    case DatasetKind::fashion_mnist: c.schedule.epochs = 30; break;
    case DatasetKind::cifar10: c.schedule.epochs = 30; break;
    case DatasetKind::cifar100: c.schedule.epochs = 40; break;
  }
  c.schedule.mixup = !gray;
  c.schedule.batch_size = 128;
  return c;
}

inline std::vector<std::string> profile_names() { return {"full", "reduced", "tiny"}; }

// reduced: halved conv widths and a narrower primary layer for CPU runs.
// tiny: small enough to memorize a 100-image subset in minutes.
inline void apply_profile(RunConfig& c, const std::string& name) {
  if (name == "full") {
    c = default_config(c.dataset);
  } else if (name == "reduced") {
    c = default_config(c.dataset);
    for (auto& f : c.model.conv_filters) f /= 2;
    c.model.primary_capsule_channels = 4;
    c.schedule.batch_size = 32;
    c.train_limit = 10000;
  } else if (name == "tiny") {
    c = default_config(c.dataset);
    c.model.conv_filters = {16, 16};
    c.model.primary_capsule_channels = 2;
    c.model.decoder_hidden = {64, 64};
    c.schedule.epochs = 30;
    c.schedule.batch_size = 10;
    c.train_limit = 100;
    c.test_limit = 100;
  } else {
    throw config_error("unknown profile '" + name + "' (full, reduced, tiny)");
  }
  c.profile = name;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename U>
U parse_number(const std::string& key, const std::string& text) {
  U v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty())
    throw config_error("config: '" + key + "' expects a number, got '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw config_error("config: '" + key + "' expects true/false, got '" + text + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& part : split(text, ',')) out.push_back(parse_number<std::size_t>(key, part));
  return out;
}

// "0:0.9,0.1; 5:0.1,0.9"
inline std::vector<LambdaStage> parse_lambda_schedule(const std::string& key, const std::string& text) {
  std::vector<LambdaStage> stages;
  for (const auto& part : split(text, ';')) {
    if (part.empty()) continue;
    const auto colon = part.find(':');
    if (colon == std::string::npos)
      throw config_error("config: lambda stage '" + part + "' needs the form epoch:w1,w2,...");
    LambdaStage st;
    st.start_epoch = parse_number<std::size_t>(key, trim(part.substr(0, colon)));
    for (const auto& w : split(part.substr(colon + 1), ',')) st.weights.push_back(parse_number<double>(key, w));
    stages.push_back(std::move(st));
  }
  return stages;
}

// Shortest text that reads back to the same double.
inline std::string num(double v) {
  char buf[32];
  return std::string(buf, std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general).ptr);
}

template <typename V>
std::string join(const std::vector<V>& v, const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    if constexpr (std::is_floating_point_v<V>) out += num(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

// Sets one key. `dataset` and `profile` reset everything to that preset, so
// they belong at the top of a file.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  auto& m = c.model;
  auto& s = c.schedule;
  if (key == "dataset") {
    c.dataset = parse_dataset_kind(value);
    apply_profile(c, c.profile);
  } else if (key == "profile") apply_profile(c, value);
  else if (key == "conv_filters") m.conv_filters = parse_sizes(key, value);
  else if (key == "primary_capsule_channels") m.primary_capsule_channels = parse_number<std::size_t>(key, value);
  else if (key == "primary_dim") m.primary_dim = parse_number<std::size_t>(key, value);
  else if (key == "secondary_dim") m.secondary_dim = parse_number<std::size_t>(key, value);
  else if (key == "routing_iters") m.routing_iters = parse_number<std::size_t>(key, value);
  else if (key == "differentiate_coupling") m.differentiate_coupling = parse_bool(key, value);
  else if (key == "secondary_init_std") m.secondary_init_std = parse_number<double>(key, value);
  else if (key == "decoder_hidden") m.decoder_hidden = parse_sizes(key, value);
  else if (key == "m_plus") m.loss.m_plus = parse_number<double>(key, value);
  else if (key == "m_minus") m.loss.m_minus = parse_number<double>(key, value);
  else if (key == "gamma") m.loss.gamma = parse_number<double>(key, value);
  else if (key == "tau") m.loss.tau = parse_number<double>(key, value);
  else if (key == "initial_lr") s.initial_lr = parse_number<double>(key, value);
  else if (key == "lr_decay") s.lr_decay = parse_number<double>(key, value);
  else if (key == "lambda_schedule") s.lambda_schedule = parse_lambda_schedule(key, value);
  else if (key == "epochs") s.epochs = parse_number<std::size_t>(key, value);
  else if (key == "batch_size") s.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "mixup") s.mixup = parse_bool(key, value);
  else if (key == "mixup_alpha") s.mixup_alpha = parse_number<double>(key, value);
  else if (key == "seed") s.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "evaluate_train") s.evaluate_train = parse_bool(key, value);
  else if (key == "train_limit") c.train_limit = parse_number<std::size_t>(key, value);
  else if (key == "test_limit") c.test_limit = parse_number<std::size_t>(key, value);
  else throw config_error("config: unknown key '" + key + "'");
}

using Settings = std::vector<std::pair<std::string, std::string>>;

inline Settings parse_settings(std::istream& in, const std::string& origin = "config") {
  Settings out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error(origin + ":" + std::to_string(lineno) + ": expected key = value");
    out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline Settings load_settings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("config: cannot open " + path.string());
  return parse_settings(in, path.string());
}

inline void apply_settings(RunConfig& c, const Settings& settings) {
  for (const auto& [k, v] : settings) apply_setting(c, k, v);
}

// Round-trips through parse_settings + apply_settings.
inline void write_config(std::ostream& out, const RunConfig& c) {
  using detail::join;
  using detail::num;
  const auto& m = c.model;
  const auto& s = c.schedule;
  out << "dataset = " << dataset_name(c.dataset) << '\n'
      << "profile = " << c.profile << '\n'
      << "# model\n"
      << "conv_filters = " << join(m.conv_filters) << '\n'
      << "primary_capsule_channels = " << m.primary_capsule_channels << '\n'
      << "primary_dim = " << m.primary_dim << '\n'
      << "secondary_dim = " << m.secondary_dim << '\n'
      << "routing_iters = " << m.routing_iters << '\n'
      << "differentiate_coupling = " << (m.differentiate_coupling ? "true" : "false") << '\n'
      << "secondary_init_std = " << num(m.secondary_init_std) << '\n'
      << "decoder_hidden = " << join(m.decoder_hidden) << '\n'
      << "m_plus = " << num(m.loss.m_plus) << '\n'
      << "m_minus = " << num(m.loss.m_minus) << '\n'
      << "gamma = " << num(m.loss.gamma) << '\n'
      << "tau = " << num(m.loss.tau) << '\n'
      << "# schedule (lambda stages: start epoch, 0-indexed, then one weight per level)\n"
      << "initial_lr = " << num(s.initial_lr) << '\n'
      << "lr_decay = " << num(s.lr_decay) << '\n'
      << "lambda_schedule = ";
  for (std::size_t i = 0; i < s.lambda_schedule.size(); ++i)
    out << (i ? "; " : "") << s.lambda_schedule[i].start_epoch << ':' << join(s.lambda_schedule[i].weights);
  out << '\n'
      << "epochs = " << s.epochs << '\n'
      << "batch_size = " << s.batch_size << '\n'
      << "mixup = " << (s.mixup ? "true" : "false") << '\n'
      << "mixup_alpha = " << num(s.mixup_alpha) << '\n'
      << "seed = " << s.seed << '\n'
      << "evaluate_train = " << (s.evaluate_train ? "true" : "false") << '\n'
      << "# data (0 = whole split)\n"
      << "train_limit = " << c.train_limit << '\n'
      << "test_limit = " << c.test_limit << '\n';
}

inline std::string to_string(const RunConfig& c) {
  std::ostringstream os;
  write_config(os, c);
  return os.str();
}

}  // namespace mlcaps
