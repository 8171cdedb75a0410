#include "crtnet/config.hpp"

#include <fstream>
#include <sstream>

#include "crtnet/errors.hpp"

namespace crtnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues parse_kv(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second)
      throw ParseError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return kv;
}

KeyValues read_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_kv(buf.str());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string format_kv(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

RunConfig::RunConfig() { data.test_counts = DatasetConfig::default_test_counts(); }

RunConfig RunConfig::from_kv(const KeyValues& kv) {
  KeyValues model, train, scene;
  RunConfig rc;
  for (const auto& [key, value] : kv) {
    const auto dot = key.find('.');
    const std::string ns = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string rest = dot == std::string::npos ? key : key.substr(dot + 1);
    if (ns == "model") model[rest] = value;
    else if (ns == "train") train[rest] = value;
    else if (ns == "data") {
      if (rest == "seed") {
        try {
          std::size_t used = 0;
          const long long s = std::stoll(value, &used);
          if (used != value.size() || s < 0) throw std::invalid_argument("seed");
          rc.data_seed = static_cast<std::uint64_t>(s);
        } catch (const std::exception&) {
          throw ConfigError("'data.seed' must be a non-negative integer, got '" + value + "'");
        }
      } else if (rest == "train_count") {
        try {
          std::size_t used = 0;
          rc.data.train_count = std::stoi(value, &used);
          if (used != value.size()) throw std::invalid_argument("count");
        } catch (const std::exception&) {
          throw ConfigError("'data.train_count' must be an integer, got '" + value + "'");
        }
      } else if (rest == "counts") {
        try {
          rc.data.test_counts = DatasetConfig::parse_counts(value);
        } catch (const ParseError& e) {
          throw ConfigError(std::string("data.counts: ") + e.what());
        }
      } else {
        scene[rest] = value;
      }
    } else {
      throw ConfigError("unknown config key '" + key + "' (expected a model., train. or data. prefix)");
    }
  }
  rc.model = ModelConfig::from_map(model);
  rc.train = TrainConfig::from_map(train);
  rc.data.scene = SceneConfig::from_map(scene);
  rc.validate();
  return rc;
}

KeyValues RunConfig::to_kv() const {
  KeyValues kv;
  for (const auto& [k, v] : model.to_map()) kv["model." + k] = v;
  for (const auto& [k, v] : train.to_map()) kv["train." + k] = v;
  for (const auto& [k, v] : data.scene.to_map()) kv["data." + k] = v;
  kv["data.seed"] = std::to_string(data_seed);
  kv["data.train_count"] = std::to_string(data.train_count);
  kv["data.counts"] = DatasetConfig::format_counts(data.test_counts);
  return kv;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.scene.validate();
  if (data.train_count < 0) throw ConfigError("data.train_count must be non-negative");
}

KeyValues merge(KeyValues base, const KeyValues& overrides) {
  for (const auto& [k, v] : overrides) base[k] = v;
  return base;
}

void write_run_manifest(const std::filesystem::path& path, const std::string& command, const KeyValues& effective) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write run manifest " + path.string());
  out << "# effective configuration for `crtnet " << command << "`\n" << format_kv(effective);
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace crtnet
