#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "crtnet/model.hpp"
#include "crtnet/synth.hpp"
#include "crtnet/train.hpp"

namespace crtnet {

using KeyValues = std::map<std::string, std::string>;

/// Flat `key = value` lines. '#' starts a comment, blank lines are ignored,
/// surrounding whitespace is trimmed. Throws ParseError naming the line for
/// malformed or duplicate keys.
KeyValues parse_kv(const std::string& text);
KeyValues read_kv_file(const std::filesystem::path& path);
/// One `key = value` line per entry, sorted by key.
std::string format_kv(const KeyValues& kv);

/// Merged view of every tunable. Keys are namespaced: model.*, train.* and
/// data.* (scene keys plus data.seed, data.train_count and data.counts).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetConfig data;
  std::uint64_t data_seed = 1;

  RunConfig();

  /// Starts from defaults and applies the given keys; unknown keys and
  /// namespaces raise ConfigError. Every section is validated.
  static RunConfig from_kv(const KeyValues& kv);
  KeyValues to_kv() const;
  void validate() const;
};

/// `overrides` wins over `base` key by key.
KeyValues merge(KeyValues base, const KeyValues& overrides);

/// Writes the effective config next to a run's outputs.
void write_run_manifest(const std::filesystem::path& path, const std::string& command, const KeyValues& effective);

}  // namespace crtnet
