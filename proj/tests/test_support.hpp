#pragma once

// Small in-memory datasets and scratch directories shared by the tests.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "crtnet/gradcheck.hpp"
#include "crtnet/synth.hpp"
#include "crtnet/train.hpp"

namespace support {

/// `n` scenes of one condition, classes cycling through the roster.
inline crtnet::Dataset make_dataset(std::size_t n, std::uint64_t master, crtnet::ConditionTag tag,
                                    const std::string& split = "test") {
  std::vector<crtnet::Sample> samples;
  const crtnet::SceneConfig cfg;
  for (std::size_t k = 0; k < n; ++k)
    samples.push_back(crtnet::generate_sample(crtnet::sample_seed(master, split, k), tag, static_cast<int>(k % 8),
                                              cfg, crtnet::default_classes()));
  return crtnet::Dataset::from_samples(samples);
}

/// Tiny model with the full 8-class roster.
inline crtnet::ModelConfig small_model() {
  crtnet::ModelConfig c = crtnet::tiny_model_config();
  c.num_classes = 8;
  return c;
}

inline std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("crtnet_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace support
