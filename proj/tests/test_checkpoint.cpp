#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "crtnet/checkpoint.hpp"
#include "crtnet/errors.hpp"
#include "test_support.hpp"

using namespace crtnet;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("encode/decode is bit-exact") {
  CheckpointFile f;
  f.kind = CheckpointFile::Kind::Training;
  f.meta = {{"a", "1"}, {"b.c", "x y"}, {"empty", ""}};
  f.records.emplace_back("odd", Tensor({5}, {-0.0, std::numeric_limits<double>::denorm_min(), 1e308,
                                             std::nextafter(1.0, 2.0), -std::numeric_limits<double>::infinity()}));
  f.records.emplace_back("mat", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  f.records.emplace_back("quad", Tensor({1, 2, 1, 2}, {0.1, 0.2, 0.3, 0.4}));
  const std::string bytes = encode_checkpoint(f);
  CHECK(bytes.substr(0, 8) == "CRTNETCK");
  const CheckpointFile g = decode_checkpoint(bytes);
  CHECK(g.kind == f.kind);
  CHECK(g.meta == f.meta);
  REQUIRE(g.records.size() == f.records.size());
  for (std::size_t i = 0; i < f.records.size(); ++i) {
    CHECK(g.records[i].first == f.records[i].first);
    CHECK(bitwise_equal(g.records[i].second, f.records[i].second));
  }
  CHECK(encode_checkpoint(g) == bytes);
}

TEST_CASE("malformed checkpoints are rejected") {
  CheckpointFile f;
  f.records.emplace_back("w", Tensor({2}, {1, 2}));
  const std::string bytes = encode_checkpoint(f);
  CHECK_THROWS_AS(decode_checkpoint("NOTACKPT" + bytes.substr(8)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), CheckpointError);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(""), CheckpointError);
  CheckpointFile bad_meta;
  bad_meta.meta["k=v"] = "1";
  CHECK_THROWS_AS(encode_checkpoint(bad_meta), CheckpointError);
  CHECK_THROWS_AS(read_checkpoint("/nonexistent/file.ckpt"), IoError);
}

TEST_CASE("model checkpoint round trip") {
  const auto dir = support::scratch("ckpt");
  for (bool shared : {false, true}) {
    ModelConfig cfg = support::small_model();
    cfg.share_encoders = shared;
    cfg.fusion_mode = FusionMode::TargetOnly;
    Rng rng(3);
    const CrtnetParams params = CrtnetParams::init(cfg, rng);
    const auto path = dir / "m.ckpt";
    write_checkpoint(path, model_checkpoint(cfg, params));
    CHECK_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));
    const LoadedModel loaded = load_model(path);
    CHECK(loaded.config == cfg);
    const auto a = params.named(), b = loaded.params.named();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].first == b[i].first);
      CHECK(bitwise_equal(a[i].second, b[i].second));
    }
    CHECK(loaded.params.target_encoder.conv1.same_storage(loaded.params.context_encoder.conv1) == shared);
    // Writing the loaded model again reproduces the file byte for byte.
    CHECK(encode_checkpoint(model_checkpoint(loaded.config, loaded.params)) == support::slurp(path));
  }
}

TEST_CASE("incompatible parameters") {
  ModelConfig cfg = support::small_model();
  Rng rng(1);
  const CrtnetParams params = CrtnetParams::init(cfg, rng);
  CheckpointFile f = model_checkpoint(cfg, params);
  SUBCASE("shape mismatch") {
    f.records[0].second = Tensor({1}, {0.0});
    CHECK_THROWS_AS(load_model(f), CheckpointError);
  }
  SUBCASE("missing record") {
    f.records.pop_back();
    CHECK_THROWS_AS(load_model(f), CheckpointError);
  }
  SUBCASE("bad config") {
    f.meta["model.heads"] = "3";
    CHECK_THROWS_AS(load_model(f), CheckpointError);
  }
}
