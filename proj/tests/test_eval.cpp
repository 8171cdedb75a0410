#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "crtnet/errors.hpp"
#include "crtnet/eval.hpp"
#include "test_support.hpp"

using namespace crtnet;

namespace {

PerformanceVector labelled(const std::vector<double>& values) {
  PerformanceVector v;
  for (std::size_t i = 0; i < values.size(); ++i) v.cells.emplace_back("c" + std::to_string(i), values[i]);
  return v;
}

// Mixed outcomes across every tag and both bins.
EvalReport mixed_report(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SampleOutcome> out;
  for (ConditionTag tag : all_conditions())
    for (SizeBin bin : {SizeBin::Small, SizeBin::Large})
      for (int i = 0; i < 7 + static_cast<int>(rng.uniform_int(0, 20)); ++i) {
        SampleOutcome o;
        o.label = static_cast<int>(rng.uniform_int(0, 7));
        o.predicted = rng.uniform() < 0.6 ? o.label : (o.label + 1) % 8;
        o.p = rng.uniform();
        o.condition = tag;
        o.size_bin = bin;
        out.push_back(o);
      }
  return EvalReport::from_outcomes(out);
}

std::vector<Sample> paired(ConditionTag tag, std::size_t n) {
  std::vector<Sample> s;
  for (std::size_t k = 0; k < n; ++k)
    s.push_back(generate_sample(sample_seed(9, "test", k), tag, static_cast<int>(k % 8), SceneConfig{},
                                default_classes()));
  return s;
}

}  // namespace

TEST_CASE("cell statistics") {
  const CellStats half{100, 50};
  CHECK(half.accuracy() == 0.5);
  CHECK(half.sem() == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(CellStats{10, 10}.sem() == 0.0);
  CHECK(CellStats{}.accuracy() == 0.0);

  const EvalReport r = mixed_report(3);
  CellStats sum;
  for (const auto& [k, c] : r.cells) {
    sum.n += c.n;
    sum.correct += c.correct;
    CHECK(c.accuracy() >= 0.0);
    CHECK(c.accuracy() <= 1.0);
  }
  CHECK(r.overall() == sum);
  CHECK(r.cells.size() == 18);
}

TEST_CASE("oracle predictions score perfectly") {
  const Dataset data = support::make_dataset(24, 4, ConditionTag::Gravity);
  std::vector<SampleOutcome> out;
  for (const ManifestRow& row : data.rows())
    out.push_back({row.class_id, row.class_id, 1.0, row.condition, row.size_bin});
  const EvalReport r = EvalReport::from_outcomes(out);
  for (const auto& [k, c] : r.cells) {
    CHECK(c.accuracy() == 1.0);
    CHECK(c.sem() == 0.0);
  }
  CHECK(r.overall().n == 24);
}

TEST_CASE("evaluate") {
  const ModelConfig cfg = support::small_model();
  Rng rng(2);
  const LoadedModel model{cfg, CrtnetParams::init(cfg, rng)};
  const Dataset data = support::make_dataset(16, 6, ConditionTag::CoOccur);
  const EvalReport a = evaluate(data, model, std::nullopt, 1);
  const EvalReport b = evaluate(data, model, std::nullopt, 3);
  CHECK(a == b);
  CHECK(a.overall().n == 16);
  CHECK(a.mean_confidence.count(ConditionTag::CoOccur) == 1);
  for (const auto& [k, c] : a.cells) CHECK(k.first == ConditionTag::CoOccur);

  ModelConfig narrow = cfg;
  narrow.num_classes = 3;
  Rng r2(2);
  CHECK_THROWS_AS(evaluate(data, LoadedModel{narrow, CrtnetParams::init(narrow, r2)}), ConfigError);
}

TEST_CASE("pearson") {
  const std::vector<double> v = {0.9, 0.4, 0.75, 0.1, 0.33, 0.6};
  std::vector<double> affine, neg;
  for (double x : v) {
    affine.push_back(2 * x + 1);
    neg.push_back(-x);
  }
  CHECK(pearson(v, affine) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson(v, neg) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(std::abs(pearson(std::vector<double>{1, 0, 1, 0}, std::vector<double>{1, 1, 0, 0})) < 1e-12);
  CHECK(pearson(v, v) == 1.0);

  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(12), b(12), scaled(12);
    const double scale = 0.01 + 10 * rng.uniform(), shift = rng.uniform() * 6 - 3;
    for (int i = 0; i < 12; ++i) {
      a[i] = rng.uniform();
      b[i] = rng.uniform();
      scaled[i] = scale * a[i] + shift;
    }
    const double r = pearson(a, b);
    CHECK(std::abs(pearson(scaled, b) - r) < 1e-12);
    CHECK(pearson(b, a) == doctest::Approx(r).epsilon(1e-14));
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
  }

  CHECK_THROWS_AS(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), UndefinedCorrelationError);
  CHECK_THROWS_AS(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), ContractError);
  CHECK_THROWS_AS(pearson(std::vector<double>{1}, std::vector<double>{1}), ContractError);
  PerformanceVector x = labelled({1, 2, 3}), y = labelled({3, 1, 2});
  y.cells[1].first = "other";
  CHECK_THROWS_AS(pearson(x, y), ContractError);
}

TEST_CASE("performance vector") {
  const auto& labels = PerformanceVector::canonical_labels();
  REQUIRE(labels.size() == 12);
  CHECK(labels.front() == "normal/small");
  CHECK(labels.back() == "size/large");
  const EvalReport r = mixed_report(5);
  const PerformanceVector v = PerformanceVector::from_report(r);
  REQUIRE(v.cells.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) CHECK(v.cells[i].first == labels[i]);
  // The no-context cell pools both blanking modes.
  const CellStats nc = r.pooled([](const CellKey& k) {
    return (k.first == ConditionTag::NoContextGrey || k.first == ConditionTag::NoContextSaltPepper) &&
           k.second == SizeBin::Small;
  });
  CHECK(v.cells[2].second == nc.accuracy());
  CHECK(pearson(v, v) == 1.0);
}

TEST_CASE("report files") {
  const EvalReport r = mixed_report(7);
  const std::string csv = report_to_csv(r);
  CHECK(report_from_csv(csv) == r);
  std::istringstream in(csv);
  std::string line, header;
  std::getline(in, header);
  CHECK(header == "condition,size_bin,n,correct,accuracy,sem");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    const auto acc = line.substr(0, line.rfind(',')).substr(line.substr(0, line.rfind(',')).rfind(',') + 1);
    CHECK(acc.size() == 6);
    CHECK(acc[1] == '.');
  }
  CHECK(rows == r.cells.size());

  CHECK(format_fixed4(0.5) == "0.5000");
  CHECK(format_fixed4(2.0 / 3.0) == "0.6667");
  CHECK(format_fixed4(1.0) == "1.0000");
  CHECK(format_fixed4(0.0) == "0.0000");

  std::string broken = csv;
  broken.replace(broken.find('\n') + 1, 6, "bogus,");
  CHECK_THROWS_AS(report_from_csv(broken), ParseError);

  const std::string plot = report_to_plotdata(r);
  CHECK(plot.rfind("# order: normal/small", 0) == 0);

  const PerformanceVector v = PerformanceVector::from_report(r);
  const PerformanceVector back = vector_from_csv(vector_to_csv(v));
  CHECK(back.cells == v.cells);
  try {
    vector_from_csv("label,accuracy\nnormal/small,0.5\nnormal/large,abc\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("ablation variants") {
  const Dataset train = support::make_dataset(16, 1, ConditionTag::Normal, "train");
  std::vector<Sample> test_samples = paired(ConditionTag::Normal, 8);
  for (const Sample& s : paired(ConditionTag::Gravity, 8)) test_samples.push_back(s);
  const Dataset test = Dataset::from_samples(test_samples);
  TrainLoopOptions base;
  base.out_dir = support::scratch("ablate");
  base.model = support::small_model();
  base.train.epochs = 1;
  base.train.batch_size = 4;
  const AblationSuite suite = ablation_suite(train, test, base, {Ablation::Unweighted, Ablation::TargetOnly});
  REQUIRE(suite.entries.size() == 2);
  CHECK(suite.entries[0].acc_yp == suite.entries[0].acc_ytc);
  CHECK(suite.entries[1].acc_yp == suite.entries[1].acc_yt);
  CHECK(std::filesystem::exists(base.out_dir / "unweighted" / "model.ckpt"));
  CHECK(suite.table().find("target_only") != std::string::npos);

  // Unweighted: y_p and y_tc agree sample by sample.
  const LoadedModel unweighted = load_model(suite.entries[0].model_path);
  const auto fused = predict(test, unweighted.params, unweighted.config, Head::Fused);
  const auto context = predict(test, unweighted.params, unweighted.config, Head::Context);
  for (std::size_t i = 0; i < fused.size(); ++i) CHECK(fused[i].predicted == context[i].predicted);

  // Target only: blanking the context changes nothing.
  const LoadedModel target_only = load_model(suite.entries[1].model_path);
  const Dataset normal = Dataset::from_samples(paired(ConditionTag::Normal, 16));
  for (ConditionTag blank : {ConditionTag::NoContextGrey, ConditionTag::NoContextSaltPepper}) {
    const Dataset blanked = Dataset::from_samples(paired(blank, 16));
    const auto a = predict(normal, target_only.params, target_only.config);
    const auto b = predict(blanked, target_only.params, target_only.config);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].predicted == b[i].predicted);
      CHECK(a[i].p == b[i].p);
    }
  }
}
