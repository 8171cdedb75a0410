// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
// Criteria 4-6 train the default model on the full-size dataset (about seven
// trainings), so a complete run takes tens of minutes on one core.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crtnet/checkpoint.hpp"
#include "crtnet/errors.hpp"
#include "crtnet/eval.hpp"
#include "crtnet/gradcheck.hpp"
#include "crtnet/ops.hpp"
#include "crtnet/synth.hpp"
#include "crtnet/train.hpp"

using namespace crtnet;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

double wall_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  std::string all;
  for (const auto& [name, body] : files) all += name + "\n" + body;
  return all;
}

// Accuracy in percent over outcomes on ambiguous-pair classes that pass `keep`.
double ambiguous_accuracy(const std::vector<SampleOutcome>& outcomes,
                          const std::function<bool(const SampleOutcome&)>& keep) {
  int n = 0, correct = 0;
  for (const SampleOutcome& o : outcomes) {
    if (!is_ambiguous(default_classes(), o.label) || !keep(o)) continue;
    ++n;
    correct += o.predicted == o.label;
  }
  return n ? 100.0 * correct / n : std::nan("");
}

auto condition_is(ConditionTag tag) {
  return [tag](const SampleOutcome& o) { return o.condition == tag; };
}

auto small_condition(ConditionTag tag) {
  return [tag](const SampleOutcome& o) { return o.condition == tag && o.size_bin == SizeBin::Small; };
}

double target_encoder_grad(const CrtnetParams& params, const ModelConfig& cfg, const Example& ex, Rng& rng) {
  for (Tensor p : params.all()) p.zero_grad();
  const LossBundle l = compute_losses(forward(ex.image, ex.box, params, cfg, rng, true), ex.label);
  backward(add(l.loss_t, l.loss_p));
  const EncoderParams& e = params.target_encoder;
  double s = 0;
  for (const Tensor& t : {e.conv1, e.bias1, e.conv2, e.bias2, e.conv3, e.bias3})
    for (double g : t.grad()) s += std::abs(g);
  for (Tensor p : params.all()) p.zero_grad();
  return s;
}

struct Context {
  fs::path work;
  int threads = 1;
  std::uint64_t data_seed = 1;
  std::vector<std::uint64_t> train_seeds = {1, 2, 3};

  std::optional<Dataset> train, test;
  std::optional<AblationSuite> suite;
  double suite_cpu = 0, train_wall = 0;  // train_wall: slowest timed default training
  std::map<std::uint64_t, std::vector<SampleOutcome>> default_outcomes;  // by training seed
  std::vector<SampleOutcome> target_only_outcomes;
  fs::path default_model;

  TrainLoopOptions options(std::uint64_t seed, const fs::path& out) const {
    TrainLoopOptions o;
    o.out_dir = out;
    o.train.seed = seed;
    o.threads = threads;
    return o;
  }

  void load_data() {
    if (train) return;
    const fs::path dir = work / "data";
    fs::remove_all(dir);
    DatasetConfig cfg;
    cfg.test_counts = DatasetConfig::default_test_counts();
    build_dataset(dir, cfg, data_seed, threads);
    train = Dataset::load(dir / "train", threads);
    test = Dataset::load(dir / "test", threads);
  }

  // Full ablation suite on the first training seed; its default and
  // target-only members double as the models for criteria 4 and 5.
  void run_suite() {
    if (suite) return;
    load_data();
    const double c0 = cpu_seconds();
    suite = ablation_suite(*train, *test, options(train_seeds[0], work / "ablation"));
    suite_cpu = cpu_seconds() - c0;
    for (const AblationEntry& e : suite->entries) {
      const LoadedModel m = load_model(e.model_path);
      if (e.ablation == Ablation::None) {
        default_model = e.model_path;
        default_outcomes[train_seeds[0]] = predict(*test, m.params, m.config, Head::Fused, std::nullopt, threads);
      } else if (e.ablation == Ablation::TargetOnly) {
        target_only_outcomes = predict(*test, m.params, m.config, Head::Fused, std::nullopt, threads);
      }
    }
  }

  const std::vector<SampleOutcome>& outcomes_for(std::uint64_t seed) {
    run_suite();
    auto it = default_outcomes.find(seed);
    if (it != default_outcomes.end()) return it->second;
    const double w0 = wall_seconds();
    const TrainResult r = train_loop(*train, nullptr, options(seed, work / ("seed_" + std::to_string(seed))));
    train_wall = std::max(train_wall, wall_seconds() - w0);
    return default_outcomes[seed] = predict(*test, r.params, r.model, Head::Fused, std::nullopt, threads);
  }
};

Verdict gradient_suite() {
  Verdict v;
  const double c0 = cpu_seconds();
  const GradCheckReport report = run_gradcheck(20, 1, 1e-4);
  const double cpu = cpu_seconds() - c0;
  v.require(report.passed(), std::to_string(report.failures().size()) + " checks above 1e-4");
  v.require(cpu < 60.0, "runtime under 60 s");
  v.note(std::to_string(report.entries.size()) + " checks, max rel err " + fmt("%.2e", report.max_error()) +
         ", " + fmt("%.1f", cpu) + " s CPU");
  return v;
}

Verdict detachment(Context& ctx) {
  Verdict v;
  const ModelConfig base;
  const ModelConfig attached = apply_detachment_policy(base, Ablation::NoDetachment);
  std::vector<Sample> samples;
  for (std::uint64_t s = 0; s < 5; ++s)
    samples.push_back(generate_sample(sample_seed(99, "check", s), ConditionTag::Normal, static_cast<int>(s),
                                      SceneConfig{}, default_classes()));
  const Dataset data = Dataset::from_samples(samples);
  int positive = 0;
  double worst_default = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng init(1000 + s);
    const CrtnetParams params = CrtnetParams::init(base, init);
    Rng r1(s), r2(s);
    worst_default = std::max(worst_default, target_encoder_grad(params, base, data.example(s), r1));
    positive += target_encoder_grad(params, attached, data.example(s), r2) > 0.0;
  }
  // The trained default model as well.
  ctx.run_suite();
  const LoadedModel trained = load_model(ctx.default_model);
  Rng r(7);
  worst_default = std::max(worst_default, target_encoder_grad(trained.params, trained.config, data.example(0), r));
  v.require(worst_default == 0.0, "default wiring leaks gradient into the target encoder");
  v.require(positive == 5, "no-detachment gradient positive on 5/5 seeds");
  v.note("default sum " + fmt("%g", worst_default) + ", no-detachment positive on " + std::to_string(positive) +
         "/5");
  return v;
}

Verdict architecture() {
  Verdict v;
  NoGradGuard no_grad;
  const ModelConfig cfg;
  Rng rng(31);
  const CrtnetParams params = CrtnetParams::init(cfg, rng);
  double attn_err = 0, dist_err = 0, convex_violation = 0;
  const int forwards = 10000;
  for (int t = 0; t < forwards; ++t) {
    const int w = 40 + static_cast<int>(rng.uniform_int(0, 60)), h = 40 + static_cast<int>(rng.uniform_int(0, 60));
    std::vector<double> px(static_cast<std::size_t>(3 * w * h));
    for (double& x : px) x = rng.uniform();
    const Tensor img({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, std::move(px));
    const int bw = rng.uniform_int(2, w / 2), bh = rng.uniform_int(2, h / 2);
    const BoundingBox box{rng.uniform_int(0, w - bw), rng.uniform_int(0, h - bh), bw, bh};
    const Prediction pr = forward(img, box, params, cfg, rng, t % 2 == 0);
    const AttentionMaps& a = pr.attention;
    for (std::size_t l = 0; l < a.layers; ++l)
      for (std::size_t hd = 0; hd < a.heads; ++hd) {
        double s = 0;
        for (std::size_t k = 0; k < a.tokens; ++k) s += a.at(l, hd, k);
        attn_err = std::max(attn_err, std::abs(s - 1.0));
      }
    for (const Tensor* y : {&pr.y_t, &pr.y_tc, &pr.y_p}) {
      double s = 0;
      for (double x : y->data()) s += x;
      dist_err = std::max(dist_err, std::abs(s - 1.0));
    }
    for (std::size_t c = 0; c < pr.y_p.numel(); ++c) {
      const double lo = std::min(pr.y_t[c], pr.y_tc[c]), hi = std::max(pr.y_t[c], pr.y_tc[c]);
      convex_violation = std::max({convex_violation, lo - pr.y_p[c], pr.y_p[c] - hi});
    }
  }
  // Pooling against an explicit token mean.
  bool pool_exact = true;
  for (int t = 0; t < 100; ++t) {
    const std::size_t gh = 1 + rng.uniform_int(6), gw = 1 + rng.uniform_int(6), d = 1 + rng.uniform_int(32);
    std::vector<double> f(d * gh * gw);
    for (double& x : f) x = rng.uniform(-3, 3);
    const Tensor fmap({d, gh, gw}, std::move(f));
    const Tensor tokens = tokenize_context(fmap);
    const Tensor pooled = pool_target(fmap);
    const std::size_t cells = gh * gw;
    for (std::size_t k = 0; k < d; ++k) {
      double s = 0;
      for (std::size_t i = 0; i < cells; ++i) s += tokens[i * d + k];
      pool_exact = pool_exact && pooled[k] == s / static_cast<double>(cells);
    }
  }
  v.require(attn_err <= 1e-9, "attention rows sum to 1 within 1e-9");
  v.require(dist_err <= 1e-6, "distributions sum to 1 within 1e-6");
  v.require(convex_violation <= 0.0, "fusion convexity");
  v.require(pool_exact, "pooling equals token mean bitwise");
  v.note(std::to_string(forwards) + " forwards, attention err " + fmt("%.1e", attn_err) + ", distribution err " +
         fmt("%.1e", dist_err));
  return v;
}

Verdict contextual_benefit(Context& ctx) {
  Verdict v;
  ctx.run_suite();
  const auto& full = ctx.outcomes_for(ctx.train_seeds[0]);
  // A separately timed default training on the next seed.
  ctx.outcomes_for(ctx.train_seeds[1]);
  const double normal = ambiguous_accuracy(full, condition_is(ConditionTag::Normal));
  const double grey = ambiguous_accuracy(full, condition_is(ConditionTag::NoContextGrey));
  const double target_only = ambiguous_accuracy(ctx.target_only_outcomes, condition_is(ConditionTag::Normal));
  v.require(normal >= 90.0, "normal >= 90");
  v.require(target_only <= 60.0, "target-only <= 60");
  v.require(normal - grey >= 15.0, "no-context gap >= 15");
  v.require(ctx.train_wall <= 15 * 60.0, "training within 15 min");
  v.note("normal " + fmt("%.1f", normal) + ", target-only " + fmt("%.1f", target_only) + ", no-context grey " +
         fmt("%.1f", grey) + ", timed training " + fmt("%.0f", ctx.train_wall) + " s");
  return v;
}

Verdict violation_degradation(Context& ctx) {
  Verdict v;
  int ok = 0;
  for (std::uint64_t seed : ctx.train_seeds) {
    const auto& out = ctx.outcomes_for(seed);
    const double normal = ambiguous_accuracy(out, small_condition(ConditionTag::Normal));
    const double gravity = ambiguous_accuracy(out, small_condition(ConditionTag::Gravity));
    const double cooccur = ambiguous_accuracy(out, small_condition(ConditionTag::CoOccur));
    const double both = ambiguous_accuracy(out, small_condition(ConditionTag::CoOccurGravity));
    const bool pass = normal - std::max(gravity, cooccur) >= 5.0 && std::min(gravity, cooccur) - both >= 5.0;
    ok += pass;
    v.note("seed " + std::to_string(seed) + ": N " + fmt("%.1f", normal) + " G " + fmt("%.1f", gravity) + " C " +
           fmt("%.1f", cooccur) + " CG " + fmt("%.1f", both) + (pass ? "" : " (gap < 5)"));
  }
  v.require(ok == static_cast<int>(ctx.train_seeds.size()),
            "ordering on " + std::to_string(ctx.train_seeds.size()) + "/" + std::to_string(ctx.train_seeds.size()) +
                " seeds");
  return v;
}

Verdict ablation_machinery(Context& ctx) {
  Verdict v;
  ctx.run_suite();
  bool unweighted_seen = false;
  for (const AblationEntry& e : ctx.suite->entries)
    if (e.ablation == Ablation::Unweighted) {
      unweighted_seen = true;
      v.require(e.acc_yp == e.acc_ytc, "unweighted y_p accuracy equals y_tc accuracy");
      v.note("unweighted y_p " + fmt("%.4f", e.acc_yp) + " y_tc " + fmt("%.4f", e.acc_ytc));
    }
  v.require(unweighted_seen && ctx.suite->entries.size() == all_ablations().size(), "all variants ran");
  Rng r1(1), r2(1);
  const ModelConfig base;
  const std::size_t separate = CrtnetParams::init(base, r1).encoder_parameter_count();
  const std::size_t shared =
      CrtnetParams::init(apply_detachment_policy(base, Ablation::SharedEncoder), r2).encoder_parameter_count();
  v.require(2 * shared == separate, "shared encoder has half the encoder parameters");
  v.require(ctx.suite_cpu < 90 * 60.0, "suite under 90 min CPU");
  v.note("encoder params " + std::to_string(separate) + " vs shared " + std::to_string(shared) + ", suite " +
         fmt("%.0f", ctx.suite_cpu) + " s CPU");
  return v;
}

Verdict correlation_tool(Context& ctx) {
  Verdict v;
  const std::vector<double> a = {1, 0, 1, 0}, b = {1, 1, 0, 0};
  std::vector<double> x, affine, neg;
  Rng rng(5);
  for (int i = 0; i < 12; ++i) x.push_back(rng.uniform());
  for (double t : x) {
    affine.push_back(2 * t + 1);
    neg.push_back(-t);
  }
  v.require(std::abs(pearson(x, affine) - 1.0) <= 1e-12, "2v+1 gives 1");
  v.require(std::abs(pearson(x, neg) + 1.0) <= 1e-12, "-v gives -1");
  v.require(std::abs(pearson(a, b)) <= 1e-12, "orthogonal example gives 0");
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(12), q(12), s(12);
    const double scale = 0.01 + 5 * rng.uniform(), shift = rng.uniform(-2, 2);
    for (int i = 0; i < 12; ++i) {
      p[i] = rng.uniform();
      q[i] = rng.uniform();
      s[i] = scale * p[i] + shift;
    }
    worst = std::max({worst, std::abs(pearson(s, q) - pearson(p, q)), std::abs(pearson(p, q) - pearson(q, p))});
  }
  v.require(worst <= 1e-12, "affine invariance and symmetry within 1e-12");

  // Two stored 12-cell vectors against a coefficient worked out by hand:
  // w is u with its first two cells swapped, so in units of the step the
  // deviations give r = (143 - 1) / 143 = 0.993.
  PerformanceVector u, w;
  const auto& labels = PerformanceVector::canonical_labels();
  for (std::size_t i = 0; i < 12; ++i) {
    u.cells.emplace_back(labels[i], 0.05 * static_cast<double>(i) + 0.2);
    const std::size_t j = i == 0 ? 1 : i == 1 ? 0 : i;
    w.cells.emplace_back(labels[i], 0.05 * static_cast<double>(j) + 0.2);
  }
  const fs::path dir = ctx.work / "vectors";
  fs::create_directories(dir);
  std::ofstream(dir / "u.csv") << vector_to_csv(u);
  std::ofstream(dir / "w.csv") << vector_to_csv(w);
  const double r = pearson(vector_from_csv(slurp(dir / "u.csv")), vector_from_csv(slurp(dir / "w.csv")));
  v.require(fmt("%.2f", r) == "0.99", "stored vectors give 0.99");
  v.note("stored-vector coefficient " + fmt("%.4f", r) + ", invariance err " + fmt("%.1e", worst));
  return v;
}

Verdict determinism(Context& ctx) {
  Verdict v;
  DatasetConfig cfg;
  cfg.train_count = 40;
  cfg.test_counts = DatasetConfig::default_test_counts();
  for (auto& [tag, n] : cfg.test_counts) n = 6;
  const fs::path a = ctx.work / "gen_a", b = ctx.work / "gen_b";
  fs::remove_all(a);
  fs::remove_all(b);
  build_dataset(a, cfg, 7, 1);
  build_dataset(b, cfg, 7, ctx.threads);
  v.require(tree(a) == tree(b), "generation byte-reproducible");

  const std::string manifest = slurp(a / "test" / "manifest.csv");
  v.require(manifest_to_string(parse_manifest(manifest)) == manifest, "manifest round trip");

  ctx.run_suite();
  const CheckpointFile original = read_checkpoint(ctx.default_model);
  const LoadedModel m = load_model(original);
  const std::string bytes = slurp(ctx.default_model);
  v.require(encode_checkpoint(model_checkpoint(m.config, m.params)) == bytes, "checkpoint round trip bit-exact");

  const EvalReport report = EvalReport::from_outcomes(ctx.outcomes_for(ctx.train_seeds[0]));
  const std::string csv = report_to_csv(report);
  v.require(report_from_csv(csv) == report && report_to_csv(report_from_csv(csv)) == csv, "report CSV round trip");
  const PerformanceVector vec = PerformanceVector::from_report(report);
  v.require(vector_from_csv(vector_to_csv(vec)).cells == vec.cells, "vector CSV round trip");
  v.note("dataset, manifest, checkpoint, report and vector files round trip");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the crtnet library"};
  Context ctx;
  ctx.work = fs::temp_directory_path() / "crtnet_acceptance";
  std::string work;
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory for datasets and models");
  app.add_option("--threads", ctx.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);
  if (!work.empty()) ctx.work = work;
  fs::create_directories(ctx.work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient suite", [] { return gradient_suite(); }},
      {"detachment topology", [&] { return detachment(ctx); }},
      {"architecture invariants", [] { return architecture(); }},
      {"contextual benefit", [&] { return contextual_benefit(ctx); }},
      {"violation degradation", [&] { return violation_degradation(ctx); }},
      {"ablation machinery", [&] { return ablation_machinery(ctx); }},
      {"correlation tool", [&] { return correlation_tool(ctx); }},
      {"determinism and formats", [&] { return determinism(ctx); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("error: ") + e.what();
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << v.detail
              << std::endl;
  }
  return failed ? 1 : 0;
}
