// crtnet: dataset generation, training, evaluation, ablations, correlation and
// gradient checks from one binary.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crtnet/config.hpp"
#include "crtnet/errors.hpp"
#include "crtnet/eval.hpp"
#include "crtnet/gradcheck.hpp"
#include "crtnet/synth.hpp"
#include "crtnet/train.hpp"

namespace fs = std::filesystem;
using namespace crtnet;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by commands that read the run config.
struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  KeyValues flag_values;  // filled from individual flags after parsing

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "Config file of `key = value` lines")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "Override one config key, e.g. --set model.heads=2")->take_all();
  }

  RunConfig resolve() const {
    KeyValues kv;
    if (!config_file.empty()) kv = read_kv_file(config_file);
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
      kv[s.substr(0, eq)] = s.substr(eq + 1);
    }
    return RunConfig::from_kv(merge(kv, flag_values));
  }
};

// Registers an option whose value, when given, becomes config key `key`.
template <typename T>
CLI::Option* keyed(CLI::App* cmd, const std::string& flag, const std::string& key, T& storage, ConfigFlags& cfg,
                   const std::string& help) {
  return cmd->add_option(flag, storage, help)->each([&cfg, key](const std::string& v) { cfg.flag_values[key] = v; });
}

fs::path split_dir(const fs::path& data, const std::string& split) {
  if (fs::exists(data / "manifest.csv")) return data;
  if (fs::exists(data / split / "manifest.csv")) return data / split;
  throw IoError("no manifest.csv in " + data.string() + " or " + (data / split).string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

void print_report(const EvalReport& report, std::ostream& out) {
  out << pad("condition", 22) << pad("size", 7) << pad("n", 7) << pad("accuracy", 10) << "sem\n";
  for (const auto& [key, c] : report.cells)
    out << pad(to_string(key.first), 22) << pad(to_string(key.second), 7) << pad(std::to_string(c.n), 7)
        << pad(format_fixed4(c.accuracy()), 10) << format_fixed4(c.sem()) << "\n";
  const CellStats all = report.overall();
  out << pad("overall", 29) << pad(std::to_string(all.n), 7) << pad(format_fixed4(all.accuracy()), 10)
      << format_fixed4(all.sem()) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware object recognition: data, training and evaluation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads; 1 is fully deterministic")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  // generate -------------------------------------------------------------------
  ConfigFlags gen_cfg;
  std::string gen_out, gen_seed, gen_counts, gen_train_count;
  auto* gen = app.add_subcommand("generate", "Render the synthetic train/test dataset");
  gen->add_option("--out", gen_out, "Output directory")->required();
  keyed(gen, "--seed", "data.seed", gen_seed, gen_cfg, "Master seed");
  keyed(gen, "--counts", "data.counts", gen_counts, gen_cfg, "Test counts, e.g. normal=100,gravity=50");
  keyed(gen, "--train-count", "data.train_count", gen_train_count, gen_cfg, "Number of training scenes");
  gen_cfg.attach(gen);

  // train -----------------------------------------------------------------------
  ConfigFlags tr_cfg;
  std::string tr_data, tr_out, tr_resume, tr_epochs, tr_seed, tr_lr, tr_batch, tr_ablation, tr_optimizer;
  bool tr_val = false, tr_quiet = false;
  auto* tr = app.add_subcommand("train", "Train a model on a generated dataset");
  tr->add_option("--data", tr_data, "Dataset directory (or its train/ split)")->required();
  tr->add_option("--out", tr_out, "Run directory for checkpoints and metrics")->required();
  tr->add_option("--resume", tr_resume, "Training checkpoint to continue from")->check(CLI::ExistingFile);
  keyed(tr, "--epochs", "train.epochs", tr_epochs, tr_cfg, "Epochs to train");
  keyed(tr, "--seed", "train.seed", tr_seed, tr_cfg, "Training seed");
  keyed(tr, "--lr", "train.lr", tr_lr, tr_cfg, "Learning rate");
  keyed(tr, "--batch-size", "train.batch_size", tr_batch, tr_cfg, "Samples per update");
  keyed(tr, "--ablation", "train.ablation", tr_ablation, tr_cfg,
        "none, shared_encoder, target_only, unweighted or no_detachment");
  keyed(tr, "--optimizer", "train.optimizer", tr_optimizer, tr_cfg, "adam or sgd");
  tr->add_flag("--val", tr_val, "Also log metrics on the dataset's test split each epoch");
  tr->add_flag("--quiet", tr_quiet, "No per-epoch progress on stderr");
  tr_cfg.attach(tr);

  // eval ------------------------------------------------------------------------
  std::string ev_model, ev_data, ev_out, ev_fusion, ev_head = "y_p";
  auto* ev = app.add_subcommand("eval", "Condition x size-bin accuracy of a trained model");
  ev->add_option("--model", ev_model, "Model or training checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "Dataset directory (or a split with manifest.csv)")->required();
  ev->add_option("--out", ev_out, "Write report.csv, plotdata.csv and vector.csv here");
  ev->add_option("--fusion", ev_fusion, "Override fusion: confidence_weighted, target_only or context_only");
  ev->add_option("--head", ev_head, "Scored distribution: y_p, y_t or y_tc")
      ->check(CLI::IsMember({"y_p", "y_t", "y_tc"}))
      ->capture_default_str();

  // ablate ----------------------------------------------------------------------
  ConfigFlags ab_cfg;
  std::string ab_data, ab_out, ab_epochs, ab_seed;
  std::vector<std::string> ab_variants;
  auto* ab = app.add_subcommand("ablate", "Train and compare every ablation variant");
  ab->add_option("--data", ab_data, "Dataset directory with train/ and test/")->required();
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--variants", ab_variants, "Subset of variants (default: all five)");
  keyed(ab, "--epochs", "train.epochs", ab_epochs, ab_cfg, "Epochs per variant");
  keyed(ab, "--seed", "train.seed", ab_seed, ab_cfg, "Training seed shared by all variants");
  ab_cfg.attach(ab);

  // correlate -------------------------------------------------------------------
  std::string co_a, co_b;
  auto* co = app.add_subcommand("correlate", "Pearson correlation between two performance-vector CSVs");
  co->add_option("first", co_a, "Vector CSV (label,accuracy)")->required()->check(CLI::ExistingFile);
  co->add_option("second", co_b, "Vector CSV (label,accuracy)")->required()->check(CLI::ExistingFile);

  // gradcheck -------------------------------------------------------------------
  int gc_seeds = 20;
  std::uint64_t gc_first = 1;
  double gc_tol = 1e-4;
  bool gc_verbose = false;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and the tiny model");
  gc->add_option("--seeds", gc_seeds, "Number of random seeds")->check(CLI::PositiveNumber)->capture_default_str();
  gc->add_option("--first-seed", gc_first, "First seed")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "Maximum relative error")->capture_default_str();
  gc->add_flag("--verbose", gc_verbose, "Print every check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      const RunConfig rc = gen_cfg.resolve();
      fs::create_directories(gen_out);
      KeyValues echo = rc.to_kv();
      echo["run.threads"] = std::to_string(threads);
      write_run_manifest(fs::path(gen_out) / "run_config.txt", "generate", echo);
      const std::size_t n = build_dataset(gen_out, rc.data, rc.data_seed, threads);
      std::cout << "wrote " << n << " images to " << gen_out << "\n";
    } else if (*tr) {
      const RunConfig rc = tr_cfg.resolve();
      const Dataset train = Dataset::load(split_dir(tr_data, "train"), threads);
      std::optional<Dataset> val;
      if (tr_val) val = Dataset::load(split_dir(fs::path(tr_data), "test"), threads);
      fs::create_directories(tr_out);
      // Echo the model as it will actually be built, with the ablation applied.
      RunConfig effective = rc;
      effective.model = apply_detachment_policy(rc.model, rc.train.ablation);
      KeyValues echo = effective.to_kv();
      echo["run.threads"] = std::to_string(threads);
      echo["run.data"] = tr_data;
      if (!tr_resume.empty()) echo["run.resume"] = tr_resume;
      write_run_manifest(fs::path(tr_out) / "run_config.txt", "train", echo);
      TrainLoopOptions opts;
      opts.out_dir = tr_out;
      opts.model = rc.model;
      opts.train = rc.train;
      if (!tr_resume.empty()) opts.resume = tr_resume;
      opts.threads = threads;
      opts.verbose = !tr_quiet;
      const TrainResult res = train_loop(train, val ? &*val : nullptr, opts);
      std::cout << "model written to " << res.model_path.string() << "\n";
    } else if (*ev) {
      const LoadedModel model = load_model(fs::path(ev_model));
      const Dataset data = Dataset::load(split_dir(ev_data, "test"), threads);
      std::optional<FusionMode> fusion;
      if (!ev_fusion.empty()) {
        try {
          fusion = parse_fusion_mode(ev_fusion);
        } catch (const ConfigError& e) {
          throw UsageError(e.what());
        }
      }
      const Head head = ev_head == "y_t" ? Head::Target : ev_head == "y_tc" ? Head::Context : Head::Fused;
      const EvalReport report = evaluate(data, model, fusion, threads, head);
      print_report(report, std::cout);
      if (!ev_out.empty()) {
        fs::create_directories(ev_out);
        write_text(fs::path(ev_out) / "report.csv", report_to_csv(report));
        write_text(fs::path(ev_out) / "plotdata.csv", report_to_plotdata(report));
        write_text(fs::path(ev_out) / "vector.csv", vector_to_csv(PerformanceVector::from_report(report)));
        KeyValues echo;
        echo["run.model"] = ev_model;
        echo["run.data"] = ev_data;
        echo["run.head"] = ev_head;
        echo["run.fusion"] = fusion ? to_string(*fusion) : "checkpoint";
        echo["run.threads"] = std::to_string(threads);
        for (const auto& [k, v] : model.config.to_map()) echo["model." + k] = v;
        write_run_manifest(fs::path(ev_out) / "run_config.txt", "eval", echo);
      }
    } else if (*ab) {
      const RunConfig rc = ab_cfg.resolve();
      std::vector<Ablation> variants;
      for (const std::string& v : ab_variants) variants.push_back(parse_ablation(v));
      if (variants.empty()) variants = all_ablations();
      const Dataset train = Dataset::load(split_dir(fs::path(ab_data), "train"), threads);
      const Dataset test = Dataset::load(split_dir(fs::path(ab_data), "test"), threads);
      fs::create_directories(ab_out);
      KeyValues echo = rc.to_kv();
      echo["run.threads"] = std::to_string(threads);
      echo["run.data"] = ab_data;
      write_run_manifest(fs::path(ab_out) / "run_config.txt", "ablate", echo);
      TrainLoopOptions opts;
      opts.out_dir = ab_out;
      opts.model = rc.model;
      opts.train = rc.train;
      opts.threads = threads;
      opts.verbose = true;
      const AblationSuite suite = ablation_suite(train, test, opts, variants);
      for (const AblationEntry& e : suite.entries) {
        const fs::path dir = fs::path(ab_out) / to_string(e.ablation);
        write_text(dir / "report.csv", report_to_csv(e.report));
        write_text(dir / "plotdata.csv", report_to_plotdata(e.report));
        write_text(dir / "vector.csv", vector_to_csv(e.vector));
      }
      write_text(fs::path(ab_out) / "ablation_table.csv", suite.table());
      std::cout << suite.table();
    } else if (*co) {
      const PerformanceVector a = vector_from_csv(read_text(co_a));
      const PerformanceVector b = vector_from_csv(read_text(co_b));
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f", pearson(a, b));
      std::cout << buf << "\n";
    } else if (*gc) {
      const GradCheckReport report = run_gradcheck(gc_seeds, gc_first, gc_tol);
      if (gc_verbose)
        for (const auto& e : report.entries)
          std::cout << "seed " << e.seed << " " << e.name << " " << e.error << "\n";
      const auto failures = report.failures();
      for (const auto& f : failures)
        std::cerr << "FAIL seed " << f.seed << " " << f.name << ": relative error " << f.error << "\n";
      std::cout << report.entries.size() << " checks over " << gc_seeds << " seeds, max relative error "
                << report.max_error() << ", " << failures.size() << " above " << gc_tol << "\n";
      return failures.empty() ? 0 : 1;
    }
  } catch (const UsageError& e) {
    std::cerr << "crtnet: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "crtnet: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "crtnet: parse error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "crtnet: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
