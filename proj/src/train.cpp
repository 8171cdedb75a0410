#include "crtnet/train.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "crtnet/errors.hpp"
#include "crtnet/ops.hpp"

namespace crtnet {

// Names ---------------------------------------------------------------------

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

namespace {
const char* const kAblationNames[] = {"none", "shared_encoder", "target_only", "unweighted", "no_detachment"};
}

std::string to_string(Ablation ablation) { return kAblationNames[static_cast<int>(ablation)]; }

Ablation parse_ablation(const std::string& name) {
  for (int i = 0; i < 5; ++i)
    if (name == kAblationNames[i]) return static_cast<Ablation>(i);
  throw ConfigError("unknown ablation '" + name +
                    "' (expected none, shared_encoder, target_only, unweighted or no_detachment)");
}

const std::vector<Ablation>& all_ablations() {
  static const std::vector<Ablation> all = {Ablation::None, Ablation::SharedEncoder, Ablation::TargetOnly,
                                            Ablation::Unweighted, Ablation::NoDetachment};
  return all;
}

// Config ----------------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr must be finite and non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double as_double(const std::string& k, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + k + "' expects a number, got '" + v + "'");
}

long long as_int(const std::string& k, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + k + "' expects an integer, got '" + v + "'");
}

}  // namespace

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {{"optimizer", to_string(optimizer)},
          {"lr", fmt(lr)},
          {"beta1", fmt(beta1)},
          {"beta2", fmt(beta2)},
          {"adam_eps", fmt(adam_eps)},
          {"momentum", fmt(momentum)},
          {"batch_size", std::to_string(batch_size)},
          {"epochs", std::to_string(epochs)},
          {"seed", std::to_string(seed)},
          {"ablation", to_string(ablation)},
          {"checkpoint_every", std::to_string(checkpoint_every)}};
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "optimizer") c.optimizer = parse_optimizer(v);
    else if (k == "lr") c.lr = as_double(k, v);
    else if (k == "beta1") c.beta1 = as_double(k, v);
    else if (k == "beta2") c.beta2 = as_double(k, v);
    else if (k == "adam_eps") c.adam_eps = as_double(k, v);
    else if (k == "momentum") c.momentum = as_double(k, v);
    else if (k == "batch_size") c.batch_size = static_cast<int>(as_int(k, v));
    else if (k == "epochs") c.epochs = static_cast<int>(as_int(k, v));
    else if (k == "seed") {
      std::uint64_t s = 0;
      const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), s);
      if (ec != std::errc{} || end != v.data() + v.size())
        throw ConfigError("'seed' expects a non-negative integer, got '" + v + "'");
      c.seed = s;
    } else if (k == "ablation") c.ablation = parse_ablation(v);
    else if (k == "checkpoint_every") c.checkpoint_every = static_cast<int>(as_int(k, v));
    else throw ConfigError("unknown train key '" + k + "'");
  }
  return c;
}

ModelConfig apply_detachment_policy(ModelConfig config, Ablation ablation) {
  switch (ablation) {
    case Ablation::None: break;
    case Ablation::SharedEncoder: config.share_encoders = true; break;
    case Ablation::TargetOnly: config.fusion_mode = FusionMode::TargetOnly; break;
    case Ablation::Unweighted: config.fusion_mode = FusionMode::ContextOnly; break;
    case Ablation::NoDetachment: config.detach_target_heads = false; break;
  }
  return config;
}

std::uint64_t config_hash(const ModelConfig& model, const TrainConfig& train) {
  std::string text;
  for (const auto& [k, v] : model.to_map()) text += "model." + k + "=" + v + "\n";
  for (const auto& [k, v] : train.to_map())
    if (k != "epochs" && k != "checkpoint_every") text += "train." + k + "=" + v + "\n";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

// Losses -------------------------------------------------------------------------

Tensor LossBundle::total() const { return add(add(loss_p, loss_t), loss_tc); }

LossBundle compute_losses(const Prediction& pred, int label) {
  const auto target = static_cast<std::size_t>(label);
  LossBundle b{cross_entropy(pred.y_p, target), cross_entropy(pred.y_t, target), cross_entropy(pred.y_tc, target)};
  for (const auto& [name, t] : {std::pair{"loss_p", &b.loss_p}, std::pair{"loss_t", &b.loss_t},
                                std::pair{"loss_tc", &b.loss_tc}}) {
    if (!std::isfinite(t->item()))
      throw NumericError(std::string(name) + " is not finite (label " + std::to_string(label) +
                         ", p=" + fmt(pred.p[0]) + ")");
  }
  return b;
}

// Optimizer -------------------------------------------------------------------------

Optimizer::Optimizer(const TrainConfig& config, std::vector<Tensor> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(config_.optimizer == OptimizerKind::Adam ? p.numel() : 0, 0.0);
  }
}

void Optimizer::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Optimizer::step() {
  ++steps_;
  const double lr = config_.lr;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    if (config_.optimizer == OptimizerKind::Sgd) {
      if (config_.momentum == 0.0) {
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * g[k];
      } else {
        for (std::size_t k = 0; k < w.size(); ++k) {
          m[k] = config_.momentum * m[k] + g[k];
          w[k] -= lr * m[k];
        }
      }
    } else {
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
        w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.adam_eps);
      }
    }
  }
  zero_grad();
}

void Optimizer::save(CheckpointFile& file) const {
  file.meta["optimizer.steps"] = std::to_string(steps_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    file.records.emplace_back("optimizer.m." + std::to_string(i), Tensor({m_[i].size()}, m_[i]));
    if (!v_[i].empty()) file.records.emplace_back("optimizer.v." + std::to_string(i), Tensor({v_[i].size()}, v_[i]));
  }
}

void Optimizer::load(const CheckpointFile& file) {
  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : file.records) stored[name] = &t;
  auto fetch = [&](const std::string& name, std::vector<double>& dst) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw CheckpointError("checkpoint lacks optimizer state '" + name + "'");
    if (it->second->numel() != dst.size()) throw CheckpointError("optimizer state '" + name + "' has the wrong size");
    std::copy(it->second->data().begin(), it->second->data().end(), dst.begin());
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    fetch("optimizer.m." + std::to_string(i), m_[i]);
    if (!v_[i].empty()) fetch("optimizer.v." + std::to_string(i), v_[i]);
  }
  const auto it = file.meta.find("optimizer.steps");
  if (it == file.meta.end()) throw CheckpointError("checkpoint lacks optimizer.steps");
  steps_ = std::stoull(it->second);
}

// Dataset ---------------------------------------------------------------------------

Dataset Dataset::load(const std::filesystem::path& split_dir, int threads) {
  Dataset d;
  d.rows_ = read_manifest(split_dir / "manifest.csv");
  d.pixels_.resize(d.rows_.size());
  d.extents_.resize(d.rows_.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    try {
      for (std::size_t i = next++; i < d.rows_.size() && !failed; i = next++) {
        const Image img = read_ppm(split_dir / d.rows_[i].path);
        d.rows_[i].box.validate(img.width(), img.height());
        auto& px = d.pixels_[i];
        px.resize(img.data().size());
        for (std::size_t k = 0; k < px.size(); ++k)
          px[k] = static_cast<std::uint8_t>(std::lround(img.data()[k] * 255.0));
        d.extents_[i] = {img.width(), img.height()};
      }
    } catch (...) {
      if (!failed.exchange(true)) failure = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return d;
}

Dataset Dataset::from_samples(const std::vector<Sample>& samples) {
  Dataset d;
  const auto& classes = default_classes();
  for (const Sample& s : samples) {
    d.rows_.push_back({"", s.class_id, classes.at(static_cast<std::size_t>(s.class_id)).name, s.box, s.condition,
                       s.size_bin, s.seed});
    std::vector<std::uint8_t> px(s.image.data().size());
    for (std::size_t k = 0; k < px.size(); ++k)
      px[k] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image.data()[k], 0.0, 1.0) * 255.0));
    d.pixels_.push_back(std::move(px));
    d.extents_.emplace_back(s.image.width(), s.image.height());
  }
  return d;
}

Example Dataset::example(std::size_t i) const {
  const auto& px = pixels_.at(i);
  std::vector<double> v(px.size());
  for (std::size_t k = 0; k < px.size(); ++k) v[k] = px[k] / 255.0;
  const auto [w, h] = extents_[i];
  return {Tensor({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, std::move(v)), rows_[i].box,
          rows_[i].class_id};
}

Dataset Dataset::filter(const std::function<bool(const ManifestRow&)>& keep) const {
  Dataset d;
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    if (!keep(rows_[i])) continue;
    d.rows_.push_back(rows_[i]);
    d.pixels_.push_back(pixels_[i]);
    d.extents_.push_back(extents_[i]);
  }
  return d;
}

// Steps -------------------------------------------------------------------------------

void StepMetrics::add(const StepMetrics& o) {
  loss_p += o.loss_p;
  loss_t += o.loss_t;
  loss_tc += o.loss_tc;
  correct_yp += o.correct_yp;
  correct_yt += o.correct_yt;
  correct_ytc += o.correct_ytc;
  sum_p += o.sum_p;
  n += o.n;
}

namespace {

int argmax(const Tensor& t) {
  const auto d = t.data();
  return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

StepMetrics score(const Prediction& pred, const LossBundle& losses, int label) {
  StepMetrics m;
  m.loss_p = losses.loss_p.item();
  m.loss_t = losses.loss_t.item();
  m.loss_tc = losses.loss_tc.item();
  m.correct_yp = argmax(pred.y_p) == label;
  m.correct_yt = argmax(pred.y_t) == label;
  m.correct_ytc = argmax(pred.y_tc) == label;
  m.sum_p = pred.p[0];
  m.n = 1;
  return m;
}

}  // namespace

StepMetrics train_step(const std::vector<Example>& batch, const CrtnetParams& params, const ModelConfig& config,
                       Optimizer& optimizer, Rng& rng) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  StepMetrics total;
  for (const Example& ex : batch) {
    const Prediction pred = forward(ex.image, ex.box, params, config, rng, true);
    const LossBundle losses = compute_losses(pred, ex.label);
    backward(scale(losses.total(), inv));
    total.add(score(pred, losses, ex.label));
  }
  optimizer.step();
  return total;
}

StepMetrics evaluate_losses(const Dataset& data, const CrtnetParams& params, const ModelConfig& config, int threads) {
  std::vector<StepMetrics> per(data.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    try {
      NoGradGuard no_grad;
      Rng unused(0);
      for (std::size_t i = next++; i < data.size() && !failed; i = next++) {
        const Example ex = data.example(i);
        const Prediction pred = forward(ex.image, ex.box, params, config, unused, false);
        per[i] = score(pred, compute_losses(pred, ex.label), ex.label);
      }
    } catch (...) {
      if (!failed.exchange(true)) failure = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  StepMetrics total;
  for (const StepMetrics& m : per) total.add(m);
  return total;
}

// Metrics records ------------------------------------------------------------------------

std::string MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["split"] = split;
  j["loss_p"] = loss_p;
  j["loss_t"] = loss_t;
  j["loss_tc"] = loss_tc;
  j["acc_yp"] = acc_yp;
  j["acc_yt"] = acc_yt;
  j["acc_ytc"] = acc_ytc;
  j["mean_p"] = mean_p;
  return j.dump();
}

MetricsRecord MetricsRecord::from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    MetricsRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.split = j.at("split").get<std::string>();
    r.loss_p = j.at("loss_p").get<double>();
    r.loss_t = j.at("loss_t").get<double>();
    r.loss_tc = j.at("loss_tc").get<double>();
    r.acc_yp = j.at("acc_yp").get<double>();
    r.acc_yt = j.at("acc_yt").get<double>();
    r.acc_ytc = j.at("acc_ytc").get<double>();
    r.mean_p = j.at("mean_p").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("metrics record: ") + e.what());
  }
}

MetricsRecord MetricsRecord::from(int epoch, const std::string& split, const StepMetrics& m) {
  const double n = m.n ? m.n : 1;
  return {epoch, split, m.loss_p / n, m.loss_t / n, m.loss_tc / n, m.correct_yp / n, m.correct_yt / n,
          m.correct_ytc / n, m.sum_p / n};
}

// Loop --------------------------------------------------------------------------------------

CheckpointFile training_checkpoint(const ModelConfig& model, const TrainConfig& train, const CrtnetParams& params,
                                   const Optimizer& optimizer, int epoch) {
  CheckpointFile file = model_checkpoint(model, params);
  file.kind = CheckpointFile::Kind::Training;
  for (const auto& [k, v] : train.to_map()) file.meta["train." + k] = v;
  file.meta["train.epoch"] = std::to_string(epoch);
  file.meta["train.config_hash"] = std::to_string(config_hash(model, train));
  optimizer.save(file);
  return file;
}

namespace {

void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const MetricsRecord& r : records) out << r.to_json() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::vector<MetricsRecord> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(MetricsRecord::from_json(line));
  return out;
}

}  // namespace

TrainResult train_loop(const Dataset& train, const Dataset* val, const TrainLoopOptions& options) {
  const TrainConfig& tc = options.train;
  tc.validate();
  TrainResult result;
  result.model = apply_detachment_policy(options.model, tc.ablation);
  result.model.validate();
  if (train.size() == 0 && tc.epochs > 0) throw ConfigError("training split is empty");
  for (const ManifestRow& r : train.rows())
    if (r.class_id < 0 || r.class_id >= result.model.num_classes)
      throw ConfigError("manifest class id " + std::to_string(r.class_id) + " outside the model's " +
                        std::to_string(result.model.num_classes) + " classes");

  std::error_code ec;
  std::filesystem::create_directories(options.out_dir, ec);
  if (ec) throw IoError("cannot create " + options.out_dir.string() + ": " + ec.message());

  Rng init_rng(derive_seed({tc.seed, 0x696e6974}));
  result.params = CrtnetParams::init(result.model, init_rng);
  Optimizer optimizer(tc, result.params.all());
  int start_epoch = 1;
  const auto metrics_path = options.out_dir / "metrics.jsonl";

  if (options.resume) {
    const CheckpointFile file = read_checkpoint(*options.resume);
    if (file.kind != CheckpointFile::Kind::Training)
      throw CheckpointError(options.resume->string() + " is a model checkpoint, not a training checkpoint");
    const auto it = file.meta.find("train.config_hash");
    if (it == file.meta.end() || it->second != std::to_string(config_hash(result.model, tc)))
      throw CheckpointError("checkpoint " + options.resume->string() +
                            " was written with a different configuration (config hash mismatch)");
    assign_params(file, result.params);
    optimizer.load(file);
    const int done = std::stoi(file.meta.at("train.epoch"));
    start_epoch = done + 1;
    for (const MetricsRecord& r : read_metrics(metrics_path))
      if (r.epoch <= done) result.metrics.push_back(r);
  } else {
    write_checkpoint(options.out_dir / "init.ckpt", training_checkpoint(result.model, tc, result.params, optimizer, 0));
  }

  for (int epoch = start_epoch; epoch <= tc.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(derive_seed({tc.seed, static_cast<std::uint64_t>(epoch), 1}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_int(std::uint64_t{i})]);
    Rng dropout_rng(derive_seed({tc.seed, static_cast<std::uint64_t>(epoch), 2}));

    StepMetrics epoch_metrics;
    std::vector<Example> batch;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      batch.clear();
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      for (std::size_t i = start; i < end; ++i) batch.push_back(train.example(order[i]));
      epoch_metrics.add(train_step(batch, result.params, result.model, optimizer, dropout_rng));
    }
    result.metrics.push_back(MetricsRecord::from(epoch, "train", epoch_metrics));
    if (val) result.metrics.push_back(MetricsRecord::from(epoch, "val", evaluate_losses(*val, result.params, result.model, options.threads)));
    write_metrics(metrics_path, result.metrics);

    const CheckpointFile ckpt = training_checkpoint(result.model, tc, result.params, optimizer, epoch);
    if (tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d.ckpt", epoch);
      write_checkpoint(options.out_dir / name, ckpt);
    }
    write_checkpoint(options.out_dir / "last.ckpt", ckpt);
    if (options.verbose) {
      std::cerr << "epoch " << epoch << "/" << tc.epochs;
      for (auto it = result.metrics.end() - (val ? 2 : 1); it != result.metrics.end(); ++it)
        std::fprintf(stderr, "  %s loss %.4f acc_yp %.4f acc_ytc %.4f mean_p %.3f", it->split.c_str(),
                     it->loss_p + it->loss_t + it->loss_tc, it->acc_yp, it->acc_ytc, it->mean_p);
      std::cerr << std::endl;
    }
  }
  if (tc.epochs == 0 || start_epoch > tc.epochs) write_metrics(metrics_path, result.metrics);

  result.model_path = options.out_dir / "model.ckpt";
  write_checkpoint(result.model_path, model_checkpoint(result.model, result.params));
  return result;
}

}  // namespace crtnet
