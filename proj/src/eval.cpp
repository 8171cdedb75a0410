#include "crtnet/eval.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include "crtnet/errors.hpp"

namespace crtnet {

double CellStats::sem() const {
  if (n == 0) return 0.0;
  const double a = accuracy();
  return std::sqrt(a * (1.0 - a) / n);
}

CellStats EvalReport::overall() const {
  return pooled([](const CellKey&) { return true; });
}

EvalReport EvalReport::from_outcomes(const std::vector<SampleOutcome>& outcomes) {
  EvalReport r;
  std::map<ConditionTag, std::pair<double, int>> conf;
  for (const SampleOutcome& o : outcomes) {
    const int hit = o.predicted == o.label;
    CellStats& cell = r.cells[{o.condition, o.size_bin}];
    cell.n += 1;
    cell.correct += hit;
    CellStats& cls = r.per_class[o.label];
    cls.n += 1;
    cls.correct += hit;
    conf[o.condition].first += o.p;
    conf[o.condition].second += 1;
  }
  for (const auto& [tag, sum] : conf) r.mean_confidence[tag] = sum.first / sum.second;
  return r;
}

std::string to_string(Head head) {
  switch (head) {
    case Head::Fused: return "y_p";
    case Head::Target: return "y_t";
    case Head::Context: return "y_tc";
  }
  return "?";
}

std::vector<SampleOutcome> predict(const Dataset& data, const CrtnetParams& params, const ModelConfig& config,
                                   Head head, std::optional<FusionMode> fusion_override, int threads) {
  ModelConfig cfg = config;
  if (fusion_override) cfg.fusion_mode = *fusion_override;
  std::vector<SampleOutcome> out(data.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    try {
      NoGradGuard no_grad;
      Rng unused(0);
      for (std::size_t i = next++; i < data.size() && !failed; i = next++) {
        const Example ex = data.example(i);
        const Prediction pred = forward(ex.image, ex.box, params, cfg, unused, false);
        const Tensor& dist = head == Head::Fused ? pred.y_p : head == Head::Target ? pred.y_t : pred.y_tc;
        const auto d = dist.data();
        const int top = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
        const ManifestRow& row = data.row(i);
        out[i] = {ex.label, top, pred.p[0], row.condition, row.size_bin};
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
  return out;
}

EvalReport evaluate(const Dataset& data, const LoadedModel& model, std::optional<FusionMode> fusion_override,
                    int threads, Head head) {
  for (const ManifestRow& r : data.rows())
    if (r.class_id < 0 || r.class_id >= model.config.num_classes)
      throw ConfigError("manifest class id " + std::to_string(r.class_id) + " (" + r.class_name +
                        ") is outside the checkpoint's " + std::to_string(model.config.num_classes) + " classes");
  return EvalReport::from_outcomes(predict(data, model.params, model.config, head, fusion_override, threads));
}

// Performance vectors -----------------------------------------------------------

namespace {

const char* group_of(ConditionTag tag) {
  switch (tag) {
    case ConditionTag::Normal: return "normal";
    case ConditionTag::NoContextGrey:
    case ConditionTag::NoContextSaltPepper: return "nocontext";
    case ConditionTag::Gravity: return "gravity";
    case ConditionTag::CoOccur: return "cooccur";
    case ConditionTag::CoOccurGravity: return "cooccur_gravity";
    default: return "size";
  }
}

const std::vector<std::string>& group_names() {
  static const std::vector<std::string> g = {"normal", "nocontext", "gravity", "cooccur", "cooccur_gravity", "size"};
  return g;
}

}  // namespace

const std::vector<std::string>& PerformanceVector::canonical_labels() {
  static const std::vector<std::string> labels = [] {
    std::vector<std::string> l;
    for (const std::string& g : group_names())
      for (const char* bin : {"small", "large"}) l.push_back(g + "/" + bin);
    return l;
  }();
  return labels;
}

PerformanceVector PerformanceVector::from_report(const EvalReport& report) {
  PerformanceVector v;
  for (const std::string& g : group_names())
    for (SizeBin bin : {SizeBin::Small, SizeBin::Large}) {
      const CellStats s = report.pooled([&](const CellKey& k) { return group_of(k.first) == g && k.second == bin; });
      v.cells.emplace_back(g + "/" + to_string(bin), s.accuracy());
    }
  return v;
}

std::vector<double> PerformanceVector::values() const {
  std::vector<double> out;
  for (const auto& [label, value] : cells) out.push_back(value);
  return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("pearson: vectors differ in length");
  if (a.size() < 2) throw ContractError("pearson: need at least two entries");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw UndefinedCorrelationError("pearson: a vector has zero variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double pearson(const PerformanceVector& a, const PerformanceVector& b) {
  if (a.cells.size() != b.cells.size()) throw ContractError("pearson: vectors differ in length");
  for (std::size_t i = 0; i < a.cells.size(); ++i)
    if (a.cells[i].first != b.cells[i].first)
      throw ContractError("pearson: label mismatch at " + std::to_string(i) + " ('" + a.cells[i].first + "' vs '" +
                          b.cells[i].first + "')");
  return pearson(a.values(), b.values());
}

// Formats ------------------------------------------------------------------------

std::string format_fixed4(double value) {
  // Integer arithmetic keeps the output independent of the C locale.
  const bool neg = value < 0;
  const long long scaled = std::llround(std::abs(value) * 10000.0);
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s%lld.%04lld", neg && scaled ? "-" : "", scaled / 10000, scaled % 10000);
  return buf;
}

std::string report_to_csv(const EvalReport& report) {
  std::string out = "condition,size_bin,n,correct,accuracy,sem\n";
  for (const auto& [key, c] : report.cells)
    out += to_string(key.first) + "," + to_string(key.second) + "," + std::to_string(c.n) + "," +
           std::to_string(c.correct) + "," + format_fixed4(c.accuracy()) + "," + format_fixed4(c.sem()) + "\n";
  return out;
}

namespace {

std::vector<std::string> fields_of(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) f.push_back(item);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  return f;
}

int parse_count(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size() && v >= 0) return v;
  } catch (const std::exception&) {
  }
  throw ParseError("line " + std::to_string(line) + ": bad count '" + s + "'");
}

double parse_real(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw ParseError("line " + std::to_string(line) + ": bad number '" + s + "'");
}

}  // namespace

EvalReport report_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  EvalReport r;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != "condition,size_bin,n,correct,accuracy,sem") throw ParseError("line 1: unexpected report header");
      continue;
    }
    if (line.empty()) continue;
    const auto f = fields_of(line);
    if (f.size() != 6) throw ParseError("line " + std::to_string(lineno) + ": expected 6 fields");
    CellKey key;
    try {
      key = {parse_condition(f[0]), parse_size_bin(f[1])};
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
    CellStats c{parse_count(f[2], lineno), parse_count(f[3], lineno)};
    if (c.correct > c.n) throw ParseError("line " + std::to_string(lineno) + ": correct exceeds n");
    if (format_fixed4(c.accuracy()) != f[4] || format_fixed4(c.sem()) != f[5])
      throw ParseError("line " + std::to_string(lineno) + ": accuracy/sem disagree with the counts");
    if (!r.cells.emplace(key, c).second) throw ParseError("line " + std::to_string(lineno) + ": duplicate cell");
  }
  if (lineno == 0) throw ParseError("report is empty");
  return r;
}

std::string report_to_plotdata(const EvalReport& report) {
  std::string out = "# order: ";
  for (std::size_t i = 0; i < PerformanceVector::canonical_labels().size(); ++i)
    out += (i ? " " : "") + PerformanceVector::canonical_labels()[i];
  out += "\ngroup,size_bin,n,accuracy,sem\n";
  for (const std::string& g : group_names())
    for (SizeBin bin : {SizeBin::Small, SizeBin::Large}) {
      const CellStats s = report.pooled([&](const CellKey& k) { return group_of(k.first) == g && k.second == bin; });
      out += g + "," + to_string(bin) + "," + std::to_string(s.n) + "," + format_fixed4(s.accuracy()) + "," +
             format_fixed4(s.sem()) + "\n";
    }
  return out;
}

std::string vector_to_csv(const PerformanceVector& v) {
  std::string out = "label,accuracy\n";
  char buf[64];
  for (const auto& [label, value] : v.cells) {
    std::snprintf(buf, sizeof buf, "%.17g", value);
    out += label + "," + buf + "\n";
  }
  return out;
}

PerformanceVector vector_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  PerformanceVector v;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line == "label,accuracy") continue;
    const auto f = fields_of(line);
    if (f.size() != 2 || f[0].empty()) throw ParseError("line " + std::to_string(lineno) + ": expected label,accuracy");
    v.cells.emplace_back(f[0], parse_real(f[1], lineno));
  }
  if (v.cells.empty()) throw ParseError("no vector entries found");
  return v;
}

// Ablations ------------------------------------------------------------------------

std::string AblationSuite::table() const {
  std::ostringstream out;
  out << "variant,acc_yp,acc_yt,acc_ytc";
  for (const std::string& label : PerformanceVector::canonical_labels()) out << "," << label;
  out << "\n";
  for (const AblationEntry& e : entries) {
    out << to_string(e.ablation) << "," << format_fixed4(e.acc_yp) << "," << format_fixed4(e.acc_yt) << ","
        << format_fixed4(e.acc_ytc);
    for (const auto& [label, value] : e.vector.cells) out << "," << format_fixed4(value);
    out << "\n";
  }
  out << "\npearson";
  for (const AblationEntry& e : entries) out << "," << to_string(e.ablation);
  out << "\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out << to_string(entries[i].ablation);
    for (std::size_t j = 0; j < entries.size(); ++j) {
      const double r = correlations[i][j];
      out << "," << (std::isnan(r) ? std::string("nan") : format_fixed4(r));
    }
    out << "\n";
  }
  return out.str();
}

AblationSuite ablation_suite(const Dataset& train, const Dataset& test, const TrainLoopOptions& base,
                             const std::vector<Ablation>& ablations) {
  AblationSuite suite;
  for (Ablation a : ablations) {
    TrainLoopOptions opts = base;
    opts.train.ablation = a;
    opts.out_dir = base.out_dir / to_string(a);
    opts.resume.reset();
    TrainResult trained = train_loop(train, nullptr, opts);
    AblationEntry e;
    e.ablation = a;
    e.model = trained.model;
    e.model_path = trained.model_path;
    const auto fused = predict(test, trained.params, trained.model, Head::Fused, std::nullopt, base.threads);
    e.report = EvalReport::from_outcomes(fused);
    e.vector = PerformanceVector::from_report(e.report);
    e.acc_yp = e.report.overall().accuracy();
    e.acc_yt = EvalReport::from_outcomes(predict(test, trained.params, trained.model, Head::Target, std::nullopt,
                                                 base.threads))
                   .overall()
                   .accuracy();
    e.acc_ytc = EvalReport::from_outcomes(predict(test, trained.params, trained.model, Head::Context, std::nullopt,
                                                  base.threads))
                    .overall()
                    .accuracy();
    suite.entries.push_back(std::move(e));
  }
  const std::size_t n = suite.entries.size();
  suite.correlations.assign(n, std::vector<double>(n, std::nan("")));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      try {
        suite.correlations[i][j] = pearson(suite.entries[i].vector, suite.entries[j].vector);
      } catch (const UndefinedCorrelationError&) {
      }
    }
  return suite;
}

}  // namespace crtnet
