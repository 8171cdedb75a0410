#include "crtnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crtnet/ops.hpp"

namespace crtnet {

std::vector<double> numeric_grad(Tensor param, const std::function<double()>& f, double eps,
                                 const std::vector<std::size_t>& indices) {
  auto values = param.mutable_data();
  std::vector<std::size_t> idx = indices;
  if (idx.empty()) {
    idx.resize(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  std::vector<double> g(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const std::size_t i = idx[k];
    const double keep = values[i];
    values[i] = keep + eps;
    const double up = f();
    values[i] = keep - eps;
    const double down = f();
    values[i] = keep;
    g[k] = (up - down) / (2.0 * eps);
  }
  return g;
}

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = i < analytic.size() ? analytic[i] : 0.0;
    diff += (a - numeric[i]) * (a - numeric[i]);
    na += a * a;
    nn += numeric[i] * numeric[i];
  }
  const double scale = std::sqrt(std::max(na, nn));
  if (scale < 1e-10) return std::sqrt(diff);
  return std::sqrt(diff) / scale;
}

double check_gradient(Tensor param, const std::function<Tensor()>& build, Rng& rng, std::size_t max_coords,
                      double eps) {
  const std::size_t n = param.numel();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_coords > 0 && n > max_coords) {
    // Partial Fisher-Yates: the first max_coords entries are a uniform sample.
    for (std::size_t i = 0; i < max_coords; ++i) std::swap(idx[i], idx[i + rng.uniform_int(n - i)]);
    idx.resize(max_coords);
  }
  param.zero_grad();
  backward(build());
  const auto grad = param.grad();
  std::vector<double> analytic(idx.size(), 0.0);
  if (!grad.empty())
    for (std::size_t k = 0; k < idx.size(); ++k) analytic[k] = grad[idx[k]];
  const auto numeric = numeric_grad(param, [&] { return build().item(); }, eps, idx);
  param.zero_grad();
  return relative_error(analytic, numeric);
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.image_side = 16;
  c.feat_channels = 8;
  c.grid_h = c.grid_w = 2;
  c.decoder_layers = 1;
  c.heads = 2;
  c.mlp_hidden = 12;
  c.confidence_hidden = 6;
  c.num_classes = 3;
  c.dropout_rate = 0.0;
  return c;
}

double GradCheckReport::max_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.error);
  return m;
}

std::vector<GradCheckEntry> GradCheckReport::failures() const {
  std::vector<GradCheckEntry> out;
  for (const auto& e : entries)
    if (!(e.error < tolerance)) out.push_back(e);
  return out;
}

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, bool grad = true) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(shape, std::move(v), grad);
}

// Scalar read-out with fixed random weights so every output element matters.
Tensor project(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

}  // namespace

void check_ops(std::uint64_t seed, GradCheckReport& report) {
  Rng rng(derive_seed({seed, 0x6f7073}));
  auto run = [&](const std::string& name, std::vector<Tensor> inputs,
                 const std::function<Tensor(const std::vector<Tensor>&)>& op) {
    const Tensor sample = op(inputs);
    const Tensor weights = random_tensor(sample.shape(), rng, false);
    const auto build = [&] { return project(op(inputs), weights); };
    for (std::size_t i = 0; i < inputs.size(); ++i)
      report.entries.push_back({name + "[" + std::to_string(i) + "]", seed, check_gradient(inputs[i], build, rng)});
  };
  using V = std::vector<Tensor>;
  auto r = [&](const Shape& s) { return random_tensor(s, rng); };

  run("matmul", {r({3, 4}), r({4, 2})}, [](const V& x) { return matmul(x[0], x[1]); });
  run("transpose", {r({3, 4})}, [](const V& x) { return transpose(x[0]); });
  run("reshape", {r({3, 4})}, [](const V& x) { return reshape(x[0], {2, 6}); });
  run("slice_cols", {r({3, 5})}, [](const V& x) { return slice_cols(x[0], 1, 3); });
  run("concat_cols", {r({2, 3}), r({2, 2})}, [](const V& x) { return concat_cols({x[0], x[1]}); });
  run("select_row", {r({3, 4})}, [](const V& x) { return select_row(x[0], 2); });
  run("add", {r({2, 3}), r({2, 3})}, [](const V& x) { return add(x[0], x[1]); });
  run("sub", {r({2, 3}), r({2, 3})}, [](const V& x) { return sub(x[0], x[1]); });
  run("mul", {r({2, 3}), r({2, 3})}, [](const V& x) { return mul(x[0], x[1]); });
  run("mul_scalar", {r({2, 3}), r({1})}, [](const V& x) { return mul(x[0], x[1]); });
  run("scale", {r({2, 3})}, [](const V& x) { return scale(x[0], -1.7); });
  run("add_scalar", {r({2, 3})}, [](const V& x) { return add_scalar(x[0], 0.3); });
  run("relu", {r({4, 4})}, [](const V& x) { return relu(x[0]); });
  run("sigmoid", {r({2, 3})}, [](const V& x) { return sigmoid(scale(x[0], 3.0)); });
  run("add_row_bias", {r({3, 4}), r({4})}, [](const V& x) { return add_row_bias(x[0], x[1]); });
  run("add_channel_bias", {r({2, 3, 3}), r({2})}, [](const V& x) { return add_channel_bias(x[0], x[1]); });
  run("linear", {r({3, 4}), r({4, 2}), r({2})}, [](const V& x) { return linear(x[0], x[1], x[2]); });
  run("sum", {r({2, 3})}, [](const V& x) { return sum(x[0]); });
  run("mean", {r({2, 3})}, [](const V& x) { return mean(x[0]); });
  run("spatial_mean", {r({2, 3, 3})}, [](const V& x) { return spatial_mean(x[0]); });
  run("softmax", {r({3, 5})}, [](const V& x) { return softmax(scale(x[0], 2.0)); });
  run("layernorm", {r({3, 5}), r({5}), r({5})}, [](const V& x) { return layernorm(x[0], x[1], x[2]); });
  run("dropout", {r({4, 4})}, [](const V& x) {
    Rng mask(99);
    return dropout(x[0], 0.3, true, mask);
  });
  run("cross_entropy", {r({6})}, [](const V& x) { return cross_entropy(softmax(scale(x[0], 2.0)), 4); });
  run("conv2d_s1", {r({2, 6, 6}), r({3, 2, 3, 3})}, [](const V& x) { return conv2d(x[0], x[1], 1, 1); });
  run("conv2d_s2", {r({2, 7, 7}), r({3, 2, 3, 3})}, [](const V& x) { return conv2d(x[0], x[1], 2, 1); });
  run("pool_avg", {r({2, 6, 6})}, [](const V& x) { return pool_avg(x[0], 2, 2); });
  run("pool_max", {r({2, 7, 7})}, [](const V& x) { return pool_max(x[0], 3, 2); });
}

void check_model(std::uint64_t seed, GradCheckReport& report, std::size_t max_coords) {
  ModelConfig cfg = tiny_model_config();
  cfg.detach_target_heads = false;
  Rng rng(derive_seed({seed, 0x6d6f64}));
  CrtnetParams params = CrtnetParams::init(cfg, rng);
  std::vector<double> pixels(3 * 18 * 18);
  for (double& v : pixels) v = rng.uniform();
  const Tensor image({3, 18, 18}, std::move(pixels));
  const BoundingBox box{rng.uniform_int(0, 5), rng.uniform_int(0, 5), rng.uniform_int(6, 12),
                        rng.uniform_int(6, 12)};
  const auto label = static_cast<std::size_t>(rng.uniform_int(0, cfg.num_classes - 1));
  const auto build = [&] {
    Rng unused(0);
    const Prediction pred = forward(image, box, params, cfg, unused, false);
    return add(add(cross_entropy(pred.y_p, label), cross_entropy(pred.y_t, label)), cross_entropy(pred.y_tc, label));
  };
  for (const auto& [name, param] : params.named())
    report.entries.push_back({"model." + name, seed, check_gradient(param, build, rng, max_coords)});
}

GradCheckReport run_gradcheck(int seeds, std::uint64_t first_seed, double tolerance) {
  GradCheckReport report;
  report.tolerance = tolerance;
  for (int s = 0; s < seeds; ++s) {
    check_ops(first_seed + s, report);
    check_model(first_seed + s, report);
  }
  return report;
}

}  // namespace crtnet
