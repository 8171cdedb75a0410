#include "crtnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "crtnet/errors.hpp"

namespace crtnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

using Impl = detail::TensorImpl;

Impl* raw(const Tensor& t) { return t.impl().get(); }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

std::vector<double> copy_data(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

template <class F>
Tensor unary(const Tensor& a, const char* op, F&& f, detail::BackwardFn fn) {
  std::vector<double> out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(a.shape(), std::move(out), {a}, op, std::move(fn));
}

}  // namespace

// Linear algebra and layout ------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  Impl* pa = raw(a);
  Impl* pb = raw(b);
  return make_result({m, n}, std::move(out), {a, b}, "matmul", [pa, pb, m, k, n](const Impl& o) {
    MapC g(o.grad.data(), m, n);
    if (pa->requires_grad)
      Map(pa->grad_buffer().data(), m, k).noalias() += g * MapC(pb->data.data(), k, n).transpose();
    if (pb->requires_grad)
      Map(pb->grad_buffer().data(), k, n).noalias() += MapC(pa->data.data(), m, k).transpose() * g;
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  Map(out.data(), c, r) = MapC(a.data().data(), r, c).transpose();
  Impl* pa = raw(a);
  return make_result({c, r}, std::move(out), {a}, "transpose", [pa, r, c](const Impl& o) {
    Map(pa->grad_buffer().data(), r, c) += MapC(o.grad.data(), c, r).transpose();
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Impl* pa = raw(a);
  return make_result(shape, copy_data(a), {a}, "reshape", [pa](const Impl& o) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_rank(a, 2, "slice_cols");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (count == 0 || start + count > cols)
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceed " + shape_str(a.shape()));
  std::vector<double> out(rows * count);
  const auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(in.begin() + r * cols + start, count, out.begin() + r * count);
  Impl* pa = raw(a);
  return make_result({rows, count}, std::move(out), {a}, "slice_cols",
                     [pa, rows, cols, start, count](const Impl& o) {
                       auto& g = pa->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < count; ++j)
                           g[r * cols + start + j] += o.grad[r * count + j];
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows)
      throw DimensionError("concat_cols: row count mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    offsets.push_back(total);
    total += p.dim(1);
  }
  std::vector<double> out(rows * total);
  std::vector<Impl*> impls;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::size_t c = parts[i].dim(1);
    const auto in = parts[i].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(in.begin() + r * c, c, out.begin() + r * total + offsets[i]);
    impls.push_back(raw(parts[i]));
  }
  return make_result({rows, total}, std::move(out), parts, "concat_cols",
                     [impls, offsets, rows, total](const Impl& o) {
                       for (std::size_t i = 0; i < impls.size(); ++i) {
                         Impl* p = impls[i];
                         if (!p->requires_grad) continue;
                         const std::size_t c = p->shape[1];
                         auto& g = p->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < c; ++j)
                             g[r * c + j] += o.grad[r * total + offsets[i] + j];
                       }
                     });
}

Tensor select_row(const Tensor& a, std::size_t row) {
  require_rank(a, 2, "select_row");
  if (row >= a.dim(0))
    throw IndexError("select_row: row " + std::to_string(row) + " out of range for " +
                     shape_str(a.shape()));
  const std::size_t cols = a.dim(1);
  std::vector<double> out(a.data().begin() + row * cols, a.data().begin() + (row + 1) * cols);
  Impl* pa = raw(a);
  return make_result({1, cols}, std::move(out), {a}, "select_row", [pa, row, cols](const Impl& o) {
    auto& g = pa->grad_buffer();
    for (std::size_t j = 0; j < cols; ++j) g[row * cols + j] += o.grad[j];
  });
}

// Elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out = copy_data(a);
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  Impl* pa = raw(a);
  Impl* pb = raw(b);
  return make_result(a.shape(), std::move(out), {a, b}, "add", [pa, pb](const Impl& o) {
    for (Impl* p : {pa, pb}) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out = copy_data(a);
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  Impl* pa = raw(a);
  Impl* pb = raw(b);
  return make_result(a.shape(), std::move(out), {a, b}, "sub", [pa, pb](const Impl& o) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Impl* pa = raw(a);
  Impl* pb = raw(b);
  if (b.numel() == 1 && a.shape() != b.shape()) {
    const double s = b.item();
    std::vector<double> out = copy_data(a);
    for (double& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a, b}, "mul_scalar", [pa, pb](const Impl& o) {
      const double s = pb->data[0];
      if (pa->requires_grad) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
      }
      if (pb->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * pa->data[i];
        pb->grad_buffer()[0] += acc;
      }
    });
  }
  require_same_shape(a, b, "mul");
  std::vector<double> out = copy_data(a);
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, "mul", [pa, pb](const Impl& o) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  Impl* pa = raw(a);
  return unary(
      a, "scale", [factor](double v) { return v * factor; },
      [pa, factor](const Impl& o) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
      });
}

Tensor add_scalar(const Tensor& a, double value) {
  Impl* pa = raw(a);
  return unary(
      a, "add_scalar", [value](double v) { return v + value; },
      [pa](const Impl& o) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      });
}

Tensor relu(const Tensor& a) {
  Impl* pa = raw(a);
  return unary(
      a, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [pa](const Impl& o) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (pa->data[i] > 0.0) g[i] += o.grad[i];
      });
}

Tensor sigmoid(const Tensor& a) {
  Impl* pa = raw(a);
  return unary(
      a, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [pa](const Impl& o) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = o.data[i];
          g[i] += o.grad[i] * s * (1.0 - s);
        }
      });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.numel() != cols)
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                         shape_str(x.shape()));
  std::vector<double> out = copy_data(x);
  const auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b[c];
  Impl* px = raw(x);
  Impl* pb = raw(bias);
  return make_result(x.shape(), std::move(out), {x, bias}, "add_row_bias",
                     [px, pb, rows, cols](const Impl& o) {
                       if (px->requires_grad) {
                         auto& g = px->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c) g[c] += o.grad[r * cols + c];
                       }
                     });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 3, "add_channel_bias");
  const std::size_t ch = x.dim(0), cells = x.dim(1) * x.dim(2);
  if (bias.numel() != ch)
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                         shape_str(x.shape()));
  std::vector<double> out = copy_data(x);
  const auto b = bias.data();
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t i = 0; i < cells; ++i) out[c * cells + i] += b[c];
  Impl* px = raw(x);
  Impl* pb = raw(bias);
  return make_result(x.shape(), std::move(out), {x, bias}, "add_channel_bias",
                     [px, pb, ch, cells](const Impl& o) {
                       if (px->requires_grad) {
                         auto& g = px->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t c = 0; c < ch; ++c) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < cells; ++i) acc += o.grad[c * cells + i];
                           g[c] += acc;
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row_bias(matmul(x, weight), bias);
}

// Reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Impl* pa = raw(a);
  return make_result({1}, {acc}, {a}, "sum", [pa](const Impl& o) {
    auto& g = pa->grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const double n = static_cast<double>(a.numel());
  Impl* pa = raw(a);
  return make_result({1}, {acc / n}, {a}, "mean", [pa, n](const Impl& o) {
    auto& g = pa->grad_buffer();
    for (double& v : g) v += o.grad[0] / n;
  });
}

Tensor spatial_mean(const Tensor& a) {
  require_rank(a, 3, "spatial_mean");
  const std::size_t ch = a.dim(0), cells = a.dim(1) * a.dim(2);
  std::vector<double> out(ch, 0.0);
  const auto in = a.data();
  for (std::size_t c = 0; c < ch; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < cells; ++i) acc += in[c * cells + i];
    out[c] = acc / static_cast<double>(cells);
  }
  Impl* pa = raw(a);
  return make_result({ch}, std::move(out), {a}, "spatial_mean", [pa, ch, cells](const Impl& o) {
    auto& g = pa->grad_buffer();
    const double inv = 1.0 / static_cast<double>(cells);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < cells; ++i) g[c * cells + i] += o.grad[c] * inv;
  });
}

// Normalisation and probability ------------------------------------------

Tensor softmax(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto in = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("softmax: non-finite input");
      mx = std::max(mx, row[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(row[j] - mx);
      z += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  Impl* px = raw(x);
  return make_result(x.shape(), std::move(out), {x}, "softmax", [px, rows, n](const Impl& o) {
    auto& g = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * n;
      const double* gy = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layernorm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not fit " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  const auto in = x.data();
  const auto ga = gamma.data();
  const auto be = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * ga[j] + be[j];
    }
  }
  Impl* px = raw(x);
  Impl* pg = raw(gamma);
  Impl* pb = raw(beta);
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "layernorm",
      [px, pg, pb, xhat, inv_std, rows, d](const Impl& o) {
        const double dd = static_cast<double>(d);
        if (pg->requires_grad) {
          auto& g = pg->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j] * (*xhat)[r * d + j];
        }
        if (pb->requires_grad) {
          auto& g = pb->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
        }
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = o.grad[r * d + j] * pg->data[j];
              m1 += gh;
              m2 += gh * (*xhat)[r * d + j];
            }
            m1 /= dd;
            m2 /= dd;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = o.grad[r * d + j] * pg->data[j];
              g[r * d + j] += (*inv_std)[r] * (gh - m1 - (*xhat)[r * d + j] * m2);
            }
          }
        }
      });
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  Impl* px = raw(x);
  if (!training || rate == 0.0) {
    return make_result(x.shape(), copy_data(x), {x}, "dropout_identity", [px](const Impl& o) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
  }
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out = copy_data(x);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : keep_scale;
    (*mask)[i] = m;
    out[i] *= m;
  }
  return make_result(x.shape(), std::move(out), {x}, "dropout", [px, mask](const Impl& o) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (*mask)[i];
  });
}

Tensor cross_entropy(const Tensor& probs, std::size_t target) {
  constexpr double kFloor = 1e-12;
  if (target >= probs.numel())
    throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range for " +
                     std::to_string(probs.numel()) + " classes");
  double total = 0.0;
  for (double v : probs.data()) {
    if (!std::isfinite(v) || v < 0.0) throw NumericError("cross_entropy: invalid probability");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw ContractError("cross_entropy: probabilities sum to " + std::to_string(total));
  const double pt = probs.data()[target];
  const double clamped = std::max(pt, kFloor);
  Impl* pp = raw(probs);
  return make_result({1}, {-std::log(clamped)}, {probs}, "cross_entropy",
                     [pp, target, pt](const Impl& o) {
                       if (pt < kFloor) return;  // clamp is flat below the floor
                       pp->grad_buffer()[target] += -o.grad[0] / pt;
                     });
}

Tensor detach(const Tensor& x) { return Tensor(x.shape(), copy_data(x), false); }

// Convolution and pooling --------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding) {
  require_rank(input, 3, "conv2d");
  require_rank(kernels, 4, "conv2d");
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != cin || kernels.dim(3) != k)
    throw DimensionError("conv2d: kernels " + shape_str(kernels.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
  if (k > h + 2 * padding || k > w + 2 * padding)
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) +
                         " larger than padded input " + shape_str(input.shape()));
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t patch = cin * k * k, cells = ho * wo;

  // im2col: row = (c, ky, kx), column = output cell.
  auto cols = std::make_shared<std::vector<double>>(patch * cells, 0.0);
  const double* in = input.data().data();
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* dst = cols->data() + ((c * k + ky) * k + kx) * cells;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          const double* src = in + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[oy * wo + ox] = src[ix];
          }
        }
      }

  std::vector<double> out(cout * cells);
  Map(out.data(), cout, cells).noalias() =
      MapC(kernels.data().data(), cout, patch) * MapC(cols->data(), patch, cells);

  Impl* pi = raw(input);
  Impl* pk = raw(kernels);
  return make_result(
      {cout, ho, wo}, std::move(out), {input, kernels}, "conv2d",
      [=](const Impl& o) {
        MapC g(o.grad.data(), cout, cells);
        if (pk->requires_grad)
          Map(pk->grad_buffer().data(), cout, patch).noalias() +=
              g * MapC(cols->data(), patch, cells).transpose();
        if (pi->requires_grad) {
          RowMat dcols = MapC(pk->data.data(), cout, patch).transpose() * g;
          auto& gi = pi->grad_buffer();
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const double* src = dcols.data() + ((c * k + ky) * k + kx) * cells;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  double* dst = gi.data() + (c * h + static_cast<std::size_t>(iy)) * w;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                    if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[oy * wo + ox];
                  }
                }
              }
        }
      });
}

namespace {

struct PoolGeometry {
  std::size_t ch, h, w, ho, wo;
};

PoolGeometry pool_geometry(const Tensor& input, std::size_t window, std::size_t stride,
                           const char* op) {
  require_rank(input, 3, op);
  if (window < 1 || stride < 1) throw ParameterError(std::string(op) + ": window and stride must be >= 1");
  const std::size_t h = input.dim(1), w = input.dim(2);
  if (window > h || window > w)
    throw DimensionError(std::string(op) + ": window " + std::to_string(window) +
                         " exceeds spatial extent of " + shape_str(input.shape()));
  return {input.dim(0), h, w, (h - window) / stride + 1, (w - window) / stride + 1};
}

}  // namespace

Tensor pool_avg(const Tensor& input, std::size_t window, std::size_t stride) {
  const PoolGeometry gm = pool_geometry(input, window, stride, "pool_avg");
  const double inv = 1.0 / static_cast<double>(window * window);
  const auto in = input.data();
  std::vector<double> out(gm.ch * gm.ho * gm.wo);
  for (std::size_t c = 0; c < gm.ch; ++c)
    for (std::size_t oy = 0; oy < gm.ho; ++oy)
      for (std::size_t ox = 0; ox < gm.wo; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx)
            acc += in[(c * gm.h + oy * stride + dy) * gm.w + ox * stride + dx];
        out[(c * gm.ho + oy) * gm.wo + ox] = acc * inv;
      }
  Impl* pi = raw(input);
  return make_result({gm.ch, gm.ho, gm.wo}, std::move(out), {input}, "pool_avg",
                     [pi, gm, window, stride, inv](const Impl& o) {
                       auto& g = pi->grad_buffer();
                       for (std::size_t c = 0; c < gm.ch; ++c)
                         for (std::size_t oy = 0; oy < gm.ho; ++oy)
                           for (std::size_t ox = 0; ox < gm.wo; ++ox) {
                             const double go = o.grad[(c * gm.ho + oy) * gm.wo + ox] * inv;
                             for (std::size_t dy = 0; dy < window; ++dy)
                               for (std::size_t dx = 0; dx < window; ++dx)
                                 g[(c * gm.h + oy * stride + dy) * gm.w + ox * stride + dx] += go;
                           }
                     });
}

Tensor pool_max(const Tensor& input, std::size_t window, std::size_t stride) {
  const PoolGeometry gm = pool_geometry(input, window, stride, "pool_max");
  const auto in = input.data();
  std::vector<double> out(gm.ch * gm.ho * gm.wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t c = 0; c < gm.ch; ++c)
    for (std::size_t oy = 0; oy < gm.ho; ++oy)
      for (std::size_t ox = 0; ox < gm.wo; ++ox) {
        std::size_t best = (c * gm.h + oy * stride) * gm.w + ox * stride;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = (c * gm.h + oy * stride + dy) * gm.w + ox * stride + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (c * gm.ho + oy) * gm.wo + ox;
        out[o] = in[best];
        (*argmax)[o] = best;
      }
  Impl* pi = raw(input);
  return make_result({gm.ch, gm.ho, gm.wo}, std::move(out), {input}, "pool_max",
                     [pi, argmax](const Impl& o) {
                       auto& g = pi->grad_buffer();
                       for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += o.grad[i];
                     });
}

}  // namespace crtnet
