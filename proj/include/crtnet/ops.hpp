#pragma once

#include <cstddef>
#include <vector>

#include "crtnet/rng.hpp"
#include "crtnet/tensor.hpp"

namespace crtnet {

// Linear algebra and layout ------------------------------------------------

/// [M×K]·[K×N] → [M×N].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Same values under a new shape with equal element count.
Tensor reshape(const Tensor& a, const Shape& shape);
/// Columns [start, start+count) of a 2-D tensor.
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Row i of a 2-D tensor as a [1×N] tensor.
Tensor select_row(const Tensor& a, std::size_t row);

// Elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product; `b` may also be a one-element tensor (scalar scale).
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

/// x[N×M] + bias[M] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// x[C×H×W] + bias[C] broadcast over spatial cells.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// x·W + b for x[N×in], W[in×out], b[out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [C×H×W] → [C], mean over the H·W cells.
Tensor spatial_mean(const Tensor& a);

// Normalisation and probability ------------------------------------------

/// Softmax over the last axis with max subtraction. Throws NumericError on
/// non-finite input.
Tensor softmax(const Tensor& x);

/// Normalises each row over the last axis (population variance, eps inside
/// the square root), then applies gamma/beta.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Inverted dropout: survivors are scaled by 1/(1-rate); identity when not
/// training or rate == 0.
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

/// -log(max(probs[target], 1e-12)) as a one-element tensor.
Tensor cross_entropy(const Tensor& probs, std::size_t target);

/// Value copy with no tape linkage; gradients never flow through it.
Tensor detach(const Tensor& x);

// Convolution and pooling --------------------------------------------------

/// Cross-correlation of input[Cin×H×W] with kernels[Cout×Cin×k×k], zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding);
Tensor pool_avg(const Tensor& input, std::size_t window, std::size_t stride);
/// Max pooling; ties resolve to the first element in row-major window order.
Tensor pool_max(const Tensor& input, std::size_t window, std::size_t stride);

}  // namespace crtnet
