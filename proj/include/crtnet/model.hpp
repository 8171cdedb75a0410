#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crtnet/image.hpp"
#include "crtnet/rng.hpp"
#include "crtnet/tensor.hpp"

namespace crtnet {

/// How the final prediction y_p is formed from the two classifier heads.
enum class FusionMode {
  ConfidenceWeighted,  // y_p = p·y_t + (1 − p)·y_tc
  TargetOnly,          // y_p = y_t
  ContextOnly,         // y_p = y_tc
};

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& name);

struct ModelConfig {
  int num_classes = 8;
  int image_side = 64;     // both input streams are image_side × image_side
  int feat_channels = 64;  // D
  int grid_h = 4;          // H
  int grid_w = 4;          // W
  int decoder_layers = 2;  // X
  int heads = 4;
  int mlp_hidden = 128;
  int confidence_hidden = 32;
  double dropout_rate = 0.1;
  double layernorm_eps = 1e-5;
  bool share_encoders = false;
  FusionMode fusion_mode = FusionMode::ConfidenceWeighted;
  bool detach_target_heads = true;

  int tokens() const { return grid_h * grid_w; }
  int head_dim() const { return feat_channels / heads; }

  /// Throws ConfigError on any inconsistent field.
  void validate() const;

  /// Flat key/value view used by checkpoints and run manifests.
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);

  bool operator==(const ModelConfig&) const = default;
};

/// Three stride-2 conv blocks (3 → 16 → 32 → D) followed by average pooling
/// down to the H×W token grid.
struct EncoderParams {
  Tensor conv1, bias1;
  Tensor conv2, bias2;
  Tensor conv3, bias3;
};

struct DecoderLayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // attention projections, D×D
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

struct CrtnetParams {
  EncoderParams target_encoder;
  EncoderParams context_encoder;  // aliases target_encoder when shared
  Tensor positional;              // L×D, one learned vector per grid cell
  std::vector<DecoderLayerParams> decoder;
  Tensor context_cls_w, context_cls_b;  // G_z: D → C
  Tensor target_cls_w, target_cls_b;    // G_t: D → C
  Tensor conf_w1, conf_b1, conf_w2, conf_b2;  // U: D → hidden → 1

  static CrtnetParams init(const ModelConfig& config, Rng& rng);

  /// Every distinct parameter tensor under a stable dotted name. Shared
  /// encoder weights are listed once.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> all() const;
  /// Element count over distinct encoder tensors.
  std::size_t encoder_parameter_count() const;
  std::size_t parameter_count() const;
  /// Deep copy with fresh storage (shared encoders stay shared).
  CrtnetParams clone() const;
};

/// Per-layer, per-head attention weights over the L context tokens.
struct AttentionMaps {
  std::size_t layers = 0, heads = 0, tokens = 0;
  std::vector<double> weights;

  double at(std::size_t layer, std::size_t head, std::size_t token) const {
    return weights[(layer * heads + head) * tokens + token];
  }
};

/// Output of one forward pass. Tensors stay connected to the tape so losses
/// can be built from them.
struct Prediction {
  Tensor y_t;   // [C] target-only distribution
  Tensor y_tc;  // [C] context-integrated distribution
  Tensor p;     // [1] confidence in y_t
  Tensor y_p;   // [C] final distribution
  AttentionMaps attention;
};

enum class Stream { Target, Context };

/// Crops the box (I_t) and resizes both the crop and the full image (I_c) to
/// S×S with bilinear interpolation. Image values are expected in [0, 1].
std::pair<Tensor, Tensor> prepare_inputs(const Tensor& image, const BoundingBox& box,
                                         const ModelConfig& config);

/// Feature map [D×H×W] of one stream.
Tensor encode(Stream stream, const Tensor& img, const CrtnetParams& params, const ModelConfig& config);

/// [D×H×W] → [L×D]; row i is the feature vector at cell (i / W, i % W).
Tensor tokenize_context(const Tensor& a_c);
/// Inverse of tokenize_context.
Tensor untokenize(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w);

/// Mean over all L cells, [D×H×W] → [D].
Tensor pool_target(const Tensor& a_t);

/// Grid cell index holding the box midpoint; coordinates are scaled by the
/// ORIGINAL image size and clamped to the grid.
std::size_t target_cell(const BoundingBox& box, int image_w, int image_h, const ModelConfig& config);

struct EncodedTokens {
  Tensor z_c;  // [L×D]
  Tensor z_t;  // [1×D]
};

EncodedTokens positional_encode(const Tensor& tokens, const Tensor& target_token, const BoundingBox& box,
                                int image_w, int image_h, const ModelConfig& config,
                                const CrtnetParams& params);

/// Multi-head encoder-decoder attention; queries from z_t [1×D], keys and
/// values from z_c [L×D]. Writes heads×L weights to `attention` when given.
Tensor encoder_decoder_attention(const Tensor& z_t, const Tensor& z_c, const DecoderLayerParams& layer,
                                 const ModelConfig& config, std::vector<double>* attention = nullptr);

/// One post-norm decoder layer without self-attention:
///   z  = LN(DROP(EDA(z_t, z_c)) + z_t)
///   z' = LN(DROP(MLP(z)) + z),  MLP = affine → ReLU → DROP → affine
Tensor decoder_layer(const Tensor& z_t, const Tensor& z_c, const DecoderLayerParams& layer,
                     const ModelConfig& config, Rng& rng, bool training,
                     std::vector<double>* attention = nullptr);

/// Applies every decoder layer, feeding each output back in as the query.
Tensor decode_stack(const Tensor& z_t, const Tensor& z_c, const CrtnetParams& params,
                    const ModelConfig& config, Rng& rng, bool training, AttentionMaps* attention = nullptr);

/// y_p from the two heads under the given fusion mode.
Tensor fuse(const Tensor& y_t, const Tensor& y_tc, const Tensor& p, FusionMode mode);

Prediction forward(const Tensor& image, const BoundingBox& box, const CrtnetParams& params,
                   const ModelConfig& config, Rng& rng, bool training);

}  // namespace crtnet
