#include "crtnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "crtnet/errors.hpp"
#include "crtnet/ops.hpp"

namespace crtnet {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::ConfidenceWeighted: return "confidence_weighted";
    case FusionMode::TargetOnly: return "target_only";
    case FusionMode::ContextOnly: return "context_only";
  }
  return "?";
}

FusionMode parse_fusion_mode(const std::string& name) {
  if (name == "confidence_weighted") return FusionMode::ConfidenceWeighted;
  if (name == "target_only") return FusionMode::TargetOnly;
  if (name == "context_only") return FusionMode::ContextOnly;
  throw ConfigError("unknown fusion mode '" + name + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (feat_channels < 1 || heads < 1) fail("feat_channels and heads must be positive");
  if (feat_channels % heads != 0) fail("feat_channels must be divisible by heads");
  if (grid_h < 1 || grid_w < 1) fail("token grid must be at least 1x1");
  if (grid_h != grid_w) fail("the conv encoder produces square grids; grid_h must equal grid_w");
  if (image_side < 8 || image_side % 8 != 0) fail("image_side must be a positive multiple of 8");
  if ((image_side / 8) % grid_h != 0) fail("image_side/8 must be divisible by the grid size");
  if (decoder_layers < 1) fail("decoder_layers must be >= 1");
  if (mlp_hidden < 1 || confidence_hidden < 1) fail("hidden widths must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
  if (!(layernorm_eps > 0.0)) fail("layernorm_eps must be positive");
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int get_int(const std::map<std::string, std::string>& kv, const std::string& key, int fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t used = 0;
    const int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects an integer, got '" + it->second + "'");
  }
}

double get_double(const std::map<std::string, std::string>& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + it->second + "'");
  }
}

bool get_bool(const std::map<std::string, std::string>& kv, const std::string& key, bool fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("'" + key + "' expects true/false, got '" + it->second + "'");
}

}  // namespace

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"num_classes", std::to_string(num_classes)},
      {"image_side", std::to_string(image_side)},
      {"feat_channels", std::to_string(feat_channels)},
      {"grid_h", std::to_string(grid_h)},
      {"grid_w", std::to_string(grid_w)},
      {"decoder_layers", std::to_string(decoder_layers)},
      {"heads", std::to_string(heads)},
      {"mlp_hidden", std::to_string(mlp_hidden)},
      {"confidence_hidden", std::to_string(confidence_hidden)},
      {"dropout_rate", fmt_double(dropout_rate)},
      {"layernorm_eps", fmt_double(layernorm_eps)},
      {"share_encoders", share_encoders ? "true" : "false"},
      {"fusion_mode", to_string(fusion_mode)},
      {"detach_target_heads", detach_target_heads ? "true" : "false"},
  };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  static const std::set<std::string> known = {
      "num_classes", "image_side", "feat_channels", "grid_h", "grid_w", "decoder_layers", "heads",
      "mlp_hidden", "confidence_hidden", "dropout_rate", "layernorm_eps", "share_encoders",
      "fusion_mode", "detach_target_heads"};
  for (const auto& [k, v] : kv)
    if (!known.count(k)) throw ConfigError("unknown model key '" + k + "'");
  ModelConfig c;
  c.num_classes = get_int(kv, "num_classes", c.num_classes);
  c.image_side = get_int(kv, "image_side", c.image_side);
  c.feat_channels = get_int(kv, "feat_channels", c.feat_channels);
  c.grid_h = get_int(kv, "grid_h", c.grid_h);
  c.grid_w = get_int(kv, "grid_w", c.grid_w);
  c.decoder_layers = get_int(kv, "decoder_layers", c.decoder_layers);
  c.heads = get_int(kv, "heads", c.heads);
  c.mlp_hidden = get_int(kv, "mlp_hidden", c.mlp_hidden);
  c.confidence_hidden = get_int(kv, "confidence_hidden", c.confidence_hidden);
  c.dropout_rate = get_double(kv, "dropout_rate", c.dropout_rate);
  c.layernorm_eps = get_double(kv, "layernorm_eps", c.layernorm_eps);
  c.share_encoders = get_bool(kv, "share_encoders", c.share_encoders);
  if (auto it = kv.find("fusion_mode"); it != kv.end()) c.fusion_mode = parse_fusion_mode(it->second);
  c.detach_target_heads = get_bool(kv, "detach_target_heads", c.detach_target_heads);
  return c;
}

// Initialisation -------------------------------------------------------------

namespace {

constexpr std::size_t kEncoderWidths[] = {3, 16, 32};

Tensor normal_init(const Shape& shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal() * stddev;
  return Tensor(shape, std::move(v), true);
}

Tensor uniform_init(const Shape& shape, double bound, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(shape, std::move(v), true);
}

Tensor linear_weight(std::size_t in, std::size_t out, Rng& rng) {
  return uniform_init({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

Tensor zeros_param(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor ones_param(std::size_t n) { return Tensor::full({n}, 1.0, true); }

EncoderParams init_encoder(std::size_t d, Rng& rng) {
  auto conv = [&](std::size_t cout, std::size_t cin) {
    return normal_init({cout, cin, 3, 3}, std::sqrt(2.0 / static_cast<double>(cin * 9)), rng);
  };
  EncoderParams e;
  e.conv1 = conv(kEncoderWidths[1], kEncoderWidths[0]);
  e.bias1 = zeros_param(kEncoderWidths[1]);
  e.conv2 = conv(kEncoderWidths[2], kEncoderWidths[1]);
  e.bias2 = zeros_param(kEncoderWidths[2]);
  e.conv3 = conv(d, kEncoderWidths[2]);
  e.bias3 = zeros_param(d);
  return e;
}

void append_encoder(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                    const EncoderParams& e) {
  out.emplace_back(prefix + ".conv1", e.conv1);
  out.emplace_back(prefix + ".bias1", e.bias1);
  out.emplace_back(prefix + ".conv2", e.conv2);
  out.emplace_back(prefix + ".bias2", e.bias2);
  out.emplace_back(prefix + ".conv3", e.conv3);
  out.emplace_back(prefix + ".bias3", e.bias3);
}

}  // namespace

CrtnetParams CrtnetParams::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.feat_channels);
  const auto c = static_cast<std::size_t>(config.num_classes);
  CrtnetParams p;
  p.target_encoder = init_encoder(d, rng);
  p.context_encoder = config.share_encoders ? p.target_encoder : init_encoder(d, rng);
  p.positional = normal_init({static_cast<std::size_t>(config.tokens()), d}, 0.1, rng);
  for (int l = 0; l < config.decoder_layers; ++l) {
    DecoderLayerParams layer;
    layer.wq = linear_weight(d, d, rng);
    layer.bq = zeros_param(d);
    layer.wk = linear_weight(d, d, rng);
    layer.bk = zeros_param(d);
    layer.wv = linear_weight(d, d, rng);
    layer.bv = zeros_param(d);
    layer.wo = linear_weight(d, d, rng);
    layer.bo = zeros_param(d);
    const auto hid = static_cast<std::size_t>(config.mlp_hidden);
    layer.mlp_w1 = linear_weight(d, hid, rng);
    layer.mlp_b1 = zeros_param(hid);
    layer.mlp_w2 = linear_weight(hid, d, rng);
    layer.mlp_b2 = zeros_param(d);
    layer.ln1_gamma = ones_param(d);
    layer.ln1_beta = zeros_param(d);
    layer.ln2_gamma = ones_param(d);
    layer.ln2_beta = zeros_param(d);
    p.decoder.push_back(std::move(layer));
  }
  p.context_cls_w = linear_weight(d, c, rng);
  p.context_cls_b = zeros_param(c);
  p.target_cls_w = linear_weight(d, c, rng);
  p.target_cls_b = zeros_param(c);
  const auto ch = static_cast<std::size_t>(config.confidence_hidden);
  p.conf_w1 = linear_weight(d, ch, rng);
  p.conf_b1 = zeros_param(ch);
  p.conf_w2 = linear_weight(ch, 1, rng);
  p.conf_b2 = zeros_param(1);
  return p;
}

std::vector<std::pair<std::string, Tensor>> CrtnetParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  append_encoder(out, "encoder.target", target_encoder);
  if (!context_encoder.conv1.same_storage(target_encoder.conv1))
    append_encoder(out, "encoder.context", context_encoder);
  out.emplace_back("positional", positional);
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const DecoderLayerParams& L = decoder[l];
    const std::string p = "decoder." + std::to_string(l) + ".";
    out.emplace_back(p + "wq", L.wq);
    out.emplace_back(p + "bq", L.bq);
    out.emplace_back(p + "wk", L.wk);
    out.emplace_back(p + "bk", L.bk);
    out.emplace_back(p + "wv", L.wv);
    out.emplace_back(p + "bv", L.bv);
    out.emplace_back(p + "wo", L.wo);
    out.emplace_back(p + "bo", L.bo);
    out.emplace_back(p + "mlp_w1", L.mlp_w1);
    out.emplace_back(p + "mlp_b1", L.mlp_b1);
    out.emplace_back(p + "mlp_w2", L.mlp_w2);
    out.emplace_back(p + "mlp_b2", L.mlp_b2);
    out.emplace_back(p + "ln1_gamma", L.ln1_gamma);
    out.emplace_back(p + "ln1_beta", L.ln1_beta);
    out.emplace_back(p + "ln2_gamma", L.ln2_gamma);
    out.emplace_back(p + "ln2_beta", L.ln2_beta);
  }
  out.emplace_back("context_cls.w", context_cls_w);
  out.emplace_back("context_cls.b", context_cls_b);
  out.emplace_back("target_cls.w", target_cls_w);
  out.emplace_back("target_cls.b", target_cls_b);
  out.emplace_back("confidence.w1", conf_w1);
  out.emplace_back("confidence.b1", conf_b1);
  out.emplace_back("confidence.w2", conf_w2);
  out.emplace_back("confidence.b2", conf_b2);
  return out;
}

std::vector<Tensor> CrtnetParams::all() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

std::size_t CrtnetParams::encoder_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named())
    if (name.rfind("encoder.", 0) == 0) n += t.numel();
  return n;
}

std::size_t CrtnetParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

CrtnetParams CrtnetParams::clone() const {
  const bool shared = context_encoder.conv1.same_storage(target_encoder.conv1);
  auto copy_encoder = [](const EncoderParams& e) {
    return EncoderParams{e.conv1.clone(), e.bias1.clone(), e.conv2.clone(),
                         e.bias2.clone(), e.conv3.clone(), e.bias3.clone()};
  };
  CrtnetParams p = *this;
  p.target_encoder = copy_encoder(target_encoder);
  p.context_encoder = shared ? p.target_encoder : copy_encoder(context_encoder);
  p.positional = positional.clone();
  for (DecoderLayerParams& L : p.decoder) {
    for (Tensor* t : {&L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo, &L.bo, &L.mlp_w1, &L.mlp_b1,
                      &L.mlp_w2, &L.mlp_b2, &L.ln1_gamma, &L.ln1_beta, &L.ln2_gamma, &L.ln2_beta})
      *t = t->clone();
  }
  for (Tensor* t : {&p.context_cls_w, &p.context_cls_b, &p.target_cls_w, &p.target_cls_b, &p.conf_w1,
                    &p.conf_b1, &p.conf_w2, &p.conf_b2})
    *t = t->clone();
  return p;
}

// Forward pieces -------------------------------------------------------------

std::pair<Tensor, Tensor> prepare_inputs(const Tensor& image, const BoundingBox& box,
                                         const ModelConfig& config) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimensionError("prepare_inputs: image must be 3xHxW, got " + shape_str(image.shape()));
  const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  box.validate(w, h);
  const int s = config.image_side;
  Tensor target = crop_resize_bilinear(image, box, s, s);
  Tensor context = crop_resize_bilinear(image, BoundingBox{0, 0, w, h}, s, s);
  return {std::move(target), std::move(context)};
}

Tensor encode(Stream stream, const Tensor& img, const CrtnetParams& params, const ModelConfig& config) {
  const auto s = static_cast<std::size_t>(config.image_side);
  if (img.shape() != Shape{3, s, s})
    throw DimensionError("encode: expected input " + shape_str({3, s, s}) + ", got " + shape_str(img.shape()));
  const EncoderParams& e = stream == Stream::Target ? params.target_encoder : params.context_encoder;
  Tensor x = relu(add_channel_bias(conv2d(img, e.conv1, 2, 1), e.bias1));
  x = relu(add_channel_bias(conv2d(x, e.conv2, 2, 1), e.bias2));
  x = relu(add_channel_bias(conv2d(x, e.conv3, 2, 1), e.bias3));
  const std::size_t window = x.dim(1) / static_cast<std::size_t>(config.grid_h);
  if (window > 1) x = pool_avg(x, window, window);
  return x;
}

Tensor tokenize_context(const Tensor& a_c) {
  if (a_c.rank() != 3) throw DimensionError("tokenize_context: expected DxHxW, got " + shape_str(a_c.shape()));
  const std::size_t d = a_c.dim(0), cells = a_c.dim(1) * a_c.dim(2);
  return transpose(reshape(a_c, {d, cells}));
}

Tensor untokenize(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w) {
  if (tokens.rank() != 2 || tokens.dim(0) != grid_h * grid_w)
    throw DimensionError("untokenize: " + shape_str(tokens.shape()) + " does not fit a " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  return reshape(transpose(tokens), {tokens.dim(1), grid_h, grid_w});
}

Tensor pool_target(const Tensor& a_t) { return spatial_mean(a_t); }

std::size_t target_cell(const BoundingBox& box, int image_w, int image_h, const ModelConfig& config) {
  const double row = std::floor(box.mid_y() / image_h * config.grid_h);
  const double col = std::floor(box.mid_x() / image_w * config.grid_w);
  const int r = std::clamp(static_cast<int>(row), 0, config.grid_h - 1);
  const int c = std::clamp(static_cast<int>(col), 0, config.grid_w - 1);
  return static_cast<std::size_t>(r * config.grid_w + c);
}

EncodedTokens positional_encode(const Tensor& tokens, const Tensor& target_token, const BoundingBox& box,
                                int image_w, int image_h, const ModelConfig& config,
                                const CrtnetParams& params) {
  if (tokens.shape() != params.positional.shape())
    throw DimensionError("positional_encode: tokens " + shape_str(tokens.shape()) +
                         " do not match embeddings " + shape_str(params.positional.shape()));
  const std::size_t cell = target_cell(box, image_w, image_h, config);
  Tensor t = reshape(target_token, {1, target_token.numel()});
  return {add(tokens, params.positional), add(t, select_row(params.positional, cell))};
}

Tensor encoder_decoder_attention(const Tensor& z_t, const Tensor& z_c, const DecoderLayerParams& layer,
                                 const ModelConfig& config, std::vector<double>* attention) {
  const auto dh = static_cast<std::size_t>(config.head_dim());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor q = linear(z_t, layer.wq, layer.bq);
  const Tensor k = linear(z_c, layer.wk, layer.bk);
  const Tensor v = linear(z_c, layer.wv, layer.bv);
  std::vector<Tensor> heads;
  for (int h = 0; h < config.heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    const Tensor scores = scale(matmul(slice_cols(q, off, dh), transpose(slice_cols(k, off, dh))), inv_sqrt);
    const Tensor weights = softmax(scores);
    if (attention) attention->insert(attention->end(), weights.data().begin(), weights.data().end());
    heads.push_back(matmul(weights, slice_cols(v, off, dh)));
  }
  return linear(concat_cols(heads), layer.wo, layer.bo);
}

Tensor decoder_layer(const Tensor& z_t, const Tensor& z_c, const DecoderLayerParams& layer,
                     const ModelConfig& config, Rng& rng, bool training, std::vector<double>* attention) {
  const double rate = config.dropout_rate;
  const double eps = config.layernorm_eps;
  const Tensor eda = encoder_decoder_attention(z_t, z_c, layer, config, attention);
  const Tensor z = layernorm(add(dropout(eda, rate, training, rng), z_t), layer.ln1_gamma, layer.ln1_beta, eps);
  Tensor hidden = dropout(relu(linear(z, layer.mlp_w1, layer.mlp_b1)), rate, training, rng);
  const Tensor mlp = linear(hidden, layer.mlp_w2, layer.mlp_b2);
  return layernorm(add(dropout(mlp, rate, training, rng), z), layer.ln2_gamma, layer.ln2_beta, eps);
}

Tensor decode_stack(const Tensor& z_t, const Tensor& z_c, const CrtnetParams& params,
                    const ModelConfig& config, Rng& rng, bool training, AttentionMaps* attention) {
  std::vector<double>* sink = nullptr;
  if (attention) {
    attention->layers = params.decoder.size();
    attention->heads = static_cast<std::size_t>(config.heads);
    attention->tokens = z_c.dim(0);
    attention->weights.clear();
    sink = &attention->weights;
  }
  Tensor z = z_t;
  for (const DecoderLayerParams& layer : params.decoder) z = decoder_layer(z, z_c, layer, config, rng, training, sink);
  return z;
}

Tensor fuse(const Tensor& y_t, const Tensor& y_tc, const Tensor& p, FusionMode mode) {
  switch (mode) {
    case FusionMode::TargetOnly: return y_t;
    case FusionMode::ContextOnly: return y_tc;
    case FusionMode::ConfidenceWeighted: break;
  }
  return add(mul(y_t, p), mul(y_tc, add_scalar(scale(p, -1.0), 1.0)));
}

Prediction forward(const Tensor& image, const BoundingBox& box, const CrtnetParams& params,
                   const ModelConfig& config, Rng& rng, bool training) {
  const auto [target_img, context_img] = prepare_inputs(image, box, config);
  const Tensor a_t = encode(Stream::Target, target_img, params, config);
  const Tensor a_c = encode(Stream::Context, context_img, params, config);

  const Tensor target_token = pool_target(a_t);
  const EncodedTokens enc = positional_encode(tokenize_context(a_c), target_token, box,
                                              static_cast<int>(image.dim(2)), static_cast<int>(image.dim(1)),
                                              config, params);
  Prediction pred;
  const Tensor z = decode_stack(enc.z_t, enc.z_c, params, config, rng, training, &pred.attention);

  const auto c = static_cast<std::size_t>(config.num_classes);
  pred.y_tc = reshape(softmax(linear(z, params.context_cls_w, params.context_cls_b)), {c});

  // G_t and U read the pooled target features; detaching here keeps their
  // gradients out of the target encoder.
  Tensor head_in = reshape(target_token, {1, target_token.numel()});
  if (config.detach_target_heads) head_in = detach(head_in);
  pred.y_t = reshape(softmax(linear(head_in, params.target_cls_w, params.target_cls_b)), {c});
  const Tensor u_hidden = relu(linear(head_in, params.conf_w1, params.conf_b1));
  pred.p = reshape(sigmoid(linear(u_hidden, params.conf_w2, params.conf_b2)), {1});
  // y_p reuses the context-integrated distribution through a detached decoder
  // output, so loss_p reaches G_z but never the encoders.
  Tensor y_tc_fused = pred.y_tc;
  if (config.detach_target_heads)
    y_tc_fused = reshape(softmax(linear(detach(z), params.context_cls_w, params.context_cls_b)), {c});
  pred.y_p = fuse(pred.y_t, y_tc_fused, pred.p, config.fusion_mode);
  return pred;
}

}  // namespace crtnet
