#include "reltr/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <map>
#include <memory>
#include <mutex>
#include <cmath>
#include <stdexcept>

namespace reltr {

// ---- config ------------------------------------------------------------------

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.model_dim = 256;
  c.heads = 8;
  c.ffn_dim = 2048;
  c.encoder_layers = 6;
  c.decoder_layers = 6;
  c.entity_queries = 100;
  c.triplet_queries = 200;
  c.dropout = 0.1;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (heads == 0 || model_dim % heads != 0) fail("model_dim must be divisible by heads");
  if (model_dim % 4 != 0) fail("model_dim must be divisible by 4 for the 2D positional encoding");
  if (entity_queries == 0 || triplet_queries == 0) fail("query counts must be positive");
  if (decoder_layers == 0) fail("at least one decoder layer is required");
  if (entity_classes == 0 || predicate_classes == 0) fail("class counts must be positive");
  if (image_height == 0 || image_width == 0 || image_height % 4 != 0 || image_width % 4 != 0)
    fail("image extents must be positive multiples of 4");
  if (mask_resolution < 4) fail("mask_resolution must be >= 4");
  if (ffn_dim == 0 || stem_channels == 0 || mask_channels == 0 || spatial_dim == 0) fail("layer widths must be positive");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"model_dim", c.model_dim},
       {"heads", c.heads},
       {"ffn_dim", c.ffn_dim},
       {"encoder_layers", c.encoder_layers},
       {"decoder_layers", c.decoder_layers},
       {"entity_queries", c.entity_queries},
       {"triplet_queries", c.triplet_queries},
       {"entity_classes", c.entity_classes},
       {"predicate_classes", c.predicate_classes},
       {"dropout", c.dropout},
       {"image_height", c.image_height},
       {"image_width", c.image_width},
       {"stem_channels", c.stem_channels},
       {"mask_resolution", c.mask_resolution},
       {"mask_channels", c.mask_channels},
       {"spatial_dim", c.spatial_dim},
       {"ablation", {{"csa", c.ablation.csa}, {"dva", c.ablation.dva}, {"dea", c.ablation.dea}, {"mask", c.ablation.mask}}},
       {"dea_wiring", c.dea_wiring == DeaWiring::layer_aligned ? "layer_aligned" : "final_layer"}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.model_dim = j.value("model_dim", d.model_dim);
  c.heads = j.value("heads", d.heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.entity_queries = j.value("entity_queries", d.entity_queries);
  c.triplet_queries = j.value("triplet_queries", d.triplet_queries);
  c.entity_classes = j.value("entity_classes", d.entity_classes);
  c.predicate_classes = j.value("predicate_classes", d.predicate_classes);
  c.dropout = j.value("dropout", d.dropout);
  c.image_height = j.value("image_height", d.image_height);
  c.image_width = j.value("image_width", d.image_width);
  c.stem_channels = j.value("stem_channels", d.stem_channels);
  c.mask_resolution = j.value("mask_resolution", d.mask_resolution);
  c.mask_channels = j.value("mask_channels", d.mask_channels);
  c.spatial_dim = j.value("spatial_dim", d.spatial_dim);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    c.ablation.csa = a.value("csa", true);
    c.ablation.dva = a.value("dva", true);
    c.ablation.dea = a.value("dea", true);
    c.ablation.mask = a.value("mask", true);
  }
  const std::string wiring = j.value("dea_wiring", std::string("layer_aligned"));
  if (wiring == "layer_aligned") c.dea_wiring = DeaWiring::layer_aligned;
  else if (wiring == "final_layer") c.dea_wiring = DeaWiring::final_layer;
  else throw std::invalid_argument("model config: unknown dea_wiring '" + wiring + "'");
}

// ---- parameter groups --------------------------------------------------------

void Stem::visit(const std::string& prefix, const ParamVisitor& fn) {
  first.visit(prefix + ".first", fn);
  second.visit(prefix + ".second", fn);
  project.visit(prefix + ".project", fn);
}

void MaskHead::visit(const std::string& prefix, const ParamVisitor& fn) {
  first.visit(prefix + ".first", fn);
  second.visit(prefix + ".second", fn);
  project.visit(prefix + ".project", fn);
}

namespace {

std::size_t conv_out(std::size_t in) { return (in + 2 - 3) / 2 + 1; }  // k3, s2, p1

std::size_t mask_flat_dim(const ModelConfig& c) {
  const std::size_t side = conv_out(conv_out(c.mask_resolution));
  return 2 * c.mask_channels * side * side;
}

}  // namespace

// ---- stages ------------------------------------------------------------------

Tensor image_tensor(const Image& image) {
  if (image.pixels.size() != Image::kChannels * image.height * image.width)
    throw std::invalid_argument("image_tensor: pixel count does not match extents");
  return Tensor({1, Image::kChannels, image.height, image.width},
                std::vector<double>(image.pixels.begin(), image.pixels.end()));
}

Tensor stem_forward(const Stem& stem, const Tensor& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0)
    throw std::invalid_argument("stem_forward: image " + shape_string(image.shape()) +
                                " must be [1, C, IH, IW] with IH, IW divisible by 4");
  const Tensor a = relu(stem.first(image));
  const Tensor b = relu(stem.second(a));
  const std::size_t channels = b.dim(1), cells = b.dim(2) * b.dim(3);
  return stem.project(transpose(reshape(b, {channels, cells})));
}

Tensor positional_encoding(std::size_t height, std::size_t width, std::size_t dim) {
  if (dim % 4 != 0) throw std::invalid_argument("positional_encoding: dim must be divisible by 4");
  const std::size_t half = dim / 2;
  std::vector<double> out(height * width * dim);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      double* row = out.data() + (r * width + c) * dim;
      for (std::size_t i = 0; i < half; i += 2) {
        const double freq = std::pow(10000.0, static_cast<double>(i) / static_cast<double>(half));
        row[i] = std::sin(static_cast<double>(r) / freq);
        row[i + 1] = std::cos(static_cast<double>(r) / freq);
        row[half + i] = std::sin(static_cast<double>(c) / freq);
        row[half + i + 1] = std::cos(static_cast<double>(c) / freq);
      }
    }
  return Tensor({height * width, dim}, std::move(out));
}

Tensor encoder_forward(const std::vector<EncoderLayer>& layers, const Tensor& features, const Tensor& pos,
                       const ForwardContext& ctx) {
  if (features.shape() != pos.shape())
    throw std::invalid_argument("encoder_forward: features " + shape_string(features.shape()) + " vs positions " +
                                shape_string(pos.shape()));
  Tensor z = features;
  for (const EncoderLayer& layer : layers) {
    const Tensor q = add(z, pos);
    z = att_block(q, q, z, z, layer.self_attention, ctx).output;
    z = layer.ffn(z);
  }
  return z;
}

std::vector<Tensor> entity_decoder_forward(const std::vector<EntityDecoderLayer>& layers, const Tensor& memory,
                                           const Tensor& pos, const Tensor& entity_queries, const ForwardContext& ctx) {
  if (memory.shape() != pos.shape() || entity_queries.cols() != memory.cols())
    throw std::invalid_argument("entity_decoder_forward: memory " + shape_string(memory.shape()) + ", queries " +
                                shape_string(entity_queries.shape()));
  const Tensor keys = add(memory, pos);
  Tensor target = Tensor::zeros(entity_queries.shape());
  std::vector<Tensor> outputs;
  for (const EntityDecoderLayer& layer : layers) {
    const Tensor q = add(target, entity_queries);
    target = att_block(q, q, target, target, layer.self_attention, ctx).output;
    target = att_block(add(target, entity_queries), keys, memory, target, layer.cross_attention, ctx).output;
    target = layer.ffn(target);
    outputs.push_back(target);
  }
  return outputs;
}

PairState csa(const Tensor& sub, const Tensor& obj, const Tensor& sub_encoding, const Tensor& obj_encoding,
              const Tensor& triplet_encoding, const AttentionParams& params, const ForwardContext& ctx) {
  if (sub.shape() != obj.shape() || sub.shape() != triplet_encoding.shape())
    throw std::invalid_argument("csa: subject " + shape_string(sub.shape()) + ", object " + shape_string(obj.shape()) +
                                ", triplet encoding " + shape_string(triplet_encoding.shape()));
  const std::size_t slots = sub.rows();
  const Tensor sub_in = add_row(add(sub, triplet_encoding), sub_encoding);
  const Tensor obj_in = add_row(add(obj, triplet_encoding), obj_encoding);
  const Tensor qk = concat({sub_in, obj_in}, 0);
  const Tensor values = concat({sub, obj}, 0);
  const Tensor out = att_block(qk, qk, values, values, params, ctx).output;
  return {slice(out, 0, 0, slots), slice(out, 0, slots, 2 * slots)};
}

AttBlockResult dva(const Tensor& queries, const Tensor& triplet_encoding, const Tensor& memory, const Tensor& pos,
                   const AttentionParams& params, const ForwardContext& ctx) {
  return att_block(add(queries, triplet_encoding), add(memory, pos), memory, queries, params, ctx);
}

Tensor dea(const Tensor& queries, const Tensor& triplet_encoding, const Tensor& entities, const AttentionParams& params,
           const ForwardContext& ctx) {
  return att_block(add(queries, triplet_encoding), entities, entities, queries, params, ctx).output;
}

std::vector<TripletDecoderState> triplet_decoder_forward(const std::vector<TripletDecoderLayer>& layers,
                                                         const Tensor& memory, const Tensor& pos,
                                                         const std::vector<Tensor>& entity_layers,
                                                         const Encodings& enc, const ModelConfig& config,
                                                         const ForwardContext& ctx) {
  const Ablation& ab = config.ablation;
  if (ab.dea && entity_layers.size() < layers.size())
    throw std::invalid_argument("triplet_decoder_forward: fewer entity layers than triplet layers");
  Tensor sub = enc.sub_queries;
  Tensor obj = enc.obj_queries;
  std::vector<TripletDecoderState> states;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const TripletDecoderLayer& layer = layers[l];
    TripletDecoderState state;
    if (ab.csa) {
      auto pair = csa(sub, obj, enc.sub_encoding, enc.obj_encoding, enc.triplet_encoding, layer.csa, ctx);
      sub = pair.sub;
      obj = pair.obj;
    }
    if (ab.dva) {
      auto s = dva(sub, enc.triplet_encoding, memory, pos, layer.dva_sub, ctx);
      auto o = dva(obj, enc.triplet_encoding, memory, pos, layer.dva_obj, ctx);
      sub = s.output;
      obj = o.output;
      state.sub_maps = s.mean_weights;
      state.obj_maps = o.mean_weights;
    }
    if (ab.dea) {
      const Tensor& entities =
          config.dea_wiring == DeaWiring::layer_aligned ? entity_layers[l] : entity_layers.back();
      sub = dea(sub, enc.triplet_encoding, entities, layer.dea_sub, ctx);
      obj = dea(obj, enc.triplet_encoding, entities, layer.dea_obj, ctx);
    }
    sub = layer.ffn_sub(sub);
    obj = layer.ffn_obj(obj);
    state.sub = sub;
    state.obj = obj;
    states.push_back(state);
  }
  return states;
}

Tensor bilinear_resize_matrix(std::size_t height, std::size_t width, std::size_t resolution) {
  // Source coordinate of output pixel o: (o + 0.5) * in / out - 0.5, clamped.
  auto taps = [resolution](std::size_t in) {
    std::vector<std::array<double, 3>> t(resolution);  // lo index, hi index, weight of hi
    for (std::size_t o = 0; o < resolution; ++o) {
      double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(resolution) - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const double lo = std::floor(src);
      const double hi = std::min(lo + 1.0, static_cast<double>(in - 1));
      t[o] = {lo, hi, src - lo};
    }
    return t;
  };
  const auto ty = taps(height), tx = taps(width);
  std::vector<double> m(height * width * resolution * resolution, 0.0);
  const std::size_t out_cells = resolution * resolution;
  for (std::size_t oy = 0; oy < resolution; ++oy)
    for (std::size_t ox = 0; ox < resolution; ++ox) {
      const std::size_t col = oy * resolution + ox;
      const auto [y0, y1, wy] = ty[oy];
      const auto [x0, x1, wx] = tx[ox];
      auto put = [&](double y, double x, double w) {
        m[(static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * out_cells + col] += w;
      };
      put(y0, x0, (1 - wy) * (1 - wx));
      put(y0, x1, (1 - wy) * wx);
      put(y1, x0, wy * (1 - wx));
      put(y1, x1, wy * wx);
    }
  return Tensor({height * width, out_cells}, std::move(m));
}

namespace {

std::shared_ptr<const SparseColumns> resize_taps(std::size_t height, std::size_t width, std::size_t resolution) {
  static std::mutex mu;
  static std::map<std::array<std::size_t, 3>, std::shared_ptr<const SparseColumns>> cache;
  const std::lock_guard lock(mu);
  auto& slot = cache[{height, width, resolution}];
  if (!slot)
    slot = std::make_shared<const SparseColumns>(
        SparseColumns::from_dense(bilinear_resize_matrix(height, width, resolution)));
  return slot;
}

}  // namespace

Tensor mask_head(const MaskHead& head, const Tensor& sub_maps, const Tensor& obj_maps, std::size_t height,
                 std::size_t width, std::size_t resolution) {
  if (sub_maps.shape() != obj_maps.shape() || sub_maps.cols() != height * width)
    throw std::invalid_argument("mask_head: heat maps " + shape_string(sub_maps.shape()) + " and " +
                                shape_string(obj_maps.shape()) + " for a " + std::to_string(height) + "x" +
                                std::to_string(width) + " grid");
  const std::size_t slots = sub_maps.rows();
  const auto resize = resize_taps(height, width, resolution);
  const Tensor stacked = concat({matmul_sparse(sub_maps, resize), matmul_sparse(obj_maps, resize)}, 1);
  Tensor x = reshape(stacked, {slots, 2, resolution, resolution});
  x = relu(head.first(x));
  x = relu(head.second(x));
  return head.project(reshape(x, {slots, x.size() / slots}));
}

EntityLayerOutput entity_heads_forward(const Heads& heads, const Tensor& entities) {
  return {heads.entity_class(entities), sigmoid(heads.entity_box(entities))};
}

TripletLayerOutput heads_forward(const Heads& heads, const TripletDecoderState& state, const ModelConfig& config) {
  TripletLayerOutput out;
  out.sub_logits = heads.sub_class(state.sub);
  out.obj_logits = heads.obj_class(state.obj);
  out.sub_boxes = sigmoid(heads.sub_box(state.sub));
  out.obj_boxes = sigmoid(heads.obj_box(state.obj));
  out.sub_heatmaps = state.sub_maps;
  out.obj_heatmaps = state.obj_maps;
  std::vector<Tensor> features = {state.sub, state.obj};
  if (config.uses_mask())
    features.push_back(mask_head(heads.mask, state.sub_maps, state.obj_maps, config.grid_height(), config.grid_width(),
                                 config.mask_resolution));
  out.prd_logits = heads.predicate(concat(features, 1));
  return out;
}

// ---- model -------------------------------------------------------------------

RelTR::RelTR(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const ModelConfig& c = config_;
  std::mt19937_64 rng(seed);
  const std::size_t d = c.model_dim;
  auto attention = [&] { return AttentionParams::make(d, c.heads, c.dropout, rng); };

  stem_.first = Conv::make(Image::kChannels, c.stem_channels, 3, 2, 1, rng);
  stem_.second = Conv::make(c.stem_channels, 2 * c.stem_channels, 3, 2, 1, rng);
  stem_.project = Linear::make(2 * c.stem_channels, d, rng);

  for (std::size_t i = 0; i < c.encoder_layers; ++i)
    encoder_.push_back({attention(), FeedForward::make(d, c.ffn_dim, rng)});
  for (std::size_t i = 0; i < c.decoder_layers; ++i)
    entity_decoder_.push_back({attention(), attention(), FeedForward::make(d, c.ffn_dim, rng)});
  for (std::size_t i = 0; i < c.decoder_layers; ++i) {
    TripletDecoderLayer layer;
    if (c.ablation.csa) layer.csa = attention();
    if (c.ablation.dva) {
      layer.dva_sub = attention();
      layer.dva_obj = attention();
    }
    if (c.ablation.dea) {
      layer.dea_sub = attention();
      layer.dea_obj = attention();
    }
    layer.ffn_sub = FeedForward::make(d, c.ffn_dim, rng);
    layer.ffn_obj = FeedForward::make(d, c.ffn_dim, rng);
    triplet_decoder_.push_back(std::move(layer));
  }

  encodings_.entity_queries = init_normal({c.entity_queries, d}, 1.0, rng);
  encodings_.sub_queries = init_normal({c.triplet_queries, d}, 0.02, rng);
  encodings_.obj_queries = init_normal({c.triplet_queries, d}, 0.02, rng);
  encodings_.triplet_encoding = init_normal({c.triplet_queries, d}, 1.0, rng);
  if (c.ablation.csa) {
    encodings_.sub_encoding = init_normal({d}, 1.0, rng);
    encodings_.obj_encoding = init_normal({d}, 1.0, rng);
  }

  heads_.entity_class = Linear::make(d, c.entity_classes + 1, rng);
  heads_.entity_box = Mlp::make(d, d, 4, 3, rng);
  heads_.sub_class = Linear::make(d, c.entity_classes + 1, rng);
  heads_.obj_class = Linear::make(d, c.entity_classes + 1, rng);
  heads_.sub_box = Mlp::make(d, d, 4, 3, rng);
  heads_.obj_box = Mlp::make(d, d, 4, 3, rng);
  std::size_t predicate_in = 2 * d;
  if (c.uses_mask()) {
    heads_.mask.first = Conv::make(2, c.mask_channels, 3, 2, 1, rng);
    heads_.mask.second = Conv::make(c.mask_channels, 2 * c.mask_channels, 3, 2, 1, rng);
    heads_.mask.project = Linear::make(mask_flat_dim(c), c.spatial_dim, rng);
    predicate_in += c.spatial_dim;
  }
  heads_.predicate = Mlp::make(predicate_in, d, c.predicate_classes + 1, 3, rng);

  positions_ = positional_encoding(c.grid_height(), c.grid_width(), d);
}

ModelOutput RelTR::forward(const Image& image, const ForwardContext& ctx) const {
  if (image.height != config_.image_height || image.width != config_.image_width)
    throw std::invalid_argument("RelTR::forward: image is " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + ", model expects " +
                                std::to_string(config_.image_height) + "x" + std::to_string(config_.image_width));
  const Tensor features = stem_forward(stem_, image_tensor(image));
  const Tensor memory = encoder_forward(encoder_, features, positions_, ctx);
  const auto entity_layers = entity_decoder_forward(entity_decoder_, memory, positions_, encodings_.entity_queries, ctx);
  const auto states =
      triplet_decoder_forward(triplet_decoder_, memory, positions_, entity_layers, encodings_, config_, ctx);

  ModelOutput out;
  for (const Tensor& e : entity_layers) out.entities.push_back(entity_heads_forward(heads_, e));
  for (const auto& s : states) out.triplets.push_back(heads_forward(heads_, s, config_));
  return out;
}

void RelTR::visit_parameters(const ParamVisitor& fn) {
  // Ablated blocks keep undefined tensors and are skipped.
  const ParamVisitor defined_only = [&fn](const std::string& name, Tensor& t) {
    if (t.defined()) fn(name, t);
  };
  auto attention = [&](AttentionParams& p, const std::string& name) {
    if (p.query.weight.defined()) p.visit(name, defined_only);
  };
  stem_.visit("stem", defined_only);
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    attention(encoder_[i].self_attention, p + ".self_attention");
    encoder_[i].ffn.visit(p + ".ffn", defined_only);
  }
  for (std::size_t i = 0; i < entity_decoder_.size(); ++i) {
    const std::string p = "entity_decoder." + std::to_string(i);
    attention(entity_decoder_[i].self_attention, p + ".self_attention");
    attention(entity_decoder_[i].cross_attention, p + ".cross_attention");
    entity_decoder_[i].ffn.visit(p + ".ffn", defined_only);
  }
  for (std::size_t i = 0; i < triplet_decoder_.size(); ++i) {
    const std::string p = "triplet_decoder." + std::to_string(i);
    TripletDecoderLayer& l = triplet_decoder_[i];
    attention(l.csa, p + ".csa");
    attention(l.dva_sub, p + ".dva_sub");
    attention(l.dva_obj, p + ".dva_obj");
    attention(l.dea_sub, p + ".dea_sub");
    attention(l.dea_obj, p + ".dea_obj");
    l.ffn_sub.visit(p + ".ffn_sub", defined_only);
    l.ffn_obj.visit(p + ".ffn_obj", defined_only);
  }
  defined_only("encodings.entity_queries", encodings_.entity_queries);
  defined_only("encodings.sub_queries", encodings_.sub_queries);
  defined_only("encodings.obj_queries", encodings_.obj_queries);
  defined_only("encodings.triplet", encodings_.triplet_encoding);
  defined_only("encodings.subject", encodings_.sub_encoding);
  defined_only("encodings.object", encodings_.obj_encoding);
  heads_.entity_class.visit("heads.entity_class", defined_only);
  heads_.entity_box.visit("heads.entity_box", defined_only);
  heads_.sub_class.visit("heads.sub_class", defined_only);
  heads_.obj_class.visit("heads.obj_class", defined_only);
  heads_.sub_box.visit("heads.sub_box", defined_only);
  heads_.obj_box.visit("heads.obj_box", defined_only);
  if (heads_.mask.first.weight.defined()) heads_.mask.visit("heads.mask", defined_only);
  heads_.predicate.visit("heads.predicate", defined_only);
}

std::vector<std::pair<std::string, Tensor>> RelTR::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  visit_parameters([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::size_t RelTR::parameter_count() {
  std::size_t n = 0;
  visit_parameters([&](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

void RelTR::zero_grad() {
  visit_parameters([](const std::string&, Tensor& t) { t.zero_grad(); });
}

// ---- plain-value views -------------------------------------------------------

namespace {

constexpr double kMinExtent = 1e-6;

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  const std::size_t n = t.cols();
  return {t.data().begin() + static_cast<std::ptrdiff_t>(r * n), t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * n)};
}

Box box_of(const Tensor& t, std::size_t r) {
  return {t.at(r, 0), t.at(r, 1), std::max(t.at(r, 2), kMinExtent), std::max(t.at(r, 3), kMinExtent)};
}

}  // namespace

std::vector<TripletPrediction> extract_triplets(const TripletLayerOutput& out) {
  std::vector<TripletPrediction> preds(out.sub_logits.rows());
  for (std::size_t r = 0; r < preds.size(); ++r) {
    TripletPrediction& p = preds[r];
    p.sub_logits = row_of(out.sub_logits, r);
    p.obj_logits = row_of(out.obj_logits, r);
    p.prd_logits = row_of(out.prd_logits, r);
    p.sub_box = box_of(out.sub_boxes, r);
    p.obj_box = box_of(out.obj_boxes, r);
    if (out.sub_heatmaps.defined()) {
      p.sub_heatmap = row_of(out.sub_heatmaps, r);
      p.obj_heatmap = row_of(out.obj_heatmaps, r);
    }
  }
  return preds;
}

std::vector<EntityPrediction> extract_entities(const EntityLayerOutput& out) {
  std::vector<EntityPrediction> preds(out.logits.rows());
  for (std::size_t r = 0; r < preds.size(); ++r) preds[r] = {row_of(out.logits, r), box_of(out.boxes, r)};
  return preds;
}

}  // namespace reltr
