#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "reltr/attention.hpp"
#include "reltr/params.hpp"
#include "reltr/prediction.hpp"
#include "reltr/scene.hpp"
#include "reltr/tensor.hpp"

namespace reltr {

/// Module switches. A disabled attention block
/// is the identity on its query input; without the mask head the predicate
/// MLP sees only the subject/object representations.
struct Ablation {
  bool csa = true;
  bool dva = true;
  bool dea = true;
  bool mask = true;
  friend bool operator==(const Ablation&, const Ablation&) = default;
};

/// Which entity-decoder layer feeds the entity attention of triplet layer i.
enum class DeaWiring { layer_aligned, final_layer };

struct ModelConfig {
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t encoder_layers = 3;
  std::size_t decoder_layers = 3;
  std::size_t entity_queries = 12;
  std::size_t triplet_queries = 16;
  std::size_t entity_classes = 10;     // plus one background class
  std::size_t predicate_classes = 8;   // plus one no-relation class
  double dropout = 0.1;
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::size_t stem_channels = 16;      // first stride-2 stage; the second doubles it
  std::size_t mask_resolution = 28;
  std::size_t mask_channels = 8;       // first mask conv; the second doubles it
  std::size_t spatial_dim = 128;       // length of V_spa
  Ablation ablation;
  DeaWiring dea_wiring = DeaWiring::layer_aligned;

  /// d=256, h=8, N_e=100, N_t=200, 6+6 layers, dropout 0.1.
  static ModelConfig full_scale();
  /// d=64, h=4, N_e=12, N_t=16, 3+3 layers, dropout 0.1.
  static ModelConfig desk_defaults() { return {}; }

  std::size_t grid_height() const { return image_height / 4; }
  std::size_t grid_width() const { return image_width / 4; }
  std::size_t grid_cells() const { return grid_height() * grid_width(); }
  bool uses_mask() const { return ablation.mask && ablation.dva; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Stem {
  Conv first;
  Conv second;
  Linear project;  // 1x1 projection to model_dim, applied per cell
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct MaskHead {
  Conv first;
  Conv second;
  Linear project;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct EncoderLayer {
  AttentionParams self_attention;
  FeedForward ffn;
};

struct EntityDecoderLayer {
  AttentionParams self_attention;
  AttentionParams cross_attention;
  FeedForward ffn;
};

/// Parameters of one triplet decoder layer; ablated blocks are left empty.
struct TripletDecoderLayer {
  AttentionParams csa;
  AttentionParams dva_sub;
  AttentionParams dva_obj;
  AttentionParams dea_sub;
  AttentionParams dea_obj;
  FeedForward ffn_sub;
  FeedForward ffn_obj;
};

/// Learned queries and encodings.
struct Encodings {
  Tensor entity_queries;   // [N_e, d] positional queries of the entity decoder
  Tensor sub_queries;      // Q_s [N_t, d]
  Tensor obj_queries;      // Q_o [N_t, d]
  Tensor triplet_encoding; // E_t [N_t, d]
  Tensor sub_encoding;     // E_s [d], broadcast over slots
  Tensor obj_encoding;     // E_o [d]
};

struct Heads {
  Linear entity_class;
  Mlp entity_box;
  Linear sub_class;
  Linear obj_class;
  Mlp sub_box;
  Mlp obj_box;
  MaskHead mask;
  Mlp predicate;
};

struct EntityLayerOutput {
  Tensor logits;  // [N_e, C_e + 1]
  Tensor boxes;   // [N_e, 4], sigmoid (cx, cy, w, h)
};

struct TripletLayerOutput {
  Tensor sub_logits;    // [N_t, C_e + 1]
  Tensor sub_boxes;     // [N_t, 4]
  Tensor obj_logits;
  Tensor obj_boxes;
  Tensor prd_logits;    // [N_t, C_p + 1]
  Tensor sub_heatmaps;  // [N_t, HW]; undefined when DVA is ablated
  Tensor obj_heatmaps;
};

struct ModelOutput {
  std::vector<EntityLayerOutput> entities;  // one per decoder layer, last is final
  std::vector<TripletLayerOutput> triplets;
};

struct TripletDecoderState {
  Tensor sub;       // [N_t, d]
  Tensor obj;       // [N_t, d]
  Tensor sub_maps;  // [N_t, HW]
  Tensor obj_maps;
};

// ---- stages --------------------------------------------------------------

/// Image [3, IH, IW] as a [1, 3, IH, IW] tensor.
Tensor image_tensor(const Image& image);
/// Two stride-2 conv+ReLU stages and a 1x1 projection: [H*W, d] with H = IH/4.
Tensor stem_forward(const Stem& stem, const Tensor& image);
/// Separable 2D sinusoid, [H*W, d]: channels [0, d/2) encode the row,
/// [d/2, d) the column, interleaved sin/cos with base 10000.
Tensor positional_encoding(std::size_t height, std::size_t width, std::size_t dim);
Tensor encoder_forward(const std::vector<EncoderLayer>& layers, const Tensor& features, const Tensor& pos,
                       const ForwardContext& ctx);
/// Per-layer entity representations Q_e [N_e, d].
std::vector<Tensor> entity_decoder_forward(const std::vector<EntityDecoderLayer>& layers, const Tensor& memory,
                                           const Tensor& pos, const Tensor& entity_queries, const ForwardContext& ctx);

struct PairState {
  Tensor sub;
  Tensor obj;
};
/// Coupled self-attention over the stacked [sub; obj] rows.
PairState csa(const Tensor& sub, const Tensor& obj, const Tensor& sub_encoding, const Tensor& obj_encoding,
              const Tensor& triplet_encoding, const AttentionParams& params, const ForwardContext& ctx);
/// Decoupled visual attention for one branch; also returns the head-mean map.
AttBlockResult dva(const Tensor& queries, const Tensor& triplet_encoding, const Tensor& memory, const Tensor& pos,
                   const AttentionParams& params, const ForwardContext& ctx);
/// Decoupled entity attention for one branch.
Tensor dea(const Tensor& queries, const Tensor& triplet_encoding, const Tensor& entities, const AttentionParams& params,
           const ForwardContext& ctx);
std::vector<TripletDecoderState> triplet_decoder_forward(const std::vector<TripletDecoderLayer>& layers,
                                                         const Tensor& memory, const Tensor& pos,
                                                         const std::vector<Tensor>& entity_layers,
                                                         const Encodings& enc, const ModelConfig& config,
                                                         const ForwardContext& ctx);

/// Bilinear (half-pixel) resampling matrix [H*W, R*R] from an H x W grid to R x R.
Tensor bilinear_resize_matrix(std::size_t height, std::size_t width, std::size_t resolution);
/// Heat-map pairs [N, H*W] x 2 -> spatial features V_spa [N, spatial_dim].
Tensor mask_head(const MaskHead& head, const Tensor& sub_maps, const Tensor& obj_maps, std::size_t height,
                 std::size_t width, std::size_t resolution);
TripletLayerOutput heads_forward(const Heads& heads, const TripletDecoderState& state, const ModelConfig& config);
EntityLayerOutput entity_heads_forward(const Heads& heads, const Tensor& entities);

// ---- model -----------------------------------------------------------------

class RelTR {
 public:
  RelTR(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelOutput forward(const Image& image, const ForwardContext& ctx) const;

  /// Every parameter tensor with a stable hierarchical name, in a fixed order.
  void visit_parameters(const ParamVisitor& fn);
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::size_t parameter_count();
  void zero_grad();

  Stem& stem() { return stem_; }
  std::vector<EncoderLayer>& encoder() { return encoder_; }
  std::vector<EntityDecoderLayer>& entity_decoder() { return entity_decoder_; }
  std::vector<TripletDecoderLayer>& triplet_decoder() { return triplet_decoder_; }
  Encodings& encodings() { return encodings_; }
  Heads& heads() { return heads_; }

 private:
  ModelConfig config_;
  Stem stem_;
  std::vector<EncoderLayer> encoder_;
  std::vector<EntityDecoderLayer> entity_decoder_;
  std::vector<TripletDecoderLayer> triplet_decoder_;
  Encodings encodings_;
  Heads heads_;
  Tensor positions_;
};

/// Plain-value views of one decoder layer's outputs. Box extents are floored
/// at 1e-6 so geometry stays well defined.
std::vector<TripletPrediction> extract_triplets(const TripletLayerOutput& out);
std::vector<EntityPrediction> extract_entities(const EntityLayerOutput& out);

}  // namespace reltr
