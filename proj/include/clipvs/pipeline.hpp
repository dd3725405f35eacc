#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "clipvs/datamodel.hpp"
#include "clipvs/layers.hpp"

// The sequential detection -> re-identification network: shared backbone,
// region proposals, region pooling, a detection branch and an identity
// branch with norm-aware embedding, plus the auxiliary projections and
// classifiers the training objectives read from.
namespace clipvs {

struct ConvStage {
  int channels = 0;
  int kernel = 3;
  int stride = 1;
};

struct BackboneConfig {
  std::string architecture_id;
  std::vector<ConvStage> stages;  // last stage's channels == stem_output_channels
  int stem_output_channels = 0;   // d
  int pooled_height = 0;          // h
  int pooled_width = 0;           // w
  int branch_output_channels = 0; // 2d
  int embedding_dim = 0;          // o
  int text_dim = 0;               // width of the alignment projections
  int rpn_channels = 0;
  std::vector<double> anchor_sizes;
  std::vector<double> anchor_ratios;
  int image_height = 0;
  int image_width = 0;

  /// ResNet-50-sized geometry: h = w = 14, d = 1024, o = 256, 900 x 1500 frames.
  static BackboneConfig reference();
  /// Desk-scale geometry: h = w = 7, d = 128, 64 x 64 frames.
  static BackboneConfig toy();

  int stride() const;
  int branch_height() const { return (pooled_height + 1) / 2; }
  int branch_width() const { return (pooled_width + 1) / 2; }
  int anchors_per_location() const { return static_cast<int>(anchor_sizes.size() * anchor_ratios.size()); }
  void validate() const;
};

nlohmann::json to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

struct ProposalConfig {
  int pre_nms_train = 2000;
  int post_nms_train = 300;  // p during training
  int pre_nms_eval = 1000;
  int post_nms_eval = 100;   // p at inference
  double nms_threshold = 0.7;
  double min_size = 1.0;
};

struct InferenceConfig {
  double score_threshold = 0.5;
  double nms_threshold = 0.4;
  int max_detections = 100;
};

// --- box coding -----------------------------------------------------------

using BoxWeights = std::array<double, 4>;
inline constexpr BoxWeights kRpnBoxWeights = {1, 1, 1, 1};
inline constexpr BoxWeights kHeadBoxWeights = {10, 10, 5, 5};

std::array<double, 4> encode_box(const Box& reference, const Box& target, const BoxWeights& weights);
Box decode_box(const Box& reference, std::span<const double> deltas, const BoxWeights& weights);
/// Greedy non-maximum suppression; `order` must be sorted by descending score.
std::vector<int> nms(std::span<const Box> boxes, std::span<const int> order, double threshold);
std::vector<Box> make_anchors(int feature_height, int feature_width, int stride, std::span<const double> sizes,
                              std::span<const double> ratios);

// --- region batches ---------------------------------------------------------

enum class RegionSource { kProposal, kPredicted, kGroundTruth };

struct RegionBatch {
  std::string frame_id;
  std::vector<Box> boxes;
  RegionSource source = RegionSource::kProposal;
  std::vector<IdentityId> identities;  // required for ground-truth batches
  nn::Var pooled;                      // [n, h, w, d]
};

struct DetectionOutput {
  Box refined_box;
  double objectness = 0;  // post-sigmoid
};

struct DetectionBranch {
  nn::Var branch;         // [n, h/2, w/2, 2d]
  nn::Var pooled_vector;  // [n, 2d]
  nn::Var logits;         // [n]
  nn::Var deltas;         // [n, 4]
  std::vector<DetectionOutput> outputs;
};

struct IdentityEmbedding {
  std::vector<double> vector;  // unit norm, length o
  double norm_score = 0;       // objectness read from the embedding norm
};

struct IdentityBranch {
  nn::Var branch;         // [n, h/2, w/2, 2d]
  nn::Var pooled_vector;  // [n, 2d]
  nn::Var deltas;         // [n, 4] box refinement
  nn::Var embedding;      // [n, o] unit rows
  nn::Var norm_logit;     // [n] pre-sigmoid objectness from the norm
  std::vector<Box> refined_boxes;
  std::vector<IdentityEmbedding> embeddings;
};

struct RpnOutput {
  nn::Var logits;  // [A]
  nn::Var deltas;  // [A, 4]
  std::vector<Box> anchors;
};

struct Proposals {
  std::vector<Box> boxes;  // sorted by objectness, descending
  std::vector<double> scores;
};

struct GalleryDetection {
  Box box;
  double score = 0;
  std::vector<double> embedding;
};

/// Residual downsampling block standing in for the final ResNet stage:
/// [n,h,w,d] -> [n,ceil(h/2),ceil(w/2),2d].
class HeadBlock {
 public:
  HeadBlock() = default;
  HeadBlock(nn::ParameterSet& params, const std::string& prefix, int in, int out, nn::Rng& rng);
  nn::Var operator()(const nn::Var& x) const;

 private:
  nn::Conv2d reduce_, conv_, expand_, shortcut_;
};

class VehicleSearchModel {
 public:
  VehicleSearchModel(BackboneConfig config, int num_identities, std::uint64_t seed, ProposalConfig proposals = {},
                     InferenceConfig inference = {});

  const BackboneConfig& config() const { return config_; }
  const ProposalConfig& proposal_config() const { return proposals_; }
  ProposalConfig& proposal_config() { return proposals_; }
  const InferenceConfig& inference_config() const { return inference_; }
  InferenceConfig& inference_config() { return inference_; }
  int num_identities() const { return num_identities_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  /// [1,H,W,3] -> [1, ceil(H/s), ceil(W/s), d]. Throws InputError when H or W < stride.
  nn::Var extract_features(const nn::Tensor& image) const;
  RpnOutput rpn(const nn::Var& features) const;
  /// At most p proposals inside the image, by descending objectness.
  Proposals propose_regions(const nn::Var& features, int image_height, int image_width, bool training) const;
  Proposals propose_regions(const RpnOutput& rpn, int image_height, int image_width, bool training) const;

  /// Region pooling of `boxes` (image coordinates) from `features`.
  RegionBatch pool(const nn::Var& features, std::vector<Box> boxes, RegionSource source,
                   std::vector<IdentityId> identities = {}) const;
  DetectionBranch detect(const RegionBatch& regions, int image_height, int image_width) const;
  IdentityBranch identify(const RegionBatch& regions, int image_height, int image_width) const;

  /// Projection of a pooled branch vector into the text-embedding space.
  nn::Var object_alignment_features(const nn::Var& det_pooled_vector) const;
  nn::Var identity_alignment_features(const nn::Var& id_pooled_vector) const;
  /// Image-level multi-label identity logits from the global map, [1, C].
  nn::Var multi_label_logits(const nn::Var& features) const;
  /// Box-level identity logits, [n, C].
  nn::Var single_label_logits(const nn::Var& id_pooled_vector) const;

  /// The crop becomes a one-region frame covering its full extent and goes
  /// through backbone, pooling and the identity branch. `scale` resizes the
  /// crop to the gallery resolution first.
  IdentityEmbedding encode_query(const cv::Mat& crop, double scale = 1.0) const;
  /// Full inference on one frame (already at model resolution).
  std::vector<GalleryDetection> detect_frame(const nn::Tensor& image) const;

  /// Names of parameters belonging to each head, for isolation audits.
  std::vector<std::string> detection_branch_parameters() const;
  std::vector<std::string> identity_branch_parameters() const;

 private:
  BackboneConfig config_;
  int num_identities_;
  ProposalConfig proposals_;
  InferenceConfig inference_;
  nn::ParameterSet params_;

  std::vector<nn::Conv2d> backbone_;
  nn::Conv2d rpn_conv_, rpn_cls_, rpn_bbox_;
  HeadBlock det_head_, id_head_;
  nn::Linear box_cls_, box_bbox_;
  nn::Linear id_reg_, nae_proj_;
  nn::Var nae_scale_, nae_shift_;
  nn::Linear obj_align_, id_align_;
  nn::Linear multi_label_, single_label_;
};

}  // namespace clipvs
