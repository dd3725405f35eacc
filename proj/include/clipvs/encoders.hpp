#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

#include "clipvs/layers.hpp"

// Pluggable encoder contracts consumed by the prompt and training modules,
// with small self-contained reference implementations.
namespace clipvs {

/// Frozen text encoder: token embeddings in, one text vector out.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;

  virtual int token_dim() const = 0;
  virtual int output_dim() const = 0;
  /// Word ids for `text`; start/end markers are added when `markers` is set.
  virtual std::vector<int> tokenize(std::string_view text, bool markers = true) const = 0;
  /// Frozen embedding rows for token ids, [L, token_dim].
  virtual nn::Tensor token_embeddings(std::span<const int> ids) const = 0;
  /// [L, token_dim] -> [1, output_dim]; differentiable w.r.t. the token rows only.
  virtual nn::Var encode_embeddings(const nn::Var& tokens) const = 0;
  virtual std::uint64_t weights_hash() const = 0;
  /// Multiplier applied to cosine logits in contrastive objectives.
  virtual double logit_scale() const { return 100.0; }

  /// Convenience: tokenize, embed, encode. Returns [output_dim].
  nn::Tensor encode(std::string_view text) const;
};

struct TextEncoderConfig {
  int vocab_size = 4096;
  int token_dim = 32;
  int output_dim = 64;
  int max_length = 32;
  std::uint64_t seed = 0x5eed7e47ULL;
};

/// Single-block transformer with fixed random weights drawn from `seed`,
/// pooled at the end-of-text position. Words map to ids by hashing.
class ReferenceTextEncoder final : public TextEncoder {
 public:
  explicit ReferenceTextEncoder(TextEncoderConfig config = {});

  int token_dim() const override { return config_.token_dim; }
  int output_dim() const override { return config_.output_dim; }
  std::vector<int> tokenize(std::string_view text, bool markers = true) const override;
  nn::Tensor token_embeddings(std::span<const int> ids) const override;
  nn::Var encode_embeddings(const nn::Var& tokens) const override;
  std::uint64_t weights_hash() const override { return params_.hash(); }

  const TextEncoderConfig& config() const { return config_; }
  const nn::ParameterSet& parameters() const { return params_; }

  static constexpr int kStartToken = 0;
  static constexpr int kEndToken = 1;

 private:
  TextEncoderConfig config_;
  nn::ParameterSet params_;
  nn::Var vocab_, positions_;
  nn::Linear wq_, wk_, wv_, wo_, mlp_in_, mlp_out_, proj_;
};

struct CropCnnConfig {
  int input_size = 32;                 // crops are resized to input_size x input_size
  std::vector<int> channels = {16, 32, 64};  // one stride-2 3x3 conv per entry
  int output_dim = 64;
};

/// Small convolutional crop embedder: strided convs, global pooling, linear projection.
class CropCnn {
 public:
  CropCnn(CropCnnConfig config, nn::Rng& rng, const std::string& prefix = "cnn");

  /// [N, S, S, 3] -> [N, output_dim], unnormalized.
  nn::Var forward(const nn::Var& batch) const;
  /// Stacks resized crops into a batch tensor.
  nn::Tensor prepare(std::span<const cv::Mat> crops) const;

  const CropCnnConfig& config() const { return config_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

 private:
  CropCnnConfig config_;
  nn::ParameterSet params_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear proj_;
};

/// Frozen image-side encoder paired with the text encoder for prompt pre-training.
class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual int output_dim() const = 0;
  /// One L2-normalized row per crop, [N, output_dim].
  virtual nn::Tensor embed(std::span<const cv::Mat> crops) const = 0;
  virtual std::uint64_t weights_hash() const = 0;
};

class ReferenceImageEncoder final : public ImageEncoder {
 public:
  explicit ReferenceImageEncoder(CropCnnConfig config, std::uint64_t seed = 0x1a6e5eedULL);
  int output_dim() const override { return net_.config().output_dim; }
  nn::Tensor embed(std::span<const cv::Mat> crops) const override;
  std::uint64_t weights_hash() const override { return net_.parameters().hash(); }

 private:
  CropCnn net_;
};

/// Frozen re-identification model applied to ground-truth crops.
class TeacherEmbedder {
 public:
  virtual ~TeacherEmbedder() = default;
  virtual int output_dim() const = 0;
  /// One L2-normalized row per crop, [N, output_dim]. Never tracked by autograd.
  virtual nn::Tensor embed(std::span<const cv::Mat> crops) const = 0;
  virtual std::uint64_t weights_hash() const = 0;
};

/// CropCnn-backed teacher with an identity classifier used only while it is trained.
class CnnTeacher final : public TeacherEmbedder {
 public:
  CnnTeacher(CropCnnConfig config, int num_identities, std::uint64_t seed);

  int output_dim() const override { return net_.config().output_dim; }
  nn::Tensor embed(std::span<const cv::Mat> crops) const override;
  std::uint64_t weights_hash() const override;

  CropCnn& net() { return net_; }
  const CropCnn& net() const { return net_; }
  const nn::Linear& classifier() const { return classifier_; }
  int num_identities() const { return num_identities_; }
  /// All parameters (backbone and classifier) under "teacher.".
  std::vector<std::pair<std::string, nn::Var>> named_parameters() const;
  void freeze();
  bool frozen() const { return frozen_; }

 private:
  CropCnn net_;
  nn::ParameterSet head_params_;
  nn::Linear classifier_;
  int num_identities_;
  bool frozen_ = false;
};

}  // namespace clipvs
