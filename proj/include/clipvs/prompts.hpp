#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "clipvs/datamodel.hpp"
#include "clipvs/encoders.hpp"

namespace clipvs {

inline constexpr const char* kForegroundPrompt = "A photo of a vehicle";
inline constexpr const char* kBackgroundPrompt = "Not a photo of a vehicle";

struct ObjectPrompts {
  std::string foreground_text = kForegroundPrompt;
  std::string background_text = kBackgroundPrompt;
  nn::Tensor t_fore;  // [text_dim]
  nn::Tensor t_back;  // [text_dim]
  std::uint64_t encoder_hash = 0;
};

/// Encodes the two fixed object-granularity prompts. Throws SpecError when
/// the encoder produces a non-finite or zero vector.
ObjectPrompts build_object_prompts(const TextEncoder& encoder);

inline constexpr int kDefaultContextTokens = 4;

/// A piece of the identity prompt: fixed words, or a learnable slot.
struct TemplatePiece {
  enum class Kind { kWords, kContext, kColor, kType } kind = Kind::kWords;
  std::string words;  // for kWords
  int index = 0;      // context slot index for kContext
};

/// "A photo of a [X]1 ... [X]M vehicle with [X] color and [X] type".
std::vector<TemplatePiece> identity_template(int num_context_tokens);
std::string render_template(int num_context_tokens);

/// Learnable per-identity prompt tokens. Row c of each tensor belongs to identity c+1.
struct IdentityPromptBank {
  int num_identities = 0;
  int num_context_tokens = kDefaultContextTokens;  // M
  int token_dim = 0;
  nn::Var context_tokens;  // [C, M, token_dim]
  nn::Var color_tokens;    // [C, token_dim]
  nn::Var type_tokens;     // [C, token_dim]
  /// Optional fixed attribute words per identity; empty strings keep the learnable slot.
  std::vector<std::string> color_words;
  std::vector<std::string> type_words;
  nn::Tensor encoded;  // [C, text_dim]

  /// Tokens drawn from N(0, init_std^2).
  static IdentityPromptBank create(int num_identities, int token_dim, nn::Rng& rng, double init_std = 0.02,
                                   int num_context_tokens = kDefaultContextTokens);
  /// Hash over tokens and encoded rows.
  std::uint64_t hash() const;
  void freeze();
};

/// Token sequence for identity `index` (0-based): frozen template rows with the
/// identity's slots spliced in. Differentiable w.r.t. the bank's token tensors.
nn::Var prompt_token_sequence(const IdentityPromptBank& bank, int index, const TextEncoder& encoder);
/// Token ids of the rendered sequence with -1 at learnable slots.
std::vector<int> prompt_token_ids(const IdentityPromptBank& bank, int index, const TextEncoder& encoder);

/// One encoded row per identity, [C, text_dim]. Does not modify the bank.
nn::Tensor encode_bank(const IdentityPromptBank& bank, const TextEncoder& encoder);

struct PromptTrainConfig {
  int epochs = 50;
  double lr = 0.01;
  double momentum = 0.9;
  double init_std = 0.02;
  int batch_identities = 0;  // identities per step; 0 = all
  int num_context_tokens = kDefaultContextTokens;
  std::uint64_t seed = 7;
};

struct PromptTrainResult {
  IdentityPromptBank bank;
  double initial_loss = 0;
  std::vector<double> epoch_losses;  // loss at the end of each epoch, all identities
  std::vector<IdentityId> excluded;  // identities without crops
};

/// Symmetric image-text contrastive loss over the given identities, with its
/// logits built in the autograd graph. `image_embeddings` are unit rows with
/// `crop_index` giving each row's bank index.
nn::Var prompt_contrastive_loss(const IdentityPromptBank& bank, const TextEncoder& encoder,
                                const nn::Tensor& image_embeddings, std::span<const int> crop_index,
                                std::span<const int> identities);

/// Stage-1 token learning. `crops[c]` holds the ground-truth crops of identity c+1.
PromptTrainResult pretrain_id_tokens(const std::vector<std::vector<cv::Mat>>& crops, const ImageEncoder& image_encoder,
                                     const TextEncoder& text_encoder, const PromptTrainConfig& config);
PromptTrainResult pretrain_id_tokens(const DatasetManifest& train, const std::filesystem::path& image_root,
                                     const ImageEncoder& image_encoder, const TextEncoder& text_encoder,
                                     const PromptTrainConfig& config, int max_crops_per_identity = 0);

}  // namespace clipvs
