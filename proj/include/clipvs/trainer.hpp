#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clipvs/checkpoint.hpp"
#include "clipvs/datamodel.hpp"
#include "clipvs/encoders.hpp"
#include "clipvs/eval.hpp"
#include "clipvs/losses.hpp"
#include "clipvs/pipeline.hpp"
#include "clipvs/prompts.hpp"

namespace clipvs {

/// Which of the five auxiliary objectives join det + reid.
struct LossToggles {
  bool sra_obj = true;
  bool sra_id = true;
  bool mil_img = true;
  bool mil_box = true;
  bool mil_fea = true;

  static LossToggles none() { return {false, false, false, false, false}; }
};

struct TrainConfig {
  bool toy_mode = false;
  BackboneConfig backbone = BackboneConfig::reference();
  ProposalConfig proposals;
  InferenceConfig inference;
  TextEncoderConfig text_encoder;
  CropCnnConfig image_encoder;  // frozen image side of stage 1
  CropCnnConfig teacher;

  int batch_size = 5;
  int max_epochs = 10;
  int steps = 0;  // 0 derives the count from max_epochs and the training-set size
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_decay_fraction = 2.0 / 3.0;  // step fraction at which lr drops
  double lr_decay_factor = 0.1;
  double clip_grad_norm = 0.0;
  std::uint64_t seed = 42;

  int rpn_batch = 256;          // sampled anchors per frame
  int sampled_regions = 128;    // sampled proposals per frame
  double foreground_fraction = 0.5;
  double foreground_iou = 0.5;

  int oim_queue_size = 500;
  double oim_momentum = 0.5;
  double oim_scale = 30.0;
  bool oim_on_pred = true;
  bool oim_on_gt = true;

  LossToggles losses;
  bool normalize_auxiliary_losses = false;  // divide summed objectives by their counts

  int prompt_epochs = 50;
  double prompt_lr = 0.01;
  int teacher_epochs = 50;
  double teacher_lr = 0.01;
  int teacher_batch = 32;

  int audit_every = 10;       // frozen-component audit period, in steps
  int checkpoint_every = 0;   // 0 = only at the end
  int max_crops_per_identity = 0;

  static TrainConfig reference();
  static TrainConfig toy();
  /// Step count after resolving `steps` against the dataset size.
  int total_steps(std::size_t train_frames) const;
  double lr_at(int step, int total) const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Starts from reference() or toy() (per "toy_mode") and overrides present keys.
TrainConfig train_config_from_json(const nlohmann::json& j);

// --- stage 1 -------------------------------------------------------------------

struct TeacherTrainResult {
  std::unique_ptr<CnnTeacher> teacher;
  std::vector<double> epoch_losses;
  std::vector<double> epoch_accuracy;  // training identity accuracy after each epoch
};

/// Identity cross-entropy on ground-truth crops, then freeze. Throws
/// TrainingError with fewer than two identities.
TeacherTrainResult pretrain_teacher(const std::vector<std::vector<cv::Mat>>& crops, const TrainConfig& config,
                                    int epochs);
TeacherTrainResult pretrain_teacher(const DatasetManifest& train, const std::filesystem::path& image_root,
                                    const TrainConfig& config, int epochs);

void save_prompt_bank(const std::filesystem::path& path, const IdentityPromptBank& bank,
                      const TextEncoderConfig& encoder);
IdentityPromptBank load_prompt_bank(const std::filesystem::path& path);
void save_teacher(const std::filesystem::path& path, const CnnTeacher& teacher, const CropCnnConfig& config);
std::unique_ptr<CnnTeacher> load_teacher(const std::filesystem::path& path);

// --- stage 2 -------------------------------------------------------------------

struct StepMetrics {
  int step = 0;
  losses::LossBundle losses;
  double lr = 0;
  double grad_norm = 0;
};
nlohmann::json to_json(const StepMetrics& m);

/// A loaded training frame: model-resolution tensor plus the teacher targets.
struct TrainingFrame {
  const FrameRecord* record = nullptr;
  nn::Tensor image;             // [1, H, W, 3] at model resolution
  std::vector<Box> boxes;       // ground truth at model resolution
  std::vector<IdentityId> identities;
  nn::Tensor teacher_targets;   // [n_gt, o]
};

struct FrozenHashes {
  std::uint64_t prompt_bank = 0;
  std::uint64_t teacher = 0;
  std::uint64_t text_encoder = 0;
  friend bool operator==(const FrozenHashes&, const FrozenHashes&) = default;
};

class Stage2Trainer {
 public:
  /// `bank` and `teacher` are frozen on entry.
  Stage2Trainer(TrainConfig config, const DatasetManifest& train, std::filesystem::path image_root,
                IdentityPromptBank bank, std::unique_ptr<CnnTeacher> teacher);
  Stage2Trainer(const Stage2Trainer&) = delete;
  Stage2Trainer& operator=(const Stage2Trainer&) = delete;

  /// One optimizer step on the deterministic batch for the current step.
  StepMetrics step();
  /// Runs until `total_steps()`; metrics go to `metrics_path` if non-empty.
  std::vector<StepMetrics> run(const std::filesystem::path& metrics_path = {},
                               const std::filesystem::path& checkpoint_path = {},
                               const std::function<void(const StepMetrics&)>& on_step = {});

  /// Losses of one frame batch without updating anything (for audits and tests).
  losses::LossBundle evaluate_losses(std::span<const int> frame_indices);
  std::vector<int> batch_for_step(int step) const;

  FrozenHashes frozen_hashes() const;
  /// Throws TrainingError when a frozen component changed since construction.
  void audit_frozen() const;

  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores model, optimizer, lookup table and step from `path`.
  void resume(const std::filesystem::path& path);

  int current_step() const { return step_; }
  int total_steps() const { return total_steps_; }
  const TrainConfig& config() const { return config_; }
  VehicleSearchModel& model() { return *model_; }
  const VehicleSearchModel& model() const { return *model_; }
  const losses::IdentityLookupTable& lookup_table() const { return table_; }
  const IdentityPromptBank& prompt_bank() const { return bank_; }
  const CnnTeacher& teacher() const { return *teacher_; }
  const ObjectPrompts& object_prompts() const { return object_prompts_; }
  const ReferenceTextEncoder& text_encoder() const { return text_encoder_; }

 private:
  struct FrameLoss;
  FrameLoss frame_loss(const TrainingFrame& frame, std::uint64_t stream);
  const TrainingFrame& frame(int index);

  TrainConfig config_;
  DatasetManifest train_;
  std::filesystem::path image_root_;
  IdentityPromptBank bank_;
  std::unique_ptr<CnnTeacher> teacher_;
  ReferenceTextEncoder text_encoder_;
  ObjectPrompts object_prompts_;
  std::unique_ptr<VehicleSearchModel> model_;
  std::unique_ptr<nn::Sgd> optimizer_;
  losses::IdentityLookupTable table_;
  std::vector<std::optional<TrainingFrame>> cache_;
  FrozenHashes frozen_;
  int step_ = 0;
  int total_steps_ = 0;
};

/// Model plus configuration, as stored in a stage-2 checkpoint.
struct LoadedModel {
  TrainConfig config;
  std::unique_ptr<VehicleSearchModel> model;
  int step = 0;
};
LoadedModel load_model(const std::filesystem::path& checkpoint);

/// Resizes a frame to model resolution, returning the tensor and (sx, sy).
std::pair<nn::Tensor, std::pair<double, double>> prepare_frame(const cv::Mat& image, const BackboneConfig& config);

// --- search ----------------------------------------------------------------------

struct SearchOptions {
  bool skip_missing = false;
  EvalOptions eval;
};

struct SearchResult {
  Gallery gallery;  // boxes in original frame coordinates
  std::vector<QueryEmbedding> queries;
  std::vector<RankedResult> rankings;
  EvalReport report;
  std::vector<std::string> missing;  // unreadable images that were skipped
};

/// Detects on every gallery frame, embeds query crops (read from `query_root`),
/// ranks and evaluates. Throws InputError listing unreadable images unless
/// skip_missing is set.
SearchResult run_search(const VehicleSearchModel& model, const std::vector<QueryRecord>& queries,
                        const DatasetManifest& gallery, const std::filesystem::path& image_root,
                        const std::filesystem::path& query_root, const SearchOptions& options = {});
SearchResult run_search(const std::filesystem::path& checkpoint, const std::vector<QueryRecord>& queries,
                        const DatasetManifest& gallery, const std::filesystem::path& image_root,
                        const std::filesystem::path& query_root, const SearchOptions& options = {});

/// Query embedding of a crop taken at frame resolution, rescaled to model resolution.
QueryEmbedding embed_query(const VehicleSearchModel& model, const QueryRecord& query, const cv::Mat& crop,
                           const FrameRecord& source_frame);

}  // namespace clipvs
