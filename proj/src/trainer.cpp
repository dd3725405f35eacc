#include "clipvs/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "clipvs/errors.hpp"
#include "clipvs/image.hpp"

namespace clipvs {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::RowMatrix;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

json crop_cnn_json(const CropCnnConfig& c) {
  return {{"input_size", c.input_size}, {"channels", c.channels}, {"output_dim", c.output_dim}};
}

CropCnnConfig crop_cnn_from_json(const json& j, CropCnnConfig c) {
  c.input_size = j.value("input_size", c.input_size);
  c.channels = j.value("channels", c.channels);
  c.output_dim = j.value("output_dim", c.output_dim);
  return c;
}

json text_encoder_json(const TextEncoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"token_dim", c.token_dim}, {"output_dim", c.output_dim},
          {"max_length", c.max_length}, {"seed", c.seed}};
}

TextEncoderConfig text_encoder_from_json(const json& j, TextEncoderConfig c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.token_dim = j.value("token_dim", c.token_dim);
  c.output_dim = j.value("output_dim", c.output_dim);
  c.max_length = j.value("max_length", c.max_length);
  c.seed = j.value("seed", c.seed);
  return c;
}

nn::Tensor vector_tensor(const Eigen::VectorXd& v) {
  return nn::Tensor({static_cast<int>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

nn::Tensor matrix_tensor(const RowMatrix& m, const nn::Shape& shape) { return nn::Tensor::from_matrix(m).reshaped(shape); }

nn::Var constant(double v) { return nn::Var(nn::Tensor({1}, v)); }

}  // namespace

// --- configuration ---------------------------------------------------------------

TrainConfig TrainConfig::reference() {
  TrainConfig c;
  c.backbone = BackboneConfig::reference();
  c.text_encoder.output_dim = c.backbone.text_dim;
  c.image_encoder = {64, {32, 64, 128, 256}, c.backbone.text_dim};
  c.teacher = {64, {32, 64, 128, 256}, c.backbone.embedding_dim};
  return c;
}

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.toy_mode = true;
  c.backbone = BackboneConfig::toy();
  c.proposals = {300, 64, 300, 32, 0.7, 1.0};
  c.inference = {0.5, 0.4, 20};
  c.text_encoder.output_dim = c.backbone.text_dim;
  c.image_encoder = {32, {16, 32, 64}, c.backbone.text_dim};
  c.teacher = {32, {16, 32, 64}, c.backbone.embedding_dim};
  c.batch_size = 2;
  c.steps = 500;
  c.lr = 0.01;
  c.clip_grad_norm = 10.0;
  c.rpn_batch = 64;
  c.sampled_regions = 32;
  c.oim_queue_size = 32;
  return c;
}

int TrainConfig::total_steps(std::size_t train_frames) const {
  if (steps > 0) return steps;
  const auto per_epoch = (train_frames + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
  return static_cast<int>(per_epoch) * max_epochs;
}

double TrainConfig::lr_at(int step, int total) const {
  return step >= static_cast<int>(std::floor(lr_decay_fraction * total)) ? lr * lr_decay_factor : lr;
}

json to_json(const TrainConfig& c) {
  return {{"toy_mode", c.toy_mode},
          {"backbone", to_json(c.backbone)},
          {"proposals",
           {{"pre_nms_train", c.proposals.pre_nms_train},
            {"post_nms_train", c.proposals.post_nms_train},
            {"pre_nms_eval", c.proposals.pre_nms_eval},
            {"post_nms_eval", c.proposals.post_nms_eval},
            {"nms_threshold", c.proposals.nms_threshold},
            {"min_size", c.proposals.min_size}}},
          {"inference",
           {{"score_threshold", c.inference.score_threshold},
            {"nms_threshold", c.inference.nms_threshold},
            {"max_detections", c.inference.max_detections}}},
          {"text_encoder", text_encoder_json(c.text_encoder)},
          {"image_encoder", crop_cnn_json(c.image_encoder)},
          {"teacher", crop_cnn_json(c.teacher)},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"steps", c.steps},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr_decay_fraction", c.lr_decay_fraction},
          {"lr_decay_factor", c.lr_decay_factor},
          {"clip_grad_norm", c.clip_grad_norm},
          {"seed", c.seed},
          {"rpn_batch", c.rpn_batch},
          {"sampled_regions", c.sampled_regions},
          {"foreground_fraction", c.foreground_fraction},
          {"foreground_iou", c.foreground_iou},
          {"oim_queue_size", c.oim_queue_size},
          {"oim_momentum", c.oim_momentum},
          {"oim_scale", c.oim_scale},
          {"oim_on_pred", c.oim_on_pred},
          {"oim_on_gt", c.oim_on_gt},
          {"losses",
           {{"sra_obj", c.losses.sra_obj},
            {"sra_id", c.losses.sra_id},
            {"mil_img", c.losses.mil_img},
            {"mil_box", c.losses.mil_box},
            {"mil_fea", c.losses.mil_fea}}},
          {"normalize_auxiliary_losses", c.normalize_auxiliary_losses},
          {"prompt_epochs", c.prompt_epochs},
          {"prompt_lr", c.prompt_lr},
          {"teacher_epochs", c.teacher_epochs},
          {"teacher_lr", c.teacher_lr},
          {"teacher_batch", c.teacher_batch},
          {"audit_every", c.audit_every},
          {"checkpoint_every", c.checkpoint_every},
          {"max_crops_per_identity", c.max_crops_per_identity}};
}

TrainConfig train_config_from_json(const json& j) {
  static const std::set<std::string> kKnown = {
      "toy_mode", "backbone", "proposals", "inference", "text_encoder", "image_encoder", "teacher", "batch_size",
      "max_epochs", "steps", "lr", "momentum", "weight_decay", "lr_decay_fraction", "lr_decay_factor",
      "clip_grad_norm", "seed", "rpn_batch", "sampled_regions", "foreground_fraction", "foreground_iou",
      "oim_queue_size", "oim_momentum", "oim_scale", "oim_on_pred", "oim_on_gt", "losses",
      "normalize_auxiliary_losses", "prompt_epochs", "prompt_lr", "teacher_epochs", "teacher_lr", "teacher_batch",
      "audit_every", "checkpoint_every", "max_crops_per_identity"};
  if (!j.is_object()) throw SpecError("train config: expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!kKnown.count(k)) throw SpecError("train config: unknown key '" + k + "'");
  try {
    TrainConfig c = j.value("toy_mode", false) ? TrainConfig::toy() : TrainConfig::reference();
    if (j.contains("backbone")) {
      c.backbone = backbone_config_from_json(j.at("backbone"));
      if (!j.contains("text_encoder")) c.text_encoder.output_dim = c.backbone.text_dim;
    }
    if (j.contains("proposals")) {
      const auto& p = j.at("proposals");
      c.proposals.pre_nms_train = p.value("pre_nms_train", c.proposals.pre_nms_train);
      c.proposals.post_nms_train = p.value("post_nms_train", c.proposals.post_nms_train);
      c.proposals.pre_nms_eval = p.value("pre_nms_eval", c.proposals.pre_nms_eval);
      c.proposals.post_nms_eval = p.value("post_nms_eval", c.proposals.post_nms_eval);
      c.proposals.nms_threshold = p.value("nms_threshold", c.proposals.nms_threshold);
      c.proposals.min_size = p.value("min_size", c.proposals.min_size);
    }
    if (j.contains("inference")) {
      const auto& p = j.at("inference");
      c.inference.score_threshold = p.value("score_threshold", c.inference.score_threshold);
      c.inference.nms_threshold = p.value("nms_threshold", c.inference.nms_threshold);
      c.inference.max_detections = p.value("max_detections", c.inference.max_detections);
    }
    if (j.contains("text_encoder")) c.text_encoder = text_encoder_from_json(j.at("text_encoder"), c.text_encoder);
    if (j.contains("image_encoder")) c.image_encoder = crop_cnn_from_json(j.at("image_encoder"), c.image_encoder);
    if (j.contains("teacher")) c.teacher = crop_cnn_from_json(j.at("teacher"), c.teacher);
#define CLIPVS_FIELD(name) c.name = j.value(#name, c.name)
    CLIPVS_FIELD(batch_size);
    CLIPVS_FIELD(max_epochs);
    CLIPVS_FIELD(steps);
    CLIPVS_FIELD(lr);
    CLIPVS_FIELD(momentum);
    CLIPVS_FIELD(weight_decay);
    CLIPVS_FIELD(lr_decay_fraction);
    CLIPVS_FIELD(lr_decay_factor);
    CLIPVS_FIELD(clip_grad_norm);
    CLIPVS_FIELD(seed);
    CLIPVS_FIELD(rpn_batch);
    CLIPVS_FIELD(sampled_regions);
    CLIPVS_FIELD(foreground_fraction);
    CLIPVS_FIELD(foreground_iou);
    CLIPVS_FIELD(oim_queue_size);
    CLIPVS_FIELD(oim_momentum);
    CLIPVS_FIELD(oim_scale);
    CLIPVS_FIELD(oim_on_pred);
    CLIPVS_FIELD(oim_on_gt);
    CLIPVS_FIELD(normalize_auxiliary_losses);
    CLIPVS_FIELD(prompt_epochs);
    CLIPVS_FIELD(prompt_lr);
    CLIPVS_FIELD(teacher_epochs);
    CLIPVS_FIELD(teacher_lr);
    CLIPVS_FIELD(teacher_batch);
    CLIPVS_FIELD(audit_every);
    CLIPVS_FIELD(checkpoint_every);
    CLIPVS_FIELD(max_crops_per_identity);
#undef CLIPVS_FIELD
    if (j.contains("losses")) {
      const auto& l = j.at("losses");
      c.losses.sra_obj = l.value("sra_obj", c.losses.sra_obj);
      c.losses.sra_id = l.value("sra_id", c.losses.sra_id);
      c.losses.mil_img = l.value("mil_img", c.losses.mil_img);
      c.losses.mil_box = l.value("mil_box", c.losses.mil_box);
      c.losses.mil_fea = l.value("mil_fea", c.losses.mil_fea);
    }
    if (c.batch_size < 1 || c.sampled_regions < 1 || c.rpn_batch < 1 || c.steps < 0 || c.max_epochs < 0)
      throw SpecError("train config: batch_size, sampled_regions and rpn_batch must be positive");
    return c;
  } catch (const json::exception& e) {
    throw SpecError(std::string("train config: ") + e.what());
  }
}

// --- stage 1 -------------------------------------------------------------------

TeacherTrainResult pretrain_teacher(const std::vector<std::vector<cv::Mat>>& crops, const TrainConfig& config,
                                    int epochs) {
  const int c_count = static_cast<int>(crops.size());
  int with_crops = 0;
  for (const auto& l : crops) with_crops += l.empty() ? 0 : 1;
  if (with_crops < 2)
    throw TrainingError("pretrain_teacher: needs at least 2 identities with crops, got " + std::to_string(with_crops));
  if (epochs < 0) throw ContractError("pretrain_teacher: negative epoch count");

  TeacherTrainResult result;
  result.teacher = std::make_unique<CnnTeacher>(config.teacher, c_count, mix(config.seed, 0x7eac));
  CnnTeacher& t = *result.teacher;

  std::vector<cv::Mat> all;
  std::vector<int> labels;
  for (int c = 0; c < c_count; ++c)
    for (const auto& m : crops[static_cast<std::size_t>(c)]) {
      all.push_back(m);
      labels.push_back(c);
    }
  const nn::Tensor batch = t.net().prepare(all);
  const int n = static_cast<int>(all.size());
  const std::size_t per = batch.size() / static_cast<std::size_t>(n);

  auto gather = [&](std::span<const int> idx) {
    nn::Shape shape = batch.shape();
    shape[0] = static_cast<int>(idx.size());
    nn::Tensor out(shape);
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy_n(batch.data() + static_cast<std::size_t>(idx[k]) * per, per, out.data() + k * per);
    return out;
  };
  // Mean cross-entropy of a minibatch, with its gradient spliced onto the logits.
  auto loss_of = [&](std::span<const int> idx, int* correct) {
    const nn::Var logits = t.classifier()(t.net().forward(nn::Var(gather(idx))));
    const RowMatrix z = logits.value().matrix(static_cast<int>(idx.size()));
    RowMatrix grad(z.rows(), z.cols());
    double value = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      Eigen::RowVectorXd g;
      const int y = labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      value += losses::softmax_cross_entropy(z.row(i), y, &g);
      grad.row(i) = g / static_cast<double>(z.rows());
      if (correct) {
        Eigen::Index arg = 0;
        z.row(i).maxCoeff(&arg);
        *correct += arg == y;
      }
    }
    value /= static_cast<double>(z.rows());
    return nn::scalar_with_grads(value, {logits}, {matrix_tensor(grad, logits.shape())});
  };

  nn::Sgd opt(t.named_parameters(), {config.teacher_lr, 0.9, 5e-4, 0.0});
  nn::Rng rng(mix(config.seed, 0x7eac + 1));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const int bs = std::max(1, config.teacher_batch);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
    for (int start = 0; start < n; start += bs) {
      const int stop = std::min(n, start + bs);
      opt.zero_grad();
      nn::Var loss = loss_of(std::span<const int>(order.data() + start, static_cast<std::size_t>(stop - start)), nullptr);
      if (!std::isfinite(loss.value()[0])) throw TrainingError("pretrain_teacher: non-finite loss");
      loss.backward();
      opt.step();
    }
    nn::NoGradGuard no_grad;
    std::vector<int> all_idx(static_cast<std::size_t>(n));
    std::iota(all_idx.begin(), all_idx.end(), 0);
    int correct = 0;
    result.epoch_losses.push_back(loss_of(all_idx, &correct).value()[0]);
    result.epoch_accuracy.push_back(static_cast<double>(correct) / n);
  }
  opt.zero_grad();
  t.freeze();
  return result;
}

TeacherTrainResult pretrain_teacher(const DatasetManifest& train, const fs::path& image_root, const TrainConfig& config,
                                    int epochs) {
  return pretrain_teacher(collect_identity_crops(train, image_root, config.max_crops_per_identity), config, epochs);
}

void save_prompt_bank(const fs::path& path, const IdentityPromptBank& bank, const TextEncoderConfig& encoder) {
  Archive a;
  a.meta = {{"kind", "prompt_bank"},
            {"num_identities", bank.num_identities},
            {"num_context_tokens", bank.num_context_tokens},
            {"token_dim", bank.token_dim},
            {"color_words", bank.color_words},
            {"type_words", bank.type_words},
            {"text_encoder", text_encoder_json(encoder)}};
  a.put("prompt_bank.context", bank.context_tokens.value());
  a.put("prompt_bank.color", bank.color_tokens.value());
  a.put("prompt_bank.type", bank.type_tokens.value());
  a.put("prompt_bank.encoded", bank.encoded);
  save_archive(path, a);
}

namespace {

IdentityPromptBank bank_from_archive(const Archive& a) {
  IdentityPromptBank b;
  try {
    const auto& m = a.meta;
    b.num_identities = m.at("num_identities").get<int>();
    b.num_context_tokens = m.at("num_context_tokens").get<int>();
    b.token_dim = m.at("token_dim").get<int>();
    b.color_words = m.at("color_words").get<std::vector<std::string>>();
    b.type_words = m.at("type_words").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("prompt bank: ") + e.what());
  }
  b.context_tokens = nn::Var(a.get("prompt_bank.context"));
  b.color_tokens = nn::Var(a.get("prompt_bank.color"));
  b.type_tokens = nn::Var(a.get("prompt_bank.type"));
  b.encoded = a.get("prompt_bank.encoded");
  const nn::Shape ctx{b.num_identities, b.num_context_tokens, b.token_dim};
  if (b.context_tokens.shape() != ctx || b.color_tokens.shape() != nn::Shape{b.num_identities, b.token_dim} ||
      b.type_tokens.shape() != nn::Shape{b.num_identities, b.token_dim} || b.encoded.rank() != 2 ||
      b.encoded.dim(0) != b.num_identities)
    throw IntegrityError("prompt bank: tensor shapes disagree with the recorded C, M, token_dim");
  return b;
}

void put_teacher(Archive& a, const CnnTeacher& teacher) {
  for (const auto& [name, v] : teacher.named_parameters()) a.put(name, v.value());
}

void load_teacher_values(const Archive& a, CnnTeacher& teacher) {
  for (const auto& [name, v] : teacher.named_parameters()) {
    const nn::Tensor& t = a.get(name);
    if (t.shape() != v.shape()) throw IntegrityError("teacher: tensor '" + name + "' has the wrong shape");
    nn::Var p = v;
    p.mutable_value() = t;
  }
}

}  // namespace

IdentityPromptBank load_prompt_bank(const fs::path& path) {
  const Archive a = load_archive(path);
  if (a.meta.value("kind", "") != "prompt_bank") throw IntegrityError(path.string() + " is not a prompt bank archive");
  return bank_from_archive(a);
}

void save_teacher(const fs::path& path, const CnnTeacher& teacher, const CropCnnConfig& config) {
  Archive a;
  a.meta = {{"kind", "teacher"}, {"num_identities", teacher.num_identities()}, {"config", crop_cnn_json(config)}};
  put_teacher(a, teacher);
  save_archive(path, a);
}

std::unique_ptr<CnnTeacher> load_teacher(const fs::path& path) {
  const Archive a = load_archive(path);
  if (a.meta.value("kind", "") != "teacher") throw IntegrityError(path.string() + " is not a teacher archive");
  const CropCnnConfig config = crop_cnn_from_json(a.meta.at("config"), {});
  auto t = std::make_unique<CnnTeacher>(config, a.meta.at("num_identities").get<int>(), 0);
  load_teacher_values(a, *t);
  t->freeze();
  return t;
}

// --- stage 2 -------------------------------------------------------------------

json to_json(const StepMetrics& m) {
  json j = {{"step", m.step}};
  const auto values = m.losses.components();
  for (std::size_t i = 0; i < values.size(); ++i) j[std::string(losses::LossBundle::kNames[i])] = values[i];
  j["total"] = m.losses.total;
  j["lr"] = m.lr;
  j["grad_norm"] = m.grad_norm;
  return j;
}

std::pair<nn::Tensor, std::pair<double, double>> prepare_frame(const cv::Mat& image, const BackboneConfig& config) {
  if (image.empty()) throw InputError("prepare_frame: empty image");
  const double sx = static_cast<double>(config.image_width) / image.cols;
  const double sy = static_cast<double>(config.image_height) / image.rows;
  if (image.cols == config.image_width && image.rows == config.image_height) return {to_tensor(image), {1.0, 1.0}};
  return {to_tensor(image, config.image_height, config.image_width), {sx, sy}};
}

struct Stage2Trainer::FrameLoss {
  nn::Var det, reid, sra_obj, sra_id, mil_img, mil_box, mil_fea;
  RowMatrix oim_embeddings;
  std::vector<IdentityId> oim_labels;
};

Stage2Trainer::Stage2Trainer(TrainConfig config, const DatasetManifest& train, fs::path image_root,
                             IdentityPromptBank bank, std::unique_ptr<CnnTeacher> teacher)
    : config_(std::move(config)),
      train_(train),
      image_root_(std::move(image_root)),
      bank_(std::move(bank)),
      teacher_(std::move(teacher)),
      text_encoder_(config_.text_encoder),
      object_prompts_(build_object_prompts(text_encoder_)) {
  const auto& bb = config_.backbone;
  bb.validate();
  if (!teacher_) throw ContractError("stage 2: teacher required");
  if (train_.frames.empty()) throw ContractError("stage 2: empty training manifest");
  if (bank_.num_identities != train_.num_identities)
    throw ContractError("stage 2: prompt bank has " + std::to_string(bank_.num_identities) + " identities, manifest " +
                        std::to_string(train_.num_identities));
  if (bank_.encoded.rank() != 2 || bank_.encoded.dim(1) != bb.text_dim || text_encoder_.output_dim() != bb.text_dim)
    throw ContractError("stage 2: text embeddings must have the backbone's text_dim " + std::to_string(bb.text_dim));
  if (teacher_->output_dim() != bb.embedding_dim)
    throw ContractError("stage 2: teacher output " + std::to_string(teacher_->output_dim()) +
                        " differs from embedding_dim " + std::to_string(bb.embedding_dim));
  bank_.freeze();
  teacher_->freeze();

  model_ = std::make_unique<VehicleSearchModel>(bb, train_.num_identities, mix(config_.seed, 1), config_.proposals,
                                                config_.inference);
  std::vector<std::pair<std::string, nn::Var>> trainable;
  for (const auto& e : model_->parameters().entries())
    if (e.second.requires_grad()) trainable.push_back(e);
  optimizer_ = std::make_unique<nn::Sgd>(
      trainable, nn::SgdOptions{config_.lr, config_.momentum, config_.weight_decay, config_.clip_grad_norm});
  nn::Rng rng(mix(config_.seed, 2));
  table_ = losses::IdentityLookupTable::create(train_.num_identities, config_.oim_queue_size, bb.embedding_dim,
                                               {config_.oim_momentum, config_.oim_scale}, rng);
  cache_.resize(train_.frames.size());
  total_steps_ = config_.total_steps(train_.frames.size());
  frozen_ = frozen_hashes();
}

FrozenHashes Stage2Trainer::frozen_hashes() const {
  return {bank_.hash(), teacher_->weights_hash(), text_encoder_.weights_hash()};
}

void Stage2Trainer::audit_frozen() const {
  const FrozenHashes now = frozen_hashes();
  if (now.prompt_bank != frozen_.prompt_bank) throw TrainingError("frozen audit: prompt bank changed");
  if (now.teacher != frozen_.teacher) throw TrainingError("frozen audit: teacher changed");
  if (now.text_encoder != frozen_.text_encoder) throw TrainingError("frozen audit: text encoder changed");
}

std::vector<int> Stage2Trainer::batch_for_step(int step) const {
  const int n = static_cast<int>(train_.frames.size());
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 rng(mix(config_.seed, 0x5000000ULL + static_cast<std::uint64_t>(step)));
  const int k = std::min(n, config_.batch_size);
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(n - i));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  all.resize(static_cast<std::size_t>(k));
  return all;
}

const TrainingFrame& Stage2Trainer::frame(int index) {
  auto& slot = cache_.at(static_cast<std::size_t>(index));
  if (slot) return *slot;
  const FrameRecord& rec = train_.frames[static_cast<std::size_t>(index)];
  const cv::Mat image = read_image(image_root_ / rec.image_path);
  TrainingFrame f;
  f.record = &rec;
  auto [tensor, scale] = prepare_frame(image, config_.backbone);
  f.image = std::move(tensor);
  std::vector<cv::Mat> crops;
  for (const auto& a : rec.annotations) {
    f.boxes.push_back(a.box.scaled(scale.first, scale.second));
    f.identities.push_back(a.identity);
    crops.push_back(crop(image, a.box));
  }
  if (!crops.empty()) f.teacher_targets = teacher_->embed(crops);
  slot = std::move(f);
  return *slot;
}

namespace {

// Detection-style loss over regions, as a graph node on (logits, deltas).
nn::Var detection_var(const nn::Var& logits, const nn::Var& deltas, std::span<const int> labels,
                      const RowMatrix& targets) {
  const int n = static_cast<int>(labels.size());
  if (n == 0) return constant(0.0);
  const Eigen::VectorXd z = Eigen::Map<const Eigen::VectorXd>(logits.value().data(), n);
  const RowMatrix d = deltas.value().matrix(n);
  const losses::DetectionLoss l = losses::detection_loss(z, d, labels, targets);
  return nn::scalar_with_grads(l.value, {logits, deltas},
                               {vector_tensor(l.grad_logits), matrix_tensor(l.grad_deltas, deltas.shape())});
}

struct Match {
  std::vector<int> gt;  // matched ground-truth index or -1
  std::vector<double> best;
};

Match match_boxes(std::span<const Box> boxes, std::span<const Box> gt) {
  Match m;
  for (const auto& b : boxes) {
    int arg = -1;
    double best = 0;
    if (b.valid())
      for (std::size_t g = 0; g < gt.size(); ++g) {
        const double v = iou(b, gt[g]);
        if (v > best) {
          best = v;
          arg = static_cast<int>(g);
        }
      }
    m.gt.push_back(arg);
    m.best.push_back(best);
  }
  return m;
}

void shuffle(std::vector<int>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng() % i)]);
}

}  // namespace

Stage2Trainer::FrameLoss Stage2Trainer::frame_loss(const TrainingFrame& fr, std::uint64_t stream) {
  const VehicleSearchModel& model = *model_;
  const auto& bb = config_.backbone;
  const int h = fr.image.dim(1), w = fr.image.dim(2);
  const bool norm = config_.normalize_auxiliary_losses;
  std::mt19937_64 rng(stream);
  FrameLoss out;

  const nn::Var features = model.extract_features(fr.image);

  // Region proposal network: anchors labeled by IoU, a balanced sample supervised.
  const RpnOutput rpn = model.rpn(features);
  const Match am = match_boxes(rpn.anchors, fr.boxes);
  std::vector<int> anchor_labels(rpn.anchors.size(), losses::kIgnore);
  for (std::size_t i = 0; i < rpn.anchors.size(); ++i) {
    if (am.best[i] >= 0.7) anchor_labels[i] = losses::kForeground;
    else if (am.best[i] < 0.3) anchor_labels[i] = losses::kBackground;
  }
  for (std::size_t g = 0; g < fr.boxes.size(); ++g) {
    double best = 0;
    for (std::size_t i = 0; i < rpn.anchors.size(); ++i)
      if (am.gt[i] == static_cast<int>(g)) best = std::max(best, am.best[i]);
    for (std::size_t i = 0; i < rpn.anchors.size(); ++i)
      if (best > 0 && am.gt[i] == static_cast<int>(g) && am.best[i] == best) anchor_labels[i] = losses::kForeground;
  }
  {
    std::vector<int> fg, bg;
    for (std::size_t i = 0; i < anchor_labels.size(); ++i) {
      if (anchor_labels[i] == losses::kForeground) fg.push_back(static_cast<int>(i));
      if (anchor_labels[i] == losses::kBackground) bg.push_back(static_cast<int>(i));
    }
    shuffle(fg, rng);
    shuffle(bg, rng);
    const std::size_t nfg = std::min(fg.size(), static_cast<std::size_t>(config_.rpn_batch / 2));
    const std::size_t nbg = std::min(bg.size(), static_cast<std::size_t>(config_.rpn_batch) - nfg);
    for (std::size_t i = nfg; i < fg.size(); ++i) anchor_labels[static_cast<std::size_t>(fg[i])] = losses::kIgnore;
    for (std::size_t i = nbg; i < bg.size(); ++i) anchor_labels[static_cast<std::size_t>(bg[i])] = losses::kIgnore;
  }
  RowMatrix anchor_targets = RowMatrix::Zero(static_cast<Eigen::Index>(rpn.anchors.size()), 4);
  for (std::size_t i = 0; i < rpn.anchors.size(); ++i)
    if (anchor_labels[i] == losses::kForeground) {
      const auto t = encode_box(rpn.anchors[i], fr.boxes[static_cast<std::size_t>(am.gt[i])], kRpnBoxWeights);
      for (int k = 0; k < 4; ++k) anchor_targets(static_cast<Eigen::Index>(i), k) = t[static_cast<std::size_t>(k)];
    }
  nn::Var det = detection_var(rpn.logits, rpn.deltas, anchor_labels, anchor_targets);

  // Proposals plus ground truth, labeled and sampled for the detection head.
  Proposals props = model.propose_regions(rpn, h, w, true);
  std::vector<Box> candidates = props.boxes;
  candidates.insert(candidates.end(), fr.boxes.begin(), fr.boxes.end());
  const Match pm = match_boxes(candidates, fr.boxes);
  std::vector<int> fg, bg;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    (pm.best[i] >= config_.foreground_iou ? fg : bg).push_back(static_cast<int>(i));
  shuffle(fg, rng);
  shuffle(bg, rng);
  const auto budget = static_cast<std::size_t>(config_.sampled_regions);
  const std::size_t nfg = std::min(fg.size(), static_cast<std::size_t>(std::lround(budget * config_.foreground_fraction)));
  const std::size_t nbg = std::min(bg.size(), budget - nfg);
  std::vector<Box> sampled;
  std::vector<int> region_labels;
  RowMatrix region_targets = RowMatrix::Zero(static_cast<Eigen::Index>(nfg + nbg), 4);
  for (std::size_t k = 0; k < nfg; ++k) {
    const auto i = static_cast<std::size_t>(fg[k]);
    const auto t = encode_box(candidates[i], fr.boxes[static_cast<std::size_t>(pm.gt[i])], kHeadBoxWeights);
    for (int c = 0; c < 4; ++c) region_targets(static_cast<Eigen::Index>(sampled.size()), c) = t[static_cast<std::size_t>(c)];
    sampled.push_back(candidates[i]);
    region_labels.push_back(losses::kForeground);
  }
  for (std::size_t k = 0; k < nbg; ++k) {
    sampled.push_back(candidates[static_cast<std::size_t>(bg[k])]);
    region_labels.push_back(losses::kBackground);
  }
  const DetectionBranch dbranch = model.detect(model.pool(features, sampled, RegionSource::kProposal), h, w);
  det = nn::add(det, detection_var(dbranch.logits, dbranch.deltas, region_labels, region_targets));

  // Predicted boxes feed the identity head, relabeled against ground truth.
  std::vector<Box> predicted;
  for (const auto& o : dbranch.outputs)
    if (o.refined_box.valid()) predicted.push_back(o.refined_box);
  const Match qm = match_boxes(predicted, fr.boxes);
  std::vector<int> pred_labels;
  std::vector<IdentityId> pred_ids;
  RowMatrix pred_targets = RowMatrix::Zero(static_cast<Eigen::Index>(predicted.size()), 4);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool is_fg = qm.best[i] >= config_.foreground_iou;
    pred_labels.push_back(is_fg ? losses::kForeground : losses::kBackground);
    pred_ids.push_back(is_fg ? fr.identities[static_cast<std::size_t>(qm.gt[i])] : kUnlabeled);
    if (is_fg) {
      const auto t = encode_box(predicted[i], fr.boxes[static_cast<std::size_t>(qm.gt[i])], kHeadBoxWeights);
      for (int c = 0; c < 4; ++c) pred_targets(static_cast<Eigen::Index>(i), c) = t[static_cast<std::size_t>(c)];
    }
  }
  IdentityBranch pred_branch;
  if (!predicted.empty()) {
    pred_branch = model.identify(model.pool(features, predicted, RegionSource::kPredicted), h, w);
    det = nn::add(det, detection_var(pred_branch.norm_logit, pred_branch.deltas, pred_labels, pred_targets));
  }
  const IdentityBranch gt_branch =
      model.identify(model.pool(features, fr.boxes, RegionSource::kGroundTruth, fr.identities), h, w);
  out.det = det;

  // Online instance matching on foreground predicted boxes and ground-truth boxes.
  {
    std::vector<nn::Var> parts;
    std::vector<IdentityId> labels;
    std::vector<int> rows;
    if (config_.oim_on_pred && !predicted.empty()) {
      for (std::size_t i = 0; i < predicted.size(); ++i)
        if (pred_labels[i] == losses::kForeground) {
          rows.push_back(static_cast<int>(i));
          labels.push_back(pred_ids[i]);
        }
      if (!rows.empty()) parts.push_back(nn::select_rows(pred_branch.embedding, rows));
    }
    if (config_.oim_on_gt && !fr.boxes.empty()) {
      parts.push_back(gt_branch.embedding);
      labels.insert(labels.end(), fr.identities.begin(), fr.identities.end());
    }
    if (parts.empty()) {
      out.reid = constant(0.0);
    } else {
      const nn::Var emb = nn::concat_rows(parts);
      out.oim_embeddings = emb.value().matrix(emb.dim(0));
      out.oim_labels = labels;
      const losses::OimLoss l = losses::oim_forward(out.oim_embeddings, labels, table_);
      out.reid = nn::scalar_with_grads(l.value, {emb}, {matrix_tensor(l.grad, emb.shape())});
    }
  }

  // Object-granularity alignment of sampled regions against the fixed prompts.
  if (config_.losses.sra_obj && !sampled.empty()) {
    const nn::Var f = model.object_alignment_features(dbranch.pooled_vector);
    std::vector<int> obj(region_labels.size());
    for (std::size_t i = 0; i < obj.size(); ++i) obj[i] = region_labels[i] == losses::kForeground ? 1 : 0;
    const Eigen::VectorXd tf = Eigen::Map<const Eigen::VectorXd>(object_prompts_.t_fore.data(), bb.text_dim);
    const Eigen::VectorXd tb = Eigen::Map<const Eigen::VectorXd>(object_prompts_.t_back.data(), bb.text_dim);
    const losses::ScalarLoss l = losses::sra_obj_loss(f.value().matrix(f.dim(0)), obj, tf, tb, norm);
    out.sra_obj = nn::scalar_with_grads(l.value, {f}, {matrix_tensor(l.grad, f.shape())});
  } else {
    out.sra_obj = constant(0.0);
  }

  // Identity-granularity alignment of labeled ground-truth and foreground predicted boxes.
  if (config_.losses.sra_id) {
    std::vector<nn::Var> parts;
    std::vector<IdentityId> ids;
    std::vector<int> rows;
    for (std::size_t i = 0; i < fr.identities.size(); ++i)
      if (fr.identities[i] != kUnlabeled) {
        rows.push_back(static_cast<int>(i));
        ids.push_back(fr.identities[i]);
      }
    if (!rows.empty()) parts.push_back(nn::select_rows(gt_branch.pooled_vector, rows));
    rows.clear();
    for (std::size_t i = 0; i < pred_ids.size(); ++i)
      if (pred_ids[i] != kUnlabeled) {
        rows.push_back(static_cast<int>(i));
        ids.push_back(pred_ids[i]);
      }
    if (!rows.empty()) parts.push_back(nn::select_rows(pred_branch.pooled_vector, rows));
    if (parts.empty()) {
      out.sra_id = constant(0.0);
    } else {
      const nn::Var f = model.identity_alignment_features(nn::concat_rows(parts));
      const RowMatrix text = bank_.encoded.matrix(bank_.num_identities);
      const losses::ScalarLoss l =
          losses::sra_id_loss(f.value().matrix(f.dim(0)), ids, text, text_encoder_.logit_scale(), norm);
      out.sra_id = nn::scalar_with_grads(l.value, {f}, {matrix_tensor(l.grad, f.shape())});
    }
  } else {
    out.sra_id = constant(0.0);
  }

  // Image-level multi-label identification.
  if (config_.losses.mil_img) {
    const nn::Var logits = model.multi_label_logits(features);
    RowMatrix targets = RowMatrix::Zero(1, train_.num_identities);
    for (IdentityId y : fr.identities)
      if (y != kUnlabeled) targets(0, y - 1) = 1.0;
    const losses::ScalarLoss l = losses::mil_img_loss(logits.value().matrix(1), targets, norm);
    out.mil_img = nn::scalar_with_grads(l.value, {logits}, {matrix_tensor(l.grad, logits.shape())});
  } else {
    out.mil_img = constant(0.0);
  }

  // Box-level identity classification of ground-truth boxes.
  if (config_.losses.mil_box && !fr.boxes.empty()) {
    const nn::Var logits = model.single_label_logits(gt_branch.pooled_vector);
    const losses::BoxClassLoss l = losses::mil_box_loss(logits.value().matrix(logits.dim(0)), fr.identities, norm);
    out.mil_box = nn::scalar_with_grads(l.value, {logits}, {matrix_tensor(l.grad, logits.shape())});
  } else {
    out.mil_box = constant(0.0);
  }

  // Feature-level distillation toward the frozen teacher.
  if (config_.losses.mil_fea && !fr.boxes.empty()) {
    const nn::Var& student = gt_branch.embedding;
    const RowMatrix teacher = fr.teacher_targets.matrix(fr.teacher_targets.dim(0));
    const losses::ScalarLoss l = losses::mil_fea_loss(student.value().matrix(student.dim(0)), teacher, norm);
    out.mil_fea = nn::scalar_with_grads(l.value, {student}, {matrix_tensor(l.grad, student.shape())});
  } else {
    out.mil_fea = constant(0.0);
  }
  return out;
}

losses::LossBundle Stage2Trainer::evaluate_losses(std::span<const int> frame_indices) {
  nn::NoGradGuard no_grad;
  std::array<double, 7> sums{};
  for (int i : frame_indices) {
    const FrameLoss fl = frame_loss(frame(i), mix(config_.seed, 0xe7a1ULL + static_cast<std::uint64_t>(i)));
    const nn::Var* parts[] = {&fl.det, &fl.reid, &fl.sra_obj, &fl.sra_id, &fl.mil_img, &fl.mil_box, &fl.mil_fea};
    for (std::size_t k = 0; k < 7; ++k) sums[k] += parts[k]->value()[0];
  }
  const double inv = frame_indices.empty() ? 0.0 : 1.0 / static_cast<double>(frame_indices.size());
  return losses::total_loss(sums[0] * inv, sums[1] * inv, sums[2] * inv, sums[3] * inv, sums[4] * inv, sums[5] * inv,
                            sums[6] * inv);
}

StepMetrics Stage2Trainer::step() {
  StepMetrics m;
  m.step = step_;
  m.lr = config_.lr_at(step_, total_steps_);
  optimizer_->set_lr(m.lr);
  optimizer_->zero_grad();

  const std::vector<int> batch = batch_for_step(step_);
  const double inv = 1.0 / static_cast<double>(batch.size());
  std::array<std::vector<nn::Var>, 7> parts;
  std::vector<FrameLoss> frame_losses;
  for (int i : batch) {
    const std::uint64_t stream = mix(mix(config_.seed, static_cast<std::uint64_t>(step_)), static_cast<std::uint64_t>(i));
    frame_losses.push_back(frame_loss(frame(i), stream));
    const FrameLoss& fl = frame_losses.back();
    const nn::Var* vars[] = {&fl.det, &fl.reid, &fl.sra_obj, &fl.sra_id, &fl.mil_img, &fl.mil_box, &fl.mil_fea};
    for (std::size_t k = 0; k < 7; ++k) parts[k].push_back(*vars[k]);
  }
  std::array<double, 7> values{};
  std::vector<nn::Var> scaled;
  for (std::size_t k = 0; k < 7; ++k) {
    const nn::Var v = nn::scale(nn::add_n(parts[k]), inv);
    values[k] = v.value()[0];
    scaled.push_back(v);
  }
  try {
    m.losses = losses::total_loss(values[0], values[1], values[2], values[3], values[4], values[5], values[6]);
  } catch (const TrainingError& e) {
    throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step_));
  }
  nn::add_n(scaled).backward();
  m.grad_norm = optimizer_->step();
  optimizer_->zero_grad();
  for (const auto& fl : frame_losses)
    if (fl.oim_embeddings.rows() > 0) losses::oim_update(fl.oim_embeddings, fl.oim_labels, table_);
  ++step_;
  if (config_.audit_every > 0 && step_ % config_.audit_every == 0) audit_frozen();
  return m;
}

std::vector<StepMetrics> Stage2Trainer::run(const fs::path& metrics_path, const fs::path& checkpoint_path,
                                            const std::function<void(const StepMetrics&)>& on_step) {
  std::ofstream log;
  if (!metrics_path.empty()) {
    if (metrics_path.has_parent_path()) fs::create_directories(metrics_path.parent_path());
    log.open(metrics_path, step_ == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw InputError("cannot write metrics to " + metrics_path.string());
  }
  std::vector<StepMetrics> history;
  while (step_ < total_steps_) {
    StepMetrics m = step();
    if (log) log << to_json(m).dump() << '\n' << std::flush;
    if (on_step) on_step(m);
    history.push_back(m);
    if (!checkpoint_path.empty() && config_.checkpoint_every > 0 && step_ % config_.checkpoint_every == 0)
      save_checkpoint(checkpoint_path);
  }
  audit_frozen();
  if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path);
  return history;
}

void Stage2Trainer::save_checkpoint(const fs::path& path) const {
  Archive a;
  a.meta = {{"kind", "stage2"},
            {"train_config", to_json(config_)},
            {"num_identities", train_.num_identities},
            {"step", step_},
            {"total_steps", total_steps_},
            {"oim_queue_head", table_.queue_head},
            {"prompt_bank",
             {{"num_identities", bank_.num_identities},
              {"num_context_tokens", bank_.num_context_tokens},
              {"token_dim", bank_.token_dim},
              {"color_words", bank_.color_words},
              {"type_words", bank_.type_words}}},
            {"teacher", {{"num_identities", teacher_->num_identities()}, {"config", crop_cnn_json(config_.teacher)}}},
            {"frozen_hashes",
             {{"prompt_bank", std::to_string(frozen_.prompt_bank)},
              {"teacher", std::to_string(frozen_.teacher)},
              {"text_encoder", std::to_string(frozen_.text_encoder)}}}};
  a.put_parameters(model_->parameters(), "model.");
  const auto& params = optimizer_->params();
  for (std::size_t i = 0; i < params.size(); ++i) a.put("optimizer.velocity." + params[i].first, optimizer_->velocity()[i]);
  a.put("oim.prototypes", nn::Tensor::from_matrix(table_.prototypes));
  a.put("oim.queue", nn::Tensor({table_.queue_size(), table_.dim()},
                                std::vector<double>(table_.queue.data(), table_.queue.data() + table_.queue.size())));
  a.put("prompt_bank.context", bank_.context_tokens.value());
  a.put("prompt_bank.color", bank_.color_tokens.value());
  a.put("prompt_bank.type", bank_.type_tokens.value());
  a.put("prompt_bank.encoded", bank_.encoded);
  put_teacher(a, *teacher_);
  save_archive(path, a);
}

void Stage2Trainer::resume(const fs::path& path) {
  const Archive a = load_archive(path);
  if (a.meta.value("kind", "") != "stage2") throw IntegrityError(path.string() + " is not a stage-2 checkpoint");
  const TrainConfig saved = train_config_from_json(a.meta.at("train_config"));
  if (to_json(saved.backbone) != to_json(config_.backbone))
    throw IntegrityError("resume: checkpoint backbone differs from the configured backbone");
  const auto& fh = a.meta.at("frozen_hashes");
  if (fh.at("prompt_bank").get<std::string>() != std::to_string(frozen_.prompt_bank) ||
      fh.at("teacher").get<std::string>() != std::to_string(frozen_.teacher))
    throw IntegrityError("resume: prompt bank or teacher differs from the checkpoint");
  a.load_parameters(model_->parameters(), "model.");
  const auto& params = optimizer_->params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const nn::Tensor& v = a.get("optimizer.velocity." + params[i].first);
    if (v.shape() != optimizer_->velocity()[i].shape()) throw IntegrityError("resume: velocity shape mismatch");
    optimizer_->velocity()[i] = v;
  }
  const nn::Tensor& protos = a.get("oim.prototypes");
  const nn::Tensor& queue = a.get("oim.queue");
  if (protos.size() != static_cast<std::size_t>(table_.prototypes.size()) ||
      queue.size() != static_cast<std::size_t>(table_.queue.size()))
    throw IntegrityError("resume: lookup table size mismatch");
  std::copy_n(protos.data(), protos.size(), table_.prototypes.data());
  std::copy_n(queue.data(), queue.size(), table_.queue.data());
  table_.queue_head = a.meta.at("oim_queue_head").get<int>();
  step_ = a.meta.at("step").get<int>();
}

LoadedModel load_model(const fs::path& checkpoint) {
  const Archive a = load_archive(checkpoint);
  if (a.meta.value("kind", "") != "stage2") throw IntegrityError(checkpoint.string() + " is not a stage-2 checkpoint");
  LoadedModel out;
  out.config = train_config_from_json(a.meta.at("train_config"));
  out.step = a.meta.at("step").get<int>();
  out.model = std::make_unique<VehicleSearchModel>(out.config.backbone, a.meta.at("num_identities").get<int>(), 0,
                                                   out.config.proposals, out.config.inference);
  a.load_parameters(out.model->parameters(), "model.");
  return out;
}

// --- search ----------------------------------------------------------------------

QueryEmbedding embed_query(const VehicleSearchModel& model, const QueryRecord& query, const cv::Mat& crop_image,
                           const FrameRecord& source_frame) {
  const auto& c = model.config();
  cv::Mat scaled = crop_image;
  if (source_frame.width > 0 && source_frame.height > 0 &&
      (source_frame.width != c.image_width || source_frame.height != c.image_height)) {
    const double sx = static_cast<double>(c.image_width) / source_frame.width;
    const double sy = static_cast<double>(c.image_height) / source_frame.height;
    cv::resize(crop_image, scaled,
               cv::Size(std::max(1, static_cast<int>(std::lround(crop_image.cols * sx))),
                        std::max(1, static_cast<int>(std::lround(crop_image.rows * sy)))),
               0, 0, cv::INTER_LINEAR);
  }
  QueryEmbedding q;
  q.query_id = query.query_id;
  q.source_frame_id = query.source_frame_id;
  q.identity = query.box.identity;
  q.embedding = model.encode_query(scaled).vector;
  return q;
}

SearchResult run_search(const VehicleSearchModel& model, const std::vector<QueryRecord>& queries,
                        const DatasetManifest& gallery_manifest, const fs::path& image_root,
                        const fs::path& query_root, const SearchOptions& options) {
  if (gallery_manifest.frames.empty()) throw ReportError("search: empty gallery");
  SearchResult r;
  std::vector<std::optional<cv::Mat>> frames;
  for (const auto& f : gallery_manifest.frames) {
    try {
      frames.emplace_back(read_image(image_root / f.image_path));
    } catch (const InputError&) {
      r.missing.push_back((image_root / f.image_path).string());
      frames.emplace_back(std::nullopt);
    }
  }
  std::vector<std::optional<cv::Mat>> crops;
  for (const auto& q : queries) {
    try {
      crops.emplace_back(read_image(query_root / q.crop_path));
    } catch (const InputError&) {
      r.missing.push_back((query_root / q.crop_path).string());
      crops.emplace_back(std::nullopt);
    }
  }
  if (!r.missing.empty() && !options.skip_missing) {
    std::string list;
    for (const auto& m : r.missing) list += "\n  " + m;
    throw InputError("search: " + std::to_string(r.missing.size()) + " unreadable images:" + list);
  }

  for (std::size_t i = 0; i < gallery_manifest.frames.size(); ++i) {
    GalleryFrame gf{gallery_manifest.frames[i].frame_id, {}};
    if (frames[i]) {
      const auto [tensor, scale] = prepare_frame(*frames[i], model.config());
      for (auto& d : model.detect_frame(tensor))
        gf.detections.push_back({d.box.scaled(1.0 / scale.first, 1.0 / scale.second), d.score, std::move(d.embedding)});
    }
    r.gallery.push_back(std::move(gf));
  }
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (!crops[i]) continue;
    const FrameRecord* src = gallery_manifest.find_frame(queries[i].source_frame_id);
    const FrameRecord fallback{};
    r.queries.push_back(embed_query(model, queries[i], *crops[i], src ? *src : fallback));
  }
  for (const auto& q : r.queries) r.rankings.push_back(match_and_rank(q, r.gallery, gallery_manifest, options.eval));
  r.report = evaluate(r.queries, r.gallery, gallery_manifest, options.eval);
  return r;
}

SearchResult run_search(const fs::path& checkpoint, const std::vector<QueryRecord>& queries,
                        const DatasetManifest& gallery, const fs::path& image_root, const fs::path& query_root,
                        const SearchOptions& options) {
  const LoadedModel m = load_model(checkpoint);
  return run_search(*m.model, queries, gallery, image_root, query_root, options);
}

}  // namespace clipvs
