#include "clipvs/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "clipvs/errors.hpp"
#include "clipvs/image.hpp"
#include "clipvs/losses.hpp"

namespace clipvs {

using nlohmann::json;

BackboneConfig BackboneConfig::reference() {
  BackboneConfig c;
  c.architecture_id = "resnet-lite-c4";
  c.stages = {{32, 3, 2}, {64, 3, 2}, {128, 3, 2}, {256, 3, 2}, {1024, 1, 1}};
  c.stem_output_channels = 1024;
  c.pooled_height = c.pooled_width = 14;
  c.branch_output_channels = 2048;
  c.embedding_dim = 256;
  c.text_dim = 1024;
  c.rpn_channels = 256;
  c.anchor_sizes = {32, 64, 128, 256, 512};
  c.anchor_ratios = {0.5, 1.0, 2.0};
  c.image_height = 900;
  c.image_width = 1500;
  return c;
}

BackboneConfig BackboneConfig::toy() {
  BackboneConfig c;
  c.architecture_id = "resnet-lite-toy";
  c.stages = {{32, 3, 2}, {64, 3, 2}, {128, 3, 1}};
  c.stem_output_channels = 128;
  c.pooled_height = c.pooled_width = 7;
  c.branch_output_channels = 256;
  c.embedding_dim = 256;
  c.text_dim = 64;
  c.rpn_channels = 64;
  c.anchor_sizes = {8, 16, 32};
  c.anchor_ratios = {0.5, 1.0, 2.0};
  c.image_height = 64;
  c.image_width = 64;
  return c;
}

int BackboneConfig::stride() const {
  int s = 1;
  for (const auto& st : stages) s *= st.stride;
  return s;
}

void BackboneConfig::validate() const {
  if (stages.empty() || stages.back().channels != stem_output_channels)
    throw ContractError("backbone: last stage must output stem_output_channels");
  if (branch_output_channels != 2 * stem_output_channels)
    throw ContractError("backbone: branch_output_channels must equal 2d");
  if (pooled_height <= 0 || pooled_width <= 0 || embedding_dim <= 0 || text_dim <= 0 || rpn_channels <= 0)
    throw ContractError("backbone: non-positive dimension");
  if (anchor_sizes.empty() || anchor_ratios.empty()) throw ContractError("backbone: no anchors configured");
  if (image_height < stride() || image_width < stride()) throw ContractError("backbone: image smaller than stride");
}

json to_json(const BackboneConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) stages.push_back({{"channels", s.channels}, {"kernel", s.kernel}, {"stride", s.stride}});
  return {{"architecture_id", c.architecture_id}, {"stages", stages},
          {"stem_output_channels", c.stem_output_channels}, {"pooled_height", c.pooled_height},
          {"pooled_width", c.pooled_width}, {"branch_output_channels", c.branch_output_channels},
          {"embedding_dim", c.embedding_dim}, {"text_dim", c.text_dim}, {"rpn_channels", c.rpn_channels},
          {"anchor_sizes", c.anchor_sizes}, {"anchor_ratios", c.anchor_ratios},
          {"image_height", c.image_height}, {"image_width", c.image_width}};
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  c.architecture_id = j.at("architecture_id").get<std::string>();
  for (const auto& s : j.at("stages"))
    c.stages.push_back({s.at("channels").get<int>(), s.at("kernel").get<int>(), s.at("stride").get<int>()});
  c.stem_output_channels = j.at("stem_output_channels").get<int>();
  c.pooled_height = j.at("pooled_height").get<int>();
  c.pooled_width = j.at("pooled_width").get<int>();
  c.branch_output_channels = j.at("branch_output_channels").get<int>();
  c.embedding_dim = j.at("embedding_dim").get<int>();
  c.text_dim = j.at("text_dim").get<int>();
  c.rpn_channels = j.at("rpn_channels").get<int>();
  c.anchor_sizes = j.at("anchor_sizes").get<std::vector<double>>();
  c.anchor_ratios = j.at("anchor_ratios").get<std::vector<double>>();
  c.image_height = j.at("image_height").get<int>();
  c.image_width = j.at("image_width").get<int>();
  c.validate();
  return c;
}

// --- box coding ---------------------------------------------------------------

namespace {
const double kMaxLogScale = std::log(1000.0 / 16.0);
}

std::array<double, 4> encode_box(const Box& ref, const Box& target, const BoxWeights& w) {
  const double rw = ref.width(), rh = ref.height();
  const double rx = ref.x1 + 0.5 * rw, ry = ref.y1 + 0.5 * rh;
  const double tw = target.width(), th = target.height();
  const double tx = target.x1 + 0.5 * tw, ty = target.y1 + 0.5 * th;
  return {w[0] * (tx - rx) / rw, w[1] * (ty - ry) / rh, w[2] * std::log(tw / rw), w[3] * std::log(th / rh)};
}

Box decode_box(const Box& ref, std::span<const double> d, const BoxWeights& w) {
  const double rw = ref.width(), rh = ref.height();
  const double rx = ref.x1 + 0.5 * rw, ry = ref.y1 + 0.5 * rh;
  const double dw = std::min(d[2] / w[2], kMaxLogScale), dh = std::min(d[3] / w[3], kMaxLogScale);
  const double cx = rx + d[0] / w[0] * rw, cy = ry + d[1] / w[1] * rh;
  const double pw = rw * std::exp(dw), ph = rh * std::exp(dh);
  return {cx - 0.5 * pw, cy - 0.5 * ph, cx + 0.5 * pw, cy + 0.5 * ph};
}

std::vector<int> nms(std::span<const Box> boxes, std::span<const int> order, double threshold) {
  std::vector<int> keep;
  std::vector<char> removed(boxes.size(), 0);
  for (int i : order) {
    if (removed[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    for (int j : order) {
      if (removed[static_cast<std::size_t>(j)] || j == i) continue;
      if (iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) > threshold)
        removed[static_cast<std::size_t>(j)] = 1;
    }
    removed[static_cast<std::size_t>(i)] = 1;
  }
  return keep;
}

std::vector<Box> make_anchors(int fh, int fw, int stride, std::span<const double> sizes,
                              std::span<const double> ratios) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(fh) * fw * sizes.size() * ratios.size());
  for (int y = 0; y < fh; ++y)
    for (int x = 0; x < fw; ++x) {
      const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
      for (double s : sizes)
        for (double r : ratios) {
          const double w = s / std::sqrt(r), h = s * std::sqrt(r);
          anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
    }
  return anchors;
}

// --- model ------------------------------------------------------------------------

HeadBlock::HeadBlock(nn::ParameterSet& params, const std::string& prefix, int in, int out, nn::Rng& rng) {
  const int mid = std::max(1, in / 2);
  reduce_ = nn::Conv2d::create(params, prefix + ".reduce", in, mid, 1, 2, rng);
  conv_ = nn::Conv2d::create(params, prefix + ".conv", mid, mid, 3, 1, rng);
  expand_ = nn::Conv2d::create(params, prefix + ".expand", mid, out, 1, 1, rng);
  shortcut_ = nn::Conv2d::create(params, prefix + ".shortcut", in, out, 1, 2, rng);
}

nn::Var HeadBlock::operator()(const nn::Var& x) const {
  nn::Var a = nn::relu(reduce_(x));
  nn::Var b = nn::relu(conv_(a));
  return nn::relu(nn::add(expand_(b), shortcut_(x)));
}

VehicleSearchModel::VehicleSearchModel(BackboneConfig config, int num_identities, std::uint64_t seed,
                                       ProposalConfig proposals, InferenceConfig inference)
    : config_(std::move(config)), num_identities_(num_identities), proposals_(proposals), inference_(inference) {
  config_.validate();
  if (num_identities_ < 1) throw ContractError("model: needs at least one identity");
  nn::Rng rng(seed);
  int in = 3;
  for (std::size_t i = 0; i < config_.stages.size(); ++i) {
    const auto& st = config_.stages[i];
    backbone_.push_back(
        nn::Conv2d::create(params_, "backbone.conv" + std::to_string(i + 1), in, st.channels, st.kernel, st.stride, rng));
    in = st.channels;
  }
  const int d = config_.stem_output_channels, d2 = config_.branch_output_channels;
  const int anchors = config_.anchors_per_location();
  rpn_conv_ = nn::Conv2d::create(params_, "rpn.conv", d, config_.rpn_channels, 3, 1, rng);
  rpn_cls_ = nn::Conv2d::create(params_, "rpn.cls", config_.rpn_channels, anchors, 1, 1, rng);
  rpn_bbox_ = nn::Conv2d::create(params_, "rpn.bbox", config_.rpn_channels, 4 * anchors, 1, 1, rng);
  // Small-variance output layers keep initial logits and deltas near zero.
  rpn_cls_.weight.mutable_value() = nn::Tensor::randn(rpn_cls_.weight.shape(), 0.01, rng);
  rpn_bbox_.weight.mutable_value() = nn::Tensor::randn(rpn_bbox_.weight.shape(), 0.01, rng);

  det_head_ = HeadBlock(params_, "det_head", d, d2, rng);
  box_cls_ = nn::Linear::create(params_, "box_predictor.cls", d2, 1, rng, 0.01);
  box_bbox_ = nn::Linear::create(params_, "box_predictor.bbox", d2, 4, rng, 0.001);

  id_head_ = HeadBlock(params_, "id_head", d, d2, rng);
  id_reg_ = nn::Linear::create(params_, "id_head.box_regressor", d2, 4, rng, 0.001);
  nae_proj_ = nn::Linear::create(params_, "id_head.nae.proj", d2, config_.embedding_dim, rng);
  nae_scale_ = params_.add("id_head.nae.norm_scale", nn::Tensor({1}, 1.0));
  nae_shift_ = params_.add("id_head.nae.norm_shift", nn::Tensor({1}, 0.0));

  obj_align_ = nn::Linear::create(params_, "align.object_proj", d2, config_.text_dim, rng);
  id_align_ = nn::Linear::create(params_, "align.identity_proj", d2, config_.text_dim, rng);
  multi_label_ = nn::Linear::create(params_, "mil.multi_label", d, num_identities_, rng, 0.01);
  single_label_ = nn::Linear::create(params_, "mil.single_label", d2, num_identities_, rng, 0.01);
}

nn::Var VehicleSearchModel::extract_features(const nn::Tensor& image) const {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(3) != 3)
    throw InputError("extract_features: expected [1,H,W,3] image, got " + nn::shape_string(image.shape()));
  const int s = config_.stride();
  if (image.dim(1) < s || image.dim(2) < s)
    throw InputError("extract_features: image " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                     " smaller than backbone stride " + std::to_string(s));
  nn::Var x(image);
  for (const auto& conv : backbone_) x = nn::relu(conv(x));
  return x;
}

RpnOutput VehicleSearchModel::rpn(const nn::Var& features) const {
  const int fh = features.dim(1), fw = features.dim(2);
  const int a = config_.anchors_per_location();
  nn::Var h = nn::relu(rpn_conv_(features));
  RpnOutput out;
  out.logits = nn::reshape(rpn_cls_(h), {fh * fw * a});
  out.deltas = nn::reshape(rpn_bbox_(h), {fh * fw * a, 4});
  out.anchors = make_anchors(fh, fw, config_.stride(), config_.anchor_sizes, config_.anchor_ratios);
  return out;
}

Proposals VehicleSearchModel::propose_regions(const nn::Var& features, int image_height, int image_width,
                                              bool training) const {
  nn::NoGradGuard no_grad;
  return propose_regions(rpn(features), image_height, image_width, training);
}

Proposals VehicleSearchModel::propose_regions(const RpnOutput& r, int image_height, int image_width,
                                              bool training) const {
  const int pre = training ? proposals_.pre_nms_train : proposals_.pre_nms_eval;
  const int post = training ? proposals_.post_nms_train : proposals_.post_nms_eval;
  Proposals out;
  if (post <= 0) return out;
  const auto& logits = r.logits.value();
  const auto& deltas = r.deltas.value();
  const auto n = r.anchors.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)]; });
  if (static_cast<int>(order.size()) > pre) order.resize(static_cast<std::size_t>(std::max(pre, 0)));

  std::vector<Box> boxes;
  std::vector<double> scores;
  std::vector<int> kept;
  for (int i : order) {
    const auto k = static_cast<std::size_t>(i);
    Box b = decode_box(r.anchors[k], std::span<const double>(deltas.data() + 4 * k, 4), kRpnBoxWeights)
                .clipped(image_width, image_height);
    if (b.width() < proposals_.min_size || b.height() < proposals_.min_size) continue;
    kept.push_back(static_cast<int>(boxes.size()));
    boxes.push_back(b);
    scores.push_back(losses::sigmoid(logits[k]));
  }
  for (int i : nms(boxes, kept, proposals_.nms_threshold)) {
    if (static_cast<int>(out.boxes.size()) >= post) break;
    out.boxes.push_back(boxes[static_cast<std::size_t>(i)]);
    out.scores.push_back(scores[static_cast<std::size_t>(i)]);
  }
  return out;
}

RegionBatch VehicleSearchModel::pool(const nn::Var& features, std::vector<Box> boxes, RegionSource source,
                                     std::vector<IdentityId> identities) const {
  if (source == RegionSource::kGroundTruth && identities.size() != boxes.size())
    throw ContractError("pool: ground-truth regions need one identity per box");
  RegionBatch rb;
  rb.source = source;
  rb.identities = std::move(identities);
  rb.pooled = nn::roi_align(features, boxes, 1.0 / config_.stride(), config_.pooled_height, config_.pooled_width);
  rb.boxes = std::move(boxes);
  return rb;
}

namespace {
void check_pooled(const RegionBatch& rb, const BackboneConfig& c, const char* op) {
  const auto& s = rb.pooled.shape();
  if (s.size() != 4 || s[1] != c.pooled_height || s[2] != c.pooled_width || s[3] != c.stem_output_channels ||
      static_cast<std::size_t>(s[0]) != rb.boxes.size())
    throw ContractError(std::string(op) + ": pooled features " + nn::shape_string(s) + " do not match [" +
                        std::to_string(rb.boxes.size()) + "," + std::to_string(c.pooled_height) + "," +
                        std::to_string(c.pooled_width) + "," + std::to_string(c.stem_output_channels) + "]");
}
}  // namespace

DetectionBranch VehicleSearchModel::detect(const RegionBatch& regions, int image_height, int image_width) const {
  check_pooled(regions, config_, "detect");
  DetectionBranch out;
  out.branch = det_head_(regions.pooled);
  out.pooled_vector = nn::global_avg_pool(out.branch);
  const int n = static_cast<int>(regions.boxes.size());
  out.logits = nn::reshape(box_cls_(out.pooled_vector), {n});
  out.deltas = box_bbox_(out.pooled_vector);
  const auto& d = out.deltas.value();
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    Box b = decode_box(regions.boxes[k], std::span<const double>(d.data() + 4 * k, 4), kHeadBoxWeights);
    if (image_height > 0 && image_width > 0) b = b.clipped(image_width, image_height);
    out.outputs.push_back({b, losses::sigmoid(out.logits.value()[k])});
  }
  return out;
}

IdentityBranch VehicleSearchModel::identify(const RegionBatch& regions, int image_height, int image_width) const {
  check_pooled(regions, config_, "identify");
  IdentityBranch out;
  out.branch = id_head_(regions.pooled);
  out.pooled_vector = nn::global_avg_pool(out.branch);
  out.deltas = id_reg_(out.pooled_vector);
  nn::Var raw = nae_proj_(out.pooled_vector);
  out.embedding = nn::l2_normalize_rows(raw);
  out.norm_logit = nn::scalar_affine(nn::row_norms(raw), nae_scale_, nae_shift_);
  const int n = static_cast<int>(regions.boxes.size());
  const int o = config_.embedding_dim;
  const auto& d = out.deltas.value();
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    Box b = decode_box(regions.boxes[k], std::span<const double>(d.data() + 4 * k, 4), kHeadBoxWeights);
    if (image_height > 0 && image_width > 0) b = b.clipped(image_width, image_height);
    out.refined_boxes.push_back(b);
    IdentityEmbedding e;
    e.vector.assign(out.embedding.value().data() + k * o, out.embedding.value().data() + (k + 1) * o);
    e.norm_score = losses::sigmoid(out.norm_logit.value()[k]);
    out.embeddings.push_back(std::move(e));
  }
  return out;
}

nn::Var VehicleSearchModel::object_alignment_features(const nn::Var& v) const { return obj_align_(v); }
nn::Var VehicleSearchModel::identity_alignment_features(const nn::Var& v) const { return id_align_(v); }
nn::Var VehicleSearchModel::multi_label_logits(const nn::Var& features) const {
  return multi_label_(nn::global_avg_pool(features));
}
nn::Var VehicleSearchModel::single_label_logits(const nn::Var& v) const { return single_label_(v); }

IdentityEmbedding VehicleSearchModel::encode_query(const cv::Mat& crop_image, double scale) const {
  if (crop_image.empty()) throw InputError("encode_query: empty crop");
  cv::Mat img = crop_image;
  if (scale != 1.0) {
    const int w = std::max(1, static_cast<int>(std::lround(crop_image.cols * scale)));
    const int h = std::max(1, static_cast<int>(std::lround(crop_image.rows * scale)));
    cv::resize(crop_image, img, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
  }
  const int s = config_.stride();
  nn::Tensor t = to_tensor(img);
  const int h = img.rows, w = img.cols;
  if (h < s || w < s) {
    // Pad with zeros (the normalized mean colour) up to one stride.
    nn::Tensor padded({1, std::max(h, s), std::max(w, s), 3});
    for (int y = 0; y < h; ++y)
      std::copy_n(t.data() + static_cast<std::size_t>(y) * w * 3, static_cast<std::size_t>(w) * 3,
                  padded.data() + static_cast<std::size_t>(y) * padded.dim(2) * 3);
    t = std::move(padded);
  }
  nn::NoGradGuard no_grad;
  nn::Var f = extract_features(t);
  RegionBatch rb = pool(f, {Box{0, 0, static_cast<double>(w), static_cast<double>(h)}}, RegionSource::kGroundTruth,
                        {kUnlabeled});
  return identify(rb, 0, 0).embeddings.front();
}

std::vector<GalleryDetection> VehicleSearchModel::detect_frame(const nn::Tensor& image) const {
  nn::NoGradGuard no_grad;
  const int h = image.dim(1), w = image.dim(2);
  nn::Var f = extract_features(image);
  Proposals props = propose_regions(f, h, w, false);
  if (props.boxes.empty()) return {};
  DetectionBranch det = detect(pool(f, props.boxes, RegionSource::kProposal), h, w);
  std::vector<Box> predicted;
  for (const auto& o : det.outputs)
    if (o.refined_box.valid()) predicted.push_back(o.refined_box);
  if (predicted.empty()) return {};
  IdentityBranch id = identify(pool(f, predicted, RegionSource::kPredicted), h, w);

  std::vector<int> order;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    if (id.embeddings[i].norm_score >= inference_.score_threshold && id.refined_boxes[i].valid())
      order.push_back(static_cast<int>(i));
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return id.embeddings[static_cast<std::size_t>(a)].norm_score > id.embeddings[static_cast<std::size_t>(b)].norm_score;
  });
  std::vector<GalleryDetection> out;
  for (int i : nms(id.refined_boxes, order, inference_.nms_threshold)) {
    if (static_cast<int>(out.size()) >= inference_.max_detections) break;
    const auto k = static_cast<std::size_t>(i);
    out.push_back({id.refined_boxes[k], id.embeddings[k].norm_score, id.embeddings[k].vector});
  }
  return out;
}

std::vector<std::string> VehicleSearchModel::detection_branch_parameters() const {
  std::vector<std::string> names;
  for (const auto& [name, v] : params_.entries())
    if (name.starts_with("det_head.") || name.starts_with("box_predictor.")) names.push_back(name);
  return names;
}

std::vector<std::string> VehicleSearchModel::identity_branch_parameters() const {
  std::vector<std::string> names;
  for (const auto& [name, v] : params_.entries())
    if (name.starts_with("id_head.")) names.push_back(name);
  return names;
}

}  // namespace clipvs
