#include <doctest.h>

#include <random>

#include "clipvs/errors.hpp"
#include "clipvs/pipeline.hpp"

using namespace clipvs;
using nn::Shape;
using nn::Tensor;
using nn::Var;

namespace {

std::vector<Box> random_boxes(int n, double width, double height, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Box> out;
  for (int i = 0; i < n; ++i) {
    const double x1 = u(rng) * width * 0.7, y1 = u(rng) * height * 0.7;
    out.push_back({x1, y1, x1 + 2 + u(rng) * (width - x1 - 2), y1 + 2 + u(rng) * (height - y1 - 2)});
  }
  return out;
}

void check_shapes(const BackboneConfig& c, int n) {
  nn::NoGradGuard no_grad;
  VehicleSearchModel model(c, 4, 17);
  std::mt19937_64 rng(static_cast<std::uint64_t>(n) + 1);
  // A small random feature map stands in for the backbone output.
  const int fh = 6, fw = 8;
  const Var features(Tensor::randn({1, fh, fw, c.stem_output_channels}, 1.0, rng));
  const auto boxes = random_boxes(n, fw * c.stride(), fh * c.stride(), rng);
  const RegionBatch rb = model.pool(features, boxes, RegionSource::kProposal);
  CHECK(rb.pooled.shape() == Shape{n, c.pooled_height, c.pooled_width, c.stem_output_channels});

  const DetectionBranch det = model.detect(rb, 0, 0);
  CHECK(det.branch.shape() == Shape{n, c.branch_height(), c.branch_width(), c.branch_output_channels});
  CHECK(det.logits.shape() == Shape{n});
  CHECK(det.deltas.shape() == Shape{n, 4});
  CHECK(det.outputs.size() == static_cast<std::size_t>(n));

  const IdentityBranch id = model.identify(rb, 0, 0);
  CHECK(id.branch.shape() == Shape{n, c.branch_height(), c.branch_width(), c.branch_output_channels});
  CHECK(id.embedding.shape() == Shape{n, c.embedding_dim});
  CHECK(id.norm_logit.shape() == Shape{n});
  REQUIRE(id.embeddings.size() == static_cast<std::size_t>(n));
  for (const auto& e : id.embeddings) {
    double sq = 0;
    for (double v : e.vector) sq += v * v;
    CHECK(std::abs(sq - 1.0) < 1e-9);
    CHECK(e.norm_score > 0.0);
    CHECK(e.norm_score < 1.0);
  }
}

double sum_abs_grad(const nn::ParameterSet& ps, const std::vector<std::string>& names) {
  double s = 0;
  for (const auto& name : names) {
    const Var& v = ps.get(name);
    if (!v.has_grad()) continue;
    for (double g : v.grad().to_vector()) s += std::abs(g);
  }
  return s;
}

}  // namespace

TEST_CASE("reference geometry") {
  const BackboneConfig c = BackboneConfig::reference();
  CHECK(c.pooled_height == 14);
  CHECK(c.pooled_width == 14);
  CHECK(c.stem_output_channels == 1024);
  CHECK(c.branch_output_channels == 2048);
  CHECK(c.embedding_dim == 256);
  CHECK(c.stride() == 16);
  CHECK(c.branch_height() == 7);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("toy geometry") {
  const BackboneConfig c = BackboneConfig::toy();
  CHECK(c.pooled_height == 7);
  CHECK(c.stem_output_channels == 128);
  CHECK(c.branch_output_channels == 256);
  CHECK(c.branch_height() == 4);
  CHECK(c.embedding_dim == 256);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("toy shape contracts") {
  for (int n : {0, 1, 5, 64}) {
    CAPTURE(n);
    check_shapes(BackboneConfig::toy(), n);
  }
}

TEST_CASE("reference shape contracts") {
  for (int n : {0, 1, 5}) {
    CAPTURE(n);
    check_shapes(BackboneConfig::reference(), n);
  }
}

TEST_CASE("pooled features with the wrong geometry are rejected") {
  const BackboneConfig c = BackboneConfig::toy();
  VehicleSearchModel model(c, 2, 1);
  RegionBatch rb;
  rb.boxes = {{0, 0, 8, 8}};
  rb.pooled = Var(Tensor({1, 5, 5, c.stem_output_channels}));
  CHECK_THROWS_AS(model.detect(rb, 0, 0), ContractError);
  CHECK_THROWS_AS(model.identify(rb, 0, 0), ContractError);
  rb.pooled = Var(Tensor({2, 7, 7, c.stem_output_channels}));
  CHECK_THROWS_AS(model.identify(rb, 0, 0), ContractError);
  const Var f(Tensor({1, 4, 4, c.stem_output_channels}));
  CHECK_THROWS_AS(model.pool(f, {{0, 0, 4, 4}}, RegionSource::kGroundTruth), ContractError);
}

TEST_CASE("backbone output follows the stride") {
  const BackboneConfig c = BackboneConfig::toy();
  VehicleSearchModel model(c, 2, 3);
  std::mt19937_64 rng(3);
  nn::NoGradGuard no_grad;
  const Var f = model.extract_features(Tensor::randn({1, 30, 41, 3}, 1.0, rng));
  CHECK(f.shape() == Shape{1, 8, 11, c.stem_output_channels});
  CHECK_THROWS_AS(model.extract_features(Tensor({1, 2, 40, 3})), InputError);
  const RpnOutput r = model.rpn(f);
  CHECK(r.anchors.size() == static_cast<std::size_t>(8 * 11 * c.anchors_per_location()));
  CHECK(r.logits.shape() == Shape{static_cast<int>(r.anchors.size())});
}

TEST_CASE("identical seeds give identical models and outputs") {
  const BackboneConfig c = BackboneConfig::toy();
  VehicleSearchModel a(c, 3, 99), b(c, 3, 99), other(c, 3, 100);
  CHECK(a.parameters().hash() == b.parameters().hash());
  CHECK(a.parameters().hash() != other.parameters().hash());
  std::mt19937_64 rng(5);
  const Tensor image = Tensor::randn({1, 64, 64, 3}, 1.0, rng);
  const auto da = a.detect_frame(image), db = b.detect_frame(image);
  REQUIRE(da.size() == db.size());
  for (std::size_t i = 0; i < da.size(); ++i) {
    CHECK(da[i].box == db[i].box);
    CHECK(da[i].embedding == db[i].embedding);
  }
}

TEST_CASE("each branch only receives gradients from its own outputs") {
  const BackboneConfig c = BackboneConfig::toy();
  VehicleSearchModel model(c, 3, 7);
  std::mt19937_64 rng(7);
  const Var f = model.extract_features(Tensor::randn({1, 32, 32, 3}, 1.0, rng));
  const std::vector<Box> boxes = {{2, 2, 20, 20}, {10, 4, 30, 28}};
  const RegionBatch rb = model.pool(f, boxes, RegionSource::kProposal);
  const auto det_names = model.detection_branch_parameters();
  const auto id_names = model.identity_branch_parameters();
  REQUIRE_FALSE(det_names.empty());
  REQUIRE_FALSE(id_names.empty());
  for (const auto& n : det_names) CHECK(std::find(id_names.begin(), id_names.end(), n) == id_names.end());

  model.parameters().zero_grad();
  nn::mean_rows(nn::reshape(model.detect(rb, 32, 32).logits, {2, 1})).backward();
  CHECK(sum_abs_grad(model.parameters(), det_names) > 0.0);
  CHECK(sum_abs_grad(model.parameters(), id_names) == 0.0);

  model.parameters().zero_grad();
  const RegionBatch rb2 = model.pool(model.extract_features(Tensor::randn({1, 32, 32, 3}, 1.0, rng)), boxes,
                                     RegionSource::kProposal);
  const IdentityBranch id = model.identify(rb2, 32, 32);
  const int o = c.embedding_dim;
  nn::add(nn::mean_rows(nn::reshape(id.embedding, {2 * o, 1})), nn::mean_rows(nn::reshape(id.norm_logit, {2, 1})))
      .backward();
  CHECK(sum_abs_grad(model.parameters(), id_names) > 0.0);
  CHECK(sum_abs_grad(model.parameters(), det_names) == 0.0);
}

TEST_CASE("ground-truth and predicted regions share one identity path") {
  const BackboneConfig c = BackboneConfig::toy();
  VehicleSearchModel model(c, 3, 11);
  std::mt19937_64 rng(11);
  nn::NoGradGuard no_grad;
  const Var f = model.extract_features(Tensor::randn({1, 48, 48, 3}, 1.0, rng));
  const std::vector<Box> boxes = {{3, 3, 21, 17}, {20, 8, 44, 40}};
  const auto gt = model.identify(model.pool(f, boxes, RegionSource::kGroundTruth, {1, kUnlabeled}), 48, 48);
  const auto pred = model.identify(model.pool(f, boxes, RegionSource::kPredicted), 48, 48);
  REQUIRE(gt.embeddings.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(gt.embeddings[i].vector == pred.embeddings[i].vector);
    CHECK(gt.embeddings[i].norm_score == pred.embeddings[i].norm_score);
  }
}

TEST_CASE("query encoding gives a unit embedding and accepts tiny crops") {
  VehicleSearchModel model(BackboneConfig::toy(), 2, 13);
  cv::Mat crop(20, 30, CV_8UC3, cv::Scalar(40, 120, 200));
  const IdentityEmbedding e = model.encode_query(crop);
  double sq = 0;
  for (double v : e.vector) sq += v * v;
  CHECK(std::abs(sq - 1.0) < 1e-9);
  CHECK(e.vector.size() == 256);
  const IdentityEmbedding tiny = model.encode_query(cv::Mat(2, 3, CV_8UC3, cv::Scalar(1, 2, 3)));
  CHECK(tiny.vector.size() == 256);
  CHECK(model.encode_query(crop, 0.5).vector.size() == 256);
  CHECK_THROWS_AS(model.encode_query(cv::Mat()), InputError);
}

TEST_CASE("zero proposals means no detections") {
  VehicleSearchModel model(BackboneConfig::toy(), 2, 19);
  model.proposal_config().post_nms_eval = 0;
  std::mt19937_64 rng(19);
  const Tensor image = Tensor::randn({1, 64, 64, 3}, 1.0, rng);
  nn::NoGradGuard no_grad;
  CHECK(model.propose_regions(model.extract_features(image), 64, 64, false).boxes.empty());
  CHECK(model.detect_frame(image).empty());
}

TEST_CASE("proposals stay inside the image and respect the budget") {
  VehicleSearchModel model(BackboneConfig::toy(), 2, 23);
  model.proposal_config().post_nms_eval = 10;
  std::mt19937_64 rng(23);
  nn::NoGradGuard no_grad;
  const Proposals p = model.propose_regions(model.extract_features(Tensor::randn({1, 64, 64, 3}, 1.0, rng)), 64, 64,
                                            false);
  CHECK(p.boxes.size() <= 10);
  CHECK(p.boxes.size() == p.scores.size());
  for (std::size_t i = 0; i < p.boxes.size(); ++i) {
    CHECK(p.boxes[i].x1 >= 0);
    CHECK(p.boxes[i].y1 >= 0);
    CHECK(p.boxes[i].x2 <= 64);
    CHECK(p.boxes[i].y2 <= 64);
    if (i > 0) CHECK(p.scores[i] <= p.scores[i - 1]);
  }
}

TEST_CASE("box coding") {
  const Box ref{10, 20, 50, 40};
  for (const auto& w : {kRpnBoxWeights, kHeadBoxWeights}) {
    const std::array<double, 4> zero{0, 0, 0, 0};
    const Box same = decode_box(ref, zero, w);
    CHECK(same.x1 == doctest::Approx(ref.x1));
    CHECK(same.y1 == doctest::Approx(ref.y1));
    CHECK(same.x2 == doctest::Approx(ref.x2));
    CHECK(same.y2 == doctest::Approx(ref.y2));
    const Box target{5, 22, 61, 47};
    const auto d = encode_box(ref, target, w);
    const Box back = decode_box(ref, d, w);
    CHECK(back.x1 == doctest::Approx(target.x1).epsilon(1e-12));
    CHECK(back.y1 == doctest::Approx(target.y1).epsilon(1e-12));
    CHECK(back.x2 == doctest::Approx(target.x2).epsilon(1e-12));
    CHECK(back.y2 == doctest::Approx(target.y2).epsilon(1e-12));
  }
  const auto d = encode_box(ref, {20, 20, 60, 40}, kRpnBoxWeights);
  CHECK(d[0] == doctest::Approx(10.0 / 40.0));
  CHECK(d[1] == doctest::Approx(0.0));
  CHECK(d[2] == doctest::Approx(0.0));
}

TEST_CASE("greedy suppression") {
  const std::vector<Box> boxes = {{0, 0, 10, 10}, {1, 0, 11, 10}, {20, 20, 30, 30}, {0, 0, 10, 10}};
  const std::vector<int> order = {3, 0, 1, 2};
  CHECK(nms(boxes, order, 0.5) == std::vector<int>{3, 2});
  CHECK(nms(boxes, order, 1.0) == order);
  CHECK(nms(boxes, std::vector<int>{}, 0.5).empty());
}

TEST_CASE("anchors tile the feature map") {
  const std::vector<double> sizes = {8, 16}, ratios = {0.5, 1, 2};
  const auto anchors = make_anchors(3, 4, 4, sizes, ratios);
  CHECK(anchors.size() == 3 * 4 * 6);
  for (const auto& a : anchors) CHECK(a.valid());
}

TEST_CASE("backbone config json round trip") {
  for (const auto& c : {BackboneConfig::toy(), BackboneConfig::reference()}) {
    const auto back = backbone_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
  }
  BackboneConfig bad = BackboneConfig::toy();
  bad.branch_output_channels = 100;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = BackboneConfig::toy();
  bad.stages.back().channels = 64;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}
