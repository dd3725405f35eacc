#include <doctest.h>

#include <cmath>
#include <random>

#include "clipvs/errors.hpp"
#include "clipvs/losses.hpp"
#include "../support/fixtures.hpp"

using namespace clipvs;
using namespace clipvs::losses;
using fixture::flat;
using fixture::to_eigen;
using oracle::Mat;
using oracle::Vec;

namespace {

constexpr int kTrials = 25;
constexpr double kGradTol = 1e-4;

std::vector<int> random_ids(std::mt19937_64& rng, int n, int c, bool allow_unlabeled = false) {
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng() % static_cast<std::uint64_t>(c + (allow_unlabeled ? 1 : 0)));
    ids.push_back(y == c ? kUnlabeled : y + 1);
  }
  return ids;
}

}  // namespace

// --- gradients --------------------------------------------------------------------

TEST_CASE("detection loss gradient and value") {
  std::mt19937_64 rng(100);
  for (int t = 0; t < kTrials; ++t) {
    const int n = 1 + static_cast<int>(rng() % 6);
    const Vec z = oracle::random_vec(rng, static_cast<std::size_t>(n), 2.0);
    const Mat d = oracle::random_mat(rng, static_cast<std::size_t>(n), 4, 0.5);
    const Mat tg = oracle::random_mat(rng, static_cast<std::size_t>(n), 4, 0.5);
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng() % 3) - 1);
    labels[0] = kForeground;
    const DetectionLoss l = detection_loss(Eigen::Map<const Eigen::VectorXd>(z.data(), n), to_eigen(d), labels,
                                           to_eigen(tg));
    CHECK(l.value == doctest::Approx(oracle::detection(z, d, labels, tg)).epsilon(1e-12));
    const Vec gz = oracle::numeric_gradient([&](const Vec& x) { return oracle::detection(x, d, labels, tg); }, z);
    const Vec gd = oracle::numeric_gradient(
        [&](const Vec& x) { return oracle::detection(z, oracle::unflatten(x, d.size()), labels, tg); },
        oracle::flatten(d));
    CHECK(oracle::relative_error(Vec(l.grad_logits.data(), l.grad_logits.data() + n), gz) < kGradTol);
    CHECK(oracle::relative_error(flat(l.grad_deltas), gd) < kGradTol);
  }
}

TEST_CASE("detection loss special cases") {
  const Eigen::VectorXd z = Eigen::VectorXd::Constant(3, 40.0);
  const nn::RowMatrix d = nn::RowMatrix::Constant(3, 4, 0.25);
  const std::vector<int> fg = {1, 1, 1};
  CHECK(detection_loss(z, d, fg, d).value == doctest::Approx(0.0).epsilon(1e-15));
  const std::vector<int> bg = {0, 0, -1};
  const DetectionLoss b = detection_loss(-z, d, bg, nn::RowMatrix::Zero(3, 4));
  CHECK(b.regression == 0.0);
  const DetectionLoss none = detection_loss(z, d, std::vector<int>{-1, -1, -1}, d);
  CHECK(none.no_labels);
  CHECK(none.value == 0.0);
}

TEST_CASE("oim gradient") {
  std::mt19937_64 rng(101);
  for (int t = 0; t < kTrials; ++t) {
    const int n = 1 + static_cast<int>(rng() % 5), c = 2 + static_cast<int>(rng() % 5), q = static_cast<int>(rng() % 6);
    const int o = 6;
    nn::Rng table_rng(rng());
    IdentityLookupTable table = IdentityLookupTable::create(c, q, o, {0.5, 10.0}, table_rng);
    for (int r = 0; r < q; ++r) table.queue.row(r) = Eigen::RowVectorXd::Random(o).normalized();
    Mat e;
    for (int i = 0; i < n; ++i) e.push_back(oracle::unit(oracle::random_vec(rng, o)));
    std::vector<int> ids = random_ids(rng, n, c, true);
    ids[0] = 1;
    const OimLoss l = oim_forward(to_eigen(e), ids, table);
    const Vec g = oracle::numeric_gradient(
        [&](const Vec& x) { return oim_forward(to_eigen(oracle::unflatten(x, e.size())), ids, table).value; },
        oracle::flatten(e));
    CHECK(oracle::relative_error(flat(l.grad), g) < kGradTol);
  }
}

TEST_CASE("sra_obj gradient and mixture form") {
  std::mt19937_64 rng(102);
  for (int t = 0; t < kTrials; ++t) {
    const int n = 1 + static_cast<int>(rng() % 5), dim = 3 + static_cast<int>(rng() % 5);
    const Mat f = oracle::random_mat(rng, static_cast<std::size_t>(n), static_cast<std::size_t>(dim));
    const Vec tf = oracle::random_vec(rng, static_cast<std::size_t>(dim));
    const Vec tb = oracle::random_vec(rng, static_cast<std::size_t>(dim));
    std::vector<int> c;
    for (int i = 0; i < n; ++i) c.push_back(static_cast<int>(rng() % 2));
    const Eigen::Map<const Eigen::VectorXd> etf(tf.data(), dim), etb(tb.data(), dim);
    const ScalarLoss l = sra_obj_loss(to_eigen(f), c, etf, etb);
    CHECK(l.value == doctest::Approx(oracle::sra_obj(f, c, tf, tb)).epsilon(1e-9));
    const Vec g = oracle::numeric_gradient(
        [&](const Vec& x) { return oracle::sra_obj(oracle::unflatten(x, f.size()), c, tf, tb); }, oracle::flatten(f));
    CHECK(oracle::relative_error(flat(l.grad), g) < kGradTol);
  }
}

TEST_CASE("sra_id gradient and value") {
  std::mt19937_64 rng(103);
  for (int t = 0; t < kTrials; ++t) {
    const int n = 1 + static_cast<int>(rng() % 4), c = 1 + static_cast<int>(rng() % 5), dim = 4;
    const Mat f = oracle::random_mat(rng, static_cast<std::size_t>(n), dim);
    const Mat text = oracle::random_mat(rng, static_cast<std::size_t>(c), dim);
    const std::vector<int> ids = random_ids(rng, n, c);
    const double scale = 5.0;
    const ScalarLoss l = sra_id_loss(to_eigen(f), ids, to_eigen(text), scale);
    CHECK(l.value == doctest::Approx(oracle::sra_id(f, ids, text, scale)).epsilon(1e-9));
    const Vec g = oracle::numeric_gradient(
        [&](const Vec& x) { return oracle::sra_id(oracle::unflatten(x, f.size()), ids, text, scale); },
        oracle::flatten(f));
    CHECK(oracle::relative_error(flat(l.grad), g) < kGradTol);
  }
}

TEST_CASE("mil_img gradient and value") {
  std::mt19937_64 rng(104);
  for (int t = 0; t < kTrials; ++t) {
    const int frames = 1 + static_cast<int>(rng() % 3), c = 1 + static_cast<int>(rng() % 6);
    const Mat z = oracle::random_mat(rng, static_cast<std::size_t>(frames), static_cast<std::size_t>(c), 2.0);
    Mat y(static_cast<std::size_t>(frames), Vec(static_cast<std::size_t>(c)));
    for (auto& row : y)
      for (double& v : row) v = static_cast<double>(rng() % 2);
    const ScalarLoss l = mil_img_loss(to_eigen(z), to_eigen(y));
    CHECK(l.value == doctest::Approx(oracle::mil_img(z, y)).epsilon(1e-9));
    const Vec g = oracle::numeric_gradient(
        [&](const Vec& x) { return oracle::mil_img(oracle::unflatten(x, z.size()), y); }, oracle::flatten(z));
    CHECK(oracle::relative_error(flat(l.grad), g) < kGradTol);
  }
}

TEST_CASE("mil_box gradient and value") {
  std::mt19937_64 rng(105);
  for (int t = 0; t < kTrials; ++t) {
    const int n = 1 + static_cast<int>(rng() % 5), c = 2 + static_cast<int>(rng() % 5);
    const Mat z = oracle::random_mat(rng, static_cast<std::size_t>(n), static_cast<std::size_t>(c), 2.0);
    std::vector<int> ids = random_ids(rng, n, c, true);
    ids[0] = 1;
    const BoxClassLoss l = mil_box_loss(to_eigen(z), ids);
    CHECK(l.value == doctest::Approx(oracle::mil_box(z, ids)).epsilon(1e-9));
    CHECK(l.skipped == static_cast<int>(std::count(ids.begin(), ids.end(), kUnlabeled)));
    const Vec g = oracle::numeric_gradient(
        [&](const Vec& x) { return oracle::mil_box(oracle::unflatten(x, z.size()), ids); }, oracle::flatten(z));
    CHECK(oracle::relative_error(flat(l.grad), g) < kGradTol);
  }
}

TEST_CASE("mil_fea gradient flows to the student only") {
  std::mt19937_64 rng(106);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t m = 1 + rng() % 4, o = 5;
    const Mat s = oracle::random_mat(rng, m, o), g = oracle::random_mat(rng, m, o);
    const ScalarLoss l = mil_fea_loss(to_eigen(s), to_eigen(g));
    CHECK(l.value == doctest::Approx(oracle::mil_fea(s, g)).epsilon(1e-9));
    const Vec num = oracle::numeric_gradient(
        [&](const Vec& x) { return oracle::mil_fea(oracle::unflatten(x, m), g); }, oracle::flatten(s));
    CHECK(oracle::relative_error(flat(l.grad), num) < kGradTol);
    CHECK(l.grad.rows() == static_cast<Eigen::Index>(m));
  }
  CHECK_THROWS_AS(mil_fea_loss(nn::RowMatrix::Zero(2, 3), nn::RowMatrix::Zero(2, 4)), ContractError);
}

// --- closed-form values -------------------------------------------------------------

TEST_CASE("closed-form spot values") {
  std::mt19937_64 rng(107);
  SUBCASE("sra_obj is ln 2 per region at equal similarities") {
    // Features orthogonal to both prompts, and features equidistant from both.
    const Eigen::VectorXd tf = Eigen::Vector3d(1, 0, 0), tb = Eigen::Vector3d(0, 1, 0);
    nn::RowMatrix f(3, 3);
    f << 0, 0, 1, 1, 1, 0.5, 2, 2, -3;
    const std::vector<int> c = {1, 0, 1};
    CHECK(std::abs(sra_obj_loss(f, c, tf, tb).value - 3 * std::log(2.0)) < 1e-9);
  }
  SUBCASE("sra_id is zero with one identity") {
    const nn::RowMatrix f = nn::Tensor::randn({4, 6}, 1.0, rng).matrix(4);
    const nn::RowMatrix text = nn::Tensor::randn({1, 6}, 1.0, rng).matrix(1);
    const std::vector<int> ids = {1, 1, 1, 1};
    CHECK(std::abs(sra_id_loss(f, ids, text).value) < 1e-9);
  }
  SUBCASE("mil_img is ln 2 per frame at p = 0.5") {
    nn::RowMatrix y(3, 5);
    y << 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1;
    CHECK(std::abs(mil_img_loss(nn::RowMatrix::Zero(3, 5), y).value - 3 * std::log(2.0)) < 1e-9);
  }
  SUBCASE("mil_box is ln C per box at uniform prediction") {
    for (int c : {2, 5, 17}) {
      const std::vector<int> ids = {1, c};
      CHECK(std::abs(mil_box_loss(nn::RowMatrix::Constant(2, c, 0.3), ids).value - 2 * std::log(c)) < 1e-9);
    }
  }
  SUBCASE("mil_fea is zero at equality and linear in a constant shift") {
    const nn::RowMatrix g = nn::Tensor::randn({3, 8}, 1.0, rng).matrix(3);
    CHECK(mil_fea_loss(g, g).value == 0.0);
    CHECK(std::abs(mil_fea_loss(g.array() + 0.01, g).value - 3 * 8 * 0.01) < 1e-9);
  }
  SUBCASE("total is the unweighted sum") {
    const LossBundle b = total_loss(1, 2, 0.5, 0.5, 0.1, 0.2, 0.3);
    CHECK(std::abs(b.total - 4.6) < 1e-12);
    CHECK(total_loss(0, 0, 0, 0, 0, 0, 0).total == 0.0);
  }
}

TEST_CASE("saturation limits") {
  const Eigen::VectorXd tf = Eigen::Vector2d(1, 0), tb = Eigen::Vector2d(-1, 0);
  nn::RowMatrix f(1, 2);
  f << 1, 0;
  const std::vector<int> fg = {1};
  // Similarity gap of 2 bounds the loss at log(1 + e^-2).
  CHECK(sra_obj_loss(f, fg, tf, tb).value == doctest::Approx(std::log1p(std::exp(-2.0))));

  nn::RowMatrix text(3, 2);
  text << 1, 0, 0, 1, 0, -1;
  const std::vector<int> id = {1};
  double previous = 1e9;
  for (double s : {1.0, 10.0, 100.0, 1000.0}) {
    const double v = sra_id_loss(f, id, text, s).value;
    CHECK(v <= previous);
    if (previous > 0) CHECK(v < previous);
    previous = v;
  }
  CHECK(previous < 1e-12);
}

TEST_CASE("sra_obj label symmetry") {
  std::mt19937_64 rng(108);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s1, s2;
    std::vector<int> c, flipped;
    for (int i = 0; i < 4; ++i) {
      s1.push_back(oracle::random_vec(rng, 1)[0]);
      s2.push_back(oracle::random_vec(rng, 1)[0]);
      c.push_back(static_cast<int>(rng() % 2));
      flipped.push_back(1 - c.back());
    }
    CHECK(sra_obj_from_similarities(s1, s2, c) == doctest::Approx(sra_obj_from_similarities(s2, s1, flipped)));
  }
}

TEST_CASE("losses are non-negative on random inputs") {
  std::mt19937_64 rng(109);
  for (int t = 0; t < 30; ++t) {
    const nn::RowMatrix f = nn::Tensor::randn({3, 4}, 1.0, rng).matrix(3);
    const nn::RowMatrix text = nn::Tensor::randn({4, 4}, 1.0, rng).matrix(4);
    const std::vector<int> ids = {1, 3, 4}, c = {1, 0, 1};
    CHECK(sra_id_loss(f, ids, text).value >= 0);
    CHECK(sra_obj_loss(f, c, text.row(0).transpose(), text.row(1).transpose()).value >= 0);
    CHECK(mil_box_loss(f, ids).value >= 0);
    CHECK(mil_img_loss(f, nn::RowMatrix::Ones(3, 4)).value >= 0);
    CHECK(mil_fea_loss(f, text.topRows(3)).value >= 0);
  }
}

TEST_CASE("sra_id contract") {
  const nn::RowMatrix f = nn::RowMatrix::Ones(1, 3), text = nn::RowMatrix::Ones(2, 3);
  CHECK_THROWS_AS(sra_id_loss(f, std::vector<int>{3}, text), ContractError);
  CHECK_THROWS_AS(sra_id_loss(f, std::vector<int>{kUnlabeled}, text), ContractError);
}

TEST_CASE("total_loss names the non-finite component") {
  try {
    total_loss(1, 2, 3, std::nan(""), 0, 0, 0);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("sra_id") != std::string::npos);
  }
}

// --- online instance matching -----------------------------------------------------

TEST_CASE("oim matches the scalar oracle and keeps prototypes unit norm") {
  std::mt19937_64 rng(110);
  int cases = 0;
  for (int t = 0; t < 60; ++t) {
    const int n = 1 + static_cast<int>(rng() % 8), c = 1 + static_cast<int>(rng() % 10);
    const int q = static_cast<int>(rng() % 17), o = 2 + static_cast<int>(rng() % 6);
    nn::Rng table_rng(rng());
    IdentityLookupTable table = IdentityLookupTable::create(c, q, o, {0.5, 30.0}, table_rng);
    for (int r = 0; r < q && r < 3; ++r) table.queue.row(r) = Eigen::RowVectorXd::Random(o).normalized();
    oracle::OimState state{fixture::from_eigen(table.prototypes), fixture::from_eigen(table.queue), 0};
    for (int step = 0; step < 3; ++step) {
      Mat e;
      for (int i = 0; i < n; ++i) e.push_back(oracle::unit(oracle::random_vec(rng, static_cast<std::size_t>(o))));
      const std::vector<int> ids = random_ids(rng, n, c, true);
      const double expected = oracle::oim(e, ids, state, 30.0, 0.5);
      const OimLoss l = oim_loss(to_eigen(e), ids, table);
      CHECK(std::abs(l.value - expected) < 1e-6);
      const Vec got = flat(table.prototypes), want = oracle::flatten(state.prototypes);
      for (std::size_t k = 0; k < got.size(); ++k) CHECK(std::abs(got[k] - want[k]) < 1e-6);
      const Vec gq = flat(table.queue), wq = oracle::flatten(state.queue);
      for (std::size_t k = 0; k < gq.size(); ++k) CHECK(gq[k] == wq[k]);
      CHECK(table.queue_head == state.head);
      CHECK(table.queue_size() == q);
      for (Eigen::Index r = 0; r < table.prototypes.rows(); ++r)
        CHECK(std::abs(table.prototypes.row(r).norm() - 1.0) < 1e-12);
    }
    ++cases;
  }
  CHECK(cases >= 50);
}

TEST_CASE("oim edge cases") {
  nn::Rng rng(1);
  IdentityLookupTable table = IdentityLookupTable::create(3, 8, 4, {0.5, 30.0}, rng);
  const nn::RowMatrix e = nn::RowMatrix::Identity(4, 4);
  SUBCASE("all unlabeled batch has zero loss and advances the queue") {
    const std::vector<int> ids(4, kUnlabeled);
    const OimLoss l = oim_loss(e, ids, table);
    CHECK(l.value == 0.0);
    CHECK(table.queue_head == 4);
  }
  SUBCASE("embedding equal to its prototype saturates as the scale grows") {
    IdentityLookupTable t = table;
    t.queue.setZero();
    const nn::RowMatrix x = t.prototypes.row(1);
    const std::vector<int> ids = {2};
    double previous = 1e9;
    for (double s : {10.0, 100.0, 1000.0}) {
      t.options.scale = s;
      const double v = oim_forward(x, ids, t).value;
      CHECK(v <= previous);
      previous = v;
    }
    CHECK(previous < 1e-6);
  }
  SUBCASE("labels beyond C are rejected") {
    const std::vector<int> ids = {1, 2, 3, 4};
    CHECK_THROWS_AS(oim_loss(e, ids, table), ContractError);
  }
}
