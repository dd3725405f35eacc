#pragma once

#include <array>
#include <span>
#include <string_view>

#include <Eigen/Dense>

#include "clipvs/datamodel.hpp"
#include "clipvs/tensor.hpp"

// Training objectives. Each function returns the scalar value together with
// its analytic gradient with respect to the differentiable input; the
// pipeline splices these into the autograd graph.
namespace clipvs::losses {

using nn::RowMatrix;
using Eigen::VectorXd;

/// Numerically stable log(1 + exp(x)); exact 0 at -inf.
double softplus(double x);
double sigmoid(double x);

/// -log softmax(logits)[target]; writes d/dlogits into `grad` when non-null.
double softmax_cross_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int target,
                             Eigen::RowVectorXd* grad);

/// Cosine similarity and its gradient with respect to `f`.
double cosine(const Eigen::Ref<const Eigen::RowVectorXd>& f, const Eigen::Ref<const Eigen::RowVectorXd>& t,
              Eigen::RowVectorXd* grad_f);

struct ScalarLoss {
  double value = 0;
  RowMatrix grad;  // same shape as the differentiable input
};

// ---------------------------------------------------------------------------
// Detection (box regression + foreground/background classification)

inline constexpr int kForeground = 1;
inline constexpr int kBackground = 0;
inline constexpr int kIgnore = -1;

struct DetectionLoss {
  double value = 0;
  double classification = 0;
  double regression = 0;
  VectorXd grad_logits;  // [n]
  RowMatrix grad_deltas; // [n,4]
  bool no_labels = false;  // nothing to supervise; value is 0
};

/// Mean over labeled regions of BCE-with-logits plus smooth-L1 on foreground
/// box deltas. labels: kForeground / kBackground / kIgnore.
DetectionLoss detection_loss(const VectorXd& logits, const RowMatrix& deltas, std::span<const int> labels,
                             const RowMatrix& targets, double smooth_l1_beta = 1.0 / 9.0);

// ---------------------------------------------------------------------------
// Online instance matching

struct OimOptions {
  double momentum = 0.5;
  double scale = 30.0;  // logit scale, 1 / temperature
};

/// Per-identity prototypes plus a circular queue of unlabeled embeddings.
struct IdentityLookupTable {
  RowMatrix prototypes;  // [C, o], rows unit-norm
  RowMatrix queue;       // [Q, o]
  int queue_head = 0;
  OimOptions options;

  /// Prototypes start as random unit vectors so every row is unit-norm from the outset.
  static IdentityLookupTable create(int num_identities, int queue_size, int dim, OimOptions options,
                                    nn::Rng& rng);
  int num_identities() const { return static_cast<int>(prototypes.rows()); }
  int queue_size() const { return static_cast<int>(queue.rows()); }
  int dim() const { return static_cast<int>(prototypes.cols()); }
};

struct OimLoss {
  double value = 0;
  RowMatrix grad;  // [n, o]
  int labeled = 0;
};

/// Loss against the table as it stands (mean over labeled rows). Pure.
OimLoss oim_forward(const RowMatrix& embeddings, std::span<const IdentityId> labels,
                    const IdentityLookupTable& table);
/// Momentum update of labeled prototypes (then renormalized) and queue push of unlabeled rows.
void oim_update(const RowMatrix& embeddings, std::span<const IdentityId> labels, IdentityLookupTable& table);
/// oim_forward followed by oim_update.
OimLoss oim_loss(const RowMatrix& embeddings, std::span<const IdentityId> labels, IdentityLookupTable& table);

// ---------------------------------------------------------------------------
// Semantic-region alignment

/// Object-granularity alignment: per region,
/// -log( (c*e^{s_fore} + (1-c)*e^{s_back}) / (e^{s_fore} + e^{s_back}) ), summed over regions,
/// with s = cosine(feature, text). labels are 0/1.
ScalarLoss sra_obj_loss(const RowMatrix& features, std::span<const int> labels, const VectorXd& text_fore,
                        const VectorXd& text_back, bool normalize_by_count = false);

/// Same objective evaluated directly on the two similarity columns; used for symmetry checks.
double sra_obj_from_similarities(std::span<const double> sim_fore, std::span<const double> sim_back,
                                 std::span<const int> labels);

inline constexpr double kTextLogitScale = 100.0;

/// ID-granularity alignment: cross-entropy over C identity prompts of
/// scale * cosine(feature, text_c), summed over features.
ScalarLoss sra_id_loss(const RowMatrix& features, std::span<const IdentityId> identities,
                       const RowMatrix& text_embeddings, double logit_scale = kTextLogitScale,
                       bool normalize_by_count = false);

// ---------------------------------------------------------------------------
// Multi-level identification

/// Image-level multi-ID BCE: per frame, the class-mean BCE of sigmoid(logits) against
/// multi-hot targets; summed over frames. Gradient is w.r.t. the logits.
ScalarLoss mil_img_loss(const RowMatrix& logits, const RowMatrix& targets, bool normalize_by_count = false);

struct BoxClassLoss : ScalarLoss {
  int skipped = 0;  // unlabeled boxes
};

/// Box-level single-label CE over C identities, summed over labeled boxes.
BoxClassLoss mil_box_loss(const RowMatrix& logits, std::span<const IdentityId> identities,
                          bool normalize_by_count = false);

/// Feature-level L1 distillation: sum_j ||teacher_j - student_j||_1. Gradient w.r.t. student only.
ScalarLoss mil_fea_loss(const RowMatrix& student, const RowMatrix& teacher, bool normalize_by_count = false);

// ---------------------------------------------------------------------------

struct LossBundle {
  double det = 0, reid = 0, sra_obj = 0, sra_id = 0, mil_img = 0, mil_box = 0, mil_fea = 0;
  double total = 0;

  static constexpr std::array<std::string_view, 7> kNames = {"det", "reid", "sra_obj", "sra_id",
                                                             "mil_img", "mil_box", "mil_fea"};
  std::array<double, 7> components() const { return {det, reid, sra_obj, sra_id, mil_img, mil_box, mil_fea}; }
  double sra() const { return sra_obj + sra_id; }
  double mil() const { return mil_img + mil_box + mil_fea; }
};

/// Unweighted sum of all components. Throws TrainingError naming the first
/// non-finite component.
LossBundle total_loss(double det, double reid, double sra_obj, double sra_id, double mil_img, double mil_box,
                      double mil_fea);

}  // namespace clipvs::losses
