#include "clipvs/losses.hpp"

#include <cmath>

#include "clipvs/errors.hpp"

namespace clipvs::losses {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softmax_cross_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int target,
                             Eigen::RowVectorXd* grad) {
  if (target < 0 || target >= logits.size()) throw ContractError("softmax_cross_entropy: target out of range");
  const double mx = logits.maxCoeff();
  Eigen::RowVectorXd e = (logits.array() - mx).exp();
  const double z = e.sum();
  if (grad) {
    *grad = e / z;
    (*grad)(target) -= 1.0;
  }
  return std::log(z) + mx - logits(target);
}

double cosine(const Eigen::Ref<const Eigen::RowVectorXd>& f, const Eigen::Ref<const Eigen::RowVectorXd>& t,
              Eigen::RowVectorXd* grad_f) {
  const double nf = f.norm(), nt = t.norm();
  if (nf == 0 || nt == 0) throw ContractError("cosine: zero vector");
  const double c = f.dot(t) / (nf * nt);
  if (grad_f) *grad_f = t / (nf * nt) - c * f / (nf * nf);
  return c;
}

DetectionLoss detection_loss(const VectorXd& logits, const RowMatrix& deltas, std::span<const int> labels,
                             const RowMatrix& targets, double beta) {
  const auto n = logits.size();
  if (deltas.rows() != n || targets.rows() != n || static_cast<Eigen::Index>(labels.size()) != n ||
      (n && (deltas.cols() != 4 || targets.cols() != 4)))
    throw ContractError("detection_loss: inconsistent input sizes");
  DetectionLoss out;
  out.grad_logits = VectorXd::Zero(n);
  out.grad_deltas = RowMatrix::Zero(n, 4);
  int labeled = 0;
  for (int y : labels) labeled += y >= 0;
  if (labeled == 0) {
    out.no_labels = true;
    return out;
  }
  const double inv = 1.0 / labeled;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0) continue;
    if (y != kForeground && y != kBackground) throw ContractError("detection_loss: label must be 1, 0 or -1");
    const double z = logits(i);
    out.classification += y == kForeground ? softplus(-z) : softplus(z);
    out.grad_logits(i) = (sigmoid(z) - y) * inv;
    if (y != kForeground) continue;
    for (int k = 0; k < 4; ++k) {
      const double d = deltas(i, k) - targets(i, k);
      const double ad = std::abs(d);
      out.regression += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
      out.grad_deltas(i, k) = (ad < beta ? d / beta : (d > 0 ? 1.0 : -1.0)) * inv;
    }
  }
  out.classification *= inv;
  out.regression *= inv;
  out.value = out.classification + out.regression;
  return out;
}

IdentityLookupTable IdentityLookupTable::create(int num_identities, int queue_size, int dim, OimOptions options,
                                                nn::Rng& rng) {
  if (num_identities < 0 || queue_size < 0 || dim <= 0) throw ContractError("lookup table: bad sizes");
  if (!(options.momentum > 0 && options.momentum < 1) || !(options.scale > 0))
    throw ContractError("lookup table: momentum must lie in (0,1) and scale be positive");
  IdentityLookupTable t;
  t.prototypes = nn::Tensor::randn({num_identities, dim}, 1.0, rng).matrix(num_identities);
  for (Eigen::Index r = 0; r < t.prototypes.rows(); ++r) t.prototypes.row(r).normalize();
  t.queue = RowMatrix::Zero(queue_size, dim);
  t.options = options;
  return t;
}

static void check_oim_inputs(const RowMatrix& emb, std::span<const IdentityId> labels,
                             const IdentityLookupTable& table) {
  if (static_cast<std::size_t>(emb.rows()) != labels.size())
    throw ContractError("oim: embeddings/labels count mismatch");
  if (emb.rows() && emb.cols() != table.dim()) throw ContractError("oim: embedding dimension mismatch");
  for (IdentityId y : labels)
    if (y != kUnlabeled && (y < 1 || y > table.num_identities()))
      throw ContractError("oim: label " + std::to_string(y) + " outside 1.." +
                          std::to_string(table.num_identities()));
}

OimLoss oim_forward(const RowMatrix& emb, std::span<const IdentityId> labels, const IdentityLookupTable& table) {
  check_oim_inputs(emb, labels, table);
  OimLoss out;
  out.grad = RowMatrix::Zero(emb.rows(), emb.cols());
  const int c = table.num_identities();
  RowMatrix bank(c + table.queue_size(), table.dim());
  bank << table.prototypes, table.queue;
  for (IdentityId y : labels) out.labeled += y != kUnlabeled;
  if (out.labeled == 0) return out;
  const double s = table.options.scale;
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    const IdentityId y = labels[static_cast<std::size_t>(i)];
    if (y == kUnlabeled) continue;
    Eigen::RowVectorXd logits = s * (bank * emb.row(i).transpose()).transpose();
    Eigen::RowVectorXd g;
    out.value += softmax_cross_entropy(logits, y - 1, &g);
    out.grad.row(i) = s * g * bank;
  }
  out.value /= out.labeled;
  out.grad /= out.labeled;
  return out;
}

void oim_update(const RowMatrix& emb, std::span<const IdentityId> labels, IdentityLookupTable& table) {
  check_oim_inputs(emb, labels, table);
  const double m = table.options.momentum;
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    const IdentityId y = labels[static_cast<std::size_t>(i)];
    if (y != kUnlabeled) {
      auto row = table.prototypes.row(y - 1);
      row = m * row + (1.0 - m) * emb.row(i);
      const double nrm = row.norm();
      if (nrm > 0) row /= nrm;
    } else if (table.queue_size() > 0) {
      table.queue.row(table.queue_head) = emb.row(i);
      table.queue_head = (table.queue_head + 1) % table.queue_size();
    }
  }
}

OimLoss oim_loss(const RowMatrix& emb, std::span<const IdentityId> labels, IdentityLookupTable& table) {
  OimLoss out = oim_forward(emb, labels, table);
  oim_update(emb, labels, table);
  return out;
}

double sra_obj_from_similarities(std::span<const double> sim_fore, std::span<const double> sim_back,
                                 std::span<const int> labels) {
  if (sim_fore.size() != labels.size() || sim_back.size() != labels.size())
    throw ContractError("sra_obj: size mismatch");
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double s1 = sim_fore[i], s2 = sim_back[i];
    const double mx = std::max(s1, s2);
    const double lse = mx + std::log(std::exp(s1 - mx) + std::exp(s2 - mx));
    total += lse - (labels[i] == 1 ? s1 : s2);
  }
  return total;
}

ScalarLoss sra_obj_loss(const RowMatrix& features, std::span<const int> labels, const VectorXd& text_fore,
                        const VectorXd& text_back, bool normalize_by_count) {
  if (static_cast<std::size_t>(features.rows()) != labels.size())
    throw ContractError("sra_obj: features/labels count mismatch");
  if (features.rows() && (features.cols() != text_fore.size() || features.cols() != text_back.size()))
    throw ContractError("sra_obj: feature and text dimensions differ");
  ScalarLoss out;
  out.grad = RowMatrix::Zero(features.rows(), features.cols());
  const Eigen::RowVectorXd tf = text_fore.transpose(), tb = text_back.transpose();
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    if (c != 0 && c != 1) throw ContractError("sra_obj: labels must be 0 or 1");
    Eigen::RowVectorXd g1, g2;
    const double s1 = cosine(features.row(i), tf, &g1);
    const double s2 = cosine(features.row(i), tb, &g2);
    const double mx = std::max(s1, s2);
    const double e1 = std::exp(s1 - mx), e2 = std::exp(s2 - mx);
    const double p1 = e1 / (e1 + e2), p2 = e2 / (e1 + e2);
    out.value += mx + std::log(e1 + e2) - (c == 1 ? s1 : s2);
    out.grad.row(i) = (p1 - (c == 1)) * g1 + (p2 - (c == 0)) * g2;
  }
  if (normalize_by_count && features.rows()) {
    out.value /= static_cast<double>(features.rows());
    out.grad /= static_cast<double>(features.rows());
  }
  return out;
}

ScalarLoss sra_id_loss(const RowMatrix& features, std::span<const IdentityId> identities,
                       const RowMatrix& text, double logit_scale, bool normalize_by_count) {
  if (static_cast<std::size_t>(features.rows()) != identities.size())
    throw ContractError("sra_id: features/identities count mismatch");
  if (features.rows() && features.cols() != text.cols())
    throw ContractError("sra_id: feature and text dimensions differ");
  const auto c = text.rows();
  ScalarLoss out;
  out.grad = RowMatrix::Zero(features.rows(), features.cols());
  for (Eigen::Index j = 0; j < features.rows(); ++j) {
    const IdentityId y = identities[static_cast<std::size_t>(j)];
    if (y < 1 || y > c)
      throw ContractError("sra_id: identity " + std::to_string(y) + " has no learned prompt");
    Eigen::RowVectorXd logits(c);
    std::vector<Eigen::RowVectorXd> dcos(static_cast<std::size_t>(c));
    for (Eigen::Index k = 0; k < c; ++k)
      logits(k) = logit_scale * cosine(features.row(j), text.row(k), &dcos[static_cast<std::size_t>(k)]);
    Eigen::RowVectorXd g;
    out.value += softmax_cross_entropy(logits, y - 1, &g);
    for (Eigen::Index k = 0; k < c; ++k) out.grad.row(j) += logit_scale * g(k) * dcos[static_cast<std::size_t>(k)];
  }
  if (normalize_by_count && features.rows()) {
    out.value /= static_cast<double>(features.rows());
    out.grad /= static_cast<double>(features.rows());
  }
  return out;
}

ScalarLoss mil_img_loss(const RowMatrix& logits, const RowMatrix& targets, bool normalize_by_count) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
    throw ContractError("mil_img: logits/targets shape mismatch");
  ScalarLoss out;
  out.grad = RowMatrix::Zero(logits.rows(), logits.cols());
  const double c = static_cast<double>(logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t)
    for (Eigen::Index l = 0; l < logits.cols(); ++l) {
      const double z = logits(t, l), y = targets(t, l);
      if (y != 0.0 && y != 1.0) throw ContractError("mil_img: targets must be 0/1");
      out.value += (y == 1.0 ? softplus(-z) : softplus(z)) / c;
      out.grad(t, l) = (sigmoid(z) - y) / c;
    }
  if (normalize_by_count && logits.rows()) {
    out.value /= static_cast<double>(logits.rows());
    out.grad /= static_cast<double>(logits.rows());
  }
  return out;
}

BoxClassLoss mil_box_loss(const RowMatrix& logits, std::span<const IdentityId> identities,
                          bool normalize_by_count) {
  if (static_cast<std::size_t>(logits.rows()) != identities.size())
    throw ContractError("mil_box: logits/identities count mismatch");
  BoxClassLoss out;
  out.grad = RowMatrix::Zero(logits.rows(), logits.cols());
  int used = 0;
  for (Eigen::Index j = 0; j < logits.rows(); ++j) {
    const IdentityId y = identities[static_cast<std::size_t>(j)];
    if (y == kUnlabeled) {
      ++out.skipped;
      continue;
    }
    if (y < 1 || y > logits.cols()) throw ContractError("mil_box: identity outside 1..C");
    Eigen::RowVectorXd g;
    out.value += softmax_cross_entropy(logits.row(j), y - 1, &g);
    out.grad.row(j) = g;
    ++used;
  }
  if (normalize_by_count && used) {
    out.value /= used;
    out.grad /= used;
  }
  return out;
}

ScalarLoss mil_fea_loss(const RowMatrix& student, const RowMatrix& teacher, bool normalize_by_count) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols())
    throw ContractError("mil_fea: student/teacher dimension mismatch");
  ScalarLoss out;
  const RowMatrix diff = student - teacher;
  out.value = diff.cwiseAbs().sum();
  out.grad = diff.unaryExpr([](double d) { return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0); });
  if (normalize_by_count && student.rows()) {
    out.value /= static_cast<double>(student.rows());
    out.grad /= static_cast<double>(student.rows());
  }
  return out;
}

LossBundle total_loss(double det, double reid, double sra_obj, double sra_id, double mil_img, double mil_box,
                      double mil_fea) {
  LossBundle b{det, reid, sra_obj, sra_id, mil_img, mil_box, mil_fea, 0.0};
  const auto comps = b.components();
  for (std::size_t i = 0; i < comps.size(); ++i)
    if (!std::isfinite(comps[i]))
      throw TrainingError("non-finite loss component '" + std::string(LossBundle::kNames[i]) + "'");
  b.total = det + reid + (sra_obj + sra_id) + (mil_img + mil_box + mil_fea);
  return b;
}

}  // namespace clipvs::losses
