// Deliberately naive: no sorting, no Eigen, no shared helpers with eval.cpp.
#include <cmath>

#include "clipvs/errors.hpp"
#include "clipvs/eval.hpp"

namespace clipvs {

namespace {

double naive_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double naive_iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  return inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter);
}

const FrameRecord* lookup(const DatasetManifest& gt, const std::string& id) {
  for (const auto& f : gt.frames)
    if (f.frame_id == id) return &f;
  return nullptr;
}

}  // namespace

EvalReport oracle_evaluate(const std::vector<QueryEmbedding>& queries, const Gallery& gallery,
                           const DatasetManifest& gt, const EvalOptions& options) {
  std::size_t detections = 0, gt_boxes = 0;
  for (const auto& f : gallery) detections += f.detections.size();
  for (const auto& f : gt.frames) gt_boxes += f.annotations.size();
  if (gallery.size() > 50 || gt.frames.size() > 50 || detections > 200 || gt_boxes > 200)
    throw ContractError("oracle_evaluate: instance too large (limit 50 frames, 200 boxes)");
  if (queries.empty()) throw ReportError("oracle_evaluate: no queries");
  if (gallery.empty()) throw ReportError("oracle_evaluate: empty gallery");

  EvalReport report;
  for (const auto& q : queries) {
    struct Candidate {
      std::size_t frame, index;
      double score;
      bool taken;
    };
    std::vector<Candidate> cands;
    for (std::size_t f = 0; f < gallery.size(); ++f) {
      if (options.exclude_query_frame && gallery[f].frame_id == q.source_frame_id) continue;
      for (std::size_t i = 0; i < gallery[f].detections.size(); ++i) {
        const auto& d = gallery[f].detections[i];
        if (d.embedding.size() != q.embedding.size()) throw ContractError("oracle_evaluate: dimension mismatch");
        if (options.min_detection_score && d.score < *options.min_detection_score) continue;
        cands.push_back({f, i, naive_cosine(q.embedding, d.embedding), false});
      }
    }

    int num_gt = 0;
    for (const auto& f : gallery) {
      if (options.exclude_query_frame && f.frame_id == q.source_frame_id) continue;
      const FrameRecord* rec = lookup(gt, f.frame_id);
      if (!rec) throw ContractError("oracle_evaluate: frame missing from ground truth");
      for (const auto& a : rec->annotations)
        if (a.identity == q.identity && q.identity != kUnlabeled) ++num_gt;
    }
    if (num_gt == 0) {
      ++report.excluded_queries;
      continue;
    }

    // Selection by repeated maximum; the earliest candidate wins ties.
    std::vector<std::pair<std::string, std::size_t>> consumed;  // (frame id, annotation index)
    std::vector<bool> flags;
    for (std::size_t round = 0; round < cands.size(); ++round) {
      std::size_t pick = cands.size();
      for (std::size_t c = 0; c < cands.size(); ++c)
        if (!cands[c].taken && (pick == cands.size() || cands[c].score > cands[pick].score)) pick = c;
      cands[pick].taken = true;
      const auto& frame = gallery[cands[pick].frame];
      const Box& box = frame.detections[cands[pick].index].box;
      const FrameRecord* rec = lookup(gt, frame.frame_id);
      std::size_t best = rec->annotations.size();
      double best_iou = 0.5;
      for (std::size_t a = 0; a < rec->annotations.size(); ++a) {
        if (rec->annotations[a].identity != q.identity) continue;
        bool gone = false;
        for (const auto& c : consumed) gone = gone || (c.first == frame.frame_id && c.second == a);
        if (gone) continue;
        const double v = naive_iou(box, rec->annotations[a].box);
        if (v > best_iou) {
          best_iou = v;
          best = a;
        }
      }
      if (best < rec->annotations.size()) consumed.push_back({frame.frame_id, best});
      flags.push_back(best < rec->annotations.size());
    }

    double ap = 0;
    for (std::size_t k = 0; k < flags.size(); ++k) {
      if (!flags[k]) continue;
      int hits = 0;
      for (std::size_t j = 0; j <= k; ++j) hits += flags[j] ? 1 : 0;
      ap += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
    QueryResult r;
    r.query_id = q.query_id;
    if (const FrameRecord* src = lookup(gt, q.source_frame_id)) r.weather = src->weather;
    r.num_gt = num_gt;
    r.ap = ap / num_gt;
    r.top1 = !flags.empty() && flags[0];
    report.per_query.push_back(r);
  }

  double ap_sum = 0, top_sum = 0;
  for (const auto& r : report.per_query) {
    ap_sum += r.ap;
    top_sum += r.top1 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(report.per_query.size());
  report.mAP = report.per_query.empty() ? 0.0 : ap_sum / n;
  report.top1 = report.per_query.empty() ? 0.0 : top_sum / n;
  for (const auto& r : report.per_query) {
    const std::string w = to_string(r.weather);
    double wa = 0, wt = 0;
    int count = 0;
    for (const auto& s : report.per_query)
      if (to_string(s.weather) == w) {
        wa += s.ap;
        wt += s.top1 ? 1.0 : 0.0;
        ++count;
      }
    report.per_weather[w] = {wa / count, wt / count, count};
  }
  return report;
}

}  // namespace clipvs
