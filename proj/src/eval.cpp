#include "clipvs/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <Eigen/Dense>

#include <cmath>
#include <numeric>

#include "clipvs/errors.hpp"

namespace clipvs {

using nlohmann::json;

std::vector<ScoredDetection> score_gallery(const std::vector<double>& query, const Gallery& gallery,
                                           const EvalOptions& options) {
  // Plain sequential sums keep scores independent of buffer alignment.
  const double qn = std::sqrt(std::inner_product(query.begin(), query.end(), query.begin(), 0.0));
  if (qn == 0) throw ContractError("score_gallery: zero query embedding");
  std::vector<ScoredDetection> out;
  for (std::size_t f = 0; f < gallery.size(); ++f) {
    const auto& dets = gallery[f].detections;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const auto& e = dets[i].embedding;
      if (e.size() != query.size())
        throw ContractError("score_gallery: query dimension " + std::to_string(query.size()) +
                            " vs gallery dimension " + std::to_string(e.size()) + " in frame " + gallery[f].frame_id);
      if (options.min_detection_score && dets[i].score < *options.min_detection_score) continue;
      const double gn = std::sqrt(std::inner_product(e.begin(), e.end(), e.begin(), 0.0));
      const double dot = std::inner_product(query.begin(), query.end(), e.begin(), 0.0);
      out.push_back({static_cast<int>(f), static_cast<int>(i), gn > 0 ? dot / (qn * gn) : 0.0});
    }
  }
  return out;
}

RankedResult rank_and_match(const QueryEmbedding& query, std::vector<ScoredDetection> scored,
                            const Gallery& gallery, const DatasetManifest& gt, const EvalOptions& options) {
  RankedResult r;
  r.query_id = query.query_id;
  std::stable_sort(scored.begin(), scored.end(),
                   [](const ScoredDetection& a, const ScoredDetection& b) { return a.score > b.score; });

  // Ground-truth boxes of the query identity, per gallery frame.
  std::vector<std::vector<Box>> positives(gallery.size());
  std::vector<std::vector<char>> used(gallery.size());
  for (std::size_t f = 0; f < gallery.size(); ++f) {
    const bool skip = options.exclude_query_frame && gallery[f].frame_id == query.source_frame_id;
    const FrameRecord* rec = gt.find_frame(gallery[f].frame_id);
    if (!rec) throw ContractError("rank_and_match: gallery frame '" + gallery[f].frame_id + "' not in ground truth");
    if (skip) continue;
    for (const auto& a : rec->annotations)
      if (a.identity == query.identity && query.identity != kUnlabeled) positives[f].push_back(a.box);
    used[f].assign(positives[f].size(), 0);
    r.num_gt += static_cast<int>(positives[f].size());
  }

  for (const auto& s : scored) {
    const auto f = static_cast<std::size_t>(s.frame);
    if (options.exclude_query_frame && gallery[f].frame_id == query.source_frame_id) continue;
    const auto& det = gallery[f].detections[static_cast<std::size_t>(s.index)];
    RankedEntry e{gallery[f].frame_id, det.box, s.score, false};
    int best = -1;
    double best_iou = kMatchIou;
    if (det.box.valid()) {
      for (std::size_t g = 0; g < positives[f].size(); ++g) {
        if (used[f][g]) continue;
        const double v = iou(det.box, positives[f][g]);
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
    }
    if (best >= 0) {
      used[f][static_cast<std::size_t>(best)] = 1;
      e.tp = true;
    }
    r.entries.push_back(std::move(e));
  }
  return r;
}

RankedResult match_and_rank(const QueryEmbedding& query, const Gallery& gallery, const DatasetManifest& gt,
                            const EvalOptions& options) {
  return rank_and_match(query, score_gallery(query.embedding, gallery, options), gallery, gt, options);
}

double average_precision(const std::vector<bool>& tp_flags, int num_gt) {
  if (num_gt < 1) throw ContractError("average_precision: num_gt must be >= 1");
  double sum = 0;
  int hits = 0;
  for (std::size_t k = 0; k < tp_flags.size(); ++k) {
    if (!tp_flags[k]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return sum / num_gt;
}

double average_precision(const RankedResult& ranked) {
  std::vector<bool> flags;
  for (const auto& e : ranked.entries) flags.push_back(e.tp);
  return average_precision(flags, ranked.num_gt);
}

namespace {

void summarize(EvalReport& report) {
  double ap_sum = 0, top_sum = 0;
  std::map<std::string, std::pair<double, double>> sums;
  for (const auto& q : report.per_query) {
    ap_sum += q.ap;
    top_sum += q.top1 ? 1.0 : 0.0;
    auto& s = report.per_weather[to_string(q.weather)];
    ++s.queries;
    sums[to_string(q.weather)].first += q.ap;
    sums[to_string(q.weather)].second += q.top1 ? 1.0 : 0.0;
  }
  const auto n = report.per_query.size();
  report.mAP = n ? ap_sum / static_cast<double>(n) : 0.0;
  report.top1 = n ? top_sum / static_cast<double>(n) : 0.0;
  for (auto& [w, s] : report.per_weather) {
    s.mAP = sums[w].first / s.queries;
    s.top1 = sums[w].second / s.queries;
  }
}

}  // namespace

EvalReport evaluate(const std::vector<QueryEmbedding>& queries, const Gallery& gallery, const DatasetManifest& gt,
                    const EvalOptions& options) {
  if (queries.empty()) throw ReportError("evaluate: no queries");
  if (gallery.empty()) throw ReportError("evaluate: empty gallery");
  EvalReport report;
  for (const auto& q : queries) {
    const RankedResult r = match_and_rank(q, gallery, gt, options);
    if (r.num_gt == 0) {
      ++report.excluded_queries;
      continue;
    }
    QueryResult qr;
    qr.query_id = q.query_id;
    if (const FrameRecord* f = gt.find_frame(q.source_frame_id)) qr.weather = f->weather;
    qr.num_gt = r.num_gt;
    qr.ap = average_precision(r);
    qr.top1 = !r.entries.empty() && r.entries.front().tp;
    report.per_query.push_back(std::move(qr));
  }
  summarize(report);
  return report;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "queries evaluated: " << report.per_query.size() << " (excluded " << report.excluded_queries << ")\n";
  out << "mAP:   " << report.mAP << "\n";
  out << "Top-1: " << report.top1 << "\n";
  if (!report.per_weather.empty()) {
    out << "by weather:\n";
    for (const auto& [w, s] : report.per_weather)
      out << "  " << std::left << std::setw(8) << w << " mAP " << s.mAP << "  Top-1 " << s.top1 << "  ("
          << s.queries << " queries)\n";
  }
  return out.str();
}

json to_json(const EvalReport& report) {
  json per_query = json::array();
  for (const auto& q : report.per_query)
    per_query.push_back({{"query_id", q.query_id}, {"weather", to_string(q.weather)}, {"num_gt", q.num_gt},
                         {"ap", q.ap}, {"top1", q.top1}});
  json weather = json::object();
  for (const auto& [w, s] : report.per_weather) weather[w] = {{"mAP", s.mAP}, {"top1", s.top1}, {"queries", s.queries}};
  return {{"mAP", report.mAP}, {"top1", report.top1}, {"excluded_queries", report.excluded_queries},
          {"per_weather", weather}, {"per_query", per_query}};
}

void write_detections(std::ostream& out, const Gallery& gallery) {
  out << json{{"schema", "clipvs.detections"}, {"version", 1}}.dump() << '\n';
  for (const auto& f : gallery)
    for (const auto& d : f.detections)
      out << json{{"frame_id", f.frame_id},
                  {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
                  {"score", d.score},
                  {"embedding", d.embedding}}
                 .dump()
          << '\n';
}

Gallery read_detections(std::istream& in, const DatasetManifest& manifest) {
  Gallery gallery;
  std::map<std::string, std::size_t> index;
  for (const auto& f : manifest.frames) {
    index[f.frame_id] = gallery.size();
    gallery.push_back({f.frame_id, {}});
  }
  std::string line;
  std::size_t n = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("detections: ") + e.what(), n);
    }
    try {
      if (!header) {
        if (j.value("schema", "") != "clipvs.detections" || j.value("version", 0) != 1)
          throw ParseError("detections: missing or unsupported header", n);
        header = true;
        continue;
      }
      const auto id = j.at("frame_id").get<std::string>();
      const auto it = index.find(id);
      if (it == index.end()) throw ParseError("detections: unknown frame '" + id + "'", n);
      const auto b = j.at("box").get<std::vector<double>>();
      if (b.size() != 4) throw ParseError("detections: box needs 4 numbers", n);
      GalleryEntry e{{b[0], b[1], b[2], b[3]}, j.at("score").get<double>(),
                     j.at("embedding").get<std::vector<double>>()};
      gallery[it->second].detections.push_back(std::move(e));
    } catch (const json::exception& e) {
      throw ParseError(std::string("detections: ") + e.what(), n);
    }
  }
  if (!header) throw ParseError("detections: empty file", 0);
  return gallery;
}

void save_detections(const std::filesystem::path& path, const Gallery& gallery) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  write_detections(out, gallery);
}

Gallery load_detections(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return read_detections(in, manifest);
}

}  // namespace clipvs
