#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clipvs/datamodel.hpp"

namespace clipvs {

inline constexpr double kMatchIou = 0.5;

struct GalleryEntry {
  Box box;
  double score = 0;  // detector confidence
  std::vector<double> embedding;
};

struct GalleryFrame {
  std::string frame_id;
  std::vector<GalleryEntry> detections;
};

/// Detections for every frame of the test manifest, in manifest order.
using Gallery = std::vector<GalleryFrame>;

struct QueryEmbedding {
  std::string query_id;
  std::string source_frame_id;
  IdentityId identity = kUnlabeled;
  std::vector<double> embedding;
};

/// Similarity of one gallery detection to a query; `frame`/`index` address the gallery.
struct ScoredDetection {
  int frame = 0;
  int index = 0;
  double score = 0;
};

struct RankedEntry {
  std::string frame_id;
  Box box;
  double score = 0;
  bool tp = false;
};

struct RankedResult {
  std::string query_id;
  std::vector<RankedEntry> entries;  // non-increasing score
  int num_gt = 0;
};

struct EvalOptions {
  bool exclude_query_frame = false;
  std::optional<double> min_detection_score;
};

struct QueryResult {
  std::string query_id;
  WeatherTag weather = WeatherTag::kUnknown;
  int num_gt = 0;
  double ap = 0;
  bool top1 = false;
};

struct WeatherSummary {
  double mAP = 0;
  double top1 = 0;
  int queries = 0;
};

struct EvalReport {
  double mAP = 0;
  double top1 = 0;
  std::vector<QueryResult> per_query;  // queries with at least one positive
  int excluded_queries = 0;            // no same-identity ground truth in the gallery
  std::map<std::string, WeatherSummary> per_weather;
};

/// Cosine similarity of the query to every gallery detection, in gallery order.
/// Throws ContractError on a dimension mismatch.
std::vector<ScoredDetection> score_gallery(const std::vector<double>& query, const Gallery& gallery,
                                           const EvalOptions& options = {});

/// Sorts by descending score (ties keep gallery order) and applies the
/// one-to-one IoU-and-identity rule against `gt`.
RankedResult rank_and_match(const QueryEmbedding& query, std::vector<ScoredDetection> scored,
                            const Gallery& gallery, const DatasetManifest& gt, const EvalOptions& options = {});
RankedResult match_and_rank(const QueryEmbedding& query, const Gallery& gallery, const DatasetManifest& gt,
                            const EvalOptions& options = {});

/// Sum of precision at each true positive over num_gt. Throws ContractError for num_gt < 1.
double average_precision(const std::vector<bool>& tp_flags, int num_gt);
double average_precision(const RankedResult& ranked);

/// Throws ReportError for an empty query set or gallery.
EvalReport evaluate(const std::vector<QueryEmbedding>& queries, const Gallery& gallery, const DatasetManifest& gt,
                    const EvalOptions& options = {});

/// Exhaustive recomputation for small instances (<= 50 frames, <= 200 boxes).
EvalReport oracle_evaluate(const std::vector<QueryEmbedding>& queries, const Gallery& gallery,
                           const DatasetManifest& gt, const EvalOptions& options = {});

std::string format_report(const EvalReport& report);
nlohmann::json to_json(const EvalReport& report);

// Line-delimited detections: header {"schema":"clipvs.detections","version":1},
// then one {frame_id, box, score, embedding} record per line.
void write_detections(std::ostream& out, const Gallery& gallery);
/// Frames absent from the file get no detections; unknown frame ids raise ParseError.
Gallery read_detections(std::istream& in, const DatasetManifest& manifest);
void save_detections(const std::filesystem::path& path, const Gallery& gallery);
Gallery load_detections(const std::filesystem::path& path, const DatasetManifest& manifest);

}  // namespace clipvs
