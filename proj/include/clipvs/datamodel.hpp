#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace clipvs {

/// Identity label. Contiguous labels run 1..C; detected vehicles without an
/// identity carry kUnlabeled.
using IdentityId = int;
inline constexpr IdentityId kUnlabeled = -1;

/// Axis-aligned rectangle in pixel coordinates, half-open corners (x1, y1, x2, y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return valid() ? width() * height() : 0.0; }
  bool valid() const { return x1 < x2 && y1 < y2; }
  Box clipped(double frame_width, double frame_height) const;
  Box scaled(double sx, double sy) const { return {x1 * sx, y1 * sy, x2 * sx, y2 * sy}; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union. Throws ContractError on a degenerate rectangle.
double iou(const Box& a, const Box& b);

struct VehicleAttributes {
  std::string color;
  std::string vtype;
  friend bool operator==(const VehicleAttributes&, const VehicleAttributes&) = default;
};

struct BoxAnnotation {
  Box box;
  IdentityId identity = kUnlabeled;
  std::string camera_id;
  std::optional<VehicleAttributes> attributes;
  friend bool operator==(const BoxAnnotation&, const BoxAnnotation&) = default;
};

enum class WeatherTag { kDay, kDawn, kRain, kNight, kUnknown };
std::string to_string(WeatherTag tag);
WeatherTag weather_from_string(const std::string& s);

struct FrameRecord {
  std::string frame_id;
  std::string image_path;  // relative to the manifest's directory
  std::string scene_id;
  std::string camera_id;
  WeatherTag weather = WeatherTag::kUnknown;
  int width = 0;
  int height = 0;
  std::vector<BoxAnnotation> annotations;
  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

enum class Split { kTrain, kTest };
std::string to_string(Split split);

struct DatasetManifest {
  std::string name;
  Split split = Split::kTrain;
  std::vector<FrameRecord> frames;
  int num_identities = 0;
  /// Raw source identity (as text) -> contiguous label.
  std::map<std::string, IdentityId> identity_remap;

  std::size_t num_boxes() const;
  const FrameRecord* find_frame(const std::string& frame_id) const;
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct QueryRecord {
  std::string query_id;
  std::string source_frame_id;
  BoxAnnotation box;
  std::string crop_path;
  friend bool operator==(const QueryRecord&, const QueryRecord&) = default;
};

/// Checks every manifest invariant; throws IntegrityError on violation.
void validate(const DatasetManifest& manifest);
/// Train and test splits of one dataset must not share raw identities.
void check_disjoint(const DatasetManifest& train, const DatasetManifest& test);
void validate_queries(const std::vector<QueryRecord>& queries, const DatasetManifest& test);

// Line-delimited JSON: a header line followed by one record per line.
inline constexpr int kManifestSchemaVersion = 1;

DatasetManifest read_manifest(std::istream& in);
void write_manifest(std::ostream& out, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
/// Loads both splits and rejects shared identities.
std::pair<DatasetManifest, DatasetManifest> load_manifest_pair(const std::filesystem::path& train,
                                                               const std::filesystem::path& test);

std::vector<QueryRecord> read_queries(std::istream& in);
void write_queries(std::ostream& out, const std::vector<QueryRecord>& queries);
std::vector<QueryRecord> load_queries(const std::filesystem::path& path);
void save_queries(const std::filesystem::path& path, const std::vector<QueryRecord>& queries);

}  // namespace clipvs
