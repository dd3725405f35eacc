#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "clipvs/datamodel.hpp"

namespace clipvs {

// --- tracking sources --------------------------------------------------------

struct SourceTrack {
  std::string track_id;  // raw identity, global across cameras
  Box box;
  std::string object_class = "car";
  std::optional<WeatherTag> weather;
};

struct SourceFrame {
  int frame_index = 0;
  std::string image_path;  // relative to the source root
  int width = 0;
  int height = 0;
  std::vector<SourceTrack> tracks;
};

struct SourceCamera {
  std::string camera_id;
  std::vector<SourceFrame> frames;  // strictly increasing frame_index
};

struct SourceScene {
  std::string scene_id;
  WeatherTag weather = WeatherTag::kUnknown;
  std::vector<SourceCamera> cameras;
};

struct TrackingSource {
  std::string name;
  std::vector<SourceScene> scenes;
  const SourceScene* find_scene(const std::string& scene_id) const;
};

/// Throws InputError on duplicate scene/camera ids, non-increasing frame
/// indices or invalid boxes.
void validate(const TrackingSource& source);

inline constexpr int kTrackingSchemaVersion = 1;
nlohmann::json to_json(const TrackingSource& source);
TrackingSource tracking_source_from_json(const nlohmann::json& j);
TrackingSource load_tracking_json(const std::filesystem::path& path);
void save_tracking_json(const std::filesystem::path& path, const TrackingSource& source);

/// `<root>/<scene>/<camera>/gt/gt.txt` (MOT rows: frame,id,left,top,width,height,...)
/// with frames at `<camera>/img1/%06d.jpg`. Every track is a vehicle.
TrackingSource load_cityflow_source(const std::filesystem::path& root);
/// `<root>/<scene>/<camera>/annotations.csv` (header frame,track_id,class,x1,y1,x2,y2)
/// with frames at `<camera>/%06d.jpg`. Weather comes from the scene-name suffix
/// after the last '-' (day, dawn, rain, night).
TrackingSource load_synthehicle_source(const std::filesystem::path& root);

// --- building ----------------------------------------------------------------

struct BuildSpec {
  std::string name = "dataset";
  int sample_stride = 5;
  std::vector<std::string> train_scenes;
  std::vector<std::string> test_scenes;
  bool drop_pedestrians = true;
  bool drop_single_camera_ids = true;
  std::optional<std::set<WeatherTag>> weather_filter;
  std::uint64_t seed = 0;
  std::set<std::string> pedestrian_classes = {"pedestrian", "person"};
};

nlohmann::json to_json(const BuildSpec& spec);
/// Starts from the defaults and overrides present keys. Throws SpecError on unknown keys.
BuildSpec build_spec_from_json(const nlohmann::json& j);

struct BuildReport {
  int input_frames = 0;
  int sampled_frames = 0;
  int empty_frames_removed = 0;
  int pedestrian_boxes_dropped = 0;
  int single_camera_ids_dropped = 0;
  int single_camera_boxes_dropped = 0;
  int cross_split_ids_dropped = 0;
  int weather_frames_dropped = 0;
};

struct BuildResult {
  DatasetManifest train;
  DatasetManifest test;
  std::vector<QueryRecord> queries;  // crop_path "queries/<query_id>.png"
  BuildReport report;
};

/// Pure: image paths stay relative to the source root.
BuildResult build_dataset(const TrackingSource& source, const BuildSpec& spec);

/// One query per (identity, camera) pair of `manifest`, drawn with mt19937_64(seed)
/// over groups sorted by (identity, camera).
std::vector<QueryRecord> select_queries(const DatasetManifest& manifest, std::uint64_t seed);

struct DatasetStats {
  int identities = 0;
  int frames = 0;
  int boxes = 0;
  int queries = 0;
  friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

/// Distinct labeled identities, frames, boxes and queries.
DatasetStats dataset_stats(const DatasetManifest& manifest, const std::vector<QueryRecord>& queries);
nlohmann::json to_json(const DatasetStats& s);
nlohmann::json to_json(const BuildReport& r);

/// Writes train.jsonl, test.jsonl, queries.jsonl, queries/*.png and stats.json to
/// `out_dir`. Manifest image paths are rebased from `source_root` onto `out_dir`.
void write_dataset(const BuildResult& result, const std::filesystem::path& source_root,
                   const std::filesystem::path& out_dir);

// --- toy data ----------------------------------------------------------------

struct ToyConfig {
  int image_size = 64;
  int train_identities = 4;
  int test_identities = 3;
  int cameras = 2;
  int train_frames_per_camera = 16;
  int test_frames_per_camera = 8;
  bool pedestrians = true;
  bool single_camera_identity = true;
  std::uint64_t seed = 2024;
};

/// Draws synthetic rectangle frames under `root` and returns their tracking
/// source (scenes "toy-train-day" and "toy-test-night").
TrackingSource generate_toy_source(const ToyConfig& config, const std::filesystem::path& root);
/// Build spec matching generate_toy_source: stride 1, one scene per split.
BuildSpec toy_build_spec(std::uint64_t seed = 0);

}  // namespace clipvs
