#include "clipvs/benchmark.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "clipvs/errors.hpp"
#include "clipvs/image.hpp"

namespace clipvs {

namespace fs = std::filesystem;
using nlohmann::json;

const SourceScene* TrackingSource::find_scene(const std::string& scene_id) const {
  for (const auto& s : scenes)
    if (s.scene_id == scene_id) return &s;
  return nullptr;
}

void validate(const TrackingSource& source) {
  std::set<std::string> scene_ids;
  for (const auto& scene : source.scenes) {
    if (scene.scene_id.empty() || !scene_ids.insert(scene.scene_id).second)
      throw InputError("tracking source: empty or duplicate scene id '" + scene.scene_id + "'");
    std::set<std::string> cams;
    for (const auto& cam : scene.cameras) {
      if (cam.camera_id.empty() || !cams.insert(cam.camera_id).second)
        throw InputError("tracking source: empty or duplicate camera '" + cam.camera_id + "' in " + scene.scene_id);
      int last = -1;
      bool first = true;
      for (const auto& f : cam.frames) {
        if (!first && f.frame_index <= last)
          throw InputError("tracking source: frame indices not strictly increasing in " + scene.scene_id + "/" +
                           cam.camera_id + " at " + std::to_string(f.frame_index));
        first = false;
        last = f.frame_index;
        for (const auto& t : f.tracks)
          if (!t.box.valid() || t.track_id.empty())
            throw InputError("tracking source: invalid track in " + scene.scene_id + "/" + cam.camera_id +
                             " frame " + std::to_string(f.frame_index));
      }
    }
  }
}

// --- JSON --------------------------------------------------------------------

json to_json(const TrackingSource& source) {
  json scenes = json::array();
  for (const auto& s : source.scenes) {
    json cams = json::array();
    for (const auto& c : s.cameras) {
      json frames = json::array();
      for (const auto& f : c.frames) {
        json tracks = json::array();
        for (const auto& t : f.tracks) {
          json jt = {{"track_id", t.track_id},
                     {"box", {t.box.x1, t.box.y1, t.box.x2, t.box.y2}},
                     {"class", t.object_class}};
          if (t.weather) jt["weather"] = to_string(*t.weather);
          tracks.push_back(std::move(jt));
        }
        frames.push_back({{"frame_index", f.frame_index}, {"image_path", f.image_path}, {"width", f.width},
                          {"height", f.height}, {"tracks", std::move(tracks)}});
      }
      cams.push_back({{"camera_id", c.camera_id}, {"frames", std::move(frames)}});
    }
    scenes.push_back({{"scene_id", s.scene_id}, {"weather", to_string(s.weather)}, {"cameras", std::move(cams)}});
  }
  return {{"schema", "clipvs.tracking"}, {"version", kTrackingSchemaVersion}, {"name", source.name},
          {"scenes", std::move(scenes)}};
}

TrackingSource tracking_source_from_json(const json& j) {
  try {
    if (j.at("schema").get<std::string>() != "clipvs.tracking")
      throw InputError("tracking source: schema must be 'clipvs.tracking'");
    if (j.at("version").get<int>() != kTrackingSchemaVersion)
      throw InputError("tracking source: unsupported version " + j.at("version").dump());
    TrackingSource src;
    src.name = j.value("name", std::string("source"));
    for (const auto& js : j.at("scenes")) {
      SourceScene s;
      s.scene_id = js.at("scene_id").get<std::string>();
      s.weather = weather_from_string(js.value("weather", std::string("unknown")));
      for (const auto& jc : js.at("cameras")) {
        SourceCamera c;
        c.camera_id = jc.at("camera_id").get<std::string>();
        for (const auto& jf : jc.at("frames")) {
          SourceFrame f;
          f.frame_index = jf.at("frame_index").get<int>();
          f.image_path = jf.at("image_path").get<std::string>();
          f.width = jf.at("width").get<int>();
          f.height = jf.at("height").get<int>();
          for (const auto& jt : jf.at("tracks")) {
            SourceTrack t;
            const auto& id = jt.at("track_id");
            t.track_id = id.is_string() ? id.get<std::string>() : id.dump();
            const auto b = jt.at("box").get<std::vector<double>>();
            if (b.size() != 4) throw InputError("tracking source: box needs 4 numbers");
            t.box = {b[0], b[1], b[2], b[3]};
            t.object_class = jt.value("class", std::string("car"));
            if (jt.contains("weather")) t.weather = weather_from_string(jt.at("weather").get<std::string>());
            f.tracks.push_back(std::move(t));
          }
          c.frames.push_back(std::move(f));
        }
        s.cameras.push_back(std::move(c));
      }
      src.scenes.push_back(std::move(s));
    }
    validate(src);
    return src;
  } catch (const json::exception& e) {
    throw InputError(std::string("tracking source: ") + e.what());
  } catch (const ContractError& e) {
    throw InputError(std::string("tracking source: ") + e.what());
  }
}

TrackingSource load_tracking_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open tracking source " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InputError("tracking source " + path.string() + ": " + e.what());
  }
  return tracking_source_from_json(j);
}

void save_tracking_json(const fs::path& path, const TrackingSource& source) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << to_json(source).dump(1) << '\n';
}

// --- adapters ----------------------------------------------------------------

namespace {

std::vector<fs::path> sorted_dirs(const fs::path& p) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const auto a = cell.find_first_not_of(" \t\r");
    const auto b = cell.find_last_not_of(" \t\r");
    out.push_back(a == std::string::npos ? "" : cell.substr(a, b - a + 1));
  }
  return out;
}

double to_double(const std::string& s, const fs::path& file, int line) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(file.string() + ": bad number '" + s + "'", line);
  }
}

std::string frame_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d.jpg", index);
  return buf;
}

// Frames of one camera share a resolution; read it from the first image.
std::pair<int, int> camera_resolution(const fs::path& image) {
  const cv::Mat m = read_image(image);
  return {m.cols, m.rows};
}

SourceCamera assemble_camera(const std::string& camera_id, std::map<int, std::vector<SourceTrack>> rows,
                             const fs::path& root, const std::string& rel_dir) {
  SourceCamera cam;
  cam.camera_id = camera_id;
  if (rows.empty()) return cam;
  const auto [w, h] = camera_resolution(root / rel_dir / frame_name(rows.begin()->first));
  for (auto& [index, tracks] : rows) {
    SourceFrame f;
    f.frame_index = index;
    f.image_path = rel_dir + "/" + frame_name(index);
    f.width = w;
    f.height = h;
    f.tracks = std::move(tracks);
    cam.frames.push_back(std::move(f));
  }
  return cam;
}

}  // namespace

TrackingSource load_cityflow_source(const fs::path& root) {
  if (!fs::is_directory(root)) throw InputError("cityflow source: not a directory: " + root.string());
  TrackingSource src;
  src.name = root.filename().string();
  for (const auto& scene_dir : sorted_dirs(root)) {
    SourceScene scene;
    scene.scene_id = scene_dir.filename().string();
    for (const auto& cam_dir : sorted_dirs(scene_dir)) {
      const fs::path gt = cam_dir / "gt" / "gt.txt";
      if (!fs::exists(gt)) continue;
      std::ifstream in(gt);
      std::map<int, std::vector<SourceTrack>> rows;
      std::string line;
      int n = 0;
      while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = split_csv(line);
        if (cells.size() < 6) throw ParseError(gt.string() + ": expected at least 6 columns", n);
        const int frame = static_cast<int>(to_double(cells[0], gt, n));
        const double x = to_double(cells[2], gt, n), y = to_double(cells[3], gt, n);
        const double w = to_double(cells[4], gt, n), h = to_double(cells[5], gt, n);
        SourceTrack t;
        t.track_id = cells[1];
        t.box = {x, y, x + w, y + h};
        t.object_class = "car";
        rows[frame].push_back(std::move(t));
      }
      const std::string rel = scene.scene_id + "/" + cam_dir.filename().string() + "/img1";
      scene.cameras.push_back(assemble_camera(cam_dir.filename().string(), std::move(rows), root, rel));
    }
    if (!scene.cameras.empty()) src.scenes.push_back(std::move(scene));
  }
  validate(src);
  return src;
}

TrackingSource load_synthehicle_source(const fs::path& root) {
  if (!fs::is_directory(root)) throw InputError("synthehicle source: not a directory: " + root.string());
  TrackingSource src;
  src.name = root.filename().string();
  for (const auto& scene_dir : sorted_dirs(root)) {
    SourceScene scene;
    scene.scene_id = scene_dir.filename().string();
    const auto dash = scene.scene_id.rfind('-');
    if (dash != std::string::npos) {
      try {
        scene.weather = weather_from_string(scene.scene_id.substr(dash + 1));
      } catch (const ContractError&) {
        scene.weather = WeatherTag::kUnknown;
      }
    }
    for (const auto& cam_dir : sorted_dirs(scene_dir)) {
      const fs::path csv = cam_dir / "annotations.csv";
      if (!fs::exists(csv)) continue;
      std::ifstream in(csv);
      std::string line;
      int n = 0;
      std::map<std::string, std::size_t> col;
      std::map<int, std::vector<SourceTrack>> rows;
      while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = split_csv(line);
        if (col.empty()) {
          for (std::size_t i = 0; i < cells.size(); ++i) col[cells[i]] = i;
          for (const char* k : {"frame", "track_id", "class", "x1", "y1", "x2", "y2"})
            if (!col.count(k)) throw ParseError(csv.string() + ": header lacks column '" + k + "'", n);
          continue;
        }
        auto at = [&](const char* k) -> const std::string& {
          const auto i = col.at(k);
          if (i >= cells.size()) throw ParseError(csv.string() + ": short row", n);
          return cells[i];
        };
        SourceTrack t;
        t.track_id = at("track_id");
        t.object_class = at("class");
        t.box = {to_double(at("x1"), csv, n), to_double(at("y1"), csv, n), to_double(at("x2"), csv, n),
                 to_double(at("y2"), csv, n)};
        rows[static_cast<int>(to_double(at("frame"), csv, n))].push_back(std::move(t));
      }
      const std::string rel = scene.scene_id + "/" + cam_dir.filename().string();
      scene.cameras.push_back(assemble_camera(cam_dir.filename().string(), std::move(rows), root, rel));
    }
    if (!scene.cameras.empty()) src.scenes.push_back(std::move(scene));
  }
  validate(src);
  return src;
}

// --- builder -------------------------------------------------------------------

namespace {

// Numeric ids order numerically, everything else lexicographically after them.
bool raw_id_less(const std::string& a, const std::string& b) {
  long long x = 0, y = 0;
  const auto ra = std::from_chars(a.data(), a.data() + a.size(), x);
  const auto rb = std::from_chars(b.data(), b.data() + b.size(), y);
  const bool na = ra.ec == std::errc() && ra.ptr == a.data() + a.size();
  const bool nb = rb.ec == std::errc() && rb.ptr == b.data() + b.size();
  if (na && nb) return x != y ? x < y : a < b;
  if (na != nb) return na;
  return a < b;
}

struct Pending {
  FrameRecord frame;
  std::vector<std::string> raw_ids;  // parallel to frame.annotations
};

std::string make_frame_id(const std::string& scene, const std::string& camera, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return scene + "/" + camera + "/" + buf;
}

}  // namespace

json to_json(const BuildSpec& spec) {
  json j = {{"name", spec.name},
            {"sample_stride", spec.sample_stride},
            {"train_scenes", spec.train_scenes},
            {"test_scenes", spec.test_scenes},
            {"drop_pedestrians", spec.drop_pedestrians},
            {"drop_single_camera_ids", spec.drop_single_camera_ids},
            {"seed", spec.seed},
            {"pedestrian_classes", spec.pedestrian_classes}};
  if (spec.weather_filter) {
    json w = json::array();
    for (WeatherTag t : *spec.weather_filter) w.push_back(to_string(t));
    j["weather_filter"] = w;
  } else {
    j["weather_filter"] = nullptr;
  }
  return j;
}

BuildSpec build_spec_from_json(const json& j) {
  static const std::set<std::string> kKnown = {"name", "sample_stride", "train_scenes", "test_scenes",
                                               "drop_pedestrians", "drop_single_camera_ids", "weather_filter",
                                               "seed", "pedestrian_classes"};
  if (!j.is_object()) throw SpecError("build spec: expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!kKnown.count(k)) throw SpecError("build spec: unknown key '" + k + "'");
  BuildSpec s;
  try {
    s.name = j.value("name", s.name);
    s.sample_stride = j.value("sample_stride", s.sample_stride);
    s.train_scenes = j.value("train_scenes", s.train_scenes);
    s.test_scenes = j.value("test_scenes", s.test_scenes);
    s.drop_pedestrians = j.value("drop_pedestrians", s.drop_pedestrians);
    s.drop_single_camera_ids = j.value("drop_single_camera_ids", s.drop_single_camera_ids);
    s.seed = j.value("seed", s.seed);
    s.pedestrian_classes = j.value("pedestrian_classes", s.pedestrian_classes);
    if (j.contains("weather_filter") && !j.at("weather_filter").is_null()) {
      std::set<WeatherTag> tags;
      for (const auto& w : j.at("weather_filter")) tags.insert(weather_from_string(w.get<std::string>()));
      s.weather_filter = tags;
    }
  } catch (const json::exception& e) {
    throw SpecError(std::string("build spec: ") + e.what());
  } catch (const ContractError& e) {
    throw SpecError(std::string("build spec: ") + e.what());
  }
  if (s.sample_stride < 1) throw SpecError("build spec: sample_stride must be >= 1");
  return s;
}

BuildResult build_dataset(const TrackingSource& source, const BuildSpec& spec) {
  validate(source);
  if (spec.sample_stride < 1) throw SpecError("build spec: sample_stride must be >= 1");
  if (spec.train_scenes.empty() || spec.test_scenes.empty()) throw SpecError("build spec: both scene lists required");
  const std::set<std::string> train_set(spec.train_scenes.begin(), spec.train_scenes.end());
  const std::set<std::string> test_set(spec.test_scenes.begin(), spec.test_scenes.end());
  for (const auto& s : train_set)
    if (test_set.count(s)) throw SpecError("build spec: scene '" + s + "' listed in both train and test");
  for (const auto* set : {&train_set, &test_set})
    for (const auto& s : *set)
      if (!source.find_scene(s)) throw SpecError("build spec: unknown scene '" + s + "'");

  BuildResult result;
  BuildReport& rep = result.report;
  std::vector<Pending> split_frames[2];

  // Sampling, class and weather filters, in (scene, camera, frame) order.
  for (int split = 0; split < 2; ++split) {
    std::vector<const SourceScene*> scenes;
    for (const auto& s : split == 0 ? train_set : test_set) scenes.push_back(source.find_scene(s));
    for (const SourceScene* scene : scenes) {
      std::vector<const SourceCamera*> cams;
      for (const auto& c : scene->cameras) cams.push_back(&c);
      std::sort(cams.begin(), cams.end(), [](auto* a, auto* b) { return a->camera_id < b->camera_id; });
      for (const SourceCamera* cam : cams) {
        for (const auto& f : cam->frames) {
          ++rep.input_frames;
          if (f.frame_index % spec.sample_stride != 0) continue;
          ++rep.sampled_frames;
          WeatherTag weather = scene->weather;
          for (const auto& t : f.tracks)
            if (t.weather) weather = *t.weather;
          if (spec.weather_filter && !spec.weather_filter->count(weather)) {
            ++rep.weather_frames_dropped;
            continue;
          }
          Pending p;
          p.frame.frame_id = make_frame_id(scene->scene_id, cam->camera_id, f.frame_index);
          p.frame.image_path = f.image_path;
          p.frame.scene_id = scene->scene_id;
          p.frame.camera_id = cam->camera_id;
          p.frame.weather = weather;
          p.frame.width = f.width;
          p.frame.height = f.height;
          for (const auto& t : f.tracks) {
            if (spec.drop_pedestrians && spec.pedestrian_classes.count(t.object_class)) {
              ++rep.pedestrian_boxes_dropped;
              continue;
            }
            const Box b = f.width > 0 && f.height > 0 ? t.box.clipped(f.width, f.height) : t.box;
            if (!b.valid()) continue;
            p.frame.annotations.push_back({b, kUnlabeled, cam->camera_id, std::nullopt});
            p.raw_ids.push_back(t.track_id);
          }
          split_frames[split].push_back(std::move(p));
        }
      }
    }
  }

  // Identities seen in both splits.
  std::set<std::string> seen[2];
  for (int split = 0; split < 2; ++split)
    for (const auto& p : split_frames[split]) seen[split].insert(p.raw_ids.begin(), p.raw_ids.end());
  std::set<std::string> drop;
  for (const auto& id : seen[0])
    if (seen[1].count(id)) drop.insert(id);
  rep.cross_split_ids_dropped = static_cast<int>(drop.size());

  for (int split = 0; split < 2; ++split) {
    auto& frames = split_frames[split];
    std::set<std::string> split_drop = drop;
    if (spec.drop_single_camera_ids) {
      std::map<std::string, std::set<std::string>> cams;
      for (const auto& p : frames)
        for (const auto& id : p.raw_ids) cams[id].insert(p.frame.camera_id);
      for (const auto& [id, c] : cams)
        if (c.size() < 2 && !drop.count(id)) {
          split_drop.insert(id);
          ++rep.single_camera_ids_dropped;
        }
    }
    for (auto& p : frames) {
      Pending kept;
      kept.frame = p.frame;
      kept.frame.annotations.clear();
      for (std::size_t i = 0; i < p.raw_ids.size(); ++i) {
        if (split_drop.count(p.raw_ids[i])) {
          if (!drop.count(p.raw_ids[i])) ++rep.single_camera_boxes_dropped;
          continue;
        }
        kept.frame.annotations.push_back(p.frame.annotations[i]);
        kept.raw_ids.push_back(p.raw_ids[i]);
      }
      p = std::move(kept);
    }
    const auto before = frames.size();
    std::erase_if(frames, [](const Pending& p) { return p.frame.annotations.empty(); });
    rep.empty_frames_removed += static_cast<int>(before - frames.size());

    DatasetManifest& m = split == 0 ? result.train : result.test;
    m.name = spec.name;
    m.split = split == 0 ? Split::kTrain : Split::kTest;
    std::vector<std::string> ids;
    for (const auto& p : frames) ids.insert(ids.end(), p.raw_ids.begin(), p.raw_ids.end());
    std::sort(ids.begin(), ids.end(), raw_id_less);
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (std::size_t i = 0; i < ids.size(); ++i) m.identity_remap[ids[i]] = static_cast<IdentityId>(i + 1);
    m.num_identities = static_cast<int>(ids.size());
    for (auto& p : frames) {
      for (std::size_t i = 0; i < p.raw_ids.size(); ++i) p.frame.annotations[i].identity = m.identity_remap.at(p.raw_ids[i]);
      m.frames.push_back(std::move(p.frame));
    }
    if (m.frames.empty())
      throw BuildError("build: " + to_string(m.split) + " split is empty after filtering");
    validate(m);
  }
  check_disjoint(result.train, result.test);
  result.queries = select_queries(result.test, spec.seed);
  return result;
}

std::vector<QueryRecord> select_queries(const DatasetManifest& manifest, std::uint64_t seed) {
  std::map<std::pair<IdentityId, std::string>, std::vector<std::pair<const FrameRecord*, std::size_t>>> groups;
  for (const auto& f : manifest.frames)
    for (std::size_t i = 0; i < f.annotations.size(); ++i) {
      const auto& a = f.annotations[i];
      if (a.identity != kUnlabeled) groups[{a.identity, f.camera_id}].push_back({&f, i});
    }
  std::mt19937_64 rng(seed);
  std::vector<QueryRecord> out;
  for (const auto& [key, members] : groups) {
    const auto pick = members[static_cast<std::size_t>(rng() % members.size())];
    char buf[24];
    std::snprintf(buf, sizeof buf, "q%05d_", key.first);
    QueryRecord q;
    q.query_id = buf + key.second;
    q.source_frame_id = pick.first->frame_id;
    q.box = pick.first->annotations[pick.second];
    q.crop_path = "queries/" + q.query_id + ".png";
    out.push_back(std::move(q));
  }
  return out;
}

DatasetStats dataset_stats(const DatasetManifest& manifest, const std::vector<QueryRecord>& queries) {
  DatasetStats s;
  std::set<IdentityId> ids;
  for (const auto& f : manifest.frames) {
    ++s.frames;
    for (const auto& a : f.annotations) {
      ++s.boxes;
      if (a.identity != kUnlabeled) ids.insert(a.identity);
    }
  }
  s.identities = static_cast<int>(ids.size());
  s.queries = static_cast<int>(queries.size());
  return s;
}

json to_json(const DatasetStats& s) {
  return {{"identities", s.identities}, {"frames", s.frames}, {"boxes", s.boxes}, {"queries", s.queries}};
}

json to_json(const BuildReport& r) {
  return {{"input_frames", r.input_frames},
          {"sampled_frames", r.sampled_frames},
          {"empty_frames_removed", r.empty_frames_removed},
          {"pedestrian_boxes_dropped", r.pedestrian_boxes_dropped},
          {"single_camera_ids_dropped", r.single_camera_ids_dropped},
          {"single_camera_boxes_dropped", r.single_camera_boxes_dropped},
          {"cross_split_ids_dropped", r.cross_split_ids_dropped},
          {"weather_frames_dropped", r.weather_frames_dropped}};
}

void write_dataset(const BuildResult& result, const fs::path& source_root, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const fs::path out_abs = fs::absolute(out_dir);
  const fs::path src_abs = fs::absolute(source_root);
  auto rebase = [&](DatasetManifest m) {
    for (auto& f : m.frames) f.image_path = fs::relative(src_abs / f.image_path, out_abs).generic_string();
    return m;
  };
  const DatasetManifest train = rebase(result.train);
  const DatasetManifest test = rebase(result.test);
  save_manifest(out_dir / "train.jsonl", train);
  save_manifest(out_dir / "test.jsonl", test);
  save_queries(out_dir / "queries.jsonl", result.queries);

  std::map<std::string, cv::Mat> cache;
  for (const auto& q : result.queries) {
    const FrameRecord* f = result.test.find_frame(q.source_frame_id);
    auto it = cache.find(f->image_path);
    if (it == cache.end()) it = cache.emplace(f->image_path, read_image(src_abs / f->image_path)).first;
    write_image(out_dir / q.crop_path, crop(it->second, q.box.box));
  }

  json stats = {{"name", result.train.name},
                {"train", to_json(dataset_stats(result.train, {}))},
                {"test", to_json(dataset_stats(result.test, result.queries))},
                {"build", to_json(result.report)}};
  std::ofstream out(out_dir / "stats.json");
  out << stats.dump(2) << '\n';
}

}  // namespace clipvs
