#include "clipvs/datamodel.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "clipvs/errors.hpp"

namespace clipvs {

using nlohmann::json;

Box Box::clipped(double frame_width, double frame_height) const {
  return {std::clamp(x1, 0.0, frame_width), std::clamp(y1, 0.0, frame_height),
          std::clamp(x2, 0.0, frame_width), std::clamp(y2, 0.0, frame_height)};
}

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw ContractError("iou: degenerate rectangle");
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::string to_string(WeatherTag tag) {
  switch (tag) {
    case WeatherTag::kDay: return "day";
    case WeatherTag::kDawn: return "dawn";
    case WeatherTag::kRain: return "rain";
    case WeatherTag::kNight: return "night";
    case WeatherTag::kUnknown: break;
  }
  return "unknown";
}

WeatherTag weather_from_string(const std::string& s) {
  if (s == "day") return WeatherTag::kDay;
  if (s == "dawn") return WeatherTag::kDawn;
  if (s == "rain") return WeatherTag::kRain;
  if (s == "night") return WeatherTag::kNight;
  if (s == "unknown") return WeatherTag::kUnknown;
  throw ContractError("unknown weather tag '" + s + "'");
}

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

static Split split_from_string(const std::string& s, std::size_t line) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ParseError("unknown split '" + s + "'", line);
}

std::size_t DatasetManifest::num_boxes() const {
  std::size_t n = 0;
  for (const auto& f : frames) n += f.annotations.size();
  return n;
}

const FrameRecord* DatasetManifest::find_frame(const std::string& frame_id) const {
  for (const auto& f : frames)
    if (f.frame_id == frame_id) return &f;
  return nullptr;
}

void validate(const DatasetManifest& manifest) {
  std::set<std::string> ids;
  std::set<IdentityId> labels;
  for (const auto& f : manifest.frames) {
    if (!ids.insert(f.frame_id).second)
      throw IntegrityError("duplicate frame_id '" + f.frame_id + "'");
    if (f.annotations.empty())
      throw IntegrityError("frame '" + f.frame_id + "' has no annotations");
    for (const auto& a : f.annotations) {
      if (!a.box.valid()) throw IntegrityError("degenerate box in frame '" + f.frame_id + "'");
      if (f.width > 0 && f.height > 0 && a.box.clipped(f.width, f.height) != a.box)
        throw IntegrityError("box outside frame bounds in '" + f.frame_id + "'");
      if (a.identity == kUnlabeled) continue;
      if (a.identity < 1 || a.identity > manifest.num_identities)
        throw IntegrityError("identity " + std::to_string(a.identity) + " outside 1.." +
                             std::to_string(manifest.num_identities));
      labels.insert(a.identity);
    }
  }
  if (static_cast<int>(labels.size()) != manifest.num_identities)
    throw IntegrityError("num_identities=" + std::to_string(manifest.num_identities) +
                         " but " + std::to_string(labels.size()) + " distinct identities present");
}

void check_disjoint(const DatasetManifest& train, const DatasetManifest& test) {
  for (const auto& [raw, label] : train.identity_remap) {
    if (test.identity_remap.count(raw))
      throw IntegrityError("identity " + raw + " appears in both train and test splits");
  }
}

void validate_queries(const std::vector<QueryRecord>& queries, const DatasetManifest& test) {
  for (const auto& q : queries) {
    if (!test.find_frame(q.source_frame_id))
      throw IntegrityError("query '" + q.query_id + "' references missing frame '" +
                           q.source_frame_id + "'");
    if (q.box.identity == kUnlabeled)
      throw IntegrityError("query '" + q.query_id + "' is unlabeled");
  }
}

namespace {

json box_to_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

Box box_from_json(const json& j, std::size_t line) {
  if (!j.is_array() || j.size() != 4) throw ParseError("box must be [x1,y1,x2,y2]", line);
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw ParseError("invalid box: require x1<x2 and y1<y2", line);
  return b;
}

json annotation_to_json(const BoxAnnotation& a) {
  json j = {{"box", box_to_json(a.box)}, {"camera_id", a.camera_id}};
  j["identity"] = a.identity == kUnlabeled ? json(nullptr) : json(a.identity);
  if (a.attributes) j["attributes"] = {{"color", a.attributes->color}, {"vtype", a.attributes->vtype}};
  return j;
}

BoxAnnotation annotation_from_json(const json& j, std::size_t line) {
  BoxAnnotation a;
  a.box = box_from_json(j.at("box"), line);
  const auto& id = j.at("identity");
  a.identity = id.is_null() ? kUnlabeled : id.get<int>();
  if (a.identity != kUnlabeled && a.identity < 1) throw ParseError("identity must be >= 1 or null", line);
  a.camera_id = j.at("camera_id").get<std::string>();
  if (j.contains("attributes"))
    a.attributes = VehicleAttributes{j["attributes"].at("color").get<std::string>(),
                                     j["attributes"].at("vtype").get<std::string>()};
  return a;
}

json frame_to_json(const FrameRecord& f) {
  json anns = json::array();
  for (const auto& a : f.annotations) anns.push_back(annotation_to_json(a));
  return {{"frame_id", f.frame_id}, {"image_path", f.image_path}, {"scene_id", f.scene_id},
          {"camera_id", f.camera_id}, {"weather", to_string(f.weather)}, {"width", f.width},
          {"height", f.height}, {"annotations", anns}};
}

FrameRecord frame_from_json(const json& j, std::size_t line) {
  FrameRecord f;
  f.frame_id = j.at("frame_id").get<std::string>();
  f.image_path = j.at("image_path").get<std::string>();
  f.scene_id = j.at("scene_id").get<std::string>();
  f.camera_id = j.at("camera_id").get<std::string>();
  try {
    f.weather = weather_from_string(j.at("weather").get<std::string>());
  } catch (const ContractError& e) {
    throw ParseError(e.what(), line);
  }
  f.width = j.at("width").get<int>();
  f.height = j.at("height").get<int>();
  for (const auto& a : j.at("annotations")) f.annotations.push_back(annotation_from_json(a, line));
  return f;
}

// Reads one JSON object per non-empty line, wrapping library errors with the line number.
template <typename Fn>
void for_each_json_line(std::istream& in, Fn&& fn) {
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty()) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line);
    }
    try {
      fn(j, line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("schema violation: ") + e.what(), line);
    }
  }
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

}  // namespace

DatasetManifest read_manifest(std::istream& in) {
  DatasetManifest m;
  bool have_header = false;
  std::size_t header_frames = 0, header_boxes = 0;
  for_each_json_line(in, [&](const json& j, std::size_t line) {
    if (!have_header) {
      if (j.value("schema", "") != "clipvs.manifest")
        throw ParseError("missing manifest schema header", line);
      if (j.at("version").get<int>() != kManifestSchemaVersion)
        throw ParseError("unsupported manifest version", line);
      m.name = j.at("name").get<std::string>();
      m.split = split_from_string(j.at("split").get<std::string>(), line);
      m.num_identities = j.at("num_identities").get<int>();
      header_frames = j.at("num_frames").get<std::size_t>();
      header_boxes = j.at("num_boxes").get<std::size_t>();
      for (const auto& [raw, label] : j.at("identity_remap").items())
        m.identity_remap[raw] = label.get<int>();
      have_header = true;
      return;
    }
    FrameRecord f = frame_from_json(j, line);
    if (f.annotations.empty()) throw ParseError("frame without annotations", line);
    if (m.find_frame(f.frame_id)) throw ParseError("duplicate frame_id '" + f.frame_id + "'", line);
    for (const auto& a : f.annotations) {
      if (a.identity != kUnlabeled && a.identity > m.num_identities)
        throw ParseError("identity exceeds num_identities", line);
      if (f.width > 0 && f.height > 0 && a.box.clipped(f.width, f.height) != a.box)
        throw ParseError("box outside frame bounds", line);
    }
    m.frames.push_back(std::move(f));
  });
  if (!have_header) throw ParseError("empty manifest", 0);
  if (header_frames != m.frames.size() || header_boxes != m.num_boxes())
    throw IntegrityError("manifest header counts do not match records");
  validate(m);
  return m;
}

void write_manifest(std::ostream& out, const DatasetManifest& m) {
  json remap = json::object();
  for (const auto& [raw, label] : m.identity_remap) remap[raw] = label;
  json header = {{"schema", "clipvs.manifest"}, {"version", kManifestSchemaVersion},
                 {"name", m.name}, {"split", to_string(m.split)},
                 {"num_identities", m.num_identities}, {"num_frames", m.frames.size()},
                 {"num_boxes", m.num_boxes()}, {"identity_remap", remap}};
  out << header.dump() << '\n';
  for (const auto& f : m.frames) out << frame_to_json(f).dump() << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_manifest(in);
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  auto out = open_out(path);
  write_manifest(out, manifest);
}

std::pair<DatasetManifest, DatasetManifest> load_manifest_pair(const std::filesystem::path& train,
                                                               const std::filesystem::path& test) {
  auto a = load_manifest(train);
  auto b = load_manifest(test);
  check_disjoint(a, b);
  return {std::move(a), std::move(b)};
}

std::vector<QueryRecord> read_queries(std::istream& in) {
  std::vector<QueryRecord> qs;
  bool have_header = false;
  std::size_t count = 0;
  for_each_json_line(in, [&](const json& j, std::size_t line) {
    if (!have_header) {
      if (j.value("schema", "") != "clipvs.queries") throw ParseError("missing query schema header", line);
      if (j.at("version").get<int>() != kManifestSchemaVersion)
        throw ParseError("unsupported query list version", line);
      count = j.at("count").get<std::size_t>();
      have_header = true;
      return;
    }
    QueryRecord q;
    q.query_id = j.at("query_id").get<std::string>();
    q.source_frame_id = j.at("source_frame_id").get<std::string>();
    q.box = annotation_from_json(j.at("box"), line);
    if (q.box.identity == kUnlabeled) throw ParseError("query box must carry an identity", line);
    q.crop_path = j.at("crop_path").get<std::string>();
    qs.push_back(std::move(q));
  });
  if (!have_header) throw ParseError("empty query list", 0);
  if (count != qs.size()) throw IntegrityError("query header count does not match records");
  return qs;
}

void write_queries(std::ostream& out, const std::vector<QueryRecord>& queries) {
  out << json{{"schema", "clipvs.queries"}, {"version", kManifestSchemaVersion},
              {"count", queries.size()}}.dump()
      << '\n';
  for (const auto& q : queries) {
    out << json{{"query_id", q.query_id}, {"source_frame_id", q.source_frame_id},
                {"box", annotation_to_json(q.box)}, {"crop_path", q.crop_path}}.dump()
        << '\n';
  }
}

std::vector<QueryRecord> load_queries(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_queries(in);
}

void save_queries(const std::filesystem::path& path, const std::vector<QueryRecord>& queries) {
  auto out = open_out(path);
  write_queries(out, queries);
}

}  // namespace clipvs
