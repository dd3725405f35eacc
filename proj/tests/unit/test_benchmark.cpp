#include <doctest.h>

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "clipvs/benchmark.hpp"
#include "clipvs/errors.hpp"
#include "clipvs/image.hpp"
#include "fixtures.hpp"

using namespace clipvs;
namespace fs = std::filesystem;

namespace {

const Box kBox1{10, 10, 30, 30};
const Box kBox2{40, 10, 60, 30};
const Box kBox3{10, 40, 30, 60};
const Box kPed{40, 40, 60, 60};

SourceTrack track(const std::string& id, const Box& box, const std::string& cls = "car") {
  SourceTrack t;
  t.track_id = id;
  t.box = box;
  t.object_class = cls;
  return t;
}

// Two cameras, 25 frames each, in a day train scene and a night test scene.
//   train: "1" in both cameras for frames 0..14; "2" in c1 for 0..9 and c2 for 10..24;
//          "3" in c1 only; pedestrian "p1" in c2 on even frames.
//   test:  "10" everywhere; "11" in c2 for frames <= 12 and in c1 from frame 13.
TrackingSource hand_source() {
  TrackingSource src;
  src.name = "hand";
  SourceScene train{"s-train-day", WeatherTag::kDay, {}};
  SourceScene test{"s-test-night", WeatherTag::kNight, {}};
  for (const std::string cam : {"c1", "c2"}) {
    SourceCamera tc{cam, {}}, sc{cam, {}};
    for (int i = 0; i < 25; ++i) {
      SourceFrame f{i, cam + "/" + std::to_string(i) + ".png", 100, 80, {}};
      SourceFrame g = f;
      if (i <= 14) f.tracks.push_back(track("1", kBox1));
      if ((cam == "c1" && i <= 9) || (cam == "c2" && i >= 10)) f.tracks.push_back(track("2", kBox2));
      if (cam == "c1") f.tracks.push_back(track("3", kBox3));
      if (cam == "c2" && i % 2 == 0) f.tracks.push_back(track("p1", kPed, "pedestrian"));
      g.tracks.push_back(track("10", kBox1));
      if ((cam == "c2" && i <= 12) || (cam == "c1" && i >= 13)) g.tracks.push_back(track("11", kBox2));
      tc.frames.push_back(std::move(f));
      sc.frames.push_back(std::move(g));
    }
    train.cameras.push_back(std::move(tc));
    test.cameras.push_back(std::move(sc));
  }
  src.scenes = {train, test};
  return src;
}

BuildSpec hand_spec() {
  BuildSpec spec;
  spec.name = "hand";
  spec.sample_stride = 5;
  spec.train_scenes = {"s-train-day"};
  spec.test_scenes = {"s-test-night"};
  spec.seed = 3;
  return spec;
}

int box_count(const DatasetManifest& m) {
  int n = 0;
  for (const auto& f : m.frames) n += static_cast<int>(f.annotations.size());
  return n;
}

std::string serialize(const BuildResult& r) {
  std::ostringstream out;
  write_manifest(out, r.train);
  write_manifest(out, r.test);
  write_queries(out, r.queries);
  out << to_json(r.report).dump();
  return out.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("hand-enumerated build counts") {
  const BuildResult r = build_dataset(hand_source(), hand_spec());
  CHECK(r.report.input_frames == 100);
  CHECK(r.report.sampled_frames == 20);
  CHECK(r.report.pedestrian_boxes_dropped == 3);
  CHECK(r.report.single_camera_ids_dropped == 1);
  CHECK(r.report.single_camera_boxes_dropped == 5);
  CHECK(r.report.empty_frames_removed == 2);
  CHECK(r.report.cross_split_ids_dropped == 0);
  CHECK(r.report.weather_frames_dropped == 0);

  CHECK(dataset_stats(r.train, {}) == DatasetStats{2, 8, 11, 0});
  CHECK(dataset_stats(r.test, r.queries) == DatasetStats{2, 10, 15, 4});

  std::set<std::string> train_ids;
  for (const auto& f : r.train.frames) train_ids.insert(f.frame_id);
  CHECK(train_ids.size() == 8);
  CHECK(r.train.identity_remap == std::map<std::string, IdentityId>{{"1", 1}, {"2", 2}});
  CHECK(r.test.identity_remap == std::map<std::string, IdentityId>{{"10", 1}, {"11", 2}});
  for (const auto& f : r.train.frames) CHECK(f.weather == WeatherTag::kDay);
  for (const auto& f : r.test.frames) CHECK(f.weather == WeatherTag::kNight);

  std::set<std::pair<IdentityId, std::string>> query_keys;
  for (const auto& q : r.queries) {
    query_keys.insert({q.box.identity, q.box.camera_id});
    CHECK(q.crop_path == "queries/" + q.query_id + ".png");
  }
  CHECK(query_keys.size() == 4);
  CHECK_NOTHROW(validate_queries(r.queries, r.test));
}

TEST_CASE("sampling keeps only frames on the stride") {
  const BuildResult r = build_dataset(hand_source(), hand_spec());
  for (const auto* m : {&r.train, &r.test})
    for (const auto& f : m->frames) {
      const int index = std::stoi(f.frame_id.substr(f.frame_id.rfind('/') + 1));
      CHECK(index % 5 == 0);
    }
}

TEST_CASE("pedestrian filter removes exactly the pedestrian boxes") {
  const BuildResult r = build_dataset(hand_source(), hand_spec());
  for (const auto& f : r.train.frames)
    for (const auto& a : f.annotations) CHECK_FALSE(a.box == kPed);

  BuildSpec keep = hand_spec();
  keep.drop_pedestrians = false;
  keep.drop_single_camera_ids = false;
  const BuildResult all = build_dataset(hand_source(), keep);
  CHECK(all.report.pedestrian_boxes_dropped == 0);
  CHECK(all.report.empty_frames_removed == 0);
  CHECK(box_count(all.train) == 11 + 3 + 5);
  CHECK(all.train.frames.size() == 10);
  int peds = 0;
  for (const auto& f : all.train.frames)
    for (const auto& a : f.annotations) peds += a.box == kPed;
  CHECK(peds == 3);
  CHECK(all.train.num_identities == 4);
}

TEST_CASE("every kept identity is seen by at least two cameras") {
  const BuildResult r = build_dataset(hand_source(), hand_spec());
  for (const auto* m : {&r.train, &r.test}) {
    std::map<IdentityId, std::set<std::string>> cams;
    for (const auto& f : m->frames)
      for (const auto& a : f.annotations) cams[a.identity].insert(f.camera_id);
    for (const auto& [id, c] : cams) CHECK(c.size() >= 2);
  }
  for (const auto& f : r.train.frames)
    for (const auto& a : f.annotations) CHECK_FALSE(a.box == kBox3);
}

TEST_CASE("identities shared across splits are dropped from both") {
  TrackingSource src = hand_source();
  for (auto& cam : src.scenes[1].cameras)
    for (auto& f : cam.frames) f.tracks.push_back(track("1", kBox3));
  const BuildResult r = build_dataset(src, hand_spec());
  CHECK(r.report.cross_split_ids_dropped == 1);
  CHECK(r.train.identity_remap.count("1") == 0);
  CHECK(r.test.identity_remap.count("1") == 0);
  CHECK(r.train.num_identities == 1);
}

TEST_CASE("weather filter") {
  BuildSpec spec = hand_spec();
  spec.weather_filter = std::set<WeatherTag>{WeatherTag::kDay, WeatherTag::kNight};
  CHECK(serialize(build_dataset(hand_source(), spec)) != "");
  spec.weather_filter = std::set<WeatherTag>{WeatherTag::kNight};
  CHECK_THROWS_AS(build_dataset(hand_source(), spec), BuildError);
}

TEST_CASE("equal seeds give byte-identical builds") {
  const std::string a = serialize(build_dataset(hand_source(), hand_spec()));
  const std::string b = serialize(build_dataset(hand_source(), hand_spec()));
  CHECK(a == b);
  BuildSpec other = hand_spec();
  other.seed = 4;
  const BuildResult r = build_dataset(hand_source(), other);
  CHECK(r.queries.size() == 4);
}

TEST_CASE("spec errors") {
  BuildSpec spec = hand_spec();
  spec.sample_stride = 0;
  CHECK_THROWS_AS(build_dataset(hand_source(), spec), SpecError);
  spec = hand_spec();
  spec.test_scenes.push_back("s-train-day");
  CHECK_THROWS_AS(build_dataset(hand_source(), spec), SpecError);
  spec = hand_spec();
  spec.train_scenes = {"nope"};
  CHECK_THROWS_AS(build_dataset(hand_source(), spec), SpecError);
  spec = hand_spec();
  spec.test_scenes.clear();
  CHECK_THROWS_AS(build_dataset(hand_source(), spec), SpecError);
}

TEST_CASE("source validation") {
  TrackingSource src = hand_source();
  src.scenes[0].cameras[0].frames[3].frame_index = 1;
  CHECK_THROWS_AS(validate(src), InputError);
  src = hand_source();
  src.scenes[1].cameras[1].camera_id = "c1";
  CHECK_THROWS_AS(validate(src), InputError);
}

TEST_CASE("build spec json") {
  BuildSpec spec = hand_spec();
  spec.weather_filter = std::set<WeatherTag>{WeatherTag::kRain};
  const BuildSpec back = build_spec_from_json(to_json(spec));
  CHECK(to_json(back) == to_json(spec));
  CHECK(back.weather_filter == spec.weather_filter);
  CHECK_THROWS_AS(build_spec_from_json({{"stride", 3}}), SpecError);
  CHECK_THROWS_AS(build_spec_from_json({{"sample_stride", 0}}), SpecError);
  CHECK(build_spec_from_json(nlohmann::json::object()).sample_stride == 5);
}

TEST_CASE("tracking json round trip") {
  const TrackingSource src = hand_source();
  const TrackingSource back = tracking_source_from_json(to_json(src));
  CHECK(to_json(back) == to_json(src));
}

TEST_CASE("cityflow and synthehicle layouts load") {
  fixture::TempDir dir("formats");
  const cv::Mat image(40, 50, CV_8UC3, cv::Scalar(0, 0, 0));

  const fs::path city = dir.path() / "city";
  for (const std::string cam : {"c001", "c002"}) {
    const fs::path cam_dir = city / "S01" / cam;
    fs::create_directories(cam_dir / "gt");
    fs::create_directories(cam_dir / "img1");
    write_image(cam_dir / "img1" / "000001.jpg", image);
    std::ofstream(cam_dir / "gt" / "gt.txt") << "1,7,2,3,10,12,1,-1,-1,-1\n2,7,4,3,10,12,1,-1,-1,-1\n";
  }
  const TrackingSource c = load_cityflow_source(city);
  REQUIRE(c.scenes.size() == 1);
  REQUIRE(c.scenes[0].cameras.size() == 2);
  const auto& frames = c.scenes[0].cameras[0].frames;
  REQUIRE(frames.size() == 2);
  CHECK(frames[0].width == 50);
  CHECK(frames[0].height == 40);
  CHECK(frames[1].tracks[0].box == Box{4, 3, 14, 15});
  CHECK(frames[0].image_path == "S01/c001/img1/000001.jpg");

  const fs::path synth = dir.path() / "synth";
  const fs::path cam_dir = synth / "town-rain" / "cam0";
  fs::create_directories(cam_dir);
  write_image(cam_dir / "000000.jpg", image);
  std::ofstream(cam_dir / "annotations.csv") << "frame,track_id,class,x1,y1,x2,y2\n0,5,car,1,1,9,9\n0,6,pedestrian,20,20,30,30\n";
  const TrackingSource s = load_synthehicle_source(synth);
  REQUIRE(s.scenes.size() == 1);
  CHECK(s.scenes[0].weather == WeatherTag::kRain);
  REQUIRE(s.scenes[0].cameras[0].frames.size() == 1);
  CHECK(s.scenes[0].cameras[0].frames[0].tracks[1].object_class == "pedestrian");

  std::ofstream(cam_dir / "annotations.csv") << "frame,track_id,class,x1,y1,x2,y2\n0,5,car,1,x,9,9\n";
  CHECK_THROWS_AS(load_synthehicle_source(synth), ParseError);
  CHECK_THROWS_AS(load_cityflow_source(dir.path() / "missing"), InputError);
}

TEST_CASE("toy source builds into the expected dataset") {
  auto& toy = fixture::toy();
  const ToyConfig cfg;
  const DatasetStats train = dataset_stats(toy.train, {});
  const DatasetStats test = dataset_stats(toy.test, toy.queries);
  CHECK(train.identities == cfg.train_identities);
  CHECK(test.identities == cfg.test_identities);
  CHECK(train.frames <= cfg.cameras * cfg.train_frames_per_camera);
  CHECK(test.queries == cfg.test_identities * cfg.cameras);
  CHECK(toy.built.report.pedestrian_boxes_dropped > 0);
  CHECK(toy.built.report.single_camera_ids_dropped > 0);
  for (const auto& q : toy.queries) {
    const cv::Mat crop = read_image(toy.root / q.crop_path);
    CHECK(crop.cols > 0);
  }
  for (const auto& f : toy.train.frames) CHECK(fs::exists(toy.root / f.image_path));
}

TEST_CASE("toy builds are byte-identical across runs") {
  fixture::TempDir dir("toy_repeat");
  std::vector<std::string> files;
  for (int run = 0; run < 2; ++run) {
    const fs::path src = dir.path() / std::to_string(run) / "src";
    const fs::path out = dir.path() / std::to_string(run) / "out";
    const TrackingSource source = generate_toy_source(ToyConfig{}, src);
    write_dataset(build_dataset(source, toy_build_spec(9)), src, out);
    files.push_back(slurp(out / "train.jsonl") + slurp(out / "test.jsonl") + slurp(out / "queries.jsonl"));
    std::set<fs::path> crops;
    for (const auto& e : fs::directory_iterator(out / "queries")) crops.insert(e.path().filename());
    for (const auto& c : crops) files.back() += c.string() + slurp(out / "queries" / c);
  }
  CHECK(files[0] == files[1]);
}
