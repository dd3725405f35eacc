#include <algorithm>
#include <cstdio>
#include <random>
#include <span>

#include <opencv2/imgproc.hpp>

#include "clipvs/benchmark.hpp"
#include "clipvs/errors.hpp"
#include "clipvs/image.hpp"

namespace clipvs {

namespace {

struct Look {
  cv::Scalar body, roof;
  int width, height;
};

// Integer in [lo, hi] from raw engine output, identical on every standard library.
int draw(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

Look identity_look(int k) {
  static const cv::Scalar kBody[] = {{40, 40, 220},  {220, 60, 40},  {40, 200, 40},  {30, 210, 230},
                                     {200, 40, 200}, {230, 200, 40}, {255, 255, 255}, {20, 20, 20}};
  static const cv::Scalar kRoof[] = {{240, 240, 240}, {20, 200, 230}, {200, 30, 200}, {40, 40, 40},
                                     {40, 200, 40},   {30, 30, 200},  {200, 60, 40},  {230, 230, 30}};
  const int i = k % 8;
  return {kBody[i], kRoof[(i + k / 8) % 8], 16 + 2 * (k % 4), 12 + (k % 3) * 2};
}

cv::Scalar camera_tint(int cam, bool night) {
  const double s = night ? 0.45 : 1.0;
  const cv::Scalar base = cam % 2 == 0 ? cv::Scalar(110, 100, 90) : cv::Scalar(90, 110, 100);
  return base * s;
}

bool overlaps(const Box& a, std::span<const Box> placed) {
  for (const auto& b : placed) {
    const Box grown{b.x1 - 2, b.y1 - 2, b.x2 + 2, b.y2 + 2};
    if (a.x1 < grown.x2 && grown.x1 < a.x2 && a.y1 < grown.y2 && grown.y1 < a.y2) return true;
  }
  return false;
}

struct Actor {
  std::string track_id;
  std::string object_class;
  Look look;
};

void render_scene(SourceScene& scene, const std::vector<Actor>& vehicles, const Actor* single_camera,
                  const Actor* pedestrian, int frames_per_camera, const ToyConfig& cfg, bool night,
                  std::mt19937_64& rng, const std::filesystem::path& root) {
  const int s = cfg.image_size;
  for (int cam = 0; cam < cfg.cameras; ++cam) {
    SourceCamera camera;
    camera.camera_id = "c" + std::to_string(cam + 1);
    for (int fi = 0; fi < frames_per_camera; ++fi) {
      cv::Mat img(s, s, CV_8UC3, camera_tint(cam, night));
      cv::Mat noise(s, s, CV_8UC3);
      cv::theRNG().state = rng();
      cv::randu(noise, cv::Scalar::all(0), cv::Scalar::all(13));
      img += noise;
      img -= cv::Scalar::all(6);
      cv::line(img, {0, s / 2}, {s - 1, s / 2}, camera_tint(cam, night) * 0.7, 3);

      std::vector<const Actor*> present;
      // Round-robin guarantees every identity shows up in every camera.
      const int n = static_cast<int>(vehicles.size());
      const int count = std::min(n, draw(rng, 1, 3));
      const int start = (fi + cam) % n;
      for (int k = 0; k < count; ++k) present.push_back(&vehicles[static_cast<std::size_t>((start + k) % n)]);
      if (single_camera && cam == 0 && fi % 4 == 1) present.push_back(single_camera);
      if (pedestrian && fi % 3 == 0) present.push_back(pedestrian);

      SourceFrame frame;
      frame.frame_index = fi;
      char name[16];
      std::snprintf(name, sizeof name, "%06d.png", fi);
      frame.image_path = scene.scene_id + "/" + camera.camera_id + "/" + name;
      frame.width = s;
      frame.height = s;
      std::vector<Box> placed;
      for (const Actor* a : present) {
        const int w = a->look.width + draw(rng, -1, 1), h = a->look.height + draw(rng, -1, 1);
        Box b;
        bool ok = false;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
          const int x = draw(rng, 1, s - w - 1), y = draw(rng, 1, s - h - 1);
          b = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + w), static_cast<double>(y + h)};
          ok = !overlaps(b, placed);
        }
        if (!ok) continue;
        placed.push_back(b);
        const cv::Rect r(static_cast<int>(b.x1), static_cast<int>(b.y1), w, h);
        cv::rectangle(img, r, a->look.body * (night ? 0.8 : 1.0), cv::FILLED);
        if (a->object_class != "pedestrian") {
          const cv::Rect roof(r.x + w / 4, r.y + 2, w / 2, std::max(2, h / 3));
          cv::rectangle(img, roof, a->look.roof * (night ? 0.8 : 1.0), cv::FILLED);
        }
        frame.tracks.push_back({a->track_id, b, a->object_class, std::nullopt});
      }
      write_image(root / frame.image_path, img);
      camera.frames.push_back(std::move(frame));
    }
    scene.cameras.push_back(std::move(camera));
  }
}

}  // namespace

TrackingSource generate_toy_source(const ToyConfig& cfg, const std::filesystem::path& root) {
  if (cfg.image_size < 32 || cfg.train_identities < 1 || cfg.test_identities < 1 || cfg.cameras < 2 ||
      cfg.train_frames_per_camera < 1 || cfg.test_frames_per_camera < 1)
    throw ContractError("toy config: needs image_size >= 32, >= 1 identity per split, >= 2 cameras");
  std::mt19937_64 rng(cfg.seed);
  TrackingSource src;
  src.name = "toy";

  std::vector<Actor> train, test;
  for (int k = 0; k < cfg.train_identities; ++k)
    train.push_back({std::to_string(k + 1), "car", identity_look(k)});
  for (int k = 0; k < cfg.test_identities; ++k)
    test.push_back({std::to_string(cfg.train_identities + k + 1), "car", identity_look(cfg.train_identities + k)});
  const Actor single{"900", "car", identity_look(7)};
  const Actor walker{"1000", "pedestrian", {cv::Scalar(150, 150, 150), cv::Scalar(150, 150, 150), 4, 10}};

  SourceScene train_scene{"toy-train-day", WeatherTag::kDay, {}};
  render_scene(train_scene, train, cfg.single_camera_identity ? &single : nullptr, cfg.pedestrians ? &walker : nullptr,
               cfg.train_frames_per_camera, cfg, false, rng, root);
  SourceScene test_scene{"toy-test-night", WeatherTag::kNight, {}};
  render_scene(test_scene, test, nullptr, cfg.pedestrians ? &walker : nullptr, cfg.test_frames_per_camera, cfg, true,
               rng, root);
  src.scenes.push_back(std::move(train_scene));
  src.scenes.push_back(std::move(test_scene));
  validate(src);
  return src;
}

BuildSpec toy_build_spec(std::uint64_t seed) {
  BuildSpec spec;
  spec.name = "toy";
  spec.sample_stride = 1;
  spec.train_scenes = {"toy-train-day"};
  spec.test_scenes = {"toy-test-night"};
  spec.seed = seed;
  return spec;
}

}  // namespace clipvs
