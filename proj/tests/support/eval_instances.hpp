#pragma once

#include <random>
#include <string>
#include <vector>

#include "clipvs/eval.hpp"

namespace instances {

struct Instance {
  clipvs::DatasetManifest gt;
  clipvs::Gallery gallery;
  std::vector<clipvs::QueryEmbedding> queries;
};

inline clipvs::FrameRecord frame(const std::string& id, clipvs::WeatherTag weather,
                                 std::vector<clipvs::BoxAnnotation> annotations) {
  clipvs::FrameRecord f;
  f.frame_id = id;
  f.image_path = id + ".png";
  f.scene_id = "s";
  f.camera_id = "c";
  f.weather = weather;
  f.width = 100;
  f.height = 100;
  f.annotations = std::move(annotations);
  return f;
}

/// Three frames, two positives for the query: true positives at ranks 1 and 3.
inline Instance five_sixths() {
  using clipvs::WeatherTag;
  Instance in;
  in.gt.name = "hand";
  in.gt.split = clipvs::Split::kTest;
  in.gt.num_identities = 2;
  in.gt.frames = {frame("f/a", WeatherTag::kDay, {{{0, 0, 10, 10}, 1, "c", {}}, {{20, 20, 30, 30}, 2, "c", {}}}),
                  frame("f/b", WeatherTag::kDay, {{{5, 5, 15, 15}, 1, "c", {}}}),
                  frame("f/c", WeatherTag::kNight, {{{0, 0, 10, 10}, 2, "c", {}}})};
  in.gallery = {{"f/a", {{{0, 0, 10, 10}, 0.9, {1.0, 0.1}}}},
                {"f/b", {{{5, 5, 15, 15}, 0.8, {1.0, 1.0}}}},
                {"f/c", {{{0, 0, 10, 10}, 0.7, {1.0, 0.5}}}}};
  in.queries = {{"q1", "f/a", 1, {1.0, 0.0}}};
  return in;
}

/// Random instance with up to `max_frames` frames and 5 boxes per frame; every
/// box gets 0-2 jittered detections and a frame may carry one spurious detection.
inline Instance random_instance(std::mt19937_64& rng, int max_frames = 8) {
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> n(0, 1);
  const int frames = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_frames));
  const int ids = 1 + static_cast<int>(rng() % 4);
  const int dim = 3;
  Instance in;
  in.gt.split = clipvs::Split::kTest;
  in.gt.num_identities = ids;
  auto emb = [&] {
    std::vector<double> e(dim);
    for (double& x : e) x = n(rng);
    return e;
  };
  std::vector<std::vector<double>> pool;  // repeated embeddings create exact ties
  for (int f = 0; f < frames; ++f) {
    std::vector<clipvs::BoxAnnotation> anns;
    const int boxes = 1 + static_cast<int>(rng() % 5);
    for (int b = 0; b < boxes; ++b) {
      const double x = u(rng) * 80, y = u(rng) * 80;
      const int id = static_cast<int>(rng() % static_cast<std::uint64_t>(ids + 1));
      anns.push_back({{x, y, x + 5 + u(rng) * 15, y + 5 + u(rng) * 15}, id == 0 ? clipvs::kUnlabeled : id, "c", {}});
    }
    in.gt.frames.push_back(frame("r/" + std::to_string(f), f % 2 ? clipvs::WeatherTag::kRain : clipvs::WeatherTag::kDay,
                                 anns));
    clipvs::GalleryFrame g{in.gt.frames.back().frame_id, {}};
    for (const auto& a : anns) {
      const int copies = static_cast<int>(rng() % 3);
      for (int c = 0; c < copies; ++c) {
        const double j = 4.0 * u(rng) - 2.0;
        std::vector<double> e = !pool.empty() && rng() % 4 == 0 ? pool[rng() % pool.size()] : emb();
        pool.push_back(e);
        g.detections.push_back({{a.box.x1 + j, a.box.y1 - j, a.box.x2 + j, a.box.y2}, u(rng), e});
      }
    }
    if (rng() % 2) {
      const double x = u(rng) * 80, y = u(rng) * 80;
      g.detections.push_back({{x, y, x + 10, y + 10}, u(rng), emb()});
    }
    in.gallery.push_back(std::move(g));
  }
  const int queries = 1 + static_cast<int>(rng() % 3);
  for (int q = 0; q < queries; ++q)
    in.queries.push_back({"q" + std::to_string(q), in.gt.frames[rng() % in.gt.frames.size()].frame_id,
                          1 + static_cast<int>(rng() % static_cast<std::uint64_t>(ids)), emb()});
  return in;
}

}  // namespace instances
