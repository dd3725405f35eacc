#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "clipvs/benchmark.hpp"
#include "clipvs/tensor.hpp"
#include "clipvs/trainer.hpp"
#include "oracles.hpp"

namespace fixture {

inline clipvs::nn::RowMatrix to_eigen(const oracle::Mat& m) {
  const auto rows = static_cast<Eigen::Index>(m.size());
  const auto cols = static_cast<Eigen::Index>(m.empty() ? 0 : m[0].size());
  clipvs::nn::RowMatrix out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) out(r, c) = m[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
  return out;
}

inline oracle::Mat from_eigen(const clipvs::nn::RowMatrix& m) {
  oracle::Mat out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(r)].push_back(m(r, c));
  return out;
}

inline oracle::Vec flat(const clipvs::nn::RowMatrix& m) { return oracle::flatten(from_eigen(m)); }

/// Fresh scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("clipvs_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Bundled synthetic dataset, written once per process.
struct ToyData {
  TempDir dir{"toy"};
  clipvs::BuildResult built;
  std::filesystem::path root;  // manifests and queries live here
  clipvs::DatasetManifest train, test;
  std::vector<clipvs::QueryRecord> queries;

  ToyData() {
    const auto source_root = dir.path() / "source";
    const clipvs::TrackingSource source = clipvs::generate_toy_source(clipvs::ToyConfig{}, source_root);
    built = clipvs::build_dataset(source, clipvs::toy_build_spec());
    root = dir.path() / "data";
    clipvs::write_dataset(built, source_root, root);
    train = clipvs::load_manifest(root / "train.jsonl");
    test = clipvs::load_manifest(root / "test.jsonl");
    queries = clipvs::load_queries(root / "queries.jsonl");
  }
};

inline ToyData& toy() {
  static ToyData data;
  return data;
}

/// Frozen stage-1 outputs for a training manifest.
struct StageOne {
  clipvs::IdentityPromptBank bank;
  std::unique_ptr<clipvs::CnnTeacher> teacher;
  double teacher_accuracy = 0;
};

inline StageOne stage_one(const clipvs::TrainConfig& config, const clipvs::DatasetManifest& train,
                          const std::filesystem::path& image_root) {
  const clipvs::ReferenceTextEncoder text(config.text_encoder);
  const clipvs::ReferenceImageEncoder image(config.image_encoder);
  clipvs::PromptTrainConfig pc;
  pc.epochs = config.prompt_epochs;
  pc.lr = config.prompt_lr;
  pc.seed = config.seed;
  StageOne out;
  out.bank = clipvs::pretrain_id_tokens(train, image_root, image, text, pc, config.max_crops_per_identity).bank;
  auto teacher = clipvs::pretrain_teacher(train, image_root, config, config.teacher_epochs);
  out.teacher = std::move(teacher.teacher);
  out.teacher_accuracy = teacher.epoch_accuracy.empty() ? 0.0 : teacher.epoch_accuracy.back();
  return out;
}

}  // namespace fixture
