#include "clipvs/image.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "clipvs/errors.hpp"

namespace clipvs {

namespace {
constexpr double kMean[3] = {0.485, 0.456, 0.406};
constexpr double kStd[3] = {0.229, 0.224, 0.225};
}  // namespace

cv::Mat read_image(const std::filesystem::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw InputError("cannot read image " + path.string());
  return img;
}

void write_image(const std::filesystem::path& path, const cv::Mat& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), image)) throw InputError("cannot write image " + path.string());
}

cv::Mat crop(const cv::Mat& image, const Box& box) {
  const int x1 = std::clamp(static_cast<int>(std::floor(box.x1)), 0, image.cols);
  const int y1 = std::clamp(static_cast<int>(std::floor(box.y1)), 0, image.rows);
  const int x2 = std::clamp(static_cast<int>(std::ceil(box.x2)), 0, image.cols);
  const int y2 = std::clamp(static_cast<int>(std::ceil(box.y2)), 0, image.rows);
  if (x2 <= x1 || y2 <= y1) throw ContractError("crop: box does not intersect the image");
  return image(cv::Rect(x1, y1, x2 - x1, y2 - y1)).clone();
}

nn::Tensor to_tensor(const cv::Mat& image) {
  if (image.empty() || image.type() != CV_8UC3) throw InputError("to_tensor: expected 8-bit 3-channel image");
  nn::Tensor t({1, image.rows, image.cols, 3});
  std::size_t k = 0;
  for (int y = 0; y < image.rows; ++y) {
    const auto* row = image.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.cols; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = row[x][2 - c] / 255.0;  // BGR -> RGB
        t[k++] = (v - kMean[c]) / kStd[c];
      }
  }
  return t;
}

nn::Tensor to_tensor(const cv::Mat& image, int height, int width) {
  if (image.rows == height && image.cols == width) return to_tensor(image);
  cv::Mat resized;
  cv::resize(image, resized, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return to_tensor(resized);
}

std::vector<std::vector<cv::Mat>> collect_identity_crops(const DatasetManifest& manifest,
                                                         const std::filesystem::path& image_root,
                                                         int max_per_identity) {
  std::vector<std::vector<cv::Mat>> out(static_cast<std::size_t>(std::max(manifest.num_identities, 0)));
  for (const auto& frame : manifest.frames) {
    cv::Mat image;
    for (const auto& a : frame.annotations) {
      if (a.identity == kUnlabeled || a.identity > manifest.num_identities) continue;
      auto& list = out[static_cast<std::size_t>(a.identity - 1)];
      if (max_per_identity > 0 && static_cast<int>(list.size()) >= max_per_identity) continue;
      if (image.empty()) image = read_image(image_root / frame.image_path);
      list.push_back(crop(image, a.box).clone());
    }
  }
  return out;
}

}  // namespace clipvs
