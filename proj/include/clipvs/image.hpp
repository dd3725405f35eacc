#pragma once

#include <filesystem>
#include <vector>

#include <opencv2/core.hpp>

#include "clipvs/datamodel.hpp"
#include "clipvs/tensor.hpp"

namespace clipvs {

/// 8-bit BGR image as loaded from disk. Throws InputError when unreadable.
cv::Mat read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const cv::Mat& image);

/// Pixels inside `box` (rounded outward, clipped to the image).
cv::Mat crop(const cv::Mat& image, const Box& box);

/// Converts to a normalized [1, H, W, 3] RGB tensor (per-channel mean/std).
nn::Tensor to_tensor(const cv::Mat& image);
/// Bilinear resize followed by to_tensor.
nn::Tensor to_tensor(const cv::Mat& image, int height, int width);

/// Ground-truth crops grouped by identity: element c holds identity c+1.
/// Frames are read relative to `image_root`; 0 means no per-identity cap.
std::vector<std::vector<cv::Mat>> collect_identity_crops(const DatasetManifest& manifest,
                                                         const std::filesystem::path& image_root,
                                                         int max_per_identity = 0);

}  // namespace clipvs
