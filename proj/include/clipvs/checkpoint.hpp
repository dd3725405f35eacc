#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "clipvs/layers.hpp"

namespace clipvs {

inline constexpr char kArchiveMagic[8] = {'C', 'L', 'I', 'P', 'V', 'S', 'C', 'K'};
inline constexpr int kArchiveVersion = 1;

/// Named double tensors plus a JSON header. On disk: magic, version (u32),
/// header length (u64), header JSON (which lists names and shapes), then the
/// tensors' values as little-endian doubles in header order.
class Archive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, nn::Tensor value);
  bool contains(const std::string& name) const;
  /// Throws IntegrityError when absent.
  const nn::Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, nn::Tensor>>& tensors() const { return tensors_; }

  /// Every parameter under its own name, prefixed by `prefix`.
  void put_parameters(const nn::ParameterSet& params, const std::string& prefix = "");
  /// Overwrites parameter values in place; shapes must match. Throws IntegrityError.
  void load_parameters(nn::ParameterSet& params, const std::string& prefix = "") const;

 private:
  std::vector<std::pair<std::string, nn::Tensor>> tensors_;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws IntegrityError on bad magic, unsupported version or truncation.
Archive load_archive(const std::filesystem::path& path);

}  // namespace clipvs
