#include "clipvs/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "clipvs/errors.hpp"

namespace clipvs {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

using nlohmann::json;

void Archive::put(const std::string& name, nn::Tensor value) {
  for (auto& [n, t] : tensors_)
    if (n == name) {
      t = std::move(value);
      return;
    }
  tensors_.emplace_back(name, std::move(value));
}

bool Archive::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return true;
  return false;
}

const nn::Tensor& Archive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw IntegrityError("archive: missing tensor '" + name + "'");
}

void Archive::put_parameters(const nn::ParameterSet& params, const std::string& prefix) {
  for (const auto& [name, v] : params.entries()) put(prefix + name, v.value());
}

void Archive::load_parameters(nn::ParameterSet& params, const std::string& prefix) const {
  for (const auto& [name, v] : params.entries()) {
    const nn::Tensor& t = get(prefix + name);
    if (t.shape() != v.shape())
      throw IntegrityError("archive: tensor '" + prefix + name + "' has shape " + nn::shape_string(t.shape()) +
                           ", expected " + nn::shape_string(v.shape()));
    nn::Var p = v;
    p.mutable_value() = t;
  }
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  json header = {{"meta", archive.meta}, {"tensors", json::array()}};
  for (const auto& [name, t] : archive.tensors()) header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InputError("cannot write " + tmp.string());
    const std::uint32_t version = kArchiveVersion;
    const std::uint64_t len = text.size();
    out.write(kArchiveMagic, sizeof kArchiveMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : archive.tensors())
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!out) throw InputError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open archive " + path.string());
  char magic[sizeof kArchiveMagic];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kArchiveMagic, sizeof magic) != 0)
    throw IntegrityError("archive " + path.string() + ": bad magic");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || version != kArchiveVersion)
    throw IntegrityError("archive " + path.string() + ": unsupported version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ull << 31)) throw IntegrityError("archive " + path.string() + ": bad header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IntegrityError("archive " + path.string() + ": truncated header");

  Archive a;
  try {
    const json header = json::parse(text);
    a.meta = header.at("meta");
    for (const auto& e : header.at("tensors")) {
      nn::Tensor t(e.at("shape").get<nn::Shape>());
      in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
      if (!in) throw IntegrityError("archive " + path.string() + ": truncated tensor data");
      a.put(e.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception& e) {
    throw IntegrityError("archive " + path.string() + ": bad header: " + e.what());
  }
  return a;
}

}  // namespace clipvs
