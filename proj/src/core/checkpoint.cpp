#include "drdm/core/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "drdm/core/error.hpp"

namespace drdm {

namespace {
constexpr char kMagic[8] = {'D', 'R', 'D', 'M', 'C', 'K', 'P', 'T'};
}

void Checkpoint::put_params(const nn::ParamList& params) {
  for (const auto& p : params) {
    check(!tensors.count(p.name), "checkpoint: duplicate parameter " + p.name);
    tensors.emplace(p.name, p.tensor);
  }
}

void Checkpoint::load_into(const nn::ParamList& params) const {
  for (const auto& p : params) {
    auto it = tensors.find(p.name);
    if (it == tensors.end())
      throw MissingArtifactError("checkpoint: parameter not found: " + p.name);
    check(it->second.shape() == p.tensor.shape(),
          "checkpoint: shape mismatch for " + p.name);
    Tensor dst = p.tensor;
    dst.data() = it->second.data();
  }
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["version"] = kVersion;
  header["meta"] = meta;
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f64"},
                     {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(Real);
  }
  header["tensors"] = table;
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  check(f.good(), "checkpoint: cannot open for writing: " + path.string());
  f.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : tensors)
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.data().size() * sizeof(Real)));
  check(f.good(), "checkpoint: write failed: " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good())
    throw MissingArtifactError("checkpoint not found: " + path.string());
  char magic[8];
  f.read(magic, sizeof(magic));
  check(f.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
        "checkpoint: bad magic in " + path.string());
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  check(f.good(), "checkpoint: truncated header in " + path.string());

  nlohmann::json header = nlohmann::json::parse(hs);
  check(header.at("version").get<std::uint32_t>() == kVersion,
        "checkpoint: unsupported version in " + path.string());

  Checkpoint ck;
  ck.meta = header.at("meta").get<std::map<std::string, std::string>>();
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    check(entry.at("dtype").get<std::string>() == "f64",
          "checkpoint: unsupported dtype for " + name);
    Tensor t = Tensor::zeros(shape);
    f.read(reinterpret_cast<char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(Real)));
    check(f.good(), "checkpoint: truncated tensor data for " + name);
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

}  // namespace drdm
