#include "lungcad/param_blob.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "lungcad/csv.hpp"
#include "lungcad/error.hpp"

namespace lungcad {

namespace {

static_assert(std::endian::native == std::endian::little, "parameter payloads assume a little-endian host");

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::filesystem::path payload_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".bin";
  return p;
}

}  // namespace

void ParamBlob::put(const std::string& name, std::vector<std::size_t> shape, std::vector<double> values) {
  require(element_count(shape) == values.size(), ErrorKind::kValidation,
          "parameter '" + name + "' has " + std::to_string(values.size()) + " values for its shape");
  tensors[name] = Entry{std::move(shape), std::move(values)};
}

const ParamBlob::Entry& ParamBlob::get(const std::string& name) const {
  auto it = tensors.find(name);
  require(it != tensors.end(), ErrorKind::kFormat, "parameter file lacks tensor '" + name + "'");
  return it->second;
}

const std::string& ParamBlob::meta_value(const std::string& key) const {
  auto it = meta.find(key);
  require(it != meta.end(), ErrorKind::kFormat, "parameter file lacks meta key '" + key + "'");
  return it->second;
}

void save_param_blob(const std::filesystem::path& path, const ParamBlob& blob) {
  nlohmann::ordered_json manifest;
  manifest["format"] = "lungcad-params";
  manifest["version"] = 1;
  manifest["payload"] = payload_path(path).filename().string();
  manifest["meta"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : blob.meta) manifest["meta"][k] = v;
  manifest["tensors"] = nlohmann::ordered_json::array();

  std::string payload;
  std::size_t offset = 0;
  for (const auto& [name, entry] : blob.tensors) {
    manifest["tensors"].push_back({{"name", name}, {"shape", entry.shape}, {"offset", offset}, {"count", entry.values.size()}});
    const auto* bytes = reinterpret_cast<const char*>(entry.values.data());
    payload.append(bytes, entry.values.size() * sizeof(double));
    offset += entry.values.size();
  }
  csv::write_atomic(payload_path(path), payload);
  csv::write_atomic(path, manifest.dump(2) + "\n");
}

ParamBlob load_param_blob(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open parameter file " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, path.string() + ": " + e.what());
  }
  require(manifest.value("format", "") == "lungcad-params" && manifest.value("version", 0) == 1, ErrorKind::kFormat,
          path.string() + " is not a version 1 parameter manifest");

  const auto bin = path.parent_path() / manifest.at("payload").get<std::string>();
  std::ifstream pin(bin, std::ios::binary);
  require(pin.good(), ErrorKind::kFormat, "missing parameter payload " + bin.string());
  std::ostringstream buf;
  buf << pin.rdbuf();
  const std::string payload = buf.str();
  require(payload.size() % sizeof(double) == 0, ErrorKind::kFormat, "truncated parameter payload " + bin.string());
  const std::size_t total = payload.size() / sizeof(double);

  ParamBlob blob;
  try {
    for (const auto& [k, v] : manifest.at("meta").items()) blob.meta[k] = v.get<std::string>();
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      auto shape = t.at("shape").get<std::vector<std::size_t>>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      require(count == element_count(shape) && offset + count <= total, ErrorKind::kFormat,
              "parameter '" + name + "' is inconsistent with the payload");
      std::vector<double> values(count);
      std::memcpy(values.data(), payload.data() + offset * sizeof(double), count * sizeof(double));
      blob.tensors[name] = ParamBlob::Entry{std::move(shape), std::move(values)};
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
  return blob;
}

}  // namespace lungcad
