#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lungcad {

// Named parameter tensors stored as a JSON manifest plus a flat binary
// payload.
//
//   <path>       JSON: {"format": "lungcad-params", "version": 1,
//                       "payload": "<file name>",
//                       "meta": {string: string},
//                       "tensors": [{"name", "shape", "offset", "count"}]}
//   <path>.bin   little-endian IEEE-754 float64 values, tensors
//                concatenated in manifest order; offset/count in elements.
struct ParamBlob {
  struct Entry {
    std::vector<std::size_t> shape;
    std::vector<double> values;
  };

  std::map<std::string, std::string> meta;
  std::map<std::string, Entry> tensors;

  void put(const std::string& name, std::vector<std::size_t> shape, std::vector<double> values);
  const Entry& get(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  const std::string& meta_value(const std::string& key) const;
};

void save_param_blob(const std::filesystem::path& path, const ParamBlob& blob);
ParamBlob load_param_blob(const std::filesystem::path& path);

}  // namespace lungcad
