#include "lungcad/metaimage.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "lungcad/csv.hpp"

namespace lungcad {

namespace {

static_assert(std::endian::native == std::endian::little,
              "MetaImage I/O assumes a little-endian host");

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::vector<double> parse_numbers(const std::string& value, const std::string& key) {
  std::istringstream ss(value);
  std::vector<double> out;
  std::string token;
  while (ss >> token) out.push_back(csv::parse_double(token, key, 0));
  return out;
}

struct Header {
  std::map<std::string, std::string> fields;  // keys lower-cased
  std::streamoff data_offset = 0;             // for LOCAL data
};

Header read_header(std::ifstream& in, const std::filesystem::path& path) {
  Header h;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kFormat,
            path.string() + ": malformed header line '" + line + "'");
    auto key = line.substr(0, eq);
    auto value = line.substr(eq + 1);
    auto strip = [](std::string& s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
    };
    strip(key);
    strip(value);
    key = lower(key);
    h.fields[key] = value;
    // ElementDataFile terminates the header.
    if (key == "elementdatafile") {
      h.data_offset = in.tellg();
      break;
    }
  }
  return h;
}

const std::string& field(const Header& h, const std::string& key, const std::filesystem::path& path) {
  auto it = h.fields.find(key);
  require(it != h.fields.end(), ErrorKind::kFormat, path.string() + ": missing header key " + key);
  return it->second;
}

}  // namespace

Grid3 read_metaimage(const std::filesystem::path& header_path, ElementType* element_type) {
  std::ifstream in(header_path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + header_path.string());
  const Header h = read_header(in, header_path);

  const auto ndims = parse_numbers(field(h, "ndims", header_path), "NDims");
  require(ndims.size() == 1 && ndims[0] == 3.0, ErrorKind::kFormat,
          header_path.string() + ": only 3-dimensional images are supported");

  for (const char* key : {"compresseddata", "compressed"}) {
    if (auto it = h.fields.find(key); it != h.fields.end() && lower(it->second) == "true") {
      fail(ErrorKind::kFormat, header_path.string() + ": compressed MetaImage data is not supported");
    }
  }
  for (const char* key : {"binarydatabyteordermsb", "elementbyteordermsb"}) {
    if (auto it = h.fields.find(key); it != h.fields.end() && lower(it->second) == "true") {
      fail(ErrorKind::kUnsupportedFormat, header_path.string() + ": big-endian data is not supported");
    }
  }
  if (auto it = h.fields.find("elementnumberofchannels"); it != h.fields.end()) {
    require(it->second == "1", ErrorKind::kUnsupportedFormat,
            header_path.string() + ": multi-channel images are not supported");
  }

  const auto dims = parse_numbers(field(h, "dimsize", header_path), "DimSize");
  require(dims.size() == 3, ErrorKind::kFormat, header_path.string() + ": DimSize must have 3 values");

  Geometry geom;
  for (int a = 0; a < 3; ++a) {
    require(dims[a] >= 1 && dims[a] == std::floor(dims[a]), ErrorKind::kFormat,
            header_path.string() + ": invalid DimSize");
    geom.shape[a] = static_cast<std::int64_t>(dims[a]);
  }
  std::vector<double> spacing;
  if (h.fields.count("elementspacing")) spacing = parse_numbers(h.fields.at("elementspacing"), "ElementSpacing");
  else if (h.fields.count("elementsize")) spacing = parse_numbers(h.fields.at("elementsize"), "ElementSize");
  else spacing = {1.0, 1.0, 1.0};
  require(spacing.size() == 3, ErrorKind::kFormat, header_path.string() + ": ElementSpacing must have 3 values");
  std::vector<double> origin = {0.0, 0.0, 0.0};
  for (const char* key : {"offset", "origin", "position"}) {
    if (h.fields.count(key)) {
      origin = parse_numbers(h.fields.at(key), key);
      break;
    }
  }
  require(origin.size() == 3, ErrorKind::kFormat, header_path.string() + ": Offset must have 3 values");
  for (int a = 0; a < 3; ++a) {
    require(spacing[a] > 0.0, ErrorKind::kFormat, header_path.string() + ": non-positive ElementSpacing");
    geom.spacing[a] = spacing[a];
    geom.origin[a] = origin[a];
  }

  const std::string type_name = field(h, "elementtype", header_path);
  ElementType type;
  std::size_t bytes;
  if (type_name == "MET_SHORT") {
    type = ElementType::kShort;
    bytes = 2;
  } else if (type_name == "MET_FLOAT") {
    type = ElementType::kFloat;
    bytes = 4;
  } else {
    fail(ErrorKind::kUnsupportedFormat, header_path.string() + ": unsupported ElementType " + type_name);
  }
  if (element_type) *element_type = type;

  const std::string data_file = field(h, "elementdatafile", header_path);
  const std::size_t n = geom.shape.voxels();
  std::vector<char> raw(n * bytes);
  if (data_file == "LOCAL") {
    in.clear();
    in.seekg(h.data_offset);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    require(in.gcount() == static_cast<std::streamsize>(raw.size()), ErrorKind::kFormat,
            header_path.string() + ": truncated inline data");
  } else {
    require(lower(std::filesystem::path(data_file).extension().string()) != ".zraw", ErrorKind::kFormat,
            header_path.string() + ": compressed (.zraw) data is not supported");
    const auto data_path = header_path.parent_path() / data_file;
    std::ifstream din(data_path, std::ios::binary);
    require(static_cast<bool>(din), ErrorKind::kFormat, "missing data file " + data_path.string());
    din.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    require(din.gcount() == static_cast<std::streamsize>(raw.size()), ErrorKind::kFormat,
            data_path.string() + ": data file is shorter than DimSize implies");
  }

  std::vector<double> values(n);
  if (type == ElementType::kShort) {
    for (std::size_t i = 0; i < n; ++i) {
      std::int16_t v;
      std::memcpy(&v, raw.data() + 2 * i, 2);
      values[i] = v;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, raw.data() + 4 * i, 4);
      values[i] = v;
    }
  }
  return Grid3(geom, std::move(values));
}

CtVolume load_metaimage(const std::filesystem::path& header) {
  CtVolume vol{read_metaimage(header), false};
  for (double& v : vol.image.data()) v = std::clamp(v, kRawHuMin, kRawHuMax);
  return vol;
}

void save_metaimage(const std::filesystem::path& header, const Grid3& image, ElementType element_type) {
  auto raw_path = header;
  raw_path.replace_extension(".raw");
  const Geometry& g = image.geometry();

  std::string payload;
  if (element_type == ElementType::kShort) {
    payload.resize(image.size() * 2);
    for (std::size_t i = 0; i < image.size(); ++i) {
      const double r = std::clamp(std::round(image[i]), -32768.0, 32767.0);
      const auto v = static_cast<std::int16_t>(r);
      std::memcpy(payload.data() + 2 * i, &v, 2);
    }
  } else {
    payload.resize(image.size() * 4);
    for (std::size_t i = 0; i < image.size(); ++i) {
      const auto v = static_cast<float>(image[i]);
      std::memcpy(payload.data() + 4 * i, &v, 4);
    }
  }

  std::ostringstream hdr;
  hdr << "ObjectType = Image\n"
      << "NDims = 3\n"
      << "BinaryData = True\n"
      << "BinaryDataByteOrderMSB = False\n"
      << "CompressedData = False\n"
      << "TransformMatrix = 1 0 0 0 1 0 0 0 1\n"
      << "Offset = " << csv::format_double(g.origin.x) << ' ' << csv::format_double(g.origin.y) << ' '
      << csv::format_double(g.origin.z) << '\n'
      << "CenterOfRotation = 0 0 0\n"
      << "AnatomicalOrientation = RAI\n"
      << "ElementSpacing = " << csv::format_double(g.spacing.x) << ' '
      << csv::format_double(g.spacing.y) << ' ' << csv::format_double(g.spacing.z) << '\n'
      << "DimSize = " << g.shape.nx << ' ' << g.shape.ny << ' ' << g.shape.nz << '\n'
      << "ElementType = " << (element_type == ElementType::kShort ? "MET_SHORT" : "MET_FLOAT") << '\n'
      << "ElementDataFile = " << raw_path.filename().string() << '\n';

  csv::write_atomic(raw_path, payload);
  csv::write_atomic(header, hdr.str());
}

}  // namespace lungcad
