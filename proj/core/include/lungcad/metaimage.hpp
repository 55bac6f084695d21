#pragma once

#include <filesystem>

#include "lungcad/volume.hpp"

namespace lungcad {

enum class ElementType { kShort, kFloat };

// Reads an uncompressed little-endian 3D MetaImage (.mhd header with a
// separate ElementDataFile, or LOCAL inline data). Values are returned
// as-is without range clamping.
Grid3 read_metaimage(const std::filesystem::path& header, ElementType* element_type = nullptr);

// CT ingestion: read_metaimage followed by clamping to [kRawHuMin, kRawHuMax].
CtVolume load_metaimage(const std::filesystem::path& header);

// Writes `<stem>.mhd` and `<stem>.raw` next to each other. Values are
// rounded to the nearest integer for kShort. Both files are written to a
// temporary name first and renamed into place.
void save_metaimage(const std::filesystem::path& header, const Grid3& image,
                    ElementType element_type);

}  // namespace lungcad
