#pragma once

#include <filesystem>
#include <vector>

#include "lungcad/volume.hpp"

namespace lungcad {

// Header `seriesuid,coordX,coordY,coordZ,diameter_mm` with optional
// trailing `score1..score4` columns; blank score fields are absent scores.
std::vector<NoduleAnnotation> load_annotations_csv(const std::filesystem::path& path);

void save_annotations_csv(const std::filesystem::path& path,
                          const std::vector<NoduleAnnotation>& annotations);

}  // namespace lungcad
