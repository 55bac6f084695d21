#include "lungcad/annotations.hpp"

#include <sstream>

#include "lungcad/csv.hpp"

namespace lungcad {

namespace {

const std::vector<std::string> kBaseColumns = {"seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"};

}  // namespace

std::vector<NoduleAnnotation> load_annotations_csv(const std::filesystem::path& path) {
  const csv::Table table = csv::read_file(path);
  require(table.header.size() >= kBaseColumns.size() &&
              std::equal(kBaseColumns.begin(), kBaseColumns.end(), table.header.begin()),
          ErrorKind::kParse,
          path.string() + ": expected header seriesuid,coordX,coordY,coordZ,diameter_mm[,score1..score4]");

  std::vector<NoduleAnnotation> out;
  out.reserve(table.rows.size());
  for (const auto& [line, fields] : table.rows) {
    require(fields.size() >= 5 && fields.size() <= 9, ErrorKind::kParse,
            path.string() + " row " + std::to_string(line) + ": expected 5 to 9 fields, got " +
                std::to_string(fields.size()));
    NoduleAnnotation a;
    a.patient_id = fields[0];
    require(!a.patient_id.empty(), ErrorKind::kParse,
            path.string() + " row " + std::to_string(line) + ": empty seriesuid");
    a.center_world = {csv::parse_double(fields[1], "coordX", line), csv::parse_double(fields[2], "coordY", line),
                      csv::parse_double(fields[3], "coordZ", line)};
    a.diameter_mm = csv::parse_double(fields[4], "diameter_mm", line);
    require(a.diameter_mm > 0.0, ErrorKind::kValidation,
            path.string() + " row " + std::to_string(line) + ": diameter must be positive");
    for (std::size_t i = 5; i < fields.size(); ++i) {
      if (fields[i].empty()) continue;
      const auto s = csv::parse_int(fields[i], "score" + std::to_string(i - 4), line);
      require(s >= 1 && s <= 5, ErrorKind::kValidation,
              path.string() + " row " + std::to_string(line) + ": radiologist score outside 1..5");
      a.radiologist_scores.push_back(static_cast<int>(s));
    }
    out.push_back(std::move(a));
  }
  return out;
}

void save_annotations_csv(const std::filesystem::path& path, const std::vector<NoduleAnnotation>& annotations) {
  std::ostringstream out;
  out << "seriesuid,coordX,coordY,coordZ,diameter_mm,score1,score2,score3,score4\n";
  for (const auto& a : annotations) {
    a.validate();
    out << a.patient_id << ',' << csv::format_double(a.center_world.x) << ','
        << csv::format_double(a.center_world.y) << ',' << csv::format_double(a.center_world.z) << ','
        << csv::format_double(a.diameter_mm);
    for (std::size_t i = 0; i < 4; ++i) {
      out << ',';
      if (i < a.radiologist_scores.size()) out << a.radiologist_scores[i];
    }
    out << '\n';
  }
  csv::write_atomic(path, out.str());
}

}  // namespace lungcad
