#pragma once

// File formats.
//
// Truth / prior catalog CSV, header line then one row per source:
//   id,x,y,is_star,flux_u,flux_g,flux_r,flux_i,flux_z,profile,eccentricity,scale,angle
//
// Output catalog CSV (posterior summaries of the more probable type):
//   id,x,y,p_star,logflux_mean,logflux_sd,
//   color1_mean,color1_sd,...,color4_mean,color4_sd,profile,eccentricity,scale,angle
// Real numbers are written with %.17g, so a parse/emit cycle is bitwise stable.
//
// Image container, all fields little-endian:
//   char[8]  magic "SKYIMG1\0"
//   u32      endianness tag 0x01020304
//   u32      format version (1)
//   i64      image id
//   i32      width, height, band
//   f64      background, psf_sigma, origin_x, origin_y, pixel_scale
//   i32      counts[height][width], row-major
//
// Image manifest CSV: id,file,band,width,height,background,psf_sigma,origin_x,origin_y,pixel_scale
// (file relative to the manifest's directory).
//
// Task file, one record per line, blank lines and '#' comments ignored:
//   TASK <id> <stage> <min_x> <min_y> <max_x> <max_y> <estimated_work>
//   IMAGES <n> <image id> ...
//   SOURCE <id> <anchor_x> <anchor_y> <anchor_scale> <x> <y> <q_star>
//          <star logflux_mean> <star logflux_sd> <galaxy logflux_mean> <galaxy logflux_sd>
//          <star color means x4> <galaxy color means x4> <star color sds x4> <galaxy color sds x4>
//          <profile> <eccentricity> <scale> <angle>
//   END

#include "skycat/sky_model.hpp"
#include "skycat/task.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace skycat {

void write_catalog_csv(const std::filesystem::path& path, const std::vector<CatalogEntry>& entries);
std::vector<CatalogEntry> read_catalog_csv(const std::filesystem::path& path);

/// One row of the output catalog.
struct EstimateEntry {
  std::int64_t id = 0;
  Point2 position;
  double p_star = 0.5;
  double logflux_mean = 0.0;
  double logflux_sd = 0.0;
  std::array<double, kColorCount> color_mean{};
  std::array<double, kColorCount> color_sd{};
  GalaxyShape shape;
};

EstimateEntry summarize(const SourceModel& source);
void write_estimate_csv(const std::filesystem::path& path, const std::vector<EstimateEntry>& entries);
std::vector<EstimateEntry> read_estimate_csv(const std::filesystem::path& path);
std::string format_estimate_csv(const std::vector<EstimateEntry>& entries);

void write_image(const std::filesystem::path& path, const ImagePatch& patch, std::int64_t id);
/// Throws FormatError naming the file on a bad magic, tag, version, size
/// or truncated body.
ImagePatch read_image(const std::filesystem::path& path, std::int64_t* id = nullptr);

struct ImageRecord {
  ImageGeometry geometry;
  std::filesystem::path file;  ///< absolute, or relative to the working directory
};

void write_manifest(const std::filesystem::path& path, const std::vector<ImageRecord>& images);
std::vector<ImageRecord> read_manifest(const std::filesystem::path& path);

void write_tasks(const std::filesystem::path& path, const std::vector<Task>& tasks);
std::vector<Task> read_tasks(const std::filesystem::path& path);

/// "%.17g"
std::string format_real(double v);

/// Natural-value fields of a source in task-file SOURCE order (after the
/// anchor): x y q_star, per type logflux_mean logflux_sd, per type 4 color
/// means, per type 4 color sds, then profile eccentricity scale angle.
inline constexpr int kSourceFields = 3 + 4 + 8 + 8 + 4;
std::array<double, kSourceFields> source_fields(const SourceModel& source);
void set_source_fields(const std::array<double, kSourceFields>& fields, SourceModel& source);

}  // namespace skycat
