#pragma once

#include "skycat/sky_model.hpp"

#include <cstdint>
#include <vector>

namespace skycat {

/// Axis-aligned sky rectangle.
struct SkyRegion {
  Point2 min_corner;
  Point2 max_corner;

  void validate() const;
  double width() const { return max_corner.x - min_corner.x; }
  double height() const { return max_corner.y - min_corner.y; }
  double area() const { return width() * height(); }
  bool contains_closed(Point2 p) const {
    return p.x >= min_corner.x && p.x <= max_corner.x && p.y >= min_corner.y && p.y <= max_corner.y;
  }
  bool intersects(const SkyRegion& o) const {
    return min_corner.x <= o.max_corner.x && o.min_corner.x <= max_corner.x && min_corner.y <= o.max_corner.y &&
           o.min_corner.y <= max_corner.y;
  }
  SkyRegion expanded(double margin) const {
    return {{min_corner.x - margin, min_corner.y - margin}, {max_corner.x + margin, max_corner.y + margin}};
  }
};

/// Placement of one image on the sky, without its pixels.
struct ImageGeometry {
  std::int64_t id = 0;
  ImageMeta meta;
  int width = 0;
  int height = 0;

  /// Sky rectangle covered by the image's pixels (pixel centers plus half a
  /// pixel on every side).
  SkyRegion sky_bounds() const {
    return {{meta.origin.x - 0.5 * meta.pixel_scale, meta.origin.y - 0.5 * meta.pixel_scale},
            {meta.origin.x + (width - 0.5) * meta.pixel_scale, meta.origin.y + (height - 0.5) * meta.pixel_scale}};
  }
};

/// One unit of scheduled work: a sky region, the sources whose centers fall
/// inside it with their initial variational parameters, and the images that
/// overlap it.
struct Task {
  std::int64_t id = 0;
  int stage = 1;
  SkyRegion region;
  std::vector<SourceModel> sources;
  std::vector<std::int64_t> image_ids;
  double estimated_work = 0.0;
};

}  // namespace skycat
