#include "skycat/partitioner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace skycat {

namespace {

double radius_sky(const CatalogEntry& e, const ImageMeta& meta, const ModelConfig& config) {
  return config.active_radius_k * (meta.psf_sigma * meta.pixel_scale + std::max(e.shape.scale, 0.0));
}

struct Builder {
  std::span<const CatalogEntry> catalog;
  std::vector<double> work;
  double threshold;
  PartitionConfig config;
  std::vector<PartitionLeaf> leaves;

  double total(const std::vector<std::size_t>& idx) const {
    double s = 0.0;
    for (std::size_t i : idx) s += work[i];
    return s;
  }

  void split(const SkyRegion& region, std::vector<std::size_t> idx) {
    const double w = total(idx);
    if (w <= threshold) {
      leaves.push_back({region, w, false});
      return;
    }
    const bool along_x = region.width() >= region.height();
    const double lo = along_x ? region.min_corner.x : region.min_corner.y;
    const double hi = along_x ? region.max_corner.x : region.max_corner.y;
    if (hi - lo < 2.0 * config.min_extent) {
      leaves.push_back({region, w, true});
      return;
    }
    const auto coord = [&](std::size_t i) { return along_x ? catalog[i].position.x : catalog[i].position.y; };
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return coord(a) < coord(b) || (coord(a) == coord(b) && a < b);
    });

    // Work median: the gap between consecutive distinct coordinates where the
    // cumulative work is nearest half.
    double cut = 0.5 * (lo + hi);
    double best = std::numeric_limits<double>::infinity();
    double cum = 0.0;
    for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
      cum += work[idx[k]];
      const double a = coord(idx[k]), b = coord(idx[k + 1]);
      if (a == b) continue;
      const double d = std::abs(cum - 0.5 * w);
      if (d < best) {
        best = d;
        cut = 0.5 * (a + b);
      }
    }
    cut = std::clamp(cut, lo + config.min_extent, hi - config.min_extent);

    SkyRegion left = region, right = region;
    if (along_x) {
      left.max_corner.x = cut;
      right.min_corner.x = cut;
    } else {
      left.max_corner.y = cut;
      right.min_corner.y = cut;
    }
    std::vector<std::size_t> li, ri;
    for (std::size_t i : idx) (coord(i) < cut ? li : ri).push_back(i);
    split(left, std::move(li));
    split(right, std::move(ri));
  }
};

bool lex_less(const SkyRegion& a, const SkyRegion& b) {
  return a.min_corner.x < b.min_corner.x || (a.min_corner.x == b.min_corner.x && a.min_corner.y < b.min_corner.y);
}

}  // namespace

void SkyRegion::validate() const {
  if (!(std::isfinite(min_corner.x) && std::isfinite(min_corner.y) && std::isfinite(max_corner.x) &&
        std::isfinite(max_corner.y))) {
    throw ValidationError("sky region: corners must be finite");
  }
  if (!(min_corner.x < max_corner.x && min_corner.y < max_corner.y)) {
    throw ValidationError("sky region: min corner must be below max corner on both axes");
  }
}

double entry_work(const CatalogEntry& e, std::span<const ImageGeometry> images, const ModelConfig& config) {
  double w = 0.0;
  for (const auto& g : images) {
    const double r = radius_sky(e, g.meta, config);
    if (!g.sky_bounds().expanded(r + g.meta.pixel_scale).contains_closed(e.position)) continue;
    const Footprint fp(e.position, e.shape.scale, g.meta, g.width, g.height, config.active_radius_k);
    w += static_cast<double>(fp.count());
  }
  return w;
}

double estimate_work(const SkyRegion& region, std::span<const CatalogEntry> catalog,
                     std::span<const ImageGeometry> images, const ModelConfig& config) {
  double w = 0.0;
  for (const auto& e : catalog) {
    if (region.contains_closed(e.position)) w += entry_work(e, images, config);
  }
  return w;
}

std::vector<PartitionLeaf> partition_sky(const SkyRegion& bounds, std::span<const CatalogEntry> catalog,
                                         std::span<const ImageGeometry> images, double work_threshold,
                                         const PartitionConfig& config) {
  bounds.validate();
  if (!(work_threshold > 0.0)) throw ValidationError("partition_sky: work_threshold must be > 0");
  if (!(config.min_extent > 0.0)) throw ValidationError("partition_sky: min_extent must be > 0");
  Builder b{catalog, std::vector<double>(catalog.size(), 0.0), work_threshold, config, {}};
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    if (!bounds.contains_closed(catalog[i].position)) continue;
    b.work[i] = entry_work(catalog[i], images, config.model);
    idx.push_back(i);
  }
  b.split(bounds, std::move(idx));
  return b.leaves;
}

std::vector<SkyRegion> shift_partition(std::span<const SkyRegion> stage1, const SkyRegion& bounds) {
  bounds.validate();
  if (stage1.empty()) throw ValidationError("shift_partition: empty partition");
  std::vector<double> widths, heights;
  for (const auto& r : stage1) {
    r.validate();
    widths.push_back(r.width());
    heights.push_back(r.height());
  }
  const auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };
  const double dx = 0.5 * median(widths), dy = 0.5 * median(heights);

  std::vector<SkyRegion> out;
  for (const auto& r : stage1) {
    SkyRegion s{{r.min_corner.x + dx, r.min_corner.y + dy}, {r.max_corner.x + dx, r.max_corner.y + dy}};
    if (r.min_corner.x == bounds.min_corner.x) s.min_corner.x = bounds.min_corner.x;
    if (r.min_corner.y == bounds.min_corner.y) s.min_corner.y = bounds.min_corner.y;
    s.max_corner.x = std::min(s.max_corner.x, bounds.max_corner.x);
    s.max_corner.y = std::min(s.max_corner.y, bounds.max_corner.y);
    if (r.max_corner.x == bounds.max_corner.x) s.max_corner.x = bounds.max_corner.x;
    if (r.max_corner.y == bounds.max_corner.y) s.max_corner.y = bounds.max_corner.y;
    if (s.min_corner.x < s.max_corner.x && s.min_corner.y < s.max_corner.y) out.push_back(s);
  }
  return out;
}

int assign_region(Point2 p, std::span<const SkyRegion> regions) {
  int best = -1;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (!regions[i].contains_closed(p)) continue;
    if (best < 0 || lex_less(regions[i], regions[best])) best = static_cast<int>(i);
  }
  return best;
}

double max_active_radius(std::span<const CatalogEntry> catalog, std::span<const ImageGeometry> images,
                         const ModelConfig& config) {
  double scale = 0.0, psf = 0.0;
  for (const auto& e : catalog) scale = std::max(scale, e.shape.scale);
  for (const auto& g : images) psf = std::max(psf, g.meta.psf_sigma * g.meta.pixel_scale);
  return config.active_radius_k * (psf + scale);
}

TaskBuild make_tasks(std::span<const SkyRegion> regions, std::span<const CatalogEntry> catalog,
                     std::span<const ImageGeometry> images, int stage, std::int64_t first_id,
                     const ModelConfig& config) {
  if (stage != 1 && stage != 2) throw ValidationError("make_tasks: stage must be 1 or 2");
  TaskBuild out;
  out.tasks.resize(regions.size());
  const double reach = max_active_radius(catalog, images, config);
  for (std::size_t i = 0; i < regions.size(); ++i) {
    regions[i].validate();
    Task& t = out.tasks[i];
    t.id = first_id + static_cast<std::int64_t>(i);
    t.stage = stage;
    t.region = regions[i];
    const SkyRegion grown = regions[i].expanded(reach);
    for (const auto& g : images) {
      if (g.sky_bounds().intersects(grown)) t.image_ids.push_back(g.id);
    }
  }
  for (const auto& e : catalog) {
    const int r = assign_region(e.position, regions);
    if (r < 0) {
      ++out.skipped;
      continue;
    }
    Task& t = out.tasks[static_cast<std::size_t>(r)];
    t.sources.push_back(source_from_entry(e));
    t.estimated_work += entry_work(e, images, config);
  }
  return out;
}

}  // namespace skycat
