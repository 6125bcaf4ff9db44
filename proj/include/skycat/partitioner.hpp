#pragma once

// Work-balanced rectangular decomposition of the sky and task generation.
//
// Work is measured in predicted active pixels: the footprint pixel count of
// every prior-catalog entry summed over the images it lands in.

#include "skycat/sky_model.hpp"
#include "skycat/task.hpp"

#include <span>
#include <vector>

namespace skycat {

/// Predicted active-pixel count of one catalog entry over all images.
double entry_work(const CatalogEntry& entry, std::span<const ImageGeometry> images, const ModelConfig& config = {});

/// Sum of entry_work over the entries whose centers lie in `region` (closed).
double estimate_work(const SkyRegion& region, std::span<const CatalogEntry> catalog,
                     std::span<const ImageGeometry> images, const ModelConfig& config = {});

struct PartitionConfig {
  /// Regions are never split into pieces narrower than this (sky units).
  double min_extent = 4.0;
  ModelConfig model;
};

struct PartitionLeaf {
  SkyRegion region;
  double work = 0.0;
  /// Work exceeds the threshold but the region cannot be split further.
  bool at_min_extent = false;
};

/// Recursive bisection of `bounds` along the longer axis at the work median
/// until every leaf carries at most `work_threshold`.
std::vector<PartitionLeaf> partition_sky(const SkyRegion& bounds, std::span<const CatalogEntry> catalog,
                                         std::span<const ImageGeometry> images, double work_threshold,
                                         const PartitionConfig& config = {});

/// Second-stage partition: the stage-one tiling translated by half the
/// median region extent on both axes, clipped to `bounds`, with the regions
/// along the lower edges extended back to the bounds.
std::vector<SkyRegion> shift_partition(std::span<const SkyRegion> stage1, const SkyRegion& bounds);

/// Index of the region a point is assigned to: among regions containing it
/// (closed), the one with the lexicographically smallest min corner; -1 if
/// none.
int assign_region(Point2 p, std::span<const SkyRegion> regions);

struct TaskBuild {
  std::vector<Task> tasks;
  std::size_t skipped = 0;  ///< entries outside every region
};

/// One task per region. Sources are initialized from their catalog entries;
/// a task's images are those intersecting its region expanded by the
/// largest active-pixel radius in the catalog.
TaskBuild make_tasks(std::span<const SkyRegion> regions, std::span<const CatalogEntry> catalog,
                     std::span<const ImageGeometry> images, int stage, std::int64_t first_id = 1,
                     const ModelConfig& config = {});

/// Largest active-pixel radius (sky units) of any entry in any image.
double max_active_radius(std::span<const CatalogEntry> catalog, std::span<const ImageGeometry> images,
                         const ModelConfig& config = {});

}  // namespace skycat
