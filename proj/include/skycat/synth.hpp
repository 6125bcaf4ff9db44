#pragma once

// Synthetic skies: ground-truth catalogs drawn from the priors, Poisson
// images rendered from the forward model, and degraded prior catalogs.

#include "skycat/sky_model.hpp"
#include "skycat/task.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace skycat {

/// Uniform sampling ranges for galaxy shapes.
struct ShapeRanges {
  double eccentricity_min = 0.3;  ///< exclusive
  double eccentricity_max = 1.0;  ///< inclusive
  double scale_min = 1.0;
  double scale_max = 5.0;
  double angle_min = 0.0;
  double angle_max = 180.0;
  double profile_min = 0.0;
  double profile_max = 1.0;

  void validate() const;
};

struct GroundTruth {
  std::vector<CatalogEntry> entries;
  std::uint64_t seed = 0;
};

GroundTruth generate_catalog(const SkyRegion& bounds, std::size_t n_sources, const Priors& priors,
                             std::uint64_t seed, const ShapeRanges& shapes = {});

/// Seed used for image `index` of a render with seed `seed`.
std::uint64_t image_seed(std::uint64_t seed, std::uint64_t index);

/// Renders one image: every pixel is an independent Poisson draw with the
/// expected rate of the catalog. Each source is evaluated out to eight
/// standard deviations of its widest profile component.
ImagePatch render_image(std::span<const CatalogEntry> entries, const ImageGeometry& geometry, std::uint64_t seed);

std::vector<ImagePatch> render_images(const GroundTruth& truth, std::span<const ImageGeometry> images,
                                      std::uint64_t seed);

/// Prior catalog: Gaussian jitter on positions (sky units) and on every band
/// log flux, and type labels flipped with probability flip_prob.
std::vector<CatalogEntry> degrade_catalog(const GroundTruth& truth, double position_jitter, double flux_jitter,
                                          double flip_prob, std::uint64_t seed);

/// A grid of overlapping images covering `bounds` in every band.
std::vector<ImageGeometry> tile_images(const SkyRegion& bounds, int tile_pixels, int overlap_pixels,
                                       std::span<const int> bands, double background, double psf_sigma,
                                       double pixel_scale = 1.0);

}  // namespace skycat
