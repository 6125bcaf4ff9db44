#pragma once

// Generative Poisson image model and its variational objective.
//
// A light source is either a star (point source blurred by the PSF) or a
// galaxy (a mixture of exponential and de Vaucouleurs profiles, each
// approximated by circular Gaussians, sheared by the galaxy shape and
// convolved with the PSF). Brightness is modelled in the reference band; the
// other four bands follow from four colors, the log flux ratios of adjacent
// bands.
//
// Pixel (col, row) of an image has its center at pixel coordinate
// (col, row); sky coordinates map to pixel coordinates through the image
// origin and pixel scale. Pixel integration is a point evaluation at the
// pixel center with unit pixel area.

#include "skycat/errors.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace skycat {

inline constexpr int kBandCount = 5;
inline constexpr int kColorCount = 4;
/// Index of the r band, the band whose brightness is modelled directly.
inline constexpr int kReferenceBand = 2;

enum SourceType : int { kStar = 0, kGalaxy = 1 };

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Coefficients expressing band log flux as reference log flux plus a
/// combination of the four colors: log f_b = log f_r + w_b . c.
const std::array<std::array<double, kColorCount>, kBandCount>& color_weights();

struct Priors {
  double star_prob = 0.5;
  double log_flux_mean = 7.0;
  double log_flux_sd = 1.0;
  std::array<double, kColorCount> color_mean{0.5, 0.3, 0.2, 0.1};
  Eigen::Matrix4d color_cov = Eigen::Matrix4d::Identity() * 0.04;

  void validate() const;
};

struct ImageMeta {
  int band = kReferenceBand;
  double background = 100.0;
  double psf_sigma = 1.0;
  Point2 origin;
  double pixel_scale = 1.0;

  void validate() const;
  Point2 to_pixel(Point2 sky) const {
    return {(sky.x - origin.x) / pixel_scale, (sky.y - origin.y) / pixel_scale};
  }
  Point2 to_sky(double col, double row) const {
    return {origin.x + col * pixel_scale, origin.y + row * pixel_scale};
  }
};

struct ImagePatch {
  ImageMeta meta;
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> pixels;  ///< row-major, width * height

  std::int32_t at(int col, int row) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  void validate() const;
};

struct PixelIndex {
  int col = 0;
  int row = 0;
};

/// Galaxy morphology. `scale` is the effective radius in sky units (pixels
/// at unit pixel scale); `angle` is in degrees and only meaningful modulo 180.
struct GalaxyShape {
  double profile_mix = 0.5;   ///< weight of the de Vaucouleurs profile
  double eccentricity = 1.0;  ///< minor / major axis ratio
  double scale = 1.0;
  double angle = 0.0;

  void validate() const;
};

/// Center and scale that fix a source's pixel footprint for the duration of
/// an optimization run. Light from a source is modelled only inside its
/// footprint, so the footprint must not move while parameters are updated.
struct FootprintAnchor {
  Point2 center;
  double scale = 0.0;
};

/// Per-source variational parameters. Index 0 of the per-type arrays is the
/// star hypothesis, index 1 the galaxy hypothesis.
struct SourceModel {
  std::int64_t id = 0;
  Point2 position;
  GalaxyShape shape;
  double q_star = 0.5;
  std::array<double, 2> logflux_mean{7.0, 7.0};
  std::array<double, 2> logflux_sd{0.1, 0.1};
  std::array<std::array<double, kColorCount>, 2> color_mean{};
  std::array<std::array<double, kColorCount>, 2> color_sd{{{0.1, 0.1, 0.1, 0.1}, {0.1, 0.1, 0.1, 0.1}}};
  FootprintAnchor anchor;

  void validate() const;
  /// Re-anchor the footprint at the current position and scale.
  void anchor_at_current() { anchor = {position, shape.scale}; }
};

/// A fully specified (non-random) source: ground truth or prior catalog entry.
struct CatalogEntry {
  std::int64_t id = 0;
  Point2 position;
  bool is_star = true;
  std::array<double, kBandCount> flux{};
  GalaxyShape shape;
};

struct ModelConfig {
  double active_radius_k = 4.0;
};

/// Smallest galaxy effective radius the model represents (sky units). Below
/// it a galaxy is indistinguishable from a point source.
inline constexpr double kMinGalaxyScale = 1.0;

// Free-parameter layout. Constrained quantities are reparameterized
// (logit for proportions, log for positive values) so the block objective
// is unconstrained.
inline constexpr int kParamCount = 27;
namespace param {
inline constexpr int kLogitStar = 0;
inline constexpr int kLogFluxMean[2] = {1, 3};
inline constexpr int kLogFluxLogSd[2] = {2, 4};
inline constexpr int kColorMean[2] = {5, 13};
inline constexpr int kColorLogSd[2] = {9, 17};
inline constexpr int kPosX = 21;
inline constexpr int kPosY = 22;
inline constexpr int kLogitProfile = 23;
inline constexpr int kLogitEccentricity = 24;
inline constexpr int kLogScale = 25;  ///< log(scale - kMinGalaxyScale)
inline constexpr int kAngle = 26;
}  // namespace param

using ParamVector = Eigen::Matrix<double, kParamCount, 1>;
using ParamMatrix = Eigen::Matrix<double, kParamCount, kParamCount>;

ParamVector pack(const SourceModel& source);
/// Writes the parameters into `source`, leaving id and anchor untouched.
void unpack(const ParamVector& theta, SourceModel& source);

struct Objective {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};

/// Isotropic Gaussian PSF density at offset (dx, dy) pixels.
double psf_density(double dx, double dy, double sigma);

/// Galaxy light profile convolved with the PSF, per unit flux, at offset
/// (dx, dy) pixels. `scale_px` is the effective radius in pixels.
double galaxy_density(double dx, double dy, const GalaxyShape& shape, double scale_px, double sigma);

/// Poisson rate of one pixel for fully specified sources (no footprint
/// truncation).
double expected_rate(std::span<const CatalogEntry> sources, PixelIndex pixel, const ImageMeta& meta,
                     int width, int height);

/// Pixels within k * (psf_sigma + scale) pixels of a center, plus the pixel
/// containing the center.
class Footprint {
 public:
  Footprint() = default;
  Footprint(Point2 center_sky, double scale_sky, const ImageMeta& meta, int width, int height, double k);

  bool empty() const { return col_lo_ > col_hi_ || row_lo_ > row_hi_; }
  bool contains(int col, int row) const;
  /// Row-major linear indices, ascending.
  std::vector<int> pixels() const;
  std::size_t count() const;

  double center_col() const { return cx_; }
  double center_row() const { return cy_; }
  double radius() const { return radius_; }
  int col_lo() const { return col_lo_; }
  int col_hi() const { return col_hi_; }
  int row_lo() const { return row_lo_; }
  int row_hi() const { return row_hi_; }

 private:
  double cx_ = 0.0, cy_ = 0.0, radius_ = 0.0;
  int width_ = 0;
  int center_col_ = -1, center_row_ = -1;
  int col_lo_ = 0, col_hi_ = -1, row_lo_ = 0, row_hi_ = -1;
};

/// Active pixels of a source in a patch, from its current position and scale.
std::vector<int> active_pixels(const SourceModel& source, const ImagePatch& patch, const ModelConfig& config = {});

/// Footprint of a source from its anchor.
Footprint anchored_footprint(const SourceModel& source, const ImagePatch& patch, const ModelConfig& config);

/// KL(q || prior) summed over the type, brightness and color latents.
double kl_divergence(const SourceModel& source, const Priors& priors);
/// Same, with exact gradient and Hessian in the free-parameter coordinates.
Objective kl_divergence_derivatives(const ParamVector& theta, const Priors& priors);

/// Block objective for one source with every other source held at its
/// current variational distribution. The pixels and the other sources'
/// contributions are gathered once at construction; evaluate() can then be
/// called repeatedly for different parameter vectors of the active source.
class BlockObjective {
 public:
  BlockObjective(std::span<const SourceModel> sources, std::span<const ImagePatch> patches, const Priors& priors,
                 std::size_t active, const ModelConfig& config = {});
  /// `neighbors` restricts which other sources can contribute light to the
  /// active footprint; sources not listed are assumed not to overlap it.
  BlockObjective(std::span<const SourceModel> sources, std::span<const ImagePatch> patches, const Priors& priors,
                 std::size_t active, std::span<const std::size_t> neighbors, const ModelConfig& config = {});

  Objective evaluate(const ParamVector& theta) const;
  double value(const ParamVector& theta) const;
  /// value(a) - value(b), accumulated pixel by pixel to limit cancellation.
  double difference(const ParamVector& a, const ParamVector& b) const;

  std::size_t active_pixel_count() const { return pixel_count_; }
  const ParamVector& initial() const { return initial_; }

 private:
  struct PatchBlock {
    const ImagePatch* patch = nullptr;
    std::vector<int> cols, rows;
    std::vector<double> counts, fixed_mean, fixed_var;
  };

  void build(std::span<const SourceModel> sources, std::span<const ImagePatch> patches, std::size_t active,
             std::span<const std::size_t> neighbors);

  Priors priors_;
  ModelConfig config_;
  ParamVector initial_;
  std::vector<PatchBlock> blocks_;
  std::size_t pixel_count_ = 0;
};

/// Block ELBO of source `active`, evaluated at its current parameters.
Objective elbo(std::span<const SourceModel> sources, std::span<const ImagePatch> patches, const Priors& priors,
               std::size_t active, const ModelConfig& config = {});

/// Full variational objective over every pixel of every patch and every
/// source's KL term (up to the constant sum of log x!).
double task_elbo(std::span<const SourceModel> sources, std::span<const ImagePatch> patches, const Priors& priors,
                 const ModelConfig& config = {});

struct GradientCheckReport {
  double gradient_error = 0.0;
  double hessian_error = 0.0;
  double max_error() const { return gradient_error > hessian_error ? gradient_error : hessian_error; }
};

/// Compares the analytic gradient and Hessian-vector products against
/// central differences with the given step.
GradientCheckReport check_gradients(std::span<const SourceModel> sources, std::span<const ImagePatch> patches,
                                    const Priors& priors, std::size_t active, double step,
                                    const ModelConfig& config = {});

/// Initial variational parameters from a catalog entry: type probability
/// 0.99 or 0.01 from the label, both brightness hypotheses at the catalog
/// flux, colors from flux ratios, footprint anchored at the entry.
SourceModel source_from_entry(const CatalogEntry& entry, double initial_sd = 0.1);

/// Posterior-mean point configuration used for rendering and scoring:
/// the more probable type with the median flux of that hypothesis.
CatalogEntry point_estimate(const SourceModel& source);

}  // namespace skycat
