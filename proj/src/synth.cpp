#include "skycat/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

namespace skycat {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Widest galaxy mixture component, in effective radii.
constexpr double kWidestComponent = 1.1954218028214645;
constexpr double kRenderSds = 8.0;

}  // namespace

void ShapeRanges::validate() const {
  if (!(eccentricity_min >= 0.0 && eccentricity_min < eccentricity_max && eccentricity_max <= 1.0)) {
    throw ValidationError("shape ranges: eccentricity range must lie in (0, 1]");
  }
  if (!(scale_min > 0.0 && scale_min <= scale_max)) throw ValidationError("shape ranges: bad scale range");
  if (!(angle_min <= angle_max)) throw ValidationError("shape ranges: bad angle range");
  if (!(profile_min >= 0.0 && profile_min <= profile_max && profile_max <= 1.0)) {
    throw ValidationError("shape ranges: profile range must lie in [0, 1]");
  }
}

GroundTruth generate_catalog(const SkyRegion& bounds, std::size_t n_sources, const Priors& priors,
                             std::uint64_t seed, const ShapeRanges& shapes) {
  bounds.validate();
  priors.validate();
  shapes.validate();
  std::mt19937_64 rng(mix(seed));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);
  const Eigen::Matrix4d L = priors.color_cov.llt().matrixL();

  GroundTruth truth;
  truth.seed = seed;
  truth.entries.reserve(n_sources);
  for (std::size_t i = 0; i < n_sources; ++i) {
    CatalogEntry e;
    e.id = static_cast<std::int64_t>(i) + 1;
    e.position = {bounds.min_corner.x + bounds.width() * U(rng), bounds.min_corner.y + bounds.height() * U(rng)};
    e.is_star = U(rng) < priors.star_prob;
    const double log_r = priors.log_flux_mean + priors.log_flux_sd * N(rng);
    Eigen::Vector4d z;
    for (int k = 0; k < 4; ++k) z(k) = N(rng);
    const Eigen::Vector4d c = Eigen::Map<const Eigen::Vector4d>(priors.color_mean.data()) + L * z;
    for (int b = 0; b < kBandCount; ++b) {
      double l = log_r;
      for (int k = 0; k < kColorCount; ++k) l += color_weights()[b][k] * c(k);
      e.flux[b] = std::exp(l);
    }
    e.shape.profile_mix = shapes.profile_min + (shapes.profile_max - shapes.profile_min) * U(rng);
    e.shape.eccentricity = shapes.eccentricity_max - (shapes.eccentricity_max - shapes.eccentricity_min) * U(rng);
    e.shape.scale = shapes.scale_min + (shapes.scale_max - shapes.scale_min) * U(rng);
    e.shape.angle = shapes.angle_min + (shapes.angle_max - shapes.angle_min) * U(rng);
    truth.entries.push_back(e);
  }
  return truth;
}

std::uint64_t image_seed(std::uint64_t seed, std::uint64_t index) {
  return mix(mix(seed) ^ mix(index + 0x5851f42d4c957f2dULL));
}

ImagePatch render_image(std::span<const CatalogEntry> entries, const ImageGeometry& geometry, std::uint64_t seed) {
  geometry.meta.validate();
  if (geometry.width < 1 || geometry.height < 1) throw ValidationError("render: image dimensions must be >= 1");
  const ImageMeta& meta = geometry.meta;
  const int w = geometry.width, h = geometry.height;
  std::vector<double> rate(static_cast<std::size_t>(w) * h, meta.background);

  for (const auto& e : entries) {
    const double flux = e.flux[meta.band];
    if (!std::isfinite(flux) || flux < 0.0) {
      throw ValidationError("render: invalid flux for source " + std::to_string(e.id));
    }
    const Point2 u = meta.to_pixel(e.position);
    const double scale_px = e.shape.scale / meta.pixel_scale;
    const double spread = e.is_star ? meta.psf_sigma
                                    : std::sqrt(meta.psf_sigma * meta.psf_sigma +
                                                kWidestComponent * kWidestComponent * scale_px * scale_px);
    const double reach = kRenderSds * spread;
    const int c0 = std::max(0, static_cast<int>(std::ceil(u.x - reach)));
    const int c1 = std::min(w - 1, static_cast<int>(std::floor(u.x + reach)));
    const int r0 = std::max(0, static_cast<int>(std::ceil(u.y - reach)));
    const int r1 = std::min(h - 1, static_cast<int>(std::floor(u.y + reach)));
    for (int row = r0; row <= r1; ++row) {
      for (int col = c0; col <= c1; ++col) {
        const double dx = col - u.x, dy = row - u.y;
        const double g = e.is_star ? psf_density(dx, dy, meta.psf_sigma)
                                   : galaxy_density(dx, dy, e.shape, scale_px, meta.psf_sigma);
        rate[static_cast<std::size_t>(row) * w + col] += flux * g;
      }
    }
  }

  ImagePatch patch;
  patch.meta = meta;
  patch.width = w;
  patch.height = h;
  patch.pixels.resize(rate.size());
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < rate.size(); ++i) {
    if (!std::isfinite(rate[i]) || rate[i] > 1e9) {
      throw ValidationError("render: pixel rate overflow in image " + std::to_string(geometry.id));
    }
    std::poisson_distribution<std::int32_t> P(rate[i]);
    patch.pixels[i] = P(rng);
  }
  return patch;
}

std::vector<ImagePatch> render_images(const GroundTruth& truth, std::span<const ImageGeometry> images,
                                      std::uint64_t seed) {
  std::vector<ImagePatch> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back(render_image(truth.entries, images[i], image_seed(seed, static_cast<std::uint64_t>(images[i].id))));
  }
  return out;
}

std::vector<CatalogEntry> degrade_catalog(const GroundTruth& truth, double position_jitter, double flux_jitter,
                                          double flip_prob, std::uint64_t seed) {
  if (!(position_jitter >= 0.0) || !(flux_jitter >= 0.0)) throw ValidationError("degrade: jitter must be >= 0");
  if (!(flip_prob >= 0.0 && flip_prob <= 0.5)) throw ValidationError("degrade: flip_prob must lie in [0, 0.5]");
  std::mt19937_64 rng(mix(seed ^ 0xd1b54a32d192ed03ULL));
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<CatalogEntry> out = truth.entries;
  for (auto& e : out) {
    const double jx = N(rng), jy = N(rng);
    e.position.x += position_jitter * jx;
    e.position.y += position_jitter * jy;
    for (auto& f : e.flux) {
      const double j = N(rng);
      f *= std::exp(flux_jitter * j);
    }
    if (U(rng) < flip_prob) e.is_star = !e.is_star;
  }
  return out;
}

std::vector<ImageGeometry> tile_images(const SkyRegion& bounds, int tile_pixels, int overlap_pixels,
                                       std::span<const int> bands, double background, double psf_sigma,
                                       double pixel_scale) {
  bounds.validate();
  if (tile_pixels < 1 || overlap_pixels < 0 || overlap_pixels >= tile_pixels) {
    throw ValidationError("tile_images: need tile_pixels > overlap_pixels >= 0");
  }
  const int stride = tile_pixels - overlap_pixels;
  const auto tiles_along = [&](double extent) {
    const double px = extent / pixel_scale;
    return std::max(1, static_cast<int>(std::ceil((px + 1.0 - tile_pixels) / stride)) + 1);
  };
  const int nx = tiles_along(bounds.width());
  const int ny = tiles_along(bounds.height());
  std::vector<ImageGeometry> out;
  std::int64_t id = 0;
  for (int band : bands) {
    for (int ty = 0; ty < ny; ++ty) {
      for (int tx = 0; tx < nx; ++tx) {
        ImageGeometry g;
        g.id = id++;
        g.meta.band = band;
        g.meta.background = background;
        g.meta.psf_sigma = psf_sigma;
        g.meta.pixel_scale = pixel_scale;
        g.meta.origin = {bounds.min_corner.x + tx * stride * pixel_scale, bounds.min_corner.y + ty * stride * pixel_scale};
        g.width = tile_pixels;
        g.height = tile_pixels;
        g.meta.validate();
        out.push_back(g);
      }
    }
  }
  return out;
}

}  // namespace skycat
