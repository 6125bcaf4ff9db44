#pragma once

// Small synthetic skies shared by the tests.

#include "skycat/sky_model.hpp"
#include "skycat/synth.hpp"
#include "skycat/task.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace fixture {

struct Sky {
  skycat::GroundTruth truth;
  std::vector<skycat::ImageGeometry> geometry;
  std::vector<skycat::ImagePatch> patches;
  skycat::Priors priors;
};

inline skycat::ShapeRanges small_galaxies() {
  skycat::ShapeRanges r;
  r.scale_min = skycat::kMinGalaxyScale;
  r.scale_max = skycat::kMinGalaxyScale + 1.0;
  return r;
}

/// `n` sources on a width x height pixel field with one image per band.
inline Sky make_sky(std::size_t n, double width, double height, std::vector<int> bands, std::uint64_t seed,
                    const skycat::ShapeRanges& shapes = small_galaxies(), double background = 100.0,
                    double psf_sigma = 1.2) {
  Sky sky;
  sky.priors.log_flux_mean = 7.5;
  sky.priors.log_flux_sd = 0.7;
  const skycat::SkyRegion bounds{{0.0, 0.0}, {width, height}};
  sky.truth = skycat::generate_catalog(bounds, n, sky.priors, seed, shapes);
  std::int64_t id = 0;
  for (int b : bands) {
    skycat::ImageGeometry g;
    g.id = id++;
    g.meta.band = b;
    g.meta.background = background;
    g.meta.psf_sigma = psf_sigma;
    g.meta.origin = {0.0, 0.0};
    g.width = static_cast<int>(std::ceil(width)) + 1;
    g.height = static_cast<int>(std::ceil(height)) + 1;
    sky.geometry.push_back(g);
  }
  sky.patches = skycat::render_images(sky.truth, sky.geometry, seed + 1000);
  return sky;
}

inline std::vector<skycat::SourceModel> init_from(const std::vector<skycat::CatalogEntry>& entries) {
  std::vector<skycat::SourceModel> out;
  for (const auto& e : entries) out.push_back(skycat::source_from_entry(e));
  return out;
}

/// Peak source counts over background noise, maximized over the images.
inline double peak_snr(const skycat::CatalogEntry& e, const std::vector<skycat::ImagePatch>& patches) {
  double best = 0.0;
  for (const auto& p : patches) {
    const double scale_px = e.shape.scale / p.meta.pixel_scale;
    const double peak = e.is_star ? skycat::psf_density(0.0, 0.0, p.meta.psf_sigma)
                                  : skycat::galaxy_density(0.0, 0.0, e.shape, scale_px, p.meta.psf_sigma);
    best = std::max(best, e.flux[p.meta.band] * peak / std::sqrt(p.meta.background));
  }
  return best;
}

using skycat::CatalogEntry;
using skycat::ImagePatch;
using skycat::Priors;
using skycat::SourceModel;
using skycat::kMinGalaxyScale;
using skycat::point_estimate;
using skycat::expected_rate;

/// A random well-conditioned configuration: a few sources on two images in
/// different bands, with pixel counts sampled near the model rate.
struct Config {
  std::vector<SourceModel> sources;
  std::vector<ImagePatch> patches;
  Priors priors;
};

inline Config random_config(std::mt19937_64& rng, int n_sources = 2) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);
  Config c;
  for (int b = 0; b < 2; ++b) {
    ImagePatch p;
    p.width = 16;
    p.height = 14;
    p.meta.band = static_cast<int>(U(rng) * 5);
    p.meta.background = 50.0 + 100.0 * U(rng);
    p.meta.psf_sigma = 0.9 + 0.6 * U(rng);
    p.meta.pixel_scale = 0.8 + 0.4 * U(rng);
    p.meta.origin = {-1.0 + U(rng), -1.0 + U(rng)};
    p.pixels.resize(static_cast<std::size_t>(p.width) * p.height);
    for (auto& px : p.pixels) px = static_cast<std::int32_t>(p.meta.background + 40.0 * U(rng));
    c.patches.push_back(p);
  }
  for (int s = 0; s < n_sources; ++s) {
    SourceModel src;
    src.id = s;
    src.position = {4.0 + 6.0 * U(rng), 4.0 + 5.0 * U(rng)};
    src.shape.profile_mix = 0.1 + 0.8 * U(rng);
    src.shape.eccentricity = 0.35 + 0.6 * U(rng);
    src.shape.scale = kMinGalaxyScale + 0.2 + 1.5 * U(rng);
    src.shape.angle = 180.0 * U(rng);
    src.q_star = 0.1 + 0.8 * U(rng);
    for (int t = 0; t < 2; ++t) {
      src.logflux_mean[t] = 6.0 + 1.5 * U(rng);
      src.logflux_sd[t] = 0.05 + 0.3 * U(rng);
      for (int k = 0; k < 4; ++k) {
        src.color_mean[t][k] = 0.3 * N(rng);
        src.color_sd[t][k] = 0.05 + 0.2 * U(rng);
      }
    }
    src.anchor_at_current();
    c.sources.push_back(src);
  }
  // Counts near the model rate so the objective is in a realistic regime.
  for (auto& p : c.patches) {
    std::vector<CatalogEntry> pts;
    for (const auto& s : c.sources) pts.push_back(point_estimate(s));
    for (int row = 0; row < p.height; ++row) {
      for (int col = 0; col < p.width; ++col) {
        const double r = expected_rate(pts, {col, row}, p.meta, p.width, p.height);
        std::poisson_distribution<int> P(r);
        p.pixels[static_cast<std::size_t>(row) * p.width + col] = P(rng);
      }
    }
  }
  return c;
}

}  // namespace fixture
