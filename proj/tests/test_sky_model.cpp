#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "skycat/jet.hpp"
#include "skycat/sky_model.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

using namespace skycat;
using fixture::Config;
using fixture::random_config;

namespace {

CatalogEntry make_star(double x, double y, double flux) {
  CatalogEntry e;
  e.position = {x, y};
  e.is_star = true;
  e.flux.fill(flux);
  return e;
}

CatalogEntry make_galaxy(double x, double y, double flux, GalaxyShape shape) {
  CatalogEntry e = make_star(x, y, flux);
  e.is_star = false;
  e.shape = shape;
  return e;
}


}  // namespace

TEST_CASE("expected_rate: empty catalog gives the background") {
  ImageMeta meta;
  meta.background = 123.5;
  CHECK(expected_rate({}, {3, 4}, meta, 10, 10) == 123.5);
}

TEST_CASE("expected_rate: star at a pixel center") {
  ImageMeta meta;
  meta.background = 100.0;
  meta.psf_sigma = 1.3;
  const std::vector<CatalogEntry> s{make_star(5.0, 6.0, 2000.0)};
  const double expected = 100.0 + 2000.0 / (2.0 * std::numbers::pi * 1.3 * 1.3);
  CHECK(expected_rate(s, {5, 6}, meta, 12, 12) == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("expected_rate: offset star matches direct density evaluation") {
  ImageMeta meta;
  meta.background = 10.0;
  meta.psf_sigma = 1.1;
  meta.origin = {2.0, -3.0};
  meta.pixel_scale = 0.5;
  // Offset (0.3, 0.7) pixels from pixel (4, 5).
  const std::vector<CatalogEntry> s{make_star(2.0 + 4.3 * 0.5, -3.0 + 5.7 * 0.5, 500.0)};
  const double oracle = 10.0 + 500.0 * oracle::star_profile(-0.3, -0.7, 1.1);
  CHECK(std::abs(expected_rate(s, {4, 5}, meta, 10, 10) - oracle) < 1e-12);
}

TEST_CASE("expected_rate: galaxy matches covariance-form mixture") {
  ImageMeta meta;
  meta.psf_sigma = 1.2;
  meta.pixel_scale = 0.7;
  GalaxyShape shape{0.3, 0.55, 2.1, 37.0};
  const std::vector<CatalogEntry> s{make_galaxy(5.1, 4.4, 900.0, shape)};
  for (int row = 0; row < 14; ++row) {
    for (int col = 0; col < 14; ++col) {
      const double dx = col - 5.1 / 0.7, dy = row - 4.4 / 0.7;
      const double oracle = meta.background + 900.0 * oracle::galaxy_profile(dx, dy, shape, 2.1 / 0.7, 1.2);
      CHECK(expected_rate(s, {col, row}, meta, 14, 14) == doctest::Approx(oracle).epsilon(1e-12));
    }
  }
}

TEST_CASE("expected_rate: errors") {
  ImageMeta meta;
  const std::vector<CatalogEntry> s{make_star(1.0, 1.0, 10.0)};
  CHECK_THROWS_AS(expected_rate(s, {10, 0}, meta, 10, 10), BoundsError);
  CHECK_THROWS_AS(expected_rate(s, {0, -1}, meta, 10, 10), BoundsError);
  std::vector<CatalogEntry> bad{make_star(NAN, 1.0, 10.0)};
  CHECK_THROWS_AS(expected_rate(bad, {0, 0}, meta, 10, 10), ValidationError);
  bad = {make_star(1.0, 1.0, INFINITY)};
  CHECK_THROWS_AS(expected_rate(bad, {0, 0}, meta, 10, 10), ValidationError);
}

TEST_CASE("expected_rate is additive in sources") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  ImageMeta meta;
  meta.background = 80.0;
  meta.psf_sigma = 1.4;
  std::vector<CatalogEntry> a, b;
  for (int i = 0; i < 4; ++i) {
    a.push_back(make_star(20 * U(rng), 20 * U(rng), 100 + 1000 * U(rng)));
    b.push_back(make_galaxy(20 * U(rng), 20 * U(rng), 100 + 1000 * U(rng), {U(rng), 0.3 + 0.7 * U(rng), 1 + 2 * U(rng), 180 * U(rng)}));
  }
  std::vector<CatalogEntry> ab = a;
  ab.insert(ab.end(), b.begin(), b.end());
  for (int row = 0; row < 20; row += 3) {
    for (int col = 0; col < 20; col += 3) {
      const double fa = expected_rate(a, {col, row}, meta, 20, 20) - 80.0;
      const double fb = expected_rate(b, {col, row}, meta, 20, 20) - 80.0;
      const double fab = expected_rate(ab, {col, row}, meta, 20, 20) - 80.0;
      CHECK(std::abs(fab - (fa + fb)) <= 1e-12 * (80.0 + fab));
    }
  }
}

TEST_CASE("flux conservation over a large patch") {
  ImageMeta meta;
  meta.background = 50.0;
  meta.psf_sigma = 1.0;
  const int n = 120;
  for (int type = 0; type < 2; ++type) {
    const double flux = 5000.0;
    const GalaxyShape shape{0.6, 0.5, 3.0, 20.0};
    const std::vector<CatalogEntry> s{type == 0 ? make_star(60.2, 59.7, flux) : make_galaxy(60.2, 59.7, flux, shape)};
    double total = 0.0;
    for (int row = 0; row < n; ++row) {
      for (int col = 0; col < n; ++col) total += expected_rate(s, {col, row}, meta, n, n) - 50.0;
    }
    CHECK(std::abs(total - flux) / flux < 1e-3);
  }
}

TEST_CASE("active_pixels") {
  ImagePatch patch;
  patch.width = 40;
  patch.height = 30;
  patch.meta.psf_sigma = 1.0;
  patch.pixels.assign(40 * 30, 0);
  SourceModel src;

  SUBCASE("far outside the patch") {
    src.position = {500.0, -300.0};
    CHECK(active_pixels(src, patch).empty());
  }
  SUBCASE("k = 4, sigma = 1, scale = 0 matches a direct scan") {
    src.position = {20.3, 14.6};
    src.shape.scale = 0.0;
    std::vector<int> scan;
    for (int row = 0; row < 30; ++row) {
      for (int col = 0; col < 40; ++col) {
        const double dx = col - 20.3, dy = row - 14.6;
        if (dx * dx + dy * dy <= 16.0) scan.push_back(row * 40 + col);
      }
    }
    CHECK(active_pixels(src, patch, {4.0}) == scan);
  }
  SUBCASE("k = 0 gives the pixel containing the center") {
    src.position = {7.6, 3.2};
    src.shape.scale = 2.0;
    CHECK(active_pixels(src, patch, {0.0}) == std::vector<int>{3 * 40 + 8});
  }
  SUBCASE("shrinking the scale never adds pixels") {
    src.position = {12.4, 9.9};
    std::vector<int> prev;
    for (double scale = 4.0; scale >= 0.0; scale -= 0.37) {
      src.shape.scale = scale;
      const auto cur = active_pixels(src, patch);
      if (!prev.empty()) CHECK(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
      prev = cur;
    }
  }
  SUBCASE("footprint agrees with the membership oracle near edges") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> U(-5.0, 45.0);
    for (int trial = 0; trial < 50; ++trial) {
      src.position = {U(rng), U(rng)};
      src.shape.scale = std::abs(U(rng)) / 10.0;
      std::vector<int> scan;
      for (int row = 0; row < 30; ++row) {
        for (int col = 0; col < 40; ++col) {
          if (oracle::in_footprint(src.position, src.shape.scale, patch.meta, col, row, 4.0)) scan.push_back(row * 40 + col);
        }
      }
      CHECK(active_pixels(src, patch) == scan);
    }
  }
}

TEST_CASE("pack and unpack round-trip") {
  std::mt19937_64 rng(3);
  auto c = random_config(rng, 1);
  const SourceModel& s = c.sources[0];
  SourceModel t;
  unpack(pack(s), t);
  CHECK(t.q_star == doctest::Approx(s.q_star).epsilon(1e-14));
  CHECK(t.shape.eccentricity == doctest::Approx(s.shape.eccentricity).epsilon(1e-14));
  CHECK(t.shape.scale == doctest::Approx(s.shape.scale).epsilon(1e-14));
  CHECK(t.logflux_sd[1] == doctest::Approx(s.logflux_sd[1]).epsilon(1e-14));
  CHECK(t.color_sd[0][2] == doctest::Approx(s.color_sd[0][2]).epsilon(1e-14));
  CHECK(t.position.x == s.position.x);
}

TEST_CASE("elbo: q equal to the prior on a region without pixels is zero") {
  Priors priors;
  priors.color_cov = Eigen::Vector4d(0.04, 0.09, 0.01, 0.25).asDiagonal();
  SourceModel s;
  s.position = {1000.0, 1000.0};
  s.q_star = priors.star_prob;
  for (int t = 0; t < 2; ++t) {
    s.logflux_mean[t] = priors.log_flux_mean;
    s.logflux_sd[t] = priors.log_flux_sd;
    for (int k = 0; k < 4; ++k) {
      s.color_mean[t][k] = priors.color_mean[k];
      s.color_sd[t][k] = std::sqrt(priors.color_cov(k, k));
    }
  }
  s.anchor_at_current();
  ImagePatch patch;
  patch.width = patch.height = 8;
  patch.pixels.assign(64, 100);
  const std::vector<SourceModel> sources{s};
  const std::vector<ImagePatch> patches{patch};
  const Objective o = elbo(sources, patches, priors, 0);
  CHECK(std::abs(o.value) < 1e-12);
  CHECK(std::abs(kl_divergence(s, priors)) < 1e-12);
}

TEST_CASE("elbo: errors") {
  std::mt19937_64 rng(9);
  auto c = random_config(rng, 1);
  CHECK_THROWS_AS(elbo(c.sources, {}, c.priors, 0), ValidationError);
  auto bad = c.sources;
  bad[0].logflux_sd[0] = 0.0;
  CHECK_THROWS_AS(elbo(bad, c.patches, c.priors, 0), ValidationError);
  bad = c.sources;
  bad[0].color_sd[1][3] = -1.0;
  CHECK_THROWS_AS(elbo(bad, c.patches, c.priors, 0), ValidationError);
  CHECK_THROWS_AS(elbo(c.sources, c.patches, c.priors, 5), BoundsError);
}

TEST_CASE("elbo: hessian is exactly symmetric and value agrees with task objective differences") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto c = random_config(rng, 3);
    for (std::size_t a = 0; a < c.sources.size(); ++a) {
      const Objective o = elbo(c.sources, c.patches, c.priors, a);
      CHECK(o.hessian == o.hessian.transpose());
      CHECK(o.gradient.allFinite());
      // The block objective differs from the task objective by a constant
      // independent of the active source.
      BlockObjective block(c.sources, c.patches, c.priors, a);
      auto moved = c.sources;
      ParamVector th = pack(moved[a]);
      th(param::kPosX) += 0.3;
      th(param::kLogFluxMean[1]) -= 0.2;
      th(param::kLogitProfile) += 0.5;
      unpack(th, moved[a]);
      const double d_task = task_elbo(moved, c.patches, c.priors) - task_elbo(c.sources, c.patches, c.priors);
      CHECK(block.difference(th, block.initial()) == doctest::Approx(d_task).epsilon(1e-8));
      CHECK(block.value(th) - block.value(block.initial()) == doctest::Approx(d_task).epsilon(1e-8));
      CHECK(block.evaluate(th).value == doctest::Approx(block.value(th)).epsilon(1e-13));
    }
  }
}

TEST_CASE("check_gradients: random configurations") {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 10; ++trial) {
    auto c = random_config(rng, 2);
    const auto r = check_gradients(c.sources, c.patches, c.priors, trial % 2, 1e-6);
    CHECK(r.gradient_error < 1e-6);
    CHECK(r.hessian_error < 1e-6);
  }
}

TEST_CASE("check_gradients: invalid step") {
  std::mt19937_64 rng(2);
  auto c = random_config(rng, 1);
  CHECK_THROWS_AS(check_gradients(c.sources, c.patches, c.priors, 0, 0.0), ValidationError);
  CHECK_THROWS_AS(check_gradients(c.sources, c.patches, c.priors, 0, 1e-2), ValidationError);
}

TEST_CASE("gradient vanishes at the maximum of a one-dimensional slice") {
  std::mt19937_64 rng(77);
  auto c = random_config(rng, 1);
  BlockObjective block(c.sources, c.patches, c.priors, 0);
  ParamVector th = block.initial();
  const int i = param::kLogFluxMean[0];
  for (int it = 0; it < 50; ++it) {
    const Objective o = block.evaluate(th);
    if (std::abs(o.gradient(i)) < 1e-12) break;
    th(i) -= o.gradient(i) / o.hessian(i, i);
  }
  CHECK(std::abs(block.evaluate(th).gradient(i)) < 1e-8);
}

TEST_CASE("KL of the type indicator is concave in the type probability") {
  Priors priors;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (double q : {1e-9, 1e-4, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-9}) {
    SourceModel s;
    s.q_star = q;
    for (int t = 0; t < 2; ++t) {
      s.logflux_mean[t] = 5.0 + 4.0 * U(rng);
      s.logflux_sd[t] = 0.1 + U(rng);
    }
    const ParamVector th = pack(s);
    const Objective kl = kl_divergence_derivatives(th, priors);
    // Second derivative of -KL with respect to q via the logit chain rule.
    const double z = th(param::kLogitStar);
    const double qq = sigmoid(z);
    const double dz = 1.0 / (qq * (1.0 - qq));
    const double d2z = (2.0 * qq - 1.0) / (qq * qq * (1.0 - qq) * (1.0 - qq));
    const double d2 = -(kl.hessian(0, 0) * dz * dz + kl.gradient(0) * d2z);
    CHECK(d2 <= 1e-10);
    CHECK(kl.hessian == kl.hessian.transpose());
  }
}

TEST_CASE("KL derivatives agree with central differences") {
  Priors priors;
  priors.color_cov << 0.05, 0.01, 0.0, 0.0, 0.01, 0.06, 0.01, 0.0, 0.0, 0.01, 0.04, 0.005, 0.0, 0.0, 0.005, 0.03;
  std::mt19937_64 rng(4);
  auto c = random_config(rng, 1);
  const ParamVector th = pack(c.sources[0]);
  const Objective kl = kl_divergence_derivatives(th, priors);
  CHECK(kl.value == doctest::Approx(kl_divergence(c.sources[0], priors)).epsilon(1e-13));
  const double h = 1e-6;
  for (int i = 0; i < kParamCount; ++i) {
    ParamVector up = th, dn = th;
    up(i) += h;
    dn(i) -= h;
    SourceModel su = c.sources[0], sd = c.sources[0];
    unpack(up, su);
    unpack(dn, sd);
    const double fd = (kl_divergence(su, priors) - kl_divergence(sd, priors)) / (2 * h);
    CHECK(std::abs(fd - kl.gradient(i)) < 1e-7 * (1 + std::abs(fd)));
  }
}

TEST_CASE("elbo lower-bounds the quadrature log evidence on tiny instances") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 8; ++trial) {
    const auto inst = oracle::random_tiny_instance(rng);
    const std::vector<ImagePatch> patches{inst.patch};
    const double value = task_elbo(inst.sources, patches, inst.priors);
    const auto ev = oracle::log_evidence(inst.sources, inst.patch, inst.priors, 4.0);
    CHECK(ev.self_check < 1e-7);
    CHECK(value <= ev.log_evidence + 1e-6);
  }
}

TEST_CASE("task_elbo is tight for a prior-matched q on an empty region") {
  // With no pixels to explain, log p(x) = 0 and the optimum q is the prior.
  Priors priors;
  SourceModel s;
  s.position = {1e4, 1e4};
  s.q_star = priors.star_prob;
  for (int t = 0; t < 2; ++t) {
    s.logflux_mean[t] = priors.log_flux_mean;
    s.logflux_sd[t] = priors.log_flux_sd;
    for (int k = 0; k < 4; ++k) {
      s.color_mean[t][k] = priors.color_mean[k];
      s.color_sd[t][k] = 0.2;
    }
  }
  s.anchor_at_current();
  ImagePatch patch;
  patch.width = patch.height = 4;
  patch.pixels.assign(16, 0);
  patch.meta.background = 1.0;
  const std::vector<SourceModel> sources{s};
  const std::vector<ImagePatch> patches{patch};
  CHECK(task_elbo(sources, patches, priors) == doctest::Approx(-16.0).epsilon(1e-12));
}
