#include "doctest.h"
#include "oracles.hpp"
#include "skycat/partitioner.hpp"
#include "skycat/synth.hpp"

#include <algorithm>
#include <random>

using namespace skycat;

namespace {

std::vector<ImageGeometry> grid_images(const SkyRegion& bounds, int tile = 40, int overlap = 8) {
  const std::vector<int> bands{1, 2};
  return tile_images(bounds, tile, overlap, bands, 100.0, 1.2);
}

/// Pixel-by-pixel count of every entry's footprint in every image.
double scan_work(const std::vector<CatalogEntry>& entries, const std::vector<ImageGeometry>& images) {
  double w = 0.0;
  for (const auto& e : entries) {
    for (const auto& g : images) {
      for (int row = 0; row < g.height; ++row)
        for (int col = 0; col < g.width; ++col)
          w += oracle::in_footprint(e.position, e.shape.scale, g.meta, col, row, 4.0) ? 1.0 : 0.0;
    }
  }
  return w;
}

bool interiors_overlap(const SkyRegion& a, const SkyRegion& b) {
  return std::min(a.max_corner.x, b.max_corner.x) > std::max(a.min_corner.x, b.min_corner.x) &&
         std::min(a.max_corner.y, b.max_corner.y) > std::max(a.min_corner.y, b.min_corner.y);
}

/// Area identity plus pairwise disjoint interiors plus containment.
void check_tiling(const std::vector<SkyRegion>& regions, const SkyRegion& bounds) {
  double area = 0.0;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    area += regions[i].area();
    CHECK(regions[i].min_corner.x >= bounds.min_corner.x);
    CHECK(regions[i].min_corner.y >= bounds.min_corner.y);
    CHECK(regions[i].max_corner.x <= bounds.max_corner.x);
    CHECK(regions[i].max_corner.y <= bounds.max_corner.y);
    for (std::size_t j = i + 1; j < regions.size(); ++j) CHECK_FALSE(interiors_overlap(regions[i], regions[j]));
  }
  CHECK(area == doctest::Approx(bounds.area()).epsilon(1e-9));
}

std::vector<SkyRegion> regions_of(const std::vector<PartitionLeaf>& leaves) {
  std::vector<SkyRegion> out;
  for (const auto& l : leaves) out.push_back(l.region);
  return out;
}

}  // namespace

TEST_CASE("estimate_work") {
  const SkyRegion bounds{{0, 0}, {100, 80}};
  const auto images = grid_images(bounds);
  CHECK(estimate_work(bounds, {}, images) == 0.0);

  Priors pr;
  const auto truth = generate_catalog(bounds, 100, pr, 4);
  CHECK(estimate_work(bounds, truth.entries, images) == scan_work(truth.entries, images));

  // Split at a coordinate no entry sits on: additive exactly.
  const double cut = 50.123456;
  const SkyRegion left{{0, 0}, {cut, 80}}, right{{cut, 0}, {100, 80}};
  CHECK(estimate_work(left, truth.entries, images) + estimate_work(right, truth.entries, images) ==
        estimate_work(bounds, truth.entries, images));
}

TEST_CASE("partition_sky: balance on a uniform sky") {
  const SkyRegion bounds{{0, 0}, {160, 160}};
  const auto images = grid_images(bounds, 48, 8);
  Priors pr;
  ShapeRanges sr;
  sr.scale_max = 2.0;
  const auto truth = generate_catalog(bounds, 2000, pr, 12, sr);
  const double total = estimate_work(bounds, truth.entries, images);
  // Entry work is indivisible, so a quarter lands a few entries above or
  // below total / 4; 2% headroom keeps the four quarters as leaves.
  const auto leaves = partition_sky(bounds, truth.entries, images, 1.02 * total / 4);
  REQUIRE(leaves.size() == 4);
  double lo = 1e300, hi = 0.0, sum = 0.0;
  for (const auto& l : leaves) {
    CHECK_FALSE(l.at_min_extent);
    CHECK(l.work == estimate_work(l.region, truth.entries, images));
    lo = std::min(lo, l.work);
    hi = std::max(hi, l.work);
    sum += l.work;
  }
  CHECK(hi / lo <= 1.1);
  CHECK(sum == doctest::Approx(total));
  check_tiling(regions_of(leaves), bounds);

  const auto many = partition_sky(bounds, truth.entries, images, total / 32);
  check_tiling(regions_of(many), bounds);
  for (const auto& l : many) CHECK(l.work <= total / 32);
  CHECK(partition_sky(bounds, truth.entries, images, total / 32).size() == many.size());
}

TEST_CASE("partition_sky: degenerate catalogs") {
  const SkyRegion bounds{{0, 0}, {64, 64}};
  const auto images = grid_images(bounds);
  CatalogEntry e;
  e.position = {10, 20};
  e.flux.fill(100);
  const std::vector<CatalogEntry> one{e};
  auto leaves = partition_sky(bounds, one, images, 1e12);
  REQUIRE(leaves.size() == 1);
  CHECK(leaves[0].region.min_corner.x == 0);
  CHECK(leaves[0].region.max_corner.y == 64);

  const std::vector<CatalogEntry> hotspot(50, e);
  const double total = estimate_work(bounds, hotspot, images);
  leaves = partition_sky(bounds, hotspot, images, total / 10);
  check_tiling(regions_of(leaves), bounds);
  int flagged = 0;
  for (const auto& l : leaves) {
    if (l.at_min_extent) {
      ++flagged;
      CHECK(l.work == total);
      CHECK(l.region.contains_closed(e.position));
    } else {
      CHECK(l.work == 0.0);
    }
  }
  CHECK(flagged == 1);
  CHECK_THROWS_AS(partition_sky(bounds, hotspot, images, 0.0), ValidationError);
}

TEST_CASE("shift_partition") {
  const SkyRegion bounds{{0, 0}, {100, 60}};
  const std::vector<SkyRegion> single{bounds};
  const auto s1 = shift_partition(single, bounds);
  REQUIRE(s1.size() == 1);
  CHECK(s1[0].min_corner.x == 0);
  CHECK(s1[0].max_corner.x == 100);
  CHECK(s1[0].max_corner.y == 60);

  const std::vector<SkyRegion> grid{
      {{0, 0}, {50, 30}}, {{50, 0}, {100, 30}}, {{0, 30}, {50, 60}}, {{50, 30}, {100, 60}}};
  const auto s2 = shift_partition(grid, bounds);
  check_tiling(s2, bounds);
  // Points on the stage-1 cross are interior to a stage-2 region.
  for (double t = 1.0; t < 100.0; t += 1.0) {
    const Point2 p{t, 30.0};
    CHECK(std::any_of(s2.begin(), s2.end(), [&](const SkyRegion& r) {
      return p.x > r.min_corner.x && p.x < r.max_corner.x && p.y > r.min_corner.y && p.y < r.max_corner.y;
    }) == (t != 75.0));
  }
  for (double t = 1.0; t < 60.0; t += 1.0) {
    const Point2 p{50.0, t};
    CHECK(std::any_of(s2.begin(), s2.end(), [&](const SkyRegion& r) {
      return p.x > r.min_corner.x && p.x < r.max_corner.x && p.y > r.min_corner.y && p.y < r.max_corner.y;
    }) == (t != 45.0));
  }

  // A random 16-leaf partition still tiles after the shift.
  const auto images = grid_images({{0, 0}, {100, 60}});
  const auto truth = generate_catalog(bounds, 400, Priors{}, 77);
  const double total = estimate_work(bounds, truth.entries, images);
  const auto leaves = partition_sky(bounds, truth.entries, images, total / 16);
  CHECK(leaves.size() >= 16);
  check_tiling(shift_partition(regions_of(leaves), bounds), bounds);
}

TEST_CASE("make_tasks") {
  const SkyRegion bounds{{0, 0}, {120, 120}};
  const auto images = grid_images(bounds, 40, 8);
  auto truth = generate_catalog(bounds, 300, Priors{}, 5);
  CatalogEntry edge = truth.entries[0];
  edge.id = 9001;
  edge.position = {60.0, 60.0};
  truth.entries.push_back(edge);
  CatalogEntry outside = edge;
  outside.id = 9002;
  outside.position = {-5.0, 10.0};
  truth.entries.push_back(outside);

  const std::vector<SkyRegion> regions{
      {{0, 0}, {60, 60}}, {{60, 0}, {120, 60}}, {{0, 60}, {60, 120}}, {{60, 60}, {120, 120}}};
  const auto built = make_tasks(regions, truth.entries, images, 1);
  CHECK(built.skipped == 1);
  std::size_t count = 0;
  int edge_hits = 0;
  for (const auto& t : built.tasks) {
    count += t.sources.size();
    CHECK(t.stage == 1);
    for (const auto& s : t.sources) {
      CHECK(t.region.contains_closed(s.position));
      if (s.id == 9001) {
        ++edge_hits;
        CHECK(t.region.min_corner.x == 0);
        CHECK(t.region.min_corner.y == 0);
      }
    }
    double w = 0.0;
    for (const auto& s : t.sources) {
      for (const auto& e : truth.entries)
        if (e.id == s.id) w += entry_work(e, images);
    }
    CHECK(t.estimated_work == w);
  }
  CHECK(edge_hits == 1);
  CHECK(count == truth.entries.size() - 1);

  // Image lists against an independent rectangle test.
  double scale_max = 0.0;
  for (const auto& e : truth.entries) scale_max = std::max(scale_max, e.shape.scale);
  const double reach = 4.0 * (1.2 + scale_max);
  for (const auto& t : built.tasks) {
    std::vector<std::int64_t> expect;
    for (const auto& g : images) {
      const double x0 = g.meta.origin.x - 0.5, x1 = g.meta.origin.x + g.width - 0.5;
      const double y0 = g.meta.origin.y - 0.5, y1 = g.meta.origin.y + g.height - 0.5;
      const bool hit = x0 <= t.region.max_corner.x + reach && x1 >= t.region.min_corner.x - reach &&
                       y0 <= t.region.max_corner.y + reach && y1 >= t.region.min_corner.y - reach;
      if (hit) expect.push_back(g.id);
    }
    CHECK(t.image_ids == expect);
  }
  const auto again = make_tasks(regions, truth.entries, images, 2, 10);
  CHECK(again.tasks[0].id == 10);
  CHECK(again.tasks[0].stage == 2);
  CHECK_THROWS_AS(make_tasks(regions, truth.entries, images, 3), ValidationError);
}
