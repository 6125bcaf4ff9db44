#include "doctest.h"
#include "skycat/score.hpp"
#include "skycat/synth.hpp"

#include <cmath>
#include <limits>
#include <random>

using namespace skycat;

namespace {

EstimateEntry exact_estimate(const CatalogEntry& t) {
  EstimateEntry e;
  e.id = t.id;
  e.position = t.position;
  e.p_star = t.is_star ? 1.0 : 0.0;
  e.logflux_mean = std::log(t.flux[kReferenceBand]);
  e.logflux_sd = 0.1;
  for (int k = 0; k < kColorCount; ++k) {
    e.color_mean[k] = std::log(t.flux[k + 1] / t.flux[k]);
    e.color_sd[k] = 0.1;
  }
  e.shape = t.shape;
  return e;
}

std::vector<EstimateEntry> exact_estimates(const std::vector<CatalogEntry>& truth) {
  std::vector<EstimateEntry> out;
  for (const auto& t : truth) out.push_back(exact_estimate(t));
  return out;
}

/// Minimum-cost perfect assignment on a square matrix (Hungarian algorithm,
/// potentials form).
double hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  double total = 0.0;
  for (std::size_t j = 1; j <= n; ++j) total += cost[p[j] - 1][j - 1];
  return total;
}

void check_zero(const Metric& m) {
  if (m.present()) {
    CHECK(m.mean == 0.0);
    CHECK(m.se == 0.0);
  }
}

}  // namespace

TEST_CASE("matching: identical catalogs and a spurious source") {
  const auto truth = generate_catalog({{0, 0}, {100, 100}}, 200, Priors{}, 3).entries;
  auto est = exact_estimates(truth);
  auto m = match_catalogs(truth, est, 1.0);
  CHECK(m.pairs.size() == 200);
  CHECK(m.unmatched_truth.empty());
  CHECK(m.unmatched_estimate.empty());
  for (const auto& [i, j] : m.pairs) CHECK(i == j);

  EstimateEntry extra = est[0];
  extra.id = 777;
  extra.position = {-50.0, -50.0};
  est.push_back(extra);
  m = match_catalogs(truth, est, 1.0);
  CHECK(m.pairs.size() == 200);
  REQUIRE(m.unmatched_estimate.size() == 1);
  CHECK(est[m.unmatched_estimate[0]].id == 777);
  CHECK_THROWS_AS(match_catalogs(truth, est, 0.0), ValidationError);
}

TEST_CASE("matching: ties broken by distance then id") {
  CatalogEntry t;
  t.id = 5;
  t.position = {0, 0};
  t.flux.fill(1);
  EstimateEntry a, b;
  a.id = 2;
  a.position = {0.5, 0};
  b.id = 1;
  b.position = {-0.5, 0};
  const auto m = match_catalogs({t}, {a, b}, 1.0);
  REQUIRE(m.pairs.size() == 1);
  CHECK(m.pairs[0].second == 1);
}

TEST_CASE("matching: greedy against the optimal assignment") {
  const auto truth = generate_catalog({{0, 0}, {40, 40}}, 100, Priors{}, 11).entries;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> N(0.0, 0.3);
  auto est = exact_estimates(truth);
  for (auto& e : est) {
    e.position.x += N(rng);
    e.position.y += N(rng);
  }
  const double radius = 2.0;
  const auto m = match_catalogs(truth, est, radius);
  CHECK(m.pairs.size() >= 99);
  double greedy = 0.0;
  for (const auto& [i, j] : m.pairs) {
    greedy += std::hypot(truth[i].position.x - est[j].position.x, truth[i].position.y - est[j].position.y);
  }
  // Pairs beyond the radius cost a large penalty, so the optimum maximizes
  // the match count first.
  const double penalty = 1e6;
  std::vector<std::vector<double>> cost(truth.size(), std::vector<double>(est.size()));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (std::size_t j = 0; j < est.size(); ++j) {
      const double d = std::hypot(truth[i].position.x - est[j].position.x, truth[i].position.y - est[j].position.y);
      cost[i][j] = d <= radius ? d : penalty;
    }
  }
  const double opt = hungarian(cost);
  const double opt_unmatched = std::floor(opt / penalty);
  const double opt_distance = opt - opt_unmatched * penalty;
  CHECK(m.pairs.size() == truth.size() - static_cast<std::size_t>(opt_unmatched));
  CHECK(greedy <= 1.01 * opt_distance);
  CHECK(greedy >= opt_distance - 1e-9);
}

TEST_CASE("score: self-score is zero") {
  const auto truth = generate_catalog({{0, 0}, {100, 100}}, 300, Priors{}, 8).entries;
  const auto r = score_catalogs(truth, exact_estimates(truth));
  for (const Metric* m : {&r.position, &r.missed_gals, &r.missed_stars, &r.brightness, &r.profile, &r.eccentricity,
                          &r.scale, &r.angle}) {
    CHECK(m->present());
    check_zero(*m);
  }
  for (const auto& c : r.color) check_zero(c);
  CHECK(r.brightness_coverage.mean == 1.0);
  CHECK(r.matched == 300);
}

TEST_CASE("score: angle folding") {
  CHECK(angle_error(179.0, 1.0) == doctest::Approx(2.0));
  CHECK(angle_error(1.0, 179.0) == doctest::Approx(2.0));
  CHECK(angle_error(90.0, 0.0) == doctest::Approx(90.0));
  CHECK(angle_error(370.0, 10.0) == doctest::Approx(0.0));
  CHECK(angle_error(-30.0, 140.0) == doctest::Approx(10.0));
}

TEST_CASE("score: hand-computed perturbations") {
  std::vector<CatalogEntry> truth(4);
  for (int i = 0; i < 4; ++i) {
    truth[i].id = i + 1;
    truth[i].position = {10.0 * i, 0.0};
    truth[i].flux = {100, 200, 300, 400, 500};
    truth[i].is_star = i < 2;
    truth[i].shape = {0.5, 0.6, 2.0, 10.0};
  }
  auto est = exact_estimates(truth);
  est[0].position.x += 0.3;                       // star, position 0.3
  est[1].p_star = 0.2;                            // star labelled galaxy
  est[1].logflux_mean += 0.4;                     // brightness 0.4
  est[2].position.y -= 0.5;                       // galaxy, position 0.5
  est[2].shape.angle = 175.0;                     // angle 15
  est[2].shape.scale = 2.5;                       // scale 0.5
  est[3].p_star = 0.7;                            // galaxy labelled star
  est[3].color_mean[2] -= 0.2;                    // color 3 error 0.2
  est[3].shape.eccentricity = 0.9;                // eccentricity 0.3
  est[3].logflux_sd = 0.01;
  est[3].logflux_mean += 0.05;                    // outside +-2 sd
  const auto r = score_catalogs(truth, est);
  CHECK(r.position.mean == doctest::Approx((0.3 + 0.5) / 4));
  CHECK(r.missed_stars.mean == doctest::Approx(0.5));
  CHECK(r.missed_stars.count == 2);
  CHECK(r.missed_gals.mean == doctest::Approx(0.5));
  CHECK(r.brightness.mean == doctest::Approx((0.4 + 0.05) / 4));
  CHECK(r.color[2].mean == doctest::Approx(0.2 / 4));
  CHECK(r.color[0].mean == doctest::Approx(0.0));
  CHECK(r.angle.mean == doctest::Approx(15.0 / 2));
  CHECK(r.angle.count == 2);
  CHECK(r.scale.mean == doctest::Approx(0.5 / 2));
  CHECK(r.eccentricity.mean == doctest::Approx(0.3 / 2));
  CHECK(r.profile.mean == 0.0);
  CHECK(r.brightness_coverage.mean == doctest::Approx(0.5));  // 0.4 > 0.2 also misses
  // se of the position errors {0.3, 0, 0.5, 0}
  const double mean = 0.2, ss = 0.01 + 0.04 + 0.09 + 0.04;
  CHECK(r.position.se == doctest::Approx(std::sqrt(ss / 3 / 4)));
  (void)mean;

  // Negating every perturbation leaves the metrics unchanged.
  auto neg = exact_estimates(truth);
  neg[0].position.x -= 0.3;
  neg[1].p_star = 0.2;
  neg[1].logflux_mean -= 0.4;
  neg[2].position.y += 0.5;
  neg[2].shape.angle = 25.0;
  neg[2].shape.scale = 1.5;
  neg[3].p_star = 0.7;
  neg[3].color_mean[2] += 0.2;
  neg[3].shape.eccentricity = 0.3;
  neg[3].logflux_sd = 0.01;
  neg[3].logflux_mean -= 0.05;
  const auto rn = score_catalogs(truth, neg);
  CHECK(rn.position.mean == doctest::Approx(r.position.mean));
  CHECK(rn.brightness.mean == doctest::Approx(r.brightness.mean));
  CHECK(rn.angle.mean == doctest::Approx(r.angle.mean));
  CHECK(rn.scale.mean == doctest::Approx(r.scale.mean));
  CHECK(rn.eccentricity.mean == doctest::Approx(r.eccentricity.mean));
  CHECK(rn.color[2].mean == doctest::Approx(r.color[2].mean));

  // A spurious extra source changes only the unmatched counts.
  auto spur = est;
  EstimateEntry s = est[0];
  s.id = 99;
  s.position = {500, 500};
  spur.push_back(s);
  const auto rs = score_catalogs(truth, spur);
  CHECK(rs.unmatched_estimate == r.unmatched_estimate + 1);
  CHECK(rs.position.mean == r.position.mean);
  CHECK(rs.brightness.mean == r.brightness.mean);
  CHECK(rs.matched == r.matched);
}

TEST_CASE("score: galaxy metrics absent without galaxies") {
  std::vector<CatalogEntry> truth(3);
  for (int i = 0; i < 3; ++i) {
    truth[i].id = i + 1;
    truth[i].position = {5.0 * i, 1.0};
    truth[i].flux.fill(50.0);
    truth[i].is_star = true;
  }
  const auto r = score_catalogs(truth, exact_estimates(truth));
  CHECK_FALSE(r.profile.present());
  CHECK_FALSE(r.angle.present());
  CHECK_FALSE(r.missed_gals.present());
  CHECK(r.missed_stars.present());
  const auto csv = format_report_csv(r);
  CHECK(csv.find("angle,,,0\n") != std::string::npos);
  CHECK(format_report_table(r).find("angle") != std::string::npos);
  CHECK_THROWS_AS(score(truth, exact_estimates(truth), MatchResult{}), ValidationError);
}
