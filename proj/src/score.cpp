#include "skycat/score.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <tuple>

namespace skycat {

namespace {

struct Accumulator {
  std::vector<double> values;
  void add(double v) { values.push_back(v); }
  Metric metric() const {
    Metric m;
    m.count = values.size();
    if (m.count == 0) return m;
    double s = 0.0;
    for (double v : values) s += v;
    m.mean = s / m.count;
    if (m.count > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - m.mean) * (v - m.mean);
      m.se = std::sqrt(ss / (m.count - 1) / m.count);
    }
    return m;
  }
};

std::vector<std::pair<std::string, const Metric*>> rows(const ScoreReport& r) {
  return {{"position", &r.position},
          {"missed_gals", &r.missed_gals},
          {"missed_stars", &r.missed_stars},
          {"brightness", &r.brightness},
          {"color_ug", &r.color[0]},
          {"color_gr", &r.color[1]},
          {"color_ri", &r.color[2]},
          {"color_iz", &r.color[3]},
          {"profile", &r.profile},
          {"eccentricity", &r.eccentricity},
          {"scale", &r.scale},
          {"angle", &r.angle},
          {"brightness_coverage", &r.brightness_coverage}};
}

}  // namespace

MatchResult match_catalogs(const std::vector<CatalogEntry>& truth, const std::vector<EstimateEntry>& estimate,
                           double radius) {
  if (!(radius > 0.0) || !std::isfinite(radius)) throw ValidationError("match_catalogs: radius must be > 0");
  // Bucket the estimates on a grid of cell size `radius`.
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::size_t>> grid;
  const auto cell = [&](Point2 p) {
    return std::make_pair(static_cast<std::int64_t>(std::floor(p.x / radius)),
                          static_cast<std::int64_t>(std::floor(p.y / radius)));
  };
  for (std::size_t j = 0; j < estimate.size(); ++j) grid[cell(estimate[j].position)].push_back(j);

  std::vector<std::tuple<double, std::int64_t, std::int64_t, std::size_t, std::size_t>> cand;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto [cx, cy] = cell(truth[i].position);
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        const auto it = grid.find({cx + dx, cy + dy});
        if (it == grid.end()) continue;
        for (std::size_t j : it->second) {
          const double d = std::hypot(truth[i].position.x - estimate[j].position.x,
                                      truth[i].position.y - estimate[j].position.y);
          if (d <= radius) cand.emplace_back(d, truth[i].id, estimate[j].id, i, j);
        }
      }
    }
  }
  std::sort(cand.begin(), cand.end());
  std::vector<bool> used_t(truth.size(), false), used_e(estimate.size(), false);
  MatchResult out;
  for (const auto& [d, ti, ei, i, j] : cand) {
    if (used_t[i] || used_e[j]) continue;
    used_t[i] = used_e[j] = true;
    out.pairs.emplace_back(i, j);
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (!used_t[i]) out.unmatched_truth.push_back(i);
  for (std::size_t j = 0; j < estimate.size(); ++j)
    if (!used_e[j]) out.unmatched_estimate.push_back(j);
  return out;
}

double angle_error(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 180.0);
  return std::min(d, 180.0 - d);
}

ScoreReport score(const std::vector<CatalogEntry>& truth, const std::vector<EstimateEntry>& estimate,
                  const MatchResult& match, const ScoreConfig& config) {
  if (!(config.pixel_scale > 0.0)) throw ValidationError("score: pixel_scale must be > 0");
  if (match.pairs.empty()) throw ValidationError("score: no matched pairs");
  Accumulator pos, mg, ms, bright, prof, ecc, scale, ang, cover;
  std::array<Accumulator, kColorCount> col;
  for (const auto& [i, j] : match.pairs) {
    const CatalogEntry& t = truth.at(i);
    const EstimateEntry& e = estimate.at(j);
    pos.add(std::hypot(t.position.x - e.position.x, t.position.y - e.position.y) / config.pixel_scale);
    const bool labelled_star = e.p_star >= config.star_threshold;
    if (t.is_star) {
      ms.add(labelled_star ? 0.0 : 1.0);
    } else {
      mg.add(labelled_star ? 1.0 : 0.0);
    }
    const double log_r = std::log(t.flux[kReferenceBand]);
    bright.add(std::abs(e.logflux_mean - log_r));
    cover.add(std::abs(e.logflux_mean - log_r) <= 2.0 * e.logflux_sd ? 1.0 : 0.0);
    for (int k = 0; k < kColorCount; ++k) {
      col[k].add(std::abs(e.color_mean[k] - std::log(t.flux[k + 1] / t.flux[k])));
    }
    if (!t.is_star) {
      prof.add(std::abs(e.shape.profile_mix - t.shape.profile_mix));
      ecc.add(std::abs(e.shape.eccentricity - t.shape.eccentricity));
      scale.add(std::abs(e.shape.scale - t.shape.scale) / config.pixel_scale);
      ang.add(angle_error(e.shape.angle, t.shape.angle));
    }
  }
  ScoreReport r;
  r.position = pos.metric();
  r.missed_gals = mg.metric();
  r.missed_stars = ms.metric();
  r.brightness = bright.metric();
  for (int k = 0; k < kColorCount; ++k) r.color[k] = col[k].metric();
  r.profile = prof.metric();
  r.eccentricity = ecc.metric();
  r.scale = scale.metric();
  r.angle = ang.metric();
  r.brightness_coverage = cover.metric();
  r.matched = match.pairs.size();
  r.unmatched_truth = match.unmatched_truth.size();
  r.unmatched_estimate = match.unmatched_estimate.size();
  return r;
}

ScoreReport score_catalogs(const std::vector<CatalogEntry>& truth, const std::vector<EstimateEntry>& estimate,
                           const ScoreConfig& config) {
  return score(truth, estimate, match_catalogs(truth, estimate, config.match_radius_px * config.pixel_scale),
               config);
}

std::string format_report_csv(const ScoreReport& report) {
  std::string out = "metric,mean,se,count\n";
  for (const auto& [name, m] : rows(report)) {
    out += name + ',';
    if (m->present()) out += format_real(m->mean) + ',' + format_real(m->se);
    else out += ',';
    out += ',' + std::to_string(m->count) + '\n';
  }
  out += "matched,,," + std::to_string(report.matched) + '\n';
  out += "unmatched_truth,,," + std::to_string(report.unmatched_truth) + '\n';
  out += "unmatched_estimate,,," + std::to_string(report.unmatched_estimate) + '\n';
  return out;
}

std::string format_report_table(const ScoreReport& report) {
  std::string out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-20s %12s %12s %8s\n", "metric", "mean", "se", "n");
  out += buf;
  for (const auto& [name, m] : rows(report)) {
    if (m->present()) {
      std::snprintf(buf, sizeof buf, "%-20s %12.5f %12.5f %8zu\n", name.c_str(), m->mean, m->se, m->count);
    } else {
      std::snprintf(buf, sizeof buf, "%-20s %12s %12s %8zu\n", name.c_str(), "-", "-", m->count);
    }
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "matched %zu, unmatched truth %zu, unmatched estimate %zu\n", report.matched,
                report.unmatched_truth, report.unmatched_estimate);
  out += buf;
  return out;
}

}  // namespace skycat
