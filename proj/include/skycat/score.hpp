#pragma once

// Cross-matching of an estimated catalog against ground truth and the
// per-field error summary.

#include "skycat/catalog_io.hpp"
#include "skycat/sky_model.hpp"

#include <string>
#include <vector>

namespace skycat {

struct MatchResult {
  /// (truth index, estimate index)
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::size_t> unmatched_truth;
  std::vector<std::size_t> unmatched_estimate;
};

/// Greedy nearest-neighbour matching: candidate pairs within `radius` (sky
/// units) are taken in order of distance, then truth id, then estimate id,
/// each entry at most once.
MatchResult match_catalogs(const std::vector<CatalogEntry>& truth, const std::vector<EstimateEntry>& estimate,
                           double radius);

struct Metric {
  double mean = 0.0;
  double se = 0.0;  ///< sample sd / sqrt(count)
  std::size_t count = 0;
  bool present() const { return count > 0; }
};

struct ScoreReport {
  Metric position;      ///< pixels
  Metric missed_gals;   ///< galaxies labelled stars
  Metric missed_stars;  ///< stars labelled galaxies
  Metric brightness;    ///< |reference-band log flux error|
  std::array<Metric, kColorCount> color;
  Metric profile;
  Metric eccentricity;
  Metric scale;  ///< pixels
  Metric angle;  ///< degrees, folded into [0, 90]
  /// Fraction of truths inside the +-2 sd posterior interval of log flux.
  Metric brightness_coverage;
  std::size_t matched = 0;
  std::size_t unmatched_truth = 0;
  std::size_t unmatched_estimate = 0;
};

struct ScoreConfig {
  double match_radius_px = 1.0;
  double pixel_scale = 1.0;
  double star_threshold = 0.5;  ///< labelled a star when p_star >= threshold
};

ScoreReport score(const std::vector<CatalogEntry>& truth, const std::vector<EstimateEntry>& estimate,
                  const MatchResult& match, const ScoreConfig& config = {});
ScoreReport score_catalogs(const std::vector<CatalogEntry>& truth, const std::vector<EstimateEntry>& estimate,
                           const ScoreConfig& config = {});

/// Angle difference modulo 180, folded into [0, 90].
double angle_error(double a, double b);

/// CSV rows "metric,mean,se,count"; absent metrics have empty mean and se.
std::string format_report_csv(const ScoreReport& report);
std::string format_report_table(const ScoreReport& report);

}  // namespace skycat
