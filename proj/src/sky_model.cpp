#include "skycat/sky_model.hpp"

#include "skycat/galaxy_profiles.hpp"
#include "skycat/jet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>

namespace skycat {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kDegToRad = std::numbers::pi / 180.0;
// Gaussian components whose log density falls below this are skipped.
constexpr double kLogDensityFloor = -60.0;

double logit(double p) {
  p = std::clamp(p, 1e-12, 1.0 - 1e-12);
  return std::log(p) - std::log1p(-p);
}

bool finite(double v) { return std::isfinite(v); }

/// Neumaier compensated sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

/// Precision matrix entries and log normalizer (including the mixture
/// weight) of one PSF-convolved galaxy component.
template <class T>
struct GalaxyComponent {
  T p11, p12, p22, log_c;
};

/// The six PSF-convolved galaxy components (three de Vaucouleurs, then
/// three exponential). Inputs are in pixel units.
template <class T>
std::array<GalaxyComponent<T>, 6> galaxy_components(const T& log_w_dev, const T& log_w_exp, const T& ecc,
                                                    const T& scale_px, const T& angle_deg, double sigma) {
  using std::cos;
  using std::log;
  using std::sin;
  const T theta = angle_deg * kDegToRad;
  const T c = cos(theta);
  const T s = sin(theta);
  const T e2 = ecc * ecc;
  const T r2 = scale_px * scale_px;
  const T a11 = r2 * (c * c + e2 * s * s);
  const T a12 = r2 * ((1.0 - e2) * c * s);
  const T a22 = r2 * (s * s + e2 * c * c);
  const double sigma2 = sigma * sigma;

  std::array<GalaxyComponent<T>, 6> out;
  for (int k = 0; k < 6; ++k) {
    const ProfileComponent& pc = k < 3 ? kDeVaucouleursProfile[k] : kExponentialProfile[k - 3];
    const T& log_w = k < 3 ? log_w_dev : log_w_exp;
    const double b2 = pc.sd * pc.sd;
    const T s11 = a11 * b2 + sigma2;
    const T s12 = a12 * b2;
    const T s22 = a22 * b2 + sigma2;
    const T det = s11 * s22 - s12 * s12;
    out[k].p11 = s22 / det;
    out[k].p12 = -(s12 / det);
    out[k].p22 = s11 / det;
    out[k].log_c = log_w + (std::log(pc.weight) - std::log(kTwoPi)) - 0.5 * log(det);
  }
  return out;
}

std::array<GalaxyComponent<double>, 6> galaxy_components_value(const GalaxyShape& shape, double scale_px,
                                                               double sigma) {
  const double log_dev = shape.profile_mix > 0.0 ? std::log(shape.profile_mix) : -INFINITY;
  const double log_exp = shape.profile_mix < 1.0 ? std::log1p(-shape.profile_mix) : -INFINITY;
  return galaxy_components<double>(log_dev, log_exp, shape.eccentricity, scale_px, shape.angle, sigma);
}

double galaxy_value(const std::array<GalaxyComponent<double>, 6>& comps, double dx, double dy) {
  double total = 0.0;
  for (const auto& c : comps) {
    const double l = c.log_c - 0.5 * (c.p11 * dx * dx + 2.0 * c.p12 * dx * dy + c.p22 * dy * dy);
    if (l > kLogDensityFloor) total += std::exp(l);
  }
  return total;
}

/// E[f] and Var[f] of the band flux under one type hypothesis, generic over
/// the parameter accessor so the same code yields values or jets.
template <class T, class Var>
void band_flux_moments(const Var& var, int type, int band, T& mean, T& variance) {
  using std::exp;
  using std::expm1;
  const auto& w = color_weights()[band];
  T m = var(param::kLogFluxMean[type]);
  T v = exp(2.0 * var(param::kLogFluxLogSd[type]));
  for (int k = 0; k < kColorCount; ++k) {
    if (w[k] == 0.0) continue;
    m = m + w[k] * var(param::kColorMean[type] + k);
    v = v + (w[k] * w[k]) * exp(2.0 * var(param::kColorLogSd[type] + k));
  }
  mean = exp(m + 0.5 * v);
  variance = exp(2.0 * m + v) * expm1(v);
}

void band_flux_moments_value(const SourceModel& s, int type, int band, double& mean, double& variance) {
  const auto& w = color_weights()[band];
  double m = s.logflux_mean[type];
  double v = s.logflux_sd[type] * s.logflux_sd[type];
  for (int k = 0; k < kColorCount; ++k) {
    if (w[k] == 0.0) continue;
    m += w[k] * s.color_mean[type][k];
    v += w[k] * w[k] * s.color_sd[type][k] * s.color_sd[type][k];
  }
  mean = std::exp(m + 0.5 * v);
  variance = std::exp(2.0 * m + v) * std::expm1(v);
}

struct KlConstants {
  double log_phi, log_one_minus_phi;
  double log_flux_mean, log_flux_sd;
  Eigen::Matrix4d color_precision;
  double color_log_det;
};

KlConstants kl_constants(const Priors& priors) {
  KlConstants k;
  k.log_phi = std::log(priors.star_prob);
  k.log_one_minus_phi = std::log1p(-priors.star_prob);
  k.log_flux_mean = priors.log_flux_mean;
  k.log_flux_sd = priors.log_flux_sd;
  const Eigen::LLT<Eigen::Matrix4d> llt(priors.color_cov);
  k.color_precision = llt.solve(Eigen::Matrix4d::Identity());
  k.color_precision = 0.5 * (k.color_precision + k.color_precision.transpose()).eval();
  const Eigen::Matrix4d l = llt.matrixL();
  k.color_log_det = 2.0 * l.diagonal().array().log().sum();
  return k;
}

template <class T, class Var>
T kl_terms(const Var& var, const KlConstants& kc, const Priors& priors) {
  using std::exp;
  const T z = var(param::kLogitStar);
  const T q = sigmoid(z);
  const T log_q = log_sigmoid(z);
  const T log_1mq = log_sigmoid(-z);
  T kl = q * (log_q - kc.log_phi) + (1.0 - q) * (log_1mq - kc.log_one_minus_phi);

  const double inv_var = 1.0 / (kc.log_flux_sd * kc.log_flux_sd);
  for (int t = 0; t < 2; ++t) {
    const T log_sd = var(param::kLogFluxLogSd[t]);
    const T dm = var(param::kLogFluxMean[t]) - kc.log_flux_mean;
    T kl_type = (std::log(kc.log_flux_sd) - 0.5) - log_sd + 0.5 * inv_var * (exp(2.0 * log_sd) + dm * dm);

    T kl_color(0.5 * (kc.color_log_det - kColorCount));
    std::array<T, kColorCount> d;
    for (int k = 0; k < kColorCount; ++k) {
      const T lsd = var(param::kColorLogSd[t] + k);
      kl_color = kl_color + 0.5 * kc.color_precision(k, k) * exp(2.0 * lsd) - lsd;
      d[k] = var(param::kColorMean[t] + k) - priors.color_mean[k];
    }
    for (int k = 0; k < kColorCount; ++k) {
      kl_color = kl_color + 0.5 * kc.color_precision(k, k) * (d[k] * d[k]);
      for (int l = k + 1; l < kColorCount; ++l) kl_color = kl_color + kc.color_precision(k, l) * (d[k] * d[l]);
    }
    kl_type = kl_type + kl_color;
    kl = kl + (t == kStar ? q : 1.0 - q) * kl_type;
  }
  return kl;
}

void require_elbo_priors(const Priors& priors) {
  priors.validate();
  if (!(priors.star_prob > 0.0 && priors.star_prob < 1.0)) {
    throw ValidationError("priors: star_prob must lie strictly inside (0, 1) for the ELBO");
  }
}

/// Value-only view of one source rendered into one image: the per-type flux
/// moments for the image band and the PSF-convolved profiles.
struct SourceImageModel {
  double q = 0.0;
  double flux_mean[2] = {0.0, 0.0};
  double flux_var[2] = {0.0, 0.0};
  double ux = 0.0, uy = 0.0;
  double inv_s2 = 1.0, star_norm = 1.0;
  std::array<GalaxyComponent<double>, 6> comps;

  SourceImageModel(const SourceModel& s, const ImageMeta& meta) {
    q = s.q_star;
    for (int t = 0; t < 2; ++t) band_flux_moments_value(s, t, meta.band, flux_mean[t], flux_var[t]);
    const Point2 u = meta.to_pixel(s.position);
    ux = u.x;
    uy = u.y;
    inv_s2 = 1.0 / (meta.psf_sigma * meta.psf_sigma);
    star_norm = inv_s2 / kTwoPi;
    comps = galaxy_components_value(s.shape, s.shape.scale / meta.pixel_scale, meta.psf_sigma);
  }

  /// Mean and variance of this source's contribution to pixel (col, row).
  void moments(int col, int row, double& mean, double& variance) const {
    const double dx = col - ux;
    const double dy = row - uy;
    const double gs = star_norm * std::exp(-0.5 * (dx * dx + dy * dy) * inv_s2);
    const double gg = galaxy_value(comps, dx, dy);
    const double a = flux_mean[kStar] * gs;
    const double b = flux_mean[kGalaxy] * gg;
    mean = q * a + (1.0 - q) * b;
    variance = q * flux_var[kStar] * gs * gs + (1.0 - q) * flux_var[kGalaxy] * gg * gg +
               q * (1.0 - q) * (a - b) * (a - b);
  }
};

/// Pixel log-likelihood surrogate x (log m - v / 2m^2) - m.
double pixel_term(double x, double m, double v) { return x * (std::log(m) - v / (2.0 * m * m)) - m; }

bool boxes_overlap(const Footprint& a, const Footprint& b) {
  return !(a.col_hi() < b.col_lo() || b.col_hi() < a.col_lo() || a.row_hi() < b.row_lo() ||
           b.row_hi() < a.row_lo());
}

}  // namespace

const std::array<std::array<double, kColorCount>, kBandCount>& color_weights() {
  // Colors are c_k = log(f_{k+1} / f_k) for bands u, g, r, i, z.
  static const std::array<std::array<double, kColorCount>, kBandCount> w{{
      {-1.0, -1.0, 0.0, 0.0},
      {0.0, -1.0, 0.0, 0.0},
      {0.0, 0.0, 0.0, 0.0},
      {0.0, 0.0, 1.0, 0.0},
      {0.0, 0.0, 1.0, 1.0},
  }};
  return w;
}

void Priors::validate() const {
  if (!(star_prob >= 0.0 && star_prob <= 1.0)) throw ValidationError("priors: star_prob outside [0, 1]");
  if (!finite(log_flux_mean)) throw ValidationError("priors: log_flux_mean not finite");
  if (!(log_flux_sd > 0.0) || !finite(log_flux_sd)) throw ValidationError("priors: log_flux_sd must be > 0");
  for (double c : color_mean) {
    if (!finite(c)) throw ValidationError("priors: color_mean not finite");
  }
  if (!color_cov.allFinite()) throw ValidationError("priors: color_cov not finite");
  if ((color_cov - color_cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + color_cov.cwiseAbs().maxCoeff())) {
    throw ValidationError("priors: color_cov not symmetric");
  }
  Eigen::LLT<Eigen::Matrix4d> llt(color_cov);
  if (llt.info() != Eigen::Success) throw ValidationError("priors: color_cov not positive definite");
}

void ImageMeta::validate() const {
  if (band < 0 || band >= kBandCount) throw ValidationError("image meta: band outside 0..4");
  if (!(background > 0.0) || !finite(background)) throw ValidationError("image meta: background must be > 0");
  if (!(psf_sigma > 0.0) || !finite(psf_sigma)) throw ValidationError("image meta: psf_sigma must be > 0");
  if (!(pixel_scale > 0.0) || !finite(pixel_scale)) throw ValidationError("image meta: pixel_scale must be > 0");
  if (!finite(origin.x) || !finite(origin.y)) throw ValidationError("image meta: origin not finite");
}

void ImagePatch::validate() const {
  meta.validate();
  if (width < 1 || height < 1) throw ValidationError("image patch: dimensions must be >= 1");
  if (pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw ValidationError("image patch: pixel count does not match dimensions");
  }
  for (auto p : pixels) {
    if (p < 0) throw ValidationError("image patch: negative pixel count");
  }
}

void GalaxyShape::validate() const {
  if (!(profile_mix >= 0.0 && profile_mix <= 1.0)) throw ValidationError("galaxy shape: profile_mix outside [0, 1]");
  if (!(eccentricity > 0.0 && eccentricity <= 1.0)) throw ValidationError("galaxy shape: eccentricity outside (0, 1]");
  if (!(scale > 0.0) || !finite(scale)) throw ValidationError("galaxy shape: scale must be > 0");
  if (!finite(angle)) throw ValidationError("galaxy shape: angle not finite");
}

void SourceModel::validate() const {
  const std::string where = "source " + std::to_string(id) + ": ";
  if (!finite(position.x) || !finite(position.y)) throw ValidationError(where + "position not finite");
  shape.validate();
  if (!(q_star >= 0.0 && q_star <= 1.0)) throw ValidationError(where + "q_star outside [0, 1]");
  for (int t = 0; t < 2; ++t) {
    if (!finite(logflux_mean[t])) throw ValidationError(where + "logflux_mean not finite");
    if (!(logflux_sd[t] > 0.0) || !finite(logflux_sd[t])) throw ValidationError(where + "degenerate logflux_sd");
    for (int k = 0; k < kColorCount; ++k) {
      if (!finite(color_mean[t][k])) throw ValidationError(where + "color_mean not finite");
      if (!(color_sd[t][k] > 0.0) || !finite(color_sd[t][k])) throw ValidationError(where + "degenerate color_sd");
    }
  }
  if (!finite(anchor.center.x) || !finite(anchor.center.y) || !(anchor.scale >= 0.0)) {
    throw ValidationError(where + "invalid footprint anchor");
  }
}

ParamVector pack(const SourceModel& s) {
  using namespace param;
  ParamVector th;
  th(kLogitStar) = logit(s.q_star);
  for (int t = 0; t < 2; ++t) {
    th(kLogFluxMean[t]) = s.logflux_mean[t];
    th(kLogFluxLogSd[t]) = std::log(s.logflux_sd[t]);
    for (int k = 0; k < kColorCount; ++k) {
      th(kColorMean[t] + k) = s.color_mean[t][k];
      th(kColorLogSd[t] + k) = std::log(s.color_sd[t][k]);
    }
  }
  th(kPosX) = s.position.x;
  th(kPosY) = s.position.y;
  th(kLogitProfile) = logit(s.shape.profile_mix);
  th(kLogitEccentricity) = logit(s.shape.eccentricity);
  th(kLogScale) = std::log(std::max(s.shape.scale - kMinGalaxyScale, 1e-6 * kMinGalaxyScale));
  th(kAngle) = s.shape.angle;
  return th;
}

void unpack(const ParamVector& th, SourceModel& s) {
  using namespace param;
  s.q_star = sigmoid(th(kLogitStar));
  for (int t = 0; t < 2; ++t) {
    s.logflux_mean[t] = th(kLogFluxMean[t]);
    s.logflux_sd[t] = std::exp(th(kLogFluxLogSd[t]));
    for (int k = 0; k < kColorCount; ++k) {
      s.color_mean[t][k] = th(kColorMean[t] + k);
      s.color_sd[t][k] = std::exp(th(kColorLogSd[t] + k));
    }
  }
  s.position = {th(kPosX), th(kPosY)};
  s.shape.profile_mix = sigmoid(th(kLogitProfile));
  s.shape.eccentricity = sigmoid(th(kLogitEccentricity));
  s.shape.scale = kMinGalaxyScale + std::exp(th(kLogScale));
  s.shape.angle = th(kAngle);
}

double psf_density(double dx, double dy, double sigma) {
  const double inv_s2 = 1.0 / (sigma * sigma);
  return inv_s2 / kTwoPi * std::exp(-0.5 * (dx * dx + dy * dy) * inv_s2);
}

double galaxy_density(double dx, double dy, const GalaxyShape& shape, double scale_px, double sigma) {
  return galaxy_value(galaxy_components_value(shape, scale_px, sigma), dx, dy);
}

double expected_rate(std::span<const CatalogEntry> sources, PixelIndex pixel, const ImageMeta& meta, int width,
                     int height) {
  if (pixel.col < 0 || pixel.col >= width || pixel.row < 0 || pixel.row >= height) {
    throw BoundsError("expected_rate: pixel (" + std::to_string(pixel.col) + ", " + std::to_string(pixel.row) +
                      ") outside " + std::to_string(width) + "x" + std::to_string(height) + " image");
  }
  meta.validate();
  double rate = meta.background;
  for (const auto& s : sources) {
    const double flux = s.flux[meta.band];
    if (!finite(flux) || !finite(s.position.x) || !finite(s.position.y) || !finite(s.shape.scale) ||
        !finite(s.shape.eccentricity) || !finite(s.shape.angle) || !finite(s.shape.profile_mix)) {
      throw ValidationError("expected_rate: non-finite parameter for source " + std::to_string(s.id));
    }
    const Point2 u = meta.to_pixel(s.position);
    const double dx = pixel.col - u.x;
    const double dy = pixel.row - u.y;
    if (s.is_star) {
      rate += flux * psf_density(dx, dy, meta.psf_sigma);
    } else {
      rate += flux * galaxy_density(dx, dy, s.shape, s.shape.scale / meta.pixel_scale, meta.psf_sigma);
    }
  }
  return rate;
}

Footprint::Footprint(Point2 center_sky, double scale_sky, const ImageMeta& meta, int width, int height, double k)
    : width_(width) {
  const Point2 c = meta.to_pixel(center_sky);
  cx_ = c.x;
  cy_ = c.y;
  radius_ = k * (meta.psf_sigma + std::max(scale_sky, 0.0) / meta.pixel_scale);

  const double ccol = std::floor(cx_ + 0.5);
  const double crow = std::floor(cy_ + 0.5);
  const bool center_inside = ccol >= 0 && ccol < width && crow >= 0 && crow < height;
  if (center_inside) {
    center_col_ = static_cast<int>(ccol);
    center_row_ = static_cast<int>(crow);
  }

  const double lo_c = std::ceil(cx_ - radius_), hi_c = std::floor(cx_ + radius_);
  const double lo_r = std::ceil(cy_ - radius_), hi_r = std::floor(cy_ + radius_);
  double c0 = std::max(lo_c, 0.0), c1 = std::min(hi_c, static_cast<double>(width - 1));
  double r0 = std::max(lo_r, 0.0), r1 = std::min(hi_r, static_cast<double>(height - 1));
  if (center_inside) {
    c0 = std::min(c0, ccol);
    c1 = std::max(c1, ccol);
    r0 = std::min(r0, crow);
    r1 = std::max(r1, crow);
  }
  if (c0 > c1 || r0 > r1) return;
  col_lo_ = static_cast<int>(c0);
  col_hi_ = static_cast<int>(c1);
  row_lo_ = static_cast<int>(r0);
  row_hi_ = static_cast<int>(r1);
}

bool Footprint::contains(int col, int row) const {
  if (col < col_lo_ || col > col_hi_ || row < row_lo_ || row > row_hi_) return false;
  if (col == center_col_ && row == center_row_) return true;
  const double dx = col - cx_;
  const double dy = row - cy_;
  return dx * dx + dy * dy <= radius_ * radius_;
}

std::vector<int> Footprint::pixels() const {
  std::vector<int> out;
  if (empty()) return out;
  for (int row = row_lo_; row <= row_hi_; ++row) {
    for (int col = col_lo_; col <= col_hi_; ++col) {
      if (contains(col, row)) out.push_back(row * width_ + col);
    }
  }
  return out;
}

std::size_t Footprint::count() const {
  std::size_t n = 0;
  if (empty()) return n;
  for (int row = row_lo_; row <= row_hi_; ++row) {
    for (int col = col_lo_; col <= col_hi_; ++col) n += contains(col, row) ? 1 : 0;
  }
  return n;
}

std::vector<int> active_pixels(const SourceModel& source, const ImagePatch& patch, const ModelConfig& config) {
  return Footprint(source.position, source.shape.scale, patch.meta, patch.width, patch.height,
                   config.active_radius_k)
      .pixels();
}

Footprint anchored_footprint(const SourceModel& source, const ImagePatch& patch, const ModelConfig& config) {
  return Footprint(source.anchor.center, source.anchor.scale, patch.meta, patch.width, patch.height,
                   config.active_radius_k);
}

double kl_divergence(const SourceModel& source, const Priors& priors) {
  const ParamVector th = pack(source);
  const auto var = [&](int i) { return th(i); };
  return kl_terms<double>(var, kl_constants(priors), priors);
}

Objective kl_divergence_derivatives(const ParamVector& th, const Priors& priors) {
  using J = Jet<kParamCount>;
  const auto var = [&](int i) { return J::variable(th(i), i); };
  const J kl = kl_terms<J>(var, kl_constants(priors), priors);
  Objective out;
  out.value = kl.v;
  out.gradient = kl.g;
  ParamMatrix h = kl.h;
  out.hessian = 0.5 * (h + h.transpose());
  return out;
}

// ---------------------------------------------------------------------------
// BlockObjective

BlockObjective::BlockObjective(std::span<const SourceModel> sources, std::span<const ImagePatch> patches,
                               const Priors& priors, std::size_t active, const ModelConfig& config)
    : priors_(priors), config_(config) {
  std::vector<std::size_t> all;
  for (std::size_t j = 0; j < sources.size(); ++j) {
    if (j != active) all.push_back(j);
  }
  build(sources, patches, active, all);
}

BlockObjective::BlockObjective(std::span<const SourceModel> sources, std::span<const ImagePatch> patches,
                               const Priors& priors, std::size_t active, std::span<const std::size_t> neighbors,
                               const ModelConfig& config)
    : priors_(priors), config_(config) {
  build(sources, patches, active, neighbors);
}

void BlockObjective::build(std::span<const SourceModel> sources, std::span<const ImagePatch> patches,
                           std::size_t active, std::span<const std::size_t> neighbors) {
  if (patches.empty()) throw ValidationError("elbo: empty patch list");
  if (active >= sources.size()) throw BoundsError("elbo: active source index out of range");
  require_elbo_priors(priors_);
  const SourceModel& src = sources[active];
  src.validate();
  initial_ = pack(src);

  for (const auto& patch : patches) {
    const Footprint fp = anchored_footprint(src, patch, config_);
    if (fp.empty()) continue;
    PatchBlock b;
    b.patch = &patch;
    for (int row = fp.row_lo(); row <= fp.row_hi(); ++row) {
      for (int col = fp.col_lo(); col <= fp.col_hi(); ++col) {
        if (!fp.contains(col, row)) continue;
        b.cols.push_back(col);
        b.rows.push_back(row);
        b.counts.push_back(static_cast<double>(patch.at(col, row)));
      }
    }
    if (b.cols.empty()) continue;
    b.fixed_mean.assign(b.cols.size(), patch.meta.background);
    b.fixed_var.assign(b.cols.size(), 0.0);
    for (std::size_t j : neighbors) {
      if (j == active) continue;
      const SourceModel& other = sources[j];
      const Footprint ofp = anchored_footprint(other, patch, config_);
      if (ofp.empty() || !boxes_overlap(fp, ofp)) continue;
      const SourceImageModel model(other, patch.meta);
      for (std::size_t p = 0; p < b.cols.size(); ++p) {
        if (!ofp.contains(b.cols[p], b.rows[p])) continue;
        double mean, variance;
        model.moments(b.cols[p], b.rows[p], mean, variance);
        b.fixed_mean[p] += mean;
        b.fixed_var[p] += variance;
      }
    }
    pixel_count_ += b.cols.size();
    blocks_.push_back(std::move(b));
  }
}

namespace {

using Vec11 = Eigen::Matrix<double, 11, 1>;
using Mat11 = Eigen::Matrix<double, 11, 11>;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using J27 = Jet<kParamCount>;
using J4 = Jet<4>;

// Intermediate coordinates the pixel terms depend on.
enum : int { kYq = 0, kYEs = 1, kYVs = 2, kYEg = 3, kYVg = 4, kYux = 5, kYuy = 6, kYs0 = 7, kYCount = 11 };

struct BandJets {
  J27 mean[2];
  J27 var[2];
};

}  // namespace

namespace {

// Parameter vectors whose transforms underflow or overflow (an sd of exactly
// 0, an eccentricity of 0, an infinite scale) have no valid source behind them.
bool representable(const ParamVector& th) {
  if (!th.allFinite()) return false;
  SourceModel s;
  unpack(th, s);
  for (int t = 0; t < 2; ++t) {
    if (!(s.logflux_sd[t] > 0.0 && std::isfinite(s.logflux_sd[t]))) return false;
    for (double sd : s.color_sd[t]) {
      if (!(sd > 0.0 && std::isfinite(sd))) return false;
    }
  }
  return s.shape.eccentricity > 0.0 && std::isfinite(s.shape.scale);
}

Objective unrepresentable() {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  return {-std::numeric_limits<double>::infinity(), Eigen::VectorXd::Constant(kParamCount, nan),
          Eigen::MatrixXd::Constant(kParamCount, kParamCount, nan)};
}

}  // namespace

Objective BlockObjective::evaluate(const ParamVector& th) const {
  if (!representable(th)) return unrepresentable();
  const auto var = [&](int i) { return J27::variable(th(i), i); };
  const J27 q = sigmoid(var(param::kLogitStar));

  std::array<std::optional<BandJets>, kBandCount> band_cache;
  const auto band_jets = [&](int band) -> const BandJets& {
    if (!band_cache[band]) {
      BandJets bj;
      for (int t = 0; t < 2; ++t) band_flux_moments<J27>(var, t, band, bj.mean[t], bj.var[t]);
      band_cache[band] = std::move(bj);
    }
    return *band_cache[band];
  };

  // Galaxy shape in local coordinates s0..s3.
  const J4 s0 = J4::variable(th(param::kLogitProfile), 0);
  const J4 s1 = J4::variable(th(param::kLogitEccentricity), 1);
  const J4 s2 = J4::variable(th(param::kLogScale), 2);
  const J4 s3 = J4::variable(th(param::kAngle), 3);
  const J4 log_w_dev = log_sigmoid(s0);
  const J4 log_w_exp = log_sigmoid(-s0);
  const J4 ecc = sigmoid(s1);
  const J4 scale_sky = exp(s2) + kMinGalaxyScale;

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(kParamCount);
  Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(kParamCount, kParamCount);
  CompensatedSum total;

  for (const auto& b : blocks_) {
    const ImageMeta& meta = b.patch->meta;
    const BandJets& bj = band_jets(meta.band);
    const double qv = q.v;
    const double es = bj.mean[kStar].v, vs = bj.var[kStar].v;
    const double eg = bj.mean[kGalaxy].v, vg = bj.var[kGalaxy].v;
    const double ux = (th(param::kPosX) - meta.origin.x) / meta.pixel_scale;
    const double uy = (th(param::kPosY) - meta.origin.y) / meta.pixel_scale;
    const double inv_s2 = 1.0 / (meta.psf_sigma * meta.psf_sigma);
    const double star_norm = inv_s2 / kTwoPi;
    const auto comps = galaxy_components<J4>(log_w_dev, log_w_exp, ecc, scale_sky / meta.pixel_scale, s3,
                                             meta.psf_sigma);

    Vec11 gy = Vec11::Zero();
    Mat11 hy = Mat11::Zero();

    for (std::size_t p = 0; p < b.cols.size(); ++p) {
      const double dx = b.cols[p] - ux;
      const double dy = b.rows[p] - uy;

      // Star profile and its derivatives in (ux, uy).
      const double gs = star_norm * std::exp(-0.5 * (dx * dx + dy * dy) * inv_s2);
      Eigen::Vector2d dgs(gs * dx * inv_s2, gs * dy * inv_s2);
      Eigen::Matrix2d hgs;
      hgs(0, 0) = gs * (dx * dx * inv_s2 * inv_s2 - inv_s2);
      hgs(1, 1) = gs * (dy * dy * inv_s2 * inv_s2 - inv_s2);
      hgs(0, 1) = hgs(1, 0) = gs * dx * dy * inv_s2 * inv_s2;

      // Galaxy profile and its derivatives in (ux, uy, s0..s3).
      double gg = 0.0;
      Vec6 dgg = Vec6::Zero();
      Mat6 hgg = Mat6::Zero();
      const double qa = dx * dx, qb = 2.0 * dx * dy, qc = dy * dy;
      for (const auto& c : comps) {
        const double l = c.log_c.v - 0.5 * (c.p11.v * qa + c.p12.v * qb + c.p22.v * qc);
        if (l <= kLogDensityFloor) continue;
        const double e = std::exp(l);
        Vec6 gl;
        gl(0) = c.p11.v * dx + c.p12.v * dy;
        gl(1) = c.p12.v * dx + c.p22.v * dy;
        gl.tail<4>() = c.log_c.g - 0.5 * (c.p11.g * qa + c.p12.g * qb + c.p22.g * qc);
        Mat6 hl;
        hl(0, 0) = -c.p11.v;
        hl(0, 1) = hl(1, 0) = -c.p12.v;
        hl(1, 1) = -c.p22.v;
        const Eigen::Vector4d cx = c.p11.g * dx + c.p12.g * dy;
        const Eigen::Vector4d cy = c.p12.g * dx + c.p22.g * dy;
        hl.block<1, 4>(0, 2) = cx.transpose();
        hl.block<1, 4>(1, 2) = cy.transpose();
        hl.block<4, 1>(2, 0) = cx;
        hl.block<4, 1>(2, 1) = cy;
        hl.block<4, 4>(2, 2) = c.log_c.h - 0.5 * (c.p11.h * qa + c.p12.h * qb + c.p22.h * qc);
        gg += e;
        dgg += e * gl;
        hgg += e * (gl * gl.transpose() + hl);
      }

      // Per-type expected contributions a (star) and b (galaxy).
      const double a = es * gs;
      const double bb = eg * gg;
      Vec11 da = Vec11::Zero(), db = Vec11::Zero();
      Mat11 ha = Mat11::Zero(), hb = Mat11::Zero();
      da(kYEs) = gs;
      da.segment<2>(kYux) = es * dgs;
      ha.block<1, 2>(kYEs, kYux) = dgs.transpose();
      ha.block<2, 1>(kYux, kYEs) = dgs;
      ha.block<2, 2>(kYux, kYux) = es * hgs;
      db(kYEg) = gg;
      db.segment<6>(kYux) = eg * dgg;
      hb.block<1, 6>(kYEg, kYux) = dgg.transpose();
      hb.block<6, 1>(kYux, kYEg) = dgg;
      hb.block<6, 6>(kYux, kYux) = eg * hgg;

      // Mean E of the active source's contribution.
      const double E = qv * a + (1.0 - qv) * bb;
      const double delta = a - bb;
      const Vec11 dd = da - db;
      const Mat11 hd = ha - hb;
      Vec11 dE = qv * da + (1.0 - qv) * db;
      dE(kYq) = delta;
      Mat11 hE = qv * ha + (1.0 - qv) * hb;
      hE.row(kYq) += dd.transpose();
      hE.col(kYq) += dd;

      // Variance V = q Vs gs^2 + (1 - q) Vg gg^2 + q (1 - q) (a - b)^2.
      const double hs = gs * gs, hg = gg * gg;
      Vec11 dt1 = Vec11::Zero(), dt2 = Vec11::Zero();
      Mat11 ht1 = Mat11::Zero(), ht2 = Mat11::Zero();
      const Eigen::Vector2d dhs = 2.0 * gs * dgs;
      const Vec6 dhg = 2.0 * gg * dgg;
      dt1(kYVs) = hs;
      dt1.segment<2>(kYux) = vs * dhs;
      ht1.block<1, 2>(kYVs, kYux) = dhs.transpose();
      ht1.block<2, 1>(kYux, kYVs) = dhs;
      ht1.block<2, 2>(kYux, kYux) = 2.0 * vs * (dgs * dgs.transpose() + gs * hgs);
      dt2(kYVg) = hg;
      dt2.segment<6>(kYux) = vg * dhg;
      ht2.block<1, 6>(kYVg, kYux) = dhg.transpose();
      ht2.block<6, 1>(kYux, kYVg) = dhg;
      ht2.block<6, 6>(kYux, kYux) = 2.0 * vg * (dgg * dgg.transpose() + gg * hgg);
      const double t1 = vs * hs, t2 = vg * hg;
      const double r = qv * (1.0 - qv);
      const double V = qv * t1 + (1.0 - qv) * t2 + r * delta * delta;
      Vec11 dV = qv * dt1 + (1.0 - qv) * dt2 + (2.0 * r * delta) * dd;
      dV(kYq) = t1 - t2 + (1.0 - 2.0 * qv) * delta * delta;
      Mat11 hV = qv * ht1 + (1.0 - qv) * ht2 + (2.0 * r) * (dd * dd.transpose() + delta * hd);
      const Vec11 cq = dt1 - dt2 + (2.0 * (1.0 - 2.0 * qv) * delta) * dd;
      hV.row(kYq) += cq.transpose();
      hV.col(kYq) += cq;
      hV(kYq, kYq) = -2.0 * delta * delta;

      const double x = b.counts[p];
      const double m = b.fixed_mean[p] + E;
      const double v = b.fixed_var[p] + V;
      const double inv_m = 1.0 / m;
      const double inv_m2 = inv_m * inv_m;
      total.add(x * (std::log(m) - 0.5 * v * inv_m2) - m);

      const double fm = ((x - m) + x * v * inv_m2) * inv_m;
      const double fv = -0.5 * x * inv_m2;
      const double fmm = x * (-inv_m2 - 3.0 * v * inv_m2 * inv_m2);
      const double fmv = x * inv_m2 * inv_m;

      gy += fm * dE + fv * dV;
      const Mat11 cross = dE * dV.transpose();
      hy += fmm * (dE * dE.transpose()) + fmv * (cross + cross.transpose()) + fm * hE + fv * hV;
    }

    // Chain rule from the intermediate coordinates to the free parameters.
    Eigen::Matrix<double, kYCount, kParamCount> jac = Eigen::Matrix<double, kYCount, kParamCount>::Zero();
    jac.row(kYq) = q.g.transpose();
    jac.row(kYEs) = bj.mean[kStar].g.transpose();
    jac.row(kYVs) = bj.var[kStar].g.transpose();
    jac.row(kYEg) = bj.mean[kGalaxy].g.transpose();
    jac.row(kYVg) = bj.var[kGalaxy].g.transpose();
    jac(kYux, param::kPosX) = 1.0 / meta.pixel_scale;
    jac(kYuy, param::kPosY) = 1.0 / meta.pixel_scale;
    for (int i = 0; i < 4; ++i) jac(kYs0 + i, param::kLogitProfile + i) = 1.0;

    grad += jac.transpose() * gy;
    hess += jac.transpose() * hy * jac;
    hess += gy(kYq) * q.h + gy(kYEs) * bj.mean[kStar].h + gy(kYVs) * bj.var[kStar].h +
            gy(kYEg) * bj.mean[kGalaxy].h + gy(kYVg) * bj.var[kGalaxy].h;
  }

  const Objective kl = kl_divergence_derivatives(th, priors_);
  Objective out;
  total.add(-kl.value);
  out.value = total.value();
  out.gradient = grad - kl.gradient;
  const Eigen::MatrixXd h = hess - kl.hessian;
  out.hessian = 0.5 * (h + h.transpose());
  return out;
}

double BlockObjective::value(const ParamVector& th) const {
  if (!representable(th)) return -std::numeric_limits<double>::infinity();
  SourceModel s;
  unpack(th, s);
  CompensatedSum total;
  for (const auto& b : blocks_) {
    const SourceImageModel model(s, b.patch->meta);
    for (std::size_t p = 0; p < b.cols.size(); ++p) {
      double mean, variance;
      model.moments(b.cols[p], b.rows[p], mean, variance);
      total.add(pixel_term(b.counts[p], b.fixed_mean[p] + mean, b.fixed_var[p] + variance));
    }
  }
  const auto var = [&](int i) { return th(i); };
  total.add(-kl_terms<double>(var, kl_constants(priors_), priors_));
  return total.value();
}

double BlockObjective::difference(const ParamVector& a, const ParamVector& b) const {
  if (!representable(a) || !representable(b)) return std::numeric_limits<double>::quiet_NaN();
  SourceModel sa, sb;
  unpack(a, sa);
  unpack(b, sb);
  CompensatedSum total;
  for (const auto& blk : blocks_) {
    const SourceImageModel ma(sa, blk.patch->meta);
    const SourceImageModel mb(sb, blk.patch->meta);
    for (std::size_t p = 0; p < blk.cols.size(); ++p) {
      double mean_a, var_a, mean_b, var_b;
      ma.moments(blk.cols[p], blk.rows[p], mean_a, var_a);
      mb.moments(blk.cols[p], blk.rows[p], mean_b, var_b);
      const double m_a = blk.fixed_mean[p] + mean_a;
      const double m_b = blk.fixed_mean[p] + mean_b;
      const double v_a = blk.fixed_var[p] + var_a;
      const double v_b = blk.fixed_var[p] + var_b;
      const double dm = mean_a - mean_b;
      const double x = blk.counts[p];
      total.add(x * (std::log1p(dm / m_b) - 0.5 * (v_a / (m_a * m_a) - v_b / (m_b * m_b))) - dm);
    }
  }
  const KlConstants kc = kl_constants(priors_);
  const auto va = [&](int i) { return a(i); };
  const auto vb = [&](int i) { return b(i); };
  total.add(kl_terms<double>(vb, kc, priors_) - kl_terms<double>(va, kc, priors_));
  return total.value();
}

Objective elbo(std::span<const SourceModel> sources, std::span<const ImagePatch> patches, const Priors& priors,
               std::size_t active, const ModelConfig& config) {
  const BlockObjective obj(sources, patches, priors, active, config);
  return obj.evaluate(obj.initial());
}

double task_elbo(std::span<const SourceModel> sources, std::span<const ImagePatch> patches, const Priors& priors,
                 const ModelConfig& config) {
  require_elbo_priors(priors);
  const KlConstants kc = kl_constants(priors);
  CompensatedSum total;
  std::vector<double> mean, var;
  for (const auto& patch : patches) {
    mean.assign(patch.pixels.size(), patch.meta.background);
    var.assign(patch.pixels.size(), 0.0);
    for (const auto& s : sources) {
      const Footprint fp = anchored_footprint(s, patch, config);
      if (fp.empty()) continue;
      const SourceImageModel model(s, patch.meta);
      for (int row = fp.row_lo(); row <= fp.row_hi(); ++row) {
        for (int col = fp.col_lo(); col <= fp.col_hi(); ++col) {
          if (!fp.contains(col, row)) continue;
          double m, vr;
          model.moments(col, row, m, vr);
          const std::size_t idx = static_cast<std::size_t>(row) * patch.width + col;
          mean[idx] += m;
          var[idx] += vr;
        }
      }
    }
    for (std::size_t i = 0; i < patch.pixels.size(); ++i) {
      total.add(pixel_term(static_cast<double>(patch.pixels[i]), mean[i], var[i]));
    }
  }
  for (const auto& s : sources) {
    const ParamVector th = pack(s);
    const auto v = [&](int i) { return th(i); };
    total.add(-kl_terms<double>(v, kc, priors));
  }
  return total.value();
}

GradientCheckReport check_gradients(std::span<const SourceModel> sources, std::span<const ImagePatch> patches,
                                    const Priors& priors, std::size_t active, double step,
                                    const ModelConfig& config) {
  if (!(step > 0.0 && step <= 1e-3)) throw ValidationError("check_gradients: step must lie in (0, 1e-3]");
  const BlockObjective obj(sources, patches, priors, active, config);
  const ParamVector th = obj.initial();
  const Objective at = obj.evaluate(th);

  GradientCheckReport report;
  for (int i = 0; i < kParamCount; ++i) {
    ParamVector up = th, down = th;
    up(i) += step;
    down(i) -= step;
    const double fd = obj.difference(up, down) / (2.0 * step);
    report.gradient_error = std::max(report.gradient_error, std::abs(at.gradient(i) - fd) / (1.0 + std::abs(at.gradient(i))));

    const Objective ou = obj.evaluate(up);
    const Objective od = obj.evaluate(down);
    const Eigen::VectorXd hv = (ou.gradient - od.gradient) / (2.0 * step);
    for (int j = 0; j < kParamCount; ++j) {
      const double a = at.hessian(j, i);
      report.hessian_error = std::max(report.hessian_error, std::abs(a - hv(j)) / (1.0 + std::abs(a)));
    }
  }
  return report;
}

SourceModel source_from_entry(const CatalogEntry& e, double initial_sd) {
  SourceModel s;
  s.id = e.id;
  s.position = e.position;
  s.shape = e.shape;
  s.q_star = e.is_star ? 0.99 : 0.01;
  const double lr = std::log(e.flux[kReferenceBand]);
  for (int t = 0; t < 2; ++t) {
    s.logflux_mean[t] = lr;
    s.logflux_sd[t] = initial_sd;
    for (int k = 0; k < kColorCount; ++k) {
      s.color_mean[t][k] = std::log(e.flux[k + 1]) - std::log(e.flux[k]);
      s.color_sd[t][k] = initial_sd;
    }
  }
  s.anchor_at_current();
  return s;
}

CatalogEntry point_estimate(const SourceModel& s) {
  CatalogEntry e;
  e.id = s.id;
  e.position = s.position;
  e.is_star = s.q_star >= 0.5;
  const int t = e.is_star ? kStar : kGalaxy;
  for (int b = 0; b < kBandCount; ++b) {
    double l = s.logflux_mean[t];
    for (int k = 0; k < kColorCount; ++k) l += color_weights()[b][k] * s.color_mean[t][k];
    e.flux[b] = std::exp(l);
  }
  e.shape = s.shape;
  return e;
}

}  // namespace skycat
