// skycat command-line interface: synth, partition, infer, score, check.

#include "CLI11.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "skycat/catalog_io.hpp"
#include "skycat/coordinator.hpp"
#include "skycat/errors.hpp"
#include "skycat/partitioner.hpp"
#include "skycat/runtime.hpp"
#include "skycat/score.hpp"
#include "skycat/synth.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <typeinfo>

using namespace skycat;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kTaskFailedExit = 3;

/// Output files of the running subcommand; removed unless committed.
class Outputs {
 public:
  fs::path add(const fs::path& p) {
    paths_.push_back(p);
    return p;
  }
  void commit() { paths_.clear(); }
  ~Outputs() {
    std::error_code ec;
    for (auto it = paths_.rbegin(); it != paths_.rend(); ++it) fs::remove_all(*it, ec);
  }

 private:
  std::vector<fs::path> paths_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw FormatError(path.string() + ": write failed");
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// sky.json: {"bounds": [x0, y0, x1, y1], "bands": [...], "priors": {...}}
json priors_to_json(const Priors& p) {
  json cov = json::array();
  for (int i = 0; i < kColorCount; ++i) {
    json row = json::array();
    for (int j = 0; j < kColorCount; ++j) row.push_back(p.color_cov(i, j));
    cov.push_back(row);
  }
  return {{"star_prob", p.star_prob},
          {"log_flux_mean", p.log_flux_mean},
          {"log_flux_sd", p.log_flux_sd},
          {"color_mean", p.color_mean},
          {"color_cov", cov}};
}

Priors priors_from_json(const json& j, const fs::path& path) {
  try {
    Priors p;
    p.star_prob = j.at("star_prob").get<double>();
    p.log_flux_mean = j.at("log_flux_mean").get<double>();
    p.log_flux_sd = j.at("log_flux_sd").get<double>();
    p.color_mean = j.at("color_mean").get<std::array<double, kColorCount>>();
    const auto cov = j.at("color_cov").get<std::vector<std::vector<double>>>();
    if (cov.size() != kColorCount) throw FormatError("color_cov must be 4x4");
    for (int i = 0; i < kColorCount; ++i) {
      if (cov[i].size() != kColorCount) throw FormatError("color_cov must be 4x4");
      for (int k = 0; k < kColorCount; ++k) p.color_cov(i, k) = cov[i][k];
    }
    p.validate();
    return p;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": priors: " + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(path.string() + ": priors: " + e.what());
  }
}

struct SkyFile {
  SkyRegion bounds;
  Priors priors;
};

SkyFile read_sky(const fs::path& path) {
  const json j = read_json(path);
  SkyFile s;
  try {
    const auto b = j.at("bounds").get<std::array<double, 4>>();
    s.bounds = {{b[0], b[1]}, {b[2], b[3]}};
    s.bounds.validate();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bounds: " + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(path.string() + ": bounds: " + e.what());
  }
  s.priors = priors_from_json(j.at("priors"), path);
  return s;
}

std::vector<ImageGeometry> geometries(const std::vector<ImageRecord>& manifest) {
  std::vector<ImageGeometry> out;
  for (const auto& r : manifest) out.push_back(r.geometry);
  return out;
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
  fs::path out = "sky";
  std::size_t sources = 100;
  double width = 128, height = 128;
  int tile = 64, overlap = 16;
  std::vector<int> bands{0, 1, 2, 3, 4};
  double background = 100.0, psf = 1.2, pixel_scale = 1.0;
  double scale_min = 1.0, scale_max = 5.0;
  double log_flux_mean = 7.5, log_flux_sd = 0.7;
  double position_jitter = 0.3, flux_jitter = 0.1, flip = 0.0;
  std::uint64_t seed = 1;
};

int run_synth(const SynthArgs& a) {
  Outputs outs;
  const bool fresh = !fs::exists(a.out);
  fs::create_directories(a.out / "images");
  if (fresh) outs.add(a.out);
  const SkyRegion bounds{{0, 0}, {a.width, a.height}};
  Priors priors;
  priors.log_flux_mean = a.log_flux_mean;
  priors.log_flux_sd = a.log_flux_sd;
  ShapeRanges shapes;
  shapes.scale_min = a.scale_min;
  shapes.scale_max = a.scale_max;
  const auto truth = generate_catalog(bounds, a.sources, priors, a.seed, shapes);
  const auto geom = tile_images(bounds, a.tile, a.overlap, a.bands, a.background, a.psf, a.pixel_scale);
  std::vector<ImageRecord> manifest;
  for (std::size_t i = 0; i < geom.size(); ++i) {
    const ImagePatch patch = render_image(truth.entries, geom[i], image_seed(a.seed + 1, i));
    const fs::path rel = fs::path("images") / ("img_" + std::to_string(geom[i].id) + ".img");
    write_image(outs.add(a.out / rel), patch, geom[i].id);
    manifest.push_back({geom[i], rel});
  }
  const auto prior = degrade_catalog(truth, a.position_jitter, a.flux_jitter, a.flip, a.seed + 2);
  write_catalog_csv(outs.add(a.out / "truth.csv"), truth.entries);
  write_catalog_csv(outs.add(a.out / "prior.csv"), prior);
  write_manifest(outs.add(a.out / "images.csv"), manifest);
  const json sky = {{"bounds", {bounds.min_corner.x, bounds.min_corner.y, bounds.max_corner.x, bounds.max_corner.y}},
                    {"bands", a.bands},
                    {"seed", a.seed},
                    {"priors", priors_to_json(priors)}};
  write_text(outs.add(a.out / "sky.json"), sky.dump(2) + "\n");
  outs.commit();
  std::printf("synth: %zu sources, %zu images -> %s\n", truth.entries.size(), geom.size(), a.out.c_str());
  return 0;
}

// -------------------------------------------------------------- partition

struct PartitionArgs {
  fs::path sky, catalog, manifest, out = "tasks.txt";
  double threshold = 0.0;
  int target_tasks = 16;
  int stages = 2;
  double min_extent = 4.0;
};

int run_partition(const PartitionArgs& a) {
  Outputs outs;
  const SkyFile sky = read_sky(a.sky);
  const auto catalog = read_catalog_csv(a.catalog);
  const auto images = geometries(read_manifest(a.manifest));
  const double total = estimate_work(sky.bounds, catalog, images);
  const double threshold = a.threshold > 0.0 ? a.threshold : std::max(total / a.target_tasks, 1.0);
  PartitionConfig pc;
  pc.min_extent = a.min_extent;
  const auto leaves = partition_sky(sky.bounds, catalog, images, threshold, pc);
  std::vector<SkyRegion> regions;
  std::size_t flagged = 0;
  for (const auto& l : leaves) {
    regions.push_back(l.region);
    flagged += l.at_min_extent;
  }
  auto built = make_tasks(regions, catalog, images, 1);
  std::vector<Task> tasks = built.tasks;
  if (a.stages == 2) {
    const auto shifted = shift_partition(regions, sky.bounds);
    auto second = make_tasks(shifted, catalog, images, 2, static_cast<std::int64_t>(tasks.size()) + 1);
    tasks.insert(tasks.end(), second.tasks.begin(), second.tasks.end());
  }
  tasks.erase(std::remove_if(tasks.begin(), tasks.end(), [](const Task& t) { return t.sources.empty(); }),
              tasks.end());
  write_tasks(outs.add(a.out), tasks);
  outs.commit();
  std::printf("partition: work %.0f, threshold %.0f, %zu regions (%zu at min extent), %zu tasks, %zu entries outside\n",
              total, threshold, regions.size(), flagged, tasks.size(), built.skipped);
  return 0;
}

// ------------------------------------------------------------------ infer

struct InferArgs {
  fs::path tasks, manifest, sky, out = "catalog.csv", metrics = "metrics.json";
  int processes = 1, fan_out = 2, threads = 1, epochs = 10;
  std::uint64_t seed = 1;
  std::string transport = "in-process";
  bool stage_elbo = false;
};

int run_infer(const InferArgs& a) {
  Outputs outs;
  const SkyFile sky = read_sky(a.sky);
  const auto tasks = read_tasks(a.tasks);
  const auto manifest = read_manifest(a.manifest);
  CoordinatorConfig cc;
  cc.max_epochs = a.epochs;
  cc.track_elbo = false;
  RuntimeConfig rc;
  rc.processes = a.processes;
  rc.fan_out = a.fan_out;
  rc.threads_per_process = a.threads;
  rc.seed = a.seed;
  rc.transport = a.transport == "socket" ? Transport::socket : Transport::in_process;
  std::function<double(std::span<const SourceModel>)> stage_value;
  std::vector<ImagePatch> all_images;
  if (a.stage_elbo) {
    const auto loader = manifest_loader(manifest);
    for (const auto& r : manifest) all_images.push_back(loader(r.geometry.id));
    stage_value = [&](std::span<const SourceModel> s) { return task_elbo(s, all_images, sky.priors); };
  }
  const auto result = run_tasks(tasks, manifest_loader(manifest), coordinator_executor(sky.priors, cc, a.threads),
                                rc, stage_value);
  std::vector<EstimateEntry> rows;
  for (const auto& s : result.sources) rows.push_back(summarize(s));
  write_estimate_csv(outs.add(a.out), rows);
  write_text(outs.add(a.metrics), metrics_json(result));
  outs.commit();
  std::printf("infer: %zu tasks, %zu sources, %.2f s, %llu pixel visits, %.3g flops\n", result.trace.entries.size(),
              rows.size(), result.metrics.wall_seconds,
              static_cast<unsigned long long>(result.metrics.active_pixel_visits), result.metrics.flops_estimate);
  for (std::size_t i = 0; i < result.stage_values.size(); ++i)
    std::printf("infer: ELBO after stage %zu: %.6f\n", i + 1, result.stage_values[i]);
  for (const auto& f : result.failures) std::fprintf(stderr, "skycat: task failed: %s\n", f.message.c_str());
  return result.failures.empty() ? 0 : kTaskFailedExit;
}

// ------------------------------------------------------------------ score

struct ScoreArgs {
  fs::path truth, catalog, out;
  double radius = 1.0, pixel_scale = 1.0;
};

int run_score(const ScoreArgs& a) {
  Outputs outs;
  ScoreConfig cfg;
  cfg.match_radius_px = a.radius;
  cfg.pixel_scale = a.pixel_scale;
  const auto report = score_catalogs(read_catalog_csv(a.truth), read_estimate_csv(a.catalog), cfg);
  if (!a.out.empty()) write_text(outs.add(a.out), format_report_csv(report));
  outs.commit();
  std::cout << format_report_table(report);
  return 0;
}

// ------------------------------------------------------------------ check

int run_check(int configs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  bool ok = true;
  const auto line = [&](const char* name, bool pass, const std::string& detail) {
    std::printf("%-12s %s  %s\n", name, pass ? "PASS" : "FAIL", detail.c_str());
    ok = ok && pass;
  };

  double worst = 0.0;
  for (int i = 0; i < configs; ++i) {
    auto inst = oracle::random_tiny_instance(rng, 0.05 + 0.2 * std::uniform_real_distribution<double>(0, 1)(rng));
    const std::vector<ImagePatch> patches{inst.patch};
    for (std::size_t s = 0; s < inst.sources.size(); ++s)
      worst = std::max(worst, check_gradients(inst.sources, patches, inst.priors, s, 1e-4).max_error());
  }
  line("gradients", worst < 1e-6, "max relative error " + std::to_string(worst));

  double gap = -1e300;
  for (int i = 0; i < configs; ++i) {
    const auto inst = oracle::random_tiny_instance(rng);
    const std::vector<ImagePatch> patches{inst.patch};
    const double value = task_elbo(inst.sources, patches, inst.priors);
    gap = std::max(gap, value - oracle::log_evidence(inst.sources, inst.patch, inst.priors, 4.0).log_evidence);
  }
  line("bound", gap <= 1e-6, "max ELBO - log evidence " + std::to_string(gap));

  Priors priors;
  priors.log_flux_mean = 7.5;
  priors.log_flux_sd = 0.7;
  const SkyRegion bounds{{0, 0}, {30, 30}};
  ShapeRanges shapes;
  shapes.scale_max = 2.0;
  const auto truth = generate_catalog(bounds, 12, priors, seed, shapes);
  const std::vector<int> bands{1, 2, 3};
  const auto geom = tile_images(bounds, 40, 0, bands, 100.0, 1.2);
  const auto patches = render_images(truth, geom, seed + 1);
  std::vector<SourceModel> init;
  for (const auto& e : degrade_catalog(truth, 0.3, 0.1, 0.0, seed + 2)) init.push_back(source_from_entry(e));
  CoordinatorConfig cc;
  cc.max_epochs = 3;
  const auto one = run_task(init, {}, patches, priors, cc, 1, seed);
  const auto four = run_task(init, {}, patches, priors, cc, 4, seed);
  bool same = one.sources.size() == four.sources.size();
  for (std::size_t i = 0; same && i < one.sources.size(); ++i) {
    const auto a = source_fields(one.sources[i]), b = source_fields(four.sources[i]);
    same = std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
  }
  line("determinism", same, "1 vs 4 workers on a 12-source field");
  return ok ? 0 : 1;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e)) return "ValidationError";
  if (dynamic_cast<const FormatError*>(&e)) return "FormatError";
  if (dynamic_cast<const LookupError*>(&e)) return "LookupError";
  if (dynamic_cast<const BoundsError*>(&e)) return "BoundsError";
  return "error";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skycat: variational sky cataloging on synthetic imagery"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic sky: truth, images, manifest, prior catalog");
  synth->add_option("--out", sa.out, "Output directory")->capture_default_str();
  synth->add_option("--sources", sa.sources, "Number of sources")->capture_default_str();
  synth->add_option("--width", sa.width, "Sky width (sky units)")->capture_default_str();
  synth->add_option("--height", sa.height, "Sky height (sky units)")->capture_default_str();
  synth->add_option("--tile", sa.tile, "Image side in pixels")->capture_default_str();
  synth->add_option("--overlap", sa.overlap, "Image overlap in pixels")->capture_default_str();
  synth->add_option("--bands", sa.bands, "Bands to image (0-4)")->delimiter(',')->capture_default_str();
  synth->add_option("--background", sa.background, "Sky background (counts/pixel)")->capture_default_str();
  synth->add_option("--psf", sa.psf, "PSF sigma (pixels)")->capture_default_str();
  synth->add_option("--pixel-scale", sa.pixel_scale, "Sky units per pixel")->capture_default_str();
  synth->add_option("--scale-min", sa.scale_min, "Smallest galaxy scale")->capture_default_str();
  synth->add_option("--scale-max", sa.scale_max, "Largest galaxy scale")->capture_default_str();
  synth->add_option("--log-flux-mean", sa.log_flux_mean, "Prior mean of reference log flux")->capture_default_str();
  synth->add_option("--log-flux-sd", sa.log_flux_sd, "Prior sd of reference log flux")->capture_default_str();
  synth->add_option("--position-jitter", sa.position_jitter, "Prior catalog position noise")->capture_default_str();
  synth->add_option("--flux-jitter", sa.flux_jitter, "Prior catalog log-flux noise")->capture_default_str();
  synth->add_option("--flip", sa.flip, "Prior catalog type flip probability")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Random seed")->capture_default_str();

  PartitionArgs pa;
  auto* part = app.add_subcommand("partition", "Split the sky into tasks (stage 1 and shifted stage 2)");
  part->add_option("--sky", pa.sky, "sky.json from synth")->required();
  part->add_option("--catalog", pa.catalog, "Prior catalog CSV")->required();
  part->add_option("--manifest", pa.manifest, "Image manifest CSV")->required();
  part->add_option("--out", pa.out, "Task file")->capture_default_str();
  part->add_option("--threshold", pa.threshold, "Work per task (predicted active pixels); overrides --tasks");
  part->add_option("--tasks", pa.target_tasks, "Aim for about this many stage-1 tasks")->capture_default_str();
  part->add_option("--stages", pa.stages, "1 or 2")->check(CLI::IsMember({1, 2}))->capture_default_str();
  part->add_option("--min-extent", pa.min_extent, "Smallest region side")->capture_default_str();

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Run inference over a task file");
  infer->add_option("--tasks", ia.tasks, "Task file")->required();
  infer->add_option("--manifest", ia.manifest, "Image manifest CSV")->required();
  infer->add_option("--sky", ia.sky, "sky.json (priors)")->required();
  infer->add_option("--out", ia.out, "Output catalog CSV")->capture_default_str();
  infer->add_option("--metrics", ia.metrics, "Metrics JSON")->capture_default_str();
  infer->add_option("--processes", ia.processes, "Scheduler processes")->capture_default_str();
  infer->add_option("--fan-out", ia.fan_out, "Scheduler tree arity")->capture_default_str();
  infer->add_option("--threads", ia.threads, "Worker threads per process")->capture_default_str();
  infer->add_option("--epochs", ia.epochs, "Maximum epochs per task")->capture_default_str();
  infer->add_option("--seed", ia.seed, "Random seed")->capture_default_str();
  infer->add_option("--transport", ia.transport, "in-process or socket")
      ->check(CLI::IsMember({"in-process", "socket"}))
      ->capture_default_str();
  infer->add_flag("--stage-elbo", ia.stage_elbo, "Evaluate the ELBO over all images after each stage");

  ScoreArgs sc;
  auto* score = app.add_subcommand("score", "Score a catalog against the truth");
  score->add_option("--truth", sc.truth, "Truth catalog CSV")->required();
  score->add_option("--catalog", sc.catalog, "Output catalog CSV")->required();
  score->add_option("--out", sc.out, "Report CSV");
  score->add_option("--radius", sc.radius, "Match radius (pixels)")->capture_default_str();
  score->add_option("--pixel-scale", sc.pixel_scale, "Sky units per pixel")->capture_default_str();

  int check_configs = 20;
  std::uint64_t check_seed = 1;
  auto* check = app.add_subcommand("check", "Self-test: derivatives, ELBO bound, determinism");
  check->add_option("--configs", check_configs, "Random configurations")->capture_default_str();
  check->add_option("--seed", check_seed, "Random seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return run_synth(sa);
    if (*part) return run_partition(pa);
    if (*infer) return run_infer(ia);
    if (*score) return run_score(sc);
    if (*check) return run_check(check_configs, check_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "skycat: %s: %s\n", error_kind(e).c_str(), e.what());
    return 2;
  }
  return 1;
}
