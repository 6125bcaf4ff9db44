#pragma once

// Conflict-free parallel block coordinate ascent over the sources of a task.
//
// Each epoch samples a seeded permutation of the sources, cuts it into
// batches and splits every batch into the connected components of the
// conflict graph restricted to it. Components of a batch run concurrently,
// one worker each; sources inside a component run in permutation order.
// Two sources that conflict are therefore always optimized in permutation
// order, so the result does not depend on the worker count.

#include "skycat/sky_model.hpp"
#include "skycat/trust_newton.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace skycat {

/// Undirected graph on source indices; an edge joins two sources whose
/// footprints share a pixel in some patch.
struct ConflictGraph {
  std::vector<std::vector<std::size_t>> adjacency;  ///< sorted neighbor lists

  std::size_t size() const { return adjacency.size(); }
  bool has_edge(std::size_t i, std::size_t j) const;
  std::size_t edge_count() const;
};

ConflictGraph build_conflict_graph(std::span<const SourceModel> sources, std::span<const ImagePatch> patches,
                                   const ModelConfig& config = {});

/// True when the anchored footprints of two sources share a pixel in `patch`.
bool footprints_overlap(const SourceModel& a, const SourceModel& b, const ImagePatch& patch,
                        const ModelConfig& config = {});

struct EpochPlan {
  /// batches -> components -> source indices in plan order
  std::vector<std::vector<std::vector<std::size_t>>> batches;
};

EpochPlan plan_epoch(const ConflictGraph& graph, std::uint64_t seed, std::size_t batch_size);

/// Seeded uniform permutation of 0..n-1.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

/// Seed of epoch `epoch` for a task run with seed `seed`.
std::uint64_t epoch_seed(std::uint64_t seed, std::uint64_t epoch);

struct CoordinatorConfig {
  double epoch_tol = 1e-6;
  int max_epochs = 10;
  std::size_t batch_size = 0;  ///< 0 selects 4 x workers
  bool track_elbo = true;
  bool record_log = false;
  SolverConfig solver;
  ModelConfig model;

  void validate() const;
};

/// One block solve in the execution log. Sequence numbers come from a
/// single atomic counter, so [start_seq, end_seq] intervals of solves that
/// ran concurrently overlap.
struct ExecutionRecord {
  std::size_t source = 0;
  int worker = 0;
  std::uint64_t start_seq = 0;
  std::uint64_t end_seq = 0;
  int epoch = 0;
};

struct TaskStats {
  int epochs = 0;
  std::int64_t block_solves = 0;
  std::int64_t newton_iterations = 0;
  std::int64_t unconverged_blocks = 0;
  std::uint64_t active_pixel_visits = 0;
  double wall_seconds = 0.0;
  /// Task objective before the first epoch and after every epoch.
  std::vector<double> elbo_history;
  /// Largest parameter change in each epoch.
  std::vector<double> max_change;
};

struct TaskResult {
  std::vector<SourceModel> sources;
  TaskStats stats;
  std::vector<ExecutionRecord> log;
};

/// Optimizes `sources`. `fixed` sources contribute light but are never
/// updated (sources just outside the task region). Every task source must
/// have its center inside at least one patch.
TaskResult run_task(std::span<const SourceModel> sources, std::span<const SourceModel> fixed,
                    std::span<const ImagePatch> patches, const Priors& priors, const CoordinatorConfig& config,
                    int workers, std::uint64_t seed);

/// Number of pairs of conflicting sources whose solves overlapped in time.
std::size_t audit_execution_log(const std::vector<ExecutionRecord>& log, const ConflictGraph& graph);

}  // namespace skycat
