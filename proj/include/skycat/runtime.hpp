#pragma once

// Task runtime: a tree-structured dynamic scheduler, a versioned parameter
// store, per-process task loops with image prefetch, and run accounting.
//
// Processes form a logical tree, node i having parent (i - 1) / fan_out.
// Each stage starts with a static split: a fraction of the stage's tasks is
// dealt out in equal contiguous shares, the rest stays in the root's queue.
// A process whose queue runs dry asks its parent, which hands down a share
// of its own queue proportional to the requester's subtree size; an empty
// parent forwards the request upward. An empty root recalls work from the
// nearest nonempty node in its tree and refuses only when no queued task is
// left anywhere. Every hop counts as one message.
//
// Socket transport: the parent process runs the scheduler and the store and
// forks one worker per process node; each worker talks to it over a stream
// socket. Frames are
//   u32 length   (little-endian, bytes that follow)
//   u8  type
//   ...body      (integers and doubles little-endian, doubles as IEEE-754 bits)
// Types and bodies:
//   1 NEXT        w->m  empty; asks for the next task of the current stage
//   2 ASSIGN      m->w  i64 task index
//   3 NONE        m->w  empty; stage exhausted
//   4 BARRIER     w->m  empty; waits for the next stage
//   5 STAGE       m->w  i32 stage
//   6 SHUTDOWN    m->w  empty
//   7 FETCH       w->m  i64 task index, f64 largest psf_sigma * pixel_scale
//                       over the task's images
//   8 BLOCKS      m->w  u32 n_own, n_own blocks, u32 n_fixed, n_fixed blocks
//   9 DONE        w->m  i64 task index, f64 start, f64 end, f64 load_wait,
//                       u64 visits, u8 ok, u32 n, n bytes of error text,
//                       u32 k, k blocks
//  10 TIMES       w->m  f64 task_processing, image_loading, load_imbalance, other
// A block is i64 id, u64 stamp, f64 anchor_x, anchor_y, anchor_scale, then
// the kSourceFields natural-value fields of catalog_io.hpp. Times are
// seconds on the shared monotonic clock.

#include "skycat/catalog_io.hpp"
#include "skycat/coordinator.hpp"
#include "skycat/sky_model.hpp"
#include "skycat/task.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace skycat {

struct SchedulerPolicy {
  double initial_fraction = 0.5;  ///< share of a stage dealt out statically
  double refill_fraction = 0.5;   ///< share of a parent's queue handed down

  void validate() const;
};

struct SchedulerNode {
  int node_id = 0;
  int parent_id = -1;  ///< -1 for the root
  std::vector<int> children_ids;
  std::deque<std::int64_t> local_queue;
  int fan_out = 2;
};

struct SchedulerStats {
  std::uint64_t requests = 0;
  std::uint64_t messages = 0;
  std::uint64_t max_messages_per_request = 0;
  std::uint64_t refusals = 0;
};

/// Thread-safe; every call is one atomic step of the tree protocol.
class DtreeScheduler {
 public:
  DtreeScheduler(int processes, int fan_out, const SchedulerPolicy& policy = {});

  /// Replaces all queues with the tasks of a new stage, in the given order.
  void load(std::span<const std::int64_t> task_ids);
  /// Next task for `process`, or nothing once no queued task is left.
  std::optional<std::int64_t> next(int process);

  int processes() const { return static_cast<int>(nodes_.size()); }
  int height() const;
  int depth(int node) const;
  std::size_t subtree_size(int node) const { return subtree_[static_cast<std::size_t>(node)]; }
  std::vector<SchedulerNode> nodes() const;
  SchedulerStats stats() const;

 private:
  std::size_t take_from(int node, std::size_t want, std::deque<std::int64_t>& out);

  mutable std::mutex mu_;
  std::vector<SchedulerNode> nodes_;
  std::vector<std::size_t> subtree_;
  SchedulerPolicy policy_;
  SchedulerStats stats_;
};

/// One executed (or failed) task.
struct TraceEntry {
  std::int64_t task_id = 0;
  int stage = 1;
  int process = 0;
  double start = 0.0;      ///< images ready, processing begins
  double end = 0.0;        ///< results committed
  double load_wait = 0.0;  ///< blocked waiting for this task's images
  std::uint64_t visits = 0;
  bool ok = true;
  std::string error;
};

struct StageWindow {
  int stage = 1;
  double start = 0.0;
  double end = 0.0;  ///< last task end of the stage
};

struct RunTrace {
  int processes = 1;
  double wall_seconds = 0.0;  ///< trace times lie in [0, wall_seconds]
  std::vector<TraceEntry> entries;
  std::vector<StageWindow> stages;
};

struct SimTask {
  std::int64_t id = 0;
  int stage = 1;
  double duration = 0.0;
};

/// Discrete-event run of the scheduler with zero-latency messages: a free
/// process asks for work and runs what it gets for the task's duration.
struct SimulationResult {
  RunTrace trace;
  SchedulerStats stats;
  int tree_height = 0;
  double makespan = 0.0;
};

SimulationResult simulate_schedule(std::span<const SimTask> tasks, int processes, int fan_out,
                                   const SchedulerPolicy& policy = {});

struct ProcessTimes {
  double task_processing = 0.0;
  double image_loading = 0.0;
  double load_imbalance = 0.0;
  double other = 0.0;

  double total() const { return task_processing + image_loading + load_imbalance + other; }
};

struct AccountingConfig {
  double flops_per_visit = 32317.0;
  double overhead_factor = 1.375;
};

struct RunMetrics {
  double wall_seconds = 0.0;
  std::vector<ProcessTimes> processes;
  std::uint64_t active_pixel_visits = 0;
  double flops_per_visit = 32317.0;
  double overhead_factor = 1.375;
  double flops_estimate = 0.0;
};

double flops_estimate(std::uint64_t visits, const AccountingConfig& config = {});

/// Metrics from a trace: processing = sum of task spans, loading = sum of
/// load waits, imbalance = for every stage the time from the process's last
/// task end (or the stage start if it ran none) to the stage end, other =
/// the remainder of the wall time.
RunMetrics account(const RunTrace& trace, const AccountingConfig& config = {});

/// Versioned source blocks. Keys are fixed at construction.
class ParamStore {
 public:
  struct Stamped {
    SourceModel block;
    std::uint64_t stamp = 0;
  };

  explicit ParamStore(std::span<const SourceModel> initial);

  /// Throws LookupError on an unknown id.
  Stamped get(std::int64_t id) const;
  /// Returns the block's new stamp. Throws LookupError on an unknown id.
  std::uint64_t put(std::int64_t id, const SourceModel& block);
  bool contains(std::int64_t id) const { return index_.count(id) != 0; }
  std::size_t size() const { return slots_.size(); }
  /// Every block, in construction order.
  std::vector<Stamped> snapshot() const;

 private:
  struct Slot {
    mutable std::mutex mu;
    SourceModel block;
    std::uint64_t stamp = 0;
  };
  const Slot& slot(std::int64_t id) const;

  std::vector<std::unique_ptr<Slot>> slots_;
  std::unordered_map<std::int64_t, std::size_t> index_;
};

/// Loads one image by id; throws (FormatError naming the file) on failure.
using ImageLoader = std::function<ImagePatch(std::int64_t image_id)>;

/// Image loader over a manifest.
ImageLoader manifest_loader(const std::vector<ImageRecord>& manifest);

/// Output of one task: updated sources and the visit count.
struct TaskOutput {
  std::vector<SourceModel> sources;
  std::uint64_t visits = 0;
};

/// Processes one task given its images and the fixed neighbors.
using TaskExecutor = std::function<TaskOutput(const Task& task, std::span<const ImagePatch> images,
                                              std::span<const SourceModel> fixed, std::uint64_t seed)>;

/// Executor running the coordinator on the task.
TaskExecutor coordinator_executor(const Priors& priors, const CoordinatorConfig& config, int threads);

enum class Transport { in_process, socket };

struct RuntimeConfig {
  int processes = 1;
  int fan_out = 2;
  int threads_per_process = 1;
  SchedulerPolicy policy;
  Transport transport = Transport::in_process;
  std::uint64_t seed = 1;
  AccountingConfig accounting;
  ModelConfig model;  ///< footprint settings for the neighbor radius

  void validate() const;
};

struct TaskFailure {
  std::int64_t task_id = 0;
  std::string message;
};

struct RunResult {
  std::vector<SourceModel> sources;  ///< final blocks sorted by id
  RunTrace trace;
  RunMetrics metrics;  ///< measured per process
  SchedulerStats scheduler;
  std::vector<TaskFailure> failures;
  /// Called after each stage with the store contents (sorted by id).
  std::vector<double> stage_values;
};

/// Seed of one task.
std::uint64_t task_seed(std::uint64_t seed, std::int64_t task_id, int stage);

/// Runs every task, stage 1 before stage 2. A source's initial block is the
/// first occurrence among the tasks (stage order, then task order); a
/// later-stage task starts from the store's current blocks. Fixed neighbors
/// of a task are read from a snapshot taken when its stage begins: every
/// store block outside the task whose anchor lies within the task region
/// expanded by twice the largest footprint radius of the task's images.
/// `stage_value`, when set, is evaluated on the store after each stage.
RunResult run_tasks(std::span<const Task> tasks, const ImageLoader& loader, const TaskExecutor& executor,
                    const RuntimeConfig& config,
                    const std::function<double(std::span<const SourceModel>)>& stage_value = {});

/// Metrics document: wall time, per-process components, visits, flops and
/// the task trace.
std::string metrics_json(const RunResult& result);

}  // namespace skycat
