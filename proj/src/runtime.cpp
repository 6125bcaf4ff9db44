#include "skycat/runtime.hpp"

#include "skycat/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <future>
#include <map>
#include <queue>
#include <set>
#include <stdexcept>
#include <thread>
#include <unordered_set>

#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

namespace skycat {

namespace {

double monotonic_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

/// Splits a process's time line into the four metric components. Every
/// instant between construction and the last switch belongs to exactly one.
class Stopwatch {
 public:
  enum Category { processing, loading, imbalance, other };

  explicit Stopwatch(double start, Category c = other) : last_(start), current_(c) {}

  double switch_to(Category c) { return switch_at(monotonic_seconds(), c); }
  double switch_at(double now, Category c) {
    slot(current_) += now - last_;
    last_ = now;
    current_ = c;
    return now;
  }
  void add(Category c, double seconds) { slot(c) += seconds; }
  const ProcessTimes& times() const { return times_; }

 private:
  double& slot(Category c) {
    switch (c) {
      case processing: return times_.task_processing;
      case loading: return times_.image_loading;
      case imbalance: return times_.load_imbalance;
      default: return times_.other;
    }
  }

  ProcessTimes times_;
  double last_;
  Category current_;
};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

// ---------------------------------------------------------------- scheduler

void SchedulerPolicy::validate() const {
  if (!(initial_fraction >= 0.0 && initial_fraction <= 1.0))
    throw ValidationError("scheduler policy: initial_fraction must lie in [0, 1]");
  if (!(refill_fraction > 0.0 && refill_fraction <= 1.0))
    throw ValidationError("scheduler policy: refill_fraction must lie in (0, 1]");
}

DtreeScheduler::DtreeScheduler(int processes, int fan_out, const SchedulerPolicy& policy) : policy_(policy) {
  if (processes < 1) throw ValidationError("scheduler: processes must be >= 1");
  if (fan_out < 2) throw ValidationError("scheduler: fan_out must be >= 2");
  policy.validate();
  nodes_.resize(static_cast<std::size_t>(processes));
  subtree_.assign(nodes_.size(), 1);
  for (int i = 0; i < processes; ++i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    n.node_id = i;
    n.fan_out = fan_out;
    n.parent_id = i == 0 ? -1 : (i - 1) / fan_out;
    if (i > 0) nodes_[static_cast<std::size_t>(n.parent_id)].children_ids.push_back(i);
  }
  for (int i = processes - 1; i > 0; --i) subtree_[static_cast<std::size_t>(nodes_[i].parent_id)] += subtree_[i];
}

int DtreeScheduler::depth(int node) const {
  int d = 0;
  while (nodes_.at(static_cast<std::size_t>(node)).parent_id >= 0) {
    node = nodes_[static_cast<std::size_t>(node)].parent_id;
    ++d;
  }
  return d;
}

int DtreeScheduler::height() const {
  int h = 0;
  for (int i = 0; i < processes(); ++i) h = std::max(h, depth(i));
  return h;
}

std::vector<SchedulerNode> DtreeScheduler::nodes() const {
  std::lock_guard lock(mu_);
  return nodes_;
}

SchedulerStats DtreeScheduler::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

void DtreeScheduler::load(std::span<const std::int64_t> task_ids) {
  std::lock_guard lock(mu_);
  for (auto& n : nodes_) n.local_queue.clear();
  const std::size_t p = nodes_.size();
  const auto share = static_cast<std::size_t>(std::floor(policy_.initial_fraction * static_cast<double>(task_ids.size()) /
                                                         static_cast<double>(p)));
  std::size_t k = 0;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < share; ++j) nodes_[i].local_queue.push_back(task_ids[k++]);
  for (; k < task_ids.size(); ++k) nodes_[0].local_queue.push_back(task_ids[k]);
}

std::size_t DtreeScheduler::take_from(int node, std::size_t want, std::deque<std::int64_t>& out) {
  auto& q = nodes_[static_cast<std::size_t>(node)].local_queue;
  want = std::min(want, q.size());
  out.insert(out.end(), q.end() - static_cast<std::ptrdiff_t>(want), q.end());
  q.erase(q.end() - static_cast<std::ptrdiff_t>(want), q.end());
  return want;
}

std::optional<std::int64_t> DtreeScheduler::next(int process) {
  std::lock_guard lock(mu_);
  if (process < 0 || process >= processes()) throw BoundsError("scheduler: unknown process " + std::to_string(process));
  auto& own = nodes_[static_cast<std::size_t>(process)].local_queue;
  if (!own.empty()) {
    const auto id = own.front();
    own.pop_front();
    return id;
  }
  ++stats_.requests;
  std::uint64_t messages = 0;
  // Climb until a node holds work.
  std::vector<int> path{process};
  int at = process;
  while (nodes_[static_cast<std::size_t>(at)].local_queue.empty() && at != 0) {
    at = nodes_[static_cast<std::size_t>(at)].parent_id;
    path.push_back(at);
    ++messages;
  }
  if (nodes_[static_cast<std::size_t>(at)].local_queue.empty()) {
    // Root is dry: recall from the first nonempty node in breadth-first order.
    int holder = -1;
    for (int i = 1; i < processes() && holder < 0; ++i)
      if (!nodes_[static_cast<std::size_t>(i)].local_queue.empty()) holder = i;
    if (holder < 0) {
      messages += static_cast<std::uint64_t>(depth(process));
      ++stats_.refusals;
      stats_.messages += messages;
      stats_.max_messages_per_request = std::max(stats_.max_messages_per_request, messages);
      return std::nullopt;
    }
    const auto size = nodes_[static_cast<std::size_t>(holder)].local_queue.size();
    const auto want = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(policy_.refill_fraction * size)));
    take_from(holder, want, nodes_[0].local_queue);
    messages += 2 * static_cast<std::uint64_t>(depth(holder));
  }
  // Hand work down the path back to the requester.
  for (std::size_t k = path.size() - 1; k > 0; --k) {
    const int from = path[k], to = path[k - 1];
    const auto size = nodes_[static_cast<std::size_t>(from)].local_queue.size();
    const double portion = policy_.refill_fraction * static_cast<double>(size) *
                           static_cast<double>(subtree_[static_cast<std::size_t>(to)]) /
                           static_cast<double>(subtree_[static_cast<std::size_t>(from)]);
    const auto want = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(portion)));
    take_from(from, want, nodes_[static_cast<std::size_t>(to)].local_queue);
    ++messages;
  }
  stats_.messages += messages;
  stats_.max_messages_per_request = std::max(stats_.max_messages_per_request, messages);
  const auto id = own.front();
  own.pop_front();
  return id;
}

// --------------------------------------------------------------- simulation

SimulationResult simulate_schedule(std::span<const SimTask> tasks, int processes, int fan_out,
                                   const SchedulerPolicy& policy) {
  if (tasks.empty()) throw ValidationError("simulate_schedule: no tasks");
  std::unordered_map<std::int64_t, const SimTask*> by_id;
  std::set<int> stages;
  for (const auto& t : tasks) {
    if (!(t.duration >= 0.0) || !std::isfinite(t.duration))
      throw ValidationError("simulate_schedule: task " + std::to_string(t.id) + " has a bad duration");
    if (!by_id.emplace(t.id, &t).second)
      throw ValidationError("simulate_schedule: duplicate task id " + std::to_string(t.id));
    stages.insert(t.stage);
  }
  DtreeScheduler sched(processes, fan_out, policy);
  SimulationResult out;
  out.trace.processes = processes;
  out.tree_height = sched.height();
  double now = 0.0;
  for (int stage : stages) {
    std::vector<std::int64_t> ids;
    for (const auto& t : tasks)
      if (t.stage == stage) ids.push_back(t.id);
    sched.load(ids);
    StageWindow window{stage, now, now};
    using Event = std::pair<double, int>;
    std::priority_queue<Event, std::vector<Event>, std::greater<>> free;
    for (int p = 0; p < processes; ++p) free.push({now, p});
    while (!free.empty()) {
      const auto [t, p] = free.top();
      free.pop();
      const auto id = sched.next(p);
      if (!id) continue;
      const SimTask& task = *by_id.at(*id);
      TraceEntry e;
      e.task_id = task.id;
      e.stage = stage;
      e.process = p;
      e.start = t;
      e.end = t + task.duration;
      window.end = std::max(window.end, e.end);
      out.trace.entries.push_back(e);
      free.push({e.end, p});
    }
    out.trace.stages.push_back(window);
    now = window.end;
  }
  out.makespan = now;
  out.trace.wall_seconds = now;
  out.stats = sched.stats();
  return out;
}

// --------------------------------------------------------------- accounting

double flops_estimate(std::uint64_t visits, const AccountingConfig& config) {
  return static_cast<double>(visits) * config.flops_per_visit * config.overhead_factor;
}

RunMetrics account(const RunTrace& trace, const AccountingConfig& config) {
  RunMetrics m;
  m.wall_seconds = trace.wall_seconds;
  m.flops_per_visit = config.flops_per_visit;
  m.overhead_factor = config.overhead_factor;
  m.processes.resize(static_cast<std::size_t>(std::max(trace.processes, 0)));
  std::map<std::pair<int, int>, double> last_end;  // (process, stage) -> end
  for (const auto& e : trace.entries) {
    if (e.process < 0 || e.process >= trace.processes)
      throw ValidationError("account: trace entry names process " + std::to_string(e.process));
    auto& p = m.processes[static_cast<std::size_t>(e.process)];
    p.task_processing += e.end - e.start;
    p.image_loading += e.load_wait;
    m.active_pixel_visits += e.visits;
    auto [it, fresh] = last_end.emplace(std::make_pair(e.process, e.stage), e.end);
    if (!fresh) it->second = std::max(it->second, e.end);
  }
  for (int p = 0; p < trace.processes; ++p) {
    auto& pt = m.processes[static_cast<std::size_t>(p)];
    for (const auto& w : trace.stages) {
      const auto it = last_end.find({p, w.stage});
      const double finished = it == last_end.end() ? w.start : std::max(w.start, it->second);
      pt.load_imbalance += w.end - finished;
    }
    pt.other = trace.wall_seconds - (pt.task_processing + pt.image_loading + pt.load_imbalance);
  }
  m.flops_estimate = flops_estimate(m.active_pixel_visits, config);
  return m;
}

// -------------------------------------------------------------- param store

ParamStore::ParamStore(std::span<const SourceModel> initial) {
  slots_.reserve(initial.size());
  for (const auto& s : initial) {
    if (!index_.emplace(s.id, slots_.size()).second)
      throw ValidationError("param store: duplicate source id " + std::to_string(s.id));
    auto slot = std::make_unique<Slot>();
    slot->block = s;
    slots_.push_back(std::move(slot));
  }
}

const ParamStore::Slot& ParamStore::slot(std::int64_t id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw LookupError("param store: unknown source id " + std::to_string(id));
  return *slots_[it->second];
}

ParamStore::Stamped ParamStore::get(std::int64_t id) const {
  const Slot& s = slot(id);
  std::lock_guard lock(s.mu);
  return {s.block, s.stamp};
}

std::uint64_t ParamStore::put(std::int64_t id, const SourceModel& block) {
  Slot& s = const_cast<Slot&>(slot(id));
  std::lock_guard lock(s.mu);
  s.block = block;
  s.block.id = id;
  return ++s.stamp;
}

std::vector<ParamStore::Stamped> ParamStore::snapshot() const {
  std::vector<Stamped> out;
  out.reserve(slots_.size());
  for (const auto& s : slots_) {
    std::lock_guard lock(s->mu);
    out.push_back({s->block, s->stamp});
  }
  return out;
}

// -------------------------------------------------------------- executors

ImageLoader manifest_loader(const std::vector<ImageRecord>& manifest) {
  auto files = std::make_shared<std::unordered_map<std::int64_t, ImageRecord>>();
  for (const auto& r : manifest) files->emplace(r.geometry.id, r);
  return [files](std::int64_t id) {
    const auto it = files->find(id);
    if (it == files->end()) throw LookupError("image " + std::to_string(id) + " is not in the manifest");
    std::int64_t stored = 0;
    ImagePatch patch = read_image(it->second.file, &stored);
    if (stored != id) {
      throw FormatError(it->second.file.string() + ": holds image " + std::to_string(stored) + ", manifest says " +
                        std::to_string(id));
    }
    return patch;
  };
}

TaskExecutor coordinator_executor(const Priors& priors, const CoordinatorConfig& config, int threads) {
  config.validate();
  if (threads < 1) throw ValidationError("coordinator executor: threads must be >= 1");
  return [priors, config, threads](const Task& task, std::span<const ImagePatch> images,
                                   std::span<const SourceModel> fixed, std::uint64_t seed) {
    TaskResult r = run_task(task.sources, fixed, images, priors, config, threads, seed);
    return TaskOutput{std::move(r.sources), r.stats.active_pixel_visits};
  };
}

std::uint64_t task_seed(std::uint64_t seed, std::int64_t task_id, int stage) {
  return splitmix(splitmix(seed ^ splitmix(static_cast<std::uint64_t>(task_id))) + static_cast<std::uint64_t>(stage));
}

void RuntimeConfig::validate() const {
  if (processes < 1) throw ValidationError("runtime: processes must be >= 1");
  if (fan_out < 2) throw ValidationError("runtime: fan_out must be >= 2");
  if (threads_per_process < 1) throw ValidationError("runtime: threads_per_process must be >= 1");
  policy.validate();
}

namespace {

/// State shared by both transports.
struct RunPlan {
  std::span<const Task> tasks;
  std::vector<int> stages;
  std::map<int, std::vector<std::int64_t>> stage_tasks;  // stage -> task indices
  std::vector<SourceModel> initial;
};

const Task& task_at(const RunPlan& plan, std::int64_t idx) {
  if (idx < 0 || static_cast<std::size_t>(idx) >= plan.tasks.size())
    throw FormatError("runtime message: task index " + std::to_string(idx) + " out of range");
  return plan.tasks[static_cast<std::size_t>(idx)];
}

RunPlan plan_run(std::span<const Task> tasks) {
  RunPlan plan;
  plan.tasks = tasks;
  std::unordered_set<std::int64_t> task_ids;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (!task_ids.insert(tasks[i].id).second)
      throw ValidationError("runtime: duplicate task id " + std::to_string(tasks[i].id));
    plan.stage_tasks[tasks[i].stage].push_back(static_cast<std::int64_t>(i));
  }
  std::unordered_set<std::int64_t> seen;
  for (const auto& [stage, idx] : plan.stage_tasks) {
    plan.stages.push_back(stage);
    for (auto i : idx)
      for (const auto& s : tasks[static_cast<std::size_t>(i)].sources)
        if (seen.insert(s.id).second) plan.initial.push_back(s);
  }
  return plan;
}

/// Stage snapshot sorted by id, for neighbor queries.
struct Snapshot {
  std::vector<SourceModel> blocks;
  double max_scale = 0.0;

  explicit Snapshot(const ParamStore& store) {
    for (auto& s : store.snapshot()) blocks.push_back(std::move(s.block));
    std::sort(blocks.begin(), blocks.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (const auto& b : blocks) max_scale = std::max(max_scale, b.anchor.scale);
  }

  std::vector<SourceModel> neighbors(const Task& task, double radius) const {
    std::unordered_set<std::int64_t> own;
    for (const auto& s : task.sources) own.insert(s.id);
    const SkyRegion reach = task.region.expanded(2.0 * radius);
    std::vector<SourceModel> out;
    for (const auto& b : blocks)
      if (!own.count(b.id) && reach.contains_closed(b.anchor.center)) out.push_back(b);
    return out;
  }
};

double psf_extent(std::span<const ImagePatch> images) {
  double psf = 0.0;
  for (const auto& p : images) psf = std::max(psf, p.meta.psf_sigma * p.meta.pixel_scale);
  return psf;
}

double footprint_radius(double psf, double max_scale, const ModelConfig& model) {
  return model.active_radius_k * (psf + max_scale);
}

struct Loaded {
  std::vector<ImagePatch> images;
  std::string error;
};

Loaded load_images(const Task& task, const ImageLoader& loader) {
  Loaded out;
  try {
    for (auto id : task.image_ids) out.images.push_back(loader(id));
  } catch (const std::exception& e) {
    out.images.clear();
    out.error = "task " + std::to_string(task.id) + ": " + e.what();
  }
  return out;
}

/// Executes one task against images already in memory and commits the
/// results. Returns an error message on failure.
std::string execute(const Task& task, const Loaded& loaded, std::span<const SourceModel> own,
                    std::span<const SourceModel> fixed, const TaskExecutor& executor, std::uint64_t seed,
                    TaskOutput& out) {
  if (!loaded.error.empty()) return loaded.error;
  try {
    Task current = task;
    current.sources.assign(own.begin(), own.end());
    out = executor(current, loaded.images, fixed, seed);
    if (out.sources.size() != current.sources.size())
      return "task " + std::to_string(task.id) + ": executor returned " + std::to_string(out.sources.size()) +
             " sources for " + std::to_string(current.sources.size());
  } catch (const std::exception& e) {
    return "task " + std::to_string(task.id) + ": " + e.what();
  }
  return {};
}

std::vector<SourceModel> sorted_blocks(const ParamStore& store) {
  std::vector<SourceModel> out;
  for (auto& s : store.snapshot()) out.push_back(std::move(s.block));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

void finish_result(RunResult& result, const ParamStore& store, const RuntimeConfig& config) {
  result.sources = sorted_blocks(store);
  std::sort(result.failures.begin(), result.failures.end(),
            [](const auto& a, const auto& b) { return a.task_id < b.task_id; });
  for (const auto& e : result.trace.entries) result.metrics.active_pixel_visits += e.visits;
  result.metrics.flops_per_visit = config.accounting.flops_per_visit;
  result.metrics.overhead_factor = config.accounting.overhead_factor;
  result.metrics.flops_estimate = flops_estimate(result.metrics.active_pixel_visits, config.accounting);
}

// --------------------------------------------------------------- in-process

RunResult run_in_process(const RunPlan& plan, const ImageLoader& loader, const TaskExecutor& executor,
                         const RuntimeConfig& config,
                         const std::function<double(std::span<const SourceModel>)>& stage_value) {
  const int P = config.processes;
  const double t0 = monotonic_seconds();
  RunResult result;
  result.trace.processes = P;
  ParamStore store(plan.initial);
  DtreeScheduler sched(P, config.fan_out, config.policy);
  std::vector<Stopwatch> watches(static_cast<std::size_t>(P), Stopwatch(t0));
  std::mutex result_mu;

  for (int stage : plan.stages) {
    const Snapshot snap(store);
    sched.load(plan.stage_tasks.at(stage));
    const double stage_start = monotonic_seconds();
    for (auto& w : watches) w.switch_at(stage_start, Stopwatch::other);
    StageWindow window{stage, stage_start - t0, stage_start - t0};
    std::vector<double> finished(static_cast<std::size_t>(P), stage_start);

    const auto process_loop = [&](int p) {
      Stopwatch& sw = watches[static_cast<std::size_t>(p)];
      auto cur = sched.next(p);
      std::future<Loaded> pending;
      if (cur) {
        const Task* t = &plan.tasks[static_cast<std::size_t>(*cur)];
        pending = std::async(std::launch::async, [t, &loader] { return load_images(*t, loader); });
      }
      while (cur) {
        const Task& task = plan.tasks[static_cast<std::size_t>(*cur)];
        const double wait_start = sw.switch_to(Stopwatch::loading);
        const Loaded loaded = pending.get();
        const double ready = sw.switch_to(Stopwatch::other);
        const auto nxt = sched.next(p);
        if (nxt) {
          const Task* t = &plan.tasks[static_cast<std::size_t>(*nxt)];
          pending = std::async(std::launch::async, [t, &loader] { return load_images(*t, loader); });
        }
        std::vector<SourceModel> own;
        for (const auto& s : task.sources) own.push_back(store.get(s.id).block);
        const auto fixed = snap.neighbors(task, footprint_radius(psf_extent(loaded.images), snap.max_scale, config.model));
        TraceEntry e;
        e.task_id = task.id;
        e.stage = stage;
        e.process = p;
        e.load_wait = ready - wait_start;
        e.start = sw.switch_to(Stopwatch::processing) - t0;
        TaskOutput out;
        e.error = execute(task, loaded, own, fixed, executor, task_seed(config.seed, task.id, stage), out);
        e.ok = e.error.empty();
        if (e.ok) {
          for (const auto& s : out.sources) store.put(s.id, s);
          e.visits = out.visits;
        }
        e.end = sw.switch_to(Stopwatch::other) - t0;
        {
          std::lock_guard lock(result_mu);
          if (!e.ok) result.failures.push_back({task.id, e.error});
          result.trace.entries.push_back(std::move(e));
        }
        cur = nxt;
      }
      finished[static_cast<std::size_t>(p)] = sw.switch_to(Stopwatch::imbalance);
    };

    if (P == 1) {
      process_loop(0);
    } else {
      std::vector<std::thread> threads;
      for (int p = 0; p < P; ++p) threads.emplace_back(process_loop, p);
      for (auto& t : threads) t.join();
    }
    const double joined = monotonic_seconds();
    for (auto& w : watches) w.switch_at(joined, Stopwatch::other);
    for (const auto& e : result.trace.entries)
      if (e.stage == stage) window.end = std::max(window.end, e.end);
    result.trace.stages.push_back(window);
    if (stage_value) {
      const auto blocks = sorted_blocks(store);
      result.stage_values.push_back(stage_value(blocks));
    }
  }
  const double t1 = monotonic_seconds();
  for (auto& w : watches) {
    w.switch_at(t1, Stopwatch::other);
    result.metrics.processes.push_back(w.times());
  }
  result.trace.wall_seconds = t1 - t0;
  result.metrics.wall_seconds = t1 - t0;
  std::stable_sort(result.trace.entries.begin(), result.trace.entries.end(),
                   [](const auto& a, const auto& b) { return a.start < b.start; });
  result.scheduler = sched.stats();
  finish_result(result, store, config);
  return result;
}

// ------------------------------------------------------------ socket mode

enum MessageType : std::uint8_t {
  kNext = 1,
  kAssign = 2,
  kNone = 3,
  kBarrier = 4,
  kStage = 5,
  kShutdown = 6,
  kFetch = 7,
  kBlocks = 8,
  kDone = 9,
  kTimes = 10,
};

class Writer {
 public:
  explicit Writer(std::uint8_t type) { buf_.push_back(static_cast<char>(type)); }
  Writer& u8(std::uint8_t v) {
    buf_.push_back(static_cast<char>(v));
    return *this;
  }
  Writer& u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    return *this;
  }
  Writer& u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    return *this;
  }
  Writer& i64(std::int64_t v) { return u64(static_cast<std::uint64_t>(v)); }
  Writer& i32(std::int32_t v) { return u32(static_cast<std::uint32_t>(v)); }
  Writer& f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    return u64(u);
  }
  Writer& bytes(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
    return *this;
  }
  Writer& block(const SourceModel& s, std::uint64_t stamp) {
    i64(s.id).u64(stamp).f64(s.anchor.center.x).f64(s.anchor.center.y).f64(s.anchor.scale);
    for (double v : source_fields(s)) f64(v);
    return *this;
  }
  const std::string& payload() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string payload) : buf_(std::move(payload)) {}
  std::uint8_t type() const { return static_cast<std::uint8_t>(buf_.at(0)); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() {
    const std::uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
  std::string bytes() {
    const std::uint32_t n = u32();
    return std::string(take(n), n);
  }
  SourceModel block(std::uint64_t* stamp = nullptr) {
    SourceModel s;
    s.id = i64();
    const std::uint64_t st = u64();
    if (stamp) *stamp = st;
    s.anchor.center.x = f64();
    s.anchor.center.y = f64();
    s.anchor.scale = f64();
    std::array<double, kSourceFields> v;
    for (auto& x : v) x = f64();
    set_source_fields(v, s);
    return s;
  }

 private:
  const char* take(std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError("runtime message: truncated frame");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string buf_;
  std::size_t pos_ = 1;
};

void write_all(int fd, const char* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::write(fd, data, n);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("runtime socket write: ") + std::strerror(errno));
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
}

bool read_all(int fd, char* data, std::size_t n) {
  while (n > 0) {
    const ssize_t r = ::read(fd, data, n);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("runtime socket read: ") + std::strerror(errno));
    }
    if (r == 0) return false;
    data += r;
    n -= static_cast<std::size_t>(r);
  }
  return true;
}

void send(int fd, const Writer& w) {
  const auto& p = w.payload();
  const auto n = static_cast<std::uint32_t>(p.size());
  char head[4];
  for (int i = 0; i < 4; ++i) head[i] = static_cast<char>((n >> (8 * i)) & 0xff);
  std::string frame(head, 4);
  frame += p;
  write_all(fd, frame.data(), frame.size());
}

std::optional<Reader> receive(int fd) {
  unsigned char head[4];
  if (!read_all(fd, reinterpret_cast<char*>(head), 4)) return std::nullopt;
  std::uint32_t n = 0;
  for (int i = 0; i < 4; ++i) n |= static_cast<std::uint32_t>(head[i]) << (8 * i);
  if (n == 0) throw FormatError("runtime message: empty frame");
  std::string payload(n, '\0');
  if (!read_all(fd, payload.data(), n)) return std::nullopt;
  return Reader(std::move(payload));
}

Reader expect(int fd) {
  auto r = receive(fd);
  if (!r) throw std::runtime_error("runtime socket: peer closed the connection");
  return std::move(*r);
}

/// Worker side of the socket transport. Mirrors the in-process loop.
void worker_main(int fd, int p, double t0, const RunPlan& plan, const ImageLoader& loader,
                 const TaskExecutor& executor, const RuntimeConfig& config) {
  Stopwatch sw(t0);
  const auto ask = [&]() -> std::optional<std::int64_t> {
    send(fd, Writer(kNext));
    Reader r = expect(fd);
    if (r.type() == kAssign) return r.i64();
    if (r.type() == kNone) return std::nullopt;
    throw FormatError("runtime worker: unexpected reply to NEXT");
  };
  const auto start_load = [&](std::int64_t idx) {
    const Task* t = &plan.tasks[static_cast<std::size_t>(idx)];
    return std::async(std::launch::async, [t, &loader] { return load_images(*t, loader); });
  };
  // The first stage starts right away; later stages wait for STAGE.
  for (std::size_t s = 0; s < plan.stages.size(); ++s) {
    const int stage = plan.stages[s];
    auto cur = ask();
    std::future<Loaded> pending;
    if (cur) pending = start_load(*cur);
    while (cur) {
      const Task& task = plan.tasks[static_cast<std::size_t>(*cur)];
      const double wait_start = sw.switch_to(Stopwatch::loading);
      const Loaded loaded = pending.get();
      const double ready = sw.switch_to(Stopwatch::other);
      const auto nxt = ask();
      if (nxt) pending = start_load(*nxt);
      send(fd, Writer(kFetch).i64(*cur).f64(psf_extent(loaded.images)));
      Reader blocks = expect(fd);
      if (blocks.type() != kBlocks) throw FormatError("runtime worker: unexpected reply to FETCH");
      std::vector<SourceModel> own, fixed;
      for (std::uint32_t n = blocks.u32(), i = 0; i < n; ++i) own.push_back(blocks.block());
      for (std::uint32_t n = blocks.u32(), i = 0; i < n; ++i) fixed.push_back(blocks.block());
      const double start = sw.switch_to(Stopwatch::processing);
      TaskOutput out;
      const std::string error =
          execute(task, loaded, own, fixed, executor, task_seed(config.seed, task.id, stage), out);
      const double end = sw.switch_to(Stopwatch::other);
      Writer done(kDone);
      done.i64(*cur).f64(start).f64(end).f64(ready - wait_start).u64(error.empty() ? out.visits : 0);
      done.u8(error.empty() ? 1 : 0).bytes(error);
      done.u32(error.empty() ? static_cast<std::uint32_t>(out.sources.size()) : 0);
      if (error.empty())
        for (const auto& b : out.sources) done.block(b, 0);
      send(fd, done);
      cur = nxt;
    }
    sw.switch_to(Stopwatch::imbalance);
    send(fd, Writer(kBarrier));
    Reader r = expect(fd);
    sw.switch_to(Stopwatch::other);
    if (r.type() == kShutdown) break;
    if (r.type() != kStage) throw FormatError("runtime worker: unexpected reply to BARRIER");
  }
  const auto& t = sw.times();
  send(fd, Writer(kTimes).f64(t.task_processing).f64(t.image_loading).f64(t.load_imbalance).f64(t.other));
  (void)p;
}

RunResult run_socket(const RunPlan& plan, const ImageLoader& loader, const TaskExecutor& executor,
                     const RuntimeConfig& config,
                     const std::function<double(std::span<const SourceModel>)>& stage_value) {
  const int P = config.processes;
  const double t0 = monotonic_seconds();
  RunResult result;
  result.trace.processes = P;
  ParamStore store(plan.initial);
  DtreeScheduler sched(P, config.fan_out, config.policy);

  std::vector<int> fds;
  std::vector<pid_t> pids;
  const auto cleanup = [&] {
    for (int fd : fds) ::close(fd);
    for (pid_t pid : pids) {
      ::kill(pid, SIGKILL);
      ::waitpid(pid, nullptr, 0);
    }
  };
  for (int p = 0; p < P; ++p) {
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) != 0) {
      cleanup();
      throw std::runtime_error(std::string("runtime: socketpair failed: ") + std::strerror(errno));
    }
    const pid_t pid = ::fork();
    if (pid < 0) {
      ::close(sv[0]);
      ::close(sv[1]);
      cleanup();
      throw std::runtime_error(std::string("runtime: fork failed: ") + std::strerror(errno));
    }
    if (pid == 0) {
      ::close(sv[0]);
      for (int fd : fds) ::close(fd);
      int code = 0;
      try {
        worker_main(sv[1], p, t0, plan, loader, executor, config);
      } catch (...) {
        code = 1;
      }
      ::close(sv[1]);
      ::_exit(code);
    }
    ::close(sv[1]);
    fds.push_back(sv[0]);
    pids.push_back(pid);
  }

  try {
    std::size_t stage_pos = 0;
    auto snap = std::make_unique<Snapshot>(store);
    sched.load(plan.stage_tasks.at(plan.stages[0]));
    StageWindow window{plan.stages[0], monotonic_seconds() - t0, monotonic_seconds() - t0};
    std::vector<bool> at_barrier(static_cast<std::size_t>(P), false), finished(static_cast<std::size_t>(P), false);
    int barrier_count = 0, finished_count = 0;
    result.metrics.processes.resize(static_cast<std::size_t>(P));

    while (finished_count < P) {
      std::vector<pollfd> polls;
      for (int p = 0; p < P; ++p)
        if (!finished[static_cast<std::size_t>(p)]) polls.push_back({fds[static_cast<std::size_t>(p)], POLLIN, 0});
      if (::poll(polls.data(), polls.size(), -1) < 0) {
        if (errno == EINTR) continue;
        throw std::runtime_error(std::string("runtime: poll failed: ") + std::strerror(errno));
      }
      for (const auto& pl : polls) {
        if (!(pl.revents & (POLLIN | POLLHUP | POLLERR))) continue;
        const int p = static_cast<int>(std::find(fds.begin(), fds.end(), pl.fd) - fds.begin());
        auto msg = receive(pl.fd);
        if (!msg) throw std::runtime_error("runtime: worker process " + std::to_string(p) + " exited unexpectedly");
        Reader& r = *msg;
        switch (r.type()) {
          case kNext: {
            const auto id = sched.next(p);
            send(pl.fd, id ? Writer(kAssign).i64(*id) : Writer(kNone));
            break;
          }
          case kFetch: {
            const auto idx = r.i64();
            const double radius = footprint_radius(r.f64(), snap->max_scale, config.model);
            const Task& task = task_at(plan, idx);
            Writer w(kBlocks);
            w.u32(static_cast<std::uint32_t>(task.sources.size()));
            for (const auto& s : task.sources) {
              const auto st = store.get(s.id);
              w.block(st.block, st.stamp);
            }
            const auto fixed = snap->neighbors(task, radius);
            w.u32(static_cast<std::uint32_t>(fixed.size()));
            for (const auto& s : fixed) w.block(s, 0);
            send(pl.fd, w);
            break;
          }
          case kDone: {
            const auto idx = r.i64();
            const Task& task = task_at(plan, idx);
            TraceEntry e;
            e.task_id = task.id;
            e.stage = task.stage;
            e.process = p;
            e.start = r.f64() - t0;
            e.end = r.f64() - t0;
            e.load_wait = r.f64();
            e.visits = r.u64();
            e.ok = r.u8() != 0;
            e.error = r.bytes();
            for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
              const SourceModel b = r.block();
              store.put(b.id, b);
            }
            if (!e.ok) result.failures.push_back({task.id, e.error});
            window.end = std::max(window.end, e.end);
            result.trace.entries.push_back(std::move(e));
            break;
          }
          case kBarrier: {
            at_barrier[static_cast<std::size_t>(p)] = true;
            if (++barrier_count < P) break;
            result.trace.stages.push_back(window);
            if (stage_value) result.stage_values.push_back(stage_value(sorted_blocks(store)));
            barrier_count = 0;
            std::fill(at_barrier.begin(), at_barrier.end(), false);
            if (++stage_pos < plan.stages.size()) {
              snap = std::make_unique<Snapshot>(store);
              sched.load(plan.stage_tasks.at(plan.stages[stage_pos]));
              const double now = monotonic_seconds() - t0;
              window = {plan.stages[stage_pos], now, now};
              for (int fd : fds) send(fd, Writer(kStage).i32(plan.stages[stage_pos]));
            } else {
              for (int fd : fds) send(fd, Writer(kShutdown));
            }
            break;
          }
          case kTimes: {
            auto& t = result.metrics.processes[static_cast<std::size_t>(p)];
            t.task_processing = r.f64();
            t.image_loading = r.f64();
            t.load_imbalance = r.f64();
            t.other = r.f64();
            finished[static_cast<std::size_t>(p)] = true;
            ++finished_count;
            break;
          }
          default:
            throw FormatError("runtime: unknown message type " + std::to_string(r.type()));
        }
      }
    }
  } catch (...) {
    cleanup();
    throw;
  }
  for (int fd : fds) ::close(fd);
  fds.clear();
  for (std::size_t p = 0; p < pids.size(); ++p) {
    int status = 0;
    ::waitpid(pids[p], &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
      throw std::runtime_error("runtime: worker process " + std::to_string(p) + " failed");
  }
  pids.clear();
  const double t1 = monotonic_seconds();
  // Worker clocks stop when they report; the tail up to now is other.
  for (auto& t : result.metrics.processes) t.other += (t1 - t0) - t.total();
  result.trace.wall_seconds = t1 - t0;
  result.metrics.wall_seconds = t1 - t0;
  std::stable_sort(result.trace.entries.begin(), result.trace.entries.end(),
                   [](const auto& a, const auto& b) { return a.start < b.start; });
  result.scheduler = sched.stats();
  finish_result(result, store, config);
  return result;
}

}  // namespace

RunResult run_tasks(std::span<const Task> tasks, const ImageLoader& loader, const TaskExecutor& executor,
                    const RuntimeConfig& config,
                    const std::function<double(std::span<const SourceModel>)>& stage_value) {
  config.validate();
  if (tasks.empty()) throw ValidationError("runtime: no tasks");
  if (!loader || !executor) throw ValidationError("runtime: loader and executor are required");
  const RunPlan plan = plan_run(tasks);
  if (config.transport == Transport::socket) return run_socket(plan, loader, executor, config, stage_value);
  return run_in_process(plan, loader, executor, config, stage_value);
}

std::string metrics_json(const RunResult& result) {
  using nlohmann::json;
  json doc;
  doc["wall_seconds"] = result.metrics.wall_seconds;
  doc["active_pixel_visits"] = result.metrics.active_pixel_visits;
  doc["flops_per_visit"] = result.metrics.flops_per_visit;
  doc["overhead_factor"] = result.metrics.overhead_factor;
  doc["flops_estimate"] = result.metrics.flops_estimate;
  json procs = json::array();
  for (std::size_t p = 0; p < result.metrics.processes.size(); ++p) {
    const auto& t = result.metrics.processes[p];
    procs.push_back({{"process", p},
                     {"task_processing", t.task_processing},
                     {"image_loading", t.image_loading},
                     {"load_imbalance", t.load_imbalance},
                     {"other", t.other}});
  }
  doc["processes"] = procs;
  doc["scheduler"] = {{"requests", result.scheduler.requests},
                      {"messages", result.scheduler.messages},
                      {"max_messages_per_request", result.scheduler.max_messages_per_request},
                      {"refusals", result.scheduler.refusals}};
  doc["stage_values"] = result.stage_values;
  json failures = json::array();
  for (const auto& f : result.failures) failures.push_back({{"task_id", f.task_id}, {"message", f.message}});
  doc["failures"] = failures;
  json trace = json::array();
  for (const auto& e : result.trace.entries) {
    trace.push_back({{"task_id", e.task_id},
                     {"stage", e.stage},
                     {"process", e.process},
                     {"start", e.start},
                     {"end", e.end},
                     {"load_wait", e.load_wait},
                     {"visits", e.visits},
                     {"ok", e.ok},
                     {"error", e.error}});
  }
  doc["trace"] = trace;
  json stages = json::array();
  for (const auto& w : result.trace.stages) stages.push_back({{"stage", w.stage}, {"start", w.start}, {"end", w.end}});
  doc["stages"] = stages;
  return doc.dump(2) + "\n";
}

}  // namespace skycat
