#include "skycat/coordinator.hpp"

#include <algorithm>
#include <atomic>
#include <barrier>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <string>
#include <thread>

namespace skycat {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

bool overlap(const Footprint& fa, const Footprint& fb) {
  if (fa.empty() || fb.empty()) return false;
  const int c0 = std::max(fa.col_lo(), fb.col_lo()), c1 = std::min(fa.col_hi(), fb.col_hi());
  const int r0 = std::max(fa.row_lo(), fb.row_lo()), r1 = std::min(fa.row_hi(), fb.row_hi());
  for (int row = r0; row <= r1; ++row) {
    for (int col = c0; col <= c1; ++col) {
      if (fa.contains(col, row) && fb.contains(col, row)) return true;
    }
  }
  return false;
}

bool center_covered(const SourceModel& s, const ImagePatch& p) {
  const Point2 u = p.meta.to_pixel(s.position);
  return u.x >= -0.5 && u.x < p.width - 0.5 && u.y >= -0.5 && u.y < p.height - 0.5;
}

}  // namespace

bool ConflictGraph::has_edge(std::size_t i, std::size_t j) const {
  if (i >= adjacency.size()) return false;
  return std::binary_search(adjacency[i].begin(), adjacency[i].end(), j);
}

std::size_t ConflictGraph::edge_count() const {
  std::size_t n = 0;
  for (const auto& a : adjacency) n += a.size();
  return n / 2;
}

bool footprints_overlap(const SourceModel& a, const SourceModel& b, const ImagePatch& patch,
                        const ModelConfig& config) {
  return overlap(anchored_footprint(a, patch, config), anchored_footprint(b, patch, config));
}

ConflictGraph build_conflict_graph(std::span<const SourceModel> sources, std::span<const ImagePatch> patches,
                                   const ModelConfig& config) {
  const std::size_t n = sources.size();
  ConflictGraph g;
  g.adjacency.assign(n, {});
  std::vector<Footprint> fps(n);
  std::vector<std::size_t> order(n);
  for (const auto& patch : patches) {
    for (std::size_t i = 0; i < n; ++i) fps[i] = anchored_footprint(sources[i], patch, config);
    order.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (!fps[i].empty()) order.push_back(i);
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return fps[a].col_lo() != fps[b].col_lo() ? fps[a].col_lo() < fps[b].col_lo() : a < b;
    });
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const std::size_t i = order[oi];
      for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
        const std::size_t j = order[oj];
        if (fps[j].col_lo() > fps[i].col_hi()) break;
        if (overlap(fps[i], fps[j])) {
          g.adjacency[i].push_back(j);
          g.adjacency[j].push_back(i);
        }
      }
    }
  }
  for (auto& a : g.adjacency) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  return g;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(splitmix64(seed));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

std::uint64_t epoch_seed(std::uint64_t seed, std::uint64_t epoch) {
  return splitmix64(splitmix64(seed) ^ (epoch + 0x632be59bd9b4e019ULL));
}

EpochPlan plan_epoch(const ConflictGraph& graph, std::uint64_t seed, std::size_t batch_size) {
  if (batch_size < 1) throw ValidationError("plan_epoch: batch_size must be >= 1");
  const std::size_t n = graph.size();
  const std::vector<std::size_t> perm = seeded_permutation(n, seed);
  std::vector<std::size_t> slot(n, SIZE_MAX);

  EpochPlan plan;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    const std::size_t m = end - begin;
    for (std::size_t k = 0; k < m; ++k) slot[perm[begin + k]] = k;
    UnionFind uf(m);
    for (std::size_t k = 0; k < m; ++k) {
      for (std::size_t nb : graph.adjacency[perm[begin + k]]) {
        if (slot[nb] != SIZE_MAX) uf.unite(k, slot[nb]);
      }
    }
    // Roots are the smallest slot in each component, so components come out
    // ordered by their first member.
    std::vector<std::size_t> comp_of(m, SIZE_MAX);
    std::vector<std::vector<std::size_t>> comps;
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t r = uf.find(k);
      if (comp_of[r] == SIZE_MAX) {
        comp_of[r] = comps.size();
        comps.emplace_back();
      }
      comps[comp_of[r]].push_back(perm[begin + k]);
    }
    for (std::size_t k = 0; k < m; ++k) slot[perm[begin + k]] = SIZE_MAX;
    plan.batches.push_back(std::move(comps));
  }
  return plan;
}

void CoordinatorConfig::validate() const {
  if (!(epoch_tol >= 0.0)) throw ValidationError("coordinator config: epoch_tol must be >= 0");
  if (max_epochs < 1) throw ValidationError("coordinator config: max_epochs must be >= 1");
  solver.validate();
  if (!(model.active_radius_k >= 0.0)) throw ValidationError("coordinator config: active_radius_k must be >= 0");
}

TaskResult run_task(std::span<const SourceModel> sources, std::span<const SourceModel> fixed,
                    std::span<const ImagePatch> patches, const Priors& priors, const CoordinatorConfig& config,
                    int workers, std::uint64_t seed) {
  config.validate();
  if (workers < 1) throw ValidationError("run_task: workers must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = sources.size();

  for (const auto& s : sources) {
    s.validate();
    const bool covered = std::any_of(patches.begin(), patches.end(),
                                     [&](const ImagePatch& p) { return center_covered(s, p); });
    if (!covered) throw ValidationError("run_task: source " + std::to_string(s.id) + " is not covered by any patch");
  }

  std::vector<SourceModel> all(sources.begin(), sources.end());
  all.insert(all.end(), fixed.begin(), fixed.end());
  std::vector<ParamVector> theta(n);
  for (std::size_t i = 0; i < n; ++i) {
    theta[i] = pack(all[i]);
    unpack(theta[i], all[i]);
  }

  const ConflictGraph full = build_conflict_graph(all, patches, config.model);
  ConflictGraph local;
  local.adjacency.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j : full.adjacency[i]) {
      if (j < n) local.adjacency[i].push_back(j);
    }
  }
  const std::size_t batch_size =
      config.batch_size > 0 ? config.batch_size : 4 * static_cast<std::size_t>(workers);

  TaskResult result;
  TaskStats& stats = result.stats;
  if (config.track_elbo) stats.elbo_history.push_back(task_elbo(all, patches, priors, config.model));

  struct WorkerTotals {
    std::int64_t solves = 0, iterations = 0, unconverged = 0;
    std::uint64_t visits = 0;
    std::vector<ExecutionRecord> log;
  };
  std::vector<WorkerTotals> totals(workers);
  std::atomic<std::uint64_t> sequence{0};
  int current_epoch = 0;

  const auto solve_source = [&](std::size_t i, int w) {
    WorkerTotals& tot = totals[w];
    ExecutionRecord rec;
    if (config.record_log) {
      rec.source = i;
      rec.worker = w;
      rec.epoch = current_epoch;
      rec.start_seq = sequence.fetch_add(1);
    }
    const BlockObjective block(all, patches, priors, i, full.adjacency[i], config.model);
    const MaximizeResult r = maximize_block([&](const Eigen::VectorXd& x) { return block.evaluate(x); }, theta[i],
                                            config.solver,
                                            [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
                                              return block.difference(a, b);
                                            });
    theta[i] = r.x;
    unpack(theta[i], all[i]);
    ++tot.solves;
    tot.iterations += r.state.iteration;
    tot.unconverged += r.state.converged ? 0 : 1;
    tot.visits += static_cast<std::uint64_t>(r.state.evaluations) * block.active_pixel_count();
    if (config.record_log) {
      rec.end_seq = sequence.fetch_add(1);
      tot.log.push_back(rec);
    }
  };

  // Worker pool: every batch is bracketed by two barrier phases; workers
  // claim components from a shared counter in between.
  const std::vector<std::vector<std::size_t>>* components = nullptr;
  std::atomic<std::size_t> next_component{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  bool stop = false;
  std::barrier sync(workers);

  const auto drain = [&](int w) {
    while (!failed.load()) {
      const std::size_t c = next_component.fetch_add(1);
      if (c >= components->size()) break;
      try {
        for (std::size_t i : (*components)[c]) solve_source(i, w);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        failed.store(true);
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) {
    pool.emplace_back([&, w] {
      while (true) {
        sync.arrive_and_wait();
        if (stop) return;
        drain(w);
        sync.arrive_and_wait();
      }
    });
  }
  const auto shutdown = [&] {
    stop = true;
    if (workers > 1) sync.arrive_and_wait();
    for (auto& t : pool) t.join();
  };

  try {
    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
      current_epoch = epoch;
      const EpochPlan plan = plan_epoch(local, epoch_seed(seed, static_cast<std::uint64_t>(epoch)), batch_size);
      const std::vector<ParamVector> before = theta;
      for (const auto& batch : plan.batches) {
        components = &batch;
        next_component.store(0);
        if (workers > 1) sync.arrive_and_wait();
        drain(0);
        if (workers > 1) sync.arrive_and_wait();
        if (failed.load()) std::rethrow_exception(error);
      }
      double change = 0.0;
      for (std::size_t i = 0; i < n; ++i) change = std::max(change, (theta[i] - before[i]).cwiseAbs().maxCoeff());
      ++stats.epochs;
      stats.max_change.push_back(change);
      if (config.track_elbo) stats.elbo_history.push_back(task_elbo(all, patches, priors, config.model));
      if (change < config.epoch_tol) break;
    }
  } catch (...) {
    shutdown();
    throw;
  }
  shutdown();

  for (const auto& tot : totals) {
    stats.block_solves += tot.solves;
    stats.newton_iterations += tot.iterations;
    stats.unconverged_blocks += tot.unconverged;
    stats.active_pixel_visits += tot.visits;
    result.log.insert(result.log.end(), tot.log.begin(), tot.log.end());
  }
  std::sort(result.log.begin(), result.log.end(),
            [](const ExecutionRecord& a, const ExecutionRecord& b) { return a.start_seq < b.start_seq; });
  result.sources.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
  stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::size_t audit_execution_log(const std::vector<ExecutionRecord>& log, const ConflictGraph& graph) {
  std::size_t violations = 0;
  for (std::size_t a = 0; a < log.size(); ++a) {
    for (std::size_t b = a + 1; b < log.size(); ++b) {
      const auto& x = log[a];
      const auto& y = log[b];
      const bool concurrent = x.start_seq < y.end_seq && y.start_seq < x.end_seq;
      if (concurrent && graph.has_edge(x.source, y.source)) ++violations;
    }
  }
  return violations;
}

}  // namespace skycat
