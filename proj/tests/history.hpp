#pragma once

// Concurrent get/put histories against a ParamStore and a checker for
// per-block linearizability.

#include "skycat/catalog_io.hpp"
#include "skycat/runtime.hpp"

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace oracle {

struct StoreOp {
  bool is_put = false;
  int thread = 0;
  std::int64_t block = 0;
  double tag = 0.0;  ///< value written, or first field read
  bool torn = false;
  std::uint64_t stamp = 0;
  std::uint64_t invoked = 0;  ///< global logical clock
  std::uint64_t returned = 0;
};

/// Block whose every field is derived from `tag`.
inline skycat::SourceModel tagged_block(std::int64_t id, double tag) {
  skycat::SourceModel s;
  s.id = id;
  std::array<double, skycat::kSourceFields> v;
  for (int k = 0; k < skycat::kSourceFields; ++k) v[k] = tag + 0.25 * k;
  skycat::set_source_fields(v, s);
  s.anchor = {{tag - 1.0, tag - 2.0}, tag - 3.0};
  return s;
}

/// Tag of a block read back, and whether its fields disagree.
inline double read_tag(const skycat::SourceModel& s, bool* torn) {
  const auto v = skycat::source_fields(s);
  const double tag = v[0];
  bool bad = s.anchor.center.x != tag - 1.0 || s.anchor.center.y != tag - 2.0 || s.anchor.scale != tag - 3.0;
  for (int k = 0; k < skycat::kSourceFields; ++k) bad = bad || v[k] != tag + 0.25 * k;
  *torn = bad;
  return tag;
}

/// Store of `blocks` keys 0..blocks-1, all with tag 0.
inline std::unique_ptr<skycat::ParamStore> tagged_store(int blocks) {
  std::vector<skycat::SourceModel> init;
  for (int b = 0; b < blocks; ++b) init.push_back(tagged_block(b, 0.0));
  return std::make_unique<skycat::ParamStore>(init);
}

/// Runs `threads` workers issuing `ops` random gets and puts in total over
/// the store's keys 0..blocks-1.
inline std::vector<StoreOp> run_store_history(skycat::ParamStore& store, int threads, int ops, int blocks,
                                              std::uint64_t seed) {
  std::atomic<std::uint64_t> clock{0};
  std::vector<std::vector<StoreOp>> logs(static_cast<std::size_t>(threads));
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      std::mt19937_64 rng(seed * 1000003 + static_cast<std::uint64_t>(t));
      std::uniform_int_distribution<int> pick(0, blocks - 1);
      std::bernoulli_distribution write(0.5);
      const int mine = ops / threads + (t < ops % threads ? 1 : 0);
      for (int i = 0; i < mine; ++i) {
        StoreOp op;
        op.thread = t;
        op.block = pick(rng);
        op.is_put = write(rng);
        op.invoked = clock.fetch_add(1);
        if (op.is_put) {
          op.tag = 1.0 + t * 1e6 + i;
          op.stamp = store.put(op.block, tagged_block(op.block, op.tag));
        } else {
          const auto got = store.get(op.block);
          op.tag = read_tag(got.block, &op.torn);
          op.stamp = got.stamp;
        }
        op.returned = clock.fetch_add(1);
        logs[static_cast<std::size_t>(t)].push_back(op);
      }
    });
  }
  for (auto& th : pool) th.join();
  std::vector<StoreOp> all;
  for (auto& l : logs) all.insert(all.end(), l.begin(), l.end());
  return all;
}

struct HistoryReport {
  std::size_t torn = 0;
  std::size_t violations = 0;
  std::string first;
};

/// Checks every block's history: reads are untorn and return the value of
/// the put with the same stamp (tag 0 for stamp 0); put stamps are 1..n;
/// stamp order respects real-time order of puts; a read never returns a
/// value older than a put that finished before it began, nor one from a put
/// that began after it finished.
inline HistoryReport check_history(const std::vector<StoreOp>& ops) {
  HistoryReport r;
  const auto fail = [&](const std::string& why) {
    if (r.violations++ == 0) r.first = why;
  };
  std::map<std::int64_t, std::map<std::uint64_t, const StoreOp*>> puts;
  for (const auto& op : ops) {
    if (!op.is_put) continue;
    if (!puts[op.block].emplace(op.stamp, &op).second) fail("duplicate stamp on block " + std::to_string(op.block));
  }
  for (const auto& [block, by_stamp] : puts) {
    std::uint64_t expect = 1;
    for (const auto& [stamp, op] : by_stamp) {
      if (stamp != expect++) fail("stamps not dense on block " + std::to_string(block));
    }
    for (const auto& [sa, a] : by_stamp)
      for (const auto& [sb, b] : by_stamp)
        if (a->returned < b->invoked && sa > sb) fail("put stamp order contradicts real time");
  }
  for (const auto& op : ops) {
    if (op.is_put) continue;
    if (op.torn) ++r.torn;
    const auto& by_stamp = puts[op.block];
    if (op.stamp == 0) {
      if (op.tag != 0.0) fail("stamp 0 with a written value");
    } else {
      const auto it = by_stamp.find(op.stamp);
      if (it == by_stamp.end()) {
        fail("read stamp never written");
        continue;
      }
      if (it->second->tag != op.tag) fail("read value differs from its put");
      if (it->second->invoked > op.returned) fail("read observed a future put");
    }
    for (const auto& [stamp, p] : by_stamp)
      if (p->returned < op.invoked && stamp > op.stamp) fail("read missed a completed put");
  }
  return r;
}

}  // namespace oracle
