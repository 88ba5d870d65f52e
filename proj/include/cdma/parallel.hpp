#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cdma {

namespace detail {
inline thread_local int parallel_depth = 0;
}

/// Fixed-size worker pool behind parallel_for. Work is split into one
/// contiguous chunk per worker, so the partition (and therefore every
/// floating-point reduction order) is independent of scheduling.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool(default_threads());
    return pool;
  }

  static int default_threads() {
    if (const char* env = std::getenv("CDMA_THREADS")) {
      int n = std::atoi(env);
      if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  /// Runs fn(chunk_begin, chunk_end) across the pool and waits. The calling
  /// thread executes chunk 0. Nested calls run serially.
  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    int parts = static_cast<int>(std::min<int64_t>(size(), n));
    if (parts == 1 || detail::parallel_depth > 0) {
      ++detail::parallel_depth;
      fn(0, n);
      --detail::parallel_depth;
      return;
    }
    {
      std::unique_lock<std::mutex> lk(mu_);
      job_ = &fn;
      job_n_ = n;
      job_parts_ = parts;
      pending_ = parts - 1;
      ++epoch_;
    }
    cv_start_.notify_all();
    ++detail::parallel_depth;
    exec_chunk(0);
    --detail::parallel_depth;
    std::unique_lock<std::mutex> lk(mu_);
    cv_done_.wait(lk, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
      ++epoch_;
    }
    cv_start_.notify_all();
    for (auto& t : workers_) t.join();
  }

 private:
  explicit ThreadPool(int threads) {
    for (int i = 1; i < threads; ++i) {
      workers_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  void exec_chunk(int part) {
    int64_t chunk = (job_n_ + job_parts_ - 1) / job_parts_;
    int64_t b = part * chunk;
    int64_t e = std::min<int64_t>(b + chunk, job_n_);
    if (b < e) (*job_)(b, e);
  }

  void worker_loop(int index) {
    uint64_t seen = 0;
    for (;;) {
      bool mine = false;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_start_.wait(lk, [&] { return epoch_ != seen; });
        seen = epoch_;
        if (stop_) return;
        mine = index < job_parts_;
      }
      if (!mine) continue;  // fewer chunks than workers this round
      ++detail::parallel_depth;
      exec_chunk(index);
      --detail::parallel_depth;
      std::unique_lock<std::mutex> lk(mu_);
      if (--pending_ == 0) cv_done_.notify_all();
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_start_, cv_done_;
  const std::function<void(int64_t, int64_t)>* job_ = nullptr;
  int64_t job_n_ = 0;
  int job_parts_ = 0;
  int pending_ = 0;
  uint64_t epoch_ = 0;
  bool stop_ = false;
};

/// Deterministic data-parallel loop: [0, n) is split into contiguous chunks,
/// fn(begin, end) is invoked once per chunk. Results must depend only on the
/// element index, never on the chunking.
inline void parallel_for(int64_t n,
                         const std::function<void(int64_t, int64_t)>& fn) {
  ThreadPool::instance().run(n, fn);
}

}  // namespace cdma
