#include "camh/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace camh {
namespace {

int g_threads = 0;  // 0 = not resolved yet
thread_local bool t_inside_worker = false;

int resolve_threads() {
  if (g_threads > 0) return g_threads;
  int n = 0;
  if (const char* env = std::getenv("CAMH_THREADS")) n = std::atoi(env);
  if (n <= 0) n = int(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  g_threads = n;
  return n;
}

// Persistent pool: workers wait on a generation counter, execute the current
// job's chunk range, then report completion.
class Pool {
 public:
  static Pool& instance() {
    static Pool* p = new Pool();  // leaked: workers must outlive static dtors
    return *p;
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    const int nt = resolve_threads();
    if (n <= 0) return;
    if (nt == 1 || n < 2 || t_inside_worker || !lock_.try_lock()) {
      fn(0, n);
      return;
    }
    ensure_started(nt - 1);
    const int parts = nt;
    job_fn_ = &fn;
    job_n_ = n;
    job_parts_ = parts;
    // Every started worker decrements once per generation, whether or not it
    // owns a chunk, so count them all.
    pending_.store(int(threads_.size()), std::memory_order_relaxed);
    {
      std::lock_guard<std::mutex> lk(m_);
      ++generation_;
    }
    cv_.notify_all();
    // Caller executes chunk 0.
    run_chunk(0);
    // Wait for workers.
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [this] { return pending_.load(std::memory_order_acquire) == 0; });
    job_fn_ = nullptr;
    lock_.unlock();
  }

 private:
  void ensure_started(int workers) {
    while (int(threads_.size()) < workers) {
      const int id = int(threads_.size()) + 1;
      threads_.emplace_back([this, id] { worker_loop(id); });
      threads_.back().detach();  // workers live for the process lifetime
    }
  }

  void run_chunk(int part) {
    const int64_t n = job_n_;
    const int parts = job_parts_;
    const int64_t per = (n + parts - 1) / parts;
    const int64_t begin = per * part;
    const int64_t end = std::min<int64_t>(n, begin + per);
    if (begin < end) (*job_fn_)(begin, end);
  }

  void worker_loop(int id) {
    t_inside_worker = true;
    uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return generation_ != seen; });
        seen = generation_;
      }
      if (id < job_parts_) run_chunk(id);
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> lk(m_);
        done_cv_.notify_all();
      }
    }
  }

  std::mutex lock_;  // serializes jobs from concurrent submitters
  std::mutex m_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  uint64_t generation_ = 0;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0;
  int job_parts_ = 1;
  std::atomic<int> pending_{0};
};

}  // namespace

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  Pool::instance().run(n, fn);
}

int parallel_threads() { return resolve_threads(); }

void set_parallel_threads(int n) { g_threads = n <= 0 ? 0 : n; }

}  // namespace camh
