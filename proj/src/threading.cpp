#include "idol/threading.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace idol {
namespace {

int g_num_threads = []() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}();

// Minimal long-lived pool: workers block on a condition variable and execute
// one shared task (range splitter) per dispatch. Recreated if the configured
// size changes.
class Pool {
 public:
  explicit Pool(int workers) : stop_(false) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this]() { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return static_cast<int>(threads_.size()); }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn, int64_t grain) {
    const int workers = size() + 1;  // include the calling thread
    int64_t chunks = std::min<int64_t>(workers, std::max<int64_t>(1, n / std::max<int64_t>(1, grain)));
    if (chunks <= 1) {
      fn(0, n);
      return;
    }
    std::unique_lock<std::mutex> lk(mu_);
    task_fn_ = &fn;
    task_n_ = n;
    task_chunks_ = chunks;
    next_chunk_.store(0, std::memory_order_relaxed);
    done_chunks_.store(0, std::memory_order_relaxed);
    ++generation_;
    lk.unlock();
    cv_.notify_all();

    work_until_done();

    lk.lock();
    done_cv_.wait(lk, [this]() { return done_chunks_.load(std::memory_order_acquire) == task_chunks_; });
    task_fn_ = nullptr;
  }

 private:
  void run_chunks() {
    const std::function<void(int64_t, int64_t)>* fn = task_fn_;
    const int64_t n = task_n_;
    const int64_t chunks = task_chunks_;
    for (;;) {
      int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (c >= chunks) break;
      int64_t b = n * c / chunks;
      int64_t e = n * (c + 1) / chunks;
      if (b < e) (*fn)(b, e);
      if (done_chunks_.fetch_add(1, std::memory_order_acq_rel) + 1 == chunks) {
        std::lock_guard<std::mutex> lk(mu_);
        done_cv_.notify_all();
      }
    }
  }

  void work_until_done() { run_chunks(); }

  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&]() { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      lk.unlock();
      run_chunks();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> threads_;
  bool stop_;
  uint64_t generation_ = 0;
  const std::function<void(int64_t, int64_t)>* task_fn_ = nullptr;
  int64_t task_n_ = 0;
  int64_t task_chunks_ = 0;
  std::atomic<int64_t> next_chunk_{0};
  std::atomic<int64_t> done_chunks_{0};
};

Pool* g_pool = nullptr;
int g_pool_threads = 0;
std::mutex g_pool_mu;

Pool* pool_for(int threads) {
  std::lock_guard<std::mutex> lk(g_pool_mu);
  if (g_pool == nullptr || g_pool_threads != threads) {
    delete g_pool;
    g_pool = new Pool(threads - 1);
    g_pool_threads = threads;
  }
  return g_pool;
}

}  // namespace

int num_threads() { return g_num_threads; }

void set_num_threads(int n) { g_num_threads = std::max(1, n); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn, int64_t grain) {
  if (n <= 0) return;
  const int threads = g_num_threads;
  if (threads <= 1 || n <= grain) {
    fn(0, n);
    return;
  }
  pool_for(threads)->run(n, fn, grain);
}

}  // namespace idol
