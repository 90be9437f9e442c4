#pragma once

#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <queue>
#include <thread>
#include <vector>

namespace m2l2 {

// Minimal fixed-size worker pool. Work items write to disjoint slots, so
// results are deterministic regardless of scheduling; the pool only changes
// wall-clock time. With zero workers (or one requested thread) tasks run
// inline on the caller.
class ThreadPool {
public:
  explicit ThreadPool(std::size_t threads) {
    if (threads <= 1) return;
    for (std::size_t i = 0; i < threads; ++i)
      workers_.emplace_back([this] { worker_loop(); });
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  std::size_t size() const { return workers_.empty() ? 1 : workers_.size(); }

  // Runs fn(i) for i in [0, n); blocks until all complete. Exceptions from
  // tasks are rethrown on the caller (first one wins).
  void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    if (workers_.empty() || n == 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::mutex done_mu;
    std::condition_variable done_cv;
    std::size_t remaining = n;
    std::exception_ptr error;
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (std::size_t i = 0; i < n; ++i) {
        tasks_.push([&, i] {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard<std::mutex> dl(done_mu);
            if (!error) error = std::current_exception();
          }
          {
            std::lock_guard<std::mutex> dl(done_mu);
            --remaining;
          }
          done_cv.notify_one();
        });
      }
    }
    cv_.notify_all();
    std::unique_lock<std::mutex> dl(done_mu);
    done_cv.wait(dl, [&] { return remaining == 0; });
    if (error) std::rethrow_exception(error);
  }

private:
  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] { return stop_ || !tasks_.empty(); });
        if (stop_ && tasks_.empty()) return;
        task = std::move(tasks_.front());
        tasks_.pop();
      }
      task();
    }
  }

  std::vector<std::thread> workers_;
  std::queue<std::function<void()>> tasks_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
};

}  // namespace m2l2
