#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <future>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fedbench {

/// Fixed-size FIFO worker pool.
class ThreadPool {
 public:
  explicit ThreadPool(std::size_t workers) {
    if (workers == 0) throw std::invalid_argument("ThreadPool: need at least one worker");
    for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this](std::stop_token st) { loop(st); });
  }

  ~ThreadPool() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
  }  // jthreads join

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  std::size_t size() const { return threads_.size(); }

  template <typename F>
  auto submit(F&& f) -> std::future<decltype(f())> {
    using R = decltype(f());
    auto task = std::make_shared<std::packaged_task<R()>>(std::forward<F>(f));
    auto fut = task->get_future();
    {
      std::lock_guard lock(mu_);
      queue_.emplace_back([task] { (*task)(); });
    }
    cv_.notify_one();
    return fut;
  }

 private:
  void loop(std::stop_token) {
    for (;;) {
      std::function<void()> job;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) return;
        job = std::move(queue_.front());
        queue_.pop_front();
      }
      job();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  bool stopping_ = false;
  std::vector<std::jthread> threads_;
};

template <typename T>
struct DispatchResult {
  std::vector<std::optional<T>> results;  // nullopt for dropped / failed tasks
  std::vector<std::int64_t> wall_ms;      // per task
  std::vector<std::size_t> dropped;       // indices over the timeout (enforced only)
  std::vector<std::size_t> failed;        // indices that threw
  std::vector<std::string> errors;        // messages for `failed`, same order
};

/// Runs every task on the pool and waits for all of them. With `enforce`,
/// a task whose own wall time exceeds `timeout_ms` has its result discarded
/// and is listed in `dropped`; without it nothing is dropped. Failures are
/// always treated as dropped.
template <typename T>
DispatchResult<T> dispatch_with_timeout(ThreadPool& pool, std::vector<std::function<T()>> tasks,
                                        std::optional<std::int64_t> timeout_ms, bool enforce) {
  struct Timed {
    std::optional<T> value;
    std::int64_t ms = 0;
    std::string error;
  };
  std::vector<std::future<Timed>> futures;
  futures.reserve(tasks.size());
  for (auto& t : tasks) {
    futures.push_back(pool.submit([task = std::move(t)]() {
      Timed out;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        out.value = task();
      } catch (const std::exception& e) {
        out.error = e.what();
      } catch (...) {
        out.error = "unknown exception";
      }
      out.ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
      return out;
    }));
  }
  DispatchResult<T> res;
  res.results.resize(tasks.size());
  res.wall_ms.resize(tasks.size());
  for (std::size_t i = 0; i < futures.size(); ++i) {
    Timed t = futures[i].get();
    res.wall_ms[i] = t.ms;
    if (!t.value) {
      res.failed.push_back(i);
      res.errors.push_back(t.error);
      continue;
    }
    if (enforce && timeout_ms && t.ms > *timeout_ms) {
      res.dropped.push_back(i);
      continue;
    }
    res.results[i] = std::move(t.value);
  }
  return res;
}

}  // namespace fedbench
