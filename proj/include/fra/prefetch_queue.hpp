#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>

namespace fra {

/// Bounded FIFO shared by one producer and one consumer. push blocks while
/// the queue holds `capacity` items.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  /// Returns false if the queue was closed before the item could be added.
  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    high_water_ = std::max(high_water_, items_.size());
    not_empty_.notify_one();
    return true;
  }

  /// Blocks until an item is available; nullopt once closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  size_t capacity() const { return capacity_; }

  /// Largest number of items ever held at once.
  size_t high_water() const {
    std::lock_guard lock(mu_);
    return high_water_;
  }

 private:
  size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  size_t high_water_ = 0;
  bool closed_ = false;
};

/// Runs produce(i) for i in [begin, end) on a background thread, at most
/// `capacity` results ahead of the consumer, delivered in index order.
template <typename T>
class Prefetcher {
 public:
  Prefetcher(int64_t begin, int64_t end, size_t capacity, std::function<T(int64_t)> produce)
      : queue_(capacity) {
    worker_ = std::jthread([this, begin, end, produce = std::move(produce)](std::stop_token st) {
      try {
        for (int64_t i = begin; i < end && !st.stop_requested(); ++i) {
          if (!queue_.push(produce(i))) break;
        }
      } catch (...) {
        std::lock_guard lock(error_mu_);
        error_ = std::current_exception();
      }
      queue_.close();
    });
  }

  ~Prefetcher() {
    worker_.request_stop();
    queue_.close();
  }

  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  /// Next item, or nullopt when the range is exhausted. Rethrows producer
  /// exceptions.
  std::optional<T> next() {
    auto item = queue_.pop();
    if (!item) {
      std::lock_guard lock(error_mu_);
      if (error_) std::rethrow_exception(error_);
    }
    return item;
  }

  const BoundedQueue<T>& queue() const { return queue_; }

 private:
  BoundedQueue<T> queue_;
  std::mutex error_mu_;
  std::exception_ptr error_;
  std::jthread worker_;
};

}  // namespace fra
