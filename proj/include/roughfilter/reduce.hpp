#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <optional>
#include <span>
#include <thread>
#include <utility>
#include <vector>

namespace roughfilter {

// Particles are processed in fixed-size blocks; block results are merged in a
// fixed binary tree, so sums do not depend on the number of worker threads.
inline constexpr std::size_t kParticleBlock = 256;

inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

// Streaming pairwise merge: items pushed in order, merged like a binary counter.
template <class T>
class TreeReducer {
 public:
  using Merge = std::function<void(T& into, T&& from)>;
  explicit TreeReducer(Merge merge) : merge_(std::move(merge)) {}

  void push(T item) {
    int level = 0;
    while (!stack_.empty() && stack_.back().first == level) {
      T left = std::move(stack_.back().second);
      stack_.pop_back();
      merge_(left, std::move(item));
      item = std::move(left);
      ++level;
    }
    stack_.emplace_back(level, std::move(item));
  }

  std::optional<T> finish() {
    if (stack_.empty()) return std::nullopt;
    T acc = std::move(stack_.back().second);
    stack_.pop_back();
    while (!stack_.empty()) {
      T left = std::move(stack_.back().second);
      stack_.pop_back();
      merge_(left, std::move(acc));
      acc = std::move(left);
    }
    return acc;
  }

 private:
  Merge merge_;
  std::vector<std::pair<int, T>> stack_;
};

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs work(block) for block = 0..blocks-1 in waves of `threads` and hands each
// finished result to sink(block, result) in block order.
template <class T, class Work, class Sink>
void run_blocks(std::size_t blocks, std::size_t threads, Work&& work, Sink&& sink) {
  threads = std::max<std::size_t>(1, std::min(resolve_threads(threads), blocks));
  for (std::size_t first = 0; first < blocks; first += threads) {
    const std::size_t count = std::min(threads, blocks - first);
    std::vector<std::optional<T>> results(count);
    std::vector<std::exception_ptr> errors(count);
    auto task = [&](std::size_t k) {
      try {
        results[k].emplace(work(first + k));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    };
    if (count == 1) {
      task(0);
    } else {
      std::vector<std::thread> pool;
      pool.reserve(count - 1);
      for (std::size_t k = 1; k < count; ++k) pool.emplace_back(task, k);
      task(0);
      for (auto& t : pool) t.join();
    }
    for (std::size_t k = 0; k < count; ++k)
      if (errors[k]) std::rethrow_exception(errors[k]);
    for (std::size_t k = 0; k < count; ++k) sink(first + k, std::move(*results[k]));
  }
}

// fn(k) for k = 0..n-1 over `threads` workers; each k writes only its own outputs.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (n == 0) return;
  const std::size_t chunk = std::max<std::size_t>(1, n / (4 * std::max<std::size_t>(1, resolve_threads(threads))));
  const std::size_t blocks = (n + chunk - 1) / chunk;
  run_blocks<char>(
      blocks, threads,
      [&](std::size_t b) {
        for (std::size_t k = b * chunk; k < std::min(n, (b + 1) * chunk); ++k) fn(k);
        return char{0};
      },
      [](std::size_t, char&&) {});
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  std::size_t points = 0;
};

inline LinearFit least_squares(std::span<const double> x, std::span<const double> y) {
  LinearFit fit;
  fit.points = x.size();
  if (x.size() < 2) return fit;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  fit.slope = sxx > 0 ? sxy / sxx : 0.0;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

}  // namespace roughfilter
