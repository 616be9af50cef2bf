#include "sceneseg/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace sceneseg {

namespace {

size_t env_thread_cap() {
    if (const char* env = std::getenv("SCENESEG_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return static_cast<size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

std::atomic<size_t> g_max_threads{0};  // 0: not yet resolved

}  // namespace

size_t max_threads() {
    size_t v = g_max_threads.load(std::memory_order_relaxed);
    if (v == 0) {
        v = env_thread_cap();
        g_max_threads.store(v, std::memory_order_relaxed);
    }
    return v;
}

void set_max_threads(size_t n) { g_max_threads.store(n == 0 ? 1 : n, std::memory_order_relaxed); }

void parallel_for_blocks(size_t n, const std::function<void(size_t, size_t)>& fn) {
    if (n == 0) return;
    const size_t workers = std::min(max_threads(), n);
    if (workers <= 1) {
        fn(0, n);
        return;
    }
    const size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (size_t t = 0; t < workers; ++t) {
        const size_t begin = t * chunk;
        const size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        threads.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& th : threads) th.join();
}

}  // namespace sceneseg
