#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace icl {

/// Worker count: hardware concurrency, capped by ICLDIFF_THREADS when set.
inline int worker_count() {
    int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("ICLDIFF_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) {
            n = std::min(n, cap);
        }
    }
    return n;
}

/// Runs fn(i) for i in [0, n). Each index runs exactly once; results must go to per-index slots.
/// The first exception thrown by any worker is rethrown on the caller.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn, int workers = worker_count()) {
    workers = static_cast<int>(std::min<int64_t>(workers, n));
    if (workers <= 1) {
        for (int64_t i = 0; i < n; i++) {
            fn(i);
        }
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; w++) {
        pool.emplace_back([&] {
            for (int64_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) {
                        error = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

}  // namespace icl
