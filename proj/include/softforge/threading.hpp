#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace softforge {

// Worker count taken from SOFT_FORGE_THREADS; default is 1 (single-threaded
// deterministic mode). All parallel loops in this project write to
// per-index slots and reduce in index order afterwards, so results are
// bit-identical for every thread count.
inline int configured_threads() {
    const char* env = std::getenv("SOFT_FORGE_THREADS");
    if (env == nullptr) return 1;
    int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

// Runs fn(i) for i in [0, n). Work items must be independent.
inline void parallel_for(long n, const std::function<void(long)>& fn,
                         int threads = configured_threads()) {
    if (n <= 0) return;
    if (threads <= 1 || n == 1) {
        for (long i = 0; i < n; ++i) fn(i);
        return;
    }
    if (threads > n) threads = static_cast<int>(n);
    std::atomic<long> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&]() {
            while (true) {
                long i = next.fetch_add(1);
                if (i >= n || failed.load()) break;
                try {
                    fn(i);
                } catch (...) {
                    if (!failed.exchange(true)) error = std::current_exception();
                    break;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace softforge
