#include "roteq/parallel.hpp"

#include <atomic>
#include <thread>
#include <vector>

namespace roteq {

namespace {
int g_threads = 1;
}

void set_thread_count(int n) {
    if (n <= 0) n = int(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    g_threads = n;
}

int thread_count() { return g_threads; }

void parallel_for(int n, const std::function<void(int)>& fn) {
    const int workers = std::min(g_threads, n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr err;
    std::atomic<bool> failed{false};
    auto run = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                fn(i);
            } catch (...) {
                if (!failed.exchange(true)) err = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers - 1));
    for (int t = 1; t < workers; ++t) pool.emplace_back(run);
    run();
    for (auto& th : pool) th.join();
    if (failed.load() && err) std::rethrow_exception(err);
}

} // namespace roteq
