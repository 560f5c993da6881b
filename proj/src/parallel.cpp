#include "gavatar/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace gavatar {
namespace {

std::atomic<size_t> g_override{0};

size_t default_workers()
{
    if (const char* env = std::getenv("GAVATAR_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<size_t>(v);
        } catch (...) {
        }
    }
    return std::max<size_t>(1, std::thread::hardware_concurrency());
}

} // namespace

size_t worker_count()
{
    const size_t o = g_override.load();
    return o > 0 ? o : default_workers();
}

void set_worker_count(size_t n) { g_override.store(n); }

void parallel_for(size_t n, const std::function<void(size_t, size_t, size_t)>& fn)
{
    if (n == 0) return;
    const size_t workers = std::min(worker_count(), n);
    if (workers == 1) {
        fn(0, n, 0);
        return;
    }
    const size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    threads.reserve(workers - 1);
    for (size_t w = 1; w < workers; ++w) {
        const size_t b = w * chunk;
        const size_t e = std::min(n, b + chunk);
        if (b >= e) break;
        threads.emplace_back([&fn, b, e, w] { fn(b, e, w); });
    }
    fn(0, std::min(n, chunk), 0);
    for (auto& t : threads) t.join();
}

} // namespace gavatar
