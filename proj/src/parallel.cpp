#include "parallel.hpp"

#include <mutex>

namespace martpost {

namespace {
std::atomic<int> g_thread_override{0};

int detect_threads() {
    if (const char* env = std::getenv("MARTPOST_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}
} // namespace

int thread_count() {
    int n = g_thread_override.load(std::memory_order_relaxed);
    return n > 0 ? n : detect_threads();
}

void set_thread_count(int n) { g_thread_override.store(n > 0 ? n : 0, std::memory_order_relaxed); }

void parallel_for(long n, const std::function<void(long)>& fn) {
    if (n <= 0) return;
    const int workers = std::min<long>(thread_count(), n);
    if (workers <= 1) {
        for (long i = 0; i < n; ++i) fn(i);
        return;
    }

    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (long i = w; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace martpost
