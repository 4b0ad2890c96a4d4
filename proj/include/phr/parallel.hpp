#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "phr/common.hpp"

namespace phr {

/// Worker count used by parallel_for. Overridable through PHR_THREADS.
inline int thread_count() {
    static const int n = [] {
        if (const char* env = std::getenv("PHR_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }();
    return n;
}

namespace detail {

/// Persistent worker pool. Each run() partitions [0,n) into one contiguous
/// range per participant, so every index is processed exactly once and
/// results do not depend on the worker count.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool(thread_count() - 1);
        return pool;
    }

    static bool& inside() {
        thread_local bool flag = false;
        return flag;
    }

    void run(i64 n, const std::function<void(i64)>& fn) {
        int parts = static_cast<int>(workers_.size()) + 1;
        i64 chunk = (n + parts - 1) / parts;
        {
            std::unique_lock<std::mutex> lock(mutex_);
            fn_ = &fn;
            n_ = n;
            chunk_ = chunk;
            ++generation_;
            pending_ = static_cast<int>(workers_.size());
            cv_work_.notify_all();
        }
        // the calling thread takes the first range
        inside() = true;
        for (i64 i = 0; i < std::min(chunk, n); ++i) fn(i);
        inside() = false;
        std::unique_lock<std::mutex> lock(mutex_);
        cv_done_.wait(lock, [this] { return pending_ == 0; });
        fn_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lock(mutex_);
            stop_ = true;
            cv_work_.notify_all();
        }
        for (auto& t : workers_) t.join();
    }

private:
    explicit ThreadPool(int n_workers) {
        for (int w = 0; w < n_workers; ++w)
            workers_.emplace_back([this, w] { worker_loop(w + 1); });
    }

    void worker_loop(int id) {
        inside() = true;
        u64 seen = 0;
        while (true) {
            const std::function<void(i64)>* fn = nullptr;
            i64 lo = 0, hi = 0;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                cv_work_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                fn = fn_;
                lo = std::min<i64>(n_, id * chunk_);
                hi = std::min<i64>(n_, lo + chunk_);
            }
            for (i64 i = lo; i < hi; ++i) (*fn)(i);
            {
                std::unique_lock<std::mutex> lock(mutex_);
                if (--pending_ == 0) cv_done_.notify_all();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mutex_;
    std::condition_variable cv_work_, cv_done_;
    const std::function<void(i64)>* fn_ = nullptr;
    i64 n_ = 0, chunk_ = 0;
    u64 generation_ = 0;
    int pending_ = 0;
    bool stop_ = false;
};

}  // namespace detail

/// Runs fn(i) for i in [0, n). Falls back to a plain loop for small n, a
/// single-core box, or when already inside the pool.
template <class Fn>
void parallel_for(i64 n, Fn&& fn) {
    if (n <= 0) return;
    if (thread_count() <= 1 || n == 1 || detail::ThreadPool::inside()) {
        for (i64 i = 0; i < n; ++i) fn(i);
        return;
    }
    std::function<void(i64)> wrapped = std::ref(fn);
    detail::ThreadPool::instance().run(n, wrapped);
}

}  // namespace phr
