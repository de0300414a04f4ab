#pragma once

#include <condition_variable>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <utility>
#include <vector>

namespace gtrend {

// Fixed-size worker pool. Tasks must not block on other pool tasks.
class ThreadPool {
public:
    explicit ThreadPool(int n_threads) {
        if (n_threads < 1) throw std::invalid_argument("ThreadPool: need at least 1 thread");
        workers_.reserve(n_threads);
        for (int i = 0; i < n_threads; ++i) workers_.emplace_back([this] { run(); });
    }

    ~ThreadPool() {
        {
            std::lock_guard lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    void submit(std::function<void()> task) {
        {
            std::lock_guard lk(m_);
            queue_.push_back(std::move(task));
        }
        cv_.notify_one();
    }

    int size() const { return static_cast<int>(workers_.size()); }

private:
    void run() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock lk(m_);
                cv_.wait(lk, [&] { return stop_ || !queue_.empty(); });
                if (queue_.empty()) return;
                task = std::move(queue_.front());
                queue_.pop_front();
            }
            task();
        }
    }

    std::mutex m_;
    std::condition_variable cv_;
    std::deque<std::function<void()>> queue_;
    std::vector<std::thread> workers_;
    bool stop_ = false;
};

// Unbounded FIFO used for the coordinator/worker message exchange.
template <typename T>
class Channel {
public:
    void push(T value) {
        {
            std::lock_guard lk(m_);
            q_.push_back(std::move(value));
        }
        cv_.notify_one();
    }

    T pop() {
        std::unique_lock lk(m_);
        cv_.wait(lk, [&] { return !q_.empty(); });
        T v = std::move(q_.front());
        q_.pop_front();
        return v;
    }

private:
    std::mutex m_;
    std::condition_variable cv_;
    std::deque<T> q_;
};

// Macro-pipeline over a worker pool: items 0..n_items-1 flow through the
// stage functions in order. Each stage is a station that handles one item at
// a time in arrival order, so stages of different items overlap freely with
// no synchronization between consecutive layers. Per-item state must be
// disjoint; then the result is identical to running the stages in a plain
// loop, whatever the pool size.
class StagePipeline {
public:
    StagePipeline(ThreadPool& pool, std::vector<std::function<void(int)>> stages, int n_items,
                  std::function<void()> on_complete = {})
        : st_(std::make_shared<State>()) {
        if (stages.empty()) throw std::invalid_argument("StagePipeline: need at least 1 stage");
        st_->pool = &pool;
        st_->stages = std::move(stages);
        st_->on_complete = std::move(on_complete);
        st_->n_items = n_items;
        st_->queues.resize(st_->stages.size());
        st_->busy.assign(st_->stages.size(), 0);
        if (n_items == 0) {
            st_->done = true;
            if (st_->on_complete) st_->on_complete();
            return;
        }
        {
            std::lock_guard lk(st_->m);
            for (int i = 0; i < n_items; ++i) st_->queues[0].push_back(i);
            dispatch_locked(st_, 0);
        }
    }

    // Blocks until every item has left the last stage; rethrows the first
    // stage exception, if any.
    void wait() {
        std::unique_lock lk(st_->m);
        st_->cv.wait(lk, [&] { return st_->done; });
        if (st_->error) std::rethrow_exception(st_->error);
    }

private:
    struct State {
        ThreadPool* pool = nullptr;
        std::vector<std::function<void(int)>> stages;
        std::function<void()> on_complete;
        std::mutex m;
        std::condition_variable cv;
        std::vector<std::deque<int>> queues;
        std::vector<char> busy;
        int n_items = 0;
        int completed = 0;
        int inflight = 0;
        bool done = false;
        std::exception_ptr error;
    };

    // Pops one item for stage s and schedules it, if the station is free.
    static void dispatch_locked(const std::shared_ptr<State>& st, std::size_t s) {
        if (st->busy[s] || st->queues[s].empty() || st->error) return;
        st->busy[s] = 1;
        ++st->inflight;
        const int item = st->queues[s].front();
        st->queues[s].pop_front();
        st->pool->submit([st, s, item] {
            std::exception_ptr err;
            try {
                st->stages[s](item);
            } catch (...) {
                err = std::current_exception();
            }
            bool run_on_complete = false;
            {
                std::lock_guard lk(st->m);
                st->busy[s] = 0;
                --st->inflight;
                if (err && !st->error) st->error = err;
                if (!st->error) {
                    if (s + 1 < st->stages.size()) {
                        st->queues[s + 1].push_back(item);
                        dispatch_locked(st, s + 1);
                    } else if (++st->completed == st->n_items) {
                        st->done = true;
                        run_on_complete = static_cast<bool>(st->on_complete);
                    }
                    dispatch_locked(st, s);
                } else if (st->inflight == 0) {
                    st->done = true;
                }
            }
            if (run_on_complete) st->on_complete();
            st->cv.notify_all();
        });
    }

    std::shared_ptr<State> st_;
};

} // namespace gtrend
