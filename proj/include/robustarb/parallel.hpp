#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace robustarb {

// Runs fn(block, begin, end) for every fixed-size block of [0, count). Blocks
// are handed out to `workers` threads; callers write into per-block slots and
// reduce them in block order afterwards, so results never depend on the
// worker count. The first exception thrown by any block is rethrown.
template <class Fn>
void for_each_block(std::size_t count, std::size_t block_size, std::size_t workers, Fn&& fn) {
    if (count == 0) return;
    block_size = std::max<std::size_t>(block_size, 1);
    const std::size_t blocks = (count + block_size - 1) / block_size;
    workers = std::clamp<std::size_t>(workers, 1, blocks);

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto body = [&] {
        for (;;) {
            const std::size_t b = next.fetch_add(1);
            if (b >= blocks) return;
            try {
                const std::size_t begin = b * block_size;
                fn(b, begin, std::min(count, begin + block_size));
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(blocks);
                return;
            }
        }
    };
    if (workers == 1) {
        body();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
}

inline std::size_t number_of_blocks(std::size_t count, std::size_t block_size) {
    return (count + block_size - 1) / std::max<std::size_t>(block_size, 1);
}

}  // namespace robustarb
