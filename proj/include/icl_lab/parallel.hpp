#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "icl_lab/errors.hpp"

namespace icl {

// Worker cap from ICL_LAB_THREADS (1 = fully deterministic single worker),
// otherwise the hardware concurrency.
inline int worker_count() {
    if (const char* env = std::getenv("ICL_LAB_THREADS"); env != nullptr && *env != '\0') {
        try {
            const int n = std::stoi(env);
            require(n >= 1, "ICL_LAB_THREADS must be >= 1");
            return n;
        } catch (const std::logic_error&) {
            throw ConfigError(std::string("ICL_LAB_THREADS is not a positive integer: ") + env);
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

// [begin, end) of shard `index` when `total` items are split into `shards`.
inline std::pair<std::size_t, std::size_t> shard_range(std::size_t total, std::size_t shards, std::size_t index) {
    const std::size_t base = total / shards;
    const std::size_t extra = total % shards;
    const std::size_t begin = index * base + std::min(index, extra);
    return {begin, begin + base + (index < extra ? 1 : 0)};
}

// Runs fn(shard) for every shard, shard 0 on the calling thread.
template <typename Fn>
void run_shards(std::size_t shards, Fn&& fn) {
    if (shards <= 1) {
        fn(std::size_t{0});
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(shards - 1);
    std::vector<std::exception_ptr> errors(shards);
    for (std::size_t s = 1; s < shards; ++s) {
        workers.emplace_back([&, s] {
            try {
                fn(s);
            } catch (...) {
                errors[s] = std::current_exception();
            }
        });
    }
    try {
        fn(std::size_t{0});
    } catch (...) {
        errors[0] = std::current_exception();
    }
    for (auto& w : workers) {
        w.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace icl
