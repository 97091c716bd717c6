#pragma once

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "ntkuq/common.hpp"

namespace ntkuq {

inline unsigned resolve_workers(unsigned requested) {
    if (requested != 0) { return requested; }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1u : hw;
}

// Runs body(i) for i in [0, n). Work item i goes to worker i % workers, so the
// assignment never depends on timing. body must only write state owned by i.
// The first exception thrown (lowest worker index) is rethrown on the caller.
template <class Body>
void parallel_for(Index n, Body &&body, unsigned workers = 0) {
    if (n <= 0) { return; }
    const unsigned w = std::min<unsigned>(resolve_workers(workers), static_cast<unsigned>(n));
    if (w <= 1) {
        for (Index i = 0; i < n; ++i) { body(i); }
        return;
    }
    std::vector<std::exception_ptr> errors(w);
    std::vector<std::thread> threads;
    threads.reserve(w);
    for (unsigned t = 0; t < w; ++t) {
        threads.emplace_back([&, t] {
            try {
                for (Index i = t; i < n; i += w) { body(i); }
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto &th : threads) { th.join(); }
    for (auto &e : errors) {
        if (e) { std::rethrow_exception(e); }
    }
}

}  // namespace ntkuq
