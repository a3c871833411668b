#pragma once

#include <cstddef>
#include <functional>

namespace emim {

/// Worker count: EMIM_THREADS when set to a positive integer, else the
/// hardware concurrency (at least 1).
std::size_t worker_count();

/// Runs task(i) for i in [0, num_tasks) on up to `workers` threads. Tasks must
/// write to disjoint outputs; the first exception is rethrown.
void parallel_for(std::size_t num_tasks, std::size_t workers, const std::function<void(std::size_t)>& task);

}  // namespace emim
