#pragma once

#include <functional>

namespace roteq {

// Global worker count. 0 resolves to hardware concurrency.
void set_thread_count(int n);
int thread_count();

// Runs fn(i) for i in [0, n). Each index must write only its own output
// region; results are then independent of the worker count, which keeps
// training bit-reproducible with parallelism on or off.
void parallel_for(int n, const std::function<void(int)>& fn);

} // namespace roteq
