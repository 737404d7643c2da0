#pragma once

#include <functional>

namespace nirsplat {

/// Number of worker threads used by parallel passes (default 1).
int worker_count();
void set_worker_count(int n);

/// Runs fn(chunk) for every chunk in [0, n_chunks).
///
/// Chunks are the unit of determinism: callers must write results only into
/// chunk-owned slots and reduce them in chunk order afterwards, so the output
/// never depends on how chunks were spread across workers.
void parallel_chunks(int n_chunks, const std::function<void(int)>& fn);

}  // namespace nirsplat
