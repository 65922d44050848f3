#pragma once

#include <cstddef>
#include <functional>

namespace defreg {

// Number of worker threads used by the voxel-parallel loops. Zero selects all cores.
void set_thread_count(int threads);
int thread_count();

// Sum of term(i) for i in [0, n). Terms are accumulated in fixed-size blocks whose
// partial sums are combined in block order, so the result does not depend on the
// number of threads.
double deterministic_sum(size_t n, const std::function<double(size_t)>& term);

} // namespace defreg
