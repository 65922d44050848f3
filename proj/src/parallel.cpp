#include "defreg/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <omp.h>

namespace defreg {

namespace {
constexpr size_t kSumBlock = 4096;
}

void set_thread_count(int threads) {
    omp_set_num_threads(threads > 0 ? threads : omp_get_num_procs());
}

int thread_count() { return omp_get_max_threads(); }

namespace {

// Neumaier-compensated accumulator.
struct CompensatedSum {
    double sum = 0.0;
    double carry = 0.0;

    void add(double x) {
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x)) {
            carry += (sum - t) + x;
        } else {
            carry += (x - t) + sum;
        }
        sum = t;
    }
    double value() const { return sum + carry; }
};

} // namespace

double deterministic_sum(size_t n, const std::function<double(size_t)>& term) {
    const size_t blocks = (n + kSumBlock - 1) / kSumBlock;
    std::vector<CompensatedSum> partial(blocks);
#pragma omp parallel for schedule(static)
    for (int64_t b = 0; b < static_cast<int64_t>(blocks); ++b) {
        const size_t lo = static_cast<size_t>(b) * kSumBlock;
        const size_t hi = std::min(n, lo + kSumBlock);
        CompensatedSum s;
        for (size_t i = lo; i < hi; ++i) s.add(term(i));
        partial[static_cast<size_t>(b)] = s;
    }
    CompensatedSum total;
    for (const auto& p : partial) {
        total.add(p.sum);
        total.add(p.carry);
    }
    return total.value();
}

} // namespace defreg
