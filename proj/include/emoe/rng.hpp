#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emoe/matrix.hpp"

namespace emoe {

// Deterministic generator (xoshiro256** seeded via splitmix64). All
// randomness in the project flows through this type so runs are
// bit-reproducible across platforms for a given seed. Substreams are
// derived from a root seed and a label, letting components re-seed
// independently of each other.
class Rng {
public:
    explicit Rng(uint64_t seed);
    // Derived stream: same (seed, label) always yields the same stream.
    Rng substream(const std::string& label) const;

    uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    // Uniform integer in [0, n).
    uint64_t below(uint64_t n);
    // Standard normal via Box-Muller (one cached spare).
    double gaussian();
    double gaussian(double mean, double stddev);

    Matrix gaussian_matrix(int rows, int cols, double mean = 0.0, double stddev = 1.0);
    Matrix uniform_matrix(int rows, int cols, double lo, double hi);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_[4];
    uint64_t root_seed_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace emoe
