#include "emoe/rng.hpp"

#include <cmath>

namespace emoe {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

// FNV-1a, for mixing substream labels into the seed.
uint64_t hash_label(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

Rng::Rng(uint64_t seed) : root_seed_(seed) {
    uint64_t sm = seed;
    for (auto& s : state_)
        s = splitmix64(sm);
}

Rng Rng::substream(const std::string& label) const {
    return Rng(root_seed_ ^ hash_label(label));
}

uint64_t Rng::next_u64() {
    // xoshiro256**
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

uint64_t Rng::below(uint64_t n) {
    // Rejection sampling keeps the distribution exactly uniform.
    const uint64_t threshold = (0ULL - n) % n;
    for (;;) {
        uint64_t r = next_u64();
        if (r >= threshold)
            return r % n;
    }
}

double Rng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1, u2;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double two_pi = 6.283185307179586476925286766559;
    spare_ = mag * std::sin(two_pi * u2);
    has_spare_ = true;
    return mag * std::cos(two_pi * u2);
}

double Rng::gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

Matrix Rng::gaussian_matrix(int rows, int cols, double mean, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.data)
        v = gaussian(mean, stddev);
    return m;
}

Matrix Rng::uniform_matrix(int rows, int cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (double& v : m.data)
        v = uniform(lo, hi);
    return m;
}

}  // namespace emoe
