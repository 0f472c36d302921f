#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emoe/matrix.hpp"
#include "emoe/rng.hpp"

namespace emoe {

struct SyntheticSpec {
    int num_clusters = 8;
    int dim = 64;
    int tokens_per_cluster = 125;
    Matrix cluster_directions;  // num_clusters x dim, rows orthonormal
    double center_scale = 1.0;  // c in c*direction_i
    double within_variance = 1.0;
    double noise_variance = 0.05;
    uint64_t seed = 1;
};

// Directions drawn once from the seed's "directions" substream.
SyntheticSpec make_synthetic_spec(int num_clusters, int dim, int tokens_per_cluster, double center_scale,
                                  double within_variance, double noise_variance, uint64_t seed);

// token = c*dir_i + a*dir_i + n, a ~ N(0, within), n ~ N(0, noise*I).
// Cluster-major order; deterministic per seed.
void gen_clustered_tokens(const SyntheticSpec& spec, Matrix* tokens, std::vector<int>* labels);

struct LabeledImages {
    int n = 0, h = 0, w = 0, c = 0;
    std::vector<uint8_t> pixels;  // n*h*w*c, HWC interleaved
    std::vector<int> labels;
    std::vector<std::string> class_names;

    const uint8_t* image(int i) const { return pixels.data() + static_cast<size_t>(i) * h * w * c; }
};

// One canonical batch file: 10000 records of 3073 bytes (label, then 32*32
// planar R/G/B). Size and label range are validated before anything is kept.
LabeledImages load_cifar10_file(const std::string& path);

// dir must hold data_batch_1..5.bin (train) or test_batch.bin (test).
LabeledImages load_cifar10(const std::string& dir, bool train);

// Deterministic class-structured stand-in images written in the exact
// CIFAR-10 binary layout (one train batch + one test batch).
void write_synthetic_cifar(const std::string& dir, uint64_t seed);

// Exactly `shots` support examples per class, disjoint from the query set.
void few_shot_split(const std::vector<int>& labels, int num_classes, int shots, uint64_t seed,
                    std::vector<int>* support, std::vector<int>* query);
void few_shot_split(const LabeledImages& data, int shots, uint64_t seed, std::vector<int>* support,
                    std::vector<int>* query);

// Per-channel mean/std of byte/255 pixels over the given images.
void pixel_norm_constants(const LabeledImages& data, const std::vector<int>& indices, Matrix* mean, Matrix* std);

// byte/255 then per-channel standardization; HWC doubles.
std::vector<double> normalize_image(const LabeledImages& data, int index, const Matrix& mean, const Matrix& std);

int count_classes(const LabeledImages& data);

}  // namespace emoe
