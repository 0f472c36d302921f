#pragma once

#include <cstdint>
#include <string>

#include "emoe/vit.hpp"

namespace emoe {

struct TrainConfig {
    double lr = 3e-4;
    std::string optimizer = "adam";  // adam | sgd-momentum
    int batch_size = 64;
    int steps = 1000;
    double lambda_ortho = 1e-2;
    int qr_interval = 10;
    uint64_t seed = 1;
    double lbl_coeff = 0.01;
    int warmup_steps = 100;
    int log_every = 10;

    void validate() const;
};

struct DataConfig {
    std::string kind = "synthetic";  // synthetic | cifar10
    std::string path = "data/cifar-10-batches-bin";
    int num_clusters = 8;
    int dim = 64;
    int tokens_per_cluster = 125;
    double center_scale = 1.0;
    double within_variance = 1.0;
    double noise_variance = 0.05;
    int train_subset = 5000;
    int test_subset = 1000;
    int shots = 5;

    void validate() const;
};

struct RunConfig {
    ViTConfig model;
    TrainConfig train;
    DataConfig data;
    std::string router = "eigen";  // eigen | gate | gate+lbl
    std::string output_dir = "runs/out";

    void validate() const;
    // model.router mirrors the top-level key; call after any override.
    void sync() { model.router = router; }
};

// Flat dotted-key text: `key = value`, '#' comments. Unknown keys and
// malformed values raise ConfigError naming the line and key.
RunConfig parse_config_text(const std::string& text, const std::string& source_name);
RunConfig parse_config_file(const std::string& path);
void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value,
                       const std::string& where);

// Every key in a fixed order; parse_config_text round-trips it.
std::string canonical_config_text(const RunConfig& cfg);

}  // namespace emoe
