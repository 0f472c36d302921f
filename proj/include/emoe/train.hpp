#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "emoe/config.hpp"
#include "emoe/data.hpp"

namespace emoe {

struct StepLosses {
    double total = 0.0, ce = 0.0, ortho = 0.0, lbl = 0.0;
};

// Adam or SGD-momentum over a canonical name->leaf map; iteration order is
// the map order, so updates are deterministic.
struct Optimizer {
    std::string kind = "adam";
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, momentum = 0.9;
    long t = 0;
    std::map<std::string, Matrix> m, v;

    void step(std::map<std::string, NodePtr>& params, const GradMap& grads, double lr);
};

// Experts x classes tally of routed patch tokens.
struct LoadStats {
    Matrix counts;
    long long tokens_seen = 0;

    LoadStats() = default;
    LoadStats(int k, int num_classes) : counts(Matrix::zeros(k, num_classes)) {}
    void accumulate(const std::vector<int>& expert_index, const std::vector<int>& token_labels);
    void merge(const LoadStats& other);
};

struct BalanceMetrics {
    double max_min_ratio = 0.0;  // +inf when an expert is starved
    double entropy = 0.0;        // normalized to [0, 1]
    double cv = 0.0;
};

BalanceMetrics balance_metrics(const LoadStats& stats);

// Single-MoE-layer token classifier for the synthetic routing experiments.
struct TokenModel {
    int dim = 0, num_classes = 0;
    MoELayer moe;
    NodePtr head_w, head_b;
    std::map<std::string, NodePtr> params;
    std::map<std::string, Matrix> buffers;  // empty; keeps checkpoint API uniform
};

struct TokenForward {
    NodePtr logits;
    NodePtr features;  // post-MoE token representations
    RoutingNodes routing;
};

TokenModel make_token_model(const RunConfig& cfg, Rng& rng);
TokenForward token_forward(const TokenModel& model, const Matrix& tokens);

// Preprocessed image dataset: per-image normalized patch matrices.
struct VitData {
    std::vector<Matrix> patches;
    std::vector<int> labels;
    int num_classes = 0;
};

VitData build_vit_data(const LabeledImages& imgs, const std::vector<int>& indices, const Matrix& mean,
                       const Matrix& stddev, const ViTConfig& cfg);

// First `per_class` indices of each class in scan order.
std::vector<int> balanced_subset(const std::vector<int>& labels, int per_class, int num_classes);

// Replace each basis with the top-r eigbasis of its input covariance from a
// warm-up forward (power iteration; random orthonormal fallback).
void init_token_model_basis(TokenModel& model, const Matrix& warmup_tokens, Rng& rng);
void init_vit_bases(ModelState& model, const std::vector<Matrix>& warmup_patches, Rng& rng);

struct TrainResult {
    StepLosses final_losses;
    LoadStats final_stats;       // routing tallies of a full post-training pass
    BalanceMetrics final_balance;
    double final_accuracy = -1.0;  // eval accuracy (token: full set; vit: test set)
    int steps_run = 0;
};

// Both drivers: CE + sum L_ortho (+ LBL when router == gate+lbl), one
// optimizer step per batch, QR maintenance every qr_interval steps, one
// deterministic metrics line per log_every steps on `log` when non-null.
TrainResult train_token_model(const RunConfig& cfg, TokenModel& model, const Matrix& tokens,
                              const std::vector<int>& labels, std::ostream* log);
TrainResult train_vit_model(const RunConfig& cfg, ModelState& model, const VitData& train_data,
                            const VitData& test_data, std::ostream* log);

double vit_eval_accuracy(const ModelState& model, const VitData& data, int eval_batch,
                         LoadStats* stats_out);
Matrix vit_extract_features(const ModelState& model, const VitData& data, const std::vector<int>& indices,
                            int eval_batch);

LoadStats token_model_stats(const TokenModel& model, const Matrix& tokens, const std::vector<int>& labels);
double token_model_accuracy(const TokenModel& model, const Matrix& tokens, const std::vector<int>& labels);

void write_heatmap_csv(const std::string& path, const Matrix& normalized, const std::vector<std::string>& class_names);
void write_heatmap_pgm(const std::string& path, const Matrix& normalized, int cell = 24);

std::string format_metrics_line(int step, const StepLosses& losses, const BalanceMetrics& bm);

}  // namespace emoe
