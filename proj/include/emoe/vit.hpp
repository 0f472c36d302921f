#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "emoe/moe.hpp"

namespace emoe {

struct ViTConfig {
    int image_size = 32;
    int patch_size = 4;
    int channels = 3;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    int mlp_hidden = 128;
    std::vector<int> moe_blocks = {1, 3};
    int num_classes = 10;
    int r = 16;
    int num_experts = 8;
    int expert_hidden = 0;  // 0 -> embed_dim / 2
    double tau = 1.0;
    double eps = 1e-6;
    bool scale_by_gate = true;
    std::string router = "eigen";  // eigen | gate | gate+lbl

    void validate() const;
    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int tokens() const { return num_patches() + 1; }
    int d_h() const { return expert_hidden > 0 ? expert_hidden : embed_dim / 2; }
    bool uses_gate_router() const { return router != "eigen"; }
    bool uses_lbl() const { return router == "gate+lbl"; }
};

struct Block {
    NodePtr ln1_g, ln1_b;
    NodePtr wq, bq, wk, bk, wv, bv, wo, bo;
    NodePtr ln2_g, ln2_b;
    NodePtr w1, b1, w2, b2;
    bool has_moe = false;
    MoELayer moe;
};

// All leaves keyed by canonical name; the key set is a pure function of the
// config. `buffers` carries non-trained tensors (pixel norm constants).
struct ModelState {
    ViTConfig cfg;
    NodePtr patch_w, patch_b, cls_token, pos_embed;
    std::vector<Block> blocks;
    NodePtr lnf_g, lnf_b, head_w, head_b;
    std::map<std::string, NodePtr> params;
    std::map<std::string, Matrix> buffers;
};

ModelState make_vit(const ViTConfig& cfg, Rng& rng);

// Non-overlapping patches flattened row-major (row, then column, then
// channel), patch grid scanned row-major. Pixels are HxWxC, channel fastest.
Matrix extract_patches(const std::vector<double>& pixels, int h, int w, int c, int patch_size);

NodePtr mhsa_forward(const Block& b, int heads, const NodePtr& x);

// Pre-norm block; row 0 is the class token and bypasses the MoE branch.
NodePtr block_forward(const Block& b, const ViTConfig& cfg, const NodePtr& x, RoutingNodes* routing_out);

struct VitForward {
    NodePtr logits;        // B x num_classes
    NodePtr cls_features;  // B x D, post final layernorm
    std::vector<int> moe_block_ids;
    // routing[m][i]: block moe_block_ids[m], image i.
    std::vector<std::vector<RoutingNodes>> routing;
};

VitForward vit_forward(const ModelState& m, const std::vector<Matrix>& patch_batches);

constexpr double kLayerNormEps = 1e-5;

}  // namespace emoe
