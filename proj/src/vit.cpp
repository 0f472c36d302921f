#include "emoe/vit.hpp"

#include <cmath>

#include "emoe/errors.hpp"

namespace emoe {

void ViTConfig::validate() const {
    if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0)
        throw ConfigError("model: image_size " + std::to_string(image_size) +
                          " must be a positive multiple of patch_size " + std::to_string(patch_size));
    if (channels < 1)
        throw ConfigError("model: channels must be >= 1");
    if (embed_dim < 2 || heads < 1 || embed_dim % heads != 0)
        throw ConfigError("model: embed_dim " + std::to_string(embed_dim) + " must be divisible by heads " +
                          std::to_string(heads));
    if (depth < 1)
        throw ConfigError("model: depth must be >= 1");
    if (mlp_hidden < 1)
        throw ConfigError("model: mlp_hidden must be >= 1");
    for (int idx : moe_blocks)
        if (idx < 0 || idx >= depth)
            throw ConfigError("model: moe_blocks entry " + std::to_string(idx) + " outside [0, " +
                              std::to_string(depth) + ")");
    if (num_classes < 2)
        throw ConfigError("model: num_classes must be >= 2");
    if (!moe_blocks.empty()) {
        if (r < 1 || r >= embed_dim)
            throw ConfigError("model: r " + std::to_string(r) + " must satisfy 1 <= r < embed_dim");
        if (num_experts < 1)
            throw ConfigError("model: num_experts must be >= 1");
        if (d_h() < 1 || d_h() >= embed_dim)
            throw ConfigError("model: expert_hidden must satisfy 1 <= d_h < embed_dim");
    }
    if (!(tau > 0.0))
        throw ConfigError("model: tau must be positive");
    if (!(eps >= 0.0))
        throw ConfigError("model: eps must be nonnegative");
    if (router != "eigen" && router != "gate" && router != "gate+lbl")
        throw ConfigError("model: router must be eigen, gate, or gate+lbl, got '" + router + "'");
}

namespace {

NodePtr reg(ModelState& m, NodePtr leaf) {
    m.params[leaf->name] = leaf;
    return leaf;
}

void reg_moe(ModelState& m, const MoELayer& layer) {
    if (layer.kind == RouterKind::eigen) {
        m.params[layer.basis.U->name] = layer.basis.U;
        m.params[layer.params.gamma->name] = layer.params.gamma;
        m.params[layer.params.pi->name] = layer.params.pi;
        m.params[layer.params.bias->name] = layer.params.bias;
    } else {
        m.params[layer.gate.w->name] = layer.gate.w;
        m.params[layer.gate.b->name] = layer.gate.b;
    }
    m.params[layer.alpha->name] = layer.alpha;
    for (const Expert& e : layer.experts) {
        m.params[e.w_in->name] = e.w_in;
        m.params[e.b_in->name] = e.b_in;
        m.params[e.w_out->name] = e.w_out;
        m.params[e.b_out->name] = e.b_out;
    }
}

}  // namespace

ModelState make_vit(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelState m;
    m.cfg = cfg;
    const int d = cfg.embed_dim;

    m.patch_w = reg(m, make_leaf(rng.gaussian_matrix(cfg.patch_dim(), d, 0.0, 0.02), "patch_embed.w"));
    m.patch_b = reg(m, make_leaf(Matrix::zeros(1, d), "patch_embed.b"));
    m.cls_token = reg(m, make_leaf(rng.gaussian_matrix(1, d, 0.0, 0.02), "cls_token"));
    m.pos_embed = reg(m, make_leaf(rng.gaussian_matrix(cfg.tokens(), d, 0.0, 0.02), "pos_embed"));

    for (int i = 0; i < cfg.depth; ++i) {
        const std::string p = "block" + std::to_string(i);
        Block b;
        b.ln1_g = reg(m, make_leaf(Matrix::filled(1, d, 1.0), p + ".ln1.g"));
        b.ln1_b = reg(m, make_leaf(Matrix::zeros(1, d), p + ".ln1.b"));
        b.wq = reg(m, make_leaf(rng.gaussian_matrix(d, d, 0.0, 0.02), p + ".attn.wq"));
        b.bq = reg(m, make_leaf(Matrix::zeros(1, d), p + ".attn.bq"));
        b.wk = reg(m, make_leaf(rng.gaussian_matrix(d, d, 0.0, 0.02), p + ".attn.wk"));
        b.bk = reg(m, make_leaf(Matrix::zeros(1, d), p + ".attn.bk"));
        b.wv = reg(m, make_leaf(rng.gaussian_matrix(d, d, 0.0, 0.02), p + ".attn.wv"));
        b.bv = reg(m, make_leaf(Matrix::zeros(1, d), p + ".attn.bv"));
        b.wo = reg(m, make_leaf(rng.gaussian_matrix(d, d, 0.0, 0.02), p + ".attn.wo"));
        b.bo = reg(m, make_leaf(Matrix::zeros(1, d), p + ".attn.bo"));
        b.ln2_g = reg(m, make_leaf(Matrix::filled(1, d, 1.0), p + ".ln2.g"));
        b.ln2_b = reg(m, make_leaf(Matrix::zeros(1, d), p + ".ln2.b"));
        b.w1 = reg(m, make_leaf(rng.gaussian_matrix(d, cfg.mlp_hidden, 0.0, 0.02), p + ".ffn.w1"));
        b.b1 = reg(m, make_leaf(Matrix::zeros(1, cfg.mlp_hidden), p + ".ffn.b1"));
        b.w2 = reg(m, make_leaf(rng.gaussian_matrix(cfg.mlp_hidden, d, 0.0, 0.02), p + ".ffn.w2"));
        b.b2 = reg(m, make_leaf(Matrix::zeros(1, d), p + ".ffn.b2"));
        for (int idx : cfg.moe_blocks)
            if (idx == i)
                b.has_moe = true;
        if (b.has_moe) {
            const RouterKind kind = cfg.uses_gate_router() ? RouterKind::gate : RouterKind::eigen;
            b.moe = make_moe_layer(d, cfg.d_h(), cfg.r, cfg.num_experts, rng, p + ".moe", kind);
            b.moe.params.tau = cfg.tau;
            b.moe.params.eps = cfg.eps;
            b.moe.gate.tau = cfg.tau;
            b.moe.scale_by_gate = cfg.scale_by_gate;
            reg_moe(m, b.moe);
        }
        m.blocks.push_back(std::move(b));
    }

    m.lnf_g = reg(m, make_leaf(Matrix::filled(1, d, 1.0), "ln_f.g"));
    m.lnf_b = reg(m, make_leaf(Matrix::zeros(1, d), "ln_f.b"));
    m.head_w = reg(m, make_leaf(rng.gaussian_matrix(d, cfg.num_classes, 0.0, 0.02), "head.w"));
    m.head_b = reg(m, make_leaf(Matrix::zeros(1, cfg.num_classes), "head.b"));

    m.buffers["norm.mean"] = Matrix::zeros(1, cfg.channels);
    m.buffers["norm.std"] = Matrix::filled(1, cfg.channels, 1.0);
    return m;
}

Matrix extract_patches(const std::vector<double>& pixels, int h, int w, int c, int patch_size) {
    if (patch_size < 1 || h % patch_size != 0 || w % patch_size != 0)
        throw ConfigError("extract_patches: " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    if (static_cast<long long>(h) * w * c != static_cast<long long>(pixels.size()))
        throw ShapeError("extract_patches: pixel buffer holds " + std::to_string(pixels.size()) +
                         " values, expected " + std::to_string(h * w * c));
    const int gh = h / patch_size, gw = w / patch_size;
    Matrix out(gh * gw, patch_size * patch_size * c);
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc) {
            const int token = pr * gw + pc;
            int col = 0;
            for (int r = 0; r < patch_size; ++r)
                for (int cc = 0; cc < patch_size; ++cc)
                    for (int ch = 0; ch < c; ++ch) {
                        const int y = pr * patch_size + r;
                        const int x = pc * patch_size + cc;
                        out(token, col++) = pixels[(static_cast<size_t>(y) * w + x) * c + ch];
                    }
        }
    return out;
}

NodePtr mhsa_forward(const Block& b, int heads, const NodePtr& x) {
    const int d = x->value.cols;
    if (d % heads != 0)
        throw ShapeError("mhsa: dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                         " heads");
    const int dh = d / heads;
    NodePtr q = add_row(matmul(x, b.wq), b.bq);
    NodePtr k = add_row(matmul(x, b.wk), b.bk);
    NodePtr v = add_row(matmul(x, b.wv), b.bv);
    std::vector<NodePtr> outs;
    outs.reserve(heads);
    for (int hd = 0; hd < heads; ++hd) {
        NodePtr qh = slice_cols(q, hd * dh, dh);
        NodePtr kh = slice_cols(k, hd * dh, dh);
        NodePtr vh = slice_cols(v, hd * dh, dh);
        NodePtr att = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(dh)), 1.0);
        outs.push_back(matmul(att, vh));
    }
    return add_row(matmul(concat_cols(outs), b.wo), b.bo);
}

NodePtr block_forward(const Block& b, const ViTConfig& cfg, const NodePtr& x, RoutingNodes* routing_out) {
    if (x->value.rows < 2)
        throw ContractError("block_forward: batch has no patch tokens (rows=" +
                            std::to_string(x->value.rows) + ", class token only)");
    NodePtr a = add(x, mhsa_forward(b, cfg.heads, layernorm(x, b.ln1_g, b.ln1_b, kLayerNormEps)));
    NodePtr ffn_in = layernorm(a, b.ln2_g, b.ln2_b, kLayerNormEps);
    NodePtr ffn = add_row(matmul(gelu(add_row(matmul(ffn_in, b.w1), b.b1)), b.w2), b.b2);
    NodePtr base = add(a, ffn);
    if (!b.has_moe)
        return base;

    // MoE branch: patch rows of the post-attention stream, in parallel with
    // the dense FFN; the class token at row 0 bypasses routing entirely.
    std::vector<int> patch_rows(x->value.rows - 1);
    for (size_t i = 0; i < patch_rows.size(); ++i)
        patch_rows[i] = static_cast<int>(i) + 1;
    NodePtr patches = gather_rows(a, patch_rows);
    MoEOut moe = moe_forward(b.moe, patches);
    if (routing_out)
        *routing_out = moe.routing;
    return add(base, scatter_rows(moe.delta, patch_rows, x->value.rows));
}

VitForward vit_forward(const ModelState& m, const std::vector<Matrix>& patch_batches) {
    if (patch_batches.empty())
        throw ContractError("vit_forward: empty image batch");
    VitForward fo;
    for (int i = 0; i < m.cfg.depth; ++i)
        if (m.blocks[i].has_moe)
            fo.moe_block_ids.push_back(i);
    fo.routing.resize(fo.moe_block_ids.size());

    std::vector<NodePtr> cls_rows;
    cls_rows.reserve(patch_batches.size());
    for (const Matrix& patches : patch_batches) {
        if (patches.rows != m.cfg.num_patches() || patches.cols != m.cfg.patch_dim())
            throw ShapeError("vit_forward: patches " + patches.shape_str() + ", expected " +
                             std::to_string(m.cfg.num_patches()) + "x" + std::to_string(m.cfg.patch_dim()));
        NodePtr x = add_row(matmul(make_constant(patches), m.patch_w), m.patch_b);
        x = add(concat_rows({m.cls_token, x}), m.pos_embed);
        int moe_slot = 0;
        for (int blk = 0; blk < m.cfg.depth; ++blk) {
            RoutingNodes routing;
            const bool has_moe = m.blocks[blk].has_moe;
            x = block_forward(m.blocks[blk], m.cfg, x, has_moe ? &routing : nullptr);
            if (has_moe)
                fo.routing[moe_slot++].push_back(routing);
        }
        x = layernorm(x, m.lnf_g, m.lnf_b, kLayerNormEps);
        cls_rows.push_back(gather_rows(x, {0}));
    }
    fo.cls_features = cls_rows.size() == 1 ? cls_rows[0] : concat_rows(cls_rows);
    fo.logits = add_row(matmul(fo.cls_features, m.head_w), m.head_b);
    return fo;
}

}  // namespace emoe
