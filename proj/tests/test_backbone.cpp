#include "emoe/vit.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "emoe/checkpoint.hpp"
#include "emoe/gradcheck.hpp"
#include "oracles.hpp"

using namespace emoe;

namespace {

ViTConfig tiny_config() {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.channels = 1;
    c.embed_dim = 16;
    c.depth = 2;
    c.heads = 2;
    c.mlp_hidden = 24;
    c.moe_blocks = {1};
    c.num_classes = 3;
    c.r = 4;
    c.num_experts = 3;
    c.expert_hidden = 6;
    c.validate();
    return c;
}

Matrix add_row_ref(const Matrix& a, const Matrix& row) {
    Matrix out = a;
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j)
            out(i, j) += row(0, j);
    return out;
}

// Per-head attention with explicit loops and the scalar softmax oracle.
Matrix mhsa_ref(const Block& b, int heads, const Matrix& x) {
    const int n = x.rows, d = x.cols, dh = d / heads;
    Matrix q = add_row_ref(oracle::matmul_ref(x, b.wq->value), b.bq->value);
    Matrix k = add_row_ref(oracle::matmul_ref(x, b.wk->value), b.bk->value);
    Matrix v = add_row_ref(oracle::matmul_ref(x, b.wv->value), b.bv->value);
    Matrix concat(n, d);
    for (int hd = 0; hd < heads; ++hd)
        for (int i = 0; i < n; ++i) {
            std::vector<double> scores(n);
            for (int j = 0; j < n; ++j) {
                double dot = 0.0;
                for (int c = 0; c < dh; ++c)
                    dot += q(i, hd * dh + c) * k(j, hd * dh + c);
                scores[j] = dot / std::sqrt(static_cast<double>(dh));
            }
            const std::vector<double> att = oracle::softmax_ref(scores, 1.0);
            for (int c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j)
                    acc += att[j] * v(j, hd * dh + c);
                concat(i, hd * dh + c) = acc;
            }
        }
    return add_row_ref(oracle::matmul_ref(concat, b.wo->value), b.bo->value);
}

std::vector<Matrix> random_images(const ViTConfig& cfg, int count, uint64_t seed) {
    Rng rng(seed);
    std::vector<Matrix> out;
    for (int i = 0; i < count; ++i)
        out.push_back(rng.gaussian_matrix(cfg.num_patches(), cfg.patch_dim()));
    return out;
}

}  // namespace

TEST(Backbone, ExtractPatchesPinnedTiny) {
    // [DERIVED] 2x2 image, 2 channels, patch 1: four tokens of (ch0, ch1),
    // grid scanned row-major.
    const std::vector<double> px = {
        1, 10,  // (0,0)
        2, 20,  // (0,1)
        3, 30,  // (1,0)
        4, 40,  // (1,1)
    };
    Matrix p = extract_patches(px, 2, 2, 2, 1);
    EXPECT_EQ(p.rows, 4);
    EXPECT_EQ(p.cols, 2);
    EXPECT_DOUBLE_EQ(p(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(p(0, 1), 10.0);
    EXPECT_DOUBLE_EQ(p(1, 0), 2.0);
    EXPECT_DOUBLE_EQ(p(3, 1), 40.0);
}

TEST(Backbone, ExtractPatchesMatchesNestedLoops) {
    const int h = 6, w = 9, c = 2, ps = 3;
    std::vector<double> px(h * w * c);
    for (size_t i = 0; i < px.size(); ++i)
        px[i] = std::sin(0.7 * static_cast<double>(i));
    Matrix got = extract_patches(px, h, w, c, ps);
    const int gw = w / ps;
    ASSERT_EQ(got.rows, (h / ps) * gw);
    ASSERT_EQ(got.cols, ps * ps * c);
    for (int pr = 0; pr < h / ps; ++pr)
        for (int pc = 0; pc < gw; ++pc)
            for (int r = 0; r < ps; ++r)
                for (int cc = 0; cc < ps; ++cc)
                    for (int ch = 0; ch < c; ++ch) {
                        const double want = px[((static_cast<size_t>(pr * ps + r)) * w + (pc * ps + cc)) * c + ch];
                        const double have = got(pr * gw + pc, (r * ps + cc) * c + ch);
                        ASSERT_DOUBLE_EQ(have, want);
                    }
}

TEST(Backbone, ExtractPatchesValidation) {
    std::vector<double> px(5 * 5 * 1);
    EXPECT_THROW(extract_patches(px, 5, 5, 1, 2), ConfigError);
    std::vector<double> small(10);
    EXPECT_THROW(extract_patches(small, 4, 4, 1, 2), ShapeError);
}

TEST(Backbone, ConfigValidation) {
    ViTConfig c = tiny_config();
    c.moe_blocks = {2};
    EXPECT_THROW(c.validate(), ConfigError);  // out of range block
    c = tiny_config();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);  // 16 % 3 != 0
    c = tiny_config();
    c.patch_size = 3;
    EXPECT_THROW(c.validate(), ConfigError);  // 8 % 3 != 0
    c = tiny_config();
    c.r = 16;
    EXPECT_THROW(c.validate(), ConfigError);  // r must stay below embed_dim
    c = tiny_config();
    c.router = "mystery";
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Backbone, AttentionMatchesLoopOracle) {
    ViTConfig cfg = tiny_config();
    Rng rng(21);
    ModelState m = make_vit(cfg, rng);
    Matrix x = rng.gaussian_matrix(5, cfg.embed_dim);
    NodePtr out = mhsa_forward(m.blocks[0], cfg.heads, make_constant(x));
    EXPECT_LT(max_abs_diff(out->value, mhsa_ref(m.blocks[0], cfg.heads, x)), 1e-12);
}

TEST(Backbone, ParamNamesArePureFunctionOfConfig) {
    ViTConfig cfg = tiny_config();
    Rng r1(1), r2(99);
    ModelState a = make_vit(cfg, r1);
    ModelState b = make_vit(cfg, r2);
    ASSERT_EQ(a.params.size(), b.params.size());
    auto ia = a.params.begin();
    auto ib = b.params.begin();
    for (; ia != a.params.end(); ++ia, ++ib) {
        EXPECT_EQ(ia->first, ib->first);
        EXPECT_TRUE(ia->second->value.same_shape(ib->second->value)) << ia->first;
    }
    EXPECT_TRUE(a.params.count("block1.moe.router.U"));
    EXPECT_TRUE(a.params.count("block1.moe.expert2.w_out"));
    EXPECT_TRUE(a.params.count("cls_token"));
    EXPECT_EQ(a.buffers.count("norm.mean"), 1u);
    EXPECT_EQ(a.buffers.count("norm.std"), 1u);
}

TEST(Backbone, ForwardShapesAndDeterminism) {
    ViTConfig cfg = tiny_config();
    Rng rng(31);
    ModelState m = make_vit(cfg, rng);
    std::vector<Matrix> imgs = random_images(cfg, 3, 5);
    VitForward fo = vit_forward(m, imgs);
    EXPECT_EQ(fo.logits->value.rows, 3);
    EXPECT_EQ(fo.logits->value.cols, cfg.num_classes);
    EXPECT_EQ(fo.cls_features->value.rows, 3);
    EXPECT_EQ(fo.cls_features->value.cols, cfg.embed_dim);
    ASSERT_EQ(fo.moe_block_ids, (std::vector<int>{1}));
    ASSERT_EQ(fo.routing.size(), 1u);
    ASSERT_EQ(fo.routing[0].size(), 3u);

    Rng rng2(31);
    ModelState m2 = make_vit(cfg, rng2);
    VitForward fo2 = vit_forward(m2, imgs);
    EXPECT_LT(max_abs_diff(fo.logits->value, fo2.logits->value), 1e-300);  // bit-identical
}

TEST(Backbone, ClassTokenBypassesRouting) {
    ViTConfig cfg = tiny_config();
    Rng rng(33);
    ModelState m = make_vit(cfg, rng);
    std::vector<Matrix> imgs = random_images(cfg, 2, 6);
    VitForward fo = vit_forward(m, imgs);
    // The router sees exactly the patch tokens, never the class token row.
    for (const RoutingNodes& rn : fo.routing[0]) {
        EXPECT_EQ(rn.input->value.rows, cfg.num_patches());
        EXPECT_EQ(static_cast<int>(rn.expert_index.size()), cfg.num_patches());
    }
}

TEST(Backbone, AlphaZeroEqualsDenseBlockExactly) {
    ViTConfig cfg = tiny_config();
    Rng rng(35);
    ModelState m = make_vit(cfg, rng);
    m.blocks[1].moe.alpha->value(0, 0) = 0.0;
    Matrix x = rng.gaussian_matrix(cfg.tokens(), cfg.embed_dim);

    NodePtr with_moe = block_forward(m.blocks[1], cfg, make_constant(x), nullptr);
    Block ablated = m.blocks[1];  // same leaves, dense path only
    ablated.has_moe = false;
    NodePtr without = block_forward(ablated, cfg, make_constant(x), nullptr);
    EXPECT_LT(max_abs_diff(with_moe->value, without->value), 1e-300);
}

TEST(Backbone, BlockRejectsClassTokenOnlyBatch) {
    ViTConfig cfg = tiny_config();
    Rng rng(37);
    ModelState m = make_vit(cfg, rng);
    Matrix lone = rng.gaussian_matrix(1, cfg.embed_dim);
    EXPECT_THROW(block_forward(m.blocks[1], cfg, make_constant(lone), nullptr), ContractError);
}

TEST(Backbone, InitialLossNearChance) {
    ViTConfig cfg = tiny_config();
    cfg.num_classes = 7;
    Rng rng(39);
    ModelState m = make_vit(cfg, rng);
    std::vector<Matrix> imgs = random_images(cfg, 8, 7);
    VitForward fo = vit_forward(m, imgs);
    std::vector<int> labels(8);
    for (int i = 0; i < 8; ++i)
        labels[i] = i % 7;
    const double ce = softmax_cross_entropy_mean(fo.logits, labels)->value(0, 0);
    EXPECT_NEAR(ce, std::log(7.0), 0.5);
}

TEST(Backbone, CheckpointRoundTripBitExact) {
    ViTConfig cfg = tiny_config();
    Rng rng(41);
    ModelState m = make_vit(cfg, rng);
    m.buffers["norm.mean"] = Matrix::from_rows({{0.5}});
    m.buffers["norm.std"] = Matrix::from_rows({{0.25}});
    std::vector<Matrix> imgs = random_images(cfg, 2, 8);
    const Matrix logits_before = vit_forward(m, imgs).logits->value;

    const std::string path = std::filesystem::temp_directory_path() / "emoe_test_roundtrip.ckpt";
    save_checkpoint(path, "model.embed_dim = 16\n", m.params, m.buffers);
    Checkpoint ck = load_checkpoint(path);
    EXPECT_EQ(ck.config_text, "model.embed_dim = 16\n");
    EXPECT_EQ(ck.tensors.size(), m.params.size() + m.buffers.size());

    Rng rng2(999);  // different init, then restored
    ModelState m2 = make_vit(cfg, rng2);
    restore_model(m2, ck);
    EXPECT_LT(max_abs_diff(m2.buffers.at("norm.std"), m.buffers.at("norm.std")), 1e-300);
    const Matrix logits_after = vit_forward(m2, imgs).logits->value;
    EXPECT_LT(max_abs_diff(logits_before, logits_after), 1e-300);
    std::remove(path.c_str());
}

TEST(Backbone, CheckpointMismatchRejected) {
    ViTConfig cfg = tiny_config();
    Rng rng(43);
    ModelState m = make_vit(cfg, rng);
    const std::string path = std::filesystem::temp_directory_path() / "emoe_test_mismatch.ckpt";
    save_checkpoint(path, "", m.params, m.buffers);
    Checkpoint ck = load_checkpoint(path);

    ViTConfig other = tiny_config();
    other.r = 5;  // router.U shape changes
    Rng rng2(44);
    ModelState m2 = make_vit(other, rng2);
    EXPECT_THROW(restore_model(m2, ck), ConfigError);

    ViTConfig fewer = tiny_config();
    fewer.moe_blocks = {};
    Rng rng3(45);
    ModelState m3 = make_vit(fewer, rng3);
    EXPECT_THROW(restore_model(m3, ck), ConfigError);  // tensor count differs
    std::remove(path.c_str());
}

TEST(Backbone, CheckpointRejectsGarbage) {
    namespace fs = std::filesystem;
    const std::string dir = fs::temp_directory_path();
    const std::string bad = dir + "/emoe_test_bad.ckpt";
    {
        std::ofstream out(bad, std::ios::binary);
        out << "NOPE this is not a checkpoint";
    }
    EXPECT_THROW(load_checkpoint(bad), FormatError);
    EXPECT_THROW(load_checkpoint(dir + "/emoe_does_not_exist.ckpt"), FormatError);

    // Truncation: chop a valid checkpoint in half.
    ViTConfig cfg = tiny_config();
    Rng rng(47);
    ModelState m = make_vit(cfg, rng);
    const std::string good = dir + "/emoe_test_good.ckpt";
    save_checkpoint(good, "x = 1\n", m.params, m.buffers);
    std::ifstream in(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    {
        std::ofstream out(bad, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    EXPECT_THROW(load_checkpoint(bad), FormatError);
    std::remove(bad.c_str());
    std::remove(good.c_str());
}

TEST(Backbone, GateRouterVariantRuns) {
    ViTConfig cfg = tiny_config();
    cfg.router = "gate";
    Rng rng(49);
    ModelState m = make_vit(cfg, rng);
    EXPECT_TRUE(m.params.count("block1.moe.gate.w"));
    EXPECT_FALSE(m.params.count("block1.moe.router.U"));
    std::vector<Matrix> imgs = random_images(cfg, 2, 9);
    VitForward fo = vit_forward(m, imgs);
    EXPECT_EQ(fo.logits->value.rows, 2);
    EXPECT_TRUE(all_finite(fo.logits->value));
}

TEST(Backbone, EndToEndGradcheckSampled) {
    ViTConfig cfg = tiny_config();
    Rng rng(51);
    ModelState m = make_vit(cfg, rng);
    m.blocks[1].moe.params.pi->value = rng.gaussian_matrix(cfg.r, cfg.num_experts, 0.0, 0.5);
    std::vector<Matrix> imgs = random_images(cfg, 2, 10);
    const std::vector<int> labels = {0, 2};
    std::vector<NodePtr> leaves;
    for (auto& [name, node] : m.params)
        leaves.push_back(node);
    auto build = [&] {
        VitForward fo = vit_forward(m, imgs);
        NodePtr loss = softmax_cross_entropy_mean(fo.logits, labels);
        for (int blk : fo.moe_block_ids)
            loss = add(loss, ortho_loss(m.blocks[blk].moe.basis, 0.01));
        return loss;
    };
    GradCheckReport rep = gradcheck(build, leaves, 1e-5, 2);
    EXPECT_GT(rep.entries_checked, 0);
    EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst.param << "[" << rep.worst.index << "]";
}
