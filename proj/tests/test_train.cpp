#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "emoe/checkpoint.hpp"
#include "emoe/data.hpp"
#include "emoe/errors.hpp"
#include "emoe/graph.hpp"
#include "emoe/probe.hpp"
#include "emoe/router.hpp"
#include "emoe/train.hpp"

namespace emoe {
namespace {

Matrix from_rows2(std::initializer_list<std::initializer_list<double>> rows) {
    return Matrix::from_rows(rows);
}

// ---------------------------------------------------------------- optimizer

TEST(Optimizer, AdamFirstStepClosedForm) {
    auto w = make_leaf(Matrix::zeros(2, 2), "w");
    std::map<std::string, NodePtr> params{{"w", w}};
    GradMap grads;
    grads["w"] = from_rows2({{1.0, -2.0}, {3.0, 0.5}});

    Optimizer opt;
    const double lr = 0.1;
    opt.step(params, grads, lr);

    // With zero state the bias corrections cancel: step = lr * g / (|g| + eps).
    for (size_t i = 0; i < w->value.data.size(); ++i) {
        const double g = grads["w"].data[i];
        const double expect = -lr * g / (std::fabs(g) + opt.adam_eps);
        EXPECT_NEAR(w->value.data[i], expect, 1e-15) << "entry " << i;
    }
    EXPECT_EQ(opt.t, 1);
}

TEST(Optimizer, ZeroLearningRateIsNoOp) {
    const Matrix start = from_rows2({{0.3, -1.2}, {2.5, 0.0}});
    auto w = make_leaf(start, "w");
    std::map<std::string, NodePtr> params{{"w", w}};
    GradMap grads;
    grads["w"] = from_rows2({{5.0, 5.0}, {5.0, 5.0}});

    for (const char* kind : {"adam", "sgd-momentum"}) {
        Optimizer opt;
        opt.kind = kind;
        opt.step(params, grads, 0.0);
        for (size_t i = 0; i < start.data.size(); ++i)
            EXPECT_EQ(w->value.data[i], start.data[i]) << kind;
    }
}

TEST(Optimizer, SgdMomentumTwoStepsClosedForm) {
    auto w = make_leaf(Matrix::zeros(1, 2), "w");
    std::map<std::string, NodePtr> params{{"w", w}};
    const Matrix g1 = from_rows2({{1.0, -4.0}});
    const Matrix g2 = from_rows2({{2.0, 1.0}});

    Optimizer opt;
    opt.kind = "sgd-momentum";
    const double lr = 0.01, mu = opt.momentum;
    GradMap grads;
    grads["w"] = g1;
    opt.step(params, grads, lr);
    grads["w"] = g2;
    opt.step(params, grads, lr);

    for (int j = 0; j < 2; ++j) {
        const double buf1 = g1(0, j);
        const double buf2 = mu * buf1 + g2(0, j);
        const double expect = -lr * buf1 - lr * buf2;
        EXPECT_NEAR(w->value(0, j), expect, 1e-15);
    }
}

TEST(Optimizer, MissingGradientTreatedAsZero) {
    const Matrix start = from_rows2({{1.0, 2.0}});
    auto w = make_leaf(start, "idle");
    std::map<std::string, NodePtr> params{{"idle", w}};
    GradMap grads;  // no entry for "idle"

    for (const char* kind : {"adam", "sgd-momentum"}) {
        Optimizer opt;
        opt.kind = kind;
        opt.step(params, grads, 0.5);
        opt.step(params, grads, 0.5);
        for (size_t i = 0; i < start.data.size(); ++i)
            EXPECT_EQ(w->value.data[i], start.data[i]) << kind;
    }
}

TEST(Optimizer, GradientShapeMismatchThrows) {
    auto w = make_leaf(Matrix::zeros(2, 2), "w");
    std::map<std::string, NodePtr> params{{"w", w}};
    GradMap grads;
    grads["w"] = Matrix::zeros(2, 3);
    Optimizer opt;
    EXPECT_THROW(opt.step(params, grads, 0.1), ShapeError);
}

TEST(Optimizer, UnknownKindThrows) {
    auto w = make_leaf(Matrix::zeros(1, 1), "w");
    std::map<std::string, NodePtr> params{{"w", w}};
    GradMap grads;
    grads["w"] = Matrix::zeros(1, 1);
    Optimizer opt;
    opt.kind = "rmsprop";
    EXPECT_THROW(opt.step(params, grads, 0.1), ParamError);
}

// ---------------------------------------------------------------- load stats

TEST(LoadStats, AccumulateCountsPerExpertAndClass) {
    LoadStats st(3, 2);
    st.accumulate({0, 0, 2, 1, 2, 2}, {0, 1, 1, 0, 1, 1});
    EXPECT_EQ(st.tokens_seen, 6);
    EXPECT_DOUBLE_EQ(st.counts(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(st.counts(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(st.counts(1, 0), 1.0);
    EXPECT_DOUBLE_EQ(st.counts(1, 1), 0.0);
    EXPECT_DOUBLE_EQ(st.counts(2, 1), 3.0);
}

TEST(LoadStats, MergeAddsAndAdoptsIntoEmpty) {
    LoadStats a(2, 2), b(2, 2);
    a.accumulate({0, 1}, {0, 1});
    b.accumulate({1, 1}, {0, 0});
    a.merge(b);
    EXPECT_EQ(a.tokens_seen, 4);
    EXPECT_DOUBLE_EQ(a.counts(1, 0), 2.0);

    LoadStats empty;
    empty.merge(a);
    EXPECT_EQ(empty.tokens_seen, 4);
    EXPECT_DOUBLE_EQ(empty.counts(1, 0), 2.0);

    LoadStats wrong(3, 2);
    EXPECT_THROW(a.merge(wrong), ShapeError);
}

TEST(LoadStats, RejectsOutOfRangeAndMismatchedInput) {
    LoadStats st(2, 3);
    EXPECT_THROW(st.accumulate({0, 1}, {0}), ContractError);
    EXPECT_THROW(st.accumulate({2}, {0}), ContractError);
    EXPECT_THROW(st.accumulate({-1}, {0}), ContractError);
    EXPECT_THROW(st.accumulate({0}, {3}), ContractError);
    EXPECT_THROW(st.accumulate({0}, {-1}), ContractError);
    EXPECT_EQ(st.tokens_seen, 0);
}

// ----------------------------------------------------------- balance metrics

TEST(BalanceMetrics, HandComputedLoads) {
    // Loads per expert: {6, 3, 3}.
    LoadStats st(3, 1);
    st.accumulate({0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2}, std::vector<int>(12, 0));
    const BalanceMetrics bm = balance_metrics(st);

    EXPECT_DOUBLE_EQ(bm.max_min_ratio, 2.0);
    const double h = -(0.5 * std::log(0.5) + 2 * 0.25 * std::log(0.25));
    EXPECT_NEAR(bm.entropy, h / std::log(3.0), 1e-15);
    // mean 4, variance ((6-4)^2 + 2*(3-4)^2)/3 = 2.
    EXPECT_NEAR(bm.cv, std::sqrt(2.0) / 4.0, 1e-15);
}

TEST(BalanceMetrics, UniformLoadsAreIdeal) {
    LoadStats st(4, 2);
    st.accumulate({0, 1, 2, 3, 0, 1, 2, 3}, {0, 0, 0, 0, 1, 1, 1, 1});
    const BalanceMetrics bm = balance_metrics(st);
    EXPECT_DOUBLE_EQ(bm.max_min_ratio, 1.0);
    EXPECT_DOUBLE_EQ(bm.entropy, 1.0);
    EXPECT_DOUBLE_EQ(bm.cv, 0.0);
}

TEST(BalanceMetrics, StarvedExpertGivesInfiniteRatio) {
    LoadStats st(3, 1);
    st.accumulate({0, 0, 1}, {0, 0, 0});  // expert 2 never used
    const BalanceMetrics bm = balance_metrics(st);
    EXPECT_TRUE(std::isinf(bm.max_min_ratio));
    EXPECT_LT(bm.entropy, 1.0);
    EXPECT_GT(bm.cv, 0.0);
}

TEST(BalanceMetrics, EmptyStatsThrow) {
    LoadStats st(3, 2);
    EXPECT_THROW(balance_metrics(st), ContractError);
    EXPECT_THROW(balance_metrics(LoadStats()), ContractError);
}

// --------------------------------------------------------------- token model

RunConfig token_cfg(const std::string& router) {
    RunConfig cfg;
    cfg.router = router;
    cfg.data.kind = "synthetic";
    cfg.data.num_clusters = 3;
    cfg.data.dim = 12;
    cfg.data.tokens_per_cluster = 20;
    cfg.data.center_scale = 3.0;
    cfg.data.within_variance = 0.25;
    cfg.data.noise_variance = 0.01;
    cfg.model.r = 4;
    cfg.model.num_experts = 3;
    cfg.model.expert_hidden = 6;
    cfg.train.lr = 1e-3;
    cfg.train.batch_size = 8;
    cfg.train.steps = 5;
    cfg.train.qr_interval = 10;
    cfg.train.warmup_steps = 0;
    cfg.train.log_every = 1;
    cfg.train.seed = 3;
    cfg.sync();
    return cfg;
}

void make_tokens(const RunConfig& cfg, Matrix* tokens, std::vector<int>* labels) {
    const SyntheticSpec spec =
        make_synthetic_spec(cfg.data.num_clusters, cfg.data.dim, cfg.data.tokens_per_cluster,
                            cfg.data.center_scale, cfg.data.within_variance, cfg.data.noise_variance,
                            cfg.train.seed);
    gen_clustered_tokens(spec, tokens, labels);
}

TEST(TokenModel, ParameterNamesFollowRouterKind) {
    RunConfig cfg = token_cfg("eigen");
    Rng rng(5);
    TokenModel tm = make_token_model(cfg, rng);
    EXPECT_EQ(tm.dim, 12);
    EXPECT_EQ(tm.num_classes, 3);
    EXPECT_TRUE(tm.params.count("moe.router.U"));
    EXPECT_TRUE(tm.params.count("moe.router.gamma"));
    EXPECT_TRUE(tm.params.count("moe.router.pi"));
    EXPECT_TRUE(tm.params.count("moe.router.bias"));
    EXPECT_TRUE(tm.params.count("moe.alpha"));
    EXPECT_TRUE(tm.params.count("moe.expert0.w_in"));
    EXPECT_TRUE(tm.params.count("moe.expert2.b_out"));
    EXPECT_TRUE(tm.params.count("head.w"));
    EXPECT_TRUE(tm.params.count("head.b"));
    EXPECT_FALSE(tm.params.count("moe.gate.w"));

    RunConfig gcfg = token_cfg("gate");
    Rng grng(5);
    TokenModel gm = make_token_model(gcfg, grng);
    EXPECT_TRUE(gm.params.count("moe.gate.w"));
    EXPECT_TRUE(gm.params.count("moe.gate.b"));
    EXPECT_FALSE(gm.params.count("moe.router.U"));
}

TEST(TokenModel, ForwardShapes) {
    RunConfig cfg = token_cfg("eigen");
    Rng rng(5);
    TokenModel tm = make_token_model(cfg, rng);
    Matrix tokens;
    std::vector<int> labels;
    make_tokens(cfg, &tokens, &labels);

    const TokenForward tf = token_forward(tm, tokens);
    EXPECT_EQ(tf.logits->value.rows, tokens.rows);
    EXPECT_EQ(tf.logits->value.cols, 3);
    EXPECT_EQ(tf.features->value.rows, tokens.rows);
    EXPECT_EQ(tf.features->value.cols, 12);
    EXPECT_EQ(static_cast<int>(tf.routing.expert_index.size()), tokens.rows);
}

// ---------------------------------------------------------------- training

TEST(TrainTokenModel, LossCompositionEigen) {
    RunConfig cfg = token_cfg("eigen");
    cfg.train.lambda_ortho = 0.01;
    Rng rng(cfg.train.seed);
    TokenModel tm = make_token_model(cfg, rng);
    Matrix tokens;
    std::vector<int> labels;
    make_tokens(cfg, &tokens, &labels);

    const TrainResult res = train_token_model(cfg, tm, tokens, labels, nullptr);
    EXPECT_EQ(res.steps_run, cfg.train.steps);
    EXPECT_DOUBLE_EQ(res.final_losses.lbl, 0.0);
    EXPECT_GE(res.final_losses.ortho, 0.0);
    EXPECT_NEAR(res.final_losses.total, res.final_losses.ce + res.final_losses.ortho + res.final_losses.lbl,
                1e-12);
}

TEST(TrainTokenModel, LossCompositionGateLbl) {
    RunConfig cfg = token_cfg("gate+lbl");
    cfg.train.lbl_coeff = 0.01;
    Rng rng(cfg.train.seed);
    TokenModel tm = make_token_model(cfg, rng);
    Matrix tokens;
    std::vector<int> labels;
    make_tokens(cfg, &tokens, &labels);

    const TrainResult res = train_token_model(cfg, tm, tokens, labels, nullptr);
    EXPECT_DOUBLE_EQ(res.final_losses.ortho, 0.0);
    EXPECT_GT(res.final_losses.lbl, 0.0);  // coeff * K * sum f_k P_k > 0
    EXPECT_NEAR(res.final_losses.total, res.final_losses.ce + res.final_losses.lbl, 1e-12);
}

TEST(TrainTokenModel, DeterministicAcrossRuns) {
    RunConfig cfg = token_cfg("eigen");
    cfg.train.steps = 100;
    cfg.train.log_every = 10;

    std::string logs[2];
    double head_checksum[2] = {0.0, 0.0};
    double acc[2] = {0.0, 0.0};
    for (int run = 0; run < 2; ++run) {
        Rng rng(cfg.train.seed);
        TokenModel tm = make_token_model(cfg, rng);
        Matrix tokens;
        std::vector<int> labels;
        make_tokens(cfg, &tokens, &labels);
        std::ostringstream log;
        const TrainResult res = train_token_model(cfg, tm, tokens, labels, &log);
        logs[run] = log.str();
        acc[run] = res.final_accuracy;
        for (double v : tm.params.at("head.w")->value.data)
            head_checksum[run] += v;
    }
    EXPECT_FALSE(logs[0].empty());
    EXPECT_EQ(logs[0], logs[1]);
    EXPECT_EQ(head_checksum[0], head_checksum[1]);
    EXPECT_EQ(acc[0], acc[1]);
    EXPECT_EQ(std::count(logs[0].begin(), logs[0].end(), '\n'), 10);
}

TEST(TrainTokenModel, QrMaintenanceKeepsBasisOrthonormal) {
    RunConfig cfg = token_cfg("eigen");
    cfg.train.steps = 50;
    cfg.train.qr_interval = 10;
    cfg.train.lr = 1e-2;  // large enough to drift the basis between QR passes
    Rng rng(cfg.train.seed);
    TokenModel tm = make_token_model(cfg, rng);
    Matrix tokens;
    std::vector<int> labels;
    make_tokens(cfg, &tokens, &labels);

    train_token_model(cfg, tm, tokens, labels, nullptr);
    EXPECT_LT(orthonormality_defect(tm.moe.basis.U->value), 1e-10);
}

TEST(TrainTokenModel, FinalStatsCoverWholeDataset) {
    RunConfig cfg = token_cfg("eigen");
    Rng rng(cfg.train.seed);
    TokenModel tm = make_token_model(cfg, rng);
    Matrix tokens;
    std::vector<int> labels;
    make_tokens(cfg, &tokens, &labels);

    const TrainResult res = train_token_model(cfg, tm, tokens, labels, nullptr);
    EXPECT_EQ(res.final_stats.tokens_seen, tokens.rows);
    for (int c = 0; c < cfg.data.num_clusters; ++c) {
        double col = 0.0;
        for (int k = 0; k < cfg.model.num_experts; ++k)
            col += res.final_stats.counts(k, c);
        EXPECT_DOUBLE_EQ(col, cfg.data.tokens_per_cluster) << "class " << c;
    }
    EXPECT_GE(res.final_accuracy, 0.0);
    EXPECT_LE(res.final_accuracy, 1.0);
}

TEST(TrainTokenModel, WarmupScalesDownEarlySteps) {
    Matrix tokens;
    std::vector<int> labels;

    double delta[2] = {0.0, 0.0};
    const int warmups[2] = {0, 1000};
    for (int i = 0; i < 2; ++i) {
        RunConfig cfg = token_cfg("eigen");
        cfg.train.steps = 1;
        cfg.train.lr = 0.1;
        cfg.train.warmup_steps = warmups[i];
        make_tokens(cfg, &tokens, &labels);
        Rng rng(cfg.train.seed);
        TokenModel tm = make_token_model(cfg, rng);
        const Matrix before = tm.params.at("head.w")->value;
        train_token_model(cfg, tm, tokens, labels, nullptr);
        const Matrix& after = tm.params.at("head.w")->value;
        for (size_t j = 0; j < before.data.size(); ++j)
            delta[i] = std::max(delta[i], std::fabs(after.data[j] - before.data[j]));
    }
    EXPECT_GT(delta[0], 0.0);
    // Adam steps scale linearly with lr; warmup at step 1/1000 shrinks them ~1000x.
    EXPECT_LT(delta[1], delta[0] / 100.0);
}

TEST(TrainTokenModel, OrthoPenaltyPullsPerturbedBasisBack) {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        Matrix u = qr_orthonormalize(rng.gaussian_matrix(10, 4));
        const Matrix bump = rng.gaussian_matrix(10, 4, 0.0, 0.05);
        for (size_t i = 0; i < u.data.size(); ++i)
            u.data[i] += bump.data[i];
        const double defect0 = orthonormality_defect(u);
        ASSERT_GT(defect0, 1e-3);

        EigenBasis basis;
        basis.d = 10;
        basis.r = 4;
        basis.U = make_leaf(u, "U");
        for (int it = 0; it < 200; ++it) {
            NodePtr loss = ortho_loss(basis, 1.0);
            GradMap grads = backward(loss);
            const Matrix& g = grads.at("U");
            for (size_t i = 0; i < basis.U->value.data.size(); ++i)
                basis.U->value.data[i] -= 0.05 * g.data[i];
            basis.U->grad = Matrix();
            basis.U->backward_done = false;
        }
        EXPECT_LT(orthonormality_defect(basis.U->value), 0.1 * defect0) << "seed " << seed;
    }
}

TEST(TrainTokenModel, NonFiniteLossSnapshotsAndThrows) {
    RunConfig cfg = token_cfg("eigen");
    cfg.train.optimizer = "sgd-momentum";
    cfg.train.lr = 1e154;  // guaranteed overflow within a few steps
    cfg.train.steps = 10;
    cfg.train.lambda_ortho = 0.01;
    cfg.output_dir = (std::filesystem::temp_directory_path() / "emoe_train_blowup").string();
    std::filesystem::remove_all(cfg.output_dir);

    Rng rng(cfg.train.seed);
    TokenModel tm = make_token_model(cfg, rng);
    Matrix tokens;
    std::vector<int> labels;
    make_tokens(cfg, &tokens, &labels);

    EXPECT_THROW(train_token_model(cfg, tm, tokens, labels, nullptr), NumericError);
    const std::string snap = cfg.output_dir + "/diagnostic.ckpt";
    ASSERT_TRUE(std::filesystem::exists(snap));
    const Checkpoint ck = load_checkpoint(snap);
    EXPECT_FALSE(ck.config_text.empty());
    EXPECT_TRUE(ck.tensors.count("moe.router.U"));
    std::filesystem::remove_all(cfg.output_dir);
}

// ------------------------------------------------------------- metrics line

TEST(MetricsLine, FormatIsStable) {
    StepLosses losses;
    losses.total = 1.5;
    losses.ce = 1.0;
    losses.ortho = 0.25;
    losses.lbl = 0.25;
    BalanceMetrics bm;
    bm.max_min_ratio = 2.0;
    bm.entropy = 0.75;
    bm.cv = 0.5;
    EXPECT_EQ(format_metrics_line(7, losses, bm),
              "step=7 loss=1.5 ce=1 ortho=0.25 lbl=0.25 ratio=2 entropy=0.75 cv=0.5");

    losses.total = 1.0 / 3.0;
    const std::string line = format_metrics_line(1, losses, bm);
    EXPECT_NE(line.find("loss=0.33333333333333331"), std::string::npos);
}

// ----------------------------------------------------------------- heatmaps

TEST(Heatmap, CsvGolden) {
    const auto path = (std::filesystem::temp_directory_path() / "emoe_heat.csv").string();
    write_heatmap_csv(path, from_rows2({{0.25, 1.0}, {0.75, 0.0}}), {"a", "b"});
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(ss.str(), "expert,a,b\n0,0.25,1\n1,0.75,0\n");
    std::filesystem::remove(path);
}

TEST(Heatmap, CsvFallsBackToNumberedClassNames) {
    const auto path = (std::filesystem::temp_directory_path() / "emoe_heat2.csv").string();
    write_heatmap_csv(path, from_rows2({{1.0, 0.0, 0.0}}), {"only"});
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "expert,only,class1,class2");
    std::filesystem::remove(path);
}

TEST(Heatmap, PgmHeaderAndScaling) {
    const auto path = (std::filesystem::temp_directory_path() / "emoe_heat.pgm").string();
    write_heatmap_pgm(path, from_rows2({{0.5, 0.0, 1.0}, {0.25, 0.75, 0.0}}), 4);

    std::ifstream in(path, std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    in >> magic >> w >> h >> maxv;
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(w, 12);
    EXPECT_EQ(h, 8);
    EXPECT_EQ(maxv, 255);
    in.get();  // single whitespace after header
    std::vector<uint8_t> px(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(px.data()), px.size());
    ASSERT_TRUE(in.good());
    EXPECT_EQ(px[0 * w + 0], 128);        // 0.5 of max 1.0
    EXPECT_EQ(px[0 * w + 8], 255);        // cell (0,2) holds the max
    EXPECT_EQ(px[7 * w + 11], 0);         // cell (1,2) is zero
    EXPECT_EQ(px[4 * w + 4], 191);        // 0.75 rounds to 191
    std::filesystem::remove(path);
}

// ----------------------------------------------------------------- vit glue

LabeledImages make_images(int n, int side, int channels, int num_classes, uint64_t salt) {
    LabeledImages im;
    im.n = n;
    im.h = side;
    im.w = side;
    im.c = channels;
    im.pixels.resize(static_cast<size_t>(n) * side * side * channels);
    for (size_t i = 0; i < im.pixels.size(); ++i)
        im.pixels[i] = static_cast<uint8_t>((i * 37 + salt * 11 + i / 7) % 256);
    for (int i = 0; i < n; ++i)
        im.labels.push_back(i % num_classes);
    for (int k = 0; k < num_classes; ++k)
        im.class_names.push_back("c" + std::to_string(k));
    return im;
}

ViTConfig tiny_vit_cfg() {
    ViTConfig vc;
    vc.image_size = 8;
    vc.patch_size = 4;
    vc.channels = 1;
    vc.embed_dim = 16;
    vc.depth = 2;
    vc.heads = 2;
    vc.mlp_hidden = 24;
    vc.moe_blocks = {1};
    vc.num_classes = 3;
    vc.r = 4;
    vc.num_experts = 3;
    vc.expert_hidden = 6;
    return vc;
}

TEST(VitGlue, BuildVitDataShapesAndMismatch) {
    const LabeledImages imgs = make_images(6, 8, 1, 3, 9);
    Matrix mean, sd;
    pixel_norm_constants(imgs, {0, 1, 2, 3, 4, 5}, &mean, &sd);

    const ViTConfig vc = tiny_vit_cfg();
    const VitData vd = build_vit_data(imgs, {1, 3, 5}, mean, sd, vc);
    EXPECT_EQ(vd.patches.size(), 3u);
    EXPECT_EQ(vd.patches[0].rows, 4);        // (8/4)^2 patches
    EXPECT_EQ(vd.patches[0].cols, 4 * 4 * 1);
    EXPECT_EQ(vd.labels, (std::vector<int>{1, 0, 2}));
    EXPECT_EQ(vd.num_classes, 3);

    ViTConfig wrong = vc;
    wrong.image_size = 16;
    try {
        build_vit_data(imgs, {0}, mean, sd, wrong);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("mismatch"), std::string::npos);
    }
}

TEST(VitGlue, BalancedSubsetScanOrder) {
    const std::vector<int> labels{0, 1, 0, 1, 2, 0, 2, 1, 2};
    EXPECT_EQ(balanced_subset(labels, 2, 3), (std::vector<int>{0, 1, 2, 3, 4, 6}));
    try {
        balanced_subset(labels, 4, 3);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("class 0"), std::string::npos);
    }
}

TEST(VitGlue, TrainVitModelSmoke) {
    RunConfig cfg;
    cfg.model = tiny_vit_cfg();
    cfg.router = "eigen";
    cfg.sync();
    cfg.train.steps = 6;
    cfg.train.batch_size = 4;
    cfg.train.lr = 3e-4;
    cfg.train.warmup_steps = 0;
    cfg.train.log_every = 2;
    cfg.train.qr_interval = 3;
    cfg.train.seed = 11;

    const LabeledImages train_imgs = make_images(30, 8, 1, 3, 1);
    const LabeledImages test_imgs = make_images(12, 8, 1, 3, 2);
    std::vector<int> all_train(train_imgs.n), all_test(test_imgs.n);
    for (int i = 0; i < train_imgs.n; ++i)
        all_train[i] = i;
    for (int i = 0; i < test_imgs.n; ++i)
        all_test[i] = i;
    Matrix mean, sd;
    pixel_norm_constants(train_imgs, all_train, &mean, &sd);
    const VitData train_data = build_vit_data(train_imgs, all_train, mean, sd, cfg.model);
    const VitData test_data = build_vit_data(test_imgs, all_test, mean, sd, cfg.model);

    std::string logs[2];
    double acc[2] = {-1.0, -2.0};
    for (int run = 0; run < 2; ++run) {
        Rng rng(cfg.train.seed);
        ModelState model = make_vit(cfg.model, rng);
        std::ostringstream log;
        const TrainResult res = train_vit_model(cfg, model, train_data, test_data, &log);
        logs[run] = log.str();
        acc[run] = res.final_accuracy;

        EXPECT_EQ(res.steps_run, 6);
        EXPECT_TRUE(std::isfinite(res.final_losses.total));
        EXPECT_GE(res.final_accuracy, 0.0);
        EXPECT_LE(res.final_accuracy, 1.0);
        // One MoE block, 12 test images, 4 routed patch tokens each.
        EXPECT_EQ(res.final_stats.tokens_seen, 48);
        EXPECT_LT(orthonormality_defect(model.blocks[1].moe.basis.U->value), 1e-10);
    }
    EXPECT_EQ(std::count(logs[0].begin(), logs[0].end(), '\n'), 3);
    EXPECT_EQ(logs[0], logs[1]);
    EXPECT_EQ(acc[0], acc[1]);
}

TEST(VitGlue, EvalAccuracyMatchesManualForward) {
    RunConfig cfg;
    cfg.model = tiny_vit_cfg();
    cfg.sync();
    const LabeledImages imgs = make_images(7, 8, 1, 3, 4);
    std::vector<int> all(imgs.n);
    for (int i = 0; i < imgs.n; ++i)
        all[i] = i;
    Matrix mean, sd;
    pixel_norm_constants(imgs, all, &mean, &sd);
    const VitData data = build_vit_data(imgs, all, mean, sd, cfg.model);

    Rng rng(21);
    const ModelState model = make_vit(cfg.model, rng);

    // Odd batch size exercises the ragged final batch.
    const double acc3 = vit_eval_accuracy(model, data, 3, nullptr);
    const double acc100 = vit_eval_accuracy(model, data, 100, nullptr);
    EXPECT_DOUBLE_EQ(acc3, acc100);

    int hit = 0;
    VitForward fo = vit_forward(model, data.patches);
    const std::vector<int> pred = argmax_rows(fo.logits->value);
    for (size_t i = 0; i < pred.size(); ++i)
        hit += pred[i] == data.labels[i];
    EXPECT_DOUBLE_EQ(acc100, static_cast<double>(hit) / imgs.n);
}

TEST(VitGlue, ExtractFeaturesMatchesClsFeatures) {
    RunConfig cfg;
    cfg.model = tiny_vit_cfg();
    cfg.sync();
    const LabeledImages imgs = make_images(5, 8, 1, 3, 6);
    std::vector<int> all(imgs.n);
    for (int i = 0; i < imgs.n; ++i)
        all[i] = i;
    Matrix mean, sd;
    pixel_norm_constants(imgs, all, &mean, &sd);
    const VitData data = build_vit_data(imgs, all, mean, sd, cfg.model);

    Rng rng(22);
    const ModelState model = make_vit(cfg.model, rng);
    const Matrix feats = vit_extract_features(model, data, {4, 0, 2}, 2);
    EXPECT_EQ(feats.rows, 3);
    EXPECT_EQ(feats.cols, 16);

    VitForward fo = vit_forward(model, {data.patches[4], data.patches[0], data.patches[2]});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 16; ++j)
            EXPECT_DOUBLE_EQ(feats(i, j), fo.cls_features->value(i, j)) << i << "," << j;
}

// -------------------------------------------------------------- linear probe

TEST(LinearProbe, SeparableFeaturesReachPerfectAccuracy) {
    Rng rng(31);
    const int n = 40;
    Matrix feats(n, 3);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
        const int cls = i % 2;
        labels[i] = cls;
        feats(i, 0) = (cls == 0 ? 3.0 : -3.0) + rng.gaussian(0.0, 0.3);
        feats(i, 1) = rng.gaussian(0.0, 1.0);
        feats(i, 2) = rng.gaussian(0.0, 1.0);
    }
    std::vector<int> support, query;
    few_shot_split(labels, 2, 5, 17, &support, &query);
    ASSERT_EQ(support.size(), 10u);
    ASSERT_EQ(query.size(), 30u);

    const ProbeResult res = linear_probe(feats, labels, support, query, 2);
    EXPECT_EQ(res.support_size, 10);
    EXPECT_EQ(res.query_size, 30);
    EXPECT_GT(res.iterations, 0);
    EXPECT_FALSE(res.degenerate);
    EXPECT_DOUBLE_EQ(res.accuracy, 1.0);
}

TEST(LinearProbe, ConstantFeatureSetsDegenerateFlag) {
    Rng rng(32);
    Matrix feats(20, 2);
    std::vector<int> labels(20);
    for (int i = 0; i < 20; ++i) {
        labels[i] = i % 2;
        feats(i, 0) = labels[i] == 0 ? 1.0 + rng.gaussian(0.0, 0.1) : -1.0 + rng.gaussian(0.0, 0.1);
        feats(i, 1) = 7.0;  // constant dimension
    }
    std::vector<int> support, query;
    few_shot_split(labels, 2, 3, 5, &support, &query);
    const ProbeResult res = linear_probe(feats, labels, support, query, 2);
    EXPECT_TRUE(res.degenerate);
    EXPECT_DOUBLE_EQ(res.accuracy, 1.0);
}

TEST(LinearProbe, RejectsEmptySplitsAndLabelMismatch) {
    const Matrix feats = Matrix::zeros(4, 2);
    const std::vector<int> labels{0, 1, 0, 1};
    std::vector<int> some{0, 1};
    EXPECT_THROW(linear_probe(feats, labels, {}, some, 2), ContractError);
    EXPECT_THROW(linear_probe(feats, labels, some, {}, 2), ContractError);
    EXPECT_THROW(linear_probe(feats, {0, 1}, some, some, 2), ShapeError);
}

}  // namespace
}  // namespace emoe
