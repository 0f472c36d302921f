// emoe: train / eval / analyze / gradcheck / probe driver.
//
// Exit codes: 0 success, 2 config or data-format problem (including usage
// errors), 3 numerical failure (non-finite loss, degenerate basis),
// 1 gradient-check failure or unexpected error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "emoe/checkpoint.hpp"
#include "emoe/config.hpp"
#include "emoe/data.hpp"
#include "emoe/errors.hpp"
#include "emoe/gradcheck.hpp"
#include "emoe/probe.hpp"
#include "emoe/train.hpp"

namespace fs = std::filesystem;
using namespace emoe;

namespace {

struct Overrides {
    std::string config;
    std::string checkpoint;
    std::string out;
    std::string router;
    uint64_t seed = 0;
    bool seed_set = false;
    int shots = 0;
};

void apply_overrides(RunConfig& cfg, const Overrides& ov) {
    if (ov.seed_set)
        cfg.train.seed = ov.seed;
    if (!ov.router.empty())
        cfg.router = ov.router;
    if (!ov.out.empty())
        cfg.output_dir = ov.out;
    if (ov.shots > 0)
        cfg.data.shots = ov.shots;
    cfg.sync();
    cfg.validate();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Dataset assembly

struct SyntheticData {
    SyntheticSpec spec;
    Matrix tokens;
    std::vector<int> labels;
    std::vector<std::string> class_names;
};

SyntheticData make_synthetic(const RunConfig& cfg) {
    SyntheticData d;
    d.spec = make_synthetic_spec(cfg.data.num_clusters, cfg.data.dim, cfg.data.tokens_per_cluster,
                                 cfg.data.center_scale, cfg.data.within_variance, cfg.data.noise_variance,
                                 cfg.train.seed);
    gen_clustered_tokens(d.spec, &d.tokens, &d.labels);
    for (int c = 0; c < cfg.data.num_clusters; ++c)
        d.class_names.push_back("cluster" + std::to_string(c));
    return d;
}

struct CifarData {
    VitData train, test;
    Matrix mean, stddev;
    std::vector<std::string> class_names;
};

CifarData load_cifar(const RunConfig& cfg) {
    LabeledImages train_imgs = load_cifar10(cfg.data.path, true);
    LabeledImages test_imgs = load_cifar10(cfg.data.path, false);
    const int nc = cfg.model.num_classes;
    const int per_train = std::max(1, cfg.data.train_subset / nc);
    const int per_test = std::max(1, cfg.data.test_subset / nc);
    const std::vector<int> train_idx = balanced_subset(train_imgs.labels, per_train, nc);
    const std::vector<int> test_idx = balanced_subset(test_imgs.labels, per_test, nc);
    CifarData d;
    pixel_norm_constants(train_imgs, train_idx, &d.mean, &d.stddev);
    d.train = build_vit_data(train_imgs, train_idx, d.mean, d.stddev, cfg.model);
    d.test = build_vit_data(test_imgs, test_idx, d.mean, d.stddev, cfg.model);
    d.class_names = train_imgs.class_names;
    return d;
}

// ---------------------------------------------------------------------------
// Model restore

TokenModel restored_token_model(const RunConfig& cfg, const Checkpoint& ck) {
    Rng rng(cfg.train.seed);
    TokenModel model = make_token_model(cfg, rng);
    restore_tensors(model.params, model.buffers, ck);
    return model;
}

ModelState restored_vit(const RunConfig& cfg, const Checkpoint& ck) {
    Rng rng(cfg.train.seed);
    ModelState model = make_vit(cfg.model, rng);
    restore_model(model, ck);
    return model;
}

RunConfig config_for_checkpoint(const Overrides& ov) {
    RunConfig cfg;
    if (!ov.config.empty())
        cfg = parse_config_file(ov.config);
    else {
        Checkpoint probe_header = load_checkpoint(ov.checkpoint);
        cfg = parse_config_text(probe_header.config_text, ov.checkpoint + " (embedded config)");
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Heatmaps

Matrix column_normalized(const LoadStats& stats) {
    Matrix out = stats.counts;
    for (int c = 0; c < out.cols; ++c) {
        double total = 0.0;
        for (int k = 0; k < out.rows; ++k)
            total += out(k, c);
        if (total > 0.0)
            for (int k = 0; k < out.rows; ++k)
                out(k, c) /= total;
    }
    return out;
}

// Best-permutation diagonal mass: how expert-cluster aligned the routing is.
double best_diagonal_fraction(const Matrix& normalized) {
    const int k = normalized.rows;
    if (k != normalized.cols || k > 9)
        return -1.0;
    double total = 0.0;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
            total += normalized(i, j);
    if (total <= 0.0)
        return 0.0;
    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 0.0;
    do {
        double diag = 0.0;
        for (int c = 0; c < k; ++c)
            diag += normalized(perm[c], c);
        best = std::max(best, diag);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / total;
}

void emit_heatmap(const std::string& dir, const std::string& stem, const LoadStats& stats,
                  const std::vector<std::string>& class_names) {
    const Matrix norm = column_normalized(stats);
    write_heatmap_csv(dir + "/" + stem + ".csv", norm, class_names);
    write_heatmap_pgm(dir + "/" + stem + ".pgm", norm);
    const BalanceMetrics bm = balance_metrics(stats);
    std::cout << stem << ": tokens=" << stats.tokens_seen << " ratio=" << fmt(bm.max_min_ratio)
              << " entropy=" << fmt(bm.entropy) << " cv=" << fmt(bm.cv);
    const double diag = best_diagonal_fraction(norm);
    if (diag >= 0.0)
        std::cout << " diag_fraction=" << fmt(diag);
    std::cout << "\n";
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const Overrides& ov) {
    RunConfig cfg = parse_config_file(ov.config);
    apply_overrides(cfg, ov);
    fs::create_directories(cfg.output_dir);
    std::ofstream log(cfg.output_dir + "/metrics.log", std::ios::trunc);
    if (!log)
        throw ConfigError("train: cannot write " + cfg.output_dir + "/metrics.log");

    TrainResult res;
    std::string ckpt_path = cfg.output_dir + "/model.ckpt";
    if (cfg.data.kind == "synthetic") {
        SyntheticData d = make_synthetic(cfg);
        Rng rng(cfg.train.seed);
        TokenModel model = make_token_model(cfg, rng);
        res = train_token_model(cfg, model, d.tokens, d.labels, &log);
        save_checkpoint(ckpt_path, canonical_config_text(cfg), model.params, model.buffers);
        emit_heatmap(cfg.output_dir, "load", res.final_stats, d.class_names);
    } else {
        CifarData d = load_cifar(cfg);
        Rng rng(cfg.train.seed);
        ModelState model = make_vit(cfg.model, rng);
        model.buffers["norm.mean"] = d.mean;
        model.buffers["norm.std"] = d.stddev;
        res = train_vit_model(cfg, model, d.train, d.test, &log);
        save_checkpoint(ckpt_path, canonical_config_text(cfg), model.params, model.buffers);
        if (res.final_stats.tokens_seen > 0)
            emit_heatmap(cfg.output_dir, "load", res.final_stats, d.class_names);
    }
    std::cout << "train done: steps=" << res.steps_run << " loss=" << fmt(res.final_losses.total)
              << " ce=" << fmt(res.final_losses.ce) << " ortho=" << fmt(res.final_losses.ortho)
              << " lbl=" << fmt(res.final_losses.lbl) << " accuracy=" << fmt(res.final_accuracy) << "\n";
    std::cout << "checkpoint: " << ckpt_path << "\n";
    std::cout << "metrics: " << cfg.output_dir << "/metrics.log\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const Overrides& ov) {
    Checkpoint ck = load_checkpoint(ov.checkpoint);
    RunConfig cfg = config_for_checkpoint(ov);
    if (ov.seed_set)
        cfg.train.seed = ov.seed;
    cfg.sync();
    cfg.validate();

    if (cfg.data.kind == "synthetic") {
        TokenModel model = restored_token_model(cfg, ck);
        SyntheticData d = make_synthetic(cfg);
        TokenForward tf = token_forward(model, d.tokens);
        NodePtr ce = softmax_cross_entropy_mean(tf.logits, d.labels);
        const double acc = token_model_accuracy(model, d.tokens, d.labels);
        LoadStats stats = token_model_stats(model, d.tokens, d.labels);
        const BalanceMetrics bm = balance_metrics(stats);
        std::cout << "eval: n=" << d.tokens.rows << " loss=" << fmt(ce->value(0, 0)) << " accuracy=" << fmt(acc)
                  << " ratio=" << fmt(bm.max_min_ratio) << " entropy=" << fmt(bm.entropy) << " cv=" << fmt(bm.cv)
                  << "\n";
    } else {
        ModelState model = restored_vit(cfg, ck);
        CifarData d = load_cifar(cfg);
        const bool has_moe = !cfg.model.moe_blocks.empty();
        LoadStats stats(cfg.model.num_experts, cfg.model.num_classes);
        const double acc = vit_eval_accuracy(model, d.test, 100, has_moe ? &stats : nullptr);
        std::cout << "eval: n=" << d.test.patches.size() << " accuracy=" << fmt(acc);
        if (has_moe && stats.tokens_seen > 0) {
            const BalanceMetrics bm = balance_metrics(stats);
            std::cout << " ratio=" << fmt(bm.max_min_ratio) << " entropy=" << fmt(bm.entropy)
                      << " cv=" << fmt(bm.cv);
        }
        std::cout << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// analyze

int cmd_analyze(const Overrides& ov) {
    Checkpoint ck = load_checkpoint(ov.checkpoint);
    RunConfig cfg = config_for_checkpoint(ov);
    if (ov.seed_set)
        cfg.train.seed = ov.seed;
    if (!ov.out.empty())
        cfg.output_dir = ov.out;
    cfg.sync();
    cfg.validate();
    fs::create_directories(cfg.output_dir);

    if (cfg.data.kind == "synthetic") {
        TokenModel model = restored_token_model(cfg, ck);
        SyntheticData d = make_synthetic(cfg);
        LoadStats stats = token_model_stats(model, d.tokens, d.labels);
        emit_heatmap(cfg.output_dir, "load", stats, d.class_names);
        std::cout << "routed tokens: " << stats.tokens_seen << "\n";
        return 0;
    }

    ModelState model = restored_vit(cfg, ck);
    CifarData d = load_cifar(cfg);
    if (cfg.model.moe_blocks.empty()) {
        std::cout << "model has no MoE blocks; routed tokens: 0\n";
        return 0;
    }
    // Per-block tallies over the test split.
    std::vector<LoadStats> per_block;
    for (size_t m = 0; m < cfg.model.moe_blocks.size(); ++m)
        per_block.emplace_back(cfg.model.num_experts, cfg.model.num_classes);
    const int patches_per_image = cfg.model.num_patches();
    const int eval_batch = 100;
    for (size_t at = 0; at < d.test.patches.size(); at += eval_batch) {
        const size_t end = std::min(d.test.patches.size(), at + eval_batch);
        std::vector<Matrix> batch(d.test.patches.begin() + at, d.test.patches.begin() + end);
        VitForward fo = vit_forward(model, batch);
        for (size_t m = 0; m < fo.routing.size(); ++m)
            for (size_t img = 0; img < fo.routing[m].size(); ++img) {
                const std::vector<int> token_labels(patches_per_image, d.test.labels[at + img]);
                per_block[m].accumulate(fo.routing[m][img].expert_index, token_labels);
            }
    }
    long long routed = 0;
    for (size_t m = 0; m < per_block.size(); ++m) {
        emit_heatmap(cfg.output_dir, "load_block" + std::to_string(cfg.model.moe_blocks[m]), per_block[m],
                     d.class_names);
        routed += per_block[m].tokens_seen;
    }
    std::cout << "routed tokens: " << routed << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradSection {
    std::string name;
    GradCheckReport report;
};

GradSection gradcheck_eigen_router(double inject) {
    Rng rng(11);
    const int d = 10, r = 4, k = 5, n = 6;
    EigenBasis basis = make_basis(d, r, rng, "router.U");
    RouterParams params = make_router_params(r, k, rng, "router");
    params.pi->value = rng.gaussian_matrix(r, k, 0.0, 0.5);
    params.bias->value = rng.gaussian_matrix(1, k, 0.0, 0.1);
    const Matrix tokens = rng.gaussian_matrix(n, d, 0.0, 1.0);
    const Matrix probe_probs = rng.gaussian_matrix(n, k, 0.0, 1.0);

    std::vector<NodePtr> leaves = {basis.U, params.gamma, params.pi, params.bias};
    auto build = [&]() {
        RoutingNodes rn = route_nodes(make_constant(tokens), basis, params);
        NodePtr loss = sum_all(hadamard(rn.probs, make_constant(probe_probs)));
        loss = add(loss, scale(sum_all(rn.gate_score), 0.5));
        loss = add(loss, ortho_loss(basis, 0.7));
        return loss;
    };
    GradSection s{"eigen-router", gradcheck(build, leaves, 1e-5, 0, inject)};
    return s;
}

GradSection gradcheck_moe_layer(double inject) {
    Rng rng(12);
    const int d = 12, d_h = 5, r = 4, k = 4, n = 8;
    MoELayer layer = make_moe_layer(d, d_h, r, k, rng, "moe", RouterKind::eigen);
    layer.params.pi->value = rng.gaussian_matrix(r, k, 0.0, 0.5);
    const Matrix tokens = rng.gaussian_matrix(n, d, 0.0, 1.0);
    const Matrix probe_w = rng.gaussian_matrix(n, d, 0.0, 1.0);

    std::vector<NodePtr> leaves = {layer.basis.U, layer.params.gamma, layer.params.pi,
                                   layer.params.bias, layer.alpha};
    for (const Expert& e : layer.experts) {
        leaves.push_back(e.w_in);
        leaves.push_back(e.b_in);
        leaves.push_back(e.w_out);
        leaves.push_back(e.b_out);
    }
    auto build = [&]() {
        MoEOut mo = moe_forward(layer, make_constant(tokens));
        NodePtr loss = sum_all(hadamard(mo.out, make_constant(probe_w)));
        return loss;
    };
    GradSection s{"moe-layer", gradcheck(build, leaves, 1e-5, 0, inject)};
    return s;
}

GradSection gradcheck_backbone(double inject) {
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
    vc.router = "eigen";
    vc.validate();

    Rng rng(13);
    ModelState model = make_vit(vc, rng);
    // Spread the router so finite differences cannot flip any argmax.
    model.blocks[1].moe.params.pi->value = rng.gaussian_matrix(vc.r, vc.num_experts, 0.0, 0.5);

    std::vector<Matrix> images;
    for (int b = 0; b < 2; ++b)
        images.push_back(rng.gaussian_matrix(vc.num_patches(), vc.patch_dim(), 0.0, 1.0));
    const std::vector<int> labels = {0, 2};

    std::vector<NodePtr> leaves;
    for (auto& [name, node] : model.params)
        leaves.push_back(node);
    auto build = [&]() {
        VitForward fo = vit_forward(model, images);
        NodePtr loss = softmax_cross_entropy_mean(fo.logits, labels);
        for (int blk : fo.moe_block_ids)
            loss = add(loss, ortho_loss(model.blocks[blk].moe.basis, 0.01));
        return loss;
    };
    GradSection s{"backbone", gradcheck(build, leaves, 1e-5, 4, inject)};
    return s;
}

int cmd_gradcheck(const std::string& component, bool corrupt) {
    const double tol = 1e-4;
    const double inject = corrupt ? 0.05 : 0.0;
    std::vector<GradSection> sections;
    if (component.empty() || component == "eigen-router")
        sections.push_back(gradcheck_eigen_router(inject));
    if (component.empty() || component == "moe-layer")
        sections.push_back(gradcheck_moe_layer(inject));
    if (component.empty() || component == "backbone")
        sections.push_back(gradcheck_backbone(inject));
    if (sections.empty())
        throw ConfigError("gradcheck: unknown component '" + component +
                          "' (expected eigen-router, moe-layer, or backbone)");

    bool ok = true;
    for (const GradSection& s : sections) {
        const bool pass = s.report.pass(tol);
        ok = ok && pass;
        std::cout << "gradcheck " << s.name << ": entries=" << s.report.entries_checked
                  << " max_rel_err=" << fmt(s.report.max_rel_err) << " worst=" << s.report.worst.param << "["
                  << s.report.worst.index << "]" << (pass ? " PASS" : " FAIL") << "\n";
        if (!pass)
            std::cout << "  offending parameter: " << s.report.worst.param << " index " << s.report.worst.index
                      << " analytic=" << fmt(s.report.worst.analytic) << " numeric=" << fmt(s.report.worst.numeric)
                      << " rel_err=" << fmt(s.report.worst.rel_err) << " (tolerance " << fmt(tol) << ")\n";
    }
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// probe

int cmd_probe(const Overrides& ov) {
    Checkpoint ck = load_checkpoint(ov.checkpoint);
    RunConfig cfg = config_for_checkpoint(ov);
    if (ov.seed_set)
        cfg.train.seed = ov.seed;
    if (ov.shots > 0)
        cfg.data.shots = ov.shots;
    cfg.sync();
    cfg.validate();

    Matrix features;
    std::vector<int> labels;
    int num_classes = 0;
    if (cfg.data.kind == "synthetic") {
        TokenModel model = restored_token_model(cfg, ck);
        SyntheticData d = make_synthetic(cfg);
        TokenForward tf = token_forward(model, d.tokens);
        features = tf.features->value;
        labels = d.labels;
        num_classes = cfg.data.num_clusters;
    } else {
        ModelState model = restored_vit(cfg, ck);
        CifarData d = load_cifar(cfg);
        std::vector<int> all(d.test.patches.size());
        std::iota(all.begin(), all.end(), 0);
        features = vit_extract_features(model, d.test, all, 100);
        labels = d.test.labels;
        num_classes = cfg.model.num_classes;
    }

    std::vector<int> support, query;
    few_shot_split(labels, num_classes, cfg.data.shots, cfg.train.seed, &support, &query);
    ProbeResult pr = linear_probe(features, labels, support, query, num_classes);
    std::cout << "probe: shots=" << cfg.data.shots << " support=" << pr.support_size << " query=" << pr.query_size
              << " accuracy=" << fmt(pr.accuracy) << " iterations=" << pr.iterations
              << " degenerate=" << (pr.degenerate ? 1 : 0) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Eigenbasis-guided mixture-of-experts trainer"};
    app.require_subcommand(1);

    Overrides ov;
    std::string component;
    bool corrupt = false;

    CLI::App* train = app.add_subcommand("train", "Train a model and write checkpoint + metrics log");
    train->add_option("--config", ov.config, "Run configuration file")->required();
    train->add_option("--seed", ov.seed, "Override train.seed")->each([&](const std::string&) { ov.seed_set = true; });
    train->add_option("--router", ov.router, "Override router (eigen | gate | gate+lbl)");
    train->add_option("--out", ov.out, "Override output directory");

    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its dataset");
    eval->add_option("--checkpoint", ov.checkpoint, "Checkpoint path")->required();
    eval->add_option("--config", ov.config, "Config overriding the embedded one");
    eval->add_option("--seed", ov.seed, "Override train.seed")->each([&](const std::string&) { ov.seed_set = true; });

    CLI::App* analyze = app.add_subcommand("analyze", "Write expert-class heatmaps and balance summary");
    analyze->add_option("--checkpoint", ov.checkpoint, "Checkpoint path")->required();
    analyze->add_option("--config", ov.config, "Config overriding the embedded one");
    analyze->add_option("--seed", ov.seed, "Override train.seed")->each([&](const std::string&) { ov.seed_set = true; });
    analyze->add_option("--out", ov.out, "Output directory for heatmaps");

    CLI::App* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
    gradcheck_cmd->add_option("--component", component, "Only one of: eigen-router, moe-layer, backbone");
    gradcheck_cmd->add_flag("--corrupt", corrupt, "Inject an analytic-gradient offset (negative control)")
        ->group("");  // hidden

    CLI::App* probe = app.add_subcommand("probe", "Few-shot linear probe on frozen features");
    probe->add_option("--checkpoint", ov.checkpoint, "Checkpoint path")->required();
    probe->add_option("--config", ov.config, "Config overriding the embedded one");
    probe->add_option("--shots", ov.shots, "Support examples per class");
    probe->add_option("--seed", ov.seed, "Override the split seed")->each([&](const std::string&) { ov.seed_set = true; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (train->parsed())
            return cmd_train(ov);
        if (eval->parsed())
            return cmd_eval(ov);
        if (analyze->parsed())
            return cmd_analyze(ov);
        if (gradcheck_cmd->parsed())
            return cmd_gradcheck(component, corrupt);
        if (probe->parsed())
            return cmd_probe(ov);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const DegeneracyError& e) {
        std::cerr << "degeneracy error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
