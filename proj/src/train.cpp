#include "emoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>

#include "emoe/checkpoint.hpp"
#include "emoe/errors.hpp"

namespace emoe {

void Optimizer::step(std::map<std::string, NodePtr>& params, const GradMap& grads, double lr) {
    ++t;
    for (auto& [name, node] : params) {
        Matrix& w = node->value;
        const auto git = grads.find(name);
        // Leaves outside the step's graph (idle experts) carry zero gradient.
        const Matrix* g = git != grads.end() ? &git->second : nullptr;
        if (g && (g->rows != w.rows || g->cols != w.cols))
            throw ShapeError("optimizer: gradient " + g->shape_str() + " for parameter '" + name + "' " +
                             w.shape_str());
        if (kind == "adam") {
            Matrix& mm = m.try_emplace(name, Matrix::zeros(w.rows, w.cols)).first->second;
            Matrix& vv = v.try_emplace(name, Matrix::zeros(w.rows, w.cols)).first->second;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
            for (size_t i = 0; i < w.data.size(); ++i) {
                const double gi = g ? g->data[i] : 0.0;
                mm.data[i] = beta1 * mm.data[i] + (1.0 - beta1) * gi;
                vv.data[i] = beta2 * vv.data[i] + (1.0 - beta2) * gi * gi;
                w.data[i] -= lr * (mm.data[i] / bc1) / (std::sqrt(vv.data[i] / bc2) + adam_eps);
            }
        } else if (kind == "sgd-momentum") {
            Matrix& buf = m.try_emplace(name, Matrix::zeros(w.rows, w.cols)).first->second;
            for (size_t i = 0; i < w.data.size(); ++i) {
                const double gi = g ? g->data[i] : 0.0;
                buf.data[i] = momentum * buf.data[i] + gi;
                w.data[i] -= lr * buf.data[i];
            }
        } else {
            throw ParamError("optimizer: unknown kind '" + kind + "'");
        }
    }
}

void LoadStats::accumulate(const std::vector<int>& expert_index, const std::vector<int>& token_labels) {
    if (expert_index.size() != token_labels.size())
        throw ContractError("LoadStats: " + std::to_string(expert_index.size()) + " routed tokens vs " +
                            std::to_string(token_labels.size()) + " labels");
    for (size_t t = 0; t < expert_index.size(); ++t) {
        const int k = expert_index[t];
        const int c = token_labels[t];
        if (k < 0 || k >= counts.rows)
            throw ContractError("LoadStats: expert index " + std::to_string(k) + " outside K=" +
                                std::to_string(counts.rows));
        if (c < 0 || c >= counts.cols)
            throw ContractError("LoadStats: label " + std::to_string(c) + " outside " +
                                std::to_string(counts.cols) + " classes");
        counts(k, c) += 1.0;
        ++tokens_seen;
    }
}

void LoadStats::merge(const LoadStats& other) {
    if (counts.rows == 0) {
        *this = other;
        return;
    }
    if (other.counts.rows != counts.rows || other.counts.cols != counts.cols)
        throw ShapeError("LoadStats: merge " + other.counts.shape_str() + " into " + counts.shape_str());
    for (size_t i = 0; i < counts.data.size(); ++i)
        counts.data[i] += other.counts.data[i];
    tokens_seen += other.tokens_seen;
}

BalanceMetrics balance_metrics(const LoadStats& stats) {
    if (stats.tokens_seen <= 0 || stats.counts.rows == 0)
        throw ContractError("balance_metrics: no routed tokens accumulated");
    const int k = stats.counts.rows;
    std::vector<double> m(k, 0.0);
    double total = 0.0;
    for (int e = 0; e < k; ++e)
        for (int c = 0; c < stats.counts.cols; ++c) {
            m[e] += stats.counts(e, c);
            total += stats.counts(e, c);
        }
    BalanceMetrics bm;
    const double mx = *std::max_element(m.begin(), m.end());
    const double mn = *std::min_element(m.begin(), m.end());
    bm.max_min_ratio = mn > 0.0 ? mx / mn : std::numeric_limits<double>::infinity();
    double h = 0.0;
    for (double v : m)
        if (v > 0.0) {
            const double p = v / total;
            h -= p * std::log(p);
        }
    bm.entropy = k > 1 ? h / std::log(static_cast<double>(k)) : 1.0;
    const double mean = total / k;
    double var = 0.0;
    for (double v : m)
        var += (v - mean) * (v - mean);
    var /= k;
    bm.cv = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
    return bm;
}

TokenModel make_token_model(const RunConfig& cfg, Rng& rng) {
    TokenModel tm;
    tm.dim = cfg.data.dim;
    tm.num_classes = cfg.data.num_clusters;
    const int d_h = cfg.model.expert_hidden > 0 ? cfg.model.expert_hidden : tm.dim / 2;
    const RouterKind kind = cfg.model.uses_gate_router() ? RouterKind::gate : RouterKind::eigen;
    Rng init = rng.substream("init");
    tm.moe = make_moe_layer(tm.dim, d_h, cfg.model.r, cfg.model.num_experts, init, "moe", kind);
    tm.moe.params.tau = cfg.model.tau;
    tm.moe.params.eps = cfg.model.eps;
    tm.moe.gate.tau = cfg.model.tau;
    tm.moe.scale_by_gate = cfg.model.scale_by_gate;
    tm.head_w = make_leaf(init.gaussian_matrix(tm.dim, tm.num_classes, 0.0, 0.02), "head.w");
    tm.head_b = make_leaf(Matrix::zeros(1, tm.num_classes), "head.b");

    if (kind == RouterKind::eigen) {
        tm.params[tm.moe.basis.U->name] = tm.moe.basis.U;
        tm.params[tm.moe.params.gamma->name] = tm.moe.params.gamma;
        tm.params[tm.moe.params.pi->name] = tm.moe.params.pi;
        tm.params[tm.moe.params.bias->name] = tm.moe.params.bias;
    } else {
        tm.params[tm.moe.gate.w->name] = tm.moe.gate.w;
        tm.params[tm.moe.gate.b->name] = tm.moe.gate.b;
    }
    tm.params[tm.moe.alpha->name] = tm.moe.alpha;
    for (const Expert& e : tm.moe.experts) {
        tm.params[e.w_in->name] = e.w_in;
        tm.params[e.b_in->name] = e.b_in;
        tm.params[e.w_out->name] = e.w_out;
        tm.params[e.b_out->name] = e.b_out;
    }
    tm.params[tm.head_w->name] = tm.head_w;
    tm.params[tm.head_b->name] = tm.head_b;
    return tm;
}

TokenForward token_forward(const TokenModel& model, const Matrix& tokens) {
    TokenForward tf;
    MoEOut moe = moe_forward(model.moe, make_constant(tokens));
    tf.features = moe.out;
    tf.routing = moe.routing;
    tf.logits = add_row(matmul(tf.features, model.head_w), model.head_b);
    return tf;
}

std::vector<int> balanced_subset(const std::vector<int>& labels, int per_class, int num_classes) {
    std::vector<int> taken(num_classes, 0);
    std::vector<int> out;
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < num_classes && taken[labels[i]] < per_class) {
            ++taken[labels[i]];
            out.push_back(static_cast<int>(i));
        }
    for (int c = 0; c < num_classes; ++c)
        if (taken[c] < per_class)
            throw ConfigError("balanced_subset: class " + std::to_string(c) + " has only " +
                              std::to_string(taken[c]) + " examples, need " + std::to_string(per_class));
    return out;
}

VitData build_vit_data(const LabeledImages& imgs, const std::vector<int>& indices, const Matrix& mean,
                       const Matrix& stddev, const ViTConfig& cfg) {
    if (imgs.h != cfg.image_size || imgs.w != cfg.image_size || imgs.c != cfg.channels)
        throw ConfigError("data/model mismatch: images are " + std::to_string(imgs.h) + "x" +
                          std::to_string(imgs.w) + "x" + std::to_string(imgs.c) + ", model expects " +
                          std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                          std::to_string(cfg.channels));
    VitData out;
    out.patches.reserve(indices.size());
    for (int idx : indices) {
        out.patches.push_back(
            extract_patches(normalize_image(imgs, idx, mean, stddev), imgs.h, imgs.w, imgs.c, cfg.patch_size));
        out.labels.push_back(imgs.labels[idx]);
    }
    out.num_classes = cfg.num_classes;
    return out;
}

void init_token_model_basis(TokenModel& model, const Matrix& warmup_tokens, Rng& rng) {
    if (model.moe.kind != RouterKind::eigen)
        return;
    Rng sub = rng.substream("basis-init");
    model.moe.basis.U->value =
        power_iteration_basis(empirical_covariance(warmup_tokens), model.moe.basis.r, sub);
}

void init_vit_bases(ModelState& model, const std::vector<Matrix>& warmup_patches, Rng& rng) {
    if (model.cfg.uses_gate_router() || model.cfg.moe_blocks.empty())
        return;
    Rng sub = rng.substream("basis-init");
    VitForward fo = vit_forward(model, warmup_patches);
    for (size_t m = 0; m < fo.moe_block_ids.size(); ++m) {
        std::vector<Matrix> rows;
        rows.reserve(fo.routing[m].size());
        int total = 0;
        for (const RoutingNodes& rn : fo.routing[m]) {
            rows.push_back(rn.input->value);
            total += rn.input->value.rows;
        }
        Matrix all(total, model.cfg.embed_dim);
        int at = 0;
        for (const Matrix& r : rows) {
            for (int i = 0; i < r.rows; ++i)
                for (int j = 0; j < r.cols; ++j)
                    all(at + i, j) = r(i, j);
            at += r.rows;
        }
        MoELayer& layer = model.blocks[fo.moe_block_ids[m]].moe;
        layer.basis.U->value = power_iteration_basis(empirical_covariance(all), layer.basis.r, sub);
    }
}

std::string format_metrics_line(int step, const StepLosses& losses, const BalanceMetrics& bm) {
    char buf[320];
    std::snprintf(buf, sizeof buf,
                  "step=%d loss=%.17g ce=%.17g ortho=%.17g lbl=%.17g ratio=%.17g entropy=%.17g cv=%.17g",
                  step, losses.total, losses.ce, losses.ortho, losses.lbl, bm.max_min_ratio, bm.entropy, bm.cv);
    return buf;
}

namespace {

void clear_leaf_grads(std::map<std::string, NodePtr>& params) {
    for (auto& [name, node] : params) {
        node->grad = Matrix();
        node->backward_done = false;
    }
}

double warmup_lr(const TrainConfig& tc, int step) {
    if (tc.warmup_steps <= 0 || step > tc.warmup_steps)
        return tc.lr;
    return tc.lr * static_cast<double>(step) / tc.warmup_steps;
}

void check_finite_or_snapshot(double total, int step, const RunConfig& cfg,
                              const std::map<std::string, NodePtr>& params,
                              const std::map<std::string, Matrix>& buffers) {
    if (std::isfinite(total))
        return;
    std::filesystem::create_directories(cfg.output_dir);
    const std::string snap = cfg.output_dir + "/diagnostic.ckpt";
    save_checkpoint(snap, canonical_config_text(cfg), params, buffers);
    throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                       "; parameter snapshot written to " + snap);
}

}  // namespace

TrainResult train_token_model(const RunConfig& cfg, TokenModel& model, const Matrix& tokens,
                              const std::vector<int>& labels, std::ostream* log) {
    const TrainConfig& tc = cfg.train;
    const bool eigen = !cfg.model.uses_gate_router();
    const bool use_lbl = cfg.model.uses_lbl();

    Rng master(tc.seed);
    init_token_model_basis(model, tokens, master);

    Optimizer opt;
    opt.kind = tc.optimizer;
    Rng shuffle_rng = master.substream("shuffle");
    std::vector<int> order(tokens.rows);
    for (int i = 0; i < tokens.rows; ++i)
        order[i] = i;
    shuffle_rng.shuffle(order);
    size_t cursor = 0;

    TrainResult res;
    LoadStats window(model.moe.k, model.num_classes);
    for (int step = 1; step <= tc.steps; ++step) {
        std::vector<int> batch_idx(tc.batch_size);
        for (int b = 0; b < tc.batch_size; ++b) {
            if (cursor == order.size()) {
                shuffle_rng.shuffle(order);
                cursor = 0;
            }
            batch_idx[b] = order[cursor++];
        }
        Matrix batch(tc.batch_size, tokens.cols);
        std::vector<int> batch_labels(tc.batch_size);
        for (int b = 0; b < tc.batch_size; ++b) {
            for (int j = 0; j < tokens.cols; ++j)
                batch(b, j) = tokens(batch_idx[b], j);
            batch_labels[b] = labels[batch_idx[b]];
        }

        TokenForward tf = token_forward(model, batch);
        NodePtr ce = softmax_cross_entropy_mean(tf.logits, batch_labels);
        NodePtr total = ce;
        NodePtr ortho, lbl_term;
        if (eigen && tc.lambda_ortho > 0.0) {
            ortho = ortho_loss(model.moe.basis, tc.lambda_ortho);
            total = add(total, ortho);
        }
        if (use_lbl && tc.lbl_coeff > 0.0) {
            lbl_term = scale(lbl_node(tf.routing.probs, tf.routing.expert_index), tc.lbl_coeff);
            total = add(total, lbl_term);
        }

        StepLosses losses;
        losses.total = total->value(0, 0);
        losses.ce = ce->value(0, 0);
        losses.ortho = ortho ? ortho->value(0, 0) : 0.0;
        losses.lbl = lbl_term ? lbl_term->value(0, 0) : 0.0;
        check_finite_or_snapshot(losses.total, step, cfg, model.params, model.buffers);

        GradMap grads = backward(total);
        opt.step(model.params, grads, warmup_lr(tc, step));
        clear_leaf_grads(model.params);
        if (eigen && step % tc.qr_interval == 0)
            reorthonormalize(model.moe.basis);

        window.accumulate(tf.routing.expert_index, batch_labels);
        res.final_losses = losses;
        res.steps_run = step;
        if (log && (step % tc.log_every == 0 || step == tc.steps)) {
            *log << format_metrics_line(step, losses, balance_metrics(window)) << "\n";
            window = LoadStats(model.moe.k, model.num_classes);
        }
    }

    res.final_stats = token_model_stats(model, tokens, labels);
    res.final_balance = balance_metrics(res.final_stats);
    res.final_accuracy = token_model_accuracy(model, tokens, labels);
    return res;
}

LoadStats token_model_stats(const TokenModel& model, const Matrix& tokens, const std::vector<int>& labels) {
    RoutingNodes rn = moe_route(model.moe, make_constant(tokens));
    LoadStats stats(model.moe.k, model.num_classes);
    stats.accumulate(rn.expert_index, labels);
    return stats;
}

double token_model_accuracy(const TokenModel& model, const Matrix& tokens, const std::vector<int>& labels) {
    TokenForward tf = token_forward(model, tokens);
    const std::vector<int> pred = argmax_rows(tf.logits->value);
    int hit = 0;
    for (size_t i = 0; i < pred.size(); ++i)
        hit += pred[i] == labels[i];
    return static_cast<double>(hit) / pred.size();
}

namespace {

// Shared per-step graph assembly for the ViT driver.
struct VitStep {
    StepLosses losses;
    NodePtr total;
    std::vector<std::vector<RoutingNodes>> routing;
    std::vector<int> moe_block_ids;
};

VitStep vit_losses(const RunConfig& cfg, ModelState& model, const std::vector<Matrix>& batch,
                   const std::vector<int>& batch_labels) {
    const bool eigen = !cfg.model.uses_gate_router();
    const bool use_lbl = cfg.model.uses_lbl();
    VitForward fo = vit_forward(model, batch);
    NodePtr ce = softmax_cross_entropy_mean(fo.logits, batch_labels);
    NodePtr total = ce;
    NodePtr ortho_sum, lbl_sum;
    if (eigen && cfg.train.lambda_ortho > 0.0)
        for (int blk : fo.moe_block_ids) {
            NodePtr term = ortho_loss(model.blocks[blk].moe.basis, cfg.train.lambda_ortho);
            ortho_sum = ortho_sum ? add(ortho_sum, term) : term;
        }
    if (use_lbl && cfg.train.lbl_coeff > 0.0)
        for (size_t m = 0; m < fo.moe_block_ids.size(); ++m) {
            // One LBL term per block over the whole batch's tokens.
            std::vector<NodePtr> probs;
            std::vector<int> idx;
            for (const RoutingNodes& rn : fo.routing[m]) {
                probs.push_back(rn.probs);
                idx.insert(idx.end(), rn.expert_index.begin(), rn.expert_index.end());
            }
            NodePtr term = scale(lbl_node(probs.size() == 1 ? probs[0] : concat_rows(probs), idx),
                                 cfg.train.lbl_coeff);
            lbl_sum = lbl_sum ? add(lbl_sum, term) : term;
        }
    if (ortho_sum)
        total = add(total, ortho_sum);
    if (lbl_sum)
        total = add(total, lbl_sum);

    VitStep out;
    out.total = total;
    out.losses.total = total->value(0, 0);
    out.losses.ce = ce->value(0, 0);
    out.losses.ortho = ortho_sum ? ortho_sum->value(0, 0) : 0.0;
    out.losses.lbl = lbl_sum ? lbl_sum->value(0, 0) : 0.0;
    out.routing = std::move(fo.routing);
    out.moe_block_ids = fo.moe_block_ids;
    return out;
}

}  // namespace

TrainResult train_vit_model(const RunConfig& cfg, ModelState& model, const VitData& train_data,
                            const VitData& test_data, std::ostream* log) {
    const TrainConfig& tc = cfg.train;
    const bool eigen = !cfg.model.uses_gate_router();
    if (train_data.patches.empty())
        throw ContractError("train: empty training set");

    Rng master(tc.seed);
    {
        // Warm-up basis alignment on the first batch-worth of images.
        const int warm = std::min<int>(tc.batch_size, static_cast<int>(train_data.patches.size()));
        std::vector<Matrix> warm_batch(train_data.patches.begin(), train_data.patches.begin() + warm);
        init_vit_bases(model, warm_batch, master);
    }

    Optimizer opt;
    opt.kind = tc.optimizer;
    Rng shuffle_rng = master.substream("shuffle");
    std::vector<int> order(train_data.patches.size());
    for (size_t i = 0; i < order.size(); ++i)
        order[i] = static_cast<int>(i);
    shuffle_rng.shuffle(order);
    size_t cursor = 0;

    const int patches_per_image = model.cfg.num_patches();
    TrainResult res;
    LoadStats window(model.cfg.num_experts, model.cfg.num_classes);
    const bool has_moe = !model.cfg.moe_blocks.empty();
    for (int step = 1; step <= tc.steps; ++step) {
        std::vector<Matrix> batch(tc.batch_size);
        std::vector<int> batch_labels(tc.batch_size);
        for (int b = 0; b < tc.batch_size; ++b) {
            if (cursor == order.size()) {
                shuffle_rng.shuffle(order);
                cursor = 0;
            }
            batch[b] = train_data.patches[order[cursor]];
            batch_labels[b] = train_data.labels[order[cursor]];
            ++cursor;
        }

        VitStep vs = vit_losses(cfg, model, batch, batch_labels);
        check_finite_or_snapshot(vs.losses.total, step, cfg, model.params, model.buffers);
        GradMap grads = backward(vs.total);
        opt.step(model.params, grads, warmup_lr(tc, step));
        clear_leaf_grads(model.params);
        if (eigen && step % tc.qr_interval == 0)
            for (int blk : vs.moe_block_ids)
                reorthonormalize(model.blocks[blk].moe.basis);

        if (has_moe)
            for (size_t m = 0; m < vs.routing.size(); ++m)
                for (size_t img = 0; img < vs.routing[m].size(); ++img) {
                    const std::vector<int> token_labels(patches_per_image, batch_labels[img]);
                    window.accumulate(vs.routing[m][img].expert_index, token_labels);
                }

        res.final_losses = vs.losses;
        res.steps_run = step;
        if (log && (step % tc.log_every == 0 || step == tc.steps)) {
            BalanceMetrics bm;
            if (window.tokens_seen > 0) {
                bm = balance_metrics(window);
                window = LoadStats(model.cfg.num_experts, model.cfg.num_classes);
            }
            *log << format_metrics_line(step, vs.losses, bm) << "\n";
        }
    }

    LoadStats eval_stats(model.cfg.num_experts, model.cfg.num_classes);
    res.final_accuracy = vit_eval_accuracy(model, test_data, 100, has_moe ? &eval_stats : nullptr);
    res.final_stats = eval_stats;
    if (eval_stats.tokens_seen > 0)
        res.final_balance = balance_metrics(eval_stats);
    return res;
}

double vit_eval_accuracy(const ModelState& model, const VitData& data, int eval_batch, LoadStats* stats_out) {
    if (data.patches.empty())
        throw ContractError("eval: empty dataset");
    const int patches_per_image = model.cfg.num_patches();
    int hit = 0;
    for (size_t at = 0; at < data.patches.size(); at += eval_batch) {
        const size_t end = std::min(data.patches.size(), at + eval_batch);
        std::vector<Matrix> batch(data.patches.begin() + at, data.patches.begin() + end);
        VitForward fo = vit_forward(model, batch);
        const std::vector<int> pred = argmax_rows(fo.logits->value);
        for (size_t i = 0; i < pred.size(); ++i)
            hit += pred[i] == data.labels[at + i];
        if (stats_out)
            for (size_t m = 0; m < fo.routing.size(); ++m)
                for (size_t img = 0; img < fo.routing[m].size(); ++img) {
                    const std::vector<int> token_labels(patches_per_image, data.labels[at + img]);
                    stats_out->accumulate(fo.routing[m][img].expert_index, token_labels);
                }
    }
    return static_cast<double>(hit) / data.patches.size();
}

Matrix vit_extract_features(const ModelState& model, const VitData& data, const std::vector<int>& indices,
                            int eval_batch) {
    Matrix out(static_cast<int>(indices.size()), model.cfg.embed_dim);
    for (size_t at = 0; at < indices.size(); at += eval_batch) {
        const size_t end = std::min(indices.size(), at + eval_batch);
        std::vector<Matrix> batch;
        batch.reserve(end - at);
        for (size_t i = at; i < end; ++i)
            batch.push_back(data.patches[indices[i]]);
        VitForward fo = vit_forward(model, batch);
        for (size_t i = at; i < end; ++i)
            for (int j = 0; j < out.cols; ++j)
                out(static_cast<int>(i), j) = fo.cls_features->value(static_cast<int>(i - at), j);
    }
    return out;
}

void write_heatmap_csv(const std::string& path, const Matrix& normalized,
                       const std::vector<std::string>& class_names) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw FormatError("heatmap: cannot write " + path);
    out << "expert";
    for (int c = 0; c < normalized.cols; ++c) {
        out << ",";
        out << (c < static_cast<int>(class_names.size()) ? class_names[c] : "class" + std::to_string(c));
    }
    out << "\n";
    char buf[40];
    for (int k = 0; k < normalized.rows; ++k) {
        out << k;
        for (int c = 0; c < normalized.cols; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", normalized(k, c));
            out << "," << buf;
        }
        out << "\n";
    }
}

void write_heatmap_pgm(const std::string& path, const Matrix& normalized, int cell) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw FormatError("heatmap: cannot write " + path);
    double mx = 0.0;
    for (double v : normalized.data)
        mx = std::max(mx, v);
    const int w = normalized.cols * cell, h = normalized.rows * cell;
    out << "P5\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> row(w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double v = normalized(y / cell, x / cell);
            row[x] = static_cast<uint8_t>(mx > 0.0 ? std::lround(255.0 * v / mx) : 0);
        }
        out.write(reinterpret_cast<const char*>(row.data()), w);
    }
}

}  // namespace emoe
