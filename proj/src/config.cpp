#include "emoe/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "emoe/errors.hpp"

namespace emoe {

void TrainConfig::validate() const {
    if (!(lr > 0.0))
        throw ConfigError("train.lr must be positive");
    if (optimizer != "adam" && optimizer != "sgd-momentum")
        throw ConfigError("train.optimizer must be adam or sgd-momentum, got '" + optimizer + "'");
    if (batch_size < 1)
        throw ConfigError("train.batch_size must be >= 1");
    if (steps < 1)
        throw ConfigError("train.steps must be >= 1");
    if (!(lambda_ortho >= 0.0))
        throw ConfigError("train.lambda_ortho must be nonnegative");
    if (qr_interval < 1)
        throw ConfigError("train.qr_interval must be >= 1");
    if (!(lbl_coeff >= 0.0))
        throw ConfigError("train.lbl_coeff must be nonnegative");
    if (warmup_steps < 0)
        throw ConfigError("train.warmup_steps must be >= 0");
    if (log_every < 1)
        throw ConfigError("train.log_every must be >= 1");
}

void DataConfig::validate() const {
    if (kind != "synthetic" && kind != "cifar10")
        throw ConfigError("data.kind must be synthetic or cifar10, got '" + kind + "'");
    if (num_clusters < 1)
        throw ConfigError("data.num_clusters must be >= 1");
    if (dim < 1)
        throw ConfigError("data.dim must be >= 1");
    if (tokens_per_cluster < 1)
        throw ConfigError("data.tokens_per_cluster must be >= 1");
    if (!(within_variance > 0.0) || !(noise_variance > 0.0))
        throw ConfigError("data.within_variance and data.noise_variance must be positive");
    if (train_subset < 1 || test_subset < 1)
        throw ConfigError("data.train_subset and data.test_subset must be >= 1");
    if (shots < 1)
        throw ConfigError("data.shots must be >= 1");
}

void RunConfig::validate() const {
    if (router != "eigen" && router != "gate" && router != "gate+lbl")
        throw ConfigError("router must be eigen, gate, or gate+lbl, got '" + router + "'");
    if (output_dir.empty())
        throw ConfigError("output_dir must not be empty");
    model.validate();
    train.validate();
    data.validate();
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos)
        return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

long long parse_int(const std::string& v, const std::string& where) {
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || end != v.c_str() + v.size())
        throw ConfigError(where + ": expected an integer, got '" + v + "'");
    return x;
}

double parse_double(const std::string& v, const std::string& where) {
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size())
        throw ConfigError(where + ": expected a number, got '" + v + "'");
    return x;
}

bool parse_bool(const std::string& v, const std::string& where) {
    if (v == "true" || v == "on" || v == "1")
        return true;
    if (v == "false" || v == "off" || v == "0")
        return false;
    throw ConfigError(where + ": expected a boolean, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v, const std::string& where) {
    std::vector<int> out;
    if (trim(v).empty())
        return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        out.push_back(static_cast<int>(parse_int(trim(item), where)));
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i)
            out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

}  // namespace

void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value,
                       const std::string& where) {
    const std::string w = where + " (" + key + ")";
    if (key == "router")
        cfg.router = value;
    else if (key == "output_dir")
        cfg.output_dir = value;
    else if (key == "model.image_size")
        cfg.model.image_size = static_cast<int>(parse_int(value, w));
    else if (key == "model.patch_size")
        cfg.model.patch_size = static_cast<int>(parse_int(value, w));
    else if (key == "model.channels")
        cfg.model.channels = static_cast<int>(parse_int(value, w));
    else if (key == "model.embed_dim")
        cfg.model.embed_dim = static_cast<int>(parse_int(value, w));
    else if (key == "model.depth")
        cfg.model.depth = static_cast<int>(parse_int(value, w));
    else if (key == "model.heads")
        cfg.model.heads = static_cast<int>(parse_int(value, w));
    else if (key == "model.mlp_hidden")
        cfg.model.mlp_hidden = static_cast<int>(parse_int(value, w));
    else if (key == "model.moe_blocks")
        cfg.model.moe_blocks = parse_int_list(value, w);
    else if (key == "model.num_classes")
        cfg.model.num_classes = static_cast<int>(parse_int(value, w));
    else if (key == "model.r")
        cfg.model.r = static_cast<int>(parse_int(value, w));
    else if (key == "model.num_experts")
        cfg.model.num_experts = static_cast<int>(parse_int(value, w));
    else if (key == "model.expert_hidden")
        cfg.model.expert_hidden = static_cast<int>(parse_int(value, w));
    else if (key == "model.tau")
        cfg.model.tau = parse_double(value, w);
    else if (key == "model.eps")
        cfg.model.eps = parse_double(value, w);
    else if (key == "model.scale_by_gate")
        cfg.model.scale_by_gate = parse_bool(value, w);
    else if (key == "train.lr")
        cfg.train.lr = parse_double(value, w);
    else if (key == "train.optimizer")
        cfg.train.optimizer = value;
    else if (key == "train.batch_size")
        cfg.train.batch_size = static_cast<int>(parse_int(value, w));
    else if (key == "train.steps")
        cfg.train.steps = static_cast<int>(parse_int(value, w));
    else if (key == "train.lambda_ortho")
        cfg.train.lambda_ortho = parse_double(value, w);
    else if (key == "train.qr_interval")
        cfg.train.qr_interval = static_cast<int>(parse_int(value, w));
    else if (key == "train.seed")
        cfg.train.seed = static_cast<uint64_t>(parse_int(value, w));
    else if (key == "train.lbl_coeff")
        cfg.train.lbl_coeff = parse_double(value, w);
    else if (key == "train.warmup_steps")
        cfg.train.warmup_steps = static_cast<int>(parse_int(value, w));
    else if (key == "train.log_every")
        cfg.train.log_every = static_cast<int>(parse_int(value, w));
    else if (key == "data.kind")
        cfg.data.kind = value;
    else if (key == "data.path")
        cfg.data.path = value;
    else if (key == "data.num_clusters")
        cfg.data.num_clusters = static_cast<int>(parse_int(value, w));
    else if (key == "data.dim")
        cfg.data.dim = static_cast<int>(parse_int(value, w));
    else if (key == "data.tokens_per_cluster")
        cfg.data.tokens_per_cluster = static_cast<int>(parse_int(value, w));
    else if (key == "data.center_scale")
        cfg.data.center_scale = parse_double(value, w);
    else if (key == "data.within_variance")
        cfg.data.within_variance = parse_double(value, w);
    else if (key == "data.noise_variance")
        cfg.data.noise_variance = parse_double(value, w);
    else if (key == "data.train_subset")
        cfg.data.train_subset = static_cast<int>(parse_int(value, w));
    else if (key == "data.test_subset")
        cfg.data.test_subset = static_cast<int>(parse_int(value, w));
    else if (key == "data.shots")
        cfg.data.shots = static_cast<int>(parse_int(value, w));
    else
        throw ConfigError(where + ": unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text, const std::string& source_name) {
    RunConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos)
            line = line.substr(0, hash);
        line = trim(line);
        if (line.empty())
            continue;
        const std::string where = source_name + ":" + std::to_string(lineno);
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError(where + ": empty key");
        apply_config_line(cfg, key, value, where);
    }
    cfg.sync();
    cfg.validate();
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

std::string canonical_config_text(const RunConfig& cfg) {
    std::string out;
    auto kv = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
    kv("router", cfg.router);
    kv("output_dir", cfg.output_dir);
    kv("model.image_size", std::to_string(cfg.model.image_size));
    kv("model.patch_size", std::to_string(cfg.model.patch_size));
    kv("model.channels", std::to_string(cfg.model.channels));
    kv("model.embed_dim", std::to_string(cfg.model.embed_dim));
    kv("model.depth", std::to_string(cfg.model.depth));
    kv("model.heads", std::to_string(cfg.model.heads));
    kv("model.mlp_hidden", std::to_string(cfg.model.mlp_hidden));
    kv("model.moe_blocks", fmt_int_list(cfg.model.moe_blocks));
    kv("model.num_classes", std::to_string(cfg.model.num_classes));
    kv("model.r", std::to_string(cfg.model.r));
    kv("model.num_experts", std::to_string(cfg.model.num_experts));
    kv("model.expert_hidden", std::to_string(cfg.model.expert_hidden));
    kv("model.tau", fmt_double(cfg.model.tau));
    kv("model.eps", fmt_double(cfg.model.eps));
    kv("model.scale_by_gate", cfg.model.scale_by_gate ? "true" : "false");
    kv("train.lr", fmt_double(cfg.train.lr));
    kv("train.optimizer", cfg.train.optimizer);
    kv("train.batch_size", std::to_string(cfg.train.batch_size));
    kv("train.steps", std::to_string(cfg.train.steps));
    kv("train.lambda_ortho", fmt_double(cfg.train.lambda_ortho));
    kv("train.qr_interval", std::to_string(cfg.train.qr_interval));
    kv("train.seed", std::to_string(cfg.train.seed));
    kv("train.lbl_coeff", fmt_double(cfg.train.lbl_coeff));
    kv("train.warmup_steps", std::to_string(cfg.train.warmup_steps));
    kv("train.log_every", std::to_string(cfg.train.log_every));
    kv("data.kind", cfg.data.kind);
    kv("data.path", cfg.data.path);
    kv("data.num_clusters", std::to_string(cfg.data.num_clusters));
    kv("data.dim", std::to_string(cfg.data.dim));
    kv("data.tokens_per_cluster", std::to_string(cfg.data.tokens_per_cluster));
    kv("data.center_scale", fmt_double(cfg.data.center_scale));
    kv("data.within_variance", fmt_double(cfg.data.within_variance));
    kv("data.noise_variance", fmt_double(cfg.data.noise_variance));
    kv("data.train_subset", std::to_string(cfg.data.train_subset));
    kv("data.test_subset", std::to_string(cfg.data.test_subset));
    kv("data.shots", std::to_string(cfg.data.shots));
    return out;
}

}  // namespace emoe
