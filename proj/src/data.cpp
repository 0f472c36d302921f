#include "emoe/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "emoe/errors.hpp"
#include "emoe/router.hpp"

namespace emoe {

namespace {

constexpr int kCifarDim = 32;
constexpr int kCifarChannels = 3;
constexpr int kCifarRecord = 1 + kCifarDim * kCifarDim * kCifarChannels;  // 3073
constexpr int kCifarRecordsPerFile = 10000;

const char* kCifarNames[10] = {"airplane", "automobile", "bird",  "cat",  "deer",
                               "dog",      "frog",       "horse", "ship", "truck"};

}  // namespace

SyntheticSpec make_synthetic_spec(int num_clusters, int dim, int tokens_per_cluster, double center_scale,
                                  double within_variance, double noise_variance, uint64_t seed) {
    if (num_clusters < 1 || num_clusters > dim)
        throw ConfigError("synthetic: num_clusters " + std::to_string(num_clusters) + " must be in [1, dim=" +
                          std::to_string(dim) + "]");
    if (tokens_per_cluster < 1)
        throw ConfigError("synthetic: tokens_per_cluster must be >= 1");
    if (!(within_variance > 0.0) || !(noise_variance > 0.0))
        throw ConfigError("synthetic: variances must be positive");
    SyntheticSpec spec;
    spec.num_clusters = num_clusters;
    spec.dim = dim;
    spec.tokens_per_cluster = tokens_per_cluster;
    spec.center_scale = center_scale;
    spec.within_variance = within_variance;
    spec.noise_variance = noise_variance;
    spec.seed = seed;
    Rng rng = Rng(seed).substream("directions");
    spec.cluster_directions = transpose(qr_orthonormalize(rng.gaussian_matrix(dim, num_clusters, 0.0, 1.0)));
    return spec;
}

void gen_clustered_tokens(const SyntheticSpec& spec, Matrix* tokens, std::vector<int>* labels) {
    if (spec.cluster_directions.rows != spec.num_clusters || spec.cluster_directions.cols != spec.dim)
        throw ConfigError("synthetic: cluster_directions " + spec.cluster_directions.shape_str() +
                          " inconsistent with num_clusters/dim");
    if (orthonormality_defect(transpose(spec.cluster_directions)) > 1e-10)
        throw ConfigError("synthetic: cluster_directions are not mutually orthonormal");

    Rng rng = Rng(spec.seed).substream("tokens");
    const int total = spec.num_clusters * spec.tokens_per_cluster;
    *tokens = Matrix(total, spec.dim);
    labels->assign(total, 0);
    const double within_sd = std::sqrt(spec.within_variance);
    const double noise_sd = std::sqrt(spec.noise_variance);
    int t = 0;
    for (int cl = 0; cl < spec.num_clusters; ++cl)
        for (int i = 0; i < spec.tokens_per_cluster; ++i, ++t) {
            const double along = spec.center_scale + rng.gaussian(0.0, within_sd);
            for (int j = 0; j < spec.dim; ++j)
                (*tokens)(t, j) = along * spec.cluster_directions(cl, j) + rng.gaussian(0.0, noise_sd);
            (*labels)[t] = cl;
        }
}

LabeledImages load_cifar10_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cifar10: cannot open " + path);
    in.seekg(0, std::ios::end);
    const long long size = in.tellg();
    const long long expected = static_cast<long long>(kCifarRecord) * kCifarRecordsPerFile;
    if (size != expected)
        throw FormatError("cifar10: " + path + " holds " + std::to_string(size) + " bytes, expected " +
                          std::to_string(expected));
    in.seekg(0, std::ios::beg);

    std::vector<uint8_t> raw(static_cast<size_t>(size));
    in.read(reinterpret_cast<char*>(raw.data()), size);
    if (!in)
        throw FormatError("cifar10: short read on " + path);

    LabeledImages out;
    out.n = kCifarRecordsPerFile;
    out.h = kCifarDim;
    out.w = kCifarDim;
    out.c = kCifarChannels;
    out.class_names.assign(kCifarNames, kCifarNames + 10);
    out.pixels.resize(static_cast<size_t>(out.n) * out.h * out.w * out.c);
    out.labels.resize(out.n);
    const int plane = kCifarDim * kCifarDim;
    for (int i = 0; i < out.n; ++i) {
        const uint8_t* rec = raw.data() + static_cast<size_t>(i) * kCifarRecord;
        if (rec[0] > 9)
            throw FormatError("cifar10: corrupt record " + std::to_string(i) + " in " + path + ": label byte " +
                              std::to_string(rec[0]) + " > 9");
        out.labels[i] = rec[0];
        uint8_t* dst = out.pixels.data() + static_cast<size_t>(i) * plane * kCifarChannels;
        for (int p = 0; p < plane; ++p)
            for (int ch = 0; ch < kCifarChannels; ++ch)
                dst[p * kCifarChannels + ch] = rec[1 + ch * plane + p];
    }
    return out;
}

LabeledImages load_cifar10(const std::string& dir, bool train) {
    std::vector<std::string> files;
    if (train)
        for (int i = 1; i <= 5; ++i)
            files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    else
        files.push_back(dir + "/test_batch.bin");

    LabeledImages all;
    for (const std::string& f : files) {
        LabeledImages part = load_cifar10_file(f);
        if (all.n == 0) {
            all = std::move(part);
        } else {
            all.pixels.insert(all.pixels.end(), part.pixels.begin(), part.pixels.end());
            all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
            all.n += part.n;
        }
    }
    return all;
}

void write_synthetic_cifar(const std::string& dir, uint64_t seed) {
    std::filesystem::create_directories(dir);
    const int plane = kCifarDim * kCifarDim;
    // Class-dependent oriented gratings on distinct color ramps, plus pixel
    // noise: linearly separable enough to train on, nontrivial to memorize.
    auto write_file = [&](const std::string& path, Rng rng) {
        std::vector<uint8_t> buf(static_cast<size_t>(kCifarRecord) * kCifarRecordsPerFile);
        for (int i = 0; i < kCifarRecordsPerFile; ++i) {
            const int label = static_cast<int>(rng.below(10));
            uint8_t* rec = buf.data() + static_cast<size_t>(i) * kCifarRecord;
            rec[0] = static_cast<uint8_t>(label);
            const double angle = label * 0.31415926535897932;
            const double freq = 0.25 + 0.06 * label;
            const double phase = rng.uniform(0.0, 6.283185307179586);
            const double cr = 0.5 + 0.5 * std::sin(label * 1.7 + 0.3);
            const double cg = 0.5 + 0.5 * std::sin(label * 2.3 + 1.1);
            const double cb = 0.5 + 0.5 * std::sin(label * 2.9 + 2.2);
            const double chan_gain[3] = {cr, cg, cb};
            for (int y = 0; y < kCifarDim; ++y)
                for (int x = 0; x < kCifarDim; ++x) {
                    const double u = std::cos(angle) * x + std::sin(angle) * y;
                    const double wave = 0.5 + 0.5 * std::sin(freq * u + phase);
                    for (int ch = 0; ch < kCifarChannels; ++ch) {
                        double v = 255.0 * (0.25 + 0.5 * wave * chan_gain[ch]) + rng.gaussian(0.0, 12.0);
                        v = std::clamp(v, 0.0, 255.0);
                        rec[1 + ch * plane + y * kCifarDim + x] = static_cast<uint8_t>(std::lround(v));
                    }
                }
        }
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out)
            throw FormatError("write_synthetic_cifar: cannot write " + path);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    };
    for (int b = 1; b <= 5; ++b)
        write_file(dir + "/data_batch_" + std::to_string(b) + ".bin",
                   Rng(seed).substream("train" + std::to_string(b)));
    write_file(dir + "/test_batch.bin", Rng(seed).substream("test"));
}

void few_shot_split(const std::vector<int>& labels, int num_classes, int shots, uint64_t seed,
                    std::vector<int>* support, std::vector<int>* query) {
    if (shots < 1)
        throw ConfigError("few_shot_split: shots must be >= 1");
    std::vector<std::vector<int>> by_class(num_classes);
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw ContractError("few_shot_split: label out of range");
        by_class[labels[i]].push_back(static_cast<int>(i));
    }

    Rng rng = Rng(seed).substream("fewshot");
    support->clear();
    query->clear();
    for (int c = 0; c < num_classes; ++c) {
        if (static_cast<int>(by_class[c].size()) < shots)
            throw ConfigError("few_shot_split: class " + std::to_string(c) + " has only " +
                              std::to_string(by_class[c].size()) + " examples, need " + std::to_string(shots));
        rng.shuffle(by_class[c]);
        for (size_t i = 0; i < by_class[c].size(); ++i)
            (i < static_cast<size_t>(shots) ? support : query)->push_back(by_class[c][i]);
    }
    std::sort(support->begin(), support->end());
    std::sort(query->begin(), query->end());
}

void few_shot_split(const LabeledImages& data, int shots, uint64_t seed, std::vector<int>* support,
                    std::vector<int>* query) {
    few_shot_split(data.labels, count_classes(data), shots, seed, support, query);
}

void pixel_norm_constants(const LabeledImages& data, const std::vector<int>& indices, Matrix* mean, Matrix* std) {
    if (indices.empty())
        throw ContractError("pixel_norm_constants: no images");
    *mean = Matrix::zeros(1, data.c);
    *std = Matrix::zeros(1, data.c);
    const long long per_image = static_cast<long long>(data.h) * data.w;
    const double count = static_cast<double>(per_image) * indices.size();
    for (int idx : indices) {
        const uint8_t* img = data.image(idx);
        for (long long p = 0; p < per_image; ++p)
            for (int ch = 0; ch < data.c; ++ch)
                (*mean)(0, ch) += img[p * data.c + ch] / 255.0;
    }
    for (int ch = 0; ch < data.c; ++ch)
        (*mean)(0, ch) /= count;
    for (int idx : indices) {
        const uint8_t* img = data.image(idx);
        for (long long p = 0; p < per_image; ++p)
            for (int ch = 0; ch < data.c; ++ch) {
                const double d = img[p * data.c + ch] / 255.0 - (*mean)(0, ch);
                (*std)(0, ch) += d * d;
            }
    }
    for (int ch = 0; ch < data.c; ++ch) {
        (*std)(0, ch) = std::sqrt((*std)(0, ch) / count);
        if ((*std)(0, ch) < 1e-8)
            (*std)(0, ch) = 1.0;  // constant channel: leave it centered only
    }
}

std::vector<double> normalize_image(const LabeledImages& data, int index, const Matrix& mean, const Matrix& std) {
    if (index < 0 || index >= data.n)
        throw ContractError("normalize_image: index " + std::to_string(index) + " outside " +
                            std::to_string(data.n) + " images");
    const long long per_image = static_cast<long long>(data.h) * data.w;
    std::vector<double> out(static_cast<size_t>(per_image) * data.c);
    const uint8_t* img = data.image(index);
    for (long long p = 0; p < per_image; ++p)
        for (int ch = 0; ch < data.c; ++ch)
            out[p * data.c + ch] = (img[p * data.c + ch] / 255.0 - mean(0, ch)) / std(0, ch);
    return out;
}

int count_classes(const LabeledImages& data) {
    int num_classes = 0;
    for (int label : data.labels)
        num_classes = std::max(num_classes, label + 1);
    return num_classes;
}

}  // namespace emoe
