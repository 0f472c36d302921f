#include "emoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "emoe/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace emoe {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'O', 'E'};

void write_u32(std::ofstream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ofstream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::ifstream& in, const std::string& path) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4))
        throw FormatError("checkpoint: truncated file " + path);
    return v;
}

uint64_t read_u64(std::ifstream& in, const std::string& path) {
    uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 8))
        throw FormatError("checkpoint: truncated file " + path);
    return v;
}

void write_tensor(std::ofstream& out, const std::string& name, const Matrix& m) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, static_cast<uint64_t>(m.rows));
    write_u64(out, static_cast<uint64_t>(m.cols));
    out.write(reinterpret_cast<const char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * 8));
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& config_text,
                     const std::map<std::string, NodePtr>& params,
                     const std::map<std::string, Matrix>& buffers) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw FormatError("checkpoint: cannot write " + path);
    out.write(kMagic, 4);
    write_u32(out, kCheckpointVersion);
    write_u64(out, config_text.size());
    out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
    write_u64(out, params.size() + buffers.size());
    for (const auto& [name, node] : params)
        write_tensor(out, name, node->value);
    for (const auto& [name, m] : buffers)
        write_tensor(out, name, m);
    if (!out)
        throw FormatError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("checkpoint: cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("checkpoint: " + path + " is not an EMOE checkpoint");
    const uint32_t version = read_u32(in, path);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: " + path + " has format version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
    Checkpoint ck;
    const uint64_t cfg_len = read_u64(in, path);
    ck.config_text.resize(cfg_len);
    if (cfg_len && !in.read(ck.config_text.data(), static_cast<std::streamsize>(cfg_len)))
        throw FormatError("checkpoint: truncated config text in " + path);
    const uint64_t count = read_u64(in, path);
    for (uint64_t i = 0; i < count; ++i) {
        const uint64_t name_len = read_u64(in, path);
        if (name_len > 4096)
            throw FormatError("checkpoint: implausible tensor name length in " + path);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), static_cast<std::streamsize>(name_len)))
            throw FormatError("checkpoint: truncated tensor name in " + path);
        const uint64_t rows = read_u64(in, path);
        const uint64_t cols = read_u64(in, path);
        if (rows == 0 || cols == 0 || rows * cols > (1ull << 32))
            throw FormatError("checkpoint: implausible tensor shape in " + path);
        Matrix m(static_cast<int>(rows), static_cast<int>(cols));
        if (!in.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * 8)))
            throw FormatError("checkpoint: truncated tensor data in " + path);
        if (ck.tensors.count(name))
            throw FormatError("checkpoint: duplicate tensor '" + name + "' in " + path);
        ck.tensors[name] = std::move(m);
    }
    return ck;
}

void restore_tensors(std::map<std::string, NodePtr>& params, std::map<std::string, Matrix>& buffers,
                     const Checkpoint& ck) {
    size_t expected = params.size() + buffers.size();
    if (ck.tensors.size() != expected)
        throw ConfigError("checkpoint/config mismatch: file holds " + std::to_string(ck.tensors.size()) +
                          " tensors, model expects " + std::to_string(expected));
    auto take = [&](const std::string& name, Matrix& dst) {
        auto it = ck.tensors.find(name);
        if (it == ck.tensors.end())
            throw ConfigError("checkpoint/config mismatch: missing tensor '" + name + "'");
        if (it->second.rows != dst.rows || it->second.cols != dst.cols)
            throw ConfigError("checkpoint/config mismatch: tensor '" + name + "' is " +
                              it->second.shape_str() + ", model expects " + dst.shape_str());
        dst = it->second;
    };
    for (auto& [name, node] : params)
        take(name, node->value);
    for (auto& [name, buf] : buffers)
        take(name, buf);
}

void restore_model(ModelState& m, const Checkpoint& ck) { restore_tensors(m.params, m.buffers, ck); }

}  // namespace emoe
