#pragma once

#include <map>
#include <string>

#include "emoe/vit.hpp"

namespace emoe {

// Versioned container: magic "EMOE", u32 version, length-prefixed canonical
// config text, then length-prefixed named tensors (name, u64 rows, u64 cols,
// little-endian f64 payload).
constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string config_text;
    std::map<std::string, Matrix> tensors;
};

void save_checkpoint(const std::string& path, const std::string& config_text,
                     const std::map<std::string, NodePtr>& params,
                     const std::map<std::string, Matrix>& buffers);

Checkpoint load_checkpoint(const std::string& path);

// Key sets must match exactly (params plus buffers); shapes are enforced.
void restore_tensors(std::map<std::string, NodePtr>& params, std::map<std::string, Matrix>& buffers,
                     const Checkpoint& ck);
void restore_model(ModelState& m, const Checkpoint& ck);

}  // namespace emoe
