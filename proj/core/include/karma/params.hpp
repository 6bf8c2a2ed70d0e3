#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "karma/tensor.hpp"

namespace karma::model {

// Named-tensor table holding all trainable parameters plus optimizer moments;
// the checkpoint unit. Iteration follows insertion order so serialization and
// optimizer updates are deterministic. Tensors whose name ends in ".pos"
// (the fixed sinusoidal position tables) are stored but not trained.
struct ParamStore {
    std::vector<std::string> names;
    std::unordered_map<std::string, nd::Tensor> tensors;
    std::unordered_map<std::string, std::vector<double>> opt_m;
    std::unordered_map<std::string, std::vector<double>> opt_v;
    std::uint64_t step = 0;

    void add(const std::string& name, nd::Tensor t);
    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    nd::Tensor& at(const std::string& name);
    const nd::Tensor& at(const std::string& name) const;

    std::vector<std::string> trainable_names() const;
    void zero_grads();
    std::int64_t parameter_count() const;

    // FNV-1a over names and raw data bytes, in insertion order.
    std::uint64_t checksum() const;
};

inline bool is_trainable_name(const std::string& name) {
    return !(name.size() >= 4 && name.compare(name.size() - 4, 4, ".pos") == 0);
}

// Checkpoint file: "KCKP" magic, u32 format version, u32 tensor count, then
// per tensor u16 name length + name, u8 rank, u32 extents, f64 LE payload.
// Optimizer moments ride along as "opt.m.<name>" / "opt.v.<name>" entries; a
// trailing u64 carries the step counter. Round-trips are bit-exact.
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

}  // namespace karma::model
