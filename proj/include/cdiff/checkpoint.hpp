#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdiff/params.hpp"
#include "cdiff/tensor.hpp"

namespace cdiff {

static_assert(sizeof(float) == 4, "checkpoint blobs assume 4-byte floats");

struct CheckpointMeta {
    nlohmann::json config_echo;  // effective experiment config
    nlohmann::json schedule;     // noise schedule parameters
    std::string rng_state;
    int64_t step = 0;
};

// Checkpoint layout: <dir>/manifest.json + <dir>/weights.bin.
// weights.bin is the name-sorted concatenation of raw little-endian float32
// tensor data; the manifest records name, shape, and byte offset for each
// tensor, and the offsets must tile the blob exactly.
inline void save_checkpoint(const std::string& dir, const ParamStoreT<float>& store,
                            const CheckpointMeta& meta) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<std::string> names = store.names();
    std::sort(names.begin(), names.end());

    nlohmann::json tensors = nlohmann::json::array();
    std::ofstream blob(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!blob) fail("io", "cannot write weights.bin under " + dir);
    int64_t offset = 0;
    for (const auto& name : names) {
        const Tensor& t = store.get(name).value;
        int64_t bytes = t.numel() * 4;
        tensors.push_back({{"name", name},
                           {"shape", t.shape},
                           {"offset", offset},
                           {"bytes", bytes},
                           {"trainable", store.get(name).trainable}});
        blob.write(reinterpret_cast<const char*>(t.data.data()), bytes);
        offset += bytes;
    }
    blob.close();

    nlohmann::json manifest{{"format_version", 1},
                            {"total_bytes", offset},
                            {"tensors", tensors},
                            {"config", meta.config_echo},
                            {"schedule", meta.schedule},
                            {"rng_state", meta.rng_state},
                            {"step", meta.step}};
    fs::path tmp = fs::path(dir) / "manifest.json.tmp";
    {
        std::ofstream out(tmp);
        if (!out) fail("io", "cannot write checkpoint manifest under " + dir);
        out << manifest.dump(2) << "\n";
    }
    fs::rename(tmp, fs::path(dir) / "manifest.json");
}

// Loads a checkpoint into an already-initialized store. The manifest and the
// store must agree on the exact set of tensor names and shapes, and the
// recorded offsets must tile weights.bin without gaps.
inline CheckpointMeta load_checkpoint(const std::string& dir, ParamStoreT<float>& store) {
    namespace fs = std::filesystem;
    fs::path mpath = fs::path(dir) / "manifest.json";
    if (!fs::exists(mpath)) fail("checkpoint", "no manifest.json under " + dir);
    nlohmann::json manifest;
    {
        std::ifstream in(mpath);
        in >> manifest;
    }
    std::ifstream blob(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!blob) fail("checkpoint", "missing weights.bin under " + dir);

    std::vector<std::string> expected = store.names();
    std::sort(expected.begin(), expected.end());
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != expected.size())
        fail("checkpoint", "tensor count mismatch: checkpoint has " +
                               std::to_string(tensors.size()) + ", model has " +
                               std::to_string(expected.size()));
    int64_t offset = 0;
    for (size_t i = 0; i < tensors.size(); i++) {
        const auto& jt = tensors[i];
        std::string name = jt.at("name").get<std::string>();
        if (name != expected[i])
            fail("checkpoint", "tensor name mismatch at index " + std::to_string(i) + ": " + name +
                                   " vs " + expected[i]);
        Tensor& value = store.get(name).value;
        auto shape = jt.at("shape").get<std::vector<int>>();
        if (shape != value.shape)
            fail("checkpoint", "shape mismatch for " + name + ": checkpoint " + shape_str(shape) +
                                   " vs model " + shape_str(value.shape));
        if (jt.at("offset").get<int64_t>() != offset)
            fail("checkpoint", "offsets do not tile the blob at " + name);
        int64_t bytes = jt.at("bytes").get<int64_t>();
        if (bytes != value.numel() * 4) fail("checkpoint", "byte count mismatch for " + name);
        blob.read(reinterpret_cast<char*>(value.data.data()), bytes);
        if (!blob) fail("checkpoint", "weights.bin truncated at " + name);
        offset += bytes;
    }
    if (manifest.at("total_bytes").get<int64_t>() != offset)
        fail("checkpoint", "total size mismatch in manifest");
    blob.peek();
    if (!blob.eof()) fail("checkpoint", "weights.bin has trailing bytes beyond the manifest");

    CheckpointMeta meta;
    meta.config_echo = manifest.at("config");
    meta.schedule = manifest.at("schedule");
    meta.rng_state = manifest.at("rng_state").get<std::string>();
    meta.step = manifest.at("step").get<int64_t>();
    return meta;
}

inline bool checkpoint_exists(const std::string& dir) {
    return std::filesystem::exists(std::filesystem::path(dir) / "manifest.json");
}

}  // namespace cdiff
