#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "layerforge/tensor.hpp"

namespace layerforge::lfck {

// LFCK-v1 container:
//   bytes 0-3   magic "LFCK"
//   bytes 4-7   version (u32 little-endian) == 1
//   bytes 8-15  header byte length H (u64 little-endian)
//   16..16+H    UTF-8 JSON {"config": {...}, "tensors": [{name, shape,
//               offset, nbytes}, ...]} with offsets relative to the data
//               section start
//   data        row-major IEEE-754 float32 little-endian, contiguous, in
//               header order, no padding

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct Container {
    std::string config_json = "{}";  // serialized JSON object
    std::vector<NamedTensor> tensors;

    const Tensor* find(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// Byte length a container will occupy on disk (preamble + header + data).
int64_t container_file_size(const Container& c);

}  // namespace layerforge::lfck
