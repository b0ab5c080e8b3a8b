#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "maskseg/tensor.hpp"

namespace maskseg {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Parameter container: "MSKT0001", u32 record count, then per record
/// u32 name length, name bytes, u32 rank, rank x u32 extents, f64 values.
/// All integers and scalars little-endian.
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

}  // namespace maskseg
