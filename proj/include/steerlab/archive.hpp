#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "steerlab/model.hpp"
#include "steerlab/tensor.hpp"

namespace steerlab {

// Tensor archive, also used for steering parameters and diff datasets.
// Layout (little-endian):
//   magic "STLB1\0" | u32 tensor count
//   per tensor: u16 name length | name bytes | u8 dtype (0 = f32) |
//               u8 rank | u32 dim per axis | row-major f32 payload
//   u32 CRC32 over all payload bytes, in file order
uint32_t crc32(const void* data, size_t n, uint32_t seed = 0);

void save_tensors(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_tensors(const std::string& path);

// Weight-store wrappers; load checks the name set and shapes against the config.
void save_weights(const std::string& path, const WeightStore& store);
WeightStore load_weights(const std::string& path, const ModelConfig& cfg);

uint64_t file_hash(const std::string& path); // FNV-1a over raw bytes

} // namespace steerlab
