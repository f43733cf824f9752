#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "evasim/kv.hpp"

namespace evasim::nn {

// Flat binary container, little-endian:
//   magic "EVASIMCK" | u32 version | u64 metadata bytes | metadata (key-value text)
//   u64 tensor count | per tensor: u32 name bytes, name, u64 rows, u64 cols,
//   rows*cols f64 in row-major order.
struct TensorFile {
  kv::Document meta;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;

  const Eigen::MatrixXd& at(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode(const TensorFile& file);
TensorFile decode(const std::string& bytes);

// Writes through a temporary file; nothing is left behind on failure.
void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

}  // namespace evasim::nn
