#pragma once

#include "promptpar/autodiff.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace promptpar {

// Single-file container of named tensors and text blobs. Used for checkpoints
// and for pretrained weight bundles.
//
// Layout (little-endian):
//   "PPARCHV1"  u32 tensor_count  u32 text_count
//   per tensor: u32 name_len, name, u8 trainable, u32 rows, u32 cols, rows*cols f64 row-major
//   per text:   u32 name_len, name, u64 len, bytes
struct Archive {
  struct Tensor {
    bool trainable = false;
    ad::Matrix value;
  };
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> texts;

  void save(const std::string& path) const;
  static Archive load(const std::string& path);

  std::string serialize() const;
  static Archive deserialize(const std::string& bytes);
};

// 64-bit FNV-1a, hex-encoded.
std::string digest_hex(const std::string& bytes);

}  // namespace promptpar
