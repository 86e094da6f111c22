#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "meshseq/tensor.hpp"

namespace meshseq {

struct Param {
  Tensor value;
  bool trainable = true;
  // Adam moment buffers, allocated by the optimizer on first use.
  Tensor adam_m, adam_v;
};

struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
  bool trainable = true;

  std::size_t size() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }
};

// Named, shaped 64-bit float arrays with a per-parameter trainable flag.
// Iteration order is the name order, which keeps training deterministic.
class ParameterStore {
 public:
  Param& create(const std::string& name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;

  std::map<std::string, Param>& entries() { return params_; }
  const std::map<std::string, Param>& entries() const { return params_; }

  std::size_t total_values() const;
  std::size_t trainable_values() const;

 private:
  std::map<std::string, Param> params_;
};

enum class CheckpointDtype : std::uint8_t { f64 = 0, f32 = 1 };

// Binary format, little-endian: magic "CSHW", version u32, entry count u32,
// manifest entries (name length u32 + UTF-8 name, dtype u8, rank u32,
// dims u64, byte offset u64), then the raw arrays. A sidecar text file
// "<path>.trainable" lists the trainable flags.
void save_checkpoint(const ParameterStore& store, const std::string& path,
                     CheckpointDtype dtype = CheckpointDtype::f32);
ParameterStore load_checkpoint(const std::string& path);

// Manifest-only view of a checkpoint, used to pick named tensors out of it.
struct CheckpointEntry {
  std::string name;
  CheckpointDtype dtype;
  std::vector<std::size_t> shape;
  std::uint64_t offset;
};
std::vector<CheckpointEntry> read_checkpoint_manifest(const std::string& path);
Tensor read_checkpoint_tensor(const std::string& path, const CheckpointEntry& entry);

}  // namespace meshseq
